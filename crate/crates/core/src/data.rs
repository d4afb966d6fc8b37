//! Toy 2-D distributions, latent noise, and the MNIST IDX reader.

use std::f64::consts::TAU;
use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ToyDistribution {
    /// `modes` isotropic Gaussians evenly spaced on a circle.
    GaussianRing {
        modes: usize,
        radius: f64,
        std: f64,
    },
    /// `side × side` Gaussians on a square lattice centred at the origin.
    Grid {
        side: usize,
        spacing: f64,
        std: f64,
    },
    PointMass {
        location: [f64; 2],
    },
}

impl ToyDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ToyDistribution::GaussianRing { modes, std, .. } if modes == 0 || std < 0.0 => {
                Err(Error::Config(format!("ring needs modes ≥ 1 and std ≥ 0, got {self:?}")))
            }
            ToyDistribution::Grid { side, std, .. } if side == 0 || std < 0.0 => {
                Err(Error::Config(format!("grid needs side ≥ 1 and std ≥ 0, got {self:?}")))
            }
            _ => Ok(()),
        }
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        match *self {
            ToyDistribution::GaussianRing { modes, radius, .. } => (0..modes)
                .map(|k| {
                    let a = TAU * k as f64 / modes as f64;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            ToyDistribution::Grid { side, spacing, .. } => {
                let offset = 0.5 * (side as f64 - 1.0) * spacing;
                (0..side * side)
                    .map(|k| {
                        [
                            (k % side) as f64 * spacing - offset,
                            (k / side) as f64 * spacing - offset,
                        ]
                    })
                    .collect()
            }
            ToyDistribution::PointMass { location } => vec![location],
        }
    }

    pub fn std(&self) -> f64 {
        match *self {
            ToyDistribution::GaussianRing { std, .. } | ToyDistribution::Grid { std, .. } => std,
            ToyDistribution::PointMass { .. } => 0.0,
        }
    }
}

/// `n` i.i.d. draws: a uniformly chosen mode plus `N(0, std²·I)` noise.
pub fn sample_real<R: Rng + ?Sized>(dist: &ToyDistribution, n: usize, rng: &mut R) -> Result<Tensor> {
    dist.validate()?;
    let centers = dist.centers();
    let std = dist.std();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = centers[rng.random_range(0..centers.len())];
        for coord in c {
            let z: f64 = if std > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            data.push(coord + std * z);
        }
    }
    Tensor::matrix(n, 2, data)
}

/// Standard normal latent codes, `[n, dim]`.
pub fn sample_noise<R: Rng + ?Sized>(dim: usize, n: usize, rng: &mut R) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::Config("latent dimension must be at least 1".into()));
    }
    let data = (0..dim * n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(n, dim, data)
}

/// Images flattened to rows of `rows·cols·channels` values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub images: Tensor,
    pub dims: (usize, usize, usize),
    pub labels: Option<Vec<u8>>,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    /// Rows drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::Usage("sampling from an empty dataset".into()));
        }
        let width = self.pixel_count();
        let mut data = Vec::with_capacity(n * width);
        for _ in 0..n {
            data.extend_from_slice(self.images.row(rng.random_range(0..self.len())));
        }
        Tensor::matrix(n, width, data)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| {
            Error::Format(format!(
                "{}: truncated header, expected at least {} bytes, found {}",
                path.display(),
                at + 4,
                bytes.len()
            ))
        })
}

fn check_magic(found: u32, expected: u32, path: &Path) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!(
            "{}: bad IDX magic 0x{found:08x}, expected 0x{expected:08x}",
            path.display()
        )));
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(())
}

/// Parses big-endian IDX image (and optionally label) files, gzip or raw.
/// Pixels map to `p / 127.5 - 1`.
pub fn load_mnist_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<ImageDataset> {
    let bytes = read_maybe_gz(images_path)?;
    check_magic(be_u32(&bytes, 0, images_path)?, IDX_IMAGES_MAGIC, images_path)?;
    let n = be_u32(&bytes, 4, images_path)? as usize;
    let rows = be_u32(&bytes, 8, images_path)? as usize;
    let cols = be_u32(&bytes, 12, images_path)? as usize;
    check_len(&bytes, 16 + n * rows * cols, images_path)?;
    let data = bytes[16..].iter().map(|&p| f64::from(p) / 127.5 - 1.0).collect();
    let images = Tensor::matrix(n, rows * cols, data)?;

    let labels = match labels_path {
        None => None,
        Some(path) => {
            let bytes = read_maybe_gz(path)?;
            check_magic(be_u32(&bytes, 0, path)?, IDX_LABELS_MAGIC, path)?;
            let count = be_u32(&bytes, 4, path)? as usize;
            check_len(&bytes, 8 + count, path)?;
            if count != n {
                return Err(Error::Format(format!(
                    "{}: {count} labels for {n} images",
                    path.display()
                )));
            }
            Some(bytes[8..].to_vec())
        }
    };
    Ok(ImageDataset {
        images,
        dims: (rows, cols, 1),
        labels,
    })
}
