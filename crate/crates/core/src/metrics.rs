//! Domain and gradient-interval instrumentation, plus sample-quality metrics.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Interval, LossSpec, Term};
use crate::tensor::Tensor;

/// One training iteration's view of the loss domain.
///
/// `omega` is the score range over the real and fake batch together. `psi`
/// and `psi_fake` are the loss-gradient ranges of the real and fake
/// discriminator terms evaluated on every score in `omega`'s batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub omega: Interval,
    pub omega_real: Interval,
    pub omega_fake: Interval,
    pub psi: Interval,
    pub psi_fake: Interval,
    pub loss_d: f64,
    pub loss_g: f64,
    /// Theorem-style width bound `K̂·diameter` when the discriminator's
    /// Lipschitz constant was tracked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_bound: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainTrace {
    pub records: Vec<TraceRecord>,
}

impl DomainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    /// Union of all per-iteration domains.
    pub fn cumulative_hull(&self) -> Option<Interval> {
        self.records.iter().map(|r| r.omega).reduce(|a, b| a.hull(&b))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), n + 1)))?;
            records.push(rec);
        }
        Ok(DomainTrace { records })
    }
}

/// Exact `[min, max]` of a batch of scores.
pub fn record_interval(scores: &[f64]) -> Result<Interval> {
    if scores.is_empty() {
        return Err(Error::Usage("interval of an empty batch".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Interval::new(lo, hi)
}

/// `[min, max]` of the loss-term gradient over a batch of scores.
pub fn attained_gradient_interval(spec: &LossSpec, term: Term, scores: &[f64]) -> Result<Interval> {
    let grads: Vec<f64> = scores.iter().map(|&w| spec.pointwise_grad(term, w)).collect();
    record_interval(&grads)
}

/// Midpoint drift of the per-iteration domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftSeries {
    pub midpoints: Vec<f64>,
    /// `|m_i - m_{i-window}|` for every `i ≥ window`; a single
    /// first-to-last difference when the window covers the whole trace.
    pub drift: Vec<f64>,
}

pub fn domain_drift(trace: &DomainTrace, window: usize) -> Result<DriftSeries> {
    if trace.is_empty() {
        return Err(Error::Usage("drift of an empty trace".into()));
    }
    if window == 0 {
        return Err(Error::Usage("drift window must be at least 1".into()));
    }
    let midpoints: Vec<f64> = trace.records.iter().map(|r| r.omega.midpoint()).collect();
    let drift = if window >= midpoints.len() {
        vec![(midpoints[midpoints.len() - 1] - midpoints[0]).abs()]
    } else {
        (window..midpoints.len())
            .map(|i| (midpoints[i] - midpoints[i - window]).abs())
            .collect()
    };
    Ok(DriftSeries { midpoints, drift })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frechet {
    pub distance: f64,
    /// A covariance was singular and got `1e-9·I` added.
    pub regularized: bool,
}

fn moments(x: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean().transpose();
    let mut cov = DMatrix::zeros(d, d);
    for r in 0..n {
        let c = m.row(r).transpose() - &mean;
        cov += &c * c.transpose();
    }
    (mean, cov / (n as f64 - 1.0))
}

fn sqrtm_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn regularize(cov: &mut DMatrix<f64>) -> bool {
    let min_eig = ((&*cov + cov.transpose()) * 0.5).symmetric_eigen().eigenvalues.min();
    if min_eig <= 0.0 {
        for i in 0..cov.nrows() {
            cov[(i, i)] += 1e-9;
        }
        true
    } else {
        false
    }
}

/// `√(‖μ₁-μ₂‖² + Tr(Σ₁ + Σ₂ - 2(Σ₁Σ₂)^{1/2}))` for given moments.
pub fn frechet_from_moments(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> f64 {
    let s1 = sqrtm_psd(cov1);
    // Tr((Σ₁Σ₂)^{1/2}) = Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}), which is symmetric.
    let cross = sqrtm_psd(&(&s1 * cov2 * &s1)).trace();
    let d2 = (mu1 - mu2).norm_squared() + cov1.trace() + cov2.trace() - 2.0 * cross;
    d2.max(0.0).sqrt()
}

/// Fréchet distance between Gaussians fitted to two sample sets.
pub fn frechet_gaussian(a: &Tensor, b: &Tensor) -> Result<Frechet> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::Usage(format!(
            "Fréchet distance needs [N, d] and [M, d], got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let d = a.cols();
    if a.rows() < d + 1 || b.rows() < d + 1 {
        return Err(Error::Usage(format!(
            "need at least {} samples per set for dimension {d}",
            d + 1
        )));
    }
    let (mu1, mut c1) = moments(a);
    let (mu2, mut c2) = moments(b);
    let r1 = regularize(&mut c1);
    let r2 = regularize(&mut c2);
    if r1 || r2 {
        log::warn!("singular covariance regularized with 1e-9·I");
    }
    Ok(Frechet {
        distance: frechet_from_moments(&mu1, &c1, &mu2, &c2),
        regularized: r1 || r2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    pub covered: usize,
    pub modes: usize,
    /// Share of samples within `radius` of some centre.
    pub hq_fraction: f64,
}

/// A centre counts as covered when at least `max(1, N/(10·K))` samples lie
/// within `radius` of it.
pub fn mode_coverage(samples: &Tensor, centers: &[[f64; 2]], radius: f64) -> Result<Coverage> {
    if centers.is_empty() {
        return Err(Error::Usage("mode coverage needs at least one centre".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Usage(format!("coverage radius must be positive, got {radius}")));
    }
    if samples.shape().len() != 2 || samples.cols() != 2 {
        return Err(Error::Usage(format!(
            "mode coverage needs [N, 2] samples, got {:?}",
            samples.shape()
        )));
    }
    let n = samples.rows();
    let mut counts = vec![0usize; centers.len()];
    let mut good = 0usize;
    for r in 0..n {
        let p = samples.row(r);
        let nearest = centers
            .iter()
            .enumerate()
            .map(|(k, c)| (k, (c[0] - p[0]).hypot(c[1] - p[1])))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((k, dist)) = nearest {
            if dist <= radius {
                counts[k] += 1;
                good += 1;
            }
        }
    }
    let threshold = (n as f64 / (10.0 * centers.len() as f64)).max(1.0);
    Ok(Coverage {
        covered: counts.iter().filter(|&&c| c as f64 >= threshold).count(),
        modes: centers.len(),
        hq_fraction: if n == 0 { 0.0 } else { good as f64 / n as f64 },
    })
}
