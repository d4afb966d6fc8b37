//! Dense generator and discriminator networks.
//!
//! The discriminator is split as `D(x) = L(f(x))`: the network here is the
//! raw scalar-output `f`, and the loss `L` lives in [`crate::losses`].

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<'t>(&self, x: Var<'t>) -> Var<'t> {
        match *self {
            Activation::LeakyRelu { slope } => x.leaky_relu(slope),
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Lipschitz constant of the elementwise map.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Activation::LeakyRelu { slope } => slope.abs().max(1.0),
            Activation::Relu | Activation::Tanh | Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input width followed by each layer's output width.
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpConfig {
    /// Raw scalar-output discriminator with leaky-ReLU(0.2) hidden layers.
    pub fn discriminator(widths: Vec<usize>) -> Self {
        MlpConfig {
            widths,
            hidden: Activation::LeakyRelu { slope: 0.2 },
            output: Activation::Identity,
        }
    }

    /// Generator with tanh output, so samples live in `[-1, 1]^d`.
    pub fn generator(widths: Vec<usize>) -> Self {
        MlpConfig {
            widths,
            hidden: Activation::LeakyRelu { slope: 0.2 },
            output: Activation::Tanh,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "need an input width and at least one layer, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("zero width in {:?}", self.widths)));
        }
        if let Activation::LeakyRelu { slope } = self.hidden {
            if !(slope > 0.0 && slope <= 1.0) {
                return Err(Error::Config(format!("leaky-relu slope {slope} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn validate_discriminator(&self) -> Result<()> {
        self.validate()?;
        if self.output_width() != 1 {
            return Err(Error::Config(format!(
                "discriminator must end in width 1, got {:?}",
                self.widths
            )));
        }
        if self.output != Activation::Identity {
            return Err(Error::Config("discriminator output must be the raw score".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[in, out]`; a batch `x: [B, in]` maps to `x · W + b`.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Weights and biases of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub layers: Vec<Layer>,
}

/// A network's parameters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

/// Glorot-uniform weights and zero biases.
pub fn init_params(cfg: &MlpConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = cfg
        .widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            Layer {
                weight: Tensor::matrix(fan_in, fan_out, data).expect("sized above"),
                bias: Tensor::zeros(&[fan_out]),
            }
        })
        .collect();
    Ok(ParamStore { layers })
}

impl ParamStore {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Parameter tensors in a fixed order: `W0, b0, W1, b1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_values(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn shapes_chain(&self) -> bool {
        self.layers
            .windows(2)
            .all(|w| w[0].weight.shape()[1] == w[1].weight.shape()[0])
    }

    /// Registers every weight and bias as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<LayerVars<'t>> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.var(l.weight.clone()),
                bias: tape.var(l.bias.clone()),
            })
            .collect()
    }

    /// Registers the parameters as constants (no gradient).
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Vec<LayerVars<'t>> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.constant(l.weight.clone()),
                bias: tape.constant(l.bias.clone()),
            })
            .collect()
    }

    /// Flattened variables in the same order as [`ParamStore::tensors`].
    pub fn flatten_vars<'t>(vars: &[LayerVars<'t>]) -> Vec<Var<'t>> {
        vars.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::Format(format!(
                "expected {} parameter values, got {}",
                self.num_values(),
                values.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Affine-activation chain on the tape. Hidden layers use `cfg.hidden`, the
/// last layer uses `cfg.output`.
pub fn forward<'t>(cfg: &MlpConfig, layers: &[LayerVars<'t>], batch: Var<'t>) -> Result<Var<'t>> {
    let shape = batch.shape();
    if shape.len() != 2 || shape[1] != cfg.input_width() {
        return Err(Error::Config(format!(
            "batch shape {:?} does not match input width {}",
            shape,
            cfg.input_width()
        )));
    }
    if layers.len() != cfg.num_layers() {
        return Err(Error::Config(format!(
            "config has {} layers, parameters have {}",
            cfg.num_layers(),
            layers.len()
        )));
    }
    let last = layers.len() - 1;
    let mut h = batch;
    for (i, layer) in layers.iter().enumerate() {
        h = h.affine(layer.weight, layer.bias)?;
        h = if i == last {
            cfg.output.apply(h)
        } else {
            cfg.hidden.apply(h)
        };
    }
    Ok(h)
}

/// Evaluates the network on a plain tensor, off any caller tape.
pub fn forward_values(cfg: &MlpConfig, params: &ParamStore, batch: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let layers = params.bind_constant(&tape);
    let x = tape.constant(batch.clone());
    Ok(forward(cfg, &layers, x)?.value())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub seed: u64,
    pub iteration: usize,
    pub num_values: usize,
}

/// Writes a one-line JSON header followed by the parameters as raw
/// little-endian `f64`s.
pub fn save_checkpoint(path: &Path, cfg: &MlpConfig, params: &ParamStore, seed: u64, iteration: usize) -> Result<()> {
    let header = CheckpointHeader {
        widths: cfg.widths.clone(),
        hidden: cfg.hidden,
        output: cfg.output,
        seed,
        iteration,
        num_values: params.num_values(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for v in params.tensors().flat_map(|t| t.data()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, MlpConfig, ParamStore)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&line)
        .map_err(|e| Error::Format(format!("bad checkpoint header in {}: {e}", path.display())))?;
    let mut body = Vec::new();
    reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != header.num_values * 8 {
        return Err(Error::Format(format!(
            "checkpoint {} expects {} bytes of parameters, found {}",
            path.display(),
            header.num_values * 8,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let cfg = MlpConfig {
        widths: header.widths.clone(),
        hidden: header.hidden,
        output: header.output,
    };
    let mut params = init_params(&cfg, 0)?;
    params.set_flat_values(&values)?;
    Ok((header, cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_chained() {
        let cfg = MlpConfig::discriminator(vec![2, 8, 1]);
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&cfg, 8).unwrap());
        assert_eq!(a.layers[0].weight.shape(), &[2, 8]);
        assert_eq!(a.layers[1].weight.shape(), &[8, 1]);
        assert!(a.shapes_chain());
        assert!(a.layers.iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn glorot_weights_are_centred() {
        let cfg = MlpConfig::discriminator(vec![100, 100, 1]);
        let p = init_params(&cfg, 3).unwrap();
        let w = p.layers[0].weight.data();
        let limit = (6.0f64 / 200.0).sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        // uniform(-a, a) has std a/sqrt(3); mean of n draws has std a/sqrt(3n)
        let sd_of_mean = limit / (3.0 * w.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sd_of_mean, "mean {mean}");
        assert!(w.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn zero_width_rejected() {
        assert!(init_params(&MlpConfig::discriminator(vec![2, 0, 1]), 0).is_err());
        assert!(MlpConfig::discriminator(vec![2, 4, 3])
            .validate_discriminator()
            .is_err());
        assert!(MlpConfig::discriminator(vec![2, 4, 1]).validate_discriminator().is_ok());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let cfg = MlpConfig::discriminator(vec![3, 5, 1]);
        let mut p = init_params(&cfg, 1).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.3, 0.3, 0.9]).unwrap();
        let y = forward_values(&cfg, &p, &x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let cfg = MlpConfig {
            widths: vec![2, 2],
            hidden: Activation::Identity,
            output: Activation::Identity,
        };
        let p = ParamStore {
            layers: vec![Layer {
                weight: Tensor::identity(2),
                bias: Tensor::zeros(&[2]),
            }],
        };
        let x = Tensor::matrix(2, 2, vec![1.0, -3.0, 0.25, 8.0]).unwrap();
        assert_eq!(forward_values(&cfg, &p, &x).unwrap(), x);
    }

    #[test]
    fn wrong_batch_width() {
        let cfg = MlpConfig::discriminator(vec![2, 4, 1]);
        let p = init_params(&cfg, 0).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(forward_values(&cfg, &p, &x), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let cfg = MlpConfig::discriminator(vec![2, 6, 1]);
        let p = init_params(&cfg, 11).unwrap();
        save_checkpoint(&path, &cfg, &p, 11, 42).unwrap();
        let (header, cfg2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(header.iteration, 42);
        assert_eq!(cfg2, cfg);
        assert_eq!(p2, p);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
