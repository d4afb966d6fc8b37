//! Spectral normalization, gradient penalty, and Lipschitz bounds.
//!
//! A network that is `k`-Lipschitz on inputs in a box maps that box into an
//! interval of width at most `k · diameter(box)`. With `M = max |L''|` on that
//! interval, the gradients the loss can backpropagate span at most
//! `M · k · diameter`. [`domain_bound`] and [`gradient_interval_bound`]
//! compute those two numbers; the rest of this module controls `k`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerVars, MlpConfig, ParamStore};
use crate::tensor::Tensor;

/// Iterations used to warm up a freshly created power-iteration state.
pub const COLD_START_ITERS: usize = 50;

/// Largest singular value, from a full SVD.
pub fn spectral_norm_svd(w: &Tensor) -> f64 {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `W v` for `W: [rows, cols]`.
fn mat_vec(w: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| w.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `Wᵀ u` for `W: [rows, cols]`.
fn mat_t_vec(w: &Tensor, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (r, &ur) in u.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(w.row(r)) {
            *o += a * ur;
        }
    }
    out
}

/// Power-iteration state for one weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnState {
    /// Unit estimate of the leading left singular vector (length = rows of W).
    pub u: Vec<f64>,
    /// Matching right vector from the latest iteration.
    pub v: Vec<f64>,
    pub power_iters_per_step: usize,
}

/// Result of [`power_iteration`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaEstimate {
    pub sigma: f64,
    /// Set when `W` is the zero matrix; `sigma` is then 0.
    pub degenerate: bool,
}

impl SnState {
    /// Random unit `u` sized for `w`.
    pub fn new<R: Rng + ?Sized>(w: &Tensor, power_iters_per_step: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..w.rows()).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut u) == 0.0 {
            u[0] = 1.0;
        }
        SnState {
            u,
            v: vec![0.0; w.cols()],
            power_iters_per_step: power_iters_per_step.max(1),
        }
    }
}

/// Runs `iters` power iterations on `w`, updating `state.u`/`state.v` in
/// place, and returns the Rayleigh estimate `σ̂ = uᵀ W v = ‖W v‖ ≤ σ(W)`.
pub fn power_iteration_n(w: &Tensor, state: &mut SnState, iters: usize) -> SigmaEstimate {
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let mut v = mat_t_vec(w, &state.u);
        if normalize(&mut v) == 0.0 {
            // u is orthogonal to the row space (or W = 0); restart from a
            // deterministic direction.
            if w.data().iter().all(|&x| x == 0.0) {
                return SigmaEstimate {
                    sigma: 0.0,
                    degenerate: true,
                };
            }
            let r = (0..w.rows())
                .max_by(|&a, &b| {
                    let na: f64 = w.row(a).iter().map(|x| x * x).sum();
                    let nb: f64 = w.row(b).iter().map(|x| x * x).sum();
                    na.total_cmp(&nb)
                })
                .unwrap_or(0);
            state.u.iter_mut().for_each(|x| *x = 0.0);
            state.u[r] = 1.0;
            v = mat_t_vec(w, &state.u);
            normalize(&mut v);
        }
        let mut u = mat_vec(w, &v);
        sigma = normalize(&mut u);
        state.u = u;
        state.v = v;
    }
    SigmaEstimate {
        sigma,
        degenerate: false,
    }
}

/// One training-step update: `state.power_iters_per_step` iterations.
pub fn power_iteration(w: &Tensor, state: &mut SnState) -> SigmaEstimate {
    let n = state.power_iters_per_step;
    power_iteration_n(w, state, n)
}

/// Spectral normalization `W̄ = k_SN · W / σ(W)` for every layer of one
/// network, with persistent power-iteration states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralNorm {
    pub k_sn: f64,
    pub states: Vec<SnState>,
}

impl SpectralNorm {
    /// Fresh states, each warmed up with [`COLD_START_ITERS`] iterations.
    pub fn new<R: Rng + ?Sized>(
        params: &ParamStore,
        k_sn: f64,
        power_iters_per_step: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(k_sn > 0.0) || !k_sn.is_finite() {
            return Err(Error::Config(format!("k_sn must be positive, got {k_sn}")));
        }
        let states = params
            .layers
            .iter()
            .map(|l| {
                let mut s = SnState::new(&l.weight, power_iters_per_step, rng);
                power_iteration_n(&l.weight, &mut s, COLD_START_ITERS);
                s
            })
            .collect();
        Ok(SpectralNorm { k_sn, states })
    }

    fn check_layers(&self, n: usize) -> Result<()> {
        if self.states.len() != n {
            return Err(Error::Config(format!(
                "{} power-iteration states for {} layers",
                self.states.len(),
                n
            )));
        }
        Ok(())
    }

    /// Advances every state by its per-step iteration count.
    pub fn update(&mut self, params: &ParamStore) -> Result<Vec<SigmaEstimate>> {
        self.check_layers(params.num_layers())?;
        Ok(params
            .layers
            .iter()
            .zip(&mut self.states)
            .map(|(l, s)| power_iteration(&l.weight, s))
            .collect())
    }

    /// Iterates every state until successive estimates agree to `rel_tol`
    /// or `max_iters` is reached. Returns the final estimates.
    pub fn converge(&mut self, params: &ParamStore, rel_tol: f64, max_iters: usize) -> Result<Vec<SigmaEstimate>> {
        self.check_layers(params.num_layers())?;
        Ok(params
            .layers
            .iter()
            .zip(&mut self.states)
            .map(|(l, s)| {
                let mut est = power_iteration_n(&l.weight, s, 1);
                for _ in 1..max_iters {
                    let next = power_iteration_n(&l.weight, s, 1);
                    let done = next.degenerate || (next.sigma - est.sigma).abs() <= rel_tol * next.sigma;
                    est = next;
                    if done {
                        break;
                    }
                }
                est
            })
            .collect())
    }

    /// Replaces each bound weight by its normalized version on the tape.
    ///
    /// `σ̂ = uᵀ W v` is recomputed from `W` with `u`, `v` held constant, so
    /// gradients flow through the normalization. A zero matrix is passed
    /// through unchanged.
    pub fn normalize_vars<'t>(&self, tape: &'t Tape, layers: &[LayerVars<'t>]) -> Result<Vec<LayerVars<'t>>> {
        self.check_layers(layers.len())?;
        layers
            .iter()
            .zip(&self.states)
            .map(|(l, s)| {
                let (rows, cols) = (s.u.len(), s.v.len());
                let outer: Vec<f64> = s.u.iter().flat_map(|&a| s.v.iter().map(move |&b| a * b)).collect();
                let outer = tape.constant(Tensor::matrix(rows, cols, outer)?);
                let sigma = l.weight.mul(outer)?.sum();
                if sigma.item()? <= 0.0 {
                    log::warn!("spectral normalization skipped for a zero or degenerate weight");
                    return Ok(*l);
                }
                let factor = tape.constant(Tensor::scalar(self.k_sn)).div(sigma)?;
                Ok(LayerVars {
                    weight: l.weight.scale_by(factor)?,
                    bias: l.bias,
                })
            })
            .collect()
    }

    /// The normalized weights as plain tensors, using the current states.
    pub fn normalized_params(&self, params: &ParamStore) -> Result<ParamStore> {
        self.check_layers(params.num_layers())?;
        let mut out = params.clone();
        for (l, s) in out.layers.iter_mut().zip(&self.states) {
            let sigma: f64 = mat_vec(&l.weight, &s.v).iter().zip(&s.u).map(|(a, b)| a * b).sum();
            if sigma > 0.0 {
                let f = self.k_sn / sigma;
                l.weight.data_mut().iter_mut().for_each(|x| *x *= f);
            }
        }
        Ok(out)
    }
}

/// Settings of the gradient penalty `λ·E[(‖∇D(x̂)‖ - k_GP)²]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub lambda: f64,
    pub k_gp: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            lambda: 10.0,
            k_gp: 1.0,
        }
    }
}

/// Gradient penalty on straight-line interpolates between real and fake
/// rows, `x̂ = ε·x_real + (1-ε)·x_fake` with one `ε ~ U(0,1)` per row.
///
/// `disc` maps a `[B, d]` batch to raw scores (`[B]` or `[B, 1]`). The result
/// is a scalar node that can be differentiated with respect to whatever
/// parameters `disc` closes over.
pub fn gradient_penalty<'t, F, R>(
    tape: &'t Tape,
    disc: F,
    x_real: &Tensor,
    x_fake: &Tensor,
    cfg: &GpConfig,
    rng: &mut R,
) -> Result<Var<'t>>
where
    F: Fn(Var<'t>) -> Result<Var<'t>>,
    R: Rng + ?Sized,
{
    if x_real.shape() != x_fake.shape() || x_real.shape().len() != 2 {
        return Err(Error::Usage(format!(
            "gradient penalty needs equal [B, d] batches, got {:?} and {:?}",
            x_real.shape(),
            x_fake.shape()
        )));
    }
    if !(cfg.lambda >= 0.0) || !(cfg.k_gp >= 0.0) {
        return Err(Error::Config(format!("invalid gradient penalty settings {cfg:?}")));
    }
    let (b, d) = (x_real.rows(), x_real.cols());
    let mut mixed = Vec::with_capacity(b * d);
    for r in 0..b {
        let eps: f64 = rng.random();
        mixed.extend(
            x_real
                .row(r)
                .iter()
                .zip(x_fake.row(r))
                .map(|(xr, xf)| eps * xr + (1.0 - eps) * xf),
        );
    }
    let x_hat = tape.var(Tensor::matrix(b, d, mixed)?);
    // Rows are independent, so the gradient of the summed scores holds each
    // sample's input gradient in its own row.
    let total = disc(x_hat)?.sum();
    let grad = tape.backward_differentiable(total, &[x_hat])?[0];
    let norms = grad.square().sum_cols()?.add_scalar(1e-12).sqrt()?;
    Ok(norms.add_scalar(-cfg.k_gp).square().mean().scale(cfg.lambda))
}

/// Largest possible spread of outputs of a `k`-Lipschitz map on the box
/// `[lo, hi]^shape`: `k · (hi - lo) · sqrt(#elements)`.
pub fn domain_bound(k: f64, input_shape: &[usize], value_range: (f64, f64)) -> Result<f64> {
    let (lo, hi) = value_range;
    if !(hi >= lo) {
        return Err(Error::Usage(format!("value range [{lo}, {hi}] is inverted")));
    }
    if !(k >= 0.0) {
        return Err(Error::Usage(format!("Lipschitz constant {k} is negative")));
    }
    let elements: usize = input_shape.iter().product();
    Ok(k * (hi - lo) * (elements as f64).sqrt())
}

/// `M · domain_bound(K, ...)`: the widest interval of loss gradients a
/// `K`-Lipschitz discriminator can produce when `|L''| ≤ M`.
pub fn gradient_interval_bound(m: f64, k: f64, input_shape: &[usize], value_range: (f64, f64)) -> Result<f64> {
    if !(m >= 0.0) {
        return Err(Error::Usage(format!("second-derivative bound {m} is negative")));
    }
    Ok(m * domain_bound(k, input_shape, value_range)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzEstimate {
    pub value: f64,
    /// No pair of distinct samples was available.
    pub degenerate: bool,
}

/// Largest `|f(x₁) - f(x₂)| / ‖x₁ - x₂‖` over `pairs` random row pairs of
/// `samples`. A lower bound on the true Lipschitz constant.
pub fn empirical_lipschitz<F, R>(f: F, samples: &Tensor, pairs: usize, rng: &mut R) -> Result<LipschitzEstimate>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    let n = samples.rows();
    if n < 2 || samples.shape().len() != 2 {
        return Err(Error::Usage("need at least two samples in a [N, d] matrix".into()));
    }
    let outputs = f(samples)?;
    if outputs.numel() != n {
        return Err(Error::Usage("f must return one scalar per sample".into()));
    }
    let out = outputs.data();
    let mut best: f64 = 0.0;
    let mut seen = false;
    for _ in 0..pairs {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let dist = samples
            .row(i)
            .iter()
            .zip(samples.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist == 0.0 {
            continue;
        }
        seen = true;
        best = best.max((out[i] - out[j]).abs() / dist);
    }
    Ok(LipschitzEstimate {
        value: best,
        degenerate: !seen,
    })
}

/// `Π σ(W_l) · Π Lip(activation_l)` with exact spectral norms.
pub fn lipschitz_upper_bound(params: &ParamStore, cfg: &MlpConfig) -> f64 {
    let last = params.num_layers().saturating_sub(1);
    params
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let act = if i == last { cfg.output } else { cfg.hidden };
            spectral_norm_svd(&l.weight) * act.lipschitz()
        })
        .product()
}
