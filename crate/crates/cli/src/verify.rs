//! Quick property suite behind `lipgan verify`.

use lipgan::autodiff::{finite_diff_check, Tape};
use lipgan::lipschitz::{gradient_penalty, lipschitz_upper_bound, spectral_norm_svd, GpConfig, SpectralNorm};
use lipgan::losses::{LossKind, LossSpec, Term, MIN_ALPHA};
use lipgan::nn::{forward, init_params, Layer, MlpConfig, ParamStore};
use lipgan::trainer::{train, ExperimentConfig, RegularizerSpec};
use lipgan::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn loss_gradients() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for kind in LossKind::ALL {
        for alpha in [1.0, 0.25, 4.0] {
            let spec = LossSpec::new(kind, alpha)?;
            let scores = uniform(&mut rng, &[7], 1.5);
            for term in Term::ALL {
                worst = worst.max(finite_diff_check(|x| spec.term_mean(term, x), &scores, 1e-6));
            }
        }
    }
    Ok(Check {
        name: "loss gradients match finite differences",
        pass: worst < 1e-5,
        detail: format!("worst relative error {worst:.1e}"),
    })
}

fn penalty_gradients() -> Result<Check> {
    let mut worst: f64 = 0.0;
    for widths in [vec![2, 8, 1], vec![2, 8, 8, 1]] {
        let cfg = MlpConfig::discriminator(widths);
        let params = init_params(&cfg, 4)?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let real = uniform(&mut rng, &[6, 2], 1.0);
        let fake = uniform(&mut rng, &[6, 2], 1.0);
        let value = |p: &ParamStore, grads: bool| -> Result<(f64, Vec<f64>)> {
            let tape = Tape::new();
            let vars = if grads { p.bind(&tape) } else { p.bind_constant(&tape) };
            let gp = gradient_penalty(
                &tape,
                |x| forward(&cfg, &vars, x),
                &real,
                &fake,
                &GpConfig::default(),
                &mut ChaCha8Rng::seed_from_u64(3),
            )?;
            let g = if grads {
                tape.backward(gp, &ParamStore::flatten_vars(&vars))?
                    .iter()
                    .flat_map(|t| t.data().to_vec())
                    .collect()
            } else {
                Vec::new()
            };
            Ok((gp.item()?, g))
        };
        let analytic = value(&params, true)?.1;
        let flat = params.flat_values();
        let h = 1e-6;
        let (mut diff2, mut scale2) = (0.0, 0.0);
        for i in 0..flat.len() {
            let mut p = params.clone();
            let mut v = flat.clone();
            v[i] += h;
            p.set_flat_values(&v)?;
            let up = value(&p, false)?.0;
            v[i] -= 2.0 * h;
            p.set_flat_values(&v)?;
            let numeric = (up - value(&p, false)?.0) / (2.0 * h);
            diff2 += (numeric - analytic[i]).powi(2);
            scale2 += analytic[i].powi(2).max(numeric.powi(2));
        }
        worst = worst.max(diff2.sqrt() / scale2.sqrt().max(f64::MIN_POSITIVE));
    }
    Ok(Check {
        name: "gradient penalty double backprop",
        pass: worst < 1e-4,
        detail: format!("worst relative error {worst:.1e} on 2- and 3-layer nets"),
    })
}

fn spectral_norms() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (r, c) = (rng.random_range(1..24), rng.random_range(1..24));
        let weight = uniform(&mut rng, &[r, c], 2.0);
        let params = ParamStore {
            layers: vec![Layer {
                weight,
                bias: Tensor::zeros(&[c]),
            }],
        };
        let mut sn = SpectralNorm::new(&params, 1.0, 1, &mut rng)?;
        sn.converge(&params, 1e-14, 20_000)?;
        for k in [0.25, 0.5, 1.0, 5.0, 50.0] {
            sn.k_sn = k;
            let w = &sn.normalized_params(&params)?.layers[0].weight;
            worst = worst.max((spectral_norm_svd(w) - k).abs());
        }
    }
    let cfg = MlpConfig::discriminator(vec![2, 16, 16, 1]);
    let params = init_params(&cfg, 0)?;
    let mut sn = SpectralNorm::new(&params, 0.5, 1, &mut rng)?;
    sn.converge(&params, 1e-14, 20_000)?;
    let product = lipschitz_upper_bound(&sn.normalized_params(&params)?, &cfg) / 0.5f64.powi(3);
    Ok(Check {
        name: "spectral normalization hits k_SN",
        pass: worst <= 1e-3 && (product - 1.0).abs() <= 5e-3,
        detail: format!("max |σ - k_SN| {worst:.1e}; product bound / k_SN^3 = {product:.6}"),
    })
}

fn live_bounds() -> Result<Check> {
    let (mut iters, mut bound, mut corollary, mut failed) = (0, 0, 0, 0);
    for (k, kind) in [(0.5, LossKind::Ns), (1.0, LossKind::Ls), (2.0, LossKind::Cos)] {
        let mut cfg = ExperimentConfig::toy_ring();
        cfg.loss = LossSpec::unscaled(kind);
        cfg.generator = MlpConfig::generator(vec![4, 16, 2]);
        cfg.discriminator = MlpConfig::discriminator(vec![2, 16, 16, 1]);
        cfg.regularizer = RegularizerSpec::Sn {
            k_sn: k,
            power_iters: 1,
        };
        cfg.iterations = 300;
        cfg.eval_samples = 256;
        let art = train(&cfg)?;
        iters += art.trace.len();
        bound += art.bound_violations.len();
        corollary += art.corollary_violations.len();
        failed += usize::from(!art.succeeded());
    }
    Ok(Check {
        name: "domain and gradient-interval bounds hold during training",
        pass: bound == 0 && corollary == 0 && failed == 0,
        detail: format!("{iters} iterations: {bound} domain, {corollary} gradient-interval violations"),
    })
}

fn degeneration() -> Result<Check> {
    let mut worst: f64 = 0.0;
    for kind in LossKind::ALL {
        let spec = LossSpec::new(kind, MIN_ALPHA)?;
        for term in Term::ALL {
            let limit = spec.degenerate_limit_grad(term);
            for i in -100..=100 {
                worst = worst.max((spec.pointwise_grad(term, 10.0 * i as f64) - limit).abs());
            }
        }
    }
    Ok(Check {
        name: "gradients at the smallest scale equal the slope at zero",
        pass: worst <= 1e-9,
        detail: format!("max deviation {worst:.1e} for |f| ≤ 1000"),
    })
}

/// Runs every check; an error inside a check counts as a failure.
pub fn run_checks() -> Vec<Check> {
    let checks: [(&'static str, fn() -> Result<Check>); 5] = [
        ("loss gradients", loss_gradients),
        ("gradient penalty", penalty_gradients),
        ("spectral normalization", spectral_norms),
        ("live bounds", live_bounds),
        ("degeneration", degeneration),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            f().unwrap_or_else(|e| Check {
                name,
                pass: false,
                detail: format!("error: {e}"),
            })
        })
        .collect()
}
