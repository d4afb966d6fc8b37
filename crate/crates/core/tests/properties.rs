use lipgan::autodiff::Tape;
use lipgan::lipschitz::{
    domain_bound, empirical_lipschitz, gradient_penalty, lipschitz_upper_bound, GpConfig, SpectralNorm,
};
use lipgan::losses::{Interval, LossKind, LossSpec, Term};
use lipgan::metrics::{attained_gradient_interval, frechet_gaussian, record_interval};
use lipgan::nn::{forward, forward_values, init_params, MlpConfig, ParamStore};
use lipgan::optim::{RmsProp, RmsPropConfig};
use lipgan::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kind() -> impl Strategy<Value = LossKind> {
    prop::sample::select(LossKind::ALL.to_vec())
}

fn term() -> impl Strategy<Value = Term> {
    prop::sample::select(Term::ALL.to_vec())
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

proptest! {
    #[test]
    fn scaling_chain_rule(kind in kind(), term in term(), log_alpha in -6.0f64..6.0, u in -40.0f64..40.0) {
        let alpha = 10f64.powf(log_alpha);
        let omega = u / alpha;
        let scaled = LossSpec::new(kind, alpha).unwrap().pointwise_grad(term, omega);
        let base = LossSpec::unscaled(kind).pointwise_grad(term, alpha * omega);
        prop_assert!((scaled - base).abs() <= 1e-12 * base.abs().max(1.0), "{scaled} vs {base}");
    }

    #[test]
    fn tape_matches_pointwise(kind in kind(), alpha in 0.01f64..10.0, scores in prop::collection::vec(-3.0f64..3.0, 1..20)) {
        let spec = LossSpec::new(kind, alpha).unwrap();
        let b = scores.len() as f64;
        let tape = Tape::new();
        let real = tape.var(Tensor::vector(scores.clone()));
        let fake = tape.var(Tensor::vector(scores.iter().map(|s| -s).collect()));
        let g = tape.backward(spec.disc_loss(real, fake).unwrap(), &[real, fake]).unwrap();
        for (i, &s) in scores.iter().enumerate() {
            let want_r = spec.pointwise_grad(Term::Real, s) / b;
            let want_f = spec.pointwise_grad(Term::Fake, -s) / b;
            prop_assert!((g[0].data()[i] - want_r).abs() <= 1e-10 * want_r.abs().max(1e-300));
            prop_assert!((g[1].data()[i] - want_f).abs() <= 1e-10 * want_f.abs().max(1e-300));
        }
    }

    #[test]
    fn attained_interval_within_mean_value_bound(
        kind in kind(),
        term in term(),
        alpha in 0.05f64..5.0,
        scores in prop::collection::vec(-4.0f64..4.0, 2..40),
    ) {
        let spec = LossSpec::new(kind, alpha).unwrap();
        let omega = record_interval(&scores).unwrap();
        let psi = attained_gradient_interval(&spec, term, &scores).unwrap();
        let m = spec.second_derivative_max(term, omega).unwrap();
        prop_assert!(psi.width() <= m * omega.width() + 1e-9);
    }

    #[test]
    fn linearity_shrinks_with_domain(kind in kind(), term in term(), center in -2.0f64..2.0, half in 0.01f64..3.0) {
        let spec = LossSpec::unscaled(kind);
        let mut prev = f64::INFINITY;
        for k in 0..8 {
            let h = half * 0.5f64.powi(k);
            let dev = spec.linearity_deviation(term, Interval { lo: center - h, hi: center + h }).unwrap();
            prop_assert!(dev <= prev + 1e-12, "step {k}: {dev} > {prev}");
            prev = dev;
        }
    }

    #[test]
    fn empirical_lipschitz_below_product_bound(seed in 0u64..1000, width in 2usize..24) {
        let cfg = MlpConfig::discriminator(vec![3, width, width, 1]);
        let params = init_params(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, 64, 3, -1.0, 1.0);
        let est = empirical_lipschitz(|b| forward_values(&cfg, &params, b), &x, 500, &mut rng).unwrap();
        prop_assert!(est.value <= lipschitz_upper_bound(&params, &cfg) + 1e-9);
    }

    #[test]
    fn normalized_discriminator_respects_domain_bound(seed in 0u64..1000, k in 0.1f64..5.0) {
        let cfg = MlpConfig::discriminator(vec![2, 16, 16, 1]);
        let params = init_params(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let sn = SpectralNorm::new(&params, k, 1, &mut rng).unwrap();
        let eff = sn.normalized_params(&params).unwrap();
        let x = uniform(&mut rng, 128, 2, -1.0, 1.0);
        let out = forward_values(&cfg, &eff, &x).unwrap();
        let bound = domain_bound(lipschitz_upper_bound(&eff, &cfg), &[2], (-1.0, 1.0)).unwrap();
        prop_assert!(out.max() - out.min() <= bound + 1e-6);
    }

    #[test]
    fn rmsprop_step_bounded(g in prop::collection::vec(-1e3f64..1e3, 1..10), lr in 1e-6f64..1e-1) {
        let cfg = RmsPropConfig { lr, ..RmsPropConfig::default() };
        let mut params = ParamStore { layers: vec![lipgan::nn::Layer {
            weight: Tensor::zeros(&[1, g.len()]),
            bias: Tensor::zeros(&[g.len()]),
        }] };
        let mut opt = RmsProp::new(cfg, &params);
        let grads = vec![Tensor::matrix(1, g.len(), g.clone()).unwrap(), Tensor::zeros(&[g.len()])];
        opt.step(&mut params, &grads, 0).unwrap();
        for (d, gi) in params.layers[0].weight.data().iter().zip(&g) {
            prop_assert!(d.abs() <= lr * gi.abs() / cfg.eps * (1.0 + 1e-12));
        }
    }
}

#[test]
fn frechet_symmetric_and_zero_on_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = uniform(&mut rng, 300, 3, -1.0, 1.0);
    let b = uniform(&mut rng, 300, 3, -0.5, 2.0);
    let ab = frechet_gaussian(&a, &b).unwrap().distance;
    let ba = frechet_gaussian(&b, &a).unwrap().distance;
    assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
    assert!(frechet_gaussian(&a, &a).unwrap().distance.abs() < 1e-9);
}

#[test]
fn forward_and_backward_are_repeatable() {
    let cfg = MlpConfig::discriminator(vec![2, 8, 1]);
    let params = init_params(&cfg, 1).unwrap();
    let x = uniform(&mut ChaCha8Rng::seed_from_u64(0), 10, 2, -1.0, 1.0);
    let before = params.clone();
    assert_eq!(
        forward_values(&cfg, &params, &x).unwrap(),
        forward_values(&cfg, &params, &x).unwrap()
    );
    assert_eq!(params, before);

    let tape = Tape::new();
    let vars = params.bind(&tape);
    let y = forward(&cfg, &vars, tape.constant(x)).unwrap().square().sum();
    let wrt = ParamStore::flatten_vars(&vars);
    assert_eq!(tape.backward(y, &wrt).unwrap(), tape.backward(y, &wrt).unwrap());
}

#[test]
fn gradient_penalty_swap_symmetric_in_distribution() {
    // A single (real, fake) pair repeated: the mean over rows averages ε.
    let cfg = MlpConfig::discriminator(vec![2, 16, 16, 1]);
    let params = init_params(&cfg, 2).unwrap();
    let n = 20_000;
    let real = Tensor::matrix(n, 2, [0.7, -0.2].repeat(n)).unwrap();
    let fake = Tensor::matrix(n, 2, [-0.4, 0.9].repeat(n)).unwrap();
    let gp = |a: &Tensor, b: &Tensor, seed| {
        let tape = Tape::new();
        let vars = params.bind_constant(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gradient_penalty(&tape, |x| forward(&cfg, &vars, x), a, b, &GpConfig::default(), &mut rng)
            .unwrap()
            .item()
            .unwrap()
    };
    let (fwd, rev) = (gp(&real, &fake, 1), gp(&fake, &real, 2));
    assert!((fwd - rev).abs() <= 0.03 * fwd.abs().max(rev.abs()), "{fwd} vs {rev}");
}
