//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any criterion fails.
//!
//! `cargo test --test acceptance` runs everything; trailing numeric
//! arguments (`cargo test --test acceptance -- 3 6`) select criteria.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use lipgan::autodiff::{finite_diff_check, Tape};
use lipgan::data::ToyDistribution;
use lipgan::lipschitz::{gradient_penalty, lipschitz_upper_bound, spectral_norm_svd, GpConfig, SpectralNorm};
use lipgan::losses::{Interval, LossKind, LossSpec, Term, MIN_ALPHA};
use lipgan::metrics::median;
use lipgan::nn::{forward, forward_values, init_params, Activation, Layer, MlpConfig, ParamStore};
use lipgan::trainer::{
    calibrate_k_sn, initial_params, sweep, train, DataSource, ExperimentConfig, RegularizerSpec, RunArtifacts,
    SweepGrid, SweepResult,
};
use lipgan::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = na.max(nb);
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

fn plain_disc_loss(spec: &LossSpec, real: &[f64], fake: &[f64]) -> f64 {
    let mean = |term, xs: &[f64]| xs.iter().map(|&t| spec.value(term, t)).sum::<f64>() / xs.len() as f64;
    mean(Term::Real, real) + mean(Term::Fake, fake)
}

/// Tape gradient of loss(SN(D)) against central differences computed on the
/// plain value path (no tape).
fn composed_disc_error(kind: LossKind, seed: u64) -> f64 {
    let cfg = MlpConfig::discriminator(vec![2, 12, 12, 1]);
    let params = init_params(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sn = SpectralNorm::new(&params, 0.8, 1, &mut rng).unwrap();
    let real = random_tensor(&mut rng, &[6, 2], -1.0, 1.0);
    let fake = random_tensor(&mut rng, &[6, 2], -1.0, 1.0);
    let spec = LossSpec::new(kind, 1.3).unwrap();

    let tape = Tape::new();
    let raw = params.bind(&tape);
    let wrt = ParamStore::flatten_vars(&raw);
    let layers = sn.normalize_vars(&tape, &raw).unwrap();
    let score = |x: &Tensor| {
        let out = forward(&cfg, &layers, tape.constant(x.clone())).unwrap();
        out.reshape(vec![x.rows()]).unwrap()
    };
    let loss = spec.disc_loss(score(&real), score(&fake)).unwrap();
    let analytic: Vec<f64> = tape
        .backward(loss, &wrt)
        .unwrap()
        .iter()
        .flat_map(|g| g.data().to_vec())
        .collect();

    let eval = |flat: &[f64]| {
        let mut p = params.clone();
        p.set_flat_values(flat).unwrap();
        let eff = sn.normalized_params(&p).unwrap();
        let r = forward_values(&cfg, &eff, &real).unwrap();
        let f = forward_values(&cfg, &eff, &fake).unwrap();
        plain_disc_loss(&spec, r.data(), f.data())
    };
    let base = params.flat_values();
    let h = 1e-6;
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] += h;
            let fp = eval(&p);
            p[i] -= 2.0 * h;
            (fp - eval(&p)) / (2.0 * h)
        })
        .collect();
    rel_err(&analytic, &numeric)
}

fn criterion_gradients() -> Outcome {
    const TOL: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = (0.0, String::new());
    let mut note = |err: f64, what: String| {
        if !(err <= worst.0) {
            worst = (err, what);
        }
    };
    for kind in LossKind::ALL {
        for alpha in [1.0, 0.37, 2.5] {
            let spec = LossSpec::new(kind, alpha).unwrap();
            let real = random_tensor(&mut rng, &[9], -2.0, 2.0);
            let fake = random_tensor(&mut rng, &[9], -2.0, 2.0);
            for term in Term::ALL {
                let e = finite_diff_check(|x| spec.term_mean(term, x), &real, 1e-6);
                note(e, format!("{kind} {term:?} α={alpha}"));
            }
            let fk = fake.clone();
            let e = finite_diff_check(|x| spec.disc_loss(x, x.tape().constant(fk.clone())), &real, 1e-6);
            note(e, format!("{kind} D-form real α={alpha}"));
            let rl = real.clone();
            let e = finite_diff_check(|x| spec.disc_loss(x.tape().constant(rl.clone()), x), &fake, 1e-6);
            note(e, format!("{kind} D-form fake α={alpha}"));
            let e = finite_diff_check(|x| spec.gen_loss(x), &fake, 1e-6);
            note(e, format!("{kind} G-form α={alpha}"));
        }
        for seed in 0..2 {
            note(
                composed_disc_error(kind, seed),
                format!("{kind} composed SN discriminator"),
            );
        }
    }
    outcome(
        worst.0 < TOL,
        format!("worst rel err {:.2e} ({}), tol {TOL:.0e}", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------------------
// 2. Gradient penalty double backprop

fn gp_error(widths: Vec<usize>, hidden: Activation, seed: u64) -> f64 {
    let cfg = MlpConfig {
        widths,
        hidden,
        output: Activation::Identity,
    };
    let params = init_params(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let d = cfg.input_width();
    let real = random_tensor(&mut rng, &[8, d], -1.0, 1.0);
    let fake = random_tensor(&mut rng, &[8, d], -1.0, 1.0);
    let gp = GpConfig {
        lambda: 10.0,
        k_gp: 1.0,
    };
    let eps_seed = seed + 200;

    let penalty = |p: &ParamStore, grad: bool| -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let vars = if grad { p.bind(&tape) } else { p.bind_constant(&tape) };
        let disc = |x| forward(&cfg, &vars, x);
        let mut eps_rng = ChaCha8Rng::seed_from_u64(eps_seed);
        let v = gradient_penalty(&tape, disc, &real, &fake, &gp, &mut eps_rng).unwrap();
        let value = v.item().unwrap();
        let g = if grad {
            tape.backward(v, &ParamStore::flatten_vars(&vars))
                .unwrap()
                .iter()
                .flat_map(|t| t.data().to_vec())
                .collect()
        } else {
            Vec::new()
        };
        (value, g)
    };
    let (_, analytic) = penalty(&params, true);
    let base = params.flat_values();
    let h = 1e-6;
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| {
            let mut p = params.clone();
            let mut flat = base.clone();
            flat[i] += h;
            p.set_flat_values(&flat).unwrap();
            let fp = penalty(&p, false).0;
            flat[i] -= 2.0 * h;
            p.set_flat_values(&flat).unwrap();
            (fp - penalty(&p, false).0) / (2.0 * h)
        })
        .collect();
    rel_err(&analytic, &numeric)
}

fn criterion_gp() -> Outcome {
    const TOL: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (widths, name) in [
        (vec![2, 16, 1], "2-layer"),
        (vec![2, 16, 16, 1], "3-layer"),
        (vec![5, 10, 10, 1], "3-layer"),
    ] {
        for hidden in [Activation::LeakyRelu { slope: 0.2 }, Activation::Tanh] {
            for seed in 0..3 {
                let e = gp_error(widths.clone(), hidden, seed);
                cases += 1;
                if !(e <= worst) {
                    worst = e;
                }
                if !(e < TOL) {
                    return outcome(false, format!("{name} {hidden:?} seed {seed}: rel err {e:.2e}"));
                }
            }
        }
    }
    outcome(true, format!("{cases} nets, worst rel err {worst:.2e}, tol {TOL:.0e}"))
}

// ---------------------------------------------------------------------------
// 3. Spectral normalization exactness

const SN_KS: [f64; 5] = [0.25, 0.5, 1.0, 5.0, 50.0];

fn criterion_sn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_single: f64 = 0.0;
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..=48), rng.random_range(1..=48));
        let data = (0..r * c).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
        let weight = Tensor::matrix(r, c, data).unwrap();
        let params = ParamStore {
            layers: vec![Layer {
                weight,
                bias: Tensor::zeros(&[c]),
            }],
        };
        let mut sn = SpectralNorm::new(&params, 1.0, 1, &mut rng).unwrap();
        sn.converge(&params, 1e-14, 20_000).unwrap();
        for k in SN_KS {
            sn.k_sn = k;
            let eff = sn.normalized_params(&params).unwrap();
            let err = (spectral_norm_svd(&eff.layers[0].weight) - k).abs();
            worst_single = worst_single.max(err);
        }
    }
    let mut worst_product: f64 = 0.0;
    for seed in 0..10 {
        let cfg = MlpConfig::discriminator(vec![2, 32, 32, 32, 1]);
        let params = init_params(&cfg, seed).unwrap();
        let mut sn = SpectralNorm::new(&params, 1.0, 1, &mut rng).unwrap();
        sn.converge(&params, 1e-14, 20_000).unwrap();
        for k in SN_KS {
            sn.k_sn = k;
            let eff = sn.normalized_params(&params).unwrap();
            let want = k.powi(cfg.num_layers() as i32);
            let rel = (lipschitz_upper_bound(&eff, &cfg) / want - 1.0).abs();
            worst_product = worst_product.max(rel);
        }
    }
    outcome(
        worst_single <= 1e-3 && worst_product <= 5e-3,
        format!(
            "100 matrices: max |σ−k| {worst_single:.2e} (tol 1e-3); 4-layer product: max rel dev {worst_product:.2e} (tol 5e-3)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4 and 8. Live domain bound and domain growth with k_SN (shared runs)

const DOMAIN_KS: [f64; 3] = [0.25, 0.5, 1.0];
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct DomainRuns {
    /// Indexed `[k][seed]`.
    runs: Vec<Vec<RunArtifacts>>,
    elapsed: Duration,
}

fn domain_runs() -> &'static DomainRuns {
    static RUNS: OnceLock<DomainRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let runs = DOMAIN_KS
            .iter()
            .map(|&k| {
                SEEDS
                    .iter()
                    .map(|&seed| {
                        let mut cfg = ExperimentConfig::toy_ring();
                        cfg.regularizer = RegularizerSpec::Sn {
                            k_sn: k,
                            power_iters: 1,
                        };
                        cfg.iterations = 3000;
                        cfg.seed = seed;
                        train(&cfg).unwrap()
                    })
                    .collect()
            })
            .collect();
        DomainRuns {
            runs,
            elapsed: start.elapsed(),
        }
    })
}

fn criterion_live_bound() -> Outcome {
    let dr = domain_runs();
    let mut violations = 0;
    let mut unchecked = 0;
    let mut failed = 0;
    let mut iterations = 0;
    let mut tightest: f64 = 0.0;
    for art in dr.runs.iter().flatten() {
        failed += usize::from(!art.succeeded());
        violations += art.bound_violations.len();
        for r in &art.trace.records {
            iterations += 1;
            match r.omega_bound {
                Some(b) => tightest = tightest.max(r.omega.width() / b),
                None => unchecked += 1,
            }
        }
    }
    let budget = Duration::from_secs(600);
    outcome(
        violations == 0 && unchecked == 0 && failed == 0 && dr.elapsed < budget,
        format!(
            "{iterations} iterations over 15 runs: {violations} violations, {unchecked} unchecked, {failed} failed runs, max |Ω|/bound {tightest:.3e}, runs took {:.0}s (budget 600s)",
            dr.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_monotone_domain() -> Outcome {
    let dr = domain_runs();
    let mut monotone = 0;
    let mut lines = Vec::new();
    for (s, seed) in SEEDS.iter().enumerate() {
        let widths: Vec<f64> = dr
            .runs
            .iter()
            .map(|per_k| per_k[s].terminal_omega_width(0.1).unwrap_or(f64::NAN))
            .collect();
        if widths.windows(2).all(|w| w[0] < w[1]) {
            monotone += 1;
        }
        lines.push(format!(
            "s{seed}:{}",
            widths.iter().map(|w| format!("{w:.2e}")).collect::<Vec<_>>().join("<")
        ));
    }
    outcome(
        monotone == SEEDS.len(),
        format!("{monotone}/5 seeds strictly increasing [{}]", lines.join(" ")),
    )
}

// ---------------------------------------------------------------------------
// 5. Attained gradient intervals at a tuned domain
//
// Ω and Ψ are per-iteration intervals summarized by their median endpoints
// over the last tenth of training, then by the median over seeds.
//
// A single Gaussian is used: on multi-mode data the fake samples between
// modes skew Ω to one side of the loss's equilibrium point, and only the
// width of Ω is set by k_SN.

struct TunedRun {
    k_sn: f64,
    omega: Interval,
    psi: Interval,
}

fn tuned(kind: LossKind, target: f64, seed: u64, term: Term) -> TunedRun {
    let mut base = ExperimentConfig::toy_ring();
    base.loss = LossSpec::unscaled(kind);
    base.data = DataSource::Toy {
        distribution: ToyDistribution::GaussianRing {
            modes: 1,
            radius: 0.0,
            std: 0.2,
        },
        value_range: [-1.0, 1.0],
    };
    base.optimizer.lr = 5e-5;
    base.iterations = 20_000;
    base.seed = seed;
    base.regularizer = RegularizerSpec::Sn {
        k_sn: 1.5,
        power_iters: 1,
    };
    let cal = calibrate_k_sn(&base, target, 0.05, 8).unwrap();
    let recs = &cal.artifacts.trace.records;
    let tail: Vec<Interval> = recs[recs.len() - recs.len().div_ceil(10)..]
        .iter()
        .map(|r| if term == Term::Real { r.psi } else { r.psi_fake })
        .collect();
    let psi = Interval {
        lo: median(&tail.iter().map(|p| p.lo).collect::<Vec<_>>()).unwrap(),
        hi: median(&tail.iter().map(|p| p.hi).collect::<Vec<_>>()).unwrap(),
    };
    TunedRun {
        k_sn: cal.k_sn,
        omega: cal.omega,
        psi,
    }
}

fn criterion_table() -> Outcome {
    let seeds = [0u64, 1, 2];
    let check = |kind, target, term, allowed: Interval| -> (bool, String) {
        let runs: Vec<TunedRun> = seeds.iter().map(|&s| tuned(kind, target, s, term)).collect();
        let med = |f: &dyn Fn(&TunedRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>()).unwrap();
        let (olo, ohi) = (med(&|r| r.omega.lo), med(&|r| r.omega.hi));
        let (plo, phi) = (med(&|r| r.psi.lo), med(&|r| r.psi.hi));
        let width_ok = ((ohi - olo) / target - 1.0).abs() <= 0.1;
        let ok = width_ok && plo >= allowed.lo && phi <= allowed.hi;
        let ks: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.k_sn)).collect();
        (
            ok,
            format!(
                "{kind}: k_SN [{}], Ω [{olo:.4}, {ohi:.4}], Ψ [{plo:.4}, {phi:.4}] vs [{}, {}]",
                ks.join(","),
                allowed.lo,
                allowed.hi
            ),
        )
    };
    let (ns_ok, ns) = check(LossKind::Ns, 0.012, Term::Real, Interval { lo: -0.502, hi: -0.498 });
    let (ls_ok, ls) = check(
        LossKind::Ls,
        0.044,
        Term::Fake,
        Interval {
            lo: 0.956 - 0.002,
            hi: 1.045 + 0.002,
        },
    );
    outcome(ns_ok && ls_ok, format!("median over 3 seeds; {ns}; {ls}"))
}

// ---------------------------------------------------------------------------
// 6. Degeneration limit

fn criterion_degeneration() -> Outcome {
    const POINT_TOL: f64 = 1e-9;
    let mut worst: f64 = 0.0;
    let grid: Vec<f64> = (0..=2000)
        .map(|i| -1000.0 + i as f64)
        .chain([-1e-3, 1e-3, 0.5, -0.5])
        .collect();
    for kind in LossKind::ALL {
        let spec = LossSpec::new(kind, MIN_ALPHA).unwrap();
        for term in Term::ALL {
            let want = spec.degenerate_limit_grad(term);
            for &f in &grid {
                worst = worst.max((spec.pointwise_grad(term, f) - want).abs());
            }
            let tape = Tape::new();
            let x = tape.var(Tensor::vector(grid.clone()));
            let g = tape.backward(spec.term_mean(term, x).unwrap(), &[x]).unwrap();
            let n = grid.len() as f64;
            for &gi in g[0].data() {
                worst = worst.max((gi * n - want).abs());
            }
        }
    }

    // First discriminator update against the same run with every term
    // replaced by its tangent at zero.
    let first_d_update = |kind: LossKind, linearize: bool| {
        let mut cfg = ExperimentConfig::toy_ring();
        cfg.loss = LossSpec::new(kind, MIN_ALPHA).unwrap();
        cfg.iterations = 1;
        cfg.linearize = linearize;
        let (_, d0) = initial_params(&cfg).unwrap();
        let art = train(&cfg).unwrap();
        let d: Vec<f64> = art
            .discriminator
            .flat_values()
            .iter()
            .zip(d0.flat_values())
            .map(|(x, y)| x - y)
            .collect();
        d
    };
    let mut update_worst: f64 = 0.0;
    let mut parts = Vec::new();
    for kind in [LossKind::Ns, LossKind::LsSharp, LossKind::Cos, LossKind::Exp] {
        let e = rel_err(&first_d_update(kind, false), &first_d_update(kind, true));
        update_worst = update_worst.max(e);
        parts.push(format!("{kind} {e:.1e}"));
    }
    outcome(
        worst <= POINT_TOL && update_worst < 1e-6,
        format!(
            "max |∇L_α − ℓ'(0)| {worst:.1e} (tol 1e-9); first D update vs linearized: {} (tol 1e-6)",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Eight-Gaussian ring

fn good(cov: Option<usize>, hq: Option<f64>) -> bool {
    cov.is_some_and(|c| c >= 7) && hq.is_some_and(|h| h >= 0.7)
}

fn count_per_loss(res: &SweepResult, kind: LossKind, pred: &dyn Fn(&lipgan::trainer::SweepRow) -> bool) -> usize {
    res.rows.iter().filter(|r| r.loss == kind && pred(r)).count()
}

fn criterion_ring() -> Outcome {
    let start = Instant::now();
    let mut base = ExperimentConfig::toy_ring();
    base.iterations = 10_000;
    let four = vec![LossKind::Ns, LossKind::LsSharp, LossKind::Cos, LossKind::Exp];
    let grid = |losses: Vec<LossKind>, alpha: f64, k: f64| SweepGrid {
        losses,
        alphas: vec![alpha],
        k_sn: vec![k],
        seeds: SEEDS.to_vec(),
    };
    let recovered = |res: &SweepResult, tag: &str| -> (bool, String) {
        let mut ok = true;
        let mut parts = Vec::new();
        for &kind in &four {
            let n = count_per_loss(res, kind, &|r| r.status == "ok" && good(r.coverage, r.hq_fraction));
            ok &= n >= 3;
            parts.push(format!("{kind} {n}/5"));
        }
        (ok, format!("({tag}) {}", parts.join(" ")))
    };

    let a = sweep(&base, &grid(four.clone(), 1.0, 1.0)).unwrap();
    let (a_ok, a_msg) = recovered(&a, "a");

    let b = sweep(&base, &grid(vec![LossKind::Exp, LossKind::Cos], 1e10, 5.0)).unwrap();
    let mut b_ok = true;
    let mut b_parts = Vec::new();
    for kind in [LossKind::Exp, LossKind::Cos] {
        let n = count_per_loss(&b, kind, &|r| r.status != "ok" || r.coverage.is_none_or(|c| c <= 4));
        b_ok &= n >= 3;
        b_parts.push(format!("{kind} fails {n}/5"));
    }
    let b_msg = format!("(b) {}", b_parts.join(" "));

    let c = sweep(&base, &grid(four.clone(), 1e-9, 5.0)).unwrap();
    let (c_ok, c_msg) = recovered(&c, "c");

    let elapsed = start.elapsed();
    outcome(
        a_ok && b_ok && c_ok && elapsed < Duration::from_secs(3600),
        format!(
            "{a_msg}; {b_msg}; {c_msg}; {:.0}s (budget 3600s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------

type Criterion = (u32, &'static str, fn() -> Outcome, Duration);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "gradient correctness", criterion_gradients, Duration::from_secs(10)),
        (
            2,
            "gradient penalty double backprop",
            criterion_gp,
            Duration::from_secs(30),
        ),
        (
            3,
            "spectral normalization exactness",
            criterion_sn,
            Duration::from_secs(10),
        ),
        (4, "live domain bound", criterion_live_bound, Duration::from_secs(600)),
        (5, "gradient interval at tuned domain", criterion_table, Duration::MAX),
        (6, "degeneration limit", criterion_degeneration, Duration::MAX),
        (7, "eight-gaussian ring", criterion_ring, Duration::from_secs(3600)),
        (8, "domain grows with k_SN", criterion_monotone_domain, Duration::MAX),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, run, budget) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let in_time = took <= budget;
        let pass = out.pass && in_time;
        failures += usize::from(!pass);
        let over = if in_time {
            String::new()
        } else {
            format!(" [over {}s budget]", budget.as_secs())
        };
        println!(
            "{} [{id}] {name}: {} ({:.1}s){over}",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
