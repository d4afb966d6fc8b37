//! GAN loss functions, the domain-scaling transform and pointwise analysis.
//!
//! Each loss is a sum of per-sample terms `ℓ(f)` applied to raw
//! discriminator scores. Domain scaling replaces a term by
//! `L_α(t) = ℓ(α·t)/α`, which keeps the gradient scale while shrinking the
//! interval of `ℓ` that the scores actually reach. Its derivatives are
//! `L_α'(t) = ℓ'(α·t)` and `L_α''(t) = α·ℓ''(α·t)`.
//!
//! Every loss is minimized, by both players, exactly as written:
//!
//! | kind | D real term | D fake term | G term |
//! |------|-------------|-------------|--------|
//! | NS   | `-log σ(t)` | `-log(1-σ(t))` | `-log σ(t)` |
//! | LS   | `(t-1)²`    | `t²`        | `(t-1)²` |
//! | LS#  | `(t-1)²`    | `(t+1)²`    | `(t-1)²` |
//! | WGAN | `t`         | `-t`        | `t` |
//! | COS  | `-cos(t-1)` | `-cos(t+1)` | `-cos(t-1)` |
//! | EXP  | `exp(t)`    | `exp(-t)`   | `exp(t)` |
//!
//! WGAN's sign convention drives real scores down and fake scores up; that
//! is a consistent relabelling of `f` and trains normally.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Smallest scaling factor accepted; below it the scaled terms lose all
/// precision.
pub const MIN_ALPHA: f64 = 1e-25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "NS")]
    Ns,
    #[serde(rename = "LS")]
    Ls,
    #[serde(rename = "LS#")]
    LsSharp,
    #[serde(rename = "WGAN")]
    Wgan,
    #[serde(rename = "COS")]
    Cos,
    #[serde(rename = "EXP")]
    Exp,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Ns,
        LossKind::Ls,
        LossKind::LsSharp,
        LossKind::Wgan,
        LossKind::Cos,
        LossKind::Exp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ns => "NS",
            LossKind::Ls => "LS",
            LossKind::LsSharp => "LS#",
            LossKind::Wgan => "WGAN",
            LossKind::Cos => "COS",
            LossKind::Exp => "EXP",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown loss kind {s:?}")))
    }
}

/// Which per-sample term of a loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// Discriminator loss on real samples.
    Real,
    /// Discriminator loss on generated samples.
    Fake,
    /// Generator loss on generated samples.
    Gen,
}

impl Term {
    pub const ALL: [Term; 3] = [Term::Real, Term::Fake, Term::Gen];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

/// A closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::Usage(format!("inverted or NaN interval [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    /// Evenly spaced points including both endpoints.
    pub fn grid(&self, n: usize) -> impl Iterator<Item = f64> + '_ {
        let n = n.max(2);
        (0..n).map(move |i| {
            if i == n - 1 {
                self.hi
            } else {
                self.lo + self.width() * i as f64 / (n - 1) as f64
            }
        })
    }
}

impl Serialize for Interval {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.lo, self.hi].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Interval {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [lo, hi] = <[f64; 2]>::deserialize(d)?;
        Ok(Interval { lo, hi })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Unscaled per-sample term `ℓ` and its first two derivatives.
fn base(kind: LossKind, term: Term, t: f64) -> (f64, f64, f64) {
    use LossKind::*;
    use Term::*;
    match (kind, term) {
        // σ(t) - 1 written as -σ(-t) to avoid cancellation for large t.
        (Ns, Real | Gen) => (softplus(-t), -sigmoid(-t), sigmoid(t) * sigmoid(-t)),
        (Ns, Fake) => (softplus(t), sigmoid(t), sigmoid(t) * sigmoid(-t)),
        (Ls | LsSharp, Real | Gen) => ((t - 1.0).powi(2), 2.0 * (t - 1.0), 2.0),
        (Ls, Fake) => (t * t, 2.0 * t, 2.0),
        (LsSharp, Fake) => ((t + 1.0).powi(2), 2.0 * (t + 1.0), 2.0),
        (Wgan, Real | Gen) => (t, 1.0, 0.0),
        (Wgan, Fake) => (-t, -1.0, 0.0),
        (Cos, Real | Gen) => (-(t - 1.0).cos(), (t - 1.0).sin(), (t - 1.0).cos()),
        (Cos, Fake) => (-(t + 1.0).cos(), (t + 1.0).sin(), (t + 1.0).cos()),
        (Exp, Real | Gen) => {
            let e = t.exp();
            (e, e, e)
        }
        (Exp, Fake) => {
            let e = (-t).exp();
            (e, -e, e)
        }
    }
}

/// `ℓ(u)` built from tape ops.
fn base_on_tape<'t>(kind: LossKind, term: Term, u: Var<'t>) -> Var<'t> {
    use LossKind::*;
    use Term::*;
    match (kind, term) {
        // -log σ(u) = softplus(-u); -log(1 - σ(u)) = softplus(u)
        (Ns, Real | Gen) => u.neg().softplus(),
        (Ns, Fake) => u.softplus(),
        (Ls | LsSharp, Real | Gen) => u.add_scalar(-1.0).square(),
        (Ls, Fake) => u.square(),
        (LsSharp, Fake) => u.add_scalar(1.0).square(),
        (Wgan, Real | Gen) => u,
        (Wgan, Fake) => u.neg(),
        (Cos, Real | Gen) => u.add_scalar(-1.0).cos().neg(),
        (Cos, Fake) => u.add_scalar(1.0).cos().neg(),
        (Exp, Real | Gen) => u.exp(),
        (Exp, Fake) => u.neg().exp(),
    }
}

impl LossSpec {
    pub fn new(kind: LossKind, alpha: f64) -> Result<Self> {
        let spec = LossSpec { kind, alpha };
        spec.validate()?;
        Ok(spec)
    }

    pub fn unscaled(kind: LossKind) -> Self {
        LossSpec { kind, alpha: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= MIN_ALPHA) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be finite and at least {MIN_ALPHA:e}, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// `L_α(ω)`.
    pub fn value(&self, term: Term, omega: f64) -> f64 {
        base(self.kind, term, self.alpha * omega).0 / self.alpha
    }

    /// `dL_α/dω = ℓ'(α·ω)`.
    pub fn pointwise_grad(&self, term: Term, omega: f64) -> f64 {
        base(self.kind, term, self.alpha * omega).1
    }

    /// `d²L_α/dω² = α·ℓ''(α·ω)`.
    pub fn second_derivative(&self, term: Term, omega: f64) -> f64 {
        self.alpha * base(self.kind, term, self.alpha * omega).2
    }

    /// `ℓ'(0)`: the slope every term degenerates to as `α → 0`.
    pub fn degenerate_limit_grad(&self, term: Term) -> f64 {
        base(self.kind, term, 0.0).1
    }

    /// Batch mean of the scaled term, on the tape.
    pub fn term_mean<'t>(&self, term: Term, scores: Var<'t>) -> Result<Var<'t>> {
        if scores.with_value(|t| t.numel()) == 0 {
            return Err(Error::Usage("loss over an empty batch".into()));
        }
        let u = scores.scale(self.alpha);
        Ok(base_on_tape(self.kind, term, u).scale(1.0 / self.alpha).mean())
    }

    /// Discriminator loss: mean real term plus mean fake term.
    pub fn disc_loss<'t>(&self, f_real: Var<'t>, f_fake: Var<'t>) -> Result<Var<'t>> {
        self.term_mean(Term::Real, f_real)?
            .add(self.term_mean(Term::Fake, f_fake)?)
    }

    pub fn gen_loss<'t>(&self, f_fake: Var<'t>) -> Result<Var<'t>> {
        self.term_mean(Term::Gen, f_fake)
    }

    /// Batch mean of the tangent line `ℓ'(0)·t`, the limit of every term as
    /// `α → 0`.
    pub fn tangent_term_mean<'t>(&self, term: Term, scores: Var<'t>) -> Result<Var<'t>> {
        if scores.with_value(|t| t.numel()) == 0 {
            return Err(Error::Usage("loss over an empty batch".into()));
        }
        Ok(scores.scale(self.degenerate_limit_grad(term)).mean())
    }

    /// `max |L_α''|` over `omega`, from closed forms.
    pub fn second_derivative_max(&self, term: Term, omega: Interval) -> Result<f64> {
        let omega = Interval::new(omega.lo, omega.hi)?;
        let a = self.alpha;
        let (ulo, uhi) = (a * omega.lo, a * omega.hi);
        let m = match self.kind {
            LossKind::Wgan => 0.0,
            LossKind::Ls | LossKind::LsSharp => 2.0 * a,
            // σ(1-σ) peaks at 0 and decreases in |u|
            LossKind::Ns => {
                let u = 0.0f64.clamp(ulo, uhi);
                let s = sigmoid(u);
                a * s * (1.0 - s)
            }
            // |cos(u ∓ 1)| reaches 1 when the shifted interval holds a multiple of π
            LossKind::Cos => {
                let shift = if term == Term::Fake { 1.0 } else { -1.0 };
                let (lo, hi) = (ulo + shift, uhi + shift);
                if (hi / PI).floor() >= (lo / PI).ceil() {
                    a
                } else {
                    a * lo.cos().abs().max(hi.cos().abs())
                }
            }
            LossKind::Exp => {
                let u = if term == Term::Fake { -ulo } else { uhi };
                a * u.exp()
            }
        };
        Ok(m)
    }

    /// Grid-scan estimate of `max |L_α''|`: 4096 points, then golden-section
    /// refinement on the best cell. Cross-check for the closed forms.
    pub fn second_derivative_max_scan(&self, term: Term, omega: Interval) -> Result<f64> {
        let omega = Interval::new(omega.lo, omega.hi)?;
        let f = |w: f64| self.second_derivative(term, w).abs();
        Ok(grid_max_refined(f, omega, 4096))
    }

    /// Maximum deviation of `L_α` from its tangent at the midpoint of
    /// `omega`, relative to the largest `|L_α|` over `omega`.
    pub fn linearity_deviation(&self, term: Term, omega: Interval) -> Result<f64> {
        linearity_deviation(|w| self.value(term, w), |w| self.pointwise_grad(term, w), omega)
    }
}

fn grid_max_refined(f: impl Fn(f64) -> f64, omega: Interval, n: usize) -> f64 {
    if omega.width() == 0.0 {
        return f(omega.lo);
    }
    let points: Vec<f64> = omega.grid(n).collect();
    let (best_i, mut best) =
        points.iter().map(|&w| f(w)).enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
        );
    let mut lo = points[best_i.saturating_sub(1)];
    let mut hi = points[(best_i + 1).min(n - 1)];
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - ratio * (hi - lo);
    let mut d = lo + ratio * (hi - lo);
    for _ in 0..60 {
        if f(c) > f(d) {
            hi = d;
        } else {
            lo = c;
        }
        c = hi - ratio * (hi - lo);
        d = lo + ratio * (hi - lo);
    }
    best = best.max(f(0.5 * (lo + hi)));
    best
}

/// Largest gap between `f` and its tangent at the midpoint of `omega`, over a
/// 1001-point grid, relative to the largest `|f|` on the same grid.
pub fn linearity_deviation(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, omega: Interval) -> Result<f64> {
    let omega = Interval::new(omega.lo, omega.hi)?;
    let w0 = omega.midpoint();
    let (f0, slope) = (f(w0), df(w0));
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for w in omega.grid(1001) {
        let v = f(w);
        scale = scale.max(v.abs());
        worst = worst.max((v - (f0 + slope * (w - w0))).abs());
    }
    Ok(worst / scale.max(1e-12))
}
