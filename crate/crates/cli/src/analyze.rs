//! Offline reports over a logged domain trace.

use serde::Serialize;

use lipgan::losses::{Interval, LossSpec, Term};
use lipgan::metrics::{attained_gradient_interval, domain_drift, median, DomainTrace};
use lipgan::trainer::{terminal_hull, terminal_median_domain};
use lipgan::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationReport {
    pub iter: usize,
    pub omega: Interval,
    /// Loss gradients at the endpoints of the logged domain, per term.
    pub psi_real: Interval,
    pub psi_fake: Interval,
    pub psi_gen: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Linearity {
    pub real: f64,
    pub fake: f64,
    pub gen: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftReport {
    pub window: usize,
    pub max: f64,
    pub median: f64,
    pub last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub loss: LossSpec,
    pub iterations: usize,
    pub cumulative_omega: Option<Interval>,
    /// Hull over the last tenth of the trace.
    pub terminal_omega: Option<Interval>,
    /// Median endpoints of the per-iteration domains over the last tenth.
    pub terminal_median_omega: Option<Interval>,
    pub terminal_psi_real: Option<Interval>,
    pub terminal_psi_fake: Option<Interval>,
    pub linearity_cumulative: Option<Linearity>,
    pub linearity_terminal: Option<Linearity>,
    pub drift: Option<DriftReport>,
    pub records: Vec<IterationReport>,
}

fn psi(spec: &LossSpec, term: Term, omega: Interval) -> Result<Interval> {
    attained_gradient_interval(spec, term, &[omega.lo, omega.hi])
}

fn linearity(spec: &LossSpec, omega: Interval) -> Result<Linearity> {
    Ok(Linearity {
        real: spec.linearity_deviation(Term::Real, omega)?,
        fake: spec.linearity_deviation(Term::Fake, omega)?,
        gen: spec.linearity_deviation(Term::Gen, omega)?,
    })
}

/// Recomputes gradient intervals, drift and linearity from a trace under
/// `spec`, which need not be the loss the trace was recorded with.
pub fn analyze(trace: &DomainTrace, spec: &LossSpec, window: usize) -> Result<AnalysisReport> {
    spec.validate()?;
    let records = trace
        .records
        .iter()
        .map(|r| {
            Ok(IterationReport {
                iter: r.iter,
                omega: r.omega,
                psi_real: psi(spec, Term::Real, r.omega)?,
                psi_fake: psi(spec, Term::Fake, r.omega)?,
                psi_gen: psi(spec, Term::Gen, r.omega)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cumulative = trace.cumulative_hull();
    let terminal = terminal_hull(trace, 0.1);
    let drift = if trace.is_empty() {
        None
    } else {
        let d = domain_drift(trace, window)?;
        Some(DriftReport {
            window,
            max: d.drift.iter().copied().fold(0.0, f64::max),
            median: median(&d.drift).unwrap_or(0.0),
            last: *d.drift.last().unwrap_or(&0.0),
        })
    };
    Ok(AnalysisReport {
        loss: *spec,
        iterations: trace.len(),
        cumulative_omega: cumulative,
        terminal_omega: terminal,
        terminal_median_omega: terminal_median_domain(trace, 0.1),
        terminal_psi_real: terminal.map(|o| psi(spec, Term::Real, o)).transpose()?,
        terminal_psi_fake: terminal.map(|o| psi(spec, Term::Fake, o)).transpose()?,
        linearity_cumulative: cumulative.map(|o| linearity(spec, o)).transpose()?,
        linearity_terminal: terminal.map(|o| linearity(spec, o)).transpose()?,
        drift,
        records,
    })
}
