//! Hand-written SVG plots of traces, sweep tables and samples.

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use lipgan::metrics::DomainTrace;

use crate::CliError;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
pub const LEFT: f64 = 80.0;
pub const RIGHT: f64 = 150.0;
pub const TOP: f64 = 36.0;
pub const BOTTOM: f64 = 52.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Data range of one axis, optionally on a log10 scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub log: bool,
}

impl Axis {
    /// Range covering `values`; non-finite values (and non-positive ones on
    /// a log axis) are ignored. A single value is padded so the range is
    /// never empty.
    pub fn fit(values: impl IntoIterator<Item = f64>, log: bool) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log {
                if v > 0.0 {
                    v.log10()
                } else {
                    continue;
                }
            } else {
                v
            };
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo > hi {
            (lo, hi) = (0.0, 1.0);
        } else if lo == hi {
            let pad = if log { 1.0 } else { 0.5 * lo.abs().max(1e-12) };
            (lo, hi) = (lo - pad, hi + pad);
        }
        Axis { lo, hi, log }
    }

    /// Position of `v` in `[0, 1]` along the axis.
    pub fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (a, b) = (self.lo.ceil() as i32, self.hi.floor() as i32);
            let step = ((b - a) / 6 + 1).max(1);
            (a..=b)
                .step_by(step as usize)
                .map(|e| (10f64.powi(e), format!("1e{e}")))
                .collect()
        } else {
            (0..=4)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                    (v, fmt_num(v))
                })
                .collect()
        }
    }
}

fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Canvas {
    x: Axis,
    y: Axis,
    body: String,
    legend: Vec<(String, &'static str)>,
}

impl Canvas {
    fn new(x: Axis, y: Axis) -> Self {
        Canvas {
            x,
            y,
            body: String::new(),
            legend: Vec::new(),
        }
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + self.x.frac(v) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        HEIGHT - BOTTOM - self.y.frac(v) * (HEIGHT - TOP - BOTTOM)
    }

    fn points(&self, pts: impl IntoIterator<Item = (f64, f64)>) -> String {
        pts.into_iter()
            .map(|(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn finish(self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let (x0, x1) = (LEFT, WIDTH - RIGHT);
        let (y0, y1) = (HEIGHT - BOTTOM, TOP);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
            (x0 + x1) / 2.0,
            escape(title)
        );
        let _ = writeln!(s, r#"<g class="axes" stroke="black" fill="none">"#);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
        let _ = writeln!(s, "</g>");
        let _ = writeln!(s, r#"<g class="ticks">"#);
        for (v, label) in self.x.ticks() {
            let x = self.px(v);
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
                y0 + 4.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                y0 + 16.0,
                escape(&label)
            );
        }
        for (v, label) in self.y.ticks() {
            let y = self.py(v);
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#,
                x0 - 4.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 6.0,
                y + 4.0,
                escape(&label)
            );
        }
        let _ = writeln!(s, "</g>");
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            escape(xlabel)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(ylabel)
        );
        s.push_str(&self.body);
        if !self.legend.is_empty() {
            let _ = writeln!(s, r#"<g class="legend">"#);
            for (i, (label, color)) in self.legend.iter().enumerate() {
                let y = TOP + 14.0 * i as f64 + 6.0;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#,
                    x1 + 12.0,
                    y - 8.0
                );
                let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x1 + 26.0, escape(label));
            }
            let _ = writeln!(s, "</g>");
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Per-iteration domain `[min f, max f]` as a filled band. A band whose
/// endpoints coincide everywhere is drawn as a line.
pub fn omega_vs_iter(trace: &DomainTrace) -> String {
    let recs = &trace.records;
    let x = Axis::fit(recs.iter().map(|r| r.iter as f64), false);
    let y = Axis::fit(recs.iter().flat_map(|r| [r.omega.lo, r.omega.hi]), false);
    let mut c = Canvas::new(x, y);
    if !recs.is_empty() {
        let color = PALETTE[0];
        if recs.iter().all(|r| r.omega.lo == r.omega.hi) {
            let pts = c.points(recs.iter().map(|r| (r.iter as f64, r.omega.lo)));
            let _ = writeln!(
                c.body,
                r#"<polyline class="band" points="{pts}" fill="none" stroke="{color}"/>"#
            );
        } else {
            let lower = recs.iter().map(|r| (r.iter as f64, r.omega.lo));
            let upper = recs.iter().rev().map(|r| (r.iter as f64, r.omega.hi));
            let pts = c.points(lower.chain(upper));
            let _ = writeln!(
                c.body,
                r#"<polygon class="band" points="{pts}" fill="{color}" fill-opacity="0.35" stroke="{color}" stroke-width="0.5"/>"#
            );
        }
        c.legend.push(("Ω = [min f, max f]".into(), color));
    }
    c.finish("Discriminator output domain", "iteration", "f(x)")
}

/// One labelled line of a [`metric_vs_param`] plot.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Line plot with a log-scaled x axis. Points with `x ≤ 0` or a
/// non-finite `y` are dropped.
pub fn metric_vs_param(series: &[Series], title: &str, xlabel: &str, ylabel: &str) -> String {
    let keep = |&(x, y): &(f64, f64)| x > 0.0 && x.is_finite() && y.is_finite();
    let kept: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| s.points.iter().copied().filter(keep).collect())
        .collect();
    let x = Axis::fit(kept.iter().flatten().map(|p| p.0), true);
    let y = Axis::fit(kept.iter().flatten().map(|p| p.1), false);
    let mut c = Canvas::new(x, y);
    for (i, (s, pts)) in series.iter().zip(&kept).enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let line = c.points(pts.iter().copied());
        let _ = writeln!(
            c.body,
            r#"<polyline class="series" data-label="{}" points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            escape(&s.label)
        );
        for &(px, py) in pts {
            let _ = writeln!(
                c.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                c.px(px),
                c.py(py)
            );
        }
        c.legend.push((s.label.clone(), color));
    }
    c.finish(title, xlabel, ylabel)
}

/// Generated against real points.
pub fn samples_scatter(generated: &[[f64; 2]], real: &[[f64; 2]]) -> String {
    let all = || generated.iter().chain(real);
    let x = Axis::fit(all().map(|p| p[0]), false);
    let y = Axis::fit(all().map(|p| p[1]), false);
    let mut c = Canvas::new(x, y);
    for (points, label, color) in [(real, "real", PALETTE[7]), (generated, "generated", PALETTE[1])] {
        let _ = writeln!(c.body, r#"<g class="{label}" fill="{color}" fill-opacity="0.6">"#);
        for p in points.iter().filter(|p| p[0].is_finite() && p[1].is_finite()) {
            let _ = writeln!(
                c.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#,
                c.px(p[0]),
                c.py(p[1])
            );
        }
        let _ = writeln!(c.body, "</g>");
        c.legend.push((label.into(), color));
    }
    c.finish("Samples", "x", "y")
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Parses a header-first CSV with no quoting into rows keyed by column.
fn parse_csv(text: &str) -> Vec<Vec<(String, String)>> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or("").split(',').map(str::to_owned).collect();
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| header.iter().cloned().zip(l.split(',').map(str::to_owned)).collect())
        .collect()
}

fn field(row: &[(String, String)], key: &str) -> Option<f64> {
    row.iter().find(|(k, _)| k == key).and_then(|(_, v)| v.parse().ok())
}

fn text_field<'a>(row: &'a [(String, String)], key: &str) -> &'a str {
    row.iter().find(|(k, _)| k == key).map_or("", |(_, v)| v.as_str())
}

/// Median Fréchet distance against α (or `k_SN` when α is fixed), one line
/// per remaining cell setting.
pub fn sweep_series(summary_csv: &str) -> (Vec<Series>, &'static str) {
    let rows = parse_csv(summary_csv);
    let mut alphas: Vec<f64> = rows.iter().filter_map(|r| field(r, "alpha")).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let by_alpha = alphas.len() > 1;
    let mut series: Vec<Series> = Vec::new();
    for r in &rows {
        let (x, label) = if by_alpha {
            (
                field(r, "alpha"),
                format!("{} k_SN={}", text_field(r, "loss"), text_field(r, "k_sn")),
            )
        } else {
            (
                field(r, "k_sn"),
                format!("{} α={}", text_field(r, "loss"), text_field(r, "alpha")),
            )
        };
        let (Some(x), Some(y)) = (x, field(r, "frechet_median")) else {
            continue;
        };
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((x, y)),
            None => series.push(Series {
                label,
                points: vec![(x, y)],
            }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    (series, if by_alpha { "α" } else { "k_SN" })
}

/// Writes every plot the files in `dir` support and returns their paths.
///
/// Needs `trace.jsonl` or `sweep_summary.csv`; `samples.csv` and
/// `metrics.csv` add the scatter and metric plots.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let trace_path = dir.join("trace.jsonl");
    let sweep_path = dir.join("sweep_summary.csv");
    if !trace_path.exists() && !sweep_path.exists() {
        return Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no trace.jsonl or sweep_summary.csv"),
        ));
    }
    let mut written = Vec::new();
    let mut put = |name: &str, svg: String| -> Result<(), CliError> {
        let p = dir.join(name);
        fs::write(&p, svg).map_err(|e| CliError::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    if trace_path.exists() {
        put(
            "omega_vs_iter.svg",
            omega_vs_iter(&DomainTrace::read_jsonl(&trace_path)?),
        )?;
    }
    if sweep_path.exists() {
        let (series, xlabel) = sweep_series(&read(&sweep_path)?);
        put(
            "metric_vs_param.svg",
            metric_vs_param(&series, "Sweep", xlabel, "median Fréchet distance"),
        )?;
    } else if dir.join("metrics.csv").exists() {
        let rows = parse_csv(&read(&dir.join("metrics.csv"))?);
        let points = rows
            .iter()
            .filter_map(|r| Some((field(r, "iter")?, field(r, "frechet")?)))
            .collect();
        let series = [Series {
            label: "Fréchet".into(),
            points,
        }];
        put(
            "metric_vs_param.svg",
            metric_vs_param(&series, "Evaluation", "iteration", "Fréchet distance"),
        )?;
    }
    let samples = dir.join("samples.csv");
    if samples.exists() {
        let rows = parse_csv(&read(&samples)?);
        let (mut generated, mut real) = (Vec::new(), Vec::new());
        for r in &rows {
            let (Some(x), Some(y)) = (field(r, "x"), field(r, "y")) else {
                continue;
            };
            match text_field(r, "source") {
                "real" => real.push([x, y]),
                _ => generated.push([x, y]),
            }
        }
        put("samples_scatter.svg", samples_scatter(&generated, &real))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lipgan::losses::Interval;
    use lipgan::metrics::TraceRecord;

    fn record(iter: usize, lo: f64, hi: f64) -> TraceRecord {
        let omega = Interval { lo, hi };
        TraceRecord {
            iter,
            omega,
            omega_real: omega,
            omega_fake: omega,
            psi: omega,
            psi_fake: omega,
            loss_d: 0.0,
            loss_g: 0.0,
            omega_bound: None,
        }
    }

    #[test]
    fn log_axis_positions() {
        let a = Axis::fit([1e-9, 1.0, 1e9], true);
        assert_eq!(a.frac(1e-9), 0.0);
        assert_eq!(a.frac(1.0), 0.5);
        assert_eq!(a.frac(1e9), 1.0);
    }

    #[test]
    fn single_value_axis_is_padded() {
        let a = Axis::fit([3.0, 3.0], false);
        assert!(a.lo < 3.0 && a.hi > 3.0);
        assert_eq!(a.frac(3.0), 0.5);
        let e = Axis::fit(std::iter::empty(), false);
        assert_eq!((e.lo, e.hi), (0.0, 1.0));
    }

    #[test]
    fn zero_height_band_is_a_polyline() {
        let trace = DomainTrace {
            records: (0..4).map(|i| record(i, 0.25, 0.25)).collect(),
        };
        let svg = omega_vs_iter(&trace);
        assert!(svg.contains("<polyline class=\"band\""));
        assert!(!svg.contains("<polygon"));
    }

    #[test]
    fn band_polygon_has_two_points_per_record() {
        let trace = DomainTrace {
            records: (0..5).map(|i| record(i, -1.0 - i as f64, 1.0)).collect(),
        };
        let svg = omega_vs_iter(&trace);
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 10);
    }

    #[test]
    fn labels_are_escaped() {
        let s = [Series {
            label: "LS# <a&b>".into(),
            points: vec![(1.0, 1.0)],
        }];
        let svg = metric_vs_param(&s, "t", "x", "y");
        assert!(svg.contains("LS# &lt;a&amp;b&gt;"));
    }

    #[test]
    fn sweep_series_picks_varying_axis() {
        let csv = "loss,alpha,k_sn,runs,failed,frechet_median,coverage_median,hq_fraction_median\n\
                   EXP,1e-9,5,3,0,0.1,8,0.9\nEXP,1,5,3,0,0.2,8,0.9\nEXP,100000,5,3,3,,,\n";
        let (series, axis) = sweep_series(csv);
        assert_eq!(axis, "α");
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].points, vec![(1e-9, 0.1), (1.0, 0.2)]);

        let csv = "loss,alpha,k_sn,runs,failed,frechet_median,coverage_median,hq_fraction_median\n\
                   NS,1,0.5,1,0,0.3,,\nNS,1,2,1,0,0.4,,\n";
        let (series, axis) = sweep_series(csv);
        assert_eq!(axis, "k_SN");
        assert_eq!(series[0].points, vec![(0.5, 0.3), (2.0, 0.4)]);
    }
}
