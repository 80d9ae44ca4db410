//! SVG charts and a text summary from the CSVs a run directory holds.
//!
//! Line charts draw polylines in data coordinates inside a transformed group,
//! so the `points` attributes carry the CSV values verbatim.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// A parsed CSV file with line numbers for error reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub path: String,
    pub header: Vec<String>,
    /// `(line number, fields)`.
    pub rows: Vec<(u64, Vec<String>)>,
}

impl CsvTable {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| csv_err(path, &e))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_err(path, &e))?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec.iter().map(str::to_string).collect()));
        }
        Ok(Self {
            path: path.to_string(),
            header,
            rows,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: self.path.clone(),
            line: 1,
            msg: format!("missing column `{name}`"),
        })
    }

    /// A numeric column; empty cells read as NaN.
    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let k = self.index(name)?;
        self.rows
            .iter()
            .map(|(line, f)| {
                let s = f[k].trim();
                if s.is_empty() {
                    return Ok(f64::NAN);
                }
                s.parse().map_err(|_| Error::Parse {
                    path: self.path.clone(),
                    line: *line,
                    msg: format!("column `{name}`: bad number `{s}`"),
                })
            })
            .collect()
    }

    pub fn strings(&self, name: &str) -> Result<Vec<String>> {
        let k = self.index(name)?;
        Ok(self.rows.iter().map(|(_, f)| f[k].clone()).collect())
    }
}

fn csv_err(path: &str, e: &csv::Error) -> Error {
    Error::Parse {
        path: path.to_string(),
        line: e.position().map_or(0, |p| p.line()),
        msg: e.to_string(),
    }
}

/// Trailing moving average over the last `window` finite values.
pub fn smooth(v: &[f64], window: usize) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            if !v[i].is_finite() {
                return v[i];
            }
            let lo = (i + 1).saturating_sub(window);
            let w: Vec<f64> = v[lo..=i].iter().copied().filter(|x| x.is_finite()).collect();
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, xs: &[f64], ys: &[f64]) -> Self {
        Self {
            label: label.into(),
            points: xs.iter().copied().zip(ys.iter().copied()).collect(),
        }
    }
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Padded `[lo, hi]` covering `v`, `[0, 1]` when empty.
fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

fn frame(svg: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<g class="axes" stroke="black"><line x1="{LEFT}" y1="{}" x2="{}" y2="{}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}"/></g>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph,
        TOP + ph
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(ylabel)
    );
}

fn ticks(svg: &mut String, (x0, x1): (f64, f64), (y0, y1): (f64, f64), xticks: bool) {
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let y = TOP + ph - f * ph;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            y + 4.0,
            tick_label(y0 + f * (y1 - y0))
        );
        if xticks {
            let x = LEFT + f * pw;
            let _ = writeln!(
                svg,
                r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 19.0,
                tick_label(x0 + f * (x1 - x0))
            );
        }
    }
}

fn tick_label(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(svg: &mut String, labels: &[&str]) {
    for (i, l) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 16.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            escape(l)
        );
    }
}

/// Line chart. Points with a non-finite coordinate split a series into
/// separate polylines.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let finite = || series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (x0, x1) = bounds(finite().map(|p| p.0));
    let (y0, y1) = bounds(finite().map(|p| p.1));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = pw / (x1 - x0);
    let sy = ph / (y1 - y0);
    let mut svg = String::new();
    frame(&mut svg, title, xlabel, ylabel);
    ticks(&mut svg, (x0, x1), (y0, y1), true);
    let _ = writeln!(
        svg,
        r#"<g class="data" transform="matrix({sx} 0 0 {} {} {})" fill="none">"#,
        -sy,
        LEFT - x0 * sx,
        TOP + ph + y0 * sy
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for run in s.points.split(|(x, y)| !(x.is_finite() && y.is_finite())) {
            if run.is_empty() {
                continue;
            }
            let pts: Vec<String> = run.iter().map(|(x, y)| format!("{x},{y}")).collect();
            let _ = writeln!(
                svg,
                r#"<polyline data-series="{i}" stroke="{color}" stroke-width="1.5" vector-effect="non-scaling-stroke" points="{}"/>"#,
                pts.join(" ")
            );
        }
    }
    svg.push_str("</g>\n");
    legend(&mut svg, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Grouped bar chart: one group per category, one bar per series. Non-finite
/// values draw no bar.
pub fn bar_chart(title: &str, ylabel: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let vals = series.iter().flat_map(|(_, v)| v).copied().filter(|v| v.is_finite());
    let (lo, hi) = bounds(vals.chain(std::iter::once(0.0)));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let y_of = |v: f64| TOP + ph - (v - lo) / (hi - lo) * ph;
    let mut svg = String::new();
    frame(&mut svg, title, "", ylabel);
    ticks(&mut svg, (0.0, 1.0), (lo, hi), false);
    let groups = categories.len().max(1) as f64;
    let gw = pw / groups;
    let bw = gw * 0.8 / series.len().max(1) as f64;
    for (c, name) in categories.iter().enumerate() {
        let gx = LEFT + gw * c as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            gx + gw / 2.0,
            TOP + ph + 19.0,
            escape(name)
        );
        for (k, (_, v)) in series.iter().enumerate() {
            let Some(&v) = v.get(c).filter(|v| v.is_finite()) else { continue };
            let (a, b) = (y_of(v), y_of(0.0));
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{bw}" height="{}" fill="{}" data-value="{v}"/>"#,
                gx + gw * 0.1 + bw * k as f64,
                a.min(b),
                (a - b).abs(),
                PALETTE[k % PALETTE.len()]
            );
        }
    }
    legend(&mut svg, &series.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Every polyline's points as parsed back from an SVG, in document order.
pub fn parse_polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.trim_start().starts_with("<polyline"))
        .filter_map(|l| {
            let start = l.find("points=\"")? + 8;
            let end = start + l[start..].find('"')?;
            l[start..end]
                .split(' ')
                .map(|p| {
                    let (x, y) = p.split_once(',')?;
                    Some((x.parse().ok()?, y.parse().ok()?))
                })
                .collect()
        })
        .collect()
}

fn apply_smoothing(v: Vec<f64>, smoothing: Option<usize>) -> Vec<f64> {
    match smoothing {
        Some(w) => smooth(&v, w),
        None => v,
    }
}

/// Groups per-update curve rows by their label column and seed.
fn curve_series(t: &CsvTable, label_col: &str, y: &str, smoothing: Option<usize>) -> Result<Vec<Series>> {
    let labels = t.strings(label_col)?;
    let seeds = t.strings("seed")?;
    let xs = t.numbers("env_steps")?;
    let ys = t.numbers(y)?;
    let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for i in 0..xs.len() {
        let g = groups.entry((labels[i].clone(), seeds[i].clone())).or_default();
        g.0.push(xs[i]);
        g.1.push(ys[i]);
    }
    Ok(groups
        .into_iter()
        .map(|((l, s), (x, y))| Series::new(format!("{l} seed {s}"), &x, &apply_smoothing(y, smoothing)))
        .collect())
}

fn fmt_opt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "n/a".into()
    }
}

fn mean_finite(v: &[f64]) -> f64 {
    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if f.is_empty() {
        f64::NAN
    } else {
        f.iter().sum::<f64>() / f.len() as f64
    }
}

/// Reads the known CSVs present in `dir` and writes SVGs plus `summary.txt`
/// into `dir/report`. Returns the written files.
pub fn emit_report(dir: &Path, smoothing: Option<usize>) -> Result<Vec<PathBuf>> {
    let out = dir.join("report");
    std::fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    let mut summary = String::new();
    let emit = |name: &str, svg: String, written: &mut Vec<PathBuf>| -> Result<()> {
        let p = out.join(name);
        std::fs::write(&p, svg)?;
        written.push(p);
        Ok(())
    };

    let metrics = dir.join("metrics.csv");
    if metrics.exists() {
        let t = CsvTable::read(&metrics)?;
        let x = t.numbers("env_steps")?;
        let series: Vec<Series> = [("global", "mean_return_global"), ("ego", "mean_return_E"), ("coordination", "mean_return_C")]
            .iter()
            .map(|(l, c)| Ok(Series::new(*l, &x, &apply_smoothing(t.numbers(c)?, smoothing))))
            .collect::<Result<_>>()?;
        emit("reward.svg", line_chart("Training return", "environment steps", "mean episode return", &series), &mut written)?;
        let g = t.numbers("mean_return_global")?;
        let _ = writeln!(summary, "training: {} updates, final mean global return {}", g.len(), fmt_opt(g.last().copied().unwrap_or(f64::NAN)));
    }

    let loss = dir.join("dpl_loss.csv");
    if loss.exists() {
        let t = CsvTable::read(&loss)?;
        let x = t.numbers("epoch")?;
        let tr = t.numbers("train_mse")?;
        let va = t.numbers("val_mse")?;
        let series = vec![Series::new("train", &x, &tr), Series::new("validation", &x, &va)];
        emit("dpl_loss.svg", line_chart("Prior model reconstruction", "epoch", "MSE", &series), &mut written)?;
        let _ = writeln!(
            summary,
            "dpl: {} epochs, validation MSE {} -> {}",
            x.len().saturating_sub(1),
            fmt_opt(va.get(1).copied().unwrap_or(f64::NAN)),
            fmt_opt(va.last().copied().unwrap_or(f64::NAN))
        );
    }

    let curves = dir.join("curves.csv");
    if curves.exists() {
        let t = CsvTable::read(&curves)?;
        let series = curve_series(&t, "arm", "mean_return_global", smoothing)?;
        emit("curves.svg", line_chart("Training return per run", "environment steps", "mean global return", &series), &mut written)?;
    }

    let ablation = dir.join("ablation.csv");
    if ablation.exists() {
        let t = CsvTable::read(&ablation)?;
        let seeds = t.strings("seed")?;
        let p = t.numbers("prior_return")?;
        let n = t.numbers("no_prior_return")?;
        emit(
            "ablation.svg",
            bar_chart("Final evaluation return", "mean global return", &seeds, &[("prior".into(), p.clone()), ("no prior".into(), n.clone())]),
            &mut written,
        )?;
        let _ = writeln!(summary, "ablation: prior {} vs no prior {} over {} seeds", fmt_opt(mean_finite(&p)), fmt_opt(mean_finite(&n)), seeds.len());
    }

    let sweep = dir.join("sweep.csv");
    if sweep.exists() {
        let t = CsvTable::read(&sweep)?;
        let phi = t.numbers("phi")?;
        let cols = ["mean_return_global", "mean_return_E", "mean_return_C", "mean_av_speed", "mean_min_pet", "collision_rate"];
        let data: Vec<Vec<f64>> = cols.iter().map(|c| t.numbers(c)).collect::<Result<_>>()?;
        let mut keys: Vec<f64> = phi.clone();
        keys.sort_by(f64::total_cmp);
        keys.dedup();
        let per_phi = |col: &[f64]| -> Vec<f64> {
            keys.iter()
                .map(|k| mean_finite(&phi.iter().zip(col).filter(|(p, _)| *p == k).map(|(_, v)| *v).collect::<Vec<_>>()))
                .collect()
        };
        let means: Vec<Vec<f64>> = data.iter().map(|c| per_phi(c)).collect();
        let series = vec![
            Series::new("global", &keys, &means[0]),
            Series::new("ego", &keys, &means[1]),
            Series::new("coordination", &keys, &means[2]),
        ];
        emit("sweep_return.svg", line_chart("Return by coordination tendency", "phi (rad)", "mean evaluation return", &series), &mut written)?;
        let cats: Vec<String> = keys.iter().map(|k| format!("{k:.3}")).collect();
        emit(
            "sweep_cases.svg",
            bar_chart("AV speed and minimum PET", "m/s or s", &cats, &[("mean AV speed".into(), means[3].clone()), ("mean min PET".into(), means[4].clone())]),
            &mut written,
        )?;
        for (i, k) in keys.iter().enumerate() {
            let _ = writeln!(
                summary,
                "sweep phi {k:.4}: global {} speed {} min PET {} collisions {}",
                fmt_opt(means[0][i]),
                fmt_opt(means[3][i]),
                fmt_opt(means[4][i]),
                fmt_opt(means[5][i])
            );
        }
    }

    let p = out.join("summary.txt");
    std::fs::write(&p, summary)?;
    written.push(p);
    Ok(written)
}
