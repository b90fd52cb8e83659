//! Static SVG rendering of run curves and sweep summaries. Rendering is a
//! pure function of the input files: fixed layout, fixed palette, fixed
//! number formatting, no timestamps, so re-rendering the same inputs
//! reproduces the file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::config::{PlotKind, PlotSpec};
use crate::traces::{read_float_table, read_sfac_trace, SfacTraceRow};

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 520.0;
const MARGIN_LEFT: f64 = 78.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 58.0;
const MARGIN_BOTTOM: f64 = 56.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One drawable series: a center line with an optional spread band.
struct Series {
    label: String,
    xs: Vec<f64>,
    center: Vec<f64>,
    band: Option<(Vec<f64>, Vec<f64>)>,
}

pub fn cmd_plot(spec: &PlotSpec, name: &str, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if spec.inputs.is_empty() {
        bail!("[plot].inputs is empty; nothing to draw");
    }
    let (series, x_label, subtitle) = match spec.kind {
        PlotKind::Curves => load_curves(spec)?,
        PlotKind::Sweep => load_sweep(spec)?,
    };
    let title = spec.title.clone().unwrap_or_else(|| spec.column.clone());
    let svg = render(&series, &title, &subtitle, &x_label, &spec.column, spec.log_y)?;
    let path = out.join(format!("{name}.svg"));
    fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn label_for(spec: &PlotSpec, index: usize) -> String {
    spec.labels
        .get(index)
        .cloned()
        .unwrap_or_else(|| spec.inputs[index].display().to_string())
}

/// Per-round column from every seed directory of each run directory,
/// reduced to median and interquartile band across seeds.
fn load_curves(spec: &PlotSpec) -> Result<(Vec<Series>, String, String)> {
    let column = column_accessor(&spec.column)?;
    let mut series = Vec::new();
    let mut n_seeds_seen = 0usize;
    for (idx, dir) in spec.inputs.iter().enumerate() {
        let mut seed_dirs: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("listing run directory {}", dir.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("seed-"))
            })
            .collect();
        seed_dirs.sort();
        if seed_dirs.is_empty() {
            bail!("{} contains no seed-* directories", dir.display());
        }
        n_seeds_seen = n_seeds_seen.max(seed_dirs.len());

        let mut per_seed: Vec<Vec<SfacTraceRow>> = Vec::with_capacity(seed_dirs.len());
        for sd in &seed_dirs {
            let rows = read_sfac_trace(&sd.join("sfac_trace.csv"))?;
            if rows.is_empty() {
                bail!("{} holds an empty trace", sd.display());
            }
            per_seed.push(rows);
        }
        let rounds = per_seed[0].len();
        if per_seed.iter().any(|rows| rows.len() != rounds) {
            bail!("{}: seed traces disagree on round count", dir.display());
        }

        let mut xs = Vec::new();
        let mut center = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for k in 0..rounds {
            let mut values: Vec<f64> = per_seed
                .iter()
                .filter_map(|rows| column(&rows[k]))
                .collect();
            if values.is_empty() {
                continue;
            }
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite trace values"));
            xs.push(per_seed[0][k].k as f64);
            center.push(quantile(&values, 0.5));
            lo.push(quantile(&values, 0.25));
            hi.push(quantile(&values, 0.75));
        }
        if xs.is_empty() {
            bail!(
                "column {} has no recorded values under {}",
                spec.column,
                dir.display()
            );
        }
        series.push(Series {
            label: label_for(spec, idx),
            xs,
            center,
            band: Some((lo, hi)),
        });
    }
    let subtitle = format!("median with interquartile band over {n_seeds_seen} seeds");
    Ok((series, "outer round k".to_string(), subtitle))
}

/// Summary-file column against the file's first column, one line per
/// input, with the shared monotone trend named in the subtitle.
fn load_sweep(spec: &PlotSpec) -> Result<(Vec<Series>, String, String)> {
    let mut series = Vec::new();
    let mut x_label = String::new();
    let mut directions = Vec::new();
    for (idx, path) in spec.inputs.iter().enumerate() {
        let (header, rows) = read_float_table(path)?;
        if rows.is_empty() {
            bail!("{} contains no data rows", path.display());
        }
        let y_col = header
            .iter()
            .position(|h| h == &spec.column)
            .with_context(|| {
                format!(
                    "{} has no column {:?} (available: {})",
                    path.display(),
                    spec.column,
                    header.join(", ")
                )
            })?;
        if x_label.is_empty() {
            x_label = header[0].clone();
        }
        let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r[y_col]).collect();
        directions.push(trend_direction(&ys));
        series.push(Series {
            label: label_for(spec, idx),
            xs,
            center: ys,
            band: None,
        });
    }
    let subtitle = match shared_direction(&directions) {
        Some(Trend::NonIncreasing) => format!("trend: nonincreasing in {x_label}"),
        Some(Trend::NonDecreasing) => format!("trend: nondecreasing in {x_label}"),
        Some(Trend::Flat) => format!("trend: flat in {x_label}"),
        None => "trend: mixed".to_string(),
    };
    Ok((series, x_label, subtitle))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trend {
    NonIncreasing,
    NonDecreasing,
    Flat,
}

fn trend_direction(ys: &[f64]) -> Option<Trend> {
    let nonincreasing = ys.windows(2).all(|w| w[1] <= w[0]);
    let nondecreasing = ys.windows(2).all(|w| w[1] >= w[0]);
    match (nonincreasing, nondecreasing) {
        (true, true) => Some(Trend::Flat),
        (true, false) => Some(Trend::NonIncreasing),
        (false, true) => Some(Trend::NonDecreasing),
        (false, false) => None,
    }
}

fn shared_direction(directions: &[Option<Trend>]) -> Option<Trend> {
    let mut merged: Option<Trend> = None;
    for d in directions {
        let d = (*d)?;
        merged = Some(match (merged, d) {
            (None, d) => d,
            (Some(Trend::Flat), d) | (Some(d), Trend::Flat) => d,
            (Some(a), b) if a == b => a,
            _ => return None,
        });
    }
    merged
}

fn column_accessor(name: &str) -> Result<fn(&SfacTraceRow) -> Option<f64>> {
    Ok(match name {
        "J_avg_exact" => |r: &SfacTraceRow| r.j_avg_exact,
        "grad_norm_sq_exact" => |r: &SfacTraceRow| r.grad_norm_sq_exact,
        "critic_err_sq" => |r: &SfacTraceRow| r.critic_err_sq,
        "alpha_k" => |r: &SfacTraceRow| Some(r.alpha_k),
        "beta_k" => |r: &SfacTraceRow| Some(r.beta_k),
        other => bail!(
            "unknown trace column {other:?}; choose one of J_avg_exact, \
             grad_norm_sq_exact, critic_err_sq, alpha_k, beta_k"
        ),
    })
}

/// Interpolated quantile of an already sorted non-empty slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[lo]
    }
}

fn fmt_coord(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn render(
    series: &[Series],
    title: &str,
    subtitle: &str,
    x_label: &str,
    y_label: &str,
    log_y: bool,
) -> Result<String> {
    let y_of = |v: f64| -> Result<f64> {
        if log_y {
            if v <= 0.0 {
                bail!("log scale requested but the data contains {v}, which is not positive");
            }
            Ok(v.log10())
        } else {
            Ok(v)
        }
    };

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for &x in &s.xs {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
        }
        for &v in &s.center {
            let v = y_of(v)?;
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
        if let Some((lo, hi)) = &s.band {
            for &v in lo.iter().chain(hi) {
                let v = y_of(v)?;
                y_min = y_min.min(v);
                y_max = y_max.max(v);
            }
        }
    }
    if x_min == x_max {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_min == y_max {
        let pad = if y_min == 0.0 { 0.5 } else { y_min.abs() * 0.1 };
        y_min -= pad;
        y_max += pad;
    }

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = move |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = move |y: f64| MARGIN_TOP + plot_h - (y - y_min) / (y_max - y_min) * plot_h;

    let mut out = String::with_capacity(16 * 1024);
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"Helvetica, Arial, sans-serif\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"17\" fill=\"#111111\">{}</text>\n",
        fmt_coord(MARGIN_LEFT),
        escape(title)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"43\" font-size=\"12\" fill=\"#555555\">{}</text>\n",
        fmt_coord(MARGIN_LEFT),
        escape(subtitle)
    ));

    // Axes and ticks.
    let axis_y = MARGIN_TOP + plot_h;
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333333\"/>\n",
        fmt_coord(MARGIN_LEFT),
        fmt_coord(axis_y),
        fmt_coord(MARGIN_LEFT + plot_w),
        fmt_coord(axis_y)
    ));
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333333\"/>\n",
        fmt_coord(MARGIN_LEFT),
        fmt_coord(MARGIN_TOP),
        fmt_coord(MARGIN_LEFT),
        fmt_coord(axis_y)
    ));
    for i in 0..5 {
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let px = sx(fx);
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#333333\"/>\n",
            fmt_coord(px),
            fmt_coord(axis_y),
            fmt_coord(axis_y + 5.0)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"#333333\" text-anchor=\"middle\">{}</text>\n",
            fmt_coord(px),
            fmt_coord(axis_y + 19.0),
            fmt_tick(fx)
        ));

        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        let py = sy(fy);
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{2}\" x2=\"{1}\" y2=\"{2}\" stroke=\"#333333\"/>\n",
            fmt_coord(MARGIN_LEFT - 5.0),
            fmt_coord(MARGIN_LEFT),
            fmt_coord(py)
        ));
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{2}\" x2=\"{}\" y2=\"{2}\" stroke=\"#eeeeee\"/>\n",
            fmt_coord(MARGIN_LEFT),
            fmt_coord(MARGIN_LEFT + plot_w),
            fmt_coord(py)
        ));
        let tick_label = if log_y {
            format!("1e{}", fmt_tick(fy))
        } else {
            fmt_tick(fy)
        };
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"#333333\" text-anchor=\"end\">{}</text>\n",
            fmt_coord(MARGIN_LEFT - 9.0),
            fmt_coord(py + 4.0),
            tick_label
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"#111111\" text-anchor=\"middle\">{}</text>\n",
        fmt_coord(MARGIN_LEFT + plot_w / 2.0),
        fmt_coord(HEIGHT - 14.0),
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-size=\"12\" fill=\"#111111\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {})\">{}</text>\n",
        fmt_coord(MARGIN_TOP + plot_h / 2.0),
        fmt_coord(MARGIN_TOP + plot_h / 2.0),
        escape(if log_y { "log10 scale" } else { y_label })
    ));

    // Bands beneath lines beneath markers.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some((lo, hi)) = &s.band {
            let mut points = Vec::with_capacity(2 * s.xs.len());
            for (j, &x) in s.xs.iter().enumerate() {
                points.push(format!("{},{}", fmt_coord(sx(x)), fmt_coord(sy(y_of(hi[j])?))));
            }
            for (j, &x) in s.xs.iter().enumerate().rev() {
                points.push(format!("{},{}", fmt_coord(sx(x)), fmt_coord(sy(y_of(lo[j])?))));
            }
            out.push_str(&format!(
                "<polygon points=\"{}\" fill=\"{}\" fill-opacity=\"0.18\" stroke=\"none\"/>\n",
                points.join(" "),
                color
            ));
        }
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Result<Vec<String>> = s
            .xs
            .iter()
            .zip(&s.center)
            .map(|(&x, &v)| Ok(format!("{},{}", fmt_coord(sx(x)), fmt_coord(sy(y_of(v)?)))))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"/>\n",
            points?.join(" "),
            color
        ));
        if s.band.is_none() {
            for (&x, &v) in s.xs.iter().zip(&s.center) {
                out.push_str(&format!(
                    "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\"/>\n",
                    fmt_coord(sx(x)),
                    fmt_coord(sy(y_of(v)?)),
                    color
                ));
            }
        }
    }

    // Legend, top right inside the plot area.
    let legend_x = MARGIN_LEFT + plot_w - 220.0;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MARGIN_TOP + 14.0 + 18.0 * i as f64;
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{2}\" x2=\"{}\" y2=\"{2}\" stroke=\"{3}\" stroke-width=\"2.5\"/>\n",
            fmt_coord(legend_x),
            fmt_coord(legend_x + 24.0),
            fmt_coord(y),
            color
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"#111111\">{}</text>\n",
            fmt_coord(legend_x + 30.0),
            fmt_coord(y + 4.0),
            escape(&s.label)
        ));
    }

    out.push_str("</svg>\n");
    Ok(out)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
