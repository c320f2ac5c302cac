//! Output files: long-format surface CSVs, univariate effect CSVs, JSON
//! documents and SVG plots.

use std::fs::{self, File};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{FmmError, Result};
use crate::grid::SamplingGrid;
use crate::inference::CoefficientInference;
use crate::reduction::{Axis, UnivariateEffect};

pub const SURFACE_COLUMNS: [&str; 12] = [
    "r", "l", "s", "t", "estimate", "variance", "pcb_lo", "pcb_hi", "scb_lo", "scb_hi", "sig_scb", "sig_pcb",
];
pub const UNIVARIATE_COLUMNS: [&str; 7] = ["axis_value", "estimate", "variance", "pcb_lo", "pcb_hi", "scb_lo", "scb_hi"];

pub fn surface_file(name: &str) -> String {
    format!("surface_{name}.csv")
}

pub fn sigmap_file(name: &str) -> String {
    format!("sigmap_{name}.svg")
}

pub fn univariate_file(name: &str, axis: Axis, ext: &str) -> String {
    format!("univariate_{name}_{axis}.{ext}")
}

/// File-safe form of a coefficient name.
pub fn safe_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| FmmError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> FmmError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FmmError::io(path, io),
        other => FmmError::Parse {
            file: path.display().to_string(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

/// One row per cell, `r` fastest within each `l`.
pub fn write_surface_csv(path: &Path, grid: &SamplingGrid, c: &CoefficientInference) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SURFACE_COLUMNS).map_err(|e| csv_err(path, e))?;
    for l in 0..grid.l_len() {
        for r in 0..grid.r_len() {
            let rec = [
                r.to_string(),
                l.to_string(),
                fmt(grid.s_raw()[r]),
                fmt(grid.t_raw()[l]),
                fmt(c.beta_hat[(r, l)]),
                fmt(c.var_hat[(r, l)]),
                fmt(c.pcb_lower[(r, l)]),
                fmt(c.pcb_upper[(r, l)]),
                fmt(c.scb_lower[(r, l)]),
                fmt(c.scb_upper[(r, l)]),
                fmt(c.sig_map[(r, l)]),
                fmt(c.sig_map_pcb[(r, l)]),
            ];
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| FmmError::io(path, e))
}

/// Reads `path` into a header-checked table of floats.
fn read_table(path: &Path, expected: &[&str]) -> Result<Vec<Vec<f64>>> {
    let file_name = path.display().to_string();
    let file = File::open(path).map_err(|e| FmmError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| FmmError::Parse {
        file: file_name.clone(),
        line: 1,
        message: e.to_string(),
    })?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(FmmError::Parse {
            file: file_name,
            line: 1,
            message: format!("expected header {}, found {}", expected.join(","), got.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| FmmError::Parse {
            file: file_name.clone(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(line),
            message: e.to_string(),
        })?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(col, v)| {
                v.trim().parse::<f64>().map_err(|_| FmmError::Parse {
                    file: file_name.clone(),
                    line,
                    message: format!("column `{}`: cannot parse `{v}` as a number", expected[col]),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Surface columns read back from a surface CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceTable {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub estimate: DMatrix<f64>,
    pub sig_scb: DMatrix<f64>,
    pub sig_pcb: DMatrix<f64>,
}

pub fn read_surface_csv(path: &Path) -> Result<SurfaceTable> {
    let rows = read_table(path, &SURFACE_COLUMNS)?;
    let file = path.display().to_string();
    let index = |x: f64, line: usize| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(FmmError::Parse {
                file: file.clone(),
                line,
                message: format!("grid index `{x}` is not a nonnegative integer"),
            })
        }
    };
    let mut r_len = 0;
    let mut l_len = 0;
    for (k, row) in rows.iter().enumerate() {
        r_len = r_len.max(index(row[0], k + 2)? + 1);
        l_len = l_len.max(index(row[1], k + 2)? + 1);
    }
    if rows.len() != r_len * l_len || rows.is_empty() {
        return Err(FmmError::Parse {
            file,
            line: rows.len() + 1,
            message: format!("expected {} rows for a {r_len} x {l_len} grid, found {}", r_len * l_len, rows.len()),
        });
    }
    let mut s = vec![0.0; r_len];
    let mut t = vec![0.0; l_len];
    let mut estimate = DMatrix::zeros(r_len, l_len);
    let mut sig_scb = DMatrix::zeros(r_len, l_len);
    let mut sig_pcb = DMatrix::zeros(r_len, l_len);
    for row in &rows {
        let (r, l) = (row[0] as usize, row[1] as usize);
        s[r] = row[2];
        t[l] = row[3];
        estimate[(r, l)] = row[4];
        sig_scb[(r, l)] = row[10];
        sig_pcb[(r, l)] = row[11];
    }
    Ok(SurfaceTable {
        s,
        t,
        estimate,
        sig_scb,
        sig_pcb,
    })
}

pub fn write_univariate_csv(path: &Path, eff: &UnivariateEffect) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(UNIVARIATE_COLUMNS).map_err(|e| csv_err(path, e))?;
    for k in 0..eff.estimate.len() {
        let rec = [
            eff.axis_values[k],
            eff.estimate[k],
            eff.variance[k],
            eff.pcb_lower[k],
            eff.pcb_upper[k],
            eff.scb_lower[k],
            eff.scb_upper[k],
        ]
        .map(fmt);
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| FmmError::io(path, e))
}

/// Columns of a univariate CSV: axis values, estimate, PCB, SCB.
#[derive(Clone, Debug, PartialEq)]
pub struct UnivariateTable {
    pub x: Vec<f64>,
    pub estimate: DVector<f64>,
    pub pcb: (DVector<f64>, DVector<f64>),
    pub scb: (DVector<f64>, DVector<f64>),
}

pub fn read_univariate_csv(path: &Path) -> Result<UnivariateTable> {
    let rows = read_table(path, &UNIVARIATE_COLUMNS)?;
    if rows.is_empty() {
        return Err(FmmError::Parse {
            file: path.display().to_string(),
            line: 2,
            message: "no data rows".into(),
        });
    }
    let col = |c: usize| DVector::from_iterator(rows.len(), rows.iter().map(|r| r[c]));
    Ok(UnivariateTable {
        x: rows.iter().map(|r| r[0]).collect(),
        estimate: col(1),
        pcb: (col(3), col(4)),
        scb: (col(5), col(6)),
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| FmmError::io(path, e))
}

/// Diverging blue-white-red colour for `v` on `[-vmax, vmax]`; exactly
/// white at zero.
pub fn diverging_color(v: f64, vmax: f64) -> String {
    if v == 0.0 || vmax <= 0.0 || !v.is_finite() {
        return "#ffffff".into();
    }
    let x = (v / vmax).clamp(-1.0, 1.0);
    let (target, a) = if x > 0.0 { ((178.0, 24.0, 43.0), x) } else { ((33.0, 102.0, 172.0), -x) };
    let mix = |c: f64| (255.0 + (c - 255.0) * a).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(target.0), mix(target.1), mix(target.2))
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PLOT_W: f64 = 480.0;
const PLOT_H: f64 = 320.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const LEGEND_W: f64 = 90.0;

/// Heatmap of an `R x L` field with `t` horizontal and `s` vertical; body
/// cells carry `class="cell"`.
pub fn heatmap_svg(title: &str, field: &DMatrix<f64>, s: &[f64], t: &[f64]) -> String {
    let (r_len, l_len) = field.shape();
    let vmax = field.amax();
    let cw = PLOT_W / l_len as f64;
    let ch = PLOT_H / r_len as f64;
    let width = MARGIN_L + PLOT_W + LEGEND_W;
    let height = MARGIN_T + PLOT_H + MARGIN_B;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + PLOT_W / 2.0,
        esc(title)
    ));
    out.push_str("<g class=\"body\">\n");
    for r in 0..r_len {
        for l in 0..l_len {
            // s increases upwards
            let y = MARGIN_T + (r_len - 1 - r) as f64 * ch;
            let x = MARGIN_L + l as f64 * cw;
            out.push_str(&format!(
                "<rect class=\"cell\" x=\"{x:.3}\" y=\"{y:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\"/>\n",
                cw + 0.05,
                ch + 0.05,
                diverging_color(field[(r, l)], vmax)
            ));
        }
    }
    out.push_str("</g>\n");
    out.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"none\" stroke=\"#000000\"/>\n"
    ));
    let label = |v: f64| format!("{v:.3}");
    let (t0, t1) = (t.first().copied().unwrap_or(0.0), t.last().copied().unwrap_or(1.0));
    let (s0, s1) = (s.first().copied().unwrap_or(0.0), s.last().copied().unwrap_or(1.0));
    let base = MARGIN_T + PLOT_H;
    out.push_str(&format!(
        "<text x=\"{MARGIN_L}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
        base + 16.0,
        label(t0)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
        MARGIN_L + PLOT_W,
        base + 16.0,
        label(t1)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">t</text>\n",
        MARGIN_L + PLOT_W / 2.0,
        base + 36.0
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{base}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
        MARGIN_L - 4.0,
        label(s0)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
        MARGIN_L - 4.0,
        MARGIN_T + 10.0,
        label(s1)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">s</text>\n",
        MARGIN_L - 40.0,
        MARGIN_T + PLOT_H / 2.0
    ));
    // colour bar
    let bx = MARGIN_L + PLOT_W + 20.0;
    let steps = 20;
    let bh = PLOT_H / steps as f64;
    for k in 0..steps {
        let v = vmax * (1.0 - 2.0 * (k as f64 + 0.5) / steps as f64);
        out.push_str(&format!(
            "<rect class=\"legend\" x=\"{bx}\" y=\"{:.3}\" width=\"16\" height=\"{:.3}\" fill=\"{}\"/>\n",
            MARGIN_T + k as f64 * bh,
            bh + 0.05,
            diverging_color(if vmax > 0.0 { v } else { 0.0 }, vmax)
        ));
    }
    for (y, v) in [(MARGIN_T + 10.0, vmax), (MARGIN_T + PLOT_H / 2.0, 0.0), (base, -vmax)] {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
            bx + 20.0,
            label(v)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Line plot of a univariate effect: light SCB area, dark PCB area, dashed
/// estimate.
pub fn bands_svg(title: &str, axis_label: &str, tab: &UnivariateTable) -> String {
    let n = tab.x.len();
    let (x0, x1) = (tab.x[0], tab.x[n - 1]);
    let mut ymin = tab.scb.0.min().min(tab.pcb.0.min()).min(0.0);
    let mut ymax = tab.scb.1.max().max(tab.pcb.1.max()).max(0.0);
    if !(ymax > ymin) {
        ymin -= 1.0;
        ymax += 1.0;
    }
    let pad = 0.05 * (ymax - ymin);
    let (ymin, ymax) = (ymin - pad, ymax + pad);
    let px = |x: f64| {
        if x1 > x0 {
            MARGIN_L + (x - x0) / (x1 - x0) * PLOT_W
        } else {
            MARGIN_L + PLOT_W / 2.0
        }
    };
    let py = |y: f64| MARGIN_T + (ymax - y) / (ymax - ymin) * PLOT_H;
    let area = |lo: &DVector<f64>, hi: &DVector<f64>| {
        let mut pts: Vec<String> = (0..n).map(|k| format!("{:.3},{:.3}", px(tab.x[k]), py(hi[k]))).collect();
        pts.extend((0..n).rev().map(|k| format!("{:.3},{:.3}", px(tab.x[k]), py(lo[k]))));
        pts.join(" ")
    };
    let width = MARGIN_L + PLOT_W + 20.0;
    let height = MARGIN_T + PLOT_H + MARGIN_B;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + PLOT_W / 2.0,
        esc(title)
    ));
    out.push_str(&format!(
        "<polygon class=\"scb\" points=\"{}\" fill=\"#d9d9d9\"/>\n",
        area(&tab.scb.0, &tab.scb.1)
    ));
    out.push_str(&format!(
        "<polygon class=\"pcb\" points=\"{}\" fill=\"#8c8c8c\"/>\n",
        area(&tab.pcb.0, &tab.pcb.1)
    ));
    out.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{y:.3}\" x2=\"{}\" y2=\"{y:.3}\" stroke=\"#000000\" stroke-width=\"0.5\"/>\n",
        MARGIN_L + PLOT_W,
        y = py(0.0)
    ));
    let line: Vec<String> = (0..n).map(|k| format!("{:.3},{:.3}", px(tab.x[k]), py(tab.estimate[k]))).collect();
    out.push_str(&format!(
        "<polyline class=\"estimate\" points=\"{}\" fill=\"none\" stroke=\"#1f4e9c\" stroke-width=\"1.5\" stroke-dasharray=\"6,3\"/>\n",
        line.join(" ")
    ));
    out.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"none\" stroke=\"#000000\"/>\n"
    ));
    let base = MARGIN_T + PLOT_H;
    for (x, anchor, v) in [(MARGIN_L, "start", x0), (MARGIN_L + PLOT_W, "end", x1)] {
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"{anchor}\">{v:.3}</text>\n",
            base + 16.0
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + PLOT_W / 2.0,
        base + 36.0,
        esc(axis_label)
    ));
    for (y, v) in [(MARGIN_T + 10.0, ymax), (base, ymin)] {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.3}</text>\n",
            MARGIN_L - 4.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| FmmError::io(path, e))
}
