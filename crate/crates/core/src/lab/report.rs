//! Study reports: flat rows, fitted slopes, CSV/JSON/SVG export.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::fit::Slope;
use crate::stability::escape;

pub const CSV_HEADER: &str = "study,solver,params,variable,N,nfe,h,g,seed,metric,value,flag";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub study: String,
    pub solver: String,
    pub params: String,
    pub variable: String,
    pub n: usize,
    pub nfe: usize,
    pub h: f64,
    pub g: Option<f64>,
    pub seed: Option<u64>,
    pub metric: String,
    pub value: f64,
    /// Empty when nothing is notable; otherwise e.g. `diverged`, `pass`, `fail`, `anomalous`.
    pub flag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeRow {
    pub solver: String,
    pub params: String,
    pub metric: String,
    #[serde(flatten)]
    pub fit: Slope,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ExperimentReport {
    pub study: String,
    pub rows: Vec<Row>,
    pub slopes: Vec<SlopeRow>,
    pub notes: Vec<String>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl ExperimentReport {
    pub fn new(study: impl Into<String>) -> Self {
        ExperimentReport { study: study.into(), ..Default::default() }
    }

    pub fn rows_for<'a>(&'a self, solver: &'a str, metric: &'a str) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows.iter().filter(move |r| r.solver == solver && r.metric == metric)
    }

    pub fn slope(&self, solver: &str, metric: &str) -> Option<&Slope> {
        self.slopes.iter().find(|s| s.solver == solver && s.metric == metric).map(|s| &s.fit)
    }

    pub fn diverged_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.flag == "diverged").count()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&r.study),
                csv_field(&r.solver),
                csv_field(&r.params),
                csv_field(&r.variable),
                r.n,
                r.nfe,
                r.h,
                opt(r.g),
                opt(r.seed),
                csv_field(&r.metric),
                r.value,
                csv_field(&r.flag)
            )?;
        }
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }

    /// Summary without the per-cell rows.
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            study: &'a str,
            rows: usize,
            diverged: usize,
            slopes: &'a [SlopeRow],
            notes: &'a [String],
        }
        serde_json::to_string_pretty(&Summary {
            study: &self.study,
            rows: self.rows.len(),
            diverged: self.diverged_rows(),
            slopes: &self.slopes,
            notes: &self.notes,
        })
        .expect("report is serialisable")
    }

    /// Log-log plot of `metric` against `x` (`"h"` or `"g"`), one series per solver and params.
    pub fn plot(&self, metric: &str, x: &str) -> String {
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.metric == metric) {
            let xv = match x {
                "g" => r.g.unwrap_or(f64::NAN),
                _ => r.h,
            };
            let label = if r.params.is_empty() { r.solver.clone() } else { format!("{} {}", r.solver, r.params) };
            match series.iter_mut().find(|(l, _)| *l == label) {
                Some((_, pts)) => pts.push((xv, r.value)),
                None => series.push((label, vec![(xv, r.value)])),
            }
        }
        // Average replicates (seeds) at equal x.
        for (_, pts) in series.iter_mut() {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut merged: Vec<(f64, f64, usize)> = Vec::new();
            for &(xv, yv) in pts.iter() {
                match merged.last_mut() {
                    Some(m) if m.0 == xv => {
                        m.1 += yv;
                        m.2 += 1;
                    }
                    _ => merged.push((xv, yv, 1)),
                }
            }
            *pts = merged.into_iter().map(|(a, b, n)| (a, b / n as f64)).collect();
        }
        line_plot(&format!("{} — {metric}", self.study), x, metric, &series, x != "g", true)
    }

    /// Writes `<stem>.csv`, `<stem>.json` and one SVG per listed plot; returns the paths.
    pub fn write_all(&self, dir: &Path, stem: &str, plots: &[(&str, &str)]) -> io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        let csv = dir.join(format!("{stem}.csv"));
        self.write_csv(io::BufWriter::new(std::fs::File::create(&csv)?))?;
        out.push(csv);
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.summary_json())?;
        out.push(json);
        for (metric, x) in plots {
            let p = dir.join(format!("{stem}_{metric}.svg"));
            std::fs::write(&p, self.plot(metric, x))?;
            out.push(p);
        }
        Ok(out)
    }
}

const PALETTE: [&str; 8] = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb", "#000000"];

/// Minimal SVG line chart; non-positive values are skipped on log axes.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)], log_x: bool, log_y: bool) -> String {
    let tx = |v: f64| if log_x { v.log10() } else { v };
    let ty = |v: f64| if log_y { v.log10() } else { v };
    let ok = |(x, y): &(f64, f64)| x.is_finite() && y.is_finite() && (!log_x || *x > 0.0) && (!log_y || *y > 0.0);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().filter(|q| ok(q)).map(|&(x, y)| (tx(x), ty(y)))).collect();
    let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |a, p| (a.0.min(p.0), a.1.max(p.0), a.2.min(p.1), a.3.max(p.1)),
    );
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let (w, h, left, top) = (520.0, 340.0, 70.0, 30.0);
    let sx = |v: f64| left + (v - x0) / (x1 - x0) * w;
    let sy = |v: f64| top + h - (v - y0) / (y1 - y0) * h;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}">"#, left + w + 200.0, top + h + 50.0);
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{w}" height="{h}" fill="none" stroke="#000"/>"##);
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let lx = if log_x { format!("1e{fx:.1}") } else { format!("{fx:.3}") };
        let ly = if log_y { format!("1e{fy:.1}") } else { format!("{fy:.3}") };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{lx}</text>"#, sx(fx), top + h + 15.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{ly}</text>"#, left - 4.0, sy(fy) + 3.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#, left + w / 2.0, top + h + 35.0, escape(xlabel));
    let _ = writeln!(s, r#"<text x="14" y="{:.1}" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#, top + h / 2.0, top + h / 2.0, escape(ylabel));
    for (k, (label, p)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let coords: Vec<String> = p.iter().filter(|q| ok(q)).map(|&(x, y)| format!("{:.2},{:.2}", sx(tx(x)), sy(ty(y)))).collect();
        if !coords.is_empty() {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
        }
        let ly = top + 12.0 + 14.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#, left + w + 10.0, left + w + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10">{}</text>"#, left + w + 34.0, ly + 3.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}
