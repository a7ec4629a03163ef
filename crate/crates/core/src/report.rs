//! Text-only report bundle: per-class PA bars, an OA comparison and a
//! merged CSV. Each bar is one `<rect class="bar">`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::Metrics;

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
const PLOT_H: f64 = 200.0;
const MARGIN: f64 = 40.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub pa_svg: PathBuf,
    pub oa_svg: PathBuf,
    pub merged_csv: PathBuf,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn check(series: &[(String, Metrics)]) -> Result<usize> {
    let (_, first) = series.first().ok_or_else(|| Error::invalid("report needs at least one metrics file"))?;
    let n = first.pa.len();
    for (name, m) in series {
        if m.pa.len() != n {
            return Err(Error::invalid(format!("{name}: {} PA values, expected {n}", m.pa.len())));
        }
        for (k, &p) in m.pa.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name}: pa_{k} = {p} lies outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&m.oa) {
            return Err(Error::invalid(format!("{name}: oa = {} lies outside [0, 1]", m.oa)));
        }
    }
    Ok(n)
}

/// `groups[g][s]` is the bar of series `s` in group `g`.
fn bar_chart(title: &str, group_labels: &[String], series: &[String], groups: &[Vec<f64>]) -> String {
    let bar_w = 14.0;
    let group_w = bar_w * series.len() as f64 + 10.0;
    let width = 2.0 * MARGIN + group_w * groups.len() as f64 + 120.0;
    let height = PLOT_H + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="20" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let base = MARGIN + PLOT_H;
    let _ = writeln!(s, r#"<line x1="{MARGIN}" y1="{base}" x2="{:.1}" y2="{base}" stroke="black"/>"#, width - 120.0);
    for tick in [0.0, 0.5, 1.0] {
        let y = base - tick * PLOT_H;
        let _ = writeln!(s, r#"<text x="4" y="{y:.1}" font-family="sans-serif" font-size="10">{tick:.1}</text>"#);
    }
    for (g, (label, values)) in group_labels.iter().zip(groups).enumerate() {
        let x0 = MARGIN + g as f64 * group_w;
        for (i, &v) in values.iter().enumerate() {
            let h = v * PLOT_H;
            let _ = writeln!(
                s,
                r#"<rect class="bar" data-series="{}" data-group="{}" x="{:.1}" y="{:.1}" width="{bar_w}" height="{h:.1}" fill="{}"><title>{v:.4}</title></rect>"#,
                escape(&series[i]),
                escape(label),
                x0 + i as f64 * bar_w,
                base - h,
                PALETTE[i % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10">{}</text>"#,
            x0,
            base + 14.0,
            escape(label)
        );
    }
    for (i, name) in series.iter().enumerate() {
        let x = width - 110.0;
        let y = MARGIN + 16.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{y:.1}" width="10" height="10" fill="{}"/>"#, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10">{}</text>"#, x + 14.0, y + 9.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

pub fn pa_svg(series: &[(String, Metrics)]) -> Result<String> {
    let n = check(series)?;
    let names: Vec<String> = series.iter().map(|(k, _)| k.clone()).collect();
    let labels: Vec<String> = (0..n).map(|k| format!("pa_{k}")).collect();
    let groups: Vec<Vec<f64>> = (0..n).map(|k| series.iter().map(|(_, m)| m.pa[k]).collect()).collect();
    Ok(bar_chart("Producer accuracy per class", &labels, &names, &groups))
}

pub fn oa_svg(series: &[(String, Metrics)]) -> Result<String> {
    check(series)?;
    let names: Vec<String> = series.iter().map(|(k, _)| k.clone()).collect();
    let groups = vec![series.iter().map(|(_, m)| m.oa).collect()];
    Ok(bar_chart("Overall accuracy", &["oa".to_string()], &names, &groups))
}

/// One row per series: `name,oa,kappa,f1,pa_0..`.
pub fn merged_csv(series: &[(String, Metrics)]) -> Result<String> {
    let n = check(series)?;
    let mut s = format!("name,{}\n", Metrics::csv_header(n));
    for (name, m) in series {
        let _ = write!(s, "{name},{:.6},{:.6},{:.6}", m.oa, m.kappa, m.f1);
        for p in &m.pa {
            let _ = write!(s, ",{p:.6}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_report(series: &[(String, Metrics)], out: &Path) -> Result<ReportFiles> {
    let files = ReportFiles { pa_svg: out.join("pa.svg"), oa_svg: out.join("oa.svg"), merged_csv: out.join("merged.csv") };
    let pa = pa_svg(series)?;
    let oa = oa_svg(series)?;
    let csv = merged_csv(series)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (p, text) in [(&files.pa_svg, pa), (&files.oa_svg, oa), (&files.merged_csv, csv)] {
        fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(files)
}

/// Series names are file stems with a trailing `_metrics` removed.
pub fn report_from_files(paths: &[PathBuf], out: &Path) -> Result<ReportFiles> {
    let mut series = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
        let name = stem.strip_suffix("_metrics").unwrap_or(stem);
        series.push((name.to_string(), Metrics::from_csv(&text)?));
    }
    write_report(&series, out)
}
