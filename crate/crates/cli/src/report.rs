//! SVG line charts and a plain-text summary from `reports/evaluation.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use plotters::prelude::*;

use crate::commands::{load_evaluation, EvaluationReport};

const SIZE: (u32, u32) = (640, 420);

type Series = Vec<(String, Vec<(f64, f64)>)>;

fn draw(title: &str, x_label: &str, y_label: &str, x: (f64, f64), y: (f64, f64), series: &Series) -> anyhow::Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(x.0..x.1, y.0..y.1)
            .map_err(|e| anyhow!("{e}"))?;
        chart
            .configure_mesh()
            .x_desc(x_label)
            .y_desc(y_label)
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                .map_err(|e| anyhow!("{e}"))?
                .label(name.as_str())
                .legend(move |(px, py)| PathElement::new(vec![(px, py), (px + 16, py)], color.stroke_width(2)));
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(|e| anyhow!("{e}"))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
        root.present().map_err(|e| anyhow!("{e}"))?;
    }
    Ok(svg)
}

/// Places an XML comment carrying the digest right after the opening `<svg>` tag.
fn stamp(svg: &str, digest: &str) -> String {
    let comment = format!("\n<!-- config_digest={digest} -->");
    match svg.find("<svg").and_then(|s| svg[s..].find('>').map(|e| s + e + 1)) {
        Some(at) => format!("{}{comment}{}", &svg[..at], &svg[at..]),
        None => format!("<!-- config_digest={digest} -->\n{svg}"),
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

pub fn lds_series(r: &EvaluationReport) -> Series {
    let mut by_method: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for e in &r.lds {
        by_method.entry(e.report.method.clone()).or_default().push((e.report.alpha, e.report.mean));
    }
    by_method
        .into_iter()
        .map(|(m, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (m, pts)
        })
        .collect()
}

pub fn counterfactual_series(r: &EvaluationReport) -> Series {
    r.counterfactual
        .iter()
        .map(|e| {
            let pts = e.curve.k_grid.iter().zip(&e.curve.fraction).map(|(&k, &f)| (k as f64, f)).collect();
            (e.method.clone(), pts)
        })
        .collect()
}

fn bounds(series: &Series) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
    for &(px, py) in pts {
        x = (x.0.min(px), x.1.max(px));
        y = (y.0.min(py), y.1.max(py));
    }
    (padded(x.0, x.1), padded(y.0, y.1))
}

/// Writes `plots/lds_vs_alpha.svg` and, when present, `plots/counterfactual.svg`;
/// returns the written paths and a text summary.
pub fn report(out: &Path) -> anyhow::Result<(Vec<PathBuf>, String)> {
    let r = load_evaluation(out)?;
    let dir = out.join("plots");
    fs::create_dir_all(&dir).map_err(|e| tda_core::TdaError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut written = Vec::new();
    let mut write = |name: &str, svg: String| -> anyhow::Result<()> {
        let path = dir.join(name);
        fs::write(&path, stamp(&svg, &r.config_digest)).map_err(|e| tda_core::TdaError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        written.push(path);
        Ok(())
    };

    let lds = lds_series(&r);
    if !lds.is_empty() {
        let (x, y) = bounds(&lds);
        let y = (y.0.min(-0.05), y.1.max(1.0));
        write("lds_vs_alpha.svg", draw("LDS vs subset fraction", "alpha", "LDS", x, y, &lds)?)?;
    }
    let cf = counterfactual_series(&r);
    if !cf.is_empty() {
        let (x, _) = bounds(&cf);
        write("counterfactual.svg", draw("Counterfactual flips", "removed k", "fraction flipped", x, (0.0, 1.0), &cf)?)?;
    }

    let mut text = format!("config {}\n{:<20} {:>6} {:>8} {:>20}\n", r.config_digest, "method", "alpha", "LDS", "CI");
    for e in &r.lds {
        let l = &e.report;
        text += &format!("{:<20} {:>6.3} {:>8.4} [{:>8.4}, {:>8.4}]\n", l.method, l.alpha, l.mean, l.ci.0, l.ci.1);
    }
    for e in &r.counterfactual {
        let frac: Vec<String> = e.curve.fraction.iter().map(|f| format!("{f:.2}")).collect();
        text += &format!("{:<20} flips at k={:?}: {}\n", e.method, e.curve.k_grid, frac.join(" "));
    }
    Ok((written, text))
}
