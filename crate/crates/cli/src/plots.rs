//! Static SVG line charts drawn from loss traces.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use plotters::prelude::*;
use stfoundry::pipeline::{RunLayout, Summary};
use stfoundry::training::{read_trace, TraceRow};

type Series = BTreeMap<String, Vec<(f64, f64)>>;

fn line_chart(path: &Path, title: &str, series: &Series) -> Result<()> {
    let points = series.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Ok(());
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    let err = |e: DrawingAreaErrorKind<std::io::Error>| anyhow!("{}: {e:?}", path.display());
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1.max(x0 + 1.0), (y0 - pad)..(y1 + pad))
        .map_err(err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(err)?;
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

fn group<F: Fn(&TraceRow) -> Option<String>>(rows: &[TraceRow], key: F) -> Series {
    let mut out = Series::new();
    for r in rows {
        if let Some(k) = key(r) {
            out.entry(k).or_default().push((r.epoch as f64, r.value));
        }
    }
    out
}

/// `mrt.svg`, one `<task>.svg` per tuned task and `tune_valid.svg`.
pub fn render_all(layout: &RunLayout, summary: &Summary) -> Result<()> {
    let dir = layout.plots();
    std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    let mrt = layout.traces().join("mrt.csv");
    if mrt.exists() {
        let rows = read_trace(&mrt)?;
        let series = group(&rows, |r| (r.component != "accuracy").then(|| r.component.clone()));
        line_chart(&dir.join("mrt.svg"), "Stage 1 reconstruction loss", &series)?;
    }
    let tune = layout.traces().join("tune.csv");
    if tune.exists() {
        let rows = read_trace(&tune)?;
        for task in summary.reports.keys() {
            let series = group(&rows, |r| (&r.task == task).then(|| r.component.clone()));
            if !series.is_empty() {
                line_chart(&dir.join(format!("{task}.svg")), &format!("{task} loss"), &series)?;
            }
        }
        let valid = group(&rows, |r| (r.component == "valid").then(|| r.task.clone()));
        line_chart(&dir.join("tune_valid.svg"), "Stage 2 validation loss", &valid)?;
    }
    Ok(())
}
