use std::path::Path;

use anyhow::{anyhow, Result};
use kappa_core::harness::Report;
use plotters::prelude::*;

struct Bar {
    label: String,
    tokens: f64,
    peak: f64,
}

/// Grouped bars of token and peak-memory reduction against best-of-N, one
/// group per report row that has a best-of-N reference.
pub fn reduction_chart(reports: &[Report], out: &Path) -> Result<()> {
    let bars: Vec<Bar> = reports
        .iter()
        .flat_map(|r| &r.rows)
        .filter_map(|row| {
            row.vs_bon.as_ref().map(|v| Bar {
                label: row.label.clone(),
                tokens: v.token_reduction,
                peak: v.peak_reduction,
            })
        })
        .collect();
    if bars.is_empty() {
        return Err(super::usage("no report row has a best-of-N reference to plot against"));
    }
    let lo = bars.iter().flat_map(|b| [b.tokens, b.peak]).fold(0.0f64, f64::min);
    let n = bars.len();
    let width = (160 * n as u32).max(640);

    let root = SVGBackend::new(out, (width, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Reduction vs best-of-N", ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(48)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), (lo - 0.05).min(0.0)..1.0f64)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                bars.get(i as usize).map(|b| b.label.clone()).unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("reduction (1 - ratio)")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;

    let series = [("total tokens", BLUE, 0usize), ("peak memory proxy", RED, 1)];
    for (name, color, slot) in series {
        let rects = bars.iter().enumerate().map(move |(i, b)| {
            let left = i as f64 - 0.35 + slot as f64 * 0.35;
            let value = if slot == 0 { b.tokens } else { b.peak };
            Rectangle::new([(left, 0.0), (left + 0.33, value)], color.filled())
        });
        chart
            .draw_series(rects)
            .map_err(|e| anyhow!("{e}"))?
            .label(name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
