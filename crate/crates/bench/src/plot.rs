//! Static SVG charts drawn from a run's CSV series.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use crate::harness::Sample;

fn rates(series: &[Sample]) -> Vec<(f64, f64)> {
    let mut prev = 0.0;
    series
        .iter()
        .map(|s| {
            let dt = (s.ts_s - prev).max(1e-9);
            prev = s.ts_s;
            (s.ts_s, s.ops as f64 / dt / 1000.0)
        })
        .collect()
}

/// Throughput (kops/s) and tier-0 hit ratio over time, stacked.
pub fn plot_series(series: &[Sample], title: &str, out: &Path) -> Result<()> {
    let root = SVGBackend::new(out, (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let (top, bottom) = root.split_vertically(300);
    let tput = rates(series);
    let t_max = series.last().map_or(1.0, |s| s.ts_s).max(1e-3);
    let y_max = tput.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-3) * 1.1;

    let mut c = ChartBuilder::on(&top)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..t_max, 0.0..y_max)
        .map_err(|e| anyhow!("{e}"))?;
    c.configure_mesh()
        .y_desc("kops/s")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    c.draw_series(LineSeries::new(tput, &BLUE))
        .map_err(|e| anyhow!("{e}"))?;

    let mut c = ChartBuilder::on(&bottom)
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..t_max, 0.0..1.0)
        .map_err(|e| anyhow!("{e}"))?;
    c.configure_mesh()
        .x_desc("seconds")
        .y_desc("tier-0 hit ratio")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    c.draw_series(LineSeries::new(
        series
            .iter()
            .filter(|s| s.hit_ratio_t0.is_finite())
            .map(|s| (s.ts_s, s.hit_ratio_t0)),
        &RED,
    ))
    .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
