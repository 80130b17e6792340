use std::path::Path;

use gap_core::{GapError, Result};
use plotters::prelude::*;

use crate::commands::CurvePoint;

const PALETTE: [RGBColor; 4] = [RGBColor(80, 80, 80), RGBColor(200, 60, 40), BLUE, GREEN];

/// Accuracy against supervision fraction, one line per variant.
pub fn sweep_svg(curves: &[CurvePoint], path: &Path) -> Result<()> {
    if curves.is_empty() {
        return Err(GapError::Empty("sweep curves".into()));
    }
    let draw_err = |e: &dyn std::fmt::Display| GapError::Format(format!("plot: {e}"));
    let mut variants: Vec<&str> = Vec::new();
    for c in curves {
        if !variants.contains(&c.variant.as_str()) {
            variants.push(&c.variant);
        }
    }
    let (lo, hi) = curves
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.accuracy), hi.max(c.accuracy)));
    let pad = ((hi - lo) * 0.1).max(0.01);

    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("accuracy vs supervision fraction", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0f64..1.05, (lo - pad)..(hi + pad))
        .map_err(|e| draw_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("fraction of answers")
        .y_desc("val accuracy")
        .draw()
        .map_err(|e| draw_err(&e))?;
    for (i, v) in variants.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = curves
            .iter()
            .filter(|c| c.variant == *v)
            .map(|c| (c.fraction, c.accuracy))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| draw_err(&e))?
            .label(*v)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| draw_err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_err(&e))?;
    root.present().map_err(|e| draw_err(&e))?;
    Ok(())
}
