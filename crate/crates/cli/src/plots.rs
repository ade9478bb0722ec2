//! Static SVG figures.

use std::path::Path;

use nalgebra::DMatrix;
use plotters::prelude::*;

use crate::error::{CliError, CliResult};

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::io(path, std::io::Error::other(e.to_string()))
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

/// One named curve.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return None;
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    Some((lo - pad, hi + pad))
}

/// Line chart of several series; non-finite points are skipped.
pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> CliResult<()> {
    let err = plot_err(path);
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (Some(xr), Some(yr)) = (finite_range(xs), finite_range(ys)) else {
        return Ok(());
    };
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(&err)?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite() && *y >= yr.0 && *y <= yr.1)
            .collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(&err)?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

fn diverging(v: f64, scale: f64) -> RGBColor {
    let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |c: f64| (255.0 * (1.0 - c.abs())).round() as u8;
    if t >= 0.0 {
        RGBColor(255, fade(t), fade(t))
    } else {
        RGBColor(fade(t), fade(t), 255)
    }
}

/// Side-by-side heat maps sharing one symmetric color scale.
pub fn heatmaps(path: &Path, title: &str, panels: &[(String, DMatrix<f64>)]) -> CliResult<()> {
    let err = plot_err(path);
    if panels.is_empty() {
        return Ok(());
    }
    let scale = panels
        .iter()
        .flat_map(|(_, m)| m.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let cell = 320u32;
    let root = SVGBackend::new(path, (cell * panels.len() as u32, cell + 60)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let (head, body) = root.split_vertically(40);
    head.titled(title, ("sans-serif", 20)).map_err(&err)?;
    for (area, (name, m)) in body.split_evenly((1, panels.len())).iter().zip(panels) {
        let (rows, cols) = m.shape();
        let mut chart = ChartBuilder::on(area)
            .caption(name, ("sans-serif", 16))
            .margin(8)
            .build_cartesian_2d(0..cols, 0..rows)
            .map_err(&err)?;
        chart
            .draw_series((0..rows).flat_map(|i| {
                (0..cols).map(move |j| {
                    // row 0 at the top, as in a printed matrix
                    let y = rows - 1 - i;
                    Rectangle::new([(j, y), (j + 1, y + 1)], diverging(m[(i, j)], scale).filled())
                })
            }))
            .map_err(&err)?;
    }
    root.present().map_err(&err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_svg_files() {
        let dir = tempfile::tempdir().unwrap();
        let line = dir.path().join("line.svg");
        line_chart(
            &line,
            "t",
            "x",
            "y",
            &[Series {
                name: "a".into(),
                points: vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 0.5)],
            }],
        )
        .unwrap();
        assert!(std::fs::read_to_string(&line).unwrap().contains("<svg"));
        let heat = dir.path().join("heat.svg");
        heatmaps(&heat, "h", &[("m".into(), DMatrix::from_fn(3, 3, |i, j| i as f64 - j as f64))]).unwrap();
        assert!(std::fs::read_to_string(&heat).unwrap().contains("<rect"));
    }
}
