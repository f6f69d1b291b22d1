//! Static SVG charts of a run and of a penetration sweep.

use std::error::Error;
use std::ops::Range;
use std::path::Path;

use flexblock::flexibility::{Envelope, MarginPoint};
use flexblock::mpc::{DispatchTrace, U_GEN_B, U_GEN_F, U_GEN_H, U_GEN_PV, U_GEN_W, U_LOAD_B, U_LOAD_H, X_B, X_F, X_H};
use plotters::coord::Shift;
use plotters::prelude::*;

type PlotResult = Result<(), Box<dyn Error>>;
type UpDown = fn(&MarginPoint) -> (f64, f64);

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(80, 80, 80),
];

fn span<'a>(series: impl IntoIterator<Item = &'a [(f64, f64)]>) -> (Range<f64>, Range<f64>) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for s in series {
        for &(x, y) in s {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if x0 > x1 {
        return (0.0..1.0, 0.0..1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    (x0..x1, (y0 - pad)..(y1 + pad))
}

fn line_panel(
    area: &DrawingArea<SVGBackend, Shift>,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> PlotResult {
    let (xr, yr) = span(series.iter().map(|(_, s)| s.as_slice()));
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(60)
        .build_cartesian_2d(xr, yr)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw()?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(1)))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperRight)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()?;
    Ok(())
}

/// Unit powers and load over time, with storage levels below.
pub fn dispatch_svg(path: &Path, trace: &DispatchTrace) -> PlotResult {
    let root = SVGBackend::new(path, (1200, 800)).into_drawing_area();
    root.fill(&WHITE)?;
    let (top, bottom) = root.split_vertically(500);
    let hours = |k: usize| trace.steps[k].time_min / 60.0;
    let col = |f: &dyn Fn(&[f64]) -> f64| -> Vec<(f64, f64)> {
        (0..trace.len())
            .map(|k| (hours(k), f(&trace.steps[k].control)))
            .collect()
    };
    let powers = vec![
        ("wind", col(&|u| u[U_GEN_W])),
        ("pv", col(&|u| u[U_GEN_PV])),
        ("battery", col(&|u| u[U_GEN_B] - u[U_LOAD_B])),
        ("hydrogen", col(&|u| u[U_GEN_H] - u[U_LOAD_H])),
        ("gas", col(&|u| u[U_GEN_F])),
        (
            "load",
            (0..trace.len()).map(|k| (hours(k), trace.steps[k].eload_mw)).collect(),
        ),
        (
            "shed",
            (0..trace.len()).map(|k| (hours(k), trace.steps[k].shed_mw)).collect(),
        ),
    ];
    line_panel(&top, "Dispatch", "hour", "MW (generation > 0)", &powers)?;
    let soc = |i: usize| -> Vec<(f64, f64)> { (0..trace.len()).map(|k| (hours(k), trace.steps[k].state[i])).collect() };
    let levels = vec![("battery", soc(X_B)), ("hydrogen", soc(X_H)), ("gas", soc(X_F))];
    line_panel(&bottom, "State of charge", "hour", "SOC", &levels)?;
    root.present()?;
    Ok(())
}

/// Provided and required margins per dimension; upward values above zero,
/// downward below.
pub fn envelope_svg(path: &Path, env: &Envelope) -> PlotResult {
    let root = SVGBackend::new(path, (1200, 900)).into_drawing_area();
    root.fill(&WHITE)?;
    let panels = root.split_evenly((3, 1));
    let dims: [(&str, &str, UpDown); 3] = [
        ("Ramp margin", "MW/min", |m| (m.ramp_up, m.ramp_down)),
        ("Power margin", "MW", |m| (m.power_up, m.power_down)),
        ("Energy margin", "MWh", |m| (m.energy_up, m.energy_down)),
    ];
    for (area, (title, unit, get)) in panels.iter().zip(dims) {
        let pick = |f: &dyn Fn(&MarginPoint) -> f64, provided: bool| -> Vec<(f64, f64)> {
            env.points
                .iter()
                .map(|p| (p.time_min / 60.0, f(if provided { &p.provided } else { &p.required })))
                .collect()
        };
        let series = vec![
            ("provided up", pick(&|m| get(m).0, true)),
            ("provided down", pick(&|m| -get(m).1, true)),
            ("required up", pick(&|m| get(m).0, false)),
            ("required down", pick(&|m| -get(m).1, false)),
        ];
        line_panel(area, title, "hour", unit, &series)?;
    }
    root.present()?;
    Ok(())
}

/// Abandonment rate against penetration ratio.
pub fn abandonment_svg(path: &Path, points: &[(f64, f64)]) -> PlotResult {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let pct: Vec<(f64, f64)> = points.iter().map(|&(r, a)| (100.0 * r, 100.0 * a)).collect();
    line_panel(
        &root,
        "Renewable abandonment",
        "penetration increase (%)",
        "abandonment (%)",
        &[("abandonment", pct)],
    )?;
    root.present()?;
    Ok(())
}
