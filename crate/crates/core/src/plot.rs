//! SVG figures of simulation and fit outputs.

use crate::calibration::FitResult;
use crate::engine::SimulationOutput;
use crate::error::{ModelError, Result};
use crate::targets::DataClass;
use plotters::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Lines,
    Points,
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> ModelError {
    ModelError::Io(format!("{}: {e}", path.display()))
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |lo: f64, hi: f64| {
        let d = if hi > lo { 0.05 * (hi - lo) } else { 0.5_f64.max(0.05 * hi.abs()) };
        (lo - d, hi + d)
    };
    (pad(x0, x1), pad(y0.min(0.0), y1))
}

/// Draws one chart with a legend.
pub fn chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series], mark: Mark) -> Result<()> {
    let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let ((x0, x1), (y0, y1)) = bounds(series);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts = s.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite());
        let anno = match mark {
            Mark::Lines => chart.draw_series(LineSeries::new(pts, color.stroke_width(2))),
            Mark::Points => chart.draw_series(pts.map(|p| Circle::new(p, 3, color.filled()))),
        }
        .map_err(|e| plot_err(path, e))?;
        anno.label(s.label.clone()).legend(move |(x, y)| {
            PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
        });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Writes `production.svg`, `ratio.svg`, `trunk_mass.svg`,
/// `trunk_diameter.svg`, `rings.svg` and `allocation.svg`.
pub fn simulation_plots(dir: &Path, out: &SimulationOutput) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let c = |f: &dyn Fn(&crate::engine::CycleRecord) -> f64| -> Vec<(f64, f64)> {
        out.cycles.iter().map(|r| (f64::from(r.cycle), f(r))).collect()
    };

    let path = dir.join("production.svg");
    chart(
        &path,
        "Production and demand",
        "cycle",
        "g",
        &[
            Series::new("Q", c(&|r| r.allocation.q)),
            Series::new("D", c(&|r| r.allocation.d)),
        ],
        Mark::Lines,
    )?;
    written.push(path);

    let path = dir.join("ratio.svg");
    chart(
        &path,
        "Supply/demand ratio",
        "cycle",
        "Q/D",
        &[
            Series::new("Q/D", c(&|r| r.allocation.ratio)),
            Series::new("driving ratio", c(&|r| r.ratio_used)),
        ],
        Mark::Lines,
    )?;
    written.push(path);

    let t = |f: &dyn Fn(&crate::engine::TrunkUnitRecord) -> f64| -> Vec<(f64, f64)> {
        out.trunk.iter().map(|r| (f64::from(r.gu_index), f(r))).collect()
    };
    let path = dir.join("trunk_mass.svg");
    chart(
        &path,
        "Trunk profile",
        "growth unit",
        "g",
        &[
            Series::new("internode mass", t(&|r| r.internode_mass)),
            Series::new("wood mass", t(&|r| r.wood_mass)),
        ],
        Mark::Lines,
    )?;
    written.push(path);

    let path = dir.join("trunk_diameter.svg");
    chart(
        &path,
        "Trunk diameter",
        "growth unit",
        "cm",
        &[Series::new("diameter", t(&|r| r.diameter))],
        Mark::Lines,
    )?;
    written.push(path);

    let mut by_gu: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &out.rings {
        by_gu
            .entry(r.gu_index)
            .or_default()
            .push((f64::from(r.tree_age), r.diameter));
    }
    let stride = by_gu.len().div_ceil(12).max(1);
    let rings: Vec<Series> = by_gu
        .into_iter()
        .step_by(stride)
        .map(|(gu, pts)| Series::new(format!("GU {gu}"), pts))
        .collect();
    let path = dir.join("rings.svg");
    chart(&path, "Ring diameters", "tree age", "cm", &rings, Mark::Lines)?;
    written.push(path);

    let path = dir.join("allocation.svg");
    chart(
        &path,
        "Allocation",
        "cycle",
        "g",
        &[
            Series::new("shoots", c(&|r| r.allocation.q_s)),
            Series::new("rings", c(&|r| r.allocation.q_r)),
        ],
        Mark::Lines,
    )?;
    written.push(path);
    Ok(written)
}

/// Writes `fit_<class>.svg` (observed and predicted per locus) and
/// `anneal.svg`.
pub fn fit_plots(dir: &Path, r: &FitResult) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for class in DataClass::ALL {
        let rows: Vec<_> = r.predicted.iter().filter(|p| p.class == class).collect();
        if rows.is_empty() {
            continue;
        }
        let obs = rows.iter().enumerate().map(|(i, p)| (i as f64, p.observed)).collect();
        let pred = rows.iter().enumerate().map(|(i, p)| (i as f64, p.predicted)).collect();
        let path = dir.join(format!("fit_{}.svg", class.name()));
        chart(
            &path,
            class.name(),
            "datum",
            "value",
            &[Series::new("observed", obs), Series::new("predicted", pred)],
            Mark::Points,
        )?;
        written.push(path);
    }
    if !r.trace.is_empty() {
        let path = dir.join("anneal.svg");
        let cur = r.trace.iter().map(|t| (t.level as f64, t.current)).collect();
        let best = r.trace.iter().map(|t| (t.level as f64, t.best)).collect();
        chart(
            &path,
            "Annealing",
            "temperature level",
            "objective",
            &[Series::new("current", cur), Series::new("best", best)],
            Mark::Lines,
        )?;
        written.push(path);
    }
    Ok(written)
}
