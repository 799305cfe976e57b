//! Grid evaluation of a learned value function, level-set extraction and the
//! metrics used to judge a learned model against the scenario geometry.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::demonstrations::{DemoCorpus, DemoSource};
use crate::error::{Error, Result};
use crate::filter::FilteredRollout;
use crate::learner::{Credit, CreditLabel};
use crate::rbf::SafetyModel;
use crate::simgen::{Box2, Scenario};

pub const DEFAULT_RESOLUTION: usize = 100;

/// Values sampled at cell centers, row-major with `y` growing with the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub bounds: Box2,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl GridField {
    /// Samples `f` at every cell center.
    pub fn from_fn(bounds: Box2, nx: usize, ny: usize, mut f: impl FnMut([f64; 2]) -> f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidArgument(format!("grid resolution must be at least 2x2, got {nx}x{ny}")));
        }
        if !(bounds.width() > 0.0 && bounds.height() > 0.0) || !bounds.width().is_finite() || !bounds.height().is_finite() {
            return Err(Error::InvalidArgument("grid bounds must have positive finite extent".into()));
        }
        let mut values = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                values.push(f(cell_center(&bounds, nx, ny, ix, iy)));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("grid values must be finite".into()));
        }
        Ok(Self { bounds, nx, ny, values })
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        cell_center(&self.bounds, self.nx, self.ny, ix, iy)
    }

    pub fn cell_size(&self) -> [f64; 2] {
        [self.bounds.width() / self.nx as f64, self.bounds.height() / self.ny as f64]
    }

    /// Cell containing `p`, if inside the bounds.
    pub fn cell_of(&self, p: &[f64]) -> Option<(usize, usize)> {
        if !self.bounds.contains([p[0], p[1]]) {
            return None;
        }
        let [w, h] = self.cell_size();
        let ix = (((p[0] - self.bounds.min[0]) / w).floor() as usize).min(self.nx - 1);
        let iy = (((p[1] - self.bounds.min[1]) / h).floor() as usize).min(self.ny - 1);
        Some((ix, iy))
    }

    /// Area of the cells whose value is at least `level`.
    pub fn area_at_least(&self, level: f64) -> f64 {
        let [w, h] = self.cell_size();
        self.values.iter().filter(|v| **v >= level).count() as f64 * w * h
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Binary greyscale PGM; `lo` maps to black, `hi` to white, top row is
    /// the largest `y`.
    pub fn to_pgm(&self, lo: f64, hi: f64) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.nx, self.ny).into_bytes();
        let span = if hi > lo { hi - lo } else { 1.0 };
        for iy in (0..self.ny).rev() {
            for ix in 0..self.nx {
                let t = ((self.value(ix, iy) - lo) / span).clamp(0.0, 1.0);
                out.push((t * 255.0).round() as u8);
            }
        }
        out
    }
}

fn cell_center(b: &Box2, nx: usize, ny: usize, ix: usize, iy: usize) -> [f64; 2] {
    [
        b.min[0] + (ix as f64 + 0.5) * b.width() / nx as f64,
        b.min[1] + (iy as f64 + 0.5) * b.height() / ny as f64,
    ]
}

/// `h` at every cell center. Models over more than two state coordinates
/// are sliced with the remaining coordinates set to `extra` (zeros when
/// shorter).
pub fn grid_eval(model: &SafetyModel, bounds: Box2, nx: usize, ny: usize, extra: &[f64]) -> Result<GridField> {
    let dim = model.dim();
    if dim < 2 {
        return Err(Error::Dimension { expected: 2, got: dim });
    }
    let mut x = vec![0.0; dim];
    for (slot, v) in x[2..].iter_mut().zip(extra) {
        *slot = *v;
    }
    GridField::from_fn(bounds, nx, ny, |p| {
        x[0] = p[0];
        x[1] = p[1];
        model.eval_unchecked(&x)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    pub closed: bool,
}

/// Edge of the lattice of cell centers: `(ix, iy, vertical)` names the edge
/// leaving node `(ix, iy)` rightwards or upwards.
type EdgeKey = (usize, usize, bool);

/// Marching-squares contours of `field` at `level` on the lattice of cell
/// centers. Nodes with value `≥ level` count as inside. Ambiguous saddle
/// cells are split according to the mean of their four corners.
pub fn level_set(field: &GridField, level: f64) -> Vec<Polyline> {
    let inside = |ix: usize, iy: usize| field.value(ix, iy) >= level;
    let point_on = |e: EdgeKey| -> [f64; 2] {
        let (ix, iy, vertical) = e;
        let (jx, jy) = if vertical { (ix, iy + 1) } else { (ix + 1, iy) };
        let (v0, v1) = (field.value(ix, iy), field.value(jx, jy));
        let t = if v1 != v0 { ((level - v0) / (v1 - v0)).clamp(0.0, 1.0) } else { 0.5 };
        let (p0, p1) = (field.center(ix, iy), field.center(jx, jy));
        [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])]
    };

    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();
    for iy in 0..field.ny - 1 {
        for ix in 0..field.nx - 1 {
            // corners counter-clockwise from bottom-left
            let c = [
                inside(ix, iy),
                inside(ix + 1, iy),
                inside(ix + 1, iy + 1),
                inside(ix, iy + 1),
            ];
            let bottom = (ix, iy, false);
            let right = (ix + 1, iy, true);
            let top = (ix, iy + 1, false);
            let left = (ix, iy, true);
            let case = c.iter().enumerate().fold(0u8, |acc, (k, b)| acc | ((*b as u8) << k));
            match case {
                0 | 15 => {}
                1 | 14 => segments.push((left, bottom)),
                2 | 13 => segments.push((bottom, right)),
                3 | 12 => segments.push((left, right)),
                4 | 11 => segments.push((right, top)),
                6 | 9 => segments.push((bottom, top)),
                7 | 8 => segments.push((left, top)),
                5 | 10 => {
                    let mean = (field.value(ix, iy)
                        + field.value(ix + 1, iy)
                        + field.value(ix + 1, iy + 1)
                        + field.value(ix, iy + 1))
                        / 4.0;
                    // when the center sides with the diagonal pair of
                    // corners, the region connects through the cell
                    let center_inside = mean >= level;
                    let bl_inside = c[0];
                    if center_inside == bl_inside {
                        segments.push((left, top));
                        segments.push((bottom, right));
                    } else {
                        segments.push((left, bottom));
                        segments.push((right, top));
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    let mut by_edge: HashMap<EdgeKey, Vec<usize>> = HashMap::new();
    for (k, (a, b)) in segments.iter().enumerate() {
        by_edge.entry(*a).or_default().push(k);
        by_edge.entry(*b).or_default().push(k);
    }
    let mut used = vec![false; segments.len()];
    let other = |k: usize, e: EdgeKey| if segments[k].0 == e { segments[k].1 } else { segments[k].0 };
    let next_unused = |e: EdgeKey, used: &[bool]| by_edge[&e].iter().copied().find(|k| !used[*k]);

    let trace = |start: EdgeKey, first: usize, used: &mut Vec<bool>| {
        let mut keys = vec![start];
        let (mut k, mut at) = (first, start);
        loop {
            used[k] = true;
            at = other(k, at);
            keys.push(at);
            match next_unused(at, used) {
                Some(n) => k = n,
                None => break,
            }
        }
        let closed = keys.len() > 2 && keys.first() == keys.last();
        if closed {
            keys.pop();
        }
        Polyline {
            points: keys.into_iter().map(point_on).collect(),
            closed,
        }
    };

    let mut out = Vec::new();
    // open chains start at edges touched by a single segment (the grid
    // border); whatever remains forms loops
    let mut ends: Vec<EdgeKey> = by_edge.iter().filter(|(_, v)| v.len() == 1).map(|(e, _)| *e).collect();
    ends.sort_unstable();
    for e in ends {
        if let Some(k) = next_unused(e, &used) {
            out.push(trace(e, k, &mut used));
        }
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_unstable_by_key(|k| segments[*k]);
    for k in order {
        if !used[k] {
            out.push(trace(segments[k].0, k, &mut used));
        }
    }
    out
}

/// Scoring inputs beyond the model and corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreOptions {
    pub resolution: usize,
    /// Speed of the demonstrating controller; one step length `dt·speed`
    /// widens the obstacle for credit ground truth.
    pub speed: f64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            speed: 0.5,
        }
    }
}

/// Rates are `None` when the scenario geometry is unavailable or the rate
/// has no denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub unsafe_iou: Option<f64>,
    pub obstacle_coverage: Option<f64>,
    pub false_unsafe_rate: Option<f64>,
    pub credit_precision: Option<f64>,
    pub credit_recall: Option<f64>,
    pub filter_intervention_rate: Option<f64>,
    pub min_h_over_rollouts: Option<f64>,
    /// Set when geometric metrics were skipped because the corpus holds
    /// recorded demonstrations and no scenario was given.
    pub geometric_omitted: bool,
    pub resolution: usize,
}

impl MetricsReport {
    /// Folds filtered closed-loop runs into the report.
    pub fn with_rollouts(mut self, rollouts: &[FilteredRollout]) -> Self {
        let steps: usize = rollouts.iter().map(|r| r.decisions.len()).sum();
        if steps > 0 {
            let hits: usize = rollouts.iter().map(|r| r.decisions.iter().filter(|d| d.intervened).count()).sum();
            self.filter_intervention_rate = Some(hits as f64 / steps as f64);
        }
        self.min_h_over_rollouts = rollouts.iter().map(|r| r.min_h).reduce(f64::min);
        self
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Metrics for a sampled field against the scenario geometry.
pub fn score_field(
    field: &GridField,
    credit: &[CreditLabel],
    corpus: &DemoCorpus,
    scenario: Option<&Scenario>,
    opts: &ScoreOptions,
) -> MetricsReport {
    let mut report = MetricsReport {
        unsafe_iou: None,
        obstacle_coverage: None,
        false_unsafe_rate: None,
        credit_precision: None,
        credit_recall: None,
        filter_intervention_rate: None,
        min_h_over_rollouts: None,
        geometric_omitted: false,
        resolution: field.nx,
    };
    let recorded = corpus.demos.iter().any(|d| d.source == DemoSource::Recorded);

    // cells visited by successful demonstrations
    let mut demo_cells = vec![false; field.nx * field.ny];
    for d in corpus.demos.iter().filter(|d| !d.is_failure()) {
        for p in &d.points {
            if let Some((ix, iy)) = field.cell_of(&p.x) {
                demo_cells[iy * field.nx + ix] = true;
            }
        }
    }
    let visited = demo_cells.iter().filter(|c| **c).count();
    let flagged = demo_cells
        .iter()
        .zip(&field.values)
        .filter(|(c, v)| **c && **v < 0.0)
        .count();
    report.false_unsafe_rate = ratio(flagged, visited);

    let Some(sc) = scenario else {
        report.geometric_omitted = recorded;
        return report;
    };
    let (mut inter, mut union, mut in_obstacle, mut covered) = (0, 0, 0, 0);
    for iy in 0..field.ny {
        for ix in 0..field.nx {
            let truth = sc.in_collision(&field.center(ix, iy));
            let pred = field.value(ix, iy) < 0.0;
            inter += (truth && pred) as usize;
            union += (truth || pred) as usize;
            in_obstacle += truth as usize;
            covered += (truth && pred) as usize;
        }
    }
    report.unsafe_iou = Some(ratio(inter, union).unwrap_or(1.0));
    report.obstacle_coverage = ratio(covered, in_obstacle);

    let band = sc.dt * opts.speed;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for c in credit {
        let truth = sc.obstacles().any(|o| o.distance_to_center(&c.x) <= o.radius + band);
        let pred = c.label == Credit::CausedFailure;
        tp += (truth && pred) as usize;
        fp += (!truth && pred) as usize;
        fn_ += (truth && !pred) as usize;
    }
    report.credit_precision = ratio(tp, tp + fp);
    report.credit_recall = ratio(tp, tp + fn_);
    report
}

/// Samples `model` over the scenario workspace (or the unit square) and
/// scores it.
pub fn score(
    model: &SafetyModel,
    credit: &[CreditLabel],
    corpus: &DemoCorpus,
    scenario: Option<&Scenario>,
    opts: &ScoreOptions,
) -> Result<MetricsReport> {
    let bounds = scenario.map(|s| s.workspace).unwrap_or(Box2 {
        min: [0.0, 0.0],
        max: [1.0, 1.0],
    });
    let field = grid_eval(model, bounds, opts.resolution, opts.resolution, &[])?;
    Ok(score_field(&field, credit, corpus, scenario, opts))
}

/// Distance from each cell center to the nearest point of a successful
/// demonstration. Large values mark under-demonstrated regions, where the
/// learned function tends to read as less safe.
pub fn distance_to_safe_map(corpus: &DemoCorpus, bounds: Box2, nx: usize, ny: usize) -> Result<GridField> {
    let pts: Vec<[f64; 2]> = corpus
        .demos
        .iter()
        .filter(|d| !d.is_failure())
        .flat_map(|d| d.points.iter().map(|p| [p.x[0], p.x[1]]))
        .collect();
    if pts.is_empty() {
        return Err(Error::InvalidArgument("corpus has no successful demonstrations".into()));
    }
    GridField::from_fn(bounds, nx, ny, |c| {
        pts.iter()
            .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    })
}
