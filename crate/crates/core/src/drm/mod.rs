//! Decision-level refinement: the sign of the confidence score selects
//! either a local classifier-scored box search (positive) or optical-flow
//! repositioning (negative).

mod flow;

pub use flow::{build_pyramid, lk_flow, mean_flow, FlowPoint, FlowPyramid, LkParams, Plane, MIN_LEVEL_SIDE};

use serde::{Deserialize, Serialize};

use crate::data::Branch;
use crate::tracker::BBox;

#[derive(Debug, thiserror::Error)]
pub enum DrmError {
    #[error("flow: {0}")]
    Geometry(String),
    #[error("flow: all {0} points were dropped; motion is untrackable")]
    Untrackable(usize),
    #[error("refine: {0}")]
    Score(String),
}

/// Seed points on a `grid`×`grid` lattice of cell centers inside `b`.
pub fn seed_grid(b: &BBox, grid: usize) -> Vec<(f64, f64)> {
    let n = grid.max(1);
    let mut pts = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            pts.push((
                b.x + (i as f64 + 0.5) * b.w / n as f64,
                b.y + (j as f64 + 0.5) * b.h / n as f64,
            ));
        }
    }
    pts
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutcome {
    pub bbox: BBox,
    pub points: Vec<FlowPoint>,
    /// Mean displacement of the kept points, if any survived.
    pub displacement: Option<(f64, f64)>,
}

impl FlowOutcome {
    pub fn untrackable(&self) -> bool {
        self.displacement.is_none()
    }
}

/// Box that the mean flow displacement is added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowAnchor {
    /// The locally searched box.
    Local,
    /// The previous frame's box, keeping the searched size.
    Previous,
}

/// Moves a box by the mean flow of seed points inside the previous box.
/// Untrackable motion leaves the searched box unchanged.
pub fn flow_reposition(
    prev_box: &BBox,
    local_box: &BBox,
    prev: &FlowPyramid,
    curr: &FlowPyramid,
    grid: usize,
    params: &LkParams,
    anchor: FlowAnchor,
) -> Result<FlowOutcome, DrmError> {
    let seeds = seed_grid(prev_box, grid);
    match lk_flow(prev, curr, &seeds, params) {
        Ok(points) => {
            let d = mean_flow(&points);
            let (dx, dy) = d.unwrap_or((0.0, 0.0));
            let base = match anchor {
                FlowAnchor::Local => *local_box,
                FlowAnchor::Previous => {
                    let (cx, cy) = prev_box.center();
                    BBox::from_center(cx, cy, local_box.w, local_box.h)
                }
            };
            Ok(FlowOutcome {
                bbox: base.translate(dx, dy),
                points,
                displacement: d,
            })
        }
        Err(DrmError::Untrackable(_)) => {
            log::warn!("optical flow lost every seed point; keeping the searched box");
            Ok(FlowOutcome {
                bbox: *local_box,
                points: seeds
                    .iter()
                    .map(|&(x, y)| FlowPoint { x, y, dx: 0.0, dy: 0.0, kept: false })
                    .collect(),
                displacement: None,
            })
        }
        Err(e) => Err(e),
    }
}

/// The perturbation lattice searched around a box.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineGrid {
    pub radius: i32,
    pub scales: Vec<f64>,
    pub aspects: Vec<f64>,
}

impl RefineGrid {
    /// Candidate boxes ordered from the smallest perturbation up; the
    /// unperturbed box comes first.
    pub fn boxes(&self, b: &BBox) -> Vec<BBox> {
        let mut cells = Vec::new();
        for dy in -self.radius..=self.radius {
            for dx in -self.radius..=self.radius {
                for &s in &self.scales {
                    for &a in &self.aspects {
                        let cost = (dx * dx + dy * dy) as f64
                            + ((s - 1.0) / 0.05).powi(2)
                            + ((a - 1.0) / 0.05).powi(2);
                        cells.push((cost, dx, dy, s, a));
                    }
                }
            }
        }
        cells.sort_by(|x, y| x.0.total_cmp(&y.0));
        cells
            .into_iter()
            .map(|(_, dx, dy, s, a)| b.rescale(s * a, s).translate(dx as f64, dy as f64))
            .collect()
    }
}

/// Scores every grid cell with `score` and returns the best box; equal
/// scores resolve to the smaller perturbation.
pub fn refine_box(
    b: &BBox,
    grid: &RefineGrid,
    score: impl FnOnce(&[BBox]) -> Result<Vec<f64>, DrmError>,
) -> Result<BBox, DrmError> {
    let cands = grid.boxes(b);
    let scores = score(&cands)?;
    if scores.len() != cands.len() {
        return Err(DrmError::Score(format!(
            "{} scores for {} boxes",
            scores.len(),
            cands.len()
        )));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(cands[best])
}

/// Branch chosen for a confidence score: positive refines, negative uses
/// flow, exactly zero passes the box through.
pub fn branch_for(c_s: f64) -> Branch {
    if c_s > 0.0 {
        Branch::Refine
    } else if c_s < 0.0 {
        Branch::Flow
    } else {
        Branch::None
    }
}
