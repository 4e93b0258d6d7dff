//! Grid-based pose estimation producing a localized discrete measure over SO(3).
//!
//! Every grid rotation is scored by its data discrepancy; the `j0` best
//! rotations form the support and carry Boltzmann weights
//! `exp(-(d - d_min)/τ)` whose temperature is solved so that the top weight
//! equals `eta`. The measure therefore never collapses to a single point
//! (unless `j0 = 1`) yet stays concentrated near the best fit.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{write_container, Container};
use crate::error::{Error, Result};
use crate::geom::{apply_pose, Conformation, Rotation, So3Grid};
use crate::imaging::{ForwardModel, Image};

/// Discrete probability measure over rotations, sorted by descending weight.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseMeasure {
    support: Vec<(Rotation, f64)>,
}

impl PoseMeasure {
    /// Normalizes positive weights and sorts by descending weight (stable).
    pub fn new(mut support: Vec<(Rotation, f64)>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidInput("pose measure needs a nonempty support".into()));
        }
        if support.iter().any(|(_, w)| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput("pose measure weights must be positive and finite".into()));
        }
        let total: f64 = support.iter().map(|(_, w)| w).sum();
        for (_, w) in &mut support {
            *w /= total;
        }
        support.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(Self { support })
    }

    /// Point mass at `phi`.
    pub fn delta(phi: Rotation) -> Self {
        Self {
            support: vec![(phi, 1.0)],
        }
    }

    pub fn support(&self) -> &[(Rotation, f64)] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// Highest-weight rotation.
    pub fn top(&self) -> &Rotation {
        &self.support[0].0
    }

    /// Measure over grid rotations from normalized `(index, weight)` pairs, kept in the given order.
    pub fn from_indexed(support: &[(usize, f64)], grid: &So3Grid) -> Self {
        Self {
            support: support.iter().map(|&(i, w)| (grid.rotations()[i], w)).collect(),
        }
    }
}

/// Pose-estimation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EslParams {
    /// Target size of the SO(3) grid.
    pub grid_points: usize,
    /// Support size of each measure.
    pub j0: usize,
    /// Weight of the best rotation.
    pub eta: f64,
    /// Recompute measures every this many epochs.
    #[serde(default = "one")]
    pub refresh_every: usize,
}

fn one() -> usize {
    1
}

impl Default for EslParams {
    fn default() -> Self {
        Self {
            grid_points: 14761,
            j0: 15,
            eta: 2.0 / 3.0,
            refresh_every: 1,
        }
    }
}

impl EslParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points == 0 || self.j0 == 0 || self.refresh_every == 0 {
            return Err(Error::InvalidInput(format!("pose estimation counts must be positive: {self:?}")));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidInput(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// `‖y − F(φᵣ.x̂)‖²` for every grid rotation, in grid order.
pub fn grid_discrepancies(y: &Image, x_hat: &Conformation, grid: &So3Grid, model: &ForwardModel) -> Result<Vec<f64>> {
    // validate sizes once; the per-rotation path below cannot fail afterwards
    model.render(x_hat)?;
    if y.grid().side() != model.grid().side() {
        return Err(Error::Dimension("image and model grids differ".into()));
    }
    let rotations = grid.rotations();
    let chunks: Vec<Vec<f64>> = rotations
        .par_chunks(2)
        .map(|pair| {
            let a = model.render(&apply_pose(&pair[0], x_hat)).expect("checked").into_pixels();
            let b = match pair.get(1) {
                Some(r) => model.render(&apply_pose(r, x_hat)).expect("checked").into_pixels(),
                None => vec![0.0; a.len()],
            };
            let (fa, fb) = model.apply_ctf_pair(&a, &b);
            let dist = |f: &[f64]| f.iter().zip(y.pixels()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
            let mut out = vec![dist(&fa)];
            if pair.len() == 2 {
                out.push(dist(&fb));
            }
            out
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Top-1 weight of `exp(-δ/τ)` weights over sorted offsets `δ ≥ 0`.
fn top_weight(offsets: &[f64], tau: f64) -> f64 {
    1.0 / offsets.iter().map(|d| (-d / tau).exp()).sum::<f64>()
}

/// Localized measure over the `j0` lowest-discrepancy grid rotations.
///
/// When `eta` cannot be met the temperature limit is taken: `τ → ∞` gives a
/// uniform measure (all discrepancies tied, or `eta ≤ 1/j0`), `τ → 0` a uniform
/// measure over the rotations tied at the minimum.
pub fn build_measure(discrepancies: &[f64], grid: &So3Grid, j0: usize, eta: f64) -> Result<PoseMeasure> {
    let support = build_measure_indexed(discrepancies, grid, j0, eta)?;
    Ok(PoseMeasure::from_indexed(&support, grid))
}

/// [`build_measure`] as `(grid index, weight)` pairs, sorted by descending weight.
pub fn build_measure_indexed(discrepancies: &[f64], grid: &So3Grid, j0: usize, eta: f64) -> Result<Vec<(usize, f64)>> {
    if discrepancies.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} discrepancies for a grid of {}",
            discrepancies.len(),
            grid.len()
        )));
    }
    if j0 == 0 || j0 > grid.len() {
        return Err(Error::InvalidInput(format!("support size {j0} is not in 1..={}", grid.len())));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidInput(format!("eta must lie in (0, 1], got {eta}")));
    }
    if discrepancies.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("pose discrepancies".into()));
    }
    let mut order: Vec<usize> = (0..discrepancies.len()).collect();
    order.sort_by(|&a, &b| discrepancies[a].total_cmp(&discrepancies[b]).then(a.cmp(&b)));
    order.truncate(j0);
    let d_min = discrepancies[order[0]];
    let offsets: Vec<f64> = order.iter().map(|&i| discrepancies[i] - d_min).collect();

    let ties = offsets.iter().filter(|&&d| d == 0.0).count();
    let uniform_over = |k: usize| order[..k].iter().map(|&i| (i, 1.0 / k as f64)).collect();
    if j0 == 1 {
        return Ok(uniform_over(1));
    }
    if ties == j0 || eta <= 1.0 / j0 as f64 {
        return Ok(uniform_over(j0));
    }
    if eta >= 1.0 / ties as f64 {
        return Ok(uniform_over(ties));
    }

    // top weight decreases monotonically from 1/ties (τ→0) to 1/j0 (τ→∞)
    let spread = offsets[offsets.len() - 1];
    let smallest = offsets.iter().copied().find(|&d| d > 0.0).expect("not all tied");
    let mut lo = smallest / 700.0;
    let mut hi = spread;
    while top_weight(&offsets, lo) < eta {
        lo /= 2.0;
    }
    while top_weight(&offsets, hi) > eta {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        if top_weight(&offsets, mid) > eta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = (lo * hi).sqrt();
    let raw: Vec<(usize, f64)> = order
        .iter()
        .zip(&offsets)
        .map(|(&i, d)| (i, (-d / tau).exp()))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    Ok(raw.into_iter().map(|(i, w)| (i, w / total)).collect())
}

/// `Σᵣ μ(φᵣ)·‖y − F(φᵣ.x̂)‖²`.
pub fn expected_discrepancy(y: &Image, x_hat: &Conformation, mu: &PoseMeasure, model: &ForwardModel) -> Result<f64> {
    if mu.is_empty() {
        return Err(Error::InvalidInput("pose measure has empty support".into()));
    }
    let mut total = 0.0;
    for (phi, w) in mu.support() {
        total += w * model.forward(x_hat, phi)?.squared_distance(y);
    }
    Ok(total)
}

/// Scores the grid against `y` and builds the measure in one call.
pub fn estimate_pose(
    y: &Image,
    x_hat: &Conformation,
    grid: &So3Grid,
    model: &ForwardModel,
    j0: usize,
    eta: f64,
) -> Result<PoseMeasure> {
    let d = grid_discrepancies(y, x_hat, grid, model)?;
    build_measure(&d, grid, j0, eta)
}

pub const POSE_CACHE_MAGIC: &[u8; 8] = b"CGPOSE\0\0";
const POSE_CACHE_VERSION: u32 = 1;

/// Measures per image as `(grid index, weight)` lists, stamped with the config
/// hash, the grid size and the epoch they were computed in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseCache {
    pub config_hash: String,
    pub grid_points: usize,
    pub epoch: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl PoseCache {
    /// Measure of image `i` on `grid`, which must be the grid the cache was built on.
    pub fn measure(&self, i: usize, grid: &So3Grid) -> Result<PoseMeasure> {
        let entry = self
            .entries
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("no cached measure for image {i}")))?;
        if entry.is_empty() || entry.iter().any(|&(k, _)| k >= grid.len()) {
            return Err(Error::Format(format!("cached measure of image {i} does not fit the grid")));
        }
        Ok(PoseMeasure::from_indexed(entry, grid))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_container(path, POSE_CACHE_MAGIC, POSE_CACHE_VERSION, self, &[])
    }

    /// Reads a cache regardless of the config that produced it.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::open(path, POSE_CACHE_MAGIC)?;
        if c.version() != POSE_CACHE_VERSION {
            return Err(Error::Format(format!("pose cache version {} is not supported", c.version())));
        }
        c.meta()
    }

    /// Reads a cache; returns `None` when it was produced under a different config.
    pub fn read(path: &Path, expected_hash: &str) -> Result<Option<Self>> {
        let cache = Self::load(path)?;
        Ok((cache.config_hash == expected_hash).then_some(cache))
    }
}
