//! Open domains, covering grids, and nearest-point projection.
//!
//! A covering grid is a finite point set inside the domain such that every
//! point of the closed domain lies strictly within the covering radius of
//! some grid point. Grids double as the candidate sets of the grid-restricted
//! optimizer and of the exhaustive step oracle, so their construction and
//! ordering must be deterministic.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{KdeflowError, Result};

/// Open subset of R^d the particles live in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Domain {
    /// Axis-aligned open box given per-axis as [lo, hi].
    Box { bounds: Vec<[f64; 2]> },
    /// Open ball of the given center and radius.
    Ball { center: Vec<f64>, radius: f64 },
}

impl Domain {
    pub fn new_box(bounds: Vec<[f64; 2]>) -> Result<Self> {
        let d = Domain::Box { bounds };
        d.validate()?;
        Ok(d)
    }

    pub fn new_ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        let d = Domain::Ball { center, radius };
        d.validate()?;
        Ok(d)
    }

    /// Checks the stored geometry; config loading funnels through this.
    pub fn validate(&self) -> Result<()> {
        match self {
            Domain::Box { bounds } => {
                if bounds.is_empty() {
                    return Err(KdeflowError::Config("domain.bounds: must be non-empty".into()));
                }
                for (a, b) in bounds.iter().enumerate() {
                    if !(b[0].is_finite() && b[1].is_finite() && b[0] < b[1]) {
                        return Err(KdeflowError::Config(format!(
                            "domain.bounds[{a}]: need finite lo < hi, got [{}, {}]",
                            b[0], b[1]
                        )));
                    }
                }
            }
            Domain::Ball { center, radius } => {
                if center.is_empty() {
                    return Err(KdeflowError::Config("domain.center: must be non-empty".into()));
                }
                if center.iter().any(|c| !c.is_finite()) {
                    return Err(KdeflowError::Config("domain.center: must be finite".into()));
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(KdeflowError::Config(format!(
                        "domain.radius: need a finite positive radius, got {radius}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { bounds } => bounds.len(),
            Domain::Ball { center, .. } => center.len(),
        }
    }

    /// Strict membership in the open set.
    pub fn contains(&self, x: &[f64]) -> bool {
        debug_assert_eq!(x.len(), self.dim());
        match self {
            Domain::Box { bounds } => {
                bounds.iter().zip(x).all(|(b, &xi)| b[0] < xi && xi < b[1])
            }
            Domain::Ball { center, radius } => {
                dist_sq(center, x) < radius * radius
            }
        }
    }

    /// Membership in the closure; covering is checked against the closure.
    pub fn contains_closure(&self, x: &[f64]) -> bool {
        debug_assert_eq!(x.len(), self.dim());
        match self {
            Domain::Box { bounds } => {
                bounds.iter().zip(x).all(|(b, &xi)| b[0] <= xi && xi <= b[1])
            }
            Domain::Ball { center, radius } => {
                dist_sq(center, x) <= radius * radius
            }
        }
    }

    /// Tight axis-aligned bounding box.
    pub fn bounding_box(&self) -> Vec<[f64; 2]> {
        match self {
            Domain::Box { bounds } => bounds.clone(),
            Domain::Ball { center, radius } => {
                center.iter().map(|&c| [c - radius, c + radius]).collect()
            }
        }
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Finite candidate set inside a domain with a covering radius.
///
/// Points are stored flat in construction order; that order is the
/// deterministic tie-break order used everywhere downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct CoveringGrid {
    points: Vec<f64>,
    dim: usize,
    omega: f64,
}

impl CoveringGrid {
    /// Wraps a caller-supplied candidate set. The covering property is the
    /// caller's responsibility here; `build_grid` is the checked constructor.
    pub fn from_points(points: Vec<Vec<f64>>, omega: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(KdeflowError::GridUnderflow { omega });
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(KdeflowError::Config(
                "grid points: equal nonzero dimension required".into(),
            ));
        }
        if !(omega > 0.0) {
            return Err(KdeflowError::Config(format!(
                "grid spacing: must be positive, got {omega}"
            )));
        }
        let mut flat = Vec::with_capacity(points.len() * dim);
        for p in &points {
            flat.extend_from_slice(p);
        }
        Ok(CoveringGrid { points: flat, dim, omega })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    /// Worst covering distance over a deterministic dense sample of the
    /// closed domain (per-axis `samples` lattice plus the bounding corners).
    /// Useful to audit the covering invariant on a constructed grid.
    pub fn covering_defect(&self, domain: &Domain, samples: usize) -> f64 {
        let bbox = domain.bounding_box();
        let d = self.dim;
        let mut worst = 0.0_f64;
        let mut idx = vec![0usize; d];
        loop {
            let x: Vec<f64> = (0..d)
                .map(|a| {
                    let [lo, hi] = bbox[a];
                    lo + (hi - lo) * idx[a] as f64 / (samples - 1) as f64
                })
                .collect();
            if domain.contains_closure(&x) {
                let (_, dmin) = nearest_point(&x, self);
                worst = worst.max(dmin);
            }
            // odometer increment, last axis fastest
            let mut a = d;
            loop {
                if a == 0 {
                    return worst;
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] < samples {
                    break;
                }
                idx[a] = 0;
            }
        }
    }
}

/// Builds a covering grid for the domain at covering radius `omega`.
///
/// Construction: a uniform cell lattice of pitch slightly below
/// `omega / sqrt(d)` tiles the bounding box, so each cell has diameter
/// strictly below `omega`. Cell centers inside the domain are taken as-is;
/// for ball domains, a boundary cell that still meets the ball contributes
/// the cell point nearest the ball center instead, which keeps the covering
/// invariant while staying strictly inside.
pub fn build_grid(domain: &Domain, omega: f64) -> Result<CoveringGrid> {
    domain.validate()?;
    if !(omega.is_finite() && omega > 0.0) {
        return Err(KdeflowError::Config(format!(
            "grid spacing: must be a positive finite number, got {omega}"
        )));
    }
    let d = domain.dim();
    let pitch = omega / (d as f64).sqrt() * 0.999;
    let bbox = domain.bounding_box();
    let mut counts = Vec::with_capacity(d);
    let mut steps = Vec::with_capacity(d);
    for b in &bbox {
        let len = b[1] - b[0];
        let c = (len / pitch).ceil().max(1.0) as usize;
        counts.push(c);
        steps.push(len / c as f64);
    }

    let mut flat: Vec<f64> = Vec::new();
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut idx = vec![0usize; d];
    let push_unique = |p: &[f64], flat: &mut Vec<f64>, seen: &mut HashSet<Vec<u64>>| {
        let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            flat.extend_from_slice(p);
        }
    };
    'outer: loop {
        let center: Vec<f64> = (0..d)
            .map(|a| bbox[a][0] + (idx[a] as f64 + 0.5) * steps[a])
            .collect();
        if domain.contains(&center) {
            push_unique(&center, &mut flat, &mut seen);
        } else if let Domain::Ball { center: c, radius: r } = domain {
            // Nearest point of this cell to the ball center; inside the ball
            // exactly when the cell meets it.
            let q: Vec<f64> = (0..d)
                .map(|a| {
                    let lo = bbox[a][0] + idx[a] as f64 * steps[a];
                    let hi = lo + steps[a];
                    c[a].clamp(lo, hi)
                })
                .collect();
            if dist_sq(c, &q).sqrt() < r * (1.0 - 1e-12) {
                push_unique(&q, &mut flat, &mut seen);
            }
        }
        let mut a = d;
        loop {
            if a == 0 {
                break 'outer;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < counts[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    if flat.is_empty() {
        return Err(KdeflowError::GridUnderflow { omega });
    }
    Ok(CoveringGrid { points: flat, dim: d, omega })
}

/// Index of the grid point nearest to `x`, ties resolved to the earlier
/// point in grid order, plus the distance.
pub fn nearest_point(x: &[f64], grid: &CoveringGrid) -> (usize, f64) {
    assert_eq!(x.len(), grid.dim(), "point/grid dimension mismatch");
    let mut best = 0usize;
    let mut best_sq = f64::INFINITY;
    for (i, p) in grid.iter().enumerate() {
        let dsq = dist_sq(x, p);
        if dsq < best_sq {
            best_sq = dsq;
            best = i;
        }
    }
    (best, best_sq.sqrt())
}

/// The grid point nearest to `x` (earliest index on ties).
pub fn project_to_grid<'g>(x: &[f64], grid: &'g CoveringGrid) -> &'g [f64] {
    let (i, _) = nearest_point(x, grid);
    grid.point(i)
}
