//! Radial mollifier kernels with unit support radius.
//!
//! Every kernel is a probability density on R^d of the form K(x) = c g(|x|)
//! with g supported on [0, 1). Construction always runs numeric sanity
//! checks (unit mass, nonnegativity, claimed sup and Lipschitz constants),
//! so a value of this type can be trusted downstream without revalidation.

use serde::{Deserialize, Serialize};

use crate::error::{KdeflowError, Result};
use crate::numeric::{adaptive_simpson, unit_sphere_area};

/// Built-in radial profiles. `g(r)` before normalization:
/// box 1, triangular 1 - r, epanechnikov 1 - r^2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Box,
    Triangular,
    Epanechnikov,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Builtin(KernelFamily),
    /// Full radial density value r -> K value (normalization included).
    Custom(fn(f64) -> f64),
}

/// A validated kernel in a fixed dimension.
#[derive(Clone, Debug)]
pub struct Kernel {
    shape: Shape,
    dim: usize,
    /// Normalization constant c for builtin profiles; 1.0 for custom.
    norm: f64,
    sup: f64,
    lipschitz: Option<f64>,
}

const PROFILE_GRID: usize = 4096;

impl Kernel {
    /// Builds a builtin kernel in dimension `dim` and verifies it.
    pub fn new(family: KernelFamily, dim: usize) -> Result<Kernel> {
        if dim == 0 {
            return Err(KdeflowError::Config("kernel: dimension must be positive".into()));
        }
        let s = unit_sphere_area(dim);
        let d = dim as f64;
        // c solves S_{d-1} c int_0^1 r^{d-1} g(r) dr = 1
        let norm = match family {
            KernelFamily::Box => d / s,
            KernelFamily::Triangular => d * (d + 1.0) / s,
            KernelFamily::Epanechnikov => d * (d + 2.0) / (2.0 * s),
        };
        let lipschitz = match family {
            // jump at the support edge: no finite constant
            KernelFamily::Box => None,
            KernelFamily::Triangular => Some(norm),
            KernelFamily::Epanechnikov => Some(2.0 * norm),
        };
        let k = Kernel { shape: Shape::Builtin(family), dim, norm, sup: norm, lipschitz };
        k.verify()?;
        Ok(k)
    }

    /// Wraps a user radial density `profile(r)` (normalization already
    /// included, support inside [0, 1)) and verifies mass, sign, and the
    /// claimed Lipschitz constant. The sup norm is measured on a dense grid.
    pub fn custom(profile: fn(f64) -> f64, dim: usize, lipschitz: Option<f64>) -> Result<Kernel> {
        if dim == 0 {
            return Err(KdeflowError::Config("kernel: dimension must be positive".into()));
        }
        let mut sup = 0.0_f64;
        for i in 0..=PROFILE_GRID {
            let r = i as f64 / PROFILE_GRID as f64;
            let v = if r < 1.0 { profile(r) } else { 0.0 };
            sup = sup.max(v);
        }
        let k = Kernel { shape: Shape::Custom(profile), dim, norm: 1.0, sup, lipschitz };
        k.verify()?;
        Ok(k)
    }

    fn verify(&self) -> Result<()> {
        // nonnegativity on a dense radial grid
        for i in 0..=PROFILE_GRID {
            let r = i as f64 / PROFILE_GRID as f64;
            let v = self.eval_radial(r);
            if v < -1e-15 || !v.is_finite() {
                return Err(KdeflowError::Config(format!(
                    "kernel: radial profile must be finite and nonnegative, got {v} at r={r}"
                )));
            }
            if v > self.sup * (1.0 + 1e-9) + 1e-300 {
                return Err(KdeflowError::Config(format!(
                    "kernel: profile exceeds its declared sup norm at r={r}: {v} > {}",
                    self.sup
                )));
            }
        }
        // unit mass: S_{d-1} int_0^1 r^{d-1} K(r) dr = 1
        let s = unit_sphere_area(self.dim);
        let d = self.dim as f64;
        let mass = s * adaptive_simpson(&|r| r.powf(d - 1.0) * self.eval_radial(r), 0.0, 1.0, 1e-12);
        if (mass - 1.0).abs() > 1e-8 {
            return Err(KdeflowError::Config(format!(
                "kernel: mass must be 1 within 1e-8, quadrature gives {mass}"
            )));
        }
        // claimed Lipschitz constant against dense radial increments
        if let Some(lip) = self.lipschitz {
            if !(lip.is_finite() && lip >= 0.0) {
                return Err(KdeflowError::Config(format!(
                    "kernel: Lipschitz constant must be finite and nonnegative, got {lip}"
                )));
            }
            let step = 1.0 / PROFILE_GRID as f64;
            for i in 0..PROFILE_GRID {
                let r0 = i as f64 * step;
                let r1 = r0 + step;
                let jump = (self.eval_radial(r1) - self.eval_radial(r0)).abs();
                if jump > lip * step * (1.0 + 1e-6) + 1e-12 {
                    return Err(KdeflowError::Config(format!(
                        "kernel: radial increment near r={r0} violates the declared \
                         Lipschitz constant {lip}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Density value at radius r (support radius 1).
    pub fn eval_radial(&self, r: f64) -> f64 {
        if r >= 1.0 {
            return 0.0;
        }
        match self.shape {
            Shape::Builtin(KernelFamily::Box) => self.norm,
            Shape::Builtin(KernelFamily::Triangular) => self.norm * (1.0 - r),
            Shape::Builtin(KernelFamily::Epanechnikov) => self.norm * (1.0 - r * r),
            Shape::Custom(p) => p(r),
        }
    }

    /// Density value at a point.
    pub fn eval(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "kernel evaluated in the wrong dimension");
        self.eval_radial(norm2(x))
    }

    /// Bandwidth-h rescaling h^{-d} K(x/h), still a probability density.
    pub fn eval_scaled(&self, h: f64, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "kernel evaluated in the wrong dimension");
        assert!(h > 0.0, "bandwidth must be positive");
        self.eval_radial(norm2(x) / h) / h.powi(self.dim as i32)
    }

    /// Same rescaling given a precomputed distance; hot path for lattices.
    pub fn eval_scaled_radial(&self, h: f64, r: f64) -> f64 {
        debug_assert!(h > 0.0);
        self.eval_radial(r / h) / h.powi(self.dim as i32)
    }

    /// p-th absolute moment int |x|^p K(x) dx for p > 1. Closed forms for
    /// the builtin profiles, radial quadrature for custom ones.
    pub fn moment(&self, p: f64) -> f64 {
        assert!(p > 1.0, "moment exponent must exceed 1, got {p}");
        let d = self.dim as f64;
        let s = unit_sphere_area(self.dim);
        match self.shape {
            Shape::Builtin(KernelFamily::Box) => d / (p + d),
            Shape::Builtin(KernelFamily::Triangular) => {
                d * (d + 1.0) / ((p + d) * (p + d + 1.0))
            }
            Shape::Builtin(KernelFamily::Epanechnikov) => {
                d * (d + 2.0) / ((p + d) * (p + d + 2.0))
            }
            Shape::Custom(prof) => {
                s * adaptive_simpson(&|r| r.powf(p + d - 1.0) * prof(r), 0.0, 1.0, 1e-12)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sup norm of the unscaled density; the scaled sup is this over h^d.
    pub fn sup_norm(&self) -> f64 {
        self.sup
    }

    /// Spatial Lipschitz constant of the unscaled density, None when the
    /// profile jumps (box). The scaled constant is this over h^{d+1}.
    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn support_radius(&self) -> f64 {
        1.0
    }

    pub fn family_name(&self) -> &'static str {
        match self.shape {
            Shape::Builtin(KernelFamily::Box) => "box",
            Shape::Builtin(KernelFamily::Triangular) => "triangular",
            Shape::Builtin(KernelFamily::Epanechnikov) => "epanechnikov",
            Shape::Custom(_) => "custom",
        }
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
