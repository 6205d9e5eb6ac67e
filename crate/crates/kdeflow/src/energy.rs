//! Free energy of kernel mixtures: internal term, confinement potential,
//! and pairwise interaction, plus the concave continuity modulus used by
//! the schedule admissibility checks.
//!
//! The internal term integrates F(density) with a midpoint rule over the
//! domain's bounding box extended by the bandwidth, so the whole mixture
//! support is covered. Potential and interaction terms come in two modes:
//! `ParticleSum` evaluates them on the particles directly, `Exact`
//! integrates against the mixture density. Any particle outside the open
//! domain makes every term infinite; that sentinel is how the solver
//! enforces the state constraint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{KdeflowError, Result};
use crate::kde::{KdeMeasure, ParticleConfiguration};
use crate::kernel::Kernel;

/// Integrand family of the internal energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum InternalEnergyLaw {
    /// F(s) = s log s, pressure s.
    Entropy,
    /// F(s) = s^m / (m - 1) for m > 0, m != 1; pressure s^m.
    Power { m: f64 },
}

impl InternalEnergyLaw {
    /// Integrand value; 0 at and below zero density by continuity.
    pub fn f(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        match self {
            InternalEnergyLaw::Entropy => s * s.ln(),
            InternalEnergyLaw::Power { m } => s.powf(*m) / (m - 1.0),
        }
    }

    /// Derivative F'(s) for s > 0.
    pub fn f_prime(&self, s: f64) -> f64 {
        debug_assert!(s > 0.0);
        match self {
            InternalEnergyLaw::Entropy => s.ln() + 1.0,
            InternalEnergyLaw::Power { m } => m * s.powf(m - 1.0) / (m - 1.0),
        }
    }

    /// Pressure s F'(s) - F(s), computed from the general formula rather
    /// than its simplified closed form so tests can cross-check the two.
    pub fn pressure(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        s * self.f_prime(s) - self.f(s)
    }

    /// Doubling constant C with F(r+s) <= C (1 + F(r) + F(s)); None for the
    /// sign-changing fast-diffusion range where the check does not apply.
    pub fn doubling_constant(&self) -> Option<f64> {
        match self {
            InternalEnergyLaw::Entropy => Some(8.0),
            InternalEnergyLaw::Power { m } if *m > 1.0 => Some(2.0_f64.powf(m - 1.0)),
            InternalEnergyLaw::Power { .. } => None,
        }
    }

    /// Structural checks run at spec construction: admissible exponent,
    /// F(0) = 0 with continuity, numeric convexity on a log grid, a
    /// superlinearity proxy, and the doubling inequality on random pairs.
    pub fn verify(&self) -> Result<()> {
        if let InternalEnergyLaw::Power { m } = self {
            if !(m.is_finite() && *m > 0.0 && (*m - 1.0).abs() > 1e-12) {
                return Err(KdeflowError::Config(format!(
                    "energy.f: power law needs m > 0 and m != 1, got {m}"
                )));
            }
        }
        let near0 = [self.f(1e-4).abs(), self.f(1e-8).abs(), self.f(1e-16).abs()];
        if self.f(0.0) != 0.0 || near0[2] > 1e-6 || near0[2] > near0[1] || near0[1] > near0[0] {
            return Err(KdeflowError::Config(
                "energy.f: integrand must vanish continuously at zero density".into(),
            ));
        }
        // convexity via central second differences on a log-spaced grid
        let delta = 1e-3;
        for i in 0..100 {
            let s = 10f64.powf(-8.0 + 16.0 * i as f64 / 99.0);
            let dd = self.f(s * (1.0 + delta)) - 2.0 * self.f(s) + self.f(s * (1.0 - delta));
            if dd < -1e-9 * self.f(s).abs().max(1.0) {
                return Err(KdeflowError::Config(format!(
                    "energy.f: second difference negative at s={s}: {dd}"
                )));
            }
        }
        // superlinearity proxy: F(s)/s increasing along a coarse ladder
        let ratios: Vec<f64> = [1e2, 1e4, 1e6].iter().map(|&s| self.f(s) / s).collect();
        if !(ratios[0] < ratios[1] && ratios[1] < ratios[2]) {
            return Err(KdeflowError::Config(
                "energy.f: F(s)/s fails to increase at large density".into(),
            ));
        }
        if let Some(c) = self.doubling_constant() {
            let mut rng = ChaCha8Rng::seed_from_u64(0x0ddc0de);
            for _ in 0..512 {
                let r = rng.gen::<f64>() * 100.0;
                let s = rng.gen::<f64>() * 100.0;
                let lhs = self.f(r + s);
                let rhs = c * (1.0 + self.f(r) + self.f(s));
                if lhs > rhs + 1e-9 {
                    return Err(KdeflowError::Config(format!(
                        "energy.f: doubling inequality fails at r={r}, s={s}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            InternalEnergyLaw::Entropy => "entropy",
            InternalEnergyLaw::Power { .. } => "power",
        }
    }
}

/// Confinement potential hit by each particle.
#[derive(Clone, Debug)]
pub enum Potential {
    Zero,
    /// coeff |x - center|^2
    Quadratic { center: Vec<f64>, coeff: f64 },
    /// a (|x|^2 - b^2)^2
    DoubleWell { a: f64, b: f64 },
    /// Arbitrary evaluation with a caller-supplied Lipschitz constant,
    /// usable from code but not expressible in config files.
    Custom { f: fn(&[f64]) -> f64, lipschitz: f64 },
}

impl Potential {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Quadratic { center, coeff } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                coeff * r2
            }
            Potential::DoubleWell { a, b } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                a * (r2 - b * b) * (r2 - b * b)
            }
            Potential::Custom { f, .. } => f(x),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            Potential::Zero | Potential::Custom { .. } => Ok(()),
            Potential::Quadratic { center, coeff } => {
                if center.len() != d {
                    return Err(KdeflowError::Config(format!(
                        "energy.v.center: dimension {} vs domain dimension {d}",
                        center.len()
                    )));
                }
                if !coeff.is_finite() || *coeff < 0.0 {
                    return Err(KdeflowError::Config(format!(
                        "energy.v.coeff: need a finite nonnegative coefficient, got {coeff}"
                    )));
                }
                Ok(())
            }
            Potential::DoubleWell { a, b } => {
                if !(a.is_finite() && *a >= 0.0 && b.is_finite()) {
                    return Err(KdeflowError::Config(
                        "energy.v: double well needs finite a >= 0 and finite b".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Lipschitz constant of the potential over the stated box (exact for
    /// the builtin shapes: the gradient magnitude is radial and its extrema
    /// sit at radius endpoints or interior critical points).
    pub fn lipschitz_on(&self, bbox: &[[f64; 2]]) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Custom { lipschitz, .. } => *lipschitz,
            Potential::Quadratic { center, coeff } => {
                let mut far2 = 0.0;
                for (b, c) in bbox.iter().zip(center) {
                    let d = (b[0] - c).abs().max((b[1] - c).abs());
                    far2 += d * d;
                }
                2.0 * coeff.abs() * far2.sqrt()
            }
            Potential::DoubleWell { a, b } => {
                let (rmin, rmax) = radius_range(bbox);
                let g = |r: f64| 4.0 * a * r * (r * r - b * b).abs();
                let mut best = g(rmin).max(g(rmax));
                let crit = b.abs() / 3.0_f64.sqrt();
                if rmin <= crit && crit <= rmax {
                    best = best.max(g(crit));
                }
                if rmin <= b.abs() && b.abs() <= rmax {
                    best = best.max(g(b.abs()));
                }
                best
            }
        }
    }
}

/// Radius range attained over an axis-aligned box.
fn radius_range(bbox: &[[f64; 2]]) -> (f64, f64) {
    let mut min2 = 0.0;
    let mut max2 = 0.0;
    for b in bbox {
        let lo = b[0];
        let hi = b[1];
        let far = lo.abs().max(hi.abs());
        max2 += far * far;
        if lo > 0.0 {
            min2 += lo * lo;
        } else if hi < 0.0 {
            min2 += hi * hi;
        }
    }
    (min2.sqrt(), max2.sqrt())
}

/// Pairwise interaction; must be even and convex.
#[derive(Clone, Debug)]
pub enum Interaction {
    None,
    /// coeff |z|^2 of the pair difference z
    Quadratic { coeff: f64 },
    /// Arbitrary even convex evaluation with its Lipschitz constant.
    Custom { f: fn(&[f64]) -> f64, lipschitz: f64 },
}

impl Interaction {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            Interaction::None => 0.0,
            Interaction::Quadratic { coeff } => {
                coeff * z.iter().map(|v| v * v).sum::<f64>()
            }
            Interaction::Custom { f, .. } => f(z),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Interaction::None)
    }

    /// Evenness and convexity spot checks on seeded random points within
    /// the given reach (the diameter of the extended box).
    pub fn validate(&self, d: usize, reach: f64) -> Result<()> {
        if let Interaction::Quadratic { coeff } = self {
            if !coeff.is_finite() || *coeff < 0.0 {
                return Err(KdeflowError::Config(format!(
                    "energy.w.coeff: need a finite nonnegative coefficient, got {coeff}"
                )));
            }
        }
        if self.is_none() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x3667);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * reach).collect()
        };
        for _ in 0..64 {
            let z = draw(&mut rng);
            let neg: Vec<f64> = z.iter().map(|v| -v).collect();
            let (a, b) = (self.eval(&z), self.eval(&neg));
            if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
                return Err(KdeflowError::Config(format!(
                    "energy.w: interaction is not even at z={z:?}"
                )));
            }
            let z2 = draw(&mut rng);
            let mid: Vec<f64> = z.iter().zip(&z2).map(|(u, v)| 0.5 * (u + v)).collect();
            let convex_gap = 0.5 * (self.eval(&z) + self.eval(&z2)) - self.eval(&mid);
            if convex_gap < -1e-9 * self.eval(&z).abs().max(1.0) {
                return Err(KdeflowError::Config(format!(
                    "energy.w: interaction fails midpoint convexity between {z:?} and {z2:?}"
                )));
            }
        }
        Ok(())
    }

    /// Lipschitz constant valid for pair differences up to the given length.
    pub fn lipschitz_for_diameter(&self, diam: f64) -> f64 {
        match self {
            Interaction::None => 0.0,
            Interaction::Quadratic { coeff } => 2.0 * coeff.abs() * diam,
            Interaction::Custom { lipschitz, .. } => *lipschitz,
        }
    }
}

/// Which way the potential and interaction terms are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMode {
    /// Averages over particles; O(n) and O(n^2), no quadrature error.
    ParticleSum,
    /// Integrates against the mixture density on the midpoint lattice.
    Exact,
}

/// Midpoint lattice over an axis-aligned box; canonical quadrature nodes.
///
/// Node order is row-major with the last axis fastest, which is the fixed
/// accumulation order of every energy sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    lo: Vec<f64>,
    step: Vec<f64>,
    counts: Vec<usize>,
    strides: Vec<usize>,
    weight: f64,
}

impl Lattice {
    pub fn covering(bbox: &[[f64; 2]], pitch: f64) -> Result<Lattice> {
        if !(pitch.is_finite() && pitch > 0.0) {
            return Err(KdeflowError::Config(format!(
                "quadrature.pitch: must be positive and finite, got {pitch}"
            )));
        }
        let d = bbox.len();
        let mut lo = Vec::with_capacity(d);
        let mut step = Vec::with_capacity(d);
        let mut counts = Vec::with_capacity(d);
        let mut weight = 1.0;
        for b in bbox {
            let len = b[1] - b[0];
            if !(len > 0.0) {
                return Err(KdeflowError::Config("quadrature: empty box".into()));
            }
            let c = (len / pitch).ceil().max(1.0) as usize;
            lo.push(b[0]);
            step.push(len / c as f64);
            counts.push(c);
            weight *= len / c as f64;
        }
        let mut strides = vec![1usize; d];
        for a in (0..d.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * counts[a + 1];
        }
        Ok(Lattice { lo, step, counts, strides, weight })
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Volume of one cell; every node carries this quadrature weight.
    pub fn cell_weight(&self) -> f64 {
        self.weight
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn steps(&self) -> &[f64] {
        &self.step
    }

    /// Coordinate of node i along axis a.
    pub fn coord(&self, a: usize, i: usize) -> f64 {
        self.lo[a] + (i as f64 + 0.5) * self.step[a]
    }

    /// Writes the coordinates of flat node index `flat` into `out`.
    pub fn node(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for a in 0..self.dim() {
            let i = rem / self.strides[a];
            rem %= self.strides[a];
            out[a] = self.coord(a, i);
        }
    }

    /// Inclusive index range of nodes within [lo, hi] along axis a, widened
    /// by one node on each side so float rounding can never drop a node
    /// that the kernel still touches (extra nodes contribute exact zeros).
    pub fn axis_window(&self, a: usize, lo: f64, hi: f64) -> (usize, usize) {
        let c = self.counts[a];
        let raw_lo = ((lo - self.lo[a]) / self.step[a] - 0.5).ceil() as i64 - 1;
        let raw_hi = ((hi - self.lo[a]) / self.step[a] - 0.5).floor() as i64 + 1;
        let start = raw_lo.clamp(0, c as i64 - 1) as usize;
        let end = raw_hi.clamp(0, c as i64 - 1) as usize;
        if raw_hi < 0 || raw_lo >= c as i64 {
            // window entirely outside: return an empty range marker
            return (1, 0);
        }
        (start, end)
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }
}

/// Accumulates the mixture density on the lattice by particle windows.
///
/// Contributions are added particle-major in ascending index order, the
/// same order a direct density query uses, so the two paths agree to
/// rounding noise.
pub fn mixture_on_lattice(
    config: &ParticleConfiguration,
    kernel: &Kernel,
    h: f64,
    lattice: &Lattice,
) -> Vec<f64> {
    let mut u = vec![0.0; lattice.len()];
    let inv_n = 1.0 / config.n() as f64;
    for p in config.iter_points() {
        add_particle_window(&mut u, p, kernel, h, lattice, inv_n);
    }
    u
}

/// Visits every lattice node inside one particle's kernel support and hands
/// the callback the flat node index and the scaled kernel value there.
/// Nodes where the kernel vanishes are skipped.
pub fn particle_window_nodes(
    p: &[f64],
    kernel: &Kernel,
    h: f64,
    lattice: &Lattice,
    visit: &mut impl FnMut(usize, f64),
) {
    let d = lattice.dim();
    let mut ranges = Vec::with_capacity(d);
    for a in 0..d {
        let (s, e) = lattice.axis_window(a, p[a] - h, p[a] + h);
        if s > e {
            return;
        }
        ranges.push((s, e));
    }
    let mut idx: Vec<usize> = ranges.iter().map(|r| r.0).collect();
    let strides = lattice.strides();
    loop {
        let mut flat = 0usize;
        let mut r2 = 0.0;
        for a in 0..d {
            flat += idx[a] * strides[a];
            let dx = lattice.coord(a, idx[a]) - p[a];
            r2 += dx * dx;
        }
        let k = kernel.eval_scaled_radial(h, r2.sqrt());
        if k != 0.0 {
            visit(flat, k);
        }
        let mut a = d;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] <= ranges[a].1 {
                break;
            }
            idx[a] = ranges[a].0;
        }
    }
}

/// Adds (sign = +) or removes (sign = -) one particle's kernel mass from a
/// density lattice; shared by full builds and incremental moves.
pub fn add_particle_window(
    u: &mut [f64],
    p: &[f64],
    kernel: &Kernel,
    h: f64,
    lattice: &Lattice,
    scale: f64,
) {
    particle_window_nodes(p, kernel, h, lattice, &mut |flat, k| {
        u[flat] += scale * k;
    });
}

/// Hard ceiling on lattice nodes for the exact interaction double integral.
pub const EXACT_INTERACTION_MAX_NODES: usize = 10_000;

/// Full description of the driving free energy.
#[derive(Clone, Debug)]
pub struct EnergySpec {
    pub law: InternalEnergyLaw,
    pub v: Potential,
    pub w: Interaction,
    pub domain: Domain,
    /// Movement penalty exponent; also the moment order in coupling bounds.
    pub p: f64,
    /// Midpoint pitch override; defaults to h/4 at evaluation time.
    pub quad_pitch: Option<f64>,
    v_lipschitz: f64,
    w_lipschitz: f64,
    stated_box: Vec<[f64; 2]>,
}

impl EnergySpec {
    /// Validates all the pieces and resolves Lipschitz constants on the
    /// stated box (domain bounding box extended by the unit kernel support,
    /// covering every admissible bandwidth h <= 1). Explicit overrides win
    /// when the caller knows tighter constants.
    pub fn new(
        law: InternalEnergyLaw,
        v: Potential,
        w: Interaction,
        domain: Domain,
        p: f64,
        quad_pitch: Option<f64>,
        v_lipschitz_override: Option<f64>,
        w_lipschitz_override: Option<f64>,
    ) -> Result<EnergySpec> {
        domain.validate()?;
        law.verify()?;
        let d = domain.dim();
        v.validate(d)?;
        if !(p.is_finite() && p > 1.0) {
            return Err(KdeflowError::Config(format!(
                "energy.p: movement exponent must exceed 1, got {p}"
            )));
        }
        if let Some(pitch) = quad_pitch {
            if !(pitch.is_finite() && pitch > 0.0) {
                return Err(KdeflowError::Config(format!(
                    "energy.quadrature.pitch: must be positive, got {pitch}"
                )));
            }
        }
        let stated_box: Vec<[f64; 2]> = domain
            .bounding_box()
            .iter()
            .map(|b| [b[0] - 1.0, b[1] + 1.0])
            .collect();
        let diam = stated_box
            .iter()
            .map(|b| (b[1] - b[0]) * (b[1] - b[0]))
            .sum::<f64>()
            .sqrt();
        w.validate(d, diam)?;
        let v_lipschitz = v_lipschitz_override.unwrap_or_else(|| v.lipschitz_on(&stated_box));
        let w_lipschitz =
            w_lipschitz_override.unwrap_or_else(|| w.lipschitz_for_diameter(diam));
        if !(v_lipschitz.is_finite() && v_lipschitz >= 0.0) {
            return Err(KdeflowError::Config(format!(
                "energy.v.L_V: need a finite nonnegative constant, got {v_lipschitz}"
            )));
        }
        if !(w_lipschitz.is_finite() && w_lipschitz >= 0.0) {
            return Err(KdeflowError::Config(format!(
                "energy.w.L_W: need a finite nonnegative constant, got {w_lipschitz}"
            )));
        }
        Ok(EnergySpec {
            law,
            v,
            w,
            domain,
            p,
            quad_pitch,
            v_lipschitz,
            w_lipschitz,
            stated_box,
        })
    }

    pub fn v_lipschitz(&self) -> f64 {
        self.v_lipschitz
    }

    pub fn w_lipschitz(&self) -> f64 {
        self.w_lipschitz
    }

    /// Box on which the Lipschitz constants were resolved.
    pub fn stated_box(&self) -> &[[f64; 2]] {
        &self.stated_box
    }

    /// Quadrature lattice for bandwidth h: the bounding box extended by h,
    /// pitch at most h/4 (finer overrides allowed, coarser rejected).
    pub fn lattice_for(&self, h: f64) -> Result<Lattice> {
        if !(h.is_finite() && h > 0.0) {
            return Err(KdeflowError::Config(format!("bandwidth must be positive, got {h}")));
        }
        let pitch = match self.quad_pitch {
            Some(pq) => {
                if pq > h / 4.0 * (1.0 + 1e-9) {
                    return Err(KdeflowError::Config(format!(
                        "energy.quadrature.pitch: {pq} exceeds h/4 = {}; the integral \
                         needs at least four cells across the kernel radius",
                        h / 4.0
                    )));
                }
                pq
            }
            None => h / 4.0,
        };
        let bbox: Vec<[f64; 2]> = self
            .domain
            .bounding_box()
            .iter()
            .map(|b| [b[0] - h, b[1] + h])
            .collect();
        Lattice::covering(&bbox, pitch)
    }

    fn feasible(&self, meas: &KdeMeasure) -> bool {
        meas.particles().inside(&self.domain)
    }

    /// Internal term: sum of F(density) over the lattice, times cell volume.
    pub fn internal_energy(&self, meas: &KdeMeasure) -> Result<f64> {
        if !self.feasible(meas) {
            return Ok(f64::INFINITY);
        }
        let lattice = self.lattice_for(meas.h())?;
        let u = mixture_on_lattice(meas.particles(), meas.kernel(), meas.h(), &lattice);
        let mut acc = 0.0;
        for &ui in &u {
            acc += self.law.f(ui);
        }
        Ok(acc * lattice.cell_weight())
    }

    /// Potential term in the chosen mode.
    pub fn potential_energy(&self, meas: &KdeMeasure, mode: EnergyMode) -> Result<f64> {
        if !self.feasible(meas) {
            return Ok(f64::INFINITY);
        }
        match mode {
            EnergyMode::ParticleSum => {
                let cfg = meas.particles();
                let mut acc = 0.0;
                for pnt in cfg.iter_points() {
                    acc += self.v.eval(pnt);
                }
                Ok(acc / cfg.n() as f64)
            }
            EnergyMode::Exact => {
                if matches!(self.v, Potential::Zero) {
                    return Ok(0.0);
                }
                let lattice = self.lattice_for(meas.h())?;
                let u = mixture_on_lattice(meas.particles(), meas.kernel(), meas.h(), &lattice);
                let d = lattice.dim();
                let mut x = vec![0.0; d];
                let mut acc = 0.0;
                for (flat, &ui) in u.iter().enumerate() {
                    if ui != 0.0 {
                        lattice.node(flat, &mut x);
                        acc += self.v.eval(&x) * ui;
                    }
                }
                Ok(acc * lattice.cell_weight())
            }
        }
    }

    /// Interaction term in the chosen mode. The exact mode squares the
    /// lattice and is gated to small node counts.
    pub fn interaction_energy(&self, meas: &KdeMeasure, mode: EnergyMode) -> Result<f64> {
        if !self.feasible(meas) {
            return Ok(f64::INFINITY);
        }
        if self.w.is_none() {
            return Ok(0.0);
        }
        match mode {
            EnergyMode::ParticleSum => {
                let cfg = meas.particles();
                let n = cfg.n();
                let d = cfg.dim();
                let mut z = vec![0.0; d];
                let mut acc = 0.0;
                for i in 0..n {
                    let pi = cfg.point(i);
                    for j in 0..n {
                        let pj = cfg.point(j);
                        for a in 0..d {
                            z[a] = pi[a] - pj[a];
                        }
                        acc += self.w.eval(&z);
                    }
                }
                Ok(acc / (2.0 * (n * n) as f64))
            }
            EnergyMode::Exact => {
                let lattice = self.lattice_for(meas.h())?;
                let nodes = lattice.len();
                if nodes > EXACT_INTERACTION_MAX_NODES {
                    return Err(KdeflowError::QuadratureTooLarge {
                        nodes,
                        max: EXACT_INTERACTION_MAX_NODES,
                    });
                }
                let u = mixture_on_lattice(meas.particles(), meas.kernel(), meas.h(), &lattice);
                let d = lattice.dim();
                let mut xa = vec![0.0; d];
                let mut xb = vec![0.0; d];
                let mut z = vec![0.0; d];
                let mut acc = 0.0;
                for ia in 0..nodes {
                    if u[ia] == 0.0 {
                        continue;
                    }
                    lattice.node(ia, &mut xa);
                    for ib in 0..nodes {
                        if u[ib] == 0.0 {
                            continue;
                        }
                        lattice.node(ib, &mut xb);
                        for a in 0..d {
                            z[a] = xa[a] - xb[a];
                        }
                        acc += 0.5 * self.w.eval(&z) * u[ia] * u[ib];
                    }
                }
                Ok(acc * lattice.cell_weight() * lattice.cell_weight())
            }
        }
    }

    /// Total free energy: internal + potential + interaction, literally the
    /// sum of the three public terms so the decomposition is exact.
    pub fn total_energy(&self, meas: &KdeMeasure, mode: EnergyMode) -> Result<f64> {
        let a = self.internal_energy(meas)?;
        if a == f64::INFINITY {
            return Ok(f64::INFINITY);
        }
        let b = self.potential_energy(meas, mode)?;
        let c = self.interaction_energy(meas, mode)?;
        Ok(a + b + c)
    }
}

/// Concave continuity modulus of the law on [0, M], evaluated at r.
///
/// Recipe: exact chord oscillations of F on a 2048-point uniform grid of
/// [0, M] give omega_k = sup over lags up to k; the modulus is the lower
/// envelope over slopes b (a 1025-point log grid below the steepest chord
/// slope, plus b = 0) of max_k(omega_k - b r_k)_+ + b r. The output is
/// concave and nondecreasing in r by construction.
pub fn modulus(law: &InternalEnergyLaw, m_bound: f64, r: f64) -> Result<f64> {
    if !(m_bound.is_finite() && m_bound > 0.0) {
        return Err(KdeflowError::Config(format!(
            "modulus: density bound must be positive, got {m_bound}"
        )));
    }
    if !(r.is_finite() && r >= 0.0) {
        return Err(KdeflowError::Config(format!(
            "modulus: radius must be nonnegative, got {r}"
        )));
    }
    const S_GRID: usize = 2048;
    const B_GRID: usize = 1025;
    let ds = m_bound / (S_GRID - 1) as f64;
    let fs: Vec<f64> = (0..S_GRID).map(|i| law.f(i as f64 * ds)).collect();
    // omega_k = largest |F(s) - F(s')| over grid pairs at lag <= k
    let mut omega = vec![0.0f64; S_GRID];
    let mut running = 0.0f64;
    for k in 1..S_GRID {
        let mut worst = 0.0f64;
        for i in 0..(S_GRID - k) {
            worst = worst.max((fs[i + k] - fs[i]).abs());
        }
        running = running.max(worst);
        omega[k] = running;
    }
    let b_max = (1..S_GRID)
        .map(|k| omega[k] / (k as f64 * ds))
        .fold(0.0f64, f64::max);
    if b_max == 0.0 {
        return Ok(0.0);
    }
    let mut best = f64::INFINITY;
    let eval_b = |b: f64| -> f64 {
        let mut peak = 0.0f64;
        for k in 1..S_GRID {
            peak = peak.max(omega[k] - b * (k as f64 * ds));
        }
        peak.max(0.0) + b * r
    };
    best = best.min(eval_b(0.0));
    for j in 0..B_GRID {
        let b = b_max * 10f64.powf(-12.0 * (1.0 - j as f64 / (B_GRID - 1) as f64));
        best = best.min(eval_b(b));
    }
    Ok(best)
}
