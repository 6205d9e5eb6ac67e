//! Particle configurations, kernel mixtures, and initial-density sampling.
//!
//! A particle configuration is an ordered list of n points; the measure it
//! represents is the equal-weight mixture of bandwidth-h kernels centered at
//! the particles. Particle order is meaningful: the movement penalty pairs
//! particles by index, and every deterministic tie-break follows index order.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{KdeflowError, Result};
use crate::kernel::Kernel;
use crate::numeric::{adaptive_simpson, norm_cdf, norm_inv_cdf, unit_sphere_area};

/// Ordered cloud of n points in R^d, stored flat.
///
/// Sampled configurations always lie inside their domain; configurations
/// built by hand may place points anywhere (the energy treats exterior
/// points as infeasible rather than forbidding them here).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleConfiguration {
    d: usize,
    coords: Vec<f64>,
}

impl ParticleConfiguration {
    pub fn new(d: usize, coords: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(KdeflowError::Config("particles: dimension must be positive".into()));
        }
        if coords.is_empty() || coords.len() % d != 0 {
            return Err(KdeflowError::Config(format!(
                "particles: coordinate count {} is not a positive multiple of d={d}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(KdeflowError::Config("particles: coordinates must be finite".into()));
        }
        Ok(ParticleConfiguration { d, coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(KdeflowError::Config("particles: need at least one point".into()));
        }
        let d = points[0].len();
        let mut coords = Vec::with_capacity(points.len() * d);
        for p in points {
            if p.len() != d {
                return Err(KdeflowError::Config("particles: mixed dimensions".into()));
            }
            coords.extend_from_slice(p);
        }
        ParticleConfiguration::new(d, coords)
    }

    pub fn n(&self) -> usize {
        self.coords.len() / self.d
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    pub fn set_point(&mut self, i: usize, p: &[f64]) {
        assert_eq!(p.len(), self.d);
        self.coords[i * self.d..(i + 1) * self.d].copy_from_slice(p);
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.d)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// True when every particle lies strictly inside the domain.
    pub fn inside(&self, domain: &Domain) -> bool {
        self.iter_points().all(|p| domain.contains(p))
    }
}

/// Hash-grid over particle indices with cells of the kernel support size,
/// so a density query touches only the 3^d neighboring cells.
#[derive(Clone, Debug)]
struct CellList {
    pitch: f64,
    d: usize,
    map: HashMap<Vec<i64>, Vec<u32>>,
}

impl CellList {
    fn build(config: &ParticleConfiguration, pitch: f64) -> CellList {
        let d = config.dim();
        let mut map: HashMap<Vec<i64>, Vec<u32>> = HashMap::new();
        for (i, p) in config.iter_points().enumerate() {
            let key: Vec<i64> = p.iter().map(|&x| (x / pitch).floor() as i64).collect();
            map.entry(key).or_default().push(i as u32);
        }
        CellList { pitch, d, map }
    }

    /// Particle indices within kernel reach of x, ascending.
    fn candidates(&self, x: &[f64]) -> Vec<u32> {
        let base: Vec<i64> = x.iter().map(|&v| (v / self.pitch).floor() as i64).collect();
        let mut out: Vec<u32> = Vec::new();
        let mut offs = vec![-1i64; self.d];
        loop {
            let key: Vec<i64> = base.iter().zip(&offs).map(|(b, o)| b + o).collect();
            if let Some(list) = self.map.get(&key) {
                out.extend_from_slice(list);
            }
            let mut a = self.d;
            loop {
                if a == 0 {
                    out.sort_unstable();
                    return out;
                }
                a -= 1;
                offs[a] += 1;
                if offs[a] <= 1 {
                    break;
                }
                offs[a] = -1;
            }
        }
    }
}

/// Equal-weight mixture of bandwidth-h kernels at the particles.
#[derive(Clone, Debug)]
pub struct KdeMeasure {
    config: ParticleConfiguration,
    h: f64,
    kernel: Kernel,
    cells: CellList,
}

impl KdeMeasure {
    pub fn new(config: ParticleConfiguration, h: f64, kernel: Kernel) -> Result<Self> {
        if kernel.dim() != config.dim() {
            return Err(KdeflowError::Config(format!(
                "mixture: kernel dimension {} vs particle dimension {}",
                kernel.dim(),
                config.dim()
            )));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(KdeflowError::Config(format!(
                "mixture: bandwidth must be positive and finite, got {h}"
            )));
        }
        let cells = CellList::build(&config, h);
        Ok(KdeMeasure { config, h, kernel, cells })
    }

    /// Density at x: contributions are summed in ascending particle order,
    /// a fixed order that keeps evaluation deterministic.
    pub fn density(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.config.dim());
        let mut acc = 0.0;
        for &i in &self.cells.candidates(x) {
            let p = self.config.point(i as usize);
            let r = dist(p, x);
            acc += self.kernel.eval_scaled_radial(self.h, r);
        }
        acc / self.config.n() as f64
    }

    /// A priori sup bound sup(K)/h^d; the density never exceeds it.
    pub fn sup_density_bound(&self) -> f64 {
        self.kernel.sup_norm() / self.h.powi(self.config.dim() as i32)
    }

    pub fn particles(&self) -> &ParticleConfiguration {
        &self.config
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Initial densities the sampler understands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDensitySpec {
    /// Uniform on a sub-box of the domain.
    Uniform { bounds: Vec<[f64; 2]> },
    /// Isotropic Gaussian restricted to the domain and renormalized.
    TruncGauss { center: Vec<f64>, sigma: f64 },
    /// Self-similar compactly supported profile of the quadratic-pressure
    /// family, frozen at time t0; center defaults to the origin.
    Barenblatt {
        m: f64,
        t0: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
}

/// Scaling exponents and mass constant of the self-similar profile
/// u(t,x) = t^{-alpha d_scale} (c - beta |x|^2 t^{-2 alpha})_+^{1/(m-1)}:
/// alpha = 1/(d(m-1)+2), beta = alpha (m-1)/(2m), and c normalizes the mass.
pub fn self_similar_constants(m: f64, d: usize) -> Result<(f64, f64, f64)> {
    if !(m > 1.0) {
        return Err(KdeflowError::Config(format!(
            "self-similar profile: need m > 1, got {m}"
        )));
    }
    let df = d as f64;
    let alpha = 1.0 / (df * (m - 1.0) + 2.0);
    let beta = alpha * (m - 1.0) / (2.0 * m);
    let q = 1.0 / (m - 1.0);
    // J = int_0^1 s^{d-1} (1 - s^2)^q ds via s = sin(theta), smooth integrand
    let j = adaptive_simpson(
        &|th: f64| th.sin().powf(df - 1.0) * th.cos().powf(2.0 * q + 1.0),
        0.0,
        std::f64::consts::FRAC_PI_2,
        1e-12,
    );
    let s_area = unit_sphere_area(d);
    // mass = c^{q + d/2} beta^{-d/2} S_{d-1} J = 1
    let c = (beta.powf(df / 2.0) / (s_area * j)).powf(1.0 / (q + df / 2.0));
    Ok((alpha, beta, c))
}

/// Pointwise value of the self-similar profile at time t.
pub fn self_similar_density(m: f64, t: f64, center: &[f64], x: &[f64]) -> Result<f64> {
    let d = center.len();
    let (alpha, beta, c) = self_similar_constants(m, d)?;
    if !(t > 0.0) {
        return Err(KdeflowError::Config(format!("self-similar profile: need t > 0, got {t}")));
    }
    let ta = t.powf(alpha);
    let scaled_sq: f64 = x
        .iter()
        .zip(center)
        .map(|(xi, ci)| ((xi - ci) / ta) * ((xi - ci) / ta))
        .sum();
    let core = c - beta * scaled_sq;
    if core <= 0.0 {
        return Ok(0.0);
    }
    Ok(core.powf(1.0 / (m - 1.0)) / ta.powi(d as i32))
}

impl InitialDensitySpec {
    /// Validates the spec against a domain (dimensions, containment, overlap).
    pub fn validate(&self, domain: &Domain) -> Result<()> {
        let d = domain.dim();
        match self {
            InitialDensitySpec::Uniform { bounds } => {
                if bounds.len() != d {
                    return Err(KdeflowError::Config(format!(
                        "initial.bounds: dimension {} vs domain dimension {d}",
                        bounds.len()
                    )));
                }
                for (a, b) in bounds.iter().enumerate() {
                    if !(b[0].is_finite() && b[1].is_finite() && b[0] < b[1]) {
                        return Err(KdeflowError::Config(format!(
                            "initial.bounds[{a}]: need finite lo < hi"
                        )));
                    }
                }
                // every corner of the sub-box must stay in the closed domain;
                // with convex domains that bounds the whole sub-box
                let mut corner = vec![0.0; d];
                for mask in 0..(1usize << d) {
                    for (a, c) in corner.iter_mut().enumerate() {
                        *c = if mask >> a & 1 == 0 { bounds[a][0] } else { bounds[a][1] };
                    }
                    if !domain.contains_closure(&corner) {
                        return Err(KdeflowError::Config(format!(
                            "initial.bounds: corner {corner:?} leaves the domain"
                        )));
                    }
                }
                Ok(())
            }
            InitialDensitySpec::TruncGauss { center, sigma } => {
                if center.len() != d {
                    return Err(KdeflowError::Config(format!(
                        "initial.center: dimension {} vs domain dimension {d}",
                        center.len()
                    )));
                }
                if !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(KdeflowError::Config(format!(
                        "initial.sigma: need a positive finite width, got {sigma}"
                    )));
                }
                Ok(())
            }
            InitialDensitySpec::Barenblatt { m, t0, center } => {
                if let Some(c) = center {
                    if c.len() != d {
                        return Err(KdeflowError::Config(format!(
                            "initial.center: dimension {} vs domain dimension {d}",
                            c.len()
                        )));
                    }
                }
                if !(*m > 1.0) {
                    return Err(KdeflowError::Config(format!(
                        "initial.m: the self-similar profile needs m > 1, got {m}"
                    )));
                }
                if !(t0.is_finite() && *t0 > 0.0) {
                    return Err(KdeflowError::Config(format!(
                        "initial.t0: need a positive start time, got {t0}"
                    )));
                }
                Ok(())
            }
        }
    }

    fn center_or_origin(&self, d: usize) -> Vec<f64> {
        match self {
            InitialDensitySpec::Barenblatt { center: Some(c), .. } => c.clone(),
            InitialDensitySpec::Barenblatt { center: None, .. } => vec![0.0; d],
            InitialDensitySpec::TruncGauss { center, .. } => center.clone(),
            InitialDensitySpec::Uniform { bounds } => {
                bounds.iter().map(|b| 0.5 * (b[0] + b[1])).collect()
            }
        }
    }

    /// Normalized density at x, restricted to the domain.
    ///
    /// Normalization is closed-form where possible (intervals, boxes,
    /// centered balls); the few genuinely unsupported combinations are
    /// reported as config errors instead of silently mis-normalizing.
    pub fn density(&self, domain: &Domain, x: &[f64]) -> Result<f64> {
        let d = domain.dim();
        self.validate(domain)?;
        if !domain.contains_closure(x) {
            return Ok(0.0);
        }
        match self {
            InitialDensitySpec::Uniform { bounds } => {
                let inside = bounds.iter().zip(x).all(|(b, &xi)| b[0] <= xi && xi <= b[1]);
                if !inside {
                    return Ok(0.0);
                }
                let vol: f64 = bounds.iter().map(|b| b[1] - b[0]).product();
                Ok(1.0 / vol)
            }
            InitialDensitySpec::TruncGauss { center, sigma } => {
                let z = truncated_gaussian_mass(domain, center, *sigma)?;
                let r2: f64 = x
                    .iter()
                    .zip(center)
                    .map(|(xi, ci)| (xi - ci) * (xi - ci))
                    .sum();
                let dens = (-(r2) / (2.0 * sigma * sigma)).exp()
                    / (2.0 * std::f64::consts::PI * sigma * sigma).powf(d as f64 / 2.0);
                Ok(dens / z)
            }
            InitialDensitySpec::Barenblatt { m, t0, .. } => {
                let center = self.center_or_origin(d);
                let (alpha, beta, c) = self_similar_constants(*m, d)?;
                // support must sit inside the domain so the unit mass is exact
                let radius = (c / beta).sqrt() * t0.powf(alpha);
                let bbox = domain.bounding_box();
                for (a, b) in bbox.iter().enumerate() {
                    if center[a] - radius < b[0] - 1e-12 || center[a] + radius > b[1] + 1e-12 {
                        return Err(KdeflowError::Config(format!(
                            "initial: self-similar support of radius {radius:.4} around \
                             {center:?} leaves the domain; enlarge the domain or raise t0"
                        )));
                    }
                }
                self_similar_density(*m, *t0, &center, x)
            }
        }
    }
}

/// Mass of an isotropic Gaussian restricted to the domain, closed form for
/// intervals and boxes, radial quadrature for centered balls.
fn truncated_gaussian_mass(domain: &Domain, center: &[f64], sigma: f64) -> Result<f64> {
    match domain {
        Domain::Box { bounds } => {
            let mut z = 1.0;
            for (b, c) in bounds.iter().zip(center) {
                let lo = (b[0] - c) / sigma;
                let hi = (b[1] - c) / sigma;
                z *= norm_cdf(hi) - norm_cdf(lo);
            }
            if z < 1e-12 {
                return Err(KdeflowError::SamplerStarvation { attempts: 0, acceptance_rate: z });
            }
            Ok(z)
        }
        Domain::Ball { center: bc, radius } => {
            let d = bc.len();
            let off = dist(bc, center);
            if off > 1e-12 * radius {
                return Err(KdeflowError::Config(
                    "initial: Gaussian center must coincide with the ball center for \
                     closed-form normalization; use a box domain for offset centers"
                        .into(),
                ));
            }
            let s = unit_sphere_area(d);
            let norm = (2.0 * std::f64::consts::PI * sigma * sigma).powf(d as f64 / 2.0);
            let z = s / norm
                * adaptive_simpson(
                    &|r: f64| r.powf(d as f64 - 1.0) * (-(r * r) / (2.0 * sigma * sigma)).exp(),
                    0.0,
                    *radius,
                    1e-14,
                );
            if z < 1e-12 {
                return Err(KdeflowError::SamplerStarvation { attempts: 0, acceptance_rate: z });
            }
            Ok(z)
        }
    }
}

const REJECTION_CAP_PER_POINT: u64 = 1_000_000;

/// How the unit-interval draws behind inverse-CDF sampling are laid out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Independent draws; the plain law-of-large-numbers initialization.
    #[default]
    Iid,
    /// One jittered draw per stratum (i + U_i) / n. Same law per particle,
    /// much flatter empirical measure; one-dimensional targets only.
    Stratified,
}

/// Draws n particles from the initial density restricted to the domain.
///
/// Uses independent draws; see [`sample_initial_with`] for the stratified
/// variant.
pub fn sample_initial(
    spec: &InitialDensitySpec,
    domain: &Domain,
    n: usize,
    seed: u64,
) -> Result<ParticleConfiguration> {
    sample_initial_with(spec, domain, n, seed, SamplingStrategy::Iid)
}

/// Draws n particles from the initial density restricted to the domain.
///
/// One dimension uses inverse-CDF transforms (deterministic in the seed and
/// independent of acceptance luck); higher dimensions use rejection sampling
/// with a starvation guard. Identical inputs give bitwise-identical output.
pub fn sample_initial_with(
    spec: &InitialDensitySpec,
    domain: &Domain,
    n: usize,
    seed: u64,
    strategy: SamplingStrategy,
) -> Result<ParticleConfiguration> {
    spec.validate(domain)?;
    if n == 0 {
        return Err(KdeflowError::Config("sampling: need at least one particle".into()));
    }
    let d = domain.dim();
    if strategy == SamplingStrategy::Stratified && d != 1 {
        return Err(KdeflowError::Config(
            "sampling: the stratified strategy rides on the one-dimensional inverse CDF; \
             use iid in higher dimensions"
                .into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(n * d);
    // Unit draw for particle i under the chosen layout.
    let unit_draw = move |rng: &mut ChaCha8Rng, i: usize| -> f64 {
        let v: f64 = rng.gen();
        match strategy {
            SamplingStrategy::Iid => v,
            SamplingStrategy::Stratified => (i as f64 + v) / n as f64,
        }
    };

    if d == 1 {
        let bbox = domain.bounding_box();
        let (dlo, dhi) = (bbox[0][0], bbox[0][1]);
        match spec {
            InitialDensitySpec::Uniform { bounds } => {
                let (lo, hi) = (bounds[0][0], bounds[0][1]);
                for i in 0..n {
                    let u = unit_draw(&mut rng, i);
                    coords.push(nudge_inside(lo + u * (hi - lo), dlo, dhi));
                }
            }
            InitialDensitySpec::TruncGauss { center, sigma } => {
                let (mu, s) = (center[0], *sigma);
                let fa = norm_cdf((dlo - mu) / s);
                let fb = norm_cdf((dhi - mu) / s);
                if fb - fa < 1e-12 {
                    return Err(KdeflowError::SamplerStarvation {
                        attempts: 0,
                        acceptance_rate: fb - fa,
                    });
                }
                for i in 0..n {
                    let u = unit_draw(&mut rng, i);
                    let x = mu + s * norm_inv_cdf(fa + u * (fb - fa));
                    coords.push(nudge_inside(x, dlo, dhi));
                }
            }
            InitialDensitySpec::Barenblatt { m, t0, .. } => {
                let center = spec.center_or_origin(1);
                let (alpha, beta, cmass) = self_similar_constants(*m, 1)?;
                let radius = (cmass / beta).sqrt() * t0.powf(alpha);
                let lo = dlo.max(center[0] - radius);
                let hi = dhi.min(center[0] + radius);
                if !(hi > lo) {
                    return Err(KdeflowError::SamplerStarvation {
                        attempts: 0,
                        acceptance_rate: 0.0,
                    });
                }
                // tabulated CDF on the support, inverted by bisection
                const TABLE: usize = 4096;
                let step = (hi - lo) / TABLE as f64;
                let mut cdf = Vec::with_capacity(TABLE + 1);
                cdf.push(0.0);
                let mut acc = 0.0;
                for i in 0..TABLE {
                    let xm = lo + (i as f64 + 0.5) * step;
                    acc += self_similar_density(*m, *t0, &center, &[xm])? * step;
                    cdf.push(acc);
                }
                let total = acc;
                for i in 0..n {
                    let u: f64 = unit_draw(&mut rng, i) * total;
                    let mut a = 0usize;
                    let mut b = TABLE;
                    while b - a > 1 {
                        let mid = (a + b) / 2;
                        if cdf[mid] <= u {
                            a = mid;
                        } else {
                            b = mid;
                        }
                    }
                    let frac = if cdf[b] > cdf[a] { (u - cdf[a]) / (cdf[b] - cdf[a]) } else { 0.5 };
                    coords.push(nudge_inside(lo + (a as f64 + frac) * step, dlo, dhi));
                }
            }
        }
        return ParticleConfiguration::new(1, coords);
    }

    // d >= 2: rejection against an unnormalized envelope on a proposal box
    let proposal: Vec<[f64; 2]> = match spec {
        InitialDensitySpec::Uniform { bounds } => bounds.clone(),
        InitialDensitySpec::TruncGauss { .. } => domain.bounding_box(),
        InitialDensitySpec::Barenblatt { m, t0, .. } => {
            let center = spec.center_or_origin(d);
            let (alpha, beta, cmass) = self_similar_constants(*m, d)?;
            let radius = (cmass / beta).sqrt() * t0.powf(alpha);
            domain
                .bounding_box()
                .iter()
                .enumerate()
                .map(|(a, b)| [b[0].max(center[a] - radius), b[1].min(center[a] + radius)])
                .collect()
        }
    };
    for b in &proposal {
        if !(b[1] > b[0]) {
            return Err(KdeflowError::SamplerStarvation { attempts: 0, acceptance_rate: 0.0 });
        }
    }
    let mut attempts_total: u64 = 0;
    let mut accepted: u64 = 0;
    let mut x = vec![0.0; d];
    for _ in 0..n {
        let mut attempts: u64 = 0;
        loop {
            attempts += 1;
            attempts_total += 1;
            if attempts > REJECTION_CAP_PER_POINT {
                return Err(KdeflowError::SamplerStarvation {
                    attempts: attempts_total,
                    acceptance_rate: accepted as f64 / attempts_total as f64,
                });
            }
            for (a, xa) in x.iter_mut().enumerate() {
                let u: f64 = rng.gen();
                *xa = proposal[a][0] + u * (proposal[a][1] - proposal[a][0]);
            }
            if !domain.contains(&x) {
                continue;
            }
            let accept = match spec {
                InitialDensitySpec::Uniform { .. } => true,
                InitialDensitySpec::TruncGauss { center, sigma } => {
                    let r2: f64 = x
                        .iter()
                        .zip(center)
                        .map(|(xi, ci)| (xi - ci) * (xi - ci))
                        .sum();
                    let v: f64 = rng.gen();
                    v < (-(r2) / (2.0 * sigma * sigma)).exp()
                }
                InitialDensitySpec::Barenblatt { m, t0, .. } => {
                    let center = spec.center_or_origin(d);
                    let (_, _, cmass) = self_similar_constants(*m, d)?;
                    let q = 1.0 / (*m - 1.0);
                    let envelope = cmass.powf(q);
                    let dens = self_similar_density(*m, *t0, &center, &x)?;
                    let v: f64 = rng.gen();
                    v * envelope < dens
                }
            };
            if accept {
                accepted += 1;
                coords.extend_from_slice(&x);
                break;
            }
        }
    }
    ParticleConfiguration::new(d, coords)
}

/// Pulls a boundary-exact sample strictly inside the open interval.
fn nudge_inside(x: f64, lo: f64, hi: f64) -> f64 {
    let eps = (hi - lo) * 1e-12;
    x.clamp(lo + eps, hi - eps)
}

/// Uniform deviation rate of a bandwidth-h mixture of n kernels from the
/// smoothed target, at confidence level 1 - alpha:
/// sqrt(log(1/h)/(n h^{2d})) + sqrt(log(1/alpha)/(n h^{2d}))
///   + log(1/h)/(n h^d) + log(1/alpha)/(n h^d).
/// Valid for 0 < h < 9/10 and 0 < alpha < 1. `n` is real-valued so schedule
/// checks can evaluate it for particle counts beyond integer range.
pub fn kde_rate(n: f64, h: f64, alpha: f64, d: usize) -> Result<f64> {
    if !(n >= 1.0 && n.is_finite()) || !(h > 0.0 && h < 0.9) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(KdeflowError::RateOutOfRange { n, h, alpha });
    }
    let lh = (1.0 / h).ln();
    let la = (1.0 / alpha).ln();
    let hd = h.powi(d as i32);
    let h2d = hd * hd;
    Ok((lh / (n * h2d)).sqrt() + (la / (n * h2d)).sqrt() + lh / (n * hd) + la / (n * hd))
}

/// Convolution (K_h * rho)(x): the target the mixture concentrates around.
/// One dimension integrates adaptively to ~1e-8; higher dimensions use a
/// tensor midpoint rule with 64 cells per axis (documented, coarser).
pub fn smoothed_truth(
    kernel: &Kernel,
    h: f64,
    spec: &InitialDensitySpec,
    domain: &Domain,
    x: &[f64],
) -> Result<f64> {
    let d = domain.dim();
    if x.len() != d || kernel.dim() != d {
        return Err(KdeflowError::Config("smoothed truth: dimension mismatch".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(KdeflowError::Config(format!("smoothed truth: bad bandwidth {h}")));
    }
    spec.validate(domain)?;
    if d == 1 {
        let f = |y: f64| -> f64 {
            let k = kernel.eval_scaled(h, &[x[0] - y]);
            if k == 0.0 {
                0.0
            } else {
                k * spec.density(domain, &[y]).unwrap_or(0.0)
            }
        };
        Ok(adaptive_simpson(&f, x[0] - h, x[0] + h, 1e-9))
    } else {
        const CELLS: usize = 64;
        let step = 2.0 * h / CELLS as f64;
        let mut acc = 0.0;
        let mut idx = vec![0usize; d];
        let mut y = vec![0.0; d];
        'outer: loop {
            for a in 0..d {
                y[a] = x[a] - h + (idx[a] as f64 + 0.5) * step;
            }
            let diff: Vec<f64> = x.iter().zip(&y).map(|(xa, ya)| xa - ya).collect();
            let k = kernel.eval_scaled(h, &diff);
            if k > 0.0 {
                acc += k * spec.density(domain, &y)?;
            }
            let mut a = d;
            loop {
                if a == 0 {
                    break 'outer;
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] < CELLS {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(acc * step.powi(d as i32))
    }
}
