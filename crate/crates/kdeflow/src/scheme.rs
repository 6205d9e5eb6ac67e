//! Relaxed minimizing-movement steps over kernel mixtures.
//!
//! One step minimizes (approximately) the objective
//!
//! ```text
//! psi(tau, Y, Z) = E(mixture of Z) + (1 / (p tau^{p-1})) * (1/n) sum_i |z_i - y_i|^p
//! ```
//!
//! over candidate configurations Z, starting from the previous configuration
//! Y. The optimizers are local-search routines that only ever accept strict
//! improvements, so they terminate; the relaxation budget gamma quantifies
//! how far from the true infimum a step is allowed to land, and the
//! brute-force oracle in [`exhaustive_min_psi`] measures that distance on
//! grid-restricted instances.
//!
//! Acceptance is decided on freshly computed energies, never on accumulated
//! optimizer deltas: the final candidate is kept only if its objective,
//! recomputed from scratch, does not exceed the starting energy. This makes
//! the per-step inequality chain
//!
//! ```text
//! E(Y_m) <= psi(tau, Y_{m-1}, Y_m) <= E(Y_{m-1})
//! ```
//!
//! hold exactly in floating point, step after step.

use serde::{Deserialize, Serialize};

use crate::domain::{project_to_grid, CoveringGrid};
use crate::energy::{
    modulus, particle_window_nodes, EnergyMode, EnergySpec, InternalEnergyLaw, Lattice,
    Potential, EXACT_INTERACTION_MAX_NODES,
};
use crate::error::{KdeflowError, Result};
use crate::kde::{KdeMeasure, ParticleConfiguration};
use crate::kernel::Kernel;
use crate::numeric::ls_slope;

/// |z - y|^p from the squared distance, exact for the common p = 2.
pub(crate) fn pow_dist_p(r2: f64, p: f64) -> f64 {
    if p == 2.0 {
        r2
    } else {
        r2.powf(0.5 * p)
    }
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Movement penalty (1 / (p tau^{p-1})) * (1/n) sum |z_i - y_i|^p, summed in
/// ascending particle order.
pub fn movement_penalty(tau: f64, p: f64, y: &ParticleConfiguration, z: &ParticleConfiguration) -> Result<f64> {
    if y.n() != z.n() || y.dim() != z.dim() {
        return Err(KdeflowError::SizeMismatch { left: y.n(), right: z.n() });
    }
    let mut acc = 0.0;
    for i in 0..y.n() {
        acc += pow_dist_p(squared_dist(y.point(i), z.point(i)), p);
    }
    Ok(acc / (y.n() as f64 * p * tau.powf(p - 1.0)))
}

/// The step objective: total free energy of the mixture of `z` plus the
/// movement penalty anchored at `y`. Infinite whenever the energy is.
pub fn psi(
    spec: &EnergySpec,
    kernel: &Kernel,
    h: f64,
    mode: EnergyMode,
    tau: f64,
    y: &ParticleConfiguration,
    z: &ParticleConfiguration,
) -> Result<f64> {
    let pen = movement_penalty(tau, spec.p, y, z)?;
    let meas = KdeMeasure::new(z.clone(), h, kernel.clone())?;
    let e = spec.total_energy(&meas, mode)?;
    Ok(e + pen)
}

/// Per-step relaxation budget gamma_m.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GammaSchedule {
    /// gamma_m = tau^exponent for every step.
    Uniform { exponent: f64 },
    /// One budget per step, exhausted when the run outlives the list.
    Explicit { values: Vec<f64> },
}

impl GammaSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            GammaSchedule::Uniform { exponent } => {
                if !exponent.is_finite() {
                    return Err(KdeflowError::Config(format!(
                        "schedule.gamma_exponent: must be finite, got {exponent}"
                    )));
                }
            }
            GammaSchedule::Explicit { values } => {
                if values.is_empty() {
                    return Err(KdeflowError::Config(
                        "schedule.gamma_values: need at least one value".into(),
                    ));
                }
                if values.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
                    return Err(KdeflowError::Config(
                        "schedule.gamma_values: every budget must be positive and finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Budget for step `m` (1-based).
    pub fn value_at(&self, m: usize, tau: f64) -> Result<f64> {
        match self {
            GammaSchedule::Uniform { exponent } => Ok(tau.powf(*exponent)),
            GammaSchedule::Explicit { values } => values.get(m - 1).copied().ok_or_else(|| {
                KdeflowError::Config(format!(
                    "schedule.gamma_values: only {} budgets given but step {m} was reached",
                    values.len()
                ))
            }),
        }
    }
}

/// Growing ceiling on the mixture density along a capped run. At step m the
/// lattice sup of every candidate mixture must stay at or below
/// (m_init + m_bar)/2 + m * eps_tau.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityCap {
    /// Sup bound of the initial density.
    pub m_init: f64,
    /// Target ceiling the run may grow toward.
    pub m_bar: f64,
    /// Per-step slack.
    pub eps_tau: f64,
}

impl DensityCap {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_init.is_finite() && self.m_init > 0.0) {
            return Err(KdeflowError::Config(format!(
                "density_cap.M: must be positive and finite, got {}",
                self.m_init
            )));
        }
        if !(self.m_bar.is_finite() && self.m_bar > self.m_init) {
            return Err(KdeflowError::Config(format!(
                "density_cap.M_bar: must exceed M = {}, got {}",
                self.m_init, self.m_bar
            )));
        }
        if !(self.eps_tau.is_finite() && self.eps_tau >= 0.0) {
            return Err(KdeflowError::Config(format!(
                "density_cap.eps_tau: must be nonnegative, got {}",
                self.eps_tau
            )));
        }
        Ok(())
    }

    /// Ceiling in force at step m (1-based).
    pub fn value_at(&self, m: usize) -> f64 {
        0.5 * (self.m_init + self.m_bar) + m as f64 * self.eps_tau
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    /// Round-robin sweeps over particles; each particle scans the whole
    /// restriction grid and takes the best strict improvement.
    GridCoordinateDescent,
    /// Axis stencil z_i +/- r e_a with the radius halving from h down to the
    /// step floor once a full sweep makes no move.
    PatternSearch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerParams {
    pub mode: OptimizerMode,
    /// A candidate move must lower the objective by more than theta to be
    /// taken; a positive value guarantees termination.
    #[serde(default = "OptimizerParams::default_theta")]
    pub theta: f64,
    /// Hard ceiling on full sweeps within one step.
    #[serde(default = "OptimizerParams::default_max_rounds")]
    pub max_rounds: usize,
    /// Smallest pattern-search radius; defaults to the grid pitch when a
    /// grid restriction is present, else to 0.05 h^{d+1}.
    #[serde(default)]
    pub step_floor: Option<f64>,
}

impl OptimizerParams {
    pub fn default_theta() -> f64 {
        1e-9
    }

    pub fn default_max_rounds() -> usize {
        1000
    }

    pub fn new(mode: OptimizerMode) -> Self {
        OptimizerParams {
            mode,
            theta: Self::default_theta(),
            max_rounds: Self::default_max_rounds(),
            step_floor: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return Err(KdeflowError::Config(format!(
                "optimizer.theta: must be positive and finite, got {}",
                self.theta
            )));
        }
        if self.max_rounds == 0 {
            return Err(KdeflowError::Config("optimizer.max_rounds: must be positive".into()));
        }
        if let Some(r) = self.step_floor {
            if !(r.is_finite() && r > 0.0) {
                return Err(KdeflowError::Config(format!(
                    "optimizer.step_floor: must be positive and finite, got {r}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything one step needs besides the energy itself.
#[derive(Clone, Debug)]
pub struct SchemeParams {
    pub tau: f64,
    pub h: f64,
    pub gamma: GammaSchedule,
    pub optimizer: OptimizerParams,
    pub energy_mode: EnergyMode,
    /// Present iff the run is grid-restricted.
    pub grid: Option<CoveringGrid>,
    pub cap: Option<DensityCap>,
}

impl SchemeParams {
    pub fn validate(&self, spec: &EnergySpec, kernel: &Kernel) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(KdeflowError::Config(format!(
                "tau: step size must be positive and finite, got {}",
                self.tau
            )));
        }
        if !(self.h.is_finite() && self.h > 0.0 && self.h <= 1.0) {
            return Err(KdeflowError::Config(format!(
                "schedule.h: bandwidth must lie in (0, 1], got {}",
                self.h
            )));
        }
        let d = spec.domain.dim();
        if kernel.dim() != d {
            return Err(KdeflowError::Config(format!(
                "kernel dimension {} does not match the domain dimension {d}",
                kernel.dim()
            )));
        }
        self.gamma.validate()?;
        self.optimizer.validate()?;
        if let Some(cap) = &self.cap {
            cap.validate()?;
        }
        if let Some(grid) = &self.grid {
            if grid.dim() != d {
                return Err(KdeflowError::Config(format!(
                    "grid dimension {} does not match the domain dimension {d}",
                    grid.dim()
                )));
            }
            let budget = 0.05 * self.h.powi(d as i32 + 1);
            if grid.omega() > budget * (1.0 + 1e-9) {
                return Err(KdeflowError::Config(format!(
                    "schedule.omega: grid pitch {} exceeds 0.05 h^(d+1) = {budget}; \
                     the restriction would be coarser than the energy resolves",
                    grid.omega()
                )));
            }
            if kernel.lipschitz().is_none() {
                return Err(KdeflowError::Config(
                    "grid restriction needs a Lipschitz kernel family; \
                     the box kernel jumps at its support edge"
                        .into(),
                ));
            }
        } else if self.optimizer.mode == OptimizerMode::GridCoordinateDescent {
            return Err(KdeflowError::Config(
                "optimizer.mode: grid_coordinate_descent needs a grid restriction".into(),
            ));
        }
        Ok(())
    }
}

/// Incremental evaluator for the step objective.
///
/// Tracks the mixture density on the quadrature lattice and answers "what
/// would moving particle i to z' change" in time proportional to the kernel
/// window, not the whole configuration. Applied moves update the lattice
/// with the same windowed kernel sums a fresh build uses, so drift between
/// the incremental state and a from-scratch rebuild stays at rounding noise;
/// acceptance never trusts these deltas anyway.
struct StepEvaluator<'a> {
    spec: &'a EnergySpec,
    kernel: &'a Kernel,
    h: f64,
    mode: EnergyMode,
    z: ParticleConfiguration,
    y: &'a ParticleConfiguration,
    lattice: Lattice,
    u: Vec<f64>,
    inv_n: f64,
    /// 1 / (p tau^{p-1} n)
    pen_scale: f64,
    /// V(z_i) per particle (particle-sum mode).
    v_particle: Vec<f64>,
    /// V at every lattice node (exact mode with a nonzero potential).
    v_node: Option<Vec<f64>>,
    /// |z_i - y_i|^p per particle.
    disp: Vec<f64>,
    cap: Option<f64>,
    /// Particle indices sorted by anchor coordinates; every sum over
    /// particles and every sweep follows this order so that relabeling the
    /// input relabels the whole descent bitwise.
    order: Vec<usize>,
    moves_evaluated: u64,
    delta_buf: Vec<(usize, f64)>,
}

impl<'a> StepEvaluator<'a> {
    fn new(
        spec: &'a EnergySpec,
        kernel: &'a Kernel,
        params: &SchemeParams,
        step_index: usize,
        y: &'a ParticleConfiguration,
    ) -> Result<Self> {
        let lattice = spec.lattice_for(params.h)?;
        if params.energy_mode == EnergyMode::Exact
            && !spec.w.is_none()
            && lattice.len() > EXACT_INTERACTION_MAX_NODES
        {
            return Err(KdeflowError::QuadratureTooLarge {
                nodes: lattice.len(),
                max: EXACT_INTERACTION_MAX_NODES,
            });
        }
        let n = y.n();
        let inv_n = 1.0 / n as f64;
        let order = sweep_order(y);
        let mut u = vec![0.0; lattice.len()];
        for &i in &order {
            crate::energy::add_particle_window(&mut u, y.point(i), kernel, params.h, &lattice, inv_n);
        }
        let v_particle: Vec<f64> = y.iter_points().map(|pt| spec.v.eval(pt)).collect();
        let v_node = if params.energy_mode == EnergyMode::Exact
            && !matches!(spec.v, Potential::Zero)
        {
            let mut vals = vec![0.0; lattice.len()];
            let mut x = vec![0.0; lattice.dim()];
            for (flat, slot) in vals.iter_mut().enumerate() {
                lattice.node(flat, &mut x);
                *slot = spec.v.eval(&x);
            }
            Some(vals)
        } else {
            None
        };
        Ok(StepEvaluator {
            spec,
            kernel,
            h: params.h,
            mode: params.energy_mode,
            z: y.clone(),
            y,
            lattice,
            u,
            inv_n,
            pen_scale: inv_n / (spec.p * params.tau.powf(spec.p - 1.0)),
            v_particle,
            v_node,
            disp: vec![0.0; n],
            cap: params.cap.as_ref().map(|c| c.value_at(step_index)),
            order,
            moves_evaluated: 0,
            delta_buf: Vec::new(),
        })
    }

    fn current(&self, i: usize) -> &[f64] {
        self.z.point(i)
    }

    /// Collects the density change of moving particle i to `znew` as sparse
    /// (node, delta) entries, merged and sorted by node index.
    fn collect_density_delta(&mut self, i: usize, znew: &[f64]) {
        self.delta_buf.clear();
        let buf = &mut self.delta_buf;
        let inv_n = self.inv_n;
        particle_window_nodes(self.z.point(i), self.kernel, self.h, &self.lattice, &mut |flat, k| {
            buf.push((flat, -inv_n * k));
        });
        particle_window_nodes(znew, self.kernel, self.h, &self.lattice, &mut |flat, k| {
            buf.push((flat, inv_n * k));
        });
        buf.sort_unstable_by_key(|e| e.0);
        let mut out = 0usize;
        for r in 0..buf.len() {
            if out > 0 && buf[out - 1].0 == buf[r].0 {
                buf[out - 1].1 += buf[r].1;
            } else {
                buf[out] = buf[r];
                out += 1;
            }
        }
        buf.truncate(out);
    }

    /// Objective change of moving particle i to `znew`, infinite when the
    /// move leaves the domain or breaks the density cap.
    fn candidate_delta(&mut self, i: usize, znew: &[f64]) -> f64 {
        self.moves_evaluated += 1;
        if !self.spec.domain.contains(znew) {
            return f64::INFINITY;
        }
        self.collect_density_delta(i, znew);

        if let Some(cap) = self.cap {
            let mut worst = 0.0f64;
            let mut cursor = 0usize;
            for (flat, &ui) in self.u.iter().enumerate() {
                let mut val = ui;
                if cursor < self.delta_buf.len() && self.delta_buf[cursor].0 == flat {
                    val += self.delta_buf[cursor].1;
                    cursor += 1;
                }
                worst = worst.max(val);
            }
            if worst > cap {
                return f64::INFINITY;
            }
        }

        let law = &self.spec.law;
        let mut d_internal = 0.0;
        for &(flat, dv) in &self.delta_buf {
            d_internal += law.f(self.u[flat] + dv) - law.f(self.u[flat]);
        }
        d_internal *= self.lattice.cell_weight();

        let d_potential = match self.mode {
            EnergyMode::ParticleSum => (self.spec.v.eval(znew) - self.v_particle[i]) * self.inv_n,
            EnergyMode::Exact => match &self.v_node {
                Some(vn) => {
                    let mut acc = 0.0;
                    for &(flat, dv) in &self.delta_buf {
                        acc += vn[flat] * dv;
                    }
                    acc * self.lattice.cell_weight()
                }
                None => 0.0,
            },
        };

        let d_interaction = if self.spec.w.is_none() {
            0.0
        } else {
            match self.mode {
                EnergyMode::ParticleSum => {
                    // W is even, so both ordered pairs (i, j) and (j, i) move
                    // by the same amount; the diagonal term cancels.
                    let d = self.z.dim();
                    let zi = self.z.point(i);
                    let mut diff = vec![0.0; d];
                    let mut acc = 0.0;
                    for &j in &self.order {
                        if j == i {
                            continue;
                        }
                        let zj = self.z.point(j);
                        for a in 0..d {
                            diff[a] = znew[a] - zj[a];
                        }
                        let after = self.spec.w.eval(&diff);
                        for a in 0..d {
                            diff[a] = zi[a] - zj[a];
                        }
                        acc += after - self.spec.w.eval(&diff);
                    }
                    acc * self.inv_n * self.inv_n
                }
                EnergyMode::Exact => {
                    // d(1/2 uWu) = delta W u + 1/2 delta W delta, u as is.
                    let d = self.lattice.dim();
                    let mut xa = vec![0.0; d];
                    let mut xb = vec![0.0; d];
                    let mut diff = vec![0.0; d];
                    let mut acc = 0.0;
                    for &(fa, da) in &self.delta_buf {
                        self.lattice.node(fa, &mut xa);
                        let mut inner = 0.0;
                        for (fb, &ub) in self.u.iter().enumerate() {
                            if ub == 0.0 {
                                continue;
                            }
                            self.lattice.node(fb, &mut xb);
                            for a in 0..d {
                                diff[a] = xa[a] - xb[a];
                            }
                            inner += self.spec.w.eval(&diff) * ub;
                        }
                        acc += da * inner;
                        for &(fb, db) in &self.delta_buf {
                            self.lattice.node(fb, &mut xb);
                            for a in 0..d {
                                diff[a] = xa[a] - xb[a];
                            }
                            acc += 0.5 * self.spec.w.eval(&diff) * da * db;
                        }
                    }
                    let cw = self.lattice.cell_weight();
                    acc * cw * cw
                }
            }
        };

        let d_pen = self.pen_scale
            * (pow_dist_p(squared_dist(znew, self.y.point(i)), self.spec.p) - self.disp[i]);

        d_internal + d_potential + d_interaction + d_pen
    }

    /// Commits the move of particle i to `znew`.
    fn apply(&mut self, i: usize, znew: &[f64]) {
        let old = self.z.point(i).to_vec();
        crate::energy::add_particle_window(
            &mut self.u,
            &old,
            self.kernel,
            self.h,
            &self.lattice,
            -self.inv_n,
        );
        crate::energy::add_particle_window(
            &mut self.u,
            znew,
            self.kernel,
            self.h,
            &self.lattice,
            self.inv_n,
        );
        self.v_particle[i] = self.spec.v.eval(znew);
        self.disp[i] = pow_dist_p(squared_dist(znew, self.y.point(i)), self.spec.p);
        self.z.set_point(i, znew);
    }
}

/// Sweep order for one step: particle indices sorted by anchor coordinates
/// (lexicographic). Keying the order on content rather than on index makes
/// the descent covariant under relabeling of the input particles.
fn sweep_order(y: &ParticleConfiguration) -> Vec<usize> {
    let mut order: Vec<usize> = (0..y.n()).collect();
    order.sort_by(|&a, &b| {
        y.point(a)
            .partial_cmp(y.point(b))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// One round-robin coordinate-descent pass structure: every particle (in
/// anchor order) scans the full grid, takes the best move improving by more
/// than theta (earliest grid index on ties), and the sweep repeats until a
/// full round moves nothing or the round budget runs out. Returns the number
/// of rounds.
fn grid_coordinate_descent(
    ev: &mut StepEvaluator,
    grid: &CoveringGrid,
    theta: f64,
    max_rounds: usize,
) -> usize {
    let order = ev.order.clone();
    let mut rounds = 0;
    loop {
        let mut moved = false;
        for &i in &order {
            let mut best: Option<(usize, f64)> = None;
            for g in 0..grid.len() {
                let cand = grid.point(g);
                if cand == ev.current(i) {
                    continue;
                }
                let delta = ev.candidate_delta(i, cand);
                if delta < -theta && best.map_or(true, |(_, bd)| delta < bd) {
                    best = Some((g, delta));
                }
            }
            if let Some((g, _)) = best {
                ev.apply(i, grid.point(g));
                moved = true;
            }
        }
        rounds += 1;
        if !moved || rounds >= max_rounds {
            return rounds;
        }
    }
}

/// Stencil search: each particle (in anchor order) tries z_i +/- r e_a and
/// takes the best strict improvement (earliest axis, positive before
/// negative, on ties). When a full sweep moves nothing the radius halves;
/// the search stops once it would drop below `r_min`. Returns the number of
/// rounds.
fn pattern_search(
    ev: &mut StepEvaluator,
    theta: f64,
    r_start: f64,
    r_min: f64,
    max_rounds: usize,
) -> usize {
    let order = ev.order.clone();
    let d = ev.z.dim();
    let mut r = r_start;
    let mut rounds = 0;
    let mut cand = vec![0.0; d];
    loop {
        let mut moved = false;
        for &i in &order {
            let mut best: Option<(Vec<f64>, f64)> = None;
            for a in 0..d {
                for sign in [1.0, -1.0] {
                    cand.copy_from_slice(ev.current(i));
                    cand[a] += sign * r;
                    let delta = ev.candidate_delta(i, &cand);
                    if delta < -theta && best.as_ref().map_or(true, |(_, bd)| delta < *bd) {
                        best = Some((cand.clone(), delta));
                    }
                }
            }
            if let Some((c, _)) = best {
                ev.apply(i, &c);
                moved = true;
            }
        }
        rounds += 1;
        if rounds >= max_rounds {
            return rounds;
        }
        if !moved {
            r *= 0.5;
            if r < r_min {
                return rounds;
            }
        }
    }
}

/// Everything recorded about one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Step index, starting at 1.
    pub step: usize,
    pub gamma: f64,
    pub y_before: ParticleConfiguration,
    pub y_after: ParticleConfiguration,
    /// Objective at the starting configuration: E(Y_{m-1}).
    pub psi_before: f64,
    /// Objective at the accepted configuration (equals psi_before when the
    /// step stays put).
    pub psi_after: f64,
    /// Free energy of the accepted configuration: E(Y_m).
    pub energy_after: f64,
    /// ((1/n) sum |y_after - y_before|^p)^{1/p}
    pub particle_distance: f64,
    pub moves_evaluated: u64,
    pub rounds: usize,
    /// False when the optimizer found nothing or the fresh re-evaluation
    /// rejected its candidate.
    pub improved: bool,
}

/// One relaxed minimizing-movement step from `y`.
///
/// The optimizer explores with incremental deltas, but the decision to keep
/// its candidate is made on energies recomputed from scratch: the candidate
/// replaces `y` only if psi(tau, y, candidate) < E(y) on the canonical
/// evaluation path. Otherwise the step stays at `y`.
pub fn relaxed_step(
    spec: &EnergySpec,
    kernel: &Kernel,
    params: &SchemeParams,
    step_index: usize,
    y: &ParticleConfiguration,
) -> Result<StepRecord> {
    params.validate(spec, kernel)?;
    if y.dim() != spec.domain.dim() {
        return Err(KdeflowError::Config(format!(
            "particles have dimension {} but the domain has {}",
            y.dim(),
            spec.domain.dim()
        )));
    }
    let gamma = params.gamma.value_at(step_index, params.tau)?;

    let meas_prev = KdeMeasure::new(y.clone(), params.h, kernel.clone())?;
    let phi_prev = spec.total_energy(&meas_prev, params.energy_mode)?;
    if !phi_prev.is_finite() {
        return Err(KdeflowError::InvalidStepOrigin);
    }

    let mut ev = StepEvaluator::new(spec, kernel, params, step_index, y)?;
    let rounds = match (params.optimizer.mode, &params.grid) {
        (OptimizerMode::GridCoordinateDescent, Some(grid)) => {
            grid_coordinate_descent(&mut ev, grid, params.optimizer.theta, params.optimizer.max_rounds)
        }
        (OptimizerMode::GridCoordinateDescent, None) => unreachable!("validated above"),
        (OptimizerMode::PatternSearch, grid) => {
            let d = spec.domain.dim();
            let r_min = params
                .optimizer
                .step_floor
                .or_else(|| grid.as_ref().map(|g| g.omega()))
                .unwrap_or(0.05 * params.h.powi(d as i32 + 1));
            pattern_search(
                &mut ev,
                params.optimizer.theta,
                params.h,
                r_min,
                params.optimizer.max_rounds,
            )
        }
    };
    let moves_evaluated = ev.moves_evaluated;
    let candidate = ev.z;

    let stay = |improved: bool| StepRecord {
        step: step_index,
        gamma,
        y_before: y.clone(),
        y_after: y.clone(),
        psi_before: phi_prev,
        psi_after: phi_prev,
        energy_after: phi_prev,
        particle_distance: 0.0,
        moves_evaluated,
        rounds,
        improved,
    };

    if candidate == *y {
        return Ok(stay(false));
    }

    // Fresh evaluation on the canonical path; accumulated optimizer deltas
    // play no part in acceptance.
    let pen = movement_penalty(params.tau, spec.p, y, &candidate)?;
    let meas_cand = KdeMeasure::new(candidate.clone(), params.h, kernel.clone())?;
    let energy_cand = spec.total_energy(&meas_cand, params.energy_mode)?;
    let psi_cand = energy_cand + pen;
    if !(psi_cand < phi_prev) {
        return Ok(stay(false));
    }

    let mean_disp_p = pen * spec.p * params.tau.powf(spec.p - 1.0);
    Ok(StepRecord {
        step: step_index,
        gamma,
        y_before: y.clone(),
        y_after: candidate,
        psi_before: phi_prev,
        psi_after: psi_cand,
        energy_after: energy_cand,
        particle_distance: mean_disp_p.powf(1.0 / spec.p),
        moves_evaluated,
        rounds,
        improved: true,
    })
}

/// A full run of the scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Starting configuration (grid-projected when the run is restricted).
    pub y0: ParticleConfiguration,
    pub tau: f64,
    pub records: Vec<StepRecord>,
    /// Step at which a grid-restricted run hit a fixed point, if it did.
    pub terminated_at: Option<usize>,
}

impl Trajectory {
    pub fn final_config(&self) -> &ParticleConfiguration {
        self.records.last().map(|r| &r.y_after).unwrap_or(&self.y0)
    }

    /// E(Y_0), E(Y_1), ..., one entry per configuration visited.
    pub fn energy_trace(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.records.len() + 1);
        if let Some(first) = self.records.first() {
            out.push(first.psi_before);
        }
        for r in &self.records {
            out.push(r.energy_after);
        }
        out
    }
}

/// Runs ceil(horizon / tau) steps from `y0`.
///
/// Grid-restricted runs project the start onto the grid and stop early at
/// the first step that fails to move (a fixed point of the sweep; every
/// later step would stay put too). Each record is checked against the
/// descent inequalities before the run continues.
pub fn run_scheme(
    spec: &EnergySpec,
    kernel: &Kernel,
    params: &SchemeParams,
    y0: &ParticleConfiguration,
    horizon: f64,
) -> Result<Trajectory> {
    params.validate(spec, kernel)?;
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(KdeflowError::Config(format!(
            "horizon: must be nonnegative and finite, got {horizon}"
        )));
    }
    let mut y = y0.clone();
    if let Some(grid) = &params.grid {
        for i in 0..y.n() {
            let snapped = project_to_grid(y0.point(i), grid).to_vec();
            y.set_point(i, &snapped);
        }
    }
    if !y.inside(&spec.domain) {
        return Err(KdeflowError::InvalidStepOrigin);
    }
    let steps = (horizon / params.tau).ceil() as usize;
    let mut records = Vec::with_capacity(steps);
    let mut terminated_at = None;
    let start = y.clone();
    for m in 1..=steps {
        let rec = relaxed_step(spec, kernel, params, m, &y)?;
        if !(rec.psi_after <= rec.psi_before) || !(rec.energy_after <= rec.psi_after) {
            return Err(KdeflowError::Invariant(format!(
                "step {m}: energy {} / objective {} / previous energy {} break the descent chain",
                rec.energy_after, rec.psi_after, rec.psi_before
            )));
        }
        let improved = rec.improved;
        y = rec.y_after.clone();
        records.push(rec);
        if params.grid.is_some() && !improved {
            terminated_at = Some(m);
            break;
        }
    }
    Ok(Trajectory { y0: start, tau: params.tau, records, terminated_at })
}

/// Brute-force minimization of the step objective over all grid placements.
#[derive(Clone, Debug)]
pub struct ExhaustiveResult {
    pub minimizer: ParticleConfiguration,
    pub value: f64,
    pub evaluated: u64,
}

/// Enumerates every assignment of the n particles to grid points (grid
/// point count to the power n candidates) and returns the exact minimizer
/// of psi. `include_anchor` additionally scores staying at `y`, which any
/// valid step may do. Refuses instances whose candidate count exceeds
/// `max_candidates`.
pub fn exhaustive_min_psi(
    spec: &EnergySpec,
    kernel: &Kernel,
    tau: f64,
    h: f64,
    mode: EnergyMode,
    y: &ParticleConfiguration,
    grid: &CoveringGrid,
    include_anchor: bool,
    max_candidates: f64,
) -> Result<ExhaustiveResult> {
    let n = y.n();
    let count = (grid.len() as f64).powi(n as i32);
    if !(count <= max_candidates) {
        return Err(KdeflowError::OracleBudget { candidates: count, max: max_candidates });
    }
    let mut best_cfg: Option<ParticleConfiguration> = None;
    let mut best_val = f64::INFINITY;
    let mut evaluated = 0u64;
    if include_anchor {
        best_val = psi(spec, kernel, h, mode, tau, y, y)?;
        best_cfg = Some(y.clone());
        evaluated += 1;
    }
    let mut idx = vec![0usize; n];
    let mut z = y.clone();
    loop {
        for (i, &g) in idx.iter().enumerate() {
            z.set_point(i, grid.point(g));
        }
        let val = psi(spec, kernel, h, mode, tau, y, &z)?;
        evaluated += 1;
        if val < best_val || best_cfg.is_none() {
            best_val = val;
            best_cfg = Some(z.clone());
        }
        // odometer: last particle fastest
        let mut i = n;
        loop {
            if i == 0 {
                let minimizer = best_cfg.expect("at least one candidate was scored");
                return Ok(ExhaustiveResult { minimizer, value: best_val, evaluated });
            }
            i -= 1;
            idx[i] += 1;
            if idx[i] < grid.len() {
                break;
            }
            idx[i] = 0;
        }
    }
}

/// Parameters the default schedule derives from the step size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefaultSchedule {
    pub kappa: f64,
    /// Particle count, kept in floating point: steep exponents push it far
    /// beyond anything runnable, and the admissibility checker only needs
    /// its magnitude.
    pub n: f64,
    pub h: f64,
    pub omega: f64,
    pub gamma: f64,
}

/// The default parameter ladder: kappa = max(13, 4dp + 1), n = ceil(tau^-kappa),
/// h = n^{-1/(4d)}, omega = 0.05 h^{d+1}, gamma = tau^{3/2}.
pub fn default_schedule(tau: f64, d: usize, p: f64) -> Result<DefaultSchedule> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(KdeflowError::Config(format!(
            "tau: the default schedule needs tau in (0, 1), got {tau}"
        )));
    }
    if d == 0 {
        return Err(KdeflowError::Config("d: dimension must be positive".into()));
    }
    if !(p.is_finite() && p > 1.0) {
        return Err(KdeflowError::Config(format!("p: exponent must exceed 1, got {p}")));
    }
    let kappa = 13f64.max(4.0 * d as f64 * p + 1.0);
    let raw = tau.powf(-kappa);
    // Power-function noise below a relative epsilon must not bump the count
    // past an integer value the exact power would hit.
    let n = if (raw - raw.round()).abs() <= raw * 1e-12 { raw.round() } else { raw.ceil() };
    let h = n.powf(-1.0 / (4.0 * d as f64));
    Ok(DefaultSchedule {
        kappa,
        n,
        h,
        omega: 0.05 * h.powi(d as i32 + 1),
        gamma: tau.powf(1.5),
    })
}

/// One rung of a schedule ladder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePoint {
    pub tau: f64,
    pub n: f64,
    pub h: f64,
    pub omega: Option<f64>,
    pub gamma: f64,
}

impl SchedulePoint {
    pub fn from_default(tau: f64, d: usize, p: f64) -> Result<SchedulePoint> {
        let s = default_schedule(tau, d, p)?;
        Ok(SchedulePoint { tau, n: s.n, h: s.h, omega: Some(s.omega), gamma: s.gamma })
    }
}

/// Verdict for one admissibility condition along the ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub values: Vec<f64>,
    /// Strictly decreasing at every rung.
    pub pairwise_decreasing: bool,
    /// Last value below the first; the verdict for decay conditions, since
    /// slowly-varying factors can lift a single rung without changing the
    /// limit.
    pub net_decrease: bool,
    /// Least-squares slope of ln(value) against ln(tau); positive means the
    /// value vanishes with the step size. None when a value is nonpositive
    /// or not finite.
    pub fitted_exponent: Option<f64>,
    pub passed: bool,
}

fn decay_condition(name: &str, taus: &[f64], values: Vec<f64>) -> ConditionReport {
    let finite = values.iter().all(|v| v.is_finite());
    let pairwise = finite && values.windows(2).all(|w| w[1] < w[0]);
    let net = finite && values[values.len() - 1] < values[0];
    let fitted = if finite && values.iter().all(|&v| v > 0.0) {
        let lx: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
        let ly: Vec<f64> = values.iter().map(|v| v.ln()).collect();
        Some(ls_slope(&lx, &ly))
    } else {
        None
    };
    ConditionReport {
        name: name.into(),
        values,
        pairwise_decreasing: pairwise,
        net_decrease: net,
        fitted_exponent: fitted,
        passed: net,
    }
}

/// Full admissibility report for a schedule ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub points: Vec<SchedulePoint>,
    /// True when the density-capped variant of the conditions was checked.
    pub capped: bool,
    pub conditions: Vec<ConditionReport>,
    pub pass: bool,
}

/// Checks the decay conditions a schedule must satisfy as tau -> 0, on a
/// finite ladder of rungs with strictly decreasing step sizes:
///
/// - bandwidth_decay: h / tau^p
/// - noise_decay: ln(1/h) / (tau^6 n h^{2d})
/// - modulus_decay: (1/tau) f_M(sqrt(ln(1/h) / (n h^{2d}))), where f_M is
///   the concave modulus of the internal law on [0, M] and M = sup K / h^d
/// - gamma_decay: gamma / tau
/// - grid_ratio: omega / h^{d+1} stays at or below 0.05 (only when every
///   rung carries omega)
///
/// With a density cap the mixture density is bounded by the cap instead of
/// the kernel sup, which relaxes two conditions: noise_decay and the
/// modulus argument replace n h^{2d} by n h^d, and the modulus is taken on
/// [0, M_bar].
pub fn check_schedule(
    law: &InternalEnergyLaw,
    kernel: &Kernel,
    d: usize,
    p: f64,
    points: &[SchedulePoint],
    cap_bound: Option<f64>,
) -> Result<ScheduleReport> {
    if points.len() < 2 {
        return Err(KdeflowError::Config(
            "schedule ladder: need at least two rungs to judge decay".into(),
        ));
    }
    for w in points.windows(2) {
        if !(w[1].tau < w[0].tau) {
            return Err(KdeflowError::Config(
                "schedule ladder: step sizes must strictly decrease".into(),
            ));
        }
    }
    if let Some(mb) = cap_bound {
        if !(mb.is_finite() && mb > 0.0) {
            return Err(KdeflowError::Config(format!(
                "density_cap.M_bar: must be positive and finite, got {mb}"
            )));
        }
    }
    for pt in points {
        if !(pt.tau.is_finite() && pt.tau > 0.0) {
            return Err(KdeflowError::Config(format!("schedule ladder: bad tau {}", pt.tau)));
        }
        if !(pt.n.is_finite() && pt.n >= 1.0) {
            return Err(KdeflowError::Config(format!(
                "schedule ladder: particle count must be at least 1, got {}",
                pt.n
            )));
        }
        if !(pt.h > 0.0 && pt.h < 0.9) {
            return Err(KdeflowError::Config(format!(
                "schedule ladder: bandwidth must lie in (0, 0.9), got {}",
                pt.h
            )));
        }
        if !(pt.gamma.is_finite() && pt.gamma > 0.0) {
            return Err(KdeflowError::Config(format!(
                "schedule ladder: gamma must be positive, got {}",
                pt.gamma
            )));
        }
        if let Some(om) = pt.omega {
            if !(om.is_finite() && om > 0.0) {
                return Err(KdeflowError::Config(format!(
                    "schedule ladder: omega must be positive, got {om}"
                )));
            }
        }
    }

    let taus: Vec<f64> = points.iter().map(|pt| pt.tau).collect();
    let dd = d as f64;
    // Exponent of h in the concentration denominator: 2d uncapped, d capped.
    let conc_pow = if cap_bound.is_some() { dd } else { 2.0 * dd };

    let mut conditions = Vec::new();
    conditions.push(decay_condition(
        "bandwidth_decay",
        &taus,
        points.iter().map(|pt| pt.h / pt.tau.powf(p)).collect(),
    ));
    conditions.push(decay_condition(
        "noise_decay",
        &taus,
        points
            .iter()
            .map(|pt| (1.0 / pt.h).ln() / (pt.tau.powi(6) * pt.n * pt.h.powf(conc_pow)))
            .collect(),
    ));
    let mut modulus_values = Vec::with_capacity(points.len());
    for pt in points {
        let m_bound = match cap_bound {
            Some(mb) => mb,
            None => kernel.sup_norm() / pt.h.powf(dd),
        };
        let arg = ((1.0 / pt.h).ln() / (pt.n * pt.h.powf(conc_pow))).sqrt();
        modulus_values.push(modulus(law, m_bound, arg)? / pt.tau);
    }
    conditions.push(decay_condition("modulus_decay", &taus, modulus_values));
    conditions.push(decay_condition(
        "gamma_decay",
        &taus,
        points.iter().map(|pt| pt.gamma / pt.tau).collect(),
    ));
    if points.iter().all(|pt| pt.omega.is_some()) {
        let values: Vec<f64> = points
            .iter()
            .map(|pt| pt.omega.unwrap() / pt.h.powf(dd + 1.0))
            .collect();
        let mut cond = decay_condition("grid_ratio", &taus, values);
        // A ratio condition: bounded, not vanishing.
        cond.passed = cond.values.iter().all(|&v| v.is_finite() && v <= 0.05 * (1.0 + 1e-9));
        conditions.push(cond);
    }
    let pass = conditions.iter().all(|c| c.passed);
    Ok(ScheduleReport { points: points.to_vec(), capped: cap_bound.is_some(), conditions, pass })
}
