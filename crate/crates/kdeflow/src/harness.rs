//! JSON-configured experiment harness.
//!
//! Everything the command line and the foreign-function surface do funnels
//! through here: a config file describes one run, [`resolve`] turns it into
//! validated solver inputs, [`run_experiment`] executes the scheme and writes
//! the artifact set, and the remaining entry points wrap schedule checks,
//! oracle comparisons, coupling-bound sweeps, and SVG charts.
//!
//! Artifact contract: with a fixed seed, `trajectory.jsonl`, the CSV files,
//! and `resolved_config.json` are byte-identical across invocations. Wall
//! time, the only nondeterministic quantity, is confined to `summary.json`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{build_grid, project_to_grid, Domain};
use crate::energy::{
    mixture_on_lattice, EnergyMode, EnergySpec, Interaction, InternalEnergyLaw, Lattice, Potential,
};
use crate::error::{KdeflowError, Result};
use crate::kde::{
    sample_initial_with, InitialDensitySpec, KdeMeasure, ParticleConfiguration, SamplingStrategy,
};
use crate::kernel::{Kernel, KernelFamily};
use crate::numeric::{ls_slope, parallel_map_indexed, thread_count};
use crate::scheme::{
    check_schedule, default_schedule, exhaustive_min_psi, relaxed_step, run_scheme, DensityCap,
    GammaSchedule, OptimizerMode, OptimizerParams, SchedulePoint, ScheduleReport, SchemeParams,
    StepRecord, Trajectory,
};

/// Default-schedule particle counts above this are refused for runs; the
/// closed-form ladder is meant for admissibility checks, not for execution.
pub const MAX_RUNNABLE_PARTICLES: f64 = 1e7;

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

/// One experiment, as written in a JSON config file. Unknown keys are
/// rejected so typos fail loudly instead of silently using defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: Domain,
    pub kernel: KernelConfig,
    pub energy: EnergyConfig,
    pub initial: InitialDensitySpec,
    /// Layout of the draws behind the initial sample.
    #[serde(default)]
    pub sampling: SamplingStrategy,
    pub seed: u64,
    /// Step size of the movement scheme.
    pub tau: f64,
    /// Final time; the run takes ceil(horizon / tau) steps.
    pub horizon: f64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub density_cap: Option<DensityCapConfig>,
    #[serde(default = "default_energy_mode")]
    pub energy_mode: EnergyMode,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Snapshot every this many steps; defaults to about 100 snapshots.
    #[serde(default)]
    pub snapshot_stride: Option<usize>,
    /// Lattice pitch of the exported density; defaults to h / 4.
    #[serde(default)]
    pub export_pitch: Option<f64>,
}

fn default_energy_mode() -> EnergyMode {
    EnergyMode::ParticleSum
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamily,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    /// Internal-energy integrand family.
    pub f: InternalEnergyLaw,
    #[serde(default)]
    pub v: Option<PotentialConfig>,
    #[serde(default)]
    pub w: Option<InteractionConfig>,
    /// Movement penalty exponent.
    #[serde(default = "default_penalty_exponent")]
    pub p: f64,
    #[serde(default)]
    pub quadrature: Option<QuadratureConfig>,
    /// Optional tighter Lipschitz constant for the potential.
    #[serde(default, rename = "L_V")]
    pub l_v: Option<f64>,
    /// Optional tighter Lipschitz constant for the interaction.
    #[serde(default, rename = "L_W")]
    pub l_w: Option<f64>,
}

fn default_penalty_exponent() -> f64 {
    2.0
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    pub pitch: f64,
}

/// Potentials expressible in config files; code can additionally plug in
/// arbitrary function pointers through [`EnergySpec`] directly.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialConfig {
    Zero,
    Quadratic { center: Vec<f64>, coeff: f64 },
    DoubleWell { a: f64, b: f64 },
}

impl PotentialConfig {
    pub fn to_potential(&self) -> Potential {
        match self {
            PotentialConfig::Zero => Potential::Zero,
            PotentialConfig::Quadratic { center, coeff } => Potential::Quadratic {
                center: center.clone(),
                coeff: *coeff,
            },
            PotentialConfig::DoubleWell { a, b } => Potential::DoubleWell { a: *a, b: *b },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InteractionConfig {
    None,
    Quadratic { coeff: f64 },
}

impl InteractionConfig {
    pub fn to_interaction(&self) -> Interaction {
        match self {
            InteractionConfig::None => Interaction::None,
            InteractionConfig::Quadratic { coeff } => Interaction::Quadratic { coeff: *coeff },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// n, h, omega, gamma from the closed-form ladder in tau.
    #[default]
    Default,
    /// n and h set by hand; omega and gamma overrides optional.
    Explicit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub mode: ScheduleMode,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub h: Option<f64>,
    /// Covering-grid spacing; setting it opts into grid-restricted moves.
    #[serde(default)]
    pub omega: Option<f64>,
    /// Per-step slack gamma_m = tau^exponent.
    #[serde(default = "default_gamma_exponent")]
    pub gamma_exponent: f64,
    /// Explicit per-step slacks; overrides the exponent when present.
    #[serde(default)]
    pub gamma_values: Option<Vec<f64>>,
}

fn default_gamma_exponent() -> f64 {
    1.5
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            mode: ScheduleMode::Default,
            n: None,
            h: None,
            omega: None,
            gamma_exponent: default_gamma_exponent(),
            gamma_values: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Defaults to grid coordinate descent when schedule.omega is set and
    /// to pattern search otherwise.
    #[serde(default)]
    pub mode: Option<OptimizerMode>,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default)]
    pub step_floor: Option<f64>,
}

fn default_theta() -> f64 {
    OptimizerParams::default_theta()
}

fn default_max_rounds() -> usize {
    OptimizerParams::default_max_rounds()
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            mode: None,
            theta: default_theta(),
            max_rounds: default_max_rounds(),
            step_floor: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityCapConfig {
    /// Bound assumed on the initial mixture density.
    #[serde(rename = "M")]
    pub m: f64,
    /// Cap the scheme enforces from there on.
    #[serde(rename = "M_bar")]
    pub m_bar: f64,
    /// Per-step headroom growth.
    #[serde(default)]
    pub eps_tau: f64,
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

/// A config joined with every derived object the solver needs.
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    pub config: RunConfig,
    pub spec: EnergySpec,
    pub kernel: Kernel,
    pub params: SchemeParams,
    pub n: usize,
    pub steps: usize,
    pub snapshot_stride: usize,
    pub export_pitch: f64,
    /// Ladder exponent, present only in default schedule mode.
    pub kappa: Option<f64>,
    /// Non-fatal observations surfaced to the user and the resolved echo.
    pub warnings: Vec<String>,
}

/// Validates a config and derives the solver inputs.
pub fn resolve(config: &RunConfig) -> Result<ResolvedRun> {
    let d = config.domain.dim();
    let kernel = Kernel::new(config.kernel.family, d)?;
    let v = config
        .energy
        .v
        .as_ref()
        .map(PotentialConfig::to_potential)
        .unwrap_or(Potential::Zero);
    let w = config
        .energy
        .w
        .as_ref()
        .map(InteractionConfig::to_interaction)
        .unwrap_or(Interaction::None);
    let spec = EnergySpec::new(
        config.energy.f.clone(),
        v,
        w,
        config.domain.clone(),
        config.energy.p,
        config.energy.quadrature.map(|q| q.pitch),
        config.energy.l_v,
        config.energy.l_w,
    )?;
    if !(config.tau.is_finite() && config.tau > 0.0) {
        return Err(KdeflowError::Config(format!(
            "tau: step size must be positive and finite, got {}",
            config.tau
        )));
    }
    if !(config.horizon.is_finite() && config.horizon >= 0.0) {
        return Err(KdeflowError::Config(format!(
            "horizon: must be nonnegative and finite, got {}",
            config.horizon
        )));
    }

    let mut warnings = Vec::new();
    let sched = &config.schedule;
    let (n, h, default_omega, kappa) = match sched.mode {
        ScheduleMode::Default => {
            if sched.n.is_some() || sched.h.is_some() {
                return Err(KdeflowError::Config(
                    "schedule: n and h are computed in default mode; set mode = \"explicit\" to choose them"
                        .into(),
                ));
            }
            let ds = default_schedule(config.tau, d, config.energy.p)?;
            if ds.n > MAX_RUNNABLE_PARTICLES {
                return Err(KdeflowError::Config(format!(
                    "schedule: the default ladder asks for n = ceil(tau^-kappa) = {:.3e} particles at tau = {}, \
                     beyond the runnable limit {:.0e}; keep default mode for schedule checks and set \
                     mode = \"explicit\" with your own n and h to actually run",
                    ds.n, config.tau, MAX_RUNNABLE_PARTICLES
                )));
            }
            (ds.n as usize, ds.h, Some(ds.omega), Some(ds.kappa))
        }
        ScheduleMode::Explicit => {
            let n = sched.n.ok_or_else(|| {
                KdeflowError::Config("schedule.n: required in explicit mode".into())
            })?;
            let h = sched.h.ok_or_else(|| {
                KdeflowError::Config("schedule.h: required in explicit mode".into())
            })?;
            if n == 0 {
                return Err(KdeflowError::Config(
                    "schedule.n: need at least one particle".into(),
                ));
            }
            (n, h, None, None)
        }
    };

    let mode = config.optimizer.mode.unwrap_or(if sched.omega.is_some() {
        OptimizerMode::GridCoordinateDescent
    } else {
        OptimizerMode::PatternSearch
    });
    if sched.omega.is_some() && mode == OptimizerMode::PatternSearch {
        return Err(KdeflowError::Config(
            "schedule.omega restricts moves to a covering grid, which only the \
             grid_coordinate_descent optimizer honors; drop omega or change optimizer.mode"
                .into(),
        ));
    }
    let grid = match mode {
        OptimizerMode::GridCoordinateDescent => {
            let omega = sched.omega.or(default_omega).ok_or_else(|| {
                KdeflowError::Config(
                    "optimizer.mode = grid_coordinate_descent needs schedule.omega".into(),
                )
            })?;
            Some(build_grid(&config.domain, omega)?)
        }
        OptimizerMode::PatternSearch => None,
    };

    let steps = (config.horizon / config.tau).ceil() as usize;
    let gamma = match &sched.gamma_values {
        Some(values) => {
            if values.len() < steps {
                return Err(KdeflowError::Config(format!(
                    "schedule.gamma_values: {} budgets for {steps} steps",
                    values.len()
                )));
            }
            GammaSchedule::Explicit {
                values: values.clone(),
            }
        }
        None => {
            if sched.gamma_exponent <= 1.0 {
                warnings.push(format!(
                    "schedule.gamma_exponent = {}: budgets tau^e with e <= 1 do not vanish \
                     relative to the step size, so the descent guarantee degrades as tau shrinks",
                    sched.gamma_exponent
                ));
            }
            GammaSchedule::Uniform {
                exponent: sched.gamma_exponent,
            }
        }
    };

    let optimizer = OptimizerParams {
        mode,
        theta: config.optimizer.theta,
        max_rounds: config.optimizer.max_rounds,
        step_floor: config.optimizer.step_floor,
    };
    let cap = config.density_cap.map(|c| DensityCap {
        m_init: c.m,
        m_bar: c.m_bar,
        eps_tau: c.eps_tau,
    });
    let params = SchemeParams {
        tau: config.tau,
        h,
        gamma,
        optimizer,
        energy_mode: config.energy_mode,
        grid,
        cap,
    };
    params.validate(&spec, &kernel)?;

    let snapshot_stride = match config.snapshot_stride {
        Some(0) => {
            return Err(KdeflowError::Config(
                "snapshot_stride: must be at least 1".into(),
            ))
        }
        Some(s) => s,
        None => (steps.div_ceil(100)).max(1),
    };
    let export_pitch = match config.export_pitch {
        Some(p) if !(p.is_finite() && p > 0.0) => {
            return Err(KdeflowError::Config(format!(
                "export_pitch: must be positive, got {p}"
            )))
        }
        Some(p) => p,
        None => h / 4.0,
    };
    if d > 2 {
        warnings.push(
            "density export covers dimensions 1 and 2; this run writes particle snapshots only"
                .to_string(),
        );
    }

    Ok(ResolvedRun {
        config: config.clone(),
        spec,
        kernel,
        params,
        n,
        steps,
        snapshot_stride,
        export_pitch,
        kappa,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Run execution and artifacts
// ---------------------------------------------------------------------------

/// Slim per-step record written to `trajectory.jsonl` and `diagnostics.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub gamma: f64,
    pub psi_before: f64,
    pub psi_after: f64,
    pub energy_after: f64,
    pub particle_distance: f64,
    pub moves_evaluated: u64,
    pub rounds: usize,
    pub improved: bool,
}

impl StepDiagnostics {
    fn from_record(rec: &StepRecord) -> StepDiagnostics {
        StepDiagnostics {
            step: rec.step,
            gamma: rec.gamma,
            psi_before: rec.psi_before,
            psi_after: rec.psi_after,
            energy_after: rec.energy_after,
            particle_distance: rec.particle_distance,
            moves_evaluated: rec.moves_evaluated,
            rounds: rec.rounds,
            improved: rec.improved,
        }
    }
}

/// What a finished run left on disk, plus its headline numbers.
#[derive(Clone, Debug, Serialize)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub steps_run: usize,
    pub terminated_at: Option<usize>,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub mass_defect: f64,
    pub sane: bool,
    pub snapshot_steps: Vec<usize>,
    pub wall_time_ms: u128,
}

/// Runs one experiment and writes the artifact set into the output
/// directory: `resolved_config.json`, `trajectory.jsonl`, `diagnostics.csv`,
/// particle and density snapshots, and `summary.json`. A run whose final
/// state fails the mass sanity check additionally gets a `FAILED` marker
/// file; the artifacts still land so the failure can be inspected.
pub fn run_experiment(config: &RunConfig, out_override: Option<&Path>) -> Result<RunArtifacts> {
    let resolved = resolve(config)?;
    let out: PathBuf = match out_override {
        Some(p) => p.to_path_buf(),
        None => config.out_dir.clone().ok_or_else(|| {
            KdeflowError::Config("out_dir: set it in the config or pass --out".into())
        })?,
    };
    fs::create_dir_all(&out)?;

    let start = std::time::Instant::now();
    let y0 = sample_initial_with(
        &config.initial,
        &config.domain,
        resolved.n,
        config.seed,
        config.sampling,
    )?;
    write_resolved_config(&out, &resolved)?;

    let traj = run_scheme(
        &resolved.spec,
        &resolved.kernel,
        &resolved.params,
        &y0,
        config.horizon,
    )?;

    write_trajectory(&out, &traj)?;
    write_diagnostics_csv(&out, &traj)?;
    let snapshot_steps = snapshot_schedule(traj.records.len(), resolved.snapshot_stride);
    let export_lattice = if config.domain.dim() <= 2 {
        Some(Lattice::covering(
            &config.domain.bounding_box(),
            resolved.export_pitch,
        )?)
    } else {
        None
    };
    // The projected start, not the raw sample: snapshots must chain exactly.
    let y_start = traj
        .records
        .first()
        .map(|r| r.y_before.clone())
        .unwrap_or_else(|| projected_start(&resolved, &y0));
    for &s in &snapshot_steps {
        let conf = if s == 0 {
            &y_start
        } else {
            &traj.records[s - 1].y_after
        };
        write_particles_csv(&out, s, conf)?;
        if let Some(lat) = &export_lattice {
            let u = mixture_on_lattice(conf, &resolved.kernel, resolved.params.h, lat);
            write_density_csv(&out, s, lat, &u)?;
        }
    }

    let final_conf = if let Some(rec) = traj.records.last() {
        rec.y_after.clone()
    } else {
        y_start.clone()
    };
    let initial_energy = match traj.records.first() {
        Some(rec) => rec.psi_before,
        None => {
            let meas = KdeMeasure::new(
                y_start.clone(),
                resolved.params.h,
                resolved.kernel.clone(),
            )?;
            resolved.spec.total_energy(&meas, config.energy_mode)?
        }
    };
    let final_energy = traj
        .records
        .last()
        .map(|r| r.energy_after)
        .unwrap_or(initial_energy);

    let mass_defect = mixture_mass_defect(
        &final_conf,
        &resolved.kernel,
        resolved.params.h,
        &config.domain,
    )?;
    // A jump kernel leaves O(pitch) mass in the cells straddling its
    // support edge on any fixed midpoint lattice; Lipschitz kernels do not.
    let mass_tol = if resolved.kernel.lipschitz().is_some() {
        1e-3
    } else {
        2e-2
    };
    let sane = mass_defect <= mass_tol && initial_energy.is_finite() && final_energy.is_finite();
    let wall_time_ms = start.elapsed().as_millis();

    let artifacts = RunArtifacts {
        out_dir: out.clone(),
        steps_run: traj.records.len(),
        terminated_at: traj.terminated_at,
        initial_energy,
        final_energy,
        mass_defect,
        sane,
        snapshot_steps,
        wall_time_ms,
    };
    write_summary(&out, &artifacts, mass_tol)?;
    if !sane {
        fs::write(
            out.join("FAILED"),
            format!(
                "mass defect {mass_defect:e} exceeds {mass_tol:e}, or a non-finite energy; \
                 see summary.json\n"
            ),
        )?;
    }
    Ok(artifacts)
}

fn projected_start(resolved: &ResolvedRun, y0: &ParticleConfiguration) -> ParticleConfiguration {
    let mut y = y0.clone();
    if let Some(grid) = &resolved.params.grid {
        for i in 0..y.n() {
            let snapped = project_to_grid(y.point(i), grid).to_vec();
            y.set_point(i, &snapped);
        }
    }
    y
}

/// Steps at which snapshots are written: start, every stride-th step, end.
fn snapshot_schedule(steps_run: usize, stride: usize) -> Vec<usize> {
    let mut set = BTreeSet::new();
    set.insert(0);
    let mut s = stride;
    while s <= steps_run {
        set.insert(s);
        s += stride;
    }
    set.insert(steps_run);
    set.into_iter().collect()
}

/// Quadrature mass of the mixture on a fine dedicated lattice. The true
/// mass is exactly one, so the defect measures bookkeeping and quadrature
/// health, nothing about the model.
fn mixture_mass_defect(
    conf: &ParticleConfiguration,
    kernel: &Kernel,
    h: f64,
    domain: &Domain,
) -> Result<f64> {
    let mut bbox = domain.bounding_box();
    for b in &mut bbox {
        b[0] -= h;
        b[1] += h;
    }
    let lat = Lattice::covering(&bbox, h / 32.0)?;
    let u = mixture_on_lattice(conf, kernel, h, &lat);
    let mass: f64 = u.iter().sum::<f64>() * lat.cell_weight();
    Ok((mass - 1.0).abs())
}

fn write_resolved_config(out: &Path, resolved: &ResolvedRun) -> Result<()> {
    let grid_points = resolved.params.grid.as_ref().map(|g| g.len());
    let omega = resolved.params.grid.as_ref().map(|g| g.omega());
    let doc = serde_json::json!({
        "config": resolved.config,
        "resolved": {
            "n": resolved.n,
            "h": resolved.params.h,
            "tau": resolved.params.tau,
            "steps": resolved.steps,
            "kappa": resolved.kappa,
            "omega": omega,
            "grid_points": grid_points,
            "optimizer_mode": resolved.params.optimizer.mode,
            "energy_mode": resolved.config.energy_mode,
            "snapshot_stride": resolved.snapshot_stride,
            "export_pitch": resolved.export_pitch,
            "v_lipschitz": resolved.spec.v_lipschitz(),
            "w_lipschitz": resolved.spec.w_lipschitz(),
            "warnings": resolved.warnings,
        },
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(out.join("resolved_config.json"), text)?;
    Ok(())
}

fn write_trajectory(out: &Path, traj: &Trajectory) -> Result<()> {
    let mut text = String::new();
    for rec in &traj.records {
        text.push_str(&serde_json::to_string(&StepDiagnostics::from_record(rec))?);
        text.push('\n');
    }
    fs::write(out.join("trajectory.jsonl"), text)?;
    Ok(())
}

fn write_diagnostics_csv(out: &Path, traj: &Trajectory) -> Result<()> {
    let mut text = String::from(
        "step,gamma,psi_before,psi_after,energy_after,particle_distance,moves_evaluated,rounds,improved\n",
    );
    for rec in &traj.records {
        let d = StepDiagnostics::from_record(rec);
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{}",
            d.step,
            d.gamma,
            d.psi_before,
            d.psi_after,
            d.energy_after,
            d.particle_distance,
            d.moves_evaluated,
            d.rounds,
            d.improved
        );
    }
    fs::write(out.join("diagnostics.csv"), text)?;
    Ok(())
}

fn write_particles_csv(out: &Path, step: usize, conf: &ParticleConfiguration) -> Result<()> {
    let d = conf.dim();
    let mut text = String::new();
    for a in 0..d {
        if a > 0 {
            text.push(',');
        }
        let _ = write!(text, "x{a}");
    }
    text.push('\n');
    for p in conf.iter_points() {
        for (a, v) in p.iter().enumerate() {
            if a > 0 {
                text.push(',');
            }
            let _ = write!(text, "{v}");
        }
        text.push('\n');
    }
    fs::write(out.join(format!("particles_{step:05}.csv")), text)?;
    Ok(())
}

fn write_density_csv(out: &Path, step: usize, lat: &Lattice, u: &[f64]) -> Result<()> {
    let d = lat.dim();
    let mut text = String::new();
    for a in 0..d {
        let _ = write!(text, "x{a},");
    }
    text.push_str("density\n");
    let mut node = vec![0.0; d];
    for (flat, val) in u.iter().enumerate() {
        lat.node(flat, &mut node);
        for v in &node {
            let _ = write!(text, "{v},");
        }
        let _ = writeln!(text, "{val}");
    }
    fs::write(out.join(format!("density_{step:05}.csv")), text)?;
    Ok(())
}

fn write_summary(out: &Path, artifacts: &RunArtifacts, mass_tol: f64) -> Result<()> {
    let doc = serde_json::json!({
        "steps_run": artifacts.steps_run,
        "terminated_at": artifacts.terminated_at,
        "initial_energy": artifacts.initial_energy,
        "final_energy": artifacts.final_energy,
        "energy_drop": artifacts.initial_energy - artifacts.final_energy,
        "mass_defect": artifacts.mass_defect,
        "mass_tolerance": mass_tol,
        "sane": artifacts.sane,
        "snapshot_steps": artifacts.snapshot_steps,
        "wall_time_ms": artifacts.wall_time_ms,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(out.join("summary.json"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Schedule check requests
// ---------------------------------------------------------------------------

/// JSON request for a schedule admissibility check. Either `taus` builds
/// the default ladder at those step sizes, or `points` spells out every
/// rung by hand.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleCheckRequest {
    pub law: InternalEnergyLaw,
    pub kernel: KernelConfig,
    pub d: usize,
    #[serde(default = "default_penalty_exponent")]
    pub p: f64,
    #[serde(default)]
    pub taus: Option<Vec<f64>>,
    #[serde(default)]
    pub points: Option<Vec<SchedulePointConfig>>,
    /// Density-cap bound; switches the checker to the capped conditions.
    #[serde(default)]
    pub cap_bound: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePointConfig {
    pub tau: f64,
    pub n: f64,
    pub h: f64,
    #[serde(default)]
    pub omega: Option<f64>,
    pub gamma: f64,
}

/// Runs a schedule check described by a JSON request string.
pub fn check_schedule_request(request: &str) -> Result<ScheduleReport> {
    let req: ScheduleCheckRequest = serde_json::from_str(request)?;
    let kernel = Kernel::new(req.kernel.family, req.d)?;
    let points: Vec<SchedulePoint> = match (&req.points, &req.taus) {
        (Some(points), _) => points
            .iter()
            .map(|p| SchedulePoint {
                tau: p.tau,
                n: p.n,
                h: p.h,
                omega: p.omega,
                gamma: p.gamma,
            })
            .collect(),
        (None, Some(taus)) => taus
            .iter()
            .map(|&tau| SchedulePoint::from_default(tau, req.d, req.p))
            .collect::<Result<_>>()?,
        (None, None) => {
            return Err(KdeflowError::Config(
                "schedule check: provide either taus or points".into(),
            ))
        }
    };
    check_schedule(&req.law, &kernel, req.d, req.p, &points, req.cap_bound)
}

/// Same as [`check_schedule_request`], returning the report as JSON text.
pub fn check_schedule_json(request: &str) -> Result<String> {
    let report = check_schedule_request(request)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    Ok(text)
}

// ---------------------------------------------------------------------------
// Oracle comparison
// ---------------------------------------------------------------------------

/// One relaxed step versus the exhaustive minimum over the same grid.
#[derive(Clone, Debug, Serialize)]
pub struct OracleStepReport {
    /// Objective value of the configuration the relaxed step kept.
    pub step_value: f64,
    /// Exhaustive minimum of the objective over all grid configurations.
    pub oracle_value: f64,
    /// step_value - oracle_value; nonnegative by construction.
    pub excess: f64,
    pub gamma: f64,
    pub within_budget: bool,
    pub candidates_evaluated: f64,
    pub moves_evaluated: u64,
}

/// Runs the first step of a grid-restricted config and compares it against
/// the exhaustive oracle. The oracle enumerates |grid|^n configurations, so
/// `budget` guards against accidentally astronomical requests.
pub fn oracle_step(config: &RunConfig, budget: f64) -> Result<OracleStepReport> {
    let resolved = resolve(config)?;
    let grid = resolved.params.grid.as_ref().ok_or_else(|| {
        KdeflowError::Config(
            "the oracle comparison needs a grid-restricted run; set schedule.omega".into(),
        )
    })?;
    let y0 = sample_initial_with(
        &config.initial,
        &config.domain,
        resolved.n,
        config.seed,
        config.sampling,
    )?;
    let y = projected_start(&resolved, &y0);
    let rec = relaxed_step(&resolved.spec, &resolved.kernel, &resolved.params, 1, &y)?;
    let ex = exhaustive_min_psi(
        &resolved.spec,
        &resolved.kernel,
        resolved.params.tau,
        resolved.params.h,
        config.energy_mode,
        &y,
        grid,
        true,
        budget,
    )?;
    let gamma = rec.gamma;
    let excess = rec.psi_after - ex.value;
    Ok(OracleStepReport {
        step_value: rec.psi_after,
        oracle_value: ex.value,
        excess,
        gamma,
        within_budget: excess <= gamma,
        candidates_evaluated: ex.evaluated as f64,
        moves_evaluated: rec.moves_evaluated,
    })
}

// ---------------------------------------------------------------------------
// Coupling-bound sweep
// ---------------------------------------------------------------------------

/// One sampled configuration in a bound sweep.
#[derive(Clone, Debug, Serialize)]
pub struct BoundCase {
    pub seed: u64,
    pub potential_gap: f64,
    pub potential_bound: f64,
    pub interaction_gap: f64,
    pub interaction_bound: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub cases: Vec<BoundCase>,
    pub all_hold: bool,
}

/// Verifies, on `cases` sampled configurations, that the particle-sum
/// potential and interaction values stay within the Lipschitz coupling
/// bound L h M_p^{1/p} of their integral counterparts. The integral side
/// carries midpoint quadrature error, so each case adds a margin estimated
/// from a pitch refinement; the analytic bound itself is not touched.
pub fn bound_check(config: &RunConfig, cases: usize, base_seed: u64) -> Result<BoundReport> {
    if cases == 0 {
        return Err(KdeflowError::Config(
            "bound check: need at least one case".into(),
        ));
    }
    let resolved = resolve(config)?;
    let h = resolved.params.h;
    let p = resolved.spec.p;
    let moment_term = h * resolved.kernel.moment(p).powf(1.0 / p);
    let v_bound = resolved.spec.v_lipschitz() * moment_term;
    let w_bound = resolved.spec.w_lipschitz() * moment_term;
    let base_pitch = resolved.spec.quad_pitch.unwrap_or(h / 4.0);
    let mut fine_spec = resolved.spec.clone();
    fine_spec.quad_pitch = Some(base_pitch / 2.0);

    let results = parallel_map_indexed(cases, thread_count(), |i| -> Result<BoundCase> {
        let seed = base_seed.wrapping_add(i as u64);
        let y = sample_initial_with(&config.initial, &config.domain, resolved.n, seed, config.sampling)?;
        let meas = KdeMeasure::new(y, h, resolved.kernel.clone())?;

        let v_psum = resolved.spec.potential_energy(&meas, EnergyMode::ParticleSum)?;
        let v_exact = resolved.spec.potential_energy(&meas, EnergyMode::Exact)?;
        let v_fine = fine_spec.potential_energy(&meas, EnergyMode::Exact)?;
        let v_margin = 4.0 * (v_exact - v_fine).abs() + 1e-9;
        let potential_gap = (v_psum - v_exact).abs();

        let w_psum = resolved.spec.interaction_energy(&meas, EnergyMode::ParticleSum)?;
        let w_exact = resolved.spec.interaction_energy(&meas, EnergyMode::Exact)?;
        let w_fine = fine_spec.interaction_energy(&meas, EnergyMode::Exact)?;
        let w_margin = 4.0 * (w_exact - w_fine).abs() + 1e-9;
        let interaction_gap = (w_psum - w_exact).abs();

        let holds = potential_gap <= v_bound + v_margin && interaction_gap <= w_bound + w_margin;
        Ok(BoundCase {
            seed,
            potential_gap,
            potential_bound: v_bound + v_margin,
            interaction_gap,
            interaction_bound: w_bound + w_margin,
            holds,
        })
    });
    let mut cases_out = Vec::with_capacity(results.len());
    for r in results {
        cases_out.push(r?);
    }
    let all_hold = cases_out.iter().all(|c| c.holds);
    Ok(BoundReport {
        cases: cases_out,
        all_hold,
    })
}

// ---------------------------------------------------------------------------
// SVG charts
// ---------------------------------------------------------------------------

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Fixed-precision significand formatting keeps chart output byte-stable.
fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    }
}

/// Renders a polyline chart. Log axes drop nonpositive values; callers are
/// expected to pass data that survives that.
fn render_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    log_x: bool,
    log_y: bool,
    series: &[Series],
) -> String {
    const W: f64 = 720.0;
    const H: f64 = 480.0;
    const L: f64 = 76.0;
    const R: f64 = 690.0;
    const T: f64 = 46.0;
    const B: f64 = 430.0;

    let tx = |x: f64| if log_x { x.log10() } else { x };
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            if (log_x && x <= 0.0) || (log_y && y <= 0.0) {
                continue;
            }
            if x.is_finite() && y.is_finite() {
                xs.push(tx(x));
                ys.push(ty(y));
            }
        }
    }
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let map_x = move |x: f64| L + (tx(x) - x0) / (x1 - x0) * (R - L);
    let map_y = move |y: f64| B - (ty(y) - y0) / (y1 - y0) * (B - T);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    );
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>",
        (L + R) / 2.0
    );
    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{L}\" y1=\"{B}\" x2=\"{R}\" y2=\"{B}\" stroke=\"black\"/>\
         <line x1=\"{L}\" y1=\"{T}\" x2=\"{L}\" y2=\"{B}\" stroke=\"black\"/>"
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let gx = x0 + f * (x1 - x0);
        let gy = y0 + f * (y1 - y0);
        let px = L + f * (R - L);
        let py = B - f * (B - T);
        let lx = if log_x { 10f64.powf(gx) } else { gx };
        let ly = if log_y { 10f64.powf(gy) } else { gy };
        let _ = writeln!(
            svg,
            "<line x1=\"{px:.2}\" y1=\"{B}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"#dddddd\"/>\
             <text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            T,
            B + 18.0,
            fmt_tick(lx)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{L}\" y1=\"{py:.2}\" x2=\"{R}\" y2=\"{py:.2}\" stroke=\"#dddddd\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            L - 6.0,
            py + 4.0,
            fmt_tick(ly)
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>",
        (L + R) / 2.0,
        B + 40.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{y_label}</text>",
        (T + B) / 2.0,
        (T + B) / 2.0
    );
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut pts = String::new();
        for &(x, y) in &s.points {
            if (log_x && x <= 0.0) || (log_y && y <= 0.0) || !x.is_finite() || !y.is_finite() {
                continue;
            }
            let _ = write!(pts, "{:.2},{:.2} ", map_x(x), map_y(y));
        }
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.trim_end()
        );
        let ly = T + 16.0 * si as f64 + 4.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            R - 150.0,
            R - 130.0,
            R - 124.0,
            ly + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn span(vals: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        // flat data still needs a nonzero span to map through
        let pad = lo.abs().max(1.0) * 1e-3;
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Renders the charts for a finished run directory: the energy curve,
/// a log-log second-moment curve with its fitted slope when at least two
/// positive-time snapshots exist, and density frames for one-dimensional
/// runs. Returns the files written.
pub fn plot_run(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("resolved_config.json"))?)?;
    let tau = resolved["resolved"]["tau"].as_f64().ok_or_else(|| {
        KdeflowError::Config("resolved_config.json: missing resolved.tau".into())
    })?;

    let diag = read_diagnostics(run_dir)?;
    if !diag.is_empty() {
        let mut energy = vec![(0.0, diag[0].psi_before)];
        energy.extend(diag.iter().map(|d| (d.step as f64 * tau, d.energy_after)));
        let chart = render_chart(
            "Free energy along the run",
            "time",
            "energy",
            false,
            false,
            &[Series {
                label: "energy".into(),
                points: energy,
            }],
        );
        let path = run_dir.join("energy_curve.svg");
        fs::write(&path, chart)?;
        written.push(path);
    }

    let snaps = read_snapshots(run_dir)?;
    let moments: Vec<(f64, f64)> = snaps
        .iter()
        .filter(|(s, _)| *s > 0)
        .map(|(s, pts)| (*s as f64 * tau, second_moment(pts)))
        .filter(|&(t, m)| t > 0.0 && m > 0.0)
        .collect();
    if moments.len() >= 2 {
        let lx: Vec<f64> = moments.iter().map(|&(t, _)| t.ln()).collect();
        let ly: Vec<f64> = moments.iter().map(|&(_, m)| m.ln()).collect();
        let slope = ls_slope(&lx, &ly);
        let chart = render_chart(
            &format!("Second moment, fitted slope {slope:.3}"),
            "time",
            "second moment",
            true,
            true,
            &[Series {
                label: "moment".into(),
                points: moments,
            }],
        );
        let path = run_dir.join("moment_curve.svg");
        fs::write(&path, chart)?;
        written.push(path);
    }

    let densities = read_densities(run_dir)?;
    if !densities.is_empty() && densities[0].1.first().map(|r| r.len()) == Some(2) {
        // pick up to four frames spread across the run
        let picks: Vec<usize> = if densities.len() <= 4 {
            (0..densities.len()).collect()
        } else {
            (0..4)
                .map(|k| k * (densities.len() - 1) / 3)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        };
        let series: Vec<Series> = picks
            .iter()
            .map(|&i| {
                let (step, rows) = &densities[i];
                Series {
                    label: format!("t = {}", fmt_tick(*step as f64 * tau)),
                    points: rows.iter().map(|r| (r[0], r[1])).collect(),
                }
            })
            .collect();
        let chart = render_chart("Density frames", "x", "density", false, false, &series);
        let path = run_dir.join("density_frames.svg");
        fs::write(&path, chart)?;
        written.push(path);
    }
    Ok(written)
}

fn read_diagnostics(run_dir: &Path) -> Result<Vec<StepDiagnostics>> {
    let text = fs::read_to_string(run_dir.join("trajectory.jsonl"))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// Snapshot step indices and particle rows, in ascending step order.
fn read_snapshots(run_dir: &Path) -> Result<Vec<(usize, Vec<Vec<f64>>)>> {
    read_indexed_csvs(run_dir, "particles_")
}

fn read_densities(run_dir: &Path) -> Result<Vec<(usize, Vec<Vec<f64>>)>> {
    read_indexed_csvs(run_dir, "density_")
}

fn read_indexed_csvs(run_dir: &Path, prefix: &str) -> Result<Vec<(usize, Vec<Vec<f64>>)>> {
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(run_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name.strip_prefix(prefix) {
            if let Some(num) = rest.strip_suffix(".csv") {
                if let Ok(step) = num.parse::<usize>() {
                    found.push((step, entry.path()));
                }
            }
        }
    }
    found.sort_by_key(|(s, _)| *s);
    let mut out = Vec::with_capacity(found.len());
    for (step, path) in found {
        let text = fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(str::parse::<f64>).collect();
            rows.push(row.map_err(|e| {
                KdeflowError::Config(format!("{prefix}{step:05}.csv: bad number: {e}"))
            })?);
        }
        out.push((step, rows));
    }
    Ok(out)
}

/// Mean squared distance of the rows from their centroid.
fn second_moment(points: &[Vec<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let d = points[0].len();
    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        for (a, v) in p.iter().enumerate() {
            mean[a] += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut acc = 0.0;
    for p in points {
        for (a, v) in p.iter().enumerate() {
            let dv = v - mean[a];
            acc += dv * dv;
        }
    }
    acc / n
}
