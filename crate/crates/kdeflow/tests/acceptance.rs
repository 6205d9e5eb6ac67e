//! Acceptance suite: every test prints exactly one verdict line of the form
//! `acceptance NN name: PASS/FAIL — detail (elapsed)`. Tolerances and time
//! budgets are pinned here in code, next to the checks they gate. The run
//! configs for the two physics cases live in `configs/` and double as the
//! CLI presets.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;

use kdeflow::domain::Domain;
use kdeflow::energy::{mixture_on_lattice, Lattice};
use kdeflow::harness::{
    bound_check, check_schedule_request, load_config, oracle_step, resolve, run_experiment,
    RunConfig,
};
use kdeflow::kde::{
    kde_rate, sample_initial_with, smoothed_truth, InitialDensitySpec, KdeMeasure,
    ParticleConfiguration, SamplingStrategy,
};
use kdeflow::kernel::{Kernel, KernelFamily};
use kdeflow::scheme::run_scheme;
use kdeflow::transport::{mixture_wasserstein_estimate, particle_distance};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Prints the verdict line and fails the test when `pass` is false.
fn conclude(number: u32, name: &str, pass: bool, detail: &str, started: Instant) {
    let line = format!(
        "acceptance {number:02} {name}: {} — {detail} ({:.1} s)",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    println!("{line}");
    assert!(pass, "{line}");
}

fn parse_config(json: &str) -> RunConfig {
    serde_json::from_str(json).expect("config literal")
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// Exact grid spacing that makes the one-dimensional covering construction
/// produce `k` points over an interval of the given length.
fn omega_for_count(len: f64, k: usize) -> f64 {
    len / (0.999 * (k as f64 - 0.5))
}

struct DiagRow {
    gamma: f64,
    psi_before: f64,
    psi_after: f64,
    energy_after: f64,
}

/// Reads diagnostics.csv; `{}`-formatted floats round-trip exactly.
fn read_diagnostics(dir: &Path) -> Vec<DiagRow> {
    let text = fs::read_to_string(dir.join("diagnostics.csv")).expect("diagnostics.csv");
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let col = |name: &str| header.iter().position(|c| *c == name).expect("column");
    let (g, pb, pa, ea) = (
        col("gamma"),
        col("psi_before"),
        col("psi_after"),
        col("energy_after"),
    );
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            DiagRow {
                gamma: f[g].parse().unwrap(),
                psi_before: f[pb].parse().unwrap(),
                psi_after: f[pa].parse().unwrap(),
                energy_after: f[ea].parse().unwrap(),
            }
        })
        .collect()
}

/// Per-step descent and the slack-threaded energy chain, with no tolerance
/// beyond the recorded values themselves. Returns the first violation.
fn energy_chain_violation(rows: &[DiagRow]) -> Option<String> {
    for (i, r) in rows.iter().enumerate() {
        if !(r.psi_after <= r.psi_before) {
            return Some(format!(
                "step {}: psi rose {} -> {}",
                i + 1,
                r.psi_before,
                r.psi_after
            ));
        }
        let prev_energy = if i == 0 { r.psi_before } else { rows[i - 1].energy_after };
        if !(r.energy_after <= prev_energy + r.gamma) {
            return Some(format!(
                "step {}: energy {} exceeds {} + gamma {}",
                i + 1,
                r.energy_after,
                prev_energy,
                r.gamma
            ));
        }
    }
    None
}

/// Reads a snapshot CSV (header + one row of floats per record).
fn read_csv_rows(path: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).expect("snapshot csv");
    text.lines()
        .skip(1)
        .map(|line| line.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

/// Indexed snapshot files `prefix_NNNNN.csv`, sorted by step.
fn snapshot_files(dir: &Path, prefix: &str) -> Vec<(usize, PathBuf)> {
    let mut out: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .expect("run dir")
        .filter_map(|e| {
            let path = e.ok()?.path();
            let name = path.file_name()?.to_str()?.to_owned();
            let stem = name.strip_prefix(prefix)?.strip_suffix(".csv")?;
            Some((stem.trim_start_matches('_').parse().ok()?, path))
        })
        .collect();
    out.sort();
    out
}

// ---------------------------------------------------------------------------
// 01: coupling bound between random mixture pairs
// ---------------------------------------------------------------------------

#[test]
fn acceptance_01_coupling_bound_holds_on_random_mixture_pairs() {
    let started = Instant::now();
    let budget = Duration::from_secs(120);
    let (n, h, p) = (32usize, 0.1f64, 2.0f64);
    let total = 100u32;

    let random_cloud = |rng: &mut ChaCha8Rng, d: usize| -> ParticleConfiguration {
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        ParticleConfiguration::from_points(&pts).expect("cloud")
    };

    let mut held = 0u32;
    let mut worst_margin = f64::INFINITY;
    for i in 0..total {
        let d = if i % 2 == 0 { 1 } else { 2 };
        let kernel = Kernel::new(KernelFamily::Epanechnikov, d).expect("kernel");
        let mut rng = ChaCha8Rng::seed_from_u64(41_000 + u64::from(i));
        let a = random_cloud(&mut rng, d);
        let b = random_cloud(&mut rng, d);
        let pd = particle_distance(p, &a, &b).expect("particle distance");
        let ma = KdeMeasure::new(a, h, kernel.clone()).expect("mixture");
        let mb = KdeMeasure::new(b, h, kernel).expect("mixture");
        let est = mixture_wasserstein_estimate(&ma, &mb, p, 256, 3, 9_000 + u64::from(i))
            .expect("coupling estimate");
        let margin = pd + 2.0 * h + est.spread - est.mean;
        worst_margin = worst_margin.min(margin);
        if margin >= 0.0 {
            held += 1;
        }
    }

    let in_time = started.elapsed() <= budget;
    conclude(
        1,
        "coupling-bound",
        held == total && in_time,
        &format!(
            "{held}/{total} pairs within particle distance + 2h + spread, worst margin {worst_margin:.4}, budget 120 s"
        ),
        started,
    );
}

// ---------------------------------------------------------------------------
// 02: relaxed step against the exhaustive oracle on toy grids
// ---------------------------------------------------------------------------

#[test]
fn acceptance_02_relaxed_step_matches_exhaustive_oracle_within_budget() {
    let started = Instant::now();
    let budget = Duration::from_secs(60);
    let sizes = [5usize, 7, 9];
    let total = 50u32;

    let mut within = 0u32;
    let mut worst_excess = 0.0f64;
    for i in 0..total {
        let n = 1 + (i as usize) % 3;
        let k = sizes[(i as usize / 3) % 3];
        let law = if i % 2 == 0 {
            r#"{"family": "entropy"}"#
        } else {
            r#"{"family": "power", "m": 2.0}"#
        };
        let omega = omega_for_count(0.15, k);
        let config = parse_config(&format!(
            r#"{{
                "domain": {{"shape": "box", "bounds": [[0.0, 0.15]]}},
                "kernel": {{"family": "epanechnikov"}},
                "energy": {{"f": {law}}},
                "initial": {{"type": "uniform", "bounds": [[0.0, 0.15]]}},
                "seed": {seed},
                "tau": 0.4,
                "horizon": 0.4,
                "schedule": {{"mode": "explicit", "n": {n}, "h": 0.85, "omega": {omega}}}
            }}"#,
            seed = 7_000 + i,
        ));
        let report = oracle_step(&config, 1.0e6).expect("oracle step");
        worst_excess = worst_excess.max(report.excess);
        if report.within_budget {
            within += 1;
        }
    }

    let in_time = started.elapsed() <= budget;
    conclude(
        2,
        "step-oracle",
        within == total && in_time,
        &format!(
            "{within}/{total} toy steps within gamma = tau^1.5 of the exhaustive minimum, worst excess {worst_excess:.2e}, budget 60 s"
        ),
        started,
    );
}

// ---------------------------------------------------------------------------
// 03: energy quasi-monotonicity across energy families
// ---------------------------------------------------------------------------

#[test]
fn acceptance_03_energy_chain_holds_across_energy_families() {
    let started = Instant::now();
    // One short run per energy-term family; the same chain check also runs
    // inside every other criterion that produces a trajectory.
    let cases = [
        (
            "entropy",
            r#"{
                "domain": {"shape": "box", "bounds": [[0.0, 1.0]]},
                "kernel": {"family": "epanechnikov"},
                "energy": {"f": {"family": "entropy"}},
                "initial": {"type": "uniform", "bounds": [[0.0, 1.0]]},
                "sampling": "stratified",
                "seed": 31, "tau": 0.1, "horizon": 0.5,
                "schedule": {"mode": "explicit", "n": 64, "h": 0.08}
            }"#,
        ),
        (
            "entropy+potential",
            r#"{
                "domain": {"shape": "box", "bounds": [[-3.0, 3.0]]},
                "kernel": {"family": "epanechnikov"},
                "energy": {
                    "f": {"family": "entropy"},
                    "v": {"kind": "quadratic", "center": [0.0], "coeff": 0.5}
                },
                "initial": {"type": "trunc_gauss", "center": [1.0], "sigma": 0.5},
                "sampling": "stratified",
                "seed": 32, "tau": 0.1, "horizon": 0.5,
                "schedule": {"mode": "explicit", "n": 64, "h": 0.1}
            }"#,
        ),
        (
            "quadratic-pressure+interaction",
            r#"{
                "domain": {"shape": "box", "bounds": [[-3.0, 3.0]]},
                "kernel": {"family": "epanechnikov"},
                "energy": {
                    "f": {"family": "power", "m": 2.0},
                    "w": {"kind": "quadratic", "coeff": 0.5}
                },
                "initial": {"type": "uniform", "bounds": [[-1.5, 1.5]]},
                "sampling": "stratified",
                "seed": 33, "tau": 0.1, "horizon": 0.5,
                "schedule": {"mode": "explicit", "n": 64, "h": 0.1}
            }"#,
        ),
        (
            "cubic-pressure",
            r#"{
                "domain": {"shape": "box", "bounds": [[-4.0, 4.0]]},
                "kernel": {"family": "epanechnikov"},
                "energy": {"f": {"family": "power", "m": 3.0}},
                "initial": {"type": "barenblatt", "m": 3.0, "t0": 0.25},
                "sampling": "stratified",
                "seed": 34, "tau": 0.1, "horizon": 0.5,
                "schedule": {"mode": "explicit", "n": 64, "h": 0.1}
            }"#,
        ),
    ];

    let mut steps_checked = 0usize;
    let mut first_violation = None;
    for (label, json) in &cases {
        let config = parse_config(json);
        let resolved = resolve(&config).expect("resolve");
        let y0 = sample_initial_with(
            &config.initial,
            &config.domain,
            resolved.n,
            config.seed,
            config.sampling,
        )
        .expect("sample");
        let traj = run_scheme(
            &resolved.spec,
            &resolved.kernel,
            &resolved.params,
            &y0,
            config.horizon,
        )
        .expect("run");
        let rows: Vec<DiagRow> = traj
            .records
            .iter()
            .map(|r| DiagRow {
                gamma: r.gamma,
                psi_before: r.psi_before,
                psi_after: r.psi_after,
                energy_after: r.energy_after,
            })
            .collect();
        steps_checked += rows.len();
        if let Some(v) = energy_chain_violation(&rows) {
            first_violation.get_or_insert(format!("{label}: {v}"));
        }
        // Cumulative form: each energy stays below the start plus the spent
        // slack budget.
        let mut spent = 0.0;
        for r in &rows {
            spent += r.gamma;
            if !(r.energy_after <= rows[0].psi_before + spent) {
                first_violation.get_or_insert(format!("{label}: cumulative budget exceeded"));
            }
        }
    }

    let pass = first_violation.is_none();
    conclude(
        3,
        "energy-quasi-monotonicity",
        pass,
        &first_violation.unwrap_or_else(|| {
            format!(
                "chain exact at all {steps_checked} steps across {} energy families; also asserted inside every run-based criterion",
                cases.len()
            )
        }),
        started,
    );
}

// ---------------------------------------------------------------------------
// 04: heat flow reaches the flat equilibrium
// ---------------------------------------------------------------------------

#[test]
fn acceptance_04_heat_flow_flattens_to_uniform_density() {
    let started = Instant::now();
    let budget = Duration::from_secs(300);
    let config = load_config(&preset("heat.json")).expect("heat preset");
    let dir = tempfile::tempdir().expect("tempdir");
    let artifacts = run_experiment(&config, Some(dir.path())).expect("heat run");
    assert!(artifacts.sane, "mass sanity check failed");

    let chain = energy_chain_violation(&read_diagnostics(dir.path()));
    let snapshots = snapshot_files(dir.path(), "density");
    let (final_step, final_density) = snapshots.last().expect("density snapshots");
    assert_eq!(*final_step, artifacts.steps_run);
    let sup_dev = read_csv_rows(final_density)
        .iter()
        .map(|row| (row[row.len() - 1] - 1.0).abs())
        .fold(0.0f64, f64::max);

    let in_time = started.elapsed() <= budget;
    let pass = sup_dev <= 0.15 && chain.is_none() && in_time;
    conclude(
        4,
        "heat-equilibrium",
        pass,
        &format!(
            "sup |u - 1| = {sup_dev:.4} on the export lattice (allowed 0.15), energy chain {}, budget 300 s",
            chain.unwrap_or_else(|| "exact".into())
        ),
        started,
    );
}

// ---------------------------------------------------------------------------
// 05: quadratic-pressure spreading follows the self-similar exponent
// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_porous_medium_second_moment_scales_self_similarly() {
    let started = Instant::now();
    let budget = Duration::from_secs(300);
    let config = load_config(&preset("porous_medium.json")).expect("preset");
    let InitialDensitySpec::Barenblatt { t0, .. } = config.initial else {
        panic!("preset initial profile changed");
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let artifacts = run_experiment(&config, Some(dir.path())).expect("run");
    assert!(artifacts.sane, "mass sanity check failed");
    let chain = energy_chain_violation(&read_diagnostics(dir.path()));

    // Particle second moments around the centroid at every snapshot.
    let mut series: Vec<(f64, f64)> = Vec::new();
    let mut max_abs = 0.0f64;
    for (step, path) in snapshot_files(dir.path(), "particles") {
        let rows = read_csv_rows(&path);
        let mean = rows.iter().map(|r| r[0]).sum::<f64>() / rows.len() as f64;
        let m2 = rows.iter().map(|r| (r[0] - mean).powi(2)).sum::<f64>() / rows.len() as f64;
        max_abs = rows.iter().map(|r| r[0].abs()).fold(max_abs, f64::max);
        series.push((t0 + step as f64 * config.tau, m2));
    }

    // Independent least-squares fit of ln m2 against ln t, last half only.
    let half = &series[series.len() / 2..];
    let (mx, my) = half.iter().fold((0.0, 0.0), |(ax, ay), (t, m)| {
        (ax + t.ln() / half.len() as f64, ay + m.ln() / half.len() as f64)
    });
    let (num, den) = half.iter().fold((0.0, 0.0), |(n, d), (t, m)| {
        (n + (t.ln() - mx) * (m.ln() - my), d + (t.ln() - mx).powi(2))
    });
    let slope = num / den;

    // Premise: nothing approaches the boundary of [-4, 4].
    let h = config.schedule.h.expect("explicit bandwidth");
    let clear_of_boundary = max_abs <= 4.0 - h;

    let in_time = started.elapsed() <= budget;
    let pass =
        (0.50..=0.83).contains(&slope) && clear_of_boundary && chain.is_none() && in_time;
    conclude(
        5,
        "porous-medium-scaling",
        pass,
        &format!(
            "fitted slope {slope:.4} in [0.50, 0.83] (self-similar value 2/3), max |x| = {max_abs:.3}, energy chain {}, budget 300 s",
            chain.unwrap_or_else(|| "exact".into())
        ),
        started,
    );
}

// ---------------------------------------------------------------------------
// 06: estimation error decays at the stated rate
// ---------------------------------------------------------------------------

#[test]
fn acceptance_06_estimation_error_decays_with_sample_size() {
    let started = Instant::now();
    let budget = Duration::from_secs(180);
    let domain = Domain::new_box(vec![[0.0, 1.0]]).expect("domain");
    let truth = InitialDensitySpec::TruncGauss {
        center: vec![0.5],
        sigma: 0.25,
    };
    let kernel = Kernel::new(KernelFamily::Epanechnikov, 1).expect("kernel");
    let lattice = Lattice::covering(&[[0.0, 1.0]], 0.005).expect("lattice");
    let ns = [1_000usize, 10_000, 100_000];
    let seeds: Vec<u64> = (0..10).map(|s| 300 + s).collect();

    // errs[j][s]: sup-norm distance to the bandwidth-smoothed truth.
    let mut errs = vec![vec![0.0f64; seeds.len()]; ns.len()];
    for (j, &n) in ns.iter().enumerate() {
        let h = (n as f64).powf(-0.25);
        let mut node = [0.0f64];
        let smoothed: Vec<f64> = (0..lattice.len())
            .map(|i| {
                lattice.node(i, &mut node);
                smoothed_truth(&kernel, h, &truth, &domain, &node).expect("smoothed truth")
            })
            .collect();
        for (s, &seed) in seeds.iter().enumerate() {
            let sample =
                sample_initial_with(&truth, &domain, n, seed, SamplingStrategy::Iid)
                    .expect("sample");
            let u = mixture_on_lattice(&sample, &kernel, h, &lattice);
            errs[j][s] = u
                .iter()
                .zip(&smoothed)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
        }
    }

    let monotone_seeds = (0..seeds.len())
        .filter(|&s| errs[0][s] > errs[1][s] && errs[1][s] > errs[2][s])
        .count();

    // One fitted constant per n; stability across the ladder within 3x.
    let constants: Vec<f64> = ns
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let rate = kde_rate(n as f64, (n as f64).powf(-0.25), (n as f64).powi(-2), 1)
                .expect("rate");
            errs[j].iter().sum::<f64>() / seeds.len() as f64 / rate
        })
        .collect();
    let ratio = constants.iter().cloned().fold(0.0, f64::max)
        / constants.iter().cloned().fold(f64::INFINITY, f64::min);

    let in_time = started.elapsed() <= budget;
    let pass = monotone_seeds >= 9 && ratio <= 3.0 && in_time;
    conclude(
        6,
        "estimation-rate-decay",
        pass,
        &format!(
            "sup error monotone in n at {monotone_seeds}/10 seeds (need 9), fitted constants {:?} spread x{ratio:.2} (allowed x3), budget 180 s",
            constants.iter().map(|c| (c * 1e3).round() / 1e3).collect::<Vec<_>>()
        ),
        started,
    );
}

// ---------------------------------------------------------------------------
// 07: schedule checker separates the default ladder from a thin one
// ---------------------------------------------------------------------------

#[test]
fn acceptance_07_schedule_checker_separates_default_from_thin_ladder() {
    let started = Instant::now();
    let default_request = r#"{
        "law": {"family": "entropy"},
        "kernel": {"family": "epanechnikov"},
        "d": 1,
        "taus": [0.2, 0.1, 0.05, 0.025]
    }"#;
    let default_report = check_schedule_request(default_request).expect("default ladder");

    let thin_points: Vec<String> = [0.2f64, 0.1, 0.05, 0.025]
        .iter()
        .map(|&tau| {
            let n = (1.0 / tau).ceil();
            format!(
                r#"{{"tau": {tau}, "n": {n}, "h": {}, "gamma": {}}}"#,
                n.powf(-0.25),
                tau.powf(1.5)
            )
        })
        .collect();
    let thin_request = format!(
        r#"{{
            "law": {{"family": "entropy"}},
            "kernel": {{"family": "epanechnikov"}},
            "d": 1,
            "points": [{}]
        }}"#,
        thin_points.join(",")
    );
    let thin_report = check_schedule_request(&thin_request).expect("thin ladder");
    let thin_noise = thin_report
        .conditions
        .iter()
        .find(|c| c.name == "noise_decay")
        .expect("noise condition");

    let pass = default_report.pass && !thin_report.pass && !thin_noise.passed;
    conclude(
        7,
        "schedule-checker",
        pass,
        &format!(
            "default ladder passes {}/{} conditions; n = ceil(1/tau) ladder fails noise decay as required",
            default_report.conditions.iter().filter(|c| c.passed).count(),
            default_report.conditions.len()
        ),
        started,
    );
}

// ---------------------------------------------------------------------------
// 08: grid descent terminates inside the combinatorial round budget
// ---------------------------------------------------------------------------

#[test]
fn acceptance_08_grid_descent_terminates_within_round_budget() {
    let started = Instant::now();
    let (n, grid_points) = (4usize, 15usize);
    let round_budget = 10 * grid_points * n; // 600
    let omega = omega_for_count(0.15, grid_points);
    let total_seeds = 20u64;

    let mut terminated = 0u32;
    let mut max_rounds_used = 0usize;
    for seed in 0..total_seeds {
        let config = parse_config(&format!(
            r#"{{
                "domain": {{"shape": "box", "bounds": [[0.0, 0.15]]}},
                "kernel": {{"family": "epanechnikov"}},
                "energy": {{"f": {{"family": "entropy"}}}},
                "initial": {{"type": "uniform", "bounds": [[0.0, 0.15]]}},
                "seed": {seed},
                "tau": 0.4,
                "horizon": 40.0,
                "schedule": {{"mode": "explicit", "n": {n}, "h": 0.85, "omega": {omega}}},
                "optimizer": {{"max_rounds": 2000}}
            }}"#
        ));
        let resolved = resolve(&config).expect("resolve");
        let grid = resolved.params.grid.as_ref().expect("grid mode");
        assert_eq!(grid.len(), grid_points, "covering construction drifted");
        let y0 = sample_initial_with(
            &config.initial,
            &config.domain,
            resolved.n,
            config.seed,
            config.sampling,
        )
        .expect("sample");
        let traj = run_scheme(
            &resolved.spec,
            &resolved.kernel,
            &resolved.params,
            &y0,
            config.horizon,
        )
        .expect("run");
        let rounds: usize = traj.records.iter().map(|r| r.rounds).sum();
        max_rounds_used = max_rounds_used.max(rounds);
        if traj.terminated_at.is_some() && rounds <= round_budget {
            terminated += 1;
        }
    }

    let pass = terminated == total_seeds as u32;
    conclude(
        8,
        "grid-termination",
        pass,
        &format!(
            "{terminated}/{total_seeds} seeds reached a fixed point, worst total rounds {max_rounds_used} of {round_budget} allowed"
        ),
        started,
    );
}

// ---------------------------------------------------------------------------
// 09: particle-sum shortcut stays within the Lipschitz coupling bound
// ---------------------------------------------------------------------------

#[test]
fn acceptance_09_particle_sum_bounds_hold_on_sampled_configurations() {
    let started = Instant::now();
    let config = parse_config(
        r#"{
            "domain": {"shape": "box", "bounds": [[-1.0, 1.0]]},
            "kernel": {"family": "epanechnikov"},
            "energy": {
                "f": {"family": "entropy"},
                "v": {"kind": "quadratic", "center": [0.0], "coeff": 1.0},
                "w": {"kind": "quadratic", "coeff": 0.5}
            },
            "initial": {"type": "uniform", "bounds": [[-0.8, 0.8]]},
            "seed": 0,
            "tau": 0.1,
            "horizon": 0.1,
            "schedule": {"mode": "explicit", "n": 16, "h": 0.12}
        }"#,
    );
    // Two independently seeded sweeps: 100 configurations checked against
    // the potential bound and 100 against the interaction bound, per sweep.
    let first = bound_check(&config, 100, 1_111).expect("bound sweep");
    let second = bound_check(&config, 100, 2_222).expect("bound sweep");
    let worst_gap = first
        .cases
        .iter()
        .chain(&second.cases)
        .map(|c| {
            (c.potential_gap - c.potential_bound).max(c.interaction_gap - c.interaction_bound)
        })
        .fold(f64::NEG_INFINITY, f64::max);

    let pass = first.all_hold && second.all_hold;
    conclude(
        9,
        "particle-sum-bounds",
        pass,
        &format!(
            "potential and interaction gaps within L h M_p^(1/p) on 200/200 sampled configurations, worst gap-minus-bound {worst_gap:.2e}"
        ),
        started,
    );
}

// ---------------------------------------------------------------------------
// 10: byte-identical artifacts on same-seed reruns
// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_same_seed_reruns_write_identical_artifacts() {
    let started = Instant::now();
    let config = load_config(&preset("heat.json")).expect("heat preset");
    let first = tempfile::tempdir().expect("tempdir");
    let second = tempfile::tempdir().expect("tempdir");
    run_experiment(&config, Some(first.path())).expect("first run");
    run_experiment(&config, Some(second.path())).expect("second run");

    let mut names: Vec<String> = fs::read_dir(first.path())
        .expect("run dir")
        .filter_map(|e| Some(e.ok()?.file_name().to_str()?.to_owned()))
        .filter(|n| n != "summary.json") // sole holder of wall-clock time
        .collect();
    names.sort();
    assert!(
        names.iter().any(|n| n == "trajectory.jsonl"),
        "trajectory artifact missing"
    );
    assert!(
        names.iter().any(|n| n.starts_with("particles_")),
        "particle snapshots missing"
    );

    let mut mismatched = Vec::new();
    for name in &names {
        let a = fs::read(first.path().join(name)).expect("first artifact");
        let b = fs::read(second.path().join(name)).expect("second artifact");
        if a != b {
            mismatched.push(name.clone());
        }
    }

    let pass = mismatched.is_empty();
    conclude(
        10,
        "reproducibility",
        pass,
        &if pass {
            format!("{} artifacts byte-identical across same-seed reruns", names.len())
        } else {
            format!("artifacts differ: {mismatched:?}")
        },
        started,
    );
}
