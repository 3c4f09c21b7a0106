//! Config-driven experiment orchestration.
//!
//! An [`ExperimentConfig`] (strict TOML, unknown keys fatal) selects one of
//! six experiments and fixes every budget and the master seed. [`run`]
//! executes it, writes CSV artifacts plus a JSON sidecar with the full config
//! echo, and returns machine-readable [`Verdict`]s. Replica work is mapped
//! over a worker pool by [`replica_map`], whose output is a pure function of
//! the replica index, so results are bit-identical at any worker count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{
    barrier_quantities, fluctuation_statistic, run_tree, BarrierMode, BarrierSchedule,
    LogCorrection, TreeConfig,
};
use crate::error::{Error, Result};
use crate::model::OffspringLaw;
use crate::renewal::{
    check_harmonic, default_grid, estimate_r_with_cap, RenewalMethod, RenewalTable,
};
use crate::spine::verify_many_to_one;
use crate::stable::{lambda_grid, limit_params, mixture_sample, psi, sample_at, StableParams};
use crate::stats::{
    empirical_cf, estimate_c0, hill_default_top_fraction, hill_index, ks_two_sample, mean_se,
    median_with_se, quantiles, spearman, MomentAccumulator,
};
use crate::tolerances::{
    CF_GATE, HILL_BRACKET, KS_P_MIN, SH_BRACKET_HALF_WIDTH, SURVIVAL_DRIFT_REL_TOL, Z_GATE,
};
use crate::walk::{delta_n_report, exact_symmetric_survival};
use crate::{replica_rng, streams};

/// Version stamp carried by every artifact sidecar; bumped when a CSV column
/// order or a verdict name changes.
pub const FORMAT_VERSION: u32 = 1;

/// Environment variable overriding the output directory.
pub const OUTPUT_ENV: &str = "BRW_LAB_OUT";

const DEFAULT_OUTPUT_DIR: &str = "brw-lab-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    VerifyIdentities,
    RenewalBuild,
    Fluctuation,
    StableCheck,
    SenetaHeyde,
    DeltaNReport,
}

impl ExperimentKind {
    /// The CLI subcommand that runs this experiment.
    pub fn subcommand(&self) -> &'static str {
        match self {
            ExperimentKind::VerifyIdentities => "verify",
            ExperimentKind::RenewalBuild => "renewal",
            ExperimentKind::Fluctuation => "fluctuation",
            ExperimentKind::StableCheck => "stable-check",
            ExperimentKind::SenetaHeyde => "seneta-heyde",
            ExperimentKind::DeltaNReport => "delta-n",
        }
    }

    /// The config-file spelling of the experiment name.
    pub fn config_name(&self) -> &'static str {
        match self {
            ExperimentKind::VerifyIdentities => "verify_identities",
            ExperimentKind::RenewalBuild => "renewal_build",
            ExperimentKind::Fluctuation => "fluctuation",
            ExperimentKind::StableCheck => "stable_check",
            ExperimentKind::SenetaHeyde => "seneta_heyde",
            ExperimentKind::DeltaNReport => "delta_n_report",
        }
    }
}

/// Offspring-law block of the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawConfig {
    /// `"dyadic"` or `"poisson"`.
    pub family: String,
    /// Mean offspring count, required by (and only valid for) `"poisson"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
}

impl LawConfig {
    pub fn build(&self) -> Result<OffspringLaw> {
        match self.family.as_str() {
            "dyadic" => {
                if self.m.is_some() {
                    return Err(Error::Config(
                        "law.m is only meaningful for family = \"poisson\"".into(),
                    ));
                }
                Ok(OffspringLaw::dyadic_gaussian())
            }
            "poisson" => {
                let m = self
                    .m
                    .ok_or_else(|| Error::Config("family = \"poisson\" requires law.m".into()))?;
                OffspringLaw::poisson_gaussian(m)
            }
            other => Err(Error::Config(format!(
                "unknown law.family `{other}` (expected \"dyadic\" or \"poisson\")"
            ))),
        }
    }
}

/// Replica and simulation budgets. All fields have defaults, so a config may
/// set only what it needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    /// Tree replicas for martingale and fluctuation sampling.
    pub replicas: usize,
    /// Target generation `n` of the statistic of interest.
    pub n_max: usize,
    /// Extra generations `M` past the target; the default (absent) is
    /// `M = n`.
    pub horizon: Option<usize>,
    /// Freeze cap `K`; values at or below zero disable pruning.
    pub freeze_cap: f64,
    /// Hard limit on live particles per tree.
    pub particle_cap: usize,
    /// Independent walk replicas for survival probabilities.
    pub walk_replicas: usize,
    /// Replicas per grid point (occupation) or per path (ladder) for the
    /// renewal table.
    pub renewal_replicas: usize,
    /// Raw step cap per renewal replica.
    pub step_cap: u64,
    /// Generation grid for the multi-`n` experiments; empty means the
    /// experiment's default grid.
    pub n_grid: Vec<usize>,
    /// Draws for the stable sampler checks.
    pub stable_draws: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            replicas: 20_000,
            n_max: 10,
            horizon: None,
            freeze_cap: 12.0,
            particle_cap: 10_000_000,
            walk_replicas: 1_000_000,
            renewal_replicas: 200_000,
            step_cap: 1_000_000,
            n_grid: Vec::new(),
            stable_draws: 200_000,
        }
    }
}

impl Budgets {
    fn freeze(&self) -> Option<f64> {
        (self.freeze_cap > 0.0).then_some(self.freeze_cap)
    }

    fn horizon_for(&self, n: usize) -> usize {
        self.horizon.unwrap_or(n)
    }
}

/// Window-barrier block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarrierConfig {
    /// Time-scaling values `a >= 1` of the fluctuation statistic.
    pub a_list: Vec<f64>,
    /// Barrier offset `beta_n`; absent means the default rule
    /// `beta_n = log n`.
    pub beta: Option<f64>,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        BarrierConfig {
            a_list: vec![1.0],
            beta: None,
        }
    }
}

impl BarrierConfig {
    fn schedule_for(&self, n: usize) -> Result<BarrierSchedule> {
        match self.beta {
            Some(beta) => BarrierSchedule::new(n, beta),
            None => BarrierSchedule::with_default_beta(n),
        }
    }
}

fn default_seed() -> u64 {
    1
}

fn default_workers() -> usize {
    1
}

/// One experiment run, fully specified. Parsed strictly: unknown keys are
/// fatal at any nesting level.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub law: LawConfig,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub barrier: BarrierConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl ExperimentConfig {
    /// The built-in defaults for one experiment on the dyadic family.
    pub fn default_for(experiment: ExperimentKind) -> Self {
        ExperimentConfig {
            experiment,
            law: LawConfig {
                family: "dyadic".into(),
                m: None,
            },
            budgets: Budgets::default(),
            barrier: BarrierConfig::default(),
            seed: default_seed(),
            output_dir: None,
            workers: default_workers(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.law.build()?;
        let b = &self.budgets;
        if b.replicas == 0
            || b.walk_replicas == 0
            || b.renewal_replicas == 0
            || b.stable_draws == 0
        {
            return Err(Error::Config("budgets: replica counts must be >= 1".into()));
        }
        if b.n_max == 0 {
            return Err(Error::Config("budgets.n_max must be >= 1".into()));
        }
        if b.step_cap == 0 {
            return Err(Error::Config("budgets.step_cap must be >= 1".into()));
        }
        if b.particle_cap == 0 {
            return Err(Error::Config("budgets.particle_cap must be >= 1".into()));
        }
        if b.freeze_cap.is_nan() {
            return Err(Error::Config("budgets.freeze_cap must not be NaN".into()));
        }
        if b.n_grid.contains(&0) {
            return Err(Error::Config("budgets.n_grid entries must be >= 1".into()));
        }
        if self.barrier.a_list.is_empty() {
            return Err(Error::Config("barrier.a_list must be nonempty".into()));
        }
        if self.barrier.a_list.iter().any(|&a| a < 1.0 || !a.is_finite()) {
            return Err(Error::Config(
                "barrier.a_list entries must be finite and >= 1".into(),
            ));
        }
        if let Some(beta) = self.barrier.beta {
            if beta <= 0.0 || !beta.is_finite() {
                return Err(Error::Config(
                    "barrier.beta must be positive and finite".into(),
                ));
            }
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Command-line overrides applied on top of the config file; each applied
/// override is echoed into run metadata.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Output-directory precedence: CLI flag, then environment variable, then
/// config key, then the built-in default.
pub fn resolve_output_from(
    cli: Option<&Path>,
    env: Option<&str>,
    config: Option<&str>,
) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(p) = env {
        return PathBuf::from(p);
    }
    if let Some(p) = config {
        return PathBuf::from(p);
    }
    PathBuf::from(DEFAULT_OUTPUT_DIR)
}

/// One named check with its measured value, target, and gate outcome.
#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub name: String,
    pub value: f64,
    pub target: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    /// Gate `|value - target| <= Z_GATE * se`.
    fn z_gate(name: &str, value: f64, target: f64, se: f64, detail: String) -> Verdict {
        let z = if value == target {
            0.0
        } else {
            (value - target) / se.max(1e-300)
        };
        Verdict {
            name: name.into(),
            value,
            target,
            z: Some(z),
            p_value: None,
            pass: z.abs() <= Z_GATE,
            detail,
        }
    }

    /// Gate on a precomputed worst z-score.
    fn worst_z(name: &str, worst: f64, detail: String) -> Verdict {
        Verdict {
            name: name.into(),
            value: worst,
            target: Z_GATE,
            z: Some(worst),
            p_value: None,
            pass: worst.abs() <= Z_GATE,
            detail,
        }
    }

    fn bool_gate(name: &str, pass: bool, value: f64, target: f64, detail: String) -> Verdict {
        Verdict {
            name: name.into(),
            value,
            target,
            z: None,
            p_value: None,
            pass,
            detail,
        }
    }

    /// A diagnostic that failed to compute; always a failing verdict.
    fn broken(name: &str, err: &Error) -> Verdict {
        Verdict {
            name: name.into(),
            value: f64::NAN,
            target: f64::NAN,
            z: None,
            p_value: None,
            pass: false,
            detail: format!("diagnostic failed: {err}"),
        }
    }
}

/// RNG provenance echoed into every sidecar.
#[derive(Debug, Clone, Serialize)]
pub struct RngProvenance {
    pub algorithm: &'static str,
    pub master_seed: u64,
    pub stream_scheme: &'static str,
}

/// Everything a run produced: verdicts, artifact paths, and metadata.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub format_version: u32,
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    /// Human-readable list of the applied command-line/env overrides.
    pub overrides: Vec<String>,
    pub verdicts: Vec<Verdict>,
    /// Paths of the emitted CSV artifacts, relative to the output dir.
    pub artifacts: Vec<String>,
    pub wall_ms: u128,
    pub rng: RngProvenance,
    /// True iff every verdict passed.
    pub passed: bool,
}

impl RunResult {
    /// One line per verdict plus a summary line, for terminal output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for v in &self.verdicts {
            let status = if v.pass { "PASS" } else { "FAIL" };
            let z = v.z.map_or(String::new(), |z| format!(" z={z:.3}"));
            let p = v.p_value.map_or(String::new(), |p| format!(" p={p:.4}"));
            out.push_str(&format!(
                "[{status}] {name}: value={value:.6} target={target:.6}{z}{p} ({detail})\n",
                name = v.name,
                value = v.value,
                target = v.target,
                detail = v.detail,
            ));
        }
        out.push_str(&format!(
            "{}: {} of {} checks passed\n",
            self.experiment.config_name(),
            self.verdicts.iter().filter(|v| v.pass).count(),
            self.verdicts.len(),
        ));
        out
    }
}

/// Maps `f` over replica indices `0..replicas` on a pool of `workers`
/// threads. Each result lands in its own slot, so the output vector equals
/// the sequential one element for element no matter how the pool schedules;
/// on failure the lowest-index error is returned.
pub fn replica_map<T, F>(replicas: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u32) -> Result<T> + Sync,
{
    if replicas == 0 {
        return Ok(Vec::new());
    }
    if replicas > u32::MAX as usize {
        return Err(Error::Config("replica count exceeds u32 indexing".into()));
    }
    if workers <= 1 {
        return (0..replicas as u32).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut slots: Vec<Option<Result<T>>> = (0..replicas).map(|_| None).collect();
    pool.install(|| {
        slots.par_iter_mut().enumerate().for_each(|(i, slot)| {
            *slot = Some(f(i as u32));
        });
    });
    slots
        .into_iter()
        .map(|s| s.expect("replica slot filled"))
        .collect()
}

/// Validates the config, applies overrides, runs the experiment, writes all
/// artifacts under the resolved output directory, and returns the verdicts.
pub fn run(config: &ExperimentConfig, overrides: &Overrides) -> Result<RunResult> {
    config.validate()?;
    let mut config = config.clone();
    let mut applied = Vec::new();
    if let Some(seed) = overrides.seed {
        config.seed = seed;
        applied.push(format!("seed={seed} (--seed)"));
    }
    if let Some(workers) = overrides.workers {
        if workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        config.workers = workers;
        applied.push(format!("workers={workers} (--workers)"));
    }
    let env_out = std::env::var(OUTPUT_ENV).ok();
    if let Some(out) = &overrides.out {
        applied.push(format!("output_dir={} (--out)", out.display()));
    } else if let Some(out) = &env_out {
        applied.push(format!("output_dir={out} (env {OUTPUT_ENV})"));
    }
    let out_dir = resolve_output_from(
        overrides.out.as_deref(),
        env_out.as_deref(),
        config.output_dir.as_deref(),
    );
    fs::create_dir_all(&out_dir)?;

    let law = config.law.build()?;
    let started = Instant::now();
    let mut sink = ArtifactSink::new(&out_dir);
    let verdicts = match config.experiment {
        ExperimentKind::VerifyIdentities => verify_identities(&config, &law, &mut sink)?,
        ExperimentKind::RenewalBuild => renewal_build(&config, &law, &mut sink)?,
        ExperimentKind::Fluctuation => fluctuation(&config, &law, &mut sink)?,
        ExperimentKind::StableCheck => stable_check(&config, &law, &mut sink)?,
        ExperimentKind::SenetaHeyde => seneta_heyde(&config, &law, &mut sink)?,
        ExperimentKind::DeltaNReport => delta_n_driver(&config, &law, &mut sink)?,
    };

    let passed = verdicts.iter().all(|v| v.pass);
    let result = RunResult {
        format_version: FORMAT_VERSION,
        experiment: config.experiment,
        config: config.clone(),
        overrides: applied,
        verdicts,
        artifacts: sink.names,
        wall_ms: started.elapsed().as_millis(),
        rng: RngProvenance {
            algorithm: "chacha8",
            master_seed: config.seed,
            stream_scheme: "stream = (phase << 32) | replica",
        },
        passed,
    };
    let sidecar = out_dir.join("result.json");
    fs::write(
        &sidecar,
        serde_json::to_string_pretty(&result).map_err(|e| Error::Consistency(e.to_string()))?,
    )?;
    Ok(result)
}

/// Runs `config` after checking that it declares the experiment the
/// subcommand selects, so a config file cannot silently run as the wrong
/// experiment.
pub fn run_subcommand(
    expected: ExperimentKind,
    config: &ExperimentConfig,
    overrides: &Overrides,
) -> Result<RunResult> {
    if config.experiment != expected {
        return Err(Error::Config(format!(
            "config declares experiment `{}` but the subcommand runs `{}`",
            config.experiment.config_name(),
            expected.config_name()
        )));
    }
    run(config, overrides)
}

/// Collects CSV artifacts under one directory, remembering relative names
/// for the sidecar.
struct ArtifactSink {
    dir: PathBuf,
    names: Vec<String>,
}

impl ArtifactSink {
    fn new(dir: &Path) -> Self {
        ArtifactSink {
            dir: dir.to_path_buf(),
            names: Vec::new(),
        }
    }

    /// Writes one CSV with a frozen header. Floats are rendered with the
    /// shortest round-trip formatting, so identical numbers give identical
    /// bytes.
    fn write_csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let path = self.dir.join(name);
        let mut writer = csv::Writer::from_path(&path)?;
        writer.write_record(header)?;
        for row in rows {
            if row.len() != header.len() {
                return Err(Error::Consistency(format!(
                    "artifact {name}: row width {} != header width {}",
                    row.len(),
                    header.len()
                )));
            }
            writer.write_record(&row)?;
        }
        writer.flush()?;
        self.names.push(name.to_string());
        Ok(())
    }
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

/// Exact renewal slope for the built-in families: both step laws are
/// continuous and symmetric, so `E|H_1| = sigma/sqrt(2)` (Spitzer's series)
/// and `c* = sqrt(2/sigma^2)`.
fn exact_c_star(law: &OffspringLaw) -> f64 {
    (2.0 / law.sigma2()).sqrt()
}

/// Per-replica output of one fluctuation tree.
struct FluctRow {
    w_n: f64,
    d_n: f64,
    d_proxy: f64,
    lost_mass: f64,
    /// One statistic per configured `a`, in `a_list` order.
    statistics: Vec<f64>,
}

/// Simulates the fluctuation trees once and evaluates the statistic for
/// every `a` on the same trees. One batch serves the whole `a_list` because
/// the statistic at scaling `a` only reads the track at generation
/// `ceil(a n)`; sharing trees couples the scalings, which is exactly what a
/// comparison across `a` wants.
fn fluctuation_rows(
    config: &ExperimentConfig,
    law: &OffspringLaw,
    n: usize,
    a_list: &[f64],
    replicas: usize,
    stream: u32,
) -> Result<Vec<FluctRow>> {
    let b = &config.budgets;
    let m_max = a_list
        .iter()
        .map(|&a| (a * n as f64).ceil() as usize)
        .max()
        .unwrap_or(n);
    let final_gen = m_max + b.horizon_for(n);
    let tree = TreeConfig {
        n_max: n,
        horizon: final_gen - n,
        freeze_cap: b.freeze(),
        particle_cap: b.particle_cap,
        checkpoints: Vec::new(),
        barrier: BarrierMode::None,
        keep_crossings: false,
    };
    let seed = config.seed;
    replica_map(replicas, config.workers, move |r| {
        let mut rng = replica_rng(seed, stream, r);
        let run = run_tree(law, &tree, &mut rng)?;
        let statistics = a_list
            .iter()
            .map(|&a| fluctuation_statistic(&run.track, n, a, LogCorrection::HalfLogN, None))
            .collect::<Result<Vec<f64>>>()?;
        Ok(FluctRow {
            w_n: run.track.w[n],
            d_n: run.track.d[n],
            d_proxy: run.track.d_infty_proxy,
            lost_mass: run.track.lost_mass_upper,
            statistics,
        })
    })
}

/// Grid for the tail-centering estimate: geometric, starting past the bulk
/// of the mixing distribution.
fn c0_grid() -> Vec<f64> {
    (0..10).map(|k| 1.5 * 1.5f64.powi(k)).collect()
}

/// Quantile levels of the frozen comparison table.
const QUANTILE_LEVELS: [f64; 9] = [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99];

/// Counts exceedances beyond symmetric thresholds `+-t` with `t` the 0.98
/// quantile of `|x|`; a spectrally positive limit puts strictly more mass on
/// the right.
fn tail_asymmetry(xs: &[f64]) -> Result<(f64, usize, usize)> {
    let magnitudes: Vec<f64> = xs.iter().map(|x| x.abs()).collect();
    let t = quantiles(&magnitudes, &[0.98])?[0];
    let above = xs.iter().filter(|&&x| x > t).count();
    let below = xs.iter().filter(|&&x| x < -t).count();
    Ok((t, above, below))
}

fn label_for_a(a: f64) -> String {
    format!("{a}")
}

// ---------------------------------------------------------------------------
// Experiment drivers
// ---------------------------------------------------------------------------

/// The identity battery: one verdict per acceptance-style check, all at the
/// budgets of this config rather than the fixed acceptance budgets.
fn verify_identities(
    config: &ExperimentConfig,
    law: &OffspringLaw,
    sink: &mut ArtifactSink,
) -> Result<Vec<Verdict>> {
    let b = &config.budgets;
    let seed = config.seed;
    let mut verdicts = Vec::new();

    // Martingale means at every generation up to n_max.
    let n = b.n_max;
    let tree = TreeConfig {
        freeze_cap: b.freeze(),
        particle_cap: b.particle_cap,
        ..TreeConfig::plain(n, 0)
    };
    let tracks = replica_map(b.replicas, config.workers, |r| {
        let mut rng = replica_rng(seed, streams::TREE, r);
        let run = run_tree(law, &tree, &mut rng)?;
        Ok((run.track.w, run.track.d))
    })?;
    let mut w_acc = vec![MomentAccumulator::new(); n + 1];
    let mut d_acc = vec![MomentAccumulator::new(); n + 1];
    for (w, d) in &tracks {
        for g in 0..=n {
            w_acc[g].push(w[g]);
            d_acc[g].push(d[g]);
        }
    }
    let worst = |accs: &[MomentAccumulator], target: f64| -> (f64, usize) {
        let mut worst = (0.0f64, 0usize);
        for (g, acc) in accs.iter().enumerate().skip(1) {
            let z = (acc.mean() - target) / acc.se().max(1e-300);
            if z.abs() > worst.0.abs() {
                worst = (z, g);
            }
        }
        worst
    };
    let (zw, gw) = worst(&w_acc, 1.0);
    let (zd, gd) = worst(&d_acc, 0.0);
    verdicts.push(Verdict::worst_z(
        "martingale_mean_w",
        zw,
        format!(
            "worst generation {gw}: mean {:.6} vs 1, {} replicas",
            w_acc[gw].mean(),
            b.replicas
        ),
    ));
    verdicts.push(Verdict::worst_z(
        "martingale_mean_d",
        zd,
        format!(
            "worst generation {gd}: mean {:.6} vs 0, {} replicas",
            d_acc[gd].mean(),
            b.replicas
        ),
    ));
    drop(tracks);

    // Many-to-one transfer against the exact walk CDF.
    let n_m2o = n.min(10);
    let m2o = verify_many_to_one(
        law,
        n_m2o,
        &[-1.0, 0.0, 1.0, 2.0],
        b.replicas.min(200_000) as u32,
        seed,
    )?;
    verdicts.push(Verdict::worst_z(
        "many_to_one",
        m2o.worst_z,
        format!("n = {n_m2o}, worst |z| over both estimators and 4 abscissas"),
    ));

    // Renewal tables by both estimators on the shared grid.
    let grid = default_grid();
    let ladder = estimate_r_with_cap(
        law,
        &grid,
        b.renewal_replicas,
        RenewalMethod::LadderExpectation,
        b.step_cap,
        seed,
    )?;
    let occupation = estimate_r_with_cap(
        law,
        &grid,
        b.renewal_replicas,
        RenewalMethod::Occupation,
        b.step_cap,
        seed,
    )?;
    let exact_dev = (ladder.interpolate(0.0) - 1.0)
        .abs()
        .max(ladder.interpolate(-1.0).abs())
        .max((occupation.interpolate(0.0) - 1.0).abs())
        .max(occupation.interpolate(-1.0).abs());
    verdicts.push(Verdict::bool_gate(
        "renewal_exact_endpoints",
        exact_dev == 0.0,
        exact_dev,
        0.0,
        "R(0) = 1 and R(-1) = 0 hold exactly for both estimators".into(),
    ));
    let mut worst_dual = 0.0f64;
    for &y in &[0.5, 1.0, 2.0, 5.0, 10.0] {
        let j = grid.iter().position(|&g| g == y).expect("y on grid");
        let se = (ladder.se[j].powi(2) + occupation.se[j].powi(2)).sqrt();
        let z = (ladder.r_hat[j] - occupation.r_hat[j]) / se.max(1e-300);
        if z.abs() > worst_dual.abs() {
            worst_dual = z;
        }
    }
    verdicts.push(Verdict::worst_z(
        "renewal_dual_agreement",
        worst_dual,
        format!(
            "ladder vs occupation on y in {{0.5, 1, 2, 5, 10}}, {} replicas",
            b.renewal_replicas
        ),
    ));

    // Slope identity c* = 1 / E|H1|.
    let (c_slope, c_h1) = (
        ladder.constants.c_star,
        ladder.constants.c_star_from_h1.map(|(c, _)| c),
    );
    match c_h1 {
        Some(c_h1) => {
            let rel = (c_slope - c_h1).abs() / c_slope;
            verdicts.push(Verdict::bool_gate(
                "c_star_identity",
                rel < crate::tolerances::C_STAR_REL_TOL,
                rel,
                crate::tolerances::C_STAR_REL_TOL,
                format!("slope {c_slope:.6} vs 1/mean|H1| {c_h1:.6}, exact {:.6}", exact_c_star(law)),
            ));
        }
        None => verdicts.push(Verdict::broken(
            "c_star_identity",
            &Error::Consistency("ladder table carries no mean |H1|".into()),
        )),
    }

    // Harmonicity of the tabulated R under the step law.
    let harmonic = check_harmonic(&ladder, law, b.renewal_replicas.min(100_000), seed);
    let worst_h = harmonic
        .z
        .iter()
        .copied()
        .fold(0.0f64, |acc, z| if z.abs() > acc.abs() { z } else { acc });
    verdicts.push(Verdict::worst_z(
        "harmonicity",
        worst_h,
        format!(
            "worst residual {:.5} at y = {:.2}, chi2/dof = {:.2}",
            harmonic.worst.1,
            harmonic.worst.0,
            harmonic.chi2 / harmonic.dof as f64
        ),
    ));

    // Truncated martingale mean equals R at the truncation level.
    let n_trunc = n.min(10);
    let trunc_tree = TreeConfig {
        checkpoints: vec![0],
        particle_cap: b.particle_cap,
        ..TreeConfig::plain(n_trunc, 0)
    };
    let levels = [0.0, 1.0, 2.0, 5.0];
    let trunc_rows = replica_map(b.replicas.min(100_000), config.workers, |r| {
        let mut rng = replica_rng(seed, streams::TRUNCATED, r);
        let run = run_tree(law, &trunc_tree, &mut rng)?;
        levels
            .iter()
            .map(|&y| crate::engine::truncated_martingale(&run.final_gen, y, &ladder))
            .collect::<Result<Vec<f64>>>()
    })?;
    let mut worst_trunc = 0.0f64;
    let mut worst_trunc_y = 0.0f64;
    for (k, &y) in levels.iter().enumerate() {
        let vals: Vec<f64> = trunc_rows.iter().map(|row| row[k]).collect();
        let (mean, se) = mean_se(&vals);
        let j = grid.iter().position(|&g| g == y).expect("level on grid");
        let combined = (se.powi(2) + ladder.se[j].powi(2)).sqrt();
        let z = (mean - ladder.r_hat[j]) / combined.max(1e-300);
        if z.abs() > worst_trunc.abs() {
            worst_trunc = z;
            worst_trunc_y = y;
        }
    }
    verdicts.push(Verdict::worst_z(
        "truncated_martingale",
        worst_trunc,
        format!(
            "n = {n_trunc}, worst level y = {worst_trunc_y}, levels {{0, 1, 2, 5}} vs tabulated R"
        ),
    ));
    drop(trunc_rows);

    // Mass conservation across an absorbing barrier: crossed + live + frozen
    // stays a mean-one martingale.
    let cross_tree = TreeConfig {
        n_max: n,
        horizon: b.horizon_for(n),
        freeze_cap: b.freeze(),
        particle_cap: b.particle_cap,
        checkpoints: Vec::new(),
        barrier: BarrierMode::Absorb { y: 2.0 },
        keep_crossings: false,
    };
    let masses = replica_map(b.replicas.min(50_000), config.workers, |r| {
        let mut rng = replica_rng(seed, streams::CROSSING, r);
        let run = run_tree(law, &cross_tree, &mut rng)?;
        Ok(run.final_gen.crossed_mass() + run.final_gen.w_total())
    })?;
    let (mass_mean, mass_se) = mean_se(&masses);
    verdicts.push(Verdict::z_gate(
        "crossing_mass_conservation",
        mass_mean,
        1.0,
        mass_se,
        format!(
            "absorbed + live + frozen additive mass at generation {}, y = 2",
            cross_tree.final_generation()
        ),
    ));
    drop(masses);

    // Stable sampler characteristic function, standard and family triplet.
    let std_params = StableParams::new(1.0, 0.0)?;
    let spec = limit_params(law.sigma2(), 0.0)?;
    let draws = replica_map(b.stable_draws, config.workers, |r| {
        let mut rng = replica_rng(seed, streams::STABLE, r);
        let std = crate::stable::sample_std(&mut rng);
        let fam = sample_at(1.0, &spec.params, &mut rng)?;
        Ok((std, fam))
    })?;
    let lambdas = lambda_grid();
    let cf_sup = |samples: &[f64], params: &StableParams| -> Result<f64> {
        let emp = empirical_cf(samples, &lambdas)?;
        Ok(emp
            .iter()
            .zip(&lambdas)
            .map(|(e, &l)| (e - (-psi(l, params)).exp()).norm())
            .fold(0.0, f64::max))
    };
    let std_draws: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let fam_draws: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let sup_std = cf_sup(&std_draws, &std_params)?;
    let sup_fam = cf_sup(&fam_draws, &spec.params)?;
    let cf_tol = CF_GATE / (b.stable_draws as f64).sqrt();
    verdicts.push(Verdict::bool_gate(
        "stable_cf",
        sup_std.max(sup_fam) <= cf_tol,
        sup_std.max(sup_fam),
        cf_tol,
        format!("sup CF error: standard {sup_std:.5}, family triplet {sup_fam:.5}"),
    ));
    let n_add = b.stable_draws.min(100_000);
    let adds = replica_map(n_add, config.workers, |r| {
        let mut rng = replica_rng(seed, streams::MIXTURE, r);
        let two = sample_at(2.0, &std_params, &mut rng)?;
        let one_plus_one =
            sample_at(1.0, &std_params, &mut rng)? + sample_at(1.0, &std_params, &mut rng)?;
        Ok((two, one_plus_one))
    })?;
    let ks = ks_two_sample(
        &adds.iter().map(|a| a.0).collect::<Vec<f64>>(),
        &adds.iter().map(|a| a.1).collect::<Vec<f64>>(),
    )?;
    verdicts.push(Verdict {
        name: "stable_additivity".into(),
        value: ks.p_value,
        target: KS_P_MIN,
        z: None,
        p_value: Some(ks.p_value),
        pass: ks.p_value > KS_P_MIN,
        detail: format!("X_2 vs X_1 + X_1', KS statistic {:.5}, {n_add} draws", ks.statistic),
    });
    drop(draws);
    drop(adds);

    // Window-barrier partition audit and exact recombination.
    let a0 = config.barrier.a_list[0];
    let n_part = n.min(8);
    let schedule = config.barrier.schedule_for(n_part)?;
    let activation = (a0 * n_part as f64).ceil() as usize;
    let part_tree = TreeConfig {
        n_max: n_part,
        horizon: activation - n_part + 4,
        freeze_cap: b.freeze(),
        particle_cap: b.particle_cap,
        checkpoints: Vec::new(),
        barrier: BarrierMode::Window { schedule, a: a0 },
        keep_crossings: false,
    };
    let (c_star, alpha_star) = (ladder.constants.c_star, ladder.constants.alpha_star);
    let partition = replica_map(b.replicas.min(2_000), config.workers, |r| {
        let mut rng = replica_rng(seed, streams::PARTITION, r);
        let run = run_tree(law, &part_tree, &mut rng)?;
        let q = barrier_quantities(&run.final_gen, &schedule, activation, c_star, alpha_star)?;
        let d_live = run.final_gen.d_live;
        let rel = if d_live == 0.0 {
            (q.recombined_d(c_star, alpha_star, schedule.gamma)).abs()
        } else {
            (q.recombined_d(c_star, alpha_star, schedule.gamma) - c_star * d_live).abs()
                / (c_star * d_live).abs().max(1e-12)
        };
        Ok((q.partition_violations, rel))
    })?;
    let violations: u64 = partition.iter().map(|p| p.0).sum();
    let worst_rel = partition.iter().map(|p| p.1).fold(0.0, f64::max);
    verdicts.push(Verdict::bool_gate(
        "barrier_partition",
        violations == 0,
        violations as f64,
        0.0,
        format!("{} trees, schedule n = {n_part}, a = {a0}", partition.len()),
    ));
    verdicts.push(Verdict::bool_gate(
        "barrier_recombination",
        worst_rel <= 1e-9,
        worst_rel,
        1e-9,
        "c* D_live reassembled from the three buckets, worst relative error".into(),
    ));

    // Seneta-Heyde ratio trend over the n grid.
    let sh_grid: Vec<usize> = if b.n_grid.is_empty() {
        vec![8, 12, 16, 20]
    } else {
        b.n_grid.clone()
    };
    let sh = seneta_heyde_medians(config, law, &sh_grid, b.replicas.min(4_000))?;
    verdicts.push(sh.trend_verdict(law));
    verdicts.push(sh.correlation_verdict());

    // Right-tail index of the scaled fluctuation statistic.
    let n_fluct = 12;
    let rows = fluctuation_rows(
        config,
        law,
        n_fluct,
        &[1.0],
        b.replicas.min(20_000),
        streams::FLUCTUATION,
    )?;
    let c = exact_c_star(law);
    let scaled: Vec<f64> = rows.iter().map(|row| c * row.statistics[0]).collect();
    match hill_index(&scaled, hill_default_top_fraction(scaled.len())) {
        Ok(h) => verdicts.push(Verdict::bool_gate(
            "fluctuation_tail_index",
            (HILL_BRACKET.0..=HILL_BRACKET.1).contains(&h),
            h,
            1.0,
            format!(
                "Hill index of the right tail of c* Phi_{n_fluct}(a = 1), bracket [{}, {}]",
                HILL_BRACKET.0, HILL_BRACKET.1
            ),
        )),
        Err(e) => verdicts.push(Verdict::broken("fluctuation_tail_index", &e)),
    }
    match tail_asymmetry(&scaled) {
        Ok((t, above, below)) => verdicts.push(Verdict::bool_gate(
            "fluctuation_tail_asymmetry",
            above > below,
            above as f64 - below as f64,
            0.0,
            format!("{above} samples above +{t:.3} vs {below} below -{t:.3}"),
        )),
        Err(e) => verdicts.push(Verdict::broken("fluctuation_tail_asymmetry", &e)),
    }
    drop(rows);

    // Scaled survival probability drift across the walk grid.
    let walk_grid: Vec<usize> = vec![64, 256, 1024];
    let survival = delta_n_report(law, &walk_grid, b.walk_replicas, seed)?;
    let thetas: Vec<f64> = survival.iter().map(|e| e.theta_star_hat).collect();
    let spread = (thetas.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - thetas.iter().copied().fold(f64::INFINITY, f64::min))
        / thetas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    verdicts.push(Verdict::bool_gate(
        "survival_scaled_drift",
        spread < SURVIVAL_DRIFT_REL_TOL,
        spread,
        SURVIVAL_DRIFT_REL_TOL,
        format!("relative spread of sqrt(n) P(min >= 0) over n in {walk_grid:?}"),
    ));
    let worst_surv = survival
        .iter()
        .map(|e| (e.p_hat - exact_symmetric_survival(e.n)) / e.se.max(1e-300))
        .fold(0.0f64, |acc, z| if z.abs() > acc.abs() { z } else { acc });
    verdicts.push(Verdict::worst_z(
        "survival_vs_ballot",
        worst_surv,
        "each survival estimate against the exact ballot probability".into(),
    ));

    // Determinism self-check: the first means batch, recomputed on one
    // worker and on the configured pool, must agree byte for byte.
    let det_n = b.replicas.min(500);
    let det = |workers: usize| -> Result<Vec<String>> {
        let rows = replica_map(det_n, workers, |r| {
            let mut rng = replica_rng(seed, streams::TREE, r);
            let run = run_tree(law, &tree, &mut rng)?;
            Ok(format!(
                "{},{}",
                fmt(*run.track.w.last().unwrap()),
                fmt(*run.track.d.last().unwrap())
            ))
        })?;
        Ok(rows)
    };
    let sequential = det(1)?;
    let pooled = det(config.workers.max(3))?;
    verdicts.push(Verdict::bool_gate(
        "determinism",
        sequential == pooled,
        (sequential != pooled) as u64 as f64,
        0.0,
        format!("{det_n} replicas rendered on 1 vs {} workers", config.workers.max(3)),
    ));

    sink.write_csv(
        "verify_checks.csv",
        &["name", "value", "target", "z", "pass"],
        verdicts.iter().map(|v| {
            vec![
                v.name.clone(),
                fmt(v.value),
                fmt(v.target),
                v.z.map_or(String::new(), fmt),
                v.pass.to_string(),
            ]
        }),
    )?;
    Ok(verdicts)
}

/// Builds the renewal tables by both estimators, checks their internal
/// diagnostics, and emits the tabulation.
fn renewal_build(
    config: &ExperimentConfig,
    law: &OffspringLaw,
    sink: &mut ArtifactSink,
) -> Result<Vec<Verdict>> {
    let b = &config.budgets;
    let grid = default_grid();
    let ladder = estimate_r_with_cap(
        law,
        &grid,
        b.renewal_replicas,
        RenewalMethod::LadderExpectation,
        b.step_cap,
        config.seed,
    )?;
    let occupation = estimate_r_with_cap(
        law,
        &grid,
        b.renewal_replicas,
        RenewalMethod::Occupation,
        b.step_cap,
        config.seed,
    )?;

    let mut verdicts = Vec::new();
    let exact_dev = (ladder.r_hat[0] - 1.0).abs().max((occupation.r_hat[0] - 1.0).abs());
    verdicts.push(Verdict::bool_gate(
        "renewal_exact_endpoints",
        exact_dev == 0.0,
        exact_dev,
        0.0,
        "both estimators tabulate R(0) = 1 exactly".into(),
    ));
    let mut worst_dual = 0.0f64;
    for j in 0..grid.len() {
        let se = (ladder.se[j].powi(2) + occupation.se[j].powi(2)).sqrt();
        if se == 0.0 {
            continue;
        }
        let z = (ladder.r_hat[j] - occupation.r_hat[j]) / se;
        if z.abs() > worst_dual.abs() {
            worst_dual = z;
        }
    }
    verdicts.push(Verdict::worst_z(
        "renewal_dual_agreement",
        worst_dual,
        format!("worst grid point over {} shared y values", grid.len()),
    ));
    let c = ladder.constants;
    if let Some((c_h1, _)) = c.c_star_from_h1 {
        let rel = (c.c_star - c_h1).abs() / c.c_star;
        verdicts.push(Verdict::bool_gate(
            "c_star_identity",
            rel < crate::tolerances::C_STAR_REL_TOL,
            rel,
            crate::tolerances::C_STAR_REL_TOL,
            format!(
                "slope {:.6} (se {:.6}) vs 1/mean|H1| {c_h1:.6}; exact {:.6}",
                c.c_star,
                c.c_star_se,
                exact_c_star(law)
            ),
        ));
    }
    verdicts.push(Verdict::bool_gate(
        "slope_routes_consistent",
        !c.disagreement_flagged,
        c.disagreement_flagged as u64 as f64,
        0.0,
        "least-squares slope vs ladder-height route within combined gate".into(),
    ));
    verdicts.push(Verdict::bool_gate(
        "monotone_raw_estimates",
        !ladder.monotone_flagged && !occupation.monotone_flagged,
        (ladder.monotone_flagged || occupation.monotone_flagged) as u64 as f64,
        0.0,
        "raw columns nondecreasing within noise before isotonic cleanup".into(),
    ));
    let harmonic = check_harmonic(&ladder, law, b.renewal_replicas.min(100_000), config.seed);
    let worst_h = harmonic
        .z
        .iter()
        .copied()
        .fold(0.0f64, |acc, z| if z.abs() > acc.abs() { z } else { acc });
    verdicts.push(Verdict::worst_z(
        "harmonicity",
        worst_h,
        format!(
            "worst residual {:.5} at y = {:.2}, chi2/dof = {:.2}",
            harmonic.worst.1,
            harmonic.worst.0,
            harmonic.chi2 / harmonic.dof as f64
        ),
    ));

    let rows = |table: &RenewalTable| -> Vec<Vec<String>> {
        table
            .grid
            .iter()
            .zip(table.r_hat.iter().zip(&table.se))
            .map(|(&y, (&r, &se))| {
                vec![fmt(y), fmt(r), fmt(se), table.method.label().to_string()]
            })
            .collect()
    };
    let mut all_rows = rows(&ladder);
    all_rows.extend(rows(&occupation));
    sink.write_csv("renewal.csv", &["y", "r_hat", "se", "method"], all_rows)?;
    Ok(verdicts)
}

/// Fluctuation experiment: the statistic against its stable-mixture
/// reference for every configured `a`.
fn fluctuation(
    config: &ExperimentConfig,
    law: &OffspringLaw,
    sink: &mut ArtifactSink,
) -> Result<Vec<Verdict>> {
    let b = &config.budgets;
    let n = b.n_max;
    let a_list = config.barrier.a_list.clone();
    let rows = fluctuation_rows(config, law, n, &a_list, b.replicas, streams::FLUCTUATION)?;
    let c_star = exact_c_star(law);

    // Mixing sample: the limit proxy, clamped into the nonnegative support
    // of the mixture time parameter (finite-n proxies dip below zero with
    // small probability; the clamp is reported, never silent).
    let d_proxy: Vec<f64> = rows.iter().map(|r| r.d_proxy).collect();
    let clamped: Vec<f64> = d_proxy.iter().map(|&d| d.max(0.0)).collect();
    let clamped_count = d_proxy.iter().filter(|&&d| d < 0.0).count();
    let positive = clamped.iter().filter(|&&d| d > 0.0).count();

    let mut verdicts = Vec::new();
    verdicts.push(Verdict::bool_gate(
        "mixture_nondegenerate",
        positive > 0,
        positive as f64,
        1.0,
        format!(
            "{positive} of {} mixing values positive; {clamped_count} negative proxies clamped to 0",
            clamped.len()
        ),
    ));

    let c0 = estimate_c0(&d_proxy, &c0_grid())?;
    verdicts.push(Verdict::bool_gate(
        "c0_plateau",
        !c0.flagged,
        if c0.flagged { f64::NAN } else { c0.c0_hat },
        f64::NAN,
        match c0.plateau {
            Some((lo, hi)) => format!(
                "plateau over y in [{:.2}, {:.2}], c0_hat = {:.4}",
                c0.points[lo].y, c0.points[hi].y, c0.c0_hat
            ),
            None => "no flat window found in the tail-centering diagnostic".into(),
        },
    ));
    let c0_hat = if c0.flagged { 0.0 } else { c0.c0_hat };
    let spec = limit_params(law.sigma2(), c0_hat)?;

    for (k, &a) in a_list.iter().enumerate() {
        let label = label_for_a(a);
        let scaled: Vec<f64> = rows.iter().map(|r| c_star * r.statistics[k]).collect();
        let mut rng = replica_rng(config.seed, streams::MIXTURE, k as u32);
        let reference = mixture_sample(&clamped, a, &spec.params, &mut rng)?;

        match hill_index(&scaled, hill_default_top_fraction(scaled.len())) {
            Ok(h) => verdicts.push(Verdict::bool_gate(
                &format!("tail_index_a{label}"),
                (HILL_BRACKET.0..=HILL_BRACKET.1).contains(&h),
                h,
                1.0,
                format!("Hill index of the right tail of c* Phi_{n}(a = {label})"),
            )),
            Err(e) => verdicts.push(Verdict::broken(&format!("tail_index_a{label}"), &e)),
        }
        match tail_asymmetry(&scaled) {
            Ok((t, above, below)) => verdicts.push(Verdict::bool_gate(
                &format!("tail_asymmetry_a{label}"),
                above > below,
                above as f64 - below as f64,
                0.0,
                format!("{above} above +{t:.3} vs {below} below -{t:.3}"),
            )),
            Err(e) => verdicts.push(Verdict::broken(&format!("tail_asymmetry_a{label}"), &e)),
        }
        // Distributional distance to the reference is reported, not gated:
        // the limiting statement carries no rate, so finite-n mismatch is
        // expected and informative.
        let ks = ks_two_sample(&scaled, &reference)?;
        let cf_emp = empirical_cf(&scaled, &lambda_grid())?;
        let cf_ref = empirical_cf(&reference, &lambda_grid())?;
        let cf_dist = cf_emp
            .iter()
            .zip(&cf_ref)
            .map(|(e, r)| (e - r).norm())
            .fold(0.0, f64::max);
        verdicts.push(Verdict {
            name: format!("reference_distance_a{label}"),
            value: ks.statistic,
            target: f64::NAN,
            z: None,
            p_value: Some(ks.p_value),
            pass: true,
            detail: format!(
                "informational: KS {:.4}, sup CF distance {:.4} vs mixture at c0_hat = {:.4}",
                ks.statistic, cf_dist, c0_hat
            ),
        });

        sink.write_csv(
            &format!("fluctuation_a{label}.csv"),
            &["replica", "n", "w_n", "d_n", "statistic", "lost_mass"],
            rows.iter().enumerate().map(|(i, r)| {
                vec![
                    i.to_string(),
                    n.to_string(),
                    fmt(r.w_n),
                    fmt(r.d_n),
                    fmt(r.statistics[k]),
                    fmt(r.lost_mass),
                ]
            }),
        )?;
        sink.write_csv(
            &format!("fluctuation_reference_a{label}.csv"),
            &["replica", "scaled_statistic", "reference"],
            scaled
                .iter()
                .zip(&reference)
                .enumerate()
                .map(|(i, (&s, &m))| vec![i.to_string(), fmt(s), fmt(m)]),
        )?;
        let q_emp = quantiles(&scaled, &QUANTILE_LEVELS)?;
        let q_ref = quantiles(&reference, &QUANTILE_LEVELS)?;
        sink.write_csv(
            &format!("fluctuation_quantiles_a{label}.csv"),
            &["level", "scaled_statistic", "reference"],
            QUANTILE_LEVELS
                .iter()
                .zip(q_emp.iter().zip(&q_ref))
                .map(|(&l, (&e, &r))| vec![fmt(l), fmt(e), fmt(r)]),
        )?;
    }
    Ok(verdicts)
}

/// Per-n summary of the Seneta-Heyde ratio sample.
struct ShSummary {
    grid: Vec<usize>,
    medians: Vec<f64>,
    median_ses: Vec<f64>,
    correlations: Vec<f64>,
    rows: Vec<Vec<(f64, f64, f64)>>,
}

impl ShSummary {
    /// The median trajectory crosses the norming constant and overshoots
    /// at simulable depths (a pilot-calibrated, freeze-cap-independent
    /// property of the statistic), so the gate checks that the sequence
    /// moves monotonically with 3-SE slack and stays inside the bracket
    /// around the constant, rather than demanding per-step approach.
    fn trend_verdict(&self, law: &OffspringLaw) -> Verdict {
        let target = (2.0 / (std::f64::consts::PI * law.sigma2())).sqrt();
        let worst_dev = self
            .medians
            .iter()
            .map(|m| (m - target).abs())
            .fold(0.0, f64::max);
        let in_bracket = worst_dev <= SH_BRACKET_HALF_WIDTH;
        let last = self.medians.len() - 1;
        let direction = (self.medians[last] - self.medians[0]).signum();
        let mut monotone = true;
        for k in 1..self.medians.len() {
            let slack =
                Z_GATE * (self.median_ses[k].powi(2) + self.median_ses[k - 1].powi(2)).sqrt();
            if direction * (self.medians[k] - self.medians[k - 1]) < -slack {
                monotone = false;
            }
        }
        Verdict::bool_gate(
            "ratio_median_trend",
            in_bracket && monotone,
            worst_dev,
            SH_BRACKET_HALF_WIDTH,
            format!(
                "medians per n: {:?} vs {target:.4}; worst |dev| {worst_dev:.4}, monotone sequence: {monotone}",
                self.medians
                    .iter()
                    .map(|m| format!("{m:.4}"))
                    .collect::<Vec<_>>()
            ),
        )
    }

    fn correlation_verdict(&self) -> Verdict {
        let min_rho = self
            .correlations
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        Verdict::bool_gate(
            "rank_correlation_positive",
            min_rho > 0.0,
            min_rho,
            0.0,
            format!(
                "Spearman rho of (sqrt(n) W_n, D_(n+M)) per n: {:?}",
                self.correlations
                    .iter()
                    .map(|r| format!("{r:.3}"))
                    .collect::<Vec<_>>()
            ),
        )
    }
}

/// Simulates the paired sample `(sqrt(n) W_n, D_{n+M})` over the grid. The
/// replica streams are shared across grid points on purpose: common random
/// numbers couple the trees, which stabilizes the median trajectory that the
/// trend gate inspects.
fn seneta_heyde_medians(
    config: &ExperimentConfig,
    law: &OffspringLaw,
    grid: &[usize],
    replicas: usize,
) -> Result<ShSummary> {
    let b = &config.budgets;
    let seed = config.seed;
    let mut summary = ShSummary {
        grid: grid.to_vec(),
        medians: Vec::new(),
        median_ses: Vec::new(),
        correlations: Vec::new(),
        rows: Vec::new(),
    };
    for &n in grid {
        let tree = TreeConfig {
            freeze_cap: b.freeze(),
            particle_cap: b.particle_cap,
            ..TreeConfig::plain(n, b.horizon_for(n))
        };
        let rows = replica_map(replicas, config.workers, |r| {
            let mut rng = replica_rng(seed, streams::SENETA_HEYDE, r);
            let run = run_tree(law, &tree, &mut rng)?;
            let w_n = run.track.w[n];
            let d = run.track.d_infty_proxy;
            let ratio = if d != 0.0 {
                (n as f64).sqrt() * w_n / d
            } else {
                f64::NAN
            };
            Ok((w_n, d, ratio))
        })?;
        let ratios: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let (median, median_se) = median_with_se(&ratios)?;
        let scaled_w: Vec<f64> = rows.iter().map(|r| (n as f64).sqrt() * r.0).collect();
        let d: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let rho = spearman(&scaled_w, &d)?;
        summary.medians.push(median);
        summary.median_ses.push(median_se);
        summary.correlations.push(rho);
        summary.rows.push(rows);
    }
    Ok(summary)
}

/// Seneta-Heyde experiment: ratio medians against the norming constant plus
/// the paired-sample rank correlation.
fn seneta_heyde(
    config: &ExperimentConfig,
    law: &OffspringLaw,
    sink: &mut ArtifactSink,
) -> Result<Vec<Verdict>> {
    let b = &config.budgets;
    let grid: Vec<usize> = if b.n_grid.is_empty() {
        vec![8, 12, 16, 20]
    } else {
        b.n_grid.clone()
    };
    let summary = seneta_heyde_medians(config, law, &grid, b.replicas)?;
    let target = (2.0 / (std::f64::consts::PI * law.sigma2())).sqrt();

    let mut verdicts = vec![summary.trend_verdict(law), summary.correlation_verdict()];
    let last = summary.medians.last().copied().unwrap();
    let last_se = summary.median_ses.last().copied().unwrap();
    verdicts.push(Verdict {
        name: "ratio_median_final".into(),
        value: last,
        target,
        z: Some((last - target) / last_se.max(1e-300)),
        p_value: None,
        pass: true,
        detail: format!(
            "informational: median at n = {} vs the limit constant; no rate is gated",
            grid.last().unwrap()
        ),
    });

    sink.write_csv(
        "seneta_heyde.csv",
        &["replica", "n", "w_n", "d_n", "statistic", "lost_mass"],
        summary.grid.iter().zip(&summary.rows).flat_map(|(&n, rows)| {
            rows.iter().enumerate().map(move |(i, &(w, d, ratio))| {
                vec![
                    i.to_string(),
                    n.to_string(),
                    fmt(w),
                    fmt(d),
                    fmt(ratio),
                    fmt(0.0),
                ]
            })
        }),
    )?;
    Ok(verdicts)
}

/// Stable sampler check: CF against the exact exponent for the standard and
/// family-derived parameters, plus Lévy additivity.
fn stable_check(
    config: &ExperimentConfig,
    law: &OffspringLaw,
    sink: &mut ArtifactSink,
) -> Result<Vec<Verdict>> {
    let b = &config.budgets;
    let seed = config.seed;
    let std_params = StableParams::new(1.0, 0.0)?;
    let spec = limit_params(law.sigma2(), 0.0)?;
    let draws = replica_map(b.stable_draws, config.workers, |r| {
        let mut rng = replica_rng(seed, streams::STABLE, r);
        let std = crate::stable::sample_std(&mut rng);
        let fam = sample_at(1.0, &spec.params, &mut rng)?;
        Ok((std, fam))
    })?;
    let std_draws: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let fam_draws: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let lambdas = lambda_grid();
    let cf_tol = CF_GATE / (b.stable_draws as f64).sqrt();

    let mut verdicts = Vec::new();
    let mut cf_rows: Vec<Vec<String>> = Vec::new();
    for (name, samples, params) in [
        ("standard", &std_draws, &std_params),
        ("family", &fam_draws, &spec.params),
    ] {
        let emp = empirical_cf(samples, &lambdas)?;
        let mut sup = 0.0f64;
        for (e, &l) in emp.iter().zip(&lambdas) {
            let reference = (-psi(l, params)).exp();
            let err = (e - reference).norm();
            sup = sup.max(err);
            cf_rows.push(vec![
                name.to_string(),
                fmt(l),
                fmt(e.re),
                fmt(e.im),
                fmt(reference.re),
                fmt(reference.im),
                fmt(err),
            ]);
        }
        verdicts.push(Verdict::bool_gate(
            &format!("stable_cf_{name}"),
            sup <= cf_tol,
            sup,
            cf_tol,
            format!(
                "sup over {} grid points at {} draws (scale {:.4}, drift {:.4})",
                lambdas.len(),
                b.stable_draws,
                params.scale,
                params.drift
            ),
        ));
    }

    let n_add = b.stable_draws.min(100_000);
    let adds = replica_map(n_add, config.workers, |r| {
        let mut rng = replica_rng(seed, streams::MIXTURE, r);
        let two = sample_at(2.0, &std_params, &mut rng)?;
        let one_plus_one =
            sample_at(1.0, &std_params, &mut rng)? + sample_at(1.0, &std_params, &mut rng)?;
        Ok((two, one_plus_one))
    })?;
    let ks = ks_two_sample(
        &adds.iter().map(|a| a.0).collect::<Vec<f64>>(),
        &adds.iter().map(|a| a.1).collect::<Vec<f64>>(),
    )?;
    verdicts.push(Verdict {
        name: "stable_additivity".into(),
        value: ks.p_value,
        target: KS_P_MIN,
        z: None,
        p_value: Some(ks.p_value),
        pass: ks.p_value > KS_P_MIN,
        detail: format!("X_2 vs X_1 + X_1', KS statistic {:.5}, {n_add} draws", ks.statistic),
    });

    sink.write_csv(
        "stable_cf.csv",
        &["law", "lambda", "emp_re", "emp_im", "ref_re", "ref_im", "abs_err"],
        cf_rows,
    )?;
    let emit = b.stable_draws.min(100_000);
    sink.write_csv(
        "stable_samples.csv",
        &["replica", "standard", "family"],
        draws
            .iter()
            .take(emit)
            .enumerate()
            .map(|(i, &(s, f))| vec![i.to_string(), fmt(s), fmt(f)]),
    )?;
    Ok(verdicts)
}

/// Survival-probability report over the walk grid.
fn delta_n_driver(
    config: &ExperimentConfig,
    law: &OffspringLaw,
    sink: &mut ArtifactSink,
) -> Result<Vec<Verdict>> {
    let b = &config.budgets;
    let grid: Vec<usize> = if b.n_grid.is_empty() {
        vec![64, 256, 1024]
    } else {
        b.n_grid.clone()
    };
    let report = delta_n_report(law, &grid, b.walk_replicas, config.seed)?;

    let thetas: Vec<f64> = report.iter().map(|e| e.theta_star_hat).collect();
    let theta_max = thetas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let theta_min = thetas.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = (theta_max - theta_min) / theta_max;
    let mut verdicts = vec![Verdict::bool_gate(
        "survival_scaled_drift",
        spread < SURVIVAL_DRIFT_REL_TOL,
        spread,
        SURVIVAL_DRIFT_REL_TOL,
        format!("sqrt(n) p_hat per n: {thetas:?}"),
    )];
    let worst = report
        .iter()
        .map(|e| (e.p_hat - exact_symmetric_survival(e.n)) / e.se.max(1e-300))
        .fold(0.0f64, |acc, z| if z.abs() > acc.abs() { z } else { acc });
    verdicts.push(Verdict::worst_z(
        "survival_vs_ballot",
        worst,
        format!(
            "each p_hat against the exact ballot value at {} replicas",
            b.walk_replicas
        ),
    ));

    sink.write_csv(
        "delta_n.csv",
        &["n", "p_hat", "se", "delta_hat"],
        report.iter().map(|e| {
            vec![e.n.to_string(), fmt(e.p_hat), fmt(e.se), fmt(e.delta_n_hat)]
        }),
    )?;
    Ok(verdicts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config(experiment: ExperimentKind) -> ExperimentConfig {
        let mut config = ExperimentConfig::default_for(experiment);
        config.budgets.replicas = 400;
        config.budgets.n_max = 6;
        config.budgets.horizon = Some(2);
        config.budgets.walk_replicas = 20_000;
        config.budgets.renewal_replicas = 2_000;
        config.budgets.step_cap = 20_000;
        config.budgets.stable_draws = 20_000;
        config.budgets.n_grid = vec![4, 9];
        config
    }

    #[test]
    fn strict_parsing_rejects_unknown_keys() {
        let good = r#"
            experiment = "delta_n_report"
            [law]
            family = "dyadic"
        "#;
        let config = ExperimentConfig::from_toml_str(good).unwrap();
        assert_eq!(config.experiment, ExperimentKind::DeltaNReport);
        assert_eq!(config.seed, 1);
        assert_eq!(config.budgets.replicas, 20_000);

        for bad in [
            "experiment = \"delta_n_report\"\nbogus = 1\n[law]\nfamily = \"dyadic\"",
            "experiment = \"delta_n_report\"\n[law]\nfamily = \"dyadic\"\n[budgets]\ntypo = 3",
            "experiment = \"no_such_thing\"\n[law]\nfamily = \"dyadic\"",
        ] {
            assert!(matches!(
                ExperimentConfig::from_toml_str(bad),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn law_block_is_validated() {
        let poisson_without_m = r#"
            experiment = "stable_check"
            [law]
            family = "poisson"
        "#;
        assert!(ExperimentConfig::from_toml_str(poisson_without_m).is_err());

        let dyadic_with_m = r#"
            experiment = "stable_check"
            [law]
            family = "dyadic"
            m = 3.0
        "#;
        assert!(ExperimentConfig::from_toml_str(dyadic_with_m).is_err());

        let poisson = r#"
            experiment = "stable_check"
            [law]
            family = "poisson"
            m = 3.0
        "#;
        let config = ExperimentConfig::from_toml_str(poisson).unwrap();
        assert_eq!(config.law.build().unwrap().offspring_mean(), 3.0);

        let subcritical = r#"
            experiment = "stable_check"
            [law]
            family = "poisson"
            m = 0.5
        "#;
        assert!(ExperimentConfig::from_toml_str(subcritical).is_err());
    }

    #[test]
    fn output_dir_precedence_is_cli_env_config_default() {
        let cli = PathBuf::from("/tmp/cli");
        assert_eq!(
            resolve_output_from(Some(&cli), Some("/tmp/env"), Some("/tmp/cfg")),
            cli
        );
        assert_eq!(
            resolve_output_from(None, Some("/tmp/env"), Some("/tmp/cfg")),
            PathBuf::from("/tmp/env")
        );
        assert_eq!(
            resolve_output_from(None, None, Some("/tmp/cfg")),
            PathBuf::from("/tmp/cfg")
        );
        assert_eq!(
            resolve_output_from(None, None, None),
            PathBuf::from(DEFAULT_OUTPUT_DIR)
        );
    }

    #[test]
    fn replica_map_is_worker_count_invariant() {
        let f = |r: u32| -> Result<u64> {
            let mut acc = r as u64;
            for _ in 0..50 {
                acc = acc.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            }
            Ok(acc)
        };
        let sequential = replica_map(1_000, 1, f).unwrap();
        let pooled = replica_map(1_000, 3, f).unwrap();
        assert_eq!(sequential, pooled);

        let failing = replica_map(10, 3, |r| {
            if r >= 5 {
                Err(Error::Domain(format!("replica {r}")))
            } else {
                Ok(r)
            }
        });
        assert!(matches!(failing, Err(Error::Domain(msg)) if msg == "replica 5"));
    }

    #[test]
    fn subcommand_must_match_config_experiment() {
        let config = micro_config(ExperimentKind::DeltaNReport);
        let err = run_subcommand(ExperimentKind::StableCheck, &config, &Overrides::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn delta_n_run_is_reproducible_byte_for_byte() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = micro_config(ExperimentKind::DeltaNReport);
        let over = |dir: &tempfile::TempDir, workers: usize| Overrides {
            seed: None,
            workers: Some(workers),
            out: Some(dir.path().to_path_buf()),
        };
        let first = run(&config, &over(&dir_a, 1)).unwrap();
        let second = run(&config, &over(&dir_b, 3)).unwrap();
        assert!(!first.verdicts.is_empty());
        assert_eq!(first.artifacts, vec!["delta_n.csv".to_string()]);
        let bytes_a = std::fs::read(dir_a.path().join("delta_n.csv")).unwrap();
        let bytes_b = std::fs::read(dir_b.path().join("delta_n.csv")).unwrap();
        assert!(!bytes_a.is_empty());
        assert_eq!(bytes_a, bytes_b);
        assert!(second.passed, "{}", second.render());
        assert!(dir_a.path().join("result.json").exists());
    }

    #[test]
    fn fluctuation_micro_run_completes_and_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = micro_config(ExperimentKind::Fluctuation);
        let run_in = |dir: &tempfile::TempDir, workers: usize| {
            run(
                &config,
                &Overrides {
                    seed: None,
                    workers: Some(workers),
                    out: Some(dir.path().to_path_buf()),
                },
            )
            .unwrap()
        };
        let first = run_in(&dir_a, 1);
        let second = run_in(&dir_b, 3);
        assert_eq!(first.artifacts, second.artifacts);
        assert!(first
            .artifacts
            .iter()
            .any(|a| a == "fluctuation_a1.csv"));
        for name in &first.artifacts {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "artifact {name} differs across worker counts");
        }
        // Micro budgets are too small for some statistical gates; the run
        // completing with the frozen artifact set is what this test pins.
        assert!(first.verdicts.iter().any(|v| v.name == "mixture_nondegenerate" && v.pass));
    }

    #[test]
    fn freeze_cap_zero_disables_pruning() {
        let mut config = micro_config(ExperimentKind::Fluctuation);
        config.budgets.freeze_cap = 0.0;
        assert_eq!(config.budgets.freeze(), None);
        config.budgets.freeze_cap = 8.5;
        assert_eq!(config.budgets.freeze(), Some(8.5));
    }
}
