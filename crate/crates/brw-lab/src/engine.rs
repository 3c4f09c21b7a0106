//! Generation-by-generation simulation of the branching random walk, with
//! the martingale tracks `W_n` and `D_n`, the truncated martingale
//! `D_n^{-y}`, barrier crossing ledgers, the good/bad crossing partition,
//! and the fluctuation statistic.
//!
//! Populations in the boundary regime grow like `2^n`, so deep runs prune
//! with a freeze cap: a child placed above `K` is removed and its exact
//! conditional contributions `e^{-V}` (to every future `W`) and `V e^{-V}`
//! (to every future `D`) are added to frozen totals. Freezing replaces a
//! subtree by its expected contribution, so all martingale means are
//! preserved exactly while the population stays bounded; the frozen mass is
//! surfaced as `lost_mass_upper` so tests can bound what the live
//! population no longer resolves.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::OffspringLaw;
use crate::renewal::RenewalTable;
use crate::stats::KahanSum;

/// Barrier level `gamma_n = (1/2) log n + beta_n` used by the windowed
/// crossing decomposition.
#[derive(Debug, Clone, Copy)]
pub struct BarrierSchedule {
    pub n: usize,
    pub beta: f64,
    pub gamma: f64,
}

impl BarrierSchedule {
    pub fn new(n: usize, beta: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Parameter {
                name: "n",
                reason: "barrier schedule needs n >= 1".into(),
            });
        }
        if beta <= 0.0 || !beta.is_finite() {
            return Err(Error::Parameter {
                name: "beta_n",
                reason: format!("must be positive and finite, got {beta}"),
            });
        }
        Ok(BarrierSchedule {
            n,
            beta,
            gamma: 0.5 * (n as f64).ln() + beta,
        })
    }

    /// The default rule `beta_n = log n` (any choice growing past
    /// `(1/2) log n` works; this one keeps the level and the undershoot
    /// window on the same scale).
    pub fn with_default_beta(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Parameter {
                name: "n",
                reason: "default beta_n = log n needs n >= 2".into(),
            });
        }
        Self::new(n, (n as f64).ln())
    }
}

/// Lower-barrier behaviour of a run.
#[derive(Debug, Clone, Copy)]
pub enum BarrierMode {
    /// No lower barrier.
    None,
    /// Particles are absorbed at their first entry below `-y` (from
    /// generation 1 on): removed from the population, recorded in the
    /// crossing ledger.
    Absorb { y: f64 },
    /// Crossing decomposition: from generation `ceil(a n)` on, particles
    /// are tagged by whether their path has stayed at or above `gamma_n`;
    /// first crossings are recorded but the particles keep evolving, so the
    /// full population is partitioned rather than pruned.
    Window { schedule: BarrierSchedule, a: f64 },
}

/// One simulated tree's configuration.
#[derive(Debug, Clone)]
pub struct TreeConfig {
    /// Target generation of the statistics of interest.
    pub n_max: usize,
    /// Extra generations past `n_max`; the run ends at `n_max + horizon`
    /// and `D` there serves as the limit proxy.
    pub horizon: usize,
    /// Freeze cap `K`: children above it are converted to frozen mass.
    pub freeze_cap: Option<f64>,
    /// Hard population cap; exceeding it is an error, never a silent bias.
    pub particle_cap: usize,
    /// Generations whose running path minima are tracked per particle.
    pub checkpoints: Vec<usize>,
    pub barrier: BarrierMode,
    /// Retain individual crossing records (the ledger) rather than only
    /// aggregate sums.
    pub keep_crossings: bool,
}

impl TreeConfig {
    /// A run with no pruning, no barrier and no checkpoints.
    pub fn plain(n_max: usize, horizon: usize) -> Self {
        TreeConfig {
            n_max,
            horizon,
            freeze_cap: None,
            particle_cap: 10_000_000,
            checkpoints: Vec::new(),
            barrier: BarrierMode::None,
            keep_crossings: false,
        }
    }

    pub fn final_generation(&self) -> usize {
        self.n_max + self.horizon
    }

    /// First generation at which window tags exist, if any.
    pub fn activation(&self) -> Option<usize> {
        match self.barrier {
            BarrierMode::Window { schedule, a } => {
                Some(((a * schedule.n as f64).ceil()) as usize)
            }
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.particle_cap == 0 {
            return Err(Error::Parameter {
                name: "particle_cap",
                reason: "must be positive".into(),
            });
        }
        match self.barrier {
            BarrierMode::Absorb { y } if y.is_nan() || y < 0.0 => Err(Error::Parameter {
                name: "y",
                reason: format!("absorbing level needs y >= 0, got {y}"),
            }),
            BarrierMode::Window { a, schedule } => {
                if a < 1.0 || !a.is_finite() {
                    return Err(Error::Parameter {
                        name: "a",
                        reason: format!("window scaling needs a >= 1, got {a}"),
                    });
                }
                let act = (a * schedule.n as f64).ceil() as usize;
                if act > self.final_generation() {
                    return Err(Error::Parameter {
                        name: "a",
                        reason: "window activates past the final generation".into(),
                    });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Checkpoints actually tracked: the configured ones plus, in window
    /// mode, the schedule generation and the activation generation (the tag
    /// logic and the partition audit need both minima).
    fn effective_checkpoints(&self) -> Vec<usize> {
        let mut cps = self.checkpoints.clone();
        if let BarrierMode::Window { schedule, .. } = self.barrier {
            cps.push(schedule.n);
            cps.push(self.activation().unwrap());
        }
        cps.sort_unstable();
        cps.dedup();
        cps
    }
}

/// Classification of one particle relative to the window barrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierTag {
    /// Path has stayed at or above `gamma` since activation; `good_origin`
    /// says whether it also did over the origin window `[n, ceil(an)]`.
    Above { good_origin: bool },
    /// Path dropped below `gamma` after activation (or was already below at
    /// activation). `good` requires a good origin and a first-crossing
    /// undershoot within `beta/2` of the level.
    Crossed { good: bool },
}

/// A particle's first entry below an active barrier.
#[derive(Debug, Clone, Copy)]
pub struct CrossingRecord {
    pub generation: usize,
    /// Position at the crossing; always strictly below `barrier`.
    pub value: f64,
    /// `e^{-value}`, the mass the particle carried across.
    pub weight: f64,
    pub barrier: f64,
    /// Generation from which the barrier window was measured.
    pub origin_checkpoint: usize,
    /// Whether the crosser's path respected the barrier over the origin
    /// window (always false for absorbing barriers, which have no origin
    /// window).
    pub origin_good: bool,
}

/// One generation of the particle system.
#[derive(Debug, Clone)]
pub struct Generation {
    pub index: usize,
    pub positions: Vec<f64>,
    /// Checkpoint generations whose minima are tracked, sorted.
    pub checkpoint_gens: Vec<usize>,
    /// For each checkpoint generation `c <= index`, running minima
    /// `min_{c <= j <= index} V(x_j)` aligned with `positions`; empty for
    /// checkpoints not yet reached.
    pub checkpoint_mins: Vec<Vec<f64>>,
    /// Window-barrier tags aligned with `positions`; empty before
    /// activation or outside window mode.
    pub tags: Vec<BarrierTag>,
    pub crossing_ledger: Vec<CrossingRecord>,
    /// Count of ledger entries when individual records are not retained.
    pub crossings_seen: u64,
    crossed_mass: KahanSum,
    frozen_w: KahanSum,
    frozen_d: KahanSum,
    /// Live additive mass `sum e^{-V}`, accumulated while building.
    pub w_live: f64,
    /// Live derivative mass `sum V e^{-V}`.
    pub d_live: f64,
    /// Additive mass of particles currently tagged `Above`.
    pub w_tilde: f64,
    /// `sum (V - gamma) e^{-V}` over particles tagged `Above`.
    pub u_weighted: f64,
}

impl Generation {
    /// The starting generation: one particle at the origin.
    pub fn root(config: &TreeConfig) -> Result<Self> {
        config.validate()?;
        let checkpoint_gens = config.effective_checkpoints();
        let checkpoint_mins = checkpoint_gens
            .iter()
            .map(|&c| if c == 0 { vec![0.0] } else { Vec::new() })
            .collect();
        Ok(Generation {
            index: 0,
            positions: vec![0.0],
            checkpoint_gens,
            checkpoint_mins,
            tags: Vec::new(),
            crossing_ledger: Vec::new(),
            crossings_seen: 0,
            crossed_mass: KahanSum::new(),
            frozen_w: KahanSum::new(),
            frozen_d: KahanSum::new(),
            w_live: 1.0,
            d_live: 0.0,
            w_tilde: 0.0,
            u_weighted: 0.0,
        })
    }

    /// Total mass `sum e^{-V}` absorbed at the barrier so far, available
    /// whether or not individual records were kept.
    pub fn crossed_mass(&self) -> f64 {
        self.crossed_mass.value()
    }

    /// Mass discarded by the freeze cap so far. It is an upper bound on
    /// what any `e^{-V}`-weighted statistic restricted to the live
    /// population can be missing.
    pub fn lost_mass_upper(&self) -> f64 {
        self.frozen_w.value()
    }

    /// Frozen counterpart of `D`: the exact expected derivative mass of
    /// removed subtrees.
    pub fn frozen_d(&self) -> f64 {
        self.frozen_d.value()
    }

    pub fn w_total(&self) -> f64 {
        self.w_live + self.frozen_w.value()
    }

    pub fn d_total(&self) -> f64 {
        self.d_live + self.frozen_d.value()
    }

    fn checkpoint_index(&self, generation: usize) -> Option<usize> {
        self.checkpoint_gens.iter().position(|&c| c == generation)
    }
}

/// Additive mass of the live population, `W = sum e^{-V}`, by compensated
/// summation in particle order.
pub fn compute_w(gen: &Generation) -> f64 {
    let mut w = KahanSum::new();
    for &v in &gen.positions {
        w.add((-v).exp());
    }
    w.value()
}

/// Derivative mass of the live population, `D = sum V e^{-V}`.
pub fn compute_d(gen: &Generation) -> f64 {
    let mut d = KahanSum::new();
    for &v in &gen.positions {
        d.add(v * (-v).exp());
    }
    d.value()
}

/// Replaces every particle by its offspring. Children are, in order:
/// absorbed into the crossing ledger if below an active absorbing barrier,
/// frozen if above the freeze cap, otherwise appended to the new
/// generation with propagated checkpoint minima and barrier tags.
pub fn evolve<R: Rng + ?Sized>(
    gen: &Generation,
    law: &OffspringLaw,
    rng: &mut R,
    config: &TreeConfig,
) -> Result<Generation> {
    let g = gen.index + 1;
    let absorb_level = match config.barrier {
        BarrierMode::Absorb { y } => Some(-y),
        _ => None,
    };
    let window = match config.barrier {
        BarrierMode::Window { schedule, .. } => {
            let activation = config.activation().unwrap();
            Some((schedule, activation))
        }
        _ => None,
    };
    let freeze = config.freeze_cap;

    let expected = (gen.positions.len() as f64 * law.offspring_mean()).ceil() as usize + 8;
    let mut positions = Vec::with_capacity(expected);
    // Indices of checkpoints carried over from the parent, plus those that
    // begin at this generation (their minimum is the position itself).
    let carried: Vec<usize> = (0..gen.checkpoint_gens.len())
        .filter(|&k| gen.checkpoint_gens[k] < g && !gen.checkpoint_mins[k].is_empty())
        .collect();
    let starting: Vec<usize> = (0..gen.checkpoint_gens.len())
        .filter(|&k| gen.checkpoint_gens[k] == g)
        .collect();
    let mut checkpoint_mins: Vec<Vec<f64>> = gen
        .checkpoint_gens
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            if c < g && !gen.checkpoint_mins[k].is_empty() || c == g {
                Vec::with_capacity(expected)
            } else {
                Vec::new()
            }
        })
        .collect();
    let mut tags: Vec<BarrierTag> = Vec::new();
    let tags_active = window.map(|(_, act)| g >= act).unwrap_or(false);
    if tags_active {
        tags.reserve(expected);
    }
    let mut ledger = gen.crossing_ledger.clone();
    let mut crossings_seen = gen.crossings_seen;
    let mut crossed_mass = gen.crossed_mass;
    let mut frozen_w = gen.frozen_w;
    let mut frozen_d = gen.frozen_d;
    let mut w_live = KahanSum::new();
    let mut d_live = KahanSum::new();
    let mut w_tilde = KahanSum::new();
    let mut u_weighted = KahanSum::new();

    for (i, &parent) in gen.positions.iter().enumerate() {
        let count = law.offspring_count(rng);
        for _ in 0..count {
            let v = parent + law.displacement(rng);
            if let Some(level) = absorb_level {
                if v < level {
                    crossings_seen += 1;
                    crossed_mass.add((-v).exp());
                    if config.keep_crossings {
                        ledger.push(CrossingRecord {
                            generation: g,
                            value: v,
                            weight: (-v).exp(),
                            barrier: level,
                            origin_checkpoint: 0,
                            origin_good: false,
                        });
                    }
                    continue;
                }
            }
            if let Some(k) = freeze {
                if v > k {
                    let w = (-v).exp();
                    frozen_w.add(w);
                    frozen_d.add(v * w);
                    continue;
                }
            }
            let w = (-v).exp();
            w_live.add(w);
            d_live.add(v * w);
            // Propagate or initialize checkpoint minima.
            for &k in &carried {
                let m = gen.checkpoint_mins[k][i].min(v);
                checkpoint_mins[k].push(m);
            }
            for &k in &starting {
                checkpoint_mins[k].push(v);
            }
            if let Some((schedule, activation)) = window {
                if g > activation {
                    let tag = match gen.tags[i] {
                        BarrierTag::Above { good_origin } => {
                            if v >= schedule.gamma {
                                BarrierTag::Above { good_origin }
                            } else {
                                crossings_seen += 1;
                                if config.keep_crossings {
                                    ledger.push(CrossingRecord {
                                        generation: g,
                                        value: v,
                                        weight: w,
                                        barrier: schedule.gamma,
                                        origin_checkpoint: schedule.n,
                                        origin_good: good_origin,
                                    });
                                }
                                BarrierTag::Crossed {
                                    good: good_origin && v >= schedule.gamma - schedule.beta / 2.0,
                                }
                            }
                        }
                        BarrierTag::Crossed { good } => BarrierTag::Crossed { good },
                    };
                    tags.push(tag);
                } else if g == activation {
                    // First tagging: classify by the current position, with
                    // the origin window read off the schedule checkpoint.
                    let origin_k = gen
                        .checkpoint_gens
                        .iter()
                        .position(|&c| c == schedule.n)
                        .unwrap();
                    let origin_min = *checkpoint_mins[origin_k].last().unwrap();
                    let tag = if v >= schedule.gamma {
                        BarrierTag::Above {
                            good_origin: origin_min >= schedule.gamma,
                        }
                    } else {
                        crossings_seen += 1;
                        if config.keep_crossings {
                            ledger.push(CrossingRecord {
                                generation: g,
                                value: v,
                                weight: w,
                                barrier: schedule.gamma,
                                origin_checkpoint: schedule.n,
                                origin_good: false,
                            });
                        }
                        BarrierTag::Crossed { good: false }
                    };
                    tags.push(tag);
                }
            }
            if tags_active {
                if let BarrierTag::Above { .. } = tags.last().unwrap() {
                    w_tilde.add(w);
                    u_weighted.add((v - window.unwrap().0.gamma) * w);
                }
            }
            positions.push(v);
        }
    }
    if positions.len() > config.particle_cap {
        return Err(Error::Budget {
            generation: g,
            population: positions.len(),
            cap: config.particle_cap,
        });
    }
    Ok(Generation {
        index: g,
        positions,
        checkpoint_gens: gen.checkpoint_gens.clone(),
        checkpoint_mins,
        tags,
        crossing_ledger: ledger,
        crossings_seen,
        crossed_mass,
        frozen_w,
        frozen_d,
        w_live: w_live.value(),
        d_live: d_live.value(),
        w_tilde: w_tilde.value(),
        u_weighted: u_weighted.value(),
    })
}

/// Per-generation barrier-restricted sums recorded during a window run.
#[derive(Debug, Clone)]
pub struct BarrierSeries {
    pub activation: usize,
    pub gamma: f64,
    pub beta: f64,
    pub generations: Vec<usize>,
    /// `sum e^{-V}` over still-above particles per generation.
    pub w_tilde: Vec<f64>,
    /// `sum (V - gamma) e^{-V}` over still-above particles per generation.
    pub u_weighted: Vec<f64>,
}

/// Martingale values per generation, totals including frozen mass.
#[derive(Debug, Clone)]
pub struct MartingaleTrack {
    /// `W_g` for `g = 0..=n_max+horizon` (live + frozen).
    pub w: Vec<f64>,
    /// `D_g` with the same indexing and convention.
    pub d: Vec<f64>,
    pub w_live: Vec<f64>,
    pub d_live: Vec<f64>,
    pub horizon: usize,
    /// `D` at the final generation, the limit proxy.
    pub d_infty_proxy: f64,
    pub lost_mass_upper: f64,
    pub barrier_series: Option<BarrierSeries>,
}

/// A finished tree: the track plus the final generation (which carries the
/// crossing ledger, tags and checkpoint minima for further evaluation).
#[derive(Debug)]
pub struct TreeRun {
    pub track: MartingaleTrack,
    pub final_gen: Generation,
}

/// Simulates one tree to generation `n_max + horizon`.
pub fn run_tree<R: Rng + ?Sized>(
    law: &OffspringLaw,
    config: &TreeConfig,
    rng: &mut R,
) -> Result<TreeRun> {
    let final_gen_index = config.final_generation();
    let mut gen = Generation::root(config)?;
    let mut w = Vec::with_capacity(final_gen_index + 1);
    let mut d = Vec::with_capacity(final_gen_index + 1);
    let mut w_live = Vec::with_capacity(final_gen_index + 1);
    let mut d_live = Vec::with_capacity(final_gen_index + 1);
    w.push(gen.w_total());
    d.push(gen.d_total());
    w_live.push(gen.w_live);
    d_live.push(gen.d_live);
    let mut series = config.activation().map(|activation| {
        let (gamma, beta) = match config.barrier {
            BarrierMode::Window { schedule, .. } => (schedule.gamma, schedule.beta),
            _ => unreachable!(),
        };
        BarrierSeries {
            activation,
            gamma,
            beta,
            generations: Vec::new(),
            w_tilde: Vec::new(),
            u_weighted: Vec::new(),
        }
    });
    for _ in 0..final_gen_index {
        gen = evolve(&gen, law, rng, config)?;
        w.push(gen.w_total());
        d.push(gen.d_total());
        w_live.push(gen.w_live);
        d_live.push(gen.d_live);
        if let Some(s) = series.as_mut() {
            if gen.index >= s.activation {
                s.generations.push(gen.index);
                s.w_tilde.push(gen.w_tilde);
                s.u_weighted.push(gen.u_weighted);
            }
        }
    }
    let track = MartingaleTrack {
        d_infty_proxy: *d.last().unwrap(),
        lost_mass_upper: gen.lost_mass_upper(),
        w,
        d,
        w_live,
        d_live,
        horizon: config.horizon,
        barrier_series: series,
    };
    Ok(TreeRun {
        track,
        final_gen: gen,
    })
}

/// The truncated martingale
/// `D_n^{-y} = sum R(V(x) + y) e^{-V(x)} 1{min_{j<=n} V(x_j) >= -y}`,
/// with `R` read from the table by linear interpolation. Requires the
/// root-generation checkpoint so path minima from generation 0 are known.
pub fn truncated_martingale(gen: &Generation, y: f64, renewal: &RenewalTable) -> Result<f64> {
    if y.is_nan() || y < 0.0 {
        return Err(Error::Domain(format!(
            "truncated martingale needs y >= 0, got {y}"
        )));
    }
    let k = gen.checkpoint_index(0).ok_or_else(|| {
        Error::Consistency("truncated martingale needs a checkpoint at generation 0".into())
    })?;
    let mins = &gen.checkpoint_mins[k];
    let mut sum = KahanSum::new();
    for (i, &v) in gen.positions.iter().enumerate() {
        if mins[i] >= -y {
            sum.add(renewal.interpolate(v + y) * (-v).exp());
        }
    }
    Ok(sum.value())
}

/// Weighted crossing counts over a generation range of a ledger taken at
/// barrier level `-y`:
/// `N = sum weight` and `N_hat = sum (value + beta + y) weight` restricted
/// to crossers whose undershoot stays within `beta/2` of the level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingCounts {
    pub n: f64,
    pub n_hat: f64,
}

pub fn crossing_counts(
    records: &[CrossingRecord],
    n_lo: usize,
    n_hi: usize,
    y: f64,
    beta: f64,
) -> CrossingCounts {
    let mut n = KahanSum::new();
    let mut n_hat = KahanSum::new();
    for r in records {
        if r.generation < n_lo || r.generation > n_hi {
            continue;
        }
        n.add(r.weight);
        if r.value >= -y - beta / 2.0 && r.value < -y {
            n_hat.add((r.value + beta + y) * r.weight);
        }
    }
    CrossingCounts {
        n: n.value(),
        n_hat: n_hat.value(),
    }
}

/// The window-barrier decomposition of a generation, together with the
/// partition audit.
#[derive(Debug, Clone, Copy)]
pub struct BarrierQuantities {
    /// `sum e^{-V}` over particles whose path stayed at or above `gamma`
    /// since activation.
    pub w_tilde: f64,
    /// `sum (c*(V - gamma) + alpha*) e^{-V}` over the same particles.
    pub d_barrier: f64,
    /// `c* sum V e^{-V}` over descendants of good crossings.
    pub f_good: f64,
    /// `c* sum V e^{-V}` over descendants of bad crossings.
    pub f_bad: f64,
    pub above: usize,
    pub crossed_good: usize,
    pub crossed_bad: usize,
    /// Tag/checkpoint-minimum mismatches; any nonzero value is a bug, not
    /// noise.
    pub partition_violations: u64,
}

impl BarrierQuantities {
    /// The four buckets reassemble the live derivative mass exactly:
    /// `c* D = d_barrier + (c* gamma - alpha*) w_tilde + f_good + f_bad`.
    pub fn recombined_d(&self, c_star: f64, alpha_star: f64, gamma: f64) -> f64 {
        self.d_barrier + (c_star * gamma - alpha_star) * self.w_tilde + self.f_good + self.f_bad
    }
}

/// Splits a tagged generation into the above/good-crossed/bad-crossed
/// buckets and audits the partition: the tag of every particle must agree
/// with its checkpoint running minimum, and the three buckets must cover
/// the population exactly once.
pub fn barrier_quantities(
    gen: &Generation,
    schedule: &BarrierSchedule,
    activation: usize,
    c_star: f64,
    alpha_star: f64,
) -> Result<BarrierQuantities> {
    if gen.tags.len() != gen.positions.len() {
        return Err(Error::Consistency(
            "barrier quantities need a tagged generation (window mode, past activation)".into(),
        ));
    }
    let k = gen.checkpoint_index(activation).ok_or_else(|| {
        Error::Consistency("partition audit needs the activation checkpoint".into())
    })?;
    let mins = &gen.checkpoint_mins[k];
    let mut w_tilde = KahanSum::new();
    let mut u = KahanSum::new();
    let mut good = KahanSum::new();
    let mut bad = KahanSum::new();
    let (mut n_above, mut n_good, mut n_bad) = (0usize, 0usize, 0usize);
    let mut violations = 0u64;
    for (i, &v) in gen.positions.iter().enumerate() {
        let w = (-v).exp();
        let tag_above = matches!(gen.tags[i], BarrierTag::Above { .. });
        // Independent recomputation of the same predicate from the raw
        // running minimum.
        let min_above = mins[i] >= schedule.gamma;
        if tag_above != min_above {
            violations += 1;
        }
        match gen.tags[i] {
            BarrierTag::Above { .. } => {
                n_above += 1;
                w_tilde.add(w);
                u.add((v - schedule.gamma) * w);
            }
            BarrierTag::Crossed { good: true } => {
                n_good += 1;
                good.add(v * w);
            }
            BarrierTag::Crossed { good: false } => {
                n_bad += 1;
                bad.add(v * w);
            }
        }
    }
    if n_above + n_good + n_bad != gen.positions.len() {
        violations += (gen.positions.len() - (n_above + n_good + n_bad)) as u64;
    }
    Ok(BarrierQuantities {
        w_tilde: w_tilde.value(),
        d_barrier: c_star * u.value() + alpha_star * w_tilde.value(),
        f_good: c_star * good.value(),
        f_bad: c_star * bad.value(),
        above: n_above,
        crossed_good: n_good,
        crossed_bad: n_bad,
        partition_violations: violations,
    })
}

/// Which centering replaces the derivative martingale's drift term.
#[derive(Debug, Clone, Copy)]
pub enum LogCorrection {
    /// The direct form `(log n)/2 * W_m`.
    HalfLogN,
    /// The survival-corrected surrogate
    /// `(log n)/sqrt(2 pi sigma2 m) * delta_hat * D_proxy`, which replaces
    /// `W_m` by its conditional limit expression.
    DeltaVariant { sigma2: f64 },
}

/// The fluctuation statistic
/// `sqrt(n) (D_proxy - D_m + correction)` with `m = ceil(a n)`.
pub fn fluctuation_statistic(
    track: &MartingaleTrack,
    n: usize,
    a: f64,
    correction: LogCorrection,
    delta_hat: Option<f64>,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("fluctuation statistic needs n >= 1".into()));
    }
    if a.is_nan() || a < 1.0 {
        return Err(Error::Domain(format!(
            "fluctuation statistic needs a >= 1, got {a}"
        )));
    }
    let m = (a * n as f64).ceil() as usize;
    if m >= track.w.len() {
        return Err(Error::Domain(format!(
            "track ends at generation {} but the statistic needs generation {m}",
            track.w.len() - 1
        )));
    }
    let log_n = (n as f64).ln();
    let correction_term = match correction {
        LogCorrection::HalfLogN => 0.5 * log_n * track.w[m],
        LogCorrection::DeltaVariant { sigma2 } => {
            let delta = delta_hat.ok_or(Error::Parameter {
                name: "delta_hat",
                reason: "the delta variant needs an estimated delta_n".into(),
            })?;
            if sigma2.is_nan() || sigma2 <= 0.0 {
                return Err(Error::Parameter {
                    name: "sigma2",
                    reason: format!("must be positive, got {sigma2}"),
                });
            }
            log_n / (2.0 * std::f64::consts::PI * sigma2 * m as f64).sqrt()
                * delta
                * track.d_infty_proxy
        }
    };
    Ok((n as f64).sqrt() * (track.d_infty_proxy - track.d[m] + correction_term))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renewal::{RenewalMethod, RenewalTable};
    use crate::stats::MomentAccumulator;
    use crate::tolerances::Z_GATE;
    use crate::{replica_rng, streams};

    fn law() -> OffspringLaw {
        OffspringLaw::dyadic_gaussian()
    }

    fn synthetic_table(slope: f64, intercept: f64) -> RenewalTable {
        let grid: Vec<f64> = (0..=24).map(|k| k as f64 * 0.5).collect();
        let r: Vec<f64> = grid.iter().map(|y| slope * y + intercept).collect();
        let se = vec![0.0; grid.len()];
        RenewalTable::from_grid_values(grid, r, se, RenewalMethod::LadderExpectation).unwrap()
    }

    fn generation_at(positions: Vec<f64>, root_mins: Vec<f64>) -> Generation {
        let config = TreeConfig {
            checkpoints: vec![0],
            ..TreeConfig::plain(0, 0)
        };
        let mut gen = Generation::root(&config).unwrap();
        gen.index = positions.len().min(1);
        gen.positions = positions;
        gen.checkpoint_mins = vec![root_mins];
        gen
    }

    #[test]
    fn dyadic_root_always_has_two_children() {
        let config = TreeConfig::plain(1, 0);
        for r in 0..50u32 {
            let mut rng = replica_rng(31, streams::TREE, r);
            let root = Generation::root(&config).unwrap();
            let next = evolve(&root, &law(), &mut rng, &config).unwrap();
            assert_eq!(next.positions.len(), 2);
            assert_eq!(next.index, 1);
        }
    }

    #[test]
    fn martingale_sums_match_the_hand_computed_values() {
        let gen = generation_at(vec![0.0, std::f64::consts::LN_2], vec![0.0, 0.0]);
        assert!((compute_w(&gen) - 1.5).abs() < 1e-15);
        assert!((compute_d(&gen) - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
        let empty = generation_at(vec![], vec![]);
        assert_eq!(compute_w(&empty), 0.0);
        assert_eq!(compute_d(&empty), 0.0);
    }

    #[test]
    fn fused_sums_agree_with_recomputation() {
        let config = TreeConfig::plain(6, 0);
        let mut rng = replica_rng(32, streams::TREE, 0);
        let run = run_tree(&law(), &config, &mut rng).unwrap();
        assert_eq!(run.final_gen.w_live, compute_w(&run.final_gen));
        assert_eq!(run.final_gen.d_live, compute_d(&run.final_gen));
        assert_eq!(run.track.w.len(), 7);
        assert_eq!(run.track.w[0], 1.0);
        assert_eq!(run.track.d[0], 0.0);
    }

    #[test]
    fn freeze_cap_at_negative_infinity_prunes_everything() {
        let config = TreeConfig {
            freeze_cap: Some(f64::NEG_INFINITY),
            ..TreeConfig::plain(1, 0)
        };
        let mut acc = MomentAccumulator::new();
        for r in 0..10_000u32 {
            let mut rng = replica_rng(33, streams::TREE, r);
            let root = Generation::root(&config).unwrap();
            let next = evolve(&root, &law(), &mut rng, &config).unwrap();
            assert!(next.positions.is_empty());
            assert!(next.lost_mass_upper() > 0.0);
            assert_eq!(next.w_total(), next.lost_mass_upper());
            acc.push(next.lost_mass_upper());
        }
        // Frozen mass is an exact expectation transfer: its mean is E W_1.
        assert!((acc.mean() - 1.0).abs() < Z_GATE * acc.se(), "{}", acc.mean());
    }

    #[test]
    fn freezing_preserves_martingale_means() {
        let config = TreeConfig {
            freeze_cap: Some(2.0),
            ..TreeConfig::plain(8, 0)
        };
        let mut w = MomentAccumulator::new();
        let mut d = MomentAccumulator::new();
        for r in 0..20_000u32 {
            let mut rng = replica_rng(34, streams::TREE, r);
            let run = run_tree(&law(), &config, &mut rng).unwrap();
            w.push(run.track.w[8]);
            d.push(run.track.d[8]);
            assert!(run.track.lost_mass_upper > 0.0);
        }
        assert!((w.mean() - 1.0).abs() < Z_GATE * w.se(), "W: {}", w.mean());
        assert!(d.mean().abs() < Z_GATE * d.se(), "D: {}", d.mean());
    }

    #[test]
    fn particle_cap_is_a_hard_error() {
        let config = TreeConfig {
            particle_cap: 4,
            ..TreeConfig::plain(3, 0)
        };
        let mut rng = replica_rng(35, streams::TREE, 0);
        let err = run_tree(&law(), &config, &mut rng).unwrap_err();
        match err {
            Error::Budget { generation, cap, .. } => {
                assert_eq!(generation, 3);
                assert_eq!(cap, 4);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn absorbing_barrier_with_no_crossings_leaves_the_ledger_empty() {
        let config = TreeConfig {
            barrier: BarrierMode::Absorb { y: 50.0 },
            keep_crossings: true,
            ..TreeConfig::plain(5, 0)
        };
        let mut rng = replica_rng(36, streams::TREE, 1);
        let run = run_tree(&law(), &config, &mut rng).unwrap();
        assert!(run.final_gen.crossing_ledger.is_empty());
        assert_eq!(run.final_gen.crossings_seen, 0);
    }

    #[test]
    fn absorbed_mass_plus_live_mass_has_unit_mean() {
        let config = TreeConfig {
            barrier: BarrierMode::Absorb { y: 1.0 },
            keep_crossings: true,
            freeze_cap: Some(8.0),
            ..TreeConfig::plain(25, 0)
        };
        let mut acc = MomentAccumulator::new();
        for r in 0..4_000u32 {
            let mut rng = replica_rng(37, streams::TREE, r);
            let run = run_tree(&law(), &config, &mut rng).unwrap();
            let crossed: f64 = run.final_gen.crossing_ledger.iter().map(|c| c.weight).sum();
            assert!((crossed - run.final_gen.crossed_mass()).abs() < 1e-12);
            acc.push(run.track.w[25] + crossed);
        }
        assert!(
            (acc.mean() - 1.0).abs() < Z_GATE * acc.se(),
            "total mass mean = {} +- {}",
            acc.mean(),
            acc.se()
        );
    }

    #[test]
    fn truncated_martingale_trivial_cases() {
        let table = synthetic_table(1.2, 1.0);
        let config = TreeConfig {
            checkpoints: vec![0],
            ..TreeConfig::plain(0, 0)
        };
        let root = Generation::root(&config).unwrap();
        assert!((truncated_martingale(&root, 0.0, &table).unwrap() - 1.0).abs() < 1e-15);
        assert!(truncated_martingale(&root, -1.0, &table).is_err());
        let sunk = generation_at(vec![0.3, 1.0], vec![-2.5, -3.0]);
        assert_eq!(truncated_martingale(&sunk, 2.0, &table).unwrap(), 0.0);
    }

    #[test]
    fn truncated_martingale_mean_matches_the_renewal_value() {
        let ladder = crate::renewal::estimate_r_with_cap(
            &law(),
            &crate::renewal::default_grid(),
            30_000,
            RenewalMethod::LadderExpectation,
            200_000,
            38,
        )
        .unwrap();
        let y = 1.0;
        let config = TreeConfig {
            checkpoints: vec![0],
            ..TreeConfig::plain(6, 0)
        };
        let mut acc = MomentAccumulator::new();
        for r in 0..5_000u32 {
            let mut rng = replica_rng(39, streams::TREE, r);
            let run = run_tree(&law(), &config, &mut rng).unwrap();
            acc.push(truncated_martingale(&run.final_gen, y, &ladder).unwrap());
        }
        let target = ladder.interpolate(y);
        let se = (acc.se().powi(2) + ladder.se[4].powi(2)).sqrt();
        assert!(
            (acc.mean() - target).abs() < Z_GATE * se,
            "mean {} vs R(1) = {target}",
            acc.mean()
        );
    }

    #[test]
    fn crossing_counts_from_synthetic_records() {
        assert_eq!(crossing_counts(&[], 1, 10, 2.0, 1.0), CrossingCounts { n: 0.0, n_hat: 0.0 });
        let (y, beta) = (2.0, 1.5);
        let v = -y - beta / 2.0;
        let records = [CrossingRecord {
            generation: 3,
            value: v,
            weight: (-v).exp(),
            barrier: -y,
            origin_checkpoint: 0,
            origin_good: false,
        }];
        let counts = crossing_counts(&records, 1, 10, y, beta);
        assert!((counts.n - (-v).exp()).abs() < 1e-15);
        let expected = beta / 2.0 * (y + beta / 2.0).exp();
        assert!((counts.n_hat - expected).abs() < 1e-12);
        // Outside the generation range nothing counts.
        let outside = crossing_counts(&records, 4, 10, y, beta);
        assert_eq!(outside, CrossingCounts { n: 0.0, n_hat: 0.0 });
    }

    fn window_config(n: usize, a: f64, beta: f64, n_max: usize, horizon: usize) -> TreeConfig {
        TreeConfig {
            barrier: BarrierMode::Window {
                schedule: BarrierSchedule::new(n, beta).unwrap(),
                a,
            },
            keep_crossings: true,
            ..TreeConfig::plain(n_max, horizon)
        }
    }

    #[test]
    fn window_with_unreachable_barrier_keeps_everything_above() {
        let mut config = window_config(4, 1.5, 1.0, 8, 0);
        // Drive the level far below any reachable position.
        if let BarrierMode::Window { schedule, .. } = &mut config.barrier {
            schedule.gamma = -1e9;
        }
        let mut rng = replica_rng(40, streams::TREE, 0);
        let run = run_tree(&law(), &config, &mut rng).unwrap();
        let schedule = match config.barrier {
            BarrierMode::Window { schedule, .. } => schedule,
            _ => unreachable!(),
        };
        let q = barrier_quantities(&run.final_gen, &schedule, 6, 1.0, 0.0).unwrap();
        assert_eq!(q.partition_violations, 0);
        assert_eq!(q.crossed_good + q.crossed_bad, 0);
        assert_eq!(q.above, run.final_gen.positions.len());
        assert!((q.w_tilde - run.final_gen.w_live).abs() < 1e-12);
    }

    #[test]
    fn window_with_impossible_barrier_crosses_everything() {
        let mut config = window_config(4, 1.5, 1.0, 8, 0);
        if let BarrierMode::Window { schedule, .. } = &mut config.barrier {
            schedule.gamma = 1e9;
        }
        let mut rng = replica_rng(41, streams::TREE, 0);
        let run = run_tree(&law(), &config, &mut rng).unwrap();
        let schedule = match config.barrier {
            BarrierMode::Window { schedule, .. } => schedule,
            _ => unreachable!(),
        };
        let q = barrier_quantities(&run.final_gen, &schedule, 6, 1.0, 0.0).unwrap();
        assert_eq!(q.partition_violations, 0);
        assert_eq!(q.above, 0);
        assert_eq!(q.w_tilde, 0.0);
        assert_eq!(
            q.crossed_good + q.crossed_bad,
            run.final_gen.positions.len()
        );
    }

    #[test]
    fn partition_is_exact_and_reassembles_the_derivative_mass() {
        let config = window_config(3, 2.0, 1.0, 8, 0);
        let schedule = match config.barrier {
            BarrierMode::Window { schedule, .. } => schedule,
            _ => unreachable!(),
        };
        let (c_star, alpha_star) = (1.3, 0.4);
        for r in 0..200u32 {
            let mut rng = replica_rng(42, streams::TREE, r);
            let run = run_tree(&law(), &config, &mut rng).unwrap();
            let q = barrier_quantities(&run.final_gen, &schedule, 6, c_star, alpha_star).unwrap();
            assert_eq!(q.partition_violations, 0);
            assert_eq!(
                q.above + q.crossed_good + q.crossed_bad,
                run.final_gen.positions.len()
            );
            let lhs = c_star * run.final_gen.d_live;
            let rhs = q.recombined_d(c_star, alpha_star, schedule.gamma);
            assert!(
                (lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()),
                "replica {r}: c*D = {lhs} vs recombined {rhs}"
            );
        }
    }

    #[test]
    fn statistic_reduces_to_the_log_term_when_the_proxy_cancels() {
        // Proxy at the same generation as m: only the W term survives.
        let track = MartingaleTrack {
            w: vec![1.0, 1.0, 1.0, 1.0, 0.5],
            d: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            w_live: vec![],
            d_live: vec![],
            horizon: 0,
            d_infty_proxy: 0.4,
            lost_mass_upper: 0.0,
            barrier_series: None,
        };
        let value = fluctuation_statistic(&track, 4, 1.0, LogCorrection::HalfLogN, None).unwrap();
        assert!((value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn statistic_is_zero_for_an_extinct_track() {
        let track = MartingaleTrack {
            w: vec![1.0, 0.0, 0.0],
            d: vec![0.0, 0.7, 0.7],
            w_live: vec![],
            d_live: vec![],
            horizon: 0,
            d_infty_proxy: 0.7,
            lost_mass_upper: 0.0,
            barrier_series: None,
        };
        let value = fluctuation_statistic(&track, 2, 1.0, LogCorrection::HalfLogN, None).unwrap();
        assert_eq!(value, 0.0);
    }

    #[test]
    fn delta_variant_matches_hand_computed_algebra() {
        let track = MartingaleTrack {
            w: vec![1.0, 1.0, 1.0, 1.0, 1.0],
            d: vec![0.0, 0.0, 0.0, 0.0, 0.25],
            w_live: vec![],
            d_live: vec![],
            horizon: 0,
            d_infty_proxy: 0.75,
            lost_mass_upper: 0.0,
            barrier_series: None,
        };
        let sigma2 = 2.0;
        let n = 4;
        let got = fluctuation_statistic(
            &track,
            n,
            1.0,
            LogCorrection::DeltaVariant { sigma2 },
            Some(0.9),
        )
        .unwrap();
        let correction =
            (4f64).ln() / (2.0 * std::f64::consts::PI * sigma2 * 4.0).sqrt() * 0.9 * 0.75;
        let expected = 2.0 * (0.75 - 0.25 + correction);
        assert!((got - expected).abs() < 1e-12);
        assert!(fluctuation_statistic(
            &track,
            n,
            1.0,
            LogCorrection::DeltaVariant { sigma2 },
            None
        )
        .is_err());
        assert!(fluctuation_statistic(&track, 8, 1.0, LogCorrection::HalfLogN, None).is_err());
    }

    #[test]
    fn plain_run_means_are_martingale_exact() {
        let config = TreeConfig::plain(8, 0);
        let mut w = MomentAccumulator::new();
        let mut d = MomentAccumulator::new();
        for r in 0..20_000u32 {
            let mut rng = replica_rng(43, streams::TREE, r);
            let run = run_tree(&law(), &config, &mut rng).unwrap();
            w.push(run.track.w[8]);
            d.push(run.track.d[8]);
        }
        assert!((w.mean() - 1.0).abs() < Z_GATE * w.se(), "W: {}", w.mean());
        assert!(d.mean().abs() < Z_GATE * d.se(), "D: {}", d.mean());
    }
}
