//! Pinned constants and acceptance tolerances.
//!
//! Every gate used by the verification suites lives here with its rationale,
//! so a reviewer can audit the numbers in one place and the test code stays
//! free of magic literals. Reference values were cross-checked against an
//! independent high-precision evaluation before being frozen.

/// Branching variance `sigma^2 = 2 log 2` of the dyadic Gaussian family.
///
/// Solving `2 e^{-mu + s^2/2} = 1` together with the centering condition
/// `mu = s^2` gives `mu = s^2 = 2 log 2`, and the same value reappears as
/// `E sum V^2 e^{-V}`.
pub const SIGMA2_DYADIC: f64 = 1.386_294_361_119_890_6;

/// `sqrt(2 / (pi sigma^2))` for the dyadic family, the constant in the
/// Seneta-Heyde norming `sqrt(n) W_n -> sqrt(2/(pi sigma^2)) D_infty`.
pub const SENETA_HEYDE_DYADIC: f64 = 0.677_660_751_603_105;

/// `sqrt(pi / (2 sigma^2))` for the dyadic family, the scale parameter of
/// the 1-stable limit law.
pub const STABLE_SCALE_DYADIC: f64 = 1.064_467_019_431_226;

/// Exact renewal slope `c* = 1/E|H_1|` for the dyadic family.
///
/// For a continuous symmetric step law, `E|H_1| = sigma/sqrt(2)` (a Spitzer
/// series identity), so `c* = sqrt(2/sigma^2) = 1/sqrt(log 2)` here. Used as
/// an oracle for the two Monte Carlo estimators of `c*`.
pub const C_STAR_DYADIC: f64 = 1.201_122_408_786_449_8;

/// Exact `E|H_1| = sqrt(log 2)` for the dyadic family.
pub const MEAN_LADDER_HEIGHT_DYADIC: f64 = 0.832_554_611_157_697_7;

/// `theta* = 1/sqrt(pi)`, the limit of `sqrt(n) P(min_{j<=n} S_j >= 0)`.
///
/// For any continuous symmetric step law the survival probability is the
/// distribution-free ballot value `binom(2n, n)/4^n`, whose scaled limit is
/// `1/sqrt(pi)`.
pub const THETA_STAR: f64 = 0.564_189_583_547_756_3;

/// Euler-Mascheroni constant, part of the limit law's drift triplet.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Gate on Monte Carlo z-scores: estimates must sit within three standard
/// errors of their target. Seeds are pinned, so this is a deterministic
/// check, not a flaky one.
pub const Z_GATE: f64 = 3.0;

/// Multiplier for empirical characteristic function sup-distance gates,
/// `sup |cf_emp - cf| <= CF_GATE / sqrt(N)`. The real and imaginary parts
/// each have standard error at most `1/sqrt(2N)`, so four combined standard
/// deviations of headroom remain even at the grid point of worst variance.
pub const CF_GATE: f64 = 4.0;

/// Minimum p-value for two-sample KS agreement checks.
pub const KS_P_MIN: f64 = 0.01;

/// Maximum relative disagreement between the slope and ladder-height
/// estimators of `c*` at one million ladder samples.
pub const C_STAR_REL_TOL: f64 = 0.05;

/// Hill-index bracket for the right tail of the scaled fluctuation
/// statistic at n = 12. The limit tail index is exactly 1; the bracket
/// absorbs pre-asymptotic bias and estimator variance observed in pilot
/// runs at 1e5 replicas.
pub const HILL_BRACKET: (f64, f64) = (0.8, 1.3);

/// Maximum relative spread of `sqrt(n) P(min >= 0)` across the survival
/// grid {64, 256, 1024}. The exact ballot values give a spread of 0.18%,
/// so 10% leaves two orders of magnitude of slack for Monte Carlo noise.
pub const SURVIVAL_DRIFT_REL_TOL: f64 = 0.10;

/// Half-width of the bracket around `sqrt(2/(pi sigma^2))` that the
/// Seneta-Heyde ratio medians must stay inside over n in {8, 12, 16, 20}.
///
/// Calibrated by a pilot at 1e4 replicas per grid point: the median of
/// `sqrt(n) W_n / D_{2n}` starts about +0.014 above the constant at n = 8,
/// crosses it near n = 11, and overshoots to -0.047 by n = 20 before the
/// slow return to the limit. The trajectory is freeze-cap independent
/// (caps 12, 14, 16 agree within one standard error under common random
/// numbers), so the overshoot is a property of the statistic at these
/// depths, not of the truncation. The half-width 0.08 bounds the observed
/// excursion with room for seed variation while still rejecting a wrong
/// norming exponent, which would tilt the medians across the grid by more
/// than the bracket allows.
pub const SH_BRACKET_HALF_WIDTH: f64 = 0.08;

/// Closed-form moment identities must hold to this absolute tolerance when
/// evaluated analytically at construction time.
pub const NORMALIZATION_TOL: f64 = 1e-10;

/// Exact `sqrt(n) binom(2n,n)/4^n` at the survival report grid, frozen from
/// a high-precision evaluation. The drift between consecutive entries is
/// what the directional survival check bounds.
pub const SURVIVAL_SCALED_EXACT: [(usize, f64); 3] = [
    (64, 0.563_088_737_360_098),
    (256, 0.563_914_167_773_434),
    (1024, 0.564_120_716_954_588),
];
