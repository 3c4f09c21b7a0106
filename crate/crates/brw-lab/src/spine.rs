//! Spine constructions: the size-biased tree seen along its distinguished
//! line of descent, and the random walk conditioned to stay above `-y` via
//! the renewal function, plus the many-to-one consistency check tying tree
//! averages to walk probabilities.
//!
//! Both Gaussian families share the same spine step law: size-biasing by
//! `e^{-V}` tilts the displacement `N(mu_d, s^2)` to `N(mu_d - s^2, s^2)`,
//! and the centering conditions force `mu_d = s^2`, so the spine walks with
//! the centered step law `N(0, s^2)` while siblings keep the original
//! displacement law.

use rand::Rng;

use crate::engine::{run_tree, TreeConfig};
use crate::error::{Error, Result};
use crate::model::{Family, OffspringLaw};
use crate::renewal::RenewalTable;
use crate::stats::{normal_cdf, normal_pdf, MomentAccumulator};
use crate::{replica_rng, streams};

/// Which change of measure produced a spine sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpineMeasure {
    /// The size-biased tree measure: spine step centered, siblings
    /// untilted, offspring counts size-biased.
    SizeBiased,
    /// The walk conditioned to stay at or above `-y`, transition kernel
    /// proportional to `R(z' + y) nu(z' - z) 1{z' >= -y}`.
    RenewalConditioned { y: f64 },
}

/// One sampled spine path.
#[derive(Debug, Clone)]
pub struct SpineSample {
    /// Spine positions `V_0 = 0, V_1, ..., V_n`.
    pub positions: Vec<f64>,
    /// Per generation, the displacements (relative to the spine's parent)
    /// of the non-spine children born alongside the spine. Empty for the
    /// conditioned walk, which carries no tree structure.
    pub sibling_displacements: Vec<Vec<f64>>,
    pub measure: SpineMeasure,
    /// Fraction of proposals accepted while sampling; 1 when no rejection
    /// step was involved.
    pub acceptance_rate: f64,
}

/// Samples the spine of the size-biased tree for `n` generations.
///
/// The offspring count along the spine is the size-biased count (`2` for
/// the dyadic family, `1 + Poisson(m)` for the Poisson family), the spine
/// child is displaced by the centered step law, and the remaining children
/// by the ordinary displacement law. Which child index carries the spine
/// is exchangeable and left implicit.
pub fn sample_spine_q<R: Rng + ?Sized>(law: &OffspringLaw, n: usize, rng: &mut R) -> SpineSample {
    let mut positions = Vec::with_capacity(n + 1);
    positions.push(0.0);
    let mut sibling_displacements = Vec::with_capacity(n);
    for _ in 0..n {
        let biased_count = match law.family() {
            Family::DyadicGaussian => 2,
            // Size-biasing a Poisson count adds an independent unit.
            Family::PoissonGaussian { .. } => 1 + law.offspring_count(rng),
        };
        let spine_step = law.step_law_sample(rng);
        let siblings: Vec<f64> = (1..biased_count).map(|_| law.displacement(rng)).collect();
        positions.push(positions.last().unwrap() + spine_step);
        sibling_displacements.push(siblings);
    }
    SpineSample {
        positions,
        sibling_displacements,
        measure: SpineMeasure::SizeBiased,
        acceptance_rate: 1.0,
    }
}

/// Quantile of the density proportional to `(1 + u) phi(u; mu0, sigma)` on
/// `u >= 0`, by bisection on its closed-form distribution function.
fn weighted_proposal_quantile(mu0: f64, sigma: f64, q: f64) -> f64 {
    let v0 = -mu0 / sigma;
    let pdf0 = normal_pdf(v0, 0.0, 1.0);
    let z = (1.0 + mu0) * (1.0 - normal_cdf(v0)) + sigma * pdf0;
    let cdf = |x: f64| {
        let v1 = (x - mu0) / sigma;
        ((1.0 + mu0) * (normal_cdf(v1) - normal_cdf(v0))
            + sigma * (pdf0 - normal_pdf(v1, 0.0, 1.0)))
            / z
    };
    let mut lo = 0.0f64;
    let mut hi = mu0 + 6.0 * sigma;
    for _ in 0..200 {
        if cdf(hi) >= q {
            break;
        }
        lo = hi;
        hi = 2.0 * hi + sigma;
    }
    for _ in 0..90 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + hi) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Rejection envelope for the conditioned kernel: a bound on
/// `R(u) / (1 + u)` over `u >= 0` under the table's interpolation rule.
/// On each table segment the ratio of two affine functions is monotone, so
/// segment endpoints dominate; past the grid the ratio tends to the fitted
/// slope. The factor 1.5 keeps the bound safely above estimation noise.
fn envelope_constant(table: &RenewalTable) -> f64 {
    let mut worst = table.constants.c_star.max(0.0);
    for (k, &y) in table.grid.iter().enumerate() {
        if y >= 0.0 {
            worst = worst.max(table.r_hat[k] / (1.0 + y));
        }
    }
    1.5 * worst
}

/// Samples `n` steps of the walk conditioned to stay at or above `-y`,
/// the Doob transform of the centered step law by `R(. + y)`.
///
/// Each transition targets the density proportional to
/// `R(z + y + x) phi(x; 0, s^2) 1{z + x >= -y}`. Proposals come from the
/// density proportional to `(1 + u) phi(u; z + y, s)` on `u = z' + y >= 0`
/// and are accepted with probability `R(u) / (C (1 + u))`; an acceptance
/// probability above one means the envelope failed and is reported as an
/// error rather than clipped.
pub fn sample_spine_walk_qy<R: Rng + ?Sized>(
    law: &OffspringLaw,
    table: &RenewalTable,
    y: f64,
    n: usize,
    rng: &mut R,
) -> Result<SpineSample> {
    if y.is_nan() || y < 0.0 {
        return Err(Error::Domain(format!(
            "conditioned walk needs y >= 0, got {y}"
        )));
    }
    let sigma = law.s2().sqrt();
    let c = envelope_constant(table);
    let mut positions = Vec::with_capacity(n + 1);
    positions.push(0.0);
    let mut accepted = 0u64;
    let mut trials = 0u64;
    for _ in 0..n {
        let z = *positions.last().unwrap();
        let mu0 = z + y;
        let u = loop {
            trials += 1;
            let q: f64 = rng.random();
            let u = weighted_proposal_quantile(mu0, sigma, q);
            let ratio = table.interpolate(u) / (c * (1.0 + u));
            if ratio > 1.0 + 1e-9 {
                return Err(Error::Consistency(format!(
                    "rejection envelope violated at u = {u}: acceptance ratio {ratio}"
                )));
            }
            if rng.random::<f64>() < ratio {
                accepted += 1;
                break u;
            }
        };
        positions.push(u - y);
    }
    Ok(SpineSample {
        positions,
        sibling_displacements: Vec::new(),
        measure: SpineMeasure::RenewalConditioned { y },
        acceptance_rate: accepted as f64 / trials.max(1) as f64,
    })
}

/// One abscissa of the many-to-one check.
#[derive(Debug, Clone, Copy)]
pub struct ManyToOnePoint {
    pub t: f64,
    /// Tree-side mean of `sum_x e^{-V(x)} 1{V(x) <= t}` at generation `n`.
    pub tree_mean: f64,
    pub tree_se: f64,
    /// Walk-side Monte Carlo estimate of `P(S_n <= t)`.
    pub walk_mean: f64,
    pub walk_se: f64,
    /// Closed-form `P(S_n <= t)` for the Gaussian step law.
    pub exact: f64,
    pub z_tree: f64,
    pub z_walk: f64,
}

#[derive(Debug, Clone)]
pub struct ManyToOneReport {
    pub n: usize,
    pub replicas: u32,
    pub points: Vec<ManyToOnePoint>,
    /// Largest `|z|` across both comparisons and all abscissas.
    pub worst_z: f64,
}

/// Checks the many-to-one identity
/// `E sum_{|x|=n} e^{-V(x)} f(V(x)) = E f(S_n)` for `f = 1{. <= t}`,
/// comparing tree averages and direct walk averages against the exact
/// Gaussian probability.
pub fn verify_many_to_one(
    law: &OffspringLaw,
    n: usize,
    t_grid: &[f64],
    replicas: u32,
    master_seed: u64,
) -> Result<ManyToOneReport> {
    if n == 0 {
        return Err(Error::Domain("many-to-one check needs n >= 1".into()));
    }
    if t_grid.is_empty() {
        return Err(Error::Domain("many-to-one check needs abscissas".into()));
    }
    if replicas == 0 {
        return Err(Error::Domain("many-to-one check needs replicas".into()));
    }
    let config = TreeConfig::plain(n, 0);
    let mut tree_acc = vec![MomentAccumulator::new(); t_grid.len()];
    for r in 0..replicas {
        let mut rng = replica_rng(master_seed, streams::MANY_TO_ONE, r);
        let run = run_tree(law, &config, &mut rng)?;
        for (j, &t) in t_grid.iter().enumerate() {
            let mut sum = 0.0;
            for &v in &run.final_gen.positions {
                if v <= t {
                    sum += (-v).exp();
                }
            }
            tree_acc[j].push(sum);
        }
    }
    let mut walk_acc = vec![MomentAccumulator::new(); t_grid.len()];
    for r in 0..replicas {
        let mut rng = replica_rng(master_seed, streams::WALK, r);
        let mut s = 0.0;
        for _ in 0..n {
            s += law.step_law_sample(&mut rng);
        }
        for (j, &t) in t_grid.iter().enumerate() {
            walk_acc[j].push(if s <= t { 1.0 } else { 0.0 });
        }
    }
    let mut points = Vec::with_capacity(t_grid.len());
    let mut worst_z: f64 = 0.0;
    for (j, &t) in t_grid.iter().enumerate() {
        let exact = law.walk_cdf(n, t);
        let z_of = |acc: &MomentAccumulator| {
            let se = acc.se();
            if se == 0.0 {
                if (acc.mean() - exact).abs() < 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (acc.mean() - exact) / se
            }
        };
        let z_tree = z_of(&tree_acc[j]);
        let z_walk = z_of(&walk_acc[j]);
        worst_z = worst_z.max(z_tree.abs()).max(z_walk.abs());
        points.push(ManyToOnePoint {
            t,
            tree_mean: tree_acc[j].mean(),
            tree_se: tree_acc[j].se(),
            walk_mean: walk_acc[j].mean(),
            walk_se: walk_acc[j].se(),
            exact,
            z_tree,
            z_walk,
        });
    }
    Ok(ManyToOneReport {
        n,
        replicas,
        points,
        worst_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renewal::{default_grid, estimate_r_with_cap, RenewalMethod};
    use crate::stats::ks_two_sample;
    use crate::tolerances::{KS_P_MIN, Z_GATE};

    fn law() -> OffspringLaw {
        OffspringLaw::dyadic_gaussian()
    }

    fn occupation_table(replicas: usize, seed: u64) -> RenewalTable {
        estimate_r_with_cap(
            &law(),
            &default_grid(),
            replicas,
            RenewalMethod::Occupation,
            1_000_000,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn spine_walks_with_the_centered_step_law() {
        let n = 8;
        let mut end = MomentAccumulator::new();
        for r in 0..20_000u32 {
            let mut rng = replica_rng(51, streams::SPINE_Q, r);
            let sample = sample_spine_q(&law(), n, &mut rng);
            assert_eq!(sample.positions.len(), n + 1);
            assert_eq!(sample.positions[0], 0.0);
            assert_eq!(sample.acceptance_rate, 1.0);
            end.push(sample.positions[n]);
        }
        let target_var = n as f64 * law().s2();
        assert!(end.mean().abs() < Z_GATE * end.se(), "mean {}", end.mean());
        let var_se = target_var * (2.0 / (end.count() as f64 - 1.0)).sqrt();
        assert!(
            (end.variance() - target_var).abs() < Z_GATE * var_se,
            "var {} vs {target_var}",
            end.variance()
        );
    }

    #[test]
    fn dyadic_spine_has_one_untilted_sibling_per_generation() {
        let mut sib = MomentAccumulator::new();
        for r in 0..20_000u32 {
            let mut rng = replica_rng(52, streams::SPINE_Q, r);
            let sample = sample_spine_q(&law(), 3, &mut rng);
            for gen in &sample.sibling_displacements {
                assert_eq!(gen.len(), 1);
                sib.push(gen[0]);
            }
        }
        // Siblings keep the original displacement law with mean mu_d.
        assert!(
            (sib.mean() - law().mu_d()).abs() < Z_GATE * sib.se(),
            "sibling mean {} vs {}",
            sib.mean(),
            law().mu_d()
        );
    }

    #[test]
    fn poisson_spine_count_matches_the_size_biased_oracle() {
        let m = 3.0;
        let plaw = OffspringLaw::poisson_gaussian(m).unwrap();
        let mut biased = MomentAccumulator::new();
        for r in 0..20_000u32 {
            let mut rng = replica_rng(53, streams::SPINE_Q, r);
            let sample = sample_spine_q(&plaw, 1, &mut rng);
            biased.push(1.0 + sample.sibling_displacements[0].len() as f64);
        }
        // Oracle: reweighting one ordinary generation by its additive mass
        // gives E[N W_1], the size-biased count mean.
        let mut oracle = MomentAccumulator::new();
        for r in 0..20_000u32 {
            let mut rng = replica_rng(54, streams::SPINE_Q, r);
            let children = plaw.sample_offspring(&mut rng);
            let w1: f64 = children.iter().map(|&x| (-x).exp()).sum();
            oracle.push(children.len() as f64 * w1);
        }
        let combined = (biased.se().powi(2) + oracle.se().powi(2)).sqrt();
        assert!(
            (biased.mean() - oracle.mean()).abs() < Z_GATE * combined,
            "biased {} vs oracle {}",
            biased.mean(),
            oracle.mean()
        );
        assert!(
            (biased.mean() - (m + 1.0)).abs() < Z_GATE * biased.se(),
            "biased {} vs {}",
            biased.mean(),
            m + 1.0
        );
    }

    #[test]
    fn weighted_proposal_quantile_inverts_its_distribution() {
        // The quantile at the CDF of a point recovers the point.
        let (mu0, sigma) = (1.3, 1.1774);
        for &x in &[0.1, 0.7, 2.0, 5.5] {
            let v0 = -mu0 / sigma;
            let z = (1.0 + mu0) * (1.0 - normal_cdf(v0)) + sigma * normal_pdf(v0, 0.0, 1.0);
            let v1 = (x - mu0) / sigma;
            let q = ((1.0 + mu0) * (normal_cdf(v1) - normal_cdf(v0))
                + sigma * (normal_pdf(v0, 0.0, 1.0) - normal_pdf(v1, 0.0, 1.0)))
                / z;
            let back = weighted_proposal_quantile(mu0, sigma, q);
            assert!((back - x).abs() < 1e-9, "x {x} back {back}");
        }
    }

    #[test]
    fn conditioned_walk_stays_above_the_floor() {
        let table = occupation_table(20_000, 55);
        let y = 1.0;
        for r in 0..200u32 {
            let mut rng = replica_rng(56, streams::SPINE_QY, r);
            let sample = sample_spine_walk_qy(&law(), &table, y, 12, &mut rng).unwrap();
            assert_eq!(
                sample.measure,
                SpineMeasure::RenewalConditioned { y }
            );
            assert!(sample.acceptance_rate > 0.0 && sample.acceptance_rate <= 1.0);
            for &v in &sample.positions {
                assert!(v >= -y - 1e-12, "position {v} below floor");
            }
        }
        let err = {
            let mut rng = replica_rng(56, streams::SPINE_QY, 9_999);
            sample_spine_walk_qy(&law(), &table, -0.5, 3, &mut rng)
        };
        assert!(err.is_err());
    }

    #[test]
    fn far_floor_first_step_is_nearly_unconditioned() {
        // With the floor 50 standard deviations away, R(z + y) is in its
        // asymptotically linear regime and the conditioning is negligible.
        let table = occupation_table(20_000, 57);
        let mut conditioned = Vec::with_capacity(4_000);
        for r in 0..4_000u32 {
            let mut rng = replica_rng(58, streams::SPINE_QY, r);
            let sample = sample_spine_walk_qy(&law(), &table, 50.0, 1, &mut rng).unwrap();
            conditioned.push(sample.positions[1]);
        }
        let mut free = Vec::with_capacity(4_000);
        for r in 0..4_000u32 {
            let mut rng = replica_rng(59, streams::WALK, r);
            free.push(law().step_law_sample(&mut rng));
        }
        let ks = ks_two_sample(&conditioned, &free).unwrap();
        assert!(ks.p_value > KS_P_MIN, "KS p = {}", ks.p_value);
    }

    #[test]
    fn conditioned_walk_satisfies_the_change_of_measure_identity() {
        let table = occupation_table(30_000, 60);
        let (n, y) = (5, 2.0);
        let (a_lo, a_hi) = (0.0, 1.0);
        let mut lhs = MomentAccumulator::new();
        for r in 0..20_000u32 {
            let mut rng = replica_rng(61, streams::SPINE_QY, r);
            let sample = sample_spine_walk_qy(&law(), &table, y, n, &mut rng).unwrap();
            let v = sample.positions[n];
            let inside = v >= a_lo && v <= a_hi;
            lhs.push(if inside {
                table.interpolate(y) / table.interpolate(v + y)
            } else {
                0.0
            });
        }
        let mut rhs = MomentAccumulator::new();
        for r in 0..200_000u32 {
            let mut rng = replica_rng(62, streams::WALK, r);
            let mut s = 0.0;
            let mut min = f64::INFINITY;
            for _ in 0..n {
                s += law().step_law_sample(&mut rng);
                min = min.min(s);
            }
            let hit = min >= -y && s >= a_lo && s <= a_hi;
            rhs.push(if hit { 1.0 } else { 0.0 });
        }
        let combined = (lhs.se().powi(2) + rhs.se().powi(2)).sqrt();
        // The estimated renewal table is harmonic only up to its standard
        // errors, which compound over the n transitions; allow a small
        // systematic slack on top of the Monte Carlo gate.
        let slack = 0.03 * rhs.mean();
        assert!(
            (lhs.mean() - rhs.mean()).abs() < Z_GATE * combined + slack,
            "lhs {} vs rhs {} (combined se {combined})",
            lhs.mean(),
            rhs.mean()
        );
    }

    #[test]
    fn many_to_one_ties_tree_and_walk_to_the_exact_law() {
        let report = verify_many_to_one(&law(), 6, &[-1.0, 0.0, 1.0], 5_000, 63).unwrap();
        assert_eq!(report.points.len(), 3);
        for p in &report.points {
            assert!(p.exact > 0.0 && p.exact < 1.0);
            assert!(p.tree_se > 0.0 && p.walk_se > 0.0);
        }
        assert!(
            report.worst_z < 4.0,
            "worst z = {} across {:?}",
            report.worst_z,
            report
                .points
                .iter()
                .map(|p| (p.z_tree, p.z_walk))
                .collect::<Vec<_>>()
        );
        assert!(verify_many_to_one(&law(), 0, &[0.0], 10, 1).is_err());
    }
}
