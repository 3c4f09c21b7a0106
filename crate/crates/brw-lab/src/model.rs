//! Offspring point-process families.
//!
//! Both built-in families place a random number of children at i.i.d.
//! Gaussian displacements `N(mu_d, s^2)` from the parent and are normalized
//! so that `E sum e^{-V} = 1` and `E sum V e^{-V} = 0`. Those two conditions
//! force `mu_d = s^2 = 2 log m` for mean offspring count `m`, which is
//! solved in closed form at construction rather than fitted: every identity
//! downstream drifts if the normalization is even slightly off.
//!
//! The associated walk of the many-to-one transfer has step distribution
//! `nu(dx) = E[sum e^{-V} 1{V in dx}]`, a centered Gaussian whose variance
//! equals the branching variance `sigma^2 = E sum V^2 e^{-V}`; for these
//! families `sigma^2 = s^2`.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::stats::{normal_cdf, KahanSum};

/// Which reproduction law generates the children.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// Exactly two children per particle.
    DyadicGaussian,
    /// Poisson(m) children per particle, m > 1.
    PoissonGaussian { m: f64 },
}

/// A validated offspring law together with its derived constants.
#[derive(Debug, Clone)]
pub struct OffspringLaw {
    family: Family,
    /// Displacement mean of one child.
    mu_d: f64,
    /// Displacement variance of one child.
    s2: f64,
    /// Branching variance `sigma^2 = E sum V^2 e^{-V}`.
    sigma2: f64,
    /// Exponent margin of the finite-moment condition
    /// `E sum e^{-(1+alpha)V} < infinity`; both built-ins take `alpha = 1`.
    alpha: f64,
    /// Cached `sqrt(s2)` for the hot sampling paths.
    s: f64,
    /// Cached `sqrt(sigma2)`.
    step_sigma: f64,
    poisson: Option<Poisson<f64>>,
}

impl OffspringLaw {
    /// Two children at independent `N(2 log 2, 2 log 2)` displacements.
    pub fn dyadic_gaussian() -> Self {
        Self::gaussian_family(Family::DyadicGaussian, 2.0 * std::f64::consts::LN_2)
    }

    /// Poisson(m) children at independent `N(2 log m, 2 log m)`
    /// displacements. Requires `m > 1`; at and below one the tree dies out
    /// and no normalization exists.
    pub fn poisson_gaussian(m: f64) -> Result<Self> {
        if m <= 1.0 || !m.is_finite() {
            return Err(Error::Parameter {
                name: "m",
                reason: format!("offspring mean must be finite and > 1, got {m}"),
            });
        }
        Ok(Self::gaussian_family(
            Family::PoissonGaussian { m },
            2.0 * m.ln(),
        ))
    }

    fn gaussian_family(family: Family, mu_and_s2: f64) -> Self {
        let poisson = match family {
            Family::DyadicGaussian => None,
            Family::PoissonGaussian { m } => Some(Poisson::new(m).expect("m > 1 checked")),
        };
        // For the built-ins the displacement tilt gives sigma2 = s2; see the
        // closed-form moments in `verify_normalization`.
        OffspringLaw {
            family,
            mu_d: mu_and_s2,
            s2: mu_and_s2,
            sigma2: mu_and_s2,
            alpha: 1.0,
            s: mu_and_s2.sqrt(),
            step_sigma: mu_and_s2.sqrt(),
            poisson,
        }
    }

    /// Same Gaussian-displacement structure with the displacement mean and
    /// variance decoupled from the normalization. Only tests use this, to
    /// exercise the moment formulas off the normalized manifold.
    #[cfg(test)]
    pub(crate) fn unnormalized_for_tests(family: Family, mu_d: f64, s2: f64) -> Self {
        let poisson = match family {
            Family::DyadicGaussian => None,
            Family::PoissonGaussian { m } => Some(Poisson::new(m).expect("valid m")),
        };
        let mean_count = match family {
            Family::DyadicGaussian => 2.0,
            Family::PoissonGaussian { m } => m,
        };
        let e = (-mu_d + s2 / 2.0).exp();
        OffspringLaw {
            family,
            mu_d,
            s2,
            sigma2: mean_count * (s2 + (mu_d - s2) * (mu_d - s2)) * e,
            alpha: 1.0,
            s: s2.sqrt(),
            step_sigma: (mean_count * (s2 + (mu_d - s2) * (mu_d - s2)) * e).sqrt(),
            poisson,
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            Family::DyadicGaussian => "dyadic-gaussian",
            Family::PoissonGaussian { .. } => "poisson-gaussian",
        }
    }

    /// Mean offspring count.
    pub fn offspring_mean(&self) -> f64 {
        match self.family {
            Family::DyadicGaussian => 2.0,
            Family::PoissonGaussian { m } => m,
        }
    }

    pub fn mu_d(&self) -> f64 {
        self.mu_d
    }

    pub fn s2(&self) -> f64 {
        self.s2
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of children for one reproduction event.
    #[inline]
    pub fn offspring_count<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.poisson {
            None => 2,
            Some(p) => p.sample(rng) as usize,
        }
    }

    /// Displacement of one child relative to its parent.
    #[inline]
    pub fn displacement<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mu_d + self.s * z
    }

    /// One draw of the offspring point process, as displacements relative to
    /// the parent. Convenience form of `offspring_count` + `displacement`;
    /// the simulation engine uses the unboxed pair to avoid per-particle
    /// allocation.
    pub fn sample_offspring<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.offspring_count(rng);
        (0..k).map(|_| self.displacement(rng)).collect()
    }

    /// One increment of the associated walk: `N(0, sigma^2)` for the
    /// built-in families.
    #[inline]
    pub fn step_law_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.step_sigma * z
    }

    /// CDF of one step of the associated walk.
    pub fn step_cdf(&self, t: f64) -> f64 {
        normal_cdf(t / self.step_sigma)
    }

    /// CDF of the walk position after `n` steps from zero.
    pub fn walk_cdf(&self, n: usize, t: f64) -> f64 {
        normal_cdf(t / (n as f64 * self.sigma2).sqrt())
    }
}

/// How `verify_normalization` should evaluate the moments.
#[derive(Debug, Clone, Copy)]
pub enum NormalizationBudget {
    /// Exact Gaussian moment identities; no sampling.
    ClosedForm,
    /// Monte Carlo over this many reproduction events, with standard errors.
    MonteCarlo { replicas: usize },
}

/// Estimates (or exact values) of the four normalization moments.
#[derive(Debug, Clone, Copy)]
pub struct NormalizationReport {
    /// `E sum e^{-V}`, must be 1.
    pub m1: f64,
    /// `E sum V e^{-V}`, must be 0.
    pub m2: f64,
    /// `E sum V^2 e^{-V}`.
    pub sigma2_hat: f64,
    /// `E sum e^{-(1+alpha)V}`, finite for the moment condition.
    pub a5_moment: f64,
    /// Standard errors in the same order, absent on the closed-form path.
    pub se: Option<[f64; 4]>,
}

/// Evaluates the normalization moments of a law, either through the exact
/// Gaussian formulas or by Monte Carlo.
pub fn verify_normalization<R: Rng + ?Sized>(
    law: &OffspringLaw,
    budget: NormalizationBudget,
    rng: &mut R,
) -> NormalizationReport {
    match budget {
        NormalizationBudget::ClosedForm => {
            let c = law.offspring_mean();
            let (mu, s2, a) = (law.mu_d, law.s2, law.alpha);
            // E e^{-X} = exp(-mu + s^2/2) and the tilted moments
            // E X e^{-X} = (mu - s^2) E e^{-X},
            // E X^2 e^{-X} = ((mu - s^2)^2 + s^2) E e^{-X} for X ~ N(mu, s^2).
            let e = (-mu + s2 / 2.0).exp();
            NormalizationReport {
                m1: c * e,
                m2: c * (mu - s2) * e,
                sigma2_hat: c * ((mu - s2) * (mu - s2) + s2) * e,
                a5_moment: c * (-(1.0 + a) * mu + (1.0 + a) * (1.0 + a) * s2 / 2.0).exp(),
                se: None,
            }
        }
        NormalizationBudget::MonteCarlo { replicas } => {
            let mut acc = [crate::stats::MomentAccumulator::new(); 4];
            for _ in 0..replicas {
                let k = law.offspring_count(rng);
                let mut sums = [KahanSum::new(); 4];
                for _ in 0..k {
                    let v = law.displacement(rng);
                    let w = (-v).exp();
                    sums[0].add(w);
                    sums[1].add(v * w);
                    sums[2].add(v * v * w);
                    sums[3].add((-(1.0 + law.alpha) * v).exp());
                }
                for (a, s) in acc.iter_mut().zip(&sums) {
                    a.push(s.value());
                }
            }
            NormalizationReport {
                m1: acc[0].mean(),
                m2: acc[1].mean(),
                sigma2_hat: acc[2].mean(),
                a5_moment: acc[3].mean(),
                se: Some([acc[0].se(), acc[1].se(), acc[2].se(), acc[3].se()]),
            }
        }
    }
}
