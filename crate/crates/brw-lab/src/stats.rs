//! Statistical verification toolkit: compensated summation, streaming
//! moments, two-sample KS, empirical characteristic functions, the Hill
//! tail-index estimator, rank correlation, and the plateau estimator for the
//! tail-centering constant of the limiting derivative martingale.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Compensated (Neumaier) summation. The derivative martingale adds millions
/// of tiny terms of mixed sign, where naive summation loses digits that the
/// identity tests are tight enough to notice.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Streaming count/mean/variance accumulator (Welford update, Chan merge).
/// Merging in a fixed order is exactly reproducible, which the deterministic
/// replica reductions rely on.
#[derive(Debug, Clone, Copy)]
pub struct MomentAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

impl Default for MomentAccumulator {
    fn default() -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
        self.min = self.min.min(x);
        self.max = self.max.max(x);
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n1 = self.count as f64;
        let n2 = other.count as f64;
        let delta = other.mean - self.mean;
        let n = n1 + n2;
        self.mean += delta * n2 / n;
        self.m2 += other.m2 + delta * delta * n1 * n2 / n;
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }
}

/// Mean and standard error of a slice.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let mut acc = MomentAccumulator::new();
    for &x in xs {
        acc.push(x);
    }
    (acc.mean(), acc.se())
}

/// Sample median with a distribution-free standard error read off the
/// order-statistic confidence interval: the indices `n/2 +- 1.96 sqrt(n)/2`
/// bracket the median at the 95% level, so a quarter of that bracket's
/// width estimates one standard error. Non-finite entries sort to the ends
/// and are ignored.
pub fn median_with_se(xs: &[f64]) -> Result<(f64, f64)> {
    let mut sorted: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if sorted.len() < 8 {
        return Err(Error::Domain(
            "median needs at least 8 finite samples".into(),
        ));
    }
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let half = 1.96 * (n as f64).sqrt() / 2.0;
    let lo = ((n as f64) / 2.0 - half).floor().max(0.0) as usize;
    let hi = (((n as f64) / 2.0 + half).ceil() as usize).min(n - 1);
    let se = (sorted[hi] - sorted[lo]) / (2.0 * 1.96);
    Ok((median, se))
}

/// Empirical quantiles at the given probability levels (nearest-rank).
pub fn quantiles(xs: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Domain("quantiles need samples".into()));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    levels
        .iter()
        .map(|&p| {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!("quantile level {p} outside [0, 1]")));
            }
            let idx = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
            Ok(sorted[idx])
        })
        .collect()
}

/// Standard normal CDF, evaluated through the complementary error function
/// so the tails keep full relative accuracy.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Density of a Gaussian with the given mean and variance.
pub fn normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let z = x - mean;
    (-z * z / (2.0 * variance)).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// Classical two-sample Kolmogorov-Smirnov test with the asymptotic
/// p-value (Stephens' small-sample correction of the Kolmogorov series).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain(
            "ks_two_sample requires two nonempty samples".into(),
        ));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let x = xs[i];
        let y = ys[j];
        if x <= y {
            i += 1;
        }
        if y <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok(KsTest {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

/// Kolmogorov tail function `Q(lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-8 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Empirical characteristic function `(1/N) sum e^{i lambda x}` on a grid.
pub fn empirical_cf(samples: &[f64], lambda_grid: &[f64]) -> Result<Vec<Complex64>> {
    if samples.is_empty() {
        return Err(Error::Domain("empirical_cf requires samples".into()));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); lambda_grid.len()];
    for &x in samples {
        for (acc, &lam) in out.iter_mut().zip(lambda_grid) {
            let (s, c) = (lam * x).sin_cos();
            *acc += Complex64::new(c, s);
        }
    }
    let n = samples.len() as f64;
    for v in &mut out {
        *v /= n;
    }
    Ok(out)
}

/// Default Hill order-statistic fraction, `max(sqrt(N), 100)/N`: enough top
/// points to tame variance without leaving the tail region.
pub fn hill_default_top_fraction(n: usize) -> f64 {
    (n as f64).sqrt().max(100.0) / n as f64
}

/// Hill estimator of the tail index over the top fraction of positive order
/// statistics. An index near 1 is the signature of the one-sided stable
/// regime; light-tailed input drifts far above it.
pub fn hill_index(samples: &[f64], top_fraction: f64) -> Result<f64> {
    let mut pos: Vec<f64> = samples.iter().copied().filter(|&x| x > 0.0).collect();
    if pos.len() < 100 {
        return Err(Error::Domain(format!(
            "hill_index requires at least 100 positive samples, got {}",
            pos.len()
        )));
    }
    pos.sort_by(|p, q| q.total_cmp(p));
    let k = ((pos.len() as f64 * top_fraction).round() as usize).clamp(2, pos.len() - 1);
    let threshold = pos[k];
    let mut log_sum = KahanSum::new();
    for &x in &pos[..k] {
        log_sum.add((x / threshold).ln());
    }
    Ok(k as f64 / log_sum.value())
}

/// Spearman rank correlation. Inputs are expected continuous (ties are
/// broken by index order, which is almost surely irrelevant here).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::Domain(
            "spearman requires two equally long samples of at least 3".into(),
        ));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    Ok(pearson(&ra, &rb))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut r = vec![0.0; xs.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// One grid point of the tail-centering diagnostic `g(y)`.
#[derive(Debug, Clone, Copy)]
pub struct C0Point {
    pub y: f64,
    pub g: f64,
    pub se: f64,
}

#[derive(Debug, Clone)]
pub struct C0Estimate {
    pub points: Vec<C0Point>,
    /// Mean of `g` over the detected plateau; meaningless when `flagged`.
    pub c0_hat: f64,
    /// Index range `[lo, hi]` of the plateau in `points`.
    pub plateau: Option<(usize, usize)>,
    /// Set when no flat window of at least three grid points exists, which
    /// is what light-tailed input produces (`g` then drifts like `-log y`).
    pub flagged: bool,
}

/// Plateau estimator for `c0 = lim_y (E[D 1{D <= y}] - log y)`.
///
/// Computes `g(y) = mean(D 1{D <= y}) - log y` with a standard error at each
/// grid point, then looks for the widest window over which `g` moves by less
/// than the combined uncertainty of its endpoints. A genuine index-1 tail
/// makes `g` level off; anything lighter keeps drifting and raises the flag.
pub fn estimate_c0(d_samples: &[f64], y_grid: &[f64]) -> Result<C0Estimate> {
    if d_samples.is_empty() {
        return Err(Error::Domain("estimate_c0 requires samples".into()));
    }
    if y_grid.len() < 3 || y_grid.windows(2).any(|w| w[0] >= w[1]) || y_grid[0] <= 1.0 {
        return Err(Error::Domain(
            "estimate_c0 requires an increasing grid of at least 3 points, all above 1".into(),
        ));
    }
    let mut sorted = d_samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Prefix sums of D and D^2 give mean and variance of D 1{D <= y} for
    // every threshold in one pass.
    let mut prefix = Vec::with_capacity(n + 1);
    let mut prefix_sq = Vec::with_capacity(n + 1);
    let (mut s, mut s2) = (KahanSum::new(), KahanSum::new());
    prefix.push(0.0);
    prefix_sq.push(0.0);
    for &x in &sorted {
        s.add(x);
        s2.add(x * x);
        prefix.push(s.value());
        prefix_sq.push(s2.value());
    }
    let points: Vec<C0Point> = y_grid
        .iter()
        .map(|&y| {
            let k = sorted.partition_point(|&x| x <= y);
            let mean = prefix[k] / n as f64;
            let var = (prefix_sq[k] / n as f64 - mean * mean).max(0.0);
            C0Point {
                y,
                g: mean - y.ln(),
                se: (var / n as f64).sqrt(),
            }
        })
        .collect();

    let mut best: Option<(usize, usize)> = None;
    for lo in 0..points.len() {
        for hi in (lo + 2)..points.len() {
            let window = &points[lo..=hi];
            let gmax = window.iter().map(|p| p.g).fold(f64::NEG_INFINITY, f64::max);
            let gmin = window.iter().map(|p| p.g).fold(f64::INFINITY, f64::min);
            let tol = (points[lo].se.powi(2) + points[hi].se.powi(2)).sqrt();
            if gmax - gmin < tol {
                let wider = match best {
                    None => true,
                    Some((l, h)) => hi - lo > h - l || (hi - lo == h - l && lo > l),
                };
                if wider {
                    best = Some((lo, hi));
                }
            }
        }
    }
    let (c0_hat, flagged) = match best {
        Some((lo, hi)) => {
            let w = &points[lo..=hi];
            (w.iter().map(|p| p.g).sum::<f64>() / w.len() as f64, false)
        }
        None => (f64::NAN, true),
    };
    Ok(C0Estimate {
        points,
        c0_hat,
        plateau: best,
        flagged,
    })
}
