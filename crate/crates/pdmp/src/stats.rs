//! Small statistics toolbox: mergeable moment accumulators, batch-means
//! standard errors, quantiles, Kolmogorov–Smirnov distance and the usual
//! bandwidth/bin heuristics for density estimates.

/// Running mean/variance accumulator (Welford). Merging two accumulators is
/// associative and order-insensitive up to floating-point rounding, which is
/// what makes the estimators in this crate safe to combine across workers.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn merge(&mut self, other: &Accumulator) {
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
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance (n-1 denominator).
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        self.m2 / (self.count as f64 - 1.0)
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standard error of the mean, assuming independent samples.
    pub fn std_error(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Mean and batch-means standard error of a sequence of (possibly correlated)
/// values. The sequence is split into `batches` contiguous blocks; the SE is
/// the standard error of the block means.
pub fn batch_means(values: &[f64], batches: usize) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let b = batches.clamp(2, n.max(2));
    if n < 2 * b {
        // Too few values for stable blocks: fall back to iid SE.
        let mut acc = Accumulator::new();
        values.iter().for_each(|&v| acc.push(v));
        return (mean, acc.std_error());
    }
    let block = n / b;
    let mut block_means = Vec::with_capacity(b);
    for k in 0..b {
        let lo = k * block;
        let hi = if k == b - 1 { n } else { lo + block };
        let s: f64 = values[lo..hi].iter().sum();
        block_means.push(s / (hi - lo) as f64);
    }
    let mut acc = Accumulator::new();
    block_means.iter().for_each(|&v| acc.push(v));
    (mean, acc.std_error())
}

/// Weighted mean and batch-means SE for pre-binned batch totals
/// `(sum_k, weight_k)`. Used for time averages where each batch covers an
/// equal time window: the estimate is `sum(sums)/sum(weights)` and the SE is
/// taken over the per-batch ratios.
pub fn batch_ratio(sums: &[f64], weights: &[f64]) -> (f64, f64) {
    assert_eq!(sums.len(), weights.len());
    let total_w: f64 = weights.iter().sum();
    let total_s: f64 = sums.iter().sum();
    if total_w == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = total_s / total_w;
    let mut acc = Accumulator::new();
    for (s, w) in sums.iter().zip(weights) {
        if *w > 0.0 {
            acc.push(s / w);
        }
    }
    (mean, acc.std_error())
}

/// Two-sided Kolmogorov–Smirnov statistic `sup_x |F_n(x) - F(x)|` of samples
/// against a reference CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (k, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        let lo = k as f64 / n;
        let hi = (k + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// Critical KS value at significance `alpha` in {0.01, 0.05}, using the
/// asymptotic constant with the Stephens small-sample correction.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    let k_alpha = if alpha <= 0.01 { 1.62762 } else { 1.35810 };
    let sn = (n as f64).sqrt();
    k_alpha / (sn + 0.12 + 0.11 / sn)
}

/// Empirical quantile (linear interpolation) of already-sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Silverman's rule-of-thumb bandwidth for a Gaussian kernel.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 1.0;
    }
    let mut acc = Accumulator::new();
    samples.iter().for_each(|&v| acc.push(v));
    let sd = acc.std_dev();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let scale = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let scale = if scale > 0.0 { scale } else { 1.0 };
    0.9 * scale * (n as f64).powf(-0.2)
}

/// Freedman–Diaconis histogram bin count, clamped to a practical range.
pub fn freedman_diaconis_bins(samples: &[f64]) -> usize {
    let n = samples.len();
    if n < 2 {
        return 10;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let range = sorted[n - 1] - sorted[0];
    if iqr <= 0.0 || range <= 0.0 {
        return 10;
    }
    let width = 2.0 * iqr * (n as f64).powf(-1.0 / 3.0);
    ((range / width).ceil() as usize).clamp(10, 400)
}
