//! Empirical CDFs, type-1 quantiles, the two-sample Kolmogorov-Smirnov
//! statistic and its asymptotic p-value, and quantile-domain distance over a
//! percentile range.
//!
//! Cumulative probabilities are kept as integer counts so that the KS
//! statistic is computed from exact rationals and rounded once.

use crate::error::{Error, Result};

/// Step-function distribution over a finite sample.
///
/// `values` are the distinct sample values in increasing order and
/// `cum_counts[i]` is the number of samples `<= values[i]`. The last
/// cumulative count always equals `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    values: Vec<f64>,
    cum_counts: Vec<u64>,
}

impl EmpiricalCdf {
    /// Builds the CDF `F(x) = #{samples <= x} / n`, merging duplicates into a
    /// single step.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("samples", "at least one sample is required"));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "samples",
                format!("non-finite sample {bad}"),
            ));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self::from_sorted(&sorted))
    }

    fn from_sorted(sorted: &[f64]) -> Self {
        let mut values = Vec::new();
        let mut cum_counts = Vec::new();
        for (i, &v) in sorted.iter().enumerate() {
            match values.last() {
                Some(&last) if last == v => *cum_counts.last_mut().unwrap() = i as u64 + 1,
                _ => {
                    values.push(v);
                    cum_counts.push(i as u64 + 1);
                }
            }
        }
        EmpiricalCdf { values, cum_counts }
    }

    /// Rebuilds a CDF from serialized steps, checking every invariant.
    pub fn from_steps(values: Vec<f64>, cum_counts: Vec<u64>) -> Result<Self> {
        if values.is_empty() || values.len() != cum_counts.len() {
            return Err(Error::invalid(
                "cdf",
                "steps must be non-empty with one count per value",
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cdf", "non-finite step value"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "cdf",
                "step values must be strictly increasing",
            ));
        }
        if cum_counts[0] == 0 || cum_counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "cdf",
                "cumulative counts must be positive and strictly increasing",
            ));
        }
        Ok(EmpiricalCdf { values, cum_counts })
    }

    /// Pools several CDFs as if their samples had been concatenated.
    pub fn pooled<'a, I>(cdfs: I) -> Option<Self>
    where
        I: IntoIterator<Item = &'a EmpiricalCdf>,
    {
        let mut weighted: Vec<(f64, u64)> = Vec::new();
        for cdf in cdfs {
            weighted.extend(cdf.steps());
        }
        if weighted.is_empty() {
            return None;
        }
        weighted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values: Vec<f64> = Vec::new();
        let mut cum_counts: Vec<u64> = Vec::new();
        let mut total = 0u64;
        for (v, count) in weighted {
            total += count;
            match values.last() {
                Some(&last) if last == v => *cum_counts.last_mut().unwrap() = total,
                _ => {
                    values.push(v);
                    cum_counts.push(total);
                }
            }
        }
        Some(EmpiricalCdf { values, cum_counts })
    }

    /// Sample count.
    pub fn n(&self) -> u64 {
        *self.cum_counts.last().expect("cdf is never empty")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cum_counts(&self) -> &[u64] {
        &self.cum_counts
    }

    /// `(value, multiplicity)` for each step.
    pub fn steps(&self) -> impl Iterator<Item = (f64, u64)> + '_ {
        let mut prev = 0;
        self.values
            .iter()
            .zip(&self.cum_counts)
            .map(move |(&v, &c)| {
                let count = c - prev;
                prev = c;
                (v, count)
            })
    }

    /// `(value, cumulative probability)` for each step.
    pub fn cum_probs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.n() as f64;
        self.values
            .iter()
            .zip(&self.cum_counts)
            .map(move |(&v, &c)| (v, c as f64 / n))
    }

    /// Number of samples `<= x`.
    pub fn count_le(&self, x: f64) -> u64 {
        match self.values.partition_point(|&v| v <= x) {
            0 => 0,
            i => self.cum_counts[i - 1],
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.count_le(x) as f64 / self.n() as f64
    }

    /// Maps every step value through `f`, which must be strictly increasing
    /// on the support.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_steps(
            self.values.iter().map(|&v| f(v)).collect(),
            self.cum_counts.clone(),
        )
    }

    /// Left-continuous inverse: the smallest sample value `v` with
    /// `F(v) >= percent / 100`.
    pub fn quantile(&self, percent: f64) -> Result<f64> {
        if !(percent > 0.0 && percent <= 100.0) {
            return Err(Error::invalid(
                "percentile",
                format!("{percent} is outside (0, 100]"),
            ));
        }
        Ok(self.quantile_unchecked(percent))
    }

    fn quantile_unchecked(&self, percent: f64) -> f64 {
        let n = self.n() as f64;
        let idx = self
            .cum_counts
            .partition_point(|&c| (c as f64) * 100.0 < percent * n);
        self.values[idx.min(self.values.len() - 1)]
    }
}

pub fn build_cdf(samples: &[f64]) -> Result<EmpiricalCdf> {
    EmpiricalCdf::from_samples(samples)
}

pub fn quantile(cdf: &EmpiricalCdf, percent: f64) -> Result<f64> {
    cdf.quantile(percent)
}

/// Two-sample KS distance `sup |F_a(x) - F_b(x)|`, evaluated at every step of
/// either CDF.
pub fn ks_statistic(a: &EmpiricalCdf, b: &EmpiricalCdf) -> f64 {
    let (na, nb) = (a.n() as u128, b.n() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ca, mut cb) = (0u128, 0u128);
    let mut best = 0u128;
    while i < a.values.len() || j < b.values.len() {
        let x = match (a.values.get(i), b.values.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        if a.values.get(i) == Some(&x) {
            ca = a.cum_counts[i] as u128;
            i += 1;
        }
        if b.values.get(j) == Some(&x) {
            cb = b.cum_counts[j] as u128;
            j += 1;
        }
        best = best.max((ca * nb).abs_diff(cb * na));
    }
    best as f64 / (na * nb) as f64
}

/// Result of a two-sample KS comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub d: f64,
    pub p_value: f64,
    pub n1: u64,
    pub n2: u64,
}

pub fn ks_test(a: &EmpiricalCdf, b: &EmpiricalCdf) -> KsResult {
    let d = ks_statistic(a, b);
    KsResult {
        d,
        p_value: ks_pvalue(d, a.n(), b.n()),
        n1: a.n(),
        n2: b.n(),
    }
}

const SERIES_EPS: f64 = 1e-12;

/// Kolmogorov survival function `Q(λ) = 2 Σ_{k≥1} (-1)^{k-1} exp(-2k²λ²)`.
///
/// For small λ the alternating series converges too slowly to be useful, so
/// the complementary Jacobi theta form
/// `1 - (√(2π)/λ) Σ_{k≥1} exp(-(2k-1)²π²/(8λ²))` is summed instead. Both are
/// truncated once a term drops below 1e-12.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.18 {
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut sum = 0.0;
        for k in 1u32.. {
            let odd = f64::from(2 * k - 1);
            let term = (-odd * odd * c).exp();
            sum += term;
            if term < SERIES_EPS {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum
    } else {
        let mut sum = 0.0;
        let mut sign = 1.0;
        for k in 1u32.. {
            let kf = f64::from(k);
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            sum += sign * term;
            sign = -sign;
            if term < SERIES_EPS {
                break;
            }
        }
        2.0 * sum
    };
    q.clamp(0.0, 1.0)
}

/// Asymptotic two-sample p-value with the small-sample correction
/// `λ = (√nₑ + 0.12 + 0.11/√nₑ)·d`, `nₑ = n1·n2/(n1+n2)`.
pub fn ks_pvalue(d: f64, n1: u64, n2: u64) -> f64 {
    if d <= 0.0 || n1 == 0 || n2 == 0 {
        return 1.0;
    }
    let (n1, n2) = (n1 as f64, n2 as f64);
    let ne = (n1 * n2 / (n1 + n2)).sqrt();
    kolmogorov_q((ne + 0.12 + 0.11 / ne) * d)
}

/// Integer percentile grid `lo, lo + step, ...` up to and including `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PercentileGrid {
    pub lo: u32,
    pub hi: u32,
    pub step: u32,
}

impl PercentileGrid {
    pub fn new(lo: u32, hi: u32, step: u32) -> Result<Self> {
        if lo < 1 || hi > 99 || lo >= hi {
            return Err(Error::invalid(
                "percentile range",
                format!("need 1 <= lo < hi <= 99, got [{lo}, {hi}]"),
            ));
        }
        if step == 0 {
            return Err(Error::invalid("percentile step", "must be at least 1"));
        }
        Ok(PercentileGrid { lo, hi, step })
    }

    pub fn points(&self) -> impl Iterator<Item = u32> {
        (self.lo..=self.hi).step_by(self.step as usize)
    }
}

/// Quantiles at every integer percentile 1..=99, so a grid search can reuse
/// them across cells.
#[derive(Debug, Clone)]
pub struct QuantileTable([f64; 99]);

impl QuantileTable {
    pub fn new(cdf: &EmpiricalCdf) -> Self {
        let mut table = [0.0; 99];
        for (p, slot) in (1..=99u32).zip(table.iter_mut()) {
            *slot = cdf.quantile_unchecked(f64::from(p));
        }
        QuantileTable(table)
    }

    pub fn at(&self, percent: u32) -> f64 {
        self.0[percent as usize - 1]
    }

    /// Mean absolute quantile gap over `grid`.
    pub fn range_distance(&self, other: &QuantileTable, grid: PercentileGrid) -> f64 {
        let mut sum = 0.0;
        let mut count = 0u32;
        for p in grid.points() {
            sum += (self.at(p) - other.at(p)).abs();
            count += 1;
        }
        sum / f64::from(count)
    }
}

/// Mean over the grid percentiles `p` of `|Q_a(p) - Q_b(p)|`.
pub fn range_distance(
    a: &EmpiricalCdf,
    b: &EmpiricalCdf,
    lo: u32,
    hi: u32,
    step: u32,
) -> Result<f64> {
    let grid = PercentileGrid::new(lo, hi, step)?;
    let mut sum = 0.0;
    let mut count = 0u32;
    for p in grid.points() {
        let p = f64::from(p);
        sum += (a.quantile_unchecked(p) - b.quantile_unchecked(p)).abs();
        count += 1;
    }
    Ok(sum / f64::from(count))
}
