//! Registration errors, ensemble statistics and chain diagnostics.

use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pullback, PointSet, TransformParams};
use crate::model::mean_params;
use crate::samplers::Chain;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Index of the reference point nearest to `p` (smallest index on ties).
fn nearest(x: &PointSet, p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, xi) in x.iter().enumerate() {
        let d = sq_dist(xi, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Mean over observations of the squared distance from `R^T (Y_j - t)` to the
/// nearest reference point.
pub fn registration_mse(theta: &TransformParams, x: &PointSet, y: &PointSet) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("observation set is empty".into()));
    }
    if x.dim() != y.dim() {
        return Err(Error::InvalidArgument(format!(
            "reference is {}D but observation is {}D",
            x.dim(),
            y.dim()
        )));
    }
    let back = pullback(theta, y)?;
    let total: f64 = back.iter().map(|p| nearest(x, p).1).sum();
    Ok(total / y.len() as f64)
}

/// Mean, population variance and normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub var: f64,
    pub ci95: (f64, f64),
}

pub fn ensemble_error_stats(per_run_mse: &[f64]) -> Result<ErrorStats> {
    let l = per_run_mse.len();
    if l < 2 {
        return Err(Error::InvalidArgument(format!(
            "ensemble statistics need at least 2 runs, got {l}"
        )));
    }
    let n = l as f64;
    let mean = per_run_mse.iter().sum::<f64>() / n;
    let var = per_run_mse.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let half = 1.96 * (var / n).sqrt();
    Ok(ErrorStats {
        mean,
        var,
        ci95: (mean - half, mean + half),
    })
}

/// Pulled-back registered points grouped by nearest reference point (the `A_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredSets {
    pub dim: usize,
    sets: Vec<Vec<f64>>,
}

impl RegisteredSets {
    pub fn new(dim: usize, n_reference: usize) -> Self {
        RegisteredSets {
            dim,
            sets: vec![Vec::new(); n_reference],
        }
    }

    pub fn n_reference(&self) -> usize {
        self.sets.len()
    }

    /// `|A_i|`.
    pub fn count(&self, i: usize) -> usize {
        self.sets[i].len() / self.dim
    }

    pub fn total(&self) -> usize {
        (0..self.sets.len()).map(|i| self.count(i)).sum()
    }

    pub fn points(&self, i: usize) -> impl Iterator<Item = &[f64]> {
        self.sets[i].chunks_exact(self.dim)
    }

    pub fn push(&mut self, i: usize, p: &[f64]) {
        debug_assert_eq!(p.len(), self.dim);
        self.sets[i].extend_from_slice(p);
    }

    pub fn mean(&self, i: usize) -> Option<Vec<f64>> {
        let k = self.count(i);
        if k == 0 {
            return None;
        }
        let mut m = vec![0.0; self.dim];
        for p in self.points(i) {
            for (a, v) in m.iter_mut().zip(p) {
                *a += v;
            }
        }
        Some(m.into_iter().map(|v| v / k as f64).collect())
    }
}

/// For every registration `(theta_l, Y_l)` pulls each observation back and
/// appends it to the set of its nearest reference point.
pub fn accumulate_registered_points(
    results: &[(TransformParams, PointSet)],
    x: &PointSet,
) -> Result<RegisteredSets> {
    let mut sets = RegisteredSets::new(x.dim(), x.len());
    for (theta, y) in results {
        if y.dim() != x.dim() {
            return Err(Error::InvalidArgument(format!(
                "observation is {}D, reference is {}D",
                y.dim(),
                x.dim()
            )));
        }
        let back = pullback(theta, y)?;
        for p in back.iter() {
            sets.push(nearest(x, p).0, p);
        }
    }
    Ok(sets)
}

/// RMSE between reference points and the mean of their registered points,
/// over references with `|A_i| > L/10`. Returns `(rmse, retained)`.
pub fn reference_rmse(sets: &RegisteredSets, x: &PointSet, runs: usize) -> Result<(f64, usize)> {
    if runs == 0 {
        return Err(Error::InvalidArgument("run count must be at least 1".into()));
    }
    if sets.n_reference() != x.len() || sets.dim != x.dim() {
        return Err(Error::InvalidArgument(
            "registered sets do not match the reference".into(),
        ));
    }
    let threshold = runs as f64 / 10.0;
    let mut total = 0.0;
    let mut retained = 0;
    for i in 0..x.len() {
        if (sets.count(i) as f64) > threshold {
            let mean = sets.mean(i).expect("non-empty set");
            total += sq_dist(x.point(i), &mean);
            retained += 1;
        }
    }
    if retained == 0 {
        return Err(Error::NoRetainedReferences { threshold });
    }
    Ok(((total / retained as f64).sqrt(), retained))
}

/// Normalised sample autocorrelation `rho(0..=max_lag)`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n.max(1) as f64;
    let dev: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0 = dev.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    if n == 0 || c0.is_nan() || c0 <= 0.0 {
        return Err(Error::UndefinedAutocorrelation);
    }
    if max_lag == 0 || max_lag >= n {
        return Err(Error::InvalidArgument(format!(
            "max_lag must lie in [1, {}), got {max_lag}",
            n
        )));
    }
    Ok((0..=max_lag)
        .map(|k| {
            let ck = dev[..n - k]
                .iter()
                .zip(&dev[k..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n as f64;
            ck / c0
        })
        .collect())
}

/// Effective sample size from Geyer's initial monotone sequence estimator,
/// capped at `n log10(n)` for antithetic chains.
pub fn effective_sample_size(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n < 4 {
        return Err(Error::InvalidArgument(
            "effective sample size needs at least 4 samples".into(),
        ));
    }
    let max_lag = (n - 1).min(5000);
    let rho = autocorrelation(series, max_lag)?;
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while k < max_lag {
        let pair = rho[k] + rho[k + 1];
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 2;
    }
    let nf = n as f64;
    let tau = (2.0 * sum - 1.0).max(1.0 / nf.log10());
    Ok(nf / tau)
}

/// Fixed-range histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram1d {
    pub parameter: usize,
    pub low: f64,
    pub high: f64,
    pub counts: Vec<usize>,
}

impl Histogram1d {
    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let w = (self.high - self.low) / self.counts.len() as f64;
        (self.low + w * b as f64, self.low + w * (b + 1) as f64)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2d {
    pub parameters: (usize, usize),
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub bins: usize,
    /// Row-major `bins x bins`, indexed `[bin_x * bins + bin_y]`.
    pub counts: Vec<usize>,
}

impl Histogram2d {
    pub fn count(&self, bx: usize, by: usize) -> usize {
        self.counts[bx * self.bins + by]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalHistograms {
    pub marginals: Vec<Histogram1d>,
    pub pairs: Vec<Histogram2d>,
}

/// Histogram ranges: canonical boxes for angles; translations use the given
/// range or, if absent, the extent of the chain.
pub fn parameter_ranges(chain: &Chain, translation_range: Option<(f64, f64)>) -> Vec<(f64, f64)> {
    let dim = chain.samples.first().map_or(3, |s| s.dim);
    let mut ranges = if dim == 2 {
        vec![(0.0, TAU)]
    } else {
        vec![(0.0, TAU), (-FRAC_PI_2, FRAC_PI_2), (0.0, TAU)]
    };
    let na = ranges.len();
    for k in 0..dim {
        let r = translation_range.unwrap_or_else(|| {
            let s = chain.parameter_series(na + k);
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        });
        ranges.push(r);
    }
    ranges
}

fn bin_of(v: f64, (lo, hi): (f64, f64), bins: usize) -> usize {
    let b = ((v - lo) / (hi - lo) * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

/// All 1D marginals and all pairwise 2D joint histograms of the chain.
/// Out-of-range values are clamped into the edge bins.
pub fn marginal_histograms(chain: &Chain, bins: usize) -> Result<MarginalHistograms> {
    marginal_histograms_with_ranges(chain, bins, &parameter_ranges(chain, None))
}

pub fn marginal_histograms_with_ranges(
    chain: &Chain,
    bins: usize,
    ranges: &[(f64, f64)],
) -> Result<MarginalHistograms> {
    if chain.is_empty() {
        return Err(Error::InvalidArgument("chain has no samples".into()));
    }
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    let p = ranges.len();
    let series: Vec<Vec<f64>> = (0..p).map(|k| chain.parameter_series(k)).collect();
    let binned: Vec<Vec<usize>> = series
        .iter()
        .zip(ranges)
        .map(|(s, &r)| s.iter().map(|&v| bin_of(v, r, bins)).collect())
        .collect();
    let marginals = (0..p)
        .map(|k| {
            let mut counts = vec![0; bins];
            for &b in &binned[k] {
                counts[b] += 1;
            }
            Histogram1d {
                parameter: k,
                low: ranges[k].0,
                high: ranges[k].1,
                counts,
            }
        })
        .collect();
    let mut pairs = Vec::with_capacity(p * (p - 1) / 2);
    for a in 0..p {
        for b in a + 1..p {
            let mut counts = vec![0; bins * bins];
            for (&ba, &bb) in binned[a].iter().zip(&binned[b]) {
                counts[ba * bins + bb] += 1;
            }
            pairs.push(Histogram2d {
                parameters: (a, b),
                x_range: ranges[a],
                y_range: ranges[b],
                bins,
                counts,
            });
        }
    }
    Ok(MarginalHistograms { marginals, pairs })
}

/// Average of MAP estimates: circular mean of angles, arithmetic mean of translations.
pub fn average_map(maps: &[TransformParams]) -> Result<TransformParams> {
    mean_params(maps)
}

/// Summary of an ensemble of registrations.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    pub per_run_mse: Vec<f64>,
    pub stats: ErrorStats,
    pub registered_sets: RegisteredSets,
    pub reference_rmse: f64,
    pub retained: usize,
}

impl EnsembleReport {
    /// Statistics from per-run errors and the registrations behind them.
    /// A single run gives zero variance and a degenerate interval.
    pub fn build(
        per_run_mse: Vec<f64>,
        registrations: &[(TransformParams, PointSet)],
        x: &PointSet,
    ) -> Result<Self> {
        let stats = match per_run_mse.len() {
            0 => return Err(Error::InvalidArgument("ensemble has no runs".into())),
            1 => ErrorStats {
                mean: per_run_mse[0],
                var: 0.0,
                ci95: (per_run_mse[0], per_run_mse[0]),
            },
            _ => ensemble_error_stats(&per_run_mse)?,
        };
        let registered_sets = accumulate_registered_points(registrations, x)?;
        let (reference_rmse, retained) =
            reference_rmse(&registered_sets, x, registrations.len())?;
        Ok(EnsembleReport {
            per_run_mse,
            stats,
            registered_sets,
            reference_rmse,
            retained,
        })
    }
}
