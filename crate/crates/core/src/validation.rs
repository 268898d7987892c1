//! Backtest-overfitting statistics over a returns matrix (rows are days,
//! columns are configurations): CSCV/PBO, ONC clustering, PSR and DSR.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::write_json;
use crate::stats;

/// Euler–Mascheroni constant as used by the False Strategy Theorem.
pub const EULER_GAMMA: f64 = 0.5772156649;

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsMatrix {
    labels: Vec<String>,
    data: Array2<f64>,
    failed: Vec<bool>,
}

impl ReturnsMatrix {
    pub fn new(labels: Vec<String>, data: Array2<f64>) -> Result<Self> {
        let failed = vec![false; labels.len()];
        Self::with_flags(labels, data, failed)
    }

    /// `failed[j]` marks columns that stand in for runs which never traded.
    pub fn with_flags(labels: Vec<String>, data: Array2<f64>, failed: Vec<bool>) -> Result<Self> {
        if labels.len() != data.ncols() {
            return Err(Error::DimensionMismatch { expected: data.ncols(), got: labels.len() });
        }
        if failed.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: labels.len(), got: failed.len() });
        }
        if let Some(((t, j), v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidSeries(format!("non-finite return {v} at row {t}, column `{}`", labels[j])));
        }
        Ok(Self { labels, data, failed })
    }

    pub fn from_columns(labels: Vec<String>, columns: &[Vec<f64>]) -> Result<Self> {
        let t = columns.first().map_or(0, Vec::len);
        if let Some(c) = columns.iter().find(|c| c.len() != t) {
            return Err(Error::DimensionMismatch { expected: t, got: c.len() });
        }
        let data = Array2::from_shape_fn((t, columns.len()), |(i, j)| columns[j][i]);
        Self::new(labels, data)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn failed(&self) -> &[bool] {
        &self.failed
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.data.column(j).to_vec()
    }

    pub fn select_columns(&self, idx: &[usize]) -> Self {
        Self {
            labels: idx.iter().map(|&j| self.labels[j].clone()).collect(),
            data: self.data.select(Axis(1), idx),
            failed: idx.iter().map(|&j| self.failed[j]).collect(),
        }
    }

    pub fn without_failed(&self) -> Self {
        let keep: Vec<usize> = (0..self.n_cols()).filter(|&j| !self.failed[j]).collect();
        self.select_columns(&keep)
    }

    /// Header row holds the column labels. A leading `t` or `date` column is
    /// treated as an index and dropped.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path.as_ref())?;
        let headers = rdr.headers()?.clone();
        let skip = matches!(headers.get(0).map(str::to_ascii_lowercase).as_deref(), Some("t" | "date" | ""));
        let labels: Vec<String> = headers.iter().skip(skip as usize).map(str::to_string).collect();
        let mut values = Vec::new();
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec?;
            for (j, cell) in rec.iter().skip(skip as usize).enumerate() {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {rows}, column `{}`: `{cell}` is not a number", labels[j])))?;
                values.push(v);
            }
            rows += 1;
        }
        let data = Array2::from_shape_vec((rows, labels.len()), values)
            .map_err(|e| Error::Parse(format!("ragged returns matrix: {e}")))?;
        Self::new(labels, data)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (t, row) in self.data.outer_iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Annualized Sharpe ratio `mean/std·√days_per_year` with sample std.
pub fn sharpe(series: &[f64], days_per_year: u32) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::InvalidSeries(format!("sharpe needs ≥ 2 observations, got {}", series.len())));
    }
    let sd = stats::std_dev(series);
    if is_constant(series) || !(sd > 0.0) {
        return Err(Error::UndefinedSharpe);
    }
    Ok(stats::mean(series) / sd * (days_per_year as f64).sqrt())
}

fn is_constant(xs: &[f64]) -> bool {
    xs.iter().all(|&x| x == xs[0])
}

fn sharpe_or_zero(series: &[f64], days_per_year: u32) -> f64 {
    sharpe(series, days_per_year).unwrap_or(0.0)
}

// ---------------------------------------------------------------------------
// CSCV

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CscvMetric {
    #[default]
    Sharpe,
    TotalPnl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CscvResult {
    pub s: usize,
    pub n_configs: usize,
    pub rows_used: usize,
    /// Per combination, in lexicographic order of the IS block sets.
    pub best_is: Vec<usize>,
    pub omega: Vec<f64>,
    pub logits: Vec<f64>,
    pub pbo: f64,
}

impl CscvResult {
    pub fn n_combinations(&self) -> usize {
        self.logits.len()
    }

    pub fn write_logits_csv(&self, path: impl AsRef<Path>, labels: &[String]) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["combination", "best_is", "omega", "logit"])?;
        for c in 0..self.logits.len() {
            w.write_record([
                c.to_string(),
                labels[self.best_is[c]].clone(),
                self.omega[c].to_string(),
                self.logits[c].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// All `k`-subsets of `0..n` as bit masks, lexicographic in their sorted
/// index lists.
fn combination_masks(n: usize, k: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(binomial(n, k) as usize);
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().fold(0u64, |m, &i| m | 1 << i));
        let Some(pos) = (0..k).rev().find(|&p| idx[p] < n - k + p) else {
            return out;
        };
        idx[pos] += 1;
        for p in pos + 1..k {
            idx[p] = idx[p - 1] + 1;
        }
    }
}

/// Relative OOS position of column `n_star`: midrank among all columns,
/// divided by N+1.
fn relative_rank(oos: &[f64], n_star: usize) -> f64 {
    let x = oos[n_star];
    let less = oos.iter().filter(|&&o| o < x).count();
    let equal = oos.iter().filter(|&&o| o == x).count() - 1;
    (1.0 + less as f64 + 0.5 * equal as f64) / (oos.len() + 1) as f64
}

const MAX_SPLITS: usize = 32;

/// Combinatorially symmetric cross-validation. Rows are cut into `s`
/// contiguous blocks; every half of the blocks serves once as IS with the
/// complement as OOS.
pub fn cscv(m: &ReturnsMatrix, s: usize, metric: CscvMetric) -> Result<CscvResult> {
    let (t, n) = (m.n_rows(), m.n_cols());
    if s < 2 || s % 2 != 0 || s > MAX_SPLITS {
        return Err(Error::InvalidConfig(format!("split count {s} must be even and in 2..={MAX_SPLITS}")));
    }
    if n < 2 {
        return Err(Error::InvalidConfig(format!("CSCV needs ≥ 2 configurations, got {n}")));
    }
    if s > t {
        return Err(Error::InvalidConfig(format!("split count {s} exceeds {t} rows")));
    }
    let rows = t - t % s;
    if rows < t {
        tracing::warn!(dropped = t - rows, "returns rows not divisible by {s}; truncating trailing rows");
    }
    let n_comb = binomial(s, s / 2);
    if n_comb > 1_000_000 {
        tracing::warn!(combinations = n_comb as u64, "large CSCV run");
    }
    let block = rows / s;
    if metric == CscvMetric::Sharpe && block * s / 2 < 2 {
        return Err(Error::InvalidConfig("sub-windows too short for a Sharpe ratio".into()));
    }

    // per-block column sums and sums of squares
    let mut sums = Array2::<f64>::zeros((s, n));
    let mut sumsq = Array2::<f64>::zeros((s, n));
    for b in 0..s {
        for row in m.data.slice(ndarray::s![b * block..(b + 1) * block, ..]).outer_iter() {
            for (j, &v) in row.iter().enumerate() {
                sums[[b, j]] += v;
                sumsq[[b, j]] += v * v;
            }
        }
    }
    let half_len = (block * s / 2) as f64;
    let score = |sum: f64, sq: f64| -> f64 {
        match metric {
            CscvMetric::TotalPnl => sum,
            CscvMetric::Sharpe => {
                let mean = sum / half_len;
                let var = (sq - sum * mean) / (half_len - 1.0);
                if var <= 1e-14 * (sq / half_len) || var <= 0.0 {
                    // constant sub-window
                    if mean > 0.0 {
                        f64::INFINITY
                    } else if mean < 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        0.0
                    }
                } else {
                    mean / var.sqrt()
                }
            }
        }
    };

    let masks = combination_masks(s, s / 2);
    let per_comb: Vec<(usize, f64)> = masks
        .par_iter()
        .map(|&mask| {
            let mut is_acc = vec![(0.0, 0.0); n];
            let mut oos_acc = vec![(0.0, 0.0); n];
            for b in 0..s {
                let acc = if mask >> b & 1 == 1 { &mut is_acc } else { &mut oos_acc };
                for j in 0..n {
                    acc[j].0 += sums[[b, j]];
                    acc[j].1 += sumsq[[b, j]];
                }
            }
            let is: Vec<f64> = is_acc.iter().map(|&(a, b)| score(a, b)).collect();
            let oos: Vec<f64> = oos_acc.iter().map(|&(a, b)| score(a, b)).collect();
            let mut n_star = 0;
            for j in 1..n {
                if is[j] > is[n_star] {
                    n_star = j;
                }
            }
            (n_star, relative_rank(&oos, n_star))
        })
        .collect();

    let best_is: Vec<usize> = per_comb.iter().map(|c| c.0).collect();
    let omega: Vec<f64> = per_comb.iter().map(|c| c.1).collect();
    let logits: Vec<f64> = omega.iter().map(|w| (w / (1.0 - w)).ln()).collect();
    let pbo = logits.iter().filter(|&&l| l <= 0.0).count() as f64 / logits.len() as f64;
    Ok(CscvResult { s, n_configs: n, rows_used: rows, best_is, omega, logits, pbo })
}

// ---------------------------------------------------------------------------
// ONC

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OncConfig {
    /// Largest k tried; `None` means `min(10, ⌊√N⌋)`.
    pub max_k: Option<usize>,
    /// Refinement passes over clusters of below-average quality.
    pub depth: usize,
    pub restarts: usize,
    pub seed: u64,
    pub days_per_year: u32,
}

impl Default for OncConfig {
    fn default() -> Self {
        Self { max_k: None, depth: 1, restarts: 10, seed: 0, days_per_year: 252 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OncResult {
    /// Cluster of every column. Clusters are numbered by their smallest member.
    pub assignments: Vec<usize>,
    pub n_clusters: usize,
    /// Constant columns; they share one cluster of their own.
    pub quarantined: Vec<usize>,
    /// Equal-weighted daily returns of each cluster's members (T rows).
    pub cluster_returns: Vec<Vec<f64>>,
    /// Annualized; zero for a constant aggregate.
    pub cluster_sr: Vec<f64>,
    pub sr_mean: f64,
    pub sr_variance: f64,
    pub sr_skewness: f64,
    /// mean/std of the silhouette scores of the final clustering.
    pub quality: f64,
}

impl OncResult {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&j| self.assignments[j] == cluster).collect()
    }

    /// Cluster SRs excluding the quarantine cluster.
    pub fn trial_srs(&self) -> Vec<f64> {
        (0..self.n_clusters)
            .filter(|&c| !self.members(c).iter().all(|j| self.quarantined.contains(j)))
            .map(|c| self.cluster_sr[c])
            .collect()
    }

    pub fn write_assignments_csv(&self, path: impl AsRef<Path>, labels: &[String]) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["config", "cluster"])?;
        for (j, c) in self.assignments.iter().enumerate() {
            w.write_record([labels[j].clone(), c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_cluster_sr_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["cluster", "size", "sr"])?;
        for c in 0..self.n_clusters {
            w.write_record([c.to_string(), self.members(c).len().to_string(), self.cluster_sr[c].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding; returns (labels, inertia).
fn kmeans(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = x.nrows();
    let mut centroids = Array2::<f64>::zeros((k, x.ncols()));
    centroids.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(x.row(i), centroids.row(c)));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for i in 0..n {
            let best = (0..k)
                .map(|c| (sq_dist(x.row(i), centroids.row(c)), c))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        centroids.fill(0.0);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            let mut row = centroids.row_mut(labels[i]);
            row += &x.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).mapv_inplace(|v| v / counts[c] as f64);
            } else {
                // reseed an empty cluster at the worst-fit point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(x.row(a), centroids.row(labels[a]));
                        let db = sq_dist(x.row(b), centroids.row(labels[b]));
                        da.total_cmp(&db)
                    })
                    .unwrap();
                centroids.row_mut(c).assign(&x.row(far));
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(x.row(i), centroids.row(labels[i]))).sum();
    (labels, inertia)
}

/// Silhouette per point from a precomputed distance matrix; singletons score 0.
fn silhouette(dist: &Array2<f64>, labels: &[usize], k: usize) -> Vec<f64> {
    let n = labels.len();
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    (0..n)
        .map(|i| {
            if sizes[labels[i]] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                sums[labels[j]] += dist[[i, j]];
            }
            let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != labels[i] && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 { (b - a) / denom } else { 0.0 }
        })
        .collect()
}

fn mean_over_std(xs: &[f64]) -> f64 {
    let m = stats::mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    let sd = var.sqrt();
    if sd > 1e-12 {
        m / sd
    } else if m > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

struct Clustering {
    clusters: Vec<Vec<usize>>,
    quality: f64,
}

fn labels_of(clusters: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut labels = vec![0; n];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            labels[i] = c;
        }
    }
    labels
}

/// Silhouette-based scores of a clustering of all points: overall q and
/// per-cluster q.
fn score(features: &Array2<f64>, dist: &Array2<f64>, clusters: &[Vec<usize>]) -> (f64, Vec<f64>) {
    let labels = labels_of(clusters, features.nrows());
    let silh = silhouette(dist, &labels, clusters.len());
    let per: Vec<f64> = clusters
        .iter()
        .map(|m| mean_over_std(&m.iter().map(|&i| silh[i]).collect::<Vec<_>>()))
        .collect();
    (mean_over_std(&silh), per)
}

fn pairwise(features: &Array2<f64>) -> Array2<f64> {
    let n = features.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| sq_dist(features.row(i), features.row(j)).sqrt())
}

/// Best-q k-means clustering of the points `idx` of the correlation-distance
/// matrix, with optional refinement of weak clusters.
fn onc_base(corr_dist: &Array2<f64>, idx: &[usize], cfg: &OncConfig, max_k: usize, depth: usize, salt: u64) -> Clustering {
    let n = idx.len();
    let features = corr_dist.select(Axis(0), idx).select(Axis(1), idx);
    let max_k = max_k.min(n.saturating_sub(1));
    if max_k < 2 {
        return Clustering { clusters: vec![idx.to_vec()], quality: 0.0 };
    }
    let dist = pairwise(&features);
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for k in 2..=max_k {
        let mut fit: Option<(f64, Vec<usize>)> = None;
        for r in 0..cfg.restarts.max(1) {
            let stream = salt.wrapping_mul(1_000_003).wrapping_add((k * 1000 + r) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            let (labels, inertia) = kmeans(&features, k, &mut rng);
            if fit.as_ref().is_none_or(|f| inertia < f.0 - 1e-12) {
                fit = Some((inertia, labels));
            }
        }
        let labels = fit.unwrap().1;
        let clusters: Vec<Vec<usize>> = (0..k)
            .map(|c| (0..n).filter(|&i| labels[i] == c).collect::<Vec<_>>())
            .filter(|m| !m.is_empty())
            .collect();
        if clusters.len() < 2 {
            continue;
        }
        let q = score(&features, &dist, &clusters).0;
        if best.as_ref().is_none_or(|b| q > b.0) {
            best = Some((q, clusters));
        }
    }
    let Some((quality, local)) = best else {
        return Clustering { clusters: vec![idx.to_vec()], quality: 0.0 };
    };

    let mut result = Clustering { clusters: local, quality };
    if depth > 0 {
        let (_, per) = score(&features, &dist, &result.clusters);
        let avg = stats::mean(&per);
        let redo: Vec<usize> = (0..per.len()).filter(|&c| per[c] < avg).collect();
        if redo.len() > 1 {
            let redo_pts: Vec<usize> = redo.iter().flat_map(|&c| result.clusters[c].clone()).collect();
            let sub_idx: Vec<usize> = redo_pts.iter().map(|&i| idx[i]).collect();
            let sub = onc_base(corr_dist, &sub_idx, cfg, max_k, depth - 1, salt.wrapping_add(1 + n as u64));
            let pos_of = |g: usize| idx.iter().position(|&x| x == g).unwrap();
            let mut candidate: Vec<Vec<usize>> = (0..result.clusters.len())
                .filter(|c| !redo.contains(c))
                .map(|c| result.clusters[c].clone())
                .collect();
            candidate.extend(sub.clusters.iter().map(|m| m.iter().map(|&g| pos_of(g)).collect()));
            let (new_q, new_per) = score(&features, &dist, &candidate);
            if stats::mean(&new_per) > avg {
                result = Clustering { clusters: candidate, quality: new_q };
            }
        }
    }
    result.clusters = result
        .clusters
        .into_iter()
        .map(|m| m.into_iter().map(|i| idx[i]).collect())
        .collect();
    result
}

/// Optimal number of clusters over the column-correlation distance
/// `√(0.5(1−ρ))`, using rows of the distance matrix as features.
pub fn onc(m: &ReturnsMatrix, cfg: &OncConfig) -> Result<OncResult> {
    let n = m.n_cols();
    if n < 3 {
        return Err(Error::InvalidConfig(format!("ONC needs ≥ 3 configurations, got {n}")));
    }
    let columns: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let (quarantined, live): (Vec<usize>, Vec<usize>) = (0..n).partition(|&j| is_constant(&columns[j]));

    let nl = live.len();
    let mut corr_dist = Array2::<f64>::zeros((nl, nl));
    for a in 0..nl {
        for b in a + 1..nl {
            let rho = stats::correlation(&columns[live[a]], &columns[live[b]]).unwrap_or(0.0).clamp(-1.0, 1.0);
            let d = (0.5 * (1.0 - rho)).max(0.0).sqrt();
            corr_dist[[a, b]] = d;
            corr_dist[[b, a]] = d;
        }
    }
    let max_k = cfg.max_k.unwrap_or_else(|| ((nl as f64).sqrt().floor() as usize).clamp(2, 10));
    let local: Vec<usize> = (0..nl).collect();
    let found = if nl >= 3 {
        onc_base(&corr_dist, &local, cfg, max_k, cfg.depth, 0)
    } else {
        Clustering { clusters: local.iter().map(|&i| vec![i]).collect(), quality: 0.0 }
    };

    let mut clusters: Vec<Vec<usize>> = found
        .clusters
        .into_iter()
        .filter(|c| !c.is_empty())
        .map(|c| {
            let mut c: Vec<usize> = c.into_iter().map(|i| live[i]).collect();
            c.sort_unstable();
            c
        })
        .collect();
    if !quarantined.is_empty() {
        clusters.push(quarantined.clone());
    }
    clusters.sort_by_key(|c| c[0]);
    if clusters.len() < 2 {
        return Err(Error::ValidationRefused(format!(
            "only {} cluster(s) found among {n} columns ({} constant)",
            clusters.len(),
            quarantined.len()
        )));
    }

    let assignments = labels_of(&clusters, n);
    let t = m.n_rows();
    let cluster_returns: Vec<Vec<f64>> = clusters
        .iter()
        .map(|c| (0..t).map(|i| c.iter().map(|&j| columns[j][i]).sum::<f64>() / c.len() as f64).collect())
        .collect();
    let cluster_sr: Vec<f64> = cluster_returns.iter().map(|r| sharpe_or_zero(r, cfg.days_per_year)).collect();
    Ok(OncResult {
        n_clusters: clusters.len(),
        assignments,
        quarantined,
        sr_mean: stats::mean(&cluster_sr),
        sr_variance: if cluster_sr.len() > 1 { stats::variance(&cluster_sr) } else { 0.0 },
        sr_skewness: stats::skewness(&cluster_sr),
        cluster_returns,
        cluster_sr,
        quality: found.quality,
    })
}

// ---------------------------------------------------------------------------
// PSR / DSR

/// Probabilistic Sharpe ratio from per-period moments; `kurtosis` is raw
/// (3 for a Gaussian).
pub fn psr_from_moments(sr: f64, sr_star: f64, t_obs: usize, skewness: f64, kurtosis: f64) -> Result<f64> {
    if t_obs < 4 {
        return Err(Error::InvalidSeries(format!("PSR needs ≥ 4 observations, got {t_obs}")));
    }
    let radicand = 1.0 - skewness * sr + (kurtosis - 1.0) / 4.0 * sr * sr;
    if !(radicand > 0.0) {
        return Err(Error::PathologicalMoments(radicand));
    }
    if sr == sr_star {
        return Ok(0.5);
    }
    let z = (sr - sr_star) * ((t_obs - 1) as f64).sqrt() / radicand.sqrt();
    Ok(stats::norm_cdf(z))
}

/// PSR of `series` against a per-period benchmark Sharpe `sr_star`.
pub fn psr(series: &[f64], sr_star: f64) -> Result<f64> {
    let sd = stats::std_dev(series);
    if series.len() >= 2 && (is_constant(series) || !(sd > 0.0)) {
        return Err(Error::UndefinedSharpe);
    }
    let sr = if series.len() >= 2 { stats::mean(series) / sd } else { 0.0 };
    psr_from_moments(sr, sr_star, series.len(), stats::skewness(series), stats::kurtosis(series))
}

/// Expected maximum Sharpe among `n_eff` independent trials with zero true
/// Sharpe and the given cross-trial variance.
pub fn expected_max_sharpe(sr_variance: f64, n_eff: usize) -> Result<f64> {
    if n_eff < 2 {
        return Err(Error::InsufficientTrials(n_eff));
    }
    let n = n_eff as f64;
    let g = EULER_GAMMA;
    Ok(sr_variance.max(0.0).sqrt()
        * ((1.0 - g) * stats::norm_ppf(1.0 - 1.0 / n) + g * stats::norm_ppf(1.0 - 1.0 / (n * std::f64::consts::E))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrStats {
    /// Annualized Sharpe of the best series.
    pub sr_hat: f64,
    /// Annualized benchmark.
    pub sr_star: f64,
    pub sr_star_per_period: f64,
    pub psr_value: f64,
    pub t_obs: usize,
    pub skewness: f64,
    pub kurtosis: f64,
    pub n_eff: usize,
    pub var_trials: f64,
}

/// Deflated Sharpe ratio. `cluster_srs` are annualized; the benchmark is
/// de-annualized before the PSR test on the daily `best_series`.
pub fn dsr(cluster_srs: &[f64], best_series: &[f64], days_per_year: u32) -> Result<SrStats> {
    let n_eff = cluster_srs.len();
    if n_eff < 2 {
        return Err(Error::InsufficientTrials(n_eff));
    }
    let var_trials = stats::variance(cluster_srs);
    let sr_star = expected_max_sharpe(var_trials, n_eff)?;
    let per_period = sr_star / (days_per_year as f64).sqrt();
    Ok(SrStats {
        sr_hat: sharpe(best_series, days_per_year)?,
        sr_star,
        sr_star_per_period: per_period,
        psr_value: psr(best_series, per_period)?,
        t_obs: best_series.len(),
        skewness: stats::skewness(best_series),
        kurtosis: stats::kurtosis(best_series),
        n_eff,
        var_trials,
    })
}

// ---------------------------------------------------------------------------
// Full validation pass

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub splits: usize,
    pub metric: CscvMetric,
    pub onc: OncConfig,
    pub days_per_year: u32,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { splits: 16, metric: CscvMetric::Sharpe, onc: OncConfig::default(), days_per_year: 252 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pbo: Option<f64>,
    pub s: usize,
    pub n_configs: usize,
    pub n_failed: usize,
    pub sr_star: Option<f64>,
    pub best_sr: Option<f64>,
    pub best_config: Option<String>,
    pub psr: Option<f64>,
    pub n_clusters: Option<usize>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ValidationOutcome {
    pub report: ValidationReport,
    pub cscv: Option<CscvResult>,
    pub onc: Option<OncResult>,
    pub sr_stats: Option<SrStats>,
}

impl ValidationOutcome {
    /// Writes `report.json` and whichever of `logits.csv`, `clusters.csv`,
    /// `cluster_sr.csv` apply.
    pub fn write(&self, dir: impl AsRef<Path>, labels: &[String]) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(dir.join("report.json"), &self.report)?;
        if let Some(c) = &self.cscv {
            c.write_logits_csv(dir.join("logits.csv"), labels)?;
        }
        if let Some(o) = &self.onc {
            o.write_assignments_csv(dir.join("clusters.csv"), labels)?;
            o.write_cluster_sr_csv(dir.join("cluster_sr.csv"))?;
        }
        Ok(())
    }
}

/// CSCV, ONC and DSR over `m`. Sections that the matrix is too small for are
/// skipped with a note; a matrix of nothing but failed or constant columns is
/// refused.
pub fn validate(m: &ReturnsMatrix, cfg: &ValidationConfig) -> Result<ValidationOutcome> {
    let n = m.n_cols();
    if n == 0 {
        return Err(Error::ValidationRefused("returns matrix has no columns".into()));
    }
    let n_failed = m.failed().iter().filter(|&&f| f).count();
    if n_failed == n {
        return Err(Error::ValidationRefused(format!("all {n} configurations failed; nothing to validate")));
    }
    let srs: Vec<Option<f64>> = (0..n).map(|j| sharpe(&m.column(j), cfg.days_per_year).ok()).collect();
    let Some(best) = (0..n)
        .filter(|&j| srs[j].is_some())
        .max_by(|&a, &b| srs[a].unwrap().total_cmp(&srs[b].unwrap()).then(b.cmp(&a)))
    else {
        return Err(Error::ValidationRefused("every column has zero variance".into()));
    };

    let mut notes = Vec::new();
    let cscv_res = if n >= 2 {
        Some(cscv(m, cfg.splits, cfg.metric)?)
    } else {
        notes.push("PBO skipped: a single configuration has no rank to overfit".to_string());
        None
    };
    let onc_res = if n >= 3 {
        Some(onc(m, &OncConfig { days_per_year: cfg.days_per_year, ..cfg.onc })?)
    } else {
        notes.push(format!("ONC skipped: {n} configuration(s), at least 3 required"));
        None
    };
    let trials: Vec<f64> = match &onc_res {
        Some(o) => o.trial_srs(),
        None => srs.iter().flatten().copied().collect(),
    };
    let best_series = m.column(best);
    let sr_stats = if trials.len() >= 2 {
        Some(dsr(&trials, &best_series, cfg.days_per_year)?)
    } else {
        notes.push(format!("DSR skipped: {} effective trial(s), at least 2 required", trials.len()));
        None
    };

    let report = ValidationReport {
        pbo: cscv_res.as_ref().map(|c| c.pbo),
        s: cfg.splits,
        n_configs: n,
        n_failed,
        sr_star: sr_stats.as_ref().map(|s| s.sr_star),
        best_sr: srs[best],
        best_config: Some(m.labels()[best].clone()),
        psr: sr_stats.as_ref().map(|s| s.psr_value),
        n_clusters: onc_res.as_ref().map(|o| o.n_clusters),
        notes,
    };
    Ok(ValidationOutcome { report, cscv: cscv_res, onc: onc_res, sr_stats })
}
