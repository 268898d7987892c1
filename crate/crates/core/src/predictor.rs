//! Supervised stage: batch SGD on the encoded training rows, then an online
//! pass over the prediction rows that emits a price forecast before every
//! gradient update.

use std::path::Path;

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{reconstruct_price, AggregatedDataset, ScalerParams};
use crate::neural::{he_adjusted_init, ogd_update, train_sgd, Activation, DenseNetwork, OgdConfig, SgdConfig};

/// When an online target becomes usable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetLag {
    /// Learn from row `t` right after predicting it (peeks `h` days ahead).
    None,
    /// Learn from row `t − h`, whose forward window has closed by day `t`.
    #[default]
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_output_activation")]
    pub output_activation: Activation,
    pub sgd: SgdConfig,
    pub ogd: OgdConfig,
    /// Fraction of the most recent training rows used for batch training.
    #[serde(default = "default_fraction")]
    pub training_fraction_used: f64,
    #[serde(default)]
    pub ogd_target_lag: TargetLag,
}

fn default_output_activation() -> Activation {
    Activation::Linear
}

fn default_fraction() -> f64 {
    1.0
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.contains(&0) {
            return Err(Error::InvalidConfig("hidden layers must be non-empty".into()));
        }
        if !(self.training_fraction_used > 0.0 && self.training_fraction_used <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "training fraction {} must lie in (0, 1]",
                self.training_fraction_used
            )));
        }
        // zero is allowed: a frozen network
        if !(self.ogd.learning_rate >= 0.0 && self.ogd.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("OGD learning rate must be ≥ 0".into()));
        }
        self.sgd.validate()
    }

    pub fn layer_sizes(&self, inputs: usize, outputs: usize) -> Vec<usize> {
        let mut sizes = vec![inputs];
        sizes.extend(&self.hidden_sizes);
        sizes.push(outputs);
        sizes
    }

    pub fn activations(&self) -> Vec<Activation> {
        let mut acts = vec![self.activation; self.hidden_sizes.len()];
        acts.push(self.output_activation);
        acts
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub network: DenseNetwork,
    pub mse_trace: Vec<f64>,
    pub failed: bool,
    pub rows_used: usize,
}

/// Rows kept when only the most recent `fraction` of `n` training rows is
/// used.
pub fn rows_used(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).ceil() as usize).clamp(1, n)
}

/// Batch-trains a fresh He-Adjusted network on the encoded training rows.
/// With `training_fraction_used < 1` the oldest rows are dropped; the epoch
/// count is not rescaled.
pub fn train_batch(ds: &AggregatedDataset, cfg: &PredictorConfig, init_seed: u64) -> Result<BatchOutcome> {
    cfg.validate()?;
    let n = ds.split_index;
    if n == 0 {
        return Err(Error::InvalidConfig("no training rows".into()));
    }
    let keep = rows_used(n, cfg.training_fraction_used);
    let inputs = ds.inputs.slice(s![n - keep..n, ..]);
    let targets = ds.targets.slice(s![n - keep..n, ..]);
    let net = he_adjusted_init(
        &cfg.layer_sizes(ds.input_width(), ds.n_assets()),
        &cfg.activations(),
        init_seed,
    )?;
    let outcome = train_sgd(&net, inputs, targets, &cfg.sgd)?;
    Ok(BatchOutcome {
        network: outcome.network,
        mse_trace: outcome.mse_trace,
        failed: outcome.diverged,
        rows_used: keep,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Price index of the forecast origin.
    pub t: usize,
    pub asset: usize,
    /// Predicted forward log-sum, unscaled.
    pub pred_logsum: f64,
    pub pred_price: f64,
    pub price_t: f64,
    pub price_t_plus_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRun {
    pub asset_ids: Vec<String>,
    pub horizon: usize,
    pub records: Vec<PredictionRecord>,
    pub is_mse_trace: Vec<f64>,
    pub failed: bool,
    /// Online step at which the network diverged.
    pub failed_at: Option<usize>,
}

impl PredictionRun {
    pub fn failed(asset_ids: Vec<String>, horizon: usize, is_mse_trace: Vec<f64>) -> Self {
        Self {
            asset_ids,
            horizon,
            records: Vec::new(),
            is_mse_trace,
            failed: true,
            failed_at: None,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "asset", "pred_logsum", "pred_price", "price_t", "price_t_plus_h"])?;
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                self.asset_ids[r.asset].clone(),
                r.pred_logsum.to_string(),
                r.pred_price.to_string(),
                r.price_t.to_string(),
                r.price_t_plus_h.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, horizon: usize) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let mut asset_ids: Vec<String> = Vec::new();
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| Error::Parse(format!("bad number `{}`", &rec[i])))
            };
            let asset = match asset_ids.iter().position(|a| a == &rec[1]) {
                Some(i) => i,
                None => {
                    asset_ids.push(rec[1].to_string());
                    asset_ids.len() - 1
                }
            };
            records.push(PredictionRecord {
                t: rec[0].parse().map_err(|_| Error::Parse(format!("bad t `{}`", &rec[0])))?,
                asset,
                pred_logsum: num(2)?,
                pred_price: num(3)?,
                price_t: num(4)?,
                price_t_plus_h: num(5)?,
            });
        }
        Ok(Self {
            asset_ids,
            horizon,
            records,
            is_mse_trace: Vec::new(),
            failed: false,
            failed_at: None,
        })
    }
}

/// Walks the prediction rows of an encoded, scaled dataset in time order.
///
/// For each row: predict, reconstruct one price per asset, then take one OGD
/// step on the row whose target has matured under `cfg.ogd_target_lag`.
/// A divergence stops the run; records produced so far are kept.
pub fn run_online(
    net: &DenseNetwork,
    ds: &AggregatedDataset,
    cfg: &PredictorConfig,
    scaler: &ScalerParams,
) -> Result<PredictionRun> {
    cfg.validate()?;
    if net.input_size() != ds.input_width() || net.output_size() != ds.n_assets() {
        return Err(Error::DimensionMismatch {
            expected: ds.input_width() + ds.n_assets(),
            got: net.input_size() + net.output_size(),
        });
    }
    let h = ds.horizons.forecast_horizon;
    let lag = match cfg.ogd_target_lag {
        TargetLag::None => 0,
        TargetLag::Horizon => h,
    };
    let mut net = net.clone();
    let mut run = PredictionRun {
        asset_ids: ds.asset_ids.clone(),
        horizon: h,
        records: Vec::with_capacity((ds.n_rows() - ds.split_index) * ds.n_assets()),
        is_mse_trace: Vec::new(),
        failed: false,
        failed_at: None,
    };
    let row = |r: usize, m: &ndarray::Array2<f64>| m.row(r).to_vec();

    for (step, r) in (ds.split_index..ds.n_rows()).enumerate() {
        let prediction = match net.predict(&row(r, &ds.inputs)) {
            Ok(p) if p.iter().all(|v| v.is_finite()) => p,
            _ => {
                run.failed = true;
                run.failed_at = Some(step);
                break;
            }
        };
        let step_records: Vec<PredictionRecord> = prediction
            .iter()
            .enumerate()
            .map(|(a, &scaled)| {
                let col = scaler.target_column(a);
                let anchor = ds.anchor_prices[[r, a]];
                PredictionRecord {
                    t: ds.time_index[r],
                    asset: a,
                    pred_logsum: scaler.invert(col, scaled),
                    pred_price: reconstruct_price(scaled, col, anchor, scaler),
                    price_t: anchor,
                    price_t_plus_h: ds.future_prices[[r, a]],
                }
            })
            .collect();
        // an output so large that exp() leaves the reals is a blown-up network
        if step_records.iter().any(|rec| !(rec.pred_price.is_finite() && rec.pred_price > 0.0)) {
            run.failed = true;
            run.failed_at = Some(step);
            break;
        }
        run.records.extend(step_records);
        if cfg.ogd.learning_rate == 0.0 || step < lag {
            continue;
        }
        let learn = r - lag;
        if ogd_update(&mut net, &row(learn, &ds.inputs), &row(learn, &ds.targets), &cfg.ogd).is_err() {
            run.failed = true;
            run.failed_at = Some(step);
            break;
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{build_dataset, fit_scaler, HorizonTuple, PriceSeries};
    use chrono::NaiveDate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn dates(n: usize) -> Vec<NaiveDate> {
        let start = NaiveDate::from_ymd_opt(2012, 1, 2).unwrap();
        (0..n).map(|i| start + chrono::Days::new(i as u64)).collect()
    }

    /// AR(1) log returns whose coefficient flips sign at `flip`.
    fn ar1_prices(n: usize, flip: usize, phi: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut r = 0.0;
        let mut p = 100.0;
        let mut out = vec![p];
        for t in 1..n {
            let coef = if t < flip { phi } else { -phi };
            r = coef * r + noise.sample(&mut rng);
            p *= f64::exp(r);
            out.push(p);
        }
        out
    }

    fn config(epochs: usize, ogd_lr: f64, lag: TargetLag) -> PredictorConfig {
        PredictorConfig {
            hidden_sizes: vec![4],
            activation: Activation::Relu,
            output_activation: Activation::Linear,
            sgd: SgdConfig {
                learning_rate: 0.05,
                epochs,
                minibatch_size: 16,
                rng_seed: 1,
                ..Default::default()
            },
            ogd: OgdConfig { learning_rate: ogd_lr },
            training_fraction_used: 1.0,
            ogd_target_lag: lag,
        }
    }

    fn scaled_dataset(prices: Vec<f64>, split: f64) -> (AggregatedDataset, ScalerParams) {
        let s = PriceSeries::new("AR", dates(prices.len()), prices).unwrap();
        let ds = build_dataset(&[s], &HorizonTuple::new(vec![1, 2], 1).unwrap(), split).unwrap();
        let params = fit_scaler(&ds, [0.0, 1.0]).unwrap();
        (ds.scaled(&params).unwrap(), params)
    }

    #[test]
    fn training_fraction_drops_oldest_rows() {
        assert_eq!(rows_used(100, 0.2), 20);
        assert_eq!(rows_used(100, 1.0), 100);
        assert_eq!(rows_used(3, 0.01), 1);

        let (ds, _) = scaled_dataset(ar1_prices(300, 1000, 0.3, 2), 0.6);
        let mut cfg = config(3, 0.1, TargetLag::None);
        cfg.training_fraction_used = 0.2;
        let out = train_batch(&ds, &cfg, 5).unwrap();
        assert_eq!(out.rows_used, rows_used(ds.split_index, 0.2));
        // altering the dropped rows must not matter
        let mut altered = ds.clone();
        altered.inputs.slice_mut(s![..ds.split_index - out.rows_used, ..]).fill(7.0);
        assert_eq!(train_batch(&altered, &cfg, 5).unwrap().network, out.network);
    }

    #[test]
    fn zero_epochs_passes_initialized_network() {
        let (ds, _) = scaled_dataset(ar1_prices(200, 1000, 0.3, 2), 0.6);
        let cfg = config(0, 0.1, TargetLag::None);
        let out = train_batch(&ds, &cfg, 9).unwrap();
        let init = he_adjusted_init(&cfg.layer_sizes(2, 1), &cfg.activations(), 9).unwrap();
        assert_eq!(out.network, init);
        assert!(out.mse_trace.is_empty());
    }

    #[test]
    fn frozen_network_matches_batch_inference() {
        let (ds, params) = scaled_dataset(ar1_prices(250, 1000, 0.3, 4), 0.6);
        let cfg = config(5, 0.0, TargetLag::Horizon);
        let net = train_batch(&ds, &cfg, 1).unwrap().network;
        let run = run_online(&net, &ds, &cfg, &params).unwrap();
        assert_eq!(run.records.len(), ds.n_rows() - ds.split_index);
        for (rec, r) in run.records.iter().zip(ds.split_index..) {
            let y = net.predict(&ds.inputs.row(r).to_vec()).unwrap()[0];
            assert_eq!(rec.pred_logsum, params.invert(params.target_column(0), y));
            let expected = ds.anchor_prices[[r, 0]] * params.invert(params.target_column(0), y).exp();
            assert_eq!(rec.pred_price, expected);
            assert_eq!(rec.t, ds.time_index[r]);
        }
    }

    #[test]
    fn online_run_is_causal_under_truncation() {
        let (ds, params) = scaled_dataset(ar1_prices(260, 150, 0.4, 8), 0.5);
        for lag in [TargetLag::None, TargetLag::Horizon] {
            let cfg = config(10, 0.2, lag);
            let net = train_batch(&ds, &cfg, 3).unwrap().network;
            let full = run_online(&net, &ds, &cfg, &params).unwrap();
            for cut in [ds.split_index + 1, ds.split_index + 17, ds.n_rows() - 3] {
                let mut head = ds.clone();
                head.inputs = ds.inputs.slice(s![..cut, ..]).to_owned();
                head.targets = ds.targets.slice(s![..cut, ..]).to_owned();
                head.anchor_prices = ds.anchor_prices.slice(s![..cut, ..]).to_owned();
                head.future_prices = ds.future_prices.slice(s![..cut, ..]).to_owned();
                head.time_index.truncate(cut);
                head.dates.truncate(cut);
                let partial = run_online(&net, &head, &cfg, &params).unwrap();
                assert_eq!(partial.records[..], full.records[..partial.records.len()]);
            }
            let again = run_online(&net, &ds, &cfg, &params).unwrap();
            assert_eq!(again, full);
        }
    }

    fn rolling_mse(run: &PredictionRun, last: usize) -> f64 {
        let tail = &run.records[run.records.len() - last..];
        tail.iter()
            .map(|r| (r.pred_logsum - (r.price_t_plus_h / r.price_t).ln()).powi(2))
            .sum::<f64>()
            / last as f64
    }

    #[test]
    fn online_learning_adapts_to_regime_shift() {
        let n = 1500;
        let prices = ar1_prices(n, 700, 0.6, 12);
        let (ds, params) = scaled_dataset(prices, 0.45);
        let cfg = config(100, 0.05, TargetLag::Horizon);
        let net = train_batch(&ds, &cfg, 2).unwrap().network;
        let online = run_online(&net, &ds, &cfg, &params).unwrap();
        let frozen = run_online(&net, &ds, &config(100, 0.0, TargetLag::Horizon), &params).unwrap();
        assert!(!online.failed);
        let (on, off) = (rolling_mse(&online, 100), rolling_mse(&frozen, 100));
        assert!(on < off, "online {on} vs frozen {off}");
    }

    #[test]
    fn divergence_mid_run_keeps_prior_records() {
        let (ds, params) = scaled_dataset(ar1_prices(200, 1000, 0.3, 5), 0.5);
        let mut cfg = config(0, 1e200, TargetLag::None);
        cfg.ogd.learning_rate = 1e200;
        let net = train_batch(&ds, &cfg, 1).unwrap().network;
        let run = run_online(&net, &ds, &cfg, &params).unwrap();
        assert!(run.failed);
        let at = run.failed_at.unwrap();
        // the diverging step keeps its record only if the prediction itself was finite
        assert!(run.records.len() >= at * ds.n_assets());
        assert!(run.records.len() <= (at + 1) * ds.n_assets());
        assert!(run.records.iter().all(|r| r.pred_price.is_finite()));
    }

    #[test]
    fn run_csv_round_trip() {
        let (ds, params) = scaled_dataset(ar1_prices(120, 1000, 0.3, 6), 0.6);
        let cfg = config(2, 0.1, TargetLag::Horizon);
        let net = train_batch(&ds, &cfg, 1).unwrap().network;
        let run = run_online(&net, &ds, &cfg, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        run.write_csv(&path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("t,asset,pred_logsum,pred_price,price_t,price_t_plus_h\n"));
        let back = PredictionRun::read_csv(&path, 1).unwrap();
        assert_eq!(back.records, run.records);
    }
}
