//! Seeded synthetic markets: correlated geometric random walks driven by a
//! common factor, with a momentum regime injected over a window of days.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::PriceSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_assets: usize,
    /// Number of prices per asset.
    pub n_days: usize,
    pub start: NaiveDate,
    pub initial_price: f64,
    /// Daily log-return volatility.
    pub volatility: f64,
    /// Share of variance explained by the common factor.
    pub factor_share: f64,
    pub drift: f64,
    /// Fluctuation indices `[start, start+len)` of the momentum regime.
    pub momentum_start: usize,
    pub momentum_len: usize,
    /// AR(1) coefficient of log returns inside the regime.
    pub momentum_phi: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_assets: 4,
            n_days: 1200,
            start: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
            initial_price: 100.0,
            volatility: 0.012,
            factor_share: 0.4,
            drift: 0.0002,
            momentum_start: 500,
            momentum_len: 300,
            momentum_phi: 0.35,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_assets == 0 || self.n_days < 2 {
            return bad("need at least one asset and two days");
        }
        if !(self.initial_price > 0.0) || !(self.volatility >= 0.0) {
            return bad("initial price must be > 0 and volatility ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.factor_share) {
            return bad("factor share must lie in [0, 1]");
        }
        if !(self.momentum_phi.abs() < 1.0) {
            return bad("momentum coefficient must lie in (-1, 1)");
        }
        Ok(())
    }
}

/// `n` consecutive weekdays from `start` (rolled forward off a weekend).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut d = start;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<PriceSeries>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (a, b) = (cfg.factor_share.sqrt(), (1.0 - cfg.factor_share).sqrt());
    let n_moves = cfg.n_days - 1;
    let regime = cfg.momentum_start..cfg.momentum_start + cfg.momentum_len;

    let mut log_prices = vec![vec![cfg.initial_price.ln()]; cfg.n_assets];
    let mut prev = vec![0.0; cfg.n_assets];
    for k in 0..n_moves {
        let common: f64 = std_normal.sample(&mut rng);
        for i in 0..cfg.n_assets {
            let idio: f64 = std_normal.sample(&mut rng);
            let shock = cfg.volatility * (a * common + b * idio);
            let r = if regime.contains(&k) {
                // innovation scaled so the regime keeps the unconditional variance
                cfg.momentum_phi * prev[i] + (1.0 - cfg.momentum_phi.powi(2)).sqrt() * shock + cfg.drift
            } else {
                shock + cfg.drift
            };
            prev[i] = r;
            let last = *log_prices[i].last().unwrap();
            log_prices[i].push(last + r);
        }
    }

    let dates = business_days(cfg.start, cfg.n_days);
    log_prices
        .into_iter()
        .enumerate()
        .map(|(i, lp)| PriceSeries::new(format!("S{}", i + 1), dates.clone(), lp.into_iter().map(f64::exp).collect()))
        .collect()
}
