//! Price ingestion, horizon aggregation of log fluctuations, train-fitted
//! scaling, and the inverse transforms that turn a scaled network output back
//! into a price.
//!
//! Time indices (`t`) always refer to positions in the *price* series. The
//! fluctuation vector returned by [`log_fluctuations`] is one shorter: its
//! element `k` is the change from price `k` to price `k + 1`.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Dated closing prices for one asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    asset_id: String,
    dates: Vec<NaiveDate>,
    prices: Vec<f64>,
}

impl PriceSeries {
    pub fn new(asset_id: impl Into<String>, dates: Vec<NaiveDate>, prices: Vec<f64>) -> Result<Self> {
        let asset_id = asset_id.into();
        if dates.len() != prices.len() {
            return Err(Error::InvalidSeries(format!(
                "`{asset_id}` has {} dates but {} prices",
                dates.len(),
                prices.len()
            )));
        }
        if prices.len() < 2 {
            return Err(Error::InvalidSeries(format!(
                "`{asset_id}` needs at least 2 prices, got {}",
                prices.len()
            )));
        }
        if let Some(w) = dates.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSeries(format!(
                "`{asset_id}` dates not strictly increasing at index {}",
                w + 1
            )));
        }
        if let Some((index, &value)) = prices
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p > 0.0))
        {
            return Err(Error::NonPositivePrice {
                asset: asset_id,
                index,
                value,
            });
        }
        Ok(Self {
            asset_id,
            dates,
            prices,
        })
    }

    pub fn asset_id(&self) -> &str {
        &self.asset_id
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    pub fn log_fluctuations(&self) -> Vec<f64> {
        // prices were validated on construction
        self.prices.windows(2).map(|w| w[1].ln() - w[0].ln()).collect()
    }
}

/// `Δp_i = ln p_i − ln p_{i−1}` for every consecutive pair.
pub fn log_fluctuations(prices: &[f64]) -> Result<Vec<f64>> {
    if let Some((index, &value)) = prices
        .iter()
        .enumerate()
        .find(|(_, p)| !(p.is_finite() && **p > 0.0))
    {
        return Err(Error::NonPositivePrice {
            asset: String::new(),
            index,
            value,
        });
    }
    Ok(prices.windows(2).map(|w| w[1].ln() - w[0].ln()).collect())
}

/// Backward lookback windows for inputs plus the forward prediction horizon.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HorizonTuple {
    pub horizons: Vec<usize>,
    pub forecast_horizon: usize,
}

impl HorizonTuple {
    pub fn new(horizons: Vec<usize>, forecast_horizon: usize) -> Result<Self> {
        let ht = Self {
            horizons,
            forecast_horizon,
        };
        ht.validate()?;
        Ok(ht)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() {
            return Err(Error::InvalidConfig("horizon tuple is empty".into()));
        }
        if self.horizons[0] == 0 || self.horizons.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(format!(
                "horizons must be positive and strictly increasing: {:?}",
                self.horizons
            )));
        }
        if self.forecast_horizon == 0 {
            return Err(Error::InvalidConfig("forecast horizon must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn max_lookback(&self) -> usize {
        *self.horizons.last().unwrap_or(&0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Backward,
    Forward,
}

/// Sum of `d` log fluctuations around price index `t`.
///
/// Backward sums the `d` changes ending at `t` (`ln P_t − ln P_{t−d}`), forward
/// sums the `d` changes after `t` (`ln P_{t+d} − ln P_t`).
pub fn aggregate(dp: &[f64], d: usize, t: usize, direction: Direction) -> Result<f64> {
    let out_of_range = Error::OutOfRange {
        t,
        window: d,
        len: dp.len(),
    };
    if d == 0 {
        return Err(out_of_range);
    }
    let window = match direction {
        Direction::Backward if t >= d && t <= dp.len() => &dp[t - d..t],
        Direction::Forward if t + d <= dp.len() => &dp[t..t + d],
        _ => return Err(out_of_range),
    };
    Ok(window.iter().sum())
}

/// Aggregated inputs/targets for a set of aligned assets.
///
/// Input columns are asset-major: all horizons of asset 0, then asset 1, …
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedDataset {
    pub asset_ids: Vec<String>,
    pub horizons: HorizonTuple,
    /// Price index of each row.
    pub time_index: Vec<usize>,
    pub dates: Vec<NaiveDate>,
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    /// `P_t` per row and asset.
    pub anchor_prices: Array2<f64>,
    /// `P_{t+h}` per row and asset, the price a forecast is judged against.
    pub future_prices: Array2<f64>,
    pub split_index: usize,
}

impl AggregatedDataset {
    pub fn n_rows(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.asset_ids.len()
    }

    pub fn input_width(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn training_inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.slice(s![..self.split_index, ..])
    }

    pub fn training_targets(&self) -> ArrayView2<'_, f64> {
        self.targets.slice(s![..self.split_index, ..])
    }

    pub fn prediction_inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.slice(s![self.split_index.., ..])
    }

    pub fn prediction_targets(&self) -> ArrayView2<'_, f64> {
        self.targets.slice(s![self.split_index.., ..])
    }

    /// Copy with inputs and targets mapped through `params`.
    pub fn scaled(&self, params: &ScalerParams) -> Result<Self> {
        if params.input_columns != self.input_width()
            || params.mins.len() != self.input_width() + self.n_assets()
        {
            return Err(Error::DimensionMismatch {
                expected: params.mins.len(),
                got: self.input_width() + self.n_assets(),
            });
        }
        let mut out = self.clone();
        out.inputs = params.apply_matrix(&self.inputs, 0);
        out.targets = params.apply_matrix(&self.targets, params.input_columns);
        Ok(out)
    }

    pub fn input_column_names(&self) -> Vec<String> {
        self.asset_ids
            .iter()
            .flat_map(|a| self.horizons.horizons.iter().map(move |d| format!("{a}_h{d}")))
            .collect()
    }

    /// Writes the dataset snapshot: one row per dataset row with inputs,
    /// targets and anchor prices.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let h = self.horizons.forecast_horizon;
        let mut header = vec!["date".to_string(), "t".to_string()];
        header.extend(self.input_column_names());
        header.extend(self.asset_ids.iter().map(|a| format!("{a}_fwd{h}")));
        header.extend(self.asset_ids.iter().map(|a| format!("{a}_px")));
        w.write_record(&header)?;
        for r in 0..self.n_rows() {
            let mut rec = vec![
                self.dates[r].format(DATE_FORMAT).to_string(),
                self.time_index[r].to_string(),
            ];
            rec.extend(self.inputs.row(r).iter().map(|v| v.to_string()));
            rec.extend(self.targets.row(r).iter().map(|v| v.to_string()));
            rec.extend(self.anchor_prices.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn sidecar(&self, params: &ScalerParams) -> DatasetSidecar {
        DatasetSidecar {
            assets: self.asset_ids.clone(),
            horizons: self.horizons.horizons.clone(),
            forecast_horizon: self.horizons.forecast_horizon,
            split_index: self.split_index,
            mins: params.mins.clone(),
            maxs: params.maxs.clone(),
            range: params.range,
            input_columns: params.input_columns,
        }
    }
}

/// Builds the aggregated dataset over assets sharing one date index.
///
/// Rows lacking a full backward window (for the longest horizon) or a full
/// forward window are dropped.
pub fn build_dataset(
    series_list: &[PriceSeries],
    ht: &HorizonTuple,
    split_fraction: f64,
) -> Result<AggregatedDataset> {
    ht.validate()?;
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fraction must lie in (0, 1), got {split_fraction}"
        )));
    }
    let first = series_list
        .first()
        .ok_or_else(|| Error::InvalidSeries("no price series supplied".into()))?;
    for s in &series_list[1..] {
        if s.dates() != first.dates() {
            return Err(Error::Alignment(format!(
                "`{}` and `{}` have different date indices",
                first.asset_id(),
                s.asset_id()
            )));
        }
    }

    let n = first.len();
    let lookback = ht.max_lookback();
    let h = ht.forecast_horizon;
    if n < lookback + h + 3 {
        return Err(Error::InvalidSeries(format!(
            "{n} prices are too few for lookback {lookback} and horizon {h}"
        )));
    }
    let rows: Vec<usize> = (lookback..n - h).collect();
    let n_rows = rows.len();
    let n_assets = series_list.len();
    let width = n_assets * ht.horizons.len();

    let mut inputs = Array2::zeros((n_rows, width));
    let mut targets = Array2::zeros((n_rows, n_assets));
    let mut anchor_prices = Array2::zeros((n_rows, n_assets));
    let mut future_prices = Array2::zeros((n_rows, n_assets));
    for (a, series) in series_list.iter().enumerate() {
        let dp = series.log_fluctuations();
        let prices = series.prices();
        for (r, &t) in rows.iter().enumerate() {
            for (k, &d) in ht.horizons.iter().enumerate() {
                inputs[[r, a * ht.horizons.len() + k]] = aggregate(&dp, d, t, Direction::Backward)?;
            }
            targets[[r, a]] = aggregate(&dp, h, t, Direction::Forward)?;
            anchor_prices[[r, a]] = prices[t];
            future_prices[[r, a]] = prices[t + h];
        }
    }

    let split_index = (split_fraction * n_rows as f64).floor() as usize;
    if split_index == 0 || split_index >= n_rows {
        return Err(Error::InvalidConfig(format!(
            "split fraction {split_fraction} leaves an empty portion of {n_rows} rows"
        )));
    }

    Ok(AggregatedDataset {
        asset_ids: series_list.iter().map(|s| s.asset_id().to_string()).collect(),
        horizons: ht.clone(),
        dates: rows.iter().map(|&t| first.dates()[t]).collect(),
        time_index: rows,
        inputs,
        targets,
        anchor_prices,
        future_prices,
        split_index,
    })
}

/// Per-column min/max scaling, fitted on training rows.
///
/// Columns are the dataset's input columns followed by one target column per
/// asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub range: [f64; 2],
    pub input_columns: usize,
}

impl ScalerParams {
    pub fn target_column(&self, asset: usize) -> usize {
        self.input_columns + asset
    }

    fn is_degenerate(&self, col: usize) -> bool {
        self.maxs[col] == self.mins[col]
    }

    /// Linear map of `[min, max]` onto `range`. No clamping: values outside
    /// the training extrema extrapolate.
    pub fn apply(&self, col: usize, x: f64) -> f64 {
        let [low, high] = self.range;
        if self.is_degenerate(col) {
            return 0.5 * (low + high);
        }
        low + (x - self.mins[col]) / (self.maxs[col] - self.mins[col]) * (high - low)
    }

    pub fn invert(&self, col: usize, y: f64) -> f64 {
        let [low, high] = self.range;
        if self.is_degenerate(col) {
            return self.mins[col];
        }
        self.mins[col] + (y - low) / (high - low) * (self.maxs[col] - self.mins[col])
    }

    pub fn apply_matrix(&self, m: &Array2<f64>, col_offset: usize) -> Array2<f64> {
        let mut out = m.clone();
        for ((_, c), v) in out.indexed_iter_mut() {
            *v = self.apply(col_offset + c, *v);
        }
        out
    }

    pub fn invert_matrix(&self, m: &Array2<f64>, col_offset: usize) -> Array2<f64> {
        let mut out = m.clone();
        for ((_, c), v) in out.indexed_iter_mut() {
            *v = self.invert(col_offset + c, *v);
        }
        out
    }
}

/// Fits min/max on rows before `split_index` only.
pub fn fit_scaler(ds: &AggregatedDataset, range: [f64; 2]) -> Result<ScalerParams> {
    if !(range[0] < range[1]) {
        return Err(Error::InvalidConfig(format!("invalid scaling range {range:?}")));
    }
    let train_in = ds.training_inputs();
    let train_out = ds.training_targets();
    let mut mins = Vec::with_capacity(train_in.ncols() + train_out.ncols());
    let mut maxs = Vec::with_capacity(mins.capacity());
    for col in train_in.columns().into_iter().chain(train_out.columns()) {
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        mins.push(lo);
        maxs.push(hi);
    }
    Ok(ScalerParams {
        mins,
        maxs,
        range,
        input_columns: ds.input_width(),
    })
}

/// `anchor · exp(invert(predicted_scaled))`.
pub fn reconstruct_price(predicted_scaled: f64, col: usize, anchor_price: f64, params: &ScalerParams) -> f64 {
    debug_assert!(anchor_price > 0.0);
    anchor_price * params.invert(col, predicted_scaled).exp()
}

/// JSON sidecar written next to a dataset snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub assets: Vec<String>,
    pub horizons: Vec<usize>,
    pub forecast_horizon: usize,
    pub split_index: usize,
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub range: [f64; 2],
    pub input_columns: usize,
}

impl DatasetSidecar {
    pub fn scaler(&self) -> ScalerParams {
        ScalerParams {
            mins: self.mins.clone(),
            maxs: self.maxs.clone(),
            range: self.range,
            input_columns: self.input_columns,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads `date,ASSET1,ASSET2,...` closing prices. Any missing or
/// unparseable cell rejects the whole file.
pub fn read_prices_csv(path: impl AsRef<Path>) -> Result<Vec<PriceSeries>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_prices(file)
}

pub fn read_prices<R: std::io::Read>(reader: R) -> Result<Vec<PriceSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || !headers[0].eq_ignore_ascii_case("date") {
        return Err(Error::Parse("header must be `date,ASSET1,...`".into()));
    }
    let assets: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut dates = Vec::new();
    let mut columns = vec![Vec::new(); assets.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        if rec.len() != headers.len() {
            return Err(Error::Parse(format!(
                "row {row}: expected {} fields, got {}",
                headers.len(),
                rec.len()
            )));
        }
        let date = NaiveDate::parse_from_str(&rec[0], DATE_FORMAT)
            .map_err(|e| Error::Parse(format!("row {row}: bad date `{}`: {e}", &rec[0])))?;
        dates.push(date);
        for (a, col) in columns.iter_mut().enumerate() {
            let cell = &rec[a + 1];
            let v: f64 = cell.parse().map_err(|_| {
                Error::Parse(format!("row {row}: missing or invalid price `{cell}` for `{}`", assets[a]))
            })?;
            col.push(v);
        }
    }
    assets
        .into_iter()
        .zip(columns)
        .map(|(asset, prices)| PriceSeries::new(asset, dates.clone(), prices))
        .collect()
}

pub fn write_prices_csv(path: impl AsRef<Path>, series: &[PriceSeries]) -> Result<()> {
    let path = path.as_ref();
    let first = series
        .first()
        .ok_or_else(|| Error::InvalidSeries("no series to write".into()))?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(series.iter().map(|s| s.asset_id().to_string()));
    w.write_record(&header)?;
    for (i, d) in first.dates().iter().enumerate() {
        let mut rec = vec![d.format(DATE_FORMAT).to_string()];
        rec.extend(series.iter().map(|s| s.prices()[i].to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
