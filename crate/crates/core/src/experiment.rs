//! Two-stage grid search over the whole pipeline, persisted to a directory
//! store that can be resumed.
//!
//! Store layout:
//!
//! ```text
//! <store>/prices.csv
//! <store>/campaign.json            master seed and grid
//! <store>/stage1/<id>/{config,sae,meta}.json
//! <store>/stage1/manifest.json
//! <store>/stage2/<id>/{config.json,is_mse.csv,predictions.csv,ledger.csv,daily_pnl.csv,meta.json}
//! <store>/stage2/manifest.json
//! <store>/returns.csv
//! <store>/report/…
//! ```
//!
//! A config directory counts as complete once its `meta.json` exists; it is
//! always written last. Nothing in the store carries a timestamp, so the
//! same grid and seed reproduce the same bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{encode, select_best_indices, train_sae, SaeModel, SaeSpec};
use crate::error::{Error, Result};
use crate::market_data::{
    build_dataset, fit_scaler, read_prices_csv, write_json, write_prices_csv, AggregatedDataset, HorizonTuple,
    PriceSeries, ScalerParams,
};
use crate::mms::{benchmark, simulate, CostModel};
use crate::neural::{Activation, OgdConfig, SgdConfig};
use crate::predictor::{run_online, train_batch, PredictionRun, PredictorConfig, TargetLag};
use crate::stats;
use crate::validation::{validate, ReturnsMatrix, ValidationConfig, ValidationReport};

// ---------------------------------------------------------------------------
// Grids

fn default_split() -> Vec<f64> {
    vec![0.6]
}
fn default_range() -> Vec<[f64; 2]> {
    vec![[0.0, 1.0]]
}
fn default_sigmoid() -> Vec<Activation> {
    vec![Activation::Sigmoid]
}
fn default_minibatch() -> Vec<usize> {
    vec![32]
}
fn default_zero() -> Vec<f64> {
    vec![0.0]
}
fn default_one() -> Vec<f64> {
    vec![1.0]
}
fn default_lag() -> Vec<TargetLag> {
    vec![TargetLag::Horizon]
}
fn default_top() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Grid {
    pub horizons: Vec<Vec<usize>>,
    pub forecast_horizon: Vec<usize>,
    #[serde(default = "default_split")]
    pub split_fraction: Vec<f64>,
    #[serde(default = "default_range")]
    pub scaling_range: Vec<[f64; 2]>,
    /// Encoder widths after the input layer, as fractions of the input width
    /// (which depends on the horizon tuple).
    pub encoder_fractions: Vec<Vec<f64>>,
    #[serde(default = "default_sigmoid")]
    pub activation: Vec<Activation>,
    pub learning_rate: Vec<f64>,
    pub epochs: Vec<usize>,
    #[serde(default = "default_minibatch")]
    pub minibatch_size: Vec<usize>,
    /// SAEs forwarded to stage 2 per data configuration.
    #[serde(default = "default_top")]
    pub select_top: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Grid {
    pub hidden_sizes: Vec<Vec<usize>>,
    #[serde(default = "default_sigmoid")]
    pub activation: Vec<Activation>,
    pub learning_rate: Vec<f64>,
    pub epochs: Vec<usize>,
    #[serde(default = "default_minibatch")]
    pub minibatch_size: Vec<usize>,
    #[serde(default = "default_zero")]
    pub l2_penalty: Vec<f64>,
    #[serde(default = "default_zero")]
    pub momentum: Vec<f64>,
    pub ogd_learning_rate: Vec<f64>,
    #[serde(default = "default_one")]
    pub training_fraction_used: Vec<f64>,
    #[serde(default = "default_lag")]
    pub ogd_target_lag: Vec<TargetLag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageGrid {
    pub stage1: Stage1Grid,
    pub stage2: Stage2Grid,
    #[serde(default)]
    pub costs: CostModel,
}

/// Data preparation settings shared by an SAE and every predictor built on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub horizons: Vec<usize>,
    pub forecast_horizon: usize,
    pub split_fraction: f64,
    pub scaling_range: [f64; 2],
}

impl DataConfig {
    pub fn id(&self) -> String {
        config_id("data", self)
    }

    pub fn horizon_tuple(&self) -> Result<HorizonTuple> {
        HorizonTuple::new(self.horizons.clone(), self.forecast_horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub data: DataConfig,
    pub encoder_fractions: Vec<f64>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
}

impl Stage1Config {
    pub fn id(&self) -> String {
        config_id("stage1", self)
    }

    /// Encoder sizes for an input of `width` columns.
    pub fn encoder_sizes(&self, width: usize) -> Vec<usize> {
        let mut sizes = vec![width];
        sizes.extend(
            self.encoder_fractions
                .iter()
                .map(|f| ((f * width as f64).round() as usize).max(1)),
        );
        sizes
    }

    pub fn sae_spec(&self, width: usize, seed: u64) -> SaeSpec {
        let sgd = SgdConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            minibatch_size: self.minibatch_size,
            rng_seed: seed,
            ..SgdConfig::default()
        };
        SaeSpec::new(self.encoder_sizes(width), self.activation, sgd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub sae_id: String,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub l2_penalty: f64,
    pub momentum: f64,
    pub ogd_learning_rate: f64,
    pub training_fraction_used: f64,
    pub ogd_target_lag: TargetLag,
}

impl Stage2Config {
    pub fn id(&self) -> String {
        config_id("stage2", self)
    }

    pub fn predictor(&self, seed: u64) -> PredictorConfig {
        PredictorConfig {
            hidden_sizes: self.hidden_sizes.clone(),
            activation: self.activation,
            output_activation: Activation::Linear,
            sgd: SgdConfig {
                learning_rate: self.learning_rate,
                epochs: self.epochs,
                minibatch_size: self.minibatch_size,
                l2_penalty: self.l2_penalty,
                momentum: self.momentum,
                rng_seed: seed,
                shuffle: true,
            },
            ogd: OgdConfig { learning_rate: self.ogd_learning_rate },
            training_fraction_used: self.training_fraction_used,
            ogd_target_lag: self.ogd_target_lag,
        }
    }
}

/// Deterministic id: 24 hex digits of SHA-256 over the tagged canonical JSON.
pub fn config_id<T: Serialize>(tag: &str, value: &T) -> String {
    let json = serde_json::to_string(&(tag, value)).expect("configs serialize");
    hex_prefix(&Sha256::digest(json.as_bytes()), 12)
}

fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes[..n].iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-config seed, independent of scheduling order.
pub fn derive_seed(master: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Mixed-radix counter over `dims`; empty if any dimension is empty.
fn product(dims: Vec<usize>) -> impl Iterator<Item = Vec<usize>> + Send {
    let first = (!dims.contains(&0)).then(|| vec![0; dims.len()]);
    std::iter::successors(first, move |cur| {
        let mut next = cur.clone();
        for p in (0..dims.len()).rev() {
            next[p] += 1;
            if next[p] < dims[p] {
                return Some(next);
            }
            next[p] = 0;
        }
        None
    })
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(msg()))
    }
}

impl Stage1Grid {
    fn data_dims(&self) -> Vec<usize> {
        vec![
            self.horizons.len(),
            self.forecast_horizon.len(),
            self.split_fraction.len(),
            self.scaling_range.len(),
        ]
    }

    pub fn data_configs(&self) -> impl Iterator<Item = DataConfig> + Send + '_ {
        product(self.data_dims()).map(move |i| DataConfig {
            horizons: self.horizons[i[0]].clone(),
            forecast_horizon: self.forecast_horizon[i[1]],
            split_fraction: self.split_fraction[i[2]],
            scaling_range: self.scaling_range[i[3]],
        })
    }

    pub fn configs(&self) -> impl Iterator<Item = Stage1Config> + Send + '_ {
        let mut dims = self.data_dims();
        dims.extend([
            self.encoder_fractions.len(),
            self.activation.len(),
            self.learning_rate.len(),
            self.epochs.len(),
            self.minibatch_size.len(),
        ]);
        product(dims).map(move |i| Stage1Config {
            data: DataConfig {
                horizons: self.horizons[i[0]].clone(),
                forecast_horizon: self.forecast_horizon[i[1]],
                split_fraction: self.split_fraction[i[2]],
                scaling_range: self.scaling_range[i[3]],
            },
            encoder_fractions: self.encoder_fractions[i[4]].clone(),
            activation: self.activation[i[5]],
            learning_rate: self.learning_rate[i[6]],
            epochs: self.epochs[i[7]],
            minibatch_size: self.minibatch_size[i[8]],
        })
    }

    pub fn n_configs(&self) -> usize {
        self.data_dims().iter().product::<usize>()
            * self.encoder_fractions.len()
            * self.activation.len()
            * self.learning_rate.len()
            * self.epochs.len()
            * self.minibatch_size.len()
    }

    pub fn validate(&self) -> Result<()> {
        check(self.n_configs() > 0, || "stage-1 grid is empty".into())?;
        for h in &self.horizons {
            for &f in &self.forecast_horizon {
                HorizonTuple::new(h.clone(), f)?;
            }
        }
        for &s in &self.split_fraction {
            check(s > 0.0 && s < 1.0, || format!("split fraction {s} must lie in (0, 1)"))?;
        }
        for r in &self.scaling_range {
            check(r[0] < r[1], || format!("scaling range {r:?} must be increasing"))?;
        }
        for f in &self.encoder_fractions {
            check(!f.is_empty() && f.iter().all(|&x| x > 0.0 && x.is_finite()), || {
                format!("encoder fractions {f:?} must be non-empty and positive")
            })?;
        }
        for &lr in &self.learning_rate {
            check(lr > 0.0 && lr.is_finite(), || format!("learning rate {lr} must be > 0"))?;
        }
        check(!self.minibatch_size.contains(&0), || "minibatch size must be ≥ 1".into())?;
        check(self.select_top >= 1, || "select_top must be ≥ 1".into())
    }
}

impl Stage2Grid {
    fn dims(&self) -> Vec<usize> {
        vec![
            self.hidden_sizes.len(),
            self.activation.len(),
            self.learning_rate.len(),
            self.epochs.len(),
            self.minibatch_size.len(),
            self.l2_penalty.len(),
            self.momentum.len(),
            self.ogd_learning_rate.len(),
            self.training_fraction_used.len(),
            self.ogd_target_lag.len(),
        ]
    }

    /// Product of the predictor settings with the given SAE ids (outermost).
    pub fn configs<'a>(&'a self, sae_ids: &'a [String]) -> impl Iterator<Item = Stage2Config> + Send + 'a {
        let mut dims = vec![sae_ids.len()];
        dims.extend(self.dims());
        product(dims).map(move |i| Stage2Config {
            sae_id: sae_ids[i[0]].clone(),
            hidden_sizes: self.hidden_sizes[i[1]].clone(),
            activation: self.activation[i[2]],
            learning_rate: self.learning_rate[i[3]],
            epochs: self.epochs[i[4]],
            minibatch_size: self.minibatch_size[i[5]],
            l2_penalty: self.l2_penalty[i[6]],
            momentum: self.momentum[i[7]],
            ogd_learning_rate: self.ogd_learning_rate[i[8]],
            training_fraction_used: self.training_fraction_used[i[9]],
            ogd_target_lag: self.ogd_target_lag[i[10]],
        })
    }

    pub fn n_configs(&self, n_saes: usize) -> usize {
        n_saes * self.dims().iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        check(self.n_configs(1) > 0, || "stage-2 grid is empty".into())?;
        for h in &self.hidden_sizes {
            check(!h.contains(&0), || format!("hidden sizes {h:?} must be positive"))?;
        }
        for &lr in &self.learning_rate {
            check(lr > 0.0 && lr.is_finite(), || format!("learning rate {lr} must be > 0"))?;
        }
        check(!self.minibatch_size.contains(&0), || "minibatch size must be ≥ 1".into())?;
        for &l2 in &self.l2_penalty {
            check(l2 >= 0.0, || format!("l2 penalty {l2} must be ≥ 0"))?;
        }
        for &m in &self.momentum {
            check((0.0..1.0).contains(&m), || format!("momentum {m} must lie in [0, 1)"))?;
        }
        for &lr in &self.ogd_learning_rate {
            check(lr >= 0.0 && lr.is_finite(), || format!("OGD learning rate {lr} must be ≥ 0"))?;
        }
        for &f in &self.training_fraction_used {
            check(f > 0.0 && f <= 1.0, || format!("training fraction {f} must lie in (0, 1]"))?;
        }
        Ok(())
    }
}

impl StageGrid {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: Self = serde_json::from_str(&text)?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.costs.validate()
    }
}

// ---------------------------------------------------------------------------
// Store

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    fn dir(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub seed: u64,
    pub grid: StageGrid,
}

#[derive(Debug, Clone)]
pub struct CampaignStore {
    root: PathBuf,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl CampaignStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        mkdir(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn prices_path(&self) -> PathBuf {
        self.root.join("prices.csv")
    }

    pub fn returns_path(&self) -> PathBuf {
        self.root.join("returns.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn write_prices(&self, series: &[PriceSeries]) -> Result<()> {
        write_prices_csv(self.prices_path(), series)
    }

    pub fn read_prices(&self) -> Result<Vec<PriceSeries>> {
        read_prices_csv(self.prices_path())
    }

    pub fn campaign(&self) -> Result<Option<Campaign>> {
        let p = self.root.join("campaign.json");
        if p.exists() {
            read_json(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Records the campaign, or checks that a resumed store belongs to it.
    pub fn init_campaign(&self, grid: &StageGrid, seed: u64) -> Result<Campaign> {
        let c = Campaign { seed, grid: grid.clone() };
        match self.campaign()? {
            Some(existing) if existing.seed == seed && existing.grid.stage1 == grid.stage1 => Ok(c),
            Some(_) => Err(Error::InvalidConfig(format!(
                "store {} holds a campaign with a different seed or stage-1 grid",
                self.root.display()
            ))),
            None => {
                write_json(self.root.join("campaign.json"), &c)?;
                Ok(c)
            }
        }
    }

    pub fn config_dir(&self, stage: Stage, id: &str) -> PathBuf {
        self.root.join(stage.dir()).join(id)
    }

    pub fn is_complete(&self, stage: Stage, id: &str) -> bool {
        self.config_dir(stage, id).join("meta.json").is_file()
    }

    pub fn read_meta<T: DeserializeOwned>(&self, stage: Stage, id: &str) -> Result<T> {
        read_json(&self.config_dir(stage, id).join("meta.json"))
    }

    /// Ids of complete configs, sorted.
    pub fn completed(&self, stage: Stage) -> Result<Vec<String>> {
        let dir = self.root.join(stage.dir());
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().join("meta.json").is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Fresh directory for `id`, discarding leftovers of an interrupted run.
    fn claim(&self, stage: Stage, id: &str) -> Result<PathBuf> {
        let dir = self.config_dir(stage, id);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        mkdir(&dir)?;
        Ok(dir)
    }
}

// ---------------------------------------------------------------------------
// Stage 1

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Meta {
    pub id: String,
    pub data_id: String,
    pub input_width: usize,
    pub bottleneck: usize,
    pub training_mse: Option<f64>,
    pub failed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Entry {
    #[serde(flatten)]
    pub meta: Stage1Meta,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Manifest {
    pub entries: Vec<Stage1Entry>,
}

impl Stage1Manifest {
    pub fn selected(&self) -> Vec<String> {
        self.entries.iter().filter(|e| e.selected).map(|e| e.meta.id.clone()).collect()
    }
}

/// Dataset scaled with its train-fitted scaler.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub raw: AggregatedDataset,
    pub scaled: AggregatedDataset,
    pub scaler: ScalerParams,
}

pub fn prepare_data(series: &[PriceSeries], cfg: &DataConfig) -> Result<PreparedData> {
    let raw = build_dataset(series, &cfg.horizon_tuple()?, cfg.split_fraction)?;
    let scaler = fit_scaler(&raw, cfg.scaling_range)?;
    let scaled = raw.scaled(&scaler)?;
    Ok(PreparedData { raw, scaled, scaler })
}

fn stage1_one(
    store: &CampaignStore,
    cfg: &Stage1Config,
    data: &std::result::Result<Arc<PreparedData>, String>,
    seed: u64,
) -> Result<Stage1Meta> {
    let id = cfg.id();
    let dir = store.claim(Stage::One, &id)?;
    write_json(dir.join("config.json"), cfg)?;
    let mut meta = Stage1Meta {
        id: id.clone(),
        data_id: cfg.data.id(),
        input_width: 0,
        bottleneck: 0,
        training_mse: None,
        failed: true,
        error: None,
    };
    let outcome = data.clone().map_err(Error::InvalidConfig).and_then(|d| {
        let width = d.scaled.input_width();
        let spec = cfg.sae_spec(width, derive_seed(seed, &id));
        train_sae(&d.scaled, &spec)
    });
    match outcome {
        Ok(model) => {
            meta.input_width = model.spec.input_width();
            meta.bottleneck = model.bottleneck();
            meta.failed = model.failed();
            meta.training_mse = (!model.failed()).then_some(model.training_mse);
            write_json(dir.join("sae.json"), &model)?;
        }
        Err(e) => {
            tracing::warn!(%id, error = %e, "stage-1 config failed");
            meta.error = Some(e.to_string());
        }
    }
    write_json(dir.join("meta.json"), &meta)?;
    Ok(meta)
}

/// Trains every SAE in the stage-1 grid that is not already in the store,
/// then picks the best `select_top` per data configuration.
pub fn run_stage1(store: &CampaignStore, grid: &StageGrid, seed: u64) -> Result<Stage1Manifest> {
    grid.validate()?;
    store.init_campaign(grid, seed)?;
    let series = store.read_prices()?;

    let data: HashMap<String, std::result::Result<Arc<PreparedData>, String>> = grid
        .stage1
        .data_configs()
        .par_bridge()
        .map(|d| (d.id(), prepare_data(&series, &d).map(Arc::new).map_err(|e| e.to_string())))
        .collect();

    let mut metas: Vec<Stage1Meta> = grid
        .stage1
        .configs()
        .par_bridge()
        .map(|cfg| {
            let id = cfg.id();
            if store.is_complete(Stage::One, &id) {
                return store.read_meta(Stage::One, &id);
            }
            stage1_one(store, &cfg, &data[&cfg.data.id()], seed)
        })
        .collect::<Result<_>>()?;
    metas.sort_by(|a, b| a.id.cmp(&b.id));

    let mut by_data: BTreeMap<&str, Vec<&Stage1Meta>> = BTreeMap::new();
    for m in &metas {
        by_data.entry(&m.data_id).or_default().push(m);
    }
    let mut selected = std::collections::HashSet::new();
    for group in by_data.values() {
        let live: Vec<&&Stage1Meta> = group.iter().filter(|m| !m.failed).collect();
        let models: Vec<SaeModel> = live
            .iter()
            .map(|m| read_json(&store.config_dir(Stage::One, &m.id).join("sae.json")))
            .collect::<Result<_>>()?;
        if models.is_empty() {
            continue;
        }
        for i in select_best_indices(&models, grid.stage1.select_top)? {
            selected.insert(live[i].id.clone());
        }
    }
    if selected.is_empty() {
        return Err(Error::SelectionFailed);
    }
    let manifest = Stage1Manifest {
        entries: metas
            .into_iter()
            .map(|m| Stage1Entry { selected: selected.contains(&m.id), meta: m })
            .collect(),
    };
    write_json(store.root.join("stage1").join("manifest.json"), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Stage 2

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Meta {
    pub id: String,
    pub sae_id: String,
    pub failed: bool,
    pub failed_at: Option<usize>,
    pub error: Option<String>,
    pub epochs: usize,
    pub training_fraction_used: f64,
    pub final_is_mse: Option<f64>,
    pub n_trades: usize,
    pub total_pnl: f64,
    pub benchmark_pnl: f64,
    pub dominated: bool,
    pub capital_base: f64,
    /// Price indices `[start, end)` over which this config can book P&L.
    pub window: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Manifest {
    pub entries: Vec<Stage2Meta>,
}

/// An SAE from stage 1 together with its encoded dataset.
struct EncodedSae {
    data: PreparedData,
    encoded: AggregatedDataset,
    series: Arc<Vec<PriceSeries>>,
    costs: CostModel,
}

fn load_encoded(store: &CampaignStore, sae_id: &str, series: Arc<Vec<PriceSeries>>, costs: CostModel) -> Result<EncodedSae> {
    let dir = store.config_dir(Stage::One, sae_id);
    let cfg: Stage1Config = read_json(&dir.join("config.json"))?;
    let model: SaeModel = read_json(&dir.join("sae.json"))?;
    let data = prepare_data(&series, &cfg.data)?;
    let encoded = encode(&model, &data.scaled)?;
    Ok(EncodedSae { data, encoded, series, costs })
}

fn prediction_window(ds: &AggregatedDataset) -> [usize; 2] {
    let h = ds.horizons.forecast_horizon;
    [ds.time_index[ds.split_index], ds.time_index[ds.n_rows() - 1] + h + 1]
}

fn write_series_csv(path: &Path, header: [&str; 2], rows: impl Iterator<Item = (usize, f64)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (k, v) in rows {
        w.write_record([k.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn stage2_one(store: &CampaignStore, cfg: &Stage2Config, sae: &Result<Arc<EncodedSae>, String>, seed: u64) -> Result<Stage2Meta> {
    let id = cfg.id();
    let dir = store.claim(Stage::Two, &id)?;
    write_json(dir.join("config.json"), cfg)?;
    let mut meta = Stage2Meta {
        id: id.clone(),
        sae_id: cfg.sae_id.clone(),
        failed: true,
        failed_at: None,
        error: None,
        epochs: cfg.epochs,
        training_fraction_used: cfg.training_fraction_used,
        final_is_mse: None,
        n_trades: 0,
        total_pnl: 0.0,
        benchmark_pnl: 0.0,
        dominated: true,
        capital_base: 1.0,
        window: [0, 0],
    };
    let sae = match sae {
        Ok(s) => s,
        Err(e) => {
            meta.error = Some(e.clone());
            write_json(dir.join("meta.json"), &meta)?;
            return Ok(meta);
        }
    };
    let ds = &sae.encoded;
    meta.window = prediction_window(ds);

    let h = ds.horizons.forecast_horizon;
    let entries = meta.window[0]..meta.window[1] - h;
    let bench = benchmark(&sae.series, h, &sae.costs, entries)?;
    meta.benchmark_pnl = bench.total_pnl;

    let run_seed = derive_seed(seed, &id);
    let pcfg = cfg.predictor(run_seed);
    let run = train_batch(ds, &pcfg, run_seed ^ 0x5851_F42D_4C95_7F2D).and_then(|batch| {
        write_series_csv(&dir.join("is_mse.csv"), ["epoch", "mse"], batch.mse_trace.iter().copied().enumerate())?;
        meta.final_is_mse = batch.mse_trace.last().copied().filter(|v| v.is_finite());
        if batch.failed {
            return Ok(PredictionRun::failed(ds.asset_ids.clone(), h, batch.mse_trace));
        }
        let mut run = run_online(&batch.network, ds, &pcfg, &sae.data.scaler)?;
        run.is_mse_trace = batch.mse_trace;
        Ok(run)
    });
    let run = match run {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(%id, error = %e, "stage-2 config failed");
            meta.error = Some(e.to_string());
            write_json(dir.join("meta.json"), &meta)?;
            return Ok(meta);
        }
    };
    run.write_csv(dir.join("predictions.csv"))?;
    let ledger = simulate(&run, &sae.costs)?;
    ledger.write_csv(dir.join("ledger.csv"))?;
    let w = ledger.window();
    write_series_csv(&dir.join("daily_pnl.csv"), ["t", "pnl"], w.zip(ledger.daily_pnl.iter().copied()))?;

    meta.failed = run.failed;
    meta.failed_at = run.failed_at;
    meta.n_trades = ledger.trades.len();
    meta.total_pnl = ledger.total_pnl;
    meta.dominated = bench.total_pnl >= ledger.total_pnl - 1e-12;
    meta.capital_base = ledger.peak_notional();
    write_json(dir.join("meta.json"), &meta)?;
    Ok(meta)
}

/// Runs every stage-2 config for the SAEs selected in stage 1, writes the
/// manifest of all completed stage-2 configs and their returns matrix.
pub fn run_stage2(store: &CampaignStore, grid: &StageGrid, seed: u64) -> Result<(Stage2Manifest, ReturnsMatrix)> {
    grid.validate()?;
    let manifest_path = store.root.join("stage1").join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::InvalidConfig("stage 1 has not been run on this store".into()));
    }
    let s1: Stage1Manifest = read_json(&manifest_path)?;
    let sae_ids = s1.selected();
    let series = Arc::new(store.read_prices()?);

    let saes: HashMap<String, Result<Arc<EncodedSae>, String>> = sae_ids
        .par_iter()
        .map(|id| {
            let enc = load_encoded(store, id, series.clone(), grid.costs).map(Arc::new).map_err(|e| e.to_string());
            (id.clone(), enc)
        })
        .collect();

    grid.stage2
        .configs(&sae_ids)
        .par_bridge()
        .map(|cfg| {
            let id = cfg.id();
            if store.is_complete(Stage::Two, &id) {
                return Ok(());
            }
            stage2_one(store, &cfg, &saes[&cfg.sae_id], seed).map(|_| ())
        })
        .collect::<Result<()>>()?;

    let entries: Vec<Stage2Meta> = store
        .completed(Stage::Two)?
        .iter()
        .map(|id| store.read_meta(Stage::Two, id))
        .collect::<Result<_>>()?;
    let manifest = Stage2Manifest { entries };
    write_json(store.root.join("stage2").join("manifest.json"), &manifest)?;
    let returns = assemble_returns(store, &manifest.entries)?;
    returns.write_csv(store.returns_path())?;
    Ok((manifest, returns))
}

pub fn read_stage2_manifest(store: &CampaignStore) -> Result<Stage2Manifest> {
    let p = store.root.join("stage2").join("manifest.json");
    if !p.is_file() {
        return Err(Error::InvalidConfig("stage 2 has not been run on this store".into()));
    }
    read_json(&p)
}

/// Daily returns of each config over the window every config can trade in.
/// Failed configs contribute flagged zero columns.
pub fn assemble_returns(store: &CampaignStore, entries: &[Stage2Meta]) -> Result<ReturnsMatrix> {
    if entries.is_empty() {
        return Err(Error::ValidationRefused("no stage-2 results to assemble".into()));
    }
    let windows: Vec<[usize; 2]> = entries.iter().filter(|e| e.window[1] > e.window[0]).map(|e| e.window).collect();
    let start = windows.iter().map(|w| w[0]).max().unwrap_or(0);
    let end = windows.iter().map(|w| w[1]).min().unwrap_or(0);
    if end <= start {
        return Err(Error::ValidationRefused("stage-2 configs share no common trading window".into()));
    }
    let mut columns = Vec::with_capacity(entries.len());
    for e in entries {
        let mut col = vec![0.0; end - start];
        let pnl_path = store.config_dir(Stage::Two, &e.id).join("daily_pnl.csv");
        if !e.failed && pnl_path.is_file() {
            let mut rdr = csv::Reader::from_path(&pnl_path)?;
            for rec in rdr.deserialize::<(usize, f64)>() {
                let (t, pnl) = rec?;
                if (start..end).contains(&t) {
                    col[t - start] = pnl / e.capital_base;
                }
            }
        }
        columns.push(col);
    }
    let labels: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let data = ndarray::Array2::from_shape_fn((end - start, entries.len()), |(i, j)| columns[j][i]);
    ReturnsMatrix::with_flags(labels, data, entries.iter().map(|e| e.failed).collect())
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub validation: ValidationConfig,
    pub include_failed: bool,
    /// Restrict the report to these stage-2 ids.
    pub ids: Option<Vec<String>>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { validation: ValidationConfig::default(), include_failed: true, ids: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    #[serde(flatten)]
    pub validation: ValidationReport,
    pub include_failed: bool,
    pub dominance_violations: usize,
    pub benchmark_pnl_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub value: String,
    pub n: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

/// OOS P&L distribution per distinct value of `key`, ordered by that value.
pub fn ablation_table(entries: &[Stage2Meta], key: impl Fn(&Stage2Meta) -> f64) -> Vec<GroupSummary> {
    let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
    for e in entries {
        let k = key(e);
        match groups.iter_mut().find(|g| g.0 == k) {
            Some(g) => g.1.push(e.total_pnl),
            None => groups.push((k, vec![e.total_pnl])),
        }
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    groups
        .into_iter()
        .map(|(k, v)| GroupSummary {
            value: k.to_string(),
            n: v.len(),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            q25: stats::quantile(&v, 0.25),
            median: stats::median(&v),
            q75: stats::quantile(&v, 0.75),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: stats::mean(&v),
        })
        .collect()
}

fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Serialize)]
struct PnlRow<'a> {
    config: &'a str,
    sae_id: &'a str,
    total_pnl: f64,
    benchmark_pnl: f64,
    n_trades: usize,
    failed: bool,
}

/// Validates the assembled returns and writes the report directory:
/// `report.json`, `logits.csv`, `clusters.csv`, `cluster_sr.csv`,
/// `returns.csv`, `pnl_distribution.csv`, `ablation_epochs.csv`,
/// `ablation_training_fraction.csv`.
pub fn report(store: &CampaignStore, opts: &ReportOptions) -> Result<CampaignReport> {
    let mut entries = read_stage2_manifest(store)?.entries;
    if let Some(ids) = &opts.ids {
        entries.retain(|e| ids.contains(&e.id));
        if entries.is_empty() {
            return Err(Error::ValidationRefused("id filter matches no stage-2 config".into()));
        }
    }
    let mut m = assemble_returns(store, &entries)?;
    if !opts.include_failed {
        m = m.without_failed();
        entries.retain(|e| !e.failed);
    }
    let outcome = validate(&m, &opts.validation)?;

    let dir = store.report_dir();
    mkdir(&dir)?;
    outcome.write(&dir, m.labels())?;
    m.write_csv(dir.join("returns.csv"))?;

    let pnl: Vec<PnlRow> = entries
        .iter()
        .map(|e| PnlRow {
            config: &e.id,
            sae_id: &e.sae_id,
            total_pnl: e.total_pnl,
            benchmark_pnl: e.benchmark_pnl,
            n_trades: e.n_trades,
            failed: e.failed,
        })
        .collect();
    write_table(&dir.join("pnl_distribution.csv"), &pnl)?;
    write_table(&dir.join("ablation_epochs.csv"), &ablation_table(&entries, |e| e.epochs as f64))?;
    write_table(
        &dir.join("ablation_training_fraction.csv"),
        &ablation_table(&entries, |e| e.training_fraction_used),
    )?;

    let report = CampaignReport {
        validation: outcome.report,
        include_failed: opts.include_failed,
        dominance_violations: entries.iter().filter(|e| !e.dominated).count(),
        benchmark_pnl_max: entries.iter().map(|e| e.benchmark_pnl).fold(0.0, f64::max),
    };
    write_json(dir.join("report.json"), &report)?;
    Ok(report)
}

/// Stage 1, stage 2 and the report in one call.
pub fn run_campaign(store: &CampaignStore, grid: &StageGrid, seed: u64, opts: &ReportOptions) -> Result<CampaignReport> {
    run_stage1(store, grid, seed)?;
    run_stage2(store, grid, seed)?;
    report(store, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_grid() -> StageGrid {
        serde_json::from_value(serde_json::json!({
            "stage1": {
                "horizons": [[1, 5], [1, 2, 3]],
                "forecast_horizon": [5],
                "encoder_fractions": [[0.5], [0.25]],
                "learning_rate": [0.1],
                "epochs": [5],
            },
            "stage2": {
                "hidden_sizes": [[4]],
                "learning_rate": [0.05],
                "epochs": [0, 3],
                "ogd_learning_rate": [0.0, 0.05],
                "training_fraction_used": [0.5, 1.0],
            }
        }))
        .unwrap()
    }

    #[test]
    fn product_counts() {
        let g = tiny_grid();
        assert_eq!(g.stage1.n_configs(), 4);
        assert_eq!(g.stage1.configs().count(), 4);
        assert_eq!(g.stage1.data_configs().count(), 2);
        let ids = vec!["a".to_string(), "b".to_string()];
        assert_eq!(g.stage2.configs(&ids).count(), 16);
        assert_eq!(g.stage2.n_configs(2), 16);
        assert_eq!(product(vec![2, 0, 3]).count(), 0);
        assert_eq!(product(vec![]).count(), 1);
        let v: Vec<_> = product(vec![2, 2]).collect();
        assert_eq!(v, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn ids_unique_and_stable() {
        let g = tiny_grid();
        let mut ids: Vec<String> = g.stage1.configs().map(|c| c.id()).collect();
        assert!(ids.iter().all(|i| i.len() == 24));
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        let c = g.stage1.configs().next().unwrap();
        assert_eq!(c.id(), c.clone().id());
        assert_ne!(derive_seed(1, &c.id()), derive_seed(2, &c.id()));
    }

    #[test]
    fn empty_grid_rejected() {
        let mut g = tiny_grid();
        g.stage1.horizons.clear();
        assert!(matches!(g.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn encoder_sizes_follow_width() {
        let c = tiny_grid().stage1.configs().next().unwrap();
        assert_eq!(c.encoder_sizes(8), vec![8, 4]);
        let c = Stage1Config { encoder_fractions: vec![0.5, 0.01], ..c };
        assert_eq!(c.encoder_sizes(10), vec![10, 5, 1]);
    }

    #[test]
    fn ablation_groups_sorted() {
        let meta = |epochs, pnl| Stage2Meta {
            id: String::new(),
            sae_id: String::new(),
            failed: false,
            failed_at: None,
            error: None,
            epochs,
            training_fraction_used: 1.0,
            final_is_mse: None,
            n_trades: 0,
            total_pnl: pnl,
            benchmark_pnl: 0.0,
            dominated: true,
            capital_base: 1.0,
            window: [0, 1],
        };
        let rows = ablation_table(&[meta(100, 1.0), meta(10, 2.0), meta(100, 3.0)], |e| e.epochs as f64);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].value, "10");
        assert_eq!(rows[1].n, 2);
        assert_eq!(rows[1].median, 2.0);
    }
}
