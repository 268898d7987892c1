//! Stacked autoencoders for input compression.
//!
//! An autoencoder is trained input→input on the training rows of a scaled
//! dataset. Its decoder mirrors the encoder sizes (no weight tying) and the
//! whole network is trained end-to-end from He-Adjusted initialization.
//! Once trained the model is frozen; [`encode`] only runs the encoder half.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::AggregatedDataset;
use crate::neural::{he_adjusted_init, train_sgd, Activation, DenseNetwork, SgdConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeSpec {
    /// Input width down to the bottleneck, e.g. `[30, 15, 5]`.
    pub encoder_sizes: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_output_activation")]
    pub output_activation: Activation,
    pub sgd: SgdConfig,
    /// Reserved: adapting the encoder during the online phase. Not supported.
    #[serde(default)]
    pub online_update: bool,
}

fn default_output_activation() -> Activation {
    Activation::Linear
}

impl SaeSpec {
    pub fn new(encoder_sizes: Vec<usize>, activation: Activation, sgd: SgdConfig) -> Self {
        Self {
            encoder_sizes,
            activation,
            output_activation: default_output_activation(),
            sgd,
            online_update: false,
        }
    }

    pub fn bottleneck(&self) -> usize {
        *self.encoder_sizes.last().unwrap_or(&0)
    }

    pub fn input_width(&self) -> usize {
        *self.encoder_sizes.first().unwrap_or(&0)
    }

    pub fn encoder_depth(&self) -> usize {
        self.encoder_sizes.len().saturating_sub(1)
    }

    /// Encoder sizes followed by their mirror, e.g. `[30, 15, 5, 15, 30]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = self.encoder_sizes.clone();
        sizes.extend(self.encoder_sizes.iter().rev().skip(1));
        sizes
    }

    pub fn activations(&self) -> Vec<Activation> {
        let n = 2 * self.encoder_depth();
        let mut acts = vec![self.activation; n];
        if let Some(last) = acts.last_mut() {
            *last = self.output_activation;
        }
        acts
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_sizes.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "encoder needs an input and a bottleneck size, got {:?}",
                self.encoder_sizes
            )));
        }
        if self.bottleneck() == 0 {
            return Err(Error::InvalidConfig("bottleneck must be ≥ 1".into()));
        }
        if self.online_update {
            return Err(Error::InvalidConfig("online autoencoder updates are not supported".into()));
        }
        self.sgd.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeModel {
    #[serde(flatten)]
    pub network: DenseNetwork,
    /// Reconstruction MSE on the training rows; infinite for a failed model
    /// (serialized as `null`).
    #[serde(with = "finite_or_null")]
    pub training_mse: f64,
    pub spec: SaeSpec,
}

impl SaeModel {
    pub fn failed(&self) -> bool {
        !self.training_mse.is_finite()
    }

    pub fn bottleneck(&self) -> usize {
        self.spec.bottleneck()
    }

    pub fn encoder(&self) -> Result<DenseNetwork> {
        self.network.truncated(self.spec.encoder_depth())
    }
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Seed for the initializer, kept apart from the SGD shuffling stream.
fn init_seed(sgd: &SgdConfig) -> u64 {
    sgd.rng_seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Trains an autoencoder on the training rows of an (already scaled) dataset.
pub fn train_sae(ds: &AggregatedDataset, spec: &SaeSpec) -> Result<SaeModel> {
    spec.validate()?;
    if spec.input_width() != ds.input_width() {
        return Err(Error::DimensionMismatch {
            expected: ds.input_width(),
            got: spec.input_width(),
        });
    }
    let net = he_adjusted_init(&spec.layer_sizes(), &spec.activations(), init_seed(&spec.sgd))?;
    let rows = ds.training_inputs();
    let outcome = train_sgd(&net, rows, rows, &spec.sgd)?;
    let training_mse = if outcome.diverged {
        f64::INFINITY
    } else {
        match outcome.network.mse(rows, rows) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::Divergence { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        }
    };
    Ok(SaeModel {
        network: outcome.network,
        training_mse,
        spec: spec.clone(),
    })
}

/// The `k` models with the smallest training MSE. Ties go to the smaller
/// bottleneck, then to the earlier entry in `models`. Failed models never
/// qualify.
pub fn select_best(models: &[SaeModel], k: usize) -> Result<Vec<SaeModel>> {
    if k == 0 {
        return Err(Error::InvalidConfig("must select at least one model".into()));
    }
    let mut ranked: Vec<&SaeModel> = models.iter().filter(|m| !m.failed()).collect();
    if ranked.is_empty() {
        return Err(Error::SelectionFailed);
    }
    // stable sort keeps creation order for full ties
    ranked.sort_by(|a, b| {
        a.training_mse
            .total_cmp(&b.training_mse)
            .then(a.bottleneck().cmp(&b.bottleneck()))
    });
    Ok(ranked.into_iter().take(k).cloned().collect())
}

/// Indices into `models` of [`select_best`]'s choice.
pub fn select_best_indices(models: &[SaeModel], k: usize) -> Result<Vec<usize>> {
    let chosen = select_best(models, k)?;
    let mut taken = vec![false; models.len()];
    Ok(chosen
        .iter()
        .map(|c| {
            let i = models
                .iter()
                .enumerate()
                .position(|(i, m)| !taken[i] && m == c)
                .expect("selected model comes from the input");
            taken[i] = true;
            i
        })
        .collect())
}

/// Replaces the inputs with bottleneck activations. Targets, anchors and the
/// split are carried over untouched.
pub fn encode(model: &SaeModel, ds: &AggregatedDataset) -> Result<AggregatedDataset> {
    if model.spec.input_width() != ds.input_width() {
        return Err(Error::DimensionMismatch {
            expected: model.spec.input_width(),
            got: ds.input_width(),
        });
    }
    let encoder = model.encoder()?;
    let width = model.bottleneck();
    let mut encoded = Array2::zeros((ds.n_rows(), width));
    for (r, row) in ds.inputs.rows().into_iter().enumerate() {
        let code = encoder.predict(&row.to_vec())?;
        encoded.row_mut(r).assign(&ndarray::ArrayView1::from(&code));
    }
    let mut out = ds.clone();
    out.inputs = encoded;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::HorizonTuple;
    use chrono::NaiveDate;

    fn dataset_from_inputs(inputs: Array2<f64>, split_index: usize) -> AggregatedDataset {
        let n = inputs.nrows();
        let start = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
        AggregatedDataset {
            asset_ids: vec!["A".into()],
            horizons: HorizonTuple::new(vec![1], 1).unwrap(),
            time_index: (0..n).collect(),
            dates: (0..n).map(|i| start + chrono::Days::new(i as u64)).collect(),
            targets: Array2::from_shape_fn((n, 1), |(i, _)| i as f64),
            anchor_prices: Array2::ones((n, 1)),
            future_prices: Array2::ones((n, 1)),
            inputs,
            split_index,
        }
    }

    fn model(mse: f64, bottleneck: usize, tag: u64) -> SaeModel {
        let mut sgd = SgdConfig::default();
        sgd.rng_seed = tag;
        let spec = SaeSpec::new(vec![6, bottleneck], Activation::Linear, sgd);
        SaeModel {
            network: DenseNetwork::zeros(spec.layer_sizes(), spec.activations()).unwrap(),
            training_mse: mse,
            spec,
        }
    }

    #[test]
    fn layer_layout_mirrors_encoder() {
        let spec = SaeSpec::new(vec![30, 15, 5], Activation::Sigmoid, SgdConfig::default());
        assert_eq!(spec.layer_sizes(), vec![30, 15, 5, 15, 30]);
        assert_eq!(
            spec.activations(),
            vec![Activation::Sigmoid, Activation::Sigmoid, Activation::Sigmoid, Activation::Linear]
        );
    }

    #[test]
    fn select_best_examples() {
        let models = vec![model(0.3, 5, 0), model(0.1, 5, 1), model(0.2, 5, 2)];
        let best = select_best(&models, 1).unwrap();
        assert_eq!(best[0].training_mse, 0.1);
        let all = select_best(&models, 3).unwrap();
        let mses: Vec<f64> = all.iter().map(|m| m.training_mse).collect();
        assert_eq!(mses, vec![0.1, 0.2, 0.3]);

        let tied = vec![model(0.1, 10, 0), model(0.1, 5, 1)];
        assert_eq!(select_best(&tied, 1).unwrap()[0].bottleneck(), 5);
        let same = vec![model(0.1, 5, 7), model(0.1, 5, 8)];
        assert_eq!(select_best(&same, 1).unwrap()[0].spec.sgd.rng_seed, 7);
        assert_eq!(select_best_indices(&tied, 2).unwrap(), vec![1, 0]);
    }

    #[test]
    fn select_best_skips_failed() {
        let models = vec![model(f64::INFINITY, 5, 0), model(0.4, 5, 1)];
        assert_eq!(select_best(&models, 2).unwrap().len(), 1);
        let failed = vec![model(f64::INFINITY, 5, 0)];
        assert!(matches!(select_best(&failed, 1), Err(Error::SelectionFailed)));
        assert!(select_best(&models, 0).is_err());
    }

    #[test]
    fn identity_encoder_leaves_inputs_unchanged() {
        let inputs = Array2::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let ds = dataset_from_inputs(inputs.clone(), 6);
        let spec = SaeSpec::new(vec![3, 3], Activation::Linear, SgdConfig::default());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let network = DenseNetwork::from_parts(
            spec.layer_sizes(),
            spec.activations(),
            vec![eye.clone(), eye],
            vec![vec![0.0; 3], vec![0.0; 3]],
        )
        .unwrap();
        let m = SaeModel {
            network,
            training_mse: 0.0,
            spec,
        };
        let enc = encode(&m, &ds).unwrap();
        assert_eq!(enc.inputs, inputs);
        assert_eq!(enc.targets, ds.targets);
        assert_eq!(enc.split_index, ds.split_index);
        assert_eq!(encode(&m, &ds).unwrap(), enc);
    }

    #[test]
    fn zero_epochs_reports_untrained_mse() {
        let inputs = Array2::from_shape_fn((20, 4), |(i, j)| ((i + 2 * j) as f64 * 0.3).sin());
        let ds = dataset_from_inputs(inputs, 12);
        let mut sgd = SgdConfig::default();
        sgd.epochs = 0;
        sgd.rng_seed = 3;
        let spec = SaeSpec::new(vec![4, 2], Activation::Sigmoid, sgd);
        let m = train_sae(&ds, &spec).unwrap();
        let untrained = he_adjusted_init(&spec.layer_sizes(), &spec.activations(), init_seed(&spec.sgd)).unwrap();
        let rows = ds.training_inputs();
        assert_eq!(m.training_mse, untrained.mse(rows, rows).unwrap());
        assert_eq!(m.network, untrained);
    }

    #[test]
    fn constant_columns_reconstruct_with_one_unit() {
        let inputs = Array2::from_elem((40, 5), 0.5);
        let ds = dataset_from_inputs(inputs, 30);
        let sgd = SgdConfig {
            learning_rate: 0.05,
            epochs: 300,
            minibatch_size: 8,
            rng_seed: 1,
            ..Default::default()
        };
        let m = train_sae(&ds, &SaeSpec::new(vec![5, 1], Activation::Sigmoid, sgd)).unwrap();
        assert!(m.training_mse < 1e-4, "mse {}", m.training_mse);
    }

    #[test]
    fn encoding_ignores_targets() {
        let inputs = Array2::from_shape_fn((15, 4), |(i, j)| ((i * j) as f64 * 0.2).cos());
        let ds = dataset_from_inputs(inputs, 10);
        let mut sgd = SgdConfig::default();
        sgd.epochs = 5;
        let m = train_sae(&ds, &SaeSpec::new(vec![4, 2], Activation::Relu, sgd)).unwrap();
        let mut permuted = ds.clone();
        permuted.targets.invert_axis(ndarray::Axis(0));
        assert_eq!(encode(&m, &ds).unwrap().inputs, encode(&m, &permuted).unwrap().inputs);
    }

    #[test]
    fn prediction_rows_do_not_affect_training() {
        let inputs = Array2::from_shape_fn((30, 3), |(i, j)| ((i + j) as f64 * 0.4).sin());
        let ds = dataset_from_inputs(inputs, 20);
        let mut altered = ds.clone();
        altered.inputs.slice_mut(ndarray::s![20.., ..]).fill(99.0);
        let mut sgd = SgdConfig::default();
        sgd.epochs = 20;
        let spec = SaeSpec::new(vec![3, 2], Activation::Sigmoid, sgd);
        assert_eq!(train_sae(&ds, &spec).unwrap(), train_sae(&altered, &spec).unwrap());
    }

    #[test]
    fn model_json_round_trip_with_failed_mse() {
        let m = model(f64::INFINITY, 3, 0);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"training_mse\":null"));
        assert!(json.contains("\"layer_sizes\""));
        let back: SaeModel = serde_json::from_str(&json).unwrap();
        assert!(back.failed());
        assert_eq!(back.network, m.network);
    }

    #[test]
    fn online_update_flag_is_rejected() {
        let mut spec = SaeSpec::new(vec![3, 2], Activation::Linear, SgdConfig::default());
        spec.online_update = true;
        assert!(spec.validate().is_err());
    }
}
