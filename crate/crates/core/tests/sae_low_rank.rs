//! Linear autoencoders on data of known intrinsic dimension, checked against
//! the PCA reconstruction error computed independently with nalgebra.

use chrono::{Days, NaiveDate};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use lowfreq::autoencoder::{train_sae, SaeSpec};
use lowfreq::market_data::{AggregatedDataset, HorizonTuple};
use lowfreq::neural::{Activation, SgdConfig};

const WIDTH: usize = 6;

/// `n` rows of rank-`k` structure in `WIDTH` columns plus isotropic noise.
fn low_rank(n: usize, k: usize, noise: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let loadings = Array2::from_shape_fn((k, WIDTH), |_| 0.4 * unit.sample(&mut rng));
    let factors = Array2::from_shape_fn((n, k), |_| unit.sample(&mut rng));
    let eps = Array2::from_shape_fn((n, WIDTH), |_| noise * unit.sample(&mut rng));
    factors.dot(&loadings) + eps + 0.5
}

fn dataset(inputs: Array2<f64>) -> AggregatedDataset {
    let n = inputs.nrows();
    let start = NaiveDate::from_ymd_opt(2016, 1, 1).unwrap();
    AggregatedDataset {
        asset_ids: vec!["A".into()],
        horizons: HorizonTuple::new(vec![1], 1).unwrap(),
        time_index: (0..n).collect(),
        dates: (0..n).map(|i| start + Days::new(i as u64)).collect(),
        inputs,
        targets: Array2::zeros((n, 1)),
        anchor_prices: Array2::ones((n, 1)),
        future_prices: Array2::ones((n, 1)),
        // every row is a training row
        split_index: n,
    }
}

/// Best mean-squared reconstruction error of any rank-`m` affine map: the
/// discarded covariance eigenvalues, averaged over columns.
fn pca_error(x: &Array2<f64>, m: usize) -> f64 {
    let (n, w) = x.dim();
    let mat = DMatrix::from_fn(n, w, |i, j| x[[i, j]]);
    let mean = mat.row_mean();
    let centered = DMatrix::from_fn(n, w, |i, j| mat[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig[m..].iter().sum::<f64>() / w as f64
}

fn linear_sae(bottleneck: usize, epochs: usize) -> SaeSpec {
    let sgd = SgdConfig {
        learning_rate: 0.05,
        epochs,
        minibatch_size: 32,
        rng_seed: 5,
        ..SgdConfig::default()
    };
    SaeSpec::new(vec![WIDTH, bottleneck], Activation::Linear, sgd)
}

#[test]
fn full_width_beats_every_narrower_pca_bound() {
    let x = low_rank(300, 2, 0.05, 1);
    let ds = dataset(x.clone());
    let full = train_sae(&ds, &linear_sae(WIDTH, 3000)).unwrap();
    for m in 1..WIDTH {
        let bound = pca_error(&x, m);
        assert!(
            full.training_mse < bound,
            "full-width MSE {} not below rank-{m} PCA error {bound}",
            full.training_mse
        );
    }
}

#[test]
fn narrow_linear_sae_cannot_beat_pca() {
    let x = low_rank(300, 3, 0.05, 2);
    let ds = dataset(x.clone());
    for m in 1..=3 {
        let model = train_sae(&ds, &linear_sae(m, 3000)).unwrap();
        let bound = pca_error(&x, m);
        assert!(model.training_mse >= bound * (1.0 - 1e-9), "rank {m}: {} < {bound}", model.training_mse);
        // and a well-trained one gets close to it
        assert!(model.training_mse < bound * 1.1, "rank {m}: {} vs {bound}", model.training_mse);
    }
}

#[test]
fn error_grows_as_bottleneck_shrinks_below_rank() {
    let k = 4;
    let x = low_rank(300, k, 0.02, 3);
    let ds = dataset(x);
    let mse: Vec<f64> = (1..=k)
        .map(|m| train_sae(&ds, &linear_sae(m, 1000)).unwrap().training_mse)
        .collect();
    // mse[m-1] for bottleneck m; shrinking must not help beyond 10% noise
    for m in 1..k {
        assert!(mse[m - 1] >= 0.9 * mse[m], "bottleneck {m}: {} vs {}", mse[m - 1], mse[m]);
    }
    assert!(mse[0] > 2.0 * mse[k - 1]);
}
