//! Dense feedforward networks trained on mean squared error.
//!
//! Weights of layer `l` are stored row-major as an `n_in × n_out` matrix, so
//! `w[i * n_out + j]` connects input unit `i` to output unit `j`.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Linear,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// Derivative in terms of the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork")]
pub struct DenseNetwork {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawNetwork {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl TryFrom<RawNetwork> for DenseNetwork {
    type Error = Error;

    fn try_from(raw: RawNetwork) -> Result<Self> {
        DenseNetwork::from_parts(raw.layer_sizes, raw.activations, raw.weights, raw.biases)
    }
}

fn check_shape(layer_sizes: &[usize], activations: &[Activation]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "a network needs at least 2 layers, got {:?}",
            layer_sizes
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidConfig(format!("empty layer in {layer_sizes:?}")));
    }
    if activations.len() != layer_sizes.len() - 1 {
        return Err(Error::DimensionMismatch {
            expected: layer_sizes.len() - 1,
            got: activations.len(),
        });
    }
    Ok(())
}

impl DenseNetwork {
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        activations: Vec<Activation>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_shape(&layer_sizes, &activations)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::DimensionMismatch {
                expected: layers,
                got: weights.len().min(biases.len()),
            });
        }
        for l in 0..layers {
            let (n_in, n_out) = (layer_sizes[l], layer_sizes[l + 1]);
            if weights[l].len() != n_in * n_out {
                return Err(Error::DimensionMismatch {
                    expected: n_in * n_out,
                    got: weights[l].len(),
                });
            }
            if biases[l].len() != n_out {
                return Err(Error::DimensionMismatch {
                    expected: n_out,
                    got: biases[l].len(),
                });
            }
            if weights[l].iter().chain(&biases[l]).any(|v| !v.is_finite()) {
                return Err(Error::Divergence { layer: l });
            }
        }
        Ok(Self {
            layer_sizes,
            activations,
            weights,
            biases,
        })
    }

    pub fn zeros(layer_sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        check_shape(&layer_sizes, &activations)?;
        let weights = layer_sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect();
        let biases = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            layer_sizes,
            activations,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    pub fn n_parameters(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    /// Truncated copy keeping the first `layers` weight layers.
    pub fn truncated(&self, layers: usize) -> Result<Self> {
        if layers == 0 || layers > self.n_layers() {
            return Err(Error::InvalidConfig(format!(
                "cannot keep {layers} of {} layers",
                self.n_layers()
            )));
        }
        Ok(Self {
            layer_sizes: self.layer_sizes[..=layers].to_vec(),
            activations: self.activations[..layers].to_vec(),
            weights: self.weights[..layers].to_vec(),
            biases: self.biases[..layers].to_vec(),
        })
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardPass> {
        if input.len() != self.input_size() {
            return Err(Error::DimensionMismatch {
                expected: self.input_size(),
                got: input.len(),
            });
        }
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut post = Vec::with_capacity(self.n_layers() + 1);
        post.push(input.to_vec());
        for l in 0..self.n_layers() {
            let n_out = self.layer_sizes[l + 1];
            let x = &post[l];
            let w = &self.weights[l];
            let mut z = self.biases[l].clone();
            for (i, &xi) in x.iter().enumerate() {
                let row = &w[i * n_out..(i + 1) * n_out];
                for (zj, wij) in z.iter_mut().zip(row) {
                    *zj += xi * wij;
                }
            }
            let act = self.activations[l];
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { layer: l });
            }
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardPass { pre, post })
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.post.pop().unwrap())
    }

    /// Gradient of `L = mean_k (y_k − target_k)²` for one sample.
    pub fn backprop_mse(&self, input: &[f64], target: &[f64]) -> Result<Backprop> {
        if target.len() != self.output_size() {
            return Err(Error::DimensionMismatch {
                expected: self.output_size(),
                got: target.len(),
            });
        }
        let pass = self.forward(input)?;
        let output = pass.post.last().unwrap();
        let m = output.len() as f64;
        let loss = output.iter().zip(target).map(|(y, t)| (y - t).powi(2)).sum::<f64>() / m;

        let mut grads = Gradients::zeros_like(self);
        // dL/da at the output layer
        let mut delta: Vec<f64> = output.iter().zip(target).map(|(y, t)| 2.0 * (y - t) / m).collect();
        for l in (0..self.n_layers()).rev() {
            let act = self.activations[l];
            for (j, d) in delta.iter_mut().enumerate() {
                *d *= act.derivative(pass.pre[l][j], pass.post[l + 1][j]);
            }
            if delta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { layer: l });
            }
            let n_out = self.layer_sizes[l + 1];
            let x = &pass.post[l];
            let gw = &mut grads.weights[l];
            for (i, &xi) in x.iter().enumerate() {
                for (g, d) in gw[i * n_out..(i + 1) * n_out].iter_mut().zip(&delta) {
                    *g = xi * d;
                }
            }
            grads.biases[l].copy_from_slice(&delta);
            if l > 0 {
                let w = &self.weights[l];
                delta = (0..self.layer_sizes[l])
                    .map(|i| {
                        w[i * n_out..(i + 1) * n_out]
                            .iter()
                            .zip(&delta)
                            .map(|(wij, dj)| wij * dj)
                            .sum()
                    })
                    .collect();
            }
        }
        Ok(Backprop {
            loss,
            output: pass.post.into_iter().last().unwrap(),
            gradients: grads,
        })
    }

    /// Mean over rows of the per-sample MSE.
    pub fn mse(&self, inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<f64> {
        let mut total = 0.0;
        for (x, t) in inputs.rows().into_iter().zip(targets.rows()) {
            let y = self.predict(&x.to_vec())?;
            total += y.iter().zip(t.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
        }
        Ok(total / inputs.nrows() as f64)
    }

    /// One gradient step. Momentum and L2 terms are skipped when zero so the
    /// plain update is exactly `w − η·g`.
    fn apply_step(&mut self, grads: &Gradients, lr: f64, l2: f64, momentum: f64, velocity: &mut Gradients) -> Result<()> {
        for l in 0..self.n_layers() {
            let layers = [
                (&mut self.weights[l], &grads.weights[l], &mut velocity.weights[l], l2),
                // no weight decay on biases
                (&mut self.biases[l], &grads.biases[l], &mut velocity.biases[l], 0.0),
            ];
            for (params, g, v, decay) in layers {
                for ((p, &gi), vi) in params.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                    let step = if decay > 0.0 { gi + decay * *p } else { gi };
                    if momentum > 0.0 {
                        *vi = momentum * *vi - lr * step;
                        *p += *vi;
                    } else {
                        *p -= lr * step;
                    }
                }
                if params.iter().any(|p| !p.is_finite()) {
                    return Err(Error::Divergence { layer: l });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Pre-activations per weight layer.
    pub pre: Vec<Vec<f64>>,
    /// Activations per layer, starting with the input.
    pub post: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Backprop {
    pub loss: f64,
    pub output: Vec<f64>,
    pub gradients: Gradients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Same order as [`DenseNetwork::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    fn accumulate(&mut self, other: &Gradients) {
        let pairs = self.weights.iter_mut().zip(&other.weights).chain(self.biases.iter_mut().zip(&other.biases));
        for (a, b) in pairs {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, k: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for x in v.iter_mut() {
                *x *= k;
            }
        }
    }
}

/// Half-width of the He-Adjusted uniform initializer, `√(12 / (n_in + n_out))`.
pub fn he_adjusted_bound(n_in: usize, n_out: usize) -> f64 {
    (12.0 / (n_in + n_out) as f64).sqrt()
}

/// `count` draws from `U(−r, r)` with `r` from [`he_adjusted_bound`]; the
/// open lower end is enforced by rejection.
pub fn sample_he_adjusted<R: Rng + ?Sized>(n_in: usize, n_out: usize, count: usize, rng: &mut R) -> Vec<f64> {
    let r = he_adjusted_bound(n_in, n_out);
    (0..count)
        .map(|_| loop {
            let w = rng.random_range(-r..r);
            if w > -r {
                break w;
            }
        })
        .collect()
}

/// He-Adjusted initialization: weights uniform on `(−r, r)` with the bound
/// set by the mean of adjacent layer sizes, biases zero.
pub fn he_adjusted_init(layer_sizes: &[usize], activations: &[Activation], rng_seed: u64) -> Result<DenseNetwork> {
    let mut net = DenseNetwork::zeros(layer_sizes.to_vec(), activations.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for l in 0..net.n_layers() {
        let (n_in, n_out) = (layer_sizes[l], layer_sizes[l + 1]);
        net.weights[l] = sample_he_adjusted(n_in, n_out, n_in * n_out, &mut rng);
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    #[serde(default)]
    pub l2_penalty: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub rng_seed: u64,
    /// Reshuffle rows every epoch.
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 100,
            minibatch_size: 32,
            l2_penalty: 0.0,
            momentum: 0.0,
            rng_seed: 0,
            shuffle: true,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.minibatch_size == 0 {
            return Err(Error::InvalidConfig("minibatch size must be ≥ 1".into()));
        }
        if !(self.l2_penalty >= 0.0) {
            return Err(Error::InvalidConfig("l2 penalty must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OgdConfig {
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: DenseNetwork,
    /// Full-dataset MSE after each completed epoch.
    pub mse_trace: Vec<f64>,
    /// Set when a loss or parameter went non-finite; `network` then holds the
    /// last finite state.
    pub diverged: bool,
}

/// Minibatch SGD on (input, target) rows. Divergence is reported through
/// [`TrainOutcome::diverged`] rather than as an error.
pub fn train_sgd(
    net: &DenseNetwork,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    cfg: &SgdConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.nrows() == 0 {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if inputs.nrows() != targets.nrows() {
        return Err(Error::DimensionMismatch {
            expected: inputs.nrows(),
            got: targets.nrows(),
        });
    }
    if inputs.ncols() != net.input_size() || targets.ncols() != net.output_size() {
        return Err(Error::DimensionMismatch {
            expected: net.input_size() + net.output_size(),
            got: inputs.ncols() + targets.ncols(),
        });
    }
    let xs: Vec<Vec<f64>> = inputs.rows().into_iter().map(|r| r.to_vec()).collect();
    let ys: Vec<Vec<f64>> = targets.rows().into_iter().map(|r| r.to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut current = net.clone();
    let mut velocity = Gradients::zeros_like(net);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut next = current.clone();
        let mut diverged = false;
        for batch in order.chunks(cfg.minibatch_size) {
            let mut acc = Gradients::zeros_like(&next);
            for &i in batch {
                match next.backprop_mse(&xs[i], &ys[i]) {
                    Ok(bp) => acc.accumulate(&bp.gradients),
                    Err(Error::Divergence { .. }) => {
                        diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if !diverged {
                acc.scale(1.0 / batch.len() as f64);
                diverged = next
                    .apply_step(&acc, cfg.learning_rate, cfg.l2_penalty, cfg.momentum, &mut velocity)
                    .is_err();
            }
            if diverged {
                break;
            }
        }
        let epoch_mse = if diverged {
            f64::NAN
        } else {
            match next.mse(inputs, targets) {
                Ok(v) => v,
                Err(Error::Divergence { .. }) => f64::NAN,
                Err(e) => return Err(e),
            }
        };
        if !epoch_mse.is_finite() {
            return Ok(TrainOutcome {
                network: current,
                mse_trace: trace,
                diverged: true,
            });
        }
        trace.push(epoch_mse);
        current = next;
    }

    Ok(TrainOutcome {
        network: current,
        mse_trace: trace,
        diverged: false,
    })
}

/// Online gradient descent step: predict first, then take one full-gradient
/// step toward `target`. Returns the pre-update prediction.
pub fn ogd_step(net: &mut DenseNetwork, input: &[f64], target: &[f64], cfg: &OgdConfig) -> Result<Vec<f64>> {
    let prediction = net.predict(input)?;
    ogd_update(net, input, target, cfg)?;
    Ok(prediction)
}

/// The update half of [`ogd_step`], for callers that predict and learn from
/// different rows (delayed targets).
pub fn ogd_update(net: &mut DenseNetwork, input: &[f64], target: &[f64], cfg: &OgdConfig) -> Result<()> {
    let bp = net.backprop_mse(input, target)?;
    let mut velocity = Gradients::zeros_like(net);
    net.apply_step(&bp.gradients, cfg.learning_rate, 0.0, 0.0, &mut velocity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn single_linear(w: f64, b: f64) -> DenseNetwork {
        DenseNetwork::from_parts(vec![1, 1], vec![Activation::Linear], vec![vec![w]], vec![vec![b]]).unwrap()
    }

    #[test]
    fn bound_examples() {
        assert_relative_eq!(he_adjusted_bound(4, 2), 1.414214, epsilon = 1e-6);
        for n in [3usize, 10, 64] {
            assert_relative_eq!(he_adjusted_bound(n, n), (6.0 / n as f64).sqrt(), epsilon = 1e-15);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let acts = [Activation::Relu, Activation::Linear];
        let a = he_adjusted_init(&[30, 15, 5], &acts, 7).unwrap();
        let b = he_adjusted_init(&[30, 15, 5], &acts, 7).unwrap();
        let c = he_adjusted_init(&[30, 15, 5], &acts, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let r = he_adjusted_bound(30, 15);
        assert!(a.weights(0).iter().all(|w| w.abs() < r));
        assert!(a.biases(0).iter().chain(a.biases(1)).all(|&b| b == 0.0));
    }

    #[test]
    fn forward_trivial_cases() {
        let zero = DenseNetwork::zeros(vec![3, 2], vec![Activation::Linear]).unwrap();
        assert_eq!(zero.predict(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let identity = DenseNetwork::from_parts(
            vec![3, 3],
            vec![Activation::Linear],
            vec![vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]],
            vec![vec![0.0; 3]],
        )
        .unwrap();
        assert_eq!(identity.predict(&[0.3, -1.5, 2.0]).unwrap(), vec![0.3, -1.5, 2.0]);

        assert!(matches!(zero.predict(&[1.0]), Err(Error::DimensionMismatch { expected: 3, got: 1 })));
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let net = he_adjusted_init(&[3, 4, 2], &[Activation::Sigmoid, Activation::Relu], 3).unwrap();
        let x = [0.2, -0.7, 1.1];
        // hand-rolled: h_j = σ(b_j + Σ_i x_i w_ij), y_k = relu(c_k + Σ_j h_j v_jk)
        let (w, v) = (net.weights(0), net.weights(1));
        let mut h = [0.0; 4];
        for j in 0..4 {
            let z = net.biases(0)[j] + x[0] * w[j] + x[1] * w[4 + j] + x[2] * w[8 + j];
            h[j] = 1.0 / (1.0 + (-z).exp());
        }
        let y = net.predict(&x).unwrap();
        for k in 0..2 {
            let z = net.biases(1)[k] + (0..4).map(|j| h[j] * v[j * 2 + k]).sum::<f64>();
            assert!((y[k] - z.max(0.0)).abs() < 1e-12);
        }
        let sig = he_adjusted_init(&[2, 3], &[Activation::Sigmoid], 1).unwrap();
        assert!(sig.predict(&[5.0, -3.0]).unwrap().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn backprop_closed_forms() {
        let net = single_linear(1.0, 0.0);
        let bp = net.backprop_mse(&[1.0], &[0.0]).unwrap();
        assert_eq!(bp.loss, 1.0);
        assert_eq!(bp.gradients.weights[0], vec![2.0]);
        assert_eq!(bp.gradients.biases[0], vec![2.0]);

        let net = he_adjusted_init(&[3, 5, 2], &[Activation::Sigmoid, Activation::Linear], 2).unwrap();
        let y = net.predict(&[0.1, 0.2, 0.3]).unwrap();
        let bp = net.backprop_mse(&[0.1, 0.2, 0.3], &y).unwrap();
        assert!(bp.gradients.flatten().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let acts = [Activation::Sigmoid, Activation::Relu, Activation::Linear];
        let net = he_adjusted_init(&[4, 6, 5, 3], &acts, 11).unwrap();
        let x = [0.3, -0.2, 0.9, 0.05];
        let t = [0.1, 0.5, -0.3];
        let analytic = net.backprop_mse(&x, &t).unwrap().gradients.flatten();
        let h = 1e-5;
        let loss = |n: &DenseNetwork| n.backprop_mse(&x, &t).unwrap().loss;
        for (k, &g) in analytic.iter().enumerate() {
            let mut plus = net.clone();
            *plus.parameters_mut().nth(k).unwrap() += h;
            let mut minus = net.clone();
            *minus.parameters_mut().nth(k).unwrap() -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {k}: analytic {g} vs fd {fd}");
        }
    }

    #[test]
    fn divergence_carries_layer() {
        let net = DenseNetwork::from_parts(
            vec![1, 1, 1],
            vec![Activation::Linear, Activation::Linear],
            vec![vec![1e308], vec![1e308]],
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap();
        assert!(matches!(net.backprop_mse(&[10.0], &[0.0]), Err(Error::Divergence { layer: 0 })));
    }

    fn line_data(n: usize) -> (Array2<f64>, Array2<f64>) {
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 / n as f64);
        let y = x.mapv(|v| 2.0 * v - 0.5);
        (x, y)
    }

    #[test]
    fn zero_epochs_leave_network_unchanged() {
        let (x, y) = line_data(20);
        let net = single_linear(0.3, 0.1);
        let cfg = SgdConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train_sgd(&net, x.view(), y.view(), &cfg).unwrap();
        assert_eq!(out.network, net);
        assert!(out.mse_trace.is_empty());
    }

    #[test]
    fn linear_regression_trace_is_monotone() {
        let (x, y) = line_data(50);
        let net = single_linear(0.0, 0.0);
        let cfg = SgdConfig {
            learning_rate: 0.05,
            epochs: 60,
            minibatch_size: 50,
            shuffle: false,
            ..Default::default()
        };
        let out = train_sgd(&net, x.view(), y.view(), &cfg).unwrap();
        assert!(!out.diverged);
        for w in out.mse_trace.windows(2) {
            assert!(w[1] <= w[0], "{:?}", w);
        }
        assert!(out.mse_trace.last().unwrap() < &out.mse_trace[0]);
    }

    #[test]
    fn sgd_is_deterministic_for_a_seed() {
        let (x, y) = line_data(40);
        let net = he_adjusted_init(&[1, 8, 1], &[Activation::Relu, Activation::Linear], 5).unwrap();
        let cfg = SgdConfig {
            learning_rate: 0.05,
            epochs: 10,
            minibatch_size: 4,
            momentum: 0.5,
            l2_penalty: 1e-4,
            rng_seed: 99,
            shuffle: true,
        };
        let a = train_sgd(&net, x.view(), y.view(), &cfg).unwrap();
        let b = train_sgd(&net, x.view(), y.view(), &cfg).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.mse_trace, b.mse_trace);
    }

    #[test]
    fn exploding_training_is_flagged() {
        let (x, y) = line_data(10);
        let x = x.mapv(|v| v * 1e6);
        let net = single_linear(1.0, 0.0);
        let cfg = SgdConfig {
            learning_rate: 10.0,
            epochs: 50,
            minibatch_size: 1,
            ..Default::default()
        };
        let out = train_sgd(&net, x.view(), y.view(), &cfg).unwrap();
        assert!(out.diverged);
        assert!(out.network.parameters().all(|p| p.is_finite()));
    }

    #[test]
    fn ogd_step_closed_form() {
        let mut net = single_linear(1.0, 0.0);
        let pred = ogd_step(&mut net, &[1.0], &[0.0], &OgdConfig { learning_rate: 0.1 }).unwrap();
        assert_eq!(pred, vec![1.0]);
        assert_eq!(net.weights(0)[0], 1.0 - 0.1 * 2.0);
        assert_eq!(net.biases(0)[0], 0.0 - 0.1 * 2.0);
    }

    #[test]
    fn ogd_tiny_rate_is_prediction_only() {
        let mut net = he_adjusted_init(&[2, 3, 1], &[Activation::Relu, Activation::Linear], 4).unwrap();
        let before = net.clone();
        let pred = ogd_step(&mut net, &[0.5, 0.2], &[1.0], &OgdConfig { learning_rate: 1e-300 }).unwrap();
        assert_eq!(pred, before.predict(&[0.5, 0.2]).unwrap());
        let drift = net.parameters().zip(before.parameters()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-250);
    }

    #[test]
    fn ogd_prediction_ignores_target() {
        let net = he_adjusted_init(&[2, 3, 2], &[Activation::Sigmoid, Activation::Linear], 4).unwrap();
        let cfg = OgdConfig { learning_rate: 0.5 };
        let p1 = ogd_step(&mut net.clone(), &[0.1, 0.9], &[0.0, 0.0], &cfg).unwrap();
        let p2 = ogd_step(&mut net.clone(), &[0.1, 0.9], &[100.0, -5.0], &cfg).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn ogd_sequence_equals_single_epoch_unshuffled_sgd() {
        let net = he_adjusted_init(&[3, 4, 2], &[Activation::Sigmoid, Activation::Linear], 21).unwrap();
        let x = Array2::from_shape_fn((25, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let y = Array2::from_shape_fn((25, 2), |(i, j)| ((i + j) as f64 * 0.11).cos());
        let lr = 0.07;
        let mut online = net.clone();
        for (xi, yi) in x.rows().into_iter().zip(y.rows()) {
            ogd_step(&mut online, &xi.to_vec(), &yi.to_vec(), &OgdConfig { learning_rate: lr }).unwrap();
        }
        let cfg = SgdConfig {
            learning_rate: lr,
            epochs: 1,
            minibatch_size: 1,
            shuffle: false,
            ..Default::default()
        };
        let batch = train_sgd(&net, x.view(), y.view(), &cfg).unwrap();
        assert_eq!(online, batch.network);
    }

    #[test]
    fn activation_parse() {
        assert_eq!("ReLU".parse::<Activation>().unwrap(), Activation::Relu);
        assert!("tanh".parse::<Activation>().is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..8) {
            let net = he_adjusted_init(&[3, hidden, 2], &[Activation::Relu, Activation::Sigmoid], seed).unwrap();
            let json = serde_json::to_string(&net).unwrap();
            let back: DenseNetwork = serde_json::from_str(&json).unwrap();
            let bits = |n: &DenseNetwork| n.parameters().map(|p| p.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&net), bits(&back));
            prop_assert_eq!(net, back);
        }
    }

    #[test]
    fn malformed_json_rejected() {
        let bad = r#"{"layer_sizes":[2,1],"activations":["linear"],"weights":[[1.0]],"biases":[[0.0]]}"#;
        assert!(serde_json::from_str::<DenseNetwork>(bad).is_err());
    }
}
