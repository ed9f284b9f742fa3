//! Local road-state models and their federated aggregation.
//!
//! Each vehicle trains a small multilayer perceptron that maps one-hot
//! encoded accident context (location, day, hour, light, weather, surface)
//! to a severity class distribution. The provider averages the local
//! weights into a global model, weighting by shard size.

mod data;

pub use data::{encode_records, partition_data, PartitionMode};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::{Error, Result};

/// Severity classes predicted by the output layer.
pub const NUM_CLASSES: usize = 3;

/// Fully connected network with tanh hidden layers and a softmax output.
/// Each weight matrix has one extra input row that multiplies a constant 1,
/// folding the bias into the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    weights: Vec<Array2<f64>>,
}

impl MlpModel {
    /// `layer_sizes` lists unit counts from input to output, e.g.
    /// `[feature_dim, 128, 64, 3]`. Weights start uniform in the Glorot
    /// range, biases at zero.
    pub fn new(layer_sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidInput("need at least input and output layers".into()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidInput("layer sizes must be positive".into()));
        }
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut m = Array2::zeros((fan_in + 1, fan_out));
            for row in 0..fan_in {
                for col in 0..fan_out {
                    m[(row, col)] = rng.random_range(-scale..scale);
                }
            }
            weights.push(m);
        }
        Ok(MlpModel { weights })
    }

    pub fn from_weights(weights: Vec<Array2<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("model needs at least one layer".into()));
        }
        for pair in weights.windows(2) {
            if pair[0].ncols() + 1 != pair[1].nrows() {
                return Err(Error::InvalidInput("layer shapes do not chain".into()));
            }
        }
        Ok(MlpModel { weights })
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.weights[0].nrows() - 1];
        sizes.extend(self.weights.iter().map(|w| w.ncols()));
        sizes
    }

    pub fn feature_dim(&self) -> usize {
        self.weights[0].nrows() - 1
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.weights.iter().map(|w| Array2::zeros(w.dim())).collect()
    }
}

fn with_bias(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::ones((x.nrows(), x.ncols() + 1));
    out.slice_mut(ndarray::s![.., ..x.ncols()]).assign(x);
    out
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Class probabilities for each input row.
pub fn forward(model: &MlpModel, x: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(forward_trace(model, x)?.pop().unwrap())
}

/// Activations after every layer (hidden tanh outputs, then softmax).
fn forward_trace(model: &MlpModel, x: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
    if x.ncols() != model.feature_dim() {
        return Err(Error::InvalidInput(format!(
            "input has {} features, model expects {}",
            x.ncols(),
            model.feature_dim()
        )));
    }
    let last = model.weights.len() - 1;
    let mut acts = Vec::with_capacity(last + 1);
    let mut a = x.clone();
    for (l, w) in model.weights.iter().enumerate() {
        let mut z = with_bias(&a).dot(w);
        if l == last {
            softmax_rows(&mut z);
        } else {
            z.mapv_inplace(f64::tanh);
        }
        a = z.clone();
        acts.push(z);
    }
    Ok(acts)
}

/// Mean squared error between predicted class probabilities and one-hot
/// targets, averaged over samples (not over classes).
pub fn loss(model: &MlpModel, x: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    let probs = forward(model, x)?;
    if probs.dim() != targets.dim() {
        return Err(Error::InvalidInput("targets shape differs from model output".into()));
    }
    let n = x.nrows().max(1) as f64;
    Ok((&probs - targets).mapv(|d| d * d).sum() / n)
}

/// Loss and its exact gradient with respect to every weight matrix.
pub fn loss_and_gradient(
    model: &MlpModel,
    x: &Array2<f64>,
    targets: &Array2<f64>,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let acts = forward_trace(model, x)?;
    let probs = acts.last().unwrap();
    if probs.dim() != targets.dim() {
        return Err(Error::InvalidInput("targets shape differs from model output".into()));
    }
    let n = x.nrows().max(1) as f64;
    let loss = (probs - targets).mapv(|d| d * d).sum() / n;

    let mut grads = model.zeros_like();
    // Softmax backward: for each row p with upstream dL/dp, the logit
    // gradient is p .* (dL/dp - <dL/dp, p>).
    let dp = (probs - targets) * (2.0 / n);
    let mut delta = Array2::zeros(probs.dim());
    for (i, (p_row, dp_row)) in probs.rows().into_iter().zip(dp.rows()).enumerate() {
        let inner: f64 = p_row.iter().zip(dp_row.iter()).map(|(p, d)| p * d).sum();
        for (j, (&p, &d)) in p_row.iter().zip(dp_row.iter()).enumerate() {
            delta[(i, j)] = p * (d - inner);
        }
    }

    for l in (0..model.weights.len()).rev() {
        let input = if l == 0 { x } else { &acts[l - 1] };
        grads[l] = with_bias(input).t().dot(&delta);
        if l > 0 {
            // Propagate through the weights (dropping the bias row) and
            // the tanh derivative 1 - a^2.
            let w_nobias = model.weights[l].slice(ndarray::s![..-1, ..]);
            delta = delta.dot(&w_nobias.t()) * &acts[l - 1].mapv(|a| 1.0 - a * a);
        }
    }
    Ok((loss, grads))
}

/// Fraction of rows whose predicted class matches the one-hot target.
pub fn accuracy(model: &MlpModel, x: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("accuracy needs at least one sample".into()));
    }
    let probs = forward(model, x)?;
    let hits = probs
        .rows()
        .into_iter()
        .zip(targets.rows())
        .filter(|(p, t)| argmax(p) == argmax(t))
        .count();
    Ok(hits as f64 / x.nrows() as f64)
}

fn argmax(row: &ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub kappa0: f64,
    pub beta_p: f64,
    pub beta_q: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { kappa0: 0.01, beta_p: 0.9, beta_q: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment accumulators, one per weight matrix.
#[derive(Debug, Clone)]
pub struct AdamState {
    p: Vec<Array2<f64>>,
    q: Vec<Array2<f64>>,
    step: usize,
}

impl AdamState {
    pub fn new(model: &MlpModel) -> Self {
        AdamState { p: model.zeros_like(), q: model.zeros_like(), step: 0 }
    }
}

/// One update: exponential moment averages, then a step with the rate
/// rescaled by sqrt(1 - beta_q^(t+1)) / (1 - beta_p^(t+1)) so the raw
/// (uncorrected) moments can be applied directly.
pub fn adam_step(
    model: &mut MlpModel,
    grads: &[Array2<f64>],
    state: &mut AdamState,
    params: &AdamParams,
) -> Result<()> {
    if grads.len() != model.weights.len() {
        return Err(Error::InvalidInput("gradient count differs from layer count".into()));
    }
    let t = state.step as i32;
    let rate = params.kappa0 * (1.0 - params.beta_q.powi(t + 1)).sqrt()
        / (1.0 - params.beta_p.powi(t + 1));
    for (l, grad) in grads.iter().enumerate() {
        if grad.dim() != model.weights[l].dim() {
            return Err(Error::InvalidInput("gradient shape differs from weights".into()));
        }
        state.p[l].zip_mut_with(grad, |p, g| *p = params.beta_p * *p + (1.0 - params.beta_p) * g);
        state.q[l]
            .zip_mut_with(grad, |q, g| *q = params.beta_q * *q + (1.0 - params.beta_q) * g * g);
        let p = &state.p[l];
        let q = &state.q[l];
        let w = &mut model.weights[l];
        for ((w, p), q) in w.iter_mut().zip(p.iter()).zip(q.iter()) {
            *w -= rate * p / (q.sqrt() + params.epsilon);
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// Number of optimizer steps to run; every step consumes one batch.
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { steps: 10, batch_size: 64, adam: AdamParams::default() }
    }
}

/// Runs exactly `opts.steps` Adam updates on mini-batches drawn from a
/// shuffled sample order (reshuffled once the epoch is exhausted) and
/// returns the full-shard loss after training.
pub fn local_train(
    model: &mut MlpModel,
    x: &Array2<f64>,
    targets: &Array2<f64>,
    opts: &TrainOptions,
    rng: &mut impl Rng,
) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("cannot train on an empty shard".into()));
    }
    if x.nrows() != targets.nrows() {
        return Err(Error::InvalidInput("sample and target counts differ".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let n = x.nrows();
    let batch = opts.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force a shuffle before the first batch
    let mut state = AdamState::new(model);
    for _ in 0..opts.steps {
        if cursor + batch > n {
            shuffle(&mut order, rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let bx = take_rows(x, idx);
        let bt = take_rows(targets, idx);
        let (_, grads) = loss_and_gradient(model, &bx, &bt)?;
        adam_step(model, &grads, &mut state, &opts.adam)?;
    }
    loss(model, x, targets)
}

fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
}

/// Copies the given rows into a new matrix, in index order.
pub(crate) fn take_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (row, &i) in idx.iter().enumerate() {
        out.row_mut(row).assign(&m.row(i));
    }
    out
}

/// Shard-size weighted average of the local weights.
pub fn fed_avg(models: &[MlpModel], data_sizes: &[f64]) -> Result<MlpModel> {
    if models.is_empty() {
        return Err(Error::InvalidInput("cannot average zero models".into()));
    }
    if models.len() != data_sizes.len() {
        return Err(Error::InvalidInput("model and weight counts differ".into()));
    }
    let total: f64 = data_sizes.iter().sum();
    if data_sizes.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
        return Err(Error::InvalidInput("aggregation weights must be non-negative with positive sum".into()));
    }
    let sizes = models[0].layer_sizes();
    if models.iter().any(|m| m.layer_sizes() != sizes) {
        return Err(Error::InvalidInput("cannot average models with different layouts".into()));
    }
    let mut weights = models[0].zeros_like();
    for (model, &w) in models.iter().zip(data_sizes) {
        let share = w / total;
        for (acc, layer) in weights.iter_mut().zip(&model.weights) {
            acc.zip_mut_with(layer, |a, v| *a += share * v);
        }
    }
    Ok(MlpModel { weights })
}

/// Mean of the per-shard losses of `model`; the convergence signal the
/// round loop watches.
pub fn global_loss(model: &MlpModel, shards: &[(Array2<f64>, Array2<f64>)]) -> Result<f64> {
    if shards.is_empty() {
        return Err(Error::InvalidInput("global loss needs at least one shard".into()));
    }
    let mut total = 0.0;
    for (x, g) in shards {
        total += loss(model, x, g)?;
    }
    Ok(total / shards.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct StoredLayer {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Writes the model as JSON (layer shapes plus row-major weights).
pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    let stored: Vec<StoredLayer> = model
        .weights
        .iter()
        .map(|w| StoredLayer {
            rows: w.nrows(),
            cols: w.ncols(),
            data: w.iter().cloned().collect(),
        })
        .collect();
    let text = serde_json::to_string(&stored)
        .map_err(|e| Error::Numeric(format!("model serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stored: Vec<StoredLayer> = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad model file {}: {e}", path.display())))?;
    let mut weights = Vec::with_capacity(stored.len());
    for layer in stored {
        let w = Array2::from_shape_vec((layer.rows, layer.cols), layer.data)
            .map_err(|e| Error::Config(format!("bad layer shape in {}: {e}", path.display())))?;
        weights.push(w);
    }
    MlpModel::from_weights(weights)
}

/// Sum of absolute differences across all weights; used by tests to assert
/// byte-level reproducibility.
pub fn weight_distance(a: &MlpModel, b: &MlpModel) -> f64 {
    a.weights
        .iter()
        .zip(&b.weights)
        .map(|(x, y)| (x - y).mapv(f64::abs).sum())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(rng: &mut ChaCha8Rng) -> MlpModel {
        MlpModel::new(&[4, 2, 3], rng).unwrap()
    }

    fn tiny_batch(rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
        let n = 6;
        let mut x = Array2::zeros((n, 4));
        let mut g = Array2::zeros((n, 3));
        for i in 0..n {
            for j in 0..4 {
                x[(i, j)] = rng.random_range(-1.0..1.0);
            }
            g[(i, rng.random_range(0..3))] = 1.0;
        }
        (x, g)
    }

    #[test]
    fn probabilities_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = tiny_model(&mut rng);
        let (x, _) = tiny_batch(&mut rng);
        let probs = forward(&model, &x).unwrap();
        for row in probs.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = tiny_model(&mut rng);
        let (x, g) = tiny_batch(&mut rng);
        let (_, grads) = loss_and_gradient(&model, &x, &g).unwrap();
        let h = 1e-5;
        for l in 0..model.weights().len() {
            for idx in 0..model.weights()[l].len() {
                let (r, c) = (idx / model.weights()[l].ncols(), idx % model.weights()[l].ncols());
                let mut plus = model.clone();
                plus.weights[l][(r, c)] += h;
                let mut minus = model.clone();
                minus.weights[l][(r, c)] -= h;
                let fd =
                    (loss(&plus, &x, &g).unwrap() - loss(&minus, &x, &g).unwrap()) / (2.0 * h);
                let exact = grads[l][(r, c)];
                let denom = exact.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((exact - fd) / denom).abs() < 1e-4,
                    "layer {l} entry ({r},{c}): exact {exact}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn first_adam_step_matches_hand_computed_value() {
        // One layer, one weight, gradient fixed at 1: the first update is
        // -kappa0 * 0.1 * sqrt(0.001) / (0.1 * (sqrt(0.001) + eps)).
        let mut model =
            MlpModel::from_weights(vec![Array2::zeros((1, 1))]).unwrap();
        let mut state = AdamState::new(&model);
        let grads = vec![array![[1.0]]];
        adam_step(&mut model, &grads, &mut state, &AdamParams::default()).unwrap();
        assert_abs_diff_eq!(
            model.weights()[0][(0, 0)],
            -0.0099999968377233398,
            epsilon = 1e-9
        );
    }

    #[test]
    fn averaging_one_model_is_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = tiny_model(&mut rng);
        let avg = fed_avg(std::slice::from_ref(&model), &[17.0]).unwrap();
        assert!(weight_distance(&model, &avg) < 1e-12);
    }

    #[test]
    fn training_reduces_loss_on_a_learnable_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // class = index of the largest input coordinate: separable enough
        // for a small network
        let n = 120;
        let mut x = Array2::zeros((n, 3));
        let mut g = Array2::zeros((n, 3));
        for i in 0..n {
            let mut best = 0;
            for j in 0..3 {
                x[(i, j)] = rng.random_range(-1.0..1.0);
                if x[(i, j)] > x[(i, best)] {
                    best = j;
                }
            }
            g[(i, best)] = 1.0;
        }
        let mut model = MlpModel::new(&[3, 16, 3], &mut rng).unwrap();
        let before = loss(&model, &x, &g).unwrap();
        let opts = TrainOptions { steps: 200, batch_size: 32, adam: AdamParams::default() };
        let after = local_train(&mut model, &x, &g, &opts, &mut rng).unwrap();
        assert!(after < before * 0.7, "loss went {before} -> {after}");
        assert!(accuracy(&model, &x, &g).unwrap() > 0.7);
    }

    #[test]
    fn save_and_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = tiny_model(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn rejects_mismatched_feature_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = tiny_model(&mut rng);
        let x = Array2::zeros((2, 5));
        assert!(forward(&model, &x).is_err());
    }

    proptest::proptest! {
        #[test]
        fn averaging_is_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let models: Vec<MlpModel> =
                (0..3).map(|_| MlpModel::new(&[3, 4, 3], &mut rng).unwrap()).collect();
            let w = [1.0, 2.5, 0.5];
            let a = fed_avg(&models, &w).unwrap();
            let reordered = vec![models[2].clone(), models[0].clone(), models[1].clone()];
            let b = fed_avg(&reordered, &[w[2], w[0], w[1]]).unwrap();
            proptest::prop_assert!(weight_distance(&a, &b) < 1e-9);
        }
    }
}
