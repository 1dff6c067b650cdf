//! Synthetic federated workloads: data generation, local training and global
//! evaluation for small convex models.
//!
//! Parameters are laid out per output row as `[w_0, .., w_{d-1}, bias]`.
//! Regression and binary tasks have one row, multiclass has one per class.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClientUpdate, GlobalModel};
use crate::rng::{substream, Purpose};

/// Fraction of each client's sample budget added on top as a held-out split.
pub const HOLDOUT_FRACTION: f64 = 0.25;

const MAX_REJECTION_DRAWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    LinearRegression,
    LogisticBinary,
    LogisticMulticlass,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::LinearRegression => "linear-regression",
            Task::LogisticBinary => "logistic-binary",
            Task::LogisticMulticlass => "logistic-multiclass",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "linear-regression" => Ok(Task::LinearRegression),
            "logistic-binary" => Ok(Task::LogisticBinary),
            "logistic-multiclass" => Ok(Task::LogisticMulticlass),
            other => Err(format!(
                "unknown task `{other}` (expected linear-regression, logistic-binary or logistic-multiclass)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SamplesPerClient {
    Uniform(u64),
    PerClient(Vec<u64>),
}

impl SamplesPerClient {
    fn for_client(&self, client: usize) -> u64 {
        match self {
            SamplesPerClient::Uniform(n) => *n,
            SamplesPerClient::PerClient(v) => v[client],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub task: Task,
    /// Number of input features.
    pub dim: usize,
    /// Ignored for regression.
    pub classes: usize,
    pub samples_per_client: SamplesPerClient,
    /// 0 draws every client from one distribution; 1 gives fully disjoint
    /// label shards (multiclass) or unrelated labelling functions.
    pub heterogeneity: f64,
    pub local_epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub noise_std: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            task: Task::LogisticMulticlass,
            dim: 50,
            classes: 4,
            samples_per_client: SamplesPerClient::Uniform(200),
            heterogeneity: 0.5,
            local_epochs: 1,
            learning_rate: 0.1,
            batch_size: 20,
            noise_std: 0.5,
        }
    }
}

impl WorkloadSpec {
    /// Length of the parameter vector for this task.
    pub fn param_dim(&self) -> usize {
        self.output_rows() * (self.dim + 1)
    }

    fn output_rows(&self) -> usize {
        match self.task {
            Task::LogisticMulticlass => self.classes,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        let min_samples = match &self.samples_per_client {
            SamplesPerClient::Uniform(n) => *n,
            SamplesPerClient::PerClient(v) => v.iter().copied().min().unwrap_or(0),
        };
        if min_samples == 0 {
            return Err(Error::config("samples_per_client", "every client needs at least one sample"));
        }
        if self.task != Task::LinearRegression {
            if self.classes < 2 {
                return Err(Error::config("classes", "must be at least 2"));
            }
            if self.task == Task::LogisticBinary && self.classes != 2 {
                return Err(Error::config("classes", "logistic-binary requires exactly 2 classes"));
            }
            if self.classes as u64 > min_samples {
                return Err(Error::config("classes", "more classes than samples per client"));
            }
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::config("heterogeneity", "must lie in [0, 1]"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a finite value >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be a finite value >= 0"));
        }
        Ok(())
    }
}

/// Row-major feature matrix with one target per row. Classification targets
/// hold the class index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    dim: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl Samples {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], y: f64) {
        debug_assert_eq!(x.len(), self.dim);
        self.features.extend_from_slice(x);
        self.targets.push(y);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn slice(&self, start: usize, end: usize) -> Samples {
        Samples {
            dim: self.dim,
            features: self.features[start * self.dim..end * self.dim].to_vec(),
            targets: self.targets[start..end].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: u32,
    pub train: Samples,
    pub held_out: Samples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub clients: Vec<ClientDataset>,
    /// Shared labelling parameters in model layout.
    pub ground_truth: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            scale * z
        })
        .collect()
}

fn affine(row: &[f64], x: &[f64]) -> f64 {
    let (w, b) = row.split_at(x.len());
    w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[0]
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Classes a client favours under label skew: contiguous blocks when there
/// are at least as many classes as clients, otherwise one shared class.
pub fn label_shard(client: usize, n_clients: usize, classes: usize) -> Vec<usize> {
    let shard: Vec<usize> = (0..classes).filter(|c| c * n_clients / classes == client).collect();
    if shard.is_empty() {
        vec![client * classes / n_clients]
    } else {
        shard
    }
}

/// Draws a deterministic federation of `n_clients` datasets.
pub fn generate_federation(spec: &WorkloadSpec, seed: u64, n_clients: usize) -> Result<Federation> {
    spec.validate()?;
    if n_clients == 0 {
        return Err(Error::config("n_clients", "must be positive"));
    }
    if let SamplesPerClient::PerClient(v) = &spec.samples_per_client {
        if v.len() != n_clients {
            return Err(Error::config(
                "samples_per_client",
                format!("expected {n_clients} entries, got {}", v.len()),
            ));
        }
    }

    let d = spec.dim;
    let rows = spec.output_rows();
    let weight_scale = 1.0 / (d as f64).sqrt();
    let mut gt_rng = substream(seed, Purpose::GroundTruth, 0, 0);
    let mut ground_truth = Vec::with_capacity(spec.param_dim());
    for _ in 0..rows {
        ground_truth.extend(normal_vec(&mut gt_rng, d, weight_scale));
        let bias = match spec.task {
            Task::LinearRegression => {
                let z: f64 = StandardNormal.sample(&mut gt_rng);
                0.5 * z
            }
            _ => 0.0,
        };
        ground_truth.push(bias);
    }

    let h = spec.heterogeneity;
    let mut clients = Vec::with_capacity(n_clients);
    for client in 0..n_clients {
        // Parameter skew (regression, binary): blend the shared labelling
        // function with a client-private one.
        let labeller = match spec.task {
            Task::LogisticMulticlass => ground_truth.clone(),
            _ => {
                let mut skew_rng = substream(seed, Purpose::ClientSkew, client as u64, 0);
                let private = normal_vec(&mut skew_rng, d, weight_scale);
                let mut row = ground_truth.clone();
                for (w, p) in row.iter_mut().zip(&private) {
                    *w = (1.0 - h) * *w + h * p;
                }
                row
            }
        };
        let shard = label_shard(client, n_clients, spec.classes);

        let n_train = spec.samples_per_client.for_client(client) as usize;
        let n_held = ((n_train as f64 * HOLDOUT_FRACTION).ceil() as usize).max(1);
        let mut rng = substream(seed, Purpose::ClientData, client as u64, 0);
        let mut all = Samples::new(d);
        for _ in 0..n_train + n_held {
            let (x, y) = match spec.task {
                Task::LinearRegression => {
                    let x = normal_vec(&mut rng, d, 1.0);
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let y = affine(&labeller, &x) + spec.noise_std * noise;
                    (x, y)
                }
                Task::LogisticBinary => {
                    let x = normal_vec(&mut rng, d, 1.0);
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let y = if affine(&labeller, &x) + spec.noise_std * noise > 0.0 { 1.0 } else { 0.0 };
                    (x, y)
                }
                Task::LogisticMulticlass => draw_multiclass(&mut rng, spec, &labeller, &shard, h)?,
            };
            all.push(&x, y);
        }
        clients.push(ClientDataset {
            client_id: client as u32,
            train: all.slice(0, n_train),
            held_out: all.slice(n_train, n_train + n_held),
        });
    }

    Ok(Federation { clients, ground_truth })
}

// With probability `h` the label is pinned to the client's shard, otherwise
// it is uniform over all classes; features are then rejection-sampled so the
// labelling function agrees with the chosen class.
fn draw_multiclass(
    rng: &mut ChaCha8Rng,
    spec: &WorkloadSpec,
    labeller: &[f64],
    shard: &[usize],
    h: f64,
) -> Result<(Vec<f64>, f64)> {
    let classes = spec.classes;
    let want = if rng.random::<f64>() < h {
        shard[rng.random_range(0..shard.len())]
    } else {
        rng.random_range(0..classes)
    };
    let stride = spec.dim + 1;
    let mut logits = vec![0.0; classes];
    for _ in 0..MAX_REJECTION_DRAWS {
        let x = normal_vec(rng, spec.dim, 1.0);
        for (c, z) in logits.iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut *rng);
            *z = affine(&labeller[c * stride..(c + 1) * stride], &x) + spec.noise_std * noise;
        }
        if argmax(&logits) == want {
            return Ok((x, want as f64));
        }
    }
    Err(Error::config("classes", format!("class {want} is unreachable under the labelling function")))
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-sample loss, accumulating `scale * ∂loss/∂params` into `grad` when given.
fn sample_loss(task: Task, params: &[f64], x: &[f64], y: f64, grad: Option<(&mut [f64], f64)>) -> f64 {
    let stride = x.len() + 1;
    let add_row = |g: &mut [f64], row: usize, coeff: f64| {
        let g = &mut g[row * stride..(row + 1) * stride];
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi += coeff * xi;
        }
        g[stride - 1] += coeff;
    };
    match task {
        Task::LinearRegression => {
            let r = affine(params, x) - y;
            if let Some((g, scale)) = grad {
                add_row(g, 0, scale * 2.0 * r);
            }
            r * r
        }
        Task::LogisticBinary => {
            let z = affine(params, x);
            if let Some((g, scale)) = grad {
                add_row(g, 0, scale * (sigmoid(z) - y));
            }
            softplus(z) - y * z
        }
        Task::LogisticMulticlass => {
            let classes = params.len() / stride;
            let logits: Vec<f64> = (0..classes)
                .map(|c| affine(&params[c * stride..(c + 1) * stride], x))
                .collect();
            let lse = log_sum_exp(&logits);
            let label = y as usize;
            if let Some((g, scale)) = grad {
                for (c, z) in logits.iter().enumerate() {
                    let target = if c == label { 1.0 } else { 0.0 };
                    add_row(g, c, scale * ((z - lse).exp() - target));
                }
            }
            lse - logits[label]
        }
    }
}

/// Mean training loss over `samples`.
pub fn loss(task: Task, params: &[f64], samples: &Samples) -> f64 {
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    (0..n)
        .map(|i| sample_loss(task, params, samples.row(i), samples.target(i), None))
        .sum::<f64>()
        / n as f64
}

/// Mean loss and its analytic gradient over rows `range` of `samples`.
pub fn loss_and_gradient(
    task: Task,
    params: &[f64],
    samples: &Samples,
    range: std::ops::Range<usize>,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let n = range.len();
    if n == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for i in range {
        total += sample_loss(task, params, samples.row(i), samples.target(i), Some((&mut grad, scale)));
    }
    (total / n as f64, grad)
}

fn predict_hit(spec: &WorkloadSpec, params: &[f64], x: &[f64], y: f64) -> bool {
    match spec.task {
        Task::LinearRegression => (affine(params, x) - y).abs() <= spec.noise_std,
        Task::LogisticBinary => (affine(params, x) >= 0.0) == (y == 1.0),
        Task::LogisticMulticlass => {
            let stride = x.len() + 1;
            let logits: Vec<f64> = params.chunks(stride).map(|row| affine(row, x)).collect();
            argmax(&logits) == y as usize
        }
    }
}

/// Fraction of `samples` predicted correctly. Regression counts predictions
/// within `noise_std` of the target.
pub fn accuracy(spec: &WorkloadSpec, params: &[f64], samples: &Samples) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = (0..samples.len())
        .filter(|&i| predict_hit(spec, params, samples.row(i), samples.target(i)))
        .count();
    hits as f64 / samples.len() as f64
}

fn check_dim(spec: &WorkloadSpec, model: &GlobalModel) -> Result<()> {
    if model.dim() != spec.param_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.param_dim(),
            actual: model.dim(),
        });
    }
    Ok(())
}

/// Runs `local_epochs` of in-order mini-batch gradient descent from the
/// global parameters and packages the resulting delta.
pub fn local_train(dataset: &ClientDataset, model: &GlobalModel, spec: &WorkloadSpec) -> Result<ClientUpdate> {
    check_dim(spec, model)?;
    let diverged = || Error::Divergence {
        client: dataset.client_id,
        round: model.round(),
    };
    let n = dataset.train.len();
    let mut params = model.params().to_vec();
    for _ in 0..spec.local_epochs {
        let mut start = 0;
        while start < n {
            let end = (start + spec.batch_size).min(n);
            let (batch_loss, grad) = loss_and_gradient(spec.task, &params, &dataset.train, start..end);
            if !batch_loss.is_finite() {
                return Err(diverged());
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= spec.learning_rate * g;
            }
            start = end;
        }
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(diverged());
    }
    let delta: Vec<f64> = params.iter().zip(model.params()).map(|(l, g)| l - g).collect();
    let reported_accuracy = accuracy(spec, &params, &dataset.held_out);
    ClientUpdate::new(dataset.client_id, model, delta, n as u64, reported_accuracy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Unweighted mean of per-client held-out accuracy.
    pub accuracy: f64,
    /// Held-out loss averaged over all samples.
    pub loss: f64,
}

pub fn evaluate_global(model: &GlobalModel, federation: &Federation, spec: &WorkloadSpec) -> Result<Evaluation> {
    check_dim(spec, model)?;
    let clients = &federation.clients;
    if clients.is_empty() {
        return Ok(Evaluation { accuracy: 0.0, loss: 0.0 });
    }
    let mut acc_sum = 0.0;
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for c in clients {
        acc_sum += accuracy(spec, model.params(), &c.held_out);
        loss_sum += loss(spec.task, model.params(), &c.held_out) * c.held_out.len() as f64;
        count += c.held_out.len();
    }
    Ok(Evaluation {
        accuracy: acc_sum / clients.len() as f64,
        loss: loss_sum / count as f64,
    })
}
