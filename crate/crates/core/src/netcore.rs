//! From-scratch multilayer perceptron: sigmoid hidden layers, inverted
//! dropout, softmax cross-entropy, mini-batch SGD, gradient checking and
//! location decoding.
//!
//! A model owns a trunk of hidden layers plus a registry of named output
//! heads, so the same machinery serves single-task, transfer and
//! multitask training. Training is single-writer; a trained model is
//! immutable and safe for concurrent inference.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Grid, Position};
use crate::rng;
use crate::{Error, Result};

pub const DEFAULT_HEAD: &str = "default";

/// Hyperparameters. Defaults follow the reference architecture: three
/// sigmoid hidden layers, learning rate 0.005, batch size 40, 10%
/// dropout, 500 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input, hidden..., output widths. The final entry is the width of
    /// the default head.
    pub layer_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Reshuffle the training data each epoch. Disabling makes batch
    /// order fully determine the outcome.
    pub shuffle: bool,
    /// Standardize inputs with per-feature mean/std computed at the start
    /// of training. Raw dBm magnitudes saturate sigmoid units otherwise.
    pub normalize_input: bool,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        let config = Self {
            layer_sizes,
            learning_rate: 0.005,
            batch_size: 40,
            dropout_rate: 0.10,
            epochs: 500,
            seed,
            shuffle: true,
            normalize_input: true,
        };
        config.validate()?;
        Ok(config)
    }

    /// The reference urban architecture with input width `m` and output
    /// width `k`: three hidden layers of 256, 128 and 64 units.
    pub fn reference(m: usize, k: usize, seed: u64) -> Self {
        Self::new(vec![m, 256, 128, 64, k], seed).expect("reference architecture is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::InvalidConfig(format!(
                "need input, at least one hidden and output layer, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn hidden_sizes(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }
}

/// A dense layer; weights are row-major `[in_dim][out_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn glorot(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            biases: vec![0.0; out_dim],
        }
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.in_dim);
        out.clear();
        out.extend_from_slice(&self.biases);
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, &w) in row.iter().enumerate() {
                out[o] += w * x;
            }
        }
    }
}

/// Per-feature standardization applied before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Argmax,
    CenterOfMass,
}

impl std::str::FromStr for DecodeStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(DecodeStrategy::Argmax),
            "center_of_mass" | "com" => Ok(DecodeStrategy::CenterOfMass),
            other => Err(Error::InvalidArgument(format!(
                "unknown decode strategy '{other}' (expected argmax|center_of_mass)"
            ))),
        }
    }
}

/// The multilayer perceptron with named output heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub config: MlpConfig,
    trunk: Vec<Layer>,
    heads: BTreeMap<String, Layer>,
    /// Trainable flags, one per trunk layer.
    trainable: Vec<bool>,
    input_norm: Option<InputNorm>,
    /// Feature mode of the data the model was trained on.
    feature_mode: Option<crate::features::FeatureMode>,
}

/// Per-epoch mean training loss.
pub type TrainingLog = Vec<f64>;

/// Activation cache from one forward pass.
pub struct ForwardCache {
    input: Vec<f64>,
    /// Pre-dropout sigmoid activations per hidden layer.
    sigmoids: Vec<Vec<f64>>,
    /// Post-dropout activations (inputs to the next layer).
    activations: Vec<Vec<f64>>,
    /// Dropout scale per hidden unit: mask / (1 - p), or 1.0 in eval mode.
    dropout_scale: Vec<Vec<f64>>,
    pub probabilities: Vec<f64>,
}

impl MlpModel {
    /// Initializes a model with Glorot-uniform weights and zero biases
    /// from the config's seed; registers the default head.
    pub fn init(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(config.seed);
        let mut trunk = Vec::new();
        let mut prev = config.input_width();
        for &h in config.hidden_sizes() {
            trunk.push(Layer::glorot(prev, h, &mut r));
            prev = h;
        }
        let head = Layer::glorot(prev, config.output_width(), &mut r);
        let mut heads = BTreeMap::new();
        heads.insert(DEFAULT_HEAD.to_string(), head);
        let trainable = vec![true; trunk.len()];
        Ok(Self {
            config,
            trunk,
            heads,
            trainable,
            input_norm: None,
            feature_mode: None,
        })
    }

    pub fn input_width(&self) -> usize {
        self.trunk[0].in_dim
    }

    pub fn last_hidden_width(&self) -> usize {
        self.trunk.last().unwrap().out_dim
    }

    pub fn head_names(&self) -> Vec<&str> {
        self.heads.keys().map(String::as_str).collect()
    }

    pub fn head(&self, name: &str) -> Result<&Layer> {
        self.heads.get(name).ok_or_else(|| Error::UnknownHead {
            requested: name.to_string(),
            available: self.head_names().join(", "),
        })
    }

    pub fn trunk(&self) -> &[Layer] {
        &self.trunk
    }

    pub fn input_norm(&self) -> Option<&InputNorm> {
        self.input_norm.as_ref()
    }

    /// Feature mode of the training data, once trained.
    pub fn feature_mode(&self) -> Option<crate::features::FeatureMode> {
        self.feature_mode
    }

    /// Registers a fresh head of width `k`, initialized from the model
    /// seed mixed with the head name.
    pub fn register_head(&mut self, name: &str, k: usize) {
        self.register_head_with_seed(name, k, rng::mix(self.config.seed, &[rng::hash_str(name)]));
    }

    /// Registers a fresh head from an explicit seed, so callers can give
    /// several heads an identical initialization.
    pub fn register_head_with_seed(&mut self, name: &str, k: usize, seed: u64) {
        let mut r = rng::seeded(seed);
        let layer = Layer::glorot(self.last_hidden_width(), k, &mut r);
        self.heads.insert(name.to_string(), layer);
    }

    /// Registers `name` as a copy of an existing head.
    pub fn copy_head(&mut self, from: &str, name: &str) -> Result<()> {
        let layer = self.head(from)?.clone();
        self.heads.insert(name.to_string(), layer);
        Ok(())
    }

    /// Sets the trainable flag of every trunk layer.
    pub fn set_trunk_trainable(&mut self, trainable: bool) {
        for t in &mut self.trainable {
            *t = trainable;
        }
    }

    pub fn set_layer_trainable(&mut self, layer: usize, trainable: bool) {
        self.trainable[layer] = trainable;
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    fn normalized(&self, x: &[f64]) -> Vec<f64> {
        match &self.input_norm {
            Some(norm) => x
                .iter()
                .zip(norm.shift.iter().zip(&norm.scale))
                .map(|(&v, (&s, &sc))| (v - s) / sc)
                .collect(),
            None => x.to_vec(),
        }
    }

    /// Fits per-feature standardization from the given vectors. Called at
    /// the start of training when `config.normalize_input` is set and no
    /// normalization is present yet.
    fn fit_input_norm<'a>(&mut self, vectors: impl Iterator<Item = &'a [f64]>) {
        let width = self.input_width();
        let mut n = 0usize;
        let mut mean = vec![0.0; width];
        let mut m2 = vec![0.0; width];
        for v in vectors {
            n += 1;
            for (i, &x) in v.iter().enumerate() {
                let d = x - mean[i];
                mean[i] += d / n as f64;
                m2[i] += d * (x - mean[i]);
            }
        }
        if n == 0 {
            return;
        }
        let scale = m2
            .iter()
            .map(|&s| {
                let std = (s / n as f64).sqrt();
                if std < 1e-6 {
                    1.0
                } else {
                    std
                }
            })
            .collect();
        self.input_norm = Some(InputNorm { shift: mean, scale });
    }

    /// Forward pass through the trunk and the named head. In train mode,
    /// inverted dropout is applied to hidden activations using `dropout`.
    pub fn forward(
        &self,
        x: &[f64],
        head: &str,
        dropout: Option<&mut DropoutSource>,
    ) -> Result<ForwardCache> {
        if x.len() != self.input_width() {
            return Err(Error::InvalidArgument(format!(
                "input width {} does not match model input {}",
                x.len(),
                self.input_width()
            )));
        }
        let head_layer = self.head(head)?;
        let input = self.normalized(x);

        let mut sigmoids = Vec::with_capacity(self.trunk.len());
        let mut activations = Vec::with_capacity(self.trunk.len());
        let mut dropout_scale = Vec::with_capacity(self.trunk.len());
        let mut current = input.clone();
        let mut dropout = dropout;
        for layer in &self.trunk {
            let mut z = Vec::new();
            layer.affine(&current, &mut z);
            let s: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
            let scale: Vec<f64> = match dropout.as_deref_mut() {
                Some(src) => s.iter().map(|_| src.draw_scale()).collect(),
                None => vec![1.0; s.len()],
            };
            let a: Vec<f64> = s.iter().zip(&scale).map(|(&v, &sc)| v * sc).collect();
            sigmoids.push(s);
            dropout_scale.push(scale);
            current = a.clone();
            activations.push(a);
        }

        let mut logits = Vec::new();
        head_layer.affine(&current, &mut logits);
        let probabilities = softmax(&logits);
        Ok(ForwardCache {
            input,
            sigmoids,
            activations,
            dropout_scale,
            probabilities,
        })
    }

    /// Eval-mode class probabilities.
    pub fn predict(&self, x: &[f64], head: &str) -> Result<Vec<f64>> {
        Ok(self.forward(x, head, None)?.probabilities)
    }

    /// Decodes a location from the head's probability distribution over
    /// the grid's cell centers.
    pub fn predict_location(
        &self,
        x: &[f64],
        head: &str,
        grid: &Grid,
        strategy: DecodeStrategy,
    ) -> Result<Position> {
        let probs = self.predict(x, head)?;
        if probs.len() != grid.cell_count() {
            return Err(Error::InvalidArgument(format!(
                "head width {} does not match grid K {}",
                probs.len(),
                grid.cell_count()
            )));
        }
        decode_location(&probs, grid, strategy)
    }

    /// Trains the named head (and trainable trunk layers) on `data` with
    /// the config's epochs, rate and dropout. Returns per-epoch mean loss.
    pub fn train(&mut self, data: &Dataset, head: &str) -> Result<TrainingLog> {
        let options = TrainOptions::from_config(&self.config);
        self.train_tasks(&[(head, data)], &options)
    }

    /// Shared SGD loop over one or more (head, dataset) tasks with
    /// per-batch round-robin interleaving. An epoch ends when every
    /// task's data has been consumed fully once; shorter datasets recycle
    /// via reshuffle.
    pub fn train_tasks(
        &mut self,
        tasks: &[(&str, &Dataset)],
        options: &TrainOptions,
    ) -> Result<TrainingLog> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("no training tasks given".into()));
        }
        for (head, data) in tasks {
            self.head(head)?;
            if data.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "empty dataset for head '{head}'"
                )));
            }
            if data.feature_len() != self.input_width() {
                return Err(Error::InvalidArgument(format!(
                    "dataset feature width {} does not match model input {}",
                    data.feature_len(),
                    self.input_width()
                )));
            }
            let k = self.head(head)?.out_dim;
            if let Some(s) = data.samples.iter().find(|s| s.label >= k) {
                return Err(Error::InvalidArgument(format!(
                    "label {} out of range for head '{head}' (K = {k})",
                    s.label
                )));
            }
        }

        if self.feature_mode.is_none() {
            self.feature_mode = tasks[0].1.samples.first().map(|s| s.features.mode);
        }
        if self.config.normalize_input && self.input_norm.is_none() {
            self.fit_input_norm(
                tasks
                    .iter()
                    .flat_map(|(_, d)| d.samples.iter().map(|s| s.features.values.as_slice())),
            );
        }

        let mut r = rng::seeded(rng::mix(options.seed, &[0x7261_696e]));
        let mut log = Vec::with_capacity(options.epochs);

        for epoch in 0..options.epochs {
            // every task draws its epoch permutation from the same
            // (seed, epoch) stream, so tasks of equal length see
            // identical batch orders
            let shuffle_seed = rng::mix(options.seed, &[0x7368, epoch as u64]);
            let mut queues: Vec<TaskQueue> = tasks
                .iter()
                .map(|(_, d)| TaskQueue::new(d.len(), self.config.shuffle, shuffle_seed))
                .collect();
            let mut loss_sum = 0.0;
            let mut loss_count = 0usize;
            while queues.iter().any(|q| !q.consumed) {
                for (t, (head, data)) in tasks.iter().enumerate() {
                    if queues.iter().all(|q| q.consumed) {
                        break;
                    }
                    let batch = queues[t].next_batch(options.batch_size, self.config.shuffle);
                    let (sum, n) = self.sgd_step(data, head, &batch, options, &mut r)?;
                    loss_sum += sum;
                    loss_count += n;
                }
            }
            log.push(loss_sum / loss_count.max(1) as f64);
        }
        Ok(log)
    }

    /// One mini-batch update on the given sample indices. Returns the
    /// summed loss and sample count.
    fn sgd_step(
        &mut self,
        data: &Dataset,
        head: &str,
        batch: &[usize],
        options: &TrainOptions,
        r: &mut ChaCha8Rng,
    ) -> Result<(f64, usize)> {
        let mut grads = GradientSet::zeros(self, head)?;
        let mut loss_sum = 0.0;
        for &idx in batch {
            let sample = &data.samples[idx];
            let mut dropout_src = options.dropout_rate.map(|p| DropoutSource::new(p, r));
            let cache = self.forward(&sample.features.values, head, dropout_src.as_mut())?;
            loss_sum += cross_entropy(&cache.probabilities, sample.label);
            self.accumulate_gradients(&cache, head, sample.label, &mut grads)?;
        }
        let scale = options.learning_rate / batch.len() as f64;
        self.apply_gradients(&grads, head, scale, options.head_trainable);
        Ok((loss_sum, batch.len()))
    }

    /// Backprop for one sample; adds parameter gradients into `grads`.
    fn accumulate_gradients(
        &self,
        cache: &ForwardCache,
        head: &str,
        label: usize,
        grads: &mut GradientSet,
    ) -> Result<()> {
        let head_layer = self.head(head)?;
        let last = cache.activations.last().expect("at least one hidden layer");

        // d loss / d logits for softmax cross-entropy
        let mut delta: Vec<f64> = cache.probabilities.clone();
        delta[label] -= 1.0;

        accumulate_layer(&mut grads.head, last, &delta);
        let mut d_act = backprop_delta(head_layer, &delta);

        for l in (0..self.trunk.len()).rev() {
            let s = &cache.sigmoids[l];
            let scale = &cache.dropout_scale[l];
            let dz: Vec<f64> = d_act
                .iter()
                .zip(s.iter().zip(scale))
                .map(|(&da, (&sv, &sc))| da * sc * sv * (1.0 - sv))
                .collect();
            let below: &[f64] = if l == 0 {
                &cache.input
            } else {
                &cache.activations[l - 1]
            };
            accumulate_layer(&mut grads.trunk[l], below, &dz);
            if l > 0 {
                d_act = backprop_delta(&self.trunk[l], &dz);
            }
        }
        Ok(())
    }

    fn apply_gradients(
        &mut self,
        grads: &GradientSet,
        head: &str,
        scale: f64,
        head_trainable: bool,
    ) {
        for (l, layer) in self.trunk.iter_mut().enumerate() {
            if !self.trainable[l] {
                continue;
            }
            for (w, g) in layer.weights.iter_mut().zip(&grads.trunk[l].weights) {
                *w -= scale * g;
            }
            for (b, g) in layer.biases.iter_mut().zip(&grads.trunk[l].biases) {
                *b -= scale * g;
            }
        }
        if head_trainable {
            let layer = self.heads.get_mut(head).expect("head checked earlier");
            for (w, g) in layer.weights.iter_mut().zip(&grads.head.weights) {
                *w -= scale * g;
            }
            for (b, g) in layer.biases.iter_mut().zip(&grads.head.biases) {
                *b -= scale * g;
            }
        }
    }

    /// Compares analytic gradients to central finite differences (step
    /// 1e-5) over a random sample of at least 100 parameters. Dropout is
    /// disabled. Returns the max relative error.
    pub fn gradient_check(
        &mut self,
        x: &[f64],
        label: usize,
        head: &str,
        seed: u64,
    ) -> Result<f64> {
        let cache = self.forward(x, head, None)?;
        let mut grads = GradientSet::zeros(self, head)?;
        self.accumulate_gradients(&cache, head, label, &mut grads)?;

        let total = self.parameter_count(head)?;
        let draws = total.min(150);
        let mut r = rng::seeded(seed);
        let step = 1e-5;
        let mut max_rel = 0.0f64;
        for _ in 0..draws {
            let p = r.random_range(0..total);
            let analytic = grads.param(p, self);
            let original = self.get_param(p, head)?;
            self.set_param(p, head, original + step)?;
            let plus = cross_entropy(&self.predict(x, head)?, label);
            self.set_param(p, head, original - step)?;
            let minus = cross_entropy(&self.predict(x, head)?, label);
            self.set_param(p, head, original)?;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        Ok(max_rel)
    }

    /// Total parameter count of trunk plus the named head.
    pub fn parameter_count(&self, head: &str) -> Result<usize> {
        let head_layer = self.head(head)?;
        let trunk: usize = self
            .trunk
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum();
        Ok(trunk + head_layer.weights.len() + head_layer.biases.len())
    }

    fn get_param(&self, index: usize, head: &str) -> Result<f64> {
        let mut i = index;
        for layer in &self.trunk {
            if i < layer.weights.len() {
                return Ok(layer.weights[i]);
            }
            i -= layer.weights.len();
            if i < layer.biases.len() {
                return Ok(layer.biases[i]);
            }
            i -= layer.biases.len();
        }
        let layer = self.head(head)?;
        if i < layer.weights.len() {
            return Ok(layer.weights[i]);
        }
        i -= layer.weights.len();
        Ok(layer.biases[i])
    }

    fn set_param(&mut self, index: usize, head: &str, value: f64) -> Result<()> {
        let mut i = index;
        for layer in &mut self.trunk {
            if i < layer.weights.len() {
                layer.weights[i] = value;
                return Ok(());
            }
            i -= layer.weights.len();
            if i < layer.biases.len() {
                layer.biases[i] = value;
                return Ok(());
            }
            i -= layer.biases.len();
        }
        let available = self.head_names().join(", ");
        let layer = self.heads.get_mut(head).ok_or(Error::UnknownHead {
            requested: head.to_string(),
            available,
        })?;
        if i < layer.weights.len() {
            layer.weights[i] = value;
        } else {
            let i = i - layer.weights.len();
            layer.biases[i] = value;
        }
        Ok(())
    }

    /// Writes the model as versioned JSON. Round-trips reproduce
    /// inference bitwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            model: self.clone(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        Ok(file.model)
    }
}

const MODEL_FORMAT: &str = "hetloc-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: MlpModel,
}

/// Options for one training run; defaults mirror the model config.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// `None` disables dropout entirely.
    pub dropout_rate: Option<f64>,
    pub head_trainable: bool,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(config: &MlpConfig) -> Self {
        Self {
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            dropout_rate: (config.dropout_rate > 0.0).then_some(config.dropout_rate),
            head_trainable: true,
            seed: config.seed,
        }
    }
}

/// Supplies inverted-dropout scales during a training forward pass.
pub struct DropoutSource {
    rate: f64,
    rng: ChaCha8Rng,
}

impl DropoutSource {
    fn new(rate: f64, parent: &mut ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: rng::seeded(parent.random()),
        }
    }

    fn draw_scale(&mut self) -> f64 {
        if self.rng.random::<f64>() < self.rate {
            0.0
        } else {
            1.0 / (1.0 - self.rate)
        }
    }
}

struct TaskQueue {
    order: Vec<usize>,
    pos: usize,
    consumed: bool,
    rng: ChaCha8Rng,
}

impl TaskQueue {
    fn new(len: usize, shuffle: bool, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let mut order: Vec<usize> = (0..len).collect();
        if shuffle {
            rng::shuffle(&mut rng, &mut order);
        }
        Self {
            order,
            pos: 0,
            consumed: false,
            rng,
        }
    }

    fn next_batch(&mut self, batch_size: usize, shuffle: bool) -> Vec<usize> {
        if self.pos >= self.order.len() {
            // recycled draw for a shorter dataset while longer ones finish
            if shuffle {
                rng::shuffle(&mut self.rng, &mut self.order);
            }
            self.pos = 0;
        }
        let end = (self.pos + batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        if self.pos >= self.order.len() {
            self.consumed = true;
        }
        batch
    }
}

/// Parameter gradients for the trunk plus one head.
struct GradientSet {
    trunk: Vec<LayerGrad>,
    head: LayerGrad,
}

struct LayerGrad {
    weights: Vec<f64>,
    biases: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl LayerGrad {
    fn zeros(layer: &Layer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            biases: vec![0.0; layer.biases.len()],
            in_dim: layer.in_dim,
            out_dim: layer.out_dim,
        }
    }
}

impl GradientSet {
    fn zeros(model: &MlpModel, head: &str) -> Result<Self> {
        Ok(Self {
            trunk: model.trunk.iter().map(LayerGrad::zeros).collect(),
            head: LayerGrad::zeros(model.head(head)?),
        })
    }

    /// Gradient of the parameter at the same flat index `get_param` uses.
    fn param(&self, index: usize, _model: &MlpModel) -> f64 {
        let mut i = index;
        for g in &self.trunk {
            if i < g.weights.len() {
                return g.weights[i];
            }
            i -= g.weights.len();
            if i < g.biases.len() {
                return g.biases[i];
            }
            i -= g.biases.len();
        }
        if i < self.head.weights.len() {
            return self.head.weights[i];
        }
        i -= self.head.weights.len();
        self.head.biases[i]
    }
}

fn accumulate_layer(grad: &mut LayerGrad, input: &[f64], delta: &[f64]) {
    debug_assert_eq!(input.len(), grad.in_dim);
    debug_assert_eq!(delta.len(), grad.out_dim);
    for (i, &x) in input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &mut grad.weights[i * grad.out_dim..(i + 1) * grad.out_dim];
        for (o, &d) in delta.iter().enumerate() {
            row[o] += x * d;
        }
    }
    for (b, &d) in grad.biases.iter_mut().zip(delta) {
        *b += d;
    }
}

/// d loss / d input of a layer given d loss / d output.
fn backprop_delta(layer: &Layer, delta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layer.in_dim];
    for (i, o) in out.iter_mut().enumerate() {
        let row = &layer.weights[i * layer.out_dim..(i + 1) * layer.out_dim];
        *o = row.iter().zip(delta).map(|(&w, &d)| w * d).sum();
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically safe softmax (max-logit subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy with probability clamped at 1e-12.
pub fn cross_entropy(probabilities: &[f64], label: usize) -> f64 {
    -probabilities[label].max(1e-12).ln()
}

/// Decodes a location from a probability distribution over grid cells.
pub fn decode_location(probs: &[f64], grid: &Grid, strategy: DecodeStrategy) -> Result<Position> {
    match strategy {
        DecodeStrategy::Argmax => {
            // ties break toward the lowest index
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            grid.cell_center(best)
        }
        DecodeStrategy::CenterOfMass => {
            let mut x = 0.0;
            let mut y = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                let c = grid.cell_center(i)?;
                x += p * c.0;
                y += p * c.1;
            }
            Ok((x, y))
        }
    }
}
