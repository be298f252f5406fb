//! Small convolutional classifier whose penultimate activations serve as the
//! feature map `h(x)` for the nearest-neighbor baseline and as the frozen
//! input to Matching Networks.
//!
//! Architecture: conv3×3(16) → ReLU → maxpool → conv3×3(32) → ReLU → maxpool
//! → dense(feature_dim) → ReLU → dense(n_classes). Features are the ReLU
//! output that feeds the final (softmax) layer.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::diffcore::{
    decode_params, encode_params, glorot_uniform, Graph, NodeId, Optimizer, OptimizerKind, ParamId, ParamStore,
    Tensor,
};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::seed::SeedKey;
use crate::stimgen::LabeledDataset;

/// Images per forward pass when evaluating.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedderConfig {
    pub image_size: usize,
    pub feature_dim: usize,
    pub channels: (usize, usize),
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            feature_dim: 64,
            channels: (16, 32),
            steps: 2000,
            batch_size: 32,
            optimizer: OptimizerKind::RmsProp { decay: 0.9, eps: 1e-8 },
            learning_rate: 1e-3,
            checkpoint_interval: 200,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::contract(msg.to_string())) };
        c(self.feature_dim > 0, "feature_dim must be positive")?;
        c(self.channels.0 > 0 && self.channels.1 > 0, "conv channels must be positive")?;
        c(self.image_size >= 16 && self.image_size % 4 == 0, "image size must be >= 16 and divisible by 4")?;
        c(self.batch_size > 0, "batch size must be positive")?;
        c(self.checkpoint_interval > 0, "checkpoint interval must be positive")?;
        c(
            self.steps % self.checkpoint_interval == 0,
            "checkpoint interval must divide the step count",
        )?;
        Optimizer::new(self.optimizer, self.learning_rate).map(|_| ())
    }

    /// Number of checkpoints `train_embedder` emits, including step 0.
    pub fn n_checkpoints(&self) -> usize {
        self.steps / self.checkpoint_interval + 1
    }
}

/// Handles to the network's weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layers {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

const LAYER_NAMES: [&str; 8] = [
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b",
];

/// Trained (or freshly initialized) embedder weights at one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderCheckpoint {
    pub step: usize,
    pub train_accuracy: f64,
    pub train_loss: f64,
    params: ParamStore,
    layers: Layers,
    image_size: usize,
}

fn lookup_layers(params: &ParamStore) -> Result<Layers> {
    let id = |name: &str| params.require(name);
    Ok(Layers {
        conv1_w: id(LAYER_NAMES[0])?,
        conv1_b: id(LAYER_NAMES[1])?,
        conv2_w: id(LAYER_NAMES[2])?,
        conv2_b: id(LAYER_NAMES[3])?,
        fc1_w: id(LAYER_NAMES[4])?,
        fc1_b: id(LAYER_NAMES[5])?,
        fc2_w: id(LAYER_NAMES[6])?,
        fc2_b: id(LAYER_NAMES[7])?,
    })
}

fn init_params(config: &EmbedderConfig, n_classes: usize) -> Result<ParamStore> {
    let mut rng = SeedKey::new(config.seed).child("embedder-init").rng();
    let (c1, c2) = config.channels;
    let flat = c2 * (config.image_size / 4) * (config.image_size / 4);
    let f = config.feature_dim;
    let mut p = ParamStore::new();
    p.add("conv1.w", glorot_uniform(&mut rng, vec![c1, 3, 3, 3], 27, c1 * 9))?;
    p.add("conv1.b", Tensor::zeros(vec![c1]))?;
    p.add("conv2.w", glorot_uniform(&mut rng, vec![c2, c1, 3, 3], c1 * 9, c2 * 9))?;
    p.add("conv2.b", Tensor::zeros(vec![c2]))?;
    p.add("fc1.w", glorot_uniform(&mut rng, vec![flat, f], flat, f))?;
    p.add("fc1.b", Tensor::zeros(vec![f]))?;
    p.add("fc2.w", glorot_uniform(&mut rng, vec![f, n_classes], f, n_classes))?;
    p.add("fc2.b", Tensor::zeros(vec![n_classes]))?;
    Ok(p)
}

struct Forward {
    features: NodeId,
    logits: NodeId,
}

impl EmbedderCheckpoint {
    fn from_params(step: usize, params: ParamStore, train_accuracy: f64, train_loss: f64) -> Result<Self> {
        let layers = lookup_layers(&params)?;
        let w1 = params.get(layers.conv1_w).shape();
        let w2 = params.get(layers.conv2_w).shape();
        let fc1 = params.get(layers.fc1_w).shape();
        let fc2 = params.get(layers.fc2_w).shape();
        let bad = || Error::Decode("embedder weights have inconsistent shapes".into());
        if w1.len() != 4 || w1[1] != 3 || w2.len() != 4 || w2[1] != w1[0] || fc1.len() != 2 || fc2.len() != 2 {
            return Err(bad());
        }
        if fc1[1] != fc2[0] || fc1[0] % w2[0] != 0 {
            return Err(bad());
        }
        let cells = fc1[0] / w2[0];
        let side = (cells as f64).sqrt().round() as usize;
        if side * side != cells {
            return Err(bad());
        }
        Ok(Self {
            step,
            train_accuracy,
            train_loss,
            params,
            layers,
            image_size: side * 4,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn feature_dim(&self) -> usize {
        self.params.get(self.layers.fc1_w).shape()[1]
    }

    pub fn n_classes(&self) -> usize {
        self.params.get(self.layers.fc2_w).shape()[1]
    }

    /// Final-layer weights `[feature_dim, n_classes]` and bias.
    pub fn softmax_layer(&self) -> (&Tensor, &Tensor) {
        (self.params.get(self.layers.fc2_w), self.params.get(self.layers.fc2_b))
    }

    fn forward(&self, g: &mut Graph, batch: Tensor) -> Result<Forward> {
        let n = batch.shape()[0];
        let p = &self.params;
        let l = &self.layers;
        let x = g.input(batch)?;
        let w1 = g.param(p, l.conv1_w)?;
        let b1 = g.param(p, l.conv1_b)?;
        let y = g.conv2d(x, w1, b1)?;
        let y = g.relu(y)?;
        let y = g.max_pool2(y)?;
        let w2 = g.param(p, l.conv2_w)?;
        let b2 = g.param(p, l.conv2_b)?;
        let y = g.conv2d(y, w2, b2)?;
        let y = g.relu(y)?;
        let y = g.max_pool2(y)?;
        let flat = g.value(y).numel() / n;
        let y = g.reshape(y, vec![n, flat])?;
        let fw1 = g.param(p, l.fc1_w)?;
        let fb1 = g.param(p, l.fc1_b)?;
        let y = g.affine(y, fw1, Some(fb1))?;
        let features = g.relu(y)?;
        let fw2 = g.param(p, l.fc2_w)?;
        let fb2 = g.param(p, l.fc2_b)?;
        let logits = g.affine(features, fw2, Some(fb2))?;
        Ok(Forward { features, logits })
    }

    fn batch_tensor(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let s = self.image_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.width() != s || img.height() != s {
                return Err(Error::contract(format!(
                    "embedder expects {s}x{s} images, got {}x{}",
                    img.width(),
                    img.height()
                )));
            }
            data.extend(img.to_chw());
        }
        Tensor::new(vec![images.len(), 3, s, s], data)
    }

    /// Features and logits for a set of images, one row per image.
    pub fn features_and_logits(&self, images: &[&RgbImage]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut feats = Vec::with_capacity(images.len());
        let mut logits = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, self.batch_tensor(chunk)?)?;
            let fd = self.feature_dim();
            let k = self.n_classes();
            feats.extend(g.value(fwd.features).data().chunks(fd).map(<[f64]>::to_vec));
            logits.extend(g.value(fwd.logits).data().chunks(k).map(<[f64]>::to_vec));
        }
        Ok((feats, logits))
    }

    /// Feature vectors `h(x)` for many images.
    pub fn embed_batch(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        Ok(self.features_and_logits(images)?.0)
    }

    /// Serialize with step and training metrics stored as extra scalars.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut store = self.params.clone();
        store.add("meta.step", Tensor::scalar(self.step as f64))?;
        store.add("meta.train_accuracy", Tensor::scalar(self.train_accuracy))?;
        store.add("meta.train_loss", Tensor::scalar(self.train_loss))?;
        Ok(encode_params(&store))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let all = decode_params(bytes)?;
        let meta = |name: &str| -> Result<f64> { all.get(all.require(name)?).item() };
        let step = meta("meta.step")?;
        let acc = meta("meta.train_accuracy")?;
        let loss = meta("meta.train_loss")?;
        let mut params = ParamStore::new();
        for name in LAYER_NAMES {
            params.add(name, all.get(all.require(name)?).clone())?;
        }
        Self::from_params(step as usize, params, acc, loss)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Feature vector of one image: the activations feeding the softmax layer.
pub fn embed(checkpoint: &EmbedderCheckpoint, image: &RgbImage) -> Result<Vec<f64>> {
    Ok(checkpoint.embed_batch(&[image])?.remove(0))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy and mean cross-entropy over a dataset.
pub fn evaluate(checkpoint: &EmbedderCheckpoint, dataset: &LabeledDataset) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    if dataset.n_classes != checkpoint.n_classes() {
        return Err(Error::contract(format!(
            "dataset has {} classes but the classifier has {}",
            dataset.n_classes,
            checkpoint.n_classes()
        )));
    }
    let images: Vec<&RgbImage> = dataset.items.iter().map(|it| &it.stimulus.image).collect();
    let (_, logits) = checkpoint.features_and_logits(&images)?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (row, item) in logits.iter().zip(&dataset.items) {
        if argmax(row) == item.label {
            correct += 1;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[item.label];
    }
    let n = dataset.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

pub fn classify_accuracy(checkpoint: &EmbedderCheckpoint, dataset: &LabeledDataset) -> Result<f64> {
    Ok(evaluate(checkpoint, dataset)?.0)
}

/// Progress callback arguments: step, minibatch loss.
pub type StepLog<'a> = &'a mut dyn FnMut(usize, f64);

/// Supervised cross-entropy training with seeded epoch shuffling.
///
/// Returns checkpoints at step 0 and after every `checkpoint_interval`
/// steps; each carries accuracy and mean loss over the training set.
pub fn train_embedder(dataset: &LabeledDataset, config: &EmbedderConfig) -> Result<Vec<EmbedderCheckpoint>> {
    train_embedder_with_log(dataset, config, &mut |_, _| {})
}

pub fn train_embedder_with_log(
    dataset: &LabeledDataset,
    config: &EmbedderConfig,
    log: StepLog<'_>,
) -> Result<Vec<EmbedderCheckpoint>> {
    config.validate()?;
    if dataset.is_empty() || dataset.n_classes < 2 {
        return Err(Error::contract("training needs a nonempty dataset with at least 2 classes"));
    }
    let params = init_params(config, dataset.n_classes)?;
    let mut model = EmbedderCheckpoint::from_params(0, params, 0.0, 0.0)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate)?;
    let mut shuffle_rng = SeedKey::new(config.seed).child("embedder-shuffle").rng();

    let snapshot = |model: &EmbedderCheckpoint, step: usize| -> Result<EmbedderCheckpoint> {
        let (acc, loss) = evaluate(model, dataset)?;
        let mut ck = model.clone();
        ck.step = step;
        ck.train_accuracy = acc;
        ck.train_loss = loss;
        Ok(ck)
    };

    let mut checkpoints = vec![snapshot(&model, 0)?];
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let images: Vec<&RgbImage> = batch.iter().map(|&i| &dataset.items[i].stimulus.image).collect();
        let targets: Vec<usize> = batch.iter().map(|&i| dataset.items[i].label).collect();
        let diverged = |e: Error| Error::Training {
            step,
            detail: e.to_string(),
        };

        let mut g = Graph::new();
        let fwd = model.forward(&mut g, model.batch_tensor(&images)?).map_err(diverged)?;
        let loss = g.softmax_cross_entropy(fwd.logits, &targets).map_err(diverged)?;
        let loss_value = g.value(loss).item()?;
        let grads = g.backward(loss).map_err(diverged)?;
        optimizer.step(&mut model.params, &grads)?;
        log(step, loss_value);

        if step % config.checkpoint_interval == 0 {
            let ck = snapshot(&model, step).map_err(|e| match e {
                Error::Numeric(m) => Error::Training { step, detail: m },
                other => other,
            })?;
            checkpoints.push(ck);
        }
    }
    Ok(checkpoints)
}
