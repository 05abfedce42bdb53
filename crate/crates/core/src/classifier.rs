//! Mean-pooled bag-of-embeddings classifier with one rectified hidden
//! layer. Forward pass, exact reverse-mode gradients with respect to the
//! input embeddings, supervised training and soft-label distillation.

#![allow(clippy::needless_range_loop)]

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::vocab::{embed_sequence, EmbeddingMatrix, Vocabulary};

pub const MODEL_MAGIC: &[u8; 7] = b"SEMCLF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelShape {
    pub const DEFAULT_DIM: usize = 64;
    pub const DEFAULT_HIDDEN: usize = 128;

    pub fn new(vocab_size: usize, classes: usize) -> Self {
        Self {
            vocab_size,
            dim: Self::DEFAULT_DIM,
            hidden: Self::DEFAULT_HIDDEN,
            classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(Error::ShapeMismatch(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 40,
            batch_size: 16,
            seed: 1111,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    shape: ModelShape,
    embeddings: EmbeddingMatrix,
    /// dim × hidden, row-major
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// hidden × classes, row-major
    w2: Vec<f64>,
    b2: Vec<f64>,
    seed: u64,
    vocab_fingerprint: u64,
}

/// Intermediates of one forward pass, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub positions: usize,
    pub pooled: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

impl ClassifierModel {
    /// Parameters drawn uniformly from ±scale/√fan_in; embedding rows use
    /// fan_in = 1.
    pub fn random(shape: ModelShape, vocab: &Vocabulary, init_scale: f64, seed: u64) -> Result<Self> {
        shape.validate()?;
        if shape.vocab_size != vocab.len() {
            return Err(Error::VocabMismatch(format!(
                "shape expects {} tokens, vocabulary has {}",
                shape.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = init_scale / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let emb = draw(shape.vocab_size * shape.dim, 1);
        let w1 = draw(shape.dim * shape.hidden, shape.dim);
        let b1 = draw(shape.hidden, shape.dim);
        let w2 = draw(shape.hidden * shape.classes, shape.hidden);
        let b2 = draw(shape.classes, shape.hidden);
        Ok(Self {
            shape,
            embeddings: EmbeddingMatrix::from_flat(shape.dim, emb)?,
            w1,
            b1,
            w2,
            b2,
            seed,
            vocab_fingerprint: vocab.fingerprint(),
        })
    }

    pub fn zeros(shape: ModelShape, vocab: &Vocabulary) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            embeddings: EmbeddingMatrix::zeros(shape.vocab_size, shape.dim),
            w1: vec![0.0; shape.dim * shape.hidden],
            b1: vec![0.0; shape.hidden],
            w2: vec![0.0; shape.hidden * shape.classes],
            b2: vec![0.0; shape.classes],
            seed: 0,
            vocab_fingerprint: vocab.fingerprint(),
        })
    }

    /// Assembles a model from explicit parameters. `w1` is dim × hidden and
    /// `w2` is hidden × classes, both row-major.
    pub fn from_parts(
        embeddings: EmbeddingMatrix,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
        vocab_fingerprint: u64,
    ) -> Result<Self> {
        let dim = embeddings.dim();
        let hidden = b1.len();
        let classes = b2.len();
        let shape = ModelShape {
            vocab_size: embeddings.rows(),
            dim,
            hidden,
            classes,
        };
        shape.validate()?;
        if w1.len() != dim * hidden || w2.len() != hidden * classes {
            return Err(Error::ShapeMismatch(format!(
                "w1 has {} values (want {}), w2 has {} (want {})",
                w1.len(),
                dim * hidden,
                w2.len(),
                hidden * classes
            )));
        }
        let model = Self {
            shape,
            embeddings,
            w1,
            b1,
            w2,
            b2,
            seed: 0,
            vocab_fingerprint,
        };
        model.check_finite()?;
        Ok(model)
    }

    fn check_finite(&self) -> Result<()> {
        let all = [&self.w1, &self.b1, &self.w2, &self.b2];
        if all.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("classifier parameters"));
        }
        Ok(())
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.shape.classes
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn vocab_fingerprint(&self) -> u64 {
        self.vocab_fingerprint
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.shape.vocab_size || vocab.fingerprint() != self.vocab_fingerprint {
            return Err(Error::VocabMismatch(format!(
                "model was built for a vocabulary of {} tokens with fingerprint {:016x}, got {} tokens with {:016x}",
                self.shape.vocab_size,
                self.vocab_fingerprint,
                vocab.len(),
                vocab.fingerprint()
            )));
        }
        Ok(())
    }

    fn head(&self, pooled: Vec<f64>, positions: usize) -> ForwardTrace {
        let ModelShape { dim, hidden, classes, .. } = self.shape;
        let mut pre = self.b1.clone();
        for k in 0..dim {
            let x = pooled[k];
            if x == 0.0 {
                continue;
            }
            let row = &self.w1[k * hidden..(k + 1) * hidden];
            for j in 0..hidden {
                pre[j] += x * row[j];
            }
        }
        let post: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
        let mut logits = self.b2.clone();
        for j in 0..hidden {
            let h = post[j];
            if h == 0.0 {
                continue;
            }
            let row = &self.w2[j * classes..(j + 1) * classes];
            for c in 0..classes {
                logits[c] += h * row[c];
            }
        }
        ForwardTrace {
            positions,
            pooled,
            pre_activation: pre,
            hidden: post,
            logits,
        }
    }

    fn pool<'a>(&self, rows: impl Iterator<Item = &'a [f64]>) -> Result<(Vec<f64>, usize)> {
        let dim = self.shape.dim;
        let mut sum = vec![0.0; dim];
        let mut n = 0;
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            for (s, x) in sum.iter_mut().zip(row) {
                *s += x;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let inv = n as f64;
        Ok((sum.into_iter().map(|s| s / inv).collect(), n))
    }

    pub fn forward_from_embeddings<V: AsRef<[f64]>>(&self, embs: &[V]) -> Result<(Vec<f64>, ForwardTrace)> {
        let (pooled, n) = self.pool(embs.iter().map(AsRef::as_ref))?;
        let trace = self.head(pooled, n);
        Ok((trace.logits.clone(), trace))
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        let embs = embed_sequence(ids, &self.embeddings)?;
        Ok(self.forward_from_embeddings(&embs)?.0)
    }

    pub fn predict(&self, ids: &[usize]) -> Result<usize> {
        Ok(argmax(&self.forward(ids)?))
    }

    fn backprop_to_pooled(&self, trace: &ForwardTrace, dlogits: &[f64]) -> Vec<f64> {
        let ModelShape { dim, hidden, classes, .. } = self.shape;
        let mut dpre = vec![0.0; hidden];
        for j in 0..hidden {
            if trace.pre_activation[j] <= 0.0 {
                continue;
            }
            let row = &self.w2[j * classes..(j + 1) * classes];
            dpre[j] = row.iter().zip(dlogits).map(|(w, d)| w * d).sum();
        }
        (0..dim)
            .map(|k| {
                let row = &self.w1[k * hidden..(k + 1) * hidden];
                row.iter().zip(&dpre).map(|(w, d)| w * d).sum()
            })
            .collect()
    }

    /// Gradient of `dlogits · logits` with respect to every input embedding.
    /// Mean pooling gives each position the same gradient.
    pub fn grad_wrt_embeddings(&self, trace: &ForwardTrace, dlogits: &[f64]) -> Result<Vec<Vec<f64>>> {
        if dlogits.len() != self.shape.classes {
            return Err(Error::ShapeMismatch(format!(
                "objective gradient has {} entries for {} classes",
                dlogits.len(),
                self.shape.classes
            )));
        }
        if trace.pooled.len() != self.shape.dim || trace.pre_activation.len() != self.shape.hidden {
            return Err(Error::ShapeMismatch("trace does not belong to this model".into()));
        }
        let n = trace.positions as f64;
        let per_position: Vec<f64> = self.backprop_to_pooled(trace, dlogits).into_iter().map(|g| g / n).collect();
        Ok(vec![per_position; trace.positions])
    }

    fn param_sizes(&self) -> [usize; 5] {
        [
            self.embeddings.as_slice().len(),
            self.w1.len(),
            self.b1.len(),
            self.w2.len(),
            self.b2.len(),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ModelShape {
            vocab_size,
            dim,
            hidden,
            classes,
        } = self.shape;
        let mut out = Vec::with_capacity(7 + 48 + 8 * self.param_sizes().iter().sum::<usize>());
        out.extend_from_slice(MODEL_MAGIC);
        for v in [vocab_size as u64, dim as u64, hidden as u64, classes as u64, self.seed, self.vocab_fingerprint] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for tensor in [self.embeddings.as_slice(), &self.w1, &self.b1, &self.w2, &self.b2] {
            for x in tensor {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::malformed(origin, 0, reason.to_string());
        let rest = bytes.strip_prefix(MODEL_MAGIC).ok_or_else(|| bad("missing SEMCLF1 magic"))?;
        let mut words = rest.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("chunk of 8"));
        if rest.len() % 8 != 0 {
            return Err(bad("truncated model file"));
        }
        let mut header = [0u64; 6];
        for h in &mut header {
            *h = u64::from_le_bytes(words.next().ok_or_else(|| bad("truncated header"))?);
        }
        let to_usize = |v: u64| usize::try_from(v).map_err(|_| bad("dimension overflow"));
        let shape = ModelShape {
            vocab_size: to_usize(header[0])?,
            dim: to_usize(header[1])?,
            hidden: to_usize(header[2])?,
            classes: to_usize(header[3])?,
        };
        shape.validate().map_err(|_| bad("zero dimension in header"))?;
        let sizes = [
            shape.vocab_size * shape.dim,
            shape.dim * shape.hidden,
            shape.hidden,
            shape.hidden * shape.classes,
            shape.classes,
        ];
        if rest.len() / 8 != 6 + sizes.iter().sum::<usize>() {
            return Err(bad("parameter block size does not match header"));
        }
        let mut tensors = sizes.map(|n| {
            words
                .by_ref()
                .take(n)
                .map(f64::from_le_bytes)
                .collect::<Vec<f64>>()
        });
        if tensors.iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(bad("non-finite parameter"));
        }
        let b2 = std::mem::take(&mut tensors[4]);
        let w2 = std::mem::take(&mut tensors[3]);
        let b1 = std::mem::take(&mut tensors[2]);
        let w1 = std::mem::take(&mut tensors[1]);
        let emb = std::mem::take(&mut tensors[0]);
        Ok(Self {
            shape,
            embeddings: EmbeddingMatrix::from_flat(shape.dim, emb)?,
            w1,
            b1,
            w2,
            b2,
            seed: header[4],
            vocab_fingerprint: header[5],
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Gradients of the soft cross-entropy with respect to every parameter.
struct Gradients {
    emb: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Gradients {
    fn zeros(model: &ClassifierModel) -> Self {
        let [e, w1, b1, w2, b2] = model.param_sizes();
        Self {
            emb: vec![0.0; e],
            w1: vec![0.0; w1],
            b1: vec![0.0; b1],
            w2: vec![0.0; w2],
            b2: vec![0.0; b2],
        }
    }

    fn clear(&mut self) {
        for t in [&mut self.emb, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            t.fill(0.0);
        }
    }

    fn scale(&mut self, s: f64) {
        for t in [&mut self.emb, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// −Σ p·log softmax(z); zero-probability classes contribute nothing.
pub fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> f64 {
    log_softmax(logits)
        .iter()
        .zip(target)
        .filter(|(_, &p)| p != 0.0)
        .map(|(l, p)| -p * l)
        .sum()
}

impl ClassifierModel {
    /// Adds this sample's gradients into `grads` and returns its loss.
    fn accumulate(&self, ids: &[usize], target: &[f64], grads: &mut Gradients) -> Result<f64> {
        let ModelShape { dim, hidden, classes, .. } = self.shape;
        let (pooled, n) = self.pool(ids.iter().map(|&id| self.embeddings.row(id)))?;
        let trace = self.head(pooled, n);
        let loss = soft_cross_entropy(&trace.logits, target);
        let probs = softmax(&trace.logits);
        let dz: Vec<f64> = probs.iter().zip(target).map(|(q, p)| q - p).collect();

        for c in 0..classes {
            grads.b2[c] += dz[c];
        }
        let mut dpre = vec![0.0; hidden];
        for j in 0..hidden {
            let row = &self.w2[j * classes..(j + 1) * classes];
            let h = trace.hidden[j];
            if h != 0.0 {
                let g = &mut grads.w2[j * classes..(j + 1) * classes];
                for c in 0..classes {
                    g[c] += h * dz[c];
                }
            }
            if trace.pre_activation[j] > 0.0 {
                dpre[j] = row.iter().zip(&dz).map(|(w, d)| w * d).sum();
            }
        }
        for j in 0..hidden {
            grads.b1[j] += dpre[j];
        }
        let mut dpooled = vec![0.0; dim];
        for k in 0..dim {
            let x = trace.pooled[k];
            let row = &self.w1[k * hidden..(k + 1) * hidden];
            let g = &mut grads.w1[k * hidden..(k + 1) * hidden];
            let mut acc = 0.0;
            for j in 0..hidden {
                g[j] += x * dpre[j];
                acc += row[j] * dpre[j];
            }
            dpooled[k] = acc / n as f64;
        }
        for &id in ids {
            let g = &mut grads.emb[id * dim..(id + 1) * dim];
            for k in 0..dim {
                g[k] += dpooled[k];
            }
        }
        Ok(loss)
    }

    fn apply(&mut self, adam: &mut Adam, grads: &Gradients) {
        adam.step(&mut [
            (self.embeddings.as_mut_slice(), &grads.emb),
            (&mut self.w1, &grads.w1),
            (&mut self.b1, &grads.b1),
            (&mut self.w2, &grads.w2),
            (&mut self.b2, &grads.b2),
        ]);
    }
}

/// Minimizes the mean soft cross-entropy over `targets` with mini-batch
/// Adam. Returns the mean loss observed during each epoch.
fn fit(model: &mut ClassifierModel, inputs: &[Vec<usize>], targets: &[Vec<f64>], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if inputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    for ids in inputs {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        for &id in ids {
            if id >= model.shape.vocab_size {
                return Err(Error::IdOutOfRange {
                    id,
                    size: model.shape.vocab_size,
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, &model.param_sizes());
    let mut grads = Gradients::zeros(model);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            for &i in batch {
                total += model.accumulate(&inputs[i], &targets[i], &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            model.apply(&mut adam, &grads);
        }
        curve.push(if inputs.is_empty() { 0.0 } else { total / inputs.len() as f64 });
    }
    model.check_finite()?;
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub accuracy: f64,
}

pub fn accuracy(model: &ClassifierModel, inputs: &[Vec<usize>], labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (ids, &y) in inputs.iter().zip(labels) {
        if model.predict(ids)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / inputs.len() as f64)
}

/// Supervised training with cross-entropy on hard labels.
pub fn train(model: &mut ClassifierModel, inputs: &[Vec<usize>], labels: &[usize], cfg: &TrainConfig) -> Result<TrainReport> {
    let classes = model.classes();
    let targets = labels
        .iter()
        .map(|&y| {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            let mut t = vec![0.0; classes];
            t[y] = 1.0;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let loss_curve = fit(model, inputs, &targets, cfg)?;
    Ok(TrainReport {
        loss_curve,
        accuracy: accuracy(model, inputs, labels)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub loss_curve: Vec<f64>,
    /// Fraction of inputs where student and teacher argmax agree.
    pub agreement: f64,
}

pub fn validate_distribution(index: usize, p: &[f64], classes: usize) -> Result<()> {
    let bad = |reason: String| Error::MalformedDistribution { index, reason };
    if p.len() != classes {
        return Err(bad(format!("{} entries for {classes} classes", p.len())));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(bad("entries must be finite and nonnegative".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(bad(format!("sums to {sum}")));
    }
    Ok(())
}

/// Trains `student` on the teacher's output distributions (temperature 1).
pub fn distill(
    student: &mut ClassifierModel,
    inputs: &[Vec<usize>],
    teacher_outputs: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<DistillReport> {
    for (i, p) in teacher_outputs.iter().enumerate() {
        validate_distribution(i, p, student.classes())?;
    }
    let loss_curve = fit(student, inputs, teacher_outputs, cfg)?;
    let mut agree = 0;
    for (ids, p) in inputs.iter().zip(teacher_outputs) {
        if student.predict(ids)? == argmax(p) {
            agree += 1;
        }
    }
    Ok(DistillReport {
        loss_curve,
        agreement: if inputs.is_empty() { 0.0 } else { agree as f64 / inputs.len() as f64 },
    })
}

/// Teacher probabilities for every input.
pub fn teacher_outputs(teacher: &ClassifierModel, inputs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    inputs.iter().map(|ids| Ok(softmax(&teacher.forward(ids)?))).collect()
}
