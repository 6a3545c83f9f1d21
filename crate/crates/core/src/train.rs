//! Adam with a cosine learning-rate schedule, the epoch loop, evaluation
//! and checkpoints.
//!
//! Within a batch every sample gets its own tape, possibly on its own
//! thread. Per-sample gradients are collected in batch order and summed
//! sequentially, so results do not depend on the worker count.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, Graph};
use crate::backbone::BackboneConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::metrics::{accuracy, ConfusionMatrix};
use crate::model::Model;
use crate::nn::{mix_seed, Parameterized};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    /// Zero moments shaped like `params`, with β1 = 0.9, β2 = 0.999 and
    /// ε = 1e-8.
    pub fn new(params: &[&Tensor]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[&Tensor], beta1: f32, beta2: f32, eps: f32) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn for_model<M: Parameterized>(model: &M) -> Self {
        let params: Vec<&Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
        Self::new(&params)
    }
}

/// One bias-corrected Adam update. A zero learning rate leaves every
/// parameter bitwise unchanged but still advances the moments.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f32>], state: &mut AdamState, lr: f32) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Parameter(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam_step got {} parameters, {} gradients and state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || p.numel() != state.m[i].len() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - (b1 as f64).powf(state.t as f64);
    let c2 = 1.0 - (b2 as f64).powf(state.t as f64);
    let (c1, c2) = (if c1 > 0.0 { c1 } else { 1.0 } as f32, if c2 > 0.0 { c2 } else { 1.0 } as f32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total: usize,
}

/// `η_min + ½(η_max − η_min)(1 + cos(πt/T))` for `0 ≤ t ≤ T`.
pub fn cosine_lr(t: usize, s: &CosineSchedule) -> Result<f64> {
    if s.total == 0 || !(s.lr_min <= s.lr_max) {
        return Err(Error::Config(format!(
            "cosine schedule needs T >= 1 and lr_min <= lr_max, got T={}, [{}, {}]",
            s.total, s.lr_min, s.lr_max
        )));
    }
    if t > s.total {
        return Err(Error::Usage(format!("epoch {t} is past the schedule end {}", s.total)));
    }
    let phase = std::f64::consts::PI * t as f64 / s.total as f64;
    Ok(s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + phase.cos()))
}

fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    8
}
fn default_lr_max() -> f64 {
    1e-3
}
fn default_lr_min() -> f64 {
    1e-5
}
fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr_max: default_lr_max(),
            lr_min: default_lr_min(),
            seed: 0,
            folds: default_folds(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            total: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr_min {} and train.lr_max {} must satisfy 0 <= lr_min <= lr_max",
                self.lr_min, self.lr_max
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("train.folds must be >= 2, got {}", self.folds)));
        }
        Ok(())
    }
}

/// Joint loss and per-parameter gradients of one training sample.
fn sample_gradients(model: &Model, image: &Tensor, label: usize, seed: u64) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let (loss, _) = model.loss(&mut g, image, label, true, seed)?;
    g.backward(loss)?;
    let grads = model.named_params().iter().map(|(_, t)| g.param_grad(t)).collect();
    Ok((g.value(loss)[0] as f64, grads))
}

/// Mean joint loss and summed-then-averaged gradients over a batch.
pub fn batch_gradients(model: &Model, data: &Dataset, batch: &[usize], seed: u64) -> Result<(f64, Vec<Vec<f32>>)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let per_sample: Vec<(f64, Vec<Vec<f32>>)> = batch
        .par_iter()
        .enumerate()
        .map(|(j, &i)| {
            let s = &data.samples[i];
            sample_gradients(model, &s.image, s.label, mix_seed(seed, j as u64))
        })
        .collect::<Result<_>>()?;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().expect("batch is not empty");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / batch.len() as f32;
    grads.iter_mut().flatten().for_each(|v| *v *= inv);
    Ok((loss / batch.len() as f64, grads))
}

/// One pass over `positions` of `data` in an order shuffled by `seed`, with
/// one Adam step per batch. Returns the mean per-sample training loss.
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    positions: &[usize],
    batch_size: usize,
    state: &mut AdamState,
    lr: f32,
    seed: u64,
) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::Usage("cannot train on an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order = positions.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut total = 0.0;
    for (b, batch) in order.chunks(batch_size).enumerate() {
        let (loss, grads) = batch_gradients(model, data, batch, mix_seed(seed, b as u64 + 1))?;
        total += loss * batch.len() as f64;
        adam_step(&mut model.params_mut(), &grads, state, lr)?;
    }
    Ok(total / order.len() as f64)
}

/// Anything that maps an image to class probabilities and a loss.
pub trait Classifier: Sync {
    fn classes(&self) -> usize;

    /// Class probabilities and loss for one labelled image, in eval mode.
    fn score(&self, image: &Tensor, label: usize) -> Result<(Vec<f32>, f64)>;
}

impl Classifier for Model {
    fn classes(&self) -> usize {
        Model::classes(self)
    }

    fn score(&self, image: &Tensor, label: usize) -> Result<(Vec<f32>, f64)> {
        let mut g = Graph::new();
        let (loss, fwd) = self.loss(&mut g, image, label, false, 0)?;
        Ok((fwd.outputs.fused, g.value(loss)[0] as f64))
    }
}

/// Index of the largest entry; ties go to the smaller index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub mean_loss: f64,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        accuracy(&self.confusion).unwrap_or(0.0)
    }
}

/// Confusion matrix and mean loss over `positions` of `data`.
pub fn evaluate<C: Classifier>(clf: &C, data: &Dataset, positions: &[usize]) -> Result<Evaluation> {
    if positions.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let scored: Vec<(usize, usize, f64)> = positions
        .par_iter()
        .map(|&i| {
            let s = &data.samples[i];
            let (probs, loss) = clf.score(&s.image, s.label)?;
            Ok((s.label, argmax(&probs), loss))
        })
        .collect::<Result<_>>()?;
    let mut confusion = ConfusionMatrix::new(clf.classes());
    let mut loss = 0.0;
    for (truth, pred, l) in scored {
        confusion.record(truth, pred)?;
        loss += l;
    }
    Ok(Evaluation {
        confusion,
        mean_loss: loss / positions.len() as f64,
    })
}

pub fn all_positions(data: &Dataset) -> Vec<usize> {
    (0..data.len()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub history: Vec<EpochLog>,
    /// Epoch whose parameters the model holds on return.
    pub kept_epoch: usize,
    pub best_val_accuracy: Option<f64>,
}

/// Trains for `cfg.epochs` epochs with a cosine schedule. With a validation
/// split the parameters of the epoch with the best validation accuracy are
/// kept (earliest on ties) and, when `checkpoint` is given, written there
/// each time they improve. Without one the final parameters are kept and
/// checkpointed after every epoch.
pub fn fit(
    model: &mut Model,
    data: &Dataset,
    train: &[usize],
    val: Option<&[usize]>,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitReport> {
    cfg.validate()?;
    let schedule = cfg.schedule();
    let mut state = AdamState::for_model(model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, &schedule)?;
        let seed = mix_seed(cfg.seed, epoch as u64);
        let train_loss = train_epoch(model, data, train, cfg.batch_size, &mut state, lr as f32, seed)?;
        let val_accuracy = match val {
            Some(v) => Some(evaluate(model, data, v)?.accuracy()),
            None => None,
        };
        let log = EpochLog {
            epoch,
            lr,
            train_loss,
            val_accuracy,
        };
        on_epoch(&log);
        history.push(log);
        let improved = match (val_accuracy, &best) {
            (None, _) => true,
            (Some(a), Some((b, _, _))) => a > *b,
            (Some(_), None) => true,
        };
        if improved {
            if let Some(dir) = checkpoint {
                let meta = CheckpointMeta {
                    epoch,
                    val_accuracy,
                };
                save_checkpoint(model, &state, &meta, dir)?;
            }
            if let Some(a) = val_accuracy {
                best = Some((a, epoch, model.clone()));
            }
        }
    }
    let (kept_epoch, best_val_accuracy) = match best {
        Some((acc, epoch, params)) => {
            *model = params;
            (epoch, Some(acc))
        }
        None => (cfg.epochs - 1, None),
    };
    Ok(FitReport {
        history,
        kept_epoch,
        best_val_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    meta: CheckpointMeta,
    backbone: BackboneConfig,
    head: HeadConfig,
    params: Vec<String>,
    adam_t: u64,
    adam_beta1: f32,
    adam_beta2: f32,
    adam_eps: f32,
}

const CHECKPOINT_FORMAT: &str = "pmp-checkpoint-1";
const CHECKPOINT_MANIFEST: &str = "manifest.json";

fn tensor_file(kind: &str, i: usize) -> String {
    format!("{kind}_{i:04}.pmt")
}

fn io_at(path: &Path, what: &str) -> impl FnOnce(std::io::Error) -> Error {
    let context = format!("{what} {}", path.display());
    move |e| Error::io(context, e)
}

/// Writes parameters, Adam moments and a JSON manifest. The directory is
/// assembled beside `dir` and renamed into place, so an interrupted save
/// leaves the previous checkpoint intact.
pub fn save_checkpoint(model: &Model, state: &AdamState, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    let staging = sibling(dir, "partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_at(&staging, "clearing"))?;
    }
    fs::create_dir_all(&staging).map_err(io_at(&staging, "creating"))?;
    let named = model.named_params();
    for (i, (_, t)) in named.iter().enumerate() {
        t.save(&staging.join(tensor_file("param", i)))?;
        let shape = t.shape().to_vec();
        Tensor::new(shape.clone(), state.m[i].clone())?.save(&staging.join(tensor_file("adam_m", i)))?;
        Tensor::new(shape, state.v[i].clone())?.save(&staging.join(tensor_file("adam_v", i)))?;
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        meta: meta.clone(),
        backbone: model.backbone.config.clone(),
        head: model.head.config.clone(),
        params: named.into_iter().map(|(n, _)| n).collect(),
        adam_t: state.t,
        adam_beta1: state.beta1,
        adam_beta2: state.beta2,
        adam_eps: state.eps,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let mpath = staging.join(CHECKPOINT_MANIFEST);
    fs::write(&mpath, text).map_err(io_at(&mpath, "writing"))?;
    let old = sibling(dir, "old");
    if old.exists() {
        fs::remove_dir_all(&old).map_err(io_at(&old, "clearing"))?;
    }
    if dir.exists() {
        fs::rename(dir, &old).map_err(io_at(dir, "moving aside"))?;
    }
    fs::rename(&staging, dir).map_err(io_at(dir, "installing"))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(io_at(&old, "removing"))?;
    }
    Ok(())
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, AdamState, CheckpointMeta)> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_at(&mpath, "reading"))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", mpath.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Config(format!(
            "{}: unknown checkpoint format {:?}",
            mpath.display(),
            manifest.format
        )));
    }
    let mut model = Model::init(manifest.backbone, manifest.head, 0)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if names != manifest.params {
        return Err(Error::Config(format!(
            "{}: parameter list does not match the configured model",
            mpath.display()
        )));
    }
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for (i, p) in model.params_mut().into_iter().enumerate() {
        let loaded = Tensor::load(&dir.join(tensor_file("param", i)))?;
        if loaded.shape() != p.shape() {
            return Err(Error::Shape {
                op: "load_checkpoint",
                left: p.shape().to_vec(),
                right: loaded.shape().to_vec(),
            });
        }
        p.data_mut().copy_from_slice(loaded.data());
        m.push(Tensor::load(&dir.join(tensor_file("adam_m", i)))?.into_data());
        v.push(Tensor::load(&dir.join(tensor_file("adam_v", i)))?.into_data());
    }
    let state = AdamState {
        m,
        v,
        t: manifest.adam_t,
        beta1: manifest.adam_beta1,
        beta2: manifest.adam_beta2,
        eps: manifest.adam_eps,
    };
    Ok((model, state, manifest.meta))
}

/// Class probabilities of one image in eval mode.
pub fn predict(model: &Model, image: &Tensor) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, image, false, 0)?;
    Ok(softmax(g.value(fwd.outputs.fused_logits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::head::BranchConfig;

    fn tiny_model(seed: u64, dropout: f32) -> Model {
        let mut bc = BackboneConfig::with_side(64, 4);
        bc.window = 2;
        let mut hc = HeadConfig::new(BranchConfig::new(1, 2, 1), BranchConfig::new(2, 0, 0), 4);
        hc.dropout = dropout;
        Model::init(bc, hc, seed).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let mut s = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[vec![0.0, 0.0]], &mut s, 1e-2).unwrap();
        assert_eq!(p.data(), &[0.5, -1.0]);
    }

    #[test]
    fn adam_without_momentum_is_sign_descent() {
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut s = AdamState::with_hyper(&[&p], 0.0, 0.0, 1e-8);
        adam_step(&mut [&mut p], &[vec![-3.0]], &mut s, 0.1).unwrap();
        let expect = 1.0 + 0.1 * 3.0 / (3.0 + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn adam_steady_step_approaches_lr() {
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut s = AdamState::new(&[&p]);
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..5000 {
            adam_step(&mut [&mut p], &[vec![0.7]], &mut s, 1e-3).unwrap();
            step = prev - p.data()[0];
            prev = p.data()[0];
        }
        assert!((step - 1e-3).abs() < 1e-5, "{step}");
        assert!(adam_step(&mut [&mut p], &[vec![0.0, 1.0]], &mut s, 1e-3).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            lr_max: 1e-3,
            lr_min: 1e-5,
            total: 10,
        };
        assert!((cosine_lr(0, &s).unwrap() - 1e-3).abs() < 1e-15);
        assert!((cosine_lr(10, &s).unwrap() - 1e-5).abs() < 1e-15);
        assert!((cosine_lr(5, &s).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(cosine_lr(11, &s).is_err());
    }

    struct Stub(Option<usize>);

    impl Classifier for Stub {
        fn classes(&self) -> usize {
            3
        }

        fn score(&self, _: &Tensor, label: usize) -> Result<(Vec<f32>, f64)> {
            let mut p = vec![0.0; 3];
            p[self.0.unwrap_or(label)] = 1.0;
            Ok((p, 0.0))
        }
    }

    fn labelled(labels: &[usize]) -> Dataset {
        let spec = SyntheticSpec::four_class(16, 0);
        let mut d = generate_synthetic(&spec, &[1, 1, 0, 0]).unwrap();
        let proto = d.samples[0].clone();
        d.samples = labels
            .iter()
            .enumerate()
            .map(|(id, &label)| crate::data::Sample { id, label, ..proto.clone() })
            .collect();
        d.classes = 3;
        d
    }

    #[test]
    fn stub_evaluations() {
        let d = labelled(&[0, 1, 2, 2, 1]);
        let all = all_positions(&d);
        let perfect = evaluate(&Stub(None), &d, &all).unwrap();
        assert_eq!(perfect.confusion.trace(), 5);
        let constant = evaluate(&Stub(Some(1)), &d, &all).unwrap();
        assert_eq!(constant.confusion.col_sum(1), 5);
        assert_eq!(constant.confusion.total(), 5);
        assert!(evaluate(&Stub(None), &d, &[]).is_err());
    }

    #[test]
    fn zero_lr_keeps_params_and_matches_eval_loss() {
        let spec = SyntheticSpec::four_class(64, 1);
        let d = generate_synthetic(&spec, &[2, 2, 1, 1]).unwrap();
        let mut model = tiny_model(3, 0.0);
        let before = model.clone();
        let mut state = AdamState::for_model(&model);
        let all = all_positions(&d);
        let loss = train_epoch(&mut model, &d, &all, 4, &mut state, 0.0, 5).unwrap();
        let bits = |m: &Model| -> Vec<u32> {
            m.named_params().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&model), bits(&before));
        let eval = evaluate(&model, &d, &all).unwrap();
        assert!((loss - eval.mean_loss).abs() < 1e-9, "{loss} vs {}", eval.mean_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = SyntheticSpec::four_class(64, 2);
        let d = generate_synthetic(&spec, &[2, 2, 2, 2]).unwrap();
        let all = all_positions(&d);
        let run = || {
            let mut model = tiny_model(4, 0.1);
            let mut state = AdamState::for_model(&model);
            (0..2)
                .map(|e| train_epoch(&mut model, &d, &all, 3, &mut state, 1e-3, e).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny_model(6, 0.1);
        let mut state = AdamState::for_model(&model);
        state.t = 7;
        state.m[0][0] = 0.25;
        let meta = CheckpointMeta {
            epoch: 3,
            val_accuracy: Some(0.5),
        };
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("best");
        save_checkpoint(&model, &state, &meta, &ck).unwrap();
        save_checkpoint(&model, &state, &meta, &ck).unwrap();
        let (back, back_state, back_meta) = load_checkpoint(&ck).unwrap();
        assert_eq!(back_meta, meta);
        assert_eq!(back_state, state);
        let a: Vec<_> = model.named_params().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();
        let b: Vec<_> = back.named_params().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();
        assert_eq!(a, b);
    }
}
