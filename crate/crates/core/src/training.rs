//! Losses, the AdamW optimizer, the warmup+cosine learning-rate schedule,
//! the neural training loop, the two-stage tree fit, and grid search.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bench::evaluate;
use crate::datasets::{split, Dataset};
use crate::diffmath::{Mode, Real, Tape, Tensor, Var};
use crate::encoder::tokenize;
use crate::forests::{fit_boosted, fit_forest, BoostConfig, ForestConfig};
use crate::heads::LinearHead;
use crate::labels::{Label, PerLabel};
use crate::model::{
    bind_neural, build_model, extract_cls, neural_forward, Arch, GuardModel, HeadKind,
    ModelConfig, Pooling,
};
use crate::{Error, Result};

/// Focal-loss shape: gamma down-weights easy examples, task_weights scale
/// each label's term. gamma 0 with unit weights is plain BCE.
#[derive(Clone, Debug, PartialEq)]
pub struct FocalConfig {
    pub gamma: f64,
    pub task_weights: PerLabel<f64>,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { gamma: 2.0, task_weights: PerLabel::new(1.0, 1.0) }
    }
}

impl FocalConfig {
    pub fn bce() -> Self {
        FocalConfig { gamma: 0.0, task_weights: PerLabel::new(1.0, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        for (label, &w) in self.task_weights.iter() {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::config(format!("{label} weight must be finite and > 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Optimizer and schedule settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fraction of total steps spent ramping linearly from 0 to peak_lr.
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Held-out fraction, stratified by the malicious/benign split.
    pub val_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            peak_lr: 3e-5,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            clip_norm: 1.0,
            val_ratio: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Stage-1 recipe for the tree architectures: 3 epochs at 2e-5.
    pub fn stage1() -> Self {
        TrainConfig { epochs: 3, peak_lr: 2e-5, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config(format!("peak_lr must be finite and > 0, got {}", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config(format!("warmup_ratio must be in [0,1), got {}", self.warmup_ratio)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config(format!("betas must each be in [0,1), got ({b1}, {b2})")));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::config(format!("adam_eps must be > 0, got {}", self.adam_eps)));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.val_ratio > 0.0 && self.val_ratio < 1.0) {
            return Err(Error::config(format!("val_ratio must be in (0,1), got {}", self.val_ratio)));
        }
        Ok(())
    }
}

fn loss_tensors<E: Real>(
    tape: &Tape<E>,
    logits: Var,
    targets: &[PerLabel<bool>],
    weights: &PerLabel<f64>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let shape = tape.value(logits).shape().to_vec();
    if shape != [targets.len(), 2] {
        return Err(Error::dim(
            "loss",
            format!("logits {shape:?} against {} target rows", targets.len()),
        ));
    }
    let mut t = Vec::with_capacity(targets.len() * 2);
    let mut w = Vec::with_capacity(targets.len() * 2);
    for row in targets {
        for label in Label::ALL {
            t.push(if *row.get(label) { E::one() } else { E::zero() });
            w.push(E::of_f64(*weights.get(label)));
        }
    }
    Ok((Tensor::matrix(targets.len(), 2, t)?, Tensor::matrix(targets.len(), 2, w)?))
}

/// Weighted BCE over a batch of two-label logit rows: the mean over batch
/// and labels of w_k * bce(z, t), in the stable logits form.
pub fn bce_loss<E: Real>(
    tape: &mut Tape<E>,
    logits: Var,
    targets: &[PerLabel<bool>],
    task_weights: &PerLabel<f64>,
) -> Result<Var> {
    let (t, w) = loss_tensors(tape, logits, targets, task_weights)?;
    tape.bce_with_logits(logits, &t, &w)
}

/// Focal loss over a batch of two-label logit rows: the mean over batch
/// and labels of w_k * (1 - p_t)^gamma * (-log p_t).
pub fn focal_loss<E: Real>(
    tape: &mut Tape<E>,
    logits: Var,
    targets: &[PerLabel<bool>],
    cfg: &FocalConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (t, w) = loss_tensors(tape, logits, targets, &cfg.task_weights)?;
    tape.focal_with_logits(logits, &t, &w, cfg.gamma)
}

/// Decoupled-weight-decay adaptive-moment optimizer. One moment slot per
/// trainable tensor, in the model's canonical parameter order.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(sizes: &[usize]) -> Self {
        AdamW {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update over all parameters. Weight decay multiplies the
    /// parameter down before the moment term is subtracted.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<f64>>,
        grads: &[Tensor<f64>],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let mut seen = 0;
        for (i, p) in params.into_iter().enumerate() {
            seen += 1;
            let g = grads
                .get(i)
                .ok_or_else(|| Error::state(format!("{} gradients for parameter {i}", grads.len())))?;
            if g.len() != p.len() || self.m[i].len() != p.len() {
                return Err(Error::dim(
                    "adamw",
                    format!("parameter {i}: {} values, gradient {}, state {}", p.len(), g.len(), self.m[i].len()),
                ));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::training(format!(
                    "non-finite gradient in parameter {i} at optimizer step {t}"
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let decayed = *pj - lr * cfg.weight_decay * *pj;
                *pj = decayed - lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
        if seen != self.m.len() {
            return Err(Error::state(format!("{seen} parameters against {} state slots", self.m.len())));
        }
        Ok(())
    }
}

/// Linear ramp 0 -> peak over warmup_ratio * total_steps, then cosine
/// decay from peak to 0 at total_steps.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    let warmup = cfg.warmup_ratio * total_steps as f64;
    let s = step.min(total_steps) as f64;
    if s < warmup {
        Ok(cfg.peak_lr * (s / warmup))
    } else {
        let progress = (s - warmup) / (total_steps as f64 - warmup);
        Ok(cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

/// One line of the structured training log per epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!("epoch={} train_loss={} val_macro_f1={}", self.epoch, self.train_loss, self.val_macro_f1)
    }
}

fn ensure_trainable(model: &GuardModel<f64>) -> Result<()> {
    match model.heads {
        HeadKind::Linear(_) | HeadKind::Residual(_) => Ok(()),
        HeadKind::Forest(_) | HeadKind::Boosted(_) => Err(Error::config(format!(
            "{} has tree heads; fit it with the two-stage procedure",
            model.arch
        ))),
    }
}

/// Mean loss for one sample: per-label focal terms averaged across the two
/// labels, matching the batched two-column form.
fn sample_loss(
    tape: &mut Tape<f64>,
    logits: &PerLabel<Var>,
    labels: &PerLabel<bool>,
    cfg: &FocalConfig,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for label in Label::ALL {
        let t = Tensor::matrix(1, 1, vec![f64::from(u8::from(*labels.get(label)))])?;
        let w = Tensor::matrix(1, 1, vec![*cfg.task_weights.get(label)])?;
        let term = tape.focal_with_logits(*logits.get(label), &t, &w, cfg.gamma)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    tape.scale(acc.expect("two labels"), 0.5)
}

struct StepOutcome {
    loss_sum: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut GuardModel<f64>,
    ds: &Dataset,
    batch: &[usize],
    loss_cfg: &FocalConfig,
    opt: &mut AdamW,
    lr: f64,
    cfg: &TrainConfig,
    global_step: usize,
) -> Result<StepOutcome> {
    let max_len = model.max_len();
    let mut grad_acc: Vec<Tensor<f64>> = model
        .named_params()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let mut loss_sum = 0.0;
    for (k, &idx) in batch.iter().enumerate() {
        let s = &ds.samples[idx];
        let tape_seed = cfg
            .seed
            .wrapping_add((global_step as u64).wrapping_mul(0x9e3779b97f4a7c15))
            .wrapping_add((k as u64).wrapping_mul(0xd1b54a32d192ed03));
        let mut tape = Tape::<f64>::with_seed(tape_seed);
        let vars = bind_neural(&mut tape, model, true)?;
        let seq = tokenize(&s.text, max_len);
        let fwd = neural_forward(&mut tape, model, &vars, &seq, Mode::Train)?;
        let loss = sample_loss(&mut tape, &fwd.logits, &s.labels, loss_cfg)?;
        loss_sum += tape.value(loss).item()?;
        tape.backward(loss)?;
        for (g, v) in grad_acc.iter_mut().zip(&vars.flat) {
            if let Some(gt) = tape.grad(*v) {
                for (a, b) in g.data_mut().iter_mut().zip(gt.data()) {
                    *a += *b;
                }
            }
        }
    }
    let inv_b = 1.0 / batch.len() as f64;
    for g in &mut grad_acc {
        for x in g.data_mut() {
            *x *= inv_b;
        }
    }
    let norm = grad_acc
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > cfg.clip_norm {
        let scale = cfg.clip_norm / norm;
        for g in &mut grad_acc {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    let mut params = model.named_params_mut();
    opt.step(params.iter_mut().map(|(_, t)| &mut **t), &grad_acc, lr, cfg)?;
    Ok(StepOutcome { loss_sum })
}

/// Train on pre-made splits. Shuffles per epoch from the run seed, clips
/// gradients at the configured global norm, logs one record per epoch, and
/// returns the weights from the best-validation epoch (earliest on ties).
pub fn train_on_splits(
    mut model: GuardModel<f64>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &FocalConfig,
) -> Result<(GuardModel<f64>, Vec<EpochRecord>)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    ensure_trainable(&model)?;
    let n = train_ds.len();
    if n == 0 {
        return Err(Error::data("training split is empty"));
    }
    let n_pos = train_ds.samples.iter().filter(|s| s.malicious()).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::data(format!(
            "training split needs both classes; got {n_pos} malicious of {n}"
        )));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(&sizes);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, GuardModel<f64>)> = None;
    let mut global_step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed.wrapping_add((epoch as u64).wrapping_mul(0x9e3779b97f4a7c15)),
        );
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            global_step += 1;
            let lr = lr_at(global_step, total_steps, cfg)?;
            let out = train_step(&mut model, train_ds, batch, loss_cfg, &mut opt, lr, cfg, global_step)
                .map_err(|e| match e {
                    Error::Training(msg) => {
                        Error::training(format!("epoch {epoch} step {}: {msg}", b + 1))
                    }
                    other => other,
                })?;
            if !out.loss_sum.is_finite() {
                return Err(Error::training(format!("loss diverged at epoch {epoch} step {}", b + 1)));
            }
            loss_sum += out.loss_sum;
        }
        let train_loss = loss_sum / n as f64;
        let val_macro_f1 = evaluate(&model, val_ds, model.arch.name())?.macro_f1;
        history.push(EpochRecord { epoch, train_loss, val_macro_f1 });
        if best.as_ref().is_none_or(|(f, _)| val_macro_f1 > *f) {
            best = Some((val_macro_f1, model.clone()));
        }
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok((best_model, history))
}

/// Split off a stratified validation set and train.
pub fn train(
    model: GuardModel<f64>,
    data: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &FocalConfig,
) -> Result<(GuardModel<f64>, Vec<EpochRecord>)> {
    cfg.validate()?;
    let (train_ds, val_ds) = split(data, cfg.val_ratio, cfg.seed, true)?;
    train_on_splits(model, &train_ds, &val_ds, cfg, loss_cfg)
}

/// Stage-2 ensemble settings for the tree architectures.
#[derive(Clone, Debug, PartialEq)]
pub enum TreeStage {
    Forest(ForestConfig),
    Boosted(BoostConfig),
}

impl TreeStage {
    pub fn for_arch(arch: Arch) -> Result<TreeStage> {
        match arch {
            Arch::Vaishnava => Ok(TreeStage::Forest(ForestConfig::default())),
            Arch::Ashwina => Ok(TreeStage::Boosted(BoostConfig::default())),
            other => Err(Error::config(format!("{other} does not take a tree stage"))),
        }
    }
}

/// Fine-tune the encoder under a temporary linear head with BCE, freeze the
/// best weights, extract CLS features for the training texts, then fit one
/// ensemble per label on those features.
pub fn two_stage_fit(
    arch: Arch,
    data: &Dataset,
    stage1_cfg: &TrainConfig,
    tree_cfg: &TreeStage,
    model_cfg: &ModelConfig,
) -> Result<(GuardModel<f64>, Vec<EpochRecord>)> {
    match (arch, tree_cfg) {
        (Arch::Vaishnava, TreeStage::Forest(_)) | (Arch::Ashwina, TreeStage::Boosted(_)) => {}
        (Arch::Vaishnava, TreeStage::Boosted(_)) | (Arch::Ashwina, TreeStage::Forest(_)) => {
            return Err(Error::config(format!("{arch} paired with the wrong ensemble kind")));
        }
        (other, _) => return Err(Error::config(format!("{other} is not a two-stage architecture"))),
    }
    stage1_cfg.validate()?;
    let skeleton = build_model(arch, model_cfg)?;
    let mut head_rng = ChaCha8Rng::seed_from_u64(model_cfg.seed ^ 0x7e20_9d6a_31c5_84fb);
    let stage1_model = GuardModel {
        arch,
        backend: skeleton.backend.clone(),
        pooling: Pooling::Cls,
        heads: HeadKind::Linear(LinearHead::init(skeleton.d_model(), &mut head_rng)),
        thresholds: skeleton.thresholds,
    };
    let (train_ds, val_ds) = split(data, stage1_cfg.val_ratio, stage1_cfg.seed, true)?;
    let (best, history) = train_on_splits(stage1_model, &train_ds, &val_ds, stage1_cfg, &FocalConfig::bce())?;

    let features: Vec<Vec<f64>> = train_ds
        .samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::<f64>::inference();
            let seq = tokenize(&s.text, best.max_len());
            extract_cls(&best, &mut tape, &seq)
        })
        .collect::<Result<_>>()?;
    let targets = |label: Label| -> Vec<u8> {
        train_ds.samples.iter().map(|s| u8::from(*s.labels.get(label))).collect()
    };
    // Per-label seeds sit far apart so the per-tree streams cannot overlap.
    let heads = match tree_cfg {
        TreeStage::Forest(fc) => {
            let fit = |label: Label, k: u64| {
                let cfg = ForestConfig { seed: fc.seed.wrapping_add(k << 24), ..*fc };
                fit_forest(&features, &targets(label), &cfg)
            };
            HeadKind::Forest(PerLabel::new(
                Some(fit(Label::Jailbreak, 0)?),
                Some(fit(Label::PromptInjection, 1)?),
            ))
        }
        TreeStage::Boosted(bc) => {
            let fit = |label: Label, k: u64| {
                let cfg = BoostConfig { seed: bc.seed.wrapping_add(k << 24), ..*bc };
                fit_boosted(&features, &targets(label), &cfg)
            };
            HeadKind::Boosted(PerLabel::new(
                Some(fit(Label::Jailbreak, 0)?),
                Some(fit(Label::PromptInjection, 1)?),
            ))
        }
    };
    let model = GuardModel {
        arch,
        backend: best.backend,
        pooling: Pooling::Cls,
        heads,
        thresholds: best.thresholds,
    };
    Ok((model, history))
}

/// Hyperparameter sweep: every (lr, gamma, weight-pair) combination.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpace {
    pub lrs: Vec<f64>,
    pub gammas: Vec<f64>,
    /// (jailbreak weight, prompt-injection weight).
    pub label_weight_pairs: Vec<(f64, f64)>,
    pub probe_epochs: usize,
}

impl Default for GridSpace {
    fn default() -> Self {
        GridSpace {
            lrs: vec![2e-5, 3e-5],
            gammas: vec![2.0, 3.0],
            label_weight_pairs: vec![(1.0, 1.0), (1.5, 1.0)],
            probe_epochs: 3,
        }
    }
}

impl GridSpace {
    pub fn validate(&self) -> Result<()> {
        if self.lrs.is_empty() || self.gammas.is_empty() || self.label_weight_pairs.is_empty() {
            return Err(Error::config("grid axes must all be non-empty"));
        }
        if self.probe_epochs == 0 {
            return Err(Error::config("probe_epochs must be at least 1"));
        }
        for &lr in &self.lrs {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("grid lr must be finite and > 0, got {lr}")));
            }
        }
        for &g in &self.gammas {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::config(format!("grid gamma must be finite and >= 0, got {g}")));
            }
        }
        for &(wj, wp) in &self.label_weight_pairs {
            if !(wj > 0.0 && wp > 0.0 && wj.is_finite() && wp.is_finite()) {
                return Err(Error::config(format!("grid weights must be finite and > 0, got ({wj}, {wp})")));
            }
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut pts = Vec::with_capacity(self.lrs.len() * self.gammas.len() * self.label_weight_pairs.len());
        for &lr in &self.lrs {
            for &gamma in &self.gammas {
                for &weights in &self.label_weight_pairs {
                    pts.push(GridPoint { lr, gamma, weights });
                }
            }
        }
        pts
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub lr: f64,
    pub gamma: f64,
    pub weights: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridRecord {
    pub candidate: usize,
    pub point: GridPoint,
    pub val_macro_f1: f64,
}

impl GridRecord {
    pub fn to_line(&self) -> String {
        format!(
            "candidate={} lr={} gamma={} weights={},{} val_macro_f1={}",
            self.candidate, self.point.lr, self.point.gamma, self.point.weights.0, self.point.weights.1,
            self.val_macro_f1
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    pub best: GridPoint,
    pub best_f1: f64,
    pub results: Vec<GridRecord>,
}

/// Argmax by validation macro F1; ties prefer lower lr, then lower gamma,
/// then lexicographically smaller weights.
fn select_best(results: &[GridRecord]) -> usize {
    let mut bi = 0;
    for (i, r) in results.iter().enumerate().skip(1) {
        let b = &results[bi];
        let tie_key = |p: &GridPoint| (p.lr, p.gamma, p.weights.0, p.weights.1);
        if r.val_macro_f1 > b.val_macro_f1
            || (r.val_macro_f1 == b.val_macro_f1 && tie_key(&r.point) < tie_key(&b.point))
        {
            bi = i;
        }
    }
    bi
}

/// Probe every grid point for probe_epochs on a shared split and pick the
/// best validation macro F1. Candidates run in parallel; each one owns an
/// independent model built from the same seed.
pub fn grid_search(
    arch: Arch,
    space: &GridSpace,
    data: &Dataset,
    base: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<GridOutcome> {
    space.validate()?;
    base.validate()?;
    let (train_ds, val_ds) = split(data, base.val_ratio, base.seed, true)?;
    let points = space.points();
    let results: Vec<GridRecord> = points
        .par_iter()
        .enumerate()
        .map(|(candidate, pt)| {
            let cfg = TrainConfig { epochs: space.probe_epochs, peak_lr: pt.lr, ..base.clone() };
            let loss = FocalConfig {
                gamma: pt.gamma,
                task_weights: PerLabel::new(pt.weights.0, pt.weights.1),
            };
            let model = build_model(arch, model_cfg)?;
            let (_, history) = train_on_splits(model, &train_ds, &val_ds, &cfg, &loss)?;
            let val_macro_f1 = history.iter().map(|h| h.val_macro_f1).fold(f64::NEG_INFINITY, f64::max);
            Ok(GridRecord { candidate, point: *pt, val_macro_f1 })
        })
        .collect::<Result<_>>()?;
    let bi = select_best(&results);
    Ok(GridOutcome { best: results[bi].point, best_f1: results[bi].val_macro_f1, results })
}
