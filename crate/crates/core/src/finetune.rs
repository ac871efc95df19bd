//! Adversarial fine-tuning: inner PGD maximization, Siamese or reference
//! losses, AdamW or SGD updates under a warmup plus cosine schedule.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{attack, AttackConfig, AttackMethod, Objective, ObjectiveContext};
use crate::batch::{normalize_backward, EmbeddingBatch, ImageBatch};
use crate::checkpoint::{self, write_atomic};
use crate::data::Dataset;
use crate::encoder::{Param, ParamGrads, VisionEncoder};
use crate::error::{Error, Result};
use crate::losses::{collapse_metric, fare_loss, simclip_loss, tecoa_loss, CollapseDetector, LossValue};
use crate::record::RunRecord;
use crate::text::{zero_shot_logits, TextHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Simclip,
    Fare,
    Tecoa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "adaptive_moment_decoupled_wd", alias = "adamw")]
    AdamW,
    #[serde(rename = "plain_sgd", alias = "sgd")]
    Sgd,
}

/// Inner maximization used to build the perturbed view. The budget comes
/// from [`TrainConfig::epsilon`]; the step size is `step_fraction * epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerAttack {
    pub method: AttackMethod,
    pub steps: usize,
    pub step_fraction: f64,
    pub objective: Objective,
    pub random_start: bool,
}

impl Default for InnerAttack {
    fn default() -> Self {
        Self {
            method: AttackMethod::Pgd,
            steps: 10,
            step_fraction: 0.25,
            objective: Objective::EmbeddingMax,
            // the embedding distance has zero gradient at the clean point
            random_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub stop_grad: bool,
    /// Let the ℓ2 loss reach the clean branch too.
    pub fare_symmetric: bool,
    pub epsilon: f64,
    pub inner: InnerAttack,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Overrides `epochs * ceil(N / batch_size)` as the schedule length.
    pub total_steps: Option<usize>,
    /// Stop early after this many updates without shortening the schedule.
    pub stop_after: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Cosine-logit temperature for `tecoa` and label-based inner attacks.
    pub temperature: f64,
    pub collapse_threshold: f64,
    pub collapse_window: usize,
    pub halt_on_collapse: bool,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Simclip,
            stop_grad: true,
            fare_symmetric: false,
            epsilon: 4.0 / 255.0,
            inner: InnerAttack::default(),
            optimizer: OptimizerKind::AdamW,
            lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 10,
            epochs: 2,
            total_steps: None,
            stop_after: None,
            batch_size: 64,
            seed: 0,
            temperature: 0.1,
            collapse_threshold: 0.01,
            collapse_window: 50,
            halt_on_collapse: true,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    /// Schedule length for a dataset of `n` examples.
    pub fn schedule_len(&self, n: usize) -> usize {
        self.total_steps
            .unwrap_or_else(|| self.epochs * n.div_ceil(self.batch_size.max(1)))
    }

    /// Number of updates actually run.
    pub fn planned_updates(&self, n: usize) -> usize {
        let total = self.schedule_len(n);
        self.stop_after.map_or(total, |s| s.min(total))
    }

    pub fn needs_labels(&self) -> bool {
        self.loss == LossKind::Tecoa
            || (self.inner.steps > 0 && matches!(self.inner.objective, Objective::CeUntargeted | Objective::DlrTargeted))
    }

    /// Check every field, reporting all violations at once.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            errs.push(format!("train.epsilon must be in (0, 1), got {}", self.epsilon));
        }
        if self.batch_size < 2 {
            errs.push(format!("train.batch_size must be at least 2, got {}", self.batch_size));
        }
        let total = self.schedule_len(n);
        if total == 0 {
            errs.push("train.epochs / train.total_steps give an empty schedule".into());
        } else if self.warmup_steps >= total {
            errs.push(format!(
                "train.warmup_steps ({}) must be below the schedule length ({total})",
                self.warmup_steps
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push(format!("train.lr must be a finite non-negative number, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errs.push(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            errs.push("train.beta1 and train.beta2 must be in [0, 1)".into());
        }
        if !(self.temperature > 0.0) {
            errs.push(format!("train.temperature must be positive, got {}", self.temperature));
        }
        if !(self.inner.step_fraction > 0.0) {
            errs.push("train.inner.step_fraction must be positive".into());
        }
        if self.inner.objective.is_targeted() {
            errs.push(format!("train.inner.objective {:?} is targeted; training uses untargeted objectives", self.inner.objective));
        }
        if self.inner.method == AttackMethod::Apgd && self.inner.steps == 0 {
            errs.push("train.inner.steps must be positive for apgd".into());
        }
        if self.collapse_window == 0 {
            errs.push("train.collapse_window must be positive".into());
        }
        if self.checkpoint_every == Some(0) {
            errs.push("train.checkpoint_every must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 characters.
    pub fn digest(&self) -> String {
        config_digest(self)
    }

    fn inner_attack(&self, step: usize) -> AttackConfig {
        AttackConfig {
            method: self.inner.method,
            epsilon: self.epsilon,
            steps: self.inner.steps,
            alpha: self.inner.step_fraction * self.epsilon,
            objective: self.inner.objective,
            seed: mix(self.seed, step as u64),
            random_start: self.inner.random_start,
            ..AttackConfig::pgd(self.epsilon, self.inner.steps, self.inner.objective)
        }
    }
}

pub fn config_digest<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Linear warmup then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub fn lr_at(step: usize, config: &TrainConfig, total_steps: usize) -> f64 {
    Schedule {
        lr_peak: config.lr,
        warmup_steps: config.warmup_steps,
        total_steps,
    }
    .lr_at(step)
}

/// First and second moments for AdamW; unused (empty) for SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub updates: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[Param<f32>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let (m, v) = match kind {
            OptimizerKind::AdamW => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self { kind, updates: 0, m, v }
    }

    /// One update in place. AdamW decays weights directly
    /// (`θ ← θ - lr·wd·θ`) before the moment step; SGD adds `wd·θ` to the
    /// gradient.
    pub fn apply(&mut self, params: &mut [Param<f32>], grads: &ParamGrads<f32>, lr: f64, config: &TrainConfig) {
        self.updates += 1;
        let wd = config.weight_decay;
        match self.kind {
            OptimizerKind::AdamW => {
                let (b1, b2) = (config.beta1, config.beta2);
                let t = self.updates as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
                    for i in 0..p.data.len() {
                        let gi = g[i] as f64;
                        let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                        let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                        m[i] = mi as f32;
                        v[i] = vi as f32;
                        let theta = p.data[i] as f64;
                        let step = (mi / c1) / ((vi / c2).sqrt() + config.adam_eps);
                        p.data[i] = (theta - lr * wd * theta - lr * step) as f32;
                    }
                }
            }
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&grads.tensors) {
                    for (theta, gi) in p.data.iter_mut().zip(g) {
                        let t = *theta as f64;
                        *theta = (t - lr * (*gi as f64 + wd * t)) as f32;
                    }
                }
            }
        }
    }
}

/// Everything needed to continue training bit-exactly. Random draws are
/// derived from `(seed, step)`, so no generator state is stored.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub total_steps: usize,
    pub encoder: VisionEncoder<f32>,
    pub optimizer: OptimizerState,
    pub losses: Vec<f64>,
    pub collapse_trace: Vec<f64>,
    pub lrs: Vec<f64>,
    pub max_perturbation: f64,
    pub collapsed_at: Option<usize>,
    pub config_digest: String,
    detector: CollapseDetector,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    total_steps: usize,
    optimizer: OptimizerKind,
    updates: u64,
    losses: Vec<f64>,
    collapse_trace: Vec<f64>,
    lrs: Vec<f64>,
    max_perturbation: f64,
    collapsed_at: Option<usize>,
    collapse_threshold: f64,
    collapse_window: usize,
}

impl TrainState {
    pub fn new(encoder: VisionEncoder<f32>, config: &TrainConfig, total_steps: usize) -> Self {
        Self {
            step: 0,
            total_steps,
            optimizer: OptimizerState::new(config.optimizer, encoder.params()),
            encoder,
            losses: Vec::new(),
            collapse_trace: Vec::new(),
            lrs: Vec::new(),
            max_perturbation: 0.0,
            collapsed_at: None,
            config_digest: config.digest(),
            detector: CollapseDetector::new(config.collapse_threshold, config.collapse_window),
        }
    }

    /// Write parameters, moments and histories to one checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<Param<f32>> = self.encoder.params().to_vec();
        for (kind, moments) in [("adam.m", &self.optimizer.m), ("adam.v", &self.optimizer.v)] {
            for (p, data) in self.encoder.params().iter().zip(moments.iter()) {
                tensors.push(Param {
                    name: format!("{kind}.{}", p.name),
                    shape: p.shape.clone(),
                    data: data.clone(),
                });
            }
        }
        let meta = StateMeta {
            step: self.step,
            total_steps: self.total_steps,
            optimizer: self.optimizer.kind,
            updates: self.optimizer.updates,
            losses: self.losses.clone(),
            collapse_trace: self.collapse_trace.clone(),
            lrs: self.lrs.clone(),
            max_perturbation: self.max_perturbation,
            collapsed_at: self.collapsed_at,
            collapse_threshold: self.detector.threshold,
            collapse_window: self.detector.window,
        };
        let bytes = checkpoint::encode(
            "train_state",
            self.encoder.arch(),
            self.encoder.seed(),
            &self.config_digest,
            &tensors,
            serde_json::to_value(meta)?,
        )?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::decode(&std::fs::read(path)?)?;
        if ckpt.header.kind != "train_state" {
            return Err(Error::CheckpointFormat(format!(
                "expected a train_state checkpoint, found {}",
                ckpt.header.kind
            )));
        }
        let meta: StateMeta = serde_json::from_value(ckpt.header.extra.clone())
            .map_err(|e| Error::CheckpointFormat(format!("train state metadata: {e}")))?;
        let n_params = ckpt.header.arch.param_layout().len();
        let mut tensors = ckpt.tensors;
        let moments = tensors.split_off(n_params.min(tensors.len()));
        let encoder = VisionEncoder::from_params(ckpt.header.arch, ckpt.header.seed, tensors)?;
        let (m, v) = match meta.optimizer {
            OptimizerKind::AdamW => {
                if moments.len() != 2 * n_params {
                    return Err(Error::CheckpointFormat("optimizer moments are missing".into()));
                }
                let (m, v) = moments.split_at(n_params);
                (
                    m.iter().map(|t| t.data.clone()).collect(),
                    v.iter().map(|t| t.data.clone()).collect(),
                )
            }
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            step: meta.step,
            total_steps: meta.total_steps,
            encoder,
            optimizer: OptimizerState {
                kind: meta.optimizer,
                updates: meta.updates,
                m,
                v,
            },
            detector: CollapseDetector::replay(meta.collapse_threshold, meta.collapse_window, &meta.collapse_trace),
            losses: meta.losses,
            collapse_trace: meta.collapse_trace,
            lrs: meta.lrs,
            max_perturbation: meta.max_perturbation,
            collapsed_at: meta.collapsed_at,
            config_digest: ckpt.header.config_digest,
        })
    }
}

/// Per-update summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub collapse_metric: f64,
    pub lr: f64,
    pub perturbation: f64,
    pub collapsed: bool,
}

fn embeddings(tapes: &[(Vec<f32>, crate::encoder::Tape<f32>)], dim: usize) -> Result<EmbeddingBatch<f32>> {
    EmbeddingBatch::new(dim, tapes.iter().flat_map(|(e, _)| e.iter().copied()).collect(), false)
}

fn tecoa_grad(r_p: &EmbeddingBatch<f32>, head: &TextHead, labels: &[usize], temperature: f64) -> Result<LossValue<f32>> {
    let unit = r_p.normalized()?;
    let logits = zero_shot_logits(&unit, head, temperature)?;
    let mut loss = tecoa_loss(&logits, head.num_classes(), labels)?;
    // chain logits -> unit embedding -> raw embedding
    let inv_t = (1.0 / temperature) as f32;
    let classes = crate::text::class_rows::<f32>(head);
    let d = r_p.dim();
    let k = head.num_classes();
    let mut grad = Vec::with_capacity(r_p.data().len());
    for (i, raw) in r_p.rows().enumerate() {
        let gl = &loss.grad_first[i * k..(i + 1) * k];
        let mut gu = vec![0.0f32; d];
        for (c, g) in classes.iter().zip(gl) {
            for j in 0..d {
                gu[j] += g * inv_t * c[j];
            }
        }
        grad.extend(normalize_backward(raw, &gu));
    }
    loss.grad_first = grad;
    loss.grad_second = Vec::new();
    Ok(loss)
}

/// One optimizer update on `batch`.
///
/// The perturbed view is built against the current parameters, both views go
/// through the same encoder, and the configured loss is back-propagated into
/// the shared parameters. Histories are appended before a collapse is
/// reported, so a halted state still holds the failing step.
pub fn train_step(
    state: &mut TrainState,
    batch: &ImageBatch<f32>,
    labels: Option<&[usize]>,
    head: Option<&TextHead>,
    config: &TrainConfig,
) -> Result<StepReport> {
    if config.needs_labels() {
        match labels {
            Some(l) if l.len() == batch.len() => {}
            Some(l) => return Err(Error::Shape(format!("{} labels for {} images", l.len(), batch.len()))),
            None => return Err(Error::Config(vec!["labels are required for this loss / inner objective".into()])),
        }
    }
    if config.loss == LossKind::Tecoa && head.is_none() {
        return Err(Error::Config(vec!["train.loss = tecoa needs a text head".into()]));
    }
    let enc = &state.encoder;
    let dim = enc.embed_dim();
    let clean_tapes = enc.forward_tapes(batch)?;
    let r_c = embeddings(&clean_tapes, dim)?;

    let (adv_batch, perturbation) = if config.inner.steps == 0 {
        (None, 0.0)
    } else {
        let mut ctx = ObjectiveContext::new(config.temperature).with_clean_embeddings(&r_c);
        if let Some(h) = head {
            ctx = ctx.with_head(h);
        }
        if let Some(l) = labels {
            ctx = ctx.with_labels(l);
        }
        let result = attack(enc, batch, &config.inner_attack(state.step), &ctx)?;
        let dist = result.adversarial.linf_distance(batch);
        (Some(result.adversarial), dist)
    };
    let adv_tapes_owned;
    let adv_tapes = match &adv_batch {
        Some(x) => {
            adv_tapes_owned = enc.forward_tapes(x)?;
            &adv_tapes_owned
        }
        None => &clean_tapes,
    };
    let r_p = embeddings(adv_tapes, dim)?;

    let loss = match config.loss {
        LossKind::Simclip => simclip_loss(&r_p, &r_c, config.stop_grad)?,
        LossKind::Fare => fare_loss(&r_c, &r_p, config.fare_symmetric)?,
        LossKind::Tecoa => tecoa_grad(&r_p, head.expect("checked"), labels.expect("checked"), config.temperature)?,
    };
    let mut grads = enc.backward_tapes(adv_tapes, &loss.grad_first);
    if loss.grad_flags().into_second && !loss.grad_second.is_empty() {
        grads.add_assign(&enc.backward_tapes(&clean_tapes, &loss.grad_second));
    }

    let lr = Schedule {
        lr_peak: config.lr,
        warmup_steps: config.warmup_steps,
        total_steps: state.total_steps,
    }
    .lr_at(state.step);
    let metric = if r_c.len() >= 2 {
        collapse_metric(&r_c)
    } else {
        state.collapse_trace.last().copied().unwrap_or(f64::INFINITY)
    };
    state.optimizer.apply(state.encoder.params_mut(), &grads, lr, config);
    state.step += 1;
    let value = loss.value as f64;
    state.losses.push(value);
    state.collapse_trace.push(metric);
    state.lrs.push(lr);
    state.max_perturbation = state.max_perturbation.max(perturbation);
    let collapsed = state.detector.observe(metric);
    if collapsed && state.collapsed_at.is_none() {
        state.collapsed_at = Some(state.step);
    }
    if collapsed && config.halt_on_collapse {
        return Err(Error::Collapse {
            step: state.step,
            threshold: config.collapse_threshold,
            window: config.collapse_window,
            last_std: metric,
        });
    }
    Ok(StepReport {
        loss: value,
        collapse_metric: metric,
        lr,
        perturbation,
        collapsed,
    })
}

/// Example indices for update `step`: each epoch is a fresh permutation
/// seeded by `(seed, epoch)`, cut into consecutive batches.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size);
    let epoch = step / per_epoch;
    let b = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
    order[b * batch_size..((b + 1) * batch_size).min(n)].to_vec()
}

/// Where and how often [`run_steps`] writes resumable checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPlan {
    pub dir: Option<PathBuf>,
}

/// Advance `state` until it has taken `until` updates (or the schedule
/// ends).
pub fn run_steps(
    state: &mut TrainState,
    dataset: &Dataset,
    head: Option<&TextHead>,
    config: &TrainConfig,
    until: usize,
    plan: &CheckpointPlan,
) -> Result<()> {
    let n = dataset.len();
    let until = until.min(state.total_steps);
    while state.step < until {
        let idx = batch_indices(n, config.batch_size, config.seed, state.step);
        let batch = dataset.images.select(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
        train_step(state, &batch, Some(&labels), head, config)?;
        if let (Some(every), Some(dir)) = (config.checkpoint_every, &plan.dir) {
            if state.step % every == 0 {
                state.save(&dir.join(format!("step-{:06}.state", state.step)))?;
            }
        }
    }
    Ok(())
}

/// Train from `init` for the configured number of updates.
pub fn finetune(
    init: &VisionEncoder<f32>,
    dataset: &Dataset,
    head: Option<&TextHead>,
    config: &TrainConfig,
    plan: &CheckpointPlan,
) -> Result<(VisionEncoder<f32>, RunRecord)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot fine-tune on an empty dataset".into()));
    }
    config.validate(dataset.len())?;
    let started = Instant::now();
    let total = config.schedule_len(dataset.len());
    let mut state = TrainState::new(init.clone(), config, total);
    run_steps(&mut state, dataset, head, config, config.planned_updates(dataset.len()), plan)?;
    let record = RunRecord::from_training(config, &state, started.elapsed().as_secs_f64());
    Ok((state.encoder, record))
}

/// One grid point of a learning-rate / weight-decay / optimizer sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
}

pub const SWEEP_EARLY_STOP: usize = 500;

/// Config actually trained for a sweep point: `base` with the point's
/// values and early stopping at [`SWEEP_EARLY_STOP`] unless `base` sets its
/// own.
pub fn sweep_config(base: &TrainConfig, point: &SweepPoint) -> TrainConfig {
    TrainConfig {
        lr: point.lr,
        weight_decay: point.weight_decay,
        optimizer: point.optimizer,
        stop_after: Some(base.stop_after.unwrap_or(SWEEP_EARLY_STOP)),
        ..base.clone()
    }
}

/// Train one early-stopped run per grid point; records come back in grid
/// order, each keyed by its config digest.
pub fn hyperparameter_sweep(
    init: &VisionEncoder<f32>,
    dataset: &Dataset,
    head: Option<&TextHead>,
    grid: &[SweepPoint],
    base: &TrainConfig,
) -> Result<Vec<RunRecord>> {
    grid.iter()
        .map(|p| finetune(init, dataset, head, &sweep_config(base, p), &CheckpointPlan::default()).map(|(_, r)| r))
        .collect()
}

/// CSV comparison of sweep records: one row per run.
pub fn sweep_table(records: &[RunRecord]) -> String {
    let mut out = String::from("run_id,optimizer,lr,weight_decay,steps,final_loss,min_loss\n");
    for r in records {
        let Some(cfg) = &r.train else { continue };
        let min = r.losses.iter().copied().fold(f64::INFINITY, f64::min);
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.run_id,
            serde_json::to_value(cfg.optimizer).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
            cfg.lr,
            cfg.weight_decay,
            r.losses.len(),
            r.losses.last().copied().unwrap_or(f64::NAN),
            min
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::encoder::ArchSpec;

    fn toy() -> (VisionEncoder<f32>, Dataset) {
        let spec = SyntheticSpec {
            size: 8,
            ..SyntheticSpec::default()
        };
        let data = spec.generate(24, 5).unwrap();
        let enc = VisionEncoder::init(ArchSpec::small(spec.shape(), 32), 3).unwrap();
        (enc, data)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            warmup_steps: 1,
            epochs: 1,
            batch_size: 8,
            inner: InnerAttack {
                steps: 2,
                ..InnerAttack::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule {
            lr_peak: 1e-5,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(5), 5e-6);
        assert_eq!(s.lr_at(10), 1e-5);
        assert!(s.lr_at(100).abs() < 1e-12);
        assert!(s.lr_at(55) < s.lr_at(30));
    }

    #[test]
    fn one_epoch_takes_ceil_n_over_b_updates() {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.schedule_len(100), 10);
        assert_eq!(cfg.schedule_len(101), 11);
        let (enc, data) = toy();
        let cfg = TrainConfig {
            batch_size: 5,
            ..quick()
        };
        let (_, rec) = finetune(&enc, &data, None, &cfg, &CheckpointPlan::default()).unwrap();
        assert_eq!(rec.losses.len(), 5);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(30, 8, 9, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
        assert_ne!(batch_indices(30, 8, 9, 0), batch_indices(30, 8, 9, 4));
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let (enc, data) = toy();
        let cfg = TrainConfig { lr: 0.0, ..quick() };
        let (out, _) = finetune(&enc, &data, None, &cfg, &CheckpointPlan::default()).unwrap();
        assert_eq!(out, enc);
    }

    #[test]
    fn perturbations_stay_in_budget() {
        let (enc, data) = toy();
        let cfg = quick();
        let (_, rec) = finetune(&enc, &data, None, &cfg, &CheckpointPlan::default()).unwrap();
        assert!(rec.max_perturbation <= cfg.epsilon + 1e-6);
        assert!(rec.max_perturbation > 0.0);
    }

    #[test]
    fn fare_and_simclip_diverge() {
        let (enc, data) = toy();
        let (a, _) = finetune(&enc, &data, None, &quick(), &CheckpointPlan::default()).unwrap();
        let cfg = TrainConfig {
            loss: LossKind::Fare,
            ..quick()
        };
        let (b, _) = finetune(&enc, &data, None, &cfg, &CheckpointPlan::default()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = TrainConfig {
            epsilon: 0.0,
            batch_size: 1,
            warmup_steps: 1000,
            ..TrainConfig::default()
        };
        match cfg.validate(100) {
            Err(Error::Config(errs)) => {
                assert_eq!(errs.len(), 3, "{errs:?}");
                assert!(errs.iter().any(|e| e.contains("epsilon")));
                assert!(errs.iter().any(|e| e.contains("batch_size")));
                assert!(errs.iter().any(|e| e.contains("warmup_steps")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tecoa_requires_labels_and_head() {
        let (enc, data) = toy();
        let cfg = TrainConfig {
            loss: LossKind::Tecoa,
            ..quick()
        };
        let mut state = TrainState::new(enc, &cfg, 3);
        let batch = data.images.select(&[0, 1, 2]);
        assert!(train_step(&mut state, &batch, None, None, &cfg).is_err());
    }

    #[test]
    fn state_round_trips_through_disk() {
        let (enc, data) = toy();
        let cfg = quick();
        let mut state = TrainState::new(enc, &cfg, 3);
        run_steps(&mut state, &data, None, &cfg, 2, &CheckpointPlan::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.state");
        state.save(&path).unwrap();
        let back = TrainState::load(&path).unwrap();
        assert_eq!(back.encoder, state.encoder);
        assert_eq!(back.optimizer, state.optimizer);
        assert_eq!(back.losses, state.losses);
        assert_eq!(back.step, 2);
    }
}
