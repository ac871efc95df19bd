//! White-box ℓ∞ attacks: projection, PGD, APGD and their objectives.
//!
//! Attacks operate per example; examples are independent and run in
//! parallel, results are collected in example order.

mod apgd;
mod objectives;
mod pgd;
mod projection;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{EmbeddingBatch, ImageBatch};
use crate::encoder::VisionEncoder;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::text::{class_rows, TextHead};

pub use objectives::{ce_objective, dlr_targeted_objective, dlr_targeted_single, embedding_objectives};
pub use projection::linf_project;

pub(crate) use objectives::{Evaluation, ExampleObjective};
pub(crate) use projection::project_into;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    Linf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    CeUntargeted,
    DlrTargeted,
    CeTargeted,
    EmbeddingMax,
    EmbeddingTargeted,
}

impl Objective {
    pub fn is_targeted(self) -> bool {
        matches!(self, Self::DlrTargeted | Self::CeTargeted | Self::EmbeddingTargeted)
    }

    fn needs_labels(self) -> bool {
        matches!(self, Self::CeUntargeted | Self::DlrTargeted)
    }

    fn needs_head(self) -> bool {
        matches!(self, Self::CeUntargeted | Self::DlrTargeted | Self::CeTargeted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    #[default]
    Pgd,
    Apgd,
}

/// Where a targeted attack takes its target from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    /// Same class or caption id for every example.
    Index(usize),
    /// Per-example targets supplied by the objective context.
    PerExample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub method: AttackMethod,
    /// Budget in pixel units (`4/255`, not `4`).
    pub epsilon: f64,
    pub steps: usize,
    /// Step size in pixel units. APGD ignores it and starts at `2 * epsilon`.
    pub alpha: f64,
    pub objective: Objective,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    /// Start from a uniform sample in the ε-ball instead of the clean point.
    #[serde(default)]
    pub random_start: bool,
    /// Stop iterating on an example once it has succeeded.
    #[serde(default)]
    pub stop_on_success: bool,
}

impl AttackConfig {
    /// PGD with `alpha = epsilon / 4`.
    pub fn pgd(epsilon: f64, steps: usize, objective: Objective) -> Self {
        Self {
            norm: Norm::Linf,
            method: AttackMethod::Pgd,
            epsilon,
            steps,
            alpha: epsilon / 4.0,
            objective,
            seed: 0,
            target: None,
            random_start: false,
            stop_on_success: false,
        }
    }

    pub fn apgd(epsilon: f64, steps: usize, objective: Objective) -> Self {
        Self {
            method: AttackMethod::Apgd,
            ..Self::pgd(epsilon, steps, objective)
        }
    }

    pub fn with_target(mut self, target: TargetSpec) -> Self {
        self.target = Some(target);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            errs.push(format!("attack.epsilon must be in (0, 1), got {}", self.epsilon));
        }
        if !(self.alpha > 0.0) {
            errs.push(format!("attack.alpha must be positive, got {}", self.alpha));
        }
        match (self.objective.is_targeted(), self.target.is_some()) {
            (true, false) => errs.push(format!("attack.target is required for {:?}", self.objective)),
            (false, true) => errs.push(format!("attack.target is only valid for targeted objectives, not {:?}", self.objective)),
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::AttackConfig(errs.join("; ")))
        }
    }
}

/// What an objective needs besides the encoder and images.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveContext<'a, T = f32> {
    pub head: Option<&'a TextHead>,
    pub temperature: f64,
    pub labels: Option<&'a [usize]>,
    /// Per-example targets, used when the config says `PerExample`.
    pub targets: Option<&'a [usize]>,
    /// Raw (unnormalized) clean embeddings for `embedding_max`.
    pub clean_embeddings: Option<&'a EmbeddingBatch<T>>,
    /// Per-example unit target embeddings for `embedding_targeted`; falls
    /// back to caption-bank rows of the target ids.
    pub target_embeddings: Option<&'a EmbeddingBatch<T>>,
}

impl<'a, T> ObjectiveContext<'a, T> {
    pub fn new(temperature: f64) -> Self {
        Self {
            head: None,
            temperature,
            labels: None,
            targets: None,
            clean_embeddings: None,
            target_embeddings: None,
        }
    }

    pub fn with_head(mut self, head: &'a TextHead) -> Self {
        self.head = Some(head);
        self
    }

    pub fn with_labels(mut self, labels: &'a [usize]) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_targets(mut self, targets: &'a [usize]) -> Self {
        self.targets = Some(targets);
        self
    }

    pub fn with_clean_embeddings(mut self, clean: &'a EmbeddingBatch<T>) -> Self {
        self.clean_embeddings = Some(clean);
        self
    }

    pub fn with_target_embeddings(mut self, targets: &'a EmbeddingBatch<T>) -> Self {
        self.target_embeddings = Some(targets);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult<T = f32> {
    pub adversarial: ImageBatch<T>,
    /// Mean over examples of the best objective seen so far, one entry for
    /// the starting point plus one per iteration.
    pub objective_trace: Vec<f64>,
    /// Best objective reached per example.
    pub best_objective: Vec<f64>,
    /// Per example: misclassified (`ce_untargeted`, `dlr_targeted`), hit
    /// the target (`ce_targeted`, `embedding_targeted`), or changed the zero-shot prediction (`embedding_max` with labels).
    pub success_mask: Vec<bool>,
    /// `max_i |x_adv_i - x_i|_∞ - epsilon`.
    pub linf_violation: f64,
}

impl<T> AttackResult<T> {
    pub fn success_count(&self) -> usize {
        self.success_mask.iter().filter(|s| **s).count()
    }

    /// Write `iteration,best_objective` rows.
    pub fn write_trace_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "iteration,best_objective")?;
        for (i, v) in self.objective_trace.iter().enumerate() {
            writeln!(out, "{i},{v}")?;
        }
        Ok(())
    }
}

/// Per-example outcome of one attack run.
pub(crate) struct ExampleOutcome<T> {
    pub adversarial: Vec<T>,
    pub trace: Vec<T>,
    pub best: T,
    pub success: bool,
}

/// Tracks the best iterate overall and the best successful iterate.
pub(crate) struct BestTracker<T> {
    pub best_x: Vec<T>,
    pub best_value: T,
    pub best_grad: Vec<T>,
    success_x: Option<(T, Vec<T>)>,
}

impl<T: Scalar> BestTracker<T> {
    pub fn new(x: &[T], eval: &Evaluation<T>) -> Self {
        let mut t = Self {
            best_x: x.to_vec(),
            best_value: eval.value,
            best_grad: eval.grad.clone().unwrap_or_default(),
            success_x: None,
        };
        t.note_success(x, eval);
        t
    }

    fn note_success(&mut self, x: &[T], eval: &Evaluation<T>) {
        if eval.success && self.success_x.as_ref().is_none_or(|(v, _)| eval.value > *v) {
            self.success_x = Some((eval.value, x.to_vec()));
        }
    }

    /// Returns `true` when `x` improves on the best value.
    pub fn update(&mut self, x: &[T], eval: &Evaluation<T>) -> bool {
        self.note_success(x, eval);
        if eval.value > self.best_value {
            self.best_value = eval.value;
            self.best_x.copy_from_slice(x);
            if let Some(g) = &eval.grad {
                self.best_grad.clone_from(g);
            }
            true
        } else {
            false
        }
    }

    pub fn succeeded(&self) -> bool {
        self.success_x.is_some()
    }

    /// Pads `trace` to `len` entries when the run stopped early.
    pub fn finish(self, mut trace: Vec<T>, len: usize) -> ExampleOutcome<T> {
        let last = *trace.last().expect("trace holds the start point");
        trace.resize(len, last);
        let success = self.success_x.is_some();
        let adversarial = match self.success_x {
            Some((_, x)) => x,
            None => self.best_x,
        };
        ExampleOutcome {
            adversarial,
            trace,
            best: self.best_value,
            success,
        }
    }
}

/// Resolved per-example inputs shared by PGD and APGD.
struct Prepared<T> {
    classes: Option<Vec<Vec<T>>>,
    captions: Option<Vec<Vec<T>>>,
    targets: Option<Vec<usize>>,
    target_rows: Option<Vec<Vec<T>>>,
}

fn prepare<T: Scalar>(encoder: &VisionEncoder<T>, images: &ImageBatch<T>, config: &AttackConfig, ctx: &ObjectiveContext<'_, T>) -> Result<Prepared<T>> {
    config.validate()?;
    let n = images.len();
    let objective = config.objective;
    if images.shape() != encoder.arch().input {
        return Err(Error::InputSpec(format!(
            "attack images are {:?}, encoder expects {:?}",
            images.shape(),
            encoder.arch().input
        )));
    }
    if objective.needs_head() && ctx.head.is_none() {
        return Err(Error::AttackConfig(format!("{objective:?} needs a text head")));
    }
    if let Some(head) = ctx.head {
        if head.dim() != encoder.embed_dim() {
            return Err(Error::Shape("text head dim differs from encoder dim".into()));
        }
    }
    if objective.needs_head() && !(ctx.temperature > 0.0) {
        return Err(Error::AttackConfig("temperature must be positive".into()));
    }
    if objective.needs_labels() {
        match ctx.labels {
            Some(l) if l.len() == n => {}
            Some(l) => return Err(Error::Shape(format!("{} labels for {n} images", l.len()))),
            None => return Err(Error::AttackConfig(format!("{objective:?} needs labels"))),
        }
    }
    if objective == Objective::DlrTargeted {
        let k = ctx.head.map(TextHead::num_classes).unwrap_or(0);
        if k < 4 {
            return Err(Error::UnsupportedObjective(format!(
                "targeted DLR needs at least 4 classes, got {k}"
            )));
        }
    }
    if objective == Objective::EmbeddingMax {
        match ctx.clean_embeddings {
            Some(c) if c.len() == n && c.dim() == encoder.embed_dim() => {}
            Some(_) => return Err(Error::Shape("clean embeddings do not match the batch".into())),
            None => return Err(Error::AttackConfig("embedding_max needs clean embeddings".into())),
        }
    }
    let targets = match config.target {
        None => None,
        Some(TargetSpec::Index(t)) => Some(vec![t; n]),
        Some(TargetSpec::PerExample) => match ctx.targets {
            Some(t) if t.len() == n => Some(t.to_vec()),
            Some(t) => return Err(Error::Shape(format!("{} targets for {n} images", t.len()))),
            None => return Err(Error::AttackConfig("per-example targets missing from context".into())),
        },
    };
    let classes = ctx.head.map(class_rows::<T>);
    let captions = ctx.head.and_then(|h| h.caption_embeddings()).map(|c| {
        c.rows()
            .map(|r| r.iter().map(|v| T::lit(*v as f64)).collect())
            .collect::<Vec<Vec<T>>>()
    });
    if let (Some(t), Some(k)) = (&targets, classes.as_ref().map(Vec::len)) {
        if objective != Objective::EmbeddingTargeted {
            if let Some(&bad) = t.iter().find(|&&t| t >= k) {
                return Err(Error::LabelOutOfRange { label: bad, classes: k });
            }
        }
    }
    let target_rows = if objective == Objective::EmbeddingTargeted {
        let rows: Vec<Vec<T>> = match (ctx.target_embeddings, &captions, &targets) {
            (Some(te), _, _) if te.len() == n && te.dim() == encoder.embed_dim() => {
                te.normalized()?.rows().map(<[T]>::to_vec).collect()
            }
            (Some(_), _, _) => return Err(Error::Shape("target embeddings do not match the batch".into())),
            (None, Some(caps), Some(t)) => {
                if let Some(&bad) = t.iter().find(|&&t| t >= caps.len()) {
                    return Err(Error::LabelOutOfRange { label: bad, classes: caps.len() });
                }
                t.iter().map(|&i| caps[i].clone()).collect()
            }
            _ => {
                return Err(Error::AttackConfig(
                    "embedding_targeted needs target embeddings or a caption bank".into(),
                ))
            }
        };
        Some(rows)
    } else {
        None
    };
    Ok(Prepared {
        classes,
        captions,
        targets,
        target_rows,
    })
}

fn run<T: Scalar>(
    encoder: &VisionEncoder<T>,
    images: &ImageBatch<T>,
    config: &AttackConfig,
    ctx: &ObjectiveContext<'_, T>,
    method: AttackMethod,
) -> Result<AttackResult<T>> {
    let prep = prepare(encoder, images, config, ctx)?;
    let eps = T::lit(config.epsilon);
    let inv_t = T::lit(1.0 / ctx.temperature.max(f64::MIN_POSITIVE));
    let clean_rows: Option<Vec<&[T]>> = ctx.clean_embeddings.map(|c| c.rows().collect());
    let outcomes: Vec<Result<ExampleOutcome<T>>> = (0..images.len())
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&i| {
            let objective = ExampleObjective {
                encoder,
                kind: config.objective,
                classes: prep.classes.as_deref(),
                inv_temperature: inv_t,
                label: ctx.labels.map(|l| l[i]),
                target: prep.targets.as_ref().map(|t| t[i]),
                clean: clean_rows.as_ref().map(|c| c[i]),
                target_embedding: prep.target_rows.as_ref().map(|t| t[i].as_slice()),
                captions: prep.captions.as_deref(),
            };
            let x = images.image(i);
            let start = if config.random_start {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut s: Vec<T> = x
                    .iter()
                    .map(|v| *v + T::lit(rng.random_range(-config.epsilon..=config.epsilon)))
                    .collect();
                project_into(&mut s, x, eps);
                s
            } else {
                x.to_vec()
            };
            match method {
                AttackMethod::Pgd => pgd::run_example(&objective, x, start, eps, T::lit(config.alpha), config.steps, config.stop_on_success),
                AttackMethod::Apgd => apgd::run_example(&objective, x, start, eps, config.steps, config.stop_on_success),
            }
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let n = outcomes.len() as f64;
    let trace_len = outcomes.iter().map(|o| o.trace.len()).max().unwrap_or(0);
    let objective_trace = (0..trace_len)
        .map(|t| {
            outcomes
                .iter()
                .map(|o| o.trace[t.min(o.trace.len() - 1)].to_f64().unwrap())
                .sum::<f64>()
                / n
        })
        .collect();
    let adversarial = ImageBatch::from_images(images.shape(), outcomes.iter().map(|o| o.adversarial.as_slice()))?;
    let linf_violation = adversarial.linf_distance(images) - config.epsilon;
    Ok(AttackResult {
        objective_trace,
        best_objective: outcomes.iter().map(|o| o.best.to_f64().unwrap()).collect(),
        success_mask: outcomes.iter().map(|o| o.success).collect(),
        adversarial,
        linf_violation,
    })
}

/// Projected gradient ascent with signed steps:
/// `x_{t+1} = Π(x_t + alpha · sign(∇L(x_t)))`, `sign(0) = 0`.
///
/// Returns the best iterate seen (the starting point counts), preferring
/// successful iterates when the objective defines success.
pub fn pgd<T: Scalar>(encoder: &VisionEncoder<T>, images: &ImageBatch<T>, config: &AttackConfig, ctx: &ObjectiveContext<'_, T>) -> Result<AttackResult<T>> {
    run(encoder, images, config, ctx, AttackMethod::Pgd)
}

/// Auto-PGD: momentum 0.75, initial step `2ε`, step halving with restart
/// from the best point at shrinking checkpoints.
pub fn apgd<T: Scalar>(encoder: &VisionEncoder<T>, images: &ImageBatch<T>, config: &AttackConfig, ctx: &ObjectiveContext<'_, T>) -> Result<AttackResult<T>> {
    if config.steps == 0 {
        return Err(Error::AttackConfig("apgd needs at least one step".into()));
    }
    run(encoder, images, config, ctx, AttackMethod::Apgd)
}

/// Dispatch on `config.method`.
pub fn attack<T: Scalar>(encoder: &VisionEncoder<T>, images: &ImageBatch<T>, config: &AttackConfig, ctx: &ObjectiveContext<'_, T>) -> Result<AttackResult<T>> {
    match config.method {
        AttackMethod::Pgd => pgd(encoder, images, config, ctx),
        AttackMethod::Apgd => apgd(encoder, images, config, ctx),
    }
}

pub(crate) fn signed_step<T: Scalar>(x: &[T], grad: &[T], step: T) -> Vec<T> {
    x.iter()
        .zip(grad)
        .map(|(v, g)| {
            let s = if *g > T::zero() {
                T::one()
            } else if *g < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            *v + step * s
        })
        .collect()
}
