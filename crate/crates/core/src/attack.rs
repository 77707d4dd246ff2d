//! Targeted segmentation attacks.
//!
//! Each iteration computes a perturbation `P_n` as the input gradient of the
//! model output summed under a seed mask, then takes the projected step
//! `X_{n+1} = clip(X_n + α_n P_n, 0, 1)`.
//!
//! * **SSM** (static mask): seed `S[c,i,j] = [target(i,j) = c]`.
//! * **ASM** (adaptive mask): the static seed restricted to pixels whose
//!   current predicted label still differs from the target.
//! * **ASMA**: ASM with the dynamic multiplier `α_n = β·IoU(target, Y_n) + τ`.
//!
//! The per-class sum of gradients is linear in the seed, so every variant
//! needs exactly one backward pass per iteration.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::mask::LabelMask;
use crate::metrics::{self, AccuracyReport, DistanceReport};
use crate::segnet::{discretize, Sample, SegNet};
use crate::tensor::{ops, Graph, NodeId, Tensor};

/// A differentiable segmentation model `g(θ, X)` with fixed parameters.
pub trait SegmentationModel {
    fn classes(&self) -> usize;

    /// Records the forward pass for `input` and returns the `M×H×W` logits.
    fn record_logits(&self, graph: &mut Graph, input: NodeId) -> Result<NodeId>;
}

impl SegmentationModel for SegNet {
    fn classes(&self) -> usize {
        SegNet::classes(self)
    }

    fn record_logits(&self, graph: &mut Graph, input: NodeId) -> Result<NodeId> {
        self.record(graph, input, false).map(|(logits, _)| logits)
    }
}

impl<M: SegmentationModel + ?Sized> SegmentationModel for &M {
    fn classes(&self) -> usize {
        (**self).classes()
    }

    fn record_logits(&self, graph: &mut Graph, input: NodeId) -> Result<NodeId> {
        (**self).record_logits(graph, input)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Ssm,
    Asm,
    Asma,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Ssm, Variant::Asm, Variant::Asma];

    pub fn adaptive(self) -> bool {
        !matches!(self, Variant::Ssm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ssm => "SSM",
            Variant::Asm => "ASM",
            Variant::Asma => "ASMA",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ssm" => Ok(Variant::Ssm),
            "asm" => Ok(Variant::Asm),
            "asma" | "asm+dpm" => Ok(Variant::Asma),
            _ => Err(invalid(alloc::format!("unknown attack variant `{s}`"))),
        }
    }
}

/// Which output of the network the perturbation is differentiated from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum GradientSource {
    /// Pre-softmax scores.
    #[default]
    Logits,
    /// Post-softmax scores.
    Probabilities,
}

impl fmt::Display for GradientSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradientSource::Logits => "logits",
            GradientSource::Probabilities => "probabilities",
        })
    }
}

impl FromStr for GradientSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(GradientSource::Logits),
            "probabilities" | "probs" => Ok(GradientSource::Probabilities),
            _ => Err(invalid(alloc::format!("unknown gradient source `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub variant: Variant,
    /// Fixed multiplier for SSM and ASM.
    pub alpha: f64,
    /// Dynamic multiplier slope (ASMA).
    pub beta: f64,
    /// Dynamic multiplier offset (ASMA).
    pub tau: f64,
    pub max_iters: usize,
    pub early_stop_iou: f64,
    pub gradient_source: GradientSource,
}

pub const DEFAULT_MAX_ITERS: usize = 500;
pub const DEFAULT_EARLY_STOP_IOU: f64 = 0.99;

impl AttackConfig {
    pub fn ssm(alpha: f64) -> Self {
        Self::fixed(Variant::Ssm, alpha)
    }

    pub fn asm(alpha: f64) -> Self {
        Self::fixed(Variant::Asm, alpha)
    }

    pub fn asma(beta: f64, tau: f64) -> Self {
        Self {
            variant: Variant::Asma,
            alpha: 0.0,
            beta,
            tau,
            max_iters: DEFAULT_MAX_ITERS,
            early_stop_iou: DEFAULT_EARLY_STOP_IOU,
            gradient_source: GradientSource::default(),
        }
    }

    fn fixed(variant: Variant, alpha: f64) -> Self {
        Self {
            variant,
            alpha,
            beta: 0.0,
            tau: 0.0,
            max_iters: DEFAULT_MAX_ITERS,
            early_stop_iou: DEFAULT_EARLY_STOP_IOU,
            gradient_source: GradientSource::default(),
        }
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_early_stop(mut self, iou: f64) -> Self {
        self.early_stop_iou = iou;
        self
    }

    pub fn with_gradient_source(mut self, source: GradientSource) -> Self {
        self.gradient_source = source;
        self
    }

    /// A zero `alpha` is accepted for SSM/ASM so the pipeline can be run as
    /// a no-op.
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be at least 1"));
        }
        if !(self.early_stop_iou > 0.0 && self.early_stop_iou <= 1.0) {
            return Err(invalid("early-stop IoU must lie in (0, 1]"));
        }
        match self.variant {
            Variant::Ssm | Variant::Asm => {
                if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
                    return Err(invalid("alpha must be finite and non-negative"));
                }
            }
            Variant::Asma => {
                if !(self.beta > 0.0 && self.beta.is_finite() && self.tau > 0.0 && self.tau.is_finite()) {
                    return Err(invalid("beta and tau must be finite and positive"));
                }
            }
        }
        Ok(())
    }

    /// Step size for an iterate whose prediction has `iou` against the target.
    pub fn multiplier(&self, iou: f64) -> f64 {
        match self.variant {
            Variant::Asma => dpm_multiplier(self.beta, self.tau, iou),
            _ => self.alpha,
        }
    }
}

/// Dynamic perturbation multiplier `β·iou + τ`.
pub fn dpm_multiplier(beta: f64, tau: f64, iou_now: f64) -> f64 {
    beta * iou_now + tau
}

/// Static seed: `S[c,i,j] = 1` iff `target(i,j) == c`.
pub fn ssm_seed(target: &LabelMask, classes: usize) -> Tensor {
    let plane = target.len();
    let mut seed = Tensor::zeros(&[classes, target.height(), target.width()]);
    let s = seed.data_mut();
    for (p, &t) in target.as_slice().iter().enumerate() {
        s[t as usize * plane + p] = 1.0;
    }
    seed
}

/// Adaptive seed: `S[c,i,j] = 1` iff `target(i,j) == c` and the current
/// prediction at `(i,j)` is not `c`. Also returns the number of active
/// pixels (those with a non-zero seed channel).
pub fn asm_seed(target: &LabelMask, prediction: &LabelMask, classes: usize) -> Result<(Tensor, usize)> {
    target.check_same(prediction, "asm_seed")?;
    let plane = target.len();
    let mut seed = Tensor::zeros(&[classes, target.height(), target.width()]);
    let s = seed.data_mut();
    let mut active = 0;
    for (p, (&t, &y)) in target.as_slice().iter().zip(prediction.as_slice()).enumerate() {
        if t != y {
            s[t as usize * plane + p] = 1.0;
            active += 1;
        }
    }
    Ok((seed, active))
}

/// `I[c,i,j] = 1` iff `prediction(i,j) != c`.
pub fn wrong_prediction_indicator(prediction: &LabelMask, classes: usize) -> Tensor {
    let plane = prediction.len();
    let mut ind = Tensor::ones(&[classes, prediction.height(), prediction.width()]);
    let d = ind.data_mut();
    for (p, &y) in prediction.as_slice().iter().enumerate() {
        d[y as usize * plane + p] = 0.0;
    }
    ind
}

/// One recorded forward pass at the current iterate.
struct Evaluation {
    graph: Graph,
    input: NodeId,
    output: NodeId,
    prediction: LabelMask,
}

fn evaluate<M: SegmentationModel>(model: &M, image: &Tensor, source: GradientSource) -> Result<Evaluation> {
    let mut graph = Graph::new();
    let input = graph.leaf(image.clone());
    let logits = model.record_logits(&mut graph, input)?;
    let (output, prediction) = match source {
        GradientSource::Logits => {
            let scores = ops::channel_softmax(graph.value(logits))?;
            (logits, discretize(&scores))
        }
        GradientSource::Probabilities => {
            let scores = graph.channel_softmax(logits)?;
            let pred = discretize(graph.value(scores));
            (scores, pred)
        }
    };
    Ok(Evaluation { graph, input, output, prediction })
}

fn input_gradient(eval: &Evaluation, seed: &Tensor) -> Result<Tensor> {
    let mut grads = eval.graph.backward(eval.output, seed)?;
    Ok(grads
        .take(eval.input)
        .unwrap_or_else(|| Tensor::zeros(eval.graph.value(eval.input).shape())))
}

fn check_target<M: SegmentationModel>(model: &M, image: &Tensor, target: &LabelMask) -> Result<()> {
    let (_, h, w) = image.dims3("attack")?;
    if (h, w) != target.dims() {
        return Err(Error::ShapeMismatch {
            op: "attack",
            dim: "target mask size",
            expected: h * w,
            found: target.len(),
        });
    }
    if target.max_label() as usize >= model.classes() {
        return Err(invalid("target mask holds a label outside the model's classes"));
    }
    Ok(())
}

/// `P_n = Σ_c ∇_x (g(θ, X_n)_c ⊙ [target = c])`.
pub fn ssm_perturbation<M: SegmentationModel>(
    model: &M,
    image: &Tensor,
    target: &LabelMask,
    source: GradientSource,
) -> Result<Tensor> {
    check_target(model, image, target)?;
    let eval = evaluate(model, image, source)?;
    input_gradient(&eval, &ssm_seed(target, model.classes()))
}

/// `P_n = Σ_c ∇_x (g(θ, X_n)_c ⊙ [target = c] ⊙ [argmax g(θ, X_n) ≠ c])`,
/// together with the number of active pixels.
pub fn asm_perturbation<M: SegmentationModel>(
    model: &M,
    image: &Tensor,
    target: &LabelMask,
    source: GradientSource,
) -> Result<(Tensor, usize)> {
    check_target(model, image, target)?;
    let eval = evaluate(model, image, source)?;
    adaptive_step(model, &eval, target)
}

fn adaptive_step<M: SegmentationModel>(model: &M, eval: &Evaluation, target: &LabelMask) -> Result<(Tensor, usize)> {
    let (seed, active) = asm_seed(target, &eval.prediction, model.classes())?;
    if active == 0 {
        return Ok((Tensor::zeros(eval.graph.value(eval.input).shape()), 0));
    }
    Ok((input_gradient(eval, &seed)?, active))
}

/// Snapshot of the attack at iterate `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackState {
    pub iteration: usize,
    pub image: Tensor,
    pub prediction: LabelMask,
    pub iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    /// Index `n` of the update `X_n → X_{n+1}`.
    pub iteration: usize,
    pub alpha: f64,
    /// Pixels of `X_n` whose predicted label differs from the target.
    pub active_pixels: usize,
    /// IoU of `X_{n+1}`'s prediction against the target.
    pub iou: f64,
    /// L2 distance of `X_{n+1}` from the source image.
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub source_id: u32,
    pub config: AttackConfig,
    /// Best iterate: highest IoU, ties broken by lower L2.
    pub adversarial: Tensor,
    pub prediction: LabelMask,
    pub best_iteration: usize,
    pub distance: DistanceReport,
    pub accuracy: AccuracyReport,
    /// IoU of the clean prediction against the target.
    pub initial_iou: f64,
    pub initial_active: usize,
    /// Mismatched pixels of the last evaluated iterate.
    pub final_active: usize,
    pub trace: Vec<TraceEntry>,
    /// Stopped because the IoU threshold was reached.
    pub converged: bool,
}

impl AttackReport {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    /// `adversarial - source`.
    pub fn perturbation(&self, source: &Tensor) -> Result<Tensor> {
        self.adversarial.sub(source)
    }
}

pub fn run_attack<M: SegmentationModel>(
    model: &M,
    source: &Sample,
    target: &LabelMask,
    config: &AttackConfig,
) -> Result<AttackReport> {
    run_attack_observed(model, source, target, config, |_| {})
}

/// As [`run_attack`], calling `observe` on every evaluated iterate,
/// starting with the clean image.
pub fn run_attack_observed<M: SegmentationModel>(
    model: &M,
    source: &Sample,
    target: &LabelMask,
    config: &AttackConfig,
    mut observe: impl FnMut(&AttackState),
) -> Result<AttackReport> {
    config.validate()?;
    check_target(model, &source.image, target)?;
    let classes = model.classes();
    let original = &source.image;

    let mut state = AttackState {
        iteration: 0,
        image: original.clone(),
        prediction: LabelMask::filled(0, 0, 0),
        iou: 0.0,
    };
    let mut eval = evaluate(model, &state.image, config.gradient_source)?;
    state.prediction = eval.prediction.clone();
    state.iou = metrics::iou(target, &state.prediction)?;
    observe(&state);

    let initial_iou = state.iou;
    let initial_active = target.mismatches(&state.prediction)?;
    let mut best = (state.iou, 0.0f64, 0usize, state.image.clone(), state.prediction.clone());
    let mut trace = Vec::new();
    let mut converged = state.iou >= config.early_stop_iou;

    while !converged && state.iteration < config.max_iters {
        let n = state.iteration;
        let (perturbation, active) = match config.variant {
            Variant::Ssm => {
                let p = input_gradient(&eval, &ssm_seed(target, classes))?;
                (p, target.mismatches(&state.prediction)?)
            }
            Variant::Asm | Variant::Asma => adaptive_step(model, &eval, target)?,
        };
        if !perturbation.is_finite() {
            return Err(Error::NonFinitePerturbation { iteration: n });
        }
        let alpha = config.multiplier(state.iou);
        let step = alpha as f32;
        let next = state
            .image
            .zip_map(&perturbation, "attack step", |x, p| (x + step * p).clamp(0.0, 1.0))?;

        eval = evaluate(model, &next, config.gradient_source)?;
        state = AttackState {
            iteration: n + 1,
            prediction: eval.prediction.clone(),
            iou: metrics::iou(target, &eval.prediction)?,
            image: next,
        };
        observe(&state);

        let l2 = metrics::l2_distance(original, &state.image)?;
        trace.push(TraceEntry { iteration: n, alpha, active_pixels: active, iou: state.iou, l2 });
        if state.iou > best.0 || (state.iou == best.0 && l2 < best.1) {
            best = (state.iou, l2, state.iteration, state.image.clone(), state.prediction.clone());
        }
        converged = state.iou >= config.early_stop_iou;
    }

    let (_, _, best_iteration, adversarial, prediction) = best;
    Ok(AttackReport {
        source_id: source.id,
        config: *config,
        distance: DistanceReport::between(original, &adversarial)?,
        accuracy: AccuracyReport::between(target, &prediction)?,
        adversarial,
        prediction,
        best_iteration,
        initial_iou,
        initial_active,
        final_active: target.mismatches(&state.prediction)?,
        trace,
        converged,
    })
}
