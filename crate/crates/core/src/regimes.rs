//! Training regimes as interchangeable per-batch step functions.
//!
//! Every step runs the same decoder skeleton (state update, attention,
//! context, output head); the regimes differ only in two wires:
//!
//! - where the decoder *history* comes from — the reference output,
//!   the model's own generated output, or a per-token/per-sequence coin
//!   between them;
//! - where the *alignment* used for the context vector comes from — the
//!   model's own attention or a reference alignment produced by a teacher
//!   running in reference-history mode.
//!
//! Teacher forcing is (reference, own); free running is (generated, own);
//! scheduled sampling mixes the history; attention forcing is
//! (generated, reference) plus a KL penalty pulling the student's own
//! alignment toward the reference; the modified variant is
//! (reference, reference) for tasks where output order is ambiguous.
//! Professor forcing instead runs both pure modes and pushes their
//! per-step behavior (state + alignment) to be indistinguishable to a
//! recurrent discriminator.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    self, gru_step, GruParams, GruVars, ModelConfig, ModelParams, ModelVars, TargetKind,
};
use crate::tape::{grad_check, Tape, Var};
use crate::tasks::{AlignedPair, Target};
use crate::tensor::{argmax, Tensor};

/// How a generated history token is drawn from the predicted distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HistoryMode {
    Argmax,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Linear,
    Exponential,
    InverseSigmoid,
}

/// Decay schedule for the scheduled-sampling mixing probability. Starts at
/// 1, never increases, never drops below `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub total_steps: usize,
    pub floor: f64,
    /// Exponential base, or the inverse-sigmoid sharpness.
    pub k: f64,
}

impl ScheduleSpec {
    pub fn linear(total_steps: usize) -> Self {
        ScheduleSpec { kind: ScheduleKind::Linear, total_steps, floor: 0.0, k: 0.0 }
    }

    pub fn epsilon(&self, step: usize) -> f64 {
        let eps = match self.kind {
            ScheduleKind::Linear => {
                if self.total_steps == 0 {
                    0.0
                } else {
                    1.0 - (step as f64 / self.total_steps as f64).min(1.0)
                }
            }
            ScheduleKind::Exponential => self.k.powi(step as i32),
            // scaled so that epsilon(0) = 1 exactly
            ScheduleKind::InverseSigmoid => (self.k + 1.0) / (self.k + (step as f64 / self.k).exp()),
        };
        eps.max(self.floor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.floor < 0.0 || self.floor > 1.0 {
            return Err(Error::Config("schedule floor must be in [0, 1]".into()));
        }
        match self.kind {
            ScheduleKind::Linear if self.total_steps == 0 => {
                Err(Error::Config("linear schedule needs total_steps > 0".into()))
            }
            ScheduleKind::Exponential if !(0.0..=1.0).contains(&self.k) => {
                Err(Error::Config("exponential schedule base must be in (0, 1]".into()))
            }
            ScheduleKind::InverseSigmoid if self.k <= 0.0 => {
                Err(Error::Config("inverse-sigmoid schedule needs k > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Tagged selection of a training regime plus its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RegimeConfig {
    TeacherForcing,
    FreeRunning {
        mode: HistoryMode,
    },
    ScheduledSamplingToken {
        schedule: ScheduleSpec,
        mode: HistoryMode,
    },
    ScheduledSamplingSeq {
        schedule: ScheduleSpec,
        mode: HistoryMode,
    },
    AttentionForcing {
        gamma: f64,
        tied: bool,
        mode: HistoryMode,
    },
    ModifiedAttentionForcing {
        gamma: f64,
        tied: bool,
    },
    ProfessorForcing {
        lambda_free: f64,
        lambda_teacher: f64,
        use_teacher_term: bool,
        mode: HistoryMode,
    },
}

impl RegimeConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            RegimeConfig::AttentionForcing { gamma, .. }
            | RegimeConfig::ModifiedAttentionForcing { gamma, .. } => {
                if *gamma < 0.0 {
                    return Err(Error::Config("gamma must be nonnegative".into()));
                }
            }
            RegimeConfig::ProfessorForcing { lambda_free, lambda_teacher, .. } => {
                if *lambda_free < 0.0 || *lambda_teacher < 0.0 {
                    return Err(Error::Config("adversarial weights must be nonnegative".into()));
                }
            }
            RegimeConfig::ScheduledSamplingToken { schedule, .. }
            | RegimeConfig::ScheduledSamplingSeq { schedule, .. } => schedule.validate()?,
            _ => {}
        }
        Ok(())
    }

    /// Does this regime need a separately trained teacher model?
    pub fn needs_teacher(&self) -> bool {
        matches!(
            self,
            RegimeConfig::AttentionForcing { tied: false, .. }
                | RegimeConfig::ModifiedAttentionForcing { tied: false, .. }
        )
    }

    pub fn needs_discriminator(&self) -> bool {
        matches!(self, RegimeConfig::ProfessorForcing { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            RegimeConfig::TeacherForcing => "teacher_forcing",
            RegimeConfig::FreeRunning { .. } => "free_running",
            RegimeConfig::ScheduledSamplingToken { .. } => "scheduled_sampling_token",
            RegimeConfig::ScheduledSamplingSeq { .. } => "scheduled_sampling_seq",
            RegimeConfig::AttentionForcing { .. } => "attention_forcing",
            RegimeConfig::ModifiedAttentionForcing { .. } => "modified_attention_forcing",
            RegimeConfig::ProfessorForcing { .. } => "professor_forcing",
        }
    }
}

/// Scalar results of one regime step. Gradients corresponding to `total`
/// are written into the parameters' grad buffers.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// Mean per-token NLL (discrete) or mean per-frame L1 (continuous).
    pub loss_y: f64,
    /// Mean per-step alignment KL (attention forcing only).
    pub loss_alpha: Option<f64>,
    /// Stop-predictor BCE (continuous targets only).
    pub stop_loss: Option<f64>,
    /// The scalar that was differentiated.
    pub total: f64,
}

// ── Shared rollout ──────────────────────────────────────────────────────

#[derive(Clone, Copy)]
enum HistorySource<'a> {
    Reference,
    Generated(HistoryMode),
    /// Per-token coin: reference with probability `eps`.
    Mixed { eps: f64, mode: HistoryMode },
    /// Replay a recorded history verbatim. Finite-difference checks pin the
    /// fed values this way so that stop-gradient boundaries are excluded by
    /// construction (a perturbed model would otherwise feed itself different
    /// frames, which the analytic gradient deliberately ignores).
    PinnedTokens(&'a [usize]),
    PinnedFrames(&'a [Vec<f64>]),
}

/// The history actually fed into the decoder during a rollout, one entry
/// per step after the first; replayable via the pinned sources.
#[derive(Clone, Debug, Default)]
pub(crate) struct FedHistory {
    tokens: Vec<usize>,
    frames: Vec<Vec<f64>>,
}

impl FedHistory {
    fn as_source(&self, discrete: bool) -> HistorySource<'_> {
        if discrete {
            HistorySource::PinnedTokens(&self.tokens)
        } else {
            HistorySource::PinnedFrames(&self.frames)
        }
    }
}

enum AlignmentSource<'a> {
    Own,
    Reference(&'a [Var]),
}

struct Rollout {
    /// Per-example mean (per token / per frame) output loss.
    loss_y: Var,
    /// Per-example mean stop BCE, continuous targets only.
    stop_bce: Option<Var>,
    /// The model's own alignment, one row per decode step.
    alpha_rows: Vec<Var>,
    /// Per-step `concat(s_t, alpha_t padded to max_src_len)`, when requested.
    behavior: Vec<Var>,
    /// What the decoder was actually fed, for pinned replay.
    fed: FedHistory,
}

fn nll_of(tape: &mut Tape, dist: Var, target: usize) -> Result<Var> {
    let p = tape.slice(dist, target, 1)?;
    let p = tape.clamp_min(p, 1e-12)?;
    let lp = tape.log(p)?;
    tape.scale(lp, -1.0)
}

fn bce_of(tape: &mut Tape, prob: Var, positive: bool) -> Result<Var> {
    let p = if positive {
        prob
    } else {
        let one = tape.constant(Tensor::scalar(1.0));
        tape.sub(one, prob)?
    };
    let p = tape.clamp_min(p, 1e-12)?;
    let lp = tape.log(p)?;
    tape.scale(lp, -1.0)
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn pick_token(mode: HistoryMode, probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    match mode {
        HistoryMode::Argmax => argmax(probs),
        HistoryMode::Sample => sample_index(probs, rng),
    }
}

/// Unrolls the decoder over one example. The history and alignment wiring
/// selects the regime; everything else is shared.
fn rollout(
    tape: &mut Tape,
    vars: &ModelVars,
    pair: &AlignedPair,
    history: HistorySource<'_>,
    alignment: AlignmentSource<'_>,
    rng: &mut ChaCha8Rng,
    collect_behavior: bool,
) -> Result<Rollout> {
    let cfg = vars.cfg.clone();
    let l = pair.src.len();
    let h = model::encode(tape, vars, &pair.src)?;
    let keys = model::attention_keys(tape, vars, h)?;

    let steps = match (&cfg.target, &pair.tgt) {
        (TargetKind::Discrete { .. }, Target::Tokens(toks)) => toks.len() + 1,
        (TargetKind::Continuous { reduction, .. }, Target::Frames(f)) => {
            f.shape()[0].div_ceil(*reduction)
        }
        _ => return Err(Error::contract("model target kind does not match the dataset")),
    };
    if let AlignmentSource::Reference(rows) = &alignment {
        if rows.len() != steps {
            return Err(Error::contract(format!(
                "reference alignment has {} rows, rollout needs {steps}",
                rows.len()
            )));
        }
    }

    let mut s = model::initial_state(tape, &cfg);
    let mut alpha_own = model::initial_alignment(tape, l);
    let mut y_prev = model::start_input(tape, vars)?;
    let mut alpha_rows = Vec::with_capacity(steps);
    let mut behavior = Vec::new();
    let mut loss_terms = Vec::with_capacity(steps);
    let mut stop_terms = Vec::new();
    let mut fed = FedHistory::default();

    for t in 0..steps {
        s = model::decoder_step(tape, vars, s, y_prev)?;
        let alpha_hat = model::attend_with_keys(tape, vars, s, keys, alpha_own)?;
        let alpha_used = match &alignment {
            AlignmentSource::Own => alpha_hat,
            AlignmentSource::Reference(rows) => rows[t],
        };
        let c = model::context(tape, alpha_used, h)?;
        alpha_rows.push(alpha_hat);
        alpha_own = alpha_hat;

        if collect_behavior {
            let beta = if l < cfg.max_src_len {
                let pad = tape.constant(Tensor::zeros(&[cfg.max_src_len - l]));
                let padded = tape.concat(&[alpha_hat, pad], 0)?;
                tape.concat(&[s, padded], 0)?
            } else {
                tape.concat(&[s, alpha_hat], 0)?
            };
            behavior.push(beta);
        }

        match (&cfg.target, &pair.tgt) {
            (TargetKind::Discrete { .. }, Target::Tokens(toks)) => {
                let dist = model::output_head_categorical(tape, vars, s, c)?;
                let target = if t < toks.len() { toks[t] } else { cfg.eos() };
                loss_terms.push(nll_of(tape, dist, target)?);

                if t + 1 < steps {
                    let next = match history {
                        HistorySource::Reference => toks[t],
                        HistorySource::Generated(mode) => {
                            pick_token(mode, tape.value(dist).data(), rng)
                        }
                        HistorySource::Mixed { eps, mode } => {
                            if rng.gen::<f64>() < eps {
                                toks[t]
                            } else {
                                pick_token(mode, tape.value(dist).data(), rng)
                            }
                        }
                        HistorySource::PinnedTokens(pins) => pins[t],
                        HistorySource::PinnedFrames(_) => {
                            return Err(Error::contract("frame history on a discrete rollout"))
                        }
                    };
                    fed.tokens.push(next);
                    y_prev = model::embed_history_token(tape, vars, next)?;
                }
            }
            (TargetKind::Continuous { frame_dim, reduction }, Target::Frames(frames)) => {
                let (frame_dim, reduction) = (*frame_dim, *reduction);
                let block = model::output_head_continuous(tape, vars, s, c)?;
                let first = t * reduction;
                let valid = reduction.min(frames.shape()[0] - first);
                let gen_rows = tape.slice(block, 0, valid)?;
                let ref_rows: Vec<f64> =
                    frames.data()[first * frame_dim..(first + valid) * frame_dim].to_vec();
                let ref_t =
                    tape.constant(Tensor::from_vec(vec![valid, frame_dim], ref_rows.clone())?);
                let diff = tape.sub(gen_rows, ref_t)?;
                let dist = tape.abs(diff)?;
                loss_terms.push(tape.sum(dist)?);

                let logit = model::stop_logit(tape, vars, s, c)?;
                let prob = tape.sigmoid(logit)?;
                stop_terms.push(bce_of(tape, prob, t + 1 == steps)?);

                if t + 1 < steps {
                    let next: Vec<f64> = match history {
                        HistorySource::Reference => {
                            ref_rows[(valid - 1) * frame_dim..].to_vec()
                        }
                        // mixed history degenerates to a per-block coin for
                        // frame targets; generated frames are detached so no
                        // gradient crosses the history boundary
                        HistorySource::Generated(_) => {
                            tape.value(block).row(valid - 1).to_vec()
                        }
                        HistorySource::Mixed { eps, .. } => {
                            if rng.gen::<f64>() < eps {
                                ref_rows[(valid - 1) * frame_dim..].to_vec()
                            } else {
                                tape.value(block).row(valid - 1).to_vec()
                            }
                        }
                        HistorySource::PinnedFrames(pins) => pins[t].clone(),
                        HistorySource::PinnedTokens(_) => {
                            return Err(Error::contract("token history on a frame rollout"))
                        }
                    };
                    fed.frames.push(next.clone());
                    y_prev = tape.constant(Tensor::vector(next));
                }
            }
            _ => unreachable!("checked above"),
        }
    }

    let sum = tape.concat(&loss_terms, 0)?;
    let sum = tape.sum(sum)?;
    let denom = match &pair.tgt {
        Target::Tokens(_) => steps as f64,
        Target::Frames(f) => f.shape()[0] as f64,
    };
    let loss_y = tape.scale(sum, 1.0 / denom)?;
    let stop_bce = if stop_terms.is_empty() {
        None
    } else {
        let s = tape.concat(&stop_terms, 0)?;
        let s = tape.sum(s)?;
        Some(tape.scale(s, 1.0 / stop_terms.len() as f64)?)
    };
    Ok(Rollout { loss_y, stop_bce, alpha_rows, behavior, fed })
}

fn batch_mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let stacked = tape.concat(terms, 0)?;
    tape.mean(stacked)
}

/// Row KL divergence `sum_l p log(p / q)` with both operands clamped at
/// 1e-12 before the log, so one-hot references stay finite.
fn kl_row(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let pc = tape.clamp_min(p, 1e-12)?;
    let qc = tape.clamp_min(q, 1e-12)?;
    let lp = tape.log(pc)?;
    let lq = tape.log(qc)?;
    let diff = tape.sub(lp, lq)?;
    let weighted = tape.mul(p, diff)?;
    tape.sum(weighted)
}

fn write_model_grads(tape: &Tape, vars: &ModelVars, params: &mut ModelParams) {
    for ((_, t), v) in params.named_tensors_mut().into_iter().zip(vars.vars_in_order()) {
        let g = tape
            .grad_of(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(g);
    }
}

fn check_batch(batch: &[AlignedPair]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    Ok(())
}

// ── Single-model regimes ────────────────────────────────────────────────

struct SingleLoss {
    loss_y: Var,
    stop: Option<Var>,
    total: Var,
    fed: Vec<FedHistory>,
}

fn build_single_loss<'a>(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &[AlignedPair],
    history: impl Fn(usize, &mut ChaCha8Rng) -> HistorySource<'a>,
    rng: &mut ChaCha8Rng,
) -> Result<SingleLoss> {
    let mut losses = Vec::with_capacity(batch.len());
    let mut stops = Vec::new();
    let mut fed = Vec::with_capacity(batch.len());
    for (i, pair) in batch.iter().enumerate() {
        let source = history(i, rng);
        let out = rollout(tape, vars, pair, source, AlignmentSource::Own, rng, false)?;
        losses.push(out.loss_y);
        fed.push(out.fed);
        if let Some(s) = out.stop_bce {
            stops.push(s);
        }
    }
    let loss_y = batch_mean(tape, &losses)?;
    let stop = if stops.is_empty() { None } else { Some(batch_mean(tape, &stops)?) };
    let total = match stop {
        Some(s) => tape.add(loss_y, s)?,
        None => loss_y,
    };
    Ok(SingleLoss { loss_y, stop, total, fed })
}

fn run_single_regime<'a>(
    batch: &[AlignedPair],
    params: &mut ModelParams,
    history: impl Fn(usize, &mut ChaCha8Rng) -> HistorySource<'a>,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    check_batch(batch)?;
    let mut tape = Tape::new();
    let vars = ModelVars::bind(params, &mut tape, true);
    let parts = build_single_loss(&mut tape, &vars, batch, history, rng)?;
    tape.backward(parts.total)?;
    write_model_grads(&tape, &vars, params);
    Ok(StepOutput {
        loss_y: tape.value(parts.loss_y).item(),
        loss_alpha: None,
        stop_loss: parts.stop.map(|s| tape.value(s).item()),
        total: tape.value(parts.total).item(),
    })
}

/// History = reference output; the classical maximum-likelihood regime.
pub fn teacher_forcing_step(batch: &[AlignedPair], params: &mut ModelParams) -> Result<StepOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // never consumed
    run_single_regime(batch, params, |_, _| HistorySource::Reference, &mut rng)
}

/// History = the model's own output (argmax or sampled); the loss is still
/// the NLL of the reference at every step. Gradients do not cross the
/// token-choice boundary.
pub fn free_running_step(
    batch: &[AlignedPair],
    params: &mut ModelParams,
    mode: HistoryMode,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    run_single_regime(batch, params, move |_, _| HistorySource::Generated(mode), rng)
}

/// Per-token coin: reference history with probability `epsilon(step_index)`,
/// generated otherwise.
pub fn scheduled_sampling_token_step(
    batch: &[AlignedPair],
    params: &mut ModelParams,
    step_index: usize,
    schedule: &ScheduleSpec,
    mode: HistoryMode,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    schedule.validate()?;
    let eps = schedule.epsilon(step_index);
    run_single_regime(batch, params, move |_, _| HistorySource::Mixed { eps, mode }, rng)
}

/// One coin per sequence instead of per token.
pub fn scheduled_sampling_seq_step(
    batch: &[AlignedPair],
    params: &mut ModelParams,
    step_index: usize,
    schedule: &ScheduleSpec,
    mode: HistoryMode,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    schedule.validate()?;
    let eps = schedule.epsilon(step_index);
    run_single_regime(
        batch,
        params,
        move |_, rng| {
            if rng.gen::<f64>() < eps {
                HistorySource::Reference
            } else {
                HistorySource::Generated(mode)
            }
        },
        rng,
    )
}

/// Sequence-level scheduled sampling with the per-sequence choices pinned
/// by the caller; the oracle route for testing the coin semantics.
pub fn scheduled_sampling_seq_step_with_coins(
    batch: &[AlignedPair],
    params: &mut ModelParams,
    coins: &[bool],
    mode: HistoryMode,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    if coins.len() != batch.len() {
        return Err(Error::contract("one coin per sequence required"));
    }
    let coins = coins.to_vec();
    run_single_regime(
        batch,
        params,
        move |i, _| {
            if coins[i] {
                HistorySource::Reference
            } else {
                HistorySource::Generated(mode)
            }
        },
        rng,
    )
}

// ── Attention forcing ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct AfOptions {
    pub gamma: f64,
    /// Reference history instead of generated history (the variant for
    /// tasks with ambiguous output order).
    pub modified: bool,
    pub mode: HistoryMode,
}

struct AfLoss {
    loss_y: Var,
    loss_alpha: Var,
    stop: Option<Var>,
    total: Var,
    fed: Vec<FedHistory>,
}

fn build_af_loss(
    tape: &mut Tape,
    student: &ModelVars,
    teacher: &ModelVars,
    batch: &[AlignedPair],
    opts: AfOptions,
    pinned_student: Option<&[FedHistory]>,
    rng: &mut ChaCha8Rng,
) -> Result<AfLoss> {
    let discrete = matches!(student.cfg.target, TargetKind::Discrete { .. });
    let mut losses = Vec::with_capacity(batch.len());
    let mut kls = Vec::with_capacity(batch.len());
    let mut stops = Vec::new();
    let mut fed = Vec::with_capacity(batch.len());
    for (i, pair) in batch.iter().enumerate() {
        // the reference alignment comes from the teacher running with
        // reference history and its own attention
        let teacher_out = rollout(
            tape,
            teacher,
            pair,
            HistorySource::Reference,
            AlignmentSource::Own,
            rng,
            false,
        )?;
        let history = match pinned_student {
            Some(pins) => pins[i].as_source(discrete),
            None if opts.modified => HistorySource::Reference,
            None => HistorySource::Generated(opts.mode),
        };
        let student_out = rollout(
            tape,
            student,
            pair,
            history,
            AlignmentSource::Reference(&teacher_out.alpha_rows),
            rng,
            false,
        )?;
        losses.push(student_out.loss_y);
        fed.push(student_out.fed);
        if let Some(s) = student_out.stop_bce {
            stops.push(s);
        }

        let mut step_kls = Vec::with_capacity(student_out.alpha_rows.len());
        for (p, q) in teacher_out.alpha_rows.iter().zip(&student_out.alpha_rows) {
            step_kls.push(kl_row(tape, *p, *q)?);
        }
        let sum = tape.concat(&step_kls, 0)?;
        let sum = tape.sum(sum)?;
        kls.push(tape.scale(sum, 1.0 / step_kls.len() as f64)?);
    }
    let loss_y = batch_mean(tape, &losses)?;
    let loss_alpha = batch_mean(tape, &kls)?;
    let stop = if stops.is_empty() { None } else { Some(batch_mean(tape, &stops)?) };
    let weighted = tape.scale(loss_alpha, opts.gamma)?;
    let mut total = tape.add(loss_y, weighted)?;
    if let Some(s) = stop {
        total = tape.add(total, s)?;
    }
    Ok(AfLoss { loss_y, loss_alpha, stop, total, fed })
}

fn af_step(
    batch: &[AlignedPair],
    student: &mut ModelParams,
    teacher: Option<&ModelParams>,
    opts: AfOptions,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    check_batch(batch)?;
    if opts.gamma < 0.0 {
        return Err(Error::contract("gamma must be nonnegative"));
    }
    if let Some(t) = teacher {
        if t.cfg.src_vocab != student.cfg.src_vocab || t.cfg.target != student.cfg.target {
            return Err(Error::contract(
                "teacher and student disagree on vocabulary or target kind",
            ));
        }
    }
    let mut tape = Tape::new();
    let student_vars = ModelVars::bind(student, &mut tape, true);
    // tied mode shares one parameter set: the teacher pass reuses the
    // student's (tracked) leaves and the joint loss trains them together
    let teacher_vars = match teacher {
        Some(t) => ModelVars::bind(t, &mut tape, false),
        None => student_vars.clone(),
    };
    let parts = build_af_loss(&mut tape, &student_vars, &teacher_vars, batch, opts, None, rng)?;
    tape.backward(parts.total)?;
    write_model_grads(&tape, &student_vars, student);
    Ok(StepOutput {
        loss_y: tape.value(parts.loss_y).item(),
        loss_alpha: Some(tape.value(parts.loss_alpha).item()),
        stop_loss: parts.stop.map(|s| tape.value(s).item()),
        total: tape.value(parts.total).item(),
    })
}

/// Attention forcing: the student runs on its own generated history, but
/// its context vector is computed from the teacher's reference alignment;
/// the total loss is `L_y + gamma * L_alpha` where `L_alpha` is the KL from
/// the reference alignment to the student's own. `teacher = None` ties the
/// two parameter sets together.
pub fn attention_forcing_step(
    batch: &[AlignedPair],
    student: &mut ModelParams,
    teacher: Option<&ModelParams>,
    gamma: f64,
    mode: HistoryMode,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    af_step(batch, student, teacher, AfOptions { gamma, modified: false, mode }, rng)
}

/// Attention forcing with reference output history: for tasks where several
/// output orders are valid, the generated history can disagree with the
/// reference ordering, so the state is driven by the reference instead.
pub fn modified_attention_forcing_step(
    batch: &[AlignedPair],
    student: &mut ModelParams,
    teacher: Option<&ModelParams>,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    af_step(
        batch,
        student,
        teacher,
        AfOptions { gamma, modified: true, mode: HistoryMode::Argmax },
        rng,
    )
}

/// `sum_t sum_l ref log(ref / gen)` over two row-stochastic matrices of
/// equal shape, with generated entries clamped at 1e-12 before the log.
pub fn alignment_kl_loss(alpha_ref: &Tensor, alpha_gen: &Tensor) -> Result<f64> {
    if alpha_ref.shape() != alpha_gen.shape() {
        return Err(Error::contract(format!(
            "alignment shapes differ: {:?} vs {:?}",
            alpha_ref.shape(),
            alpha_gen.shape()
        )));
    }
    if alpha_ref.shape().len() != 2 {
        return Err(Error::contract("alignment matrices must be 2-D"));
    }
    for m in [alpha_ref, alpha_gen] {
        for r in 0..m.shape()[0] {
            let row = m.row(r);
            if row.iter().any(|&v| v < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("row {r} is not on the simplex")));
            }
        }
    }
    let mut total = 0.0;
    for (&p, &q) in alpha_ref.data().iter().zip(alpha_gen.data()) {
        if p > 0.0 {
            total += p * (p.ln() - q.max(1e-12).ln());
        }
    }
    Ok(total)
}

// ── Professor forcing ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    /// Width of one behavior vector: dec_hidden + max_src_len.
    pub input_dim: usize,
    pub hidden: usize,
}

/// Recurrent classifier over per-step behavior vectors
/// `beta_t = concat(s_t, alpha_t)`; outputs the probability that the
/// sequence was produced in teacher-forcing mode.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub cfg: DiscConfig,
    pub gru: GruParams,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl DiscriminatorParams {
    pub fn new(cfg: DiscConfig, rng: &mut impl Rng) -> Self {
        DiscriminatorParams {
            gru: GruParams::new(cfg.input_dim, cfg.hidden, rng),
            w_out: Tensor::glorot(&[cfg.hidden, 1], rng),
            b_out: Tensor::zeros(&[1]),
            cfg,
        }
    }

    /// Sized to classify behavior sequences of `model`.
    pub fn for_model(model: &ModelConfig, hidden: usize, rng: &mut impl Rng) -> Self {
        let input_dim = model.dec_hidden + model.max_src_len;
        DiscriminatorParams::new(DiscConfig { input_dim, hidden }, rng)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .gru
            .fields()
            .into_iter()
            .map(|(n, t)| (format!("disc.gru.{n}"), t))
            .collect();
        out.push(("disc.w_out".into(), &self.w_out));
        out.push(("disc.b_out".into(), &self.b_out));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .gru
            .fields_mut()
            .into_iter()
            .map(|(n, t)| (format!("disc.gru.{n}"), t))
            .collect();
        out.push(("disc.w_out".into(), &mut self.w_out));
        out.push(("disc.b_out".into(), &mut self.b_out));
        out
    }
}

#[derive(Clone, Copy)]
struct DiscVars {
    gru: GruVars,
    w_out: Var,
    b_out: Var,
    hidden: usize,
}

impl DiscVars {
    fn bind(p: &DiscriminatorParams, tape: &mut Tape, tracked: bool) -> Self {
        DiscVars {
            gru: GruVars::bind(&p.gru, tape, tracked),
            w_out: tape.leaf(p.w_out.clone(), tracked),
            b_out: tape.leaf(p.b_out.clone(), tracked),
            hidden: p.cfg.hidden,
        }
    }

    fn vars_in_order(&self) -> Vec<Var> {
        let g = &self.gru;
        let mut out = vec![g.wz, g.uz, g.bz, g.wr, g.ur, g.br, g.wn, g.un, g.bn];
        out.extend([self.w_out, self.b_out]);
        out
    }
}

fn disc_forward(tape: &mut Tape, disc: &DiscVars, behavior: &[Var]) -> Result<Var> {
    let mut state = tape.constant(Tensor::zeros(&[disc.hidden]));
    for &beta in behavior {
        state = gru_step(tape, &disc.gru, state, beta)?;
    }
    let logit = tape.matmul(state, disc.w_out)?;
    let logit = tape.add(logit, disc.b_out)?;
    tape.sigmoid(logit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfConfig {
    pub lambda_free: f64,
    pub lambda_teacher: f64,
    pub use_teacher_term: bool,
    pub mode: HistoryMode,
}

#[derive(Debug, Clone, Copy)]
pub struct PfOutput {
    /// Generator-side losses; `total` is what the generator grads realize.
    pub generator: StepOutput,
    /// `-log f(tf) - log(1 - f(fr))`, averaged over the batch.
    pub disc_loss: f64,
    pub adv_free: f64,
    pub adv_teacher: Option<f64>,
}

struct PfGenLoss {
    nll: Var,
    stop: Option<Var>,
    adv_free: Var,
    adv_teacher: Option<Var>,
    total: Var,
    fed: Vec<FedHistory>,
}

fn build_pf_gen_loss(
    tape: &mut Tape,
    gen: &ModelVars,
    disc: &DiscVars,
    batch: &[AlignedPair],
    cfg: &PfConfig,
    pinned_fr: Option<&[FedHistory]>,
    rng: &mut ChaCha8Rng,
) -> Result<PfGenLoss> {
    let discrete = matches!(gen.cfg.target, TargetKind::Discrete { .. });
    let mut nlls = Vec::new();
    let mut stops = Vec::new();
    let mut free_terms = Vec::new();
    let mut teacher_terms = Vec::new();
    let mut fed = Vec::with_capacity(batch.len());
    for (i, pair) in batch.iter().enumerate() {
        let tf = rollout(tape, gen, pair, HistorySource::Reference, AlignmentSource::Own, rng, true)?;
        let fr_history = match pinned_fr {
            Some(pins) => pins[i].as_source(discrete),
            None => HistorySource::Generated(cfg.mode),
        };
        let fr = rollout(
            tape,
            gen,
            pair,
            fr_history,
            AlignmentSource::Own,
            rng,
            true,
        )?;
        nlls.push(tf.loss_y);
        fed.push(fr.fed);
        if let Some(s) = tf.stop_bce {
            stops.push(s);
        }
        let p_fr = disc_forward(tape, disc, &fr.behavior)?;
        free_terms.push(bce_of(tape, p_fr, true)?); // fool it: look like TF
        if cfg.use_teacher_term {
            let p_tf = disc_forward(tape, disc, &tf.behavior)?;
            teacher_terms.push(bce_of(tape, p_tf, false)?); // look like FR
        }
    }
    let nll = batch_mean(tape, &nlls)?;
    let stop = if stops.is_empty() { None } else { Some(batch_mean(tape, &stops)?) };
    let adv_free = batch_mean(tape, &free_terms)?;
    let adv_teacher = if teacher_terms.is_empty() {
        None
    } else {
        Some(batch_mean(tape, &teacher_terms)?)
    };

    let mut total = nll;
    if let Some(s) = stop {
        total = tape.add(total, s)?;
    }
    let wf = tape.scale(adv_free, cfg.lambda_free)?;
    total = tape.add(total, wf)?;
    if let Some(at) = adv_teacher {
        let wt = tape.scale(at, cfg.lambda_teacher)?;
        total = tape.add(total, wt)?;
    }
    Ok(PfGenLoss { nll, stop, adv_free, adv_teacher, total, fed })
}

fn build_pf_disc_loss(
    tape: &mut Tape,
    gen: &ModelVars,
    disc: &DiscVars,
    batch: &[AlignedPair],
    cfg: &PfConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut terms = Vec::new();
    for pair in batch {
        let tf = rollout(tape, gen, pair, HistorySource::Reference, AlignmentSource::Own, rng, true)?;
        let fr = rollout(
            tape,
            gen,
            pair,
            HistorySource::Generated(cfg.mode),
            AlignmentSource::Own,
            rng,
            true,
        )?;
        let p_tf = disc_forward(tape, disc, &tf.behavior)?;
        let p_fr = disc_forward(tape, disc, &fr.behavior)?;
        let pos = bce_of(tape, p_tf, true)?;
        let neg = bce_of(tape, p_fr, false)?;
        terms.push(tape.add(pos, neg)?);
    }
    batch_mean(tape, &terms)
}

/// One professor-forcing step: a discriminator update with the generator
/// frozen, then a generator update (NLL + adversarial terms) with the
/// discriminator frozen.
pub fn professor_forcing_step(
    batch: &[AlignedPair],
    gen: &mut ModelParams,
    disc: &mut DiscriminatorParams,
    cfg: &PfConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PfOutput> {
    check_batch(batch)?;
    if cfg.lambda_free < 0.0 || cfg.lambda_teacher < 0.0 {
        return Err(Error::contract("adversarial weights must be nonnegative"));
    }

    // discriminator pass
    let disc_loss = {
        let mut tape = Tape::new();
        let gen_vars = ModelVars::bind(gen, &mut tape, false);
        let disc_vars = DiscVars::bind(disc, &mut tape, true);
        let loss = build_pf_disc_loss(&mut tape, &gen_vars, &disc_vars, batch, cfg, rng)?;
        tape.backward(loss)?;
        for ((_, t), v) in disc.named_tensors_mut().into_iter().zip(disc_vars.vars_in_order()) {
            let g = tape
                .grad_of(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(g);
        }
        tape.value(loss).item()
    };

    // generator pass
    let mut tape = Tape::new();
    let gen_vars = ModelVars::bind(gen, &mut tape, true);
    let disc_vars = DiscVars::bind(disc, &mut tape, false);
    let parts = build_pf_gen_loss(&mut tape, &gen_vars, &disc_vars, batch, cfg, None, rng)?;
    tape.backward(parts.total)?;
    write_model_grads(&tape, &gen_vars, gen);

    Ok(PfOutput {
        generator: StepOutput {
            loss_y: tape.value(parts.nll).item(),
            loss_alpha: None,
            stop_loss: parts.stop.map(|s| tape.value(s).item()),
            total: tape.value(parts.total).item(),
        },
        disc_loss,
        adv_free: tape.value(parts.adv_free).item(),
        adv_teacher: parts.adv_teacher.map(|t| tape.value(t).item()),
    })
}

/// Fraction of correct teacher-forcing-vs-free-running calls the
/// discriminator makes on a batch (threshold 0.5, two decisions per pair).
pub fn discriminator_accuracy(
    batch: &[AlignedPair],
    gen: &ModelParams,
    disc: &DiscriminatorParams,
    mode: HistoryMode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    check_batch(batch)?;
    let mut tape = Tape::new();
    let gen_vars = ModelVars::bind(gen, &mut tape, false);
    let disc_vars = DiscVars::bind(disc, &mut tape, false);
    let mut correct = 0usize;
    for pair in batch {
        let tf = rollout(
            &mut tape,
            &gen_vars,
            pair,
            HistorySource::Reference,
            AlignmentSource::Own,
            rng,
            true,
        )?;
        let fr = rollout(
            &mut tape,
            &gen_vars,
            pair,
            HistorySource::Generated(mode),
            AlignmentSource::Own,
            rng,
            true,
        )?;
        let p_tf = disc_forward(&mut tape, &disc_vars, &tf.behavior)?;
        let p_fr = disc_forward(&mut tape, &disc_vars, &fr.behavior)?;
        if tape.value(p_tf).item() > 0.5 {
            correct += 1;
        }
        if tape.value(p_fr).item() <= 0.5 {
            correct += 1;
        }
    }
    Ok(correct as f64 / (2 * batch.len()) as f64)
}

// ── Finite-difference checks over whole regime losses ───────────────────

/// Regimes whose loss can be checked as a function of one parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    TeacherForcing,
    FreeRunning,
    ScheduledSamplingToken,
    ScheduledSamplingSeq,
    AttentionForcing,
    ModifiedAttentionForcing,
    ProfessorForcingGenerator,
    ProfessorForcingDiscriminator,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 8] = [
        CheckTarget::TeacherForcing,
        CheckTarget::FreeRunning,
        CheckTarget::ScheduledSamplingToken,
        CheckTarget::ScheduledSamplingSeq,
        CheckTarget::AttentionForcing,
        CheckTarget::ModifiedAttentionForcing,
        CheckTarget::ProfessorForcingGenerator,
        CheckTarget::ProfessorForcingDiscriminator,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CheckTarget::TeacherForcing => "teacher_forcing",
            CheckTarget::FreeRunning => "free_running",
            CheckTarget::ScheduledSamplingToken => "scheduled_sampling_token",
            CheckTarget::ScheduledSamplingSeq => "scheduled_sampling_seq",
            CheckTarget::AttentionForcing => "attention_forcing",
            CheckTarget::ModifiedAttentionForcing => "modified_attention_forcing",
            CheckTarget::ProfessorForcingGenerator => "professor_forcing_generator",
            CheckTarget::ProfessorForcingDiscriminator => "professor_forcing_discriminator",
        }
    }
}

/// Finite-difference check of a full regime loss against the tape's
/// analytic gradients on the given batch. `teacher` and `disc` supply the
/// frozen counterpart where the regime needs one. Returns the max relative
/// error over every parameter component.
///
/// The history the model feeds itself is recorded from the unperturbed
/// parameters and pinned during the check, so the stop-gradient boundary at
/// the history hand-off is excluded by construction: the loss being
/// differenced is exactly the function the analytic gradient belongs to.
pub fn regime_grad_check(
    target: CheckTarget,
    batch: &[AlignedPair],
    params: &ModelParams,
    teacher: Option<&ModelParams>,
    disc: Option<&DiscriminatorParams>,
    seed: u64,
    h: f64,
) -> Result<f64> {
    check_batch(batch)?;
    let cfg = params.cfg.clone();
    let discrete = matches!(cfg.target, TargetKind::Discrete { .. });
    let schedule = ScheduleSpec::linear(100);
    let eps = schedule.epsilon(50);
    let pf_cfg = PfConfig {
        lambda_free: 0.7,
        lambda_teacher: 0.4,
        use_teacher_term: true,
        mode: HistoryMode::Argmax,
    };
    let af_opts = AfOptions {
        gamma: 0.5,
        modified: target == CheckTarget::ModifiedAttentionForcing,
        mode: HistoryMode::Argmax,
    };

    if target == CheckTarget::ProfessorForcingDiscriminator {
        let disc = disc.ok_or_else(|| Error::contract("discriminator check needs one"))?;
        let disc_cfg = disc.cfg.clone();
        let inputs: Vec<Tensor> = disc.named_tensors().iter().map(|(_, t)| (*t).clone()).collect();
        let gen = params.clone();
        return grad_check(
            |tape, vars| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let gen_vars = ModelVars::bind(&gen, tape, false);
                let disc_vars = DiscVars {
                    gru: GruVars {
                        wz: vars[0],
                        uz: vars[1],
                        bz: vars[2],
                        wr: vars[3],
                        ur: vars[4],
                        br: vars[5],
                        wn: vars[6],
                        un: vars[7],
                        bn: vars[8],
                    },
                    w_out: vars[9],
                    b_out: vars[10],
                    hidden: disc_cfg.hidden,
                };
                build_pf_disc_loss(tape, &gen_vars, &disc_vars, batch, &pf_cfg, &mut rng)
            },
            &inputs,
            h,
        );
    }

    let single_history = |i: usize, _rng: &mut ChaCha8Rng| -> HistorySource<'static> {
        match target {
            CheckTarget::TeacherForcing => HistorySource::Reference,
            CheckTarget::FreeRunning => HistorySource::Generated(HistoryMode::Argmax),
            CheckTarget::ScheduledSamplingToken => {
                HistorySource::Mixed { eps, mode: HistoryMode::Argmax }
            }
            CheckTarget::ScheduledSamplingSeq => {
                if i % 2 == 0 {
                    HistorySource::Reference
                } else {
                    HistorySource::Generated(HistoryMode::Argmax)
                }
            }
            _ => unreachable!(),
        }
    };

    // record pass: capture what the unperturbed model feeds itself
    let fed: Vec<FedHistory> = {
        let mut tape = Tape::new();
        let bound = ModelVars::bind(params, &mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match target {
            CheckTarget::TeacherForcing
            | CheckTarget::FreeRunning
            | CheckTarget::ScheduledSamplingToken
            | CheckTarget::ScheduledSamplingSeq => {
                build_single_loss(&mut tape, &bound, batch, single_history, &mut rng)?.fed
            }
            CheckTarget::AttentionForcing | CheckTarget::ModifiedAttentionForcing => {
                let teacher_vars = match teacher {
                    Some(t) => ModelVars::bind(t, &mut tape, false),
                    None => bound.clone(),
                };
                build_af_loss(&mut tape, &bound, &teacher_vars, batch, af_opts, None, &mut rng)?
                    .fed
            }
            CheckTarget::ProfessorForcingGenerator => {
                let disc = disc
                    .ok_or_else(|| Error::contract("generator check needs a discriminator"))?;
                let disc_vars = DiscVars::bind(disc, &mut tape, false);
                build_pf_gen_loss(&mut tape, &bound, &disc_vars, batch, &pf_cfg, None, &mut rng)?
                    .fed
            }
            CheckTarget::ProfessorForcingDiscriminator => unreachable!(),
        }
    };

    let inputs: Vec<Tensor> = params.named_tensors().iter().map(|(_, t)| (*t).clone()).collect();
    let teacher = teacher.cloned();
    let disc = disc.cloned();
    grad_check(
        |tape, vars| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bound = ModelVars::from_ordered_vars(&cfg, vars);
            let parts_total = match target {
                CheckTarget::TeacherForcing
                | CheckTarget::FreeRunning
                | CheckTarget::ScheduledSamplingToken
                | CheckTarget::ScheduledSamplingSeq => {
                    build_single_loss(
                        tape,
                        &bound,
                        batch,
                        |i, _| fed[i].as_source(discrete),
                        &mut rng,
                    )?
                    .total
                }
                CheckTarget::AttentionForcing | CheckTarget::ModifiedAttentionForcing => {
                    let teacher_vars = match &teacher {
                        Some(t) => ModelVars::bind(t, tape, false),
                        None => bound.clone(),
                    };
                    build_af_loss(tape, &bound, &teacher_vars, batch, af_opts, Some(&fed), &mut rng)?
                        .total
                }
                CheckTarget::ProfessorForcingGenerator => {
                    let disc = disc
                        .as_ref()
                        .ok_or_else(|| Error::contract("generator check needs a discriminator"))?;
                    let disc_vars = DiscVars::bind(disc, tape, false);
                    build_pf_gen_loss(tape, &bound, &disc_vars, batch, &pf_cfg, Some(&fed), &mut rng)?
                        .total
                }
                CheckTarget::ProfessorForcingDiscriminator => unreachable!(),
            };
            Ok(parts_total)
        },
        &inputs,
        h,
    )
}
