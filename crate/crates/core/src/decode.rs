//! Inference-time generation: greedy search, beam search, and the two
//! guided modes (teacher-forced and attention-forced) that produce
//! time-aligned outputs for cascade training data.
//!
//! Decoding is read-only on the parameters; every call builds its own
//! untracked tape.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{self, ModelParams, ModelVars, TargetKind};
use crate::tape::{Tape, Var};
use crate::tasks::Target;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_length: usize,
    pub length_normalization: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        // beam width 10 is the inference default for discrete tasks
        BeamConfig { width: 10, max_length: 64, length_normalization: false }
    }
}

/// A completed beam candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHypothesis {
    /// Data tokens only; the closing EOS is not included.
    pub tokens: Vec<usize>,
    /// Cumulative log-probability, including the EOS step when finished.
    pub log_prob: f64,
    pub finished: bool,
}

/// Output of unguided generation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub output: Target,
    /// Generated alignment, one row per emitted token / frame block.
    pub alignment: Tensor,
    /// True when generation hit `max_length` instead of stopping itself.
    pub truncated: bool,
}

struct StepVars {
    s: Var,
    alpha: Var,
    dist_or_block: Var,
    stop_prob: Option<f64>,
}

/// One decoder step: state update, own attention, context, head.
fn advance(
    tape: &mut Tape,
    vars: &ModelVars,
    h: Var,
    keys: Var,
    s_prev: Var,
    alpha_prev: Var,
    y_prev: Var,
    context_override: Option<Var>,
) -> Result<StepVars> {
    let s = model::decoder_step(tape, vars, s_prev, y_prev)?;
    let alpha = model::attend_with_keys(tape, vars, s, keys, alpha_prev)?;
    let c = match context_override {
        Some(reference) => model::context(tape, reference, h)?,
        None => model::context(tape, alpha, h)?,
    };
    match vars.cfg.target {
        TargetKind::Discrete { .. } => {
            let dist = model::output_head_categorical(tape, vars, s, c)?;
            Ok(StepVars { s, alpha, dist_or_block: dist, stop_prob: None })
        }
        TargetKind::Continuous { .. } => {
            let block = model::output_head_continuous(tape, vars, s, c)?;
            let logit = model::stop_logit(tape, vars, s, c)?;
            let stop = tape.sigmoid(logit)?;
            Ok(StepVars { s, alpha, dist_or_block: block, stop_prob: Some(tape.value(stop).item()) })
        }
    }
}

fn rows_to_matrix(tape: &Tape, rows: &[Var], l: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * l);
    for &r in rows {
        data.extend_from_slice(tape.value(r).data());
    }
    if rows.is_empty() {
        // zero-step decode: represent the alignment as an empty 0-row list
        // is not expressible; callers special-case it
        return Err(Error::contract("no alignment rows"));
    }
    Tensor::from_vec(vec![rows.len(), l], data)
}

/// Picks the most probable continuation at every step; stops at the EOS
/// token (discrete), at a stop-flag above 0.5 (continuous), or at
/// `max_length` steps, flagging truncation.
pub fn greedy_decode(params: &ModelParams, x: &[usize], max_length: usize) -> Result<DecodeOutput> {
    let mut tape = Tape::new();
    let vars = ModelVars::bind(params, &mut tape, false);
    let h = model::encode(&mut tape, &vars, x)?;
    let keys = model::attention_keys(&mut tape, &vars, h)?;
    let mut s = model::initial_state(&mut tape, &params.cfg);
    let mut alpha = model::initial_alignment(&mut tape, x.len());
    let mut y_prev = model::start_input(&mut tape, &vars)?;
    let mut alpha_rows = Vec::new();

    match params.cfg.target {
        TargetKind::Discrete { .. } => {
            let mut tokens = Vec::new();
            let mut truncated = true;
            for _ in 0..max_length {
                let step = advance(&mut tape, &vars, h, keys, s, alpha, y_prev, None)?;
                let tok = argmax(tape.value(step.dist_or_block).data());
                if tok == params.cfg.eos() {
                    truncated = false;
                    break;
                }
                tokens.push(tok);
                alpha_rows.push(step.alpha);
                s = step.s;
                alpha = step.alpha;
                y_prev = model::embed_history_token(&mut tape, &vars, tok)?;
            }
            let alignment = if alpha_rows.is_empty() {
                Tensor::zeros(&[1, x.len()])
            } else {
                rows_to_matrix(&tape, &alpha_rows, x.len())?
            };
            Ok(DecodeOutput { output: Target::Tokens(tokens), alignment, truncated })
        }
        TargetKind::Continuous { frame_dim, .. } => {
            let mut frames: Vec<f64> = Vec::new();
            let mut truncated = true;
            for _ in 0..max_length {
                let step = advance(&mut tape, &vars, h, keys, s, alpha, y_prev, None)?;
                frames.extend_from_slice(tape.value(step.dist_or_block).data());
                alpha_rows.push(step.alpha);
                s = step.s;
                alpha = step.alpha;
                let block = tape.value(step.dist_or_block);
                let last = block.row(block.shape()[0] - 1).to_vec();
                y_prev = tape.constant(Tensor::vector(last));
                if step.stop_prob.unwrap() > 0.5 {
                    truncated = false;
                    break;
                }
            }
            let t = frames.len() / frame_dim;
            let output = if t == 0 {
                return Ok(DecodeOutput {
                    output: Target::Frames(Tensor::zeros(&[1, frame_dim])),
                    alignment: Tensor::zeros(&[1, x.len()]),
                    truncated,
                });
            } else {
                Target::Frames(Tensor::from_vec(vec![t, frame_dim], frames)?)
            };
            Ok(DecodeOutput {
                output,
                alignment: rows_to_matrix(&tape, &alpha_rows, x.len())?,
                truncated,
            })
        }
    }
}

/// Free-running sampled generation for discrete models; stops on a sampled
/// EOS or at `max_length`.
pub fn sample_decode(
    params: &ModelParams,
    x: &[usize],
    max_length: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    use rand::Rng;
    let TargetKind::Discrete { .. } = params.cfg.target else {
        return Err(Error::contract("sample_decode requires a discrete model"));
    };
    let mut tape = Tape::new();
    let vars = ModelVars::bind(params, &mut tape, false);
    let h = model::encode(&mut tape, &vars, x)?;
    let keys = model::attention_keys(&mut tape, &vars, h)?;
    let mut s = model::initial_state(&mut tape, &params.cfg);
    let mut alpha = model::initial_alignment(&mut tape, x.len());
    let mut y_prev = model::start_input(&mut tape, &vars)?;
    let mut tokens = Vec::new();
    for _ in 0..max_length {
        let step = advance(&mut tape, &vars, h, keys, s, alpha, y_prev, None)?;
        let probs = tape.value(step.dist_or_block).data();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut tok = probs.len() - 1;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                tok = i;
                break;
            }
        }
        if tok == params.cfg.eos() {
            break;
        }
        tokens.push(tok);
        s = step.s;
        alpha = step.alpha;
        y_prev = model::embed_history_token(&mut tape, &vars, tok)?;
    }
    Ok(tokens)
}

struct BeamHyp {
    tokens: Vec<usize>,
    log_prob: f64,
    finished: bool,
    s: Var,
    alpha: Var,
    y_prev: Var,
}

impl BeamHyp {
    fn score(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

/// Beam search over discrete outputs: keeps the `width` best partial
/// hypotheses, extends each unfinished one by every token each step, and
/// stops when every kept hypothesis has produced EOS (or `max_length`).
/// Returns hypotheses sorted by score, best first.
pub fn beam_search_decode(
    params: &ModelParams,
    x: &[usize],
    config: &BeamConfig,
) -> Result<Vec<ScoredHypothesis>> {
    if config.width < 1 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    let TargetKind::Discrete { .. } = params.cfg.target else {
        return Err(Error::contract("beam search requires a discrete model"));
    };
    let eos = params.cfg.eos();

    let mut tape = Tape::new();
    let vars = ModelVars::bind(params, &mut tape, false);
    let h = model::encode(&mut tape, &vars, x)?;
    let keys = model::attention_keys(&mut tape, &vars, h)?;
    let s0 = model::initial_state(&mut tape, &params.cfg);
    let a0 = model::initial_alignment(&mut tape, x.len());
    let y0 = model::start_input(&mut tape, &vars)?;

    let mut beam = vec![BeamHyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        s: s0,
        alpha: a0,
        y_prev: y0,
    }];

    for _ in 0..config.max_length {
        if beam.iter().all(|hyp| hyp.finished) {
            break;
        }
        let mut candidates: Vec<BeamHyp> = Vec::new();
        for hyp in &beam {
            if hyp.finished {
                // finished hypotheses compete for beam slots but are never
                // extended
                candidates.push(BeamHyp {
                    tokens: hyp.tokens.clone(),
                    log_prob: hyp.log_prob,
                    finished: true,
                    s: hyp.s,
                    alpha: hyp.alpha,
                    y_prev: hyp.y_prev,
                });
                continue;
            }
            let step = advance(&mut tape, &vars, h, keys, hyp.s, hyp.alpha, hyp.y_prev, None)?;
            let probs = tape.value(step.dist_or_block).data().to_vec();
            for (tok, &p) in probs.iter().enumerate() {
                let log_prob = hyp.log_prob + p.max(1e-300).ln();
                if tok == eos {
                    candidates.push(BeamHyp {
                        tokens: hyp.tokens.clone(),
                        log_prob,
                        finished: true,
                        s: step.s,
                        alpha: step.alpha,
                        y_prev: hyp.y_prev,
                    });
                } else {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    let y_prev = model::embed_history_token(&mut tape, &vars, tok)?;
                    candidates.push(BeamHyp {
                        tokens,
                        log_prob,
                        finished: false,
                        s: step.s,
                        alpha: step.alpha,
                        y_prev,
                    });
                }
            }
        }
        // stable sort keeps insertion order on ties, matching greedy's
        // first-index argmax
        candidates.sort_by(|a, b| {
            b.score(config.length_normalization)
                .partial_cmp(&a.score(config.length_normalization))
                .unwrap()
        });
        candidates.truncate(config.width);
        beam = candidates;
    }

    beam.sort_by(|a, b| {
        b.score(config.length_normalization)
            .partial_cmp(&a.score(config.length_normalization))
            .unwrap()
    });
    Ok(beam
        .into_iter()
        .map(|hyp| ScoredHypothesis {
            tokens: hyp.tokens,
            log_prob: hyp.log_prob,
            finished: hyp.finished,
        })
        .collect())
}

/// Runs the decoder with the reference output as history and returns the
/// guided output `y'` together with the generated alignment. The output
/// has exactly the reference length; discrete emissions take the most
/// probable data token (the EOS class is not a valid guided emission).
pub fn teacher_forced_generate(
    params: &ModelParams,
    x: &[usize],
    y_ref: &Target,
) -> Result<(Target, Tensor)> {
    let mut tape = Tape::new();
    let vars = ModelVars::bind(params, &mut tape, false);
    let h = model::encode(&mut tape, &vars, x)?;
    let keys = model::attention_keys(&mut tape, &vars, h)?;
    let mut s = model::initial_state(&mut tape, &params.cfg);
    let mut alpha = model::initial_alignment(&mut tape, x.len());
    let mut y_prev = model::start_input(&mut tape, &vars)?;
    let mut alpha_rows = Vec::new();

    match (&params.cfg.target, y_ref) {
        (TargetKind::Discrete { vocab }, Target::Tokens(toks)) => {
            let mut out = Vec::with_capacity(toks.len());
            for (t, &ref_tok) in toks.iter().enumerate() {
                let step = advance(&mut tape, &vars, h, keys, s, alpha, y_prev, None)?;
                let probs = &tape.value(step.dist_or_block).data()[..*vocab];
                out.push(argmax(probs));
                alpha_rows.push(step.alpha);
                s = step.s;
                alpha = step.alpha;
                if t + 1 < toks.len() {
                    y_prev = model::embed_history_token(&mut tape, &vars, ref_tok)?;
                }
            }
            let alignment = rows_to_matrix(&tape, &alpha_rows, x.len())?;
            Ok((Target::Tokens(out), alignment))
        }
        (TargetKind::Continuous { frame_dim, reduction }, Target::Frames(frames)) => {
            let (frame_dim, reduction) = (*frame_dim, *reduction);
            let t_ref = frames.shape()[0];
            let steps = t_ref.div_ceil(reduction);
            let mut out: Vec<f64> = Vec::with_capacity(t_ref * frame_dim);
            for t in 0..steps {
                let step = advance(&mut tape, &vars, h, keys, s, alpha, y_prev, None)?;
                out.extend_from_slice(tape.value(step.dist_or_block).data());
                alpha_rows.push(step.alpha);
                s = step.s;
                alpha = step.alpha;
                if t + 1 < steps {
                    let first = t * reduction;
                    let valid = reduction.min(t_ref - first);
                    let last_ref = frames.row(first + valid - 1).to_vec();
                    y_prev = tape.constant(Tensor::vector(last_ref));
                }
            }
            out.truncate(t_ref * frame_dim);
            let alignment = rows_to_matrix(&tape, &alpha_rows, x.len())?;
            Ok((Target::Frames(Tensor::from_vec(vec![t_ref, frame_dim], out)?), alignment))
        }
        _ => Err(Error::contract("reference target kind does not match the model")),
    }
}

/// Runs the decoder on its own generated history while the context uses the
/// supplied reference alignment, so the output is time-step-aligned with
/// the reference: exactly one emission per alignment row. The model's own
/// alignment is returned alongside for diagnostics even though the decoder
/// does not use it.
pub fn attention_forced_generate(
    params: &ModelParams,
    x: &[usize],
    alpha_ref: &Tensor,
) -> Result<(Target, Tensor)> {
    if alpha_ref.shape().len() != 2 || alpha_ref.shape()[1] != x.len() {
        return Err(Error::contract(format!(
            "reference alignment shape {:?} does not cover {} source positions",
            alpha_ref.shape(),
            x.len()
        )));
    }
    for r in 0..alpha_ref.shape()[0] {
        let row = alpha_ref.row(r);
        if row.iter().any(|&v| v < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("reference alignment row {r} is not stochastic")));
        }
    }
    let steps = alpha_ref.shape()[0];

    let mut tape = Tape::new();
    let vars = ModelVars::bind(params, &mut tape, false);
    let h = model::encode(&mut tape, &vars, x)?;
    let keys = model::attention_keys(&mut tape, &vars, h)?;
    let mut s = model::initial_state(&mut tape, &params.cfg);
    let mut alpha = model::initial_alignment(&mut tape, x.len());
    let mut y_prev = model::start_input(&mut tape, &vars)?;
    let mut alpha_rows = Vec::new();

    match params.cfg.target {
        TargetKind::Discrete { vocab } => {
            let mut out = Vec::with_capacity(steps);
            for t in 0..steps {
                let reference = tape.constant(Tensor::vector(alpha_ref.row(t).to_vec()));
                let step =
                    advance(&mut tape, &vars, h, keys, s, alpha, y_prev, Some(reference))?;
                let probs = &tape.value(step.dist_or_block).data()[..vocab];
                let tok = argmax(probs);
                out.push(tok);
                alpha_rows.push(step.alpha);
                s = step.s;
                alpha = step.alpha;
                if t + 1 < steps {
                    y_prev = model::embed_history_token(&mut tape, &vars, tok)?;
                }
            }
            let own = rows_to_matrix(&tape, &alpha_rows, x.len())?;
            Ok((Target::Tokens(out), own))
        }
        TargetKind::Continuous { frame_dim, .. } => {
            let mut out: Vec<f64> = Vec::new();
            for t in 0..steps {
                let reference = tape.constant(Tensor::vector(alpha_ref.row(t).to_vec()));
                let step =
                    advance(&mut tape, &vars, h, keys, s, alpha, y_prev, Some(reference))?;
                out.extend_from_slice(tape.value(step.dist_or_block).data());
                alpha_rows.push(step.alpha);
                s = step.s;
                alpha = step.alpha;
                if t + 1 < steps {
                    let block = tape.value(step.dist_or_block);
                    let last = block.row(block.shape()[0] - 1).to_vec();
                    y_prev = tape.constant(Tensor::vector(last));
                }
            }
            let t_out = out.len() / frame_dim;
            let own = rows_to_matrix(&tape, &alpha_rows, x.len())?;
            Ok((Target::Frames(Tensor::from_vec(vec![t_out, frame_dim], out)?), own))
        }
    }
}
