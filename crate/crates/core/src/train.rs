//! The batch training loop: seeded shuffling, regime dispatch, adaptive
//! updates, divergence detection, and per-step metric records.
//!
//! All randomness is derived statelessly from `(seed, epoch)` and
//! `(seed, step)`, so resuming from a checkpointed step count reproduces
//! the uninterrupted run bit for bit.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::model::ModelParams;
use crate::optim::{AdamState, OptimizerConfig};
use crate::regimes::{
    attention_forcing_step, free_running_step, modified_attention_forcing_step,
    professor_forcing_step, scheduled_sampling_seq_step, scheduled_sampling_token_step,
    teacher_forcing_step, DiscriminatorParams, PfConfig, RegimeConfig, StepOutput,
};
use crate::tasks::AlignedPair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Everything a run mutates: the model, its optimizer moments, the optional
/// professor-forcing discriminator, and the global step counter. This is
/// exactly what a checkpoint persists.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelParams,
    pub opt: AdamState,
    pub disc: Option<DiscriminatorParams>,
    pub disc_opt: Option<AdamState>,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: ModelParams) -> Self {
        TrainState { model, opt: AdamState::new(), disc: None, disc_opt: None, step: 0 }
    }

    pub fn with_discriminator(mut self, disc: DiscriminatorParams) -> Self {
        self.disc = Some(disc);
        self.disc_opt = Some(AdamState::new());
        self
    }
}

fn mix(seed: u64, salt: u64, index: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xe9_0c4, epoch));
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

fn record_step(step: u64, out: &StepOutput) -> MetricRecord {
    let mut rec = MetricRecord::new("loss", out.total, step, "train").with("loss_y", out.loss_y);
    if let Some(a) = out.loss_alpha {
        rec = rec.with("loss_alpha", a);
    }
    if let Some(s) = out.stop_loss {
        rec = rec.with("stop_loss", s);
    }
    rec
}

/// Runs (or resumes) training for `cfg.epochs` passes over the dataset.
/// Training continues from `state.step`, so calling this twice with the
/// same config is a no-op the second time. Returns one metric record per
/// executed step; a non-finite loss aborts with a diagnostic.
pub fn train_loop(
    state: &mut TrainState,
    dataset: &[AlignedPair],
    regime: &RegimeConfig,
    teacher: Option<&ModelParams>,
    opt_cfg: &OptimizerConfig,
    cfg: &TrainConfig,
) -> Result<Vec<MetricRecord>> {
    regime.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if regime.needs_teacher() && teacher.is_none() {
        return Err(Error::contract(format!(
            "regime {} needs a trained teacher model",
            regime.name()
        )));
    }
    if regime.needs_discriminator() && state.disc.is_none() {
        return Err(Error::contract("professor forcing needs a discriminator in the train state"));
    }

    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut records = Vec::new();

    while state.step < total_steps {
        let step = state.step;
        let epoch = step / steps_per_epoch as u64;
        let pos = (step % steps_per_epoch as u64) as usize;
        let perm = epoch_permutation(n, cfg.seed, epoch);
        let lo = pos * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(n);
        let batch: Vec<AlignedPair> = perm[lo..hi].iter().map(|&i| dataset[i].clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x57e9, step));

        let record = match regime {
            RegimeConfig::TeacherForcing => {
                let out = teacher_forcing_step(&batch, &mut state.model)?;
                state.opt.apply(state.model.named_tensors_mut(), opt_cfg)?;
                record_step(step, &out)
            }
            RegimeConfig::FreeRunning { mode } => {
                let out = free_running_step(&batch, &mut state.model, *mode, &mut rng)?;
                state.opt.apply(state.model.named_tensors_mut(), opt_cfg)?;
                record_step(step, &out)
            }
            RegimeConfig::ScheduledSamplingToken { schedule, mode } => {
                let out = scheduled_sampling_token_step(
                    &batch,
                    &mut state.model,
                    step as usize,
                    schedule,
                    *mode,
                    &mut rng,
                )?;
                state.opt.apply(state.model.named_tensors_mut(), opt_cfg)?;
                record_step(step, &out).with("epsilon", schedule.epsilon(step as usize))
            }
            RegimeConfig::ScheduledSamplingSeq { schedule, mode } => {
                let out = scheduled_sampling_seq_step(
                    &batch,
                    &mut state.model,
                    step as usize,
                    schedule,
                    *mode,
                    &mut rng,
                )?;
                state.opt.apply(state.model.named_tensors_mut(), opt_cfg)?;
                record_step(step, &out).with("epsilon", schedule.epsilon(step as usize))
            }
            RegimeConfig::AttentionForcing { gamma, tied, mode } => {
                let teacher_ref = if *tied { None } else { teacher };
                let out = attention_forcing_step(
                    &batch,
                    &mut state.model,
                    teacher_ref,
                    *gamma,
                    *mode,
                    &mut rng,
                )?;
                state.opt.apply(state.model.named_tensors_mut(), opt_cfg)?;
                record_step(step, &out)
            }
            RegimeConfig::ModifiedAttentionForcing { gamma, tied } => {
                let teacher_ref = if *tied { None } else { teacher };
                let out = modified_attention_forcing_step(
                    &batch,
                    &mut state.model,
                    teacher_ref,
                    *gamma,
                    &mut rng,
                )?;
                state.opt.apply(state.model.named_tensors_mut(), opt_cfg)?;
                record_step(step, &out)
            }
            RegimeConfig::ProfessorForcing { lambda_free, lambda_teacher, use_teacher_term, mode } => {
                let pf = PfConfig {
                    lambda_free: *lambda_free,
                    lambda_teacher: *lambda_teacher,
                    use_teacher_term: *use_teacher_term,
                    mode: *mode,
                };
                let disc = state.disc.as_mut().expect("checked above");
                let out = professor_forcing_step(&batch, &mut state.model, disc, &pf, &mut rng)?;
                let disc_opt = state.disc_opt.get_or_insert_with(AdamState::new);
                disc_opt.apply(disc.named_tensors_mut(), opt_cfg)?;
                state.opt.apply(state.model.named_tensors_mut(), opt_cfg)?;
                let mut rec = record_step(step, &out.generator)
                    .with("disc_loss", out.disc_loss)
                    .with("adv_free", out.adv_free);
                if let Some(t) = out.adv_teacher {
                    rec = rec.with("adv_teacher", t);
                }
                rec
            }
        };

        if !record.value.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                details: format!("loss became {} on regime {}", record.value, regime.name()),
            });
        }
        records.push(record);
        state.step += 1;
    }
    Ok(records)
}
