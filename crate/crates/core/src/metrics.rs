//! Evaluation: corpus BLEU, frame L1, alignment diagnostics, and a
//! sampling-based Bayes-risk estimator.

use std::collections::{BTreeMap, HashMap};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::sample_decode;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{argmax, Tensor};

/// One logged measurement; serialized as a JSONL line by the runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub step: u64,
    pub split: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl MetricRecord {
    pub fn new(name: &str, value: f64, step: u64, split: &str) -> Self {
        MetricRecord {
            name: name.into(),
            value,
            step,
            split: split.into(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.extra.insert(key.into(), value);
        self
    }
}

const MAX_NGRAM: usize = 4;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], u64> {
    let mut counts: HashMap<&[usize], u64> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level 4-gram BLEU with equal weights and the standard brevity
/// penalty, in [0, 1]. N-gram counts aggregate over the whole corpus before
/// the geometric mean. `smooth` adds one to every matched/total pair (for
/// tiny corpora); the default reporting path leaves it off.
pub fn bleu_corpus_with(
    hypotheses: &[Vec<usize>],
    references: &[Vec<usize>],
    smooth: bool,
) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::contract(format!(
            "corpus sizes differ or are empty: {} hypotheses, {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0u64; MAX_NGRAM];
    let mut total = [0u64; MAX_NGRAM];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=MAX_NGRAM {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1) as u64;
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision = 0.0;
    for n in 0..MAX_NGRAM {
        let (m, t) = if smooth { (matched[n] + 1, total[n] + 1) } else { (matched[n], total[n]) };
        if m == 0 {
            return Ok(0.0);
        }
        log_precision += (m as f64 / t as f64).ln() / MAX_NGRAM as f64;
    }
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(brevity * log_precision.exp())
}

pub fn bleu_corpus(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    bleu_corpus_with(hypotheses, references, false)
}

/// Mean over frames of the per-frame L1 distance `||y_t - y_hat_t||_1`.
pub fn l1_frame_error(y_hat: &Tensor, y_ref: &Tensor) -> Result<f64> {
    if y_hat.shape() != y_ref.shape() {
        return Err(Error::contract(format!(
            "frame shapes differ: {:?} vs {:?}",
            y_hat.shape(),
            y_ref.shape()
        )));
    }
    let rows = y_hat.shape()[0] as f64;
    let total: f64 = y_hat.data().iter().zip(y_ref.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentDiagnostics {
    /// Mean per-row entropy in nats.
    pub mean_entropy: f64,
    /// Fraction of steps whose argmax does not move backward.
    pub monotonicity: f64,
    /// Column sums; adds up to the number of rows.
    pub coverage: Vec<f64>,
}

pub fn alignment_diagnostics(alpha: &Tensor) -> Result<AlignmentDiagnostics> {
    if alpha.shape().len() != 2 {
        return Err(Error::contract("alignment must be a T x L matrix"));
    }
    let (t, l) = (alpha.shape()[0], alpha.shape()[1]);
    let mut entropy = 0.0;
    let mut coverage = vec![0.0; l];
    let mut monotone = 0usize;
    let mut prev_peak = 0usize;
    for r in 0..t {
        let row = alpha.row(r);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("alignment row {r} is not on the simplex")));
        }
        entropy -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
        for (c, &v) in row.iter().enumerate() {
            coverage[c] += v;
        }
        let peak = argmax(row);
        if r == 0 || peak >= prev_peak {
            monotone += 1;
        }
        prev_peak = peak;
    }
    Ok(AlignmentDiagnostics {
        mean_entropy: entropy / t as f64,
        monotonicity: monotone as f64 / t as f64,
        coverage,
    })
}

/// Sequence-level task losses for the Bayes-risk estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceLoss {
    /// `1 - sentence BLEU` (add-one smoothed, since single short sentences
    /// rarely have 4-gram matches).
    OneMinusBleu,
    /// Plain Levenshtein distance in tokens.
    EditDistance,
}

pub fn sequence_loss(kind: SequenceLoss, reference: &[usize], hypothesis: &[usize]) -> f64 {
    match kind {
        SequenceLoss::OneMinusBleu => {
            if reference == hypothesis {
                return 0.0;
            }
            let bleu = bleu_corpus_with(&[hypothesis.to_vec()], &[reference.to_vec()], true)
                .unwrap_or(0.0);
            1.0 - bleu
        }
        SequenceLoss::EditDistance => levenshtein(reference, hypothesis) as f64,
    }
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Monte-Carlo estimate of the expected task loss under the model: the mean
/// of `loss(y_ref, y_sampled)` over `m` free-running samples. The model's
/// own probabilities weight the estimate implicitly because the samples are
/// drawn from it.
pub fn bayes_risk_estimate(
    params: &ModelParams,
    x: &[usize],
    y_ref: &[usize],
    m: usize,
    loss: SequenceLoss,
    max_length: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::contract("sample count must be at least 1"));
    }
    let mut total = 0.0;
    for _ in 0..m {
        let sample = sample_decode(params, x, max_length, rng)?;
        total += sequence_loss(loss, y_ref, &sample);
    }
    Ok(total / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TargetKind};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn bleu_identical_corpus_is_one() {
        let corpus = vec![vec![1, 2, 3, 4, 5], vec![7, 8, 9, 10]];
        assert_eq!(bleu_corpus(&corpus, &corpus).unwrap(), 1.0);
    }

    #[test]
    fn bleu_hand_computed_brevity_case() {
        // hyp "a b c d" vs ref "a b c d e": all precisions 1, BP = e^(1 - 5/4)
        let hyp = vec![vec![1usize, 2, 3, 4]];
        let reference = vec![vec![1usize, 2, 3, 4, 5]];
        let bleu = bleu_corpus(&hyp, &reference).unwrap();
        assert!((bleu - (-0.25f64).exp()).abs() < 1e-4, "bleu {bleu}");
        assert!((bleu - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn bleu_zero_without_any_four_gram_overlap() {
        let hyp = vec![vec![1usize, 2, 3, 4, 5]];
        let reference = vec![vec![1usize, 2, 9, 4, 5]]; // no common 4-gram
        assert_eq!(bleu_corpus(&hyp, &reference).unwrap(), 0.0);
    }

    #[test]
    fn bleu_invariant_under_corpus_permutation() {
        let hyp = vec![vec![1usize, 2, 3, 4, 9], vec![5, 6, 7, 8]];
        let refs = vec![vec![1usize, 2, 3, 4, 5], vec![5, 6, 7, 8, 9]];
        let fwd = bleu_corpus(&hyp, &refs).unwrap();
        let rev_h: Vec<_> = hyp.iter().rev().cloned().collect();
        let rev_r: Vec<_> = refs.iter().rev().cloned().collect();
        assert_eq!(fwd, bleu_corpus(&rev_h, &rev_r).unwrap());
        assert!(fwd > 0.0 && fwd < 1.0);
    }

    #[test]
    fn bleu_rejects_empty_or_mismatched_corpus() {
        assert!(bleu_corpus(&[], &[]).is_err());
        assert!(bleu_corpus(&[vec![1]], &[]).is_err());
    }

    #[test]
    fn l1_hand_values_and_symmetry() {
        let zeros = Tensor::zeros(&[3, 8]);
        let ones = Tensor::filled(&[3, 8], 1.0);
        assert_eq!(l1_frame_error(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(l1_frame_error(&zeros, &ones).unwrap(), 8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::from_vec(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let b = Tensor::from_vec(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        assert_eq!(l1_frame_error(&a, &b).unwrap(), l1_frame_error(&b, &a).unwrap());
        assert!(l1_frame_error(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn l1_triangle_inequality_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let draw = |rng: &mut ChaCha8Rng| {
                Tensor::from_vec(vec![4, 3], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .unwrap()
            };
            let (a, b, c) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let ab = l1_frame_error(&a, &b).unwrap();
            let bc = l1_frame_error(&b, &c).unwrap();
            let ac = l1_frame_error(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn diagnostics_one_hot_monotone_identity() {
        let eye = Tensor::matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let d = alignment_diagnostics(&eye).unwrap();
        assert_eq!(d.mean_entropy, 0.0);
        assert_eq!(d.monotonicity, 1.0);
        assert_eq!(d.coverage, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagnostics_uniform_rows() {
        let l = 5usize;
        let t = 4usize;
        let uniform = Tensor::filled(&[t, l], 1.0 / l as f64);
        let d = alignment_diagnostics(&uniform).unwrap();
        assert!((d.mean_entropy - (l as f64).ln()).abs() < 1e-12);
        let total: f64 = d.coverage.iter().sum();
        assert!((total - t as f64).abs() < 1e-9);
    }

    #[test]
    fn diagnostics_reject_non_simplex() {
        let bad = Tensor::matrix(&[vec![0.5, 0.4]]).unwrap();
        assert!(matches!(alignment_diagnostics(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(levenshtein(&[], &[1, 2]), 2);
        assert_eq!(levenshtein(&[1, 2], &[2, 1]), 2);
    }

    fn toy_params(seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::new(
            ModelConfig {
                src_vocab: 4,
                target: TargetKind::Discrete { vocab: 4 },
                embed_dim: 3,
                enc_hidden: 2,
                dec_hidden: 4,
                attn_dim: 3,
                attn_filters: 2,
                attn_kernel: 3,
                max_src_len: 8,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn bayes_risk_single_sample_is_single_loss() {
        let params = toy_params(3);
        let x = [0usize, 1, 2];
        let y_ref = [0usize, 1, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let risk = bayes_risk_estimate(
            &params,
            &x,
            &y_ref,
            1,
            SequenceLoss::EditDistance,
            10,
            &mut rng,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sample = sample_decode(&params, &x, 10, &mut rng).unwrap();
        assert_eq!(risk, levenshtein(&y_ref, &sample) as f64);
        assert!(risk >= 0.0);
    }

    #[test]
    fn bayes_risk_zero_sample_count_rejected() {
        let params = toy_params(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(bayes_risk_estimate(
            &params,
            &[0],
            &[0],
            0,
            SequenceLoss::EditDistance,
            4,
            &mut rng
        )
        .is_err());
    }

    /// Monte-Carlo oracle: the standard error of the estimator over repeated
    /// runs must shrink like 1/sqrt(M); quadrupling M should halve it.
    #[test]
    fn bayes_risk_standard_error_halves_when_samples_quadruple() {
        let params = toy_params(5);
        let x = [0usize, 1];
        let y_ref = [1usize, 0];
        let reps = 50;
        let se = |m: usize| -> f64 {
            let vals: Vec<f64> = (0..reps)
                .map(|rep| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
                    bayes_risk_estimate(
                        &params,
                        &x,
                        &y_ref,
                        m,
                        SequenceLoss::EditDistance,
                        6,
                        &mut rng,
                    )
                    .unwrap()
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / reps as f64;
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
        };
        let (se100, se400) = (se(100), se(400));
        let ratio = se100 / se400;
        assert!((ratio - 2.0).abs() < 0.5, "SE ratio {ratio} (se100={se100}, se400={se400})");
    }
}
