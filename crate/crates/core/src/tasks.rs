//! Synthetic task generators with known gold alignments, plus the
//! newline-delimited dataset file format.
//!
//! Three desk-scale tasks stand in for real corpora:
//! - `copy`: y = x, gold alignment is the identity. Sanity task.
//! - `expansion`: each source symbol expands to a per-symbol number of
//!   noisy prototype frames, so the target is a continuous frame matrix
//!   with a monotone many-to-one gold alignment. TTS stand-in.
//! - `reorder`: adjacent bigram blocks are swapped; with the ambiguity
//!   flag, each example randomly keeps or swaps the order, so two valid
//!   outputs exist per source. NMT stand-in.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A target sequence: tokens for discrete tasks, a `T x D` frame matrix
/// for continuous ones.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Tokens(Vec<usize>),
    Frames(Tensor),
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Target::Tokens(t) => t.len(),
            Target::Frames(f) => f.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Result<&[usize]> {
        match self {
            Target::Tokens(t) => Ok(t),
            Target::Frames(_) => Err(Error::contract("expected token target, got frames")),
        }
    }

    pub fn frames(&self) -> Result<&Tensor> {
        match self {
            Target::Frames(f) => Ok(f),
            Target::Tokens(_) => Err(Error::contract("expected frame target, got tokens")),
        }
    }
}

/// One training example: source tokens, target, optional gold alignment
/// (`T x L`, one-hot rows) and, for cascade corpora, a waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub src: Vec<usize>,
    pub tgt: Target,
    pub gold_align: Option<Tensor>,
    pub wave: Option<Vec<f64>>,
}

impl AlignedPair {
    pub fn new(src: Vec<usize>, tgt: Target) -> Self {
        AlignedPair { src, tgt, gold_align: None, wave: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskKind {
    Copy,
    Expansion { min_duration: usize, max_duration: usize, frame_dim: usize, noise_std: f64 },
    Reorder { ambiguous: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// The default sanity task: vocab 20, lengths 5..=12.
    pub fn copy_default(seed: u64) -> Self {
        TaskSpec { kind: TaskKind::Copy, vocab: 20, min_len: 5, max_len: 12, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 {
            return Err(Error::Config("task vocab must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "empty length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if let TaskKind::Expansion { min_duration, max_duration, frame_dim, noise_std } = &self.kind
        {
            if *min_duration == 0 || min_duration > max_duration {
                return Err(Error::Config("durations must be >= 1 and the range nonempty".into()));
            }
            if *frame_dim == 0 {
                return Err(Error::Config("frame_dim must be positive".into()));
            }
            if *noise_std < 0.0 {
                return Err(Error::Config("noise_std must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Per-symbol structure of an expansion task. Durations and frame
/// prototypes are a function of the task seed only, so train and test
/// splits drawn from one spec share them.
pub struct ExpansionStructure {
    pub durations: Vec<usize>,
    /// `vocab x frame_dim` prototype frames.
    pub prototypes: Tensor,
}

pub fn expansion_structure(spec: &TaskSpec) -> Result<ExpansionStructure> {
    let TaskKind::Expansion { min_duration, max_duration, frame_dim, .. } = spec.kind else {
        return Err(Error::contract("expansion_structure on a non-expansion task"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5eed_57ef));
    let durations = (0..spec.vocab).map(|_| rng.gen_range(min_duration..=max_duration)).collect();
    let proto = (0..spec.vocab * frame_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(ExpansionStructure {
        durations,
        prototypes: Tensor::from_vec(vec![spec.vocab, frame_dim], proto)?,
    })
}

fn example_rng(spec: &TaskSpec) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(spec.seed)
}

fn random_source(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let l = rng.gen_range(spec.min_len..=spec.max_len);
    (0..l).map(|_| rng.gen_range(0..spec.vocab)).collect()
}

/// Standard-normal draw via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn one_hot_rows(hot: &[usize], width: usize) -> Result<Tensor> {
    let mut data = vec![0.0; hot.len() * width];
    for (r, &c) in hot.iter().enumerate() {
        data[r * width + c] = 1.0;
    }
    Tensor::from_vec(vec![hot.len(), width], data)
}

/// y = x with an identity gold alignment.
pub fn gen_copy(spec: &TaskSpec, n: usize) -> Result<Vec<AlignedPair>> {
    spec.validate()?;
    if !matches!(spec.kind, TaskKind::Copy) {
        return Err(Error::contract("gen_copy on a non-copy task"));
    }
    let mut rng = example_rng(spec);
    (0..n)
        .map(|_| {
            let src = random_source(spec, &mut rng);
            let hot: Vec<usize> = (0..src.len()).collect();
            let align = one_hot_rows(&hot, src.len())?;
            Ok(AlignedPair {
                tgt: Target::Tokens(src.clone()),
                gold_align: Some(align),
                wave: None,
                src,
            })
        })
        .collect()
}

/// Each symbol `x_l` expands to `d(x_l)` noisy copies of its prototype
/// frame; gold alignment row `t` is one-hot at the symbol that produced
/// frame `t`, so `T = sum_l d(x_l)`.
pub fn gen_expansion(spec: &TaskSpec, n: usize) -> Result<Vec<AlignedPair>> {
    spec.validate()?;
    let TaskKind::Expansion { frame_dim, noise_std, .. } = spec.kind else {
        return Err(Error::contract("gen_expansion on a non-expansion task"));
    };
    let structure = expansion_structure(spec)?;
    let mut rng = example_rng(spec);
    (0..n)
        .map(|_| {
            let src = random_source(spec, &mut rng);
            let mut frames = Vec::new();
            let mut hot = Vec::new();
            for (l, &sym) in src.iter().enumerate() {
                for _ in 0..structure.durations[sym] {
                    for d in 0..frame_dim {
                        let base = structure.prototypes.data()[sym * frame_dim + d];
                        frames.push(base + noise_std * normal(&mut rng));
                    }
                    hot.push(l);
                }
            }
            let t = hot.len();
            let align = one_hot_rows(&hot, src.len())?;
            Ok(AlignedPair {
                tgt: Target::Frames(Tensor::from_vec(vec![t, frame_dim], frames)?),
                gold_align: Some(align),
                wave: None,
                src,
            })
        })
        .collect()
}

/// The bigram-block permutation of `0..len`: (0 1 2 3 4) -> (1 0 3 2 4).
/// `perm[t]` is the source index that lands at target position `t`.
pub fn block_swap_permutation(len: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    for i in (0..len.saturating_sub(1)).step_by(2) {
        perm.swap(i, i + 1);
    }
    perm
}

/// Deterministic bigram-block swap; with the ambiguity flag set, each
/// example keeps the source order or swaps it with equal probability, so
/// both outputs are valid targets for the same source.
pub fn gen_reorder(spec: &TaskSpec, n: usize) -> Result<Vec<AlignedPair>> {
    spec.validate()?;
    let TaskKind::Reorder { ambiguous } = spec.kind else {
        return Err(Error::contract("gen_reorder on a non-reorder task"));
    };
    let mut rng = example_rng(spec);
    (0..n)
        .map(|_| {
            let src = random_source(spec, &mut rng);
            let swap = !ambiguous || rng.gen_bool(0.5);
            let perm: Vec<usize> = if swap {
                block_swap_permutation(src.len())
            } else {
                (0..src.len()).collect()
            };
            let tgt: Vec<usize> = perm.iter().map(|&i| src[i]).collect();
            let align = one_hot_rows(&perm, src.len())?;
            Ok(AlignedPair { tgt: Target::Tokens(tgt), gold_align: Some(align), wave: None, src })
        })
        .collect()
}

/// Dispatches on the task kind.
pub fn generate(spec: &TaskSpec, n: usize) -> Result<Vec<AlignedPair>> {
    match spec.kind {
        TaskKind::Copy => gen_copy(spec, n),
        TaskKind::Expansion { .. } => gen_expansion(spec, n),
        TaskKind::Reorder { .. } => gen_reorder(spec, n),
    }
}

// ── Dataset files ───────────────────────────────────────────────────────
//
// Newline-delimited records; each line is one object with fields `src`
// (token array), `tgt` (token array or array of frame arrays), optional
// `align` (array of rows) and optional `wave` (sample array). UTF-8.

#[derive(Serialize, Deserialize)]
struct RawRecord {
    src: Vec<usize>,
    tgt: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    align: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wave: Option<Vec<f64>>,
}

fn target_to_value(tgt: &Target) -> serde_json::Value {
    match tgt {
        Target::Tokens(t) => serde_json::json!(t),
        Target::Frames(f) => {
            let rows: Vec<Vec<f64>> = (0..f.shape()[0]).map(|r| f.row(r).to_vec()).collect();
            serde_json::json!(rows)
        }
    }
}

fn target_from_value(v: &serde_json::Value) -> Option<Target> {
    let arr = v.as_array()?;
    if arr.is_empty() {
        return None;
    }
    if arr[0].is_array() {
        let rows: Vec<Vec<f64>> = arr
            .iter()
            .map(|row| row.as_array().map(|r| r.iter().filter_map(|x| x.as_f64()).collect()))
            .collect::<Option<_>>()?;
        let width = rows[0].len();
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return None;
        }
        let t = rows.len();
        Some(Target::Frames(Tensor::from_vec(vec![t, width], rows.concat()).ok()?))
    } else {
        let toks: Vec<usize> =
            arr.iter().map(|x| x.as_u64().map(|u| u as usize)).collect::<Option<_>>()?;
        Some(Target::Tokens(toks))
    }
}

pub fn save_dataset(path: &Path, pairs: &[AlignedPair]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        let rec = RawRecord {
            src: p.src.clone(),
            tgt: target_to_value(&p.tgt),
            align: p
                .gold_align
                .as_ref()
                .map(|a| (0..a.shape()[0]).map(|r| a.row(r).to_vec()).collect()),
            wave: p.wave.clone(),
        };
        serde_json::to_writer(&mut out, &rec)
            .map_err(|e| Error::data(format!("serialize record: {e}")))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Loads and validates a dataset file. Malformed records are reported with
/// their 1-based line numbers.
pub fn load_dataset(path: &Path) -> Result<Vec<AlignedPair>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    let mut bad_lines = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(pair) => pairs.push(pair),
            Err(msg) => bad_lines.push(format!("line {lineno}: {msg}")),
        }
    }
    if !bad_lines.is_empty() {
        return Err(Error::data(bad_lines.join("; ")));
    }
    Ok(pairs)
}

fn parse_record(line: &str) -> std::result::Result<AlignedPair, String> {
    let rec: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rec.src.is_empty() {
        return Err("empty src".into());
    }
    let tgt = target_from_value(&rec.tgt).ok_or("malformed tgt field")?;
    if tgt.is_empty() {
        return Err("empty tgt".into());
    }
    let gold_align = match rec.align {
        None => None,
        Some(rows) => {
            if rows.len() != tgt.len() {
                return Err(format!(
                    "alignment has {} rows for a target of length {}",
                    rows.len(),
                    tgt.len()
                ));
            }
            let width = rec.src.len();
            for (r, row) in rows.iter().enumerate() {
                if row.len() != width {
                    return Err(format!("alignment row {r} has width {} != {width}", row.len()));
                }
                if row.iter().any(|&v| v < 0.0) {
                    return Err(format!("alignment row {r} has negative entries"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(format!("alignment row {r} sums to {sum}, not 1"));
                }
            }
            let t = rows.len();
            Some(Tensor::from_vec(vec![t, width], rows.concat()).map_err(|e| e.to_string())?)
        }
    };
    Ok(AlignedPair { src: rec.src, tgt, gold_align, wave: rec.wave })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::argmax;

    fn expansion_spec(seed: u64) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Expansion {
                min_duration: 2,
                max_duration: 3,
                frame_dim: 4,
                noise_std: 0.05,
            },
            vocab: 6,
            min_len: 2,
            max_len: 5,
            seed,
        }
    }

    #[test]
    fn copy_gold_alignment_is_identity() {
        let pairs = gen_copy(&TaskSpec::copy_default(1), 20).unwrap();
        for p in &pairs {
            assert_eq!(p.tgt.tokens().unwrap(), p.src.as_slice());
            let a = p.gold_align.as_ref().unwrap();
            for r in 0..p.src.len() {
                for c in 0..p.src.len() {
                    assert_eq!(a.row(r)[c], if r == c { 1.0 } else { 0.0 });
                }
            }
            assert!(p.src.len() >= 5 && p.src.len() <= 12);
        }
    }

    #[test]
    fn expansion_lengths_and_alignment_by_construction() {
        let spec = expansion_spec(2);
        let structure = expansion_structure(&spec).unwrap();
        let pairs = gen_expansion(&spec, 25).unwrap();
        for p in &pairs {
            let expected: usize = p.src.iter().map(|&s| structure.durations[s]).sum();
            assert_eq!(p.tgt.len(), expected);
            let a = p.gold_align.as_ref().unwrap();
            let mut t = 0;
            for (l, &sym) in p.src.iter().enumerate() {
                for _ in 0..structure.durations[sym] {
                    assert_eq!(a.row(t)[l], 1.0);
                    assert_eq!(a.row(t).iter().sum::<f64>(), 1.0);
                    t += 1;
                }
            }
        }
    }

    #[test]
    fn expansion_all_durations_one_gives_identity_alignment() {
        let spec = TaskSpec {
            kind: TaskKind::Expansion {
                min_duration: 1,
                max_duration: 1,
                frame_dim: 3,
                noise_std: 0.05,
            },
            ..expansion_spec(3)
        };
        let pairs = gen_expansion(&spec, 10).unwrap();
        for p in &pairs {
            assert_eq!(p.tgt.len(), p.src.len());
            let a = p.gold_align.as_ref().unwrap();
            for r in 0..p.src.len() {
                assert_eq!(a.row(r)[r], 1.0);
            }
        }
    }

    #[test]
    fn expansion_zero_noise_reproduces_prototypes() {
        let spec = TaskSpec {
            kind: TaskKind::Expansion {
                min_duration: 1,
                max_duration: 3,
                frame_dim: 4,
                noise_std: 0.0,
            },
            ..expansion_spec(4)
        };
        let structure = expansion_structure(&spec).unwrap();
        let pairs = gen_expansion(&spec, 5).unwrap();
        for p in &pairs {
            let frames = p.tgt.frames().unwrap();
            let a = p.gold_align.as_ref().unwrap();
            for t in 0..frames.shape()[0] {
                let sym = p.src[argmax(a.row(t))];
                assert_eq!(frames.row(t), structure.prototypes.row(sym));
            }
        }
    }

    #[test]
    fn gold_alignments_monotone_for_copy_and_expansion() {
        let copy = gen_copy(&TaskSpec::copy_default(5), 30).unwrap();
        let exp = gen_expansion(&expansion_spec(6), 30).unwrap();
        for p in copy.iter().chain(&exp) {
            let a = p.gold_align.as_ref().unwrap();
            let mut prev = 0;
            for r in 0..a.shape()[0] {
                let m = argmax(a.row(r));
                assert!(m >= prev, "gold alignment not monotone");
                prev = m;
            }
        }
    }

    #[test]
    fn reorder_block_swap_and_permutation_gold() {
        let spec = TaskSpec {
            kind: TaskKind::Reorder { ambiguous: false },
            vocab: 10,
            min_len: 4,
            max_len: 4,
            seed: 7,
        };
        let pairs = gen_reorder(&spec, 10).unwrap();
        for p in &pairs {
            let t = p.tgt.tokens().unwrap();
            assert_eq!(t, &[p.src[1], p.src[0], p.src[3], p.src[2]]);
            let a = p.gold_align.as_ref().unwrap();
            assert_eq!(a.row(0)[1], 1.0);
            assert_eq!(a.row(1)[0], 1.0);
            assert_eq!(a.row(2)[3], 1.0);
            assert_eq!(a.row(3)[2], 1.0);
        }
    }

    #[test]
    fn reorder_odd_length_keeps_trailing_symbol() {
        assert_eq!(block_swap_permutation(5), vec![1, 0, 3, 2, 4]);
    }

    #[test]
    fn reorder_ambiguity_splits_evenly() {
        let spec = TaskSpec {
            kind: TaskKind::Reorder { ambiguous: true },
            vocab: 50,
            min_len: 4,
            max_len: 8,
            seed: 8,
        };
        let pairs = gen_reorder(&spec, 10_000).unwrap();
        // count via the gold permutation, not token equality, so sources
        // where both orders happen to coincide do not skew the count
        let swapped = pairs
            .iter()
            .filter(|p| {
                let a = p.gold_align.as_ref().unwrap();
                a.row(0)[1] == 1.0
            })
            .count();
        let freq = swapped as f64 / pairs.len() as f64;
        assert!((freq - 0.5).abs() < 0.05, "swap frequency {freq}");
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = expansion_spec(9);
        assert_eq!(gen_expansion(&spec, 15).unwrap(), gen_expansion(&spec, 15).unwrap());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut pairs = gen_expansion(&expansion_spec(10), 8).unwrap();
        pairs.extend(gen_copy(&TaskSpec::copy_default(11), 8).unwrap());
        save_dataset(&path, &pairs).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(pairs, loaded);
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::File::create(&path).unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn non_stochastic_alignment_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"src":[1,2],"tgt":[1,2],"align":[[1.0,0.0],[0.0,1.0]]}}"#).unwrap();
        writeln!(f, r#"{{"src":[1,2],"tgt":[1,2],"align":[[0.9,0.0],[0.0,1.0]]}}"#).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "error should name line 2: {err}");
        assert!(err.contains("0.9"), "error should name the bad sum: {err}");
    }

    #[test]
    fn missing_field_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad2.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"tgt":[1,2]}}"#).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}
