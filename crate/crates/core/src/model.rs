//! Attention-based encoder-decoder: embedding + bidirectional GRU encoder,
//! GRU decoder state, hybrid (content + location) attention, and output
//! heads for discrete tokens or continuous frame blocks.
//!
//! The pieces are deliberately exposed one step at a time — `encode`,
//! `decoder_step`, `attend`, `context`, the heads — so that training
//! regimes can wire the history and the alignment from whichever source
//! they need (reference, generated, or a teacher model).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// What the decoder emits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TargetKind {
    /// Token ids in `0..vocab`; the output head adds one extra class for
    /// the end-of-sequence token, whose id is `vocab`.
    Discrete { vocab: usize },
    /// Real-valued frames of width `frame_dim`, emitted `reduction` frames
    /// per decode step.
    Continuous { frame_dim: usize, reduction: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub target: TargetKind,
    /// Width of source (and discrete-target) embeddings.
    pub embed_dim: usize,
    /// Encoder GRU size per direction; encoder states are twice this wide.
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub attn_dim: usize,
    pub attn_filters: usize,
    pub attn_kernel: usize,
    pub max_src_len: usize,
}

impl ModelConfig {
    pub fn enc_dim(&self) -> usize {
        2 * self.enc_hidden
    }

    /// Width of the output-head input `[s_t; c_t]`.
    pub fn head_in_dim(&self) -> usize {
        self.dec_hidden + self.enc_dim()
    }

    /// Width of the decoder GRU input (embedded token or raw frame).
    pub fn dec_in_dim(&self) -> usize {
        match self.target {
            TargetKind::Discrete { .. } => self.embed_dim,
            TargetKind::Continuous { frame_dim, .. } => frame_dim,
        }
    }

    /// Output-head class count for discrete targets (vocab plus EOS).
    pub fn tgt_classes(&self) -> usize {
        match self.target {
            TargetKind::Discrete { vocab } => vocab + 1,
            TargetKind::Continuous { .. } => 0,
        }
    }

    /// The end-of-sequence class id.
    pub fn eos(&self) -> usize {
        match self.target {
            TargetKind::Discrete { vocab } => vocab,
            TargetKind::Continuous { .. } => panic!("continuous targets have no EOS token"),
        }
    }

    pub fn reduction(&self) -> usize {
        match self.target {
            TargetKind::Discrete { .. } => 1,
            TargetKind::Continuous { reduction, .. } => reduction,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("src_vocab", self.src_vocab),
            ("embed_dim", self.embed_dim),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("attn_dim", self.attn_dim),
            ("attn_filters", self.attn_filters),
            ("attn_kernel", self.attn_kernel),
            ("max_src_len", self.max_src_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        match self.target {
            TargetKind::Discrete { vocab } if vocab == 0 => {
                Err(Error::Config("target vocab must be positive".into()))
            }
            TargetKind::Continuous { frame_dim, reduction }
                if frame_dim == 0 || reduction == 0 =>
            {
                Err(Error::Config("frame_dim and reduction must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One gated recurrent cell: update/reset/candidate gates.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wn: Tensor,
    pub un: Tensor,
    pub bn: Tensor,
}

impl GruParams {
    pub(crate) fn new(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GruParams {
            wz: Tensor::glorot(&[in_dim, hidden], rng),
            uz: Tensor::glorot(&[hidden, hidden], rng),
            bz: Tensor::zeros(&[hidden]),
            wr: Tensor::glorot(&[in_dim, hidden], rng),
            ur: Tensor::glorot(&[hidden, hidden], rng),
            br: Tensor::zeros(&[hidden]),
            wn: Tensor::glorot(&[in_dim, hidden], rng),
            un: Tensor::glorot(&[hidden, hidden], rng),
            bn: Tensor::zeros(&[hidden]),
        }
    }

    pub(crate) fn fields(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("wz", &self.wz),
            ("uz", &self.uz),
            ("bz", &self.bz),
            ("wr", &self.wr),
            ("ur", &self.ur),
            ("br", &self.br),
            ("wn", &self.wn),
            ("un", &self.un),
            ("bn", &self.bn),
        ]
    }

    pub(crate) fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 9] {
        [
            ("wz", &mut self.wz),
            ("uz", &mut self.uz),
            ("bz", &mut self.bz),
            ("wr", &mut self.wr),
            ("ur", &mut self.ur),
            ("br", &mut self.br),
            ("wn", &mut self.wn),
            ("un", &mut self.un),
            ("bn", &mut self.bn),
        ]
    }
}

/// Hybrid attention parameters: `score_l = v^T tanh(W s_t + V h_l + U f_l)`
/// with `f = conv1d(alpha_prev)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub query: Tensor,
    pub keys: Tensor,
    pub loc: Tensor,
    pub kernel: Tensor,
    pub score: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    Discrete {
        tgt_embed: Tensor,
        start: Tensor,
        w_out: Tensor,
        b_out: Tensor,
    },
    Continuous {
        w_out: Tensor,
        b_out: Tensor,
        w_stop: Tensor,
        b_stop: Tensor,
    },
}

/// The full parameter set of one encoder-attention-decoder model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub src_embed: Tensor,
    pub enc_fwd: GruParams,
    pub enc_bwd: GruParams,
    pub dec: GruParams,
    pub attn: AttnParams,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let src_embed = Tensor::glorot(&[cfg.src_vocab, cfg.embed_dim], rng);
        let enc_fwd = GruParams::new(cfg.embed_dim, cfg.enc_hidden, rng);
        let enc_bwd = GruParams::new(cfg.embed_dim, cfg.enc_hidden, rng);
        let dec = GruParams::new(cfg.dec_in_dim(), cfg.dec_hidden, rng);
        let attn = AttnParams {
            query: Tensor::glorot(&[cfg.dec_hidden, cfg.attn_dim], rng),
            keys: Tensor::glorot(&[cfg.enc_dim(), cfg.attn_dim], rng),
            loc: Tensor::glorot(&[cfg.attn_filters, cfg.attn_dim], rng),
            kernel: Tensor::glorot(&[cfg.attn_filters, 1, cfg.attn_kernel], rng),
            score: Tensor::glorot(&[cfg.attn_dim], rng),
        };
        let head = match cfg.target {
            TargetKind::Discrete { .. } => HeadParams::Discrete {
                tgt_embed: Tensor::glorot(&[cfg.tgt_classes(), cfg.embed_dim], rng),
                start: Tensor::glorot(&[cfg.embed_dim], rng),
                w_out: Tensor::glorot(&[cfg.head_in_dim(), cfg.tgt_classes()], rng),
                b_out: Tensor::zeros(&[cfg.tgt_classes()]),
            },
            TargetKind::Continuous { frame_dim, reduction } => HeadParams::Continuous {
                w_out: Tensor::glorot(&[cfg.head_in_dim(), reduction * frame_dim], rng),
                b_out: Tensor::zeros(&[reduction * frame_dim]),
                w_stop: Tensor::glorot(&[cfg.head_in_dim(), 1], rng),
                b_stop: Tensor::zeros(&[1]),
            },
        };
        Ok(ModelParams { cfg, src_embed, enc_fwd, enc_bwd, dec, attn, head })
    }

    /// Stable (name, tensor) enumeration; the checkpoint format and the
    /// optimizer key off these names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("src_embed".into(), &self.src_embed)];
        for (prefix, gru) in
            [("enc_fwd", &self.enc_fwd), ("enc_bwd", &self.enc_bwd), ("dec", &self.dec)]
        {
            for (name, t) in gru.fields() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out.push(("attn.query".into(), &self.attn.query));
        out.push(("attn.keys".into(), &self.attn.keys));
        out.push(("attn.loc".into(), &self.attn.loc));
        out.push(("attn.kernel".into(), &self.attn.kernel));
        out.push(("attn.score".into(), &self.attn.score));
        match &self.head {
            HeadParams::Discrete { tgt_embed, start, w_out, b_out } => {
                out.push(("head.tgt_embed".into(), tgt_embed));
                out.push(("head.start".into(), start));
                out.push(("head.w_out".into(), w_out));
                out.push(("head.b_out".into(), b_out));
            }
            HeadParams::Continuous { w_out, b_out, w_stop, b_stop } => {
                out.push(("head.w_out".into(), w_out));
                out.push(("head.b_out".into(), b_out));
                out.push(("head.w_stop".into(), w_stop));
                out.push(("head.b_stop".into(), b_stop));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![("src_embed".into(), &mut self.src_embed)];
        for (prefix, gru) in [
            ("enc_fwd", &mut self.enc_fwd),
            ("enc_bwd", &mut self.enc_bwd),
            ("dec", &mut self.dec),
        ] {
            for (name, t) in gru.fields_mut() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out.push(("attn.query".into(), &mut self.attn.query));
        out.push(("attn.keys".into(), &mut self.attn.keys));
        out.push(("attn.loc".into(), &mut self.attn.loc));
        out.push(("attn.kernel".into(), &mut self.attn.kernel));
        out.push(("attn.score".into(), &mut self.attn.score));
        match &mut self.head {
            HeadParams::Discrete { tgt_embed, start, w_out, b_out } => {
                out.push(("head.tgt_embed".into(), tgt_embed));
                out.push(("head.start".into(), start));
                out.push(("head.w_out".into(), w_out));
                out.push(("head.b_out".into(), b_out));
            }
            HeadParams::Continuous { w_out, b_out, w_stop, b_stop } => {
                out.push(("head.w_out".into(), w_out));
                out.push(("head.b_out".into(), b_out));
                out.push(("head.w_stop".into(), w_stop));
                out.push(("head.b_stop".into(), b_stop));
            }
        }
        out
    }

    /// Finiteness and dimension consistency, for parameters loaded from disk.
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        for (name, t) in self.named_tensors() {
            t.check_finite("params").map_err(|_| {
                Error::Data(format!("parameter {name} contains non-finite values"))
            })?;
        }
        if self.src_embed.shape() != [self.cfg.src_vocab, self.cfg.embed_dim] {
            return Err(Error::Config("src_embed shape inconsistent with config".into()));
        }
        if self.attn.kernel.shape() != [self.cfg.attn_filters, 1, self.cfg.attn_kernel] {
            return Err(Error::Config("attention kernel shape inconsistent with config".into()));
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.clear_grad();
        }
    }
}

// ── Tape bindings ───────────────────────────────────────────────────────

#[derive(Clone, Copy)]
pub struct GruVars {
    pub(crate) wz: Var,
    pub(crate) uz: Var,
    pub(crate) bz: Var,
    pub(crate) wr: Var,
    pub(crate) ur: Var,
    pub(crate) br: Var,
    pub(crate) wn: Var,
    pub(crate) un: Var,
    pub(crate) bn: Var,
}

impl GruVars {
    pub(crate) fn bind(p: &GruParams, tape: &mut Tape, tracked: bool) -> Self {
        GruVars {
            wz: tape.leaf(p.wz.clone(), tracked),
            uz: tape.leaf(p.uz.clone(), tracked),
            bz: tape.leaf(p.bz.clone(), tracked),
            wr: tape.leaf(p.wr.clone(), tracked),
            ur: tape.leaf(p.ur.clone(), tracked),
            br: tape.leaf(p.br.clone(), tracked),
            wn: tape.leaf(p.wn.clone(), tracked),
            un: tape.leaf(p.un.clone(), tracked),
            bn: tape.leaf(p.bn.clone(), tracked),
        }
    }
}

#[derive(Clone, Copy)]
pub struct AttnVars {
    pub query: Var,
    pub keys: Var,
    pub loc: Var,
    pub kernel: Var,
    pub score: Var,
}

#[derive(Clone, Copy)]
pub enum HeadVars {
    Discrete { tgt_embed: Var, start: Var, w_out: Var, b_out: Var },
    Continuous { w_out: Var, b_out: Var, w_stop: Var, b_stop: Var },
}

/// A parameter set registered on a tape as leaves, ready for one
/// forward/backward pass.
#[derive(Clone)]
pub struct ModelVars {
    pub cfg: ModelConfig,
    pub src_embed: Var,
    pub enc_fwd: GruVars,
    pub enc_bwd: GruVars,
    pub dec: GruVars,
    pub attn: AttnVars,
    pub head: HeadVars,
}

impl ModelVars {
    /// Registers every parameter tensor as a leaf. `tracked = false` freezes
    /// the model (teacher use); gradients then cannot reach it.
    pub fn bind(params: &ModelParams, tape: &mut Tape, tracked: bool) -> Self {
        ModelVars {
            cfg: params.cfg.clone(),
            src_embed: tape.leaf(params.src_embed.clone(), tracked),
            enc_fwd: GruVars::bind(&params.enc_fwd, tape, tracked),
            enc_bwd: GruVars::bind(&params.enc_bwd, tape, tracked),
            dec: GruVars::bind(&params.dec, tape, tracked),
            attn: AttnVars {
                query: tape.leaf(params.attn.query.clone(), tracked),
                keys: tape.leaf(params.attn.keys.clone(), tracked),
                loc: tape.leaf(params.attn.loc.clone(), tracked),
                kernel: tape.leaf(params.attn.kernel.clone(), tracked),
                score: tape.leaf(params.attn.score.clone(), tracked),
            },
            head: match &params.head {
                HeadParams::Discrete { tgt_embed, start, w_out, b_out } => HeadVars::Discrete {
                    tgt_embed: tape.leaf(tgt_embed.clone(), tracked),
                    start: tape.leaf(start.clone(), tracked),
                    w_out: tape.leaf(w_out.clone(), tracked),
                    b_out: tape.leaf(b_out.clone(), tracked),
                },
                HeadParams::Continuous { w_out, b_out, w_stop, b_stop } => HeadVars::Continuous {
                    w_out: tape.leaf(w_out.clone(), tracked),
                    b_out: tape.leaf(b_out.clone(), tracked),
                    w_stop: tape.leaf(w_stop.clone(), tracked),
                    b_stop: tape.leaf(b_stop.clone(), tracked),
                },
            },
        }
    }

    /// Vars in the same order as [`ModelParams::named_tensors`], for reading
    /// gradients back out after a backward pass.
    pub fn vars_in_order(&self) -> Vec<Var> {
        let mut out = vec![self.src_embed];
        for gru in [&self.enc_fwd, &self.enc_bwd, &self.dec] {
            out.extend([gru.wz, gru.uz, gru.bz, gru.wr, gru.ur, gru.br, gru.wn, gru.un, gru.bn]);
        }
        out.extend([
            self.attn.query,
            self.attn.keys,
            self.attn.loc,
            self.attn.kernel,
            self.attn.score,
        ]);
        match self.head {
            HeadVars::Discrete { tgt_embed, start, w_out, b_out } => {
                out.extend([tgt_embed, start, w_out, b_out]);
            }
            HeadVars::Continuous { w_out, b_out, w_stop, b_stop } => {
                out.extend([w_out, b_out, w_stop, b_stop]);
            }
        }
        out
    }

    /// Inverse of [`ModelVars::vars_in_order`]: reassembles the binding from
    /// leaves created externally (e.g. by `grad_check`).
    pub fn from_ordered_vars(cfg: &ModelConfig, vars: &[Var]) -> Self {
        let gru = |base: usize| GruVars {
            wz: vars[base],
            uz: vars[base + 1],
            bz: vars[base + 2],
            wr: vars[base + 3],
            ur: vars[base + 4],
            br: vars[base + 5],
            wn: vars[base + 6],
            un: vars[base + 7],
            bn: vars[base + 8],
        };
        let head = match cfg.target {
            TargetKind::Discrete { .. } => HeadVars::Discrete {
                tgt_embed: vars[33],
                start: vars[34],
                w_out: vars[35],
                b_out: vars[36],
            },
            TargetKind::Continuous { .. } => HeadVars::Continuous {
                w_out: vars[33],
                b_out: vars[34],
                w_stop: vars[35],
                b_stop: vars[36],
            },
        };
        ModelVars {
            cfg: cfg.clone(),
            src_embed: vars[0],
            enc_fwd: gru(1),
            enc_bwd: gru(10),
            dec: gru(19),
            attn: AttnVars {
                query: vars[28],
                keys: vars[29],
                loc: vars[30],
                kernel: vars[31],
                score: vars[32],
            },
            head,
        }
    }
}

// ── Forward building blocks ─────────────────────────────────────────────

pub(crate) fn gru_step(tape: &mut Tape, gru: &GruVars, state: Var, input: Var) -> Result<Var> {
    let gate = |tape: &mut Tape, w, u, b, s| -> Result<Var> {
        let xi = tape.matmul(input, w)?;
        let si = tape.matmul(s, u)?;
        let sum = tape.add(xi, si)?;
        tape.add(sum, b)
    };
    let z = gate(tape, gru.wz, gru.uz, gru.bz, state)?;
    let z = tape.sigmoid(z)?;
    let r = gate(tape, gru.wr, gru.ur, gru.br, state)?;
    let r = tape.sigmoid(r)?;
    let gated = tape.mul(r, state)?;
    let n = gate(tape, gru.wn, gru.un, gru.bn, gated)?;
    let n = tape.tanh(n)?;
    // h' = (1 - z) * n + z * s
    let zn = tape.mul(z, n)?;
    let zs = tape.mul(z, state)?;
    let keep = tape.sub(n, zn)?;
    tape.add(keep, zs)
}

/// Maps a source token sequence to the `L x enc_dim` encoding matrix via a
/// bidirectional GRU over embeddings.
pub fn encode(tape: &mut Tape, vars: &ModelVars, x: &[usize]) -> Result<Var> {
    let cfg = &vars.cfg;
    if x.is_empty() || x.len() > cfg.max_src_len {
        return Err(Error::data(format!(
            "source length {} outside 1..={}",
            x.len(),
            cfg.max_src_len
        )));
    }
    if let Some(&bad) = x.iter().find(|&&t| t >= cfg.src_vocab) {
        return Err(Error::data(format!(
            "source token {bad} outside vocabulary of size {}",
            cfg.src_vocab
        )));
    }
    let l = x.len();
    let embedded = tape.embed(vars.src_embed, x)?;
    let step_input = |tape: &mut Tape, t: usize| -> Result<Var> {
        let row = tape.slice(embedded, t, 1)?;
        tape.reshape(row, &[cfg.embed_dim])
    };

    let mut fwd = Vec::with_capacity(l);
    let mut state = tape.constant(Tensor::zeros(&[cfg.enc_hidden]));
    for t in 0..l {
        let input = step_input(tape, t)?;
        state = gru_step(tape, &vars.enc_fwd, state, input)?;
        fwd.push(state);
    }
    let mut bwd = vec![None; l];
    let mut state = tape.constant(Tensor::zeros(&[cfg.enc_hidden]));
    for t in (0..l).rev() {
        let input = step_input(tape, t)?;
        state = gru_step(tape, &vars.enc_bwd, state, input)?;
        bwd[t] = Some(state);
    }

    let mut rows = Vec::with_capacity(l);
    for t in 0..l {
        let joined = tape.concat(&[fwd[t], bwd[t].unwrap()], 0)?;
        rows.push(tape.reshape(joined, &[1, cfg.enc_dim()])?);
    }
    tape.concat(&rows, 0)
}

/// Zero initial decoder state.
pub fn initial_state(tape: &mut Tape, cfg: &ModelConfig) -> Var {
    tape.constant(Tensor::zeros(&[cfg.dec_hidden]))
}

/// Uniform initial alignment over `l` source positions.
pub fn initial_alignment(tape: &mut Tape, l: usize) -> Var {
    tape.constant(Tensor::filled(&[l], 1.0 / l as f64))
}

/// The decoder-history input at t = 1: a learned start embedding for
/// discrete targets, the zero frame for continuous ones.
pub fn start_input(tape: &mut Tape, vars: &ModelVars) -> Result<Var> {
    match vars.head {
        HeadVars::Discrete { start, .. } => Ok(start),
        HeadVars::Continuous { .. } => match vars.cfg.target {
            TargetKind::Continuous { frame_dim, .. } => {
                Ok(tape.constant(Tensor::zeros(&[frame_dim])))
            }
            TargetKind::Discrete { .. } => unreachable!(),
        },
    }
}

/// Embeds a history token (data token or EOS) as the decoder input.
pub fn embed_history_token(tape: &mut Tape, vars: &ModelVars, token: usize) -> Result<Var> {
    match vars.head {
        HeadVars::Discrete { tgt_embed, .. } => {
            let row = tape.embed(tgt_embed, &[token])?;
            tape.reshape(row, &[vars.cfg.embed_dim])
        }
        HeadVars::Continuous { .. } => {
            Err(Error::contract("token history on a continuous-target model"))
        }
    }
}

/// One gated recurrent update of the decoder state from the previous
/// history input: `s_t = f(s_{t-1}, y_{t-1})`.
pub fn decoder_step(tape: &mut Tape, vars: &ModelVars, s_prev: Var, y_prev: Var) -> Result<Var> {
    gru_step(tape, &vars.dec, s_prev, y_prev)
}

/// Precomputed `h @ keys` projection, hoisted out of per-step attention.
pub fn attention_keys(tape: &mut Tape, vars: &ModelVars, h: Var) -> Result<Var> {
    tape.matmul(h, vars.attn.keys)
}

/// Hybrid content + location attention:
/// `score_l = v^T tanh(W s_t + V h_l + U f_l)` with `f = conv1d(alpha_prev)`,
/// returned through a softmax so the alignment lives on the simplex.
pub fn attend(tape: &mut Tape, vars: &ModelVars, s_t: Var, h: Var, alpha_prev: Var) -> Result<Var> {
    let keys = attention_keys(tape, vars, h)?;
    attend_with_keys(tape, vars, s_t, keys, alpha_prev)
}

/// `attend` with the key projection supplied by the caller.
pub fn attend_with_keys(
    tape: &mut Tape,
    vars: &ModelVars,
    s_t: Var,
    keys: Var,
    alpha_prev: Var,
) -> Result<Var> {
    let l = tape.value(alpha_prev).numel();
    if tape.value(keys).shape()[0] != l {
        return Err(Error::contract(format!(
            "alignment length {l} does not match {} encoder states",
            tape.value(keys).shape()[0]
        )));
    }
    let feats = tape.conv1d(alpha_prev, vars.attn.kernel)?;
    let loc = tape.matmul(feats, vars.attn.loc)?;
    let query = tape.matmul(s_t, vars.attn.query)?;
    let content = tape.add(keys, loc)?;
    let pre = tape.add(content, query)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul(act, vars.attn.score)?;
    tape.softmax(scores)
}

/// Context vector `c_t = sum_l alpha_l h_l`.
pub fn context(tape: &mut Tape, alpha: Var, h: Var) -> Result<Var> {
    if tape.value(alpha).numel() != tape.value(h).shape()[0] {
        return Err(Error::contract(format!(
            "alignment length {} does not match {} encoder states",
            tape.value(alpha).numel(),
            tape.value(h).shape()[0]
        )));
    }
    tape.matmul(alpha, h)
}

/// Categorical distribution over the target classes (vocab plus EOS).
pub fn output_head_categorical(
    tape: &mut Tape,
    vars: &ModelVars,
    s_t: Var,
    c_t: Var,
) -> Result<Var> {
    let HeadVars::Discrete { w_out, b_out, .. } = vars.head else {
        return Err(Error::contract("categorical head on a continuous-target model"));
    };
    let joined = tape.concat(&[s_t, c_t], 0)?;
    let logits = tape.matmul(joined, w_out)?;
    let logits = tape.add(logits, b_out)?;
    tape.softmax(logits)
}

/// Frame block of `reduction` frames, the mode of a Laplace output
/// distribution (so its NLL reduces to the L1 distance).
pub fn output_head_continuous(
    tape: &mut Tape,
    vars: &ModelVars,
    s_t: Var,
    c_t: Var,
) -> Result<Var> {
    let HeadVars::Continuous { w_out, b_out, .. } = vars.head else {
        return Err(Error::contract("continuous head on a discrete-target model"));
    };
    let TargetKind::Continuous { frame_dim, reduction } = vars.cfg.target else { unreachable!() };
    let joined = tape.concat(&[s_t, c_t], 0)?;
    let out = tape.matmul(joined, w_out)?;
    let out = tape.add(out, b_out)?;
    tape.reshape(out, &[reduction, frame_dim])
}

/// Stop-flag logit for continuous decoding (one per frame block).
pub fn stop_logit(tape: &mut Tape, vars: &ModelVars, s_t: Var, c_t: Var) -> Result<Var> {
    let HeadVars::Continuous { w_stop, b_stop, .. } = vars.head else {
        return Err(Error::contract("stop predictor on a discrete-target model"));
    };
    let joined = tape.concat(&[s_t, c_t], 0)?;
    let logit = tape.matmul(joined, w_stop)?;
    tape.add(logit, b_stop)
}
