//! A small autoregressive captioning model: a decoder-only transformer over
//! `[image token, BOS, w_1, ...]` with the image entering through a learned
//! linear projection. Greedy and multinomial decoding plus exact sequence
//! log-probabilities.

use crate::corpus::{TokenSequence, BOS, EOS};
use crate::nn::f64ref::Mat;
use crate::nn::{NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaptionerError {
    #[error("embedding dimension mismatch: model expects {expected}, image has {actual}")]
    ShapeError { expected: usize, actual: usize },
    #[error("token id {0} out of vocabulary range {1}")]
    VocabError(u32, usize),
    #[error("checkpoint was trained under a different vocabulary (hash {found}, expected {expected})")]
    VocabHashMismatch { expected: String, found: String },
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(#[from] serde_json::Error),
    #[error("checkpoint tensor payload corrupt: {0}")]
    Payload(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CaptionerConfig {
    pub vocab_size: usize,
    pub img_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            vocab_size: 0,
            img_dim: 0,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 20,
        }
    }
}

const LN_EPS: f32 = 1e-5;
const MASK_NEG: f32 = -1e9;

/// Anything that yields next-token log-probabilities given an image and a
/// prefix. Decoding is written against this so tests can drive it with
/// hand-built conditional tables.
pub trait AutoregressivePolicy {
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    /// Log-probabilities over the vocabulary for the next token. `prefix`
    /// holds previously emitted word ids (no BOS).
    fn step_log_probs(&self, image: &[f32], prefix: &[u32]) -> Vec<f32>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeResult {
    pub tokens: TokenSequence,
    pub stepwise_log_probs: Vec<f32>,
    pub mode: DecodeMode,
    pub seed: Option<u64>,
}

impl DecodeResult {
    pub fn total_log_prob(&self) -> f32 {
        self.stepwise_log_probs.iter().sum()
    }
}

/// Greedy decoding: argmax at every step, terminating at EOS or max length
/// (with a forced terminal EOS scored at the model's own probability).
pub fn greedy_decode<P: AutoregressivePolicy>(policy: &P, image: &[f32]) -> DecodeResult {
    decode_with(policy, image, DecodeMode::Greedy, None)
}

/// Multinomial sampling from the full untruncated conditional distribution.
pub fn sample_decode<P: AutoregressivePolicy>(policy: &P, image: &[f32], seed: u64) -> DecodeResult {
    decode_with(policy, image, DecodeMode::Sample, Some(seed))
}

fn decode_with<P: AutoregressivePolicy>(
    policy: &P,
    image: &[f32],
    mode: DecodeMode,
    seed: Option<u64>,
) -> DecodeResult {
    let mut rng = seed.map(ChaCha12Rng::seed_from_u64);
    let mut tokens: Vec<u32> = Vec::new();
    let mut lps: Vec<f32> = Vec::new();
    for _ in 0..policy.max_len() {
        let lp = policy.step_log_probs(image, &tokens);
        let tok = match mode {
            DecodeMode::Greedy => argmax(&lp) as u32,
            DecodeMode::Sample => multinomial(&lp, rng.as_mut().expect("sampling needs a seed")),
        };
        lps.push(lp[tok as usize]);
        tokens.push(tok);
        if tok == EOS {
            break;
        }
    }
    if *tokens.last().unwrap() != EOS {
        // out of budget: force the terminator, scored at its model probability
        let lp = policy.step_log_probs(image, &tokens);
        lps.push(lp[EOS as usize]);
        tokens.push(EOS);
    }
    DecodeResult { tokens: TokenSequence { ids: tokens }, stepwise_log_probs: lps, mode, seed }
}

/// Exact `log p(tokens | image)` under the policy: the sum of stepwise
/// conditional log-probabilities.
pub fn sequence_log_prob<P: AutoregressivePolicy>(
    policy: &P,
    image: &[f32],
    tokens: &TokenSequence,
) -> Result<f32, CaptionerError> {
    let mut total = 0.0f32;
    for (t, &tok) in tokens.ids.iter().enumerate() {
        if tok as usize >= policy.vocab_size() {
            return Err(CaptionerError::VocabError(tok, policy.vocab_size()));
        }
        let lp = policy.step_log_probs(image, &tokens.ids[..t]);
        total += lp[tok as usize];
    }
    Ok(total)
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn multinomial(log_probs: &[f32], rng: &mut ChaCha12Rng) -> u32 {
    let u: f32 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0f32;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i as u32;
        }
    }
    (log_probs.len() - 1) as u32
}

// parameter layout indices
#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    img_w: usize,
    img_b: usize,
    layers: Vec<LayerLayout>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone)]
struct LayerLayout {
    ln1_g: usize,
    ln1_b: usize,
    heads: Vec<(usize, usize, usize)>, // (wq, wk, wv)
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff_w1: usize,
    ff_b1: usize,
    ff_w2: usize,
    ff_b2: usize,
}

pub struct CaptionerModel {
    pub config: CaptionerConfig,
    pub vocab_hash: String,
    pub params: Vec<Tensor>,
    layout: Layout,
}

impl CaptionerModel {
    pub fn new(config: CaptionerConfig, vocab_hash: String, seed: u64) -> Self {
        assert!(config.vocab_size > 0 && config.img_dim > 0);
        assert_eq!(config.d_model % config.n_heads, 0, "d_model must divide into heads");
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params: Vec<Tensor> = Vec::new();
        let std = 0.02f32;
        let d = config.d_model;
        let dh = d / config.n_heads;

        let randn = |rows: usize, cols: usize, rng: &mut ChaCha12Rng, params: &mut Vec<Tensor>| {
            params.push(Tensor::randn(rows, cols, std, rng));
            params.len() - 1
        };
        let fill = |rows: usize, cols: usize, v: f32, params: &mut Vec<Tensor>| {
            params.push(Tensor::filled(rows, cols, v));
            params.len() - 1
        };

        let tok_emb = randn(config.vocab_size, d, &mut rng, &mut params);
        let pos_emb = randn(config.max_len + 2, d, &mut rng, &mut params);
        let img_w = randn(config.img_dim, d, &mut rng, &mut params);
        let img_b = fill(1, d, 0.0, &mut params);
        let mut layers = Vec::new();
        for _ in 0..config.n_layers {
            let ln1_g = fill(1, d, 1.0, &mut params);
            let ln1_b = fill(1, d, 0.0, &mut params);
            let mut heads = Vec::new();
            for _ in 0..config.n_heads {
                let wq = randn(d, dh, &mut rng, &mut params);
                let wk = randn(d, dh, &mut rng, &mut params);
                let wv = randn(d, dh, &mut rng, &mut params);
                heads.push((wq, wk, wv));
            }
            let wo = randn(d, d, &mut rng, &mut params);
            let bo = fill(1, d, 0.0, &mut params);
            let ln2_g = fill(1, d, 1.0, &mut params);
            let ln2_b = fill(1, d, 0.0, &mut params);
            let ff_w1 = randn(d, config.d_ff, &mut rng, &mut params);
            let ff_b1 = fill(1, config.d_ff, 0.0, &mut params);
            let ff_w2 = randn(config.d_ff, d, &mut rng, &mut params);
            let ff_b2 = fill(1, d, 0.0, &mut params);
            layers.push(LayerLayout { ln1_g, ln1_b, heads, wo, bo, ln2_g, ln2_b, ff_w1, ff_b1, ff_w2, ff_b2 });
        }
        let lnf_g = fill(1, d, 1.0, &mut params);
        let lnf_b = fill(1, d, 0.0, &mut params);
        let out_w = randn(d, config.vocab_size, &mut rng, &mut params);
        let out_b = fill(1, config.vocab_size, 0.0, &mut params);

        let layout = Layout { tok_emb, pos_emb, img_w, img_b, layers, lnf_g, lnf_b, out_w, out_b };
        CaptionerModel { config, vocab_hash, params, layout }
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn check_image(&self, image: &[f32]) -> Result<(), CaptionerError> {
        if image.len() != self.config.img_dim {
            return Err(CaptionerError::ShapeError { expected: self.config.img_dim, actual: image.len() });
        }
        Ok(())
    }

    /// Binds every parameter onto a tape; index-aligned with `self.params`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Log-probabilities `[1 + 1 + prefix.len(), vocab]` for the sequence
    /// `[IMG, BOS, prefix...]`; row `t+1` conditions on the first `t` words.
    pub fn forward_log_probs(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        image: &[f32],
        prefix: &[u32],
    ) -> NodeId {
        let lay = &self.layout;
        let cfg = &self.config;
        let t_in = 2 + prefix.len();
        assert!(t_in <= cfg.max_len + 2, "sequence exceeds positional table");

        let mut ids: Vec<usize> = Vec::with_capacity(1 + prefix.len());
        ids.push(BOS as usize);
        ids.extend(prefix.iter().map(|&w| w as usize));
        let tok = tape.embed(bound[lay.tok_emb], &ids);

        let img_const = tape.constant(Tensor::from_vec(1, cfg.img_dim, image.to_vec()));
        let img_row = tape.matmul(img_const, bound[lay.img_w]);
        let img_row = tape.add_row(img_row, bound[lay.img_b]);

        let mut x = tape.concat_rows(img_row, tok);
        let pos = tape.slice_rows(bound[lay.pos_emb], 0, t_in);
        x = tape.add(x, pos);

        let mask = causal_mask(t_in);
        let dh = cfg.d_model / cfg.n_heads;
        let scale = 1.0 / (dh as f32).sqrt();

        for layer in &lay.layers {
            let h = self.layer_norm(tape, bound, x, layer.ln1_g, layer.ln1_b);
            let mut head_out: Option<NodeId> = None;
            for &(wq, wk, wv) in &layer.heads {
                let q = tape.matmul(h, bound[wq]);
                let k = tape.matmul(h, bound[wk]);
                let v = tape.matmul(h, bound[wv]);
                let s = tape.matmul_nt(q, k);
                let s = tape.scale(s, scale);
                let s = tape.add_const(s, &mask);
                let a = tape.softmax_rows(s);
                let o = tape.matmul(a, v);
                head_out = Some(match head_out {
                    Some(acc) => tape.concat_cols(acc, o),
                    None => o,
                });
            }
            let o = head_out.expect("at least one head");
            let o = tape.matmul(o, bound[layer.wo]);
            let o = tape.add_row(o, bound[layer.bo]);
            x = tape.add(x, o);

            let h2 = self.layer_norm(tape, bound, x, layer.ln2_g, layer.ln2_b);
            let f = tape.matmul(h2, bound[layer.ff_w1]);
            let f = tape.add_row(f, bound[layer.ff_b1]);
            let f = tape.relu(f);
            let f = tape.matmul(f, bound[layer.ff_w2]);
            let f = tape.add_row(f, bound[layer.ff_b2]);
            x = tape.add(x, f);
        }

        let x = self.layer_norm(tape, bound, x, lay.lnf_g, lay.lnf_b);
        let logits = tape.matmul(x, bound[lay.out_w]);
        let logits = tape.add_row(logits, bound[lay.out_b]);
        tape.log_softmax_rows(logits)
    }

    fn layer_norm(&self, tape: &mut Tape, bound: &[NodeId], x: NodeId, g: usize, b: usize) -> NodeId {
        let n = tape.normalize_rows(x, LN_EPS);
        let n = tape.mul_row(n, bound[g]);
        tape.add_row(n, bound[b])
    }

    /// Differentiable `-log p(targets | image)` (Eq.-style sum over steps).
    /// `targets` should terminate with EOS.
    pub fn nll_node(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        image: &[f32],
        targets: &[u32],
    ) -> NodeId {
        assert!(!targets.is_empty());
        let prefix = &targets[..targets.len() - 1];
        let lp = self.forward_log_probs(tape, bound, image, prefix);
        let rows = tape.slice_rows(lp, 1, targets.len());
        let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let picks = tape.pick_per_row(rows, &ids);
        let total = tape.sum_all(picks);
        tape.scale(total, -1.0)
    }

    /// Per-step probability distribution (not log) for diagnostics.
    pub fn next_token_probs(&self, image: &[f32], prefix: &[u32]) -> Vec<f32> {
        self.step_log_probs(image, prefix).iter().map(|lp| lp.exp()).collect()
    }

    /// Slow f64 re-evaluation of `nll_node` on explicit parameters. This is
    /// forward-only and shares no code with the tape, so finite-difference
    /// probes of it stay well above float32 roundoff.
    pub fn nll_f64(&self, params: &[Mat], image: &[f32], targets: &[u32]) -> f64 {
        assert!(!targets.is_empty());
        let lay = &self.layout;
        let cfg = &self.config;
        let prefix = &targets[..targets.len() - 1];
        let t_in = 2 + prefix.len();
        let p = |i: usize| params[i].clone();

        let tok_table = p(lay.tok_emb);
        let mut tok = Mat::zeros(1 + prefix.len(), cfg.d_model);
        let ids: Vec<usize> =
            std::iter::once(BOS as usize).chain(prefix.iter().map(|&w| w as usize)).collect();
        for (r, &id) in ids.iter().enumerate() {
            tok.data[r * cfg.d_model..(r + 1) * cfg.d_model].copy_from_slice(tok_table.row(id));
        }

        let mut img_row = Mat::from_f32_row(image).matmul(&p(lay.img_w));
        img_row.add_row(&p(lay.img_b));

        let mut x = img_row.concat_rows(&tok);
        let pos = p(lay.pos_emb);
        for r in 0..t_in {
            for c in 0..cfg.d_model {
                x.data[r * cfg.d_model + c] += pos.data[r * cfg.d_model + c];
            }
        }

        let dh = cfg.d_model / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ln = |xin: &Mat, g: usize, b: usize| {
            let mut n = xin.clone();
            n.normalize_rows(LN_EPS as f64);
            n.mul_row(&p(g));
            n.add_row(&p(b));
            n
        };

        for layer in &lay.layers {
            let h = ln(&x, layer.ln1_g, layer.ln1_b);
            let mut head_out: Option<Mat> = None;
            for &(wq, wk, wv) in &layer.heads {
                let q = h.matmul(&p(wq));
                let k = h.matmul(&p(wk));
                let v = h.matmul(&p(wv));
                let mut s = q.matmul_nt(&k);
                s.scale(scale);
                for r in 0..t_in {
                    for c in (r + 1)..t_in {
                        s.data[r * t_in + c] += MASK_NEG as f64;
                    }
                }
                s.softmax_rows();
                let o = s.matmul(&v);
                head_out = Some(match head_out {
                    Some(acc) => acc.concat_cols(&o),
                    None => o,
                });
            }
            let mut o = head_out.expect("at least one head").matmul(&p(layer.wo));
            o.add_row(&p(layer.bo));
            x.add(&o);

            let h2 = ln(&x, layer.ln2_g, layer.ln2_b);
            let mut f = h2.matmul(&p(layer.ff_w1));
            f.add_row(&p(layer.ff_b1));
            f.relu();
            let mut f = f.matmul(&p(layer.ff_w2));
            f.add_row(&p(layer.ff_b2));
            x.add(&f);
        }

        let x = ln(&x, lay.lnf_g, lay.lnf_b);
        let mut logits = x.matmul(&p(lay.out_w));
        logits.add_row(&p(lay.out_b));
        logits.log_softmax_rows();

        let mut nll = 0.0;
        for (step, &t) in targets.iter().enumerate() {
            nll -= logits.row(1 + step)[t as usize];
        }
        nll
    }
}

fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(t, t);
    for r in 0..t {
        for c in (r + 1)..t {
            m.data[r * t + c] = MASK_NEG;
        }
    }
    m
}

impl AutoregressivePolicy for CaptionerModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn step_log_probs(&self, image: &[f32], prefix: &[u32]) -> Vec<f32> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let lp = self.forward_log_probs(&mut tape, &bound, image, prefix);
        let v = tape.value(lp);
        v.row(v.rows - 1).to_vec()
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: CaptionerConfig,
    vocab_hash: String,
    params: Vec<crate::ckpt::TensorBlob>,
}

impl CaptionerModel {
    pub fn save(&self, path: &Path) -> Result<(), CaptionerError> {
        let ckpt = Checkpoint {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            params: self.params.iter().map(crate::ckpt::to_blob).collect(),
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    /// Loads a checkpoint, refusing when the vocabulary hash disagrees with
    /// `expected_vocab_hash`.
    pub fn load(path: &Path, expected_vocab_hash: Option<&str>) -> Result<Self, CaptionerError> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let Some(expected) = expected_vocab_hash {
            if expected != ckpt.vocab_hash {
                return Err(CaptionerError::VocabHashMismatch {
                    expected: expected.to_string(),
                    found: ckpt.vocab_hash,
                });
            }
        }
        let params: Result<Vec<Tensor>, String> =
            ckpt.params.iter().map(crate::ckpt::from_blob).collect();
        let params = params.map_err(CaptionerError::Payload)?;
        // rebuild layout from config, then swap the tensors in
        let mut model = CaptionerModel::new(ckpt.config, ckpt.vocab_hash, 0);
        if model.params.len() != params.len() {
            return Err(CaptionerError::Payload("parameter count mismatch".into()));
        }
        for (slot, t) in model.params.iter_mut().zip(params) {
            if !slot.same_shape(&t) {
                return Err(CaptionerError::Payload("parameter shape mismatch".into()));
            }
            *slot = t;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{directional_check, random_direction};

    /// Fixed conditional tables keyed by the prefix; used to pin decode
    /// behavior independent of the transformer.
    pub struct TableModel {
        pub vocab: usize,
        pub max_len: usize,
        pub table: Vec<(Vec<u32>, Vec<f32>)>, // (prefix, probs)
        pub fallback: Vec<f32>,
    }

    impl AutoregressivePolicy for TableModel {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn max_len(&self) -> usize {
            self.max_len
        }
        fn step_log_probs(&self, _image: &[f32], prefix: &[u32]) -> Vec<f32> {
            let probs = self
                .table
                .iter()
                .find(|(p, _)| p == prefix)
                .map(|(_, d)| d)
                .unwrap_or(&self.fallback);
            probs.iter().map(|p| p.max(1e-30).ln()).collect()
        }
    }

    // vocab: 0=PAD 1=BOS 2=EOS 3=UNK 4="a" 5="dog"
    fn two_step_fixture() -> TableModel {
        let mut eos_only = vec![0.0; 6];
        eos_only[EOS as usize] = 1.0;
        TableModel {
            vocab: 6,
            max_len: 8,
            table: vec![
                (vec![], vec![0.0, 0.0, 0.02, 0.03, 0.9, 0.05]),
                (vec![4], vec![0.0, 0.0, 0.1, 0.05, 0.05, 0.8]),
                (vec![4, 5], eos_only.clone()),
            ],
            fallback: eos_only,
        }
    }

    #[test]
    fn greedy_follows_argmax_per_step() {
        let m = two_step_fixture();
        let out = greedy_decode(&m, &[]);
        assert_eq!(out.tokens.ids, vec![4, 5, EOS]);
        let expected = [0.9f32.ln(), 0.8f32.ln(), 0.0];
        for (a, b) in out.stepwise_log_probs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn greedy_is_deterministic_on_real_model() {
        let cfg = CaptionerConfig { vocab_size: 12, img_dim: 4, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_len: 6 };
        let m = CaptionerModel::new(cfg, "h".into(), 7);
        let img = [0.1, -0.2, 0.3, 0.4];
        let a = greedy_decode(&m, &img);
        let b = greedy_decode(&m, &img);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.stepwise_log_probs, b.stepwise_log_probs);
    }

    #[test]
    fn max_length_one_forces_eos() {
        let mut m = two_step_fixture();
        m.max_len = 1;
        let out = greedy_decode(&m, &[]);
        assert_eq!(out.tokens.ids, vec![4, EOS]);
        assert_eq!(out.stepwise_log_probs.len(), out.tokens.len());
    }

    #[test]
    fn sampling_is_seed_reproducible() {
        let m = two_step_fixture();
        let a = sample_decode(&m, &[], 42);
        let b = sample_decode(&m, &[], 42);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.stepwise_log_probs, b.stepwise_log_probs);
    }

    #[test]
    fn degenerate_distribution_matches_greedy() {
        let mut eos_only = vec![0.0; 6];
        eos_only[EOS as usize] = 1.0;
        let m = TableModel {
            vocab: 6,
            max_len: 8,
            table: vec![
                (vec![], vec![0.0, 0.0, 0.0, 0.0, 1.0 - 1e-9, 1e-9]),
                (vec![4], eos_only.clone()),
            ],
            fallback: eos_only,
        };
        let g = greedy_decode(&m, &[]);
        for seed in 0..20 {
            let s = sample_decode(&m, &[], seed);
            assert_eq!(s.tokens, g.tokens);
        }
    }

    #[test]
    fn sampling_frequency_matches_distribution() {
        let mut eos_only = vec![0.0; 6];
        eos_only[EOS as usize] = 1.0;
        let m = TableModel {
            vocab: 6,
            max_len: 4,
            table: vec![(vec![], vec![0.0, 0.0, 0.0, 0.0, 0.7, 0.3])],
            fallback: eos_only,
        };
        let n = 10_000;
        let mut count_a = 0usize;
        for seed in 0..n {
            if sample_decode(&m, &[], seed as u64).tokens.ids[0] == 4 {
                count_a += 1;
            }
        }
        let freq = count_a as f64 / n as f64;
        assert!((freq - 0.7).abs() < 0.02, "empirical frequency {freq}");
    }

    #[test]
    fn sequence_log_prob_matches_fixture_product() {
        let m = two_step_fixture();
        let ts = TokenSequence { ids: vec![4, 5] };
        let lp = sequence_log_prob(&m, &[], &ts).unwrap();
        assert!((lp - (0.72f32).ln()).abs() < 1e-5);
    }

    #[test]
    fn sequence_log_prob_consistent_with_sample() {
        let cfg = CaptionerConfig { vocab_size: 10, img_dim: 3, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_len: 6 };
        let m = CaptionerModel::new(cfg, "h".into(), 3);
        let img = [0.5, -0.5, 0.25];
        let s = sample_decode(&m, &img, 11);
        let lp = sequence_log_prob(&m, &img, &s.tokens).unwrap();
        assert!((lp - s.total_log_prob()).abs() < 1e-4);
        assert!(lp <= 0.0);
    }

    #[test]
    fn out_of_range_token_is_vocab_error() {
        let m = two_step_fixture();
        let ts = TokenSequence { ids: vec![99] };
        assert!(matches!(sequence_log_prob(&m, &[], &ts), Err(CaptionerError::VocabError(99, 6))));
    }

    #[test]
    fn per_step_distributions_normalize() {
        let cfg = CaptionerConfig { vocab_size: 20, img_dim: 5, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_len: 8 };
        let m = CaptionerModel::new(cfg, "h".into(), 9);
        let img = [1.0, 0.0, -1.0, 0.5, 2.0];
        for prefix in [vec![], vec![5], vec![5, 6, 7]] {
            let p = m.next_token_probs(&img, &prefix);
            let sum: f32 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "distribution sums to {sum}");
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let cfg = CaptionerConfig { vocab_size: 9, img_dim: 3, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_len: 6 };
        let model = CaptionerModel::new(cfg.clone(), "h".into(), 5);
        let img = [0.3, -0.7, 0.2];
        let targets = vec![4u32, 5, 6, EOS];

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let loss = model.nll_node(&mut tape, &bound, &img, &targets);
        let tape_loss = tape.scalar_value(loss) as f64;
        let ref_loss = model.nll_f64(&crate::nn::f64ref::mats(&model.params), &img, &targets);
        assert!((tape_loss - ref_loss).abs() < 1e-4 * ref_loss.abs().max(1.0));
        let grads = tape.backward(loss);
        let grad_refs: Vec<Option<&Tensor>> = bound.iter().map(|&id| grads.get(id)).collect();

        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..10 {
            let dir = random_direction(&model.params, &mut rng);
            let mut loss_fn = |params: &[Mat]| model.nll_f64(params, &img, &targets);
            let check = directional_check(&model.params, &grad_refs, &dir, 1e-4, &mut loss_fn);
            assert!(check.rel_error < 1e-3, "gradcheck failed: {check:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CaptionerConfig { vocab_size: 8, img_dim: 3, d_model: 8, n_layers: 1, n_heads: 1, d_ff: 16, max_len: 4 };
        let m = CaptionerModel::new(cfg, "vhash".into(), 1);
        let p = dir.path().join("ckpt.json");
        m.save(&p).unwrap();
        let loaded = CaptionerModel::load(&p, Some("vhash")).unwrap();
        assert_eq!(loaded.params, m.params);
        assert!(matches!(
            CaptionerModel::load(&p, Some("other")),
            Err(CaptionerError::VocabHashMismatch { .. })
        ));
    }
}
