//! The built-in trainable reference-free scorer ("clipscore-lite"): a linear
//! image projection and a bag-of-words text encoder with a small MLP, scored
//! as `w * max(0, cosine)` over the shared embedding space.

use super::{ScoreImage, Scorer, ScorerError};
use crate::corpus::{tokenize, Vocabulary, UNK};
use crate::nn::f64ref::Mat;
use crate::nn::{Adam, AdamConfig, Gradients, NodeId, Tape, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DualEncoderError {
    #[error("temperature must be positive, got {0}")]
    ConfigError(f32),
    #[error("loss became non-finite at epoch {epoch} batch {batch}")]
    NumericalError { epoch: usize, batch: usize },
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(#[from] serde_json::Error),
    #[error("checkpoint payload corrupt: {0}")]
    Payload(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DualEncoderConfig {
    pub img_dim: usize,
    /// shared embedding dimension
    pub embed_dim: usize,
    /// word-embedding dimension
    pub text_dim: usize,
    /// hidden width of the text MLP
    pub text_hidden: usize,
    /// CLIPScore-style scale weight applied to the clamped cosine
    pub scale_w: f32,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        DualEncoderConfig { img_dim: 0, embed_dim: 64, text_dim: 64, text_hidden: 128, scale_w: 2.5 }
    }
}

const L2_EPS: f32 = 1e-8;

// parameter indices
const P_IMG_W: usize = 0;
const P_IMG_B: usize = 1;
const P_TXT_EMB: usize = 2;
const P_TXT_W1: usize = 3;
const P_TXT_B1: usize = 4;
const P_TXT_W2: usize = 5;
const P_TXT_B2: usize = 6;

/// One contrastive example: an image embedding, a positive caption, and an
/// optional hard negative caption.
#[derive(Debug, Clone)]
pub struct ContrastiveItem {
    pub image: Vec<f32>,
    pub positive: String,
    pub negative: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOpts {
    pub temperature: f32,
    pub negative_weight: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts { temperature: 0.07, negative_weight: 1.0, batch_size: 64, epochs: 5, lr: 1e-3, seed: 0 }
    }
}

#[derive(Clone)]
pub struct DualEncoder {
    pub scorer_id: String,
    pub config: DualEncoderConfig,
    pub vocab: Vocabulary,
    pub params: Vec<Tensor>,
}

impl DualEncoder {
    pub fn new(scorer_id: &str, config: DualEncoderConfig, vocab: Vocabulary, seed: u64) -> Self {
        assert!(config.img_dim > 0);
        assert!(config.scale_w > 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let std = 0.05f32;
        let params = vec![
            Tensor::randn(config.img_dim, config.embed_dim, std, &mut rng),
            Tensor::zeros(1, config.embed_dim),
            Tensor::randn(vocab.size(), config.text_dim, std, &mut rng),
            Tensor::randn(config.text_dim, config.text_hidden, std, &mut rng),
            Tensor::zeros(1, config.text_hidden),
            Tensor::randn(config.text_hidden, config.embed_dim, std, &mut rng),
            Tensor::zeros(1, config.embed_dim),
        ];
        DualEncoder { scorer_id: scorer_id.to_string(), config, vocab, params }
    }

    /// Word ids for the text encoder; out-of-vocabulary words keep UNK so the
    /// encoder still sees them.
    fn text_ids(&self, caption: &str) -> Vec<usize> {
        tokenize(caption)
            .iter()
            .map(|t| self.vocab.id_of(t).unwrap_or(UNK) as usize)
            .collect()
    }

    fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// `[B, embed_dim]` of unit-normalized image vectors.
    fn images_node(&self, tape: &mut Tape, bound: &[NodeId], images: &[&[f32]]) -> NodeId {
        let b = images.len();
        let mut data = Vec::with_capacity(b * self.config.img_dim);
        for img in images {
            assert_eq!(img.len(), self.config.img_dim, "image embedding dim mismatch");
            data.extend_from_slice(img);
        }
        let x = tape.constant(Tensor::from_vec(b, self.config.img_dim, data));
        let x = tape.matmul(x, bound[P_IMG_W]);
        let x = tape.add_row(x, bound[P_IMG_B]);
        tape.l2norm_rows(x, L2_EPS)
    }

    /// `[B, embed_dim]` of unit-normalized text vectors from bag-of-words
    /// means. Every caption must have at least one token.
    fn texts_node(&self, tape: &mut Tape, bound: &[NodeId], token_ids: &[Vec<usize>]) -> NodeId {
        let b = token_ids.len();
        let mut all_ids = Vec::new();
        for ids in token_ids {
            assert!(!ids.is_empty(), "caption with no tokens reached the text encoder");
            all_ids.extend_from_slice(ids);
        }
        // block-structured mean matrix: row i averages its caption's rows
        let mut w = Tensor::zeros(b, all_ids.len());
        let mut offset = 0;
        for (i, ids) in token_ids.iter().enumerate() {
            let inv = 1.0 / ids.len() as f32;
            for k in 0..ids.len() {
                w.data[i * all_ids.len() + offset + k] = inv;
            }
            offset += ids.len();
        }
        let w = tape.constant(w);
        let emb = tape.embed(bound[P_TXT_EMB], &all_ids);
        let mean = tape.matmul(w, emb);
        let h = tape.matmul(mean, bound[P_TXT_W1]);
        let h = tape.add_row(h, bound[P_TXT_B1]);
        let h = tape.relu(h);
        let v = tape.matmul(h, bound[P_TXT_W2]);
        let v = tape.add_row(v, bound[P_TXT_B2]);
        tape.l2norm_rows(v, L2_EPS)
    }

    /// Raw cosine between an image and a caption in the shared space.
    pub fn cosine(&self, image_embedding: &[f32], caption: &str) -> Result<f64, ScorerError> {
        let ids = self.text_ids(caption);
        if ids.is_empty() {
            return Err(ScorerError::EmptyCaption);
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let u = self.images_node(&mut tape, &bound, &[image_embedding]);
        let v = self.texts_node(&mut tape, &bound, &[ids]);
        let prod = tape.mul(u, v);
        let cos = tape.row_sum(prod);
        Ok(tape.value(cos).data[0] as f64)
    }

    /// Symmetric in-batch contrastive loss. For each image the text
    /// candidates are all in-batch positives plus, when present, its own hard
    /// negative weighted by `lambda` in the denominator.
    #[allow(clippy::too_many_arguments)]
    pub fn contrastive_loss_node(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        images: &[&[f32]],
        positives: &[Vec<usize>],
        negatives: Option<&[Vec<usize>]>,
        tau: f32,
        lambda: f32,
    ) -> NodeId {
        let b = images.len();
        assert_eq!(positives.len(), b);
        let u = self.images_node(tape, bound, images);
        let t_pos = self.texts_node(tape, bound, positives);
        let s = tape.matmul_nt(u, t_pos);
        let s = tape.scale(s, 1.0 / tau);
        let diag_ids: Vec<usize> = (0..b).collect();

        // image -> text, hard negatives appended to the denominator
        let es = tape.exp(s);
        let mut denom = tape.row_sum(es);
        if let Some(negs) = negatives {
            if lambda > 0.0 {
                let t_neg = self.texts_node(tape, bound, negs);
                let prod = tape.mul(u, t_neg);
                let h = tape.row_sum(prod);
                let h = tape.scale(h, 1.0 / tau);
                let eh = tape.exp(h);
                let eh = tape.scale(eh, lambda);
                denom = tape.add(denom, eh);
            }
        }
        let log_denom = tape.ln(denom);
        let diag = tape.pick_per_row(s, &diag_ids);
        let neg_diag = tape.scale(diag, -1.0);
        let i2t = tape.add(log_denom, neg_diag);
        let i2t = tape.mean_all(i2t);

        // text -> image, standard in-batch softmax
        let st = tape.matmul_nt(t_pos, u);
        let st = tape.scale(st, 1.0 / tau);
        let lp = tape.log_softmax_rows(st);
        let diag_t = tape.pick_per_row(lp, &diag_ids);
        let t2i = tape.mean_all(diag_t);
        let t2i = tape.scale(t2i, -1.0);

        let sum = tape.add(i2t, t2i);
        tape.scale(sum, 0.5)
    }

    /// Slow f64 re-evaluation of `contrastive_loss_node` on explicit
    /// parameters; forward-only, shared with no tape code, and precise enough
    /// for small-step finite-difference probes.
    pub fn contrastive_loss_f64(
        &self,
        params: &[Mat],
        images: &[&[f32]],
        positives: &[Vec<usize>],
        negatives: Option<&[Vec<usize>]>,
        tau: f32,
        lambda: f32,
    ) -> f64 {
        let b = images.len();
        let p = |i: usize| params[i].clone();
        let tau = tau as f64;

        let image_vecs = |imgs: &[&[f32]]| -> Mat {
            let mut x = Mat::zeros(imgs.len(), self.config.img_dim);
            for (r, img) in imgs.iter().enumerate() {
                for (c, &v) in img.iter().enumerate() {
                    x.data[r * self.config.img_dim + c] = v as f64;
                }
            }
            let mut x = x.matmul(&p(P_IMG_W));
            x.add_row(&p(P_IMG_B));
            x.l2norm_rows(L2_EPS as f64);
            x
        };
        let text_vecs = |token_ids: &[Vec<usize>]| -> Mat {
            let table = p(P_TXT_EMB);
            let mut mean = Mat::zeros(token_ids.len(), self.config.text_dim);
            for (r, ids) in token_ids.iter().enumerate() {
                let inv = 1.0 / ids.len() as f64;
                for &id in ids {
                    for c in 0..self.config.text_dim {
                        mean.data[r * self.config.text_dim + c] += inv * table.row(id)[c];
                    }
                }
            }
            let mut h = mean.matmul(&p(P_TXT_W1));
            h.add_row(&p(P_TXT_B1));
            h.relu();
            let mut v = h.matmul(&p(P_TXT_W2));
            v.add_row(&p(P_TXT_B2));
            v.l2norm_rows(L2_EPS as f64);
            v
        };

        let u = image_vecs(images);
        let t_pos = text_vecs(positives);
        let mut s = u.matmul_nt(&t_pos);
        s.scale(1.0 / tau);

        let mut i2t = 0.0;
        for i in 0..b {
            let mut denom: f64 = s.row(i).iter().map(|x| x.exp()).sum();
            if let (Some(negs), true) = (negatives, lambda > 0.0) {
                let t_neg = text_vecs(negs);
                let h: f64 =
                    u.row(i).iter().zip(t_neg.row(i)).map(|(a, c)| a * c).sum::<f64>() / tau;
                denom += lambda as f64 * h.exp();
            }
            i2t += denom.ln() - s.row(i)[i];
        }
        i2t /= b as f64;

        let mut st = t_pos.matmul_nt(&u);
        st.scale(1.0 / tau);
        st.log_softmax_rows();
        let t2i = -(0..b).map(|i| st.row(i)[i]).sum::<f64>() / b as f64;

        0.5 * (i2t + t2i)
    }

    /// Runs the contrastive optimizer in place. Returns the per-epoch mean
    /// losses. Items whose positive (or present negative) tokenizes to
    /// nothing are skipped.
    pub fn train_contrastive(
        &mut self,
        items: &[ContrastiveItem],
        opts: &TrainOpts,
    ) -> Result<Vec<f32>, DualEncoderError> {
        if opts.temperature <= 0.0 {
            return Err(DualEncoderError::ConfigError(opts.temperature));
        }
        let usable: Vec<&ContrastiveItem> = items
            .iter()
            .filter(|it| {
                !self.text_ids(&it.positive).is_empty()
                    && it.negative.as_deref().map_or(true, |n| !self.text_ids(n).is_empty())
            })
            .collect();
        let mut adam = Adam::new(AdamConfig { lr: opts.lr, ..AdamConfig::default() }, &self.params);
        let mut epoch_losses = Vec::with_capacity(opts.epochs);
        let mut order: Vec<usize> = (0..usable.len()).collect();
        for epoch in 0..opts.epochs {
            let mut rng = ChaCha12Rng::seed_from_u64(opts.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
            shuffle(&mut order, &mut rng);
            let mut total = 0.0f32;
            let mut batches = 0usize;
            for (bi, chunk) in order.chunks(opts.batch_size.max(2)).enumerate() {
                if chunk.len() < 2 {
                    continue; // a softmax over one candidate carries no signal
                }
                let images: Vec<&[f32]> = chunk.iter().map(|&i| usable[i].image.as_slice()).collect();
                let positives: Vec<Vec<usize>> =
                    chunk.iter().map(|&i| self.text_ids(&usable[i].positive)).collect();
                let has_negs = chunk.iter().all(|&i| usable[i].negative.is_some());
                let negatives: Option<Vec<Vec<usize>>> = if has_negs && opts.negative_weight > 0.0 {
                    Some(chunk.iter().map(|&i| self.text_ids(usable[i].negative.as_deref().unwrap())).collect())
                } else {
                    None
                };
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape);
                let loss = self.contrastive_loss_node(
                    &mut tape,
                    &bound,
                    &images,
                    &positives,
                    negatives.as_deref(),
                    opts.temperature,
                    opts.negative_weight,
                );
                let loss_v = tape.scalar_value(loss);
                if !loss_v.is_finite() {
                    return Err(DualEncoderError::NumericalError { epoch, batch: bi });
                }
                total += loss_v;
                batches += 1;
                let grads: Gradients = tape.backward(loss);
                let grad_refs: Vec<Option<&Tensor>> = bound.iter().map(|&id| grads.get(id)).collect();
                adam.step(&mut self.params, &grad_refs);
            }
            epoch_losses.push(if batches > 0 { total / batches as f32 } else { 0.0 });
        }
        Ok(epoch_losses)
    }

    pub fn save(&self, path: &Path) -> Result<(), DualEncoderError> {
        let ckpt = EncoderCheckpoint {
            scorer_id: self.scorer_id.clone(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.iter().map(crate::ckpt::to_blob).collect(),
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DualEncoderError> {
        let ckpt: EncoderCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let params: Result<Vec<Tensor>, String> = ckpt.params.iter().map(crate::ckpt::from_blob).collect();
        Ok(DualEncoder {
            scorer_id: ckpt.scorer_id,
            config: ckpt.config,
            vocab: ckpt.vocab,
            params: params.map_err(DualEncoderError::Payload)?,
        })
    }
}

fn shuffle(xs: &mut [usize], rng: &mut ChaCha12Rng) {
    use rand::Rng;
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderCheckpoint {
    scorer_id: String,
    config: DualEncoderConfig,
    vocab: Vocabulary,
    params: Vec<crate::ckpt::TensorBlob>,
}

/// `w * max(0, cosine(image_vec, text_vec))`, range [0, w].
pub fn embedding_score(
    encoder: &DualEncoder,
    image_embedding: &[f32],
    caption: &str,
) -> Result<f64, ScorerError> {
    let cos = encoder.cosine(image_embedding, caption)?;
    Ok(encoder.config.scale_w as f64 * cos.max(0.0))
}

impl Scorer for DualEncoder {
    fn id(&self) -> &str {
        &self.scorer_id
    }
    fn score(&self, image: ScoreImage<'_>, caption: &str) -> Result<f64, ScorerError> {
        embedding_score(self, image.embedding, caption)
    }
    fn score_range(&self) -> (f64, f64) {
        (0.0, self.config.scale_w as f64)
    }
}
