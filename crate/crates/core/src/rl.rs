//! Two-stage caption training: cross-entropy pre-training (PT) followed by
//! self-critical reinforcement learning (RL) where a scorer's output is the
//! reward. Emits a full reward/degeneracy trace, one record per step.

use crate::captioner::{
    greedy_decode, sample_decode, CaptionerConfig, CaptionerError, CaptionerModel,
};
use crate::corpus::{DatasetSplit, TokenSequence, Vocabulary};
use crate::flaws;
use crate::nn::{Adam, AdamConfig, Tensor};
use crate::scorers::{ScoreImage, Scorer, ScorerError};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("non-finite loss in {stage} stage at epoch {epoch} batch {batch}")]
    NumericalError { stage: &'static str, epoch: usize, batch: usize },
    #[error("non-finite score for image {0}")]
    NonFiniteScore(String),
    #[error("scorer failed on image {image_id}: {source}")]
    Scorer {
        image_id: String,
        #[source]
        source: ScorerError,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Captioner(#[from] CaptionerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace format error: {0}")]
    Format(#[from] serde_json::Error),
}

/// Reward clip bounds for Eq.-4-style relative rewards.
pub const REWARD_CLIP: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub pt_epochs: usize,
    pub rl_epochs: usize,
    pub batch_size: usize,
    pub pt_lr: f32,
    pub rl_lr: f32,
    pub seed: u64,
    pub scorer_id: String,
    /// denominator guard for the reward baseline
    pub epsilon_baseline: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pt_epochs: 15,
            rl_epochs: 20,
            batch_size: 16,
            pt_lr: 3e-4,
            rl_lr: 5e-5,
            seed: 0,
            scorer_id: String::new(),
            epsilon_baseline: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if self.epsilon_baseline <= 0.0 {
            return Err(RlError::Config("epsilon_baseline must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(RlError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pt,
    Rl,
}

/// One optimization step's telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub mean_greedy_score: Option<f64>,
    pub mean_sample_score: Option<f64>,
    pub mean_reward_diff: Option<f64>,
    pub mean_length: f64,
    pub mean_max_repeat_bigram: Option<f64>,
    pub mean_distinct_1: Option<f64>,
}

/// Append-only per-step training telemetry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardTrace {
    pub records: Vec<TraceRecord>,
}

impl RewardTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: TraceRecord) {
        self.records.push(rec);
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), RlError> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, RlError> {
        let raw = std::fs::read_to_string(path)?;
        let records = raw
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(RlError::from))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RewardTrace { records })
    }
}

/// Relative sample-vs-greedy reward: `(s - g) / max(|g|, eps)`, clipped to
/// `[-REWARD_CLIP, REWARD_CLIP]`. The clamp at `g = 0` and the clipping are
/// stabilization choices, not part of the published formula.
pub fn reward_diff(sample_score: f64, greedy_score: f64, epsilon_baseline: f64) -> Result<f64, RlError> {
    if !sample_score.is_finite() || !greedy_score.is_finite() {
        return Err(RlError::NonFiniteScore(String::new()));
    }
    let denom = greedy_score.abs().max(epsilon_baseline);
    Ok(((sample_score - greedy_score) / denom).clamp(-REWARD_CLIP, REWARD_CLIP))
}

/// One pre-training example.
#[derive(Debug, Clone, Copy)]
pub struct PtItem<'a> {
    pub image: &'a [f32],
    pub target: &'a TokenSequence,
}

/// Mean per-sequence negative log-likelihood over the batch plus gradients
/// aligned with `model.params`; the caller applies the optimizer step.
pub fn pretrain_step(
    model: &CaptionerModel,
    batch: &[PtItem<'_>],
) -> Result<(f64, Vec<Option<Tensor>>), RlError> {
    assert!(!batch.is_empty(), "pretrain batch must be non-empty");
    let mut tape = crate::nn::Tape::new();
    let bound = model.bind(&mut tape);
    let mut total = None;
    for item in batch {
        let nll = model.nll_node(&mut tape, &bound, item.image, &item.target.ids);
        total = Some(match total {
            None => nll,
            Some(acc) => tape.add(acc, nll),
        });
    }
    let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f32);
    let loss_val = tape.scalar_value(loss) as f64;
    if !loss_val.is_finite() {
        return Err(RlError::NumericalError { stage: "pt", epoch: 0, batch: 0 });
    }
    let grads = tape.backward(loss);
    let owned: Vec<Option<Tensor>> = bound.iter().map(|&id| grads.get(id).cloned()).collect();
    Ok((loss_val, owned))
}

/// One reinforcement item: an image and its id (for scorer bookkeeping).
#[derive(Debug, Clone, Copy)]
pub struct RlItem<'a> {
    pub image_id: &'a str,
    pub image: &'a [f32],
}

/// Output of one self-critical step.
#[derive(Debug, Clone)]
pub struct ScstStep {
    pub loss: f64,
    pub grads: Vec<Option<Tensor>>,
    pub mean_greedy_score: f64,
    pub mean_sample_score: f64,
    pub mean_reward_diff: f64,
    pub mean_sample_len: f64,
    pub mean_max_repeat_bigram: f64,
    pub mean_distinct_1: f64,
    /// (greedy text, sampled text) per item, for callers archiving generations
    pub decoded: Vec<(String, String)>,
}

fn caption_text(vocab: &Vocabulary, tokens: &TokenSequence) -> String {
    vocab.decode(tokens)
}

fn score_caption(scorer: &dyn Scorer, item: &RlItem<'_>, text: &str) -> Result<f64, RlError> {
    if text.is_empty() {
        // an empty decode gets the scorer's floor instead of an abort
        return Ok(scorer.score_range().0);
    }
    let img = ScoreImage { image_id: item.image_id, embedding: item.image };
    let s = scorer
        .score(img, text)
        .map_err(|source| RlError::Scorer { image_id: item.image_id.to_string(), source })?;
    if !s.is_finite() {
        return Err(RlError::NonFiniteScore(item.image_id.to_string()));
    }
    Ok(s)
}

/// Self-critical step: greedy decode is the baseline, one sampled sentence is
/// the action, and the loss is `mean(-r * log p(T_s))` with `r` frozen. The
/// caller applies the optimizer step. `seeds` gives one sampling seed per
/// item.
pub fn scst_step(
    model: &CaptionerModel,
    vocab: &Vocabulary,
    batch: &[RlItem<'_>],
    scorer: &dyn Scorer,
    epsilon_baseline: f64,
    seeds: &[u64],
) -> Result<ScstStep, RlError> {
    assert!(!batch.is_empty(), "scst batch must be non-empty");
    assert_eq!(batch.len(), seeds.len());
    let b = batch.len() as f64;

    let mut rewards = Vec::with_capacity(batch.len());
    let mut samples = Vec::with_capacity(batch.len());
    let mut decoded = Vec::with_capacity(batch.len());
    let mut sum_g = 0.0;
    let mut sum_s = 0.0;
    let mut sum_len = 0.0;
    let mut sum_rep = 0.0;
    let mut sum_distinct = 0.0;
    let mut rep_n = 0usize;

    for (item, &seed) in batch.iter().zip(seeds) {
        let greedy = greedy_decode(model, item.image);
        let sample = sample_decode(model, item.image, seed);
        let g_text = caption_text(vocab, &greedy.tokens);
        let s_text = caption_text(vocab, &sample.tokens);
        let g_score = score_caption(scorer, item, &g_text)?;
        let s_score = score_caption(scorer, item, &s_text)?;
        let r = reward_diff(s_score, g_score, epsilon_baseline)
            .map_err(|_| RlError::NonFiniteScore(item.image_id.to_string()))?;

        sum_g += g_score;
        sum_s += s_score;
        sum_len += sample.tokens.ids.len() as f64;
        let words: Vec<String> = s_text.split_whitespace().map(str::to_string).collect();
        if let Ok(rep) = flaws::analyze(&words) {
            sum_rep += rep.max_repeat[1] as f64;
            sum_distinct += rep.distinct_1;
            rep_n += 1;
        }
        rewards.push(r);
        samples.push(sample.tokens);
        decoded.push((g_text, s_text));
    }

    let mut tape = crate::nn::Tape::new();
    let bound = model.bind(&mut tape);
    let mut total = None;
    let mut loss_val = 0.0;
    for ((item, tokens), &r) in batch.iter().zip(&samples).zip(&rewards) {
        if r == 0.0 {
            continue; // no gradient contribution; keeps the tape small
        }
        let nll = model.nll_node(&mut tape, &bound, item.image, &tokens.ids);
        // loss term -r * log p = r * nll, with r held constant
        let term = tape.scale(nll, r as f32);
        loss_val += tape.scalar_value(term) as f64;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    loss_val /= b;
    if !loss_val.is_finite() {
        return Err(RlError::NumericalError { stage: "rl", epoch: 0, batch: 0 });
    }
    let grads: Vec<Option<Tensor>> = match total {
        Some(t) => {
            let loss = tape.scale(t, 1.0 / b as f32);
            let g = tape.backward(loss);
            bound.iter().map(|&id| g.get(id).cloned()).collect()
        }
        None => vec![None; bound.len()],
    };

    Ok(ScstStep {
        loss: loss_val,
        grads,
        mean_greedy_score: sum_g / b,
        mean_sample_score: sum_s / b,
        mean_reward_diff: rewards.iter().sum::<f64>() / b,
        mean_sample_len: sum_len / b,
        mean_max_repeat_bigram: if rep_n > 0 { sum_rep / rep_n as f64 } else { 0.0 },
        mean_distinct_1: if rep_n > 0 { sum_distinct / rep_n as f64 } else { 0.0 },
        decoded,
    })
}

pub struct TrainOutput {
    pub model: CaptionerModel,
    pub trace: RewardTrace,
    pub checkpoints: Vec<PathBuf>,
}

fn ckpt_path(dir: &Path, stage: Stage, epoch: usize) -> PathBuf {
    let tag = match stage {
        Stage::Pt => "pt",
        Stage::Rl => "rl",
    };
    dir.join(format!("{tag}_epoch_{epoch:03}.json"))
}

fn shuffle<T>(xs: &mut [T], rng: &mut ChaCha12Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// Runs PT then RL, checkpointing after every epoch. Fully deterministic
/// given the seed; if checkpoints from a previous run exist in `out_dir`, the
/// completed epochs are skipped and training resumes after the last one.
pub fn train(
    config: &TrainConfig,
    model_config: &CaptionerConfig,
    vocab: &Vocabulary,
    split: &DatasetSplit,
    scorer: &dyn Scorer,
    out_dir: &Path,
) -> Result<TrainOutput, RlError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let mut cfg = model_config.clone();
    cfg.vocab_size = vocab.size();
    cfg.img_dim = split.embedding_dim;
    let mut model = CaptionerModel::new(cfg, vocab.hash(), config.seed);

    // resume: count contiguous existing checkpoints per stage
    let done_pt = (1..=config.pt_epochs)
        .take_while(|&e| ckpt_path(out_dir, Stage::Pt, e).exists())
        .count();
    let done_rl = if done_pt == config.pt_epochs {
        (1..=config.rl_epochs)
            .take_while(|&e| ckpt_path(out_dir, Stage::Rl, e).exists())
            .count()
    } else {
        0
    };
    if done_rl > 0 {
        model = CaptionerModel::load(&ckpt_path(out_dir, Stage::Rl, done_rl), Some(&vocab.hash()))?;
    } else if done_pt > 0 {
        model = CaptionerModel::load(&ckpt_path(out_dir, Stage::Pt, done_pt), Some(&vocab.hash()))?;
    }

    // keep only trace records from completed epochs, then append
    let trace_path = out_dir.join("trace.jsonl");
    let mut trace = if trace_path.exists() {
        let mut t = RewardTrace::read_jsonl(&trace_path)?;
        t.records.retain(|r| match r.stage {
            Stage::Pt => r.epoch <= done_pt,
            Stage::Rl => r.epoch <= done_rl,
        });
        t
    } else {
        RewardTrace::new()
    };
    trace.write_jsonl(&trace_path)?;
    let mut trace_file = std::fs::OpenOptions::new().append(true).open(&trace_path)?;
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    for e in 1..=done_pt {
        checkpoints.push(ckpt_path(out_dir, Stage::Pt, e));
    }
    for e in 1..=done_rl {
        checkpoints.push(ckpt_path(out_dir, Stage::Rl, e));
    }

    // pre-training pairs: one entry per (image, caption)
    let mut pt_pairs: Vec<(usize, usize)> = Vec::new();
    for (i, rec) in split.train.iter().enumerate() {
        for c in 0..rec.captions.len() {
            pt_pairs.push((i, c));
        }
    }
    let pooled: Vec<Vec<f32>> = split.train.iter().map(|r| r.pooled_embedding()).collect();
    let encoded: Vec<Vec<TokenSequence>> = split
        .train
        .iter()
        .map(|r| r.captions.iter().map(|c| vocab.encode(c)).collect())
        .collect();

    let mut pt_opt = Adam::new(AdamConfig { lr: config.pt_lr, ..AdamConfig::default() }, &model.params);
    for epoch in (done_pt + 1)..=config.pt_epochs {
        let mut order = pt_pairs.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        shuffle(&mut order, &mut rng);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<PtItem<'_>> = chunk
                .iter()
                .map(|&(i, c)| PtItem { image: &pooled[i], target: &encoded[i][c] })
                .collect();
            let (loss, grads) = pretrain_step(&model, &batch)
                .map_err(|e| promote_numerical(e, "pt", epoch, bi))?;
            let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
            pt_opt.step(&mut model.params, &grad_refs);
            let mean_len =
                batch.iter().map(|it| it.target.ids.len() as f64).sum::<f64>() / batch.len() as f64;
            let rec = TraceRecord {
                stage: Stage::Pt,
                epoch,
                batch: bi,
                loss,
                mean_greedy_score: None,
                mean_sample_score: None,
                mean_reward_diff: None,
                mean_length: mean_len,
                mean_max_repeat_bigram: None,
                mean_distinct_1: None,
            };
            writeln!(trace_file, "{}", serde_json::to_string(&rec)?)?;
            trace.push(rec);
        }
        let path = ckpt_path(out_dir, Stage::Pt, epoch);
        model.save(&path)?;
        checkpoints.push(path);
    }

    let image_ids: Vec<&str> = split.train.iter().map(|r| r.image_id.as_str()).collect();
    let mut rl_opt = Adam::new(AdamConfig { lr: config.rl_lr, ..AdamConfig::default() }, &model.params);
    for epoch in (done_rl + 1)..=config.rl_epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        let mut rng =
            ChaCha12Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x85eb_ca6b) ^ 1);
        shuffle(&mut order, &mut rng);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<RlItem<'_>> = chunk
                .iter()
                .map(|&i| RlItem { image_id: image_ids[i], image: &pooled[i] })
                .collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.gen()).collect();
            let step = scst_step(&model, vocab, &batch, scorer, config.epsilon_baseline, &seeds)
                .map_err(|e| promote_numerical(e, "rl", epoch, bi))?;
            let grad_refs: Vec<Option<&Tensor>> = step.grads.iter().map(Option::as_ref).collect();
            rl_opt.step(&mut model.params, &grad_refs);
            let rec = TraceRecord {
                stage: Stage::Rl,
                epoch,
                batch: bi,
                loss: step.loss,
                mean_greedy_score: Some(step.mean_greedy_score),
                mean_sample_score: Some(step.mean_sample_score),
                mean_reward_diff: Some(step.mean_reward_diff),
                mean_length: step.mean_sample_len,
                mean_max_repeat_bigram: Some(step.mean_max_repeat_bigram),
                mean_distinct_1: Some(step.mean_distinct_1),
            };
            writeln!(trace_file, "{}", serde_json::to_string(&rec)?)?;
            trace.push(rec);
        }
        let path = ckpt_path(out_dir, Stage::Rl, epoch);
        model.save(&path)?;
        checkpoints.push(path);
    }

    Ok(TrainOutput { model, trace, checkpoints })
}

fn promote_numerical(e: RlError, stage: &'static str, epoch: usize, batch: usize) -> RlError {
    match e {
        RlError::NumericalError { .. } => RlError::NumericalError { stage, epoch, batch },
        other => other,
    }
}
