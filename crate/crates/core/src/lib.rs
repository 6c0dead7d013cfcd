//! capprobe: stress-tests reference-free caption scorers by using them as
//! RL rewards, repairs them by contrastive retraining on the degenerate
//! captions the probe produces, and evaluates scorers on a discrimination
//! benchmark, human-correlation data, and an LLM-judge protocol.

pub mod analysis;
pub mod captioner;
pub mod cli;
pub mod ckpt;
pub mod corpus;
pub mod flaws;
pub mod judge;
pub mod nn;
pub mod rl;
pub mod scorers;
pub mod self_improving;
pub mod synth;
