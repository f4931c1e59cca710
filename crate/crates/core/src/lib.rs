//! Metric-learning embeddings of social-media document streams.
//!
//! A document stream is the time-ordered sequence of posts published by one
//! account. This crate learns a map from variable-sized contiguous samples of
//! such streams to points in `R^D` so that samples written by the same author
//! land close together, and evaluates it with a ranking protocol (MRR, R@k)
//! and an account-linking protocol (EER, minDCF).
//!
//! Module map:
//!
//! * [`corpus`]: JSONL ingestion, per-author grouping, post-count filtering
//!   and time-disjoint splits.
//! * [`textcodec`]: unigram subword / byte text encodings, subreddit and hour ids.
//! * [`sampler`]: sample-size distributions, window sampling and batches.
//! * [`embedder`]: the convolutional / attention embedding with hand-written
//!   reverse-mode gradients and checkpoints.
//! * [`objectives`]: triplet loss with semi-hard mining and the top-k loss.
//! * [`metrics`]: ranking and detection metrics.
//! * [`eval`]: ranking / linking protocols and baseline scorers.
//! * [`train`]: the training loop used by the command-line tool.
//! * [`cli`]: the `authorlink` subcommands and their configurations.

pub mod cli;
pub mod corpus;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod objectives;
pub mod sampler;
pub mod synthetic;
pub mod textcodec;
pub mod train;

pub use error::{Error, Result};
