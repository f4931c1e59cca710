//! Ranking and account-linking protocols, scorers and their reports.

mod protocols;
mod scorers;

pub use protocols::{
    build_linking_eval, build_linking_eval_from, build_linking_eval_known_queries,
    build_ranking_eval, build_ranking_eval_known_queries, select_linking_accounts, LinkingEval,
    LinkingEvalSpec, LinkingSelection, RankingEval, RankingEvalSpec, Sample,
};
pub use scorers::{
    chunk_sizes, fit_tfidf, score_all, score_matrix, word_tokens, AvgSinglePostScorer,
    Fixed16Scorer, ModelScorer, Scorer, ScorerKind, SparseVec, TfidfScorer, FIXED_GROUP,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{mrr, rank_from_scores, recall_at_k};

/// Cutoffs reported for recall.
pub const RECALL_CUTOFFS: [usize; 4] = [1, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub num_queries: usize,
    pub num_targets: usize,
    pub mrr: f64,
    pub recall_at: BTreeMap<usize, f64>,
}

pub fn rank_queries<S: Scorer>(scorer: &S, eval: &RankingEval) -> Result<Vec<usize>> {
    let m = score_matrix(scorer, &eval.queries, &eval.targets)?;
    Ok(m.iter()
        .zip(&eval.true_target)
        .map(|(row, &t)| rank_from_scores(row, t))
        .collect())
}

pub fn ranking_report<S: Scorer>(scorer: &S, eval: &RankingEval) -> Result<RankingReport> {
    let ranks = rank_queries(scorer, eval)?;
    let mut recall_at = BTreeMap::new();
    for k in RECALL_CUTOFFS {
        recall_at.insert(k, recall_at_k(&ranks, k)?);
    }
    Ok(RankingReport {
        num_queries: eval.queries.len(),
        num_targets: eval.targets.len(),
        mrr: mrr(&ranks)?,
        recall_at,
    })
}
