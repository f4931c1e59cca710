use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Action, DocumentStream, TimeWindow};
use crate::error::{Error, Result};

/// A contiguous run of one author's posts, kept as raw actions so that
/// text baselines and the model can score the same samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub author_id: String,
    pub actions: Vec<Action>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingEvalSpec {
    pub num_queries: usize,
    pub num_targets: usize,
    #[serde(default = "default_episode_size")]
    pub episode_size: usize,
    pub eval_window: TimeWindow,
}

fn default_episode_size() -> usize {
    16
}

impl RankingEvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.episode_size == 0 {
            return Err(Error::Config(
                "ranking eval needs queries and a positive episode size".into(),
            ));
        }
        if self.num_targets < self.num_queries {
            return Err(Error::Config(format!(
                "ranking eval needs at least as many targets ({}) as queries ({})",
                self.num_targets, self.num_queries
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingEval {
    pub queries: Vec<Sample>,
    pub targets: Vec<Sample>,
    /// Index into `targets` of each query's same-author target.
    pub true_target: Vec<usize>,
}

/// Queries and targets for the ranking protocol.
///
/// Each query author contributes a query window and a later, disjoint target
/// window. The remaining targets come from other authors, one each. Targets
/// are shuffled.
pub fn build_ranking_eval<R: Rng + ?Sized>(
    streams: &[DocumentStream],
    spec: &RankingEvalSpec,
    rng: &mut R,
) -> Result<RankingEval> {
    build_ranking(streams, spec, None, rng)
}

/// As [`build_ranking_eval`], with query authors drawn from `query_authors`
/// (typically the training authors). Distractors may be any other author.
pub fn build_ranking_eval_known_queries<R: Rng + ?Sized>(
    streams: &[DocumentStream],
    spec: &RankingEvalSpec,
    query_authors: &BTreeSet<String>,
    rng: &mut R,
) -> Result<RankingEval> {
    build_ranking(streams, spec, Some(query_authors), rng)
}

fn build_ranking<R: Rng + ?Sized>(
    streams: &[DocumentStream],
    spec: &RankingEvalSpec,
    query_authors: Option<&BTreeSet<String>>,
    rng: &mut R,
) -> Result<RankingEval> {
    spec.validate()?;
    let size = spec.episode_size;
    let mut pool: Vec<DocumentStream> = streams
        .iter()
        .filter_map(|s| s.restrict(spec.eval_window))
        .filter(|s| s.len() >= size)
        .collect();
    pool.sort_by(|a, b| a.author_id.cmp(&b.author_id));
    let eligible: Vec<usize> = (0..pool.len())
        .filter(|&i| pool[i].len() >= 2 * size)
        .filter(|&i| query_authors.is_none_or(|q| q.contains(&pool[i].author_id)))
        .collect();
    if eligible.len() < spec.num_queries {
        return Err(Error::Data(format!(
            "ranking eval needs {} query authors with >= {} posts in the window, found {} ({} short)",
            spec.num_queries,
            2 * size,
            eligible.len(),
            spec.num_queries - eligible.len()
        )));
    }
    let query_authors: Vec<usize> = index::sample(rng, eligible.len(), spec.num_queries)
        .iter()
        .map(|i| eligible[i])
        .collect();
    let taken: BTreeSet<usize> = query_authors.iter().copied().collect();
    let others: Vec<usize> = (0..pool.len()).filter(|i| !taken.contains(i)).collect();
    let n_distractors = spec.num_targets - spec.num_queries;
    if others.len() < n_distractors {
        return Err(Error::Data(format!(
            "ranking eval needs {n_distractors} distractor authors with >= {size} posts, found {} ({} short)",
            others.len(),
            n_distractors - others.len()
        )));
    }

    let take = |s: &DocumentStream, start: usize| Sample {
        author_id: s.author_id.clone(),
        actions: s.actions[start..start + size].to_vec(),
    };
    let mut queries = Vec::with_capacity(spec.num_queries);
    let mut targets = Vec::with_capacity(spec.num_targets);
    for &a in &query_authors {
        let s = &pool[a];
        let q = rng.random_range(0..=s.len() - 2 * size);
        let t = rng.random_range(q + size..=s.len() - size);
        queries.push(take(s, q));
        targets.push(take(s, t));
    }
    for i in index::sample(rng, others.len(), n_distractors) {
        let s = &pool[others[i]];
        targets.push(take(s, rng.random_range(0..=s.len() - size)));
    }
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.shuffle(rng);
    let mut position = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        position[old] = new;
    }
    let shuffled = order.iter().map(|&i| targets[i].clone()).collect();
    Ok(RankingEval {
        queries,
        targets: shuffled,
        true_target: (0..spec.num_queries).map(|i| position[i]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkingEvalSpec {
    pub subreddit: String,
    pub num_distinguished: usize,
    pub query_size: usize,
    pub num_decoys: usize,
    pub target_size: usize,
    pub query_window: TimeWindow,
    pub target_window: TimeWindow,
    pub min_query_history: usize,
    pub min_target_history: usize,
}

impl LinkingEvalSpec {
    /// Full-size protocol for one subreddit.
    pub fn standard(subreddit: &str, query_window: TimeWindow, target_window: TimeWindow) -> Self {
        Self {
            subreddit: subreddit.to_string(),
            num_distinguished: 100,
            query_size: 100,
            num_decoys: 4900,
            target_size: 4,
            query_window,
            target_window,
            min_query_history: 100,
            min_target_history: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_distinguished == 0 || self.query_size == 0 || self.target_size == 0 {
            return Err(Error::Config(
                "linking eval needs distinguished accounts and positive sample sizes".into(),
            ));
        }
        if self.query_size > self.min_query_history || self.target_size > self.min_target_history {
            return Err(Error::Config(format!(
                "sample sizes ({}, {}) exceed the history minima ({}, {})",
                self.query_size, self.target_size, self.min_query_history, self.min_target_history
            )));
        }
        if self.query_window.start > self.query_window.end
            || self.target_window.start > self.target_window.end
        {
            return Err(Error::Config("linking window with start > end".into()));
        }
        if self.query_window.end > self.target_window.start {
            return Err(Error::Config(
                "query window must end before the target window starts".into(),
            ));
        }
        Ok(())
    }

    fn posts(&self, s: &DocumentStream, window: TimeWindow) -> Vec<Action> {
        s.actions
            .iter()
            .filter(|a| a.subreddit == self.subreddit && window.contains(a.timestamp))
            .cloned()
            .collect()
    }
}

/// Accounts chosen for one linking evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkingSelection {
    pub distinguished: Vec<String>,
    pub decoys: Vec<String>,
    pub seed: u64,
    /// Distinguished accounts were restricted to training authors.
    #[serde(default)]
    pub known_queries: bool,
}

impl LinkingSelection {
    pub fn validate(&self) -> Result<()> {
        let d: BTreeSet<&String> = self.distinguished.iter().collect();
        if d.len() != self.distinguished.len() {
            return Err(Error::Data("duplicate distinguished account".into()));
        }
        if let Some(x) = self.decoys.iter().find(|x| d.contains(x)) {
            return Err(Error::Data(format!(
                "decoy {x} is also a distinguished account"
            )));
        }
        if self.decoys.iter().collect::<BTreeSet<_>>().len() != self.decoys.len() {
            return Err(Error::Data("duplicate decoy account".into()));
        }
        Ok(())
    }
}

/// Picks distinguished accounts (long query-side and target-side history in
/// the subreddit) and decoys (target-side history only). With
/// `restrict_to`, distinguished accounts come only from that set.
pub fn select_linking_accounts<R: Rng + ?Sized>(
    streams: &[DocumentStream],
    spec: &LinkingEvalSpec,
    restrict_to: Option<&BTreeSet<String>>,
    seed: u64,
    rng: &mut R,
) -> Result<LinkingSelection> {
    spec.validate()?;
    let mut sorted: Vec<&DocumentStream> = streams.iter().collect();
    sorted.sort_by(|a, b| a.author_id.cmp(&b.author_id));
    let target_ok: Vec<&DocumentStream> = sorted
        .into_iter()
        .filter(|s| spec.posts(s, spec.target_window).len() >= spec.min_target_history)
        .collect();
    let qualifying: Vec<&DocumentStream> = target_ok
        .iter()
        .copied()
        .filter(|s| restrict_to.is_none_or(|r| r.contains(&s.author_id)))
        .filter(|s| spec.posts(s, spec.query_window).len() >= spec.min_query_history)
        .collect();
    if qualifying.len() < spec.num_distinguished {
        return Err(Error::Data(format!(
            "subreddit {} has {} qualifying distinguished accounts, {} needed",
            spec.subreddit,
            qualifying.len(),
            spec.num_distinguished
        )));
    }
    let distinguished: Vec<String> = index::sample(rng, qualifying.len(), spec.num_distinguished)
        .iter()
        .map(|i| qualifying[i].author_id.clone())
        .collect();
    let chosen: BTreeSet<&String> = distinguished.iter().collect();
    let decoy_pool: Vec<&String> = target_ok
        .iter()
        .map(|s| &s.author_id)
        .filter(|a| !chosen.contains(a))
        .collect();
    if decoy_pool.len() < spec.num_decoys {
        return Err(Error::Data(format!(
            "subreddit {} has {} decoy accounts, {} needed",
            spec.subreddit,
            decoy_pool.len(),
            spec.num_decoys
        )));
    }
    let decoys = index::sample(rng, decoy_pool.len(), spec.num_decoys)
        .iter()
        .map(|i| decoy_pool[i].clone())
        .collect();
    Ok(LinkingSelection {
        distinguished,
        decoys,
        seed,
        known_queries: restrict_to.is_some(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkingEval {
    pub queries: Vec<Sample>,
    pub targets: Vec<Sample>,
    pub selection: LinkingSelection,
}

impl LinkingEval {
    pub fn label(&self, query: usize, target: usize) -> bool {
        self.queries[query].author_id == self.targets[target].author_id
    }
}

/// Samples for a given selection: each query is the account's most recent
/// `query_size` subreddit posts in the query window, each target the most
/// recent `target_size` subreddit posts in the target window.
pub fn build_linking_eval_from(
    streams: &[DocumentStream],
    spec: &LinkingEvalSpec,
    selection: &LinkingSelection,
) -> Result<LinkingEval> {
    spec.validate()?;
    selection.validate()?;
    let find = |author: &str| {
        streams
            .iter()
            .find(|s| s.author_id == author)
            .ok_or_else(|| Error::Data(format!("selected account {author} is not in the corpus")))
    };
    let recent =
        |s: &DocumentStream, window: TimeWindow, size: usize, min: usize| -> Result<Sample> {
            let posts = spec.posts(s, window);
            if posts.len() < min {
                return Err(Error::Data(format!(
                    "account {} has {} posts in {}, {} required",
                    s.author_id,
                    posts.len(),
                    spec.subreddit,
                    min
                )));
            }
            Ok(Sample {
                author_id: s.author_id.clone(),
                actions: posts[posts.len() - size..].to_vec(),
            })
        };
    let mut queries = Vec::with_capacity(selection.distinguished.len());
    let mut targets = Vec::with_capacity(selection.distinguished.len() + selection.decoys.len());
    for a in &selection.distinguished {
        let s = find(a)?;
        queries.push(recent(
            s,
            spec.query_window,
            spec.query_size,
            spec.min_query_history,
        )?);
        targets.push(recent(
            s,
            spec.target_window,
            spec.target_size,
            spec.min_target_history,
        )?);
    }
    for a in &selection.decoys {
        targets.push(recent(
            find(a)?,
            spec.target_window,
            spec.target_size,
            spec.min_target_history,
        )?);
    }
    Ok(LinkingEval {
        queries,
        targets,
        selection: selection.clone(),
    })
}

pub fn build_linking_eval<R: Rng + ?Sized>(
    streams: &[DocumentStream],
    spec: &LinkingEvalSpec,
    seed: u64,
    rng: &mut R,
) -> Result<LinkingEval> {
    let selection = select_linking_accounts(streams, spec, None, seed, rng)?;
    build_linking_eval_from(streams, spec, &selection)
}

/// As [`build_linking_eval`], with distinguished accounts drawn from
/// `training_authors`.
pub fn build_linking_eval_known_queries<R: Rng + ?Sized>(
    streams: &[DocumentStream],
    spec: &LinkingEvalSpec,
    training_authors: &BTreeSet<String>,
    seed: u64,
    rng: &mut R,
) -> Result<LinkingEval> {
    let selection = select_linking_accounts(streams, spec, Some(training_authors), seed, rng)?;
    build_linking_eval_from(streams, spec, &selection)
}
