//! Post ingestion, per-author document streams, filtering and splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcodec::Tokenizer;

/// One timestamped post.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    #[serde(rename = "author")]
    pub author_id: String,
    /// Seconds since the Unix epoch, UTC.
    #[serde(rename = "ts")]
    pub timestamp: i64,
    pub subreddit: String,
    pub text: String,
}

/// All actions of one author, ascending by timestamp. Ties keep input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentStream {
    pub author_id: String,
    pub actions: Vec<Action>,
}

impl DocumentStream {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The sub-stream of actions inside `window`, or `None` when it is empty.
    pub fn restrict(&self, window: TimeWindow) -> Option<DocumentStream> {
        let actions: Vec<Action> = self
            .actions
            .iter()
            .filter(|a| window.contains(a.timestamp))
            .cloned()
            .collect();
        (!actions.is_empty()).then(|| DocumentStream {
            author_id: self.author_id.clone(),
            actions,
        })
    }
}

/// Half-open `[start, end)` interval of timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: i64,
    pub end: i64,
}

impl TimeWindow {
    pub fn new(start: i64, end: i64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, ts: i64) -> bool {
        self.start <= ts && ts < self.end
    }

    /// Everything from the epoch onwards.
    pub fn all() -> Self {
        Self {
            start: 0,
            end: i64::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_window: TimeWindow,
    pub eval_window: TimeWindow,
    pub min_posts: usize,
    pub max_posts: usize,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_window.start > self.train_window.end
            || self.eval_window.start > self.eval_window.end
        {
            return Err(Error::Config("split window with start > end".into()));
        }
        if self.train_window.end > self.eval_window.start {
            return Err(Error::Config(format!(
                "train window must end ({}) before the eval window starts ({})",
                self.train_window.end, self.eval_window.start
            )));
        }
        if self.min_posts > self.max_posts {
            return Err(Error::Config(format!(
                "min_posts {} exceeds max_posts {}",
                self.min_posts, self.max_posts
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_users: usize,
    pub num_posts: usize,
    pub mean_post_length_tokens: f64,
    pub mean_posts_per_user: f64,
    pub mean_subreddits_per_user: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPost {
    author: String,
    ts: i64,
    subreddit: String,
    text: String,
}

/// Parses a JSONL reader of posts. `origin` is only used in error messages.
pub fn parse_posts<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<Action>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPost = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        if raw.author.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                message: "empty author".into(),
            });
        }
        if raw.ts < 0 {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                message: format!("negative timestamp {}", raw.ts),
            });
        }
        out.push(Action {
            author_id: raw.author,
            timestamp: raw.ts,
            subreddit: raw.subreddit,
            text: raw.text,
        });
    }
    Ok(out)
}

/// Groups actions by author; streams come out ordered by author id.
pub fn group_by_author(actions: impl IntoIterator<Item = Action>) -> Vec<DocumentStream> {
    let mut by_author: BTreeMap<String, Vec<Action>> = BTreeMap::new();
    for a in actions {
        by_author.entry(a.author_id.clone()).or_default().push(a);
    }
    by_author
        .into_iter()
        .map(|(author_id, mut actions)| {
            // stable: equal timestamps keep input order
            actions.sort_by_key(|a| a.timestamp);
            DocumentStream { author_id, actions }
        })
        .collect()
}

/// Reads `posts.jsonl` into one stream per author.
pub fn ingest_posts(path: impl AsRef<Path>) -> Result<Vec<DocumentStream>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let actions = parse_posts(BufReader::new(file), path)?;
    Ok(group_by_author(actions))
}

/// Writes streams back out in the ingestion format.
pub fn write_posts(streams: &[DocumentStream], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in streams.iter().flat_map(|s| &s.actions) {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Keeps authors whose post count inside the training window lies in
/// `[min_posts, max_posts]`, restricted to that window.
pub fn filter_streams(streams: &[DocumentStream], spec: &SplitSpec) -> Vec<DocumentStream> {
    streams
        .iter()
        .filter_map(|s| s.restrict(spec.train_window))
        .filter(|s| (spec.min_posts..=spec.max_posts).contains(&s.len()))
        .collect()
}

/// Restricts every stream to the train and eval windows.
///
/// With `novel_eval_authors`, authors present on the train side are removed
/// from the eval side.
pub fn split_time_disjoint(
    streams: &[DocumentStream],
    spec: &SplitSpec,
    novel_eval_authors: bool,
) -> (Vec<DocumentStream>, Vec<DocumentStream>) {
    let train: Vec<DocumentStream> = streams
        .iter()
        .filter_map(|s| s.restrict(spec.train_window))
        .collect();
    let train_authors: BTreeSet<&str> = train.iter().map(|s| s.author_id.as_str()).collect();
    let eval = streams
        .iter()
        .filter(|s| !novel_eval_authors || !train_authors.contains(s.author_id.as_str()))
        .filter_map(|s| s.restrict(spec.eval_window))
        .collect();
    (train, eval)
}

pub fn compute_stats(streams: &[DocumentStream], tokenizer: &Tokenizer) -> Result<CorpusStats> {
    let num_users = streams.len();
    let num_posts: usize = streams.iter().map(DocumentStream::len).sum();
    if num_users == 0 || num_posts == 0 {
        return Err(Error::Data(
            "cannot compute statistics of an empty corpus".into(),
        ));
    }
    let total_tokens: usize = streams
        .iter()
        .flat_map(|s| &s.actions)
        .map(|a| tokenizer.tokenize(&a.text).len())
        .sum();
    let total_subreddits: usize = streams
        .iter()
        .map(|s| {
            s.actions
                .iter()
                .map(|a| a.subreddit.as_str())
                .collect::<BTreeSet<_>>()
                .len()
        })
        .sum();
    Ok(CorpusStats {
        num_users,
        num_posts,
        mean_post_length_tokens: total_tokens as f64 / num_posts as f64,
        mean_posts_per_user: num_posts as f64 / num_users as f64,
        mean_subreddits_per_user: total_subreddits as f64 / num_users as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub users: usize,
    pub posts: usize,
}

impl SplitCounts {
    pub fn of(streams: &[DocumentStream]) -> Self {
        Self {
            users: streams.len(),
            posts: streams.iter().map(DocumentStream::len).sum(),
        }
    }
}

/// Written next to the split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub novel_eval_authors: bool,
    pub input: SplitCounts,
    pub train: SplitCounts,
    pub eval: SplitCounts,
}
