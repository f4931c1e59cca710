use std::collections::{BTreeMap, HashMap};

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::protocols::Sample;
use crate::embedder::Parameters;
use crate::error::{Error, Result};
use crate::metrics::{Trial, TrialSet};
use crate::textcodec::{ActionEncoder, EncodedAction};

/// Maps samples to representations and pairs of representations to scores;
/// lower scores mean more similar.
pub trait Scorer: Sync {
    type Repr: Send + Sync;

    fn represent(&self, samples: &[Sample]) -> Result<Vec<Self::Repr>>;

    fn score(&self, query: &Self::Repr, target: &Self::Repr) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Model,
    Tfidf,
    AvgSinglePost,
    Fixed16Chunked,
}

/// Scores every (query, target) pair. Trial ids are author ids.
pub fn score_all<S: Scorer>(
    scorer: &S,
    queries: &[Sample],
    targets: &[Sample],
) -> Result<TrialSet> {
    let q = scorer.represent(queries)?;
    let t = scorer.represent(targets)?;
    let rows: Vec<Vec<Trial>> = q
        .par_iter()
        .zip(queries)
        .map(|(qr, qs)| {
            t.iter()
                .zip(targets)
                .map(|(tr, ts)| Trial {
                    query_id: qs.author_id.clone(),
                    target_id: ts.author_id.clone(),
                    score: scorer.score(qr, tr),
                    label: qs.author_id == ts.author_id,
                })
                .collect()
        })
        .collect();
    let trials: Vec<Trial> = rows.into_iter().flatten().collect();
    if let Some(bad) = trials.iter().find(|t| !t.score.is_finite()) {
        return Err(Error::Numeric(format!(
            "scorer produced {} for {} / {}",
            bad.score, bad.query_id, bad.target_id
        )));
    }
    Ok(TrialSet::new(trials))
}

/// Score matrix, one row per query.
pub fn score_matrix<S: Scorer>(
    scorer: &S,
    queries: &[Sample],
    targets: &[Sample],
) -> Result<Vec<Vec<f64>>> {
    let q = scorer.represent(queries)?;
    let t = scorer.represent(targets)?;
    let m: Vec<Vec<f64>> = q
        .par_iter()
        .map(|qr| t.iter().map(|tr| scorer.score(qr, tr)).collect())
        .collect();
    if m.iter().flatten().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("scorer produced a non-finite score".into()));
    }
    Ok(m)
}

fn euclidean(a: &Array1<f32>, b: &Array1<f32>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn encode(encoder: &ActionEncoder, s: &Sample) -> Vec<EncodedAction> {
    encoder.encode_all(&s.actions)
}

const EMBED_CHUNK: usize = 64;

fn embed_groups(
    params: &Parameters<f32>,
    groups: &[Vec<EncodedAction>],
) -> Result<Vec<Array1<f32>>> {
    let mut out = Vec::with_capacity(groups.len());
    for chunk in groups.chunks(EMBED_CHUNK) {
        let e = params.embed_batch(chunk)?;
        out.extend(e.rows().into_iter().map(|r| r.to_owned()));
    }
    Ok(out)
}

fn mean(rows: &[Array1<f32>], renormalize: bool) -> Array1<f32> {
    let mut m = rows[0].clone();
    for r in &rows[1..] {
        m += r;
    }
    m /= rows.len() as f32;
    if renormalize {
        let n = m.dot(&m).sqrt();
        if n > 0.0 {
            m /= n;
        }
    }
    m
}

/// Euclidean distance between whole-sample embeddings.
pub struct ModelScorer {
    pub params: Parameters<f32>,
    pub encoder: ActionEncoder,
}

impl Scorer for ModelScorer {
    type Repr = Array1<f32>;

    fn represent(&self, samples: &[Sample]) -> Result<Vec<Array1<f32>>> {
        let groups: Vec<Vec<EncodedAction>> =
            samples.iter().map(|s| encode(&self.encoder, s)).collect();
        embed_groups(&self.params, &groups)
    }

    fn score(&self, q: &Array1<f32>, t: &Array1<f32>) -> f64 {
        euclidean(q, t)
    }
}

/// Mean of single-post embeddings, re-normalized when the model normalizes.
pub struct AvgSinglePostScorer {
    pub params: Parameters<f32>,
    pub encoder: ActionEncoder,
}

impl Scorer for AvgSinglePostScorer {
    type Repr = Array1<f32>;

    fn represent(&self, samples: &[Sample]) -> Result<Vec<Array1<f32>>> {
        let renormalize = self.params.config().normalize_output;
        samples
            .iter()
            .map(|s| {
                let posts: Vec<Vec<EncodedAction>> = encode(&self.encoder, s)
                    .into_iter()
                    .map(|a| vec![a])
                    .collect();
                if posts.is_empty() {
                    return Err(Error::Data(format!("empty sample for {}", s.author_id)));
                }
                Ok(mean(&embed_groups(&self.params, &posts)?, renormalize))
            })
            .collect()
    }

    fn score(&self, q: &Array1<f32>, t: &Array1<f32>) -> f64 {
        euclidean(q, t)
    }
}

pub const FIXED_GROUP: usize = 16;

/// Contiguous groups of at most 16 posts; the last group may be shorter.
pub fn chunk_sizes(len: usize) -> Vec<usize> {
    (0..len)
        .step_by(FIXED_GROUP)
        .map(|s| FIXED_GROUP.min(len - s))
        .collect()
}

/// Embeds each group of a fixed-size-16 model separately and averages the
/// group embeddings. Short groups occupy 16 slots with the rest masked.
pub struct Fixed16Scorer {
    pub params: Parameters<f32>,
    pub encoder: ActionEncoder,
}

impl Scorer for Fixed16Scorer {
    type Repr = Array1<f32>;

    fn represent(&self, samples: &[Sample]) -> Result<Vec<Array1<f32>>> {
        samples
            .iter()
            .map(|s| {
                let enc = encode(&self.encoder, s);
                if enc.is_empty() {
                    return Err(Error::Data(format!("empty sample for {}", s.author_id)));
                }
                let groups: Vec<Vec<EncodedAction>> =
                    enc.chunks(FIXED_GROUP).map(<[_]>::to_vec).collect();
                Ok(mean(&embed_groups(&self.params, &groups)?, false))
            })
            .collect()
    }

    fn score(&self, q: &Array1<f32>, t: &Array1<f32>) -> f64 {
        euclidean(q, t)
    }
}

/// Lowercased alphanumeric runs.
pub fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// TF-IDF over the concatenated text of a sample, compared by cosine.
///
/// Term weights are raw counts times `ln((1 + n) / (1 + df)) + 1`, fitted on
/// `n` training documents; vectors are L2-normalized and the score is
/// `1 - cosine`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfScorer {
    pub idf: BTreeMap<String, f64>,
    pub num_documents: usize,
}

pub fn fit_tfidf<'a>(documents: impl IntoIterator<Item = &'a str>) -> Result<TfidfScorer> {
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    let mut n = 0usize;
    for doc in documents {
        n += 1;
        let mut terms: Vec<String> = word_tokens(doc).collect();
        terms.sort_unstable();
        terms.dedup();
        for t in terms {
            *df.entry(t).or_default() += 1;
        }
    }
    if df.is_empty() {
        return Err(Error::Data(
            "tf-idf training corpus has an empty vocabulary".into(),
        ));
    }
    let idf = df
        .into_iter()
        .map(|(t, d)| (t, ((1 + n) as f64 / (1 + d) as f64).ln() + 1.0))
        .collect();
    Ok(TfidfScorer {
        idf,
        num_documents: n,
    })
}

/// Sparse unit vector sorted by term.
pub type SparseVec = Vec<(u32, f64)>;

impl TfidfScorer {
    fn term_ids(&self) -> HashMap<&str, u32> {
        self.idf
            .keys()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect()
    }

    fn idf_by_id(&self) -> Vec<f64> {
        self.idf.values().copied().collect()
    }

    pub fn vectorize(&self, text: &str) -> SparseVec {
        self.vectorize_with(&self.term_ids(), &self.idf_by_id(), text)
    }

    fn vectorize_with(&self, ids: &HashMap<&str, u32>, idf: &[f64], text: &str) -> SparseVec {
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for w in word_tokens(text) {
            if let Some(&id) = ids.get(w.as_str()) {
                *counts.entry(id).or_default() += 1.0;
            }
        }
        let mut v: SparseVec = counts
            .into_iter()
            .map(|(id, c)| (id, c * idf[id as usize]))
            .collect();
        let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, x) in &mut v {
                *x /= norm;
            }
        }
        v
    }

    pub fn cosine(a: &SparseVec, b: &SparseVec) -> f64 {
        let (mut i, mut j, mut dot) = (0, 0, 0.0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        dot
    }
}

impl Scorer for TfidfScorer {
    type Repr = SparseVec;

    fn represent(&self, samples: &[Sample]) -> Result<Vec<SparseVec>> {
        let ids = self.term_ids();
        let idf = self.idf_by_id();
        Ok(samples
            .iter()
            .map(|s| {
                let text: Vec<&str> = s.actions.iter().map(|a| a.text.as_str()).collect();
                self.vectorize_with(&ids, &idf, &text.join(" "))
            })
            .collect())
    }

    fn score(&self, q: &SparseVec, t: &SparseVec) -> f64 {
        // cosine of unit vectors can exceed 1 by rounding
        (1.0 - Self::cosine(q, t)).max(0.0)
    }
}
