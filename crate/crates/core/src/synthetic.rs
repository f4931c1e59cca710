//! Seeded generator of toy post corpora with author-specific habits.
//!
//! Every author draws words from a shared Zipf background vocabulary, mixed
//! at a low rate with a handful of personal signature words taken from a
//! common pool. Authors also favour a few subreddits and a peak posting
//! hour. Single posts carry little author signal, so longer samples are
//! easier to attribute.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::corpus::{Action, DocumentStream};
use crate::error::{Error, Result};

/// Subreddit that every author posts to at `shared_subreddit_rate`.
pub const SHARED_SUBREDDIT: &str = "s000";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_authors: usize,
    pub min_posts: usize,
    pub max_posts: usize,
    pub background_words: usize,
    pub signature_pool: usize,
    pub signature_words: usize,
    /// Probability that a word is one of the author's signature words.
    pub signature_rate: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub num_subreddits: usize,
    pub preferred_subreddits: usize,
    pub shared_subreddit_rate: f64,
    pub preferred_subreddit_rate: f64,
    pub peak_hour_rate: f64,
    pub start: i64,
    pub end: i64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_authors: 500,
            min_posts: 120,
            max_posts: 200,
            background_words: 1500,
            signature_pool: 300,
            signature_words: 6,
            signature_rate: 0.12,
            min_words: 3,
            max_words: 9,
            num_subreddits: 40,
            preferred_subreddits: 3,
            shared_subreddit_rate: 0.3,
            preferred_subreddit_rate: 0.5,
            peak_hour_rate: 0.4,
            start: 1_467_331_200,
            end: 1_467_331_200 + 200 * 86_400,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.num_authors == 0 || self.min_posts == 0 || self.min_posts > self.max_posts {
            return bad("need authors and 1 <= min_posts <= max_posts");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("need 1 <= min_words <= max_words");
        }
        if self.background_words == 0 || self.signature_words > self.signature_pool {
            return bad("signature words must fit in the pool");
        }
        if self.num_subreddits < 2 || self.preferred_subreddits >= self.num_subreddits {
            return bad("preferred subreddits must be fewer than the subreddits");
        }
        let rates = [
            self.signature_rate,
            self.shared_subreddit_rate,
            self.preferred_subreddit_rate,
            self.peak_hour_rate,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r))
            || self.shared_subreddit_rate + self.preferred_subreddit_rate > 1.0
        {
            return bad("rates must be probabilities");
        }
        if self.end - self.start < 86_400 {
            return bad("time span must cover at least one day");
        }
        Ok(())
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// A pronounceable word, distinct for every `i`.
pub fn word(i: usize) -> String {
    let base = ONSETS.len() * VOWELS.len();
    let mut n = i;
    let mut out = String::new();
    loop {
        let s = n % base;
        out.push_str(ONSETS[s / VOWELS.len()]);
        out.push_str(VOWELS[s % VOWELS.len()]);
        n /= base;
        if n == 0 {
            break;
        }
        n -= 1;
    }
    out
}

struct AuthorProfile {
    signature: Vec<String>,
    subreddits: Vec<usize>,
    peak_hour: i64,
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<DocumentStream>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // signature words come after the background words so the two never overlap
    let background: Vec<String> = (0..spec.background_words).map(word).collect();
    let pool: Vec<String> = (0..spec.signature_pool)
        .map(|i| word(spec.background_words + i))
        .collect();
    let zipf = Zipf::new(spec.background_words as f64, 1.0).expect("valid Zipf");
    let days = (spec.end - spec.start) / 86_400;
    let subreddit_name = |i: usize| format!("s{i:03}");

    let mut streams = Vec::with_capacity(spec.num_authors);
    for a in 0..spec.num_authors {
        let profile = AuthorProfile {
            signature: index::sample(&mut rng, pool.len(), spec.signature_words)
                .iter()
                .map(|i| pool[i].clone())
                .collect(),
            subreddits: index::sample(&mut rng, spec.num_subreddits - 1, spec.preferred_subreddits)
                .iter()
                .map(|i| i + 1)
                .collect(),
            peak_hour: rng.random_range(0..24),
        };
        let n_posts = rng.random_range(spec.min_posts..=spec.max_posts);
        let mut actions = Vec::with_capacity(n_posts);
        for _ in 0..n_posts {
            let n_words = rng.random_range(spec.min_words..=spec.max_words);
            let words: Vec<&str> = (0..n_words)
                .map(|_| {
                    if !profile.signature.is_empty() && rng.random_bool(spec.signature_rate) {
                        profile.signature[rng.random_range(0..profile.signature.len())].as_str()
                    } else {
                        background[zipf.sample(&mut rng) as usize - 1].as_str()
                    }
                })
                .collect();
            let u: f64 = rng.random();
            let sub = if u < spec.shared_subreddit_rate {
                0
            } else if u < spec.shared_subreddit_rate + spec.preferred_subreddit_rate
                && !profile.subreddits.is_empty()
            {
                profile.subreddits[rng.random_range(0..profile.subreddits.len())]
            } else {
                rng.random_range(1..spec.num_subreddits)
            };
            let hour = if rng.random_bool(spec.peak_hour_rate) {
                profile.peak_hour
            } else {
                rng.random_range(0..24)
            };
            let day = rng.random_range(0..days);
            let ts = spec.start + day * 86_400 + hour * 3_600 + rng.random_range(0..3_600);
            actions.push(Action {
                author_id: format!("user{a:05}"),
                timestamp: ts,
                subreddit: subreddit_name(sub),
                text: words.join(" "),
            });
        }
        actions.sort_by_key(|x| x.timestamp);
        streams.push(DocumentStream {
            author_id: format!("user{a:05}"),
            actions,
        });
    }
    Ok(streams)
}
