//! Unigram language-model subword segmentation.
//!
//! Training follows the usual recipe for this model family: seed a large
//! candidate vocabulary with frequent substrings, fit piece probabilities with
//! EM over segmentation lattices, and repeatedly prune the pieces whose
//! removal costs the least likelihood until the requested size is reached.
//! Encoding is Viterbi decoding over the same lattice.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

/// Word-boundary marker prepended to every whitespace-delimited word.
pub const WORD_BOUNDARY: char = '\u{2581}';
pub const UNK_PIECE: &str = "<unk>";
pub const UNK_ID: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct UnigramModel {
    pieces: Vec<(String, f64)>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
    unk_score: f64,
}

impl UnigramModel {
    /// `pieces[0]` must be the unknown piece.
    pub fn from_pieces(pieces: Vec<(String, f64)>) -> Result<Self> {
        if pieces.first().map(|p| p.0.as_str()) != Some(UNK_PIECE) {
            return Err(Error::Data(format!("first piece must be {UNK_PIECE}")));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        let mut min_score = 0.0f64;
        for (i, (p, s)) in pieces.iter().enumerate().skip(1) {
            if p.is_empty() || p.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid piece {p:?}")));
            }
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate piece {p:?}")));
            }
            max_piece_chars = max_piece_chars.max(p.chars().count());
            min_score = min_score.min(*s);
        }
        Ok(Self {
            pieces,
            index,
            max_piece_chars,
            unk_score: min_score - 10.0,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[(String, f64)] {
        &self.pieces
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    /// Appends the ids of `text` to `out`, stopping once `out` holds `limit` ids.
    pub fn encode_into(&self, text: &str, out: &mut Vec<u32>, limit: usize) {
        let mut word = String::new();
        for raw in text.split_whitespace() {
            if out.len() >= limit {
                return;
            }
            word.clear();
            word.push(WORD_BOUNDARY);
            word.push_str(raw);
            self.viterbi(&word, out);
        }
        out.truncate(limit);
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        self.encode_into(text, &mut out, usize::MAX);
        out
    }

    fn viterbi(&self, word: &str, out: &mut Vec<u32>) {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let n = bounds.len() - 1;
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut back = vec![(0usize, UNK_ID); n + 1];
        best[0] = 0.0;
        for start in 0..n {
            if best[start] == f64::NEG_INFINITY {
                continue;
            }
            let mut matched_single = false;
            for len in 1..=self.max_piece_chars.min(n - start) {
                let end = start + len;
                if let Some(&id) = self.index.get(&word[bounds[start]..bounds[end]]) {
                    matched_single |= len == 1;
                    let s = best[start] + self.pieces[id as usize].1;
                    if s > best[end] {
                        best[end] = s;
                        back[end] = (start, id);
                    }
                }
            }
            if !matched_single {
                let s = best[start] + self.unk_score;
                if s > best[start + 1] {
                    best[start + 1] = s;
                    back[start + 1] = (start, UNK_ID);
                }
            }
        }
        let mark = out.len();
        let mut pos = n;
        while pos > 0 {
            let (prev, id) = back[pos];
            out.push(id);
            pos = prev;
        }
        out[mark..].reverse();
    }
}

#[derive(Debug, Clone)]
pub struct UnigramTrainer {
    pub vocab_size: usize,
    /// Fraction of character occurrences the vocabulary must cover; the
    /// rarest characters beyond it become unknown.
    pub character_coverage: f64,
    pub max_piece_chars: usize,
    pub seed_pieces: usize,
    pub shrinking_factor: f64,
    pub em_iterations: usize,
}

impl UnigramTrainer {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            character_coverage: 0.9995,
            max_piece_chars: 16,
            seed_pieces: 200_000,
            shrinking_factor: 0.75,
            em_iterations: 2,
        }
    }

    pub fn train<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Result<UnigramModel> {
        let words = count_words(texts);
        if words.is_empty() {
            return Err(Error::Data("empty tokenizer training corpus".into()));
        }

        let required = required_chars(&words, self.character_coverage);
        let words: Vec<(Vec<char>, f64)> = words
            .into_iter()
            .filter(|(w, _)| w.chars().all(|c| required.contains_key(&c)))
            .map(|(w, c)| (w.chars().collect(), c as f64))
            .collect();

        let seeds = self.seed_substrings(&words);
        let achievable = 1 + required.len() + seeds.len();
        if achievable < self.vocab_size {
            return Err(Error::Data(format!(
                "corpus supports a vocabulary of at most {achievable} pieces, {} requested",
                self.vocab_size
            )));
        }
        if 1 + required.len() > self.vocab_size {
            return Err(Error::Data(format!(
                "{} required characters do not fit in a vocabulary of {}",
                required.len(),
                self.vocab_size
            )));
        }

        // chars first (never pruned), then multi-char seeds
        let total: f64 = required.values().sum::<f64>() + seeds.iter().map(|s| s.1).sum::<f64>();
        let mut chars: Vec<(char, f64)> = required.into_iter().collect();
        chars.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut vocab = Lattice::new(
            chars
                .iter()
                .map(|(c, f)| (c.to_string(), (f / total).ln(), true))
                .chain(
                    seeds
                        .iter()
                        .map(|(p, f)| (p.clone(), (f / total).ln(), false)),
                )
                .collect(),
        );

        loop {
            for _ in 0..self.em_iterations {
                let counts = vocab.expected_counts(&words);
                vocab.reestimate(&counts);
            }
            let current = vocab.pieces.len() + 1;
            if current <= self.vocab_size {
                break;
            }
            let shrunk = (current as f64 * self.shrinking_factor) as usize;
            let keep = shrunk.max(self.vocab_size) - 1;
            vocab = vocab.prune(&words, keep);
        }
        let counts = vocab.expected_counts(&words);
        vocab.reestimate(&counts);

        let mut pieces = vec![(UNK_PIECE.to_string(), 0.0)];
        let mut sorted: Vec<(String, f64)> =
            vocab.pieces.into_iter().map(|(p, s, _)| (p, s)).collect();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        pieces.extend(sorted);
        UnigramModel::from_pieces(pieces)
    }

    fn seed_substrings(&self, words: &[(Vec<char>, f64)]) -> Vec<(String, f64)> {
        let mut freq: HashMap<String, f64> = HashMap::new();
        let mut buf = String::new();
        for (w, count) in words {
            for start in 0..w.len() {
                buf.clear();
                buf.push(w[start]);
                for &c in &w[start + 1..w.len().min(start + self.max_piece_chars)] {
                    buf.push(c);
                    *freq.entry(buf.clone()).or_default() += count;
                }
            }
        }
        let mut scored: Vec<(String, f64)> = freq.into_iter().collect();
        scored.sort_by(|a, b| {
            let sa = a.1 * a.0.chars().count() as f64;
            let sb = b.1 * b.0.chars().count() as f64;
            sb.total_cmp(&sa).then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(self.seed_pieces);
        scored
    }
}

fn count_words<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<(String, u64)> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for t in texts {
        for w in t.split_whitespace() {
            let mut word = String::with_capacity(w.len() + 3);
            word.push(WORD_BOUNDARY);
            word.push_str(w);
            *counts.entry(word).or_default() += 1;
        }
    }
    counts.into_iter().collect()
}

fn required_chars(words: &[(String, u64)], coverage: f64) -> HashMap<char, f64> {
    let mut freq: BTreeMap<char, u64> = BTreeMap::new();
    for (w, c) in words {
        for ch in w.chars() {
            *freq.entry(ch).or_default() += c;
        }
    }
    let total: u64 = freq.values().sum();
    let mut sorted: Vec<(char, u64)> = freq.into_iter().collect();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = HashMap::new();
    let mut covered = 0u64;
    for (ch, f) in sorted {
        if covered as f64 >= coverage * total as f64 && ch != WORD_BOUNDARY {
            break;
        }
        covered += f;
        kept.insert(ch, f as f64);
    }
    kept
}

/// Training-time vocabulary: `(piece, log prob, is_required_char)`.
struct Lattice {
    pieces: Vec<(String, f64, bool)>,
    index: HashMap<String, usize>,
    max_chars: usize,
}

impl Lattice {
    fn new(pieces: Vec<(String, f64, bool)>) -> Self {
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.0.clone(), i))
            .collect();
        let max_chars = pieces
            .iter()
            .map(|p| p.0.chars().count())
            .max()
            .unwrap_or(1);
        Self {
            pieces,
            index,
            max_chars,
        }
    }

    /// Calls `f(start, end, piece)` for every lattice edge of `word`.
    fn edges(&self, word: &[char], mut f: impl FnMut(usize, usize, usize)) {
        let mut buf = String::new();
        for start in 0..word.len() {
            buf.clear();
            for end in start + 1..=word.len().min(start + self.max_chars) {
                buf.push(word[end - 1]);
                if let Some(&id) = self.index.get(buf.as_str()) {
                    f(start, end, id);
                }
            }
        }
    }

    fn expected_counts(&self, words: &[(Vec<char>, f64)]) -> Vec<f64> {
        let mut counts = vec![0.0; self.pieces.len()];
        let mut edges = Vec::new();
        for (w, freq) in words {
            edges.clear();
            self.edges(w, |s, e, id| edges.push((s, e, id)));
            let n = w.len();
            let mut alpha = vec![f64::NEG_INFINITY; n + 1];
            let mut beta = vec![f64::NEG_INFINITY; n + 1];
            alpha[0] = 0.0;
            // edges are sorted by start
            for &(s, e, id) in &edges {
                alpha[e] = log_add(alpha[e], alpha[s] + self.pieces[id].1);
            }
            beta[n] = 0.0;
            for &(s, e, id) in edges.iter().rev() {
                beta[s] = log_add(beta[s], beta[e] + self.pieces[id].1);
            }
            let z = alpha[n];
            if !z.is_finite() {
                continue;
            }
            for &(s, e, id) in &edges {
                let post = (alpha[s] + self.pieces[id].1 + beta[e] - z).exp();
                counts[id] += freq * post;
            }
        }
        counts
    }

    fn reestimate(&mut self, counts: &[f64]) {
        let total: f64 = counts.iter().sum();
        for (p, &c) in self.pieces.iter_mut().zip(counts) {
            p.1 = (c.max(1e-6) / total).ln();
        }
    }

    fn viterbi(&self, word: &[char], exclude: Option<usize>) -> Vec<usize> {
        let n = word.len();
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut back = vec![(0usize, usize::MAX); n + 1];
        best[0] = 0.0;
        self.edges(word, |s, e, id| {
            if Some(id) == exclude {
                return;
            }
            let v = best[s] + self.pieces[id].1;
            if v > best[e] {
                best[e] = v;
                back[e] = (s, id);
            }
        });
        let mut out = Vec::new();
        let mut pos = n;
        while pos > 0 {
            let (prev, id) = back[pos];
            if id == usize::MAX {
                return Vec::new();
            }
            out.push(id);
            pos = prev;
        }
        out
    }

    /// Keeps all required characters plus the `keep - chars` multi-char
    /// pieces whose removal would lose the most likelihood.
    fn prune(self, words: &[(Vec<char>, f64)], keep: usize) -> Lattice {
        let mut freq = vec![0.0; self.pieces.len()];
        for (w, c) in words {
            for id in self.viterbi(w, None) {
                freq[id] += c;
            }
        }
        let mut candidates: Vec<(usize, f64)> = Vec::new();
        for (id, (piece, logp, required)) in self.pieces.iter().enumerate() {
            if *required {
                continue;
            }
            let chars: Vec<char> = piece.chars().collect();
            let alt: f64 = self
                .viterbi(&chars, Some(id))
                .iter()
                .map(|&a| self.pieces[a].1)
                .sum();
            candidates.push((id, freq[id] * (logp - alt)));
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let n_required = self.pieces.iter().filter(|p| p.2).count();
        let budget = keep.saturating_sub(n_required);
        let mut kept: Vec<usize> = candidates.iter().take(budget).map(|c| c.0).collect();
        kept.extend((0..self.pieces.len()).filter(|&i| self.pieces[i].2));
        kept.sort_unstable();
        Lattice::new(kept.into_iter().map(|i| self.pieces[i].clone()).collect())
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<String> {
        let words = [
            "the",
            "cat",
            "sat",
            "on",
            "mat",
            "dog",
            "ran",
            "far",
            "away",
            "from",
            "home",
            "catalog",
            "dogma",
            "hometown",
            "mathematics",
        ];
        (0..400)
            .map(|i| {
                (0..8)
                    .map(|j| words[(i * 7 + j * 3 + i / 5) % words.len()])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }

    #[test]
    fn trains_requested_size_and_learns_words() {
        let texts = corpus();
        let model = UnigramTrainer::new(60)
            .train(texts.iter().map(String::as_str))
            .unwrap();
        assert_eq!(model.len(), 60);
        // frequent whole words become single pieces
        assert!(model.id_of("\u{2581}the").is_some());
        let ids = model.encode("the cat");
        assert!(ids.len() <= 4);
        assert!(ids.iter().all(|&i| (i as usize) < model.len()));
    }

    #[test]
    fn unseen_characters_map_to_unk() {
        let texts = corpus();
        let model = UnigramTrainer::new(40)
            .train(texts.iter().map(String::as_str))
            .unwrap();
        let ids = model.encode("cat \u{1F600}\u{4E2D}");
        assert!(ids.contains(&UNK_ID));
        assert!(ids.iter().all(|&i| (i as usize) < model.len()));
    }

    #[test]
    fn infeasible_vocab_reports_achievable_size() {
        let texts = vec!["a a a a a".to_string(); 10];
        let err = UnigramTrainer::new(300)
            .train(texts.iter().map(String::as_str))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("at most 4"), "{msg}");
    }

    #[test]
    fn training_is_deterministic() {
        let texts = corpus();
        let a = UnigramTrainer::new(50)
            .train(texts.iter().map(String::as_str))
            .unwrap();
        let b = UnigramTrainer::new(50)
            .train(texts.iter().map(String::as_str))
            .unwrap();
        assert_eq!(a.pieces(), b.pieces());
    }
}
