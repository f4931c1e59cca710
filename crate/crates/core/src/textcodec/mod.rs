//! Fixed-shape integer encodings of actions: token ids, subreddit id, hour.

mod unigram;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Action, DocumentStream};
use crate::error::{Error, Result};

pub use unigram::{UnigramModel, UnigramTrainer, UNK_ID, UNK_PIECE, WORD_BOUNDARY};

pub const DEFAULT_SUBREDDIT_CAPACITY: usize = 2048;
pub const HOURS_PER_DAY: usize = 24;
pub const DEFAULT_TOKENIZER_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    SubwordUnigram,
    Byte,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TokenizerMeta {
    kind: TokenizerKind,
    vocab_size: usize,
    pad_id: u32,
    seed: u64,
    character_coverage: Option<f64>,
}

/// Maps text to token ids in `[0, vocab_size)`. The pad id equals
/// `vocab_size` and is never produced by tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    kind: TokenizerKind,
    seed: u64,
    character_coverage: Option<f64>,
    unigram: Option<UnigramModel>,
}

impl Tokenizer {
    /// UTF-8 bytes as ids 0..=255.
    pub fn byte() -> Self {
        Self {
            kind: TokenizerKind::Byte,
            seed: DEFAULT_TOKENIZER_SEED,
            character_coverage: None,
            unigram: None,
        }
    }

    pub fn train_subword<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        vocab_size: usize,
    ) -> Result<Self> {
        if vocab_size < 256 {
            return Err(Error::Config(format!(
                "subword vocabulary size must be at least 256, got {vocab_size}"
            )));
        }
        Self::train_subword_with(texts, UnigramTrainer::new(vocab_size))
    }

    /// Like [`Tokenizer::train_subword`] without the minimum-size check.
    pub fn train_subword_with<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        trainer: UnigramTrainer,
    ) -> Result<Self> {
        let model = trainer.train(texts)?;
        Ok(Self {
            kind: TokenizerKind::SubwordUnigram,
            seed: DEFAULT_TOKENIZER_SEED,
            character_coverage: Some(trainer.character_coverage),
            unigram: Some(model),
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        match &self.unigram {
            Some(m) => m.len(),
            None => 256,
        }
    }

    pub fn pad_id(&self) -> u32 {
        self.vocab_size() as u32
    }

    /// Full, untruncated tokenization.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        match &self.unigram {
            Some(m) => m.encode(text),
            None => text.bytes().map(u32::from).collect(),
        }
    }

    /// First `len` token ids of `text`, right-padded with the pad id.
    pub fn encode_text(&self, text: &str, len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        match &self.unigram {
            Some(m) => m.encode_into(text, &mut out, len),
            None => out.extend(text.bytes().take(len).map(u32::from)),
        }
        out.resize(len, self.pad_id());
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = TokenizerMeta {
            kind: self.kind,
            vocab_size: self.vocab_size(),
            pad_id: self.pad_id(),
            seed: self.seed,
            character_coverage: self.character_coverage,
        };
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;
        if let Some(m) = &self.unigram {
            let blob: String = m
                .pieces()
                .iter()
                .map(|(p, s)| format!("{p}\t{s:?}\n"))
                .collect();
            let path = dir.join("model.vocab");
            fs::write(&path, blob).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: TokenizerMeta = serde_json::from_str(&raw)?;
        let tok = match meta.kind {
            TokenizerKind::Byte => Self::byte(),
            TokenizerKind::SubwordUnigram => {
                let path = dir.join("model.vocab");
                let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let mut pieces = Vec::new();
                for (i, line) in raw.lines().enumerate() {
                    let parse_err = |message: String| Error::Parse {
                        path: path.clone(),
                        line: i + 1,
                        message,
                    };
                    let (p, s) = line
                        .split_once('\t')
                        .ok_or_else(|| parse_err("expected piece<TAB>score".into()))?;
                    let s: f64 = s
                        .parse()
                        .map_err(|e| parse_err(format!("bad score: {e}")))?;
                    pieces.push((p.to_string(), s));
                }
                Self {
                    kind: meta.kind,
                    seed: meta.seed,
                    character_coverage: meta.character_coverage,
                    unigram: Some(UnigramModel::from_pieces(pieces)?),
                }
            }
        };
        if tok.vocab_size() != meta.vocab_size || tok.pad_id() != meta.pad_id {
            return Err(Error::Data(format!(
                "tokenizer at {} disagrees with its metadata",
                dir.display()
            )));
        }
        Ok(tok)
    }
}

/// Top subreddits by post frequency; anything else maps to `oov_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubredditVocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
    capacity: usize,
}

impl SubredditVocab {
    pub fn new(names: Vec<String>, capacity: usize) -> Result<Self> {
        if names.len() > capacity {
            return Err(Error::Config(format!(
                "{} subreddit names exceed capacity {capacity}",
                names.len()
            )));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate subreddit {n:?}")));
            }
        }
        Ok(Self {
            names,
            index,
            capacity,
        })
    }

    /// Ranks subreddits by post count, ties broken lexicographically.
    pub fn build(streams: &[DocumentStream], capacity: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for a in streams.iter().flat_map(|s| &s.actions) {
            *counts.entry(a.subreddit.as_str()).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        // stable sort keeps lexicographic order among equal counts
        ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
        let names = ranked
            .into_iter()
            .take(capacity)
            .map(|(n, _)| n.to_string())
            .collect();
        Self::new(names, capacity).expect("unique by construction")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn oov_id(&self) -> u32 {
        self.capacity as u32
    }

    /// Number of distinct ids including the OOV id.
    pub fn num_ids(&self) -> usize {
        self.capacity + 1
    }

    pub fn id(&self, name: &str) -> u32 {
        self.index.get(name).copied().unwrap_or(self.oov_id())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = self.names.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, capacity: usize) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(raw.lines().map(str::to_string).collect(), capacity)
    }
}

/// UTC hour of day.
pub fn encode_hour(timestamp: i64) -> u8 {
    (timestamp.rem_euclid(86_400) / 3_600) as u8
}

pub fn encode_byte(text: &str, len: usize) -> Vec<u32> {
    Tokenizer::byte().encode_text(text, len)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncodedAction {
    /// `seq_len` ids; real tokens form a prefix, the rest is the pad id.
    pub tokens: Vec<u32>,
    pub subreddit: u32,
    pub hour: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub subreddit_vocab_size: usize,
}

/// Tokenizer, subreddit vocabulary and truncation length bundled together.
#[derive(Debug, Clone)]
pub struct ActionEncoder {
    pub tokenizer: Tokenizer,
    pub subreddits: SubredditVocab,
    pub seq_len: usize,
}

impl ActionEncoder {
    pub fn new(tokenizer: Tokenizer, subreddits: SubredditVocab, seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Config("sequence length must be at least 1".into()));
        }
        Ok(Self {
            tokenizer,
            subreddits,
            seq_len,
        })
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            seq_len: self.seq_len,
            vocab_size: self.tokenizer.vocab_size(),
            subreddit_vocab_size: self.subreddits.num_ids(),
        }
    }

    pub fn encode(&self, action: &Action) -> EncodedAction {
        EncodedAction {
            tokens: self.tokenizer.encode_text(&action.text, self.seq_len),
            subreddit: self.subreddits.id(&action.subreddit),
            hour: encode_hour(action.timestamp),
        }
    }

    pub fn encode_all(&self, actions: &[Action]) -> Vec<EncodedAction> {
        actions.iter().map(|a| self.encode(a)).collect()
    }
}
