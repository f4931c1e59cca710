//! Command-line entry points.
//!
//! Every subcommand reads a JSON configuration (`--config`), writes its
//! artifacts under `--out` and finishes with a `report.json` that embeds the
//! configuration, the seed and the SHA-256 of each artifact. Relative paths
//! inside a configuration resolve against `--data` (or `AUTHORLINK_DATA`),
//! falling back to the directory holding the configuration file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    ingest_posts, split_time_disjoint, write_posts, DocumentStream, SplitCounts, SplitManifest,
    SplitSpec, TimeWindow,
};
use crate::error::{Error, Result};
use crate::eval::{
    build_linking_eval_from, build_ranking_eval, build_ranking_eval_known_queries, fit_tfidf,
    ranking_report, score_all, select_linking_accounts, AvgSinglePostScorer, Fixed16Scorer,
    LinkingEvalSpec, ModelScorer, RankingEvalSpec, Sample, Scorer, ScorerKind, SparseVec,
    TfidfScorer,
};
use crate::metrics::{detection_report, DetectionCostParams, DetectionReport};
use crate::synthetic::{generate, SyntheticSpec};
use crate::textcodec::{Tokenizer, TokenizerKind};
use crate::train::{
    run_training, source_revision, ModelBundle, RunReport, TrainConfig, REPORT_FILE,
};

pub const DATA_ENV: &str = "AUTHORLINK_DATA";

#[derive(Debug, Parser)]
#[command(
    name = "authorlink",
    version,
    about = "Author embeddings for document streams"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON configuration of the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root for relative paths in the configuration.
    #[arg(long, global = true, env = DATA_ENV)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic JSONL corpus.
    Synth,
    /// Split a JSONL corpus into time-disjoint train and eval files.
    Ingest,
    /// Train a text tokenizer.
    Tokenizer,
    /// Train an embedding model.
    Train,
    /// Embed the most recent posts of every author.
    Embed,
    /// Ranking evaluation (MRR, R@k).
    EvalRank,
    /// Account-linking evaluation (EER, minDCF).
    EvalLink,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::Tokenizer => "tokenizer",
            Command::Train => "train",
            Command::Embed => "embed",
            Command::EvalRank => "eval-rank",
            Command::EvalLink => "eval-link",
        }
    }
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> Result<RunReport> {
    let g = &cli.global;
    let config = g
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let root = match &g.data {
        Some(d) => d.clone(),
        None => config.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let ctx = Context {
        root,
        seed: g.seed,
        out: g.out.clone(),
        command: cli.command,
        started: Instant::now(),
    };
    match cli.command {
        Command::Synth => cmd_synth(&ctx, read_config(config)?),
        Command::Ingest => cmd_ingest(&ctx, read_config(config)?),
        Command::Tokenizer => cmd_tokenizer(&ctx, read_config(config)?),
        Command::Train => cmd_train(&ctx, read_config(config)?),
        Command::Embed => cmd_embed(&ctx, read_config(config)?),
        Command::EvalRank => cmd_eval_rank(&ctx, read_config(config)?),
        Command::EvalLink => cmd_eval_link(&ctx, read_config(config)?),
    }
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

struct Context {
    root: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    command: Command,
    started: Instant,
}

impl Context {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.root.join(p)
        } else {
            p.to_path_buf()
        }
    }

    fn seed(&self, configured: u64) -> u64 {
        self.seed.unwrap_or(configured)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let out = self
            .out
            .clone()
            .ok_or_else(|| Error::Config(format!("{} needs --out", self.command.name())))?;
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(out)
    }

    fn input(&self, p: &Path) -> Result<PathBuf> {
        let p = self.path(p);
        if !p.exists() {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
        Ok(p)
    }

    fn report<C: Serialize>(&self, config: &C, seed: u64) -> Result<RunReport> {
        Ok(RunReport {
            command: self.command.name().into(),
            config: serde_json::to_value(config)?,
            seed,
            metrics: serde_json::Value::Null,
            wall_clock_seconds: 0.0,
            source_revision: source_revision(),
            artifacts: BTreeMap::new(),
        })
    }

    fn finish(&self, mut report: RunReport, out: &Path) -> Result<RunReport> {
        report.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        report.save(&out.join(REPORT_FILE))?;
        Ok(report)
    }
}

fn load_streams(ctx: &Context, p: &Path) -> Result<Vec<DocumentStream>> {
    let streams = ingest_posts(ctx.input(p)?)?;
    if streams.is_empty() {
        return Err(Error::Data(format!("{} holds no posts", p.display())));
    }
    Ok(streams)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- synth

fn cmd_synth(ctx: &Context, mut cfg: SyntheticSpec) -> Result<RunReport> {
    cfg.seed = ctx.seed(cfg.seed);
    let out = ctx.out_dir()?;
    let streams = generate(&cfg)?;
    let path = out.join("posts.jsonl");
    write_posts(&streams, &path)?;
    let mut report = ctx.report(&cfg, cfg.seed)?;
    report.metrics = serde_json::to_value(SplitCounts::of(&streams))?;
    report.add_artifact(&out, &path)?;
    ctx.finish(report, &out)
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    /// JSONL posts.
    pub input: PathBuf,
    pub split: SplitSpec,
    /// Drop authors with training posts from the eval side.
    #[serde(default)]
    pub novel_eval_authors: bool,
}

fn cmd_ingest(ctx: &Context, mut cfg: IngestConfig) -> Result<RunReport> {
    cfg.split.validate()?;
    cfg.input = ctx.input(&cfg.input)?;
    let out = ctx.out_dir()?;
    let streams = load_streams(ctx, &cfg.input)?;
    let (mut train, eval) = split_time_disjoint(&streams, &cfg.split, cfg.novel_eval_authors);
    train.retain(|s| (cfg.split.min_posts..=cfg.split.max_posts).contains(&s.len()));
    let manifest = SplitManifest {
        spec: cfg.split,
        novel_eval_authors: cfg.novel_eval_authors,
        input: SplitCounts::of(&streams),
        train: SplitCounts::of(&train),
        eval: SplitCounts::of(&eval),
    };
    let mut report = ctx.report(&cfg, ctx.seed(0))?;
    for (name, part) in [("train.jsonl", &train), ("eval.jsonl", &eval)] {
        let path = out.join(name);
        write_posts(part, &path)?;
        report.add_artifact(&out, &path)?;
    }
    let path = out.join("manifest.json");
    write_json(&manifest, &path)?;
    report.add_artifact(&out, &path)?;
    report.metrics = serde_json::to_value(&manifest)?;
    ctx.finish(report, &out)
}

// ---------------------------------------------------------------- tokenizer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    /// JSONL posts whose texts train the tokenizer.
    pub corpus: PathBuf,
    pub kind: TokenizerKind,
    /// Subword vocabulary size; ignored for bytes.
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
}

fn default_vocab_size() -> usize {
    1 << 16
}

fn cmd_tokenizer(ctx: &Context, mut cfg: TokenizerConfig) -> Result<RunReport> {
    cfg.corpus = ctx.input(&cfg.corpus)?;
    let out = ctx.out_dir()?;
    let tokenizer = match cfg.kind {
        TokenizerKind::Byte => Tokenizer::byte(),
        TokenizerKind::SubwordUnigram => {
            let streams = load_streams(ctx, &cfg.corpus)?;
            let texts = streams
                .iter()
                .flat_map(|s| &s.actions)
                .map(|a| a.text.as_str());
            Tokenizer::train_subword(texts, cfg.vocab_size)?
        }
    };
    tokenizer.save(&out)?;
    let mut report = ctx.report(&cfg, ctx.seed(0))?;
    report.metrics = serde_json::json!({ "vocab_size": tokenizer.vocab_size() });
    for entry in fs::read_dir(&out).map_err(|e| Error::io(&out, e))? {
        let path = entry.map_err(|e| Error::io(&out, e))?.path();
        if path.is_file() && path.file_name() != Some(REPORT_FILE.as_ref()) {
            report.add_artifact(&out, &path)?;
        }
    }
    ctx.finish(report, &out)
}

// ---------------------------------------------------------------- train

fn cmd_train(ctx: &Context, mut cfg: TrainConfig) -> Result<RunReport> {
    cfg.resolve(&ctx.root);
    cfg.seed = ctx.seed(cfg.seed);
    if let Some(out) = &ctx.out {
        cfg.checkpoint_dir = out.clone();
    }
    let report = run_training(&cfg)?;
    eprintln!(
        "trained {} steps into {}",
        cfg.max_steps,
        cfg.checkpoint_dir.display()
    );
    Ok(report)
}

// ---------------------------------------------------------------- scorers

/// Which scorer an evaluation uses and where its state lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    /// Training output directory, for the model-based scorers.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint step; the latest when absent.
    #[serde(default)]
    pub step: Option<u64>,
    /// JSONL posts the TF-IDF weights are fitted on.
    #[serde(default)]
    pub tfidf_corpus: Option<PathBuf>,
}

impl ScorerConfig {
    fn resolve(&mut self, ctx: &Context) -> Result<()> {
        let need = |p: &Option<PathBuf>, what: &str| {
            p.as_deref()
                .map(|p| ctx.input(p))
                .transpose()?
                .ok_or_else(|| Error::Config(format!("{:?} scorer needs {what}", self.kind)))
        };
        match self.kind {
            ScorerKind::Tfidf => {
                self.tfidf_corpus = Some(need(&self.tfidf_corpus, "tfidf_corpus")?)
            }
            _ => self.checkpoint_dir = Some(need(&self.checkpoint_dir, "checkpoint_dir")?),
        }
        Ok(())
    }

    fn load(&self, ctx: &Context) -> Result<AnyScorer> {
        if self.kind == ScorerKind::Tfidf {
            let path = self.tfidf_corpus.as_deref().expect("resolved");
            let streams = load_streams(ctx, path)?;
            let texts = streams
                .iter()
                .flat_map(|s| &s.actions)
                .map(|a| a.text.as_str());
            return Ok(AnyScorer::Tfidf(fit_tfidf(texts)?));
        }
        let dir = self.checkpoint_dir.as_deref().expect("resolved");
        let ModelBundle {
            params, encoder, ..
        } = ModelBundle::load(dir, self.step)?;
        Ok(match self.kind {
            ScorerKind::Model => AnyScorer::Model(ModelScorer { params, encoder }),
            ScorerKind::AvgSinglePost => AnyScorer::Avg(AvgSinglePostScorer { params, encoder }),
            ScorerKind::Fixed16Chunked => AnyScorer::Fixed16(Fixed16Scorer { params, encoder }),
            ScorerKind::Tfidf => unreachable!(),
        })
    }
}

enum AnyScorer {
    Model(ModelScorer),
    Avg(AvgSinglePostScorer),
    Fixed16(Fixed16Scorer),
    Tfidf(TfidfScorer),
}

enum AnyRepr {
    Dense(Array1<f32>),
    Sparse(SparseVec),
}

impl Scorer for AnyScorer {
    type Repr = AnyRepr;

    fn represent(&self, samples: &[Sample]) -> Result<Vec<AnyRepr>> {
        let dense = |v: Vec<Array1<f32>>| v.into_iter().map(AnyRepr::Dense).collect();
        Ok(match self {
            AnyScorer::Model(s) => dense(s.represent(samples)?),
            AnyScorer::Avg(s) => dense(s.represent(samples)?),
            AnyScorer::Fixed16(s) => dense(s.represent(samples)?),
            AnyScorer::Tfidf(s) => s
                .represent(samples)?
                .into_iter()
                .map(AnyRepr::Sparse)
                .collect(),
        })
    }

    fn score(&self, q: &AnyRepr, t: &AnyRepr) -> f64 {
        match (self, q, t) {
            (AnyScorer::Model(s), AnyRepr::Dense(q), AnyRepr::Dense(t)) => s.score(q, t),
            (AnyScorer::Avg(s), AnyRepr::Dense(q), AnyRepr::Dense(t)) => s.score(q, t),
            (AnyScorer::Fixed16(s), AnyRepr::Dense(q), AnyRepr::Dense(t)) => s.score(q, t),
            (AnyScorer::Tfidf(s), AnyRepr::Sparse(q), AnyRepr::Sparse(t)) => s.score(q, t),
            _ => f64::NAN,
        }
    }
}

fn known_authors(ctx: &Context, p: &Option<PathBuf>) -> Result<Option<BTreeSet<String>>> {
    match p {
        Some(p) => Ok(Some(
            load_streams(ctx, p)?
                .into_iter()
                .map(|s| s.author_id)
                .collect(),
        )),
        None => Ok(None),
    }
}

// ---------------------------------------------------------------- embed

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    pub checkpoint_dir: PathBuf,
    #[serde(default)]
    pub step: Option<u64>,
    /// JSONL posts to embed.
    pub corpus: PathBuf,
    #[serde(default)]
    pub window: Option<TimeWindow>,
    /// Number of most recent posts per author; all posts when absent.
    #[serde(default)]
    pub episode_size: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub author: String,
    pub num_actions: usize,
    pub first_ts: i64,
    pub last_ts: i64,
    pub embedding: Vec<f32>,
}

fn cmd_embed(ctx: &Context, mut cfg: EmbedConfig) -> Result<RunReport> {
    cfg.checkpoint_dir = ctx.input(&cfg.checkpoint_dir)?;
    cfg.corpus = ctx.input(&cfg.corpus)?;
    if cfg.episode_size == Some(0) {
        return Err(Error::Config("episode_size must be positive".into()));
    }
    let out = ctx.out_dir()?;
    let bundle = ModelBundle::load(&cfg.checkpoint_dir, cfg.step)?;
    let step = bundle.step;
    let scorer = bundle.scorer();
    let window = cfg.window.unwrap_or_else(TimeWindow::all);
    let samples: Vec<Sample> = load_streams(ctx, &cfg.corpus)?
        .iter()
        .filter_map(|s| s.restrict(window))
        .map(|s| {
            let keep = cfg.episode_size.unwrap_or(s.len()).min(s.len());
            Sample {
                author_id: s.author_id,
                actions: s.actions[s.actions.len() - keep..].to_vec(),
            }
        })
        .collect();
    let vectors = scorer.represent(&samples)?;

    let path = out.join("embeddings.jsonl");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for (s, v) in samples.iter().zip(&vectors) {
        let rec = EmbeddingRecord {
            author: s.author_id.clone(),
            num_actions: s.len(),
            first_ts: s.actions[0].timestamp,
            last_ts: s.actions[s.len() - 1].timestamp,
            embedding: v.to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    drop(w);

    let mut report = ctx.report(&cfg, ctx.seed(0))?;
    report.metrics = serde_json::json!({
        "authors": samples.len(),
        "checkpoint_step": step,
        "dim": scorer.params.config().output_dim,
    });
    report.add_artifact(&out, &path)?;
    ctx.finish(report, &out)
}

// ---------------------------------------------------------------- eval-rank

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankRunConfig {
    /// JSONL posts the queries and targets come from.
    pub corpus: PathBuf,
    pub spec: RankingEvalSpec,
    pub scorer: ScorerConfig,
    /// Training corpus; when given, query authors are restricted to it.
    #[serde(default)]
    pub known_queries_from: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn cmd_eval_rank(ctx: &Context, mut cfg: RankRunConfig) -> Result<RunReport> {
    cfg.seed = ctx.seed(cfg.seed);
    cfg.corpus = ctx.input(&cfg.corpus)?;
    cfg.scorer.resolve(ctx)?;
    cfg.spec.validate()?;
    let out = ctx.out_dir()?;
    let streams = load_streams(ctx, &cfg.corpus)?;
    let known = known_authors(ctx, &cfg.known_queries_from)?;
    let scorer = cfg.scorer.load(ctx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = match &known {
        Some(k) => build_ranking_eval_known_queries(&streams, &cfg.spec, k, &mut rng)?,
        None => build_ranking_eval(&streams, &cfg.spec, &mut rng)?,
    };
    let r = ranking_report(&scorer, &eval)?;
    eprintln!(
        "MRR {:.4} R@8 {:.4} ({} queries, {} targets)",
        r.mrr, r.recall_at[&8], r.num_queries, r.num_targets
    );
    let mut report = ctx.report(&cfg, cfg.seed)?;
    report.metrics = serde_json::to_value(&r)?;
    ctx.finish(report, &out)
}

// ---------------------------------------------------------------- eval-link

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkRunConfig {
    /// JSONL posts covering the query and target windows.
    pub corpus: PathBuf,
    pub spec: LinkingEvalSpec,
    /// Subreddits to evaluate, each with `spec`; only `spec.subreddit` when empty.
    #[serde(default)]
    pub subreddits: Vec<String>,
    pub scorer: ScorerConfig,
    /// Training corpus; when given, distinguished accounts are restricted to it.
    #[serde(default)]
    pub known_queries_from: Option<PathBuf>,
    /// Extra target sizes evaluated on the same accounts.
    #[serde(default)]
    pub target_sizes: Vec<usize>,
    #[serde(default)]
    pub cost: DetectionCostParams,
    #[serde(default)]
    pub seed: u64,
}

pub const TRIALS_FILE: &str = "trials.tsv";
pub const ROC_FILE: &str = "roc.csv";
pub const SELECTION_FILE: &str = "selection.json";
pub const SWEEP_FILE: &str = "eer_by_target_size.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub subreddits: BTreeMap<String, DetectionReport>,
    pub mean_eer: f64,
    pub mean_min_dcf: f64,
    #[serde(default)]
    pub target_size_sweep: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub subreddit: String,
    pub target_size: usize,
    pub eer: f64,
    pub min_dcf: f64,
}

fn dir_name(subreddit: &str) -> String {
    subreddit
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn cmd_eval_link(ctx: &Context, mut cfg: LinkRunConfig) -> Result<RunReport> {
    cfg.seed = ctx.seed(cfg.seed);
    cfg.corpus = ctx.input(&cfg.corpus)?;
    cfg.scorer.resolve(ctx)?;
    cfg.cost.validate()?;
    if cfg.subreddits.is_empty() {
        cfg.subreddits.push(cfg.spec.subreddit.clone());
    }
    let specs: Vec<LinkingEvalSpec> = cfg
        .subreddits
        .iter()
        .map(|s| LinkingEvalSpec {
            subreddit: s.clone(),
            ..cfg.spec.clone()
        })
        .collect();
    for spec in &specs {
        spec.validate()?;
        for &size in &cfg.target_sizes {
            LinkingEvalSpec {
                target_size: size,
                ..spec.clone()
            }
            .validate()?;
        }
    }
    let names: BTreeSet<String> = cfg.subreddits.iter().map(|s| dir_name(s)).collect();
    if names.len() != cfg.subreddits.len() {
        return Err(Error::Config("subreddits must be distinct".into()));
    }

    let out = ctx.out_dir()?;
    let streams = load_streams(ctx, &cfg.corpus)?;
    let known = known_authors(ctx, &cfg.known_queries_from)?;
    let scorer = cfg.scorer.load(ctx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = ctx.report(&cfg, cfg.seed)?;
    let mut per_subreddit = BTreeMap::new();
    let mut sweep = Vec::new();

    for spec in &specs {
        let dir = out.join(dir_name(&spec.subreddit));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let selection =
            select_linking_accounts(&streams, spec, known.as_ref(), cfg.seed, &mut rng)?;
        let eval = build_linking_eval_from(&streams, spec, &selection)?;
        let trials = score_all(&scorer, &eval.queries, &eval.targets)?;
        let (det, curve) = detection_report(&trials, &cfg.cost)?;
        eprintln!(
            "{}: {} trials, {} positive, EER {:.4} minDCF {:.4}",
            spec.subreddit, det.trials, det.positives, det.eer, det.min_dcf
        );

        let trials_path = dir.join(TRIALS_FILE);
        trials.save_tsv(&trials_path)?;
        let roc_path = dir.join(ROC_FILE);
        let mut roc = Vec::new();
        curve
            .write_csv(&mut roc)
            .map_err(|e| Error::io(&roc_path, e))?;
        fs::write(&roc_path, roc).map_err(|e| Error::io(&roc_path, e))?;
        let selection_path = dir.join(SELECTION_FILE);
        write_json(&selection, &selection_path)?;
        for p in [&trials_path, &roc_path, &selection_path] {
            report.add_artifact(&out, p)?;
        }

        for &size in &cfg.target_sizes {
            let sized = LinkingEvalSpec {
                target_size: size,
                ..spec.clone()
            };
            let eval = build_linking_eval_from(&streams, &sized, &selection)?;
            let trials = score_all(&scorer, &eval.queries, &eval.targets)?;
            let (d, _) = detection_report(&trials, &cfg.cost)?;
            sweep.push(SweepPoint {
                subreddit: spec.subreddit.clone(),
                target_size: size,
                eer: d.eer,
                min_dcf: d.min_dcf,
            });
        }
        per_subreddit.insert(spec.subreddit.clone(), det);
    }

    if !sweep.is_empty() {
        let path = out.join(SWEEP_FILE);
        let mut csv = String::from("subreddit,target_size,eer,min_dcf\n");
        for p in &sweep {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                p.subreddit, p.target_size, p.eer, p.min_dcf
            ));
        }
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        report.add_artifact(&out, &path)?;
    }

    let n = per_subreddit.len() as f64;
    let metrics = LinkMetrics {
        mean_eer: per_subreddit.values().map(|d| d.eer).sum::<f64>() / n,
        mean_min_dcf: per_subreddit.values().map(|d| d.min_dcf).sum::<f64>() / n,
        subreddits: per_subreddit,
        target_size_sweep: sweep,
    };
    report.metrics = serde_json::to_value(&metrics)?;
    ctx.finish(report, &out)
}
