//! Training loop, optimizer, run artifacts and model bundles.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ingest_posts, DocumentStream};
use crate::embedder::{
    hex_digest, load_checkpoint, save_checkpoint, ModelConfig, Parameters, META_FILE, PARAMS_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{build_ranking_eval, ranking_report, ModelScorer, RankingEval, RankingEvalSpec};
use crate::objectives::{LabeledEmbeddings, LossConfig};
use crate::sampler::{build_batch, BatchSpec, EncodedStream, SampleSpec};
use crate::textcodec::{ActionEncoder, SubredditVocab, Tokenizer};

pub const TOKENIZER_DIR: &str = "tokenizer";
pub const SUBREDDITS_FILE: &str = "subreddits.txt";
pub const LOCK_FILE: &str = "train.lock";
pub const CURVE_FILE: &str = "learning_curve.csv";
pub const REPORT_FILE: &str = "report.json";

/// Adam with a constant step size after an optional linear warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }

    pub fn step_size(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, len: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Parameters<f32>, grads: &Parameters<f32>) {
        let lr = self.cfg.step_size(self.t);
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let alpha = (lr * c2.sqrt() / c1) as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.cfg.epsilon as f32);
        let p = params.as_mut_slice();
        for (i, &g) in grads.as_slice().iter().enumerate() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            p[i] -= alpha * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Everything the optimization itself depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub sample: SampleSpec,
    pub batch: BatchSpec,
    pub objective: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub max_steps: u64,
    pub validation_every: u64,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.sample.validate()?;
        self.objective.validate()?;
        self.optimizer.validate()?;
        if self.batch.authors_per_batch < 2 || self.batch.samples_per_author < 1 {
            return Err(Error::Config(
                "a batch needs at least two authors and one sample per author".into(),
            ));
        }
        if let LossConfig::TopK(c) = self.objective {
            if c.n_plus != self.batch.samples_per_author {
                return Err(Error::Config(format!(
                    "top-k n_plus {} differs from samples per author {}",
                    c.n_plus, self.batch.samples_per_author
                )));
            }
        }
        if self.validation_every == 0 {
            return Err(Error::Config("validation_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    /// Mean training loss since the previous point.
    pub loss: f64,
    pub mrr: Option<f64>,
    pub recall_at_8: Option<f64>,
}

/// Held-out ranking set used to monitor training.
pub struct Validation<'a> {
    pub eval: &'a RankingEval,
    pub encoder: &'a ActionEncoder,
}

fn validate_params(params: &Parameters<f32>, v: &Validation<'_>) -> Result<(f64, f64)> {
    let scorer = ModelScorer {
        params: params.clone(),
        encoder: v.encoder.clone(),
    };
    let r = ranking_report(&scorer, v.eval)?;
    Ok((r.mrr, r.recall_at[&8]))
}

/// Optimizes freshly initialized parameters on `streams`.
///
/// `on_step` runs after initialization (step 0) and after every update with
/// the current step and parameters.
pub fn train_streams(
    model: &ModelConfig,
    settings: &TrainSettings,
    streams: &[EncodedStream],
    validation: Option<&Validation<'_>>,
    mut on_step: impl FnMut(u64, &Parameters<f32>) -> Result<()>,
) -> Result<(Parameters<f32>, Vec<CurvePoint>)> {
    settings.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut params = Parameters::<f32>::init(model, &mut init_rng)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    batch_rng.set_stream(1);
    let mut adam = Adam::new(settings.optimizer, params.len());
    let mut curve = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0u64;
    on_step(0, &params)?;
    for step in 1..=settings.max_steps {
        let batch = build_batch(streams, &settings.batch, &settings.sample, &mut batch_rng)?;
        let samples: Vec<&[_]> = batch
            .episodes
            .iter()
            .map(|e| e.actions.as_slice())
            .collect();
        let (loss, grads) = params.gradient(&samples, |emb| {
            let out = settings
                .objective
                .evaluate(LabeledEmbeddings::new(emb.view(), &batch.labels)?)?;
            Ok((out.value, out.grad))
        })?;
        adam.step(&mut params, &grads);
        if !params.is_finite() {
            return Err(Error::Numeric(format!(
                "parameters became non-finite at step {step}"
            )));
        }
        loss_sum += f64::from(loss);
        loss_count += 1;
        if step % settings.validation_every == 0 || step == settings.max_steps {
            let (mrr, r8) = match validation {
                Some(v) => {
                    let (m, r) = validate_params(&params, v)?;
                    (Some(m), Some(r))
                }
                None => (None, None),
            };
            curve.push(CurvePoint {
                step,
                loss: loss_sum / loss_count as f64,
                mrr,
                recall_at_8: r8,
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
        on_step(step, &params)?;
    }
    Ok((params, curve))
}

pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut out = String::from("step,loss,mrr,recall_at_8\n");
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for p in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.step,
            p.loss,
            opt(p.mrr),
            opt(p.recall_at_8)
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Self-describing record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub metrics: serde_json::Value,
    pub wall_clock_seconds: f64,
    pub source_revision: String,
    /// SHA-256 of every artifact, keyed by path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

pub fn source_revision() -> String {
    match option_env!("AUTHORLINK_REVISION") {
        Some(rev) => format!(
            "{} {} ({rev})",
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION")
        ),
        None => format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
    }
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Records the hash of `path` under its name relative to `root`.
    pub fn add_artifact(&mut self, root: &Path, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let key = path
            .strip_prefix(root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        self.artifacts.insert(key, hex_digest(&bytes));
        Ok(())
    }
}

/// Training run configuration as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// JSONL posts to train on.
    pub corpus: PathBuf,
    /// JSONL posts for the validation ranking set.
    #[serde(default)]
    pub validation_corpus: Option<PathBuf>,
    #[serde(default)]
    pub validation: Option<RankingEvalSpec>,
    /// Tokenizer directory written by the `tokenizer` command.
    pub tokenizer: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub model: ModelConfig,
    pub sample: SampleSpec,
    pub batch: BatchSpec,
    pub objective: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub max_steps: u64,
    pub validation_every: u64,
    /// 0 keeps only the initial and final checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            sample: self.sample,
            batch: self.batch,
            objective: self.objective,
            optimizer: self.optimizer,
            max_steps: self.max_steps,
            validation_every: self.validation_every,
            seed: self.seed,
        }
    }

    /// Resolves relative paths against `root`.
    pub fn resolve(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.tokenizer);
        fix(&mut self.checkpoint_dir);
        if let Some(v) = &mut self.validation_corpus {
            fix(v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.settings().validate()?;
        for p in [&self.corpus, &self.tokenizer]
            .into_iter()
            .chain(&self.validation_corpus)
        {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if self.validation_corpus.is_some() != self.validation.is_some() {
            return Err(Error::Config(
                "validation_corpus and validation must be given together".into(),
            ));
        }
        Ok(())
    }
}

pub fn step_dir(checkpoint_dir: &Path, step: u64) -> PathBuf {
    checkpoint_dir.join(format!("step-{step:08}"))
}

/// Largest step with a saved checkpoint.
pub fn latest_step(checkpoint_dir: &Path) -> Result<u64> {
    let entries = fs::read_dir(checkpoint_dir).map_err(|e| Error::io(checkpoint_dir, e))?;
    let mut best = None;
    for e in entries {
        let e = e.map_err(|e| Error::io(checkpoint_dir, e))?;
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(n) = name
            .strip_prefix("step-")
            .and_then(|s| s.parse::<u64>().ok())
        {
            if e.path().join(META_FILE).exists() {
                best = best.max(Some(n));
            }
        }
    }
    best.ok_or_else(|| Error::Checkpoint(format!("no checkpoints in {}", checkpoint_dir.display())))
}

/// Trained parameters together with the encoder they expect.
pub struct ModelBundle {
    pub params: Parameters<f32>,
    pub encoder: ActionEncoder,
    pub step: u64,
}

impl ModelBundle {
    /// Loads `step` (default: the latest) from a training output directory.
    pub fn load(checkpoint_dir: &Path, step: Option<u64>) -> Result<Self> {
        let step = match step {
            Some(s) => s,
            None => latest_step(checkpoint_dir)?,
        };
        let (params, meta) = load_checkpoint(&step_dir(checkpoint_dir, step))?;
        let tokenizer = Tokenizer::load(checkpoint_dir.join(TOKENIZER_DIR))?;
        let cfg = params.config().clone();
        let subs = SubredditVocab::load(
            checkpoint_dir.join(SUBREDDITS_FILE),
            cfg.subreddit_vocab_size - 1,
        )?;
        check_compatible(&cfg, &tokenizer)?;
        let encoder = ActionEncoder::new(tokenizer, subs, cfg.seq_len)?;
        Ok(Self {
            params,
            encoder,
            step: meta.step,
        })
    }

    pub fn scorer(self) -> ModelScorer {
        ModelScorer {
            params: self.params,
            encoder: self.encoder,
        }
    }
}

fn check_compatible(model: &ModelConfig, tokenizer: &Tokenizer) -> Result<()> {
    if model.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match the tokenizer's {}",
            model.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    if model.subreddit_vocab_size == 0 {
        return Err(Error::Config(
            "subreddit_vocab_size must count the OOV id".into(),
        ));
    }
    Ok(())
}

pub fn encode_streams(encoder: &ActionEncoder, streams: &[DocumentStream]) -> Vec<EncodedStream> {
    streams
        .iter()
        .map(|s| EncodedStream {
            author_id: s.author_id.clone(),
            actions: encoder.encode_all(&s.actions),
        })
        .collect()
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another training run ({} exists)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Runs a full training job and writes checkpoints, the learning curve and
/// a report into `config.checkpoint_dir`.
pub fn run_training(config: &TrainConfig) -> Result<RunReport> {
    let started = std::time::Instant::now();
    config.validate()?;
    let out = &config.checkpoint_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let _lock = LockGuard::acquire(out)?;

    let tokenizer = Tokenizer::load(&config.tokenizer)?;
    check_compatible(&config.model, &tokenizer)?;
    let streams = ingest_posts(&config.corpus)?;
    if streams.is_empty() {
        return Err(Error::Data(format!(
            "{} holds no posts",
            config.corpus.display()
        )));
    }
    let subs = SubredditVocab::build(&streams, config.model.subreddit_vocab_size - 1);
    tokenizer.save(out.join(TOKENIZER_DIR))?;
    subs.save(out.join(SUBREDDITS_FILE))?;
    let encoder = ActionEncoder::new(tokenizer, subs, config.model.seq_len)?;
    let encoded = encode_streams(&encoder, &streams);

    let eval = match (&config.validation_corpus, &config.validation) {
        (Some(path), Some(spec)) => {
            let vs = ingest_posts(path)?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(2);
            Some(build_ranking_eval(&vs, spec, &mut rng)?)
        }
        _ => None,
    };
    let validation = eval.as_ref().map(|eval| Validation {
        eval,
        encoder: &encoder,
    });

    let mut saved = Vec::new();
    let every = config.checkpoint_every;
    let (_, curve) = train_streams(
        &config.model,
        &config.settings(),
        &encoded,
        validation.as_ref(),
        |step, p| {
            if step == 0 || step == config.max_steps || (every > 0 && step % every == 0) {
                let dir = step_dir(out, step);
                save_checkpoint(&dir, p, config.seed, step)?;
                saved.push(dir);
            }
            Ok(())
        },
    )?;
    let curve_path = out.join(CURVE_FILE);
    write_curve_csv(&curve, &curve_path)?;

    let last = curve.last();
    let mut report = RunReport {
        command: "train".into(),
        config: serde_json::to_value(config)?,
        seed: config.seed,
        metrics: serde_json::json!({
            "steps": config.max_steps,
            "final_loss": last.map(|p| p.loss),
            "final_mrr": last.and_then(|p| p.mrr),
            "final_recall_at_8": last.and_then(|p| p.recall_at_8),
        }),
        wall_clock_seconds: 0.0,
        source_revision: source_revision(),
        artifacts: BTreeMap::new(),
    };
    for dir in &saved {
        report.add_artifact(out, &dir.join(META_FILE))?;
        report.add_artifact(out, &dir.join(PARAMS_FILE))?;
    }
    report.add_artifact(out, &curve_path)?;
    report.add_artifact(out, &out.join(SUBREDDITS_FILE))?;
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    report.save(&out.join(REPORT_FILE))?;
    Ok(report)
}
