//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run all criteria with `cargo test --test acceptance`, or a subset with
//! `cargo test --test acceptance -- 2 6`.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use authorlink::corpus::{DocumentStream, TimeWindow};
use authorlink::embedder::{param_count, Features, ModelConfig, Parameters};
use authorlink::eval::{
    build_linking_eval, build_linking_eval_from, build_ranking_eval_known_queries, fit_tfidf,
    ranking_report, score_all, select_linking_accounts, AvgSinglePostScorer, LinkingEvalSpec,
    ModelScorer, RankingEvalSpec,
};
use authorlink::metrics::{
    dcf, eer, min_dcf, mrr, rank_from_scores, recall_at_k, DetectionCostParams, TrialSet,
};
use authorlink::objectives::{
    topk_loss, triplet_semihard_loss, LabeledEmbeddings, TopKConfig, TripletConfig,
};
use authorlink::sampler::{empirical_skewness, skewness, BatchSpec, SampleSpec, SizeDistribution};
use authorlink::synthetic::{generate, SyntheticSpec, SHARED_SUBREDDIT};
use authorlink::textcodec::{ActionEncoder, EncodedAction, SubredditVocab, Tokenizer};
use authorlink::train::{encode_streams, train_streams, OptimizerConfig, TrainSettings};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn size_distribution_fidelity() -> Outcome {
    let table = [
        ("Unif", SizeDistribution::Uniform, 0.0),
        (
            "Beta(2,1)",
            SizeDistribution::Beta {
                alpha: 2.0,
                beta: 1.0,
            },
            -0.566,
        ),
        (
            "Beta(3,1)",
            SizeDistribution::Beta {
                alpha: 3.0,
                beta: 1.0,
            },
            -0.861,
        ),
        (
            "Beta(4,1)",
            SizeDistribution::Beta {
                alpha: 4.0,
                beta: 1.0,
            },
            -1.049,
        ),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, dist, expected) in table {
        let s = skewness(&dist, 16);
        ok &= (s - expected).abs() <= 0.001;
        parts.push(format!("{name} {s:.4}"));
    }
    let spec = SampleSpec::new(1, 16, SizeDistribution::TruncatedPoisson { lambda: 16.0 })
        .map_err(|e| e.to_string())?;
    let mc = empirical_skewness(&spec, 1_000_000, &mut ChaCha8Rng::seed_from_u64(1));
    ok &= (mc - (-0.786)).abs() <= 0.02;
    parts.push(format!("tPois(16) MC {mc:.4}"));
    check(ok, parts.join(", "))
}

// ---------------------------------------------------------------- 2

fn oracle_rank(scores: &[f64], truth: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&i| i == truth).unwrap() + 1
}

/// (miss, false alarm) rates at a threshold below all scores, at each
/// midpoint between consecutive distinct scores and above all scores.
fn oracle_rates(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let mut d = scores.to_vec();
    d.sort_by(f64::total_cmp);
    d.dedup();
    let mut ths = vec![d[0] - 1.0];
    for w in d.windows(2) {
        ths.push((w[0] + w[1]) / 2.0);
    }
    ths.push(d[d.len() - 1] + 1.0);
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    ths.iter()
        .map(|&t| {
            let mut hit = 0.0;
            let mut fa = 0.0;
            for (s, &l) in scores.iter().zip(labels) {
                if *s < t {
                    if l {
                        hit += 1.0;
                    } else {
                        fa += 1.0;
                    }
                }
            }
            (1.0 - hit / pos, fa / neg)
        })
        .collect()
}

fn oracle_eer(rates: &[(f64, f64)]) -> f64 {
    for i in 0..rates.len() {
        let (m, f) = rates[i];
        if m == f {
            return f;
        }
        if m < f {
            let (m0, f0) = rates[i - 1];
            let t = (m0 - f0) / ((m0 - f0) - (m - f));
            return f0 + t * (f - f0);
        }
    }
    rates[rates.len() - 1].1
}

fn oracle_min_dcf(rates: &[(f64, f64)], p: &DetectionCostParams) -> f64 {
    let pm = p.prior * p.miss_cost;
    let pf = (1.0 - p.prior) * p.false_alarm_cost;
    rates
        .iter()
        .map(|&(m, f)| (pm * m + pf * f) / pm.min(pf))
        .fold(f64::INFINITY, f64::min)
}

fn metric_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = DetectionCostParams::default();
    let mut mismatches = Vec::new();
    for instance in 0..1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..40);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 * 0.37)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.25)).collect();
        labels[0] = true;
        labels[1] = false;

        let truths: Vec<usize> = (0..rng.random_range(1..20))
            .map(|_| rng.random_range(0..n))
            .collect();
        let ranks: Vec<usize> = truths
            .iter()
            .map(|&t| rank_from_scores(&scores, t))
            .collect();
        let oracle: Vec<usize> = truths.iter().map(|&t| oracle_rank(&scores, t)).collect();
        let k = rng.random_range(1..10);
        let o_mrr = oracle.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / oracle.len() as f64;
        let o_rec = oracle.iter().filter(|&&r| r <= k).count() as f64 / oracle.len() as f64;
        let trials = TrialSet::from_scores(&scores, &labels);
        let rates = oracle_rates(&scores, &labels);
        let e = eer(&trials).map_err(|e| e.to_string())?;
        let m = min_dcf(&trials, &params).map_err(|e| e.to_string())?;
        let same = ranks == oracle
            && mrr(&ranks).unwrap() == o_mrr
            && recall_at_k(&ranks, k).unwrap() == o_rec
            && e == oracle_eer(&rates)
            && m == oracle_min_dcf(&rates, &params);
        if !same {
            mismatches.push(instance);
        }
    }
    check(
        mismatches.is_empty(),
        format!(
            "1000 instances, mismatches {:?}",
            &mismatches[..mismatches.len().min(5)]
        ),
    )
}

// ---------------------------------------------------------------- 3

fn dcf_spot_values() -> Outcome {
    let raw = DetectionCostParams {
        normalized: false,
        ..Default::default()
    };
    let norm = DetectionCostParams::default();
    let a = dcf(1.0, 0.0, &raw);
    let b = dcf(1.0, 0.0, &norm);
    let c = dcf(0.2, 0.1, &raw);
    let sep = TrialSet::from_scores(
        &[0.1, 0.2, 0.3, 0.8, 0.9],
        &[true, true, true, false, false],
    );
    let e = eer(&sep).map_err(|e| e.to_string())?;
    let m = min_dcf(&sep, &norm).map_err(|e| e.to_string())?;
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
    check(
        close(a, 0.05) && close(b, 1.0) && close(c, 0.2) && e == 0.0 && m == 0.0,
        format!("dcf(1,0) raw {a} norm {b}; dcf(0.2,0.1) raw {c}; separated EER {e} minDCF {m}"),
    )
}

// ---------------------------------------------------------------- 4

fn random_episode(cfg: &ModelConfig, m: usize, rng: &mut ChaCha8Rng) -> Vec<EncodedAction> {
    (0..m)
        .map(|_| {
            let n = rng.random_range(1..=cfg.seq_len);
            let mut tokens: Vec<u32> = (0..n)
                .map(|_| rng.random_range(0..cfg.vocab_size as u32))
                .collect();
            tokens.resize(cfg.seq_len, cfg.pad_id());
            EncodedAction {
                tokens,
                subreddit: rng.random_range(0..cfg.subreddit_vocab_size as u32),
                hour: rng.random_range(0..24),
            }
        })
        .collect()
}

type LossFn = Box<dyn Fn(&Array2<f64>, &[usize]) -> (f64, Array2<f64>)>;

fn gradient_correctness() -> Outcome {
    let cfg = ModelConfig::tiny(Features::TPS);
    assert_eq!(
        (
            cfg.token_dim,
            cfg.filters_per_width,
            cfg.output_dim,
            cfg.seq_len,
            cfg.vocab_size
        ),
        (8, 4, 8, 8, 64)
    );
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut batches = 0;
    let mut skipped = 0;
    let losses: [LossFn; 2] = [
        Box::new(|e, l| {
            let o = triplet_semihard_loss(
                LabeledEmbeddings::new(e.view(), l).unwrap(),
                &TripletConfig { margin: 0.2 },
            )
            .unwrap();
            (o.value, o.grad)
        }),
        Box::new(|e, l| {
            let o = topk_loss(
                LabeledEmbeddings::new(e.view(), l).unwrap(),
                &TopKConfig {
                    k: 2,
                    n_plus: 3,
                    margin: 0.25,
                },
            )
            .unwrap();
            (o.value, o.grad)
        }),
    ];
    for loss in &losses {
        let mut done = 0;
        while done < 10 {
            let params = Parameters::<f64>::init(&cfg, &mut rng).unwrap();
            let labels: Vec<usize> = (0..9).map(|i| i / 3).collect();
            let samples: Vec<Vec<EncodedAction>> = (0..9)
                .map(|_| {
                    let m = rng.random_range(1..=4);
                    random_episode(&cfg, m, &mut rng)
                })
                .collect();
            let f = |p: &Parameters<f64>| loss(&p.embed_batch(&samples).unwrap(), &labels).0;
            let (value, grads) = params.gradient(&samples, |e| Ok(loss(e, &labels))).unwrap();
            if value == 0.0 {
                skipped += 1;
                continue;
            }
            let coords: Vec<usize> = (0..40).map(|_| rng.random_range(0..params.len())).collect();
            let mut batch_worst: f64 = 0.0;
            let mut kink = false;
            for &i in &coords {
                let fd = |eps: f64| {
                    let mut a = params.clone();
                    a.as_mut_slice()[i] += eps;
                    let mut b = params.clone();
                    b.as_mut_slice()[i] -= eps;
                    (f(&a) - f(&b)) / (2.0 * eps)
                };
                let (f1, f2) = (fd(1e-6), fd(1e-5));
                let an = grads.as_slice()[i];
                // disagreeing step sizes mean a kink lies within reach
                if (f1 - f2).abs() > 1e-6 * (1.0 + f1.abs()) {
                    kink = true;
                    break;
                }
                let scale = f1.abs().max(an.abs());
                if scale > 1e-6 {
                    batch_worst = batch_worst.max((f1 - an).abs() / scale);
                }
            }
            if kink {
                skipped += 1;
                continue;
            }
            worst = worst.max(batch_worst);
            done += 1;
            batches += 1;
        }
    }
    check(
        worst < 1e-4,
        format!("{batches} batches (triplet and top-k), max relative error {worst:.2e}, {skipped} kinked/zero batches redrawn"),
    )
}

// ---------------------------------------------------------------- 5

fn aggregation_invariances() -> Outcome {
    let cfg = ModelConfig::tiny(Features::TPS);
    let params = Parameters::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut perm_err: f32 = 0.0;
    let mut pad_err: f32 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(1..=16);
        let ep = random_episode(&cfg, m, &mut rng);
        let base = params.embed_sample(&ep).unwrap();
        let mut shuffled = ep.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let p = params.embed_sample(&shuffled).unwrap();
        perm_err = perm_err.max(
            base.iter()
                .zip(&p)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        );
        let longer = random_episode(&cfg, m + rng.random_range(1..=16), &mut rng);
        let batch = params.embed_batch(&[ep.clone(), longer]).unwrap();
        pad_err = pad_err.max(
            base.iter()
                .zip(batch.row(0))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        );
    }
    check(
        perm_err <= 1e-5 && pad_err <= 1e-5,
        format!("100 episodes, max |permuted - original| {perm_err:.1e}, max |padded - original| {pad_err:.1e}"),
    )
}

// ---------------------------------------------------------------- toy corpus

const DAY: i64 = 86_400;

struct Toy {
    train_authors: BTreeSet<String>,
    train: Vec<DocumentStream>,
    /// Every author inside the evaluation period.
    heldout: Vec<DocumentStream>,
    encoder: ActionEncoder,
    model: ModelConfig,
    start: i64,
}

const TRAIN_AUTHORS: usize = 100;
const TRAIN_DAYS: i64 = 150;
const TOTAL_DAYS: i64 = 300;

fn toy() -> Toy {
    let spec = SyntheticSpec {
        num_authors: 600,
        min_posts: 200,
        max_posts: 300,
        end: SyntheticSpec::default().start + TOTAL_DAYS * DAY,
        shared_subreddit_rate: 0.5,
        preferred_subreddit_rate: 0.3,
        signature_rate: 0.2,
        ..Default::default()
    };
    let start = spec.start;
    let corpus = generate(&spec).unwrap();
    let train_window = TimeWindow::new(start, start + TRAIN_DAYS * DAY);
    let eval_window = TimeWindow::new(start + TRAIN_DAYS * DAY, spec.end);
    let train: Vec<DocumentStream> = corpus[..TRAIN_AUTHORS]
        .iter()
        .filter_map(|s| s.restrict(train_window))
        .collect();
    let heldout: Vec<DocumentStream> = corpus
        .iter()
        .filter_map(|s| s.restrict(eval_window))
        .collect();
    let texts: Vec<&str> = train
        .iter()
        .flat_map(|s| &s.actions)
        .map(|a| a.text.as_str())
        .collect();
    let tokenizer = Tokenizer::train_subword(texts, 1024).unwrap();
    let subs = SubredditVocab::build(&train, 64);
    let model = ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        seq_len: 16,
        token_dim: 32,
        conv_widths: vec![2, 3, 4],
        filters_per_width: 32,
        subreddit_vocab_size: subs.num_ids(),
        subreddit_dim: 16,
        attention_dim: 64,
        hidden_dim: 128,
        output_dim: 64,
        features: Features::TPS,
        normalize_output: true,
        hidden_activation: authorlink::embedder::Activation::Relu,
    };
    let encoder = ActionEncoder::new(tokenizer, subs, model.seq_len).unwrap();
    Toy {
        train_authors: train.iter().map(|s| s.author_id.clone()).collect(),
        train,
        heldout,
        encoder,
        model,
        start,
    }
}

const TOY_STEPS: u64 = 1200;

fn toy_train(toy: &Toy, sample: SampleSpec, seed: u64) -> Result<Parameters<f32>, String> {
    let settings = TrainSettings {
        sample,
        batch: BatchSpec {
            authors_per_batch: 16,
            samples_per_author: 4,
        },
        objective: authorlink::objectives::LossConfig::Triplet(TripletConfig { margin: 0.2 }),
        optimizer: OptimizerConfig {
            learning_rate: 2e-3,
            ..Default::default()
        },
        max_steps: TOY_STEPS,
        validation_every: TOY_STEPS,
        seed,
    };
    let streams = encode_streams(&toy.encoder, &toy.train);
    let (p, _) = train_streams(&toy.model, &settings, &streams, None, |_, _| Ok(()))
        .map_err(|e| e.to_string())?;
    Ok(p)
}

fn ranking_spec(size: usize) -> RankingEvalSpec {
    RankingEvalSpec {
        num_queries: 100,
        num_targets: 400,
        episode_size: size,
        eval_window: TimeWindow::all(),
    }
}

struct Shared {
    toy: Toy,
    full_model: Option<Parameters<f32>>,
}

impl Shared {
    fn full_model(&mut self) -> Result<Parameters<f32>, String> {
        if self.full_model.is_none() {
            let spec = SampleSpec::new(
                1,
                16,
                SizeDistribution::Beta {
                    alpha: 3.0,
                    beta: 1.0,
                },
            )
            .unwrap();
            self.full_model = Some(toy_train(&self.toy, spec, 6)?);
        }
        Ok(self.full_model.clone().unwrap())
    }
}

// ---------------------------------------------------------------- 6

fn toy_separability(shared: &mut Shared) -> Outcome {
    let params = shared.full_model()?;
    let toy = &shared.toy;
    let ev = build_ranking_eval_known_queries(
        &toy.heldout,
        &ranking_spec(16),
        &toy.train_authors,
        &mut ChaCha8Rng::seed_from_u64(60),
    )
    .map_err(|e| e.to_string())?;
    let scorer = ModelScorer {
        params,
        encoder: toy.encoder.clone(),
    };
    let r = ranking_report(&scorer, &ev).map_err(|e| e.to_string())?;
    let r8 = r.recall_at[&8];
    check(
        r8 >= 0.8 && r.mrr >= 0.6,
        format!(
            "{} training authors, held-out-period ranking 100 queries / 400 targets at size 16: MRR {:.3}, R@8 {:.3}",
            toy.train_authors.len(),
            r.mrr,
            r8
        ),
    )
}

// ---------------------------------------------------------------- 7

fn variable_size_generalization(shared: &mut Shared) -> Outcome {
    let toy = &shared.toy;
    let short = toy_train(
        toy,
        SampleSpec::new(
            1,
            8,
            SizeDistribution::Beta {
                alpha: 3.0,
                beta: 1.0,
            },
        )
        .unwrap(),
        7,
    )?;
    let single = toy_train(toy, SampleSpec::fixed(1), 7)?;
    let ev = build_ranking_eval_known_queries(
        &toy.heldout,
        &ranking_spec(16),
        &toy.train_authors,
        &mut ChaCha8Rng::seed_from_u64(70),
    )
    .map_err(|e| e.to_string())?;
    let prop = ranking_report(
        &ModelScorer {
            params: short,
            encoder: toy.encoder.clone(),
        },
        &ev,
    )
    .map_err(|e| e.to_string())?;
    let avg = ranking_report(
        &AvgSinglePostScorer {
            params: single,
            encoder: toy.encoder.clone(),
        },
        &ev,
    )
    .map_err(|e| e.to_string())?;
    check(
        prop.mrr > avg.mrr,
        format!(
            "size-16 MRR: trained on 1-8 {:.3} vs averaged single-post {:.3}",
            prop.mrr, avg.mrr
        ),
    )
}

// ---------------------------------------------------------------- 8

fn toy_linking_spec(target_size: usize, start: i64) -> LinkingEvalSpec {
    LinkingEvalSpec {
        subreddit: SHARED_SUBREDDIT.into(),
        num_distinguished: 100,
        query_size: 32,
        num_decoys: 400,
        target_size,
        query_window: TimeWindow::new(start + TRAIN_DAYS * DAY, start + 240 * DAY),
        target_window: TimeWindow::new(start + 240 * DAY, start + TOTAL_DAYS * DAY),
        min_query_history: 32,
        min_target_history: 16,
    }
}

fn target_size_trend(shared: &mut Shared) -> Outcome {
    let params = shared.full_model()?;
    let toy = &shared.toy;
    let scorer = ModelScorer {
        params,
        encoder: toy.encoder.clone(),
    };
    let sel = select_linking_accounts(
        &toy.heldout,
        &toy_linking_spec(1, toy.start),
        None,
        80,
        &mut ChaCha8Rng::seed_from_u64(80),
    )
    .map_err(|e| e.to_string())?;
    let mut eers = Vec::new();
    for size in [1, 2, 4, 8, 16] {
        let ev = build_linking_eval_from(&toy.heldout, &toy_linking_spec(size, toy.start), &sel)
            .map_err(|e| e.to_string())?;
        let trials = score_all(&scorer, &ev.queries, &ev.targets).map_err(|e| e.to_string())?;
        eers.push(eer(&trials).map_err(|e| e.to_string())?);
    }
    let ok = eers.windows(2).all(|w| w[1] <= w[0] + 0.02);
    let shown: Vec<String> = [1, 2, 4, 8, 16]
        .iter()
        .zip(&eers)
        .map(|(s, e)| format!("{s}:{e:.3}"))
        .collect();
    check(ok, format!("EER by target size {}", shown.join(" ")))
}

// ---------------------------------------------------------------- 9

fn linking_counts(shared: &mut Shared) -> Outcome {
    let toy = &shared.toy;
    let tfidf = fit_tfidf(
        toy.train
            .iter()
            .flat_map(|s| &s.actions)
            .map(|a| a.text.as_str()),
    )
    .map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for (d, decoys, size) in [(1, 1, 1), (5, 45, 4), (100, 400, 16), (37, 113, 2)] {
        let mut spec = toy_linking_spec(size, toy.start);
        spec.num_distinguished = d;
        spec.num_decoys = decoys;
        let ev = build_linking_eval(&toy.heldout, &spec, 9, &mut ChaCha8Rng::seed_from_u64(9))
            .map_err(|e| e.to_string())?;
        let trials = score_all(&tfidf, &ev.queries, &ev.targets).map_err(|e| e.to_string())?;
        let expected = ev.queries.len() * ev.targets.len();
        ok &= trials.len() == expected && expected == d * (d + decoys) && trials.positives() == d;
        parts.push(format!(
            "{}x{}={} trials/{} positives",
            ev.queries.len(),
            ev.targets.len(),
            trials.len(),
            trials.positives()
        ));
    }
    check(ok, parts.join(", "))
}

// ---------------------------------------------------------------- 10

fn parameter_counts() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (f, reference) in [
        (Features::T, 44.0e6),
        (Features::TP, 44.1e6),
        (Features::TPS, 45.5e6),
    ] {
        let n = param_count(&ModelConfig::full(f)) as f64;
        let rel = (n - reference) / reference;
        ok &= rel.abs() <= 0.15;
        parts.push(format!("{f} {:.2}M ({:+.1}%)", n / 1e6, rel * 100.0));
    }
    check(ok, parts.join(", "))
}

// ---------------------------------------------------------------- 11

fn determinism() -> Outcome {
    use authorlink::train::{run_training, TrainConfig, REPORT_FILE};
    use std::path::Path;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let corpus = generate(&SyntheticSpec {
        num_authors: 30,
        min_posts: 40,
        max_posts: 60,
        ..Default::default()
    })
    .unwrap();
    authorlink::corpus::write_posts(&corpus[..20], root.join("train.jsonl"))
        .map_err(|e| e.to_string())?;
    authorlink::corpus::write_posts(&corpus[20..], root.join("valid.jsonl"))
        .map_err(|e| e.to_string())?;
    let texts: Vec<&str> = corpus
        .iter()
        .flat_map(|s| &s.actions)
        .map(|a| a.text.as_str())
        .collect();
    let tok = Tokenizer::train_subword(texts, 300).map_err(|e| e.to_string())?;
    tok.save(root.join("tok")).map_err(|e| e.to_string())?;
    let mut model = ModelConfig::tiny(Features::TPS);
    model.vocab_size = tok.vocab_size();
    model.seq_len = 12;
    model.subreddit_vocab_size = 65;
    let config = TrainConfig {
        corpus: root.join("train.jsonl"),
        validation_corpus: Some(root.join("valid.jsonl")),
        validation: Some(RankingEvalSpec {
            num_queries: 5,
            num_targets: 10,
            episode_size: 8,
            eval_window: TimeWindow::all(),
        }),
        tokenizer: root.join("tok"),
        checkpoint_dir: root.join("run"),
        model,
        sample: SampleSpec::new(
            1,
            8,
            SizeDistribution::Beta {
                alpha: 3.0,
                beta: 1.0,
            },
        )
        .unwrap(),
        batch: BatchSpec {
            authors_per_batch: 4,
            samples_per_author: 3,
        },
        objective: authorlink::objectives::LossConfig::Triplet(TripletConfig { margin: 0.2 }),
        optimizer: OptimizerConfig::default(),
        max_steps: 20,
        validation_every: 10,
        checkpoint_every: 10,
        seed: 11,
    };
    fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let key = p.strip_prefix(dir).unwrap().to_string_lossy().to_string();
                    let mut bytes = std::fs::read(&p).unwrap();
                    if key == REPORT_FILE {
                        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                        v.as_object_mut().unwrap().remove("wall_clock_seconds");
                        bytes = serde_json::to_vec(&v).unwrap();
                    }
                    out.push((key, bytes));
                }
            }
        }
        out.sort();
        out
    }
    run_training(&config).map_err(|e| e.to_string())?;
    let first = snapshot(&config.checkpoint_dir);
    std::fs::remove_dir_all(&config.checkpoint_dir).map_err(|e| e.to_string())?;
    run_training(&config).map_err(|e| e.to_string())?;
    let second = snapshot(&config.checkpoint_dir);
    let files: Vec<&String> = first.iter().map(|(k, _)| k).collect();
    let differing: Vec<&String> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| &a.0)
        .collect();
    check(
        first.len() == second.len()
            && differing.is_empty()
            && files.iter().any(|f| f.ends_with("params.bin")),
        format!(
            "{} artifacts compared across two runs, differing: {:?}",
            files.len(),
            differing
        ),
    )
}

// ---------------------------------------------------------------- driver

enum Criterion {
    Plain(fn() -> Outcome),
    Toy(fn(&mut Shared) -> Outcome),
}

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(usize, &str, Criterion, Duration); 11] = [
        (
            1,
            "size-distribution fidelity",
            Criterion::Plain(size_distribution_fidelity),
            Duration::from_secs(30),
        ),
        (
            2,
            "metric oracle equivalence",
            Criterion::Plain(metric_oracle_equivalence),
            Duration::from_secs(60),
        ),
        (
            3,
            "DCF spot values",
            Criterion::Plain(dcf_spot_values),
            Duration::from_secs(60),
        ),
        (
            4,
            "gradient correctness",
            Criterion::Plain(gradient_correctness),
            Duration::from_secs(300),
        ),
        (
            5,
            "aggregation invariances",
            Criterion::Plain(aggregation_invariances),
            Duration::from_secs(60),
        ),
        (
            6,
            "toy end-to-end separability",
            Criterion::Toy(toy_separability),
            Duration::from_secs(600),
        ),
        (
            7,
            "variable-size generalization",
            Criterion::Toy(variable_size_generalization),
            Duration::from_secs(1200),
        ),
        (
            8,
            "target-size trend",
            Criterion::Toy(target_size_trend),
            Duration::from_secs(600),
        ),
        (
            9,
            "linking protocol counts",
            Criterion::Toy(linking_counts),
            Duration::from_secs(600),
        ),
        (
            10,
            "parameter-count sanity",
            Criterion::Plain(parameter_counts),
            Duration::from_secs(60),
        ),
        (
            11,
            "determinism",
            Criterion::Plain(determinism),
            Duration::from_secs(600),
        ),
    ];
    let mut shared: Option<Shared> = None;
    let mut failed = 0;
    for (n, name, run, budget) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = match run {
            Criterion::Plain(f) => f(),
            Criterion::Toy(f) => {
                let s = shared.get_or_insert_with(|| Shared {
                    toy: toy(),
                    full_model: None,
                });
                f(s)
            }
        };
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > budget => Err(format!("{d}; exceeded time budget {budget:?}")),
            o => o,
        };
        match outcome {
            Ok(detail) => println!(
                "criterion {n:>2} PASS {name}: {detail} [{:.1}s]",
                elapsed.as_secs_f64()
            ),
            Err(detail) => {
                failed += 1;
                println!(
                    "criterion {n:>2} FAIL {name}: {detail} [{:.1}s]",
                    elapsed.as_secs_f64()
                );
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
