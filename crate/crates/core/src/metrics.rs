//! Ranking metrics (MRR, R@k) and detection metrics (ROC, EER, DCF) over
//! scored trials. Lower scores mean "more likely the same author".

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub query_id: String,
    pub target_id: String,
    pub score: f64,
    pub label: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn new(trials: Vec<Trial>) -> Self {
        Self { trials }
    }

    /// Builds anonymous trials from parallel score and label slices.
    pub fn from_scores(scores: &[f64], labels: &[bool]) -> Self {
        let trials = scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&score, &label))| Trial {
                query_id: format!("q{i}"),
                target_id: format!("t{i}"),
                score,
                label,
            })
            .collect();
        Self { trials }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.trials.iter().filter(|t| t.label).count()
    }

    fn check(&self) -> Result<(usize, usize)> {
        if let Some(t) = self.trials.iter().find(|t| !t.score.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite score for trial {} / {}",
                t.query_id, t.target_id
            )));
        }
        let pos = self.positives();
        let neg = self.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::Data(format!(
                "detection metrics need positive and negative trials, got {pos} and {neg}"
            )));
        }
        Ok((pos, neg))
    }

    /// One trial per line: `query_id<TAB>target_id<TAB>score<TAB>label`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.trials {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                t.query_id,
                t.target_id,
                t.score,
                u8::from(t.label)
            )?;
        }
        Ok(())
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_tsv(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv<R: BufRead>(reader: R, origin: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                path: origin.into(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [q, t, s, l] = fields[..] else {
                return Err(bad(format!(
                    "expected 4 tab-separated fields, got {}",
                    fields.len()
                )));
            };
            let score: f64 = s.parse().map_err(|_| bad(format!("invalid score {s:?}")))?;
            let label = match l {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("invalid label {other:?}"))),
            };
            trials.push(Trial {
                query_id: q.to_string(),
                target_id: t.to_string(),
                score,
                label,
            });
        }
        Ok(Self { trials })
    }
}

/// Detection cost settings: target prior, miss cost and false-alarm cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionCostParams {
    pub prior: f64,
    pub miss_cost: f64,
    pub false_alarm_cost: f64,
    pub normalized: bool,
}

impl Default for DetectionCostParams {
    fn default() -> Self {
        Self {
            prior: 0.05,
            miss_cost: 1.0,
            false_alarm_cost: 2.0,
            normalized: true,
        }
    }
}

impl DetectionCostParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0;
        if !(positive(self.prior) && self.prior < 1.0)
            || !positive(self.miss_cost)
            || !positive(self.false_alarm_cost)
        {
            return Err(Error::Config(format!(
                "invalid detection cost parameters {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// A trial is accepted as a match when its score is strictly below this.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "threshold,fpr,tpr")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        Ok(())
    }
}

/// Position of the true target when targets are sorted by distance to the
/// query. Equal distances count against the true target when they belong to
/// a target with a smaller index.
pub fn rank_of_true_target(
    query: ArrayView1<f64>,
    targets: ArrayView2<f64>,
    true_index: usize,
) -> usize {
    let d: Vec<f64> = targets
        .rows()
        .into_iter()
        .map(|t| {
            t.iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    rank_from_scores(&d, true_index)
}

/// Same tie rule as [`rank_of_true_target`] over precomputed scores.
pub fn rank_from_scores(scores: &[f64], true_index: usize) -> usize {
    let s = scores[true_index];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x < s || (x == s && j < true_index))
        .count()
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Data("MRR of an empty rank list".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Data("ranks start at 1".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Data("recall of an empty rank list".into()));
    }
    if k == 0 {
        return Err(Error::Config("recall@k needs k >= 1".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Operating points for thresholds at every distinct score and at +inf,
/// starting from (0, 0) and ending at (1, 1).
pub fn roc_points(trials: &TrialSet) -> Result<RocCurve> {
    let (pos, neg) = trials.check()?;
    let mut sorted: Vec<(f64, bool)> = trials.trials.iter().map(|t| (t.score, t.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    Ok(RocCurve { points })
}

/// Rate at which miss and false-alarm rates are equal, interpolating
/// linearly between adjacent operating points.
pub fn eer(trials: &TrialSet) -> Result<f64> {
    Ok(eer_from_curve(&roc_points(trials)?))
}

pub fn eer_from_curve(curve: &RocCurve) -> f64 {
    let rates: Vec<(f64, f64)> = curve.points.iter().map(|p| (1.0 - p.tpr, p.fpr)).collect();
    eer_from_rates(&rates)
}

/// `rates` are (miss, false alarm) pairs along a sweep from all-reject to
/// all-accept.
fn eer_from_rates(rates: &[(f64, f64)]) -> f64 {
    let mut prev = rates[0];
    for &(miss, fa) in rates {
        let delta = miss - fa;
        if delta == 0.0 {
            return fa;
        }
        if delta < 0.0 {
            let d0 = prev.0 - prev.1;
            let t = d0 / (d0 - delta);
            return prev.1 + t * (fa - prev.1);
        }
        prev = (miss, fa);
    }
    prev.1
}

pub fn dcf(p_miss: f64, p_fa: f64, params: &DetectionCostParams) -> f64 {
    let pm = params.prior * params.miss_cost;
    let pf = (1.0 - params.prior) * params.false_alarm_cost;
    let raw = pm * p_miss + pf * p_fa;
    if params.normalized {
        raw / pm.min(pf)
    } else {
        raw
    }
}

/// Minimum detection cost over the full threshold sweep, including the
/// all-reject and all-accept systems.
pub fn min_dcf(trials: &TrialSet, params: &DetectionCostParams) -> Result<f64> {
    params.validate()?;
    Ok(min_dcf_from_curve(&roc_points(trials)?, params))
}

pub fn min_dcf_from_curve(curve: &RocCurve, params: &DetectionCostParams) -> f64 {
    curve
        .points
        .iter()
        .map(|p| dcf(1.0 - p.tpr, p.fpr, params))
        .fold(f64::INFINITY, f64::min)
}

/// Detection summary of one trial set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub trials: usize,
    pub positives: usize,
    /// Fraction of positive trials, for comparison with the cost prior.
    pub empirical_prior: f64,
    pub eer: f64,
    pub min_dcf: f64,
    pub params: DetectionCostParams,
}

pub fn detection_report(
    trials: &TrialSet,
    params: &DetectionCostParams,
) -> Result<(DetectionReport, RocCurve)> {
    params.validate()?;
    let curve = roc_points(trials)?;
    let report = DetectionReport {
        trials: trials.len(),
        positives: trials.positives(),
        empirical_prior: trials.positives() as f64 / trials.len() as f64,
        eer: eer_from_curve(&curve),
        min_dcf: min_dcf_from_curve(&curve, params),
        params: *params,
    };
    Ok((report, curve))
}
