//! Variable-sized contiguous samples of document streams and training batches.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcodec::EncodedAction;

/// Distribution of sample sizes. `Uniform` and `Beta` describe the unit
/// variable `x` mapped to a size by [`SampleSpec::size_from_unit`];
/// `TruncatedPoisson` draws sizes directly on `{R, ..., S}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SizeDistribution {
    Uniform,
    Beta { alpha: f64, beta: f64 },
    TruncatedPoisson { lambda: f64 },
}

impl SizeDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SizeDistribution::Uniform => Ok(()),
            SizeDistribution::Beta { alpha, beta } if alpha > 0.0 && beta > 0.0 => Ok(()),
            SizeDistribution::TruncatedPoisson { lambda } if lambda > 0.0 => Ok(()),
            other => Err(Error::Config(format!(
                "invalid size distribution {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    #[serde(rename = "R")]
    pub min_size: usize,
    #[serde(rename = "S")]
    pub max_size: usize,
    pub dist: SizeDistribution,
}

impl SampleSpec {
    pub fn new(min_size: usize, max_size: usize, dist: SizeDistribution) -> Result<Self> {
        let spec = Self {
            min_size,
            max_size,
            dist,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Fixed-size samples.
    pub fn fixed(size: usize) -> Self {
        Self {
            min_size: size,
            max_size: size,
            dist: SizeDistribution::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Config(format!(
                "sample sizes need 1 <= R <= S, got R={} S={}",
                self.min_size, self.max_size
            )));
        }
        self.dist.validate()
    }

    /// `R + ceil(x (S - R))`.
    pub fn size_from_unit(&self, x: f64) -> usize {
        let span = (self.max_size - self.min_size) as f64;
        let step = (x * span).ceil().clamp(0.0, span) as usize;
        self.min_size + step
    }

    pub fn draw_size<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.dist {
            SizeDistribution::Uniform => self.size_from_unit(rng.random::<f64>()),
            SizeDistribution::Beta { alpha, beta } => {
                let x = Beta::new(alpha, beta)
                    .expect("validated parameters")
                    .sample(rng);
                self.size_from_unit(x)
            }
            SizeDistribution::TruncatedPoisson { lambda } => {
                let pois = Poisson::new(lambda).expect("validated parameters");
                loop {
                    let k = pois.sample(rng) as usize;
                    if (self.min_size..=self.max_size).contains(&k) {
                        return k;
                    }
                }
            }
        }
    }
}

/// Skewness of the size distribution.
///
/// Uniform and Beta use the closed form on the unit variable. The truncated
/// Poisson is summed exactly over its finite support `{1, ..., max_size}`.
pub fn skewness(dist: &SizeDistribution, max_size: usize) -> f64 {
    match *dist {
        SizeDistribution::Uniform => 0.0,
        SizeDistribution::Beta { alpha: a, beta: b } => {
            2.0 * (b - a) * (a + b + 1.0).sqrt() / ((a + b + 2.0) * (a * b).sqrt())
        }
        SizeDistribution::TruncatedPoisson { lambda } => {
            // log pmf up to a constant, normalized below
            let support: Vec<f64> = (1..=max_size).map(|k| k as f64).collect();
            let logw: Vec<f64> = support
                .iter()
                .scan(0.0f64, |acc, &k| {
                    *acc += lambda.ln() - k.ln();
                    Some(*acc)
                })
                .collect();
            let hi = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - hi).exp()).collect();
            let z: f64 = w.iter().sum();
            let mean: f64 = support.iter().zip(&w).map(|(k, p)| k * p).sum::<f64>() / z;
            let moment = |r: i32| {
                support
                    .iter()
                    .zip(&w)
                    .map(|(k, p)| (k - mean).powi(r) * p)
                    .sum::<f64>()
                    / z
            };
            moment(3) / moment(2).powf(1.5)
        }
    }
}

/// Sample skewness (population moments) of `xs`.
pub fn sample_skewness(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (m2, m3) = xs.iter().fold((0.0, 0.0), |(m2, m3), x| {
        let d = x - mean;
        (m2 + d * d, m3 + d * d * d)
    });
    (m3 / n) / (m2 / n).powf(1.5)
}

/// Monte Carlo skewness of the drawn sizes from `draws` samples.
pub fn empirical_skewness<R: Rng + ?Sized>(spec: &SampleSpec, draws: usize, rng: &mut R) -> f64 {
    let xs: Vec<f64> = (0..draws).map(|_| spec.draw_size(rng) as f64).collect();
    sample_skewness(&xs)
}

/// An author's encoded actions in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedStream {
    pub author_id: String,
    pub actions: Vec<EncodedAction>,
}

/// A contiguous sample of encoded actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub author_id: String,
    pub window_start: usize,
    pub actions: Vec<EncodedAction>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Uniformly placed window of `size` actions; `size` is clamped to the stream length.
pub fn draw_window<R: Rng + ?Sized>(
    stream: &EncodedStream,
    size: usize,
    rng: &mut R,
) -> Result<Episode> {
    let len = stream.actions.len();
    if len == 0 {
        return Err(Error::Data(format!(
            "cannot sample from empty stream of {}",
            stream.author_id
        )));
    }
    let size = size.clamp(1, len);
    let start = rng.random_range(0..=len - size);
    Ok(window(stream, start, size))
}

fn window(stream: &EncodedStream, start: usize, size: usize) -> Episode {
    Episode {
        author_id: stream.author_id.clone(),
        window_start: start,
        actions: stream.actions[start..start + size].to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub authors_per_batch: usize,
    #[serde(rename = "n_plus")]
    pub samples_per_author: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub episodes: Vec<Episode>,
    /// Index of the episode's author within the batch.
    pub labels: Vec<usize>,
}

/// `authors_per_batch` distinct authors, `samples_per_author` episodes each.
///
/// Windows of one author get pairwise distinct start positions whenever the
/// stream has enough valid starts.
pub fn build_batch<R: Rng + ?Sized>(
    streams: &[EncodedStream],
    batch: &BatchSpec,
    sample: &SampleSpec,
    rng: &mut R,
) -> Result<Batch> {
    let usable: Vec<usize> = (0..streams.len())
        .filter(|&i| !streams[i].actions.is_empty())
        .collect();
    if usable.len() < batch.authors_per_batch {
        return Err(Error::Data(format!(
            "batch needs {} authors, only {} non-empty streams available",
            batch.authors_per_batch,
            usable.len()
        )));
    }
    let chosen = index::sample(rng, usable.len(), batch.authors_per_batch);
    let mut episodes = Vec::with_capacity(batch.authors_per_batch * batch.samples_per_author);
    let mut labels = Vec::with_capacity(episodes.capacity());
    for (label, pick) in chosen.iter().enumerate() {
        let stream = &streams[usable[pick]];
        let len = stream.actions.len();
        let mut used: Vec<usize> = Vec::with_capacity(batch.samples_per_author);
        for _ in 0..batch.samples_per_author {
            let size = sample.draw_size(rng).clamp(1, len);
            let starts = len - size + 1;
            let free: Vec<usize> = (0..starts).filter(|s| !used.contains(s)).collect();
            let start = if free.is_empty() {
                rng.random_range(0..starts)
            } else {
                free[rng.random_range(0..free.len())]
            };
            used.push(start);
            episodes.push(window(stream, start, size));
            labels.push(label);
        }
    }
    Ok(Batch { episodes, labels })
}
