use std::fmt::Debug;
use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::Result;

/// Floating-point element type of parameters and activations.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Slots {
    pub token: usize,
    pub conv: Vec<(usize, usize)>,
    pub subreddit: Option<usize>,
    pub query: usize,
    pub key: usize,
    pub value: usize,
    pub fc1_weight: usize,
    pub fc1_bias: usize,
    pub fc2_weight: usize,
    pub fc2_bias: usize,
}

/// Names, shapes and offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    total: usize,
    pub(crate) slots: Slots,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs: Vec<TensorSpec> = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec {
                name,
                shape,
                offset: total,
            };
            total += spec.len();
            specs.push(spec);
            specs.len() - 1
        };
        let n = cfg.token_dim;
        let f = cfg.filters_per_width;
        let token = push("token_embedding".into(), vec![cfg.vocab_size, n]);
        let conv = cfg
            .conv_widths
            .iter()
            .map(|w| {
                (
                    push(format!("conv{w}.kernel"), vec![w * n, f]),
                    push(format!("conv{w}.bias"), vec![f]),
                )
            })
            .collect();
        let subreddit = cfg.features.subreddit.then(|| {
            push(
                "subreddit_embedding".into(),
                vec![cfg.subreddit_vocab_size, cfg.subreddit_dim],
            )
        });
        let (d, a) = (cfg.action_dim(), cfg.attention_dim);
        let query = push("attention.query".into(), vec![d, a]);
        let key = push("attention.key".into(), vec![d, a]);
        let value = push("attention.value".into(), vec![d, a]);
        let fc1_weight = push("fc1.weight".into(), vec![a, cfg.hidden_dim]);
        let fc1_bias = push("fc1.bias".into(), vec![cfg.hidden_dim]);
        let fc2_weight = push("fc2.weight".into(), vec![cfg.hidden_dim, cfg.output_dim]);
        let fc2_bias = push("fc2.bias".into(), vec![cfg.output_dim]);
        Self {
            specs,
            total,
            slots: Slots {
                token,
                conv,
                subreddit,
                query,
                key,
                value,
                fc1_weight,
                fc1_bias,
                fc2_weight,
                fc2_bias,
            },
        }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Number of learnable scalars for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    Layout::new(cfg).total()
}

/// All learnable tensors stored in one flat vector. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    config: Arc<ModelConfig>,
    layout: Arc<Layout>,
    data: Vec<F>,
}

impl<F: Scalar> Parameters<F> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        Ok(Self {
            data: vec![F::zero(); layout.total()],
            config: Arc::new(config.clone()),
            layout: Arc::new(layout),
        })
    }

    /// Embedding tables uniform on [-1, 1]; dense weights Glorot-uniform;
    /// biases zero. Values are drawn in `f32` so that every precision sees
    /// the same initial point.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let slots = p.layout.slots.clone();
        let tables: Vec<usize> = std::iter::once(slots.token)
            .chain(slots.subreddit)
            .collect();
        for idx in 0..p.layout.specs.len() {
            let spec = p.layout.specs[idx].clone();
            let bound = if tables.contains(&idx) {
                1.0f32
            } else if spec.shape.len() == 2 {
                (6.0 / (spec.shape[0] + spec.shape[1]) as f32).sqrt()
            } else {
                continue;
            };
            for x in &mut p.data[spec.range()] {
                *x = F::of(rng.random_range(-bound..bound) as f64);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: vec![F::zero(); self.data.len()],
        }
    }

    pub fn from_vec(config: &ModelConfig, data: Vec<F>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if data.len() != p.data.len() {
            return Err(crate::Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        Parameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout
            .specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range()])
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&TensorSpec, &[F])> {
        self.layout.specs.iter().map(|s| (s, &self.data[s.range()]))
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.layout, other.layout);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn slots(&self) -> &Slots {
        &self.layout.slots
    }

    pub(crate) fn mat(&self, idx: usize) -> ArrayView2<'_, F> {
        let s = &self.layout.specs[idx];
        ArrayView2::from_shape((s.shape[0], s.shape[1]), &self.data[s.range()]).expect("layout")
    }

    pub(crate) fn vec(&self, idx: usize) -> ArrayView1<'_, F> {
        let s = &self.layout.specs[idx];
        ArrayView1::from(&self.data[s.range()])
    }

    pub(crate) fn mat_mut(&mut self, idx: usize) -> ArrayViewMut2<'_, F> {
        let s = &self.layout.specs[idx];
        let r = s.range();
        ArrayViewMut2::from_shape((s.shape[0], s.shape[1]), &mut self.data[r]).expect("layout")
    }

    pub(crate) fn vec_mut(&mut self, idx: usize) -> ArrayViewMut1<'_, F> {
        let r = self.layout.specs[idx].range();
        ArrayViewMut1::from(&mut self.data[r])
    }
}
