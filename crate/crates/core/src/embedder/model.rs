//! Forward and reverse-mode passes of the sample embedding.
//!
//! Per action: token embeddings, one convolution per width over token
//! positions, max-pooling over the real (non-pad) positions, then the
//! subreddit embedding and one-hot hour appended. The action vectors of a
//! sample go through single-head scaled dot-product self-attention, are
//! max-pooled over actions and pass two affine layers.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use super::params::{Parameters, Scalar};
use crate::error::{Error, Result};
use crate::textcodec::{EncodedAction, HOURS_PER_DAY};

const NONE: usize = usize::MAX;

/// Fixed number of gradient shards so summation order never depends on the
/// thread count.
const GRAD_SHARDS: usize = 4;

pub(crate) struct Cache<F> {
    /// Real token count per action.
    n_tokens: Vec<usize>,
    /// Per width: argmax position per (action, filter), `NONE` when empty.
    conv_arg: Vec<Vec<usize>>,
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: Array2<F>,
    pool_arg: Vec<usize>,
    z: Array1<F>,
    pre1: Array1<F>,
    h: Array1<F>,
    norm: F,
    out: Array1<F>,
}

impl<F: Scalar> Parameters<F> {
    fn check_episode(&self, actions: &[EncodedAction]) -> Result<()> {
        let cfg = self.config();
        if actions.is_empty() {
            return Err(Error::Data("cannot embed an empty sample".into()));
        }
        for a in actions {
            if a.tokens.len() != cfg.seq_len {
                return Err(Error::Data(format!(
                    "action has {} tokens, model expects {}",
                    a.tokens.len(),
                    cfg.seq_len
                )));
            }
            if let Some(t) = a.tokens.iter().find(|&&t| t > cfg.pad_id()) {
                return Err(Error::Data(format!(
                    "token id {t} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            if cfg.features.subreddit && a.subreddit as usize >= cfg.subreddit_vocab_size {
                return Err(Error::Data(format!(
                    "subreddit id {} outside vocabulary of {}",
                    a.subreddit, cfg.subreddit_vocab_size
                )));
            }
            if a.hour as usize >= HOURS_PER_DAY {
                return Err(Error::Data(format!("hour {} out of range", a.hour)));
            }
        }
        Ok(())
    }

    /// Embeds one sample.
    pub fn embed_sample(&self, actions: &[EncodedAction]) -> Result<Array1<F>> {
        self.check_episode(actions)?;
        Ok(self.forward(actions, actions.len()).out)
    }

    /// Embeds samples of possibly different sizes; each is padded to the
    /// largest size with masked slots.
    pub fn embed_batch<A: AsRef<[EncodedAction]> + Sync>(
        &self,
        samples: &[A],
    ) -> Result<Array2<F>> {
        if samples.is_empty() {
            return Err(Error::Data("cannot embed an empty batch".into()));
        }
        let slots = samples.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        for s in samples {
            self.check_episode(s.as_ref())?;
        }
        let rows: Vec<Array1<F>> = samples
            .par_iter()
            .map(|s| self.forward(s.as_ref(), slots).out)
            .collect();
        Ok(stack_rows(&rows, self.config().output_dim))
    }

    /// Loss value and gradients with respect to every parameter.
    ///
    /// `loss` maps the `B x D` embedding matrix to a scalar and its gradient
    /// with respect to that matrix.
    pub fn gradient<A, L>(&self, samples: &[A], loss: L) -> Result<(F, Parameters<F>)>
    where
        A: AsRef<[EncodedAction]> + Sync,
        L: FnOnce(&Array2<F>) -> Result<(F, Array2<F>)>,
    {
        if samples.is_empty() {
            return Err(Error::Data("cannot differentiate an empty batch".into()));
        }
        for s in samples {
            self.check_episode(s.as_ref())?;
        }
        let caches: Vec<Cache<F>> = samples
            .par_iter()
            .map(|s| self.forward(s.as_ref(), s.as_ref().len()))
            .collect();
        let outs: Vec<Array1<F>> = caches.iter().map(|c| c.out.clone()).collect();
        let emb = stack_rows(&outs, self.config().output_dim);
        let (value, d_emb) = loss(&emb)?;
        if !value.is_finite() || d_emb.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss {value:?}")));
        }
        let shard = caches.len().div_ceil(GRAD_SHARDS);
        let partial: Vec<Parameters<F>> = (0..GRAD_SHARDS)
            .into_par_iter()
            .map(|s| {
                let mut g = self.zeros_like();
                let lo = (s * shard).min(caches.len());
                let hi = ((s + 1) * shard).min(caches.len());
                for i in lo..hi {
                    self.backward(samples[i].as_ref(), &caches[i], d_emb.row(i), &mut g);
                }
                g
            })
            .collect();
        let mut grads = self.zeros_like();
        for g in &partial {
            grads.add_assign(g);
        }
        Ok((value, grads))
    }

    /// Embeddings of the first `actions.len()` slots of a `slots`-wide sample.
    pub(crate) fn forward(&self, actions: &[EncodedAction], slots: usize) -> Cache<F> {
        let cfg = self.config();
        let sl = self.slots();
        let (n_dim, f_dim, ell) = (cfg.token_dim, cfg.filters_per_width, cfg.seq_len);
        let m = actions.len();
        let pad = cfg.pad_id();
        let n_tokens: Vec<usize> = actions
            .iter()
            .map(|a| a.tokens.iter().position(|&t| t == pad).unwrap_or(ell))
            .collect();
        let offsets: Vec<usize> = n_tokens
            .iter()
            .scan(0, |acc, &n| {
                let o = *acc;
                *acc += n;
                Some(o)
            })
            .collect();
        let total_rows: usize = n_tokens.iter().sum();
        let table = self.mat(sl.token);

        let mut x = Array2::<F>::zeros((slots, cfg.action_dim()));
        let mut conv_arg = Vec::with_capacity(cfg.conv_widths.len());
        for (wi, (&w, &(kernel, bias))) in cfg.conv_widths.iter().zip(&sl.conv).enumerate() {
            let mut u = Array2::<F>::zeros((total_rows, w * n_dim));
            for (i, a) in actions.iter().enumerate() {
                for p in 0..n_tokens[i] {
                    let mut row = u.row_mut(offsets[i] + p);
                    for o in 0..w.min(n_tokens[i] - p) {
                        row.slice_mut(s![o * n_dim..(o + 1) * n_dim])
                            .assign(&table.row(a.tokens[p + o] as usize));
                    }
                }
            }
            let c = u.dot(&self.mat(kernel)) + self.vec(bias);
            let mut arg = vec![NONE; m * f_dim];
            for i in 0..m {
                for f in 0..f_dim {
                    let mut best = F::neg_infinity();
                    for p in 0..n_tokens[i] {
                        let v = c[[offsets[i] + p, f]];
                        if v > best {
                            best = v;
                            arg[i * f_dim + f] = p;
                        }
                    }
                    // no real tokens: the text feature stays zero
                    if arg[i * f_dim + f] != NONE {
                        x[[i, wi * f_dim + f]] = best;
                    }
                }
            }
            conv_arg.push(arg);
        }
        let mut col = cfg.text_dim();
        if let Some(sub) = sl.subreddit {
            let t = self.mat(sub);
            for (i, a) in actions.iter().enumerate() {
                x.slice_mut(s![i, col..col + cfg.subreddit_dim])
                    .assign(&t.row(a.subreddit as usize));
            }
            col += cfg.subreddit_dim;
        }
        if cfg.features.time {
            for (i, a) in actions.iter().enumerate() {
                x[[i, col + a.hour as usize]] = F::one();
            }
        }

        let q = x.dot(&self.mat(sl.query));
        let k = x.dot(&self.mat(sl.key));
        let v = x.dot(&self.mat(sl.value));
        let scale = F::one() / F::of(cfg.attention_dim as f64).sqrt();
        let scores = q.dot(&k.t());
        let mut attn = Array2::<F>::zeros((slots, slots));
        for i in 0..m {
            let row = scores.slice(s![i, ..m]);
            let hi = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b * scale));
            let mut z = F::zero();
            for j in 0..m {
                let e = (row[j] * scale - hi).exp();
                attn[[i, j]] = e;
                z += e;
            }
            for j in 0..m {
                attn[[i, j]] = attn[[i, j]] / z;
            }
        }
        let o = attn.dot(&v);
        let a_dim = cfg.attention_dim;
        let mut z = Array1::<F>::zeros(a_dim);
        let mut pool_arg = vec![0usize; a_dim];
        for a in 0..a_dim {
            let mut best = o[[0, a]];
            for i in 1..m {
                if o[[i, a]] > best {
                    best = o[[i, a]];
                    pool_arg[a] = i;
                }
            }
            z[a] = best;
        }

        let pre1 = z.dot(&self.mat(sl.fc1_weight)) + self.vec(sl.fc1_bias);
        let h = pre1.mapv(|t| t.max(F::zero()));
        let y = h.dot(&self.mat(sl.fc2_weight)) + self.vec(sl.fc2_bias);
        let (norm, out) = if cfg.normalize_output {
            let n = y.dot(&y).sqrt().max(F::min_positive_value());
            (n, &y / n)
        } else {
            (F::one(), y)
        };
        Cache {
            n_tokens,
            conv_arg,
            x,
            q,
            k,
            v,
            attn,
            pool_arg,
            z,
            pre1,
            h,
            norm,
            out,
        }
    }

    pub(crate) fn backward(
        &self,
        actions: &[EncodedAction],
        c: &Cache<F>,
        d_out: ArrayView1<F>,
        g: &mut Parameters<F>,
    ) {
        let cfg = self.config();
        let sl = self.slots().clone();
        let m = actions.len();

        let dy = if cfg.normalize_output {
            let proj = c.out.dot(&d_out);
            (&d_out - &(&c.out * proj)) / c.norm
        } else {
            d_out.to_owned()
        };
        g.vec_mut(sl.fc2_bias).zip_mut_with(&dy, |a, &b| *a += b);
        outer_add(&mut g.mat_mut(sl.fc2_weight), c.h.view(), dy.view());
        let dh = self.mat(sl.fc2_weight).dot(&dy);
        let dpre1 = ndarray::Zip::from(&dh).and(&c.pre1).map_collect(|&d, &p| {
            if p > F::zero() {
                d
            } else {
                F::zero()
            }
        });
        g.vec_mut(sl.fc1_bias).zip_mut_with(&dpre1, |a, &b| *a += b);
        outer_add(&mut g.mat_mut(sl.fc1_weight), c.z.view(), dpre1.view());
        let dz = self.mat(sl.fc1_weight).dot(&dpre1);

        let mut d_o = Array2::<F>::zeros((m, cfg.attention_dim));
        for (a, &i) in c.pool_arg.iter().enumerate() {
            d_o[[i, a]] = dz[a];
        }
        let attn = c.attn.slice(s![..m, ..m]);
        let (q, k, v) = (
            c.q.slice(s![..m, ..]),
            c.k.slice(s![..m, ..]),
            c.v.slice(s![..m, ..]),
        );
        let x = c.x.slice(s![..m, ..]);
        let dv = attn.t().dot(&d_o);
        let dp = d_o.dot(&v.t());
        let scale = F::one() / F::of(cfg.attention_dim as f64).sqrt();
        let mut ds = Array2::<F>::zeros((m, m));
        for i in 0..m {
            let dot: F = (0..m).map(|j| attn[[i, j]] * dp[[i, j]]).sum();
            for j in 0..m {
                ds[[i, j]] = attn[[i, j]] * (dp[[i, j]] - dot) * scale;
            }
        }
        let dq = ds.dot(&k);
        let dk = ds.t().dot(&q);
        g.mat_mut(sl.query).scaled_add(F::one(), &x.t().dot(&dq));
        g.mat_mut(sl.key).scaled_add(F::one(), &x.t().dot(&dk));
        g.mat_mut(sl.value).scaled_add(F::one(), &x.t().dot(&dv));
        let dx = dq.dot(&self.mat(sl.query).t())
            + dk.dot(&self.mat(sl.key).t())
            + dv.dot(&self.mat(sl.value).t());

        if let Some(sub) = sl.subreddit {
            let col = cfg.text_dim();
            let mut table = g.mat_mut(sub);
            for (i, a) in actions.iter().enumerate() {
                let mut row = table.row_mut(a.subreddit as usize);
                row += &dx.slice(s![i, col..col + cfg.subreddit_dim]);
            }
        }

        let (n_dim, f_dim) = (cfg.token_dim, cfg.filters_per_width);
        let emb = self.mat(sl.token);
        for (wi, (&w, &(kernel_idx, bias_idx))) in cfg.conv_widths.iter().zip(&sl.conv).enumerate()
        {
            let kernel = self.mat(kernel_idx);
            let mut d_bias = Array1::<F>::zeros(f_dim);
            let mut d_kernel = Array2::<F>::zeros((w * n_dim, f_dim));
            for (i, a) in actions.iter().enumerate() {
                for f in 0..f_dim {
                    let p = c.conv_arg[wi][i * f_dim + f];
                    if p == NONE {
                        continue;
                    }
                    let gv = dx[[i, wi * f_dim + f]];
                    if gv == F::zero() {
                        continue;
                    }
                    d_bias[f] += gv;
                    let mut d_table = g.mat_mut(sl.token);
                    for o in 0..w.min(c.n_tokens[i] - p) {
                        let tok = a.tokens[p + o] as usize;
                        let e = emb.row(tok);
                        for j in 0..n_dim {
                            d_kernel[[o * n_dim + j, f]] += gv * e[j];
                            d_table[[tok, j]] += gv * kernel[[o * n_dim + j, f]];
                        }
                    }
                }
            }
            g.vec_mut(bias_idx).zip_mut_with(&d_bias, |a, &b| *a += b);
            g.mat_mut(kernel_idx)
                .zip_mut_with(&d_kernel, |a, &b| *a += b);
        }
    }
}

fn outer_add<F: Scalar>(
    target: &mut ndarray::ArrayViewMut2<F>,
    a: ArrayView1<F>,
    b: ArrayView1<F>,
) {
    for (i, mut row) in target.axis_iter_mut(Axis(0)).enumerate() {
        let ai = a[i];
        if ai != F::zero() {
            row.scaled_add(ai, &b);
        }
    }
}

fn stack_rows<F: Scalar>(rows: &[Array1<F>], dim: usize) -> Array2<F> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}
