//! Forward/backward primitives. Each `forward` returns the output together
//! with the cache its `backward` needs; gradients accumulate into a
//! parameter-shaped container.

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Attention, LayerNorm, Linear};
use super::Real;

const LN_EPS: f64 = 1e-5;

/// Dropout source: `None` rng means evaluation mode.
pub(crate) struct Dropout {
    pub p: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub(crate) fn eval() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    /// Inverted-dropout mask, or `None` when dropout is inactive.
    pub(crate) fn mask<T: Real>(&mut self, rows: usize, cols: usize) -> Option<Array2<T>> {
        let p = self.p;
        let rng = self.rng.as_mut().filter(|_| p > 0.0)?;
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        }))
    }
}

fn apply_mask<T: Real>(x: &mut Array2<T>, mask: &Option<Array2<T>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

impl<T: Real> Linear<T> {
    pub(crate) fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub(crate) fn backward(&self, x: &Array2<T>, dy: &Array2<T>, g: &mut Linear<T>) -> Array2<T> {
        g.weight += &x.t().dot(dy);
        g.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

pub(crate) struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub(crate) fn forward(&self, x: &Array2<T>) -> (Array2<T>, LnCache<T>) {
        let n = T::from_usize(x.ncols()).unwrap();
        let eps = T::from_f64_lossy(LN_EPS);
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            *r = T::one() / (var + eps).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| v * rs);
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, LnCache { xhat, rstd })
    }

    pub(crate) fn backward(&self, cache: &LnCache<T>, dy: &Array2<T>, g: &mut LayerNorm<T>) -> Array2<T> {
        g.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        g.bias += &dy.sum_axis(Axis(0));
        let n = T::from_usize(dy.ncols()).unwrap();
        let mut dx = dy * &self.gain;
        for ((mut row, xh), &rs) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
            let mean_d = row.sum() / n;
            let mean_dx = row.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
            Zip::from(&mut row).and(&xh).for_each(|d, &h| {
                *d = rs * (*d - mean_d - h * mean_dx);
            });
        }
        dx
    }
}

/// Geometry and masking of one attention call.
pub(crate) struct AttnShape<'a> {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `true` marks a padded key, indexed `b * k_len + j`.
    pub key_pad: &'a [bool],
    pub causal: bool,
    pub n_heads: usize,
}

pub(crate) struct AttnCache<T> {
    q_in: Array2<T>,
    kv_in: Option<Array2<T>>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    masks: Vec<Option<Array2<T>>>,
    ctx: Array2<T>,
}

impl<T: Real> Attention<T> {
    /// Multi-head scaled dot-product attention. `kv_in == None` means self-attention.
    pub(crate) fn forward(
        &self,
        q_in: &Array2<T>,
        kv_in: Option<&Array2<T>>,
        shape: &AttnShape<'_>,
        dropout: &mut Dropout,
    ) -> (Array2<T>, AttnCache<T>) {
        let kv_src = kv_in.unwrap_or(q_in);
        let q = self.q.forward(q_in);
        let k = self.k.forward(kv_src);
        let v = self.v.forward(kv_src);
        let d = q.ncols();
        let dh = d / shape.n_heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (lq, lk) = (shape.q_len, shape.k_len);

        let mut ctx = Array2::zeros((shape.batch * lq, d));
        let mut probs = Vec::with_capacity(shape.batch * shape.n_heads);
        let mut masks = Vec::with_capacity(shape.batch * shape.n_heads);
        for b in 0..shape.batch {
            let pad = &shape.key_pad[b * lk..(b + 1) * lk];
            for h in 0..shape.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qb = q.slice(s![b * lq..(b + 1) * lq, cols.clone()]);
                let kb = k.slice(s![b * lk..(b + 1) * lk, cols.clone()]);
                let vb = v.slice(s![b * lk..(b + 1) * lk, cols.clone()]);
                let mut p = qb.dot(&kb.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    masked_softmax(&mut row, pad, shape.causal.then_some(i), scale);
                }
                let mask = dropout.mask::<T>(lq, lk);
                let mut pd = p.clone();
                apply_mask(&mut pd, &mask);
                ctx.slice_mut(s![b * lq..(b + 1) * lq, cols]).assign(&pd.dot(&vb));
                probs.push(p);
                masks.push(mask);
            }
        }
        let out = self.out.forward(&ctx);
        let cache = AttnCache {
            q_in: q_in.clone(),
            kv_in: kv_in.cloned(),
            q,
            k,
            v,
            probs,
            masks,
            ctx,
        };
        (out, cache)
    }

    /// Returns `(dL/dq_in, dL/dkv_in)`; for self-attention the second is `None`
    /// and its contribution is already folded into the first.
    pub(crate) fn backward(
        &self,
        cache: &AttnCache<T>,
        d_out: &Array2<T>,
        shape: &AttnShape<'_>,
        g: &mut Attention<T>,
    ) -> (Array2<T>, Option<Array2<T>>) {
        let d_ctx = self.out.backward(&cache.ctx, d_out, &mut g.out);
        let d = cache.q.ncols();
        let dh = d / shape.n_heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (lq, lk) = (shape.q_len, shape.k_len);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for b in 0..shape.batch {
            for h in 0..shape.n_heads {
                let idx = b * shape.n_heads + h;
                let cols = h * dh..(h + 1) * dh;
                let rq = b * lq..(b + 1) * lq;
                let rk = b * lk..(b + 1) * lk;
                let p = &cache.probs[idx];
                let mut pd = p.clone();
                apply_mask(&mut pd, &cache.masks[idx]);
                let dc = d_ctx.slice(s![rq.clone(), cols.clone()]);
                let vb = cache.v.slice(s![rk.clone(), cols.clone()]);
                dv.slice_mut(s![rk.clone(), cols.clone()]).assign(&pd.t().dot(&dc));
                let mut dp = dc.dot(&vb.t());
                apply_mask(&mut dp, &cache.masks[idx]);
                // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                    let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                    Zip::from(&mut drow).and(&prow).for_each(|x, &pv| {
                        *x = pv * (*x - dot) * scale;
                    });
                }
                let qb = cache.q.slice(s![rq.clone(), cols.clone()]);
                let kb = cache.k.slice(s![rk.clone(), cols.clone()]);
                dq.slice_mut(s![rq, cols.clone()]).assign(&dp.dot(&kb));
                dk.slice_mut(s![rk, cols]).assign(&dp.t().dot(&qb));
            }
        }
        let dq_in = self.q.backward(&cache.q_in, &dq, &mut g.q);
        let kv_src = cache.kv_in.as_ref().unwrap_or(&cache.q_in);
        let dkv = self.k.backward(kv_src, &dk, &mut g.k) + self.v.backward(kv_src, &dv, &mut g.v);
        match cache.kv_in {
            Some(_) => (dq_in, Some(dkv)),
            None => (dq_in + dkv, None),
        }
    }
}

/// Scales, masks (pad keys and, if `causal_row` is set, keys after it) and
/// normalizes one score row in place. A fully masked row becomes all zeros.
fn masked_softmax<T: Real>(
    row: &mut ndarray::ArrayViewMut1<'_, T>,
    pad: &[bool],
    causal_row: Option<usize>,
    scale: T,
) {
    let visible = |j: usize| !pad[j] && causal_row.is_none_or(|i| j <= i);
    let mut max = T::neg_infinity();
    for (j, x) in row.iter_mut().enumerate() {
        if visible(j) {
            *x *= scale;
            max = max.max(*x);
        }
    }
    if max == T::neg_infinity() {
        row.fill(T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if visible(j) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = T::zero();
        }
    }
    row.mapv_inplace(|x| x / sum);
}

pub(crate) struct FfnCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
    mask: Option<Array2<T>>,
}

/// `relu(x·W1 + b1)` with dropout on the activation, then `·W2 + b2`.
pub(crate) fn ffn_forward<T: Real>(
    inp: &Linear<T>,
    out: &Linear<T>,
    x: &Array2<T>,
    dropout: &mut Dropout,
) -> (Array2<T>, FfnCache<T>) {
    let pre = inp.forward(x);
    let mut act = pre.mapv(|v| v.max(T::zero()));
    let mask = dropout.mask::<T>(act.nrows(), act.ncols());
    apply_mask(&mut act, &mask);
    let y = out.forward(&act);
    (
        y,
        FfnCache {
            x: x.clone(),
            pre,
            act,
            mask,
        },
    )
}

pub(crate) fn ffn_backward<T: Real>(
    inp: &Linear<T>,
    out: &Linear<T>,
    cache: &FfnCache<T>,
    dy: &Array2<T>,
    g_in: &mut Linear<T>,
    g_out: &mut Linear<T>,
) -> Array2<T> {
    let mut da = out.backward(&cache.act, dy, g_out);
    apply_mask(&mut da, &cache.mask);
    Zip::from(&mut da).and(&cache.pre).for_each(|d, &p| {
        if p <= T::zero() {
            *d = T::zero();
        }
    });
    inp.backward(&cache.x, &da, g_in)
}

/// Sinusoidal position table, `len × d`.
pub(crate) fn positional_table<T: Real>(len: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 / rate;
        T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

pub(crate) struct EmbedCache<T> {
    ids: Vec<u32>,
    mask: Option<Array2<T>>,
}

/// `table[id]·sqrt(d) + PE[pos]` for ids laid out `batch × len`, then dropout.
pub(crate) fn embed_forward<T: Real>(
    table: &Array2<T>,
    ids: &[u32],
    len: usize,
    dropout: &mut Dropout,
) -> (Array2<T>, EmbedCache<T>) {
    let d = table.ncols();
    let scale = T::from_usize(d).unwrap().sqrt();
    let pe = positional_table::<T>(len, d);
    let mut x = Array2::zeros((ids.len(), d));
    for (r, (mut row, &id)) in x.rows_mut().into_iter().zip(ids).enumerate() {
        let e = table.row(id as usize);
        Zip::from(&mut row)
            .and(&e)
            .and(&pe.row(r % len))
            .for_each(|o, &e, &p| *o = e * scale + p);
    }
    let mask = dropout.mask::<T>(x.nrows(), d);
    apply_mask(&mut x, &mask);
    (
        x,
        EmbedCache {
            ids: ids.to_vec(),
            mask,
        },
    )
}

pub(crate) fn embed_backward<T: Real>(cache: &EmbedCache<T>, dx: &Array2<T>, g_table: &mut Array2<T>) {
    let scale = T::from_usize(dx.ncols()).unwrap().sqrt();
    let mut dx = dx.clone();
    apply_mask(&mut dx, &cache.mask);
    for (row, &id) in dx.rows().into_iter().zip(&cache.ids) {
        let mut g = g_table.row_mut(id as usize);
        Zip::from(&mut g).and(&row).for_each(|g, &d| *g += d * scale);
    }
}
