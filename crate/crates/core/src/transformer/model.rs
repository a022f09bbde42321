use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    embed_backward, embed_forward, ffn_backward, ffn_forward, AttnCache, AttnShape, Dropout, EmbedCache,
    FfnCache, LnCache,
};
use super::params::{DecoderLayer, EncoderLayer, Parameters};
use super::{ModelConfig, Real};
use crate::error::{NmtError, Result};
use crate::special::{BOS, EOS, PAD};
use crate::training::loss::{label_smoothed_ce_grad, smoothed_ce_impl, CeStats};

/// A padded teacher-forcing batch.
///
/// `tgt_in = [BOS] + target` and `tgt_out = target + [EOS]`, both padded with
/// `PAD` to the same width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: Array2<u32>,
    pub tgt_in: Array2<u32>,
    pub tgt_out: Array2<u32>,
}

impl Batch {
    pub fn from_pairs<S: AsRef<[u32]>, U: AsRef<[u32]>>(pairs: &[(S, U)]) -> Batch {
        let rows = pairs.len();
        let ls = pairs.iter().map(|(s, _)| s.as_ref().len()).max().unwrap_or(0);
        let lt = pairs.iter().map(|(_, t)| t.as_ref().len() + 1).max().unwrap_or(0);
        let mut src = Array2::from_elem((rows, ls), PAD);
        let mut tgt_in = Array2::from_elem((rows, lt), PAD);
        let mut tgt_out = Array2::from_elem((rows, lt), PAD);
        for (r, (s, t)) in pairs.iter().enumerate() {
            for (j, &id) in s.as_ref().iter().enumerate() {
                src[[r, j]] = id;
            }
            let t = t.as_ref();
            tgt_in[[r, 0]] = BOS;
            for (j, &id) in t.iter().enumerate() {
                tgt_in[[r, j + 1]] = id;
                tgt_out[[r, j]] = id;
            }
            tgt_out[[r, t.len()]] = EOS;
        }
        Batch { src, tgt_in, tgt_out }
    }

    /// The unpadded (source, target) id pairs this batch was built from.
    pub fn pairs(&self) -> Vec<(Vec<u32>, Vec<u32>)> {
        (0..self.rows())
            .map(|r| {
                let s = self.src.row(r).iter().copied().filter(|&i| i != PAD).collect();
                let t = self
                    .tgt_out
                    .row(r)
                    .iter()
                    .copied()
                    .take_while(|&i| i != EOS && i != PAD)
                    .collect();
                (s, t)
            })
            .collect()
    }

    /// Row-wise concatenation, re-padded to the wider of the two.
    pub fn concat(&self, other: &Batch) -> Batch {
        let mut pairs = self.pairs();
        pairs.extend(other.pairs());
        Batch::from_pairs(&pairs)
    }

    pub fn rows(&self) -> usize {
        self.src.nrows()
    }

    pub fn src_len(&self) -> usize {
        self.src.ncols()
    }

    pub fn tgt_len(&self) -> usize {
        self.tgt_in.ncols()
    }

    /// Non-pad positions of `tgt_out`, i.e. the tokens the loss scores.
    pub fn num_target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&i| i != PAD).count()
    }

    /// Padded size counted on the larger side.
    pub fn padded_tokens(&self) -> usize {
        self.rows() * self.src_len().max(self.tgt_len())
    }
}

/// Encoder states for a batch, rows laid out `batch × src_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub memory: Array2<T>,
    pub batch: usize,
    pub src_len: usize,
    pub src_pad: Vec<bool>,
}

impl<T: Real> EncoderOutput<T> {
    /// Memory as `batch × src_len × d_model`.
    pub fn as_array3(&self) -> Array3<T> {
        let d = self.memory.ncols();
        self.memory
            .clone()
            .into_shape_with_order((self.batch, self.src_len, d))
            .expect("contiguous memory")
    }

    /// A new output whose row `i` is row `rows[i]` of this one.
    pub fn select(&self, rows: &[usize]) -> EncoderOutput<T> {
        let d = self.memory.ncols();
        let ls = self.src_len;
        let mut memory = Array2::zeros((rows.len() * ls, d));
        let mut src_pad = Vec::with_capacity(rows.len() * ls);
        for (i, &r) in rows.iter().enumerate() {
            memory
                .slice_mut(ndarray::s![i * ls..(i + 1) * ls, ..])
                .assign(&self.memory.slice(ndarray::s![r * ls..(r + 1) * ls, ..]));
            src_pad.extend_from_slice(&self.src_pad[r * ls..(r + 1) * ls]);
        }
        EncoderOutput {
            memory,
            batch: rows.len(),
            src_len: ls,
            src_pad,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub nll: f64,
    pub tokens: usize,
}

impl From<CeStats> for LossStats {
    fn from(c: CeStats) -> Self {
        LossStats {
            loss: c.loss,
            nll: c.nll,
            tokens: c.tokens,
        }
    }
}

/// Summed loss over a batch and the gradient of that sum.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub stats: LossStats,
    pub grads: Parameters<T>,
}

struct EncLayerCache<T> {
    attn: AttnCache<T>,
    norm1: LnCache<T>,
    ffn: FfnCache<T>,
    norm2: LnCache<T>,
}

struct DecLayerCache<T> {
    self_attn: AttnCache<T>,
    norm1: LnCache<T>,
    cross: AttnCache<T>,
    norm2: LnCache<T>,
    ffn: FfnCache<T>,
    norm3: LnCache<T>,
}

struct EncCache<T> {
    embed: EmbedCache<T>,
    layers: Vec<EncLayerCache<T>>,
    final_norm: Option<LnCache<T>>,
}

struct DecCache<T> {
    embed: EmbedCache<T>,
    layers: Vec<DecLayerCache<T>>,
    final_norm: Option<LnCache<T>>,
    hidden: Array2<T>,
}

/// Decoder-side geometry shared by forward and backward.
struct DecGeom<'a> {
    batch: usize,
    tgt_len: usize,
    tgt_pad: &'a [bool],
    src_len: usize,
    src_pad: &'a [bool],
}

/// A transformer encoder-decoder: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    pub cfg: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Real> Transformer<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = Parameters::init(&cfg, seed);
        Ok(Transformer { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: Parameters<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Transformer { cfg, params })
    }

    fn dropout(&self, train_mode: bool, seed: u64) -> Dropout {
        if train_mode {
            Dropout {
                p: self.cfg.dropout,
                rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            }
        } else {
            Dropout::eval()
        }
    }

    fn check_ids(ids: &Array2<u32>, vocab: usize, side: &str) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= vocab) {
            Some(bad) => Err(NmtError::Range(format!(
                "{side} token id {bad} outside vocabulary of {vocab}"
            ))),
            None => Ok(()),
        }
    }

    fn check_src(&self, src: &Array2<u32>) -> Result<()> {
        if src.ncols() > self.cfg.max_source_positions {
            return Err(NmtError::Length {
                len: src.ncols(),
                limit: self.cfg.max_source_positions,
            });
        }
        Self::check_ids(src, self.cfg.src_vocab_size, "source")
    }

    fn check_tgt(&self, tgt: &Array2<u32>) -> Result<()> {
        if tgt.ncols() > self.cfg.max_target_positions {
            return Err(NmtError::Length {
                len: tgt.ncols(),
                limit: self.cfg.max_target_positions,
            });
        }
        Self::check_ids(tgt, self.cfg.tgt_vocab_size, "target")
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        self.check_src(&batch.src)?;
        self.check_tgt(&batch.tgt_in)?;
        Self::check_ids(&batch.tgt_out, self.cfg.tgt_vocab_size, "target")
    }

    fn shape<'a>(&self, batch: usize, q_len: usize, k_len: usize, key_pad: &'a [bool], causal: bool) -> AttnShape<'a> {
        AttnShape {
            batch,
            q_len,
            k_len,
            key_pad,
            causal,
            n_heads: self.cfg.n_heads,
        }
    }

    fn encoder_forward(&self, src: &Array2<u32>, drop: &mut Dropout) -> (EncoderOutput<T>, EncCache<T>) {
        let (b, ls) = src.dim();
        let ids: Vec<u32> = src.iter().copied().collect();
        let pad: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
        let (mut x, embed) = embed_forward(&self.params.src_embed, &ids, ls, drop);
        let shape = self.shape(b, ls, ls, &pad, false);
        let pre = self.cfg.pre_layernorm;
        let mut layers = Vec::with_capacity(self.params.encoder.len());
        for l in &self.params.encoder {
            let (out, cache) = encoder_layer_forward(l, &x, &shape, pre, drop);
            x = out;
            layers.push(cache);
        }
        let final_norm = self.params.encoder_norm.as_ref().map(|n| {
            let (y, c) = n.forward(&x);
            x = y;
            c
        });
        let enc = EncoderOutput {
            memory: x,
            batch: b,
            src_len: ls,
            src_pad: pad,
        };
        (
            enc,
            EncCache {
                embed,
                layers,
                final_norm,
            },
        )
    }

    fn encoder_backward(&self, cache: &EncCache<T>, d_mem: Array2<T>, enc: &EncoderOutput<T>, g: &mut Parameters<T>) {
        let shape = self.shape(enc.batch, enc.src_len, enc.src_len, &enc.src_pad, false);
        let mut dx = d_mem;
        if let (Some(n), Some(c)) = (&self.params.encoder_norm, &cache.final_norm) {
            dx = n.backward(c, &dx, g.encoder_norm.as_mut().expect("grad norm"));
        }
        let pre = self.cfg.pre_layernorm;
        for ((l, c), gl) in self
            .params
            .encoder
            .iter()
            .zip(&cache.layers)
            .zip(g.encoder.iter_mut())
            .rev()
        {
            dx = encoder_layer_backward(l, c, dx, &shape, pre, gl);
        }
        embed_backward(&cache.embed, &dx, &mut g.src_embed);
    }

    fn decoder_forward(
        &self,
        tgt_in: &Array2<u32>,
        enc: &EncoderOutput<T>,
        drop: &mut Dropout,
    ) -> (Array2<T>, DecCache<T>, Vec<bool>) {
        let (b, lt) = tgt_in.dim();
        let ids: Vec<u32> = tgt_in.iter().copied().collect();
        let tgt_pad: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
        let (mut x, embed) = embed_forward(&self.params.tgt_embed, &ids, lt, drop);
        let geom = DecGeom {
            batch: b,
            tgt_len: lt,
            tgt_pad: &tgt_pad,
            src_len: enc.src_len,
            src_pad: &enc.src_pad,
        };
        let mut layers = Vec::with_capacity(self.params.decoder.len());
        for l in &self.params.decoder {
            let (out, cache) = self.decoder_layer_forward(l, &x, &enc.memory, &geom, drop);
            x = out;
            layers.push(cache);
        }
        let final_norm = self.params.decoder_norm.as_ref().map(|n| {
            let (y, c) = n.forward(&x);
            x = y;
            c
        });
        let cache = DecCache {
            embed,
            layers,
            final_norm,
            hidden: x.clone(),
        };
        (x, cache, tgt_pad)
    }

    fn decoder_layer_forward(
        &self,
        l: &DecoderLayer<T>,
        x: &Array2<T>,
        mem: &Array2<T>,
        g: &DecGeom<'_>,
        drop: &mut Dropout,
    ) -> (Array2<T>, DecLayerCache<T>) {
        let self_shape = self.shape(g.batch, g.tgt_len, g.tgt_len, g.tgt_pad, true);
        let cross_shape = self.shape(g.batch, g.tgt_len, g.src_len, g.src_pad, false);
        if self.cfg.pre_layernorm {
            let (n1, norm1) = l.self_attn_norm.forward(x);
            let (a, self_attn) = l.self_attn.forward(&n1, None, &self_shape, drop);
            let x1 = x + &a;
            let (n2, norm2) = l.cross_attn_norm.forward(&x1);
            let (c, cross) = l.cross_attn.forward(&n2, Some(mem), &cross_shape, drop);
            let x2 = &x1 + &c;
            let (n3, norm3) = l.ffn_norm.forward(&x2);
            let (f, ffn) = ffn_forward(&l.ffn_in, &l.ffn_out, &n3, drop);
            let out = &x2 + &f;
            (
                out,
                DecLayerCache {
                    self_attn,
                    norm1,
                    cross,
                    norm2,
                    ffn,
                    norm3,
                },
            )
        } else {
            let (a, self_attn) = l.self_attn.forward(x, None, &self_shape, drop);
            let (x1, norm1) = l.self_attn_norm.forward(&(x + &a));
            let (c, cross) = l.cross_attn.forward(&x1, Some(mem), &cross_shape, drop);
            let (x2, norm2) = l.cross_attn_norm.forward(&(&x1 + &c));
            let (f, ffn) = ffn_forward(&l.ffn_in, &l.ffn_out, &x2, drop);
            let (out, norm3) = l.ffn_norm.forward(&(&x2 + &f));
            (
                out,
                DecLayerCache {
                    self_attn,
                    norm1,
                    cross,
                    norm2,
                    ffn,
                    norm3,
                },
            )
        }
    }

    /// Backpropagates through the decoder; returns `dL/dmemory`.
    fn decoder_backward(
        &self,
        cache: &DecCache<T>,
        d_hidden: Array2<T>,
        geom: &DecGeom<'_>,
        g: &mut Parameters<T>,
    ) -> Array2<T> {
        let self_shape = self.shape(geom.batch, geom.tgt_len, geom.tgt_len, geom.tgt_pad, true);
        let cross_shape = self.shape(geom.batch, geom.tgt_len, geom.src_len, geom.src_pad, false);
        let mut dx = d_hidden;
        if let (Some(n), Some(c)) = (&self.params.decoder_norm, &cache.final_norm) {
            dx = n.backward(c, &dx, g.decoder_norm.as_mut().expect("grad norm"));
        }
        let mut d_mem: Option<Array2<T>> = None;
        let mut add_mem = |d: Array2<T>| match d_mem.as_mut() {
            Some(m) => *m += &d,
            None => d_mem = Some(d),
        };
        for ((l, c), gl) in self
            .params
            .decoder
            .iter()
            .zip(&cache.layers)
            .zip(g.decoder.iter_mut())
            .rev()
        {
            if self.cfg.pre_layernorm {
                // out = x2 + ffn(norm3(x2))
                let df = ffn_backward(&l.ffn_in, &l.ffn_out, &c.ffn, &dx, &mut gl.ffn_in, &mut gl.ffn_out);
                let dx2 = &dx + &l.ffn_norm.backward(&c.norm3, &df, &mut gl.ffn_norm);
                // x2 = x1 + cross(norm2(x1), mem)
                let (dn2, dm) = l.cross_attn.backward(&c.cross, &dx2, &cross_shape, &mut gl.cross_attn);
                add_mem(dm.expect("cross attention"));
                let dx1 = &dx2 + &l.cross_attn_norm.backward(&c.norm2, &dn2, &mut gl.cross_attn_norm);
                // x1 = x + self(norm1(x))
                let (dn1, _) = l.self_attn.backward(&c.self_attn, &dx1, &self_shape, &mut gl.self_attn);
                dx = &dx1 + &l.self_attn_norm.backward(&c.norm1, &dn1, &mut gl.self_attn_norm);
            } else {
                let dr3 = l.ffn_norm.backward(&c.norm3, &dx, &mut gl.ffn_norm);
                let dx2 = &dr3 + &ffn_backward(&l.ffn_in, &l.ffn_out, &c.ffn, &dr3, &mut gl.ffn_in, &mut gl.ffn_out);
                let dr2 = l.cross_attn_norm.backward(&c.norm2, &dx2, &mut gl.cross_attn_norm);
                let (dq, dm) = l.cross_attn.backward(&c.cross, &dr2, &cross_shape, &mut gl.cross_attn);
                add_mem(dm.expect("cross attention"));
                let dx1 = &dr2 + &dq;
                let dr1 = l.self_attn_norm.backward(&c.norm1, &dx1, &mut gl.self_attn_norm);
                let (da, _) = l.self_attn.backward(&c.self_attn, &dr1, &self_shape, &mut gl.self_attn);
                dx = &dr1 + &da;
            }
        }
        embed_backward(&cache.embed, &dx, &mut g.tgt_embed);
        d_mem.unwrap_or_else(|| Array2::zeros((geom.batch * geom.src_len, self.cfg.d_model)))
    }

    fn output_weight(&self) -> ArrayView2<'_, T> {
        match &self.params.output_proj {
            Some(w) => w.view(),
            None => self.params.tgt_embed.t(),
        }
    }

    fn project(&self, hidden: &Array2<T>) -> Array2<T> {
        hidden.dot(&self.output_weight())
    }

    fn project_backward(&self, hidden: &Array2<T>, d_logits: &Array2<T>, g: &mut Parameters<T>) -> Array2<T> {
        match g.output_proj.as_mut() {
            Some(gw) => *gw += &hidden.t().dot(d_logits),
            None => g.tgt_embed += &d_logits.t().dot(hidden),
        }
        d_logits.dot(&self.output_weight().t())
    }

    /// Logits of shape `batch × tgt_len × tgt_vocab_size`.
    pub fn forward(&self, batch: &Batch, train_mode: bool, seed: u64) -> Result<Array3<T>> {
        self.check_batch(batch)?;
        let mut drop = self.dropout(train_mode, seed);
        let (enc, _) = self.encoder_forward(&batch.src, &mut drop);
        let (hidden, _, _) = self.decoder_forward(&batch.tgt_in, &enc, &mut drop);
        let logits = self.project(&hidden);
        Ok(logits
            .into_shape_with_order((batch.rows(), batch.tgt_len(), self.cfg.tgt_vocab_size))
            .expect("contiguous logits"))
    }

    /// Eval-mode encoder pass.
    pub fn encode_source(&self, src: &Array2<u32>) -> Result<EncoderOutput<T>> {
        self.check_src(src)?;
        Ok(self.encoder_forward(src, &mut Dropout::eval()).0)
    }

    /// Log-probabilities of the next token after each prefix row.
    ///
    /// Row `i` of `prefixes` is decoded against row `i` of `memory`; every
    /// prefix should start with `BOS`.
    pub fn decode_step(&self, memory: &EncoderOutput<T>, prefixes: &Array2<u32>) -> Result<Array2<T>> {
        self.check_tgt(prefixes)?;
        if prefixes.nrows() != memory.batch {
            return Err(NmtError::Input(format!(
                "{} prefixes for {} memory rows",
                prefixes.nrows(),
                memory.batch
            )));
        }
        if prefixes.ncols() == 0 {
            return Err(NmtError::Input("decode_step needs a non-empty prefix".into()));
        }
        let (hidden, _, _) = self.decoder_forward(prefixes, memory, &mut Dropout::eval());
        let lt = prefixes.ncols();
        let last: Vec<usize> = (0..prefixes.nrows()).map(|b| b * lt + lt - 1).collect();
        let last_hidden = hidden.select(ndarray::Axis(0), &last);
        let mut logits = self.project(&last_hidden);
        for mut row in logits.rows_mut() {
            let max = row.fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        Ok(logits)
    }

    /// Summed label-smoothed loss of a batch (no gradient).
    pub fn loss(&self, batch: &Batch, smoothing: f64, train_mode: bool, seed: u64) -> Result<LossStats> {
        let logits = self.forward(batch, train_mode, seed)?;
        let v = self.cfg.tgt_vocab_size;
        let flat = logits.into_shape_with_order((batch.rows() * batch.tgt_len(), v)).expect("contiguous");
        let targets: Vec<u32> = batch.tgt_out.iter().copied().collect();
        Ok(smoothed_ce_impl(flat.view(), &targets, smoothing, PAD, None).into())
    }

    /// Summed label-smoothed loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &Batch, smoothing: f64, train_mode: bool, seed: u64) -> Result<LossGrad<T>> {
        self.check_batch(batch)?;
        let mut drop = self.dropout(train_mode, seed);
        let (enc, enc_cache) = self.encoder_forward(&batch.src, &mut drop);
        let (hidden, dec_cache, tgt_pad) = self.decoder_forward(&batch.tgt_in, &enc, &mut drop);
        let logits = self.project(&hidden);
        let targets: Vec<u32> = batch.tgt_out.iter().copied().collect();
        let (stats, d_logits) = label_smoothed_ce_grad(logits.view(), &targets, smoothing, PAD);

        let mut grads = self.params.zeros_like();
        let d_hidden = self.project_backward(&dec_cache.hidden, &d_logits, &mut grads);
        let geom = DecGeom {
            batch: batch.rows(),
            tgt_len: batch.tgt_len(),
            tgt_pad: &tgt_pad,
            src_len: enc.src_len,
            src_pad: &enc.src_pad,
        };
        let d_mem = self.decoder_backward(&dec_cache, d_hidden, &geom, &mut grads);
        self.encoder_backward(&enc_cache, d_mem, &enc, &mut grads);
        Ok(LossGrad {
            stats: stats.into(),
            grads,
        })
    }
}

fn encoder_layer_forward<T: Real>(
    l: &EncoderLayer<T>,
    x: &Array2<T>,
    shape: &AttnShape<'_>,
    pre: bool,
    drop: &mut Dropout,
) -> (Array2<T>, EncLayerCache<T>) {
    if pre {
        let (n1, norm1) = l.self_attn_norm.forward(x);
        let (a, attn) = l.self_attn.forward(&n1, None, shape, drop);
        let x1 = x + &a;
        let (n2, norm2) = l.ffn_norm.forward(&x1);
        let (f, ffn) = ffn_forward(&l.ffn_in, &l.ffn_out, &n2, drop);
        (&x1 + &f, EncLayerCache { attn, norm1, ffn, norm2 })
    } else {
        let (a, attn) = l.self_attn.forward(x, None, shape, drop);
        let (x1, norm1) = l.self_attn_norm.forward(&(x + &a));
        let (f, ffn) = ffn_forward(&l.ffn_in, &l.ffn_out, &x1, drop);
        let (out, norm2) = l.ffn_norm.forward(&(&x1 + &f));
        (out, EncLayerCache { attn, norm1, ffn, norm2 })
    }
}

fn encoder_layer_backward<T: Real>(
    l: &EncoderLayer<T>,
    c: &EncLayerCache<T>,
    dy: Array2<T>,
    shape: &AttnShape<'_>,
    pre: bool,
    g: &mut EncoderLayer<T>,
) -> Array2<T> {
    if pre {
        let df = ffn_backward(&l.ffn_in, &l.ffn_out, &c.ffn, &dy, &mut g.ffn_in, &mut g.ffn_out);
        let dx1 = &dy + &l.ffn_norm.backward(&c.norm2, &df, &mut g.ffn_norm);
        let (dn1, _) = l.self_attn.backward(&c.attn, &dx1, shape, &mut g.self_attn);
        &dx1 + &l.self_attn_norm.backward(&c.norm1, &dn1, &mut g.self_attn_norm)
    } else {
        let dr2 = l.ffn_norm.backward(&c.norm2, &dy, &mut g.ffn_norm);
        let dx1 = &dr2 + &ffn_backward(&l.ffn_in, &l.ffn_out, &c.ffn, &dr2, &mut g.ffn_in, &mut g.ffn_out);
        let dr1 = l.self_attn_norm.backward(&c.norm1, &dx1, &mut g.self_attn_norm);
        let (da, _) = l.self_attn.backward(&c.attn, &dr1, shape, &mut g.self_attn);
        &dr1 + &da
    }
}
