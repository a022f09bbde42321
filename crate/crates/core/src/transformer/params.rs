use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Real};
use crate::special;

/// `y = x · weight + bias`, weight stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub self_attn: Attention<T>,
    pub self_attn_norm: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: LayerNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_attn: Attention<T>,
    pub self_attn_norm: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub cross_attn_norm: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: LayerNorm<T>,
}

/// Every learnable tensor of the model.
///
/// The same type doubles as the gradient container. `output_proj` is `None`
/// when the decoder embedding is reused as the output projection; the final
/// stack norms exist only in the pre-layernorm arrangement.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub src_embed: Array2<T>,
    pub tgt_embed: Array2<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub encoder_norm: Option<LayerNorm<T>>,
    pub decoder_norm: Option<LayerNorm<T>>,
    pub output_proj: Option<Array2<T>>,
}

type Views<'a, T> = Vec<(String, ArrayViewD<'a, T>)>;
type ViewsMut<'a, T> = Vec<(String, ArrayViewMutD<'a, T>)>;

impl<T: Real> Linear<T> {
    fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            weight: Array2::zeros((inp, out)),
            bias: Array1::zeros(out),
        }
    }

    fn collect<'a>(&'a self, p: &str, out: &mut Views<'a, T>) {
        out.push((format!("{p}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{p}.bias"), self.bias.view().into_dyn()));
    }

    fn collect_mut<'a>(&'a mut self, p: &str, out: &mut ViewsMut<'a, T>) {
        out.push((format!("{p}.weight"), self.weight.view_mut().into_dyn()));
        out.push((format!("{p}.bias"), self.bias.view_mut().into_dyn()));
    }
}

impl<T: Real> LayerNorm<T> {
    fn zeros(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }

    fn collect<'a>(&'a self, p: &str, out: &mut Views<'a, T>) {
        out.push((format!("{p}.gain"), self.gain.view().into_dyn()));
        out.push((format!("{p}.bias"), self.bias.view().into_dyn()));
    }

    fn collect_mut<'a>(&'a mut self, p: &str, out: &mut ViewsMut<'a, T>) {
        out.push((format!("{p}.gain"), self.gain.view_mut().into_dyn()));
        out.push((format!("{p}.bias"), self.bias.view_mut().into_dyn()));
    }
}

impl<T: Real> Attention<T> {
    fn zeros(d: usize) -> Self {
        Attention {
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            out: Linear::zeros(d, d),
        }
    }

    fn collect<'a>(&'a self, p: &str, out: &mut Views<'a, T>) {
        self.q.collect(&format!("{p}.q"), out);
        self.k.collect(&format!("{p}.k"), out);
        self.v.collect(&format!("{p}.v"), out);
        self.out.collect(&format!("{p}.out"), out);
    }

    fn collect_mut<'a>(&'a mut self, p: &str, out: &mut ViewsMut<'a, T>) {
        self.q.collect_mut(&format!("{p}.q"), out);
        self.k.collect_mut(&format!("{p}.k"), out);
        self.v.collect_mut(&format!("{p}.v"), out);
        self.out.collect_mut(&format!("{p}.out"), out);
    }
}

impl<T: Real> Parameters<T> {
    /// Correctly shaped, all-zero parameters for `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let encoder = (0..cfg.n_encoder_layers)
            .map(|_| EncoderLayer {
                self_attn: Attention::zeros(d),
                self_attn_norm: LayerNorm::zeros(d),
                ffn_in: Linear::zeros(d, f),
                ffn_out: Linear::zeros(f, d),
                ffn_norm: LayerNorm::zeros(d),
            })
            .collect();
        let decoder = (0..cfg.n_decoder_layers)
            .map(|_| DecoderLayer {
                self_attn: Attention::zeros(d),
                self_attn_norm: LayerNorm::zeros(d),
                cross_attn: Attention::zeros(d),
                cross_attn_norm: LayerNorm::zeros(d),
                ffn_in: Linear::zeros(d, f),
                ffn_out: Linear::zeros(f, d),
                ffn_norm: LayerNorm::zeros(d),
            })
            .collect();
        Parameters {
            src_embed: Array2::zeros((cfg.src_vocab_size, d)),
            tgt_embed: Array2::zeros((cfg.tgt_vocab_size, d)),
            encoder,
            decoder,
            encoder_norm: cfg.pre_layernorm.then(|| LayerNorm::zeros(d)),
            decoder_norm: cfg.pre_layernorm.then(|| LayerNorm::zeros(d)),
            output_proj: (!cfg.share_decoder_io).then(|| Array2::zeros((d, cfg.tgt_vocab_size))),
        }
    }

    /// Deterministic initialization.
    ///
    /// Embedding tables and the output projection draw from `N(0, 1/d_model²)`
    /// so untrained logits stay close to uniform; linear weights are Xavier
    /// uniform; biases are zero, layer-norm gains one, and the pad rows of
    /// both embedding tables are zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb_std = 1.0 / cfg.d_model as f64;
        let normal = Normal::new(0.0, emb_std).expect("valid std");
        for (name, mut t) in p.named_tensors_mut() {
            let shape = t.shape().to_vec();
            if name.ends_with("embed") || name == "output_proj" {
                t.mapv_inplace(|_| T::from_f64_lossy(normal.sample(&mut rng)));
                if name.ends_with("embed") {
                    t.index_axis_mut(ndarray::Axis(0), special::PAD as usize)
                        .fill(T::zero());
                }
            } else if name.ends_with(".weight") {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                t.mapv_inplace(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)));
            } else if name.ends_with(".gain") {
                t.fill(T::one());
            }
        }
        p
    }

    /// All tensors in a fixed order with dotted names.
    pub fn named_tensors(&self) -> Views<'_, T> {
        let mut out = Vec::new();
        out.push(("src_embed".to_string(), self.src_embed.view().into_dyn()));
        out.push(("tgt_embed".to_string(), self.tgt_embed.view().into_dyn()));
        for (i, l) in self.encoder.iter().enumerate() {
            let p = format!("encoder.{i}");
            l.self_attn.collect(&format!("{p}.self_attn"), &mut out);
            l.self_attn_norm.collect(&format!("{p}.self_attn_norm"), &mut out);
            l.ffn_in.collect(&format!("{p}.ffn_in"), &mut out);
            l.ffn_out.collect(&format!("{p}.ffn_out"), &mut out);
            l.ffn_norm.collect(&format!("{p}.ffn_norm"), &mut out);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{i}");
            l.self_attn.collect(&format!("{p}.self_attn"), &mut out);
            l.self_attn_norm.collect(&format!("{p}.self_attn_norm"), &mut out);
            l.cross_attn.collect(&format!("{p}.cross_attn"), &mut out);
            l.cross_attn_norm.collect(&format!("{p}.cross_attn_norm"), &mut out);
            l.ffn_in.collect(&format!("{p}.ffn_in"), &mut out);
            l.ffn_out.collect(&format!("{p}.ffn_out"), &mut out);
            l.ffn_norm.collect(&format!("{p}.ffn_norm"), &mut out);
        }
        if let Some(n) = &self.encoder_norm {
            n.collect("encoder_norm", &mut out);
        }
        if let Some(n) = &self.decoder_norm {
            n.collect("decoder_norm", &mut out);
        }
        if let Some(w) = &self.output_proj {
            out.push(("output_proj".to_string(), w.view().into_dyn()));
        }
        out
    }

    /// Mutable counterpart of [`Parameters::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> ViewsMut<'_, T> {
        let mut out = Vec::new();
        out.push(("src_embed".to_string(), self.src_embed.view_mut().into_dyn()));
        out.push(("tgt_embed".to_string(), self.tgt_embed.view_mut().into_dyn()));
        for (i, l) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.{i}");
            l.self_attn.collect_mut(&format!("{p}.self_attn"), &mut out);
            l.self_attn_norm.collect_mut(&format!("{p}.self_attn_norm"), &mut out);
            l.ffn_in.collect_mut(&format!("{p}.ffn_in"), &mut out);
            l.ffn_out.collect_mut(&format!("{p}.ffn_out"), &mut out);
            l.ffn_norm.collect_mut(&format!("{p}.ffn_norm"), &mut out);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.{i}");
            l.self_attn.collect_mut(&format!("{p}.self_attn"), &mut out);
            l.self_attn_norm.collect_mut(&format!("{p}.self_attn_norm"), &mut out);
            l.cross_attn.collect_mut(&format!("{p}.cross_attn"), &mut out);
            l.cross_attn_norm.collect_mut(&format!("{p}.cross_attn_norm"), &mut out);
            l.ffn_in.collect_mut(&format!("{p}.ffn_in"), &mut out);
            l.ffn_out.collect_mut(&format!("{p}.ffn_out"), &mut out);
            l.ffn_norm.collect_mut(&format!("{p}.ffn_norm"), &mut out);
        }
        if let Some(n) = &mut self.encoder_norm {
            n.collect_mut("encoder_norm", &mut out);
        }
        if let Some(n) = &mut self.decoder_norm {
            n.collect_mut("decoder_norm", &mut out);
        }
        if let Some(w) = &mut self.output_proj {
            out.push(("output_proj".to_string(), w.view_mut().into_dyn()));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.named_tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Element-type conversion, e.g. `f32` weights into an `f64` model.
    pub fn cast<U: Real>(&self, cfg: &ModelConfig) -> Parameters<U> {
        let mut out = Parameters::<U>::zeros(cfg);
        for ((_, src), (_, mut dst)) in self.named_tensors().into_iter().zip(out.named_tensors_mut()) {
            dst.zip_mut_with(&src, |d, &s| *d = U::from_f64_lossy(s.to_f64_lossy()));
        }
        out
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Parameters<T>, scale: T) {
        for ((_, mut a), (_, b)) in self.named_tensors_mut().into_iter().zip(other.named_tensors()) {
            a.zip_mut_with(&b, |x, &y| *x += y * scale);
        }
    }

    /// Multiplies every tensor by `scale`.
    pub fn scale(&mut self, scale: T) {
        for (_, mut t) in self.named_tensors_mut() {
            t.mapv_inplace(|x| x * scale);
        }
    }
}
