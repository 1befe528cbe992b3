//! The U2++ model: 1/8 convolutional subsampling, a Conformer encoder with a
//! CTC head, and left-to-right / right-to-left Transformer decoders. Every
//! FFN becomes an MoE layer when the config has experts.

mod config;
mod mask;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, SUBSAMPLE_FACTOR};
pub use mask::{make_chunk_mask, sample_dynamic_chunk, ChunkMask, ChunkPolicy};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::moe::{FfnSlot, RoutingDecision};
use crate::nn::{sinusoid_table, ConvModule, ConvPadding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Routing decisions of every MoE slot touched by a forward pass, keyed by
/// the slot's checkpoint prefix (e.g. `enc.3.ffn2`).
pub type Routes = Vec<(String, RoutingDecision)>;

fn conv_len(l: usize) -> usize {
    (l - 3) / 2 + 1
}

/// Subsampled length `T'` for `T` input frames, `None` when `T < 15`.
pub fn subsampled_len(t: usize) -> Option<usize> {
    (t >= 15).then(|| conv_len(conv_len(conv_len(t))))
}

/// Three 3×3 stride-2 convolutions (time and frequency) with ReLU, then a
/// linear map of the flattened `F₃ × d_att` channels to `d_att`.
#[derive(Debug, Clone)]
pub struct Subsampling {
    pub convs: Vec<(ParamId, ParamId)>,
    pub out: Linear,
}

impl Subsampling {
    fn new<F: Scalar>(pb: &mut ParamBuilder<'_, F>, d: usize, feat_dim: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 1;
        for i in 0..3 {
            convs.push((
                pb.weight(&format!("sub.conv{i}.W"), 9 * cin, d)?,
                pb.zeros(&format!("sub.conv{i}.b"), &[d])?,
            ));
            cin = d;
        }
        let f3 = conv_len(conv_len(conv_len(feat_dim)));
        let out = Linear::new(pb, "sub.out.W", Some("sub.out.b"), f3 * d, d)?;
        Ok(Self { convs, out })
    }

    pub fn num_params(d: usize, feat_dim: usize) -> usize {
        let f3 = conv_len(conv_len(conv_len(feat_dim)));
        (9 * d + d) + 2 * (9 * d * d + d) + (f3 * d * d + d)
    }

    /// `[T, feat_dim]` → `[T', d_att]`. Output frame `j` depends on input
    /// frames `8j ..= 8j + 14` only.
    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, p: &Bound, feats: Var) -> Result<Var> {
        let (rows, f) = (t.value(feats).rows(), t.value(feats).cols());
        if subsampled_len(rows).is_none() {
            return Err(Error::TooShortAfterSubsampling { frames: rows });
        }
        let mut x = t.reshape(feats, &[rows, f, 1]);
        for &(w, b) in &self.convs {
            x = t.conv2d_k3s2(x, p[w], p[b]);
            x = t.relu(x);
        }
        let s = t.value(x).shape().to_vec();
        let x = t.reshape(x, &[s[0], s[1] * s[2]]);
        Ok(self.out.forward(t, p, x))
    }
}

/// Pre-norm Conformer block: ½-FFN, relative-position MHSA, causal
/// convolution module, ½-FFN, final LayerNorm.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub name: String,
    pub norm_ffn1: LayerNorm,
    pub ffn1: FfnSlot,
    pub norm_mha: LayerNorm,
    pub mha: MultiHeadAttention,
    pub norm_conv: LayerNorm,
    pub conv: ConvModule,
    pub norm_ffn2: LayerNorm,
    pub ffn2: FfnSlot,
    pub norm_final: LayerNorm,
}

/// Attention context of one encoder layer call.
struct AttnContext<'a, F> {
    past: Option<(&'a Tensor<F>, &'a Tensor<F>)>,
    mask: Option<Arc<Vec<bool>>>,
    q_offset: usize,
}

struct LayerOut<F> {
    y: Var,
    k: Var,
    v: Var,
    conv_tail: Tensor<F>,
}

impl EncoderLayer {
    fn new<F: Scalar>(pb: &mut ParamBuilder<'_, F>, l: usize, c: &ModelConfig) -> Result<Self> {
        let name = format!("enc.{l}");
        let d = c.d_att;
        Ok(Self {
            norm_ffn1: LayerNorm::new(pb, &format!("{name}.norm_ffn1"), d)?,
            ffn1: FfnSlot::new(pb, &format!("{name}.ffn1"), d, c.d_ff, c.num_experts, c.topk)?,
            norm_mha: LayerNorm::new(pb, &format!("{name}.norm_mha"), d)?,
            mha: MultiHeadAttention::new(pb, &format!("{name}.mhsa"), d, c.heads, true)?,
            norm_conv: LayerNorm::new(pb, &format!("{name}.norm_conv"), d)?,
            conv: ConvModule::new(pb, &format!("{name}.conv"), d, c.cnn_kernel)?,
            norm_ffn2: LayerNorm::new(pb, &format!("{name}.norm_ffn2"), d)?,
            ffn2: FfnSlot::new(pb, &format!("{name}.ffn2"), d, c.d_ff, c.num_experts, c.topk)?,
            norm_final: LayerNorm::new(pb, &format!("{name}.norm_final"), d)?,
            name,
        })
    }

    fn num_params(c: &ModelConfig) -> usize {
        let d = c.d_att;
        2 * FfnSlot::num_params(d, c.d_ff, c.num_experts)
            + MultiHeadAttention::num_params(d, true)
            + ConvModule::num_params(d, c.cnn_kernel)
            + 5 * 2 * d
    }

    fn half_ffn<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        x: Var,
        second: bool,
        routes: &mut Routes,
    ) -> Result<Var> {
        let (norm, ffn, slot) = if second {
            (&self.norm_ffn2, &self.ffn2, "ffn2")
        } else {
            (&self.norm_ffn1, &self.ffn1, "ffn1")
        };
        let h = norm.forward(t, p, x);
        let (h, route) = ffn.forward(t, p, h)?;
        if let Some(r) = route {
            routes.push((format!("{}.{slot}", self.name), r));
        }
        let h = t.scale(h, F::of(0.5));
        Ok(t.add(x, h))
    }

    fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        x: Var,
        attn: AttnContext<'_, F>,
        conv_pad: ConvPadding<F>,
        routes: &mut Routes,
    ) -> Result<LayerOut<F>> {
        let x = self.half_ffn(t, p, x, false, routes)?;

        let h = self.norm_mha.forward(t, p, x);
        let (mut k, mut v) = self.mha.project_kv(t, p, h);
        if let Some((pk, pv)) = attn.past {
            let (pk, pv) = (t.constant(pk.clone()), t.constant(pv.clone()));
            k = t.concat_rows(&[pk, k]);
            v = t.concat_rows(&[pv, v]);
        }
        let h = self.mha.attend(t, p, h, k, v, attn.mask, attn.q_offset)?;
        let x = t.add(x, h);

        let h = self.norm_conv.forward(t, p, x);
        let (h, conv_tail) = self.conv.forward(t, p, h, conv_pad);
        let x = t.add(x, h);

        let x = self.half_ffn(t, p, x, true, routes)?;
        let y = self.norm_final.forward(t, p, x);
        Ok(LayerOut { y, k, v, conv_tail })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    L2r,
    R2l,
}

impl Direction {
    pub fn prefix(self) -> &'static str {
        match self {
            Self::L2r => "dec_l2r",
            Self::R2l => "dec_r2l",
        }
    }
}

/// Teacher-forcing input `<sos> + labels` (reversed for r2l).
pub fn decoder_input(labels: &[usize], dir: Direction, sos: usize) -> Vec<usize> {
    let mut v = vec![sos];
    match dir {
        Direction::L2r => v.extend_from_slice(labels),
        Direction::R2l => v.extend(labels.iter().rev()),
    }
    v
}

/// Prediction targets `labels + <eos>` (reversed for r2l).
pub fn decoder_target(labels: &[usize], dir: Direction, eos: usize) -> Vec<usize> {
    let mut v: Vec<usize> = match dir {
        Direction::L2r => labels.to_vec(),
        Direction::R2l => labels.iter().rev().copied().collect(),
    };
    v.push(eos);
    v
}

/// Pre-norm Transformer decoder layer: causal self-attention, source
/// attention over the encoder output, FFN (or MoE).
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub name: String,
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_src: LayerNorm,
    pub src_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FfnSlot,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub dir: Direction,
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub out: Linear,
}

impl Decoder {
    fn new<F: Scalar>(pb: &mut ParamBuilder<'_, F>, dir: Direction, c: &ModelConfig) -> Result<Self> {
        let pre = dir.prefix();
        let d = c.d_att;
        let embed = pb.weight(&format!("{pre}.embed"), c.vocab, d)?;
        let layers = (0..c.n_dec_layers)
            .map(|l| {
                let name = format!("{pre}.{l}");
                Ok(DecoderLayer {
                    norm_self: LayerNorm::new(pb, &format!("{name}.norm_self"), d)?,
                    self_attn: MultiHeadAttention::new(pb, &format!("{name}.self_attn"), d, c.heads, false)?,
                    norm_src: LayerNorm::new(pb, &format!("{name}.norm_src"), d)?,
                    src_attn: MultiHeadAttention::new(pb, &format!("{name}.src_attn"), d, c.heads, false)?,
                    norm_ffn: LayerNorm::new(pb, &format!("{name}.norm_ffn"), d)?,
                    ffn: FfnSlot::new(pb, &format!("{name}.ffn"), d, c.d_ff, c.num_experts, c.topk)?,
                    name,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dir,
            embed,
            layers,
            norm: LayerNorm::new(pb, &format!("{pre}.norm"), d)?,
            out: Linear::new(pb, &format!("{pre}.out.W"), Some(&format!("{pre}.out.b")), d, c.vocab)?,
        })
    }

    fn num_params(c: &ModelConfig) -> usize {
        let d = c.d_att;
        let layer = 2 * MultiHeadAttention::num_params(d, false) + FfnSlot::num_params(d, c.d_ff, c.num_experts) + 3 * 2 * d;
        c.vocab * d + c.n_dec_layers * layer + 2 * d + (d * c.vocab + c.vocab)
    }

    /// Logits of several independent input sequences, stacked row-wise in
    /// order. Position-wise sublayers run once over the stack; only causal
    /// self-attention is split per sequence.
    fn forward_batch<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        enc: Var,
        inputs: &[Vec<usize>],
        routes: &mut Routes,
    ) -> Result<Var> {
        let d = t.value(enc).cols();
        let spans: Vec<(usize, usize)> = inputs
            .iter()
            .scan(0, |start, s| {
                let span = (*start, s.len());
                *start += s.len();
                Some(span)
            })
            .collect();
        let x = t.gather_rows(p[self.embed], inputs.concat());
        let x = t.scale(x, F::of((d as f64).sqrt()));
        let pe = t.constant(sinusoid_table(inputs.iter().flat_map(|s| 0..s.len() as i64), d));
        let mut x = t.add(x, pe);
        let causal: Vec<_> = spans.iter().map(|&(_, n)| make_chunk_mask(n, 1).attention_mask()).collect();
        for layer in &self.layers {
            let h = layer.norm_self.forward(t, p, x);
            let att = &layer.self_attn;
            let q = att.q.forward(t, p, h);
            let (k, v) = att.project_kv(t, p, h);
            let h = if spans.len() == 1 {
                att.attention_heads(t, p, q, k, v, causal[0].clone(), 0)?
            } else {
                let mut parts = Vec::with_capacity(spans.len());
                for (&(start, n), mask) in spans.iter().zip(&causal) {
                    let rows: Vec<usize> = (start..start + n).collect();
                    let qs = t.gather_rows(q, rows.clone());
                    let ks = t.gather_rows(k, rows.clone());
                    let vs = t.gather_rows(v, rows);
                    parts.push(att.attention_heads(t, p, qs, ks, vs, mask.clone(), 0)?);
                }
                t.concat_rows(&parts)
            };
            let h = att.out.forward(t, p, h);
            x = t.add(x, h);
            let h = layer.norm_src.forward(t, p, x);
            let h = layer.src_attn.forward(t, p, h, enc, None)?;
            x = t.add(x, h);
            let h = layer.norm_ffn.forward(t, p, x);
            let (h, route) = layer.ffn.forward(t, p, h)?;
            if let Some(r) = route {
                routes.push((format!("{}.ffn", layer.name), r));
            }
            x = t.add(x, h);
        }
        let x = self.norm.forward(t, p, x);
        Ok(self.out.forward(t, p, x))
    }
}

/// Per-layer streaming state: projected keys/values of every frame seen so
/// far and the convolution's left context.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<F: Scalar> {
    pub k: Tensor<F>,
    pub v: Tensor<F>,
    pub conv_tail: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCache<F: Scalar> {
    pub chunk: usize,
    /// Subsampled frames already encoded.
    pub frames: usize,
    pub layers: Vec<LayerCache<F>>,
}

impl<F: Scalar> EncoderCache<F> {
    pub fn new(config: &ModelConfig, chunk: usize) -> Self {
        let d = config.d_att;
        Self {
            chunk: chunk.max(1),
            frames: 0,
            layers: (0..config.m_layers)
                .map(|_| LayerCache {
                    k: Tensor::zeros(&[0, d]),
                    v: Tensor::zeros(&[0, d]),
                    conv_tail: Tensor::zeros(&[config.cnn_kernel - 1, d]),
                })
                .collect(),
        }
    }
}

/// Layer structure and parameter handles; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Architecture {
    pub config: ModelConfig,
    pub sub: Subsampling,
    pub enc: Vec<EncoderLayer>,
    pub ctc: Linear,
    pub l2r: Decoder,
    pub r2l: Decoder,
}

/// Values produced by [`Architecture::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub encoder_out: Var,
    pub ctc_logits: Var,
    pub l2r_logits: Option<Var>,
    pub r2l_logits: Option<Var>,
    pub mask: ChunkMask,
    pub routes: Routes,
}

impl Architecture {
    pub fn build<F: Scalar>(config: &ModelConfig, pb: &mut ParamBuilder<'_, F>) -> Result<Self> {
        config.validate()?;
        let c = config;
        Ok(Self {
            sub: Subsampling::new(pb, c.d_att, c.feat_dim)?,
            enc: (0..c.m_layers).map(|l| EncoderLayer::new(pb, l, c)).collect::<Result<_>>()?,
            ctc: Linear::new(pb, "ctc.W", Some("ctc.b"), c.d_att, c.vocab)?,
            l2r: Decoder::new(pb, Direction::L2r, c)?,
            r2l: Decoder::new(pb, Direction::R2l, c)?,
            config: config.clone(),
        })
    }

    /// Closed-form parameter count; equals the allocated total.
    pub fn num_params(c: &ModelConfig) -> usize {
        Subsampling::num_params(c.d_att, c.feat_dim)
            + c.m_layers * EncoderLayer::num_params(c)
            + (c.d_att * c.vocab + c.vocab)
            + 2 * Decoder::num_params(c)
    }

    pub fn decoder(&self, dir: Direction) -> &Decoder {
        match dir {
            Direction::L2r => &self.l2r,
            Direction::R2l => &self.r2l,
        }
    }

    pub fn subsample<F: Scalar>(&self, t: &mut Tape<F>, p: &Bound, feats: Var) -> Result<Var> {
        if t.value(feats).cols() != self.config.feat_dim {
            return Err(Error::shape(format!(
                "features have {} dims, model expects {}",
                t.value(feats).cols(),
                self.config.feat_dim
            )));
        }
        self.sub.forward(t, p, feats)
    }

    /// Encode the whole subsampled sequence under `mask`.
    pub fn encode<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        x: Var,
        mask: &ChunkMask,
        routes: &mut Routes,
    ) -> Result<Var> {
        let att = mask.attention_mask();
        let mut x = x;
        for layer in &self.enc {
            let ctx = AttnContext { past: None, mask: att.clone(), q_offset: 0 };
            x = layer.forward(t, p, x, ctx, ConvPadding::Causal, routes)?.y;
        }
        Ok(x)
    }

    /// Encode the next chunk (`<= C` subsampled frames) of a stream,
    /// extending `cache`. The rows equal the corresponding rows of
    /// [`Architecture::encode`] on the whole sequence with chunk size `C`.
    pub fn encode_chunk<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        chunk: Var,
        cache: &mut EncoderCache<F>,
        routes: &mut Routes,
    ) -> Result<Var> {
        let (rows, d) = (t.value(chunk).rows(), t.value(chunk).cols());
        if d != self.config.d_att || cache.layers.len() != self.enc.len() {
            return Err(Error::Stream(format!(
                "cache/config mismatch: chunk width {d}, {} cached layers for a {}-layer d_att={} encoder",
                cache.layers.len(),
                self.enc.len(),
                self.config.d_att
            )));
        }
        if rows == 0 || rows > cache.chunk || cache.frames % cache.chunk != 0 {
            return Err(Error::Stream(format!(
                "chunk of {rows} frames after {} frames does not fit chunk size {}",
                cache.frames, cache.chunk
            )));
        }
        let mut x = chunk;
        for (layer, lc) in self.enc.iter().zip(cache.layers.iter_mut()) {
            let ctx = AttnContext { past: Some((&lc.k, &lc.v)), mask: None, q_offset: cache.frames };
            let pad = ConvPadding::Cached(lc.conv_tail.clone());
            let out = layer.forward(t, p, x, ctx, pad, routes)?;
            lc.k = t.value(out.k).clone();
            lc.v = t.value(out.v).clone();
            lc.conv_tail = out.conv_tail;
            x = out.y;
        }
        cache.frames += rows;
        Ok(x)
    }

    pub fn ctc_logits<F: Scalar>(&self, t: &mut Tape<F>, p: &Bound, enc: Var) -> Var {
        self.ctc.forward(t, p, enc)
    }

    /// Teacher-forced decoder logits `[U + 1, V]`.
    pub fn decode<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        enc: Var,
        labels: &[usize],
        dir: Direction,
        routes: &mut Routes,
    ) -> Result<Var> {
        self.decode_batch(t, p, enc, &[labels], dir, routes)
    }

    /// Decoder logits for several label sequences in one pass, stacked
    /// row-wise; sequence `i` occupies `len(labels[i]) + 1` rows.
    pub fn decode_batch<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        enc: Var,
        labels: &[&[usize]],
        dir: Direction,
        routes: &mut Routes,
    ) -> Result<Var> {
        let v = self.config.vocab;
        if let Some(&bad) = labels.iter().flat_map(|l| l.iter()).find(|&&l| l >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let inputs: Vec<Vec<usize>> = labels.iter().map(|l| decoder_input(l, dir, self.config.sos_eos())).collect();
        self.decoder(dir).forward_batch(t, p, enc, &inputs, routes)
    }

    /// Subsample, encode under the chunk mask, CTC head and, when labels are
    /// given, both decoders.
    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        feats: &Tensor<F>,
        labels: Option<&[usize]>,
        chunk: Option<usize>,
    ) -> Result<ForwardOutput> {
        let x = t.constant(feats.clone());
        self.forward_var(t, p, x, labels, chunk)
    }

    /// [`Architecture::forward`] on features already on the tape.
    pub fn forward_var<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        feats: Var,
        labels: Option<&[usize]>,
        chunk: Option<usize>,
    ) -> Result<ForwardOutput> {
        let x = self.subsample(t, p, feats)?;
        let t_prime = t.value(x).rows();
        let mask = make_chunk_mask(t_prime, chunk.unwrap_or(t_prime).max(1));
        let mut routes = Routes::new();
        let enc = self.encode(t, p, x, &mask, &mut routes)?;
        let ctc_logits = self.ctc_logits(t, p, enc);
        let (mut l2r_logits, mut r2l_logits) = (None, None);
        if let Some(labels) = labels {
            l2r_logits = Some(self.decode(t, p, enc, labels, Direction::L2r, &mut routes)?);
            r2l_logits = Some(self.decode(t, p, enc, labels, Direction::R2l, &mut routes)?);
        }
        Ok(ForwardOutput { encoder_out: enc, ctc_logits, l2r_logits, r2l_logits, mask, routes })
    }
}

/// An architecture together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub arch: Architecture,
    pub params: ParamStore<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::build(config, &mut ParamBuilder { store: &mut params, rng: &mut rng })?;
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model { arch: self.arch.clone(), params: self.params.cast() }
    }

    /// An MoE model whose experts all copy the corresponding dense FFN, so
    /// it computes the same function as `self` for any routing. Routers are
    /// freshly initialised from `seed`.
    pub fn expand_to_moe(&self, num_experts: usize, topk: usize, seed: u64) -> Result<Self> {
        if self.config().is_moe() {
            return Err(Error::config("model already has experts"));
        }
        let cfg = ModelConfig { num_experts, topk, ..self.config().clone() };
        let mut moe = Self::new(&cfg, seed)?;
        let names: Vec<String> = moe.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            if name.ends_with(".router.W_r") {
                continue;
            }
            let src = match name.find(".expert") {
                Some(i) => {
                    let rest = &name[i + ".expert".len()..];
                    let dot = rest.find('.').expect("expert parameter suffix");
                    format!("{}{}", &name[..i], &rest[dot..])
                }
                None => name.clone(),
            };
            let value = (*self
                .params
                .by_name(&src)
                .ok_or_else(|| Error::config(format!("dense model lacks {src}")))?
                .value)
                .clone();
            let id = moe.params.id(&name).unwrap();
            moe.params.set(id, value)?;
        }
        Ok(moe)
    }
}

pub fn ffn_num_params(c: &ModelConfig) -> usize {
    FeedForward::num_params(c.d_att, c.d_ff)
}
