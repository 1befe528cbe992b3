//! Layer building blocks shared by the encoder and decoders: linear maps,
//! layer norm, position-wise FFN, (relative-position) multi-head attention
//! and the Conformer convolution module.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W + b`.
pub fn linear<F: Scalar>(t: &mut Tape<F>, x: Var, w: Var, b: Option<Var>) -> Var {
    let y = t.matmul(x, w);
    match b {
        Some(b) => t.add_bias(y, b),
        None => y,
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Scalar>(
        pb: &mut ParamBuilder<'_, F>,
        w_name: &str,
        b_name: Option<&str>,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = pb.weight(w_name, d_in, d_out)?;
        let b = b_name.map(|n| pb.zeros(n, &[d_out])).transpose()?;
        Ok(Self { w, b })
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, p: &Bound, x: Var) -> Var {
        linear(t, x, p[self.w], self.b.map(|b| p[b]))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(pb: &mut ParamBuilder<'_, F>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.ones(&format!("{prefix}.gamma"), &[d])?,
            beta: pb.zeros(&format!("{prefix}.beta"), &[d])?,
        })
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, p: &Bound, x: Var) -> Var {
        t.layer_norm(x, p[self.gamma], p[self.beta], F::of(LN_EPS))
    }
}

/// Position-wise feed-forward network `W2·swish(W1·x + b1) + b2`; also the
/// expert type inside an MoE layer.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar>(
        pb: &mut ParamBuilder<'_, F>,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(pb, &format!("{prefix}.W1"), Some(&format!("{prefix}.b1")), d_model, d_ff)?,
            down: Linear::new(pb, &format!("{prefix}.W2"), Some(&format!("{prefix}.b2")), d_ff, d_model)?,
        })
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, p: &Bound, x: Var) -> Var {
        let h = self.up.forward(t, p, x);
        let h = t.swish(h);
        self.down.forward(t, p, h)
    }

    /// Parameter count of one FFN with these dims.
    pub fn num_params(d_model: usize, d_ff: usize) -> usize {
        d_model * d_ff + d_ff + d_ff * d_model + d_model
    }
}

/// `softmax(Q·Kᵀ/√d_k + pos_logits + mask_bias)·V`, masked positions receive
/// zero weight. `mask` is row-major `[T_q, T_kv]`.
pub fn scaled_dot_attention<F: Scalar>(
    t: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Arc<Vec<bool>>>,
    pos_logits: Option<Var>,
) -> Result<Var> {
    let d_k = t.value(q).cols();
    let mut scores = t.matmul_nt(q, k);
    if let Some(pl) = pos_logits {
        scores = t.add(scores, pl);
    }
    let scores = t.scale(scores, F::one() / F::of(d_k as f64).sqrt());
    let attn = t.softmax(scores, mask)?;
    Ok(t.matmul(attn, v))
}

/// Sinusoidal encoding of (possibly negative) positions, `[positions, d]`.
pub fn sinusoid_table<F: Scalar>(positions: impl Iterator<Item = i64>, d: usize) -> Tensor<F> {
    let rows: Vec<Vec<F>> = positions
        .map(|pos| {
            (0..d)
                .map(|j| {
                    let i = (j / 2) as f64;
                    let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
                    F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
                })
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows).expect("equal widths")
}

/// Transformer-XL style relative position parameters.
#[derive(Debug, Clone)]
pub struct RelPos {
    pub w_pos: ParamId,
    pub pos_u: ParamId,
    pub pos_v: ParamId,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub rel: Option<RelPos>,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(
        pb: &mut ParamBuilder<'_, F>,
        prefix: &str,
        d: usize,
        heads: usize,
        relative: bool,
    ) -> Result<Self> {
        let lin = |pb: &mut ParamBuilder<'_, F>, n: &str| {
            Linear::new(pb, &format!("{prefix}.W{n}"), Some(&format!("{prefix}.b{n}")), d, d)
        };
        let q = lin(pb, "q")?;
        let k = lin(pb, "k")?;
        let v = lin(pb, "v")?;
        let out = lin(pb, "o")?;
        let rel = if relative {
            Some(RelPos {
                w_pos: pb.weight(&format!("{prefix}.W_pos"), d, d)?,
                pos_u: pb.zeros(&format!("{prefix}.pos_u"), &[d])?,
                pos_v: pb.zeros(&format!("{prefix}.pos_v"), &[d])?,
            })
        } else {
            None
        };
        Ok(Self { heads, q, k, v, out, rel })
    }

    pub fn num_params(d: usize, relative: bool) -> usize {
        4 * (d * d + d) + if relative { d * d + 2 * d } else { 0 }
    }

    /// Key/value projections, the part of attention a streaming cache keeps.
    pub fn project_kv<F: Scalar>(&self, t: &mut Tape<F>, p: &Bound, x: Var) -> (Var, Var) {
        (self.k.forward(t, p, x), self.v.forward(t, p, x))
    }

    /// Attend from `x_q` (absolute positions `q_offset..`) over keys/values at
    /// absolute positions `0..T_kv`.
    #[allow(clippy::too_many_arguments)]
    pub fn attend<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        x_q: Var,
        k: Var,
        v: Var,
        mask: Option<Arc<Vec<bool>>>,
        q_offset: usize,
    ) -> Result<Var> {
        let q = self.q.forward(t, p, x_q);
        let heads = self.attention_heads(t, p, q, k, v, mask, q_offset)?;
        Ok(self.out.forward(t, p, heads))
    }

    /// Concatenated head outputs for already projected queries, before the
    /// output projection.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_heads<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Arc<Vec<bool>>>,
        q_offset: usize,
    ) -> Result<Var> {
        let d = t.value(q).cols();
        let d_k = d / self.heads;
        let t_q = t.value(q).rows();
        let t_kv = t.value(k).rows();

        // Relative position logits: distance dist = (q_offset + i) − j.
        let rel = self.rel.as_ref().map(|rel| {
            let d_min = q_offset as i64 + 1 - t_kv as i64;
            let r = t_q + t_kv - 1;
            let table = sinusoid_table::<F>(d_min..d_min + r as i64, d);
            let table = t.constant(table);
            let pos = t.matmul(table, p[rel.w_pos]);
            let q_u = t.add_bias(q, p[rel.pos_u]);
            let q_v = t.add_bias(q, p[rel.pos_v]);
            let idx: Vec<usize> = (0..t_q)
                .flat_map(|i| {
                    (0..t_kv).map(move |j| {
                        let dist = (q_offset + i) as i64 - j as i64;
                        i * r + (dist - d_min) as usize
                    })
                })
                .collect();
            (pos, q_u, q_v, Arc::new(idx), r)
        });

        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let kh = t.slice_cols(k, h * d_k, d_k);
            let vh = t.slice_cols(v, h * d_k, d_k);
            let out = match &rel {
                Some((pos, q_u, q_v, idx, _)) => {
                    let qu_h = t.slice_cols(*q_u, h * d_k, d_k);
                    let qv_h = t.slice_cols(*q_v, h * d_k, d_k);
                    let ph = t.slice_cols(*pos, h * d_k, d_k);
                    let bd_full = t.matmul_nt(qv_h, ph);
                    let bd = t.gather_flat(bd_full, idx.clone(), &[t_q, t_kv]);
                    scaled_dot_attention(t, qu_h, kh, vh, mask.clone(), Some(bd))?
                }
                None => {
                    let qh = t.slice_cols(q, h * d_k, d_k);
                    scaled_dot_attention(t, qh, kh, vh, mask.clone(), None)?
                }
            };
            head_outs.push(out);
        }
        Ok(t.concat_cols(&head_outs))
    }

    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        x_q: Var,
        x_kv: Var,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let (k, v) = self.project_kv(t, p, x_kv);
        self.attend(t, p, x_q, k, v, mask, 0)
    }
}

/// Left context for the depthwise convolution.
#[derive(Debug, Clone)]
pub enum ConvPadding<F> {
    /// `kernel − 1` zero rows on the left only.
    Causal,
    /// `(kernel − 1)/2` zero rows on each side.
    Symmetric,
    /// Left context carried over from the previous chunk (`kernel − 1` rows).
    Cached(Tensor<F>),
}

/// Conformer convolution module: pointwise (d→2d) → GLU → depthwise(k) →
/// LayerNorm → Swish → pointwise (d→d).
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub kernel: usize,
    pub pw1: Linear,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub norm: LayerNorm,
    pub pw2: Linear,
}

impl ConvModule {
    pub fn new<F: Scalar>(pb: &mut ParamBuilder<'_, F>, prefix: &str, d: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            kernel,
            pw1: Linear::new(pb, &format!("{prefix}.pw1_W"), Some(&format!("{prefix}.pw1_b")), d, 2 * d)?,
            dw_w: pb.weight(&format!("{prefix}.dw_w"), kernel, d)?,
            dw_b: pb.zeros(&format!("{prefix}.dw_b"), &[d])?,
            norm: LayerNorm::new(pb, &format!("{prefix}.norm"), d)?,
            pw2: Linear::new(pb, &format!("{prefix}.pw2_W"), Some(&format!("{prefix}.pw2_b")), d, d)?,
        })
    }

    pub fn num_params(d: usize, kernel: usize) -> usize {
        (d * 2 * d + 2 * d) + (kernel * d + d) + 2 * d + (d * d + d)
    }

    /// Returns the module output and the last `kernel − 1` rows of the
    /// depthwise input, which is the left context for the next chunk.
    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        x: Var,
        padding: ConvPadding<F>,
    ) -> (Var, Tensor<F>) {
        let d = t.value(x).cols();
        let ctx = self.kernel - 1;
        let h = self.pw1.forward(t, p, x);
        let h = t.glu(h);
        let padded = match padding {
            ConvPadding::Causal => {
                let z = t.constant(Tensor::zeros(&[ctx, d]));
                t.concat_rows(&[z, h])
            }
            ConvPadding::Cached(cache) => {
                assert_eq!(cache.shape(), &[ctx, d], "conv cache shape");
                let c = t.constant(cache);
                t.concat_rows(&[c, h])
            }
            ConvPadding::Symmetric => {
                let z = t.constant(Tensor::zeros(&[ctx / 2, d]));
                let z2 = t.constant(Tensor::zeros(&[ctx - ctx / 2, d]));
                t.concat_rows(&[z, h, z2])
            }
        };
        let pv = t.value(padded);
        let rows = pv.rows();
        let tail = pv.slice_rows(rows - ctx, rows);
        let y = t.depthwise_conv1d(padded, p[self.dw_w], p[self.dw_b]);
        let y = self.norm.forward(t, p, y);
        let y = t.swish(y);
        (self.pw2.forward(t, p, y), tail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_identity_and_hand_value() {
        let mut t = Tape::<f64>::no_grad();
        let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b0 = t.constant(Tensor::zeros(&[2]));
        let b1 = t.constant(Tensor::full(&[2], 1.0));
        let y0 = linear(&mut t, x, w, Some(b0));
        assert_eq!(t.value(y0).data(), &[1.0, 2.0]);
        let y1 = linear(&mut t, x, w, Some(b1));
        assert_eq!(t.value(y1).data(), &[2.0, 3.0]);
    }

    #[test]
    fn linear_weight_gradient_is_outer_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for shape in [(1, 2, 3), (3, 4, 2), (5, 3, 3)] {
            let x = rand_tensor(&mut rng, &[shape.0, shape.1]);
            let w = rand_tensor(&mut rng, &[shape.1, shape.2]);
            let b = rand_tensor(&mut rng, &[shape.2]);
            let report = grad_check(&[x.clone(), w, b], 1e-4, |t, v| {
                let y = linear(t, v[0], v[1], Some(v[2]));
                Ok(t.sum_all(y))
            })
            .unwrap();
            assert!(report.passed, "{report:?}");

            // d sum(y) / dW[i][j] = Σ_rows x[r][i]
            let mut t = Tape::new();
            let (vx, vw) = (t.constant(x.clone()), t.leaf_owned(Tensor::zeros(&[shape.1, shape.2])));
            let y = linear(&mut t, vx, vw, None);
            let s = t.sum_all(y);
            let g = t.backward(s);
            for i in 0..shape.1 {
                let col_sum: f64 = (0..shape.0).map(|r| x.row(r)[i]).sum();
                for j in 0..shape.2 {
                    assert!((g.get(vw).unwrap().data()[i * shape.2 + j] - col_sum).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut t = Tape::<f64>::no_grad();
        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let y = t.layer_norm(x, g, b, LN_EPS);
        let y = t.value(y).data().to_vec();
        assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4, "{y:?}");
        let c = t.constant(Tensor::full(&[1, 2], 7.0));
        let yc = t.layer_norm(c, g, b, LN_EPS);
        assert!(t.value(yc).data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::<f64>::no_grad();
        let q = t.constant(rand_tensor(&mut rng, &[3, 4]));
        let k = t.constant(rand_tensor(&mut rng, &[1, 4]));
        let v = t.constant(rand_tensor(&mut rng, &[1, 5]));
        let y = scaled_dot_attention(&mut t, q, k, v, None, None).unwrap();
        for r in 0..3 {
            assert_eq!(t.value(y).row(r), t.value(v).row(0));
        }
    }

    #[test]
    fn attention_uniform_scores_average_allowed_values() {
        let mut t = Tape::<f64>::no_grad();
        let q = t.constant(Tensor::zeros(&[2, 2]));
        let k = t.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let v = t.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 6.0]).unwrap());
        let mask = Arc::new(vec![true, true, false, true, true, true]);
        let y = scaled_dot_attention(&mut t, q, k, v, Some(mask), None).unwrap();
        let y = t.value(y).data();
        assert!((y[0] - 1.5).abs() < 1e-12 && (y[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_hand_softmax_weights() {
        // logits [[0, ln 3], [0, 0]] → row 0 weights [0.25, 0.75]
        let mut t = Tape::<f64>::no_grad();
        let q = t.constant(Tensor::new(vec![2, 1], vec![3f64.ln(), 0.0]).unwrap());
        let k = t.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
        let v = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = scaled_dot_attention(&mut t, q, k, v, None, None).unwrap();
        let y = t.value(y).data();
        assert!((y[0] - 0.25).abs() < 1e-12 && (y[1] - 0.75).abs() < 1e-12);
        assert!((y[2] - 0.5).abs() < 1e-12 && (y[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one_under_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (tq, tk) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let mut mask: Vec<bool> = (0..tq * tk).map(|_| rng.gen_bool(0.5)).collect();
            for r in 0..tq {
                mask[r * tk + rng.gen_range(0..tk)] = true;
            }
            let mut t = Tape::<f64>::no_grad();
            let x = t.constant(rand_tensor(&mut rng, &[tq, tk]));
            let a = t.softmax(x, Some(Arc::new(mask.clone()))).unwrap();
            let a = t.value(a);
            for r in 0..tq {
                let s: f64 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
                for c in 0..tk {
                    if !mask[r * tk + c] {
                        assert_eq!(a.row(r)[c], 0.0);
                    }
                }
            }
        }
    }

    fn build_mha(rel: bool) -> (ParamStore<f64>, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mha = {
            let mut pb = ParamBuilder { store: &mut store, rng: &mut rng };
            MultiHeadAttention::new(&mut pb, "att", 8, 2, rel).unwrap()
        };
        // non-zero position biases so their gradients are exercised
        for name in ["att.pos_u", "att.pos_v"] {
            if let Some(id) = store.id(name) {
                store.set(id, Tensor::from_fn(&[8], |i| 0.1 * i as f64 - 0.3)).unwrap();
            }
        }
        (store, mha)
    }

    #[test]
    fn grad_relative_attention() {
        let (store, mha) = build_mha(true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[4, 8]);
        let mut inputs = vec![x];
        inputs.extend(store.iter().map(|p| (*p.value).clone()));
        let mask: Arc<Vec<bool>> = Arc::new((0..16).map(|i| i % 4 <= (i / 4 | 1)).collect());
        let report = grad_check(&inputs, 1e-4, |t, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            let y = mha.forward(t, &bound, v[0], v[0], Some(mask.clone()))?;
            let w = Tensor::from_fn(t.value(y).shape(), |i| ((i % 5) as f64 - 2.0) / 3.0);
            Ok(t.weighted_sum(y, w))
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn relative_attention_chunked_matches_full() {
        // Attending from a suffix of queries with q_offset over all keys equals
        // the matching rows of full attention.
        let (store, mha) = build_mha(true);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[5, 8]);
        let mut t = Tape::no_grad();
        let p = store.bind(&mut t);
        let xv = t.constant(x.clone());
        let full = mha.forward(&mut t, &p, xv, xv, None).unwrap();
        let (k, v) = mha.project_kv(&mut t, &p, xv);
        let tail = t.constant(x.slice_rows(3, 5));
        let part = mha.attend(&mut t, &p, tail, k, v, None, 3).unwrap();
        let want = t.value(full).slice_rows(3, 5);
        assert!(t.value(part).max_abs_diff(&want) < 1e-12);
    }

    fn build_conv() -> (ParamStore<f64>, ConvModule) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = {
            let mut pb = ParamBuilder { store: &mut store, rng: &mut rng };
            ConvModule::new(&mut pb, "conv", 8, 15).unwrap()
        };
        (store, conv)
    }

    #[test]
    fn conv_module_zero_weights_give_zero_output() {
        let (mut store, conv) = build_conv();
        let ids: Vec<_> = store.iter().map(|p| p.name.clone()).collect();
        for n in ids {
            let id = store.id(&n).unwrap();
            let shape = store.get(id).value.shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut t = Tape::no_grad();
        let p = store.bind(&mut t);
        let x = t.constant(Tensor::full(&[6, 8], 0.7));
        let (y, _) = conv.forward(&mut t, &p, x, ConvPadding::Causal);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causal_conv_module_is_prefix_stable() {
        let (store, conv) = build_conv();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[10, 8]);
        for cut in [0, 4, 9] {
            let mut x2 = x.clone();
            for r in cut + 1..10 {
                for v in x2.row_mut(r) {
                    *v += 3.0;
                }
            }
            let mut t = Tape::no_grad();
            let p = store.bind(&mut t);
            let (a, b) = (t.constant(x.clone()), t.constant(x2));
            let (ya, _) = conv.forward(&mut t, &p, a, ConvPadding::Causal);
            let (yb, _) = conv.forward(&mut t, &p, b, ConvPadding::Causal);
            let (ya, yb) = (t.value(ya), t.value(yb));
            for r in 0..=cut {
                assert_eq!(ya.row(r), yb.row(r), "row {r} changed with cut {cut}");
            }
            if cut + 1 < 10 {
                assert_ne!(ya.row(cut + 1), yb.row(cut + 1));
            }
        }
    }

    #[test]
    fn cached_conv_matches_one_shot() {
        let (store, conv) = build_conv();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[9, 8]);
        let mut t = Tape::no_grad();
        let p = store.bind(&mut t);
        let full = t.constant(x.clone());
        let (yf, _) = conv.forward(&mut t, &p, full, ConvPadding::Causal);
        let a = t.constant(x.slice_rows(0, 4));
        let (ya, tail) = conv.forward(&mut t, &p, a, ConvPadding::Causal);
        let b = t.constant(x.slice_rows(4, 9));
        let (yb, _) = conv.forward(&mut t, &p, b, ConvPadding::Cached(tail));
        let joined = Tensor::concat_rows(&[t.value(ya), t.value(yb)]).unwrap();
        assert!(joined.max_abs_diff(t.value(yf)) < 1e-12);
    }

    #[test]
    fn grad_conv_module() {
        let (store, conv) = build_conv();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (rows, padding) in [(5, 0), (7, 1), (5, 1)] {
            let mut inputs = vec![rand_tensor(&mut rng, &[rows, 8])];
            inputs.extend(store.iter().map(|p| (*p.value).clone()));
            let report = grad_check(&inputs, 1e-4, |t, v| {
                let bound = Bound::from_vars(v[1..].to_vec());
                let pad = if padding == 0 { ConvPadding::Causal } else { ConvPadding::Symmetric };
                let (y, _) = conv.forward(t, &bound, v[0], pad);
                let w = Tensor::from_fn(t.value(y).shape(), |i| ((i % 7) as f64 - 3.0) / 4.0);
                Ok(t.weighted_sum(y, w))
            })
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }
}
