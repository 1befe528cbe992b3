//! Differentiable primitives. Every method records its forward value and the
//! analytic backward rule; `grad_check` tests cover each one.

use std::sync::Arc;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Scalar, Tensor};

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Scalar> Tape<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.custom(&[a, b], out, |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.custom(&[a, b], out, |g, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.custom(&[a, b], out, move |g, v| {
            let (va, vb) = (v.get(a), v.get(b));
            let ga = g.data().iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
            let gb = g.data().iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
            vec![
                Some(Tensor::new(g.shape().to_vec(), ga).unwrap()),
                Some(Tensor::new(g.shape().to_vec(), gb).unwrap()),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.custom(&[a], out, move |g, _| vec![Some(g.map(|x| x * s))])
    }

    /// `x [.., d] + b [d]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let d = vx.cols();
        assert_eq!(vb.len(), d, "bias length {} vs row width {d}", vb.len());
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        let b_shape = vb.shape().to_vec();
        self.custom(&[x, b], out, move |g, _| {
            let mut gb = vec![F::zero(); d];
            for r in 0..g.rows() {
                for (acc, &gg) in gb.iter_mut().zip(g.row(r)) {
                    *acc += gg;
                }
            }
            vec![Some(g.clone()), Some(Tensor::new(b_shape.clone(), gb).unwrap())]
        })
    }

    /// `a [m,k] · b [k,n]`. `a` may have leading batch dims which are
    /// flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be 2-D");
        assert_eq!(vb.shape()[0], k, "matmul inner dims {:?} x {:?}", va.shape(), vb.shape());
        let n = vb.shape()[1];
        let mut out = vec![F::zero(); m * n];
        matmul_into(va.data(), false, vb.data(), false, m, k, n, &mut out, false);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.count_macs(m * k * n);
        let out = Tensor::new(shape, out).unwrap();
        self.custom(&[a, b], out, move |g, v| {
            let (va, vb) = (v.get(a), v.get(b));
            let mut ga = vec![F::zero(); m * k];
            matmul_into(g.data(), false, vb.data(), true, m, n, k, &mut ga, false);
            let mut gb = vec![F::zero(); k * n];
            matmul_into(va.data(), true, g.data(), false, k, m, n, &mut gb, false);
            vec![
                Some(Tensor::new(va.shape().to_vec(), ga).unwrap()),
                Some(Tensor::new(vb.shape().to_vec(), gb).unwrap()),
            ]
        })
    }

    /// `a [m,k] · bᵀ` where `b` is stored `[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let n = vb.rows();
        assert_eq!(vb.cols(), k, "matmul_nt inner dims {:?} x {:?}ᵀ", va.shape(), vb.shape());
        let mut out = vec![F::zero(); m * n];
        matmul_into(va.data(), false, vb.data(), true, m, k, n, &mut out, false);
        self.count_macs(m * k * n);
        let out = Tensor::new(vec![m, n], out).unwrap();
        self.custom(&[a, b], out, move |g, v| {
            let (va, vb) = (v.get(a), v.get(b));
            let mut ga = vec![F::zero(); m * k];
            matmul_into(g.data(), false, vb.data(), false, m, n, k, &mut ga, false);
            let mut gb = vec![F::zero(); n * k];
            matmul_into(g.data(), true, va.data(), false, n, m, k, &mut gb, false);
            vec![
                Some(Tensor::new(va.shape().to_vec(), ga).unwrap()),
                Some(Tensor::new(vb.shape().to_vec(), gb).unwrap()),
            ]
        })
    }

    /// Per-row normalisation over the last dimension followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let vx = self.value(x);
        let d = vx.cols();
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let rows = vx.rows();
        let df = F::of(d as f64);
        let mut xhat = vec![F::zero(); rows * d];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] = xhat[r * d + j] * vg.data()[j] + vb.data()[j];
            }
        }
        let shape = vx.shape().to_vec();
        let out = Tensor::new(shape.clone(), out).unwrap();
        self.custom(&[x, gamma, beta], out, move |g, v| {
            let vg = v.get(gamma);
            let mut gx = vec![F::zero(); rows * d];
            let mut ggamma = vec![F::zero(); d];
            let mut gbeta = vec![F::zero(); d];
            for r in 0..rows {
                let gr = g.row(r);
                let xh = &xhat[r * d..(r + 1) * d];
                let mut sum_dxh = F::zero();
                let mut sum_dxh_xh = F::zero();
                for j in 0..d {
                    ggamma[j] += gr[j] * xh[j];
                    gbeta[j] += gr[j];
                    let dxh = gr[j] * vg.data()[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh[j];
                }
                for j in 0..d {
                    let dxh = gr[j] * vg.data()[j];
                    gx[r * d + j] = inv_std[r] * (dxh - sum_dxh / df - xh[j] * sum_dxh_xh / df);
                }
            }
            vec![
                Some(Tensor::new(shape.clone(), gx).unwrap()),
                Some(Tensor::new(v.get(gamma).shape().to_vec(), ggamma).unwrap()),
                Some(Tensor::new(v.get(beta).shape().to_vec(), gbeta).unwrap()),
            ]
        })
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.custom(&[x], out, move |g, v| {
            let vx = v.get(x);
            let data = g
                .data()
                .iter()
                .zip(vx.data())
                .map(|(&g, &x)| {
                    let s = sigmoid(x);
                    g * (s + x * s * (F::one() - s))
                })
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).unwrap())]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        self.custom(&[x], out, move |g, v| {
            let vx = v.get(x);
            let data = g
                .data()
                .iter()
                .zip(vx.data())
                .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).unwrap())]
        })
    }

    /// Gated linear unit over the last dimension: `[.., 2d] -> [.., d]`,
    /// `a · sigmoid(b)` with `a` the first half.
    pub fn glu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let two_d = vx.cols();
        assert!(two_d % 2 == 0, "glu needs an even last dimension");
        let d = two_d / 2;
        let rows = vx.rows();
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            let row = vx.row(r);
            for j in 0..d {
                out[r * d + j] = row[j] * sigmoid(row[d + j]);
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = d;
        let in_shape = vx.shape().to_vec();
        let out = Tensor::new(shape, out).unwrap();
        self.custom(&[x], out, move |g, v| {
            let vx = v.get(x);
            let mut gx = vec![F::zero(); rows * two_d];
            for r in 0..rows {
                let row = vx.row(r);
                for j in 0..d {
                    let s = sigmoid(row[d + j]);
                    let gg = g.data()[r * d + j];
                    gx[r * two_d + j] = gg * s;
                    gx[r * two_d + d + j] = gg * row[j] * s * (F::one() - s);
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).unwrap())]
        })
    }

    /// Row-wise softmax over the last dimension. Disallowed positions
    /// (`mask[i] == false`, same layout as `x`) get probability zero.
    pub fn softmax(&mut self, x: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let vx = self.value(x);
        let (rows, d) = (vx.rows(), vx.cols());
        if let Some(m) = &mask {
            assert_eq!(m.len(), rows * d, "mask layout mismatch");
        }
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            let row = vx.row(r);
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[r * d + j]);
            let mut max: Option<F> = None;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    max = Some(max.map_or(v, |m: F| m.max(v)));
                }
            }
            let Some(max) = max else {
                return Err(Error::EmptyAttentionRow { row: r });
            };
            let mut z = F::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    out[r * d + j] = e;
                    z += e;
                }
            }
            for o in out[r * d..(r + 1) * d].iter_mut() {
                *o = *o / z;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out).unwrap();
        let y = self.custom(&[x], out, move |g, _| vec![Some(g.clone())]);
        if !self.requires_grad(y) {
            return Ok(y);
        }
        // Replace the placeholder rule with one that reads the output value.
        let rule = move |g: &Tensor<F>, v: &super::Values<'_, F>| {
            let p = v.get(y);
            let mut gx = vec![F::zero(); rows * d];
            for r in 0..rows {
                let pr = p.row(r);
                let gr = g.row(r);
                let dot: F = pr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                for j in 0..d {
                    gx[r * d + j] = pr[j] * (gr[j] - dot);
                }
            }
            vec![Some(Tensor::new(p.shape().to_vec(), gx).unwrap())]
        };
        self.nodes[y.0].backward = Some(Box::new(rule));
        Ok(y)
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (rows, d) = (vx.rows(), vx.cols());
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            let row = vx.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            for j in 0..d {
                out[r * d + j] = row[j] - lse;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out).unwrap();
        let y = self.custom(&[x], out, |g, _| vec![Some(g.clone())]);
        if self.requires_grad(y) {
            let rule = move |g: &Tensor<F>, v: &super::Values<'_, F>| {
                let lp = v.get(y);
                let mut gx = vec![F::zero(); rows * d];
                for r in 0..rows {
                    let gr = g.row(r);
                    let gs: F = gr.iter().copied().sum();
                    for (j, &l) in lp.row(r).iter().enumerate() {
                        gx[r * d + j] = gr[j] - l.exp() * gs;
                    }
                }
                vec![Some(Tensor::new(lp.shape().to_vec(), gx).unwrap())]
            };
            self.nodes[y.0].backward = Some(Box::new(rule));
        }
        y
    }

    /// Columns `start..start+len` of a `[rows, cols]` value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], out).unwrap();
        let in_shape = vx.shape().to_vec();
        self.custom(&[x], out, move |g, _| {
            let mut gx = vec![F::zero(); rows * cols];
            for r in 0..rows {
                gx[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).unwrap())]
        })
    }

    /// Horizontal concatenation of `[rows, c_i]` values.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).cols()).collect();
        assert!(xs.iter().all(|&v| self.value(v).rows() == rows), "concat_cols row mismatch");
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], out).unwrap();
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&v| self.value(v).shape().to_vec()).collect();
        self.custom(xs, out, move |g, _| {
            let mut grads: Vec<Vec<F>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
            for r in 0..rows {
                let mut off = 0;
                for (gi, &w) in grads.iter_mut().zip(&widths) {
                    gi.extend_from_slice(&g.row(r)[off..off + w]);
                    off += w;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(gi, s)| Some(Tensor::new(s.clone(), gi).unwrap()))
                .collect()
        })
    }

    /// Vertical concatenation of `[r_i, cols]` values.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let parts: Vec<&Tensor<F>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&parts).expect("concat_rows column mismatch");
        let counts: Vec<usize> = parts.iter().map(|t| t.rows()).collect();
        let shapes: Vec<Vec<usize>> = parts.iter().map(|t| t.shape().to_vec()).collect();
        self.custom(xs, out, move |g, _| {
            let mut off = 0;
            counts
                .iter()
                .zip(&shapes)
                .map(|(&n, s)| {
                    let part = g.slice_rows(off, off + n);
                    off += n;
                    Some(part.reshape(s).unwrap())
                })
                .collect()
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let in_shape = vx.shape().to_vec();
        let out = vx.clone().reshape(shape).expect("reshape element count");
        self.custom(&[x], out, move |g, _| {
            vec![Some(g.clone().reshape(&in_shape).unwrap())]
        })
    }

    /// Select rows of a `[n, d]` value (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let vx = self.value(x);
        let (n, d) = (vx.rows(), vx.cols());
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            assert!(i < n, "gather_rows index {i} out of range {n}");
            out.extend_from_slice(vx.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], out).unwrap();
        let in_shape = vx.shape().to_vec();
        self.custom(&[x], out, move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            for (r, &i) in idx.iter().enumerate() {
                for (a, &b) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                    *a += b;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Place the rows of `x [k, d]` at positions `idx` of a zero `[rows, d]`
    /// output (indices distinct).
    pub fn scatter_rows(&mut self, x: Var, idx: Vec<usize>, rows: usize) -> Var {
        let vx = self.value(x);
        let d = vx.cols();
        assert_eq!(vx.rows(), idx.len());
        let mut out = Tensor::zeros(&[rows, d]);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(vx.row(r));
        }
        let in_shape = vx.shape().to_vec();
        self.custom(&[x], out, move |g, _| {
            let mut gx = Vec::with_capacity(idx.len() * d);
            for &i in &idx {
                gx.extend_from_slice(g.row(i));
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).unwrap())]
        })
    }

    /// Gated scatter-add: `out[frames_j[r]] += gates.flat[gate_idx_j[r]] · ys_j[r]`
    /// into a zero output of `shape`, one term per `(ys_j, frames_j, gate_idx_j)`.
    pub fn gated_scatter_add(&mut self, gates: Var, parts: Vec<(Var, Vec<usize>, Vec<usize>)>, shape: [usize; 2]) -> Var {
        let vg = self.value(gates);
        let [rows, d] = shape;
        let mut out = Tensor::zeros(&[rows, d]);
        for (y, frames, gidx) in &parts {
            let vy = self.value(*y);
            assert_eq!(vy.rows(), frames.len(), "gated_scatter_add row count");
            assert_eq!(gidx.len(), frames.len(), "gated_scatter_add gate count");
            for (r, (&f, &gi)) in frames.iter().zip(gidx).enumerate() {
                let k = vg.data()[gi];
                for (o, &v) in out.row_mut(f).iter_mut().zip(vy.row(r)) {
                    *o += k * v;
                }
            }
        }
        let mut inputs = vec![gates];
        inputs.extend(parts.iter().map(|(y, _, _)| *y));
        let gate_shape = vg.shape().to_vec();
        self.custom(&inputs, out, move |g, v| {
            let vg = v.get(gates);
            let mut gg = Tensor::zeros(&gate_shape);
            let mut grads = Vec::with_capacity(parts.len() + 1);
            for (y, frames, gidx) in &parts {
                let vy = v.get(*y);
                let mut gy = Vec::with_capacity(frames.len() * d);
                for (r, (&f, &gi)) in frames.iter().zip(gidx).enumerate() {
                    let k = vg.data()[gi];
                    gy.extend(g.row(f).iter().map(|&a| a * k));
                    gg.data_mut()[gi] += g.row(f).iter().zip(vy.row(r)).map(|(&a, &b)| a * b).sum();
                }
                grads.push(Some(Tensor::new(vec![frames.len(), d], gy).unwrap()));
            }
            grads.insert(0, Some(gg));
            grads
        })
    }

    /// Scale row `i` of `x [n, d]` by `s[i]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        let n = vx.rows();
        assert_eq!(vs.len(), n, "mul_rows scale length");
        let mut out = vx.clone();
        for r in 0..n {
            let k = vs.data()[r];
            for o in out.row_mut(r) {
                *o *= k;
            }
        }
        self.custom(&[x, s], out, move |g, v| {
            let (vx, vs) = (v.get(x), v.get(s));
            let mut gx = g.clone();
            let mut gs = vec![F::zero(); n];
            for r in 0..n {
                let k = vs.data()[r];
                for o in gx.row_mut(r) {
                    *o *= k;
                }
                gs[r] = g.row(r).iter().zip(vx.row(r)).map(|(&a, &b)| a * b).sum();
            }
            vec![Some(gx), Some(Tensor::new(vs.shape().to_vec(), gs).unwrap())]
        })
    }

    /// `out.flat[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather_flat(&mut self, x: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let data = idx.iter().map(|&i| vx.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data).expect("gather_flat shape");
        let in_shape = vx.shape().to_vec();
        self.custom(&[x], out, move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            for (&i, &gg) in idx.iter().zip(g.data()) {
                gx.data_mut()[i] += gg;
            }
            vec![Some(gx)]
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::scalar(vx.sum());
        let shape = vx.shape().to_vec();
        self.custom(&[x], out, move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    /// `Σ x ⊙ w` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor<F>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), w.shape(), "weighted_sum shape mismatch");
        let s = vx.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        self.custom(&[x], Tensor::scalar(s), move |g, _| {
            let k = g.data()[0];
            vec![Some(w.map(|v| v * k))]
        })
    }

    /// 3×3 convolution with stride 2 along both spatial axes and no padding.
    /// `x [H, W, C_in]` (channels last), `w [9·C_in, C_out]` ordered
    /// `(kh, kw, c_in)`, `b [C_out]` → `[H', W', C_out]` with
    /// `H' = (H − 3)/2 + 1`.
    pub fn conv2d_k3s2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 3, "conv2d input must be [H, W, C]");
        let (h, wd, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(h >= 3 && wd >= 3, "conv2d input too small: {:?}", vx.shape());
        let (ho, wo) = ((h - 3) / 2 + 1, (wd - 3) / 2 + 1);
        let vw = self.value(w);
        let kdim = 9 * cin;
        assert_eq!(vw.shape()[0], kdim, "conv2d weight rows");
        let cout = vw.shape()[1];
        let col = im2col(vx.data(), wd, cin, ho, wo);
        let mut out = vec![F::zero(); ho * wo * cout];
        matmul_into(&col, false, vw.data(), false, ho * wo, kdim, cout, &mut out, false);
        let vb = self.value(b);
        for r in 0..ho * wo {
            for (o, &bb) in out[r * cout..(r + 1) * cout].iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        let b_shape = vb.shape().to_vec();
        self.count_macs(ho * wo * kdim * cout);
        let out = Tensor::new(vec![ho, wo, cout], out).unwrap();
        let col = if self.grad_enabled() { col } else { Vec::new() };
        self.custom(&[x, w, b], out, move |g, v| {
            let vw = v.get(w);
            let rows = ho * wo;
            let mut gcol = vec![F::zero(); rows * kdim];
            matmul_into(g.data(), false, vw.data(), true, rows, cout, kdim, &mut gcol, false);
            let mut gx = vec![F::zero(); h * wd * cin];
            col2im_add(&gcol, &mut gx, wd, cin, ho, wo);
            let mut gw = vec![F::zero(); kdim * cout];
            matmul_into(&col, true, g.data(), false, kdim, rows, cout, &mut gw, false);
            let mut gb = vec![F::zero(); cout];
            for r in 0..rows {
                for (acc, &gg) in gb.iter_mut().zip(&g.data()[r * cout..(r + 1) * cout]) {
                    *acc += gg;
                }
            }
            vec![
                Some(Tensor::new(vec![h, wd, cin], gx).unwrap()),
                Some(Tensor::new(vec![kdim, cout], gw).unwrap()),
                Some(Tensor::new(b_shape.clone(), gb).unwrap()),
            ]
        })
    }

    /// Depthwise 1-D convolution over time, "valid" mode: `x [T + k − 1, d]`,
    /// `w [k, d]`, `b [d]` → `[T, d]`. Callers supply left context (zeros or
    /// a streaming cache) by prepending rows.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (tin, d) = (vx.rows(), vx.cols());
        let k = vw.rows();
        assert_eq!(vw.cols(), d, "depthwise weight width");
        assert!(tin >= k, "depthwise conv needs at least {k} input rows, got {tin}");
        let t = tin - k + 1;
        let mut out = vec![F::zero(); t * d];
        for i in 0..t {
            let o = &mut out[i * d..(i + 1) * d];
            o.copy_from_slice(vb.data());
            for j in 0..k {
                let xr = vx.row(i + j);
                let wr = vw.row(j);
                for c in 0..d {
                    o[c] += xr[c] * wr[c];
                }
            }
        }
        let (x_shape, w_shape, b_shape) =
            (vx.shape().to_vec(), vw.shape().to_vec(), vb.shape().to_vec());
        self.count_macs(t * k * d);
        let out = Tensor::new(vec![t, d], out).unwrap();
        self.custom(&[x, w, b], out, move |g, v| {
            let (vx, vw) = (v.get(x), v.get(w));
            let mut gx = vec![F::zero(); tin * d];
            let mut gw = vec![F::zero(); k * d];
            let mut gb = vec![F::zero(); d];
            for i in 0..t {
                let gr = g.row(i);
                for c in 0..d {
                    gb[c] += gr[c];
                }
                for j in 0..k {
                    let xr = vx.row(i + j);
                    let wr = vw.row(j);
                    for c in 0..d {
                        gx[(i + j) * d + c] += gr[c] * wr[c];
                        gw[j * d + c] += gr[c] * xr[c];
                    }
                }
            }
            vec![
                Some(Tensor::new(x_shape.clone(), gx).unwrap()),
                Some(Tensor::new(w_shape.clone(), gw).unwrap()),
                Some(Tensor::new(b_shape.clone(), gb).unwrap()),
            ]
        })
    }
}

fn im2col<F: Scalar>(x: &[F], wd: usize, cin: usize, ho: usize, wo: usize) -> Vec<F> {
    let kdim = 9 * cin;
    let mut col = vec![F::zero(); ho * wo * kdim];
    for i in 0..ho {
        for j in 0..wo {
            let dst = &mut col[(i * wo + j) * kdim..(i * wo + j + 1) * kdim];
            for kh in 0..3 {
                let src_row = 2 * i + kh;
                let start = (src_row * wd + 2 * j) * cin;
                // three horizontally adjacent pixels are contiguous in memory
                dst[kh * 3 * cin..(kh + 1) * 3 * cin].copy_from_slice(&x[start..start + 3 * cin]);
            }
        }
    }
    col
}

fn col2im_add<F: Scalar>(col: &[F], gx: &mut [F], wd: usize, cin: usize, ho: usize, wo: usize) {
    let kdim = 9 * cin;
    for i in 0..ho {
        for j in 0..wo {
            let src = &col[(i * wo + j) * kdim..(i * wo + j + 1) * kdim];
            for kh in 0..3 {
                let start = ((2 * i + kh) * wd + 2 * j) * cin;
                for (a, &b) in gx[start..start + 3 * cin]
                    .iter_mut()
                    .zip(&src[kh * 3 * cin..(kh + 1) * 3 * cin])
                {
                    *a += b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Run grad_check on `f` for three random shapes produced by `shapes`.
    fn check3(
        seed: u64,
        shapes: impl Fn(usize) -> Vec<Vec<usize>>,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for trial in 0..3 {
            let inputs: Vec<Tensor<f64>> =
                shapes(trial).iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let report = grad_check(&inputs, 1e-4, |t, v| Ok(f(t, v))).unwrap();
            assert!(report.passed, "trial {trial}: {report:?}");
        }
    }

    /// Random projection so that outputs feed a scalar with non-uniform weights.
    fn project(t: &mut Tape<f64>, y: Var) -> Var {
        let n = t.value(y).len();
        let w = Tensor::from_fn(t.value(y).shape(), |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0);
        assert_eq!(w.len(), n);
        t.weighted_sum(y, w)
    }

    #[test]
    fn grad_matmul_variants() {
        check3(1, |i| vec![vec![2 + i, 3], vec![3, 4 + i]], |t, v| {
            let y = t.matmul(v[0], v[1]);
            project(t, y)
        });
        check3(2, |i| vec![vec![2 + i, 3], vec![4 + i, 3]], |t, v| {
            let y = t.matmul_nt(v[0], v[1]);
            project(t, y)
        });
    }

    #[test]
    fn grad_elementwise() {
        check3(3, |i| vec![vec![3, 2 + i], vec![3, 2 + i]], |t, v| {
            let a = t.mul(v[0], v[1]);
            let b = t.sub(a, v[1]);
            let c = t.swish(b);
            let d = t.scale(c, 1.7);
            let e = t.add(d, v[0]);
            project(t, e)
        });
        check3(4, |i| vec![vec![2 + i, 6]], |t, v| {
            let y = t.glu(v[0]);
            project(t, y)
        });
        check3(5, |i| vec![vec![3 + i, 4], vec![4]], |t, v| {
            let y = t.add_bias(v[0], v[1]);
            let y = t.relu(y);
            project(t, y)
        });
    }

    #[test]
    fn grad_layer_norm() {
        check3(6, |i| vec![vec![2 + i, 5], vec![5], vec![5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            project(t, y)
        });
    }

    #[test]
    fn grad_softmax_family() {
        check3(7, |i| vec![vec![3, 3 + i]], |t, v| {
            let cols = t.value(v[0]).cols();
            let mask: Vec<bool> = (0..3 * cols).map(|i| i % cols <= i / cols).collect();
            let y = t.softmax(v[0], Some(Arc::new(mask))).unwrap();
            project(t, y)
        });
        check3(8, |i| vec![vec![2 + i, 4]], |t, v| {
            let y = t.log_softmax(v[0]);
            project(t, y)
        });
    }

    #[test]
    fn grad_indexing_ops() {
        check3(9, |i| vec![vec![4, 3 + i], vec![4, 2]], |t, v| {
            let a = t.slice_cols(v[0], 1, 2);
            let c = t.concat_cols(&[a, v[1], a]);
            let r = t.concat_rows(&[c, c]);
            let g = t.gather_rows(r, vec![0, 5, 5, 2]);
            let s = t.scatter_rows(g, vec![4, 1, 0, 2], 6);
            let f = t.gather_flat(s, Arc::new(vec![0, 3, 3, 7, 12]), &[5]);
            project(t, f)
        });
        check3(10, |i| vec![vec![3 + i, 4], vec![3 + i]], |t, v| {
            let y = t.mul_rows(v[0], v[1]);
            let y = t.reshape(y, &[2, t.value(v[0]).len() / 2]);
            project(t, y)
        });
    }

    #[test]
    fn grad_convolutions() {
        check3(11, |i| vec![vec![7 + i, 5, 2], vec![18, 3], vec![3]], |t, v| {
            let y = t.conv2d_k3s2(v[0], v[1], v[2]);
            project(t, y)
        });
        check3(12, |i| vec![vec![6 + i, 3], vec![4, 3], vec![3]], |t, v| {
            let y = t.depthwise_conv1d(v[0], v[1], v[2]);
            project(t, y)
        });
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (h, w, cin, cout) = (9, 7, 2, 3);
        let x = rand_tensor(&mut rng, &[h, w, cin]);
        let k = rand_tensor(&mut rng, &[9 * cin, cout]);
        let b = rand_tensor(&mut rng, &[cout]);
        let mut tape = Tape::no_grad();
        let (vx, vk, vb) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv2d_k3s2(vx, vk, vb);
        let y = tape.value(y);
        assert_eq!(y.shape(), &[4, 3, cout]);
        for i in 0..4 {
            for j in 0..3 {
                for o in 0..cout {
                    let mut acc = b.data()[o];
                    for kh in 0..3 {
                        for kw in 0..3 {
                            for c in 0..cin {
                                let xv = x.data()[((2 * i + kh) * w + 2 * j + kw) * cin + c];
                                let kv = k.data()[((kh * 3 + kw) * cin + c) * cout + o];
                                acc += xv * kv;
                            }
                        }
                    }
                    let got = y.data()[(i * 3 + j) * cout + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fully_masked_softmax_row_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_owned(Tensor::zeros(&[2, 2]));
        let mask = Arc::new(vec![true, false, false, false]);
        let err = tape.softmax(x, Some(mask)).unwrap_err();
        assert!(err.to_string().contains("empty attention row"));
    }
}
