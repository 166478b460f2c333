//! Differentiable operations on [`Var`].
//!
//! Shapes are checked with assertions: a mismatch here is a programming error
//! in a model definition, not a data error.

use std::sync::Arc;

use super::graph::Var;
use super::tensor::{gemm, Tensor};

fn leading(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(1)].iter().product()
}

impl<'g> Var<'g> {
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let x = self.value();
        let y = x.map(f);
        let yv = Arc::new(y.clone());
        let xid = self.id;
        self.graph.push_op(y, &[xid], move |g, buf| {
            buf.add_with(xid, x.shape(), |dx| {
                for (((d, &gi), &xi), &yi) in dx.iter_mut().zip(g.data()).zip(x.data()).zip(yv.data()) {
                    *d += gi * df(xi, yi);
                }
            });
        })
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(move |v| v + c, |_, _| 1.0)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(
            move |v| v.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    fn binary(
        self,
        other: Var<'g>,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data);
        let (aid, bid) = (self.id, other.id);
        self.graph.push_op(out, &[aid, bid], move |g, buf| {
            buf.add_with(aid, a.shape(), |d| {
                for (((d, &gi), &x), &y) in d.iter_mut().zip(g.data()).zip(a.data()).zip(b.data()) {
                    *d += gi * da(x, y);
                }
            });
            buf.add_with(bid, b.shape(), |d| {
                for (((d, &gi), &x), &y) in d.iter_mut().zip(g.data()).zip(a.data()).zip(b.data()) {
                    *d += gi * db(x, y);
                }
            });
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    /// `x[..., c] + b[c]`.
    pub fn add_bias(self, bias: Var<'g>) -> Var<'g> {
        let x = self.value();
        let b = bias.value();
        let c = x.last_dim();
        assert_eq!(b.len(), c, "bias width mismatch");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let (xid, bid) = (self.id, bias.id);
        let xs = x.shape().to_vec();
        let bs = b.shape().to_vec();
        self.graph.push_op(out, &[xid, bid], move |g, buf| {
            buf.add_with(xid, &xs, |d| {
                for (d, &gi) in d.iter_mut().zip(g.data()) {
                    *d += gi;
                }
            });
            buf.add_with(bid, &bs, |d| {
                for row in g.data().chunks(c) {
                    for (d, &gi) in d.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
            });
        })
    }

    /// `x[r, c] * s[r]` for `x` viewed as `[rows, last_dim]`.
    pub fn mul_rows(self, s: Var<'g>) -> Var<'g> {
        let x = self.value();
        let sv = s.value();
        let c = x.last_dim();
        let rows = x.len() / c.max(1);
        assert_eq!(sv.len(), rows, "mul_rows: scale length mismatch");
        let mut out = (*x).clone();
        for (row, &k) in out.data_mut().chunks_mut(c).zip(sv.data()) {
            for o in row {
                *o *= k;
            }
        }
        let (xid, sid) = (self.id, s.id);
        self.graph.push_op(out, &[xid, sid], move |g, buf| {
            buf.add_with(xid, x.shape(), |d| {
                for ((drow, grow), &k) in d.chunks_mut(c).zip(g.data().chunks(c)).zip(sv.data()) {
                    for (d, &gi) in drow.iter_mut().zip(grow) {
                        *d += gi * k;
                    }
                }
            });
            buf.add_with(sid, sv.shape(), |d| {
                for ((d, grow), xrow) in d.iter_mut().zip(g.data().chunks(c)).zip(x.data().chunks(c)) {
                    *d += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                }
            });
        })
    }

    /// Row-wise dot product of two `[rows, c]` tensors, giving `[rows]`.
    pub fn row_dot(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "row_dot shape mismatch");
        let c = a.last_dim();
        let lead = leading(a.shape());
        let data: Vec<f64> = a
            .data()
            .chunks(c)
            .zip(b.data().chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let out = Tensor::new(vec![lead], data);
        let (aid, bid) = (self.id, other.id);
        self.graph.push_op(out, &[aid, bid], move |g, buf| {
            buf.add_with(aid, a.shape(), |d| {
                for ((drow, brow), &gi) in d.chunks_mut(c).zip(b.data().chunks(c)).zip(g.data()) {
                    for (d, &bv) in drow.iter_mut().zip(brow) {
                        *d += gi * bv;
                    }
                }
            });
            buf.add_with(bid, b.shape(), |d| {
                for ((drow, arow), &gi) in d.chunks_mut(c).zip(a.data().chunks(c)).zip(g.data()) {
                    for (d, &av) in drow.iter_mut().zip(arow) {
                        *d += gi * av;
                    }
                }
            });
        })
    }

    pub fn sum_all(self) -> Var<'g> {
        let x = self.value();
        let out = Tensor::scalar(x.data().iter().sum());
        let xid = self.id;
        self.graph.push_op(out, &[xid], move |g, buf| {
            let gi = g.item();
            buf.add_with(xid, x.shape(), |d| d.iter_mut().for_each(|v| *v += gi));
        })
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over the last axis.
    pub fn sum_last(self) -> Var<'g> {
        let x = self.value();
        let c = x.last_dim();
        let shape = x.shape()[..x.ndim() - 1].to_vec();
        let data = x.data().chunks(c).map(|r| r.iter().sum()).collect();
        let out = Tensor::new(shape, data);
        let xid = self.id;
        self.graph.push_op(out, &[xid], move |g, buf| {
            buf.add_with(xid, x.shape(), |d| {
                for (drow, &gi) in d.chunks_mut(c).zip(g.data()) {
                    drow.iter_mut().for_each(|v| *v += gi);
                }
            });
        })
    }

    /// `[a, l, c] -> [a, c]`, summing over the middle axis.
    pub fn sum_axis1(self) -> Var<'g> {
        let x = self.value();
        let &[a, l, c] = x.shape() else {
            panic!("sum_axis1 expects a 3-d tensor, got {:?}", x.shape())
        };
        let mut out = vec![0.0; a * c];
        for i in 0..a {
            let o = &mut out[i * c..(i + 1) * c];
            for j in 0..l {
                let r = &x.data()[(i * l + j) * c..(i * l + j + 1) * c];
                for (ov, rv) in o.iter_mut().zip(r) {
                    *ov += rv;
                }
            }
        }
        let xid = self.id;
        let xs = x.shape().to_vec();
        self.graph.push_op(Tensor::new(vec![a, c], out), &[xid], move |g, buf| {
            buf.add_with(xid, &xs, |d| {
                for i in 0..a {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    for j in 0..l {
                        let dr = &mut d[(i * l + j) * c..(i * l + j + 1) * c];
                        for (dv, gv) in dr.iter_mut().zip(gr) {
                            *dv += gv;
                        }
                    }
                }
            });
        })
    }

    /// `[a, l, c] -> [a, c]`, averaging over the middle axis.
    pub fn mean_axis1(self) -> Var<'g> {
        let l = self.value().shape()[1].max(1) as f64;
        self.sum_axis1().scale(1.0 / l)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let x = self.value();
        let shape = shape.into();
        let out = (*x).clone().reshape(shape);
        let xid = self.id;
        let xs = x.shape().to_vec();
        self.graph.push_op(out, &[xid], move |g, buf| {
            buf.add_with(xid, &xs, |d| {
                for (d, gi) in d.iter_mut().zip(g.data()) {
                    *d += gi;
                }
            });
        })
    }

    /// Dense 2-d product `[m, k] @ [k, n]`.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            panic!("matmul expects 2-d operands, got {:?} @ {:?}", a.shape(), b.shape())
        };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(vec![m, n]);
        gemm(m, k, n, 1.0, a.data(), k as isize, 1, b.data(), n as isize, 1, 0.0, out.data_mut(), n as isize, 1);
        let (aid, bid) = (self.id, other.id);
        self.graph.push_op(out, &[aid, bid], move |g, buf| {
            // dA = dC @ B^T, dB = A^T @ dC
            buf.add_with(aid, a.shape(), |d| {
                gemm(m, n, k, 1.0, g.data(), n as isize, 1, b.data(), 1, n as isize, 1.0, d, k as isize, 1);
            });
            buf.add_with(bid, b.shape(), |d| {
                gemm(k, m, n, 1.0, a.data(), 1, k as isize, g.data(), n as isize, 1, 1.0, d, n as isize, 1);
            });
        })
    }

    /// Affine map over the last axis: `x[..., in] @ w[in, out] + b[out]`.
    pub fn linear(self, w: Var<'g>, b: Option<Var<'g>>) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        let &[fan_in, fan_out] = wv.shape() else {
            panic!("linear weight must be 2-d")
        };
        assert_eq!(x.last_dim(), fan_in, "linear input width mismatch: {:?} vs {:?}", x.shape(), wv.shape());
        let rows = leading(x.shape());
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-scalar input") = fan_out;
        let mut out = Tensor::zeros(shape);
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            assert_eq!(bv.len(), fan_out, "linear bias width mismatch");
            for row in out.data_mut().chunks_mut(fan_out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(rows, fan_in, fan_out, 1.0, x.data(), fan_in as isize, 1, wv.data(), fan_out as isize, 1, 1.0, out.data_mut(), fan_out as isize, 1);
        let xid = self.id;
        let wid = w.id;
        let bid = b.map(|b| b.id);
        let mut parents = vec![xid, wid];
        parents.extend(bid);
        self.graph.push_op(out, &parents, move |g, buf| {
            buf.add_with(xid, x.shape(), |d| {
                gemm(rows, fan_out, fan_in, 1.0, g.data(), fan_out as isize, 1, wv.data(), 1, fan_out as isize, 1.0, d, fan_in as isize, 1);
            });
            buf.add_with(wid, wv.shape(), |d| {
                gemm(fan_in, rows, fan_out, 1.0, x.data(), 1, fan_in as isize, g.data(), fan_out as isize, 1, 1.0, d, fan_out as isize, 1);
            });
            if let Some(bid) = bid {
                buf.add_with(bid, &[fan_out], |d| {
                    for row in g.data().chunks(fan_out) {
                        for (dv, gv) in d.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                });
            }
        })
    }

    /// Batched `a @ b^T`: `[n, m, c] x [n, p, c] -> [n, m, p]`.
    pub fn bmm_nt(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let (&[n, m, c], &[n2, p, c2]) = (a.shape(), b.shape()) else {
            panic!("bmm_nt expects 3-d operands")
        };
        assert!(n == n2 && c == c2, "bmm_nt shape mismatch {:?} {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; n * m * p];
        for s in 0..n {
            let ab = &a.data()[s * m * c..(s + 1) * m * c];
            let bb = &b.data()[s * p * c..(s + 1) * p * c];
            for i in 0..m {
                for j in 0..p {
                    out[(s * m + i) * p + j] = dot(&ab[i * c..(i + 1) * c], &bb[j * c..(j + 1) * c]);
                }
            }
        }
        let (aid, bid) = (self.id, other.id);
        self.graph.push_op(Tensor::new(vec![n, m, p], out), &[aid, bid], move |g, buf| {
            buf.add_with(aid, a.shape(), |d| {
                for s in 0..n {
                    for i in 0..m {
                        let dr = &mut d[(s * m + i) * c..(s * m + i + 1) * c];
                        for j in 0..p {
                            let gv = g.data()[(s * m + i) * p + j];
                            let br = &b.data()[(s * p + j) * c..(s * p + j + 1) * c];
                            axpy(gv, br, dr);
                        }
                    }
                }
            });
            buf.add_with(bid, b.shape(), |d| {
                for s in 0..n {
                    for j in 0..p {
                        let dr = &mut d[(s * p + j) * c..(s * p + j + 1) * c];
                        for i in 0..m {
                            let gv = g.data()[(s * m + i) * p + j];
                            let ar = &a.data()[(s * m + i) * c..(s * m + i + 1) * c];
                            axpy(gv, ar, dr);
                        }
                    }
                }
            });
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'g> {
        let x = self.value();
        let c = x.last_dim();
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let y = Arc::new(out.clone());
        let xid = self.id;
        self.graph.push_op(out, &[xid], move |g, buf| {
            buf.add_with(xid, y.shape(), |d| {
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let s = dot(yrow, grow);
                    for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv += yv * (gv - s);
                    }
                }
            });
        })
    }

    /// Multi-head scaled dot-product self-attention over sets.
    ///
    /// `q`, `k`, `v` are `[n, l, width]`; heads split `width` into equal
    /// contiguous slices. Scores are scaled by `scale`.
    pub fn attention(self, k: Var<'g>, v: Var<'g>, heads: usize, scale: f64) -> Var<'g> {
        let q = self.value();
        let kv = k.value();
        let vv = v.value();
        let &[n, l, w] = q.shape() else {
            panic!("attention expects [n, l, width] inputs")
        };
        assert_eq!(q.shape(), kv.shape());
        assert_eq!(q.shape(), vv.shape());
        assert!(heads >= 1 && w % heads == 0, "width {w} not divisible by {heads} heads");
        let dh = w / heads;
        let mut probs = vec![0.0; n * heads * l * l];
        let mut out = vec![0.0; n * l * w];
        for s in 0..n {
            let base = s * l * w;
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                for i in 0..l {
                    let qi = &q.data()[base + i * w + off..base + i * w + off + dh];
                    let prow = &mut p[i * l..(i + 1) * l];
                    for (j, pv) in prow.iter_mut().enumerate() {
                        let kj = &kv.data()[base + j * w + off..base + j * w + off + dh];
                        *pv = scale * dot(qi, kj);
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[base + i * w + off..base + i * w + off + dh];
                    for (j, &pv) in prow.iter().enumerate() {
                        let vj = &vv.data()[base + j * w + off..base + j * w + off + dh];
                        axpy(pv, vj, orow);
                    }
                }
            }
        }
        let probs = Arc::new(probs);
        let (qid, kid, vid) = (self.id, k.id, v.id);
        let shape = vec![n, l, w];
        self.graph.push_op(Tensor::new(shape.clone(), out), &[qid, kid, vid], move |g, buf| {
            let gd = g.data();
            let mut dq = vec![0.0; n * l * w];
            let mut dk = vec![0.0; n * l * w];
            let mut dv = vec![0.0; n * l * w];
            let mut ds = vec![0.0; l];
            for s in 0..n {
                let base = s * l * w;
                for h in 0..heads {
                    let off = h * dh;
                    let p = &probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                    for i in 0..l {
                        let gi = &gd[base + i * w + off..base + i * w + off + dh];
                        let prow = &p[i * l..(i + 1) * l];
                        // dA[i, j] = g_i . v_j ; dv_j += A[i, j] g_i
                        for j in 0..l {
                            let vj = &vv.data()[base + j * w + off..base + j * w + off + dh];
                            ds[j] = dot(gi, vj);
                            axpy(prow[j], gi, &mut dv[base + j * w + off..base + j * w + off + dh]);
                        }
                        let inner = dot(prow, &ds);
                        let qi = &q.data()[base + i * w + off..base + i * w + off + dh];
                        for j in 0..l {
                            let dsij = scale * prow[j] * (ds[j] - inner);
                            if dsij == 0.0 {
                                continue;
                            }
                            let kj = &kv.data()[base + j * w + off..base + j * w + off + dh];
                            axpy(dsij, kj, &mut dq[base + i * w + off..base + i * w + off + dh]);
                            axpy(dsij, qi, &mut dk[base + j * w + off..base + j * w + off + dh]);
                        }
                    }
                }
            }
            for (id, grad) in [(qid, dq), (kid, dk), (vid, dv)] {
                if buf.wants(id) {
                    buf.add(id, Tensor::new(shape.clone(), grad));
                }
            }
        })
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let c = x.last_dim();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let rows = x.len() / c;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x.data()[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..c {
                let h = (xr[i] - mean) * is;
                xhat[r * c + i] = h;
                out[r * c + i] = h * gv.data()[i] + bv.data()[i];
            }
        }
        let (xid, gid, bid) = (self.id, gain.id, bias.id);
        let xs = x.shape().to_vec();
        self.graph.push_op(Tensor::new(xs.clone(), out), &[xid, gid, bid], move |g, buf| {
            let gd = g.data();
            buf.add_with(xid, &xs, |d| {
                let mut dxh = vec![0.0; c];
                for r in 0..rows {
                    let gr = &gd[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    for i in 0..c {
                        dxh[i] = gr[i] * gv.data()[i];
                    }
                    let m1 = dxh.iter().sum::<f64>() / c as f64;
                    let m2 = dot(&dxh, hr) / c as f64;
                    let dr = &mut d[r * c..(r + 1) * c];
                    for i in 0..c {
                        dr[i] += inv_std[r] * (dxh[i] - m1 - hr[i] * m2);
                    }
                }
            });
            buf.add_with(gid, &[c], |d| {
                for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for i in 0..c {
                        d[i] += gr[i] * hr[i];
                    }
                }
            });
            buf.add_with(bid, &[c], |d| {
                for gr in gd.chunks(c) {
                    for i in 0..c {
                        d[i] += gr[i];
                    }
                }
            });
        })
    }

    /// Concatenation along the last axis. All inputs share leading dimensions.
    pub fn concat_last(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty());
        let graph = parts[0].graph;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = leading(values[0].shape());
        let lead_shape = values[0].shape()[..values[0].ndim() - 1].to_vec();
        for v in &values {
            assert_eq!(&v.shape()[..v.ndim() - 1], &lead_shape[..], "concat_last leading mismatch");
        }
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(lead * total);
        for r in 0..lead {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead_shape;
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let ids2 = ids.clone();
        graph.push_op(Tensor::new(shape, out), &ids, move |g, buf| {
            let mut offset = 0;
            for ((&id, &w), s) in ids2.iter().zip(&widths).zip(&shapes) {
                buf.add_with(id, s, |d| {
                    for r in 0..lead {
                        let src = &g.data()[r * total + offset..r * total + offset + w];
                        for (dv, sv) in d[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                });
                offset += w;
            }
        })
    }

    /// Columns `[start, start + width)` of the last axis.
    pub fn slice_last(self, start: usize, width: usize) -> Var<'g> {
        let x = self.value();
        let c = x.last_dim();
        assert!(start + width <= c, "slice_last out of bounds");
        let lead = leading(x.shape());
        let mut out = Vec::with_capacity(lead * width);
        for r in 0..lead {
            out.extend_from_slice(&x.data()[r * c + start..r * c + start + width]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = width;
        let xid = self.id;
        let xs = x.shape().to_vec();
        self.graph.push_op(Tensor::new(shape, out), &[xid], move |g, buf| {
            buf.add_with(xid, &xs, |d| {
                for r in 0..lead {
                    let src = &g.data()[r * width..(r + 1) * width];
                    for (dv, sv) in d[r * c + start..r * c + start + width].iter_mut().zip(src) {
                        *dv += sv;
                    }
                }
            });
        })
    }

    /// `[b, f1, d]` and `[b, f2, d]` -> `[b, f1 + f2, d]`.
    pub fn concat_axis1(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let o = other.value();
        let (&[b, f1, d], &[b2, f2, d2]) = (a.shape(), o.shape()) else {
            panic!("concat_axis1 expects 3-d operands")
        };
        assert!(b == b2 && d == d2, "concat_axis1 shape mismatch");
        let f = f1 + f2;
        let mut out = Vec::with_capacity(b * f * d);
        for i in 0..b {
            out.extend_from_slice(&a.data()[i * f1 * d..(i + 1) * f1 * d]);
            out.extend_from_slice(&o.data()[i * f2 * d..(i + 1) * f2 * d]);
        }
        let (aid, oid) = (self.id, other.id);
        let (sa, so) = (a.shape().to_vec(), o.shape().to_vec());
        self.graph.push_op(Tensor::new(vec![b, f, d], out), &[aid, oid], move |g, buf| {
            buf.add_with(aid, &sa, |dd| {
                for i in 0..b {
                    let src = &g.data()[i * f * d..i * f * d + f1 * d];
                    for (x, y) in dd[i * f1 * d..(i + 1) * f1 * d].iter_mut().zip(src) {
                        *x += y;
                    }
                }
            });
            buf.add_with(oid, &so, |dd| {
                for i in 0..b {
                    let src = &g.data()[i * f * d + f1 * d..(i + 1) * f * d];
                    for (x, y) in dd[i * f2 * d..(i + 1) * f2 * d].iter_mut().zip(src) {
                        *x += y;
                    }
                }
            });
        })
    }

    /// `[b, a, c] -> [b, c, a]`.
    pub fn transpose12(self) -> Var<'g> {
        let x = self.value();
        let &[b, a, c] = x.shape() else {
            panic!("transpose12 expects a 3-d tensor")
        };
        let mut out = vec![0.0; b * a * c];
        for i in 0..b {
            for j in 0..a {
                for k in 0..c {
                    out[(i * c + k) * a + j] = x.data()[(i * a + j) * c + k];
                }
            }
        }
        let xid = self.id;
        let xs = x.shape().to_vec();
        self.graph.push_op(Tensor::new(vec![b, c, a], out), &[xid], move |g, buf| {
            buf.add_with(xid, &xs, |d| {
                for i in 0..b {
                    for j in 0..a {
                        for k in 0..c {
                            d[(i * a + j) * c + k] += g.data()[(i * c + k) * a + j];
                        }
                    }
                }
            });
        })
    }

    /// `[b, c] -> [b, l, c]` by repetition along a new middle axis.
    pub fn repeat_axis1(self, l: usize) -> Var<'g> {
        let x = self.value();
        let &[b, c] = x.shape() else {
            panic!("repeat_axis1 expects a 2-d tensor")
        };
        let mut out = Vec::with_capacity(b * l * c);
        for i in 0..b {
            for _ in 0..l {
                out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
        }
        let xid = self.id;
        self.graph.push_op(Tensor::new(vec![b, l, c], out), &[xid], move |g, buf| {
            buf.add_with(xid, &[b, c], |d| {
                for i in 0..b {
                    for j in 0..l {
                        let src = &g.data()[(i * l + j) * c..(i * l + j + 1) * c];
                        for (dv, sv) in d[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                }
            });
        })
    }

    /// Rows of a 2-d `[v, c]` table selected by `index`, giving `[index.len(), c]`.
    /// The gradient scatters back into the table.
    pub fn gather_rows(self, index: Arc<Vec<usize>>) -> Var<'g> {
        let t = self.value();
        let &[v, c] = t.shape() else {
            panic!("gather_rows expects a 2-d table")
        };
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            assert!(i < v, "gather index {i} out of range {v}");
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let tid = self.id;
        let n = index.len();
        self.graph.push_op(Tensor::new(vec![n, c], out), &[tid], move |g, buf| {
            buf.add_with(tid, &[v, c], |d| {
                for (r, &i) in index.iter().enumerate() {
                    let src = &g.data()[r * c..(r + 1) * c];
                    for (dv, sv) in d[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *dv += sv;
                    }
                }
            });
        })
    }

    /// Pattern construction: `h [b, f, d]`, `m [b, f, k]` -> `[b, k, f, d]`
    /// with `out[b, j, i, :] = m[b, i, j] * h[b, i, :]`.
    pub fn mask_rows(self, mask: Var<'g>) -> Var<'g> {
        let h = self.value();
        let m = mask.value();
        let (&[b, f, d], &[b2, f2, k]) = (h.shape(), m.shape()) else {
            panic!("mask_rows expects [b, f, d] and [b, f, k]")
        };
        assert!(b == b2 && f == f2, "mask_rows shape mismatch");
        let mut out = vec![0.0; b * k * f * d];
        for s in 0..b {
            for j in 0..k {
                for i in 0..f {
                    let mv = m.data()[(s * f + i) * k + j];
                    let src = &h.data()[(s * f + i) * d..(s * f + i + 1) * d];
                    let dst = &mut out[((s * k + j) * f + i) * d..((s * k + j) * f + i + 1) * d];
                    for (o, &x) in dst.iter_mut().zip(src) {
                        *o = mv * x;
                    }
                }
            }
        }
        let (hid, mid) = (self.id, mask.id);
        self.graph.push_op(Tensor::new(vec![b, k, f, d], out), &[hid, mid], move |g, buf| {
            buf.add_with(hid, h.shape(), |dh| {
                for s in 0..b {
                    for j in 0..k {
                        for i in 0..f {
                            let mv = m.data()[(s * f + i) * k + j];
                            let gr = &g.data()[((s * k + j) * f + i) * d..((s * k + j) * f + i + 1) * d];
                            axpy(mv, gr, &mut dh[(s * f + i) * d..(s * f + i + 1) * d]);
                        }
                    }
                }
            });
            buf.add_with(mid, m.shape(), |dm| {
                for s in 0..b {
                    for j in 0..k {
                        for i in 0..f {
                            let gr = &g.data()[((s * k + j) * f + i) * d..((s * k + j) * f + i + 1) * d];
                            let hr = &h.data()[(s * f + i) * d..(s * f + i + 1) * d];
                            dm[(s * f + i) * k + j] += dot(gr, hr);
                        }
                    }
                }
            });
        })
    }

    /// Inner products of all field pairs `i < j`: `[b, f, d] -> [b, f(f-1)/2]`.
    pub fn pairwise_inner(self) -> Var<'g> {
        let x = self.value();
        let &[b, f, d] = x.shape() else {
            panic!("pairwise_inner expects [b, f, d]")
        };
        let p = f * f.saturating_sub(1) / 2;
        let mut out = Vec::with_capacity(b * p);
        for s in 0..b {
            let xs = &x.data()[s * f * d..(s + 1) * f * d];
            for i in 0..f {
                for j in i + 1..f {
                    out.push(dot(&xs[i * d..(i + 1) * d], &xs[j * d..(j + 1) * d]));
                }
            }
        }
        let xid = self.id;
        self.graph.push_op(Tensor::new(vec![b, p], out), &[xid], move |g, buf| {
            buf.add_with(xid, x.shape(), |dx| {
                for s in 0..b {
                    let mut q = 0;
                    for i in 0..f {
                        for j in i + 1..f {
                            let gv = g.data()[s * p + q];
                            q += 1;
                            let base = s * f * d;
                            let (xi, xj) = (base + i * d, base + j * d);
                            for t in 0..d {
                                dx[xi + t] += gv * x.data()[xj + t];
                                dx[xj + t] += gv * x.data()[xi + t];
                            }
                        }
                    }
                }
            });
        })
    }

    /// Field-wise outer product used by CIN:
    /// `xk [b, h, d]`, `x0 [b, f, d]` -> `[b, h * f, d]`, entry `(i, j)` is `xk_i * x0_j`.
    pub fn outer_fields(self, x0: Var<'g>) -> Var<'g> {
        let a = self.value();
        let z = x0.value();
        let (&[b, h, d], &[b2, f, d2]) = (a.shape(), z.shape()) else {
            panic!("outer_fields expects 3-d operands")
        };
        assert!(b == b2 && d == d2, "outer_fields shape mismatch");
        let mut out = vec![0.0; b * h * f * d];
        for s in 0..b {
            for i in 0..h {
                let ar = &a.data()[(s * h + i) * d..(s * h + i + 1) * d];
                for j in 0..f {
                    let zr = &z.data()[(s * f + j) * d..(s * f + j + 1) * d];
                    let o = &mut out[((s * h + i) * f + j) * d..((s * h + i) * f + j + 1) * d];
                    for t in 0..d {
                        o[t] = ar[t] * zr[t];
                    }
                }
            }
        }
        let (aid, zid) = (self.id, x0.id);
        self.graph.push_op(Tensor::new(vec![b, h * f, d], out), &[aid, zid], move |g, buf| {
            buf.add_with(aid, a.shape(), |da| {
                for s in 0..b {
                    for i in 0..h {
                        for j in 0..f {
                            let gr = &g.data()[((s * h + i) * f + j) * d..((s * h + i) * f + j + 1) * d];
                            let zr = &z.data()[(s * f + j) * d..(s * f + j + 1) * d];
                            let dr = &mut da[(s * h + i) * d..(s * h + i + 1) * d];
                            for t in 0..d {
                                dr[t] += gr[t] * zr[t];
                            }
                        }
                    }
                }
            });
            buf.add_with(zid, z.shape(), |dz| {
                for s in 0..b {
                    for i in 0..h {
                        let ar = &a.data()[(s * h + i) * d..(s * h + i + 1) * d];
                        for j in 0..f {
                            let gr = &g.data()[((s * h + i) * f + j) * d..((s * h + i) * f + j + 1) * d];
                            let dr = &mut dz[(s * f + j) * d..(s * f + j + 1) * d];
                            for t in 0..d {
                                dr[t] += gr[t] * ar[t];
                            }
                        }
                    }
                }
            });
        })
    }

    /// `x [b, l, c]`, `w [b, l]` -> `sum_l w[b, l] * x[b, l, :]`.
    pub fn weighted_sum_axis1(self, w: Var<'g>) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        let &[b, l, c] = x.shape() else {
            panic!("weighted_sum_axis1 expects [b, l, c]")
        };
        assert_eq!(wv.shape(), &[b, l], "weighted_sum_axis1 weight shape");
        let mut out = vec![0.0; b * c];
        for s in 0..b {
            for j in 0..l {
                let wj = wv.data()[s * l + j];
                axpy(wj, &x.data()[(s * l + j) * c..(s * l + j + 1) * c], &mut out[s * c..(s + 1) * c]);
            }
        }
        let (xid, wid) = (self.id, w.id);
        self.graph.push_op(Tensor::new(vec![b, c], out), &[xid, wid], move |g, buf| {
            buf.add_with(xid, x.shape(), |dx| {
                for s in 0..b {
                    let gr = &g.data()[s * c..(s + 1) * c];
                    for j in 0..l {
                        axpy(wv.data()[s * l + j], gr, &mut dx[(s * l + j) * c..(s * l + j + 1) * c]);
                    }
                }
            });
            buf.add_with(wid, wv.shape(), |dw| {
                for s in 0..b {
                    let gr = &g.data()[s * c..(s + 1) * c];
                    for j in 0..l {
                        dw[s * l + j] += dot(gr, &x.data()[(s * l + j) * c..(s * l + j + 1) * c]);
                    }
                }
            });
        })
    }

    /// Mean binary cross-entropy of logits against 0/1 targets (numerically stable).
    pub fn bce_with_logits(self, targets: Arc<Vec<f64>>) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.len(), targets.len(), "bce_with_logits length mismatch");
        let n = x.len().max(1) as f64;
        let loss: f64 = x
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let xid = self.id;
        self.graph.push_op(Tensor::scalar(loss), &[xid], move |g, buf| {
            let gi = g.item() / n;
            buf.add_with(xid, x.shape(), |d| {
                for ((dv, &z), &y) in d.iter_mut().zip(x.data()).zip(targets.iter()) {
                    *dv += gi * (sigmoid(z) - y);
                }
            });
        })
    }

    /// InfoNCE with positives on the diagonal: for logits `[n, k, k]`,
    /// the mean over `(n, j)` of `-log softmax(logits[n, j, :])[j]`.
    pub fn cross_entropy_diagonal(self) -> Var<'g> {
        let x = self.value();
        let &[n, k, k2] = x.shape() else {
            panic!("cross_entropy_diagonal expects [n, k, k]")
        };
        assert_eq!(k, k2);
        let mut probs = (*x).clone();
        let mut total = 0.0;
        for (r, row) in probs.data_mut().chunks_mut(k).enumerate() {
            let j = r % k;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[j];
            softmax_in_place(row);
        }
        let count = (n * k).max(1) as f64;
        let xid = self.id;
        self.graph.push_op(Tensor::scalar(total / count), &[xid], move |g, buf| {
            let gi = g.item() / count;
            buf.add_with(xid, probs.shape(), |d| {
                for (r, (drow, prow)) in d.chunks_mut(k).zip(probs.data().chunks(k)).enumerate() {
                    let j = r % k;
                    for (c, (dv, &pv)) in drow.iter_mut().zip(prow).enumerate() {
                        *dv += gi * (pv - if c == j { 1.0 } else { 0.0 });
                    }
                }
            });
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
