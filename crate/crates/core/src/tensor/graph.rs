use super::kernels::{col2im, gemm, im2col, ConvGeometry, MatRef};
use super::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NORM_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        /// Unfolded input per sample, kept only when the weight needs a gradient.
        cols: Vec<f32>,
    },
    UpConv {
        x: Var,
        w: Var,
        b: Var,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Relu(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Select {
        x: Var,
        items: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Scalar {
        inputs: Vec<Var>,
        local_grads: Vec<Vec<f32>>,
    },
    WeightedSum(Vec<(Var, f32)>),
}

/// Tape of tensor operations. Nodes are appended in evaluation order, so a reverse
/// sweep is a valid topological order for backpropagation.
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f32>>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records backward state.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        let requires = requires && self.grad_enabled;
        self.values.push(value);
        self.ops.push(if requires { op } else { Op::Leaf });
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients for `vars`, zero-filled where nothing flowed.
    pub fn grads_of(&self, vars: &[Var]) -> Vec<Vec<f32>> {
        vars.iter()
            .map(|&v| self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.values[v.0].len()]))
            .collect()
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 5, "conv3d input must be [N, C, D, H, W]");
        let k = geom.kernel;
        assert_eq!(ws, vec![ws[0], xs[1], k, k, k], "conv3d weight shape");
        assert_eq!(self.value(b).shape(), &[ws[0]], "conv3d bias shape");
        let (n, ci, co) = (xs[0], xs[1], ws[0]);
        let dims = [xs[2], xs[3], xs[4]];
        let od = geom.out_dims(dims);
        let (vi, vo) = (dims.iter().product::<usize>(), od.iter().product::<usize>());
        let kk = ci * k * k * k;
        let requires = self.grad_enabled && self.any_requires(&[x, w, b]);
        let keep_cols = requires && self.requires[w.0] && !geom.is_pointwise();

        let mut out = vec![0.0; n * co * vo];
        let mut saved = vec![0.0; if keep_cols { n * kk * vo } else { 0 }];
        let mut scratch = vec![0.0; if !keep_cols && !geom.is_pointwise() { kk * vo } else { 0 }];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..n {
                let xi = &xv[s * ci * vi..(s + 1) * ci * vi];
                let cols: &[f32] = if geom.is_pointwise() {
                    xi
                } else {
                    let buf = if keep_cols {
                        &mut saved[s * kk * vo..(s + 1) * kk * vo]
                    } else {
                        &mut scratch[..]
                    };
                    im2col(xi, ci, dims, &geom, buf);
                    buf
                };
                let o = &mut out[s * co * vo..(s + 1) * co * vo];
                for c in 0..co {
                    o[c * vo..(c + 1) * vo].fill(bv[c]);
                }
                gemm(co, kk, vo, MatRef::rows(wv, kk), MatRef::rows(cols, vo), 1.0, o);
            }
        }
        let value = Tensor::from_vec(&[n, co, od[0], od[1], od[2]], out);
        self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols: saved,
            },
            requires,
        )
    }

    /// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
    /// Weight layout `[C_in, C_out, 2, 2, 2]`.
    pub fn up_conv2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 5, "up_conv2 input must be [N, C, D, H, W]");
        assert_eq!(ws, vec![xs[1], ws[1], 2, 2, 2], "up_conv2 weight shape");
        let (n, ci, co) = (xs[0], xs[1], ws[1]);
        let [d, h, wd] = [xs[2], xs[3], xs[4]];
        let vi = d * h * wd;
        let rows = co * 8;
        let requires = self.grad_enabled && self.any_requires(&[x, w, b]);
        let mut out = vec![0.0; n * co * vi * 8];
        let mut taps = vec![0.0; rows * vi];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..n {
                let xi = &xv[s * ci * vi..(s + 1) * ci * vi];
                gemm(rows, ci, vi, MatRef::transposed(wv, rows), MatRef::rows(xi, vi), 0.0, &mut taps);
                let o = &mut out[s * co * vi * 8..(s + 1) * co * vi * 8];
                scatter_taps(&taps, co, [d, h, wd], bv, o);
            }
        }
        let value = Tensor::from_vec(&[n, co, 2 * d, 2 * h, 2 * wd], out);
        self.push(value, Op::UpConv { x, w, b }, requires)
    }

    /// Per-sample, per-channel normalization with a learned affine transform.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (n, c) = (xs[0], xs[1]);
        let v: usize = xs[2..].iter().product();
        assert_eq!(self.value(gamma).shape(), &[c]);
        assert_eq!(self.value(beta).shape(), &[c]);
        let requires = self.grad_enabled && self.any_requires(&[x, gamma, beta]);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; if requires { xv.len() } else { 0 }];
        let mut inv_std = vec![0.0; n * c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * v;
                let src = &xv[off..off + v];
                let mean = src.iter().map(|&a| a as f64).sum::<f64>() / v as f64;
                let var = src.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / v as f64;
                let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
                inv_std[s * c + ch] = inv as f32;
                let (mean, inv) = (mean as f32, inv as f32);
                for i in 0..v {
                    let xh = (src[i] - mean) * inv;
                    if requires {
                        xhat[off + i] = xh;
                    }
                    out[off + i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::from_vec(&xs, out);
        self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            requires,
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let t = self.value(x);
        let value = Tensor::from_vec(t.shape(), t.data().iter().map(|&a| f(a)).collect());
        let requires = self.requires[x.0];
        self.push(value, op, requires)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(x, |a| if a > 0.0 { a } else { slope * a }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |a| 1.0 / (1.0 + (-a).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add operands must share a shape");
        let value = Tensor::from_vec(ta.shape(), ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect());
        let requires = self.any_requires(&[a, b]);
        self.push(value, Op::Add(a, b), requires)
    }

    /// Concatenation along the channel axis of two `[N, C, ...]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        assert!(sa[0] == sb[0] && sa[2..] == sb[2..], "concat shapes {sa:?} vs {sb:?}");
        let (ia, ib) = (ta.item_len(), tb.item_len());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for s in 0..sa[0] {
            data.extend_from_slice(&ta.data()[s * ia..(s + 1) * ia]);
            data.extend_from_slice(&tb.data()[s * ib..(s + 1) * ib]);
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let value = Tensor::from_vec(&shape, data);
        let requires = self.any_requires(&[a, b]);
        self.push(value, Op::Concat(a, b), requires)
    }

    /// Gathers batch items (with repetition allowed) into a new batch.
    pub fn select(&mut self, x: Var, items: &[usize]) -> Var {
        let t = self.value(x);
        let il = t.item_len();
        let mut data = Vec::with_capacity(items.len() * il);
        for &i in items {
            data.extend_from_slice(t.item(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = items.len();
        let value = Tensor::from_vec(&shape, data);
        let requires = self.requires[x.0];
        self.push(
            value,
            Op::Select {
                x,
                items: items.to_vec(),
            },
            requires,
        )
    }

    /// `[N, C, ...] -> [N, C]` mean over all trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let v: usize = t.shape()[2..].iter().product();
        let data = t
            .data()
            .chunks(v)
            .map(|ch| (ch.iter().map(|&a| a as f64).sum::<f64>() / v as f64) as f32)
            .collect();
        let value = Tensor::from_vec(&[n, c], data);
        let requires = self.requires[x.0];
        self.push(value, Op::GlobalAvgPool(x), requires)
    }

    /// `y = x w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shapes {xs:?} {ws:?}");
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * fout];
        for s in 0..n {
            out[s * fout..(s + 1) * fout].copy_from_slice(self.value(b).data());
        }
        gemm(
            n,
            fin,
            fout,
            MatRef::rows(self.value(x).data(), fin),
            MatRef::transposed(self.value(w).data(), fin),
            1.0,
            &mut out,
        );
        let value = Tensor::from_vec(&[n, fout], out);
        let requires = self.any_requires(&[x, w, b]);
        self.push(value, Op::Linear { x, w, b }, requires)
    }

    /// Scalar node whose value and input gradients are computed by the caller.
    /// `local_grads[i]` is `d value / d inputs[i]`, elementwise.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: f64, local_grads: Vec<Vec<f32>>) -> Var {
        assert_eq!(inputs.len(), local_grads.len());
        for (v, g) in inputs.iter().zip(&local_grads) {
            assert_eq!(self.value(*v).len(), g.len(), "local gradient length");
        }
        let requires = self.any_requires(inputs);
        self.push(
            Tensor::scalar(value as f32),
            Op::Scalar {
                inputs: inputs.to_vec(),
                local_grads,
            },
            requires,
        )
    }

    /// `sum_i coef_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let mut total = 0.0f32;
        for &(v, c) in terms {
            assert_eq!(self.value(v).len(), 1, "weighted_sum takes scalars");
            total += c * self.value(v).data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let requires = self.any_requires(&vars);
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), requires)
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f32>> {
        if !self.requires[v.0] {
            return None;
        }
        let len = self.values[v.0].len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    /// Accumulates gradients of the scalar `root` into every node that requires one.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        if !self.requires[root.0] {
            return;
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            self.backward_op(i, &op, &gy);
            self.ops[i] = op;
            self.grads[i] = Some(gy);
        }
    }

    fn backward_op(&mut self, i: usize, op: &Op, gy: &[f32]) {
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, cols } => self.backward_conv(i, *x, *w, *b, geom, cols, gy),
            Op::UpConv { x, w, b } => self.backward_up_conv(*x, *w, *b, gy),
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = self.values[x.0].shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let v: usize = shape[2..].iter().product();
                let gv = self.values[gamma.0].data().to_vec();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * v;
                        let (g, xh) = (&gy[off..off + v], &xhat[off..off + v]);
                        let sum_g: f64 = g.iter().map(|&a| a as f64).sum();
                        let sum_gx: f64 = g.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
                        dgamma[ch] += sum_gx;
                        dbeta[ch] += sum_g;
                        if let Some(dx) = self.grad_buf(*x) {
                            let gam = gv[ch] as f64;
                            let scale = inv_std[s * c + ch] as f64 * gam / v as f64;
                            for k in 0..v {
                                let t = v as f64 * g[k] as f64 - sum_g - xh[k] as f64 * sum_gx;
                                dx[off + k] += (scale * t) as f32;
                            }
                        }
                    }
                }
                if let Some(dg) = self.grad_buf(*gamma) {
                    dg.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += *b as f32);
                }
                if let Some(db) = self.grad_buf(*beta) {
                    db.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += *b as f32);
                }
            }
            Op::Relu(x) => self.backward_pointwise(i, *x, gy, |y| if y > 0.0 { 1.0 } else { 0.0 }),
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                self.backward_pointwise(i, *x, gy, move |y| if y > 0.0 { 1.0 } else { slope })
            }
            Op::Sigmoid(x) => self.backward_pointwise(i, *x, gy, |y| y * (1.0 - y)),
            Op::Tanh(x) => self.backward_pointwise(i, *x, gy, |y| 1.0 - y * y),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_buf(v) {
                        d.iter_mut().zip(gy).for_each(|(p, q)| *p += *q);
                    }
                }
            }
            Op::Concat(a, b) => {
                let n = self.values[a.0].batch();
                let (ia, ib) = (self.values[a.0].item_len(), self.values[b.0].item_len());
                if let Some(da) = self.grad_buf(*a) {
                    for s in 0..n {
                        let src = &gy[s * (ia + ib)..s * (ia + ib) + ia];
                        da[s * ia..(s + 1) * ia].iter_mut().zip(src).for_each(|(p, q)| *p += *q);
                    }
                }
                if let Some(db) = self.grad_buf(*b) {
                    for s in 0..n {
                        let src = &gy[s * (ia + ib) + ia..(s + 1) * (ia + ib)];
                        db[s * ib..(s + 1) * ib].iter_mut().zip(src).for_each(|(p, q)| *p += *q);
                    }
                }
            }
            Op::Select { x, items } => {
                let il = self.values[x.0].item_len();
                if let Some(dx) = self.grad_buf(*x) {
                    for (k, &item) in items.iter().enumerate() {
                        dx[item * il..(item + 1) * il]
                            .iter_mut()
                            .zip(&gy[k * il..(k + 1) * il])
                            .for_each(|(p, q)| *p += *q);
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let v: usize = self.values[x.0].shape()[2..].iter().product();
                if let Some(dx) = self.grad_buf(*x) {
                    for (k, chunk) in dx.chunks_mut(v).enumerate() {
                        let g = gy[k] / v as f32;
                        chunk.iter_mut().for_each(|p| *p += g);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.values[x.0].shape()[0], self.values[x.0].shape()[1]);
                let fout = self.values[w.0].shape()[0];
                if self.requires[x.0] {
                    let wv = self.values[w.0].data().to_vec();
                    let dx = self.grad_buf(*x).unwrap();
                    gemm(n, fout, fin, MatRef::rows(gy, fout), MatRef::rows(&wv, fin), 1.0, dx);
                }
                if self.requires[w.0] {
                    let xv = self.values[x.0].data().to_vec();
                    let dw = self.grad_buf(*w).unwrap();
                    gemm(fout, n, fin, MatRef::transposed(gy, fout), MatRef::rows(&xv, fin), 1.0, dw);
                }
                if let Some(db) = self.grad_buf(*b) {
                    for s in 0..n {
                        db.iter_mut().zip(&gy[s * fout..(s + 1) * fout]).for_each(|(p, q)| *p += *q);
                    }
                }
            }
            Op::Scalar { inputs, local_grads } => {
                for (v, lg) in inputs.iter().zip(local_grads) {
                    if let Some(d) = self.grad_buf(*v) {
                        d.iter_mut().zip(lg).for_each(|(p, q)| *p += gy[0] * q);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if let Some(d) = self.grad_buf(v) {
                        d[0] += c * gy[0];
                    }
                }
            }
        }
    }

    /// `dx += gy * f(y)` where `y` is this node's output.
    fn backward_pointwise(&mut self, i: usize, x: Var, gy: &[f32], f: impl Fn(f32) -> f32) {
        if !self.requires[x.0] {
            return;
        }
        let y = std::mem::replace(&mut self.values[i], Tensor::zeros(&[0]));
        if let Some(dx) = self.grad_buf(x) {
            for ((d, &g), &yv) in dx.iter_mut().zip(gy).zip(y.data()) {
                *d += g * f(yv);
            }
        }
        self.values[i] = y;
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv(&mut self, _i: usize, x: Var, w: Var, b: Var, geom: &ConvGeometry, cols: &[f32], gy: &[f32]) {
        let xs = self.values[x.0].shape().to_vec();
        let co = self.values[w.0].shape()[0];
        let (n, ci) = (xs[0], xs[1]);
        let dims = [xs[2], xs[3], xs[4]];
        let k = geom.kernel;
        let kk = ci * k * k * k;
        let vi: usize = dims.iter().product();
        let vo: usize = geom.out_dims(dims).iter().product();

        if let Some(db) = self.grad_buf(b) {
            for s in 0..n {
                for (c, g) in db.iter_mut().enumerate().take(co) {
                    let off = (s * co + c) * vo;
                    *g += gy[off..off + vo].iter().map(|&a| a as f64).sum::<f64>() as f32;
                }
            }
        }
        if self.requires[w.0] {
            let xv = std::mem::replace(&mut self.values[x.0], Tensor::zeros(&[0]));
            let dw = self.grads[w.0].get_or_insert_with(|| vec![0.0; co * kk]);
            for s in 0..n {
                let c: &[f32] = if geom.is_pointwise() {
                    &xv.data()[s * ci * vi..(s + 1) * ci * vi]
                } else {
                    &cols[s * kk * vo..(s + 1) * kk * vo]
                };
                let g = &gy[s * co * vo..(s + 1) * co * vo];
                gemm(co, vo, kk, MatRef::rows(g, vo), MatRef::transposed(c, vo), 1.0, dw);
            }
            self.values[x.0] = xv;
        }
        if self.requires[x.0] {
            let wv = std::mem::replace(&mut self.values[w.0], Tensor::zeros(&[0]));
            let dx = self.grads[x.0].get_or_insert_with(|| vec![0.0; n * ci * vi]);
            let mut dcols = vec![0.0; if geom.is_pointwise() { 0 } else { kk * vo }];
            for s in 0..n {
                let g = &gy[s * co * vo..(s + 1) * co * vo];
                let dxi = &mut dx[s * ci * vi..(s + 1) * ci * vi];
                if geom.is_pointwise() {
                    gemm(kk, co, vo, MatRef::transposed(wv.data(), kk), MatRef::rows(g, vo), 1.0, dxi);
                } else {
                    gemm(kk, co, vo, MatRef::transposed(wv.data(), kk), MatRef::rows(g, vo), 0.0, &mut dcols);
                    col2im(&dcols, ci, dims, geom, dxi);
                }
            }
            self.values[w.0] = wv;
        }
    }

    fn backward_up_conv(&mut self, x: Var, w: Var, b: Var, gy: &[f32]) {
        let xs = self.values[x.0].shape().to_vec();
        let co = self.values[w.0].shape()[1];
        let (n, ci) = (xs[0], xs[1]);
        let dims = [xs[2], xs[3], xs[4]];
        let vi: usize = dims.iter().product();
        let rows = co * 8;
        let mut taps = vec![0.0; rows * vi];

        if let Some(db) = self.grad_buf(b) {
            for s in 0..n {
                for (c, g) in db.iter_mut().enumerate().take(co) {
                    let off = (s * co + c) * vi * 8;
                    *g += gy[off..off + vi * 8].iter().map(|&a| a as f64).sum::<f64>() as f32;
                }
            }
        }
        let need_w = self.requires[w.0];
        let need_x = self.requires[x.0];
        if !need_w && !need_x {
            return;
        }
        let xv = self.values[x.0].data().to_vec();
        let wv = self.values[w.0].data().to_vec();
        for s in 0..n {
            gather_taps(&gy[s * co * vi * 8..(s + 1) * co * vi * 8], co, dims, &mut taps);
            if need_w {
                let dw = self.grads[w.0].get_or_insert_with(|| vec![0.0; ci * rows]);
                let xi = &xv[s * ci * vi..(s + 1) * ci * vi];
                gemm(ci, vi, rows, MatRef::rows(xi, vi), MatRef::transposed(&taps, vi), 1.0, dw);
            }
            if need_x {
                let dx = self.grads[x.0].get_or_insert_with(|| vec![0.0; n * ci * vi]);
                let dxi = &mut dx[s * ci * vi..(s + 1) * ci * vi];
                gemm(ci, rows, vi, MatRef::rows(&wv, rows), MatRef::rows(&taps, vi), 1.0, dxi);
            }
        }
    }
}

/// `taps: [C_out * 8, V_in]` to the doubled-resolution output `[C_out, 2D, 2H, 2W]`.
fn scatter_taps(taps: &[f32], co: usize, dims: [usize; 3], bias: &[f32], out: &mut [f32]) {
    let [d, h, w] = dims;
    let vi = d * h * w;
    let (oh, ow) = (2 * h, 2 * w);
    for c in 0..co {
        let oc = &mut out[c * vi * 8..(c + 1) * vi * 8];
        for tap in 0..8 {
            let (a, b, e) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let src = &taps[(c * 8 + tap) * vi..(c * 8 + tap + 1) * vi];
            for z in 0..d {
                for y in 0..h {
                    let row = &src[(z * h + y) * w..(z * h + y + 1) * w];
                    let base = ((2 * z + a) * oh + 2 * y + b) * ow + e;
                    for (x, &v) in row.iter().enumerate() {
                        oc[base + 2 * x] = v + bias[c];
                    }
                }
            }
        }
    }
}

/// Adjoint layout move of [`scatter_taps`] (without bias).
fn gather_taps(g: &[f32], co: usize, dims: [usize; 3], taps: &mut [f32]) {
    let [d, h, w] = dims;
    let vi = d * h * w;
    let (oh, ow) = (2 * h, 2 * w);
    for c in 0..co {
        let gc = &g[c * vi * 8..(c + 1) * vi * 8];
        for tap in 0..8 {
            let (a, b, e) = (tap >> 2, (tap >> 1) & 1, tap & 1);
            let dst = &mut taps[(c * 8 + tap) * vi..(c * 8 + tap + 1) * vi];
            for z in 0..d {
                for y in 0..h {
                    let base = ((2 * z + a) * oh + 2 * y + b) * ow + e;
                    let row = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = gc[base + 2 * x];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks analytic gradients of `loss(build(inputs))` against central differences,
    /// where the loss is a fixed random projection of the output.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut g = Graph::no_grad();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            random(g.value(out).shape(), &mut rng)
        };
        let eval = |ins: &[Tensor]| -> f64 {
            let mut g = Graph::no_grad();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).data().iter().zip(probe.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let lg = probe.data().to_vec();
        let loss = g.scalar_fn(&[out], 0.0, vec![lg]);
        g.backward(loss);
        let grads = g.grads_of(&vars);
        let h = 1e-2f32;
        for (k, t) in inputs.iter().enumerate() {
            for idx in (0..t.len()).step_by((t.len() / 40).max(1)) {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
                let an = grads[k][idx] as f64;
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
                assert!(err < tol, "input {k}[{idx}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn conv3d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for geom in [
            ConvGeometry { kernel: 3, stride: 1, pad: 1 },
            ConvGeometry { kernel: 2, stride: 2, pad: 0 },
            ConvGeometry { kernel: 4, stride: 2, pad: 1 },
            ConvGeometry { kernel: 1, stride: 1, pad: 0 },
        ] {
            let k = geom.kernel;
            let ins = vec![
                random(&[2, 2, 4, 4, 4], &mut rng),
                random(&[3, 2, k, k, k], &mut rng),
                random(&[3], &mut rng),
            ];
            check(ins, |g, v| g.conv3d(v[0], v[1], v[2], geom), 2e-3);
        }
    }

    #[test]
    fn up_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![
            random(&[2, 3, 2, 3, 2], &mut rng),
            random(&[3, 2, 2, 2, 2], &mut rng),
            random(&[2], &mut rng),
        ];
        check(ins, |g, v| g.up_conv2(v[0], v[1], v[2]), 2e-3);
    }

    #[test]
    fn up_conv_places_taps() {
        // one input voxel, weight tap t = value t: output block enumerates the taps
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.0]));
        let w = g.constant(Tensor::from_vec(&[1, 1, 2, 2, 2], (0..8).map(|t| t as f32).collect()));
        let b = g.constant(Tensor::from_vec(&[1], vec![0.5]));
        let y = g.up_conv2(x, w, b);
        let expect: Vec<f32> = (0..8).map(|t| t as f32 + 0.5).collect();
        assert_eq!(g.value(y).data(), &expect[..]);
    }

    #[test]
    fn norm_and_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![
            random(&[2, 3, 2, 2, 3], &mut rng),
            random(&[3], &mut rng),
            random(&[3], &mut rng),
        ];
        check(ins.clone(), |g, v| g.instance_norm(v[0], v[1], v[2]), 5e-3);
        check(vec![ins[0].clone()], |g, v| g.sigmoid(v[0]), 2e-3);
        check(vec![ins[0].clone()], |g, v| g.tanh(v[0]), 2e-3);
        check(vec![ins[0].clone()], |g, v| g.leaky_relu(v[0], 0.2), 2e-3);
        check(vec![ins[0].clone()], |g, v| g.global_avg_pool(v[0]), 2e-3);
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[3, 1, 2, 2, 2], &mut rng);
        let b = random(&[3, 2, 2, 2, 2], &mut rng);
        check(vec![a.clone(), b], |g, v| g.concat_channels(v[0], v[1]), 2e-3);
        check(vec![a.clone(), a.clone()], |g, v| g.add(v[0], v[1]), 2e-3);
        check(vec![a], |g, v| g.select(v[0], &[2, 0, 2]), 2e-3);
        let ins = vec![random(&[4, 5], &mut rng), random(&[3, 5], &mut rng), random(&[3], &mut rng)];
        check(ins, |g, v| g.linear(v[0], v[1], v[2]), 2e-3);
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut g = Graph::no_grad();
        let x = g.leaf(Tensor::full(&[1], 2.0));
        assert!(!g.requires_grad(x));
        let y = g.weighted_sum(&[(x, 3.0)]);
        g.backward(y);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn weighted_sum_chain() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let s = g.scalar_fn(&[x], 3.0, vec![vec![1.0, 2.0]]);
        let t = g.weighted_sum(&[(s, 0.5), (s, 0.25)]);
        g.backward(t);
        assert_eq!(g.grad(x).unwrap(), &[0.75, 1.5]);
    }
}
