//! Minimal tape-based reverse-mode differentiation over `f64` tensors.
//!
//! The op set is exactly what the denoiser U-Net and the reference localizer
//! need: same-size 2D convolutions, 2x average pooling / nearest upsampling,
//! group normalization, SiLU, single-head attention primitives and a few
//! loss heads. Each graph is built per sample and thrown away after the
//! backward sweep.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Border handling for 3x3 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Zeros,
    Cyclic,
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(ParamTensor {
            name: name.into(),
            shape,
            data,
        });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Zero-filled buffers with the same layout, for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Rounds every value to the nearest `f32`, the storage precision of
    /// checkpoints.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter `{}` is not finite",
                    t.name
                )));
            }
        }
        Ok(())
    }
}

/// Per-tensor gradients aligned with a [`ParamSet`].
pub type Gradients = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        padding: Padding,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    Silu(Var),
    Add(Var, Var),
    AddChannel {
        x: Var,
        v: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var),
    Scale(Var, f64),
    Reshape(Var),
    Mse {
        x: Var,
        target: Vec<f64>,
    },
    BceLogits {
        x: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        norm: f64,
    },
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        norm: f64,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Computation tape.
pub struct Graph<'p> {
    params: &'p ParamSet,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.push(shape, value, Op::Leaf)
    }

    /// Parameter by index; repeated lookups share one node.
    pub fn param_at(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        let t = &self.params.tensors()[idx];
        let v = self.push(t.shape.clone(), t.data.clone(), Op::Param(idx));
        self.param_vars[idx] = Some(v);
        v
    }

    /// Parameter by name. Panics on an unknown name: parameter names are
    /// fixed by the model builder.
    pub fn param(&mut self, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.param_at(idx)
    }

    /// Same-size convolution with an odd square kernel `w: (Cout, Cin, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be (C, H, W)");
        assert_eq!(ws.len(), 4, "conv2d weight must be (Cout, Cin, k, k)");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        let hw = h * wd;
        let kk = cin * k * k;
        let mut out = vec![0.0; cout * hw];
        let cols_owned;
        let cols: &[f64] = if k == 1 {
            self.value(x)
        } else {
            cols_owned = im2col(self.value(x), cin, h, wd, k, padding);
            &cols_owned
        };
        gemm(
            cout,
            kk,
            hw,
            self.value(w),
            kk,
            1,
            cols,
            hw,
            1,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bias = self.value(b);
            for (co, row) in out.chunks_mut(hw).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        self.push(
            vec![cout, h, wd],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                k,
                padding,
            },
        )
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avg_pool2 needs even spatial dims"
        );
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ci * h * w;
                    let s = xv[base + 2 * y * w + 2 * xx]
                        + xv[base + 2 * y * w + 2 * xx + 1]
                        + xv[base + (2 * y + 1) * w + 2 * xx]
                        + xv[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[(ci * oh + y) * ow + xx] = 0.25 * s;
                }
            }
        }
        self.push(vec![c, oh, ow], out, Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ci * oh + y) * ow + xx] = xv[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(vec![c, oh, ow], out, Op::Upsample2(x))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[1..], sb[1..], "concat spatial mismatch");
        let mut v = self.value(a).to_vec();
        v.extend_from_slice(self.value(b));
        self.push(vec![sa[0] + sb[0], sa[1], sa[2]], v, Op::Concat(a, b))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let s = self.shape(x).to_vec();
        let c = s[0];
        let plane: usize = s[1..].iter().product();
        assert!(
            groups > 0 && c.is_multiple_of(groups),
            "group count must divide channels"
        );
        let cg = c / groups;
        let n = (cg * plane) as f64;
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(groups);
        for g in 0..groups {
            let seg = &xv[g * cg * plane..(g + 1) * cg * plane];
            let mean = seg.iter().sum::<f64>() / n;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            stats.push((mean, rstd));
            for cl in 0..cg {
                let ch = g * cg + cl;
                let (ga, be) = (gv[ch], bv[ch]);
                let src = &xv[ch * plane..(ch + 1) * plane];
                let dst = &mut out[ch * plane..(ch + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - mean) * rstd * ga + be;
                }
            }
        }
        self.push(
            s,
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    /// `x: (C, ...)` plus a per-channel vector `v: (C)`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(self.shape(v), &[s[0]], "add_channel length mismatch");
        let plane: usize = s[1..].iter().product();
        let mut out = self.value(x).to_vec();
        let vv = self.value(v);
        for (c, row) in out.chunks_mut(plane).enumerate() {
            row.iter_mut().for_each(|e| *e += vv[c]);
        }
        self.push(s, out, Op::AddChannel { x, v })
    }

    /// `w: (out, in)` times `x: (in)` plus `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let ws = self.shape(w).to_vec();
        let (o, i) = (ws[0], ws[1]);
        assert_eq!(self.value(x).len(), i, "linear input mismatch");
        let mut out = self.value(b).to_vec();
        gemm(
            o,
            i,
            1,
            self.value(w),
            i,
            1,
            self.value(x),
            1,
            1,
            &mut out,
            1.0,
        );
        self.push(vec![o], out, Op::Linear { x, w, b })
    }

    /// `op(a) @ op(b)` for rank-2 operands, `op` optionally transposing.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2,
            "matmul needs rank-2 operands"
        );
        let (m, k, rsa, csa) = mat_view(&sa, ta);
        let (k2, n, rsb, csb) = mat_view(&sb, tb);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            rsa,
            csa,
            self.value(b),
            rsb,
            csb,
            &mut out,
            0.0,
        );
        self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb })
    }

    /// Row-wise softmax over the last axis of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let cols = s[1];
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(s, out, Op::Softmax(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(x).len(),
            "reshape element count mismatch"
        );
        let v = self.value(x).to_vec();
        self.push(shape, v, Op::Reshape(x))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), target.len(), "mse length mismatch");
        let n = xv.len() as f64;
        let l = xv
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        self.push(
            vec![1],
            vec![l],
            Op::Mse {
                x,
                target: target.to_vec(),
            },
        )
    }

    /// Weighted binary cross-entropy on logits, summed and divided by `norm`.
    pub fn bce_logits(&mut self, x: Var, target: &[f64], weight: &[f64], norm: f64) -> Var {
        let xv = self.value(x);
        let mut l = 0.0;
        for ((&z, &t), &w) in xv.iter().zip(target).zip(weight) {
            if w != 0.0 {
                l += w * (softplus(z) - t * z);
            }
        }
        self.push(
            vec![1],
            vec![l / norm],
            Op::BceLogits {
                x,
                target: target.to_vec(),
                weight: weight.to_vec(),
                norm,
            },
        )
    }

    /// Weighted smooth-L1 (Huber, delta 1), summed and divided by `norm`.
    pub fn smooth_l1(&mut self, x: Var, target: &[f64], weight: &[f64], norm: f64) -> Var {
        let xv = self.value(x);
        let mut l = 0.0;
        for ((&z, &t), &w) in xv.iter().zip(target).zip(weight) {
            if w != 0.0 {
                let d = (z - t).abs();
                l += w * if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
            }
        }
        self.push(
            vec![1],
            vec![l / norm],
            Op::SmoothL1 {
                x,
                target: target.to_vec(),
                weight: weight.to_vec(),
                norm,
            },
        )
    }

    /// Reverse sweep from scalar `loss`; returns gradients for every
    /// parameter tensor (zeros for parameters the graph never touched).
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = self.params.zeros_like();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(idx) => {
                    for (o, v) in out[*idx].iter_mut().zip(&g) {
                        *o += v;
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    k,
                    padding,
                } => {
                    let xs = &self.nodes[x.0].shape;
                    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                    let cout = node.shape[0];
                    let hw = h * wd;
                    let kk = cin * k * k;
                    let cols_owned;
                    let cols: &[f64] = if *k == 1 {
                        &self.nodes[x.0].value
                    } else {
                        cols_owned = im2col(&self.nodes[x.0].value, cin, h, wd, *k, *padding);
                        &cols_owned
                    };
                    // dW += dOut (Cout x HW) @ cols^T (HW x K)
                    let dw = slot(&mut grads, &self.nodes, *w);
                    gemm(cout, hw, kk, &g, hw, 1, cols, 1, hw, dw, 1.0);
                    if let Some(b) = b {
                        let db = slot(&mut grads, &self.nodes, *b);
                        for (co, row) in g.chunks(hw).enumerate() {
                            db[co] += row.iter().sum::<f64>();
                        }
                    }
                    // dcols = W^T (K x Cout) @ dOut (Cout x HW)
                    let wv = &self.nodes[w.0].value;
                    if *k == 1 {
                        let dx = slot(&mut grads, &self.nodes, *x);
                        gemm(kk, cout, hw, wv, 1, kk, &g, hw, 1, dx, 1.0);
                    } else {
                        let mut dcols = vec![0.0; kk * hw];
                        gemm(kk, cout, hw, wv, 1, kk, &g, hw, 1, &mut dcols, 0.0);
                        let dx = slot(&mut grads, &self.nodes, *x);
                        col2im(&dcols, dx, cin, h, wd, *k, *padding);
                    }
                }
                Op::AvgPool2(x) => {
                    let xs = &self.nodes[x.0].shape;
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let dx = slot(&mut grads, &self.nodes, *x);
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[(ci * h + y) * w + xx] +=
                                    0.25 * g[(ci * oh + y / 2) * ow + xx / 2];
                            }
                        }
                    }
                }
                Op::Upsample2(x) => {
                    let xs = &self.nodes[x.0].shape;
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let dx = slot(&mut grads, &self.nodes, *x);
                    for ci in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                dx[(ci * h + y / 2) * w + xx / 2] += g[(ci * oh + y) * ow + xx];
                            }
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a.0].value.len();
                    accumulate(slot(&mut grads, &self.nodes, *a), &g[..na]);
                    accumulate(slot(&mut grads, &self.nodes, *b), &g[na..]);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let c = node.shape[0];
                    let plane: usize = node.shape[1..].iter().product();
                    let cg = c / groups;
                    let n = (cg * plane) as f64;
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gamma.0].value;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx_local = vec![0.0; xv.len()];
                    for (gi, &(mean, rstd)) in stats.iter().enumerate() {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for cl in 0..cg {
                            let ch = gi * cg + cl;
                            for p in 0..plane {
                                let idx = ch * plane + p;
                                let xhat = (xv[idx] - mean) * rstd;
                                let dy = g[idx];
                                dgamma[ch] += dy * xhat;
                                dbeta[ch] += dy;
                                let dxhat = dy * gv[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        let (m1, m2) = (sum_dxhat / n, sum_dxhat_xhat / n);
                        for cl in 0..cg {
                            let ch = gi * cg + cl;
                            for p in 0..plane {
                                let idx = ch * plane + p;
                                let xhat = (xv[idx] - mean) * rstd;
                                let dxhat = g[idx] * gv[ch];
                                dx_local[idx] = rstd * (dxhat - m1 - xhat * m2);
                            }
                        }
                    }
                    accumulate(slot(&mut grads, &self.nodes, *x), &dx_local);
                    accumulate(slot(&mut grads, &self.nodes, *gamma), &dgamma);
                    accumulate(slot(&mut grads, &self.nodes, *beta), &dbeta);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let local: Vec<f64> = xv
                        .iter()
                        .zip(&g)
                        .map(|(&v, &d)| {
                            let s = sigmoid(v);
                            d * (s + v * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(slot(&mut grads, &self.nodes, *x), &local);
                }
                Op::Add(a, b) => {
                    accumulate(slot(&mut grads, &self.nodes, *a), &g);
                    accumulate(slot(&mut grads, &self.nodes, *b), &g);
                }
                Op::AddChannel { x, v } => {
                    let plane: usize = node.shape[1..].iter().product();
                    let dv: Vec<f64> = g.chunks(plane).map(|r| r.iter().sum()).collect();
                    accumulate(slot(&mut grads, &self.nodes, *x), &g);
                    accumulate(slot(&mut grads, &self.nodes, *v), &dv);
                }
                Op::Linear { x, w, b } => {
                    let ws = &self.nodes[w.0].shape;
                    let (o, i_) = (ws[0], ws[1]);
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    accumulate(slot(&mut grads, &self.nodes, *b), &g);
                    let dw = slot(&mut grads, &self.nodes, *w);
                    for r in 0..o {
                        let gr = g[r];
                        for (d, &xv) in dw[r * i_..(r + 1) * i_].iter_mut().zip(xv) {
                            *d += gr * xv;
                        }
                    }
                    let dx = slot(&mut grads, &self.nodes, *x);
                    gemm(i_, o, 1, wv, 1, i_, &g, 1, 1, dx, 1.0);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let sa = self.nodes[a.0].shape.clone();
                    let sb = self.nodes[b.0].shape.clone();
                    let (m, k, rsa, csa) = mat_view(&sa, *ta);
                    let (_, n, rsb, csb) = mat_view(&sb, *tb);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mut da = vec![0.0; m * k];
                    // d op(A) = dC @ op(B)^T
                    gemm(m, n, k, &g, n, 1, bv, csb, rsb, &mut da, 0.0);
                    let mut db = vec![0.0; k * n];
                    // d op(B) = op(A)^T @ dC
                    gemm(k, m, n, av, csa, rsa, &g, n, 1, &mut db, 0.0);
                    let da = if *ta { transpose(&da, m, k) } else { da };
                    let db = if *tb { transpose(&db, k, n) } else { db };
                    accumulate(slot(&mut grads, &self.nodes, *a), &da);
                    accumulate(slot(&mut grads, &self.nodes, *b), &db);
                }
                Op::Softmax(x) => {
                    let cols = node.shape[1];
                    let mut local = vec![0.0; g.len()];
                    for ((yr, gr), lr) in node
                        .value
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(local.chunks_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, d)| y * d).sum();
                        for ((l, &y), &d) in lr.iter_mut().zip(yr).zip(gr) {
                            *l = y * (d - dot);
                        }
                    }
                    accumulate(slot(&mut grads, &self.nodes, *x), &local);
                }
                Op::Scale(x, s) => {
                    let local: Vec<f64> = g.iter().map(|v| v * s).collect();
                    accumulate(slot(&mut grads, &self.nodes, *x), &local);
                }
                Op::Reshape(x) => {
                    accumulate(slot(&mut grads, &self.nodes, *x), &g);
                }
                Op::Mse { x, target } => {
                    let xv = &self.nodes[x.0].value;
                    let c = 2.0 * g[0] / xv.len() as f64;
                    let local: Vec<f64> = xv.iter().zip(target).map(|(a, b)| c * (a - b)).collect();
                    accumulate(slot(&mut grads, &self.nodes, *x), &local);
                }
                Op::BceLogits {
                    x,
                    target,
                    weight,
                    norm,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let local: Vec<f64> = xv
                        .iter()
                        .zip(target)
                        .zip(weight)
                        .map(|((&z, &t), &w)| g[0] * w * (sigmoid(z) - t) / norm)
                        .collect();
                    accumulate(slot(&mut grads, &self.nodes, *x), &local);
                }
                Op::SmoothL1 {
                    x,
                    target,
                    weight,
                    norm,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let local: Vec<f64> = xv
                        .iter()
                        .zip(target)
                        .zip(weight)
                        .map(|((&z, &t), &w)| {
                            let d = z - t;
                            g[0] * w * d.clamp(-1.0, 1.0) / norm
                        })
                        .collect();
                    accumulate(slot(&mut grads, &self.nodes, *x), &local);
                }
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// (rows, cols, row stride, col stride) of `op(M)` for a stored `(r, c)` matrix.
fn mat_view(shape: &[usize], transposed: bool) -> (usize, usize, usize, usize) {
    let (r, c) = (shape[0], shape[1]);
    if transposed {
        (c, r, 1, c)
    } else {
        (r, c, c, 1)
    }
}

/// `c = a @ b + beta * c` with `c` row-major `(m, n)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: bounds of all three operands are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, padding: Padding) -> Vec<f64> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let sy = match padding {
                        Padding::Zeros if sy < 0 || sy >= h as isize => continue,
                        Padding::Zeros => sy as usize,
                        Padding::Cyclic => sy.rem_euclid(h as isize) as usize,
                    };
                    let src = &plane[sy * w..(sy + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match padding {
                        Padding::Zeros => {
                            let lo = (-dx).max(0) as usize;
                            let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                            for xx in lo..hi {
                                dst[xx] = src[(xx as isize + dx) as usize];
                            }
                        }
                        Padding::Cyclic => {
                            for (xx, d) in dst.iter_mut().enumerate() {
                                *d = src[(xx as isize + dx).rem_euclid(w as isize) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, k: usize, padding: Padding) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - p;
                let dxo = kx as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let sy = match padding {
                        Padding::Zeros if sy < 0 || sy >= h as isize => continue,
                        Padding::Zeros => sy as usize,
                        Padding::Cyclic => sy.rem_euclid(h as isize) as usize,
                    };
                    let src = &row[y * w..(y + 1) * w];
                    let plane = &mut dx[ci * hw + sy * w..ci * hw + (sy + 1) * w];
                    match padding {
                        Padding::Zeros => {
                            let lo = (-dxo).max(0) as usize;
                            let hi = (w as isize - dxo).min(w as isize).max(0) as usize;
                            for xx in lo..hi {
                                plane[(xx as isize + dxo) as usize] += src[xx];
                            }
                        }
                        Padding::Cyclic => {
                            for (xx, s) in src.iter().enumerate() {
                                plane[(xx as isize + dxo).rem_euclid(w as isize) as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Central finite-difference derivative of `f` with respect to element
/// `elem` of parameter tensor `tensor`.
pub fn finite_difference(
    params: &ParamSet,
    tensor: usize,
    elem: usize,
    h: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> f64 {
    let mut p = params.clone();
    let base = p.tensors()[tensor].data[elem];
    p.tensors_mut()[tensor].data[elem] = base + h;
    let up = f(&p);
    p.tensors_mut()[tensor].data[elem] = base - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Checks a loss for finiteness, naming the offending stage on failure.
pub fn check_loss(value: f64, what: &str) -> Result<f64> {
    ensure!(value.is_finite(), Numeric, "{what} is not finite ({value})");
    Ok(value)
}
