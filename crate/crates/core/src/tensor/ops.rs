//! Forward primitives and their recorded graph operations.
//!
//! Every primitive validates its shape rule, computes the output, verifies
//! the result is finite, and records an [`Op`] edge when any input requires
//! gradients. Shape rules are documented per method.

use rayon::prelude::*;

use super::{check_finite, scalar_from, Scalar, Tensor};
use crate::error::{Error, Result};

/// Minimum admissible row norm for `l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;

/// Recorded operation; holds the inputs (graph edges) plus whatever forward
/// intermediates the backward rule needs.
pub(crate) enum Op<S: Scalar> {
    Matmul {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Conv2d {
        x: Tensor<S>,
        w: Tensor<S>,
        stride: usize,
        padding: usize,
    },
    Add {
        a: Tensor<S>,
        b: Tensor<S>,
        /// `b` is a rank-1 bias broadcast over the rows of `a`.
        bias_broadcast: bool,
    },
    Sub {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    ScalarMul {
        x: Tensor<S>,
        c: S,
    },
    Mul {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Relu {
        x: Tensor<S>,
    },
    BatchNorm {
        x: Tensor<S>,
        gamma: Tensor<S>,
        beta: Tensor<S>,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    GlobalAvgPool {
        x: Tensor<S>,
    },
    MaxPool {
        x: Tensor<S>,
        argmax: Vec<u32>,
    },
    SoftmaxLastDim {
        x: Tensor<S>,
    },
    LogSoftmaxLastDim {
        x: Tensor<S>,
    },
    Log {
        x: Tensor<S>,
    },
    Exp {
        x: Tensor<S>,
    },
    Sum {
        x: Tensor<S>,
    },
    Mean {
        x: Tensor<S>,
    },
    Reshape {
        x: Tensor<S>,
    },
    ConcatRows {
        parts: Vec<Tensor<S>>,
    },
    Transpose {
        x: Tensor<S>,
    },
    L2Normalize {
        x: Tensor<S>,
        inv_norm: Vec<S>,
    },
}

impl<S: Scalar> Op<S> {
    /// Graph edges of this operation, in a fixed order.
    pub(crate) fn inputs(&self) -> Vec<&Tensor<S>> {
        match self {
            Op::Matmul { a, b } | Op::Add { a, b, .. } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![a, b]
            }
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::ScalarMul { x, .. }
            | Op::Relu { x }
            | Op::GlobalAvgPool { x }
            | Op::MaxPool { x, .. }
            | Op::SoftmaxLastDim { x }
            | Op::LogSoftmaxLastDim { x }
            | Op::Log { x }
            | Op::Exp { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x }
            | Op::Transpose { x }
            | Op::L2Normalize { x, .. } => vec![x],
            Op::ConcatRows { parts } => parts.iter().collect(),
        }
    }
}

/// Row-major `C[m,n] = A[m,k] @ B` where `B` is given with explicit strides.
/// Large `m` is split into fixed row blocks and processed in parallel; the
/// per-element reduction order is independent of thread count.
pub(crate) fn gemm_rm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    b: &[S],
    b_rs: isize,
    b_cs: isize,
    c: &mut [S],
) {
    const ROW_BLOCK: usize = 8192;
    if m <= ROW_BLOCK {
        S::gemm_strided(m, k, n, S::one(), a, k as isize, 1, b, b_rs, b_cs, S::zero(), c);
        return;
    }
    c.par_chunks_mut(ROW_BLOCK * n)
        .zip(a.par_chunks(ROW_BLOCK * k))
        .for_each(|(c_blk, a_blk)| {
            let rows = c_blk.len() / n;
            S::gemm_strided(
                rows,
                k,
                n,
                S::one(),
                a_blk,
                k as isize,
                1,
                b,
                b_rs,
                b_cs,
                S::zero(),
                c_blk,
            );
        });
}

impl<S: Scalar> Tensor<S> {
    fn record(
        shape: Vec<usize>,
        values: Vec<S>,
        context: &'static str,
        needs_grad: bool,
        op: impl FnOnce() -> Op<S>,
    ) -> Result<Tensor<S>> {
        check_finite(context, &values)?;
        let op = if needs_grad { Some(op()) } else { None };
        Ok(Tensor::from_inner(shape, values, needs_grad, op))
    }

    /// 2-D matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm_rm(m, k, n, self.values(), rhs.values(), n as isize, 1, &mut out);
        let needs = self.requires_grad() || rhs.requires_grad();
        Self::record(vec![m, n], out, "matmul", needs, || Op::Matmul {
            a: self.clone(),
            b: rhs.clone(),
        })
    }

    /// 2-D convolution: `x [N,C,H,W]` with kernel `w [OC,C,KH,KW]` (square
    /// kernel), zero padding. Output `[N,OC,OH,OW]` with
    /// `OH = (H + 2*padding - KH)/stride + 1`.
    pub fn conv2d(&self, w: &Tensor<S>, stride: usize, padding: usize) -> Result<Tensor<S>> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (oc, k) = (sw[0], sw[2]);
        let (oh, ow) = match (conv_out(h, padding, k, stride), conv_out(wd, padding, k, stride)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} does not fit input {h}x{wd} with padding {padding}"),
                ))
            }
        };
        let cols = im2col(self.values(), n, c, h, wd, k, stride, padding, oh, ow);
        let ckk = c * k * k;
        let rows = n * oh * ow;
        let mut out_rm = vec![S::zero(); rows * oc];
        // B = w^T viewed through strides: w is [OC, CKK] row-major.
        gemm_rm(rows, ckk, oc, &cols, w.values(), 1, ckk as isize, &mut out_rm);
        // [N*OH*OW, OC] -> [N, OC, OH, OW]
        let hw = oh * ow;
        let mut out = vec![S::zero(); n * oc * hw];
        out.par_chunks_mut(oc * hw)
            .enumerate()
            .for_each(|(ni, chunk)| {
                let blk = &out_rm[ni * hw * oc..(ni + 1) * hw * oc];
                for (ci, plane) in chunk.chunks_exact_mut(hw).enumerate() {
                    for (d, &s) in plane.iter_mut().zip(blk[ci..].iter().step_by(oc)) {
                        *d = s;
                    }
                }
            });
        let needs = self.requires_grad() || w.requires_grad();
        Self::record(vec![n, oc, oh, ow], out, "conv2d", needs, || Op::Conv2d {
            x: self.clone(),
            w: w.clone(),
            stride,
            padding,
        })
    }

    /// Elementwise addition. Shapes must match, or `rhs` may be a rank-1
    /// vector broadcast over the rows of a rank-2 `self` (bias add).
    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let needs = self.requires_grad() || rhs.requires_grad();
        if self.shape() == rhs.shape() {
            let values = self
                .values()
                .iter()
                .zip(rhs.values())
                .map(|(&a, &b)| a + b)
                .collect();
            return Self::record(self.shape().to_vec(), values, "add", needs, || Op::Add {
                a: self.clone(),
                b: rhs.clone(),
                bias_broadcast: false,
            });
        }
        if self.shape().len() == 2 && rhs.shape().len() == 1 && rhs.shape()[0] == self.shape()[1] {
            let d = self.shape()[1];
            let bias = rhs.values();
            let values = self
                .values()
                .chunks_exact(d)
                .flat_map(|row| row.iter().zip(bias).map(|(&a, &b)| a + b))
                .collect();
            return Self::record(self.shape().to_vec(), values, "add", needs, || Op::Add {
                a: self.clone(),
                b: rhs.clone(),
                bias_broadcast: true,
            });
        }
        Err(Error::shape(
            "add",
            format!("{:?} + {:?}", self.shape(), rhs.shape()),
        ))
    }

    /// Elementwise subtraction of equal shapes.
    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                "sub",
                format!("{:?} - {:?}", self.shape(), rhs.shape()),
            ));
        }
        let values = self
            .values()
            .iter()
            .zip(rhs.values())
            .map(|(&a, &b)| a - b)
            .collect();
        let needs = self.requires_grad() || rhs.requires_grad();
        Self::record(self.shape().to_vec(), values, "sub", needs, || Op::Sub {
            a: self.clone(),
            b: rhs.clone(),
        })
    }

    /// Multiplication by a constant scalar.
    pub fn mul_scalar(&self, c: S) -> Result<Tensor<S>> {
        if !c.is_finite() {
            return Err(Error::numeric("scalar_mul constant"));
        }
        let values = self.values().iter().map(|&v| v * c).collect();
        Self::record(
            self.shape().to_vec(),
            values,
            "scalar_mul",
            self.requires_grad(),
            || Op::ScalarMul { x: self.clone(), c },
        )
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                "elementwise_mul",
                format!("{:?} * {:?}", self.shape(), rhs.shape()),
            ));
        }
        let values = self
            .values()
            .iter()
            .zip(rhs.values())
            .map(|(&a, &b)| a * b)
            .collect();
        let needs = self.requires_grad() || rhs.requires_grad();
        Self::record(self.shape().to_vec(), values, "elementwise_mul", needs, || Op::Mul {
            a: self.clone(),
            b: rhs.clone(),
        })
    }

    pub fn relu(&self) -> Result<Tensor<S>> {
        let values = self
            .values()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        Self::record(
            self.shape().to_vec(),
            values,
            "relu",
            self.requires_grad(),
            || Op::Relu { x: self.clone() },
        )
    }

    /// Global average pooling `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if hw == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let inv = S::one() / scalar_from::<S>(hw as f64);
        let values = self
            .values()
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<S>() * inv)
            .collect();
        Self::record(vec![n, c], values, "global_avg_pool", self.requires_grad(), || {
            Op::GlobalAvgPool { x: self.clone() }
        })
    }

    /// Max pooling over non-overlapping-or-strided square windows, no padding.
    pub fn max_pool(&self, kernel: usize, stride: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 4 || kernel == 0 || stride == 0 {
            return Err(Error::shape("max_pool", format!("{s:?}, kernel {kernel}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = match (conv_out(h, 0, kernel, stride), conv_out(w, 0, kernel, stride)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "max_pool",
                    format!("kernel {kernel} does not fit {h}x{w}"),
                ))
            }
        };
        let x = self.values();
        let mut values = vec![S::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; values.len()];
        let mut o = 0;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_idx = 0usize;
                        for ky in 0..kernel {
                            let row = base + (oy * stride + ky) * w + ox * stride;
                            for kx in 0..kernel {
                                let v = x[row + kx];
                                if v > best {
                                    best = v;
                                    best_idx = row + kx;
                                }
                            }
                        }
                        values[o] = best;
                        argmax[o] = best_idx as u32;
                        o += 1;
                    }
                }
            }
        }
        Self::record(vec![n, c, oh, ow], values, "max_pool", self.requires_grad(), || {
            Op::MaxPool {
                x: self.clone(),
                argmax,
            }
        })
    }

    /// Row-wise softmax over the last axis, computed with max subtraction.
    pub fn softmax_last_dim(&self) -> Result<Tensor<S>> {
        let values = rowwise_softmax(self.values(), self.last_dim("softmax_last_dim")?);
        Self::record(
            self.shape().to_vec(),
            values,
            "softmax_last_dim",
            self.requires_grad(),
            || Op::SoftmaxLastDim { x: self.clone() },
        )
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax_last_dim(&self) -> Result<Tensor<S>> {
        let d = self.last_dim("log_softmax_last_dim")?;
        let mut values = Vec::with_capacity(self.numel());
        for row in self.values().chunks_exact(d) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let log_z = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            values.extend(row.iter().map(|&v| v - log_z));
        }
        Self::record(
            self.shape().to_vec(),
            values,
            "log_softmax_last_dim",
            self.requires_grad(),
            || Op::LogSoftmaxLastDim { x: self.clone() },
        )
    }

    /// Natural logarithm, elementwise. Non-positive inputs surface as a
    /// numeric error through the finiteness check.
    pub fn log(&self) -> Result<Tensor<S>> {
        let values = self.values().iter().map(|&v| v.ln()).collect();
        Self::record(
            self.shape().to_vec(),
            values,
            "log",
            self.requires_grad(),
            || Op::Log { x: self.clone() },
        )
    }

    pub fn exp(&self) -> Result<Tensor<S>> {
        let values = self.values().iter().map(|&v| v.exp()).collect();
        Self::record(
            self.shape().to_vec(),
            values,
            "exp",
            self.requires_grad(),
            || Op::Exp { x: self.clone() },
        )
    }

    /// Sum of all elements, rank-0 result.
    pub fn sum(&self) -> Result<Tensor<S>> {
        if self.numel() == 0 {
            return Err(Error::shape("sum", "empty tensor"));
        }
        let total = self.values().iter().copied().sum();
        Self::record(Vec::new(), vec![total], "sum", self.requires_grad(), || Op::Sum {
            x: self.clone(),
        })
    }

    /// Mean of all elements, rank-0 result.
    pub fn mean(&self) -> Result<Tensor<S>> {
        if self.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let total: S = self.values().iter().copied().sum();
        let mean = total / scalar_from::<S>(self.numel() as f64);
        Self::record(Vec::new(), vec![mean], "mean", self.requires_grad(), || Op::Mean {
            x: self.clone(),
        })
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Self::record(
            shape.to_vec(),
            self.values().to_vec(),
            "reshape",
            self.requires_grad(),
            || Op::Reshape { x: self.clone() },
        )
    }

    /// Stack tensors along axis 0; trailing dimensions must match.
    pub fn concat_rows(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        if first.shape().is_empty() {
            return Err(Error::shape("concat_rows", "rank-0 input"));
        }
        let trailing = &first.shape()[1..];
        let mut rows = 0usize;
        for p in parts {
            if p.shape().is_empty() || &p.shape()[1..] != trailing {
                return Err(Error::shape(
                    "concat_rows",
                    format!("mismatched trailing dims {:?} vs {:?}", p.shape(), first.shape()),
                ));
            }
            rows += p.shape()[0];
        }
        let mut values = Vec::with_capacity(rows * trailing.iter().product::<usize>());
        for p in parts {
            values.extend_from_slice(p.values());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(trailing);
        let needs = parts.iter().any(Tensor::requires_grad);
        Self::record(shape, values, "concat_rows", needs, || Op::ConcatRows {
            parts: parts.to_vec(),
        })
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.values();
        let mut values = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = x[i * n + j];
            }
        }
        Self::record(vec![n, m], values, "transpose", self.requires_grad(), || {
            Op::Transpose { x: self.clone() }
        })
    }

    /// L2-normalize along the last axis. Rows with norm below [`NORM_EPS`]
    /// are an error; degenerate representations must be visible.
    pub fn l2_normalize(&self) -> Result<Tensor<S>> {
        let d = self.last_dim("l2_normalize")?;
        let eps = scalar_from::<S>(NORM_EPS);
        let rows = self.numel() / d;
        let mut inv_norm = Vec::with_capacity(rows);
        let mut values = Vec::with_capacity(self.numel());
        for (r, row) in self.values().chunks_exact(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm < eps {
                return Err(Error::ZeroNorm {
                    op: "l2_normalize",
                    row: r,
                    norm: norm.to_f64().unwrap_or(0.0),
                    eps: NORM_EPS,
                });
            }
            let inv = S::one() / norm;
            inv_norm.push(inv);
            values.extend(row.iter().map(|&v| v * inv));
        }
        Self::record(
            self.shape().to_vec(),
            values,
            "l2_normalize",
            self.requires_grad(),
            || Op::L2Normalize {
                x: self.clone(),
                inv_norm,
            },
        )
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        match self.shape().last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(Error::shape(op, format!("{:?}", self.shape()))),
        }
    }
}

/// Batch normalization in training mode: normalizes with the batch statistics
/// of `x` per channel and returns `(output, batch_mean, batch_var)` so the
/// caller can maintain running statistics. `x` is `[N,D]` (per-feature) or
/// `[N,C,H,W]` (per-channel over batch and space); variance is biased (1/M).
pub fn batch_norm_train<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, Vec<S>, Vec<S>)> {
    let dims = BnDims::of(x.shape(), gamma.shape(), beta.shape())?;
    let inv_m = S::one() / scalar_from::<S>((dims.batch * dims.spatial) as f64);
    let xv = x.values();
    let c = dims.channels;

    let mut mean = vec![S::zero(); c];
    dims.fold_channels(xv, &mut mean, |acc, v| *acc += v);
    for v in &mut mean {
        *v *= inv_m;
    }
    let mut var = vec![S::zero(); c];
    dims.fold_channels_with(xv, &mean, &mut var, |acc, v, m| {
        let d = v - m;
        *acc += d * d;
    });
    for v in &mut var {
        *v *= inv_m;
    }
    let eps = scalar_from::<S>(eps);
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let out = bn_affine(x, gamma, beta, &mean, &inv_std, &dims, true)?;
    Ok((out, mean, var))
}

/// Batch normalization in evaluation mode: an affine map of the input using
/// fixed running statistics; rows are independent of each other.
pub fn batch_norm_eval<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &[S],
    running_var: &[S],
    eps: f64,
) -> Result<Tensor<S>> {
    let dims = BnDims::of(x.shape(), gamma.shape(), beta.shape())?;
    if running_mean.len() != dims.channels || running_var.len() != dims.channels {
        return Err(Error::shape("batch_norm", "running statistics length mismatch"));
    }
    let eps = scalar_from::<S>(eps);
    let inv_std: Vec<S> = running_var
        .iter()
        .map(|&v| S::one() / (v + eps).sqrt())
        .collect();
    bn_affine(x, gamma, beta, running_mean, &inv_std, &dims, false)
}

fn bn_affine<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    mean: &[S],
    inv_std: &[S],
    dims: &BnDims,
    train: bool,
) -> Result<Tensor<S>> {
    let xv = x.values();
    let (gv, bv) = (gamma.values(), beta.values());
    let needs = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let mut out = vec![S::zero(); xv.len()];
    // The normalized activations are only kept when backward will need them.
    let mut xhat = if needs {
        vec![S::zero(); xv.len()]
    } else {
        Vec::new()
    };
    let c = dims.channels;
    if dims.spatial == 1 {
        if needs {
            for ((orow, hrow), xrow) in out
                .chunks_exact_mut(c)
                .zip(xhat.chunks_exact_mut(c))
                .zip(xv.chunks_exact(c))
            {
                for i in 0..c {
                    let h = (xrow[i] - mean[i]) * inv_std[i];
                    hrow[i] = h;
                    orow[i] = gv[i] * h + bv[i];
                }
            }
        } else {
            for (orow, xrow) in out.chunks_exact_mut(c).zip(xv.chunks_exact(c)) {
                for i in 0..c {
                    orow[i] = gv[i] * (xrow[i] - mean[i]) * inv_std[i] + bv[i];
                }
            }
        }
    } else {
        let spatial = dims.spatial;
        if needs {
            for (i, (oplane, hplane)) in out
                .chunks_exact_mut(spatial)
                .zip(xhat.chunks_exact_mut(spatial))
                .enumerate()
            {
                let ch = i % c;
                let (m, is, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                let xplane = &xv[i * spatial..(i + 1) * spatial];
                for ((o, hh), &xx) in oplane.iter_mut().zip(hplane.iter_mut()).zip(xplane) {
                    let h = (xx - m) * is;
                    *hh = h;
                    *o = g * h + b;
                }
            }
        } else {
            for (i, oplane) in out.chunks_exact_mut(spatial).enumerate() {
                let ch = i % c;
                let (m, is, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                let xplane = &xv[i * spatial..(i + 1) * spatial];
                for (o, &xx) in oplane.iter_mut().zip(xplane) {
                    *o = g * (xx - m) * is + b;
                }
            }
        }
    }
    check_finite("batch_norm", &out)?;
    let op = if needs {
        Some(Op::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std: inv_std.to_vec(),
            train,
        })
    } else {
        None
    };
    Ok(Tensor::from_inner(x.shape().to_vec(), out, needs, op))
}

/// Channel layout for batch-norm style reductions: `[N, C]` rows or
/// `[N, C, spatial]` planes.
pub(crate) struct BnDims {
    pub channels: usize,
    pub batch: usize,
    pub spatial: usize,
}

impl BnDims {
    pub(crate) fn of_shape(x: &[usize]) -> Result<Self> {
        match x {
            [n, d] => Ok(BnDims {
                channels: *d,
                batch: *n,
                spatial: 1,
            }),
            [n, c, h, w] => Ok(BnDims {
                channels: *c,
                batch: *n,
                spatial: h * w,
            }),
            _ => Err(Error::shape("batch_norm", format!("rank {} input", x.len()))),
        }
    }

    fn of(x: &[usize], gamma: &[usize], beta: &[usize]) -> Result<Self> {
        let dims = Self::of_shape(x)?;
        if gamma != [dims.channels] || beta != [dims.channels] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma {gamma:?} / beta {beta:?} for {} channels", dims.channels),
            ));
        }
        Ok(dims)
    }

    /// Per-channel reduction of `values` into `acc` (one slot per channel).
    pub(crate) fn fold_channels<S: Scalar>(
        &self,
        values: &[S],
        acc: &mut [S],
        f: impl Fn(&mut S, S) + Copy,
    ) {
        let c = self.channels;
        if self.spatial == 1 {
            for row in values.chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    f(a, v);
                }
            }
        } else {
            for (i, plane) in values.chunks_exact(self.spatial).enumerate() {
                let a = &mut acc[i % c];
                for &v in plane {
                    f(a, v);
                }
            }
        }
    }

    /// Per-channel reduction with a per-channel context value (e.g. the mean).
    pub(crate) fn fold_channels_with<S: Scalar>(
        &self,
        values: &[S],
        ctx: &[S],
        acc: &mut [S],
        f: impl Fn(&mut S, S, S) + Copy,
    ) {
        let c = self.channels;
        if self.spatial == 1 {
            for row in values.chunks_exact(c) {
                for ((a, &v), &m) in acc.iter_mut().zip(row).zip(ctx) {
                    f(a, v, m);
                }
            }
        } else {
            for (i, plane) in values.chunks_exact(self.spatial).enumerate() {
                let ch = i % c;
                let a = &mut acc[ch];
                let m = ctx[ch];
                for &v in plane {
                    f(a, v, m);
                }
            }
        }
    }
}

pub(crate) fn conv_out(extent: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Clipped kernel column range `[kx_lo, kx_hi)` whose source pixels fall
/// inside `[0, w)` for a window starting at `ix0`.
#[inline]
fn kernel_span(ix0: isize, k: usize, w: usize) -> (usize, usize) {
    let lo = (-ix0).max(0) as usize;
    let hi = ((w as isize - ix0).max(0) as usize).min(k);
    (lo, hi.max(lo))
}

/// Unfold `x [N,C,H,W]` into `[N*OH*OW, C*K*K]` patch rows (zero padded).
/// Interior rows reduce to contiguous slice copies.
pub(crate) fn im2col<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ckk = c * k * k;
    let mut cols = vec![S::zero(); n * oh * ow * ckk];
    cols.par_chunks_mut(oh * ow * ckk)
        .enumerate()
        .for_each(|(ni, block)| {
            let x_img = &x[ni * c * h * w..(ni + 1) * c * h * w];
            let mut rows = block.chunks_exact_mut(ckk);
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let row = rows.next().expect("row count matches oh*ow");
                    let (kx_lo, kx_hi) = kernel_span(ix0, k, w);
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    let src_x = (ix0 + kx_lo as isize) as usize;
                    let run = kx_hi - kx_lo;
                    for ci in 0..c {
                        let plane = &x_img[ci * h * w..(ci + 1) * h * w];
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let src = iy as usize * w + src_x;
                            let dst = ci * k * k + ky * k + kx_lo;
                            row[dst..dst + run].copy_from_slice(&plane[src..src + run]);
                        }
                    }
                }
            }
        });
    cols
}

/// Fold patch-row gradients back onto the input image (adjoint of `im2col`).
pub(crate) fn col2im<S: Scalar>(
    dcols: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ckk = c * k * k;
    let mut dx = vec![S::zero(); n * c * h * w];
    dx.par_chunks_mut(c * h * w)
        .enumerate()
        .for_each(|(ni, img)| {
            let block = &dcols[ni * oh * ow * ckk..(ni + 1) * oh * ow * ckk];
            let mut rows = block.chunks_exact(ckk);
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let row = rows.next().expect("row count matches oh*ow");
                    let (kx_lo, kx_hi) = kernel_span(ix0, k, w);
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    let dst_x = (ix0 + kx_lo as isize) as usize;
                    let run = kx_hi - kx_lo;
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let dst = ci * h * w + iy as usize * w + dst_x;
                            let src = ci * k * k + ky * k + kx_lo;
                            for (d, &s) in img[dst..dst + run].iter_mut().zip(&row[src..src + run])
                            {
                                *d += s;
                            }
                        }
                    }
                }
            }
        });
    dx
}

pub(crate) fn rowwise_softmax<S: Scalar>(values: &[S], d: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks_exact(d) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        let start = out.len();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        let inv = S::one() / sum;
        for v in &mut out[start..] {
            *v *= inv;
        }
    }
    out
}
