//! Reverse-mode differentiation over the recorded graph.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use super::ops::{col2im, conv_out, im2col, BnDims, Op};
use super::{scalar_from, Scalar, Tensor};
use crate::error::{Error, Result};

/// Gradients produced by [`backward`], keyed by graph node identity.
pub struct Gradients<S: Scalar> {
    map: HashMap<usize, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `t`, if `t` was reachable.
    pub fn get(&self, t: &Tensor<S>) -> Option<&[S]> {
        self.map.get(&t.node_id()).map(Vec::as_slice)
    }

    /// Insert an all-zero gradient for any listed tensor that the reverse
    /// sweep did not reach, so optimizers see a complete gradient map.
    pub fn ensure_zeros<'a>(&mut self, tensors: impl IntoIterator<Item = &'a Tensor<S>>) {
        for t in tensors {
            self.map
                .entry(t.node_id())
                .or_insert_with(|| vec![S::zero(); t.numel()]);
        }
    }
}

/// Accumulate `dloss/dnode` for every node reachable from the scalar `loss`.
///
/// Returns a map holding gradients for all visited nodes; leaves that require
/// gradients are the ones callers normally query. Nodes that do not require
/// gradients act as constants and are never entered.
pub fn backward<S: Scalar>(loss: &Tensor<S>) -> Result<Gradients<S>> {
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let order = topological_order(loss);
    let mut map: HashMap<usize, Vec<S>> = HashMap::with_capacity(order.len());
    map.insert(loss.node_id(), vec![S::one()]);

    for node in order.iter().rev() {
        let Some(op) = node.op() else { continue };
        // Reverse topological order means this node's gradient is complete;
        // it can be moved out since only leaves are queried afterwards.
        let out_grad = match map.remove(&node.node_id()) {
            Some(g) => g,
            None => continue,
        };
        apply_vjp(node, op, &out_grad, &mut map);
    }
    Ok(Gradients { map })
}

/// Post-order over the subgraph that requires gradients (iterative DFS).
fn topological_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut visited: HashSet<usize> = HashSet::new();
    // (node, children_pushed)
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.node_id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.op() {
            for input in op.inputs() {
                if input.requires_grad() && !visited.contains(&input.node_id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

fn add_into<S: Scalar>(map: &mut HashMap<usize, Vec<S>>, t: &Tensor<S>, delta: &[S]) {
    let buf = map
        .entry(t.node_id())
        .or_insert_with(|| vec![S::zero(); t.numel()]);
    debug_assert_eq!(buf.len(), delta.len());
    for (b, &d) in buf.iter_mut().zip(delta) {
        *b += d;
    }
}

fn wants<S: Scalar>(t: &Tensor<S>) -> bool {
    t.requires_grad()
}

fn apply_vjp<S: Scalar>(
    node: &Tensor<S>,
    op: &Op<S>,
    g: &[S],
    map: &mut HashMap<usize, Vec<S>>,
) {
    match op {
        Op::Matmul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if wants(a) {
                // da = g @ b^T
                let mut da = vec![S::zero(); m * k];
                super::ops::gemm_rm(m, n, k, g, b.values(), 1, n as isize, &mut da);
                add_into(map, a, &da);
            }
            if wants(b) {
                // db = a^T @ g
                let db = gemm_at_b(m, k, n, a.values(), g);
                add_into(map, b, &db);
            }
        }
        Op::Conv2d { x, w, stride, padding } => {
            conv2d_vjp(x, w, *stride, *padding, node, g, map);
        }
        Op::Add { a, b, bias_broadcast } => {
            if wants(a) {
                add_into(map, a, g);
            }
            if wants(b) {
                if *bias_broadcast {
                    let d = b.numel();
                    let mut db = vec![S::zero(); d];
                    for row in g.chunks_exact(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    add_into(map, b, &db);
                } else {
                    add_into(map, b, g);
                }
            }
        }
        Op::Sub { a, b } => {
            if wants(a) {
                add_into(map, a, g);
            }
            if wants(b) {
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                add_into(map, b, &neg);
            }
        }
        Op::ScalarMul { x, c } => {
            if wants(x) {
                let dx: Vec<S> = g.iter().map(|&v| v * *c).collect();
                add_into(map, x, &dx);
            }
        }
        Op::Mul { a, b } => {
            if wants(a) {
                let da: Vec<S> = g.iter().zip(b.values()).map(|(&v, &bv)| v * bv).collect();
                add_into(map, a, &da);
            }
            if wants(b) {
                let db: Vec<S> = g.iter().zip(a.values()).map(|(&v, &av)| v * av).collect();
                add_into(map, b, &db);
            }
        }
        Op::Relu { x } => {
            if wants(x) {
                let dx: Vec<S> = g
                    .iter()
                    .zip(x.values())
                    .map(|(&v, &xv)| if xv > S::zero() { v } else { S::zero() })
                    .collect();
                add_into(map, x, &dx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let dims = BnDims::of_shape(x.shape()).expect("validated in forward");
            let (c, sp) = (dims.channels, dims.spatial);
            let mut sum_g = vec![S::zero(); c];
            let mut sum_gx = vec![S::zero(); c];
            if sp == 1 {
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for i in 0..c {
                        sum_g[i] += grow[i];
                        sum_gx[i] += grow[i] * hrow[i];
                    }
                }
            } else {
                for (i, (gp, hp)) in g.chunks_exact(sp).zip(xhat.chunks_exact(sp)).enumerate() {
                    let mut s0 = S::zero();
                    let mut s1 = S::zero();
                    for (&gg, &hh) in gp.iter().zip(hp) {
                        s0 += gg;
                        s1 += gg * hh;
                    }
                    sum_g[i % c] += s0;
                    sum_gx[i % c] += s1;
                }
            }
            if wants(x) {
                let gv = gamma.values();
                let mut dx = vec![S::zero(); g.len()];
                if *train {
                    let inv_m =
                        S::one() / scalar_from::<S>((dims.batch * dims.spatial) as f64);
                    if sp == 1 {
                        for ((dxrow, grow), hrow) in dx
                            .chunks_exact_mut(c)
                            .zip(g.chunks_exact(c))
                            .zip(xhat.chunks_exact(c))
                        {
                            for i in 0..c {
                                dxrow[i] = gv[i]
                                    * inv_std[i]
                                    * (grow[i] - sum_g[i] * inv_m - hrow[i] * sum_gx[i] * inv_m);
                            }
                        }
                    } else {
                        for (i, (dxp, (gp, hp))) in dx
                            .chunks_exact_mut(sp)
                            .zip(g.chunks_exact(sp).zip(xhat.chunks_exact(sp)))
                            .enumerate()
                        {
                            let ch = i % c;
                            let scale = gv[ch] * inv_std[ch];
                            let mean_g = sum_g[ch] * inv_m;
                            let mean_gx = sum_gx[ch] * inv_m;
                            for ((d, &gg), &hh) in dxp.iter_mut().zip(gp).zip(hp) {
                                *d = scale * (gg - mean_g - hh * mean_gx);
                            }
                        }
                    }
                } else if sp == 1 {
                    for (dxrow, grow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for i in 0..c {
                            dxrow[i] = gv[i] * inv_std[i] * grow[i];
                        }
                    }
                } else {
                    for (i, (dxp, gp)) in
                        dx.chunks_exact_mut(sp).zip(g.chunks_exact(sp)).enumerate()
                    {
                        let ch = i % c;
                        let scale = gv[ch] * inv_std[ch];
                        for (d, &gg) in dxp.iter_mut().zip(gp) {
                            *d = scale * gg;
                        }
                    }
                }
                add_into(map, x, &dx);
            }
            if wants(gamma) {
                add_into(map, gamma, &sum_gx);
            }
            if wants(beta) {
                add_into(map, beta, &sum_g);
            }
        }
        Op::GlobalAvgPool { x } => {
            if wants(x) {
                let s = x.shape();
                let hw = s[2] * s[3];
                let inv = S::one() / scalar_from::<S>(hw as f64);
                let mut dx = Vec::with_capacity(x.numel());
                for &go in g {
                    let v = go * inv;
                    dx.extend(std::iter::repeat(v).take(hw));
                }
                add_into(map, x, &dx);
            }
        }
        Op::MaxPool { x, argmax } => {
            if wants(x) {
                let mut dx = vec![S::zero(); x.numel()];
                for (&go, &idx) in g.iter().zip(argmax) {
                    dx[idx as usize] += go;
                }
                add_into(map, x, &dx);
            }
        }
        Op::SoftmaxLastDim { x } => {
            if wants(x) {
                let d = *node.shape().last().unwrap();
                let y = node.values();
                let mut dx = vec![S::zero(); g.len()];
                for r in 0..g.len() / d {
                    let (gs, ys) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let dot = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<S>();
                    for i in 0..d {
                        dx[r * d + i] = ys[i] * (gs[i] - dot);
                    }
                }
                add_into(map, x, &dx);
            }
        }
        Op::LogSoftmaxLastDim { x } => {
            if wants(x) {
                let d = *node.shape().last().unwrap();
                let y = node.values();
                let mut dx = vec![S::zero(); g.len()];
                for r in 0..g.len() / d {
                    let (gs, ys) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let gsum = gs.iter().copied().sum::<S>();
                    for i in 0..d {
                        dx[r * d + i] = gs[i] - ys[i].exp() * gsum;
                    }
                }
                add_into(map, x, &dx);
            }
        }
        Op::Log { x } => {
            if wants(x) {
                let dx: Vec<S> = g.iter().zip(x.values()).map(|(&v, &xv)| v / xv).collect();
                add_into(map, x, &dx);
            }
        }
        Op::Exp { x } => {
            if wants(x) {
                let dx: Vec<S> = g.iter().zip(node.values()).map(|(&v, &y)| v * y).collect();
                add_into(map, x, &dx);
            }
        }
        Op::Sum { x } => {
            if wants(x) {
                let dx = vec![g[0]; x.numel()];
                add_into(map, x, &dx);
            }
        }
        Op::Mean { x } => {
            if wants(x) {
                let v = g[0] / scalar_from::<S>(x.numel() as f64);
                let dx = vec![v; x.numel()];
                add_into(map, x, &dx);
            }
        }
        Op::Reshape { x } => {
            if wants(x) {
                add_into(map, x, g);
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for p in parts {
                let len = p.numel();
                if wants(p) {
                    add_into(map, p, &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::Transpose { x } => {
            if wants(x) {
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![S::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                add_into(map, x, &dx);
            }
        }
        Op::L2Normalize { x, inv_norm } => {
            if wants(x) {
                let d = *node.shape().last().unwrap();
                let y = node.values();
                let mut dx = vec![S::zero(); g.len()];
                for (r, &inv) in inv_norm.iter().enumerate() {
                    let (gs, ys) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let dot = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<S>();
                    for i in 0..d {
                        dx[r * d + i] = inv * (gs[i] - ys[i] * dot);
                    }
                }
                add_into(map, x, &dx);
            }
        }
    }
}

/// `A^T @ B` for row-major `a [r,m]`, `b [r,n]` -> `[m,n]`. The reduction
/// over `r` is blocked with a fixed chunk size and summed in order, so the
/// result does not depend on thread count.
fn gemm_at_b<S: Scalar>(r: usize, m: usize, n: usize, a: &[S], b: &[S]) -> Vec<S> {
    const K_BLOCK: usize = 32_768;
    if r <= K_BLOCK {
        let mut out = vec![S::zero(); m * n];
        S::gemm_strided(m, r, n, S::one(), a, 1, m as isize, b, n as isize, 1, S::zero(), &mut out);
        return out;
    }
    let partials: Vec<Vec<S>> = a
        .par_chunks(K_BLOCK * m)
        .zip(b.par_chunks(K_BLOCK * n))
        .map(|(a_blk, b_blk)| {
            let rows = a_blk.len() / m;
            let mut out = vec![S::zero(); m * n];
            S::gemm_strided(
                m,
                rows,
                n,
                S::one(),
                a_blk,
                1,
                m as isize,
                b_blk,
                n as isize,
                1,
                S::zero(),
                &mut out,
            );
            out
        })
        .collect();
    let mut out = vec![S::zero(); m * n];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

fn conv2d_vjp<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    padding: usize,
    node: &Tensor<S>,
    g: &[S],
    map: &mut HashMap<usize, Vec<S>>,
) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (node.shape()[2], node.shape()[3]);
    debug_assert_eq!(conv_out(h, padding, k, stride), Some(oh));
    let hw = oh * ow;
    let rows = n * hw;
    let ckk = c * k * k;

    // [N,OC,OH,OW] -> [N*OH*OW, OC]
    let mut g_rm = vec![S::zero(); rows * oc];
    g_rm.par_chunks_mut(hw * oc)
        .enumerate()
        .for_each(|(ni, chunk)| {
            let src = &g[ni * oc * hw..(ni + 1) * oc * hw];
            for (ci, plane) in src.chunks_exact(hw).enumerate() {
                for (&s, d) in plane.iter().zip(chunk[ci..].iter_mut().step_by(oc)) {
                    *d = s;
                }
            }
        });

    let trace = std::env::var("SKDSSL_TRACE").is_ok();
    let mut t0 = std::time::Instant::now();
    if wants(w) {
        // Patches are recomputed rather than kept alive in the graph.
        let cols = im2col(x.values(), n, c, h, wd, k, stride, padding, oh, ow);
        if trace { eprintln!("  bwd im2col {:?} {:.4}", x.shape(), t0.elapsed().as_secs_f64()); t0 = std::time::Instant::now(); }
        let dw = gemm_at_b(rows, oc, ckk, &g_rm, &cols);
        if trace { eprintln!("  bwd dw gemm ({rows}x{oc}x{ckk}) {:.4}", t0.elapsed().as_secs_f64()); t0 = std::time::Instant::now(); }
        add_into(map, w, &dw);
    }
    if wants(x) {
        t0 = std::time::Instant::now();
        let mut dcols = vec![S::zero(); rows * ckk];
        super::ops::gemm_rm(rows, oc, ckk, &g_rm, w.values(), ckk as isize, 1, &mut dcols);
        if trace { eprintln!("  bwd dcols gemm ({rows}x{oc}x{ckk}) {:.4}", t0.elapsed().as_secs_f64()); t0 = std::time::Instant::now(); }
        let dx = col2im(&dcols, n, c, h, wd, k, stride, padding, oh, ow);
        if trace { eprintln!("  bwd col2im {:.4}", t0.elapsed().as_secs_f64()); t0 = std::time::Instant::now(); }
        add_into(map, x, &dx);
        if trace { eprintln!("  bwd dx add {:.4}", t0.elapsed().as_secs_f64()); }
    }
}
