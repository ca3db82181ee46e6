//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node, so node order is a topological order and
//! the backward pass is a single reverse sweep. Reductions always run in a
//! fixed order, which keeps results bit-identical across runs.

use super::conv::{self, col2im, gemm, im2col};
use super::layers::{BnStats, Mode, BN_EPS, BN_MOMENTUM};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Constant,
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Shortcut {
        x: Var,
        stride: usize,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a backward sweep, one slot per recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`. Every leaf has one, zero-filled when
    /// the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input (a parameter, or an input whose gradient is wanted).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("variable {} is not on this tape", var.0)));
        }
        Ok(())
    }

    /// 3x3 convolution with padding 1 and no bias. `x: [n, c, h, w]`, `w: [o, c, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xd = self.value(x).dims().to_vec();
        let wd = self.value(w).dims().to_vec();
        if xd.len() != 4 || wd.len() != 4 || wd[2] != conv::KERNEL || wd[3] != conv::KERNEL || wd[1] != xd[1] {
            let expected = if xd.len() == 4 { vec![wd[0], xd[1], 3, 3] } else { vec![0, 0, 3, 3] };
            return Err(Error::shape("conv2d weight", &expected, &wd));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be positive".into()));
        }
        let (n, c, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
        let o = wd[0];
        let (oh, ow) = (conv::out_size(h, stride), conv::out_size(wi, stride));
        let (ck, p) = (c * 9, oh * ow);
        let mut cols = Vec::with_capacity(n * ck * p);
        let mut out = vec![0.0; n * o * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for b in 0..n {
                im2col(&xv[b * c * h * wi..(b + 1) * c * h * wi], c, h, wi, stride, &mut cols);
                let col = &cols[b * ck * p..(b + 1) * ck * p];
                gemm(o, ck, p, wv, (ck, 1), col, (p, 1), 0.0, &mut out[b * o * p..(b + 1) * o * p]);
            }
        }
        let rg = self.needs(&[x, w]);
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, stride, cols }, rg))
    }

    /// Per-channel batch normalization over `[n, c, h, w]`. Train mode uses batch
    /// statistics and updates `stats`; eval mode reads `stats` only.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut BnStats, mode: Mode) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 4 {
            return Err(Error::shape("batch_norm input", &[0, stats.channels(), 0, 0], &xd));
        }
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        for (what, v) in [("batch_norm gamma", gamma), ("batch_norm beta", beta)] {
            if self.value(v).dims() != [c] {
                return Err(Error::shape(what, &[c], self.value(v).dims()));
            }
        }
        if stats.channels() != c {
            return Err(Error::shape("batch_norm running stats", &[c], &[stats.channels()]));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        sum += xv[base..base + hw].iter().sum::<f64>();
                    }
                    let mean = sum / m;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        sq += xv[base..base + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = sq / m;
                    let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
                    stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean;
                    stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * unbiased;
                    (mean, var)
                }
                Mode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let inv = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = inv;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xv[i] - mean) * inv;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        let value = Tensor::new(xd, out)?;
        let train = mode == Mode::Train;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let out = Tensor::new(v.dims().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect())?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Relu { x }, rg))
    }

    /// 3x3 max pooling, stride 2, padding 1. Ties go to the first (lowest index) maximum.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 4 {
            return Err(Error::shape("max_pool input", &[0, 0, 0, 0], &xd));
        }
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (oh, ow) = (conv::out_size(h, 2), conv::out_size(w, 2));
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for ki in 0..3 {
                        let ii = (oi * 2 + ki) as isize - 1;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..3 {
                            let jj = (oj * 2 + kj) as isize - 1;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let idx = base + ii as usize * w + jj as usize;
                            if at == usize::MAX || xv[idx] > best {
                                best = xv[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (plane * oh + oi) * ow + oj;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let rg = self.needs(&[x]);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 4 {
            return Err(Error::shape("global_avg_pool input", &[0, 0, 0, 0], &xd));
        }
        let hw = xd[2] * xd[3];
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.needs(&[x]);
        let value = Tensor::new(vec![xd[0], xd[1], 1, 1], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    /// Fully connected layer. `x: [n, in]` (trailing unit axes allowed), `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let xd = self.value(x).dims().to_vec();
        let wd = self.value(w).dims().to_vec();
        let batch = xd[0];
        let fan_in: usize = xd[1..].iter().product();
        if xd.len() < 2 || wd.len() != 2 || wd[1] != fan_in {
            return Err(Error::shape("linear weight", &[wd.first().copied().unwrap_or(0), fan_in], &wd));
        }
        let out_f = wd[0];
        if self.value(b).dims() != [out_f] {
            return Err(Error::shape("linear bias", &[out_f], self.value(b).dims()));
        }
        let mut out = vec![0.0; batch * out_f];
        gemm(
            batch,
            fan_in,
            out_f,
            self.value(x).data(),
            (fan_in, 1),
            self.value(w).data(),
            (1, fan_in),
            0.0,
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(out_f) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let rg = self.needs(&[x, w, b]);
        let value = Tensor::new(vec![batch, out_f], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(Error::shape("add", av.dims(), bv.dims()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.dims().to_vec(), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Parameter-free residual shortcut: spatial subsampling by `stride` (matching a
    /// 3x3/pad 1 convolution's output grid) and zero-padding or truncating channels
    /// to `out_channels`.
    pub fn shortcut(&mut self, x: Var, stride: usize, out_channels: usize) -> Result<Var> {
        self.check(x)?;
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 4 || stride == 0 || out_channels == 0 {
            return Err(Error::shape("shortcut input", &[0, 0, 0, 0], &xd));
        }
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (oh, ow) = (conv::out_size(h, stride), conv::out_size(w, stride));
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * out_channels * oh * ow];
        for b in 0..n {
            for ch in 0..c.min(out_channels) {
                for i in 0..oh {
                    for j in 0..ow {
                        out[((b * out_channels + ch) * oh + i) * ow + j] = xv[((b * c + ch) * h + i * stride) * w + j * stride];
                    }
                }
            }
        }
        let rg = self.needs(&[x]);
        let value = Tensor::new(vec![n, out_channels, oh, ow], out)?;
        Ok(self.push(value, Op::Shortcut { x, stride }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [n, k]` against integer labels; a scalar node.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (loss, probs) = super::loss::forward(self.value(logits), labels)?;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Backward sweep from a scalar root with upstream gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.check_root(root)?;
        let dims = self.value(root).dims().to_vec();
        if dims.iter().product::<usize>() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root or an explicit upstream gradient, root has dims {dims:?}"
            )));
        }
        self.backward_with(root, Tensor::full(&dims, 1.0))
    }

    /// Backward sweep seeded with `upstream` (same dims as the root). Clears the tape.
    pub fn backward_with(&mut self, root: Var, upstream: Tensor) -> Result<Gradients> {
        self.check_root(root)?;
        if upstream.dims() != self.value(root).dims() {
            return Err(Error::shape("backward upstream", self.value(root).dims(), upstream.dims()));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(upstream);

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut emit = |var: Var, g: Tensor| {
                if !nodes[var.0].requires_grad {
                    return;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, w, stride, cols } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let (n, c, h, wi) = (xv.dims()[0], xv.dims()[1], xv.dims()[2], xv.dims()[3]);
                    let o = wv.dims()[0];
                    let (oh, ow) = (node.value.dims()[2], node.value.dims()[3]);
                    let (ck, p) = (c * 9, oh * ow);
                    let dyv = dy.data();
                    if nodes[w.0].requires_grad {
                        let mut dw = vec![0.0; wv.numel()];
                        for b in 0..n {
                            gemm(
                                o,
                                p,
                                ck,
                                &dyv[b * o * p..],
                                (p, 1),
                                &cols[b * ck * p..],
                                (1, p),
                                1.0,
                                &mut dw,
                            );
                        }
                        emit(*w, Tensor::new(wv.dims().to_vec(), dw)?);
                    }
                    if nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; xv.numel()];
                        let mut dcols = vec![0.0; ck * p];
                        for b in 0..n {
                            gemm(ck, o, p, wv.data(), (1, ck), &dyv[b * o * p..], (p, 1), 0.0, &mut dcols);
                            col2im(&dcols, c, h, wi, *stride, &mut dx[b * c * h * wi..(b + 1) * c * h * wi]);
                        }
                        emit(*x, Tensor::new(xv.dims().to_vec(), dx)?);
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
                    let d = node.value.dims();
                    let (n, c, hw) = (d[0], d[1], d[2] * d[3]);
                    let m = (n * hw) as f64;
                    let g = nodes[gamma.0].value.data();
                    let dyv = dy.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; dyv.len()];
                    for ch in 0..c {
                        let (mut sdy, mut sdyx) = (0.0, 0.0);
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for k in base..base + hw {
                                sdy += dyv[k];
                                sdyx += dyv[k] * xhat[k];
                            }
                        }
                        dgamma[ch] = sdyx;
                        dbeta[ch] = sdy;
                        let scale = g[ch] * inv_std[ch];
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for k in base..base + hw {
                                dx[k] = if *train {
                                    scale * (dyv[k] - sdy / m - xhat[k] * sdyx / m)
                                } else {
                                    scale * dyv[k]
                                };
                            }
                        }
                    }
                    emit(*gamma, Tensor::new(vec![c], dgamma)?);
                    emit(*beta, Tensor::new(vec![c], dbeta)?);
                    emit(*x, Tensor::new(d.to_vec(), dx)?);
                }
                Op::Relu { x } => {
                    let xv = nodes[x.0].value.data();
                    let dx = dy.data().iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    emit(*x, Tensor::new(dy.dims().to_vec(), dx)?);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(nodes[x.0].value.dims());
                    let dxv = dx.data_mut();
                    for (g, &at) in dy.data().iter().zip(argmax) {
                        dxv[at] += g;
                    }
                    emit(*x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let xd = nodes[x.0].value.dims();
                    let hw = xd[2] * xd[3];
                    let mut dx = Vec::with_capacity(nodes[x.0].value.numel());
                    for g in dy.data() {
                        dx.extend(std::iter::repeat_n(g / hw as f64, hw));
                    }
                    emit(*x, Tensor::new(xd.to_vec(), dx)?);
                }
                Op::Linear { x, w, b } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let (batch, out_f, fan_in) = (xv.dims()[0], wv.dims()[0], wv.dims()[1]);
                    let dyv = dy.data();
                    if nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; batch * fan_in];
                        gemm(batch, out_f, fan_in, dyv, (out_f, 1), wv.data(), (fan_in, 1), 0.0, &mut dx);
                        emit(*x, Tensor::new(xv.dims().to_vec(), dx)?);
                    }
                    let mut dw = vec![0.0; out_f * fan_in];
                    gemm(out_f, batch, fan_in, dyv, (1, out_f), xv.data(), (fan_in, 1), 0.0, &mut dw);
                    emit(*w, Tensor::new(wv.dims().to_vec(), dw)?);
                    let mut db = vec![0.0; out_f];
                    for row in dyv.chunks(out_f) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    emit(*b, Tensor::new(vec![out_f], db)?);
                }
                Op::Add { a, b } => {
                    emit(*a, dy.clone());
                    emit(*b, dy);
                }
                Op::Shortcut { x, stride } => {
                    let xd = nodes[x.0].value.dims().to_vec();
                    let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
                    let od = node.value.dims();
                    let (oc, oh, ow) = (od[1], od[2], od[3]);
                    let mut dx = vec![0.0; n * c * h * w];
                    let dyv = dy.data();
                    for b in 0..n {
                        for ch in 0..c.min(oc) {
                            for i in 0..oh {
                                for j in 0..ow {
                                    dx[((b * c + ch) * h + i * stride) * w + j * stride] +=
                                        dyv[((b * oc + ch) * oh + i) * ow + j];
                                }
                            }
                        }
                    }
                    emit(*x, Tensor::new(xd, dx)?);
                }
                Op::SoftmaxXent { logits, probs, labels } => {
                    let up = dy.data()[0];
                    let ld = nodes[logits.0].value.dims();
                    let (batch, k) = (ld[0], ld[1]);
                    let mut g = probs.clone();
                    for (row, &y) in labels.iter().enumerate() {
                        g[row * k + y] -= 1.0;
                    }
                    let s = up / batch as f64;
                    g.iter_mut().for_each(|v| *v *= s);
                    emit(*logits, Tensor::new(ld.to_vec(), g)?);
                }
            }
        }

        // every differentiable leaf gets a gradient, zero if unreachable from the root
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.dims()));
            }
        }
        Ok(Gradients { grads })
    }

    fn check_root(&self, root: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called without a recorded forward pass".into()));
        }
        self.check(root)
    }
}
