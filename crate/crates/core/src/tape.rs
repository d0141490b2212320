//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A `Tape` records one forward pass as an arena of nodes; `backward` walks
//! the arena in reverse creation order and accumulates gradients. Networks
//! re-record the tape every step, which keeps the engine stateless and the
//! graphs static.

use crate::tensor::{
    conv2d_bwd_w, conv2d_bwd_x, conv2d_fwd, convt_block_bwd_w, convt_block_bwd_x, convt_block_fwd,
    matmul_nn, matmul_nt, matmul_tn, sigmoid, upsample2_bwd, upsample2_fwd, Tensor,
};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// x[C,H,W] + b[C] broadcast over spatial dims.
    BiasCh(NodeId, NodeId),
    /// x[N,D] + b[D] broadcast over rows.
    BiasRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvTBlock {
        x: NodeId,
        w: NodeId,
        k: usize,
    },
    Upsample2(NodeId),
    ConcatCh(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    },
    Silu(NodeId),
    SoftmaxRows(NodeId),
    Reshape(NodeId),
    Transpose(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn bias_ch(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (xs, bs) = (self.value(x), self.value(b));
        let (c, h, w) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        assert_eq!(bs.shape(), &[c], "bias_ch expects [C]");
        let mut out = xs.clone();
        for ch in 0..c {
            let bv = bs.data()[ch];
            for v in &mut out.data_mut()[ch * h * w..(ch + 1) * h * w] {
                *v += bv;
            }
        }
        self.push(out, Op::BiasCh(x, b))
    }

    pub fn bias_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (xs, bs) = (self.value(x), self.value(b));
        let (n, d) = (xs.shape()[0], xs.shape()[1]);
        assert_eq!(bs.shape(), &[d], "bias_row expects [D]");
        let mut out = xs.clone();
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] += bs.data()[j];
            }
        }
        self.push(out, Op::BiasRow(x, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_nn(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_nt(self.value(a), self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = conv2d_fwd(self.value(x), self.value(w), stride, pad);
        self.push(v, Op::Conv2d { x, w, stride, pad })
    }

    pub fn convt_block(&mut self, x: NodeId, w: NodeId, k: usize) -> NodeId {
        let v = convt_block_fwd(self.value(x), self.value(w), k);
        self.push(v, Op::ConvTBlock { x, w, k })
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let v = upsample2_fwd(self.value(x));
        self.push(v, Op::Upsample2(x))
    }

    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (ca, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let cb = bv.shape()[0];
        assert_eq!(&bv.shape()[1..], &[h, w], "concat_ch spatial mismatch");
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let v = Tensor::new(&[ca + cb, h, w], data).unwrap();
        self.push(v, Op::ConcatCh(a, b))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (na, d) = (av.shape()[0], av.shape()[1]);
        let nb = bv.shape()[0];
        assert_eq!(bv.shape()[1], d, "concat_rows width mismatch");
        let mut data = Vec::with_capacity((na + nb) * d);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let v = Tensor::new(&[na + nb, d], data).unwrap();
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let d = xv.shape()[1];
        let v = Tensor::new(&[len, d], xv.data()[start * d..(start + len) * d].to_vec()).unwrap();
        self.push(v, Op::SliceRows { x, start, len })
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> NodeId {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(c % groups, 0, "group_norm channels not divisible");
        let gv = self.value(gamma);
        let bv = self.value(beta);
        assert_eq!(gv.shape(), &[c]);
        assert_eq!(bv.shape(), &[c]);
        let gs = c / groups;
        let n = gs * h * w;
        let mut out = Tensor::zeros(xv.shape());
        for g in 0..groups {
            let lo = g * gs * h * w;
            let hi = lo + n;
            let slice = &xv.data()[lo..hi];
            let mu = slice.iter().sum::<f64>() / n as f64;
            let var = slice.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for ci in 0..gs {
                let ch = g * gs + ci;
                let (ga, be) = (gv.data()[ch], bv.data()[ch]);
                for p in 0..h * w {
                    let idx = lo + ci * h * w + p;
                    out.data_mut()[idx] = (xv.data()[idx] - mu) * inv * ga + be;
                }
            }
        }
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
        )
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v * sigmoid(v));
        self.push(v, Op::Silu(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Tensor::zeros(xv.shape());
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - m).exp();
                out.data_mut()[i * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out.data_mut()[i * d + j] /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).reshape(shape).expect("reshape numel mismatch");
        self.push(v, Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = transpose2d(self.value(x));
        self.push(v, Op::Transpose(x))
    }

    /// Linear layer y = x . w^T (+ b), with x [N,in], w [out,in], b [out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let y = self.matmul_nt(x, w);
        match b {
            Some(bid) => self.bias_row(y, bid),
            None => y,
        }
    }

    /// Run reverse-mode accumulation from `root` seeded with `seed_grad`
    /// (same shape as the root value). Returns per-node gradients.
    pub fn backward(&self, root: NodeId, seed_grad: Tensor) -> Gradients {
        assert_eq!(
            seed_grad.shape(),
            self.value(root).shape(),
            "seed gradient shape mismatch"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed_grad);
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let accum = |grads: &mut [Option<Tensor>], id: NodeId, t: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accum(grads, *a, g.mul(self.value(*b)));
                accum(grads, *b, g.mul(self.value(*a)));
            }
            Op::Scale(a, c) => accum(grads, *a, g.scale(*c)),
            Op::BiasCh(x, b) => {
                let (c, h, w) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1], s[2])
                };
                let mut gb = Tensor::zeros(&[c]);
                for ch in 0..c {
                    gb.data_mut()[ch] = g.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
                }
                accum(grads, *x, g.clone());
                accum(grads, *b, gb);
            }
            Op::BiasRow(x, b) => {
                let (n, d) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1])
                };
                let mut gb = Tensor::zeros(&[d]);
                for i in 0..n {
                    for j in 0..d {
                        gb.data_mut()[j] += g.data()[i * d + j];
                    }
                }
                accum(grads, *x, g.clone());
                accum(grads, *b, gb);
            }
            Op::MatMul(a, b) => {
                // y = a.b : da = g.b^T, db = a^T.g
                accum(grads, *a, matmul_nt(g, self.value(*b)));
                accum(grads, *b, matmul_tn(self.value(*a), g));
            }
            Op::MatMulNT(a, b) => {
                // y = a.b^T : da = g.b, db = g^T.a
                accum(grads, *a, matmul_nn(g, self.value(*b)));
                accum(grads, *b, matmul_tn(g, self.value(*a)));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let gx = conv2d_bwd_x(g, self.value(*w), self.value(*x).shape(), *stride, *pad);
                let gw = conv2d_bwd_w(g, self.value(*x), self.value(*w).shape(), *stride, *pad);
                accum(grads, *x, gx);
                accum(grads, *w, gw);
            }
            Op::ConvTBlock { x, w, k } => {
                let gx = convt_block_bwd_x(g, self.value(*w), self.value(*x).shape(), *k);
                let gw = convt_block_bwd_w(g, self.value(*x), self.value(*w).shape(), *k);
                accum(grads, *x, gx);
                accum(grads, *w, gw);
            }
            Op::Upsample2(x) => accum(grads, *x, upsample2_bwd(g)),
            Op::ConcatCh(a, b) => {
                let (ca, h, w) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1], s[2])
                };
                let cb = self.value(*b).shape()[0];
                let split = ca * h * w;
                let ga = Tensor::new(&[ca, h, w], g.data()[..split].to_vec()).unwrap();
                let gb = Tensor::new(&[cb, h, w], g.data()[split..].to_vec()).unwrap();
                accum(grads, *a, ga);
                accum(grads, *b, gb);
            }
            Op::ConcatRows(a, b) => {
                let (na, d) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let nb = self.value(*b).shape()[0];
                let split = na * d;
                let ga = Tensor::new(&[na, d], g.data()[..split].to_vec()).unwrap();
                let gb = Tensor::new(&[nb, d], g.data()[split..].to_vec()).unwrap();
                accum(grads, *a, ga);
                accum(grads, *b, gb);
            }
            Op::SliceRows { x, start, len } => {
                let (n, d) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1])
                };
                let mut gx = Tensor::zeros(&[n, d]);
                gx.data_mut()[start * d..(start + len) * d].copy_from_slice(g.data());
                accum(grads, *x, gx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let gs = c / groups;
                let n = gs * h * w;
                let mut gx = Tensor::zeros(xv.shape());
                let mut ggamma = Tensor::zeros(&[c]);
                let mut gbeta = Tensor::zeros(&[c]);
                for grp in 0..*groups {
                    let lo = grp * gs * h * w;
                    let slice = &xv.data()[lo..lo + n];
                    let mu = slice.iter().sum::<f64>() / n as f64;
                    let var = slice.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // dxh = g * gamma (per channel); dx = inv*(dxh - mean(dxh) - xh*mean(dxh*xh))
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    let mut dxh = vec![0.0; n];
                    let mut xh = vec![0.0; n];
                    for ci in 0..gs {
                        let ch = grp * gs + ci;
                        let ga = gv.data()[ch];
                        for p in 0..h * w {
                            let k = ci * h * w + p;
                            let idx = lo + k;
                            let xhat = (xv.data()[idx] - mu) * inv;
                            let gout = g.data()[idx];
                            xh[k] = xhat;
                            dxh[k] = gout * ga;
                            mean_dxh += dxh[k];
                            mean_dxh_xh += dxh[k] * xhat;
                            ggamma.data_mut()[ch] += gout * xhat;
                            gbeta.data_mut()[ch] += gout;
                        }
                    }
                    mean_dxh /= n as f64;
                    mean_dxh_xh /= n as f64;
                    for k in 0..n {
                        gx.data_mut()[lo + k] = inv * (dxh[k] - mean_dxh - xh[k] * mean_dxh_xh);
                    }
                }
                accum(grads, *x, gx);
                accum(grads, *gamma, ggamma);
                accum(grads, *beta, gbeta);
            }
            Op::Silu(x) => {
                let gx = self.value(*x).zip_map(g, |v, gr| {
                    let s = sigmoid(v);
                    gr * (s * (1.0 + v * (1.0 - s)))
                });
                accum(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let (n, d) = (y.shape()[0], y.shape()[1]);
                let mut gx = Tensor::zeros(y.shape());
                for r in 0..n {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx.data_mut()[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accum(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.value(*x).shape()).unwrap();
                accum(grads, *x, gx);
            }
            Op::Transpose(x) => accum(grads, *x, transpose2d(g)),
        }
    }
}

fn transpose2d(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = t.data()[i * c + j];
        }
    }
    out
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Central finite differences against the tape gradient for a scalar
    /// objective sum(output * probe).
    fn fd_check(
        inputs: &[Tensor],
        forward: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = forward(&mut tape, &ids);
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let probe = Tensor::randn(tape.value(out).shape(), 1.0, &mut rng);
        let grads = tape.backward(out, probe.clone());

        let eval = |inputs: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
            let o = forward(&mut t, &ids);
            t.value(o)
                .data()
                .iter()
                .zip(probe.data().iter())
                .map(|(&a, &b)| a * b)
                .sum()
        };

        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(ids[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            for e in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let denom = fd.abs().max(a.abs()).max(1e-6);
                assert!(
                    (fd - a).abs() / denom < tol,
                    "input {} elem {}: fd {} vs analytic {}",
                    k,
                    e,
                    fd,
                    a
                );
            }
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn grad_elementwise_ops() {
        fd_check(
            &[randn(&[2, 3], 1), randn(&[2, 3], 2)],
            |t, ids| {
                let s = t.add(ids[0], ids[1]);
                let m = t.mul(s, ids[0]);
                let d = t.sub(m, ids[1]);
                t.scale(d, 0.7)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_linear() {
        fd_check(
            &[randn(&[3, 4], 3), randn(&[5, 4], 4), randn(&[5], 5)],
            |t, ids| t.linear(ids[0], ids[1], Some(ids[2])),
            1e-6,
        );
        fd_check(
            &[randn(&[3, 4], 6), randn(&[4, 2], 7)],
            |t, ids| t.matmul(ids[0], ids[1]),
            1e-6,
        );
    }

    #[test]
    fn grad_conv2d() {
        fd_check(
            &[randn(&[2, 5, 5], 8), randn(&[3, 2, 3, 3], 9), randn(&[3], 10)],
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], 2, 1);
                t.bias_ch(y, ids[2])
            },
            1e-5,
        );
    }

    #[test]
    fn grad_convt_and_upsample() {
        fd_check(
            &[randn(&[2, 3, 3], 11), randn(&[2, 4, 2, 2], 12)],
            |t, ids| t.convt_block(ids[0], ids[1], 2),
            1e-6,
        );
        fd_check(&[randn(&[2, 3, 3], 13)], |t, ids| t.upsample2(ids[0]), 1e-6);
    }

    #[test]
    fn grad_group_norm() {
        fd_check(
            &[randn(&[4, 3, 3], 14), randn(&[4], 15), randn(&[4], 16)],
            |t, ids| t.group_norm(ids[0], ids[1], ids[2], 2, 1e-5),
            1e-4,
        );
    }

    #[test]
    fn grad_silu_softmax() {
        fd_check(&[randn(&[3, 4], 17)], |t, ids| t.silu(ids[0]), 1e-6);
        fd_check(&[randn(&[3, 4], 18)], |t, ids| t.softmax_rows(ids[0]), 1e-5);
    }

    #[test]
    fn grad_concat_slice_reshape() {
        fd_check(
            &[randn(&[2, 2, 2], 19), randn(&[3, 2, 2], 20)],
            |t, ids| t.concat_ch(ids[0], ids[1]),
            1e-6,
        );
        fd_check(
            &[randn(&[2, 4], 21), randn(&[3, 4], 22)],
            |t, ids| {
                let c = t.concat_rows(ids[0], ids[1]);
                t.slice_rows(c, 1, 2)
            },
            1e-6,
        );
        fd_check(
            &[randn(&[2, 3, 4], 23)],
            |t, ids| t.reshape(ids[0], &[6, 4]),
            1e-6,
        );
        fd_check(&[randn(&[3, 5], 27)], |t, ids| t.transpose(ids[0]), 1e-6);
    }

    #[test]
    fn grad_attention_composite() {
        // single-head attention: softmax(q k^T / sqrt(d)) v
        fd_check(
            &[randn(&[3, 4], 24), randn(&[5, 4], 25), randn(&[5, 4], 26)],
            |t, ids| {
                let scores = t.matmul_nt(ids[0], ids[1]);
                let scaled = t.scale(scores, 0.5);
                let attn = t.softmax_rows(scaled);
                t.matmul(attn, ids[2])
            },
            1e-5,
        );
    }
}
