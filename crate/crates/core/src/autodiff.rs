//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Graph`] records every operation in execution order. Calling
//! [`Graph::backward`] walks the tape once from the loss node towards the
//! leaves, accumulating gradients additively for values with several
//! consumers.

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        /// im2col buffer `[Cin*KH*KW, Ho*Wo]`, kept for the kernel gradient.
        cols: Vec<T>,
    },
    ReflectPad {
        x: NodeId,
        pad: usize,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    UpConv2 {
        x: NodeId,
        k: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    MaskedMse {
        pred: NodeId,
        target: Vec<T>,
        mask: Vec<T>,
        count: T,
    },
    Sum {
        x: NodeId,
    },
    Dot {
        x: NodeId,
        weights: Vec<T>,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// The computation record: executed ops with their outputs, in order.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by node, produced by one reverse pass.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn reflect_index(q: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if q < 0 {
        -q
    } else if q >= n {
        2 * (n - 1) - q
    } else {
        q
    };
    r as usize
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Valid cross-correlation of `x: [Cin,H,W]` with `k: [Cout,Cin,KH,KW]`
    /// plus a per-output-channel bias `b: [Cout]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "conv2d";
        let (cin, h, w) = self.value(x).dims3(OP)?;
        let (cout, kcin, kh, kw) = self.value(k).dims4(OP)?;
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "input channels",
                expected: kcin,
                found: cin,
            });
        }
        let bias = self.value(b);
        if bias.len() != cout {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "bias length",
                expected: cout,
                found: bias.len(),
            });
        }
        if h < kh {
            return Err(TensorError::TooSmall { op: OP, extent: h, min: kh });
        }
        if w < kw {
            return Err(TensorError::TooSmall { op: OP, extent: w, min: kw });
        }
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let plane = ho * wo;
        let patch = cin * kh * kw;

        let xd = self.value(x).data();
        let mut cols = vec![T::zero(); patch * plane];
        for ci in 0..cin {
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = (ci * kh + dy) * kw + dx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for y in 0..ho {
                        let src = &xd[(ci * h + y + dy) * w + dx..][..wo];
                        dst[y * wo..(y + 1) * wo].copy_from_slice(src);
                    }
                }
            }
        }

        let mut out = vec![T::zero(); cout * plane];
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        T::gemm(
            cout,
            patch,
            plane,
            self.value(k).data(),
            (patch as isize, 1),
            &cols,
            (plane as isize, 1),
            T::one(),
            &mut out,
        );
        let value = Tensor::from_vec(vec![cout, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, b, cols }))
    }

    /// Mirror the border of `x: [C,H,W]` by `pad` samples, without repeating
    /// the edge sample itself.
    pub fn reflect_pad(&mut self, x: NodeId, pad: usize) -> Result<NodeId, TensorError> {
        let (c, h, w) = self.value(x).dims3("reflect_pad")?;
        let limit = h.min(w);
        if pad >= limit {
            return Err(TensorError::PadTooLarge { pad, limit });
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * hp * wp);
        for ci in 0..c {
            for y in 0..hp {
                let sy = reflect_index(y as isize - pad as isize, h);
                let row = &xd[(ci * h + sy) * w..][..w];
                for xx in 0..wp {
                    out.push(row[reflect_index(xx as isize - pad as isize, w)]);
                }
            }
        }
        let value = Tensor::from_vec(vec![c, hp, wp], out)?;
        Ok(self.push(value, Op::ReflectPad { x, pad }))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element of the
    /// block in row-major order.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (c, h, w) = self.value(x).dims3("maxpool2")?;
        if h % 2 != 0 {
            return Err(TensorError::OddExtent { dim: "H", extent: h });
        }
        if w % 2 != 0 {
            return Err(TensorError::OddExtent { dim: "W", extent: w });
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = (ci * h + 2 * y) * w + 2 * xx;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_vec(vec![c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }))
    }

    /// 2x2 transposed convolution with stride 2: `x: [Cin,H,W]`,
    /// `k: [Cin,Cout,2,2]`, `b: [Cout]` gives `[Cout,2H,2W]`.
    pub fn upconv2(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "upconv2";
        let (cin, h, w) = self.value(x).dims3(OP)?;
        let (kcin, cout, kh, kw) = self.value(k).dims4(OP)?;
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "input channels",
                expected: kcin,
                found: cin,
            });
        }
        if kh != 2 || kw != 2 {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "kernel extent",
                expected: 2,
                found: if kh != 2 { kh } else { kw },
            });
        }
        let bias = self.value(b);
        if bias.len() != cout {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "bias length",
                expected: cout,
                found: bias.len(),
            });
        }
        let plane = h * w;
        let taps = cout * 4;
        let mut y = vec![T::zero(); taps * plane];
        T::gemm(
            taps,
            cin,
            plane,
            self.value(k).data(),
            (1, taps as isize),
            self.value(x).data(),
            (plane as isize, 1),
            T::zero(),
            &mut y,
        );
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); cout * ho * wo];
        for co in 0..cout {
            let bv = bias.data()[co];
            for dy in 0..2 {
                for dx in 0..2 {
                    let src = &y[(co * 4 + dy * 2 + dx) * plane..][..plane];
                    for yy in 0..h {
                        let orow = &mut out[(co * ho + 2 * yy + dy) * wo..][..wo];
                        for xx in 0..w {
                            orow[2 * xx + dx] = src[yy * w + xx] + bv;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![cout, ho, wo], out)?;
        Ok(self.push(value, Op::UpConv2 { x, k, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x })
    }

    /// Stack `a` and `b` along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "concat_channels";
        let (ca, ha, wa) = self.value(a).dims3(OP)?;
        let (cb, hb, wb) = self.value(b).dims3(OP)?;
        if ha != hb {
            return Err(TensorError::ShapeMismatch { op: OP, dim: "H", expected: ha, found: hb });
        }
        if wa != wb {
            return Err(TensorError::ShapeMismatch { op: OP, dim: "W", expected: wa, found: wb });
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::from_vec(vec![ca + cb, ha, wa], data)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// `sum(mask * (pred - target)^2) / sum(mask)`.
    pub fn masked_mse(
        &mut self,
        pred: NodeId,
        target: &Tensor<T>,
        mask: &Tensor<T>,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "masked_mse";
        let p = self.value(pred);
        for (other, dim) in [(target, "target size"), (mask, "mask size")] {
            if other.len() != p.len() {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    dim,
                    expected: p.len(),
                    found: other.len(),
                });
            }
        }
        let count: T = mask.data().iter().copied().sum();
        if count <= T::zero() {
            return Err(TensorError::EmptyMask);
        }
        let mut acc = T::zero();
        for ((&pv, &tv), &mv) in p.data().iter().zip(target.data()).zip(mask.data()) {
            if mv != T::zero() {
                let d = pv - tv;
                acc += mv * d * d;
            }
        }
        let value = Tensor::scalar(acc / count);
        Ok(self.push(
            value,
            Op::MaskedMse {
                pred,
                target: target.data().to_vec(),
                mask: mask.data().to_vec(),
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    /// Inner product with a constant tensor of the same size.
    pub fn dot(&mut self, x: NodeId, weights: &Tensor<T>) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                dim: "element count",
                expected: xv.len(),
                found: weights.len(),
            });
        }
        let s = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot { x, weights: weights.data().to_vec() },
        ))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    /// Fingerprint of every non-smooth decision taken on the tape: ReLU
    /// activity patterns and pooling winners.
    pub fn kink_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    sig.extend(self.value(*x).data().iter().map(|&v| usize::from(v > T::zero())))
                }
                Op::MaxPool2 { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from a single-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, TensorError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, k, b, cols } => {
                    let (cin, h, w) = self.value(*x).dims3("conv2d")?;
                    let (cout, _, kh, kw) = self.value(*k).dims4("conv2d")?;
                    let (ho, wo) = (h - kh + 1, w - kw + 1);
                    let plane = ho * wo;
                    let patch = cin * kh * kw;
                    let gd = g.data();

                    let mut dk = vec![T::zero(); cout * patch];
                    T::gemm(
                        cout,
                        plane,
                        patch,
                        gd,
                        (plane as isize, 1),
                        cols,
                        (1, plane as isize),
                        T::zero(),
                        &mut dk,
                    );
                    let db: Vec<T> = gd.chunks(plane).map(|c| c.iter().copied().sum()).collect();

                    let mut dcols = vec![T::zero(); patch * plane];
                    T::gemm(
                        patch,
                        cout,
                        plane,
                        self.value(*k).data(),
                        (1, patch as isize),
                        gd,
                        (plane as isize, 1),
                        T::zero(),
                        &mut dcols,
                    );
                    let mut dx = vec![T::zero(); cin * h * w];
                    for ci in 0..cin {
                        for dy in 0..kh {
                            for dxo in 0..kw {
                                let row = (ci * kh + dy) * kw + dxo;
                                let src = &dcols[row * plane..(row + 1) * plane];
                                for y in 0..ho {
                                    let dst = &mut dx[(ci * h + y + dy) * w + dxo..][..wo];
                                    for (d, &s) in dst.iter_mut().zip(&src[y * wo..(y + 1) * wo]) {
                                        *d += s;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, self.value(*x).shape(), dx);
                    accumulate(&mut grads, *k, self.value(*k).shape(), dk);
                    accumulate(&mut grads, *b, self.value(*b).shape(), db);
                }
                Op::ReflectPad { x, pad } => {
                    let (c, h, w) = self.value(*x).dims3("reflect_pad")?;
                    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                    let gd = g.data();
                    let mut dx = vec![T::zero(); c * h * w];
                    for ci in 0..c {
                        for y in 0..hp {
                            let sy = reflect_index(y as isize - *pad as isize, h);
                            for xx in 0..wp {
                                let sx = reflect_index(xx as isize - *pad as isize, w);
                                dx[(ci * h + sy) * w + sx] += gd[(ci * hp + y) * wp + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, self.value(*x).shape(), dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx[src] += gv;
                    }
                    accumulate(&mut grads, *x, self.value(*x).shape(), dx);
                }
                Op::UpConv2 { x, k, b } => {
                    let (cin, h, w) = self.value(*x).dims3("upconv2")?;
                    let (_, cout, _, _) = self.value(*k).dims4("upconv2")?;
                    let plane = h * w;
                    let taps = cout * 4;
                    let (ho, wo) = (2 * h, 2 * w);
                    let gd = g.data();
                    let mut dy_cols = vec![T::zero(); taps * plane];
                    let mut db = vec![T::zero(); cout];
                    for co in 0..cout {
                        db[co] = gd[co * ho * wo..(co + 1) * ho * wo].iter().copied().sum();
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let dst = &mut dy_cols[(co * 4 + dy * 2 + dx) * plane..][..plane];
                                for yy in 0..h {
                                    let grow = &gd[(co * ho + 2 * yy + dy) * wo..][..wo];
                                    for xx in 0..w {
                                        dst[yy * w + xx] = grow[2 * xx + dx];
                                    }
                                }
                            }
                        }
                    }
                    let mut dxv = vec![T::zero(); cin * plane];
                    T::gemm(
                        cin,
                        taps,
                        plane,
                        self.value(*k).data(),
                        (taps as isize, 1),
                        &dy_cols,
                        (plane as isize, 1),
                        T::zero(),
                        &mut dxv,
                    );
                    let mut dk = vec![T::zero(); cin * taps];
                    T::gemm(
                        cin,
                        plane,
                        taps,
                        self.value(*x).data(),
                        (plane as isize, 1),
                        &dy_cols,
                        (1, plane as isize),
                        T::zero(),
                        &mut dk,
                    );
                    accumulate(&mut grads, *x, self.value(*x).shape(), dxv);
                    accumulate(&mut grads, *k, self.value(*k).shape(), dk);
                    accumulate(&mut grads, *b, self.value(*b).shape(), db);
                }
                Op::Relu { x } => {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, self.value(*x).shape(), dx);
                }
                Op::Concat { a, b } => {
                    let na = self.value(*a).len();
                    let (ga, gb) = g.data().split_at(na);
                    accumulate(&mut grads, *a, self.value(*a).shape(), ga.to_vec());
                    accumulate(&mut grads, *b, self.value(*b).shape(), gb.to_vec());
                }
                Op::MaskedMse { pred, target, mask, count } => {
                    let scale = g.data()[0] * T::from_f64(2.0) / *count;
                    let dp = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(target)
                        .zip(mask)
                        .map(|((&p, &t), &m)| {
                            if m != T::zero() {
                                scale * m * (p - t)
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *pred, self.value(*pred).shape(), dp);
                }
                Op::Sum { x } => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, self.value(*x).shape(), vec![g.data()[0]; n]);
                }
                Op::Dot { x, weights } => {
                    let gv = g.data()[0];
                    let dx = weights.iter().map(|&w| w * gv).collect();
                    accumulate(&mut grads, *x, self.value(*x).shape(), dx);
                }
                Op::Scale { x, factor } => {
                    let dx = g.data().iter().map(|&v| v * *factor).collect();
                    accumulate(&mut grads, *x, self.value(*x).shape(), dx);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    id: NodeId,
    shape: &[usize],
    data: Vec<T>,
) {
    let incoming = Tensor::from_vec(shape.to_vec(), data).expect("gradient shape matches value");
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&incoming),
        slot @ None => *slot = Some(incoming),
    }
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Multiply analytic gradients by this factor before comparing
    /// (self-test of the checker).
    pub fault_scale: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, floor: 1e-6, fault_scale: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose perturbation crossed a ReLU kink or changed a pooling winner.
    pub skipped: usize,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences in `f64`.
///
/// `build` receives leaf ids for `inputs` (in order) and returns the loss node.
pub fn grad_check<F>(
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    build: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId), TensorError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.leaf(v.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok((g, ids, loss))
    };

    let (graph, ids, loss) = eval(inputs)?;
    let base_sig = graph.kink_signature();
    let grads = graph.backward(loss)?;
    let fault = opts.fault_scale.unwrap_or(1.0);

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0, worst: None };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let (gp, _, lp) = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let (gm, _, lm) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if gp.kink_signature() != base_sig || gm.kink_signature() != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * opts.step);
            let a = analytic.data()[j] * fault;
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
