//! Reverse-mode autodiff over a recorded op tape.
//!
//! Node ids are indices into the tape; an op's inputs always precede it, so
//! the tape order is already topological. `backward` walks the tape once from
//! the loss to the leaves and accumulates gradients additively wherever a
//! node fans out into several consumers.
//!
//! Shape agreement between tape inputs is asserted, not returned as errors:
//! user-facing validation happens in `ops` and in the model layer, and a
//! mismatch here is a bug in graph construction.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix3, Slice};

use super::ops;
use super::real::Real;

pub type NodeId = usize;

enum Op<T: Real> {
    Leaf,
    /// Elementwise sum of two same-shape nodes.
    Add(NodeId, NodeId),
    /// `[m, n] + [n]`, bias broadcast over rows.
    AddBias { x: NodeId, bias: NodeId },
    /// `[m, k] x [k, n]`.
    Matmul { a: NodeId, b: NodeId },
    /// Slice-wise matmul of `[n, p, q]` against `[n, q, r]` (or `[n, r, q]`
    /// when `trans_b`).
    BatchMatmul { a: NodeId, b: NodeId, trans_b: bool },
    /// Valid cross-correlation, saved im2col buffer reused by backward.
    Conv1d { input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, cols: Array2<T> },
    /// Last-axis layer norm; per-row mean and inverse std saved.
    LayerNorm { x: NodeId, gain: NodeId, shift: NodeId, mean: Array1<T>, inv_std: Array1<T> },
    /// Softmax over the last axis. Backward uses the node's own output.
    SoftmaxLast { x: NodeId },
    Gelu { x: NodeId },
    Relu { x: NodeId },
    /// Elementwise product with a constant mask (dropout).
    MulMask { x: NodeId, mask: ArrayD<T> },
    Scale { x: NodeId, factor: T },
    Reshape { x: NodeId },
    /// Materialized axis permutation.
    Permute { x: NodeId, axes: Vec<usize> },
    /// Prepends one learned token to every sequence: `[b, t, d] -> [b, t+1, d]`.
    PrependToken { tokens: NodeId, token: NodeId },
    /// `[b, t, d] + [t, d]`, position table broadcast over the batch.
    AddPositional { x: NodeId, pos: NodeId },
    /// Extracts one token: `[b, t, d] -> [b, d]`.
    TakeToken { x: NodeId, index: usize },
    SumAll { x: NodeId },
    /// Mean negative log-likelihood of the target class, probabilities
    /// clamped at `floor` before the log.
    CrossEntropy { probs: NodeId, targets: Vec<usize>, floor: T },
    /// Focal loss with per-class weights `alpha` and exponent `gamma`.
    /// `gamma = 0` with unit alpha reduces exactly to cross-entropy.
    Focal { probs: NodeId, targets: Vec<usize>, alpha: Vec<T>, gamma: T, floor: T },
    /// `ca * a + cb * b` elementwise; used to combine scalar losses.
    AffineCombine { a: NodeId, b: NodeId, ca: T, cb: T },
}

struct Node<T: Real> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct GradTape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by node id, produced by one backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl<T: Real> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id].value
    }

    /// Scalar read of a 1-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        let v = &self.nodes[id].value;
        assert_eq!(v.len(), 1, "node {id} is not a scalar");
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, v: T) -> NodeId {
        self.constant(ArrayD::from_elem(ndarray::IxDyn(&[]), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape contract");
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("add_bias: 2d");
        let bv = self.value(bias).view().into_dimensionality::<ndarray::Ix1>().expect("add_bias: 1d");
        assert_eq!(xv.ncols(), bv.len(), "add_bias shape contract");
        let value = (&xv + &bv.insert_axis(Axis(0))).into_dyn();
        let needs = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddBias { x, bias }, needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul: 2d lhs");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul: 2d rhs");
        assert_eq!(av.ncols(), bv.nrows(), "matmul shape contract");
        let value = av.dot(&bv).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul { a, b }, needs)
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix3>().expect("batch_matmul: 3d lhs");
        let bv = self.value(b).view().into_dimensionality::<Ix3>().expect("batch_matmul: 3d rhs");
        let (n, p, q) = av.dim();
        let (nb, b0, b1) = bv.dim();
        assert_eq!(n, nb, "batch_matmul batch contract");
        let r = if trans_b {
            assert_eq!(q, b1, "batch_matmul inner contract");
            b0
        } else {
            assert_eq!(q, b0, "batch_matmul inner contract");
            b1
        };
        let mut out = ndarray::Array3::<T>::zeros((n, p, r));
        for i in 0..n {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let mut oi = out.index_axis_mut(Axis(0), i);
            if trans_b {
                oi.assign(&ai.dot(&bi.t()));
            } else {
                oi.assign(&ai.dot(&bi));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), Op::BatchMatmul { a, b, trans_b }, needs)
    }

    pub fn conv1d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize) -> NodeId {
        let iv = self.value(input).view().into_dimensionality::<Ix3>().expect("conv1d: 3d input");
        let kv = self.value(kernel).view().into_dimensionality::<Ix3>().expect("conv1d: 3d kernel");
        let (b, c, l) = iv.dim();
        let (f, kc, k) = kv.dim();
        assert!(stride > 0 && kc == c && l >= k, "conv1d shape contract");
        let p = (l - k) / stride + 1;
        let cols = ops::im2col(&iv.to_owned(), k, stride, p);
        let kmat = kv.into_shape_with_order((f, c * k)).expect("kernel contiguous");
        let mut out_mat = cols.dot(&kmat.t());
        let bv = self.value(bias).view().into_dimensionality::<ndarray::Ix1>().expect("conv1d: 1d bias");
        assert_eq!(bv.len(), f, "conv1d bias contract");
        out_mat += &bv.insert_axis(Axis(0));
        let mut out = ndarray::Array3::<T>::zeros((b, f, p));
        for bi in 0..b {
            for pi in 0..p {
                let row = out_mat.row(bi * p + pi);
                for fi in 0..f {
                    out[[bi, fi, pi]] = row[fi];
                }
            }
        }
        let out = out.into_dyn();
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        self.push(out, Op::Conv1d { input, kernel, bias, stride, cols }, needs)
    }

    /// Layer norm over the last axis of an arbitrary-rank input.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: T) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().expect("layer_norm: rank >= 1");
        let rows = self.value(x).len() / d;
        let gv = self.value(gain).view().into_dimensionality::<ndarray::Ix1>().expect("gain 1d");
        let sv = self.value(shift).view().into_dimensionality::<ndarray::Ix1>().expect("shift 1d");
        assert!(gv.len() == d && sv.len() == d, "layer_norm affine contract");
        let x2 = self
            .value(x)
            .view()
            .into_shape_with_order((rows, d))
            .expect("standard layout");
        let mut out = Array2::<T>::zeros((rows, d));
        let mut mean = Array1::<T>::zeros(rows);
        let mut inv_std = Array1::<T>::zeros(rows);
        let dn = T::from_f64(d as f64);
        for i in 0..rows {
            let row = x2.row(i);
            let mu = row.sum() / dn;
            let var = row.fold(T::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / dn;
            let inv = (var + eps).sqrt().recip();
            mean[i] = mu;
            inv_std[i] = inv;
            let mut orow = out.row_mut(i);
            for j in 0..d {
                orow[j] = gv[j] * (row[j] - mu) * inv + sv[j];
            }
        }
        let value = out.into_shape_with_order(shape).expect("same numel").into_dyn();
        let needs = self.needs(x) || self.needs(gain) || self.needs(shift);
        self.push(value, Op::LayerNorm { x, gain, shift, mean, inv_std }, needs)
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().expect("softmax: rank >= 1");
        let rows = self.value(x).len() / d;
        let x2 = self
            .value(x)
            .view()
            .into_shape_with_order((rows, d))
            .expect("standard layout")
            .to_owned();
        let value = ops::softmax_rows(&x2)
            .into_shape_with_order(shape)
            .expect("same numel")
            .into_dyn();
        let needs = self.needs(x);
        self.push(value, Op::SoftmaxLast { x }, needs)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(ops::gelu_scalar);
        let needs = self.needs(x);
        self.push(value, Op::Gelu { x }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn mul_mask(&mut self, x: NodeId, mask: ArrayD<T>) -> NodeId {
        assert_eq!(self.value(x).shape(), mask.shape(), "mul_mask shape contract");
        let value = self.value(x) * &mask;
        let needs = self.needs(x);
        self.push(value, Op::MulMask { x, mask }, needs)
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let value = self.value(x).mapv(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let value = self
            .value(x)
            .view()
            .into_shape_with_order(shape.to_vec())
            .expect("reshape: same numel, standard layout")
            .to_owned();
        let needs = self.needs(x);
        self.push(value, Op::Reshape { x }, needs)
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let value = self
            .value(x)
            .view()
            .permuted_axes(axes.to_vec())
            .as_standard_layout()
            .into_owned();
        let needs = self.needs(x);
        self.push(value, Op::Permute { x, axes: axes.to_vec() }, needs)
    }

    pub fn prepend_token(&mut self, tokens: NodeId, token: NodeId) -> NodeId {
        let tv = self.value(tokens).view().into_dimensionality::<Ix3>().expect("tokens 3d");
        let (b, t, d) = tv.dim();
        let cv = self.value(token).view().into_dimensionality::<ndarray::Ix1>().expect("token 1d");
        assert_eq!(cv.len(), d, "prepend_token dim contract");
        let mut out = ndarray::Array3::<T>::zeros((b, t + 1, d));
        for bi in 0..b {
            out.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), 0)
                .assign(&cv);
        }
        out.slice_axis_mut(Axis(1), Slice::from(1..))
            .assign(&tv);
        let needs = self.needs(tokens) || self.needs(token);
        self.push(out.into_dyn(), Op::PrependToken { tokens, token }, needs)
    }

    pub fn add_positional(&mut self, x: NodeId, pos: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("x 3d");
        let pv = self.value(pos).view().into_dimensionality::<Ix2>().expect("pos 2d");
        assert_eq!((xv.dim().1, xv.dim().2), pv.dim(), "positional table contract");
        let value = (&xv + &pv).into_dyn();
        let needs = self.needs(x) || self.needs(pos);
        self.push(value, Op::AddPositional { x, pos }, needs)
    }

    pub fn take_token(&mut self, x: NodeId, index: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("x 3d");
        assert!(index < xv.dim().1, "token index contract");
        let value = xv.index_axis(Axis(1), index).to_owned().into_dyn();
        let needs = self.needs(x);
        self.push(value, Op::TakeToken { x, index }, needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = ArrayD::from_elem(ndarray::IxDyn(&[]), self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::SumAll { x }, needs)
    }

    pub fn cross_entropy(&mut self, probs: NodeId, targets: &[usize], floor: T) -> NodeId {
        let pv = self.value(probs).view().into_dimensionality::<Ix2>().expect("probs 2d");
        let (b, k) = pv.dim();
        assert_eq!(b, targets.len(), "target count contract");
        assert!(targets.iter().all(|&t| t < k), "target index contract");
        let mut acc = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            acc += pv[[i, t]].max(floor).ln();
        }
        let value = -acc / T::from_f64(b as f64);
        let needs = self.needs(probs);
        self.push(
            ArrayD::from_elem(ndarray::IxDyn(&[]), value),
            Op::CrossEntropy { probs, targets: targets.to_vec(), floor },
            needs,
        )
    }

    pub fn focal_loss(
        &mut self,
        probs: NodeId,
        targets: &[usize],
        alpha: &[T],
        gamma: T,
        floor: T,
    ) -> NodeId {
        let pv = self.value(probs).view().into_dimensionality::<Ix2>().expect("probs 2d");
        let (b, k) = pv.dim();
        assert_eq!(b, targets.len(), "target count contract");
        assert_eq!(alpha.len(), k, "alpha length contract");
        assert!(targets.iter().all(|&t| t < k), "target index contract");
        let mut acc = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let p = pv[[i, t]];
            let q = (T::one() - p).max(T::zero());
            acc += alpha[t] * q.powf(gamma) * p.max(floor).ln();
        }
        let value = -acc / T::from_f64(b as f64);
        let needs = self.needs(probs);
        self.push(
            ArrayD::from_elem(ndarray::IxDyn(&[]), value),
            Op::Focal { probs, targets: targets.to_vec(), alpha: alpha.to_vec(), gamma, floor },
            needs,
        )
    }

    pub fn affine_combine(&mut self, a: NodeId, b: NodeId, ca: T, cb: T) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "affine_combine shape contract");
        let value = self.nodes[a].value.mapv(|v| v * ca) + self.nodes[b].value.mapv(|v| v * cb);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::AffineCombine { a, b, ca, cb }, needs)
    }

    /// Reverse pass from a scalar root. Visits each node at most once, in
    /// reverse creation order; every fan-out accumulates additively.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::from_elem(self.nodes[root].value.raw_dim(), T::one()));

        for id in (0..=root).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().expect("present");
            self.step_backward(id, &g, &mut grads);
            // Leaves keep their gradient; interior grads are dropped once used.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn step_backward(&self, id: NodeId, g: &ArrayD<T>, grads: &mut Vec<Option<ArrayD<T>>>) {
        let accum = |grads: &mut Vec<Option<ArrayD<T>>>, target: NodeId, delta: ArrayD<T>| {
            if !self.nodes[target].needs_grad {
                return;
            }
            match &mut grads[target] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::AddBias { x, bias } => {
                accum(grads, *x, g.clone());
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                accum(grads, *bias, g2.sum_axis(Axis(0)).into_dyn());
            }
            Op::Matmul { a, b } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                if self.nodes[*a].needs_grad {
                    accum(grads, *a, g2.dot(&bv.t()).into_dyn());
                }
                if self.nodes[*b].needs_grad {
                    accum(grads, *b, av.t().dot(&g2).into_dyn());
                }
            }
            Op::BatchMatmul { a, b, trans_b } => {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let bv = self.value(*b).view().into_dimensionality::<Ix3>().unwrap();
                let n = av.dim().0;
                if self.nodes[*a].needs_grad {
                    let mut da = ndarray::Array3::<T>::zeros(av.dim());
                    for i in 0..n {
                        let gi = g3.index_axis(Axis(0), i);
                        let bi = bv.index_axis(Axis(0), i);
                        let mut di = da.index_axis_mut(Axis(0), i);
                        if *trans_b {
                            di.assign(&gi.dot(&bi));
                        } else {
                            di.assign(&gi.dot(&bi.t()));
                        }
                    }
                    accum(grads, *a, da.into_dyn());
                }
                if self.nodes[*b].needs_grad {
                    let mut db = ndarray::Array3::<T>::zeros(bv.dim());
                    for i in 0..n {
                        let gi = g3.index_axis(Axis(0), i);
                        let ai = av.index_axis(Axis(0), i);
                        let mut di = db.index_axis_mut(Axis(0), i);
                        if *trans_b {
                            di.assign(&gi.t().dot(&ai));
                        } else {
                            di.assign(&ai.t().dot(&gi));
                        }
                    }
                    accum(grads, *b, db.into_dyn());
                }
            }
            Op::Conv1d { input, kernel, bias, stride, cols } => {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (b, f, p) = g3.dim();
                let kv = self.value(*kernel).view().into_dimensionality::<Ix3>().unwrap();
                let (_, c, k) = kv.dim();
                let l = self.value(*input).shape()[2];
                // [b, f, p] -> [b*p, f]
                let gmat = g3
                    .permuted_axes([0, 2, 1])
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((b * p, f))
                    .unwrap();
                if self.nodes[*bias].needs_grad {
                    accum(grads, *bias, gmat.sum_axis(Axis(0)).into_dyn());
                }
                if self.nodes[*kernel].needs_grad {
                    let dk = gmat.t().dot(cols);
                    accum(
                        grads,
                        *kernel,
                        dk.into_shape_with_order((f, c, k)).unwrap().into_dyn(),
                    );
                }
                if self.nodes[*input].needs_grad {
                    let kmat = kv.into_shape_with_order((f, c * k)).unwrap();
                    let dcols = gmat.dot(&kmat);
                    let dinput = ops::col2im(&dcols, b, c, l, k, *stride, p);
                    accum(grads, *input, dinput.into_dyn());
                }
            }
            Op::LayerNorm { x, gain, shift, mean, inv_std } => {
                let shape = self.value(*x).shape().to_vec();
                let d = *shape.last().unwrap();
                let rows = self.value(*x).len() / d;
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let x2 = self.value(*x).view().into_shape_with_order((rows, d)).unwrap();
                let gv = self.value(*gain).view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let dn = T::from_f64(d as f64);

                if self.nodes[*shift].needs_grad {
                    accum(grads, *shift, g2.sum_axis(Axis(0)).into_dyn());
                }
                let mut dgain = Array1::<T>::zeros(d);
                let mut dx = Array2::<T>::zeros((rows, d));
                for i in 0..rows {
                    let xr = x2.row(i);
                    let gr = g2.row(i);
                    let inv = inv_std[i];
                    let mu = mean[i];
                    let mut sum_gg = T::zero();
                    let mut sum_ggx = T::zero();
                    for j in 0..d {
                        let xh = (xr[j] - mu) * inv;
                        let gg = gr[j] * gv[j];
                        dgain[j] += gr[j] * xh;
                        sum_gg += gg;
                        sum_ggx += gg * xh;
                    }
                    let m_gg = sum_gg / dn;
                    let m_ggx = sum_ggx / dn;
                    let mut dxr = dx.row_mut(i);
                    for j in 0..d {
                        let xh = (xr[j] - mu) * inv;
                        let gg = gr[j] * gv[j];
                        dxr[j] = inv * (gg - m_gg - xh * m_ggx);
                    }
                }
                if self.nodes[*gain].needs_grad {
                    accum(grads, *gain, dgain.into_dyn());
                }
                if self.nodes[*x].needs_grad {
                    accum(
                        grads,
                        *x,
                        dx.into_shape_with_order(shape).unwrap().into_dyn(),
                    );
                }
            }
            Op::SoftmaxLast { x } => {
                let y = &self.nodes[id].value;
                let shape = y.shape().to_vec();
                let d = *shape.last().unwrap();
                let rows = y.len() / d;
                let y2 = y.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let mut dx = Array2::<T>::zeros((rows, d));
                for i in 0..rows {
                    let yr = y2.row(i);
                    let gr = g2.row(i);
                    let dot = yr.iter().zip(gr.iter()).fold(T::zero(), |acc, (&y, &g)| acc + y * g);
                    let mut dxr = dx.row_mut(i);
                    for j in 0..d {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accum(grads, *x, dx.into_shape_with_order(shape).unwrap().into_dyn());
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let mut dx = xv.mapv(ops::gelu_grad_scalar);
                dx *= g;
                accum(grads, *x, dx);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut dx = xv.mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
                dx *= g;
                accum(grads, *x, dx);
            }
            Op::MulMask { x, mask } => {
                accum(grads, *x, g * mask);
            }
            Op::Scale { x, factor } => {
                accum(grads, *x, g.mapv(|v| v * *factor));
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                accum(
                    grads,
                    *x,
                    g.view().into_shape_with_order(shape).unwrap().to_owned(),
                );
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let dx = g
                    .view()
                    .permuted_axes(inverse)
                    .as_standard_layout()
                    .into_owned();
                accum(grads, *x, dx);
            }
            Op::PrependToken { tokens, token } => {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                if self.nodes[*tokens].needs_grad {
                    let dt = g3.slice_axis(Axis(1), Slice::from(1..)).to_owned();
                    accum(grads, *tokens, dt.into_dyn());
                }
                if self.nodes[*token].needs_grad {
                    let dc = g3.index_axis(Axis(1), 0).sum_axis(Axis(0));
                    accum(grads, *token, dc.into_dyn());
                }
            }
            Op::AddPositional { x, pos } => {
                accum(grads, *x, g.clone());
                if self.nodes[*pos].needs_grad {
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    accum(grads, *pos, g3.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::TakeToken { x, index } => {
                let mut dx = ArrayD::<T>::zeros(self.value(*x).raw_dim());
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                dx.index_axis_mut(Axis(1), *index)
                    .assign(&g2);
                accum(grads, *x, dx);
            }
            Op::SumAll { x } => {
                let s = *g.iter().next().unwrap();
                accum(grads, *x, ArrayD::from_elem(self.value(*x).raw_dim(), s));
            }
            Op::CrossEntropy { probs, targets, floor } => {
                let s = *g.iter().next().unwrap();
                let pv = self.value(*probs).view().into_dimensionality::<Ix2>().unwrap();
                let bsz = T::from_f64(targets.len() as f64);
                let mut dp = Array2::<T>::zeros(pv.dim());
                for (i, &t) in targets.iter().enumerate() {
                    let p = pv[[i, t]];
                    if p > *floor {
                        dp[[i, t]] = -s / (bsz * p);
                    }
                }
                accum(grads, *probs, dp.into_dyn());
            }
            Op::Focal { probs, targets, alpha, gamma, floor } => {
                let s = *g.iter().next().unwrap();
                let pv = self.value(*probs).view().into_dimensionality::<Ix2>().unwrap();
                let bsz = T::from_f64(targets.len() as f64);
                let gam = *gamma;
                let mut dp = Array2::<T>::zeros(pv.dim());
                for (i, &t) in targets.iter().enumerate() {
                    let p = pv[[i, t]];
                    let q = (T::one() - p).max(T::zero());
                    let pc = p.max(*floor);
                    // d/dp [-a * q^gamma * ln(pc)]
                    let modulator = if q > T::zero() && gam > T::zero() {
                        -gam * q.powf(gam - T::one()) * pc.ln()
                    } else {
                        T::zero()
                    };
                    let likelihood = if p > *floor { q.powf(gam) / p } else { T::zero() };
                    dp[[i, t]] = -s * alpha[t] * (modulator + likelihood) / bsz;
                }
                accum(grads, *probs, dp.into_dyn());
            }
            Op::AffineCombine { a, b, ca, cb } => {
                accum(grads, *a, g.mapv(|v| v * *ca));
                accum(grads, *b, g.mapv(|v| v * *cb));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};

    #[test]
    fn fan_out_accumulates_both_paths() {
        // y = 2x + 3x elementwise; dy/dx = 5 everywhere.
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(arr1(&[1.0, -2.0, 0.5]).into_dyn(), true);
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let y = tape.add(a, b);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let gx = grads.get(x).unwrap();
        assert_abs_diff_eq!(gx.sum(), 15.0, epsilon = 1e-12);
        assert!(gx.iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn matmul_gradients_match_hand_formula() {
        let mut tape = GradTape::<f64>::new();
        let a = tape.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn(), true);
        let b = tape.leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn(), true);
        let c = tape.matmul(a, b);
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss);
        // dA = ones.dot(B^T), dB = A^T.dot(ones)
        let da = grads.get(a).unwrap().view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let db = grads.get(b).unwrap().view().into_dimensionality::<Ix2>().unwrap().to_owned();
        assert_abs_diff_eq!(da, arr2(&[[11.0, 15.0], [11.0, 15.0]]), epsilon = 1e-12);
        assert_abs_diff_eq!(db, arr2(&[[4.0, 4.0], [6.0, 6.0]]), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_pinned_values() {
        // Uniform two-class prediction: loss = ln 2.
        let mut tape = GradTape::<f64>::new();
        let p = tape.leaf(arr2(&[[0.5, 0.5]]).into_dyn(), true);
        let loss = tape.cross_entropy(p, &[0], 1e-12);
        assert_abs_diff_eq!(tape.scalar(loss), std::f64::consts::LN_2, epsilon = 1e-15);

        // Perfect one-hot prediction: loss = 0.
        let mut tape = GradTape::<f64>::new();
        let p = tape.leaf(arr2(&[[1.0, 0.0]]).into_dyn(), true);
        let loss = tape.cross_entropy(p, &[0], 1e-12);
        assert_eq!(tape.scalar(loss), 0.0);

        // Floor keeps the loss finite on a zero-probability target.
        let mut tape = GradTape::<f64>::new();
        let p = tape.leaf(arr2(&[[0.0, 1.0]]).into_dyn(), true);
        let loss = tape.cross_entropy(p, &[0], 1e-12);
        assert_abs_diff_eq!(tape.scalar(loss), -(1e-12_f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn focal_pinned_value_and_ce_reduction() {
        // p_target = 0.9, gamma = 2, alpha = 1: -(0.1)^2 ln 0.9.
        let mut tape = GradTape::<f64>::new();
        let p = tape.leaf(arr2(&[[0.9, 0.1]]).into_dyn(), true);
        let loss = tape.focal_loss(p, &[0], &[1.0, 1.0], 2.0, 1e-12);
        assert_abs_diff_eq!(tape.scalar(loss), 0.0010536051565782628, epsilon = 1e-15);

        // gamma = 0, unit alpha collapses to cross-entropy.
        let probs = arr2(&[[0.2, 0.5, 0.3], [0.7, 0.1, 0.2]]);
        let mut tape = GradTape::<f64>::new();
        let p = tape.leaf(probs.clone().into_dyn(), true);
        let f = tape.focal_loss(p, &[1, 0], &[1.0; 3], 0.0, 1e-12);
        let c = tape.cross_entropy(p, &[1, 0], 1e-12);
        assert_abs_diff_eq!(tape.scalar(f), tape.scalar(c), epsilon = 1e-12);
    }

    #[test]
    fn backward_root_must_be_scalar() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(arr1(&[1.0, 2.0]).into_dyn(), true);
        let y = tape.scale(x, 2.0);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| tape.backward(y)));
        assert!(result.is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(arr1(&[1.0, 2.0]).into_dyn(), true);
        let c = tape.constant(arr1(&[3.0, 4.0]).into_dyn());
        let y = tape.add(x, c);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }
}
