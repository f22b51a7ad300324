//! Reverse-mode automatic differentiation over dynamically shaped `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Var`] is a cheap
//! handle into the tape. Calling [`Tape::backward`] runs a single reverse
//! sweep and returns the gradient of a scalar root with respect to every
//! recorded node. All arithmetic is 64-bit so gradients can be validated
//! against central finite differences at tight tolerances.
//!
//! The op set is deliberately small: dense linear algebra, pointwise
//! nonlinearities, 2-D (transposed) convolution, per-channel normalization,
//! and the glue (concat/slice/stack) needed to wire recurrent cells. Shapes
//! are checked eagerly; a mismatch is a programming error and panics.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use std::cell::{Ref, RefCell};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// Identity forward, zero gradient backward.
    Detach,
    /// Forward takes the constructed value verbatim; the full output
    /// gradient is routed to the stored surrogate node instead.
    StraightThrough(Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    Sub(Var, Var),
    Neg(Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    /// (m,k) x (k,n) -> (m,n)
    MatMul(Var, Var),
    /// (m,k) x (n,k) -> (m,n), i.e. a * b^T
    MatMulBT(Var, Var),
    /// (m,n) x (n,) -> (m,)
    MatVec(Var, Var),
    /// (n,) . (n,) -> scalar
    Dot(Var, Var),
    SumAll(Var),
    /// tensor / scalar-var
    DivScalar(Var, Var),
    /// tensor * scalar-var
    MulScalar(Var, Var),
    /// stack 0-d vars into a 1-d vector
    Stack0(Vec<Var>),
    /// index a 1-d vector -> 0-d
    At(Var, usize),
    /// 1-d concat
    Concat1(Vec<Var>),
    /// 1-d slice [lo, hi)
    Slice1(Var, usize, usize),
    Reshape(Var),
    /// concat 3-d (C,H,W) tensors along the channel axis
    ConcatC(Vec<Var>),
    /// x: (Cin,H,W), w: (Cout,Cin,kh,kw), zero padding, square stride
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    /// x: (Cin,H,W), w: (Cin,Cout,kh,kw)
    ConvT2d { x: Var, w: Var, stride: usize, pad: usize },
    /// (C,H,W) + (C,) broadcast over spatial dims
    AddChanBias(Var, Var),
    /// (C,H,W) * (C,) broadcast over spatial dims
    MulChanGain(Var, Var),
    /// normalize each channel of (C,H,W) to zero mean / unit variance
    InstNorm { x: Var, eps: f64 },
    /// 2x2 average pooling, stride 2
    AvgPool2(Var),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Records a forward computation and replays it in reverse for gradients.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` if `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient w.r.t. `v`, zero-filled when `v` does not influence the root.
    pub fn wrt_or_zero(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.grads[v.0] {
            Some(ref g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Ref<'_, ArrayD<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    /// Clone out the value of `v`.
    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.val(v).clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.val(v).shape().to_vec()
    }

    /// Value of a 0-d (or single-element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.val(v);
        debug_assert_eq!(val.len(), 1, "scalar() on node with {} elements", val.len());
        *val.iter().next().expect("empty node")
    }

    // ---- node constructors ----

    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf1(&self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf2(&self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn scalar_leaf(&self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn zeros(&self, shape: &[usize]) -> Var {
        self.leaf(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn detach(&self, a: Var) -> Var {
        let v = self.value(a);
        self.push(v, Op::Detach)
    }

    /// Straight-through estimator: the result carries `forward`'s value
    /// bit-for-bit, while the backward pass treats the node as an identity
    /// function of `surrogate`. Used to run a discrete forward choice with
    /// gradients taken from its smooth relaxation.
    pub fn straight_through(&self, forward: Var, surrogate: Var) -> Var {
        let v = {
            let (vf, vs) = (self.val(forward), self.val(surrogate));
            assert_eq!(vf.shape(), vs.shape(), "straight_through: shape mismatch");
            vf.clone()
        };
        self.push(v, Op::StraightThrough(surrogate))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = {
            let (va, vb) = (self.val(a), self.val(b));
            assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
            &*va + &*vb
        };
        self.push(v, Op::Add(a, b))
    }

    pub fn add_n(&self, vs: &[Var]) -> Var {
        assert!(!vs.is_empty(), "add_n: empty input");
        let v = {
            let first = self.val(vs[0]).clone();
            vs[1..].iter().fold(first, |acc, &x| {
                let vx = self.val(x);
                assert_eq!(acc.shape(), vx.shape(), "add_n: shape mismatch");
                acc + &*vx
            })
        };
        self.push(v, Op::AddN(vs.to_vec()))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = {
            let (va, vb) = (self.val(a), self.val(b));
            assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
            &*va - &*vb
        };
        self.push(v, Op::Sub(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let v = -&*self.val(a);
        self.push(v, Op::Neg(a))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = {
            let (va, vb) = (self.val(a), self.val(b));
            assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
            &*va * &*vb
        };
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = {
            let (va, vb) = (self.val(a), self.val(b));
            assert_eq!(va.shape(), vb.shape(), "div: shape mismatch");
            &*va / &*vb
        };
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = &*self.val(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let v = &*self.val(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.val(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.val(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let v = self.val(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn softplus(&self, a: Var) -> Var {
        let v = self.val(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.val(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.val(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let v = self.val(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = {
            let (va, vb) = (self.val(a), self.val(b));
            let (ma, mb) = (as2(&va), as2(&vb));
            assert_eq!(ma.ncols(), mb.nrows(), "matmul: inner dims differ");
            ma.dot(&mb).into_dyn()
        };
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T` without materializing the transpose on the tape.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Var {
        let v = {
            let (va, vb) = (self.val(a), self.val(b));
            let (ma, mb) = (as2(&va), as2(&vb));
            assert_eq!(ma.ncols(), mb.ncols(), "matmul_bt: inner dims differ");
            ma.dot(&mb.t()).into_dyn()
        };
        self.push(v, Op::MatMulBT(a, b))
    }

    pub fn matvec(&self, w: Var, x: Var) -> Var {
        let v = {
            let (vw, vx) = (self.val(w), self.val(x));
            let (mw, ax) = (as2(&vw), as1(&vx));
            assert_eq!(mw.ncols(), ax.len(), "matvec: dims differ");
            mw.dot(&ax).into_dyn()
        };
        self.push(v, Op::MatVec(w, x))
    }

    pub fn dot(&self, a: Var, b: Var) -> Var {
        let v = {
            let (va, vb) = (self.val(a), self.val(b));
            let (xa, xb) = (as1(&va), as1(&vb));
            assert_eq!(xa.len(), xb.len(), "dot: dims differ");
            ArrayD::from_elem(IxDyn(&[]), xa.dot(&xb))
        };
        self.push(v, Op::Dot(a, b))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.val(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.val(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn div_scalar(&self, a: Var, s: Var) -> Var {
        let v = {
            let (va, vs) = (self.val(a), self.val(s));
            debug_assert_eq!(vs.len(), 1, "div_scalar: rhs not a scalar");
            &*va / *vs.iter().next().unwrap()
        };
        self.push(v, Op::DivScalar(a, s))
    }

    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        let v = {
            let (va, vs) = (self.val(a), self.val(s));
            debug_assert_eq!(vs.len(), 1, "mul_scalar: rhs not a scalar");
            &*va * *vs.iter().next().unwrap()
        };
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn stack0(&self, vs: &[Var]) -> Var {
        let v = Array1::from_iter(vs.iter().map(|&x| self.scalar(x))).into_dyn();
        self.push(v, Op::Stack0(vs.to_vec()))
    }

    pub fn at(&self, a: Var, i: usize) -> Var {
        let v = {
            let va = self.val(a);
            let xa = as1(&va);
            ArrayD::from_elem(IxDyn(&[]), xa[i])
        };
        self.push(v, Op::At(a, i))
    }

    pub fn concat1(&self, vs: &[Var]) -> Var {
        assert!(!vs.is_empty(), "concat1: empty input");
        let mut out = Vec::new();
        for &x in vs {
            let vx = self.val(x);
            assert_eq!(vx.ndim(), 1, "concat1: non-1d input");
            out.extend(vx.iter().copied());
        }
        self.push(Array1::from_vec(out).into_dyn(), Op::Concat1(vs.to_vec()))
    }

    pub fn slice1(&self, a: Var, lo: usize, hi: usize) -> Var {
        let v = {
            let va = self.val(a);
            let xa = as1(&va);
            assert!(hi <= xa.len() && lo <= hi, "slice1: out of range");
            xa.slice(ndarray::s![lo..hi]).to_owned().into_dyn()
        };
        self.push(v, Op::Slice1(a, lo, hi))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let v = {
            let va = self.val(a);
            va.clone()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape: element count mismatch")
        };
        self.push(v, Op::Reshape(a))
    }

    pub fn concat_c(&self, vs: &[Var]) -> Var {
        assert!(!vs.is_empty(), "concat_c: empty input");
        let v = {
            let vals: Vec<_> = vs.iter().map(|&x| self.value(x)).collect();
            let (h, w) = (vals[0].shape()[1], vals[0].shape()[2]);
            let c_total: usize = vals.iter().map(|v| v.shape()[0]).sum();
            let mut out = Array3::<f64>::zeros((c_total, h, w));
            let mut c0 = 0;
            for v in &vals {
                assert_eq!(&v.shape()[1..], &[h, w], "concat_c: spatial dims differ");
                let c = v.shape()[0];
                out.slice_mut(ndarray::s![c0..c0 + c, .., ..])
                    .assign(&v.view().into_dimensionality::<Ix3>().unwrap());
                c0 += c;
            }
            out.into_dyn()
        };
        self.push(v, Op::ConcatC(vs.to_vec()))
    }

    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let v = {
            let (vx, vw) = (self.val(x), self.val(w));
            conv2d_forward(&vx, &vw, stride, pad).into_dyn()
        };
        self.push(v, Op::Conv2d { x, w, stride, pad })
    }

    pub fn conv_t2d(&self, x: Var, w: Var, stride: usize, pad: usize, opad: usize) -> Var {
        let v = {
            let (vx, vw) = (self.val(x), self.val(w));
            conv_t2d_forward(&vx, &vw, stride, pad, opad).into_dyn()
        };
        self.push(v, Op::ConvT2d { x, w, stride, pad })
    }

    pub fn add_chan_bias(&self, x: Var, b: Var) -> Var {
        let v = {
            let (vx, vb) = (self.val(x), self.val(b));
            assert_eq!(vx.shape()[0], vb.len(), "add_chan_bias: channel count differs");
            let mut out = vx.clone();
            for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
                plane += vb[[c]];
            }
            out
        };
        self.push(v, Op::AddChanBias(x, b))
    }

    pub fn mul_chan_gain(&self, x: Var, g: Var) -> Var {
        let v = {
            let (vx, vg) = (self.val(x), self.val(g));
            assert_eq!(vx.shape()[0], vg.len(), "mul_chan_gain: channel count differs");
            let mut out = vx.clone();
            for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
                plane *= vg[[c]];
            }
            out
        };
        self.push(v, Op::MulChanGain(x, g))
    }

    /// Per-channel normalization over the spatial dims of a (C,H,W) tensor.
    pub fn inst_norm(&self, x: Var, eps: f64) -> Var {
        let v = {
            let vx = self.val(x);
            let mut out = vx.clone();
            for mut plane in out.axis_iter_mut(Axis(0)) {
                let n = plane.len() as f64;
                let mu = plane.sum() / n;
                let var = plane.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                let s = (var + eps).sqrt();
                plane.mapv_inplace(|v| (v - mu) / s);
            }
            out
        };
        self.push(v, Op::InstNorm { x, eps })
    }

    pub fn avg_pool2(&self, x: Var) -> Var {
        let v = {
            let vx = self.val(x);
            let x3 = vx.view().into_dimensionality::<Ix3>().expect("avg_pool2: not 3-d");
            let (c, h, w) = x3.dim();
            assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial dims");
            let mut out = Array3::<f64>::zeros((c, h / 2, w / 2));
            for ci in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        out[[ci, i, j]] = (x3[[ci, 2 * i, 2 * j]]
                            + x3[[ci, 2 * i + 1, 2 * j]]
                            + x3[[ci, 2 * i, 2 * j + 1]]
                            + x3[[ci, 2 * i + 1, 2 * j + 1]])
                            / 4.0;
                    }
                }
            }
            out.into_dyn()
        };
        self.push(v, Op::AvgPool2(x))
    }

    // ---- composites ----

    /// Sum of squared entries: `sum((a - b)^2)`.
    pub fn sq_diff_sum(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.sum_all(sq)
    }

    /// Numerically stable softmax of a 1-d vector with the given temperature.
    ///
    /// The max shift is a constant w.r.t. the inputs (softmax is shift
    /// invariant), so the gradient is exact.
    pub fn softmax_t(&self, logits: Var, temperature: f64) -> Var {
        assert!(temperature > 0.0, "softmax_t: non-positive temperature");
        let scaled = self.scale(logits, 1.0 / temperature);
        let max = self.value(scaled).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted = self.add_scalar(scaled, -max);
        let e = self.exp(shifted);
        let s = self.sum_all(e);
        self.div_scalar(e, s)
    }

    /// Mean binary cross-entropy with logits against a constant target in {0,1}.
    ///
    /// `mean(softplus(x) - target * x)`, the stable form of
    /// `-[t ln sigma(x) + (1-t) ln(1 - sigma(x))]`.
    pub fn bce_with_logits_mean(&self, logits: Var, target: f64) -> Var {
        let sp = self.softplus(logits);
        let tx = self.scale(logits, target);
        let per = self.sub(sp, tx);
        self.mean_all(per)
    }

    // ---- backward ----

    /// Gradient of the scalar `root` with respect to every node on the tape.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward: root is not a scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_parents(
        &self,
        nodes: &[Node],
        i: usize,
        g: &ArrayD<f64>,
        grads: &mut [Option<ArrayD<f64>>],
    ) {
        let acc = |grads: &mut [Option<ArrayD<f64>>], v: Var, contrib: ArrayD<f64>| {
            // ndarray matmul may hand back column-major results (e.g. outer
            // products); stored gradients must stay row-major so later
            // reshapes hold.
            let contrib = to_standard(contrib);
            match grads[v.0] {
                Some(ref mut existing) => *existing += &contrib,
                None => grads[v.0] = Some(contrib),
            }
        };
        match nodes[i].op {
            Op::Leaf | Op::Detach => {}
            Op::StraightThrough(s) => acc(grads, s, g.clone()),
            Op::Add(a, b) => {
                acc(grads, a, g.clone());
                acc(grads, b, g.clone());
            }
            Op::AddN(ref vs) => {
                for &v in vs {
                    acc(grads, v, g.clone());
                }
            }
            Op::Sub(a, b) => {
                acc(grads, a, g.clone());
                acc(grads, b, -g);
            }
            Op::Neg(a) => acc(grads, a, -g),
            Op::Mul(a, b) => {
                acc(grads, a, g * &nodes[b.0].value);
                acc(grads, b, g * &nodes[a.0].value);
            }
            Op::Div(a, b) => {
                let vb = &nodes[b.0].value;
                acc(grads, a, g / vb);
                acc(grads, b, -&(g * &nodes[a.0].value / (vb * vb)));
            }
            Op::Scale(a, c) => acc(grads, a, g * c),
            Op::AddScalar(a) => acc(grads, a, g.clone()),
            Op::Sigmoid(a) => {
                let y = &nodes[i].value;
                acc(grads, a, g * &(y * &(1.0 - y)));
            }
            Op::Tanh(a) => {
                let y = &nodes[i].value;
                acc(grads, a, g * &(1.0 - y * y));
            }
            Op::Relu(a) => {
                let mask = nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, a, g * &mask);
            }
            Op::LeakyRelu(a, slope) => {
                let mask = nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { slope });
                acc(grads, a, g * &mask);
            }
            Op::Softplus(a) => {
                let d = nodes[a.0].value.mapv(sigmoid);
                acc(grads, a, g * &d);
            }
            Op::Exp(a) => acc(grads, a, g * &nodes[i].value),
            Op::Ln(a) => acc(grads, a, g / &nodes[a.0].value),
            Op::Sqrt(a) => acc(grads, a, g / &(2.0 * &nodes[i].value)),
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (ma, mb) = (as2(va), as2(vb));
                let mg = as2(g);
                acc(grads, a, mg.dot(&mb.t()).into_dyn());
                acc(grads, b, ma.t().dot(&mg).into_dyn());
            }
            Op::MatMulBT(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (ma, mb) = (as2(va), as2(vb));
                let mg = as2(g);
                acc(grads, a, mg.dot(&mb).into_dyn());
                acc(grads, b, mg.t().dot(&ma).into_dyn());
            }
            Op::MatVec(w, x) => {
                let (vw, vx) = (&nodes[w.0].value, &nodes[x.0].value);
                let (mw, ax) = (as2(vw), as1(vx));
                let ag = as1(g);
                let mut dw = Array2::<f64>::zeros(mw.dim());
                for r in 0..mw.nrows() {
                    for c in 0..mw.ncols() {
                        dw[[r, c]] = ag[r] * ax[c];
                    }
                }
                acc(grads, w, dw.into_dyn());
                acc(grads, x, mw.t().dot(&ag).into_dyn());
            }
            Op::Dot(a, b) => {
                let g0 = g[[]];
                acc(grads, a, &nodes[b.0].value * g0);
                acc(grads, b, &nodes[a.0].value * g0);
            }
            Op::SumAll(a) => {
                let g0 = g[[]];
                acc(grads, a, ArrayD::from_elem(nodes[a.0].value.raw_dim(), g0));
            }
            Op::DivScalar(a, s) => {
                let sv = *nodes[s.0].value.iter().next().unwrap();
                acc(grads, a, g / sv);
                let ds = -(g * &nodes[a.0].value).sum() / (sv * sv);
                acc(grads, s, ArrayD::from_elem(nodes[s.0].value.raw_dim(), ds));
            }
            Op::MulScalar(a, s) => {
                let sv = *nodes[s.0].value.iter().next().unwrap();
                acc(grads, a, g * sv);
                let ds = (g * &nodes[a.0].value).sum();
                acc(grads, s, ArrayD::from_elem(nodes[s.0].value.raw_dim(), ds));
            }
            Op::Stack0(ref vs) => {
                let ag = as1(g);
                for (k, &v) in vs.iter().enumerate() {
                    acc(grads, v, ArrayD::from_elem(nodes[v.0].value.raw_dim(), ag[k]));
                }
            }
            Op::At(a, idx) => {
                let mut da = ArrayD::zeros(nodes[a.0].value.raw_dim());
                da[[idx]] = g[[]];
                acc(grads, a, da);
            }
            Op::Concat1(ref vs) => {
                let ag = as1(g);
                let mut off = 0;
                for &v in vs {
                    let n = nodes[v.0].value.len();
                    let part = ag.slice(ndarray::s![off..off + n]).to_owned();
                    acc(grads, v, part.into_dyn());
                    off += n;
                }
            }
            Op::Slice1(a, lo, hi) => {
                let mut da = ArrayD::zeros(nodes[a.0].value.raw_dim());
                let ag = as1(g);
                for k in lo..hi {
                    da[[k]] = ag[k - lo];
                }
                acc(grads, a, da);
            }
            Op::Reshape(a) => {
                let da = g
                    .clone()
                    .into_shape_with_order(nodes[a.0].value.raw_dim())
                    .expect("reshape backward");
                acc(grads, a, da);
            }
            Op::ConcatC(ref vs) => {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut c0 = 0;
                for &v in vs {
                    let c = nodes[v.0].value.shape()[0];
                    let part = g3.slice(ndarray::s![c0..c0 + c, .., ..]).to_owned();
                    acc(grads, v, part.into_dyn());
                    c0 += c;
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
                let (dx, dw) = conv2d_backward(vx, vw, g, stride, pad);
                acc(grads, x, dx.into_dyn());
                acc(grads, w, dw.into_dyn());
            }
            Op::ConvT2d { x, w, stride, pad } => {
                let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
                let (dx, dw) = conv_t2d_backward(vx, vw, g, stride, pad);
                acc(grads, x, dx.into_dyn());
                acc(grads, w, dw.into_dyn());
            }
            Op::AddChanBias(x, b) => {
                acc(grads, x, g.clone());
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let db = Array1::from_iter(g3.axis_iter(Axis(0)).map(|p| p.sum()));
                acc(grads, b, db.into_dyn());
            }
            Op::MulChanGain(x, gain) => {
                let vg = &nodes[gain.0].value;
                let mut dx = g.clone();
                for (c, mut plane) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    plane *= vg[[c]];
                }
                acc(grads, x, dx);
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x3 = nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let dgain = Array1::from_iter(
                    g3.axis_iter(Axis(0))
                        .zip(x3.axis_iter(Axis(0)))
                        .map(|(gp, xp)| (&gp * &xp).sum()),
                );
                acc(grads, gain, dgain.into_dyn());
            }
            Op::InstNorm { x, eps } => {
                // dx = (dy - mean(dy) - y * mean(dy * y)) / std, per channel
                let vx = &nodes[x.0].value;
                let y = &nodes[i].value;
                let mut dx = ArrayD::<f64>::zeros(vx.raw_dim());
                let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
                let y3 = y.view().into_dimensionality::<Ix3>().unwrap();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx3 = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = x3.dim();
                let n = (h * w) as f64;
                for ci in 0..c {
                    let xp = x3.index_axis(Axis(0), ci);
                    let yp = y3.index_axis(Axis(0), ci);
                    let gp = g3.index_axis(Axis(0), ci);
                    let mu = xp.sum() / n;
                    let var = xp.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                    let s = (var + eps).sqrt();
                    let g_mean = gp.sum() / n;
                    let gy_mean = (&gp * &yp).sum() / n;
                    let mut dp = dx3.index_axis_mut(Axis(0), ci);
                    for ((d, &gv), &yv) in dp.iter_mut().zip(gp.iter()).zip(yp.iter()) {
                        *d = (gv - g_mean - yv * gy_mean) / s;
                    }
                }
                acc(grads, x, dx);
            }
            Op::AvgPool2(x) => {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (c, ho, wo) = g3.dim();
                let mut dx = Array3::<f64>::zeros((c, ho * 2, wo * 2));
                for ci in 0..c {
                    for i2 in 0..ho {
                        for j2 in 0..wo {
                            let q = g3[[ci, i2, j2]] / 4.0;
                            dx[[ci, 2 * i2, 2 * j2]] = q;
                            dx[[ci, 2 * i2 + 1, 2 * j2]] = q;
                            dx[[ci, 2 * i2, 2 * j2 + 1]] = q;
                            dx[[ci, 2 * i2 + 1, 2 * j2 + 1]] = q;
                        }
                    }
                }
                acc(grads, x, dx.into_dyn());
            }
        }
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn as1(v: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    v.view().into_dimensionality::<Ix1>().expect("expected 1-d tensor")
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("expected 2-d tensor")
}

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "conv: kernel larger than padded input");
    (n + 2 * pad - k) / stride + 1
}

/// im2col patch matrix: (Cin*kh*kw, Hout*Wout).
fn im2col(x: &ndarray::ArrayView3<'_, f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (c * kh + di) * kw + dj;
                for oi in 0..ho {
                    let ii = (oi * stride + di) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + dj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = x[[c, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix back to image layout (adjoint of im2col).
fn col2im(
    cols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let mut x = Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (c * kh + di) * kw + dj;
                for oi in 0..ho {
                    let ii = (oi * stride + di) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + dj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[[c, ii as usize, jj as usize]] += cols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    x
}

/// Force row-major layout, copying only when needed.
fn to_standard<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn conv2d_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> Array3<f64> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("conv2d: input not 3-d");
    let w4 = w.view().into_dimensionality::<ndarray::Ix4>().expect("conv2d: weight not 4-d");
    let (cout, cin, kh, kw) = w4.dim();
    assert_eq!(x3.dim().0, cin, "conv2d: channel mismatch");
    let (_, h, wd) = x3.dim();
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wd, kw, stride, pad);
    let cols = im2col(&x3, kh, kw, stride, pad);
    let wmat = w4.into_shape_with_order((cout, cin * kh * kw)).unwrap();
    let out = to_standard(wmat.dot(&cols));
    out.into_shape_with_order((cout, ho, wo)).unwrap()
}

fn conv2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    g: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, ndarray::Array4<f64>) {
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    let w4 = w.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
    let (cout, cin, kh, kw) = w4.dim();
    let (_, h, wd) = x3.dim();
    let (_, ho, wo) = g3.dim();
    let gmat = g3.into_shape_with_order((cout, ho * wo)).unwrap();
    let cols = im2col(&x3, kh, kw, stride, pad);
    let dw = to_standard(gmat.dot(&cols.t()));
    let wmat = w4.into_shape_with_order((cout, cin * kh * kw)).unwrap();
    let dcols = wmat.t().dot(&gmat);
    let dx = col2im(&dcols, cin, h, wd, kh, kw, stride, pad);
    (dx, dw.into_shape_with_order((cout, cin, kh, kw)).unwrap())
}

fn conv_t2d_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize, opad: usize) -> Array3<f64> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("conv_t2d: input not 3-d");
    let w4 = w.view().into_dimensionality::<ndarray::Ix4>().expect("conv_t2d: weight not 4-d");
    let (cin, cout, kh, kw) = w4.dim();
    assert_eq!(x3.dim().0, cin, "conv_t2d: channel mismatch");
    let (_, h, wd) = x3.dim();
    let ho = (h - 1) * stride + kh + opad;
    let wo = (wd - 1) * stride + kw + opad;
    assert!(ho > 2 * pad && wo > 2 * pad, "conv_t2d: padding too large");
    let (ho, wo) = (ho - 2 * pad, wo - 2 * pad);
    let mut out = Array3::<f64>::zeros((cout, ho, wo));
    for ci in 0..cin {
        for i in 0..h {
            for j in 0..wd {
                let xv = x3[[ci, i, j]];
                if xv == 0.0 {
                    continue;
                }
                for co in 0..cout {
                    for di in 0..kh {
                        let oi = (i * stride + di) as isize - pad as isize;
                        if oi < 0 || oi >= ho as isize {
                            continue;
                        }
                        for dj in 0..kw {
                            let oj = (j * stride + dj) as isize - pad as isize;
                            if oj < 0 || oj >= wo as isize {
                                continue;
                            }
                            out[[co, oi as usize, oj as usize]] += xv * w4[[ci, co, di, dj]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_t2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    g: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, ndarray::Array4<f64>) {
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    let w4 = w.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
    let (cin, cout, kh, kw) = w4.dim();
    let (_, h, wd) = x3.dim();
    let (_, ho, wo) = g3.dim();
    let mut dx = Array3::<f64>::zeros((cin, h, wd));
    let mut dw = ndarray::Array4::<f64>::zeros((cin, cout, kh, kw));
    for ci in 0..cin {
        for i in 0..h {
            for j in 0..wd {
                let xv = x3[[ci, i, j]];
                let mut acc_dx = 0.0;
                for co in 0..cout {
                    for di in 0..kh {
                        let oi = (i * stride + di) as isize - pad as isize;
                        if oi < 0 || oi >= ho as isize {
                            continue;
                        }
                        for dj in 0..kw {
                            let oj = (j * stride + dj) as isize - pad as isize;
                            if oj < 0 || oj >= wo as isize {
                                continue;
                            }
                            let gv = g3[[co, oi as usize, oj as usize]];
                            acc_dx += gv * w4[[ci, co, di, dj]];
                            dw[[ci, co, di, dj]] += gv * xv;
                        }
                    }
                }
                dx[[ci, i, j]] = acc_dx;
            }
        }
    }
    (dx, dw)
}

/// Finite-difference utilities used by gradient-checking tests.
pub mod check {
    /// Central-difference gradient of `f` at `x`.
    pub fn central_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
        let mut xs = x.to_vec();
        let mut grad = vec![0.0; x.len()];
        for i in 0..x.len() {
            let h = eps * x[i].abs().max(1.0);
            let orig = xs[i];
            xs[i] = orig + h;
            let fp = f(&xs);
            xs[i] = orig - h;
            let fm = f(&xs);
            xs[i] = orig;
            grad[i] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    /// `||a-b|| / max(||a||, ||b||, floor)`.
    pub fn rel_error_norm(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }
}
