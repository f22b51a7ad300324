//! Trainable-parameter plumbing shared by the forecaster and the renderer:
//! a named parameter store, recurrent cells, conv layers, Adam, and
//! global-norm gradient clipping.

use crate::ad::{Gradients, Tape, Var};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
}

/// Registration-ordered collection of named tensors.
///
/// Order is the identity used by the optimizer and the checkpoint format, so
/// construction must be deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name: {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn total_elems(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Push every parameter onto `tape` as a leaf; result is indexed by [`ParamId`].
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Gradients for every parameter, zero-filled where unused.
    pub fn collect_grads(&self, grads: &Gradients, vars: &[Var]) -> Vec<ArrayD<f64>> {
        assert_eq!(vars.len(), self.params.len());
        self.params
            .iter()
            .zip(vars)
            .map(|(p, &v)| grads.wrt_or_zero(v, p.value.shape()))
            .collect()
    }
}

/// Xavier-uniform tensor: limit `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("xavier: bad shape")
}

/// Scale all gradients in place so their joint L2 norm is at most `max_norm`.
///
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [ArrayD<f64>], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Adam with bias correction. Moment buffers are keyed by parameter index,
/// so the optimizer must be created for a specific [`ParamStore`] layout.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<ArrayD<f64>> = store
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[ArrayD<f64>]) {
        assert_eq!(grads.len(), store.len(), "adam: gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
            self.v[i].zip_mut_with(g, |v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
            let (m, v) = (&self.m[i], &self.v[i]);
            let p = store.value_mut(ParamId(i));
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }

    /// Flatten optimizer state for checkpointing: per-param (m, v) pairs.
    pub fn state(&self) -> (u64, Vec<ArrayD<f64>>, Vec<ArrayD<f64>>) {
        (self.t, self.m.clone(), self.v.clone())
    }

    pub fn restore(&mut self, t: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        assert_eq!(m.len(), self.m.len(), "adam restore: m count mismatch");
        assert_eq!(v.len(), self.v.len(), "adam restore: v count mismatch");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Dense layer `y = W x (+ b)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.register(
            format!("{prefix}.w"),
            xavier(rng, &[out_dim, in_dim], in_dim, out_dim),
        );
        let b = bias.then(|| store.register(format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[out_dim]))));
        Linear { w, b }
    }

    pub fn apply(&self, t: &Tape, vars: &[Var], x: Var) -> Var {
        let y = t.matvec(vars[self.w.0], x);
        match self.b {
            Some(b) => t.add(y, vars[b.0]),
            None => y,
        }
    }
}

/// Classic LSTM cell. Gate layout within the stacked weight is `[i, f, g, o]`;
/// the forget-gate bias starts at 1.0.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let wx = store.register(
            format!("{prefix}.wx"),
            xavier(rng, &[4 * hidden, input], input, hidden),
        );
        let wh = store.register(
            format!("{prefix}.wh"),
            xavier(rng, &[4 * hidden, hidden], hidden, hidden),
        );
        let mut bias = Array1::<f64>::zeros(4 * hidden);
        bias.slice_mut(ndarray::s![hidden..2 * hidden]).fill(1.0);
        let b = store.register(format!("{prefix}.b"), bias.into_dyn());
        LstmCell { wx, wh, b, hidden }
    }

    /// One step: `(x, h, c) -> (h', c')`.
    pub fn step(&self, t: &Tape, vars: &[Var], x: Var, h: Var, c: Var) -> (Var, Var) {
        let hsz = self.hidden;
        let zx = t.matvec(vars[self.wx.0], x);
        let zh = t.matvec(vars[self.wh.0], h);
        let z = t.add(t.add(zx, zh), vars[self.b.0]);
        let i = t.sigmoid(t.slice1(z, 0, hsz));
        let f = t.sigmoid(t.slice1(z, hsz, 2 * hsz));
        let g = t.tanh(t.slice1(z, 2 * hsz, 3 * hsz));
        let o = t.sigmoid(t.slice1(z, 3 * hsz, 4 * hsz));
        let c_new = t.add(t.mul(f, c), t.mul(i, g));
        let h_new = t.mul(o, t.tanh(c_new));
        (h_new, c_new)
    }
}

/// LSTM cell with two recurrence directions: a temporal predecessor and a
/// spatial predecessor, each with its own forget gate. Gate layout is
/// `[i, f_t, f_s, g, o]`.
#[derive(Clone, Copy, Debug)]
pub struct StLstmCell {
    pub wx: ParamId,
    pub wht: ParamId,
    pub whs: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl StLstmCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let wx = store.register(
            format!("{prefix}.wx"),
            xavier(rng, &[5 * hidden, input], input, hidden),
        );
        let wht = store.register(
            format!("{prefix}.wht"),
            xavier(rng, &[5 * hidden, hidden], hidden, hidden),
        );
        let whs = store.register(
            format!("{prefix}.whs"),
            xavier(rng, &[5 * hidden, hidden], hidden, hidden),
        );
        let mut bias = Array1::<f64>::zeros(5 * hidden);
        bias.slice_mut(ndarray::s![hidden..3 * hidden]).fill(1.0);
        let b = store.register(format!("{prefix}.b"), bias.into_dyn());
        StLstmCell { wx, wht, whs, b, hidden }
    }

    /// One step: inputs plus (temporal h/c, spatial h/c) -> (h', c').
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        t: &Tape,
        vars: &[Var],
        x: Var,
        h_t: Var,
        c_t: Var,
        h_s: Var,
        c_s: Var,
    ) -> (Var, Var) {
        let hsz = self.hidden;
        let zx = t.matvec(vars[self.wx.0], x);
        let zt = t.matvec(vars[self.wht.0], h_t);
        let zs = t.matvec(vars[self.whs.0], h_s);
        let z = t.add(t.add(t.add(zx, zt), zs), vars[self.b.0]);
        let i = t.sigmoid(t.slice1(z, 0, hsz));
        let ft = t.sigmoid(t.slice1(z, hsz, 2 * hsz));
        let fs = t.sigmoid(t.slice1(z, 2 * hsz, 3 * hsz));
        let g = t.tanh(t.slice1(z, 3 * hsz, 4 * hsz));
        let o = t.sigmoid(t.slice1(z, 4 * hsz, 5 * hsz));
        let c_new = t.add_n(&[t.mul(i, g), t.mul(ft, c_t), t.mul(fs, c_s)]);
        let h_new = t.mul(o, t.tanh(c_new));
        (h_new, c_new)
    }
}

/// 2-D convolution layer with per-output-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(
            format!("{prefix}.w"),
            xavier(rng, &[cout, cin, k, k], cin * k * k, cout * k * k),
        );
        let b = store.register(format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[cout])));
        Conv2dLayer { w, b, stride, pad }
    }

    pub fn apply(&self, t: &Tape, vars: &[Var], x: Var) -> Var {
        let y = t.conv2d(x, vars[self.w.0], self.stride, self.pad);
        t.add_chan_bias(y, vars[self.b.0])
    }
}

/// Transposed 2-D convolution layer with per-output-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvT2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub opad: usize,
}

impl ConvT2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        opad: usize,
    ) -> Self {
        let w = store.register(
            format!("{prefix}.w"),
            xavier(rng, &[cin, cout, k, k], cin * k * k, cout * k * k),
        );
        let b = store.register(format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[cout])));
        ConvT2dLayer { w, b, stride, pad, opad }
    }

    pub fn apply(&self, t: &Tape, vars: &[Var], x: Var) -> Var {
        let y = t.conv_t2d(x, vars[self.w.0], self.stride, self.pad, self.opad);
        t.add_chan_bias(y, vars[self.b.0])
    }
}

/// Per-channel affine normalization over spatial dims.
#[derive(Clone, Copy, Debug)]
pub struct InstanceNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        let gain = store.register(
            format!("{prefix}.gain"),
            ArrayD::from_elem(IxDyn(&[channels]), 1.0),
        );
        let bias = store.register(format!("{prefix}.bias"), ArrayD::zeros(IxDyn(&[channels])));
        InstanceNorm { gain, bias, eps: 1e-5 }
    }

    pub fn apply(&self, t: &Tape, vars: &[Var], x: Var) -> Var {
        let n = t.inst_norm(x, self.eps);
        let s = t.mul_chan_gain(n, vars[self.gain.0]);
        t.add_chan_bias(s, vars[self.bias.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::check;
    use ndarray::Array1;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn adam_moves_parameter_toward_minimum() {
        // one scalar parameter, loss (p - 3)^2
        let mut store = ParamStore::new();
        let id = store.register("p", ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let p = store.value(id)[[0]];
            let grad = vec![ArrayD::from_elem(IxDyn(&[1]), 2.0 * (p - 3.0))];
            opt.step(&mut store, &grad);
        }
        assert!((store.value(id)[[0]] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = vec![
            ArrayD::from_elem(IxDyn(&[2]), 3.0),
            ArrayD::from_elem(IxDyn(&[2]), 4.0),
        ];
        // norm = sqrt(2*9 + 2*16) = sqrt(50)
        let pre = clip_global_norm(&mut grads, 5.0);
        assert!((pre - 50f64.sqrt()).abs() < 1e-12);
        let post: f64 = grads
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!((post - 5.0).abs() < 1e-9);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads = vec![ArrayD::from_elem(IxDyn(&[3]), 0.1)];
        let before = grads[0].clone();
        clip_global_norm(&mut grads, 5.0);
        assert_eq!(grads[0], before);
    }

    #[test]
    fn lstm_cell_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, &mut rng, "lstm", 3, 4);
        let x0: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h0: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        let c0: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();

        // gradient w.r.t. the stacked input weight, through two time steps
        let wx_shape = store.value(cell.wx).shape().to_vec();
        let w0: Vec<f64> = store.value(cell.wx).iter().copied().collect();
        let eval = |ws: &[f64]| {
            let mut s2 = store.clone();
            *s2.value_mut(cell.wx) =
                ArrayD::from_shape_vec(IxDyn(&wx_shape), ws.to_vec()).unwrap();
            let t = Tape::new();
            let vars = s2.bind(&t);
            let x = t.leaf1(Array1::from_vec(x0.clone()));
            let h = t.leaf1(Array1::from_vec(h0.clone()));
            let c = t.leaf1(Array1::from_vec(c0.clone()));
            let (h1, c1) = cell.step(&t, &vars, x, h, c);
            let (h2, _) = cell.step(&t, &vars, x, h1, c1);
            t.scalar(t.dot(h2, h2))
        };
        let numeric = check::central_diff_grad(eval, &w0, 1e-6);

        let t = Tape::new();
        let vars = store.bind(&t);
        let x = t.leaf1(Array1::from_vec(x0.clone()));
        let h = t.leaf1(Array1::from_vec(h0.clone()));
        let c = t.leaf1(Array1::from_vec(c0.clone()));
        let (h1, c1) = cell.step(&t, &vars, x, h, c);
        let (h2, _) = cell.step(&t, &vars, x, h1, c1);
        let loss = t.dot(h2, h2);
        let grads = t.backward(loss);
        let analytic: Vec<f64> = grads
            .wrt_or_zero(vars[cell.wx.0], &wx_shape)
            .iter()
            .copied()
            .collect();
        let err = check::rel_error_norm(&analytic, &numeric);
        assert!(err < 1e-6, "lstm wx gradient rel err {err:.3e}");
    }

    #[test]
    fn st_lstm_cell_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut store = ParamStore::new();
        let cell = StLstmCell::new(&mut store, &mut rng, "st", 2, 3);
        let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-0.8..0.8)).collect()
        };
        let x0 = mk(&mut rng, 2);
        let ht0 = mk(&mut rng, 3);
        let ct0 = mk(&mut rng, 3);
        let hs0 = mk(&mut rng, 3);
        let cs0 = mk(&mut rng, 3);

        let whs_shape = store.value(cell.whs).shape().to_vec();
        let w0: Vec<f64> = store.value(cell.whs).iter().copied().collect();
        let eval = |ws: &[f64]| {
            let mut s2 = store.clone();
            *s2.value_mut(cell.whs) =
                ArrayD::from_shape_vec(IxDyn(&whs_shape), ws.to_vec()).unwrap();
            let t = Tape::new();
            let vars = s2.bind(&t);
            let x = t.leaf1(Array1::from_vec(x0.clone()));
            let ht = t.leaf1(Array1::from_vec(ht0.clone()));
            let ct = t.leaf1(Array1::from_vec(ct0.clone()));
            let hs = t.leaf1(Array1::from_vec(hs0.clone()));
            let cs = t.leaf1(Array1::from_vec(cs0.clone()));
            let (h1, c1) = cell.step(&t, &vars, x, ht, ct, hs, cs);
            // second step reuses the first output as the spatial predecessor
            let (h2, _) = cell.step(&t, &vars, x, ht, ct, h1, c1);
            t.scalar(t.dot(h2, h2))
        };
        let numeric = check::central_diff_grad(eval, &w0, 1e-6);

        let t = Tape::new();
        let vars = store.bind(&t);
        let x = t.leaf1(Array1::from_vec(x0.clone()));
        let ht = t.leaf1(Array1::from_vec(ht0.clone()));
        let ct = t.leaf1(Array1::from_vec(ct0.clone()));
        let hs = t.leaf1(Array1::from_vec(hs0.clone()));
        let cs = t.leaf1(Array1::from_vec(cs0.clone()));
        let (h1, c1) = cell.step(&t, &vars, x, ht, ct, hs, cs);
        let (h2, _) = cell.step(&t, &vars, x, ht, ct, h1, c1);
        let loss = t.dot(h2, h2);
        let grads = t.backward(loss);
        let analytic: Vec<f64> = grads
            .wrt_or_zero(vars[cell.whs.0], &whs_shape)
            .iter()
            .copied()
            .collect();
        let err = check::rel_error_norm(&analytic, &numeric);
        assert!(err < 1e-6, "st-lstm whs gradient rel err {err:.3e}");
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "head", 4, 2, true);
        assert_eq!(store.value(lin.w).shape(), &[2, 4]);
        assert_eq!(store.find("head.w"), Some(lin.w));
        assert_eq!(store.find("head.b"), lin.b);
        assert_eq!(store.find("missing"), None);
        let names: Vec<_> = store.iter().map(|p| p.name.clone()).collect();
        assert_eq!(names, vec!["head.w".to_string(), "head.b".to_string()]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_registration_panics() {
        let mut store = ParamStore::new();
        store.register("p", ArrayD::zeros(IxDyn(&[1])));
        store.register("p", ArrayD::zeros(IxDyn(&[1])));
    }
}
