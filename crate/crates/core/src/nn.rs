//! Parameter storage and the layers used by the networks.
//!
//! Parameters live off-tape in a [`ParamSet`]. Each training step leases
//! them onto a fresh tape as leaves; a predicate decides which leaves are
//! differentiable, which is how alternating phases freeze sub-networks
//! without touching the layers themselves.

use std::collections::BTreeMap;

use crate::autodiff::{Result, Scalar, Tape, Tensor, Var};
use crate::rng::Stream;

/// What a named entry in a [`ParamSet`] is.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    /// Weight that is leased onto the tape. `trainable = false` leaves it
    /// on the tape as a constant (frozen network).
    Weight { trainable: bool },
    /// Buffer maintained outside the tape (running stats, power-iteration
    /// vectors). Never leased, still checkpointed.
    Stat,
}

pub struct Param<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named tensors, ordered by name so iteration is deterministic.
pub struct ParamSet<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) {
        let prev = self.entries.insert(name.to_string(), Param { value, kind });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.entries.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}")).value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total scalar count across weights (stats excluded).
    pub fn weight_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| matches!(p.kind, ParamKind::Weight { .. }))
            .map(|p| p.value.values().len())
            .sum()
    }

    /// Marks every weight whose name passes the predicate trainable and
    /// the rest frozen.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.entries.iter_mut() {
            if let ParamKind::Weight { trainable } = &mut p.kind {
                *trainable = pred(name);
            }
        }
    }

    /// Copies every weight onto the tape. Differentiability follows the
    /// stored `trainable` flag.
    pub fn lease(&self, tape: &Tape<T>) -> Lease {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.entries {
            if let ParamKind::Weight { trainable } = p.kind {
                vars.insert(name.clone(), tape.leaf(p.value.clone(), trainable));
            }
        }
        Lease { vars }
    }

    /// Accumulated leaf gradients for every trainable weight, keyed by name.
    pub fn grads(&self, tape: &Tape<T>, lease: &Lease) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, p) in &self.entries {
            if let ParamKind::Weight { trainable: true } = p.kind {
                out.insert(name.clone(), tape.grad(lease.var(name)));
                let _ = p;
            }
        }
        out
    }
}

/// Tape handles for one step's leased weights.
pub struct Lease {
    vars: BTreeMap<String, Var>,
}

impl Lease {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not leased"))
    }
}

// ---------------------------------------------------------------------------
// Initialization

pub fn glorot_uniform<T: Scalar>(
    rng: &mut Stream,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..n).map(|_| T::from_f64(rng.uniform_in(-bound, bound))).collect();
    Tensor::from_vec(shape, values)
}

pub fn normal_init<T: Scalar>(rng: &mut Stream, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::from_vec(shape, values)
}

// ---------------------------------------------------------------------------
// Layers

pub struct Linear {
    w: String,
    b: String,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Stream,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        ps.insert(&w, glorot_uniform(rng, vec![fan_in, fan_out], fan_in, fan_out), TRAIN);
        ps.insert(&b, Tensor::zeros(vec![fan_out]), TRAIN);
        Self { w, b }
    }

    pub fn apply<T: Scalar>(&self, t: &Tape<T>, lease: &Lease, x: Var) -> Result<Var> {
        let y = t.matmul(x, lease.var(&self.w))?;
        t.add_bias(y, lease.var(&self.b))
    }
}

const TRAIN: ParamKind = ParamKind::Weight { trainable: true };

/// One LSTM cell; gate order in the packed weight is (i, f, g, o).
pub struct LstmCell {
    w_ih: String,
    w_hh: String,
    b: String,
    hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut Stream,
    ) -> Self {
        let w_ih = format!("{name}.w_ih");
        let w_hh = format!("{name}.w_hh");
        let b = format!("{name}.b");
        ps.insert(&w_ih, glorot_uniform(rng, vec![input, 4 * hidden], input, hidden), TRAIN);
        ps.insert(&w_hh, glorot_uniform(rng, vec![hidden, 4 * hidden], hidden, hidden), TRAIN);
        // Forget-gate bias starts at 1 so early training does not flush state.
        let mut bias = vec![T::zero(); 4 * hidden];
        bias[hidden..2 * hidden].fill(T::one());
        ps.insert(&b, Tensor::from_vec(vec![4 * hidden], bias), TRAIN);
        Self { w_ih, w_hh, b, hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Zero state `(h, c)` for a batch.
    pub fn zero_state<T: Scalar>(&self, t: &Tape<T>, batch: usize) -> (Var, Var) {
        let z = Tensor::zeros(vec![batch, self.hidden]);
        (t.constant(z.clone()), t.constant(z))
    }

    pub fn step<T: Scalar>(
        &self,
        t: &Tape<T>,
        lease: &Lease,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let gx = t.matmul(x, lease.var(&self.w_ih))?;
        let gh = t.matmul(h, lease.var(&self.w_hh))?;
        let gates = t.add_bias(t.add(gx, gh)?, lease.var(&self.b))?;
        let hs = self.hidden;
        let i = t.sigmoid(t.narrow(gates, 1, 0, hs)?);
        let f = t.sigmoid(t.narrow(gates, 1, hs, hs)?);
        let g = t.tanh(t.narrow(gates, 1, 2 * hs, hs)?);
        let o = t.sigmoid(t.narrow(gates, 1, 3 * hs, hs)?);
        let c_next = t.add(t.mul(f, c)?, t.mul(i, g)?)?;
        let h_next = t.mul(o, t.tanh(c_next))?;
        Ok((h_next, c_next))
    }
}

/// Bidirectional LSTM; `encode` returns the concatenated final hidden
/// states of both directions, `[batch, 2 * hidden]`.
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstm {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut Stream,
    ) -> Self {
        Self {
            fwd: LstmCell::new(ps, &format!("{name}.fwd"), input, hidden, rng),
            bwd: LstmCell::new(ps, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    /// `xs` holds one `[batch, input]` var per time step.
    pub fn encode<T: Scalar>(
        &self,
        t: &Tape<T>,
        lease: &Lease,
        xs: &[Var],
        batch: usize,
    ) -> Result<Var> {
        let (mut hf, mut cf) = self.fwd.zero_state(t, batch);
        for &x in xs {
            (hf, cf) = self.fwd.step(t, lease, x, hf, cf)?;
        }
        let (mut hb, mut cb) = self.bwd.zero_state(t, batch);
        for &x in xs.iter().rev() {
            (hb, cb) = self.bwd.step(t, lease, x, hb, cb)?;
        }
        t.concat(hf, hb, 1)
    }
}

pub struct Conv2d {
    w: String,
    b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Stream,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        ps.insert(&w, normal_init(rng, vec![c_out, c_in, k, k], 0.02), TRAIN);
        ps.insert(&b, Tensor::zeros(vec![c_out]), TRAIN);
        Self { w, b, stride, pad }
    }

    pub fn apply<T: Scalar>(&self, t: &Tape<T>, lease: &Lease, x: Var) -> Result<Var> {
        let y = t.conv2d(x, lease.var(&self.w), self.stride, self.pad)?;
        t.add_bias(y, lease.var(&self.b))
    }
}

pub struct ConvTranspose2d {
    w: String,
    b: String,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Stream,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        ps.insert(&w, normal_init(rng, vec![c_in, c_out, k, k], 0.02), TRAIN);
        ps.insert(&b, Tensor::zeros(vec![c_out]), TRAIN);
        Self { w, b, stride, pad }
    }

    pub fn apply<T: Scalar>(&self, t: &Tape<T>, lease: &Lease, x: Var) -> Result<Var> {
        let y = t.conv2d_transpose(x, lease.var(&self.w), self.stride, self.pad)?;
        t.add_bias(y, lease.var(&self.b))
    }
}

/// Batch normalization over channels with running statistics.
pub struct BatchNorm {
    gamma: String,
    beta: String,
    mean: String,
    var: String,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        let mean = format!("{name}.mean");
        let var = format!("{name}.var");
        ps.insert(&gamma, Tensor::filled(vec![channels], T::one()), TRAIN);
        ps.insert(&beta, Tensor::zeros(vec![channels]), TRAIN);
        ps.insert(&mean, Tensor::zeros(vec![channels]), ParamKind::Stat);
        ps.insert(&var, Tensor::filled(vec![channels], T::one()), ParamKind::Stat);
        Self { gamma, beta, mean, var, momentum: 0.1, eps: 1e-5 }
    }

    /// Training mode uses batch statistics and folds them into the running
    /// averages stored in `ps`; eval mode reads the running averages.
    pub fn apply<T: Scalar>(
        &self,
        t: &Tape<T>,
        lease: &Lease,
        ps: &mut ParamSet<T>,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let gamma = lease.var(&self.gamma);
        let beta = lease.var(&self.beta);
        let eps = T::from_f64(self.eps);
        if training {
            let (y, stats) = t.batch_norm(x, gamma, beta, None, eps)?;
            let (bm, bv) = stats.expect("training mode returns batch stats");
            let m = T::from_f64(self.momentum);
            let keep = T::one() - m;
            for (r, b) in ps.get_mut(&self.mean).values_mut().iter_mut().zip(&bm) {
                *r = *r * keep + *b * m;
            }
            for (r, b) in ps.get_mut(&self.var).values_mut().iter_mut().zip(&bv) {
                *r = *r * keep + *b * m;
            }
            Ok(y)
        } else {
            let rm = ps.get(&self.mean).values().to_vec();
            let rv = ps.get(&self.var).values().to_vec();
            let (y, _) = t.batch_norm(x, gamma, beta, Some((&rm, &rv)), eps)?;
            Ok(y)
        }
    }
}

// ---------------------------------------------------------------------------
// Spectral normalization

fn l2_normalize<T: Scalar>(v: &mut [T]) {
    let mut s = T::zero();
    for x in v.iter() {
        s = s + *x * *x;
    }
    let inv = T::one() / (s.sqrt() + T::from_f64(1e-12));
    for x in v.iter_mut() {
        *x = *x * inv;
    }
}

/// Power iteration on `w` viewed as `[rows, cols]`. Updates `u` in place
/// and returns the singular-value estimate with its right vector.
pub fn power_iteration<T: Scalar>(
    w: &[T],
    rows: usize,
    cols: usize,
    u: &mut [T],
    iters: usize,
) -> (T, Vec<T>) {
    assert_eq!(w.len(), rows * cols);
    assert_eq!(u.len(), rows);
    let mut v = vec![T::zero(); cols];
    for _ in 0..iters.max(1) {
        // v = normalize(W^T u)
        for (j, vj) in v.iter_mut().enumerate() {
            let mut s = T::zero();
            for i in 0..rows {
                s = s + w[i * cols + j] * u[i];
            }
            *vj = s;
        }
        l2_normalize(&mut v);
        // u = normalize(W v)
        for (i, ui) in u.iter_mut().enumerate() {
            let mut s = T::zero();
            for j in 0..cols {
                s = s + w[i * cols + j] * v[j];
            }
            *ui = s;
        }
        l2_normalize(u);
    }
    let mut sigma = T::zero();
    for i in 0..rows {
        let mut s = T::zero();
        for j in 0..cols {
            s = s + w[i * cols + j] * v[j];
        }
        sigma = sigma + u[i] * s;
    }
    (sigma, v)
}

/// Stride-2 conv whose weight is divided by its spectral norm estimate.
/// The division happens on the tape so the constraint shapes the weight
/// gradient as well as the forward pass.
pub struct SnConv2d {
    w: String,
    b: String,
    u: String,
    pub stride: usize,
    pub pad: usize,
}

impl SnConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Stream,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        let u = format!("{name}.u");
        ps.insert(&w, normal_init(rng, vec![c_out, c_in, k, k], 0.02), TRAIN);
        ps.insert(&b, Tensor::zeros(vec![c_out]), TRAIN);
        let mut u0 = normal_init::<T>(rng, vec![c_out], 1.0);
        l2_normalize(u0.values_mut());
        ps.insert(&u, u0, ParamKind::Stat);
        Self { w, b, u, stride, pad }
    }

    /// `iters` power-iteration rounds against the current weight; training
    /// uses 1 with the persistent `u`, tests can pass enough to converge.
    /// The updated `u` is written back when `persist` is set.
    pub fn apply<T: Scalar>(
        &self,
        t: &Tape<T>,
        lease: &Lease,
        ps: &mut ParamSet<T>,
        x: Var,
        iters: usize,
        persist: bool,
    ) -> Result<Var> {
        let w = lease.var(&self.w);
        let shape = ps.get(&self.w).shape().to_vec();
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        let mut u = ps.get(&self.u).values().to_vec();
        let (_, v) = power_iteration(ps.get(&self.w).values(), rows, cols, &mut u, iters);
        if persist {
            ps.get_mut(&self.u).values_mut().copy_from_slice(&u);
        }
        // sigma = u^T (W v) built from tape ops so d(sigma)/dW flows.
        let w2 = t.reshape(w, vec![rows, cols])?;
        let u_row = t.constant(Tensor::from_vec(vec![1, rows], u));
        let v_col = t.constant(Tensor::from_vec(vec![cols, 1], v));
        let wv = t.matmul(w2, v_col)?;
        let sigma = t.matmul(u_row, wv)?;
        let w_sn = t.div_scalar_var(w, sigma)?;
        let y = t.conv2d(x, w_sn, self.stride, self.pad)?;
        t.add_bias(y, lease.var(&self.b))
    }

    /// Converged spectral-norm estimate of the stored weight.
    pub fn sigma<T: Scalar>(&self, ps: &ParamSet<T>) -> T {
        converged_sigma(ps, &self.w, &self.u)
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }
}

fn converged_sigma<T: Scalar>(ps: &ParamSet<T>, w: &str, u: &str) -> T {
    let shape = ps.get(w).shape().to_vec();
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let mut u = ps.get(u).values().to_vec();
    let (sigma, _) = power_iteration(ps.get(w).values(), rows, cols, &mut u, 200);
    sigma
}

/// Fully connected layer under the same on-tape spectral constraint as
/// [`SnConv2d`].
pub struct SnLinear {
    w: String,
    b: String,
    u: String,
}

impl SnLinear {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Stream,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        let u = format!("{name}.u");
        ps.insert(&w, glorot_uniform(rng, vec![fan_in, fan_out], fan_in, fan_out), TRAIN);
        ps.insert(&b, Tensor::zeros(vec![fan_out]), TRAIN);
        let mut u0 = normal_init::<T>(rng, vec![fan_in], 1.0);
        l2_normalize(u0.values_mut());
        ps.insert(&u, u0, ParamKind::Stat);
        Self { w, b, u }
    }

    pub fn apply<T: Scalar>(
        &self,
        t: &Tape<T>,
        lease: &Lease,
        ps: &mut ParamSet<T>,
        x: Var,
        iters: usize,
        persist: bool,
    ) -> Result<Var> {
        let w = lease.var(&self.w);
        let shape = ps.get(&self.w).shape().to_vec();
        let (rows, cols) = (shape[0], shape[1]);
        let mut u = ps.get(&self.u).values().to_vec();
        let (_, v) = power_iteration(ps.get(&self.w).values(), rows, cols, &mut u, iters);
        if persist {
            ps.get_mut(&self.u).values_mut().copy_from_slice(&u);
        }
        let u_row = t.constant(Tensor::from_vec(vec![1, rows], u));
        let v_col = t.constant(Tensor::from_vec(vec![cols, 1], v));
        let sigma = t.matmul(u_row, t.matmul(w, v_col)?)?;
        let w_sn = t.div_scalar_var(w, sigma)?;
        let y = t.matmul(x, w_sn)?;
        t.add_bias(y, lease.var(&self.b))
    }

    pub fn sigma<T: Scalar>(&self, ps: &ParamSet<T>) -> T {
        converged_sigma(ps, &self.w, &self.u)
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }
}
