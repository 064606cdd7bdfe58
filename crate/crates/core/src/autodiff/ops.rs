//! Primitive tape operations: forward construction and reverse rules.

use super::conv::{
    cmajor_to_nchw, col2im_add, im2col, max_pool, nchw_to_cmajor, ConvGeom,
};
use super::{AutodiffError, Node, Result, Scalar, Tape, Var};

/// Recorded operation with whatever the reverse rule needs saved.
pub enum Op<T> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// `[b, f] + [f]` or `[b, c, h, w] + [c]`.
    AddBias { a: usize, bias: usize, channels: usize, inner: usize },
    Scale { a: usize, c: T },
    AddScalar { a: usize },
    /// `x / s` with `s` a scalar node.
    DivScalarVar { a: usize, s: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom, cols: Vec<T> },
    /// Geometry is that of the equivalent forward conv (output -> input).
    ConvTranspose2d { x: usize, w: usize, geom: ConvGeom },
    MaxPool { x: usize, arg: Vec<u32> },
    Mean { a: usize },
    Sum { a: usize },
    Concat { a: usize, b: usize, outer: usize, lane_a: usize, lane_b: usize },
    Narrow { a: usize, outer: usize, lane_in: usize, start: usize, lane_out: usize },
    Reshape { a: usize },
    TileHw { a: usize, span: usize },
    Relu { a: usize },
    LeakyRelu { a: usize, alpha: T },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Abs { a: usize },
    Clamp { a: usize, lo: T, hi: T },
    Softmax { a: usize, outer: usize, axis_len: usize, inner: usize },
    LogSoftmax { a: usize, outer: usize, axis_len: usize, inner: usize },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        channels: usize,
        inner: usize,
        xhat: Vec<T>,
        invstd: Vec<T>,
        training: bool,
    },
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    fn node_shape(&self, v: Var) -> Vec<usize> {
        self.shape_of(v)
    }

    fn requires(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn values_of(&self, v: Var) -> Vec<T> {
        self.nodes.borrow()[v.0].values.clone()
    }

    fn emit(&self, shape: Vec<usize>, values: Vec<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = self.requires(parents);
        self.push(Node { shape, values, op, requires_grad })
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.node_shape(a);
        let sb = self.node_shape(b);
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape("add", a, b)?;
        let (va, vb) = (self.values_of(a), self.values_of(b));
        let out = va.iter().zip(&vb).map(|(x, y)| *x + *y).collect();
        Ok(self.emit(shape, out, Op::Add { a: a.0, b: b.0 }, &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape("sub", a, b)?;
        let (va, vb) = (self.values_of(a), self.values_of(b));
        let out = va.iter().zip(&vb).map(|(x, y)| *x - *y).collect();
        Ok(self.emit(shape, out, Op::Sub { a: a.0, b: b.0 }, &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape("mul", a, b)?;
        let (va, vb) = (self.values_of(a), self.values_of(b));
        let out = va.iter().zip(&vb).map(|(x, y)| *x * *y).collect();
        Ok(self.emit(shape, out, Op::Mul { a: a.0, b: b.0 }, &[a, b]))
    }

    /// Adds a per-feature bias: `[b, f] + [f]`, or per-channel on 4-D input.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.node_shape(a);
        let sb = self.node_shape(bias);
        let (channels, inner) = match sa.len() {
            2 => (sa[1], 1),
            4 => (sa[1], sa[2] * sa[3]),
            _ => {
                return Err(AutodiffError::BadShape {
                    op: "add_bias",
                    expected: "2-D or 4-D input".into(),
                    shape: sa,
                })
            }
        };
        if sb != [channels] {
            return Err(AutodiffError::ShapeMismatch { op: "add_bias", lhs: sa, rhs: sb });
        }
        let va = self.values_of(a);
        let vb = self.values_of(bias);
        let mut out = va;
        let lane = channels * inner;
        for chunk in out.chunks_mut(lane) {
            for c in 0..channels {
                let b = vb[c];
                for v in &mut chunk[c * inner..(c + 1) * inner] {
                    *v = *v + b;
                }
            }
        }
        Ok(self.emit(sa, out, Op::AddBias { a: a.0, bias: bias.0, channels, inner }, &[a, bias]))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let shape = self.node_shape(a);
        let out = self.values_of(a).iter().map(|x| *x * c).collect();
        self.emit(shape, out, Op::Scale { a: a.0, c }, &[a])
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let shape = self.node_shape(a);
        let out = self.values_of(a).iter().map(|x| *x + c).collect();
        self.emit(shape, out, Op::AddScalar { a: a.0 }, &[a])
    }

    /// Divides every element of `a` by the scalar node `s`.
    pub fn div_scalar_var(&self, a: Var, s: Var) -> Result<Var> {
        let ss = self.node_shape(s);
        if ss.iter().product::<usize>() != 1 {
            return Err(AutodiffError::BadShape {
                op: "div_scalar_var",
                expected: "scalar divisor".into(),
                shape: ss,
            });
        }
        let shape = self.node_shape(a);
        let d = self.value_scalar(s);
        let out = self.values_of(a).iter().map(|x| *x / d).collect();
        Ok(self.emit(shape, out, Op::DivScalarVar { a: a.0, s: s.0 }, &[a, s]))
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let sa = self.node_shape(a);
        let sb = self.node_shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.values_of(a), self.values_of(b));
        let mut out = vec![T::zero(); m * n];
        unsafe {
            T::gemm(
                m, k, n,
                T::one(),
                &va, k as isize, 1,
                &vb, n as isize, 1,
                T::zero(),
                &mut out, n as isize, 1,
            );
        }
        Ok(self.emit(vec![m, n], out, Op::Matmul { a: a.0, b: b.0, m, k, n }, &[a, b]))
    }

    /// `x: [b, ci, h, w]`, `w: [co, ci, kh, kw]`, zero padding `pad`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.node_shape(x);
        let sw = self.node_shape(w);
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(AutodiffError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        let geom = ConvGeom::forward(sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, pad)
            .ok_or_else(|| AutodiffError::Invalid {
                op: "conv2d",
                msg: format!("kernel {sw:?} does not fit input {sx:?} at stride {stride}, pad {pad}"),
            })?;
        let vx = self.values_of(x);
        let vw = self.values_of(w);
        let cols = im2col(&vx, &geom);
        let ckk = geom.c_in * geom.kh * geom.kw;
        let cols_w = geom.batch * geom.oh * geom.ow;
        let mut y2 = vec![T::zero(); geom.c_out * cols_w];
        unsafe {
            T::gemm(
                geom.c_out, ckk, cols_w,
                T::one(),
                &vw, ckk as isize, 1,
                &cols, cols_w as isize, 1,
                T::zero(),
                &mut y2, cols_w as isize, 1,
            );
        }
        let mut y = vec![T::zero(); geom.batch * geom.c_out * geom.oh * geom.ow];
        cmajor_to_nchw(&y2, geom.batch, geom.c_out, geom.oh * geom.ow, &mut y);
        let shape = vec![geom.batch, geom.c_out, geom.oh, geom.ow];
        Ok(self.emit(shape, y, Op::Conv2d { x: x.0, w: w.0, geom, cols }, &[x, w]))
    }

    /// Transposed conv: `x: [b, ci, h, w]`, `w: [ci, co, kh, kw]`,
    /// output spatial `(h-1)*stride - 2*pad + k`.
    pub fn conv2d_transpose(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.node_shape(x);
        let sw = self.node_shape(w);
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(AutodiffError::ShapeMismatch { op: "conv2d_transpose", lhs: sx, rhs: sw });
        }
        let (b, ci, hin, win) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[1], sw[2], sw[3]);
        let oh = (hin - 1) * stride + kh;
        let ow = (win - 1) * stride + kw;
        if oh < 2 * pad || ow < 2 * pad {
            return Err(AutodiffError::Invalid {
                op: "conv2d_transpose",
                msg: format!("padding {pad} exceeds output extent for input {sx:?}"),
            });
        }
        let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
        // Geometry of the conv that maps the big output back to x.
        let geom = ConvGeom::forward(b, co, oh, ow, ci, kh, kw, stride, pad).ok_or_else(|| {
            AutodiffError::Invalid {
                op: "conv2d_transpose",
                msg: format!("degenerate geometry for input {sx:?}, kernel {sw:?}"),
            }
        })?;
        if geom.oh != hin || geom.ow != win {
            return Err(AutodiffError::Invalid {
                op: "conv2d_transpose",
                msg: format!("stride {stride}, pad {pad} inconsistent with input {sx:?}"),
            });
        }
        let vx = self.values_of(x);
        let vw = self.values_of(w);
        let span_in = hin * win;
        let x2 = nchw_to_cmajor(&vx, b, ci, span_in); // [ci, b*span_in]
        let ckk = co * kh * kw;
        let cols_w = b * span_in;
        let mut g_cols = vec![T::zero(); ckk * cols_w];
        unsafe {
            // W^T [ckk, ci] @ x2 [ci, cols_w]
            T::gemm(
                ckk, ci, cols_w,
                T::one(),
                &vw, 1, ckk as isize,
                &x2, cols_w as isize, 1,
                T::zero(),
                &mut g_cols, cols_w as isize, 1,
            );
        }
        let mut y = vec![T::zero(); b * co * oh * ow];
        col2im_add(&g_cols, &geom, &mut y);
        Ok(self.emit(
            vec![b, co, oh, ow],
            y,
            Op::ConvTranspose2d { x: x.0, w: w.0, geom },
            &[x, w],
        ))
    }

    pub fn max_pool2d(&self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let sx = self.node_shape(x);
        if sx.len() != 4 || sx[2] < k || sx[3] < k {
            return Err(AutodiffError::BadShape {
                op: "max_pool2d",
                expected: format!("4-D input with spatial extent >= {k}"),
                shape: sx,
            });
        }
        let vx = self.values_of(x);
        let (y, arg, oh, ow) = max_pool(&vx, sx[0], sx[1], sx[2], sx[3], k, stride);
        Ok(self.emit(vec![sx[0], sx[1], oh, ow], y, Op::MaxPool { x: x.0, arg }, &[x]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let v = self.values_of(a);
        let n = T::from_f64(v.len() as f64);
        let s = v.iter().fold(T::zero(), |acc, x| acc + *x);
        self.emit(vec![1], vec![s / n], Op::Mean { a: a.0 }, &[a])
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = self.values_of(a);
        let s = v.iter().fold(T::zero(), |acc, x| acc + *x);
        self.emit(vec![1], vec![s], Op::Sum { a: a.0 }, &[a])
    }

    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.node_shape(a);
        let sb = self.node_shape(b);
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(AutodiffError::ShapeMismatch { op: "concat", lhs: sa, rhs: sb });
        }
        let (outer, la, inner) = lanes(&sa, axis);
        let lb = sb[axis];
        let (va, vb) = (self.values_of(a), self.values_of(b));
        let lane_a = la * inner;
        let lane_b = lb * inner;
        let mut out = vec![T::zero(); outer * (lane_a + lane_b)];
        for o in 0..outer {
            let dst = &mut out[o * (lane_a + lane_b)..(o + 1) * (lane_a + lane_b)];
            dst[..lane_a].copy_from_slice(&va[o * lane_a..(o + 1) * lane_a]);
            dst[lane_a..].copy_from_slice(&vb[o * lane_b..(o + 1) * lane_b]);
        }
        let mut shape = sa.clone();
        shape[axis] = la + lb;
        Ok(self.emit(shape, out, Op::Concat { a: a.0, b: b.0, outer, lane_a, lane_b }, &[a, b]))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.node_shape(a);
        if axis >= sa.len() || start + len > sa[axis] || len == 0 {
            return Err(AutodiffError::BadShape {
                op: "narrow",
                expected: format!("axis {axis}, range {start}..{} inside", start + len),
                shape: sa,
            });
        }
        let (outer, axis_len, inner) = lanes(&sa, axis);
        let lane_in = axis_len * inner;
        let lane_out = len * inner;
        let va = self.values_of(a);
        let mut out = vec![T::zero(); outer * lane_out];
        for o in 0..outer {
            out[o * lane_out..(o + 1) * lane_out].copy_from_slice(
                &va[o * lane_in + start * inner..o * lane_in + (start + len) * inner],
            );
        }
        let mut shape = sa.clone();
        shape[axis] = len;
        Ok(self.emit(
            shape,
            out,
            Op::Narrow { a: a.0, outer, lane_in, start: start * inner, lane_out },
            &[a],
        ))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let sa = self.node_shape(a);
        if shape.iter().product::<usize>() != sa.iter().product::<usize>() {
            return Err(AutodiffError::ShapeMismatch { op: "reshape", lhs: sa, rhs: shape });
        }
        let out = self.values_of(a);
        Ok(self.emit(shape, out, Op::Reshape { a: a.0 }, &[a]))
    }

    /// Broadcasts `[b, c]` spatially to `[b, c, h, w]`.
    pub fn tile_hw(&self, a: Var, h: usize, w: usize) -> Result<Var> {
        let sa = self.node_shape(a);
        if sa.len() != 2 {
            return Err(AutodiffError::BadShape {
                op: "tile_hw",
                expected: "2-D input".into(),
                shape: sa,
            });
        }
        let span = h * w;
        let va = self.values_of(a);
        let mut out = vec![T::zero(); va.len() * span];
        for (i, v) in va.iter().enumerate() {
            out[i * span..(i + 1) * span].fill(*v);
        }
        Ok(self.emit(vec![sa[0], sa[1], h, w], out, Op::TileHw { a: a.0, span }, &[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let shape = self.node_shape(a);
        let out = self.values_of(a).iter().map(|x| x.max(T::zero())).collect();
        self.emit(shape, out, Op::Relu { a: a.0 }, &[a])
    }

    pub fn leaky_relu(&self, a: Var, alpha: T) -> Var {
        let shape = self.node_shape(a);
        let out = self
            .values_of(a)
            .iter()
            .map(|x| if *x > T::zero() { *x } else { *x * alpha })
            .collect();
        self.emit(shape, out, Op::LeakyRelu { a: a.0, alpha }, &[a])
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let shape = self.node_shape(a);
        let one = T::one();
        let out = self.values_of(a).iter().map(|x| one / (one + (-*x).exp())).collect();
        self.emit(shape, out, Op::Sigmoid { a: a.0 }, &[a])
    }

    pub fn tanh(&self, a: Var) -> Var {
        let shape = self.node_shape(a);
        let out = self.values_of(a).iter().map(|x| x.tanh()).collect();
        self.emit(shape, out, Op::Tanh { a: a.0 }, &[a])
    }

    pub fn exp(&self, a: Var) -> Var {
        let shape = self.node_shape(a);
        let out = self.values_of(a).iter().map(|x| x.exp()).collect();
        self.emit(shape, out, Op::Exp { a: a.0 }, &[a])
    }

    pub fn log(&self, a: Var) -> Var {
        let shape = self.node_shape(a);
        let out = self.values_of(a).iter().map(|x| x.ln()).collect();
        self.emit(shape, out, Op::Log { a: a.0 }, &[a])
    }

    pub fn abs(&self, a: Var) -> Var {
        let shape = self.node_shape(a);
        let out = self.values_of(a).iter().map(|x| x.abs()).collect();
        self.emit(shape, out, Op::Abs { a: a.0 }, &[a])
    }

    /// Clamp with pass-through gradient inside `[lo, hi]`.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        let shape = self.node_shape(a);
        let out = self.values_of(a).iter().map(|x| x.max(lo).min(hi)).collect();
        self.emit(shape, out, Op::Clamp { a: a.0, lo, hi }, &[a])
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.node_shape(a);
        if axis >= sa.len() {
            return Err(AutodiffError::BadShape {
                op: "softmax",
                expected: format!("axis {axis} in range"),
                shape: sa,
            });
        }
        let (outer, axis_len, inner) = lanes(&sa, axis);
        let mut out = self.values_of(a);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * axis_len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..axis_len {
                    mx = mx.max(out[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..axis_len {
                    let e = (out[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..axis_len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        Ok(self.emit(sa, out, Op::Softmax { a: a.0, outer, axis_len, inner }, &[a]))
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.node_shape(a);
        if axis >= sa.len() {
            return Err(AutodiffError::BadShape {
                op: "log_softmax",
                expected: format!("axis {axis} in range"),
                shape: sa,
            });
        }
        let (outer, axis_len, inner) = lanes(&sa, axis);
        let mut out = self.values_of(a);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * axis_len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..axis_len {
                    mx = mx.max(out[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..axis_len {
                    z = z + (out[at(j)] - mx).exp();
                }
                let lse = mx + z.ln();
                for j in 0..axis_len {
                    out[at(j)] = out[at(j)] - lse;
                }
            }
        }
        Ok(self.emit(sa, out, Op::LogSoftmax { a: a.0, outer, axis_len, inner }, &[a]))
    }

    /// Batch normalization over the channel axis of `[b, c]` or `[b, c, h, w]`.
    ///
    /// Training mode (`running == None`) standardizes with batch statistics
    /// and returns them so the caller can maintain running averages; eval
    /// mode uses the supplied running statistics. Training requires batch
    /// size of at least 2.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let sx = self.node_shape(x);
        let (channels, inner) = match sx.len() {
            2 => (sx[1], 1),
            4 => (sx[1], sx[2] * sx[3]),
            _ => {
                return Err(AutodiffError::BadShape {
                    op: "batch_norm",
                    expected: "2-D or 4-D input".into(),
                    shape: sx,
                })
            }
        };
        let batch = sx[0];
        let training = running.is_none();
        if training && batch < 2 {
            return Err(AutodiffError::Invalid {
                op: "batch_norm",
                msg: format!("training mode requires batch >= 2, got {batch}"),
            });
        }
        let sg = self.node_shape(gamma);
        if sg != [channels] || self.node_shape(beta) != [channels] {
            return Err(AutodiffError::ShapeMismatch { op: "batch_norm", lhs: sx, rhs: sg });
        }
        let vx = self.values_of(x);
        let vg = self.values_of(gamma);
        let vb = self.values_of(beta);
        let n_per = T::from_f64((batch * inner) as f64);

        let (mean, var): (Vec<T>, Vec<T>) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => {
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let lane = &vx[(b * channels + c) * inner..(b * channels + c + 1) * inner];
                        for v in lane {
                            mean[c] = mean[c] + *v;
                        }
                    }
                }
                for m in &mut mean {
                    *m = *m / n_per;
                }
                for b in 0..batch {
                    for c in 0..channels {
                        let lane = &vx[(b * channels + c) * inner..(b * channels + c + 1) * inner];
                        for v in lane {
                            let d = *v - mean[c];
                            var[c] = var[c] + d * d;
                        }
                    }
                }
                for v in &mut var {
                    *v = *v / n_per;
                }
                (mean, var)
            }
        };

        let invstd: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); vx.len()];
        let mut out = vec![T::zero(); vx.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * inner;
                for i in 0..inner {
                    let h = (vx[base + i] - mean[c]) * invstd[c];
                    xhat[base + i] = h;
                    out[base + i] = h * vg[c] + vb[c];
                }
            }
        }
        let stats = if training { Some((mean, var)) } else { None };
        let v = self.emit(
            sx,
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                channels,
                inner,
                xhat,
                invstd,
                training,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }
}

fn acc<T: Scalar>(grads: &mut [Vec<T>], idx: usize, f: impl FnOnce(&mut Vec<T>)) {
    if !grads[idx].is_empty() {
        f(&mut grads[idx]);
    }
}

/// Applies the reverse rule of node `i`, pushing `g` into its parents.
pub(crate) fn backward_step<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Vec<T>],
    i: usize,
    g: &[T],
) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            acc(grads, *a, |d| add_into(d, g));
            acc(grads, *b, |d| add_into(d, g));
        }
        Op::Sub { a, b } => {
            acc(grads, *a, |d| add_into(d, g));
            acc(grads, *b, |d| {
                for (x, y) in d.iter_mut().zip(g) {
                    *x = *x - *y;
                }
            });
        }
        Op::Mul { a, b } => {
            let (va, vb) = (&nodes[*a].values, &nodes[*b].values);
            acc(grads, *a, |d| {
                for ((x, y), z) in d.iter_mut().zip(g).zip(vb) {
                    *x = *x + *y * *z;
                }
            });
            acc(grads, *b, |d| {
                for ((x, y), z) in d.iter_mut().zip(g).zip(va) {
                    *x = *x + *y * *z;
                }
            });
        }
        Op::AddBias { a, bias, channels, inner } => {
            acc(grads, *a, |d| add_into(d, g));
            acc(grads, *bias, |d| {
                let lane = channels * inner;
                for chunk in g.chunks(lane) {
                    for c in 0..*channels {
                        let mut s = T::zero();
                        for v in &chunk[c * inner..(c + 1) * inner] {
                            s = s + *v;
                        }
                        d[c] = d[c] + s;
                    }
                }
            });
        }
        Op::Scale { a, c } => {
            acc(grads, *a, |d| {
                for (x, y) in d.iter_mut().zip(g) {
                    *x = *x + *y * *c;
                }
            });
        }
        Op::AddScalar { a } => {
            acc(grads, *a, |d| add_into(d, g));
        }
        Op::DivScalarVar { a, s } => {
            let sv = nodes[*s].values[0];
            let va = &nodes[*a].values;
            acc(grads, *a, |d| {
                for (x, y) in d.iter_mut().zip(g) {
                    *x = *x + *y / sv;
                }
            });
            acc(grads, *s, |d| {
                let mut dot = T::zero();
                for (y, x) in g.iter().zip(va) {
                    dot = dot + *y * *x;
                }
                d[0] = d[0] - dot / (sv * sv);
            });
        }
        Op::Matmul { a, b, m, k, n } => {
            let (va, vb) = (&nodes[*a].values, &nodes[*b].values);
            let (m, k, n) = (*m, *k, *n);
            acc(grads, *a, |d| unsafe {
                // dA += G @ B^T
                T::gemm(
                    m, n, k,
                    T::one(),
                    g, n as isize, 1,
                    vb, 1, n as isize,
                    T::one(),
                    d, k as isize, 1,
                );
            });
            acc(grads, *b, |d| unsafe {
                // dB += A^T @ G
                T::gemm(
                    k, m, n,
                    T::one(),
                    va, 1, k as isize,
                    g, n as isize, 1,
                    T::one(),
                    d, n as isize, 1,
                );
            });
        }
        Op::Conv2d { x, w, geom, cols } => {
            let ckk = geom.c_in * geom.kh * geom.kw;
            let cols_w = geom.batch * geom.oh * geom.ow;
            let mut g2 = vec![T::zero(); geom.c_out * cols_w];
            let g2_src = nchw_to_cmajor(g, geom.batch, geom.c_out, geom.oh * geom.ow);
            g2.copy_from_slice(&g2_src);
            let vw = &nodes[*w].values;
            acc(grads, *w, |d| unsafe {
                // dW += G2 @ cols^T
                T::gemm(
                    geom.c_out, cols_w, ckk,
                    T::one(),
                    &g2, cols_w as isize, 1,
                    cols, 1, cols_w as isize,
                    T::one(),
                    d, ckk as isize, 1,
                );
            });
            acc(grads, *x, |d| {
                let mut dcols = vec![T::zero(); ckk * cols_w];
                unsafe {
                    // dcols = W^T @ G2
                    T::gemm(
                        ckk, geom.c_out, cols_w,
                        T::one(),
                        vw, 1, ckk as isize,
                        &g2, cols_w as isize, 1,
                        T::zero(),
                        &mut dcols, cols_w as isize, 1,
                    );
                }
                col2im_add(&dcols, geom, d);
            });
        }
        Op::ConvTranspose2d { x, w, geom } => {
            // geom describes the conv mapping the big output back to x:
            // c_in = co of the deconv, c_out = ci, (oh, ow) = x spatial.
            let ci = geom.c_out;
            let ckk = geom.c_in * geom.kh * geom.kw;
            let span_in = geom.oh * geom.ow;
            let cols_w = geom.batch * span_in;
            let g_cols = im2col(g, geom); // [ckk, b*span_in]
            let vw = &nodes[*w].values;
            let vx = &nodes[*x].values;
            acc(grads, *x, |d| {
                let mut dx2 = vec![T::zero(); ci * cols_w];
                unsafe {
                    // dX2 = W [ci, ckk] @ g_cols
                    T::gemm(
                        ci, ckk, cols_w,
                        T::one(),
                        vw, ckk as isize, 1,
                        &g_cols, cols_w as isize, 1,
                        T::zero(),
                        &mut dx2, cols_w as isize, 1,
                    );
                }
                let mut dx = vec![T::zero(); d.len()];
                cmajor_to_nchw(&dx2, geom.batch, ci, span_in, &mut dx);
                add_into(d, &dx);
            });
            acc(grads, *w, |d| {
                let x2 = nchw_to_cmajor(vx, geom.batch, ci, span_in);
                unsafe {
                    // dW += X2 @ g_cols^T
                    T::gemm(
                        ci, cols_w, ckk,
                        T::one(),
                        &x2, cols_w as isize, 1,
                        &g_cols, 1, cols_w as isize,
                        T::one(),
                        d, ckk as isize, 1,
                    );
                }
            });
        }
        Op::MaxPool { x, arg } => {
            acc(grads, *x, |d| {
                for (gi, at) in g.iter().zip(arg) {
                    d[*at as usize] = d[*at as usize] + *gi;
                }
            });
        }
        Op::Mean { a } => {
            acc(grads, *a, |d| {
                let s = g[0] / T::from_f64(d.len() as f64);
                for x in d.iter_mut() {
                    *x = *x + s;
                }
            });
        }
        Op::Sum { a } => {
            acc(grads, *a, |d| {
                for x in d.iter_mut() {
                    *x = *x + g[0];
                }
            });
        }
        Op::Concat { a, b, outer, lane_a, lane_b } => {
            let lane = lane_a + lane_b;
            acc(grads, *a, |d| {
                for o in 0..*outer {
                    for (x, y) in d[o * lane_a..(o + 1) * lane_a]
                        .iter_mut()
                        .zip(&g[o * lane..o * lane + lane_a])
                    {
                        *x = *x + *y;
                    }
                }
            });
            acc(grads, *b, |d| {
                for o in 0..*outer {
                    for (x, y) in d[o * lane_b..(o + 1) * lane_b]
                        .iter_mut()
                        .zip(&g[o * lane + lane_a..(o + 1) * lane])
                    {
                        *x = *x + *y;
                    }
                }
            });
        }
        Op::Narrow { a, outer, lane_in, start, lane_out } => {
            acc(grads, *a, |d| {
                for o in 0..*outer {
                    for (x, y) in d[o * lane_in + start..o * lane_in + start + lane_out]
                        .iter_mut()
                        .zip(&g[o * lane_out..(o + 1) * lane_out])
                    {
                        *x = *x + *y;
                    }
                }
            });
        }
        Op::Reshape { a } => {
            acc(grads, *a, |d| add_into(d, g));
        }
        Op::TileHw { a, span } => {
            acc(grads, *a, |d| {
                for (i, x) in d.iter_mut().enumerate() {
                    let mut s = T::zero();
                    for v in &g[i * span..(i + 1) * span] {
                        s = s + *v;
                    }
                    *x = *x + s;
                }
            });
        }
        Op::Relu { a } => {
            let va = &nodes[*a].values;
            acc(grads, *a, |d| {
                for ((x, y), v) in d.iter_mut().zip(g).zip(va) {
                    if *v > T::zero() {
                        *x = *x + *y;
                    }
                }
            });
        }
        Op::LeakyRelu { a, alpha } => {
            let va = &nodes[*a].values;
            acc(grads, *a, |d| {
                for ((x, y), v) in d.iter_mut().zip(g).zip(va) {
                    *x = *x + if *v > T::zero() { *y } else { *y * *alpha };
                }
            });
        }
        Op::Sigmoid { a } => {
            let vy = &node.values;
            acc(grads, *a, |d| {
                for ((x, gy), y) in d.iter_mut().zip(g).zip(vy) {
                    *x = *x + *gy * *y * (T::one() - *y);
                }
            });
        }
        Op::Tanh { a } => {
            let vy = &node.values;
            acc(grads, *a, |d| {
                for ((x, gy), y) in d.iter_mut().zip(g).zip(vy) {
                    *x = *x + *gy * (T::one() - *y * *y);
                }
            });
        }
        Op::Exp { a } => {
            let vy = &node.values;
            acc(grads, *a, |d| {
                for ((x, gy), y) in d.iter_mut().zip(g).zip(vy) {
                    *x = *x + *gy * *y;
                }
            });
        }
        Op::Log { a } => {
            let va = &nodes[*a].values;
            acc(grads, *a, |d| {
                for ((x, gy), v) in d.iter_mut().zip(g).zip(va) {
                    *x = *x + *gy / *v;
                }
            });
        }
        Op::Abs { a } => {
            let va = &nodes[*a].values;
            acc(grads, *a, |d| {
                for ((x, gy), v) in d.iter_mut().zip(g).zip(va) {
                    if *v > T::zero() {
                        *x = *x + *gy;
                    } else if *v < T::zero() {
                        *x = *x - *gy;
                    }
                }
            });
        }
        Op::Clamp { a, lo, hi } => {
            let va = &nodes[*a].values;
            acc(grads, *a, |d| {
                for ((x, gy), v) in d.iter_mut().zip(g).zip(va) {
                    if *v >= *lo && *v <= *hi {
                        *x = *x + *gy;
                    }
                }
            });
        }
        Op::Softmax { a, outer, axis_len, inner } => {
            let vy = &node.values;
            acc(grads, *a, |d| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * axis_len + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..*axis_len {
                            dot = dot + g[at(j)] * vy[at(j)];
                        }
                        for j in 0..*axis_len {
                            let k = at(j);
                            d[k] = d[k] + vy[k] * (g[k] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { a, outer, axis_len, inner } => {
            let vy = &node.values;
            acc(grads, *a, |d| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * axis_len + j) * inner + i;
                        let mut gsum = T::zero();
                        for j in 0..*axis_len {
                            gsum = gsum + g[at(j)];
                        }
                        for j in 0..*axis_len {
                            let k = at(j);
                            d[k] = d[k] + g[k] - vy[k].exp() * gsum;
                        }
                    }
                }
            });
        }
        Op::BatchNorm { x, gamma, beta, channels, inner, xhat, invstd, training } => {
            let vg = &nodes[*gamma].values;
            let total = xhat.len();
            let batch = total / (channels * inner);
            acc(grads, *beta, |d| {
                for bi in 0..batch {
                    #[allow(clippy::needless_range_loop)]
                    for c in 0..*channels {
                        let base = (bi * channels + c) * inner;
                        let mut s = T::zero();
                        for v in &g[base..base + inner] {
                            s = s + *v;
                        }
                        d[c] = d[c] + s;
                    }
                }
            });
            acc(grads, *gamma, |d| {
                for bi in 0..batch {
                    #[allow(clippy::needless_range_loop)]
                    for c in 0..*channels {
                        let base = (bi * channels + c) * inner;
                        let mut s = T::zero();
                        for i in 0..*inner {
                            s = s + g[base + i] * xhat[base + i];
                        }
                        d[c] = d[c] + s;
                    }
                }
            });
            acc(grads, *x, |d| {
                if *training {
                    // Batch statistics depend on x; full reverse rule.
                    let n = T::from_f64((batch * inner) as f64);
                    let mut gsum = vec![T::zero(); *channels];
                    let mut gdot = vec![T::zero(); *channels];
                    for bi in 0..batch {
                        for c in 0..*channels {
                            let base = (bi * channels + c) * inner;
                            for i in 0..*inner {
                                gsum[c] = gsum[c] + g[base + i];
                                gdot[c] = gdot[c] + g[base + i] * xhat[base + i];
                            }
                        }
                    }
                    for bi in 0..batch {
                        for c in 0..*channels {
                            let base = (bi * channels + c) * inner;
                            let coef = vg[c] * invstd[c] / n;
                            for i in 0..*inner {
                                let term = n * g[base + i] - gsum[c] - xhat[base + i] * gdot[c];
                                d[base + i] = d[base + i] + coef * term;
                            }
                        }
                    }
                } else {
                    for bi in 0..batch {
                        for c in 0..*channels {
                            let base = (bi * channels + c) * inner;
                            let coef = vg[c] * invstd[c];
                            for i in 0..*inner {
                                d[base + i] = d[base + i] + coef * g[base + i];
                            }
                        }
                    }
                }
            });
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x = *x + *y;
    }
}
