//! The six networks. Structs hold parameter names and wiring only; every
//! forward runs on a caller-provided tape over leased weights, so one
//! parameter set serves training, evaluation, and gradient checking.

use super::{Caption, ModelConfig, ModelError, Result, BOS, EOS};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::nn::{
    normal_init, BatchNorm, BiLstm, Conv2d, ConvTranspose2d, Lease, Linear, LstmCell, ParamKind,
    ParamSet, SnConv2d, SnLinear,
};
use crate::rng::Stream;
use crate::sampling::gumbel_softmax;

fn embed_table<T: Scalar>(ps: &mut ParamSet<T>, name: &str, vocab: usize, dim: usize, rng: &mut Stream) -> String {
    let full = format!("{name}.embed");
    ps.insert(&full, normal_init(rng, vec![vocab, dim], 0.1), ParamKind::Weight { trainable: true });
    full
}

// ---------------------------------------------------------------------------
// Image encoder (frozen feature extractor + attribute classifier)

/// Three conv+pool blocks and a final pool, so the flattened feature width
/// is `c3 * (S/16)^2`. The classifier heads exist for pretraining and the
/// inception-score stand-in; features come from the pooled conv stack.
pub struct ImageEncoder {
    conv: [Conv2d; 3],
    pub shape_head: Linear,
    pub color_head: Linear,
    pub size_head: Linear,
}

impl ImageEncoder {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut Stream) -> Self {
        let [c1, c2, c3] = cfg.fie_channels;
        let conv = [
            Conv2d::new(ps, "fie.conv1", 3, c1, 3, 1, 1, rng),
            Conv2d::new(ps, "fie.conv2", c1, c2, 3, 1, 1, rng),
            Conv2d::new(ps, "fie.conv3", c2, c3, 3, 1, 1, rng),
        ];
        let feat = cfg.feature_dim();
        Self {
            conv,
            shape_head: Linear::new(ps, "fie.shape", feat, cfg.num_shapes, rng),
            color_head: Linear::new(ps, "fie.color", feat, cfg.num_colors, rng),
            size_head: Linear::new(ps, "fie.size", feat, cfg.num_sizes, rng),
        }
    }

    /// Flattened final-pool activations, `[batch, feature_dim]`.
    pub fn features<T: Scalar>(&self, t: &Tape<T>, lease: &Lease, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.conv {
            h = t.relu(conv.apply(t, lease, h)?);
            h = t.max_pool2d(h, 2, 2)?;
        }
        h = t.max_pool2d(h, 2, 2)?;
        let shape = t.value(h).shape().to_vec();
        let flat = shape[1] * shape[2] * shape[3];
        Ok(t.reshape(h, vec![shape[0], flat])?)
    }

    /// Attribute logits `(shape, color, size)` for classifier training.
    pub fn class_logits<T: Scalar>(
        &self,
        t: &Tape<T>,
        lease: &Lease,
        x: Var,
    ) -> Result<(Var, Var, Var)> {
        let f = self.features(t, lease, x)?;
        Ok((
            self.shape_head.apply(t, lease, f)?,
            self.color_head.apply(t, lease, f)?,
            self.size_head.apply(t, lease, f)?,
        ))
    }
}

// ---------------------------------------------------------------------------
// Caption generator

pub enum CaptionMode<'a> {
    /// Sample each word with the relaxed categorical at temperature `tau`
    /// and feed the soft embedding forward.
    GumbelRollout { tau: f64, rng: &'a mut Stream },
    /// Feed ground-truth tokens; logits depend only on inputs and weights.
    TeacherForced { refs: &'a [&'a Caption] },
}

/// Per-step outputs of one captioning pass; each entry is `[batch, vocab]`.
pub struct CaptionRollout {
    pub soft: Vec<Var>,
    pub logits: Vec<Var>,
}

pub struct Captioner {
    embed: String,
    h0: Linear,
    c0: Linear,
    cell: LstmCell,
    out: Linear,
    t_len: usize,
    vocab: usize,
}

impl Captioner {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut Stream) -> Self {
        Self {
            embed: embed_table(ps, "gy", cfg.vocab_size, cfg.embed, rng),
            h0: Linear::new(ps, "gy.h0", cfg.feature_dim(), cfg.cap_hidden, rng),
            c0: Linear::new(ps, "gy.c0", cfg.feature_dim(), cfg.cap_hidden, rng),
            cell: LstmCell::new(ps, "gy.lstm", cfg.embed, cfg.cap_hidden, rng),
            out: Linear::new(ps, "gy.out", cfg.cap_hidden, cfg.vocab_size, rng),
            t_len: cfg.t_len,
            vocab: cfg.vocab_size,
        }
    }

    fn bos_input<T: Scalar>(&self, t: &Tape<T>, lease: &Lease, batch: usize) -> Result<Var> {
        let mut v = vec![T::zero(); batch * self.vocab];
        for b in 0..batch {
            v[b * self.vocab + BOS] = T::one();
        }
        let onehot = t.constant(Tensor::from_vec(vec![batch, self.vocab], v));
        Ok(t.matmul(onehot, lease.var(&self.embed))?)
    }

    fn init_state<T: Scalar>(&self, t: &Tape<T>, lease: &Lease, feature: Var) -> Result<(Var, Var)> {
        let h = t.tanh(self.h0.apply(t, lease, feature)?);
        let c = t.tanh(self.c0.apply(t, lease, feature)?);
        Ok((h, c))
    }

    /// Runs exactly `t_len` steps from an image feature `[batch, F]`.
    pub fn run<T: Scalar>(
        &self,
        t: &Tape<T>,
        lease: &Lease,
        feature: Var,
        mode: CaptionMode,
    ) -> Result<CaptionRollout> {
        let batch = t.value(feature).shape()[0];
        if let CaptionMode::TeacherForced { refs } = &mode {
            if refs.len() != batch {
                return Err(ModelError::BadCaptionLength { got: refs.len(), want: batch });
            }
            for r in refs.iter() {
                if r.len() != self.t_len {
                    return Err(ModelError::BadCaptionLength { got: r.len(), want: self.t_len });
                }
            }
        }
        let (mut h, mut c) = self.init_state(t, lease, feature)?;
        let mut x = self.bos_input(t, lease, batch)?;
        let mut rollout = CaptionRollout { soft: Vec::new(), logits: Vec::new() };
        let mut mode = mode;
        for step in 0..self.t_len {
            (h, c) = self.cell.step(t, lease, x, h, c)?;
            let logits = self.out.apply(t, lease, h)?;
            let soft = match &mut mode {
                CaptionMode::GumbelRollout { tau, rng } => gumbel_softmax(t, logits, *tau, rng)?,
                CaptionMode::TeacherForced { .. } => t.softmax(logits, 1)?,
            };
            rollout.soft.push(soft);
            rollout.logits.push(logits);
            if step + 1 < self.t_len {
                let next = match &mode {
                    CaptionMode::GumbelRollout { .. } => soft,
                    CaptionMode::TeacherForced { refs } => {
                        t.constant(super::one_hot_step(refs, step, self.vocab))
                    }
                };
                x = t.matmul(next, lease.var(&self.embed))?;
            }
        }
        Ok(rollout)
    }

    /// Deterministic argmax decoding; once a row emits the end marker all
    /// its later tokens are pinned to it, so outputs are valid captions.
    pub fn greedy<T: Scalar>(
        &self,
        t: &Tape<T>,
        lease: &Lease,
        feature: Var,
    ) -> Result<Vec<Vec<usize>>> {
        let batch = t.value(feature).shape()[0];
        let (mut h, mut c) = self.init_state(t, lease, feature)?;
        let mut x = self.bos_input(t, lease, batch)?;
        let mut ids = vec![Vec::with_capacity(self.t_len); batch];
        let mut done = vec![false; batch];
        for step in 0..self.t_len {
            (h, c) = self.cell.step(t, lease, x, h, c)?;
            let logits = self.out.apply(t, lease, h)?;
            let lv = t.value(logits);
            let mut onehot = vec![T::zero(); batch * self.vocab];
            for b in 0..batch {
                let row = &lv.values()[b * self.vocab..(b + 1) * self.vocab];
                let mut arg = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[arg] {
                        arg = i;
                    }
                }
                if done[b] {
                    arg = EOS;
                }
                done[b] |= arg == EOS;
                ids[b].push(arg);
                onehot[b * self.vocab + arg] = T::one();
            }
            if step + 1 < self.t_len {
                let next = t.constant(Tensor::from_vec(vec![batch, self.vocab], onehot));
                x = t.matmul(next, lease.var(&self.embed))?;
            }
        }
        Ok(ids)
    }
}

// ---------------------------------------------------------------------------
// Caption discriminator

/// Scores caption/image agreement: caption LSTM final state and image
/// feature are projected to a shared width, fused by elementwise product,
/// and squashed to (0, 1).
pub struct CaptionDisc {
    embed: String,
    cell: LstmCell,
    img_proj: Linear,
    cap_proj: Linear,
    out: Linear,
    vocab: usize,
}

impl CaptionDisc {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut Stream) -> Self {
        Self {
            embed: embed_table(ps, "dy", cfg.vocab_size, cfg.dy_embed, rng),
            cell: LstmCell::new(ps, "dy.lstm", cfg.dy_embed, cfg.dy_hidden, rng),
            img_proj: Linear::new(ps, "dy.img_proj", cfg.feature_dim(), cfg.dy_fuse, rng),
            cap_proj: Linear::new(ps, "dy.cap_proj", cfg.dy_hidden, cfg.dy_fuse, rng),
            out: Linear::new(ps, "dy.out", cfg.dy_fuse, 1, rng),
            vocab: cfg.vocab_size,
        }
    }

    /// Exact one-hot tape constants for ground-truth captions.
    pub fn hard_steps<T: Scalar>(t: &Tape<T>, caps: &[&Caption], vocab: usize) -> Vec<Var> {
        (0..caps[0].len()).map(|s| t.constant(super::one_hot_step(caps, s, vocab))).collect()
    }

    /// `steps` holds one `[batch, vocab]` row-stochastic var per position.
    pub fn score<T: Scalar>(
        &self,
        t: &Tape<T>,
        lease: &Lease,
        feature: Var,
        steps: &[Var],
    ) -> Result<Var> {
        let batch = t.value(feature).shape()[0];
        let _ = self.vocab;
        let (mut h, mut c) = self.cell.zero_state(t, batch);
        for &s in steps {
            let x = t.matmul(s, lease.var(&self.embed))?;
            (h, c) = self.cell.step(t, lease, x, h, c)?;
        }
        let fi = t.tanh(self.img_proj.apply(t, lease, feature)?);
        let fc = t.tanh(self.cap_proj.apply(t, lease, h)?);
        let fused = t.mul(fi, fc)?;
        Ok(t.sigmoid(self.out.apply(t, lease, fused)?))
    }
}

// ---------------------------------------------------------------------------
// Text encoder with conditioning augmentation

pub struct TextEncoder {
    embed: String,
    lstm: BiLstm,
    mu: Linear,
    log_var: Linear,
}

impl TextEncoder {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut Stream) -> Self {
        Self {
            embed: embed_table(ps, "te", cfg.vocab_size, cfg.embed, rng),
            lstm: BiLstm::new(ps, "te.lstm", cfg.embed, cfg.te_hidden, rng),
            mu: Linear::new(ps, "te.mu", cfg.phi_dim(), cfg.cond_dim, rng),
            log_var: Linear::new(ps, "te.logvar", cfg.phi_dim(), cfg.cond_dim, rng),
        }
    }

    /// Text feature: final forward and backward hidden states concatenated.
    pub fn phi<T: Scalar>(&self, t: &Tape<T>, lease: &Lease, steps: &[Var]) -> Result<Var> {
        let batch = t.value(steps[0]).shape()[0];
        let xs = steps
            .iter()
            .map(|&s| Ok(t.matmul(s, lease.var(&self.embed))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.lstm.encode(t, lease, &xs, batch)?)
    }

    /// Reparameterized condition: `c = mu + exp(log_var / 2) * eps`.
    /// `eps = None` is evaluation mode, which returns `c = mu`.
    pub fn condition<T: Scalar>(
        &self,
        t: &Tape<T>,
        lease: &Lease,
        phi: Var,
        eps: Option<Tensor<T>>,
    ) -> Result<(Var, Var, Var)> {
        let mu = self.mu.apply(t, lease, phi)?;
        let log_var = self.log_var.apply(t, lease, phi)?;
        let c = match eps {
            Some(e) => {
                let std = t.exp(t.scale(log_var, T::from_f64(0.5)));
                let noise = t.mul(std, t.constant(e))?;
                t.add(mu, noise)?
            }
            None => mu,
        };
        Ok((mu, log_var, c))
    }
}

// ---------------------------------------------------------------------------
// Image generator

/// `concat(z, c)` through a linear layer into a 4x4 map, then stride-2
/// transposed convs with batch norm up to the output resolution, tanh last.
pub struct ImageGen {
    fc: Linear,
    bn0: BatchNorm,
    ups: Vec<(ConvTranspose2d, Option<BatchNorm>)>,
    ch0: usize,
}

impl ImageGen {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut Stream) -> Self {
        let n_up = (cfg.image_size / 4).ilog2() as usize;
        let ch0 = cfg.gx_base << (n_up - 1);
        let fc = Linear::new(ps, "gx.fc", cfg.z_dim + cfg.cond_dim, ch0 * 16, rng);
        let bn0 = BatchNorm::new(ps, "gx.bn0", ch0);
        let mut ups = Vec::new();
        for j in 0..n_up {
            let c_in = ch0 >> j;
            let last = j + 1 == n_up;
            let c_out = if last { 3 } else { ch0 >> (j + 1) };
            let deconv = ConvTranspose2d::new(ps, &format!("gx.up{j}"), c_in, c_out, 4, 2, 1, rng);
            let bn = (!last).then(|| BatchNorm::new(ps, &format!("gx.up{j}.bn"), c_out));
            ups.push((deconv, bn));
        }
        Self { fc, bn0, ups, ch0 }
    }

    pub fn generate<T: Scalar>(
        &self,
        t: &Tape<T>,
        lease: &Lease,
        ps: &mut ParamSet<T>,
        z: Var,
        c: Var,
        training: bool,
    ) -> Result<Var> {
        let zc = t.concat(z, c, 1)?;
        let batch = t.value(zc).shape()[0];
        let h = self.fc.apply(t, lease, zc)?;
        let mut h = t.reshape(h, vec![batch, self.ch0, 4, 4])?;
        h = t.relu(self.bn0.apply(t, lease, ps, h, training)?);
        for (deconv, bn) in &self.ups {
            h = deconv.apply(t, lease, h)?;
            if let Some(bn) = bn {
                h = t.relu(bn.apply(t, lease, ps, h, training)?);
            }
        }
        Ok(t.tanh(h))
    }
}

// ---------------------------------------------------------------------------
// Image discriminator

/// Spectrally normalized stride-2 convs down to 4x4; the text feature is
/// compressed, tiled over the map, channel-concatenated, mixed by a 1x1
/// conv, then scored through a linear sigmoid head.
pub struct ImageDisc {
    downs: Vec<SnConv2d>,
    cond: SnLinear,
    joint: SnConv2d,
    out: SnLinear,
    map_side: usize,
}

impl ImageDisc {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut Stream) -> Self {
        let n_down = (cfg.image_size / 4).ilog2() as usize;
        let mut downs = Vec::new();
        let mut c_in = 3;
        for j in 0..n_down {
            let c_out = cfg.dx_base << j;
            downs.push(SnConv2d::new(ps, &format!("dx.down{j}"), c_in, c_out, 4, 2, 1, rng));
            c_in = c_out;
        }
        let cond = SnLinear::new(ps, "dx.cond", cfg.phi_dim(), cfg.dx_cond, rng);
        let joint = SnConv2d::new(ps, "dx.joint", c_in + cfg.dx_cond, c_in, 1, 1, 0, rng);
        let out = SnLinear::new(ps, "dx.out", c_in * 16, 1, rng);
        Self { downs, cond, joint, out, map_side: 4 }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn score<T: Scalar>(
        &self,
        t: &Tape<T>,
        lease: &Lease,
        ps: &mut ParamSet<T>,
        pixels: Var,
        phi: Var,
        iters: usize,
        persist: bool,
    ) -> Result<Var> {
        let alpha = T::from_f64(0.2);
        let mut h = pixels;
        for conv in &self.downs {
            h = t.leaky_relu(conv.apply(t, lease, ps, h, iters, persist)?, alpha);
        }
        let cond = t.leaky_relu(self.cond.apply(t, lease, ps, phi, iters, persist)?, alpha);
        let tiled = t.tile_hw(cond, self.map_side, self.map_side)?;
        let cat = t.concat(h, tiled, 1)?;
        let mixed = t.leaky_relu(self.joint.apply(t, lease, ps, cat, iters, persist)?, alpha);
        let shape = t.value(mixed).shape().to_vec();
        let flat = t.reshape(mixed, vec![shape[0], shape[1] * shape[2] * shape[3]])?;
        Ok(t.sigmoid(self.out.apply(t, lease, ps, flat, iters, persist)?))
    }

    /// Converged spectral norms of every weight in this network, for the
    /// singular-value bound checks.
    pub fn sigmas<T: Scalar>(&self, ps: &ParamSet<T>) -> Vec<(String, T)> {
        let mut out = Vec::new();
        for d in &self.downs {
            out.push((d.weight_name().to_string(), d.sigma(ps)));
        }
        out.push((self.cond.weight_name().to_string(), self.cond.sigma(ps)));
        out.push((self.joint.weight_name().to_string(), self.joint.sigma(ps)));
        out.push((self.out.weight_name().to_string(), self.out.sigma(ps)));
        out
    }
}
