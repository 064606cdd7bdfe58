//! Three-phase training: caption-generator pretraining (with the image
//! encoder trained first and frozen), text-to-image GAN pretraining, and
//! joint cycle training. Owns the optimizer, the loss log, checkpointing,
//! and the held-out evaluation helpers.
//!
//! Everything here runs in 32-bit; the tape is built per step and
//! dropped. A [`Trainer`] is a pure function of `(ModelConfig,
//! TrainConfig, dataset)` — same inputs, bit-identical parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{
    self, epoch_batches, load_image, load_manifest, load_vocab, pick_caption, DataError,
    DatasetManifest, PairingMode, Split,
};
use crate::losses::{ce_sum, gan_d_loss, gan_g_nonsat, gan_g_sat, kl_standard_normal, l1_mean};
use crate::models::{Caption, CaptionDisc, CaptionMode, ModelBundle, ModelConfig, Vocab};
use crate::nn::ParamKind;
use crate::rng::{Stream, StreamState};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    Config(String),
    #[error("non-finite loss in {stage} at epoch {epoch}, step {step}{}",
            last_good.as_ref().map(|p| format!("; last good checkpoint: {}", p.display())).unwrap_or_default())]
    Diverged { stage: String, epoch: usize, step: usize, last_good: Option<PathBuf> },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("checkpoint version {got} unsupported (expected {want})")]
    CheckpointVersion { got: u32, want: u32 },
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

pub type Result<V> = std::result::Result<V, TrainError>;

// ---------------------------------------------------------------------------
// Configuration

/// Optimization schedule and loss weights. Epoch counts are per stage:
/// `epochs_fie` for the encoder classifier, `epochs_pretrain` for each of
/// the two GAN-pretraining stages, `epochs_main` for joint training.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs_fie: usize,
    pub epochs_pretrain: usize,
    pub epochs_main: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lambda_kl: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub unpaired: bool,
    pub cycle_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_fie: 15,
            epochs_pretrain: 50,
            epochs_main: 20,
            batch_size: 16,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 1e-5,
            lambda_kl: 2.0,
            lambda1: 1.0,
            lambda2: 1000.0,
            lambda3: 0.01,
            tau: 1.0,
            unpaired: false,
            cycle_enabled: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    // The negated comparisons reject NaN along with out-of-range values.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.epochs_fie == 0 || self.epochs_pretrain == 0 || self.epochs_main == 0 {
            return Err(TrainError::Config("every epoch count must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if !(self.tau > 0.0) {
            return Err(TrainError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda_kl", self.lambda_kl),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) {
                return Err(TrainError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss log

/// Append-only per-batch loss table; rows are `(epoch, step, components)`
/// where `step` counts batches from the start of the stage.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLog {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, usize, Vec<f64>)>,
}

impl LossLog {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, epoch: usize, step: usize, values: Vec<f64>) {
        assert_eq!(values.len(), self.columns.len(), "loss row width");
        self.rows.push((epoch, step, values));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (epoch, step, values) in &self.rows {
            out.push_str(&format!("{epoch},{step}"));
            for v in values {
                out.push_str(&format!(",{v:.9e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|source| TrainError::Io { path: path.into(), source })
    }

    /// Mean of one column over the rows of one epoch.
    pub fn epoch_mean(&self, column: &str, epoch: usize) -> Option<f64> {
        let idx = self.columns.iter().position(|c| c == column)?;
        let vals: Vec<f64> =
            self.rows.iter().filter(|(e, _, _)| *e == epoch).map(|(_, _, v)| v[idx]).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled step count per instance and L2 weight decay folded
/// into the gradient. Moments live in 32-bit so checkpoints round-trip
/// losslessly; the update arithmetic runs in 64-bit.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, weight_decay, step_count: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn reset(&mut self) {
        self.step_count = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn step(&mut self, ps: &mut crate::nn::ParamSet<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (name, g) in grads {
            let n = g.values().len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let p = ps.get_mut(name).values_mut();
            assert_eq!(p.len(), n, "gradient shape for {name}");
            for i in 0..n {
                let gi = f64::from(g.values()[i]) + self.weight_decay * f64::from(p[i]);
                let mi = self.beta1 * f64::from(m[i]) + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * f64::from(v[i]) + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = self.lr * (f64::from(m[i]) / bc1)
                    / ((f64::from(v[i]) / bc2).sqrt() + self.eps);
                p[i] = (f64::from(p[i]) - update) as f32;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset in memory

/// Whole corpus decoded up front; a 64x64 corpus of a few thousand images
/// is a few hundred megabytes at most.
pub struct LoadedData {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub vocab: Vocab,
    pub images: Vec<Tensor<f32>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl LoadedData {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let vocab = load_vocab(dir, &manifest)?;
        let images = manifest
            .records
            .iter()
            .map(|r| load_image(dir, r))
            .collect::<data::Result<Vec<_>>>()?;
        let train = manifest.split_indices(Split::Train);
        let test = manifest.split_indices(Split::Test);
        Ok(Self { dir: dir.to_path_buf(), manifest, vocab, images, train, test })
    }
}

struct BatchData {
    pixels: Tensor<f32>,
    caps: Vec<Caption>,
    shapes: Vec<usize>,
    fills: Vec<usize>,
    sizes: Vec<usize>,
}

/// Stacks one batch. `positions` index into the train split; the caption
/// for slot `i` comes from the record `pairing` points at.
fn assemble_batch(
    data: &LoadedData,
    positions: &[usize],
    pairing: &PairingMode,
    t_len: usize,
    rng: &mut Stream,
) -> Result<BatchData> {
    let b = positions.len();
    let mut pixels = Vec::with_capacity(b * data.images[0].values().len());
    let mut caps = Vec::with_capacity(b);
    let (mut shapes, mut fills, mut sizes) = (Vec::new(), Vec::new(), Vec::new());
    for &pos in positions {
        let rec_img = data.train[pos];
        let rec_cap = data.train[pairing.caption_source(pos)];
        pixels.extend_from_slice(data.images[rec_img].values());
        caps.push(pick_caption(rec_cap, &data.manifest.records[rec_cap], &data.vocab, t_len, rng)?);
        let r = &data.manifest.records[rec_img];
        shapes.push(r.shape);
        fills.push(r.fill);
        sizes.push(r.size);
    }
    let s = data.manifest.image_size;
    Ok(BatchData { pixels: Tensor::from_vec(vec![b, 3, s, s], pixels), caps, shapes, fills, sizes })
}

fn stack_images(data: &LoadedData, records: &[usize]) -> Tensor<f32> {
    let s = data.manifest.image_size;
    let mut pixels = Vec::with_capacity(records.len() * 3 * s * s);
    for &r in records {
        pixels.extend_from_slice(data.images[r].values());
    }
    Tensor::from_vec(vec![records.len(), 3, s, s], pixels)
}

/// Standard-normal tensor drawn from the given stream.
pub fn normal_tensor(rng: &mut Stream, shape: Vec<usize>) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal() as f32).collect())
}

// ---------------------------------------------------------------------------
// Trainer

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    FieClassifier,
    CaptionerMle,
    ImageGan,
    CycleGan,
    Done,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::FieClassifier => "fie-classifier",
            Stage::CaptionerMle => "captioner-mle",
            Stage::ImageGan => "image-gan",
            Stage::CycleGan => "cycle-gan",
            Stage::Done => "done",
        }
    }
}

/// Everything mutable during a run: the parameter bundle, the two
/// optimizers (discriminator side and generator side), the named rng
/// streams, and the stage cursor. Checkpoints capture it exactly.
pub struct Trainer {
    pub bundle: ModelBundle<f32>,
    pub cfg: TrainConfig,
    pub stage: Stage,
    pub epoch_in_stage: usize,
    pub pairing: PairingMode,
    /// Copy of the dataset vocabulary, checkpointed so inference needs
    /// only the checkpoint file.
    pub vocab: Vocab,
    opt_d: Adam,
    opt_g: Adam,
    rng_data: Stream,
    rng_gumbel: Stream,
    rng_latent: Stream,
}

impl Trainer {
    /// Builds a fresh trainer. The model's vocabulary size is taken from
    /// the dataset, overriding whatever the config carries.
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, data: &LoadedData) -> Result<Self> {
        cfg.validate()?;
        if data.train.len() < cfg.batch_size {
            return Err(TrainError::Config(format!(
                "train split of {} is smaller than batch size {}",
                data.train.len(),
                cfg.batch_size
            )));
        }
        if model.image_size != data.manifest.image_size {
            return Err(TrainError::Config(format!(
                "model expects {}px images, dataset has {}px",
                model.image_size, data.manifest.image_size
            )));
        }
        let mut model = model.clone();
        model.vocab_size = data.vocab.len();
        let bundle = ModelBundle::new(model, cfg.seed);
        let pairing = if cfg.unpaired {
            PairingMode::unpaired(data.train.len(), &mut Stream::new(cfg.seed, "pairing"))
        } else {
            PairingMode::Paired
        };
        Ok(Self {
            bundle,
            cfg: cfg.clone(),
            stage: Stage::FieClassifier,
            epoch_in_stage: 0,
            pairing,
            vocab: data.vocab.clone(),
            opt_d: Adam::from_config(cfg),
            opt_g: Adam::from_config(cfg),
            rng_data: Stream::new(cfg.seed, "data"),
            rng_gumbel: Stream::new(cfg.seed, "gumbel"),
            rng_latent: Stream::new(cfg.seed, "latent"),
        })
    }

    fn advance(&mut self, next: Stage) {
        self.stage = next;
        self.epoch_in_stage = 0;
        self.opt_d.reset();
        self.opt_g.reset();
    }

    /// Restarts the runtime rng streams (and the unpaired permutation, if
    /// any) from a new master seed. Model parameters are untouched, so this
    /// lets several runs branch off one restored checkpoint.
    pub fn reseed(&mut self, seed: u64, train_len: usize) {
        self.cfg.seed = seed;
        self.rng_data = Stream::new(seed, "data");
        self.rng_gumbel = Stream::new(seed, "gumbel");
        self.rng_latent = Stream::new(seed, "latent");
        if matches!(self.pairing, PairingMode::Unpaired { .. }) {
            self.pairing = PairingMode::unpaired(train_len, &mut Stream::new(seed, "pairing"));
        }
    }

    fn t_len(&self) -> usize {
        self.bundle.config.t_len
    }

    /// Scheduled epoch count of the current stage.
    pub fn stage_epochs(&self) -> usize {
        match self.stage {
            Stage::FieClassifier => self.cfg.epochs_fie,
            Stage::CaptionerMle | Stage::ImageGan => self.cfg.epochs_pretrain,
            Stage::CycleGan => self.cfg.epochs_main,
            Stage::Done => 0,
        }
    }

    /// Runs one epoch of the current stage, appending per-batch rows to
    /// `log` (whose columns must match the stage). Stage transitions —
    /// including freezing the image encoder after its classifier stage —
    /// happen when the stage's last epoch completes.
    pub fn run_epoch(&mut self, data: &LoadedData, log: &mut LossLog) -> Result<Stage> {
        let stage = self.stage;
        let positions: Vec<usize> = (0..data.train.len()).collect();
        let batches = match stage {
            Stage::Done => return Err(TrainError::Config("training already complete".into())),
            _ => epoch_batches(&positions, self.cfg.batch_size, &mut self.rng_data)?,
        };
        let per_epoch = batches.len();
        for (i, bpos) in batches.iter().enumerate() {
            let batch =
                assemble_batch(data, bpos, &self.pairing, self.bundle.config.t_len, &mut self.rng_data)?;
            let step = self.epoch_in_stage * per_epoch + i;
            let row = match stage {
                Stage::FieClassifier => fie_step(self, &batch)?.to_vec(),
                Stage::CaptionerMle => vec![mle_step(self, &batch)?],
                Stage::ImageGan => {
                    let d = t2i_d_step(self, &batch)?;
                    let [g, kl] = t2i_g_step(self, &batch)?;
                    vec![d, g, kl]
                }
                Stage::CycleGan => {
                    let [d_y, d_x, v_d] = cycle_d_step(self, &batch)?;
                    let [g_y, g_x, kl, cyc_img, cyc_feat, cyc_txt, v_g] =
                        cycle_g_step(self, &batch)?;
                    vec![d_y, d_x, g_y, g_x, kl, cyc_img, cyc_feat, cyc_txt, v_d, v_g]
                }
                Stage::Done => unreachable!(),
            };
            self.check_finite(&row, step)?;
            log.push(self.epoch_in_stage, step, row);
        }
        self.epoch_in_stage += 1;
        if self.epoch_in_stage >= self.stage_epochs() {
            match stage {
                Stage::FieClassifier => {
                    self.bundle.freeze_encoder();
                    self.advance(Stage::CaptionerMle);
                }
                Stage::CaptionerMle => self.advance(Stage::ImageGan),
                Stage::ImageGan => self.advance(Stage::CycleGan),
                Stage::CycleGan => self.advance(Stage::Done),
                Stage::Done => {}
            }
        }
        Ok(stage)
    }

    fn check_finite(&self, values: &[f64], step: usize) -> Result<()> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TrainError::Diverged {
                stage: self.stage.name().to_string(),
                epoch: self.epoch_in_stage,
                step,
                last_good: None,
            })
        }
    }
}

fn scalar(t: &Tape<f32>, v: Var) -> f64 {
    f64::from(t.value_scalar(v))
}

// ---------------------------------------------------------------------------
// Single optimization steps

/// Classifier step for the image encoder: mean cross-entropy per head
/// (shape, color, size), summed.
fn fie_step(tr: &mut Trainer, batch: &BatchData) -> Result<[f64; 3]> {
    tr.bundle.params.set_trainable(|n| n.starts_with("fie."));
    let t: Tape<f32> = Tape::new();
    let lease = tr.bundle.params.lease(&t);
    let x = t.constant(batch.pixels.clone());
    let (ls, lc, lz) = tr.bundle.encoder.class_logits(&t, &lease, x)?;
    let b = batch.shapes.len();
    let w = vec![1.0 / b as f64; b];
    let l_shape = ce_sum(&t, ls, &batch.shapes, &w)?;
    let l_color = ce_sum(&t, lc, &batch.fills, &w)?;
    let l_size = ce_sum(&t, lz, &batch.sizes, &w)?;
    let total = t.add(t.add(l_shape, l_color)?, l_size)?;
    t.backward(total)?;
    let grads = tr.bundle.params.grads(&t, &lease);
    tr.opt_g.step(&mut tr.bundle.params, &grads);
    Ok([scalar(&t, l_shape), scalar(&t, l_color), scalar(&t, l_size)])
}

/// Teacher-forced caption cross-entropy, masked past each caption's end
/// marker and averaged over the counted tokens.
fn mle_step(tr: &mut Trainer, batch: &BatchData) -> Result<f64> {
    tr.bundle.params.set_trainable(|n| n.starts_with("gy."));
    let t: Tape<f32> = Tape::new();
    let lease = tr.bundle.params.lease(&t);
    let x = t.constant(batch.pixels.clone());
    let feature = tr.bundle.encoder.features(&t, &lease, x)?;
    let refs: Vec<&Caption> = batch.caps.iter().collect();
    let rollout =
        tr.bundle.captioner.run(&t, &lease, feature, CaptionMode::TeacherForced { refs: &refs })?;
    let t_len = tr.t_len();
    let counted: usize = refs.iter().map(|c| (c.word_count() + 1).min(t_len)).sum();
    let mut loss = None;
    for (step, &logits) in rollout.logits.iter().enumerate() {
        let targets: Vec<usize> = refs.iter().map(|c| c.ids()[step]).collect();
        let weights: Vec<f64> = refs
            .iter()
            .map(|c| if step < (c.word_count() + 1).min(t_len) { 1.0 / counted as f64 } else { 0.0 })
            .collect();
        let ce = ce_sum(&t, logits, &targets, &weights)?;
        loss = Some(match loss {
            None => ce,
            Some(acc) => t.add(acc, ce)?,
        });
    }
    let loss = loss.expect("at least one step");
    t.backward(loss)?;
    let grads = tr.bundle.params.grads(&t, &lease);
    tr.opt_g.step(&mut tr.bundle.params, &grads);
    Ok(scalar(&t, loss))
}

/// Image-discriminator step of the text-to-image stage.
fn t2i_d_step(tr: &mut Trainer, batch: &BatchData) -> Result<f64> {
    tr.bundle.params.set_trainable(|n| n.starts_with("dx."));
    let t: Tape<f32> = Tape::new();
    let lease = tr.bundle.params.lease(&t);
    let x = t.constant(batch.pixels.clone());
    let refs: Vec<&Caption> = batch.caps.iter().collect();
    let hard = CaptionDisc::hard_steps(&t, &refs, tr.bundle.config.vocab_size);
    let phi = tr.bundle.text_enc.phi(&t, &lease, &hard)?;
    let b = refs.len();
    let eps = normal_tensor(&mut tr.rng_latent, vec![b, tr.bundle.config.cond_dim]);
    let (_, _, c) = tr.bundle.text_enc.condition(&t, &lease, phi, Some(eps))?;
    let z = t.constant(normal_tensor(&mut tr.rng_latent, vec![b, tr.bundle.config.z_dim]));
    let fake = tr.bundle.image_gen.generate(&t, &lease, &mut tr.bundle.params, z, c, true)?;
    let s_real =
        tr.bundle.image_disc.score(&t, &lease, &mut tr.bundle.params, x, phi, 1, true)?;
    let s_fake =
        tr.bundle.image_disc.score(&t, &lease, &mut tr.bundle.params, fake, phi, 1, true)?;
    let loss = gan_d_loss(&t, s_real, s_fake)?;
    t.backward(loss)?;
    let grads = tr.bundle.params.grads(&t, &lease);
    tr.opt_d.step(&mut tr.bundle.params, &grads);
    Ok(scalar(&t, loss))
}

/// Generator/text-encoder step of the text-to-image stage.
fn t2i_g_step(tr: &mut Trainer, batch: &BatchData) -> Result<[f64; 2]> {
    tr.bundle.params.set_trainable(|n| n.starts_with("gx.") || n.starts_with("te."));
    let t: Tape<f32> = Tape::new();
    let lease = tr.bundle.params.lease(&t);
    let refs: Vec<&Caption> = batch.caps.iter().collect();
    let hard = CaptionDisc::hard_steps(&t, &refs, tr.bundle.config.vocab_size);
    let phi = tr.bundle.text_enc.phi(&t, &lease, &hard)?;
    let b = refs.len();
    let eps = normal_tensor(&mut tr.rng_latent, vec![b, tr.bundle.config.cond_dim]);
    let (mu, log_var, c) = tr.bundle.text_enc.condition(&t, &lease, phi, Some(eps))?;
    let z = t.constant(normal_tensor(&mut tr.rng_latent, vec![b, tr.bundle.config.z_dim]));
    let fake = tr.bundle.image_gen.generate(&t, &lease, &mut tr.bundle.params, z, c, true)?;
    let s_fake =
        tr.bundle.image_disc.score(&t, &lease, &mut tr.bundle.params, fake, phi, 1, false)?;
    let kl = kl_standard_normal(&t, mu, log_var)?;
    let loss = t.add(gan_g_sat(&t, s_fake), t.scale(kl, tr.cfg.lambda_kl as f32))?;
    t.backward(loss)?;
    let grads = tr.bundle.params.grads(&t, &lease);
    tr.opt_g.step(&mut tr.bundle.params, &grads);
    Ok([scalar(&t, loss), scalar(&t, kl)])
}

/// Joint discriminator step: both discriminators against the current
/// generators.
fn cycle_d_step(tr: &mut Trainer, batch: &BatchData) -> Result<[f64; 3]> {
    tr.bundle.params.set_trainable(|n| n.starts_with("dy.") || n.starts_with("dx."));
    let t: Tape<f32> = Tape::new();
    let lease = tr.bundle.params.lease(&t);
    let x = t.constant(batch.pixels.clone());
    let refs: Vec<&Caption> = batch.caps.iter().collect();
    let b = refs.len();
    let vocab = tr.bundle.config.vocab_size;

    let feature = tr.bundle.encoder.features(&t, &lease, x)?;
    let hard = CaptionDisc::hard_steps(&t, &refs, vocab);
    let rollout = tr.bundle.captioner.run(
        &t,
        &lease,
        feature,
        CaptionMode::GumbelRollout { tau: tr.cfg.tau, rng: &mut tr.rng_gumbel },
    )?;
    let s_real_y = tr.bundle.cap_disc.score(&t, &lease, feature, &hard)?;
    let s_fake_y = tr.bundle.cap_disc.score(&t, &lease, feature, &rollout.soft)?;
    let l_dy = gan_d_loss(&t, s_real_y, s_fake_y)?;

    let phi = tr.bundle.text_enc.phi(&t, &lease, &hard)?;
    let eps = normal_tensor(&mut tr.rng_latent, vec![b, tr.bundle.config.cond_dim]);
    let (_, _, c) = tr.bundle.text_enc.condition(&t, &lease, phi, Some(eps))?;
    let z = t.constant(normal_tensor(&mut tr.rng_latent, vec![b, tr.bundle.config.z_dim]));
    let fake = tr.bundle.image_gen.generate(&t, &lease, &mut tr.bundle.params, z, c, true)?;
    let s_real_x =
        tr.bundle.image_disc.score(&t, &lease, &mut tr.bundle.params, x, phi, 1, true)?;
    let s_fake_x =
        tr.bundle.image_disc.score(&t, &lease, &mut tr.bundle.params, fake, phi, 1, true)?;
    let l_dx = gan_d_loss(&t, s_real_x, s_fake_x)?;

    let v_d = t.add(l_dy, l_dx)?;
    t.backward(v_d)?;
    let grads = tr.bundle.params.grads(&t, &lease);
    tr.opt_d.step(&mut tr.bundle.params, &grads);
    Ok([scalar(&t, l_dy), scalar(&t, l_dx), scalar(&t, v_d)])
}

/// Joint generator step: both GAN generator losses plus, when enabled,
/// the two cycle-consistency directions.
#[allow(clippy::type_complexity)]
fn cycle_g_step(tr: &mut Trainer, batch: &BatchData) -> Result<[f64; 7]> {
    tr.bundle.params.set_trainable(|n| {
        n.starts_with("gy.") || n.starts_with("gx.") || n.starts_with("te.")
    });
    let t: Tape<f32> = Tape::new();
    let lease = tr.bundle.params.lease(&t);
    let x = t.constant(batch.pixels.clone());
    let refs: Vec<&Caption> = batch.caps.iter().collect();
    let b = refs.len();
    let vocab = tr.bundle.config.vocab_size;
    let cond_dim = tr.bundle.config.cond_dim;
    let z_dim = tr.bundle.config.z_dim;

    // Image -> caption: fool the caption discriminator.
    let feature = tr.bundle.encoder.features(&t, &lease, x)?;
    let rollout = tr.bundle.captioner.run(
        &t,
        &lease,
        feature,
        CaptionMode::GumbelRollout { tau: tr.cfg.tau, rng: &mut tr.rng_gumbel },
    )?;
    let s_fake_y = tr.bundle.cap_disc.score(&t, &lease, feature, &rollout.soft)?;
    let l_gy = gan_g_nonsat(&t, s_fake_y)?;

    // Caption -> image: fool the image discriminator, keep the condition
    // distribution near the prior.
    let hard = CaptionDisc::hard_steps(&t, &refs, vocab);
    let phi_y = tr.bundle.text_enc.phi(&t, &lease, &hard)?;
    let eps = normal_tensor(&mut tr.rng_latent, vec![b, cond_dim]);
    let (mu, log_var, c_y) = tr.bundle.text_enc.condition(&t, &lease, phi_y, Some(eps))?;
    let z = t.constant(normal_tensor(&mut tr.rng_latent, vec![b, z_dim]));
    let x_fake = tr.bundle.image_gen.generate(&t, &lease, &mut tr.bundle.params, z, c_y, true)?;
    let s_fake_x =
        tr.bundle.image_disc.score(&t, &lease, &mut tr.bundle.params, x_fake, phi_y, 1, false)?;
    let kl = kl_standard_normal(&t, mu, log_var)?;
    let l_gx = t.add(gan_g_sat(&t, s_fake_x), t.scale(kl, tr.cfg.lambda_kl as f32))?;

    let mut v_g = t.add(l_gy, l_gx)?;
    let (mut cyc_img, mut cyc_feat, mut cyc_txt) = (0.0, 0.0, 0.0);
    if tr.cfg.cycle_enabled {
        // Image -> caption -> image: regenerate from the soft rollout.
        let phi_soft = tr.bundle.text_enc.phi(&t, &lease, &rollout.soft)?;
        let eps_a = normal_tensor(&mut tr.rng_latent, vec![b, cond_dim]);
        let (_, _, c_soft) = tr.bundle.text_enc.condition(&t, &lease, phi_soft, Some(eps_a))?;
        let z_a = t.constant(normal_tensor(&mut tr.rng_latent, vec![b, z_dim]));
        let x_regen =
            tr.bundle.image_gen.generate(&t, &lease, &mut tr.bundle.params, z_a, c_soft, true)?;
        let feat_regen = tr.bundle.encoder.features(&t, &lease, x_regen)?;
        let img_term = t.scale(l1_mean(&t, x_regen, x)?, tr.cfg.lambda1 as f32);
        let feat_term = t.scale(l1_mean(&t, feat_regen, feature)?, tr.cfg.lambda2 as f32);

        // Caption -> image -> caption: teacher-forced logits on the fake
        // image against the dataset caption, summed over all steps.
        let feat_fake = tr.bundle.encoder.features(&t, &lease, x_fake)?;
        let tf = tr.bundle.captioner.run(
            &t,
            &lease,
            feat_fake,
            CaptionMode::TeacherForced { refs: &refs },
        )?;
        let w = vec![1.0 / b as f64; b];
        let mut ce_total = None;
        for (step, &logits) in tf.logits.iter().enumerate() {
            let targets: Vec<usize> = refs.iter().map(|cap| cap.ids()[step]).collect();
            let ce = ce_sum(&t, logits, &targets, &w)?;
            ce_total = Some(match ce_total {
                None => ce,
                Some(acc) => t.add(acc, ce)?,
            });
        }
        let txt_term = t.scale(ce_total.expect("at least one step"), tr.cfg.lambda3 as f32);

        cyc_img = scalar(&t, img_term);
        cyc_feat = scalar(&t, feat_term);
        cyc_txt = scalar(&t, txt_term);
        v_g = t.add(v_g, t.add(t.add(img_term, feat_term)?, txt_term)?)?;
    }

    t.backward(v_g)?;
    let grads = tr.bundle.params.grads(&t, &lease);
    tr.opt_g.step(&mut tr.bundle.params, &grads);
    Ok([
        scalar(&t, l_gy),
        scalar(&t, l_gx),
        scalar(&t, kl),
        cyc_img,
        cyc_feat,
        cyc_txt,
        scalar(&t, v_g),
    ])
}

// ---------------------------------------------------------------------------
// Phase drivers

fn save_epoch_checkpoint(tr: &Trainer, ckpt_dir: Option<&Path>) -> Result<Option<PathBuf>> {
    match ckpt_dir {
        None => Ok(None),
        Some(dir) => {
            let path = dir.join("last_good.ckpt");
            save_checkpoint(tr, &path)?;
            Ok(Some(path))
        }
    }
}

fn attach_last_good(err: TrainError, path: &Option<PathBuf>) -> TrainError {
    match err {
        TrainError::Diverged { stage, epoch, step, .. } => {
            TrainError::Diverged { stage, epoch, step, last_good: path.clone() }
        }
        other => other,
    }
}

/// Runs the current stage to completion, checkpointing after each epoch
/// when a directory is given.
fn drive_stage(
    tr: &mut Trainer,
    data: &LoadedData,
    stage: Stage,
    log: &mut LossLog,
    ckpt_dir: Option<&Path>,
) -> Result<()> {
    let mut last_good = ckpt_dir.map(|d| d.join("last_good.ckpt")).filter(|p| p.exists());
    while tr.stage == stage {
        tr.run_epoch(data, log).map_err(|e| attach_last_good(e, &last_good))?;
        last_good = save_epoch_checkpoint(tr, ckpt_dir)?;
    }
    Ok(())
}

/// Stage 1: train the encoder classifier heads, freeze the encoder, then
/// teacher-forced caption pretraining. The caption discriminator is left
/// untouched.
pub fn pretrain_captioner(
    tr: &mut Trainer,
    data: &LoadedData,
    fie_log: &mut LossLog,
    mle_log: &mut LossLog,
    ckpt_dir: Option<&Path>,
) -> Result<()> {
    drive_stage(tr, data, Stage::FieClassifier, fie_log, ckpt_dir)?;
    drive_stage(tr, data, Stage::CaptionerMle, mle_log, ckpt_dir)
}

/// Stage 2: alternating image-discriminator / image-generator steps. The
/// text encoder receives gradients only from the generator step.
pub fn pretrain_t2i(
    tr: &mut Trainer,
    data: &LoadedData,
    log: &mut LossLog,
    ckpt_dir: Option<&Path>,
) -> Result<()> {
    if matches!(tr.stage, Stage::FieClassifier | Stage::CaptionerMle) {
        return Err(TrainError::Config(
            "caption pretraining must finish before the image stage".into(),
        ));
    }
    drive_stage(tr, data, Stage::ImageGan, log, ckpt_dir)
}

/// Stage 3: joint training. Per batch, one discriminator step on the sum
/// of both discriminator losses, then one generator step on the sum of
/// both generator losses plus the cycle terms (unless disabled).
pub fn train_cycle(
    tr: &mut Trainer,
    data: &LoadedData,
    log: &mut LossLog,
    ckpt_dir: Option<&Path>,
) -> Result<()> {
    if tr.stage != Stage::CycleGan && tr.stage != Stage::Done {
        return Err(TrainError::Config("both pretraining phases must finish first".into()));
    }
    drive_stage(tr, data, Stage::CycleGan, log, ckpt_dir)
}

pub const FIE_LOG_COLUMNS: [&str; 3] = ["ce_shape", "ce_color", "ce_size"];
pub const MLE_LOG_COLUMNS: [&str; 1] = ["ce_caption"];
pub const T2I_LOG_COLUMNS: [&str; 3] = ["d_x", "g_x", "kl"];
pub const CYCLE_LOG_COLUMNS: [&str; 10] =
    ["d_y", "d_x", "g_y", "g_x", "kl", "cyc_img", "cyc_feat", "cyc_txt", "v_d", "v_g"];

// ---------------------------------------------------------------------------
// Checkpoints

pub const CKPT_MAGIC: &[u8; 8] = b"CCAPCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
    /// Element count.
    len: u64,
    kind: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CkptMeta {
    model_config: ModelConfig,
    train_config: TrainConfig,
    stage: Stage,
    epoch_in_stage: usize,
    fie_frozen: bool,
    pairing: PairingMode,
    vocab: Vec<String>,
    rng: BTreeMap<String, StreamState>,
    adam_d_step: u64,
    adam_g_step: u64,
    tensors: Vec<TensorEntry>,
}

fn push_tensor(
    blob: &mut Vec<u8>,
    table: &mut Vec<TensorEntry>,
    name: String,
    kind: &str,
    shape: Vec<usize>,
    values: &[f32],
) {
    table.push(TensorEntry {
        name,
        dtype: "f32".into(),
        shape,
        offset: blob.len() as u64,
        len: values.len() as u64,
        kind: kind.into(),
    });
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the full trainer state. Atomic: written to a sibling
/// temporary file and renamed into place. Saving, loading, and saving
/// again produces byte-identical files.
pub fn save_checkpoint(tr: &Trainer, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut table = Vec::new();
    for (name, p) in tr.bundle.params.iter() {
        let kind = match p.kind {
            ParamKind::Weight { .. } => "weight",
            ParamKind::Stat => "stat",
        };
        push_tensor(&mut blob, &mut table, name.to_string(), kind, p.value.shape().to_vec(), p.value.values());
    }
    for (label, opt) in [("adam_d", &tr.opt_d), ("adam_g", &tr.opt_g)] {
        for (pname, m) in &opt.m {
            push_tensor(&mut blob, &mut table, format!("{label}.m.{pname}"), "opt", vec![m.len()], m);
        }
        for (pname, v) in &opt.v {
            push_tensor(&mut blob, &mut table, format!("{label}.v.{pname}"), "opt", vec![v.len()], v);
        }
    }
    let rng: BTreeMap<String, StreamState> = [
        ("data".to_string(), tr.rng_data.state()),
        ("gumbel".to_string(), tr.rng_gumbel.state()),
        ("latent".to_string(), tr.rng_latent.state()),
    ]
    .into_iter()
    .collect();
    let meta = CkptMeta {
        model_config: tr.bundle.config.clone(),
        train_config: tr.cfg.clone(),
        stage: tr.stage,
        epoch_in_stage: tr.epoch_in_stage,
        fie_frozen: tr.bundle.encoder_frozen(),
        pairing: tr.pairing.clone(),
        vocab: tr.vocab.lines().map(str::to_string).collect(),
        rng,
        adam_d_step: tr.opt_d.step_count,
        adam_g_step: tr.opt_g.step_count,
        tensors: table,
    };
    let meta_json = serde_json::to_vec(&meta).expect("checkpoint meta serializes");

    let mut bytes = Vec::with_capacity(20 + meta_json.len() + blob.len());
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    bytes.extend_from_slice(&blob);

    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|source| TrainError::Io { path: tmp.clone(), source })?;
    fs::rename(&tmp, path).map_err(|source| TrainError::Io { path: path.into(), source })?;
    Ok(())
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

fn read_f32s(path: &Path, blob: &[u8], entry: &TensorEntry) -> Result<Vec<f32>> {
    let start = entry.offset as usize;
    let bytes = (entry.len as usize)
        .checked_mul(4)
        .ok_or_else(|| ckpt_err(path, format!("tensor {} has absurd length", entry.name)))?;
    let end = start
        .checked_add(bytes)
        .ok_or_else(|| ckpt_err(path, format!("tensor {} overflows the blob", entry.name)))?;
    if end > blob.len() {
        return Err(ckpt_err(
            path,
            format!("truncated: tensor {} needs bytes {start}..{end}, blob has {}", entry.name, blob.len()),
        ));
    }
    Ok(blob[start..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Restores a [`Trainer`] bit-exactly: parameters, optimizer moments, rng
/// stream positions, stage cursor, and pairing.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|source| TrainError::Io { path: path.into(), source })?;
    if bytes.len() < 20 {
        return Err(ckpt_err(path, format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[..8] != CKPT_MAGIC {
        return Err(ckpt_err(path, "bad magic; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(TrainError::CheckpointVersion { got: version, want: CKPT_VERSION });
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let meta_end = 20usize
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ckpt_err(path, "truncated: metadata extends past end of file"))?;
    let meta: CkptMeta = serde_json::from_slice(&bytes[20..meta_end])
        .map_err(|e| ckpt_err(path, format!("metadata parse failure: {e}")))?;
    let blob = &bytes[meta_end..];

    let mut bundle = ModelBundle::new(meta.model_config.clone(), meta.train_config.seed);
    let mut opt_d = Adam::from_config(&meta.train_config);
    let mut opt_g = Adam::from_config(&meta.train_config);
    opt_d.step_count = meta.adam_d_step;
    opt_g.step_count = meta.adam_g_step;

    let mut restored = 0usize;
    for entry in &meta.tensors {
        if entry.dtype != "f32" {
            return Err(ckpt_err(path, format!("tensor {} has dtype {}", entry.name, entry.dtype)));
        }
        let values = read_f32s(path, blob, entry)?;
        if let Some(rest) = entry.name.strip_prefix("adam_d.m.") {
            opt_d.m.insert(rest.to_string(), values);
        } else if let Some(rest) = entry.name.strip_prefix("adam_d.v.") {
            opt_d.v.insert(rest.to_string(), values);
        } else if let Some(rest) = entry.name.strip_prefix("adam_g.m.") {
            opt_g.m.insert(rest.to_string(), values);
        } else if let Some(rest) = entry.name.strip_prefix("adam_g.v.") {
            opt_g.v.insert(rest.to_string(), values);
        } else {
            if !bundle.params.contains(&entry.name) {
                return Err(ckpt_err(path, format!("unknown parameter {}", entry.name)));
            }
            let target = bundle.params.get_mut(&entry.name);
            if target.shape() != entry.shape.as_slice() {
                return Err(ckpt_err(
                    path,
                    format!("parameter {} has shape {:?}, expected {:?}", entry.name, entry.shape, target.shape()),
                ));
            }
            target.values_mut().copy_from_slice(&values);
            restored += 1;
        }
    }
    let expected = bundle.params.names().count();
    if restored != expected {
        return Err(ckpt_err(path, format!("restored {restored} of {expected} parameters")));
    }
    bundle.set_encoder_frozen(meta.fie_frozen);

    let stream = |name: &str| -> Result<Stream> {
        meta.rng
            .get(name)
            .map(Stream::restore)
            .ok_or_else(|| ckpt_err(path, format!("missing rng stream {name}")))
    };
    Ok(Trainer {
        bundle,
        stage: meta.stage,
        epoch_in_stage: meta.epoch_in_stage,
        pairing: meta.pairing.clone(),
        vocab: Vocab::from_lines(meta.vocab.iter().cloned()),
        opt_d,
        opt_g,
        rng_data: stream("data")?,
        rng_gumbel: stream("gumbel")?,
        rng_latent: stream("latent")?,
        cfg: meta.train_config,
    })
}

// ---------------------------------------------------------------------------
// Held-out evaluation

fn eval_chunks(records: &[usize], batch: usize) -> Vec<Vec<usize>> {
    records.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn pick_eval_captions(
    data: &LoadedData,
    records: &[usize],
    t_len: usize,
    rng: &mut Stream,
) -> Result<Vec<Caption>> {
    records
        .iter()
        .map(|&r| Ok(pick_caption(r, &data.manifest.records[r], &data.vocab, t_len, rng)?))
        .collect()
}

/// Mean cycle image loss (pixel plus feature term, at the configured
/// weights) over the given records: encode, roll out a caption at the
/// evaluation temperature, regenerate, compare. Deterministic in `seed`;
/// runs the generator in inference mode so no state mutates.
pub fn eval_cycle_image_loss(
    tr: &mut Trainer,
    data: &LoadedData,
    records: &[usize],
    seed: u64,
) -> Result<f64> {
    let mut rng_gumbel = Stream::new(seed, "eval-gumbel");
    let mut rng_latent = Stream::new(seed, "eval-latent");
    let mut total = 0.0;
    for chunk in eval_chunks(records, tr.cfg.batch_size) {
        let t: Tape<f32> = Tape::new();
        tr.bundle.params.set_trainable(|_| false);
        let lease = tr.bundle.params.lease(&t);
        let x = t.constant(stack_images(data, &chunk));
        let feature = tr.bundle.encoder.features(&t, &lease, x)?;
        let rollout = tr.bundle.captioner.run(
            &t,
            &lease,
            feature,
            CaptionMode::GumbelRollout { tau: tr.cfg.tau, rng: &mut rng_gumbel },
        )?;
        let phi = tr.bundle.text_enc.phi(&t, &lease, &rollout.soft)?;
        let (_, _, c) = tr.bundle.text_enc.condition(&t, &lease, phi, None)?;
        let z = t.constant(normal_tensor(&mut rng_latent, vec![chunk.len(), tr.bundle.config.z_dim]));
        let x_regen = tr.bundle.image_gen.generate(&t, &lease, &mut tr.bundle.params, z, c, false)?;
        let feat_regen = tr.bundle.encoder.features(&t, &lease, x_regen)?;
        let img = t.scale(l1_mean(&t, x_regen, x)?, tr.cfg.lambda1 as f32);
        let feat = t.scale(l1_mean(&t, feat_regen, feature)?, tr.cfg.lambda2 as f32);
        let loss = t.add(img, feat)?;
        total += scalar(&t, loss) * chunk.len() as f64;
    }
    Ok(total / records.len() as f64)
}

/// Greedy captions for the given records, as words.
pub fn greedy_captions(
    tr: &mut Trainer,
    data: &LoadedData,
    records: &[usize],
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in eval_chunks(records, tr.cfg.batch_size) {
        let t: Tape<f32> = Tape::new();
        tr.bundle.params.set_trainable(|_| false);
        let lease = tr.bundle.params.lease(&t);
        let x = t.constant(stack_images(data, &chunk));
        let feature = tr.bundle.encoder.features(&t, &lease, x)?;
        let ids = tr.bundle.captioner.greedy(&t, &lease, feature)?;
        for row in ids {
            out.push(
                row.iter()
                    .take_while(|&&id| id != crate::models::EOS)
                    .map(|&id| data.vocab.token(id).to_string())
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Fraction of records whose greedy caption names the image's fill color
/// as its first color word.
pub fn eval_color_accuracy(tr: &mut Trainer, data: &LoadedData, records: &[usize]) -> Result<f64> {
    let captions = greedy_captions(tr, data, records)?;
    let mut hits = 0usize;
    for (words, &rec) in captions.iter().zip(records) {
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        if data::first_color_word(&refs) == Some(data.manifest.records[rec].fill) {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Per-head classification accuracy of the image encoder on the given
/// records: (shape, color, size).
pub fn eval_fie_accuracy(
    tr: &mut Trainer,
    data: &LoadedData,
    records: &[usize],
) -> Result<[f64; 3]> {
    let mut hits = [0usize; 3];
    for chunk in eval_chunks(records, tr.cfg.batch_size) {
        let t: Tape<f32> = Tape::new();
        tr.bundle.params.set_trainable(|_| false);
        let lease = tr.bundle.params.lease(&t);
        let x = t.constant(stack_images(data, &chunk));
        let (ls, lc, lz) = tr.bundle.encoder.class_logits(&t, &lease, x)?;
        for (h, (logits, label)) in [
            (ls, chunk.iter().map(|&r| data.manifest.records[r].shape).collect::<Vec<_>>()),
            (lc, chunk.iter().map(|&r| data.manifest.records[r].fill).collect()),
            (lz, chunk.iter().map(|&r| data.manifest.records[r].size).collect()),
        ]
        .into_iter()
        .enumerate()
        {
            let v = t.value(logits);
            let classes = v.shape()[1];
            for (b, &want) in label.iter().enumerate() {
                let row = &v.values()[b * classes..(b + 1) * classes];
                let arg = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if arg == want {
                    hits[h] += 1;
                }
            }
        }
    }
    Ok(hits.map(|h| h as f64 / records.len() as f64))
}

/// Real-vs-fake accuracy of the image discriminator: real pairs scored
/// above 0.5 and generated pairs below, averaged.
pub fn eval_dx_accuracy(
    tr: &mut Trainer,
    data: &LoadedData,
    records: &[usize],
    seed: u64,
) -> Result<f64> {
    let mut rng = Stream::new(seed, "eval-dx");
    let mut correct = 0usize;
    for chunk in eval_chunks(records, tr.cfg.batch_size) {
        let t: Tape<f32> = Tape::new();
        tr.bundle.params.set_trainable(|_| false);
        let lease = tr.bundle.params.lease(&t);
        let caps = pick_eval_captions(data, &chunk, tr.bundle.config.t_len, &mut rng)?;
        let refs: Vec<&Caption> = caps.iter().collect();
        let hard = CaptionDisc::hard_steps(&t, &refs, tr.bundle.config.vocab_size);
        let phi = tr.bundle.text_enc.phi(&t, &lease, &hard)?;
        let (_, _, c) = tr.bundle.text_enc.condition(&t, &lease, phi, None)?;
        let z = t.constant(normal_tensor(&mut rng, vec![chunk.len(), tr.bundle.config.z_dim]));
        let x_real = t.constant(stack_images(data, &chunk));
        let fake = tr.bundle.image_gen.generate(&t, &lease, &mut tr.bundle.params, z, c, false)?;
        let s_real =
            tr.bundle.image_disc.score(&t, &lease, &mut tr.bundle.params, x_real, phi, 0, false)?;
        let s_fake =
            tr.bundle.image_disc.score(&t, &lease, &mut tr.bundle.params, fake, phi, 0, false)?;
        correct += t.value(s_real).values().iter().filter(|&&s| s > 0.5).count();
        correct += t.value(s_fake).values().iter().filter(|&&s| s < 0.5).count();
    }
    Ok(correct as f64 / (2 * records.len()) as f64)
}

/// Shape-head class distributions of images generated from the records'
/// captions; input rows for the inception-style score.
pub fn generated_class_probs(
    tr: &mut Trainer,
    data: &LoadedData,
    records: &[usize],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = Stream::new(seed, "eval-gen");
    let mut out = Vec::with_capacity(records.len());
    for chunk in eval_chunks(records, tr.cfg.batch_size) {
        let t: Tape<f32> = Tape::new();
        tr.bundle.params.set_trainable(|_| false);
        let lease = tr.bundle.params.lease(&t);
        let caps = pick_eval_captions(data, &chunk, tr.bundle.config.t_len, &mut rng)?;
        let refs: Vec<&Caption> = caps.iter().collect();
        let hard = CaptionDisc::hard_steps(&t, &refs, tr.bundle.config.vocab_size);
        let phi = tr.bundle.text_enc.phi(&t, &lease, &hard)?;
        let (_, _, c) = tr.bundle.text_enc.condition(&t, &lease, phi, None)?;
        let z = t.constant(normal_tensor(&mut rng, vec![chunk.len(), tr.bundle.config.z_dim]));
        let fake = tr.bundle.image_gen.generate(&t, &lease, &mut tr.bundle.params, z, c, false)?;
        let (ls, _, _) = tr.bundle.encoder.class_logits(&t, &lease, fake)?;
        let probs = t.softmax(ls, 1)?;
        let v = t.value(probs);
        let classes = v.shape()[1];
        for b in 0..chunk.len() {
            out.push(v.values()[b * classes..(b + 1) * classes].iter().map(|&p| f64::from(p)).collect());
        }
    }
    Ok(out)
}
