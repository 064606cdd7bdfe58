//! `cyclecap` — synthesize shape corpora, run the three training phases,
//! caption/imagine/cycle single samples, evaluate, and run the exact
//! binomial test.
//!
//! Exit codes: 0 ok, 2 bad arguments, 3 bad data, 4 training aborted.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use cyclecap_core::autodiff::{Tape, Tensor};
use cyclecap_core::data::{
    self, load_png, preprocess_caption, save_png, tokenize, PairingMode, Split, SynthConfig,
};
use cyclecap_core::losses::l1_mean;
use cyclecap_core::metrics::{self, EvalPair, MetricReport};
use cyclecap_core::models::{Caption, CaptionDisc, EOS};
use cyclecap_core::rng::Stream;
use cyclecap_core::training::{
    self, load_checkpoint, normal_tensor, save_checkpoint, LoadedData, LossLog, Stage, TrainError,
    Trainer,
};

use crate::config::RunConfig;

const CONFIG_FILE: &str = "config.resolved";

#[derive(Parser)]
#[command(name = "cyclecap", version, about = "Cycle-consistent image/caption toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a shape-and-caption dataset
    SynthData {
        /// Number of images (>= 10; one in ten goes to the held-out split)
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset directory to create
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Caption pretraining, then the text-to-image GAN (phases 1 and 2)
    Pretrain(PretrainArgs),
    /// Joint cycle training from a phase-2 checkpoint
    Train(TrainArgs),
    /// Print a greedy caption for one PNG
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Generate one PNG from text
    Imagine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Image -> caption -> image round trip with a loss breakdown
    Cycle {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score captions and generations on the held-out split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (falls back to $CYCLECAP_DATA_DIR)
        #[arg(long, env = "CYCLECAP_DATA_DIR")]
        data: PathBuf,
        /// Optional JSON report path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Statistics helpers
    #[command(subcommand)]
    Stats(StatsCmd),
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory (falls back to $CYCLECAP_DATA_DIR)
    #[arg(long, env = "CYCLECAP_DATA_DIR")]
    data: PathBuf,
    /// Output directory for checkpoints, loss CSVs, and the resolved config
    #[arg(long)]
    out: PathBuf,
    /// key=value config file; --set and flags win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config value)
    #[arg(long)]
    seed: Option<u64>,
    /// Start from the small model preset instead of the full one
    #[arg(long)]
    smoke: bool,
    /// Override one config key, e.g. --set epochs_pretrain=5 or --set model.gx_base=16
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (falls back to $CYCLECAP_DATA_DIR)
    #[arg(long, env = "CYCLECAP_DATA_DIR")]
    data: PathBuf,
    /// Phase-2 checkpoint to start from
    #[arg(long)]
    from_pretrain: PathBuf,
    /// Output directory for the main checkpoint, loss CSV, and resolved config
    #[arg(long)]
    out: PathBuf,
    /// Drop the cycle-consistency terms (adversarial-only baseline)
    #[arg(long)]
    no_cycle: bool,
    /// Shuffle the image/caption pairing so no aligned pairs are seen
    #[arg(long)]
    unpaired: bool,
    /// key=value config file; --set and flags win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restart the sampling streams from a new master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key (model.* keys are fixed by the checkpoint)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Two-sided exact binomial test of k successes in n trials against p0
    Binom {
        #[arg(long)]
        k: u64,
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 0.5)]
        p0: f64,
    },
}

// ---------------------------------------------------------------------------
// Error plumbing

enum CliError {
    Args(String),
    Data(String),
    Aborted(String),
    Internal(String),
}

impl CliError {
    fn class(&self) -> &'static str {
        match self {
            CliError::Args(_) => "args",
            CliError::Data(_) => "data",
            CliError::Aborted(_) => "aborted",
            CliError::Internal(_) => "internal",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Args(_) => 2,
            CliError::Data(_) | CliError::Internal(_) => 3,
            CliError::Aborted(_) => 4,
        }
    }

    fn msg(&self) -> &str {
        match self {
            CliError::Args(m) | CliError::Data(m) | CliError::Aborted(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Config(_) => CliError::Args(e.to_string()),
            TrainError::Diverged { .. } => CliError::Aborted(e.to_string()),
            TrainError::Checkpoint { .. }
            | TrainError::CheckpointVersion { .. }
            | TrainError::Io { .. }
            | TrainError::Data(_) => CliError::Data(e.to_string()),
            TrainError::Model(_) | TrainError::Autodiff(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: class={} msg={:?}", e.class(), e.msg());
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::SynthData { n, seed, out, image_size } => synth_data(n, seed, &out, image_size),
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Train(a) => train(a),
        Cmd::Caption { ckpt, image } => caption(&ckpt, &image),
        Cmd::Imagine { ckpt, text, seed, out } => imagine(&ckpt, &text, seed, &out),
        Cmd::Cycle { ckpt, image, out_dir, seed } => cycle(&ckpt, &image, &out_dir, seed),
        Cmd::Eval { ckpt, data, out } => eval(&ckpt, &data, out.as_deref()),
        Cmd::Stats(StatsCmd::Binom { k, n, p0 }) => stats_binom(k, n, p0),
    }
}

// ---------------------------------------------------------------------------
// Subcommands

fn synth_data(n: usize, seed: u64, out: &Path, image_size: usize) -> Result<(), CliError> {
    if n < 10 {
        return Err(CliError::Args("--n must be at least 10".into()));
    }
    if image_size < 16 || !image_size.is_multiple_of(16) {
        return Err(CliError::Args("--image-size must be a positive multiple of 16".into()));
    }
    let manifest = data::synth_generate(n, seed, &SynthConfig { image_size }, out)?;
    println!(
        "wrote {} images ({} train / {} held out) to {}",
        n,
        manifest.split_indices(Split::Train).len(),
        manifest.split_indices(Split::Test).len(),
        out.display()
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<(), CliError> {
    let mut rc = RunConfig::new(a.smoke);
    if let Some(path) = &a.config {
        rc.apply_file(path, true).map_err(CliError::Args)?;
    }
    rc.apply_sets(&a.set, true).map_err(CliError::Args)?;
    if let Some(seed) = a.seed {
        rc.train.seed = seed;
    }
    let data = LoadedData::load(&a.data)?;
    let mut tr = Trainer::new(&rc.model, &rc.train, &data)?;
    rc.model.vocab_size = tr.bundle.config.vocab_size;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    rc.write(&a.out.join(CONFIG_FILE)).map_err(|e| io_err(&a.out, e))?;

    let started = Instant::now();
    let mut fie_log = LossLog::new(&training::FIE_LOG_COLUMNS);
    run_stage(&mut tr, &data, Stage::FieClassifier, &mut fie_log, &a.out)?;
    fie_log.write_csv(&a.out.join("fie.csv"))?;

    let mut mle_log = LossLog::new(&training::MLE_LOG_COLUMNS);
    run_stage(&mut tr, &data, Stage::CaptionerMle, &mut mle_log, &a.out)?;
    mle_log.write_csv(&a.out.join("mle.csv"))?;
    save_checkpoint(&tr, &a.out.join("phase1.ckpt"))?;

    let mut t2i_log = LossLog::new(&training::T2I_LOG_COLUMNS);
    run_stage(&mut tr, &data, Stage::ImageGan, &mut t2i_log, &a.out)?;
    t2i_log.write_csv(&a.out.join("t2i.csv"))?;
    save_checkpoint(&tr, &a.out.join("phase2.ckpt"))?;

    println!(
        "pretrain finished in {:.0}s; checkpoint: {}",
        started.elapsed().as_secs_f64(),
        a.out.join("phase2.ckpt").display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let data = LoadedData::load(&a.data)?;
    let mut tr = load_checkpoint(&a.from_pretrain)?;
    check_compat(&tr, &data)?;
    if tr.stage != Stage::CycleGan {
        return Err(CliError::Args(format!(
            "--from-pretrain checkpoint is at stage {}, expected {}",
            tr.stage.name(),
            Stage::CycleGan.name()
        )));
    }

    let mut rc = RunConfig { model: tr.bundle.config.clone(), train: tr.cfg.clone() };
    if let Some(path) = &a.config {
        rc.apply_file(path, false).map_err(CliError::Args)?;
    }
    rc.apply_sets(&a.set, false).map_err(CliError::Args)?;
    if a.no_cycle {
        rc.train.cycle_enabled = false;
    }
    if a.unpaired {
        rc.train.unpaired = true;
    }
    if let Some(seed) = a.seed {
        rc.train.seed = seed;
    }
    rc.train.validate()?;
    tr.cfg = rc.train.clone();
    if let Some(seed) = a.seed {
        tr.reseed(seed, data.train.len());
    }
    if tr.cfg.unpaired && matches!(tr.pairing, PairingMode::Paired) {
        tr.pairing =
            PairingMode::unpaired(data.train.len(), &mut Stream::new(tr.cfg.seed, "pairing"));
    }
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    rc.write(&a.out.join(CONFIG_FILE)).map_err(|e| io_err(&a.out, e))?;

    let started = Instant::now();
    let mut log = LossLog::new(&training::CYCLE_LOG_COLUMNS);
    run_stage(&mut tr, &data, Stage::CycleGan, &mut log, &a.out)?;
    log.write_csv(&a.out.join("cycle_train.csv"))?;
    save_checkpoint(&tr, &a.out.join("main.ckpt"))?;

    let eval_seed = tr.cfg.seed;
    let cyc = training::eval_cycle_image_loss(&mut tr, &data, &data.test, eval_seed)?;
    let acc = training::eval_color_accuracy(&mut tr, &data, &data.test)?;
    println!(
        "train finished in {:.0}s; held-out cycle_image_loss={cyc:.4} color_accuracy={acc:.3}; checkpoint: {}",
        started.elapsed().as_secs_f64(),
        a.out.join("main.ckpt").display()
    );
    Ok(())
}

/// Drives one stage epoch-by-epoch with a progress line per epoch. A
/// `last_good.ckpt` is refreshed after every finished epoch so a diverged
/// run can restart from it.
fn run_stage(
    tr: &mut Trainer,
    data: &LoadedData,
    stage: Stage,
    log: &mut LossLog,
    out: &Path,
) -> Result<(), CliError> {
    if tr.stage != stage {
        return Err(CliError::Args(format!(
            "trainer is at stage {}, expected {}",
            tr.stage.name(),
            stage.name()
        )));
    }
    let last_good = out.join("last_good.ckpt");
    while tr.stage == stage {
        let epoch = tr.epoch_in_stage;
        let planned = tr.stage_epochs();
        let clock = Instant::now();
        if let Err(e) = tr.run_epoch(data, log) {
            return Err(match e {
                TrainError::Diverged { stage, epoch, step, .. } => TrainError::Diverged {
                    stage,
                    epoch,
                    step,
                    last_good: last_good.exists().then(|| last_good.clone()),
                }
                .into(),
                other => other.into(),
            });
        }
        save_checkpoint(tr, &last_good)?;
        let means = log
            .columns
            .iter()
            .map(|c| format!("{c}={:.4}", log.epoch_mean(c, epoch).unwrap_or(f64::NAN)))
            .collect::<Vec<_>>()
            .join(" ");
        eprintln!(
            "[{}] epoch {}/{} ({:.1}s) {means}",
            stage.name(),
            epoch + 1,
            planned,
            clock.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn caption(ckpt: &Path, image: &Path) -> Result<(), CliError> {
    let mut tr = load_checkpoint(ckpt)?;
    let pixels = load_one(&tr, image)?;
    let ids = greedy_ids(&mut tr, &pixels)?;
    println!("{}", words_of(&tr, &ids).join(" "));
    Ok(())
}

fn imagine(ckpt: &Path, text: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    let mut tr = load_checkpoint(ckpt)?;
    let cap = preprocess_caption(text, &tr.vocab, tr.bundle.config.t_len)
        .map_err(|e| CliError::Args(format!("--text: {e}")))?;
    let img = generate_from_caption(&mut tr, &cap, seed)?;
    save_png(out, &img)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cycle(ckpt: &Path, image: &Path, out_dir: &Path, seed: u64) -> Result<(), CliError> {
    let mut tr = load_checkpoint(ckpt)?;
    let pixels = load_one(&tr, image)?;
    let ids = greedy_ids(&mut tr, &pixels)?;
    let words = words_of(&tr, &ids);
    let cap =
        Caption::new(ids, tr.bundle.config.t_len, tr.vocab.len()).map_err(TrainError::from)?;
    let regen = generate_from_caption(&mut tr, &cap, seed)?;

    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    save_png(&out_dir.join("regen.png"), &regen)?;
    let cap_path = out_dir.join("caption.txt");
    fs::write(&cap_path, words.join(" ") + "\n").map_err(|e| io_err(&cap_path, e))?;

    let (l1_img, l1_feat) = cycle_distance(&mut tr, &pixels, &regen)?;
    println!("caption: {}", words.join(" "));
    println!(
        "cyc_img={:.4} cyc_feat={:.4} (pixel_l1={l1_img:.4} feature_l1={l1_feat:.4})",
        tr.cfg.lambda1 * l1_img,
        tr.cfg.lambda2 * l1_feat
    );
    println!("wrote {}", out_dir.join("regen.png").display());
    Ok(())
}

fn eval(ckpt: &Path, data_dir: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let mut tr = load_checkpoint(ckpt)?;
    let data = LoadedData::load(data_dir)?;
    check_compat(&tr, &data)?;
    let held = data.test.clone();

    let candidates = training::greedy_captions(&mut tr, &data, &held)?;
    let pairs: Vec<EvalPair> = held
        .iter()
        .zip(candidates)
        .map(|(&i, cand)| {
            let refs = data.manifest.records[i].captions.iter().map(|c| tokenize(c)).collect();
            EvalPair::new(cand, refs)
        })
        .collect();
    let (bleu4, rouge_l, meteor_lite, cider) = MetricReport::text_metrics(&pairs);

    let eval_seed = tr.cfg.seed;
    let probs = training::generated_class_probs(&mut tr, &data, &held, eval_seed)?;
    let splits = if probs.len() >= 20 { 10 } else { 1 };
    let (inception_mean, inception_std) = metrics::inception_score(&probs, splits);

    let acc = training::eval_color_accuracy(&mut tr, &data, &held)?;
    let n = held.len() as u64;
    let k = (acc * held.len() as f64).round() as u64;
    let p0 = 1.0 / tr.bundle.config.num_colors as f64;
    let p = metrics::binomial_test_two_sided(k, n, p0);

    let report = MetricReport {
        bleu4,
        rouge_l,
        meteor_lite,
        cider,
        inception_mean,
        inception_std,
        binomial: Some((k, n, p)),
    };
    print!("{}", metrics::report_table(&[("greedy".to_string(), report.clone())]));
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(path, json).map_err(|e| io_err(path, e))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn stats_binom(k: u64, n: u64, p0: f64) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Args("--n must be positive".into()));
    }
    if k > n {
        return Err(CliError::Args("--k must not exceed --n".into()));
    }
    if !p0.is_finite() || !(0.0..=1.0).contains(&p0) {
        return Err(CliError::Args("--p0 must lie in [0, 1]".into()));
    }
    println!("{}", sci(metrics::binomial_test_two_sided(k, n, p0)));
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared inference helpers

fn check_compat(tr: &Trainer, data: &LoadedData) -> Result<(), CliError> {
    if tr.bundle.config.image_size != data.manifest.image_size {
        return Err(CliError::Data(format!(
            "checkpoint expects {}px images, dataset has {}px",
            tr.bundle.config.image_size, data.manifest.image_size
        )));
    }
    if !tr.vocab.lines().eq(data.vocab.lines()) {
        return Err(CliError::Data("dataset vocabulary differs from the checkpoint's".into()));
    }
    Ok(())
}

fn load_one(tr: &Trainer, image: &Path) -> Result<Tensor<f32>, CliError> {
    let pixels = load_png(image)?;
    let s = tr.bundle.config.image_size;
    if pixels.shape() != [3, s, s] {
        return Err(CliError::Data(format!(
            "{}: expected a {s}x{s} RGB png, got shape {:?}",
            image.display(),
            pixels.shape()
        )));
    }
    Ok(pixels)
}

fn greedy_ids(tr: &mut Trainer, pixels: &Tensor<f32>) -> Result<Vec<usize>, TrainError> {
    let t: Tape<f32> = Tape::new();
    tr.bundle.params.set_trainable(|_| false);
    let lease = tr.bundle.params.lease(&t);
    let s = tr.bundle.config.image_size;
    let x = t.constant(Tensor::from_vec(vec![1, 3, s, s], pixels.values().to_vec()));
    let feature = tr.bundle.encoder.features(&t, &lease, x)?;
    let ids = tr.bundle.captioner.greedy(&t, &lease, feature)?;
    Ok(ids.into_iter().next().expect("one row"))
}

fn words_of(tr: &Trainer, ids: &[usize]) -> Vec<String> {
    ids.iter().take_while(|&&id| id != EOS).map(|&id| tr.vocab.token(id).to_string()).collect()
}

fn generate_from_caption(
    tr: &mut Trainer,
    cap: &Caption,
    seed: u64,
) -> Result<Tensor<f32>, TrainError> {
    let t: Tape<f32> = Tape::new();
    tr.bundle.params.set_trainable(|_| false);
    let lease = tr.bundle.params.lease(&t);
    let steps = CaptionDisc::hard_steps(&t, &[cap], tr.vocab.len());
    let phi = tr.bundle.text_enc.phi(&t, &lease, &steps)?;
    let (_, _, c) = tr.bundle.text_enc.condition(&t, &lease, phi, None)?;
    let z = t.constant(normal_tensor(
        &mut Stream::new(seed, "imagine"),
        vec![1, tr.bundle.config.z_dim],
    ));
    let x = tr.bundle.image_gen.generate(&t, &lease, &mut tr.bundle.params, z, c, false)?;
    let full = t.value(x);
    let s = tr.bundle.config.image_size;
    Ok(Tensor::from_vec(vec![3, s, s], full.values().to_vec()))
}

fn cycle_distance(
    tr: &mut Trainer,
    a: &Tensor<f32>,
    b: &Tensor<f32>,
) -> Result<(f64, f64), TrainError> {
    let t: Tape<f32> = Tape::new();
    tr.bundle.params.set_trainable(|_| false);
    let lease = tr.bundle.params.lease(&t);
    let s = tr.bundle.config.image_size;
    let xa = t.constant(Tensor::from_vec(vec![1, 3, s, s], a.values().to_vec()));
    let xb = t.constant(Tensor::from_vec(vec![1, 3, s, s], b.values().to_vec()));
    let fa = tr.bundle.encoder.features(&t, &lease, xa)?;
    let fb = tr.bundle.encoder.features(&t, &lease, xb)?;
    let img = l1_mean(&t, xb, xa)?;
    let feat = l1_mean(&t, fb, fa)?;
    Ok((f64::from(t.value_scalar(img)), f64::from(t.value_scalar(feat))))
}

/// `1.247e-09` style: three decimals, at-least-two-digit exponent.
fn sci(x: f64) -> String {
    let s = format!("{x:.3e}");
    match s.split_once('e') {
        Some((m, e)) => {
            let (sign, digits) = match e.strip_prefix('-') {
                Some(d) => ("-", d),
                None => ("", e),
            };
            format!("{m}e{sign}{digits:0>2}")
        }
        None => s,
    }
}
