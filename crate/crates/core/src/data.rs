//! Synthetic image+caption corpus, caption preprocessing, and batching.
//!
//! Every image shows one flat-shaded shape with an outline on a plain
//! gray background that captions never mention. Generation is
//! deterministic: each sample draws from its own derived stream, so the
//! corpus is a pure function of `(n, seed, config)`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::models::{Caption, ImageSample, Vocab, EOS, UNK};
use crate::rng::Stream;
use crate::autodiff::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed dataset file {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("manifest version {got} unsupported (expected {want})")]
    Version { got: u32, want: u32 },
    #[error("caption empty after preprocessing: {raw:?}")]
    EmptyCaption { raw: String },
    #[error("record {record} has no caption with at least {min} words")]
    NoQualifyingCaption { record: usize, min: usize },
    #[error("batch size {batch} exceeds split size {available}")]
    BatchTooLarge { batch: usize, available: usize },
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}

pub type Result<V> = std::result::Result<V, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Attribute vocabulary

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "star", "cross"];

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 50, 47]),
    ("blue", [38, 80, 210]),
    ("green", [40, 160, 70]),
    ("yellow", [235, 215, 50]),
    ("purple", [150, 60, 200]),
    ("orange", [240, 140, 30]),
    ("cyan", [50, 195, 215]),
    ("pink", [240, 120, 175]),
];

pub const SIZES: [&str; 3] = ["small", "medium", "large"];

const BACKGROUND: [u8; 3] = [128, 128, 128];

/// Index of the first color word in a token stream, if any. The templates
/// always name the fill color before the outline color, so this recovers
/// the fill attribute from a caption.
pub fn first_color_word(tokens: &[&str]) -> Option<usize> {
    for t in tokens {
        if let Some(i) = COLORS.iter().position(|(name, _)| name == t) {
            return Some(i);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Caption templates

/// Paraphrase frames. `{f}` fill color, `{o}` outline color, `{s}` shape,
/// `{z}` size. The fill color always appears before the outline color.
const TEMPLATES: [&str; 14] = [
    "a {z} {f} {s} with a {o} outline",
    "the {f} {s} has a {o} border",
    "a {f} {s} outlined in {o}",
    "there is a {z} {f} {s} in the picture",
    "a {z} {f} {s}",
    "this {s} is {f} with {o} edges",
    "a {f} colored {s} of {z} size",
    "one {z} {s} filled with {f}",
    "the picture shows a {f} {s}",
    "a {s} that is {f} and {z}",
    "the {z} {s} is filled {f} and edged {o}",
    "a {f} {s} with {o} trim",
    "the {s} here is {f}",
    "{f} {s} with a thin {o} line",
];

const CAPTIONS_PER_IMAGE: usize = 10;

fn render_template(idx: usize, shape: usize, fill: usize, outline: usize, size: usize) -> String {
    TEMPLATES[idx]
        .replace("{s}", SHAPES[shape])
        .replace("{f}", COLORS[fill].0)
        .replace("{o}", COLORS[outline].0)
        .replace("{z}", SIZES[size])
}

// ---------------------------------------------------------------------------
// Manifest

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub shape: usize,
    pub fill: usize,
    pub outline: usize,
    pub size: usize,
    pub captions: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_size: usize,
    pub vocab_file: String,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Rendering

/// Signed distances; negative inside. All take centered coordinates and a
/// nominal radius.
fn sd_circle(x: f64, y: f64, r: f64) -> f64 {
    (x * x + y * y).sqrt() - r
}

fn sd_square(x: f64, y: f64, r: f64) -> f64 {
    x.abs().max(y.abs()) - r
}

fn sd_triangle(x: f64, y: f64, r: f64) -> f64 {
    let k = 3.0f64.sqrt();
    let (mut px, mut py) = (x.abs() - r, y + r / k);
    if px + k * py > 0.0 {
        let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
        px = nx;
        py = ny;
    }
    px -= px.clamp(-2.0 * r, 0.0);
    -(px * px + py * py).sqrt() * py.signum()
}

fn sd_star(x: f64, y: f64, r: f64) -> f64 {
    const K1: (f64, f64) = (0.809_016_994_375, -0.587_785_252_292);
    const K2: (f64, f64) = (-K1.0, K1.1);
    let rf = 0.5;
    let (mut px, mut py) = (x.abs(), y);
    let d1 = (K1.0 * px + K1.1 * py).max(0.0) * 2.0;
    px -= d1 * K1.0;
    py -= d1 * K1.1;
    let d2 = (K2.0 * px + K2.1 * py).max(0.0) * 2.0;
    px -= d2 * K2.0;
    py -= d2 * K2.1;
    px = px.abs();
    py -= r;
    let (bax, bay) = (rf * -K1.1, rf * K1.0 - 1.0);
    let h = ((px * bax + py * bay) / (bax * bax + bay * bay)).clamp(0.0, r);
    let (dx, dy) = (px - bax * h, py - bay * h);
    (dx * dx + dy * dy).sqrt() * (py * bax - px * bay).signum()
}

fn sd_cross(x: f64, y: f64, r: f64) -> f64 {
    let (bx, by) = (r, r * 0.35);
    let (mut px, mut py) = (x.abs(), y.abs());
    if py > px {
        std::mem::swap(&mut px, &mut py);
    }
    let (qx, qy) = (px - bx, py - by);
    let k = qy.max(qx);
    let (wx, wy) = if k > 0.0 { (qx, qy) } else { (by - px, -k) };
    k.signum() * (wx.max(0.0).powi(2) + wy.max(0.0).powi(2)).sqrt()
}

fn signed_distance(shape: usize, x: f64, y: f64, r: f64) -> f64 {
    match shape {
        0 => sd_circle(x, y, r),
        1 => sd_square(x, y, r),
        2 => sd_triangle(x, y, r),
        3 => sd_star(x, y, r),
        4 => sd_cross(x, y, r),
        _ => unreachable!("shape index {shape}"),
    }
}

/// Rasterizes one sample into RGB8 rows.
pub fn render_image(
    size: usize,
    shape: usize,
    fill: usize,
    outline: usize,
    size_class: usize,
    cx: f64,
    cy: f64,
) -> Vec<u8> {
    let s = size as f64;
    let radius = s * [0.16, 0.24, 0.32][size_class];
    let line = (s / 21.0).max(1.2);
    let mut out = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let d = signed_distance(shape, px as f64 + 0.5 - cx, py as f64 + 0.5 - cy, radius);
            let rgb = if d <= -line {
                COLORS[fill].1
            } else if d <= line {
                COLORS[outline].1
            } else {
                BACKGROUND
            };
            out.extend_from_slice(&rgb);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { image_size: 64 }
    }
}

/// Attribute draw for one sample; exposed so marginals can be tested
/// without rasterizing.
pub fn sample_attrs(rng: &mut Stream) -> (usize, usize, usize, usize) {
    let shape = rng.below(SHAPES.len());
    let fill = rng.below(COLORS.len());
    let mut outline = rng.below(COLORS.len() - 1);
    if outline >= fill {
        outline += 1;
    }
    let size = rng.below(SIZES.len());
    (shape, fill, outline, size)
}

/// Generates `n` samples under `out_dir` (`manifest.json`, `vocab.txt`,
/// `images/*.png`) and returns the manifest.
pub fn synth_generate(n: usize, seed: u64, config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    assert!(n >= 10, "corpus needs at least 10 samples");
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = Stream::new(seed, &format!("sample-{i}"));
        let (shape, fill, outline, size) = sample_attrs(&mut rng);
        let jitter = config.image_size as f64 / 8.0;
        let cx = config.image_size as f64 / 2.0 + rng.uniform_in(-jitter, jitter);
        let cy = config.image_size as f64 / 2.0 + rng.uniform_in(-jitter, jitter);

        let mut template_ids: Vec<usize> = (0..TEMPLATES.len()).collect();
        rng.shuffle(&mut template_ids);
        let captions: Vec<String> = template_ids[..CAPTIONS_PER_IMAGE]
            .iter()
            .map(|&ti| render_template(ti, shape, fill, outline, size))
            .collect();

        let rgb = render_image(config.image_size, shape, fill, outline, size, cx, cy);
        let name = format!("images/{i:05}.png");
        let path = out_dir.join(&name);
        write_png(&path, config.image_size, &rgb)?;
        records.push(SampleRecord {
            image: name,
            shape,
            fill,
            outline,
            size,
            captions,
            split: Split::Train,
        });
    }

    // 90/10 split from its own stream so changing n alone reshuffles
    // nothing else.
    let mut split_rng = Stream::new(seed, "split");
    let mut order: Vec<usize> = (0..n).collect();
    split_rng.shuffle(&mut order);
    let n_test = (n / 10).max(1);
    for &i in &order[..n_test] {
        records[i].split = Split::Test;
    }

    let vocab = build_vocab(&records);
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        image_size: config.image_size,
        vocab_file: VOCAB_FILE.to_string(),
        records,
    };
    write_manifest(out_dir, &manifest, &vocab)?;
    Ok(manifest)
}

fn build_vocab(records: &[SampleRecord]) -> Vocab {
    let mut tokens = BTreeSet::new();
    for r in records {
        for c in &r.captions {
            for t in normalize(c) {
                tokens.insert(t);
            }
        }
    }
    Vocab::build(tokens.iter().map(String::as_str))
}

fn write_png(path: &Path, size: usize, rgb: &[u8]) -> Result<()> {
    let img = image::RgbImage::from_raw(size as u32, size as u32, rgb.to_vec())
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| DataError::Malformed { path: path.to_path_buf(), msg: e.to_string() })
}

fn write_manifest(dir: &Path, manifest: &DatasetManifest, vocab: &Vocab) -> Result<()> {
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    let mut f = fs::File::create(&mpath).map_err(io_err(&mpath))?;
    f.write_all(json.as_bytes()).map_err(io_err(&mpath))?;
    let vpath = dir.join(VOCAB_FILE);
    let mut lines = String::new();
    for t in vocab.lines() {
        lines.push_str(t);
        lines.push('\n');
    }
    fs::write(&vpath, lines).map_err(io_err(&vpath))?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| DataError::Malformed { path: mpath.clone(), msg: e.to_string() })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DataError::Version { got: manifest.version, want: MANIFEST_VERSION });
    }
    for (i, r) in manifest.records.iter().enumerate() {
        if r.captions.len() != CAPTIONS_PER_IMAGE {
            return Err(DataError::Malformed {
                path: mpath,
                msg: format!("record {i} has {} captions, expected {CAPTIONS_PER_IMAGE}", r.captions.len()),
            });
        }
    }
    Ok(manifest)
}

pub fn load_vocab(dir: &Path, manifest: &DatasetManifest) -> Result<Vocab> {
    let vpath = dir.join(&manifest.vocab_file);
    let text = fs::read_to_string(&vpath).map_err(io_err(&vpath))?;
    Ok(Vocab::from_lines(text.lines().map(str::to_string)))
}

/// Decodes a PNG into a `(3, H, W)` tensor in [-1, 1].
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| DataError::Malformed { path: path.to_path_buf(), msg: e.to_string() })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut chw = vec![0f32; 3 * h * w];
    for (y, x, p) in img.enumerate_pixels().map(|(x, y, p)| (y as usize, x as usize, p)) {
        for c in 0..3 {
            chw[c * h * w + y * w + x] = (f32::from(p.0[c]) / 255.0) * 2.0 - 1.0;
        }
    }
    Ok(Tensor::from_vec(vec![3, h, w], chw))
}

/// Writes a `(3, H, W)` tensor in [-1, 1] (values clamped) as a PNG.
pub fn save_png(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    let shape = pixels.shape();
    assert_eq!(shape.len(), 3, "expected (3, H, W) pixels");
    assert_eq!(shape[0], 3, "expected 3 channels");
    let (h, w) = (shape[1], shape[2]);
    let v = pixels.values();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let p = (f64::from(v[c * h * w + y * w + x]).clamp(-1.0, 1.0) + 1.0) / 2.0;
                rgb.push((p * 255.0).round() as u8);
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb).expect("buffer matches dimensions");
    img.save(path).map_err(|e| DataError::Malformed { path: path.to_path_buf(), msg: e.to_string() })
}

/// Decodes a record's image into a `(3, S, S)` tensor in [-1, 1].
pub fn load_image(dir: &Path, record: &SampleRecord) -> Result<Tensor<f32>> {
    load_png(&dir.join(&record.image))
}

pub fn load_sample(dir: &Path, record: &SampleRecord) -> Result<ImageSample> {
    Ok(ImageSample {
        pixels: load_image(dir, record)?,
        shape: record.shape,
        fill: record.fill,
        outline: record.outline,
        size: record.size,
        captions: record.captions.clone(),
    })
}

// ---------------------------------------------------------------------------
// Caption preprocessing

/// Lowercases, strips `.`/`,`/`;`, and splits on whitespace.
pub fn tokenize(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .replace(['.', ',', ';'], " ")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

use tokenize as normalize;

/// Applies the caption rules: lowercase, strip punctuation, truncate to
/// `t_len` words, map out-of-vocabulary tokens to the unknown id, pad with
/// the end marker to exactly `t_len`.
pub fn preprocess_caption(raw: &str, vocab: &Vocab, t_len: usize) -> Result<Caption> {
    let words = normalize(raw);
    if words.is_empty() {
        return Err(DataError::EmptyCaption { raw: raw.to_string() });
    }
    let mut ids: Vec<usize> =
        words.iter().take(t_len).map(|w| vocab.id(w).unwrap_or(UNK)).collect();
    ids.resize(t_len, EOS);
    Ok(Caption::new(ids, t_len, vocab.len())?)
}

pub const MIN_CAPTION_WORDS: usize = 5;

/// Uniform choice among the record's captions that still have at least
/// five words after preprocessing.
pub fn pick_caption(
    record_idx: usize,
    record: &SampleRecord,
    vocab: &Vocab,
    t_len: usize,
    rng: &mut Stream,
) -> Result<Caption> {
    let mut qualifying = Vec::new();
    for raw in &record.captions {
        let cap = preprocess_caption(raw, vocab, t_len)?;
        if cap.word_count() >= MIN_CAPTION_WORDS {
            qualifying.push(cap);
        }
    }
    if qualifying.is_empty() {
        return Err(DataError::NoQualifyingCaption { record: record_idx, min: MIN_CAPTION_WORDS });
    }
    let pick = rng.below(qualifying.len());
    Ok(qualifying.swap_remove(pick))
}

// ---------------------------------------------------------------------------
// Batching

/// Image/caption pairing for the GAN phases.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum PairingMode {
    /// Every image trains against one of its own captions.
    Paired,
    /// Fixed uniform shuffle: image `i` trains against the captions of
    /// record `perm[i]`. Persisted with the run so epochs agree.
    Unpaired { perm: Vec<usize> },
}

impl PairingMode {
    pub fn unpaired(n: usize, rng: &mut Stream) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        PairingMode::Unpaired { perm }
    }

    /// Record index whose captions pair with image slot `i`.
    pub fn caption_source(&self, i: usize) -> usize {
        match self {
            PairingMode::Paired => i,
            PairingMode::Unpaired { perm } => perm[i],
        }
    }
}

/// One epoch of batches over `indices`, reshuffled by `rng`. Every index
/// appears exactly once; a trailing batch of one is merged into its
/// predecessor so batch statistics stay defined.
pub fn epoch_batches(indices: &[usize], batch_size: usize, rng: &mut Stream) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > indices.len() {
        return Err(DataError::BatchTooLarge { batch: batch_size, available: indices.len() });
    }
    let mut order = indices.to_vec();
    rng.shuffle(&mut order);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    Ok(batches)
}
