//! Shared model-facing types and the parameter bundle for the six
//! networks: frozen image encoder, caption generator/discriminator, text
//! encoder with conditioning heads, and image generator/discriminator.

mod nets;

pub use nets::{
    CaptionDisc, CaptionMode, CaptionRollout, Captioner, ImageDisc, ImageEncoder, ImageGen,
    TextEncoder,
};

use std::collections::BTreeMap;

use crate::autodiff::{Scalar, Tensor};
use crate::nn::ParamSet;
use crate::rng::Stream;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("caption length {got} does not match configured length {want}")]
    BadCaptionLength { got: usize, want: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("tokens continue after the first end marker at position {at}")]
    BrokenEosSuffix { at: usize },
    #[error("image encoder must be pretrained and frozen before feature extraction")]
    EncoderNotFrozen,
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

pub type Result<V> = std::result::Result<V, ModelError>;

// ---------------------------------------------------------------------------
// Vocabulary

pub const EOS: usize = 0;
pub const BOS: usize = 1;
pub const UNK: usize = 2;

const RESERVED: [&str; 3] = ["<eos>", "<bos>", "<unk>"];

/// Token/id bijection with ids dense from 0. Slots 0..3 are reserved for
/// the end marker, the begin marker, and the unknown token, in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Builds from corpus tokens; corpus ids start at 3 in sorted order so
    /// the mapping is independent of iteration order.
    pub fn build<'a>(corpus_tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut uniq: std::collections::BTreeSet<&str> = corpus_tokens.into_iter().collect();
        for r in RESERVED {
            uniq.remove(r);
        }
        let tokens: Vec<String> =
            RESERVED.iter().map(|s| s.to_string()).chain(uniq.into_iter().map(str::to_string)).collect();
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self { tokens, index }
    }

    pub fn from_lines(lines: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = lines.into_iter().collect();
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }
}

// ---------------------------------------------------------------------------
// Captions

/// Hard caption: exactly `T` token ids where everything after the first
/// end marker is also the end marker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    ids: Vec<usize>,
}

impl Caption {
    pub fn new(ids: Vec<usize>, t_len: usize, vocab_size: usize) -> Result<Self> {
        if ids.len() != t_len {
            return Err(ModelError::BadCaptionLength { got: ids.len(), want: t_len });
        }
        let mut seen_eos = false;
        for (i, &id) in ids.iter().enumerate() {
            if id >= vocab_size {
                return Err(ModelError::TokenOutOfRange { id, size: vocab_size });
            }
            if seen_eos && id != EOS {
                return Err(ModelError::BrokenEosSuffix { at: i });
            }
            seen_eos |= id == EOS;
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token count before the first end marker.
    pub fn word_count(&self) -> usize {
        self.ids.iter().position(|&t| t == EOS).unwrap_or(self.ids.len())
    }

    /// Tokens up to the first end marker, as strings.
    pub fn words<'a>(&self, vocab: &'a Vocab) -> Vec<&'a str> {
        self.ids[..self.word_count()].iter().map(|&t| vocab.token(t)).collect()
    }
}

/// One-hot rows for position `t` of a batch of captions: `[batch, vocab]`.
pub fn one_hot_step<T: Scalar>(caps: &[&Caption], t: usize, vocab_size: usize) -> Tensor<T> {
    let mut v = vec![T::zero(); caps.len() * vocab_size];
    for (b, cap) in caps.iter().enumerate() {
        v[b * vocab_size + cap.ids[t]] = T::one();
    }
    Tensor::from_vec(vec![caps.len(), vocab_size], v)
}

// ---------------------------------------------------------------------------
// Images

/// One decoded dataset sample. Pixels are channel-major (3, S, S) scaled
/// to [-1, 1].
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub pixels: Tensor<f32>,
    pub shape: usize,
    pub fill: usize,
    pub outline: usize,
    pub size: usize,
    pub captions: Vec<String>,
}

// ---------------------------------------------------------------------------
// Configuration

/// Network dimensions. `Default` is the reference desk-scale setup;
/// `smoke` shrinks everything for fast end-to-end runs.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub vocab_size: usize,
    pub t_len: usize,
    pub embed: usize,
    pub cap_hidden: usize,
    pub dy_embed: usize,
    pub dy_hidden: usize,
    pub dy_fuse: usize,
    pub te_hidden: usize,
    pub cond_dim: usize,
    pub z_dim: usize,
    pub fie_channels: [usize; 3],
    pub gx_base: usize,
    pub dx_base: usize,
    pub dx_cond: usize,
    pub num_shapes: usize,
    pub num_colors: usize,
    pub num_sizes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            vocab_size: 128,
            t_len: 20,
            embed: 128,
            cap_hidden: 256,
            dy_embed: 128,
            dy_hidden: 256,
            dy_fuse: 256,
            te_hidden: 512,
            cond_dim: 128,
            z_dim: 100,
            fie_channels: [16, 16, 16],
            gx_base: 32,
            dx_base: 32,
            dx_cond: 32,
            num_shapes: 5,
            num_colors: 8,
            num_sizes: 3,
        }
    }
}

impl ModelConfig {
    /// Small configuration for the end-to-end experiments and tests.
    pub fn smoke() -> Self {
        Self {
            image_size: 32,
            vocab_size: 96,
            t_len: 12,
            embed: 32,
            cap_hidden: 48,
            dy_embed: 32,
            dy_hidden: 48,
            dy_fuse: 48,
            te_hidden: 48,
            cond_dim: 32,
            z_dim: 32,
            fie_channels: [8, 12, 16],
            gx_base: 16,
            dx_base: 16,
            dx_cond: 16,
            num_shapes: 5,
            num_colors: 8,
            num_sizes: 3,
        }
    }

    /// Flattened feature width out of the image encoder.
    pub fn feature_dim(&self) -> usize {
        let side = self.image_size / 16;
        self.fie_channels[2] * side * side
    }

    /// Text-feature width (both directions concatenated).
    pub fn phi_dim(&self) -> usize {
        2 * self.te_hidden
    }
}

// ---------------------------------------------------------------------------
// Bundle

/// All parameters plus the network wiring built over them. Both caption
/// pathways (rollout and teacher forcing) go through the same `captioner`,
/// so they share parameters by construction.
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub encoder: ImageEncoder,
    pub captioner: Captioner,
    pub cap_disc: CaptionDisc,
    pub text_enc: TextEncoder,
    pub image_gen: ImageGen,
    pub image_disc: ImageDisc,
    fie_frozen: bool,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(config: ModelConfig, init_seed: u64) -> Self {
        let mut params = ParamSet::new();
        let rng_of = |name: &str| Stream::new(init_seed, name);
        let encoder = ImageEncoder::new(&mut params, &config, &mut rng_of("init-fie"));
        let captioner = Captioner::new(&mut params, &config, &mut rng_of("init-gy"));
        let cap_disc = CaptionDisc::new(&mut params, &config, &mut rng_of("init-dy"));
        let text_enc = TextEncoder::new(&mut params, &config, &mut rng_of("init-te"));
        let image_gen = ImageGen::new(&mut params, &config, &mut rng_of("init-gx"));
        let image_disc = ImageDisc::new(&mut params, &config, &mut rng_of("init-dx"));
        Self {
            config,
            params,
            encoder,
            captioner,
            cap_disc,
            text_enc,
            image_gen,
            image_disc,
            fie_frozen: false,
        }
    }

    /// Marks the image encoder trained and frozen. Feature extraction for
    /// the GAN phases refuses to run until this has happened.
    pub fn freeze_encoder(&mut self) {
        self.fie_frozen = true;
        self.params.set_trainable(|name| !name.starts_with("fie."));
    }

    pub fn encoder_frozen(&self) -> bool {
        self.fie_frozen
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.fie_frozen = frozen;
    }
}
