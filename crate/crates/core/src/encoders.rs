//! Frozen dual encoder: a small vision transformer that exposes patch-token
//! features at several depths, and a causal text transformer that maps raw
//! token-embedding sequences to a `C`-dimensional feature. Weights are drawn
//! once from a seed and never updated.

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::nn::{hash_array, scaled_normal, Block, BlockCache, LayerNorm, LayerNormCache, Linear};
use crate::rng::rng_from_seed;

/// Words and phrases used as class tokens.
pub const NORMAL_CLASS_TOKENS: [&str; 10] = [
    "normal",
    "healthy",
    "negative",
    "unremarkable",
    "clear",
    "asymptomatic",
    "normal findings",
    "no findings",
    "in good health",
    "no evidence of disease",
];

pub const ANOMALY_CLASS_TOKENS: [&str; 11] = [
    "abnormal",
    "disease",
    "lesion",
    "positive",
    "symptomatic",
    "pathological",
    "impaired",
    "evidence of disease",
    "abnormal finding",
    "pathological condition",
    "pathological abnormality",
];

const PUNCTUATION: [&str; 2] = [".", ","];
pub const EOS_TOKEN: &str = "<eos>";

/// Fixed word-level vocabulary over the class-token phrases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut words: Vec<String> = vec![EOS_TOKEN.to_string()];
        for phrase in NORMAL_CLASS_TOKENS
            .iter()
            .chain(ANOMALY_CLASS_TOKENS.iter())
        {
            for w in phrase.split_whitespace() {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        words.extend(PUNCTUATION.iter().map(|p| p.to_string()));
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn eos(&self) -> usize {
        0
    }

    /// Splits on whitespace, with `.`/`,` as separate tokens.
    pub fn tokenize(&self, phrase: &str) -> Result<Vec<usize>> {
        phrase
            .replace('.', " . ")
            .replace(',', " , ")
            .split_whitespace()
            .map(|w| {
                self.id(&w.to_ascii_lowercase()).ok_or_else(|| {
                    Error::InvalidInput(format!("word {w:?} is not in the vocabulary"))
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub vision_dim: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// 1-based block indices whose outputs are tapped.
    pub tap_layers: Vec<usize>,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            vision_dim: 64,
            vision_layers: 6,
            vision_heads: 4,
            text_dim: 64,
            text_layers: 4,
            text_heads: 4,
            context_length: 16,
            vocab_size: Vocabulary::standard().len(),
            feature_dim: 64,
            tap_layers: vec![2, 4, 6],
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.image_size < crate::grid::MIN_IMAGE_SIDE {
            return err(format!("image size {} is too small", self.image_size));
        }
        if self.tap_layers.is_empty() {
            return err("at least one tap layer is required".into());
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1])
            || self.tap_layers[0] == 0
            || *self.tap_layers.last().unwrap() > self.vision_layers
        {
            return err(format!(
                "tap layers {:?} must be strictly increasing within 1..={}",
                self.tap_layers, self.vision_layers
            ));
        }
        for (dim, heads, what) in [
            (self.vision_dim, self.vision_heads, "vision"),
            (self.text_dim, self.text_heads, "text"),
        ] {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return err(format!(
                    "{what} width {dim} is not divisible by {heads} heads"
                ));
            }
        }
        if self.feature_dim == 0
            || self.mlp_ratio == 0
            || self.text_layers == 0
            || self.vision_layers == 0
        {
            return err("dimensions and layer counts must be positive".into());
        }
        if self.context_length < 2 {
            return err("context length must be at least 2".into());
        }
        let needed = Vocabulary::standard().len();
        if self.vocab_size < needed {
            return err(format!(
                "vocab size {} is below the {needed} built-in tokens",
                self.vocab_size
            ));
        }
        Ok(())
    }
}

/// Per-channel input normalization applied after channel replication.
pub const PIXEL_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const PIXEL_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Patch-token features of one tapped layer, `height·width` rows of `channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

pub type FeaturePyramid = Vec<FeatureMap>;

#[derive(Clone, Debug)]
struct VisionTransformer {
    patch_embed: Linear,
    class_embedding: Array1<f64>,
    positional: Array2<f64>,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct TextTransformer {
    token_embedding: Array2<f64>,
    positional: Array2<f64>,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    projection: Linear,
}

/// Intermediate values of one text forward pass, kept for the backward pass.
pub struct TextTrace {
    blocks: Vec<BlockCache>,
    ln_final: LayerNormCache,
    len: usize,
}

#[derive(Clone, Debug)]
pub struct FrozenEncoders {
    config: EncoderConfig,
    seed: u64,
    vocab: Vocabulary,
    vision: VisionTransformer,
    text: TextTransformer,
    digest: String,
}

impl FrozenEncoders {
    /// Deterministic scaled-normal initialization (std `1/sqrt(fan_in)`;
    /// embeddings use `1/sqrt(width)`); layer norms start at identity.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let vd = config.vision_dim;
        let patch_len = 3 * config.patch_size * config.patch_size;
        let tokens = config.grid_side() * config.grid_side() + 1;
        let emb_std = |d: usize| 1.0 / (d as f64).sqrt();
        let vision = VisionTransformer {
            patch_embed: Linear::init(&mut rng, patch_len, vd, false),
            class_embedding: scaled_normal(&mut rng, 1, vd, emb_std(vd))
                .row(0)
                .to_owned(),
            positional: scaled_normal(&mut rng, tokens, vd, emb_std(vd)),
            ln_pre: LayerNorm::new(vd),
            blocks: (0..config.vision_layers)
                .map(|_| Block::init(&mut rng, vd, config.vision_heads, config.mlp_ratio, false))
                .collect(),
        };
        let td = config.text_dim;
        let text = TextTransformer {
            token_embedding: scaled_normal(&mut rng, config.vocab_size, td, emb_std(td)),
            positional: scaled_normal(&mut rng, config.context_length, td, emb_std(td)),
            blocks: (0..config.text_layers)
                .map(|_| Block::init(&mut rng, td, config.text_heads, config.mlp_ratio, true))
                .collect(),
            ln_final: LayerNorm::new(td),
            projection: Linear::init(&mut rng, td, config.feature_dim, false),
        };
        let mut enc = Self {
            config: config.clone(),
            seed,
            vocab: Vocabulary::standard(),
            vision,
            text,
            digest: String::new(),
        };
        enc.digest = enc.compute_digest();
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Encoder weights expose no mutation path.
    pub fn is_frozen(&self) -> bool {
        true
    }

    /// SHA-256 over the configuration and every weight, as hex.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn compute_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        let v = &self.vision;
        v.patch_embed.digest(&mut h);
        hash_array(&mut h, v.class_embedding.iter());
        hash_array(&mut h, v.positional.iter());
        v.ln_pre.digest(&mut h);
        v.blocks.iter().for_each(|b| b.digest(&mut h));
        let t = &self.text;
        hash_array(&mut h, t.token_embedding.iter());
        hash_array(&mut h, t.positional.iter());
        t.blocks.iter().for_each(|b| b.digest(&mut h));
        t.ln_final.digest(&mut h);
        t.projection.digest(&mut h);
        hex::encode(h.finalize())
    }

    /// Frozen embedding of a vocabulary token.
    pub fn token_embedding(&self, id: usize) -> Array1<f64> {
        self.text.token_embedding.row(id).to_owned()
    }

    pub fn embed_tokens(&self, ids: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((ids.len(), self.config.text_dim));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&self.text.token_embedding.row(id));
        }
        out
    }

    /// Multi-depth patch features of a single-channel image (replicated to
    /// three channels). The class token is dropped at every tap.
    pub fn encode_image_multiscale(&self, image: &Image) -> Result<FeaturePyramid> {
        let cfg = &self.config;
        if image.height() != cfg.image_size || image.width() != cfg.image_size {
            return Err(Error::Shape(format!(
                "encoder expects {0}x{0} images, got {1}x{2}",
                cfg.image_size,
                image.height(),
                image.width()
            )));
        }
        let p = cfg.patch_size;
        let side = cfg.grid_side();
        let mut patches = Array2::zeros((side * side, 3 * p * p));
        for pr in 0..side {
            for pc in 0..side {
                let mut row = patches.row_mut(pr * side + pc);
                for ch in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            row[ch * p * p + y * p + x] = (image.get(pr * p + y, pc * p + x)
                                - PIXEL_MEAN[ch])
                                / PIXEL_STD[ch];
                        }
                    }
                }
            }
        }
        let v = &self.vision;
        let embedded = v.patch_embed.forward(&patches);
        let mut tokens = Array2::zeros((side * side + 1, cfg.vision_dim));
        tokens.row_mut(0).assign(&v.class_embedding);
        tokens.slice_mut(s![1.., ..]).assign(&embedded);
        tokens += &v.positional;
        let (mut x, _) = v.ln_pre.forward(&tokens);
        let mut pyramid = Vec::with_capacity(cfg.tap_layers.len());
        let mut taps = cfg.tap_layers.iter().peekable();
        for (i, block) in v.blocks.iter().enumerate() {
            if taps.peek().is_none() {
                break;
            }
            x = block.forward(&x);
            if taps.peek() == Some(&&(i + 1)) {
                taps.next();
                pyramid.push(FeatureMap {
                    height: side,
                    width: side,
                    data: x.slice(s![1.., ..]).to_owned(),
                });
            }
        }
        Ok(pyramid)
    }

    pub fn encode_images(&self, images: &[Image]) -> Result<Vec<FeaturePyramid>> {
        images
            .par_iter()
            .map(|img| self.encode_image_multiscale(img))
            .collect()
    }

    fn check_sequence(&self, tokens: &Array2<f64>) -> Result<()> {
        if tokens.ncols() != self.config.text_dim {
            return Err(Error::Shape(format!(
                "token embeddings have width {}, expected {}",
                tokens.ncols(),
                self.config.text_dim
            )));
        }
        // one slot is reserved for the end-of-sequence token
        if tokens.nrows() + 1 > self.config.context_length {
            return Err(Error::Length {
                len: tokens.nrows() + 1,
                max: self.config.context_length,
            });
        }
        Ok(())
    }

    /// `F(p)`: appends the end-of-sequence embedding, runs the causal
    /// transformer and projects the final position to `C` dimensions.
    pub fn encode_text(&self, tokens: &Array2<f64>) -> Result<Array1<f64>> {
        self.encode_text_traced(tokens).map(|(f, _)| f)
    }

    pub fn encode_text_traced(&self, tokens: &Array2<f64>) -> Result<(Array1<f64>, TextTrace)> {
        self.check_sequence(tokens)?;
        let t = &self.text;
        let n = tokens.nrows() + 1;
        let mut x = Array2::zeros((n, self.config.text_dim));
        x.slice_mut(s![..n - 1, ..]).assign(tokens);
        x.row_mut(n - 1)
            .assign(&t.token_embedding.row(self.vocab.eos()));
        x += &t.positional.slice(s![..n, ..]);
        let mut caches = Vec::with_capacity(t.blocks.len());
        for block in &t.blocks {
            let (y, cache) = block.forward_cached(&x);
            caches.push(cache);
            x = y;
        }
        let last = x.slice(s![n - 1..n, ..]).to_owned();
        let (normed, ln_final) = t.ln_final.forward(&last);
        let feature = t.projection.forward(&normed).row(0).to_owned();
        Ok((
            feature,
            TextTrace {
                blocks: caches,
                ln_final,
                len: n,
            },
        ))
    }

    /// Gradient of `⟨d_feature, F(p)⟩` with respect to every input embedding
    /// (the appended end-of-sequence row is excluded).
    pub fn text_backward(&self, trace: &TextTrace, d_feature: &Array1<f64>) -> Array2<f64> {
        let t = &self.text;
        let d_proj = d_feature.view().insert_axis(ndarray::Axis(0)).to_owned();
        let d_normed = t.projection.backward_input(&d_proj);
        let d_last = t.ln_final.backward(&trace.ln_final, &d_normed);
        let mut dx = Array2::zeros((trace.len, self.config.text_dim));
        dx.row_mut(trace.len - 1).assign(&d_last.row(0));
        for (block, cache) in t.blocks.iter().zip(&trace.blocks).rev() {
            dx = block.backward(cache, &dx);
        }
        dx.slice(s![..trace.len - 1, ..]).to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn encoders() -> FrozenEncoders {
        FrozenEncoders::init(&EncoderConfig::default(), 11).unwrap()
    }

    #[test]
    fn vocabulary_covers_class_tokens() {
        let v = Vocabulary::standard();
        for phrase in NORMAL_CLASS_TOKENS.iter().chain(&ANOMALY_CLASS_TOKENS) {
            assert!(v.tokenize(phrase).is_ok());
        }
        assert_eq!(v.tokenize("no evidence of disease").unwrap().len(), 4);
        assert_eq!(v.tokenize("healthy.").unwrap().len(), 2);
        assert!(v.tokenize("fracture").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            EncoderConfig {
                patch_size: 7,
                ..Default::default()
            },
            EncoderConfig {
                tap_layers: vec![4, 2],
                ..Default::default()
            },
            EncoderConfig {
                tap_layers: vec![2, 7],
                ..Default::default()
            },
            EncoderConfig {
                vision_heads: 5,
                ..Default::default()
            },
            EncoderConfig {
                vocab_size: 3,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(
                FrozenEncoders::init(&cfg, 0),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = encoders();
        let b = encoders();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(
            a.digest(),
            FrozenEncoders::init(&EncoderConfig::default(), 12)
                .unwrap()
                .digest()
        );
        assert!(a.is_frozen());
    }

    #[test]
    fn pyramid_shapes() {
        let enc = encoders();
        let img =
            Image::from_grid(Grid::from_fn(64, 64, |r, c| ((r + c) % 17) as f64 / 17.0)).unwrap();
        let pyr = enc.encode_image_multiscale(&img).unwrap();
        assert_eq!(pyr.len(), 3);
        for level in &pyr {
            assert_eq!((level.height, level.width), (8, 8));
            assert_eq!(level.data.dim(), (64, 64));
        }
        let other = Image::from_grid(Grid::filled(64, 64, 0.3)).unwrap();
        let other_pyr = enc.encode_image_multiscale(&other).unwrap();
        assert_ne!(pyr, other_pyr);
        let again = Image::from_grid(Grid::filled(64, 64, 0.3)).unwrap();
        assert_eq!(other_pyr, enc.encode_image_multiscale(&again).unwrap());
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let img = Image::from_grid(Grid::filled(32, 32, 0.5)).unwrap();
        assert!(matches!(
            encoders().encode_image_multiscale(&img),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn text_feature_shape_and_length_limit() {
        let enc = encoders();
        let seq = enc.embed_tokens(&[1, 2, 3]);
        let f = enc.encode_text(&seq).unwrap();
        assert_eq!(f.len(), 64);
        assert_eq!(f, enc.encode_text(&seq).unwrap());
        let long = enc.embed_tokens(&[1; 16]);
        assert!(matches!(enc.encode_text(&long), Err(Error::Length { .. })));
        assert!(enc.encode_text(&enc.embed_tokens(&[1; 15])).is_ok());
    }

    #[test]
    fn text_gradient_matches_central_differences() {
        let enc = encoders();
        let mut rng = rng_from_seed(5);
        let mut seq = enc.embed_tokens(&[4, 7, 2, 9]);
        seq.mapv_inplace(|v| v + 0.05 * rng.random_range(-1.0..1.0));
        let u = Array1::from_shape_simple_fn(64, || rng.random_range(-1.0..1.0));
        let (_, trace) = enc.encode_text_traced(&seq).unwrap();
        let grad = enc.text_backward(&trace, &u);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..4 {
            for j in (0..64).step_by(7) {
                let mut p = seq.clone();
                p[[i, j]] += h;
                let mut m = seq.clone();
                m[[i, j]] -= h;
                let num = (enc.encode_text(&p).unwrap().dot(&u)
                    - enc.encode_text(&m).unwrap().dot(&u))
                    / (2.0 * h);
                let a = grad[[i, j]];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-8));
            }
        }
        assert!(worst < 1e-4, "max rel err {worst}");
    }
}
