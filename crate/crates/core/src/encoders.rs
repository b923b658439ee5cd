//! Frozen feature producers: visual pyramid, geometric pyramid plus global
//! depth token, and prompt-string text embeddings.
//!
//! The built-in encoders are seeded random stubs. Everything downstream only
//! sees the [`VisualEncoder`], [`GeometryEncoder`] and [`TextEncoder`] traits,
//! so pretrained backbones can be dropped in without touching the heads.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::hex_digest;
use crate::tensor::Mat;

pub const MIN_IMAGE_SIDE: usize = 16;

/// RGB image with values in `[0, 1]`, stored row-major as `H·W·3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidImage {
                id,
                detail: format!("expected {} values, got {}", height * width * 3, pixels.len()),
            });
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::InvalidImage { id, detail: format!("pixel value {bad} outside [0,1]") });
        }
        Ok(Self { id, height, width, pixels })
    }

    pub fn filled(id: impl Into<String>, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(id, height, width, vec![value; height * width * 3])
    }

    pub fn load_png(path: &Path, id: impl Into<String>) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(id, h as usize, w as usize, pixels)
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn check_size(&self) -> Result<()> {
        if self.height < MIN_IMAGE_SIDE || self.width < MIN_IMAGE_SIDE {
            return Err(Error::Sizing {
                id: self.id.clone(),
                height: self.height,
                width: self.width,
                min: MIN_IMAGE_SIDE,
            });
        }
        Ok(())
    }
}

/// One pyramid level: `height·width` rows of `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub features: Mat,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.features.cols
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
    /// Downsampling ratio of each level relative to the input image.
    pub scale_factors: Vec<usize>,
}

impl FeaturePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.height, l.width)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(|l| l.features.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDepthToken(pub Vec<f64>);

impl GlobalDepthToken {
    pub fn as_row(&self) -> Mat {
        Mat::from_vec(1, self.0.len(), self.0.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Strided patch-embedding stack.
    #[default]
    Patch,
    /// Average-pool then project; second implementation of the same contract.
    Pooling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub levels: usize,
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    /// Text embedding width `D`; must equal the shared latent width.
    pub embed_dim: usize,
    /// Global depth token width `C_g`.
    pub token_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub backbone: Backbone,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            strides: vec![4, 8, 16],
            channels: vec![32, 64, 128],
            embed_dim: 64,
            token_dim: 64,
            seed: 0,
            backbone: Backbone::Patch,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("encoder needs at least 2 levels, got {}", self.levels)));
        }
        if self.strides.len() != self.levels || self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "encoder declares {} levels but {} strides and {} channel widths",
                self.levels,
                self.strides.len(),
                self.channels.len()
            )));
        }
        if self.strides[0] == 0 || self.channels.iter().any(|&c| c == 0) || self.embed_dim == 0 || self.token_dim == 0 {
            return Err(Error::Config("strides, channels and embedding widths must be positive".into()));
        }
        for w in self.strides.windows(2) {
            if w[1] <= w[0] || w[1] % w[0] != 0 {
                return Err(Error::Config(format!(
                    "strides must strictly increase by integer ratios, got {:?}",
                    self.strides
                )));
            }
        }
        Ok(())
    }

    /// Spatial size of each level for an `height×width` input.
    pub fn level_sizes(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        self.strides.iter().map(|&s| (height.div_ceil(s), width.div_ceil(s))).collect()
    }
}

pub trait VisualEncoder: Send + Sync {
    fn encode(&self, image: &ImageSample) -> Result<FeaturePyramid>;
    /// Per-location embeddings at the finest level, projected to the text
    /// width and unit-normalised. Used for template similarity.
    fn encode_dense(&self, image: &ImageSample) -> Result<Mat>;
    fn checksum(&self) -> String;
}

pub trait GeometryEncoder: Send + Sync {
    fn encode(&self, image: &ImageSample) -> Result<(FeaturePyramid, GlobalDepthToken)>;
    fn checksum(&self) -> String;
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    /// Unit-length embedding of a fully formatted prompt.
    fn embed(&self, prompt: &str) -> Vec<f64>;
}

/// Seed streams keep the two image encoders independent for equal seeds.
const VISUAL_STREAM: u64 = 0x5649_5355_414c;
const GEOMETRY_STREAM: u64 = 0x4745_4f4d;

/// Strided stack shared by both image stubs. Level 0 embeds `s0×s0` input
/// patches; level `l` embeds `r×r` blocks of level `l-1`, `r = s_l / s_{l-1}`.
#[derive(Clone, Debug)]
struct PatchStack {
    strides: Vec<usize>,
    weights: Vec<Mat>,
    biases: Vec<Mat>,
}

impl PatchStack {
    fn new(cfg: &EncoderConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut prev = in_channels;
        let mut prev_stride = 1;
        for (&s, &c) in cfg.strides.iter().zip(&cfg.channels) {
            let r = s / prev_stride;
            let fan_in = r * r * prev;
            weights.push(Mat::randn(fan_in, c, 1.5 / (fan_in as f64).sqrt(), rng));
            biases.push(Mat::randn(1, c, 0.1, rng));
            prev = c;
            prev_stride = s;
        }
        Self { strides: cfg.strides.clone(), weights, biases }
    }

    /// `input` is `h×w` rows of `c` channels.
    fn forward(&self, input: &Mat, height: usize, width: usize) -> Vec<FeatureMap> {
        let mut levels = Vec::with_capacity(self.strides.len());
        let (mut cur, mut h, mut w) = (input.clone(), height, width);
        let mut prev_stride = 1;
        for (l, &s) in self.strides.iter().enumerate() {
            let r = s / prev_stride;
            let (oh, ow) = (h.div_ceil(r), w.div_ceil(r));
            let c = cur.cols;
            let mut patches = Mat::zeros(oh * ow, r * r * c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = patches.row_mut(oy * ow + ox);
                    for dy in 0..r {
                        for dx in 0..r {
                            // edge replicate beyond the border
                            let y = (oy * r + dy).min(h - 1);
                            let x = (ox * r + dx).min(w - 1);
                            let off = (dy * r + dx) * c;
                            row[off..off + c].copy_from_slice(cur.row(y * w + x));
                        }
                    }
                }
            }
            let mut out = patches.matmul(&self.weights[l]);
            for i in 0..out.rows {
                for (v, b) in out.row_mut(i).iter_mut().zip(&self.biases[l].data) {
                    *v = (*v + b).tanh();
                }
            }
            levels.push(FeatureMap { height: oh, width: ow, features: out.clone() });
            cur = out;
            h = oh;
            w = ow;
            prev_stride = s;
        }
        levels
    }

    fn hash_into(&self, h: &mut Sha256) {
        for m in self.weights.iter().chain(&self.biases) {
            for x in &m.data {
                h.update(x.to_le_bytes());
            }
        }
    }
}

/// Pool-then-project stack: level `l` averages `s_l×s_l` input blocks and
/// maps them through a fixed random projection.
#[derive(Clone, Debug)]
struct PoolStack {
    strides: Vec<usize>,
    weights: Vec<Mat>,
}

impl PoolStack {
    fn new(cfg: &EncoderConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let weights = cfg
            .channels
            .iter()
            .map(|&c| Mat::randn(in_channels * 4, c, 2.0 / ((in_channels * 4) as f64).sqrt(), rng))
            .collect();
        Self { strides: cfg.strides.clone(), weights }
    }

    fn forward(&self, input: &Mat, height: usize, width: usize) -> Vec<FeatureMap> {
        let c = input.cols;
        self.strides
            .iter()
            .zip(&self.weights)
            .map(|(&s, w)| {
                let (oh, ow) = (height.div_ceil(s), width.div_ceil(s));
                // four quadrant means per block keep some spatial layout
                let mut pooled = Mat::zeros(oh * ow, 4 * c);
                let half = (s / 2).max(1);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = pooled.row_mut(oy * ow + ox);
                        let mut counts = [0.0f64; 4];
                        for dy in 0..s {
                            for dx in 0..s {
                                let y = (oy * s + dy).min(height - 1);
                                let x = (ox * s + dx).min(width - 1);
                                let q = usize::from(dy >= half) * 2 + usize::from(dx >= half);
                                counts[q] += 1.0;
                                for ch in 0..c {
                                    row[q * c + ch] += input.get(y * width + x, ch);
                                }
                            }
                        }
                        for q in 0..4 {
                            for ch in 0..c {
                                row[q * c + ch] /= counts[q].max(1.0);
                            }
                        }
                    }
                }
                let features = pooled.matmul(w).map(f64::tanh);
                FeatureMap { height: oh, width: ow, features }
            })
            .collect()
    }

    fn hash_into(&self, h: &mut Sha256) {
        for m in &self.weights {
            for x in &m.data {
                h.update(x.to_le_bytes());
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Stack {
    Patch(PatchStack),
    Pool(PoolStack),
}

impl Stack {
    fn new(cfg: &EncoderConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        match cfg.backbone {
            Backbone::Patch => Stack::Patch(PatchStack::new(cfg, in_channels, rng)),
            Backbone::Pooling => Stack::Pool(PoolStack::new(cfg, in_channels, rng)),
        }
    }

    fn forward(&self, input: &Mat, height: usize, width: usize) -> Vec<FeatureMap> {
        match self {
            Stack::Patch(s) => s.forward(input, height, width),
            Stack::Pool(s) => s.forward(input, height, width),
        }
    }

    fn hash_into(&self, h: &mut Sha256) {
        match self {
            Stack::Patch(s) => s.hash_into(h),
            Stack::Pool(s) => s.hash_into(h),
        }
    }
}

/// Frozen stand-in for the CLIP image tower.
#[derive(Clone, Debug)]
pub struct StubVisualEncoder {
    cfg: EncoderConfig,
    stack: Stack,
    dense_proj: Mat,
}

impl StubVisualEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VISUAL_STREAM);
        let stack = Stack::new(cfg, 3, &mut rng);
        let dense_proj = Mat::randn(cfg.channels[0], cfg.embed_dim, 1.0 / (cfg.channels[0] as f64).sqrt(), &mut rng);
        Ok(Self { cfg: cfg.clone(), stack, dense_proj })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }
}

fn centred_rgb(image: &ImageSample) -> Mat {
    Mat::from_vec(image.height * image.width, 3, image.pixels.iter().map(|p| 2.0 * p - 1.0).collect())
}

impl VisualEncoder for StubVisualEncoder {
    fn encode(&self, image: &ImageSample) -> Result<FeaturePyramid> {
        image.check_size()?;
        let levels = self.stack.forward(&centred_rgb(image), image.height, image.width);
        Ok(FeaturePyramid { levels, scale_factors: self.cfg.strides.clone() })
    }

    fn encode_dense(&self, image: &ImageSample) -> Result<Mat> {
        let pyramid = self.encode(image)?;
        Ok(pyramid.levels[0].features.matmul(&self.dense_proj).normalize_rows())
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.stack.hash_into(&mut h);
        for x in &self.dense_proj.data {
            h.update(x.to_le_bytes());
        }
        hex_digest(&h.finalize())
    }
}

/// Frozen stand-in for the depth tower. Works on a depth-like proxy
/// (luminance, local gradient magnitude, normalised row position).
#[derive(Clone, Debug)]
pub struct StubGeometryEncoder {
    cfg: EncoderConfig,
    stack: Stack,
    token_proj: Mat,
}

impl StubGeometryEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ GEOMETRY_STREAM);
        let stack = Stack::new(cfg, 3, &mut rng);
        let last = *cfg.channels.last().expect("validated");
        let token_proj = Mat::randn(last, cfg.token_dim, 1.5 / (last as f64).sqrt(), &mut rng);
        Ok(Self { cfg: cfg.clone(), stack, token_proj })
    }
}

fn depth_proxy(image: &ImageSample) -> Mat {
    let (h, w) = (image.height, image.width);
    let luma = |y: usize, x: usize| {
        0.299 * image.pixel(y, x, 0) + 0.587 * image.pixel(y, x, 1) + 0.114 * image.pixel(y, x, 2)
    };
    Mat::from_fn(h * w, 3, |i, c| {
        let (y, x) = (i / w, i % w);
        match c {
            0 => 2.0 * luma(y, x) - 1.0,
            1 => {
                let gx = luma(y, (x + 1).min(w - 1)) - luma(y, x.saturating_sub(1));
                let gy = luma((y + 1).min(h - 1), x) - luma(y.saturating_sub(1), x);
                4.0 * (gx * gx + gy * gy).sqrt()
            }
            _ => 2.0 * (y as f64 + 0.5) / h as f64 - 1.0,
        }
    })
}

impl GeometryEncoder for StubGeometryEncoder {
    fn encode(&self, image: &ImageSample) -> Result<(FeaturePyramid, GlobalDepthToken)> {
        image.check_size()?;
        let levels = self.stack.forward(&depth_proxy(image), image.height, image.width);
        let last = &levels.last().expect("at least two levels").features;
        let mut mean = Mat::zeros(1, last.cols);
        for r in 0..last.rows {
            for (m, x) in mean.data.iter_mut().zip(last.row(r)) {
                *m += x / last.rows as f64;
            }
        }
        let token = mean.matmul(&self.token_proj).map(f64::tanh).data;
        Ok((FeaturePyramid { levels, scale_factors: self.cfg.strides.clone() }, GlobalDepthToken(token)))
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.stack.hash_into(&mut h);
        for x in &self.token_proj.data {
            h.update(x.to_le_bytes());
        }
        hex_digest(&h.finalize())
    }
}

/// Maps each prompt string to a pseudo-random unit vector seeded by a
/// SHA-256 of `(seed, prompt)`.
#[derive(Clone, Debug)]
pub struct HashTextEncoder {
    seed: u64,
    dim: usize,
}

impl HashTextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(prompt.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let v = Mat::randn(1, self.dim, 1.0, &mut rng);
        v.normalize_rows().data
    }
}

/// `K×T×D` unit-normalised embeddings, one per (class, template).
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateEmbeddings {
    pub class_names: Vec<String>,
    pub template_ids: Vec<String>,
    pub dim: usize,
    pub embeddings: Vec<f64>,
}

impl TemplateEmbeddings {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_templates(&self) -> usize {
        self.template_ids.len()
    }

    #[inline]
    pub fn get(&self, k: usize, t: usize) -> &[f64] {
        let off = (k * self.num_templates() + t) * self.dim;
        &self.embeddings[off..off + self.dim]
    }

    /// The `T×D` block of class `k`.
    pub fn class_block(&self, k: usize) -> Mat {
        let t = self.num_templates();
        let off = k * t * self.dim;
        Mat::from_vec(t, self.dim, self.embeddings[off..off + t * self.dim].to_vec())
    }

    /// Restricts to the given class indices, in that order.
    pub fn subset(&self, classes: &[usize]) -> TemplateEmbeddings {
        let mut embeddings = Vec::with_capacity(classes.len() * self.num_templates() * self.dim);
        for &k in classes {
            embeddings.extend_from_slice(&self.class_block(k).data);
        }
        TemplateEmbeddings {
            class_names: classes.iter().map(|&k| self.class_names[k].clone()).collect(),
            template_ids: self.template_ids.clone(),
            dim: self.dim,
            embeddings,
        }
    }
}

pub const PLACEHOLDER: &str = "{}";

/// Inserts the class name at every placeholder.
pub fn fill_template(template: &str, class_name: &str) -> Result<String> {
    if !template.contains(PLACEHOLDER) {
        return Err(Error::Format { template: template.to_string() });
    }
    Ok(template.replace(PLACEHOLDER, class_name))
}

/// Embeds every `(class, template)` prompt. Template ids are the template
/// strings themselves unless `ids` is given.
pub fn encode_text_with(
    encoder: &dyn TextEncoder,
    class_names: &[String],
    templates: &[String],
    ids: Option<&[String]>,
) -> Result<TemplateEmbeddings> {
    for t in templates {
        if !t.contains(PLACEHOLDER) {
            return Err(Error::Format { template: t.clone() });
        }
    }
    let dim = encoder.dim();
    let mut embeddings = Vec::with_capacity(class_names.len() * templates.len() * dim);
    for name in class_names {
        for t in templates {
            embeddings.extend(encoder.embed(&fill_template(t, name)?));
        }
    }
    let template_ids = match ids {
        Some(ids) => ids.to_vec(),
        None => templates.to_vec(),
    };
    Ok(TemplateEmbeddings { class_names: class_names.to_vec(), template_ids, dim, embeddings })
}

pub fn encode_visual(image: &ImageSample, cfg: &EncoderConfig) -> Result<FeaturePyramid> {
    StubVisualEncoder::new(cfg)?.encode(image)
}

pub fn encode_geometry(image: &ImageSample, cfg: &EncoderConfig) -> Result<(FeaturePyramid, GlobalDepthToken)> {
    StubGeometryEncoder::new(cfg)?.encode(image)
}

pub fn encode_text(class_names: &[String], templates: &[String], cfg: &EncoderConfig) -> Result<TemplateEmbeddings> {
    encode_text_with(&HashTextEncoder::new(cfg.seed, cfg.embed_dim), class_names, templates, None)
}

/// The three frozen towers built from one config.
pub struct EncoderSet {
    pub visual: Box<dyn VisualEncoder>,
    pub geometry: Box<dyn GeometryEncoder>,
    pub text: Box<dyn TextEncoder>,
}

impl EncoderSet {
    pub fn from_config(cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            visual: Box::new(StubVisualEncoder::new(cfg)?),
            geometry: Box::new(StubGeometryEncoder::new(cfg)?),
            text: Box::new(HashTextEncoder::new(cfg.seed, cfg.embed_dim)),
        })
    }

    /// Combined checksum of the image towers' frozen weights.
    pub fn checksum(&self) -> String {
        format!("{}:{}", self.visual.checksum(), self.geometry.checksum())
    }
}
