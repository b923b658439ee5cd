//! The full network: frozen features → refine → fuse → bridge → heads.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::data::BinaryMask;
use crate::encoders::{EncoderConfig, EncoderSet, FeaturePyramid, GlobalDepthToken, ImageSample};
use crate::error::{Error, Result};
use crate::eval::InstancePrediction;
use crate::gpem::{
    bridge_queries, fuse_visual_geometric, init_bridge_params, init_fusion_params, init_refine_params,
    pyramid_constants, query_vars, refine_multiscale, GpemConfig,
};
use crate::params::{hex_digest, Bound, ParamStore};
use crate::resize::resize_plane;
use crate::saim::{classify_queries, fuse_global, init_head_params, predict_masks, ClassEmbeddings, Pooling};
use crate::tensor::{sigmoid, Mat};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub pooling: Pooling,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gpem: GpemConfig,
    pub heads: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gpem.validate()
    }
}

/// Trainable parameters under a fixed architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let enc = &config.encoder;
        init_refine_params(&mut params, &enc.channels, &config.gpem, &mut rng);
        init_fusion_params(&mut params, &enc.channels, &enc.channels, &config.gpem, &mut rng);
        init_bridge_params(&mut params, enc.levels, &config.gpem, &mut rng);
        init_head_params(&mut params, enc.token_dim, config.gpem.latent_dim, enc.embed_dim, &mut rng);
        Ok(Self { config: config.clone(), params })
    }
}

/// Outputs of the frozen towers for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenFeatures {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub visual: FeaturePyramid,
    pub geometry: FeaturePyramid,
    pub token: GlobalDepthToken,
}

impl FrozenFeatures {
    pub fn mask_size(&self) -> (usize, usize) {
        (self.visual.levels[0].height, self.visual.levels[0].width)
    }

    pub fn hash_into(&self, h: &mut Sha256) {
        for level in self.visual.levels.iter().chain(&self.geometry.levels) {
            for x in &level.features.data {
                h.update(x.to_le_bytes());
            }
        }
        for x in &self.token.0 {
            h.update(x.to_le_bytes());
        }
    }
}

pub fn encode_frozen(encoders: &EncoderSet, image: &ImageSample) -> Result<FrozenFeatures> {
    let visual = encoders.visual.encode(image)?;
    let (geometry, token) = encoders.geometry.encode(image)?;
    Ok(FrozenFeatures { image_id: image.id.clone(), height: image.height, width: image.width, visual, geometry, token })
}

pub fn features_checksum(features: &[FrozenFeatures]) -> String {
    let mut h = Sha256::new();
    for f in features {
        f.hash_into(&mut h);
    }
    hex_digest(&h.finalize())
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `N_Q×K`.
    pub class_logits: Var,
    /// `N_Q×(H₀·W₀)`.
    pub mask_logits: Var,
    pub mask_height: usize,
    pub mask_width: usize,
}

pub fn forward(g: &mut Graph, p: &Bound, config: &ModelConfig, feats: &FrozenFeatures, class_emb: Var) -> Result<ForwardVars> {
    let visual = pyramid_constants(g, &feats.visual);
    let (refined, fm) = refine_multiscale(g, p, &visual, config.gpem.num_points)?;
    let geometry = pyramid_constants(g, &feats.geometry);
    let fused = fuse_visual_geometric(g, p, &refined, &geometry)?;
    let queries = bridge_queries(g, p, &fused, query_vars(p), config.gpem.num_layers)?;
    let token = g.constant(feats.token.as_row());
    let ff = fuse_global(g, p, token, fm.var);
    let mask_logits = predict_masks(g, p, queries, ff);
    let class_logits = classify_queries(g, p, queries, ff, mask_logits, class_emb, config.heads.pooling);
    Ok(ForwardVars { class_logits, mask_logits, mask_height: fm.height, mask_width: fm.width })
}

/// Class and mask logits as plain arrays.
pub fn forward_values(model: &Model, feats: &FrozenFeatures, class_emb: &Mat) -> Result<(Mat, Mat)> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let e = g.constant(class_emb.clone());
    let out = forward(&mut g, &p, &model.config, feats, e)?;
    Ok((g.value(out.class_logits).clone(), g.value(out.mask_logits).clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub score_floor: f64,
    pub mask_threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { score_floor: 0.05, mask_threshold: 0.5 }
    }
}

fn check_vocabulary(model: &Model, vocabulary: &[String], class_emb: &ClassEmbeddings) -> Result<()> {
    if class_emb.num_classes() != vocabulary.len() {
        return Err(Error::Dimension {
            what: "class embeddings for vocabulary".into(),
            expected: vocabulary.len(),
            found: class_emb.num_classes(),
        });
    }
    if class_emb.dim() != model.config.encoder.embed_dim {
        return Err(Error::Dimension { what: "class embedding width".into(), expected: model.config.encoder.embed_dim, found: class_emb.dim() });
    }
    Ok(())
}

/// Per query: the argmax class, a mask from the upsampled logits, and
/// `sigmoid(max logit) × mean foreground probability` as score.
pub fn infer_features(
    model: &Model,
    feats: &FrozenFeatures,
    vocabulary: &[String],
    class_emb: &ClassEmbeddings,
    cfg: &InferConfig,
) -> Result<Vec<InstancePrediction>> {
    check_vocabulary(model, vocabulary, class_emb)?;
    let (y, m) = forward_values(model, feats, &class_emb.vectors)?;
    let (h0, w0) = feats.mask_size();
    let image_id: u64 = feats.image_id.parse().unwrap_or(0);
    let mut out = Vec::new();
    for q in 0..y.rows {
        let row = y.row(q);
        let (k, &best) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("vocabulary is nonempty");
        let probs: Vec<f64> = resize_plane(m.row(q), h0, w0, feats.height, feats.width).into_iter().map(sigmoid).collect();
        let fg: Vec<f64> = probs.iter().copied().filter(|&p| p > cfg.mask_threshold).collect();
        if fg.is_empty() {
            continue;
        }
        let confidence = fg.iter().sum::<f64>() / fg.len() as f64;
        let score = sigmoid(best) * confidence;
        if score < cfg.score_floor {
            continue;
        }
        let mask = BinaryMask {
            height: feats.height,
            width: feats.width,
            data: probs.iter().map(|&p| u8::from(p > cfg.mask_threshold)).collect(),
        };
        out.push(InstancePrediction { image_id, category: vocabulary[k].clone(), mask, score });
    }
    Ok(out)
}

pub fn infer(
    model: &Model,
    encoders: &EncoderSet,
    image: &ImageSample,
    vocabulary: &[String],
    class_emb: &ClassEmbeddings,
    cfg: &InferConfig,
) -> Result<Vec<InstancePrediction>> {
    check_vocabulary(model, vocabulary, class_emb)?;
    infer_features(model, &encode_frozen(encoders, image)?, vocabulary, class_emb, cfg)
}

pub const CHECKPOINT_FORMAT: &str = "ovseg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

/// Writes each parameter as raw little-endian `f64` under `dir/params/`.
pub fn write_params(params: &ParamStore, dir: &Path) -> Result<Vec<ParamEntry>> {
    let pdir = dir.join("params");
    std::fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut entries = Vec::new();
    for (name, m) in params.iter() {
        let file = format!("params/{name}.f64");
        let bytes: Vec<u8> = m.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        let path = dir.join(&file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ParamEntry { name: name.clone(), rows: m.rows, cols: m.cols, file });
    }
    Ok(entries)
}

pub fn read_params(entries: &[ParamEntry], dir: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in entries {
        let path = dir.join(&e.file);
        let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
        if bytes.len() != e.rows * e.cols * 8 {
            return Err(Error::Parse {
                record: e.name.clone(),
                detail: format!("{} bytes for a {}x{} array", bytes.len(), e.rows, e.cols),
            });
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        store.insert(e.name.clone(), Mat::from_vec(e.rows, e.cols, data));
    }
    Ok(store)
}
