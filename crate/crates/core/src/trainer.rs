//! Run configuration, the training loop and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{DatasetIndex, TaskMode};
use crate::encoders::{EncoderConfig, EncoderSet};
use crate::error::{Error, Result};
use crate::gpem::GpemConfig;
use crate::losses::{total_loss, LossConfig, MatcherConfig, TargetSet};
use crate::model::{
    encode_frozen, features_checksum, forward, read_params, write_params, FrozenFeatures, HeadConfig, InferConfig,
    Model, ModelConfig, ParamEntry, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
use crate::params::{Adam, ParamStore};
use crate::resize::downsample_mask;
use crate::saim::{build_prompt_bank, select_with_single_image, ClassEmbeddings, SelectionConfig};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Adam step size.
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.003, steps: 200, batch_size: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// Classes supervised during training; all dataset classes when absent.
    pub train_classes: Option<Vec<String>>,
}

/// Everything a run depends on. `seed` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub mode: TaskMode,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub gpem: GpemConfig,
    #[serde(default)]
    pub heads: HeadConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub matcher: MatcherConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub infer: InferConfig,
    #[serde(default)]
    pub task: TaskSection,
}

impl RunConfig {
    /// Small widths suited to 64×64 fixtures on one CPU.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            mode: TaskMode::InDomain,
            encoder: EncoderConfig {
                channels: vec![16, 24, 32],
                embed_dim: 32,
                token_dim: 16,
                seed,
                ..EncoderConfig::default()
            },
            gpem: GpemConfig { latent_dim: 32, num_queries: 16, num_layers: 1, num_points: 2 },
            heads: HeadConfig::default(),
            selection: SelectionConfig { seed, ..SelectionConfig::default() },
            loss: LossConfig::default(),
            matcher: MatcherConfig { seed, ..MatcherConfig::default() },
            optim: OptimConfig::default(),
            infer: InferConfig::default(),
            task: TaskSection::default(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder.clone(), gpem: self.gpem.clone(), heads: self.heads.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.optim.batch_size == 0 || !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::Config("optimiser needs a positive step size and batch size".into()));
        }
        let t = build_prompt_bank().len();
        self.selection.validate(t)
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Toml { path: path.into(), detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }
}

/// One cached training example.
pub struct Example {
    pub features: FrozenFeatures,
    pub targets: TargetSet,
}

/// Decodes and downsamples the instances of `vocabulary` in one image.
/// Instances that vanish at mask resolution are dropped.
pub fn image_targets(dataset: &DatasetIndex, image_id: u64, vocabulary: &[String], h0: usize, w0: usize) -> Result<TargetSet> {
    let mut class_ids = Vec::new();
    let mut rows = Vec::new();
    for ann in dataset.annotations_for_image(image_id) {
        let name = dataset.category(ann.category_id).map(|c| c.name.as_str()).unwrap_or_default();
        let Some(k) = vocabulary.iter().position(|v| v == name) else { continue };
        let mask = dataset.decode_mask(ann)?;
        let small = downsample_mask(&mask.data, mask.height, mask.width, h0, w0);
        if small.iter().any(|&v| v > 0.0) {
            class_ids.push(k);
            rows.extend(small);
        }
    }
    let g = class_ids.len();
    TargetSet::new(class_ids, Mat::from_vec(g, h0 * w0, rows), h0, w0)
}

pub fn build_examples(dataset: &DatasetIndex, encoders: &EncoderSet, vocabulary: &[String]) -> Result<Vec<Example>> {
    dataset
        .images
        .par_iter()
        .map(|im| {
            let image = dataset.load_image(im.id)?;
            let features = encode_frozen(encoders, &image)?;
            let (h0, w0) = features.mask_size();
            let targets = image_targets(dataset, im.id, vocabulary, h0, w0)?;
            Ok(Example { features, targets })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub vocabulary: Vec<String>,
    pub step: usize,
    pub loss_history: Vec<f64>,
    /// Mean loss over the whole training set before the first and after the
    /// last update.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub encoder_checksum: String,
    pub feature_checksum: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    format: String,
    version: u32,
    step: usize,
    vocabulary: Vec<String>,
    loss_history: Vec<f64>,
    initial_loss: f64,
    final_loss: f64,
    encoder_checksum: String,
    feature_checksum: String,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model { config: self.config.model_config(), params: self.params.clone() }
    }

    /// `index.json`, `config.toml` and `params/<name>.f64`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = write_params(&self.params, dir)?;
        let index = CheckpointIndex {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            vocabulary: self.vocabulary.clone(),
            loss_history: self.loss_history.clone(),
            initial_loss: self.initial_loss,
            final_loss: self.final_loss,
            encoder_checksum: self.encoder_checksum.clone(),
            feature_checksum: self.feature_checksum.clone(),
            params,
        };
        let path = dir.join("index.json");
        let mut text = serde_json::to_string_pretty(&index).expect("index serialises");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.config.to_toml_string()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: CheckpointIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if index.format != CHECKPOINT_FORMAT || index.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                record: path.display().to_string(),
                detail: format!("unsupported checkpoint {} v{}", index.format, index.version),
            });
        }
        let config = RunConfig::load(&dir.join("config.toml"))?;
        let params = read_params(&index.params, dir)?;
        Ok(Self {
            config,
            params,
            vocabulary: index.vocabulary,
            step: index.step,
            loss_history: index.loss_history,
            initial_loss: index.initial_loss,
            final_loss: index.final_loss,
            encoder_checksum: index.encoder_checksum,
            feature_checksum: index.feature_checksum,
        })
    }
}

fn example_loss(
    params: &ParamStore,
    config: &RunConfig,
    model_cfg: &ModelConfig,
    ex: &Example,
    emb: &Mat,
    scale: f64,
    with_grads: bool,
) -> Result<(f64, Option<std::collections::BTreeMap<String, Mat>>)> {
    let mut g = Graph::new();
    let p = if with_grads { params.bind(&mut g) } else { params.bind_frozen(&mut g) };
    let e = g.constant(emb.clone());
    let out = forward(&mut g, &p, model_cfg, &ex.features, e)?;
    let loss = total_loss(&mut g, out.class_logits, out.mask_logits, &ex.targets, &config.loss, &config.matcher)?;
    let scaled = g.scale(loss.total, scale);
    let value = g.scalar(scaled);
    if !with_grads {
        return Ok((value, None));
    }
    let grads = g.backward(scaled);
    Ok((value, Some(p.collect_grads(&g, &grads))))
}

fn dataset_loss(params: &ParamStore, config: &RunConfig, examples: &[Example], emb: &Mat) -> Result<f64> {
    let model_cfg = config.model_config();
    let n = examples.len() as f64;
    let parts: Vec<f64> = examples
        .par_iter()
        .map(|ex| example_loss(params, config, &model_cfg, ex, emb, 1.0 / n, false).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

/// Trains on every class of the dataset, or on `task.train_classes` when set.
pub fn train(config: &RunConfig, dataset: &DatasetIndex) -> Result<Checkpoint> {
    let vocabulary = match &config.task.train_classes {
        Some(list) => list.clone(),
        None => dataset.category_names(),
    };
    train_with_vocabulary(config, dataset, &vocabulary)
}

pub fn train_with_vocabulary(config: &RunConfig, dataset: &DatasetIndex, vocabulary: &[String]) -> Result<Checkpoint> {
    config.validate()?;
    if dataset.images.is_empty() {
        return Err(Error::Config("training set has no images".into()));
    }
    if vocabulary.is_empty() {
        return Err(Error::Config("training vocabulary is empty".into()));
    }
    if let Some(missing) = vocabulary.iter().find(|n| dataset.category_by_name(n).is_none()) {
        return Err(Error::Config(format!("training class {missing:?} is not in the dataset")));
    }
    let encoders = EncoderSet::from_config(&config.encoder)?;
    let encoder_before = encoders.checksum();
    let emb: ClassEmbeddings =
        select_with_single_image(dataset, vocabulary, &encoders, &build_prompt_bank(), &config.selection)?.embeddings;
    let examples = build_examples(dataset, &encoders, vocabulary)?;
    let feature_before = features_checksum(&examples.iter().map(|e| e.features.clone()).collect::<Vec<_>>());

    let model_cfg = config.model_config();
    let mut params = Model::init(&model_cfg, config.seed)?.params;
    let initial_loss = dataset_loss(&params, config, &examples, &emb.vectors)?;
    if !initial_loss.is_finite() {
        return Err(Error::Divergence { step: 0 });
    }

    let mut opt = Adam::new(config.optim.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(config.optim.steps);
    let batch = config.optim.batch_size.min(examples.len());
    for step in 0..config.optim.steps {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..examples.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let picked: Vec<usize> = order.drain(..batch).collect();
        let results: Vec<(f64, Option<std::collections::BTreeMap<String, Mat>>)> = picked
            .par_iter()
            .map(|&i| example_loss(&params, config, &model_cfg, &examples[i], &emb.vectors, 1.0 / batch as f64, true))
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut grads: std::collections::BTreeMap<String, Mat> = std::collections::BTreeMap::new();
        for (l, g) in results {
            loss += l;
            for (name, m) in g.expect("requested") {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&m),
                    None => {
                        grads.insert(name, m);
                    }
                }
            }
        }
        if !loss.is_finite() || grads.values().any(|m| !m.is_finite()) {
            return Err(Error::Divergence { step });
        }
        history.push(loss);
        opt.step(&mut params, &grads);
    }
    let final_loss = dataset_loss(&params, config, &examples, &emb.vectors)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence { step: config.optim.steps });
    }

    let feature_after = features_checksum(&examples.iter().map(|e| e.features.clone()).collect::<Vec<_>>());
    let encoder_after = encoders.checksum();
    if encoder_before != encoder_after || feature_before != feature_after {
        return Err(Error::Config("frozen encoder state changed during training".into()));
    }
    Ok(Checkpoint {
        config: config.clone(),
        params,
        vocabulary: vocabulary.to_vec(),
        step: config.optim.steps,
        loss_history: history,
        initial_loss,
        final_loss,
        encoder_checksum: encoder_after,
        feature_checksum: feature_after,
    })
}
