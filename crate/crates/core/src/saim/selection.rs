//! Similarity-driven template selection.
//!
//! Scores every `(class, template)` embedding against dense pixel features,
//! then aggregates templates per class either by a top-N / mean blend
//! (`mixed`) or by up-weighting the top-N (`weighted`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prompts::TemplateBank;
use crate::data::DatasetIndex;
use crate::encoders::{encode_text_with, EncoderSet, TemplateEmbeddings};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Mat};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    MeanAll,
    #[default]
    Mixed,
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub top_n: usize,
    pub lambda: f64,
    pub alpha_enh: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Mixed, top_n: 20, lambda: 0.5, alpha_enh: 2.0, seed: 0 }
    }
}

impl SelectionConfig {
    /// `alpha_enh = 1` is accepted as the uniform-weight limit.
    pub fn validate(&self, num_templates: usize) -> Result<()> {
        if self.top_n == 0 || self.top_n > num_templates {
            return Err(Error::Config(format!("top-N must be in 1..={num_templates}, got {}", self.top_n)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.alpha_enh >= 1.0 && self.alpha_enh.is_finite()) {
            return Err(Error::Config(format!("alpha_enh must be finite and at least 1, got {}", self.alpha_enh)));
        }
        Ok(())
    }
}

/// Dense pixel features: `batch[b]` is `(height·width)×D`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures {
    pub height: usize,
    pub width: usize,
    pub batch: Vec<Mat>,
}

/// `B×H×W×K×T` cosine similarities, last index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTensor {
    pub dims: [usize; 5],
    pub values: Vec<f64>,
}

impl SimilarityTensor {
    pub fn get(&self, b: usize, h: usize, w: usize, k: usize, t: usize) -> f64 {
        let [_, hh, ww, kk, tt] = self.dims;
        self.values[(((b * hh + h) * ww + w) * kk + k) * tt + t]
    }
}

/// `B×K×T` spatially averaged similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanSimilarity {
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl MeanSimilarity {
    pub fn new(b: usize, k: usize, t: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), b * k * t, "mean similarity size");
        Self { dims: [b, k, t], values }
    }

    pub fn scores(&self, b: usize, k: usize) -> &[f64] {
        let [_, kk, tt] = self.dims;
        let off = (b * kk + k) * tt;
        &self.values[off..off + tt]
    }
}

/// Unit-normalised per-class embeddings plus the template indices each class
/// ranked highest (per batch element).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings {
    pub class_names: Vec<String>,
    pub vectors: Mat,
    pub selected: Vec<Vec<Vec<usize>>>,
}

impl ClassEmbeddings {
    pub fn num_classes(&self) -> usize {
        self.vectors.rows
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        (dot(a, b) / d).clamp(-1.0, 1.0)
    }
}

pub fn compute_similarity_tensor(pixels: &PixelFeatures, templates: &TemplateEmbeddings) -> Result<SimilarityTensor> {
    let hw = pixels.height * pixels.width;
    let (k, t) = (templates.num_classes(), templates.num_templates());
    let mut values = Vec::with_capacity(pixels.batch.len() * hw * k * t);
    for feats in &pixels.batch {
        if feats.cols != templates.dim {
            return Err(Error::Dimension { what: "pixel feature width".into(), expected: templates.dim, found: feats.cols });
        }
        if feats.rows != hw {
            return Err(Error::Dimension { what: "pixel feature rows".into(), expected: hw, found: feats.rows });
        }
        for p in 0..hw {
            let f = feats.row(p);
            for ki in 0..k {
                for ti in 0..t {
                    values.push(cosine(f, templates.get(ki, ti)));
                }
            }
        }
    }
    Ok(SimilarityTensor { dims: [pixels.batch.len(), pixels.height, pixels.width, k, t], values })
}

pub fn mean_spatial(s: &SimilarityTensor) -> MeanSimilarity {
    let [b, h, w, k, t] = s.dims;
    let kt = k * t;
    let mut out = vec![0.0; b * kt];
    for bi in 0..b {
        let acc = &mut out[bi * kt..(bi + 1) * kt];
        for p in 0..h * w {
            let off = (bi * h * w + p) * kt;
            for (a, v) in acc.iter_mut().zip(&s.values[off..off + kt]) {
                *a += v;
            }
        }
        let n = (h * w) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    MeanSimilarity::new(b, k, t, out)
}

/// Indices of the `n` largest scores, best first; equal scores keep the
/// lower index first (`-0.0` ties with `0.0`).
pub fn top_n_indices(scores: &[f64], n: usize) -> Vec<usize> {
    let key = |i: usize| scores[i] + 0.0;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn mean_of(templates: &TemplateEmbeddings, k: usize, idx: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut acc = vec![0.0; templates.dim];
    let mut n = 0usize;
    for t in idx {
        for (a, v) in acc.iter_mut().zip(templates.get(k, t)) {
            *a += v;
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

fn check_shapes(mean: &MeanSimilarity, templates: &TemplateEmbeddings) -> Result<()> {
    let [_, k, t] = mean.dims;
    if k != templates.num_classes() {
        return Err(Error::Dimension { what: "similarity classes".into(), expected: templates.num_classes(), found: k });
    }
    if t != templates.num_templates() {
        return Err(Error::Dimension { what: "similarity templates".into(), expected: templates.num_templates(), found: t });
    }
    Ok(())
}

fn selections(mean: &MeanSimilarity, k: usize, n: usize) -> Vec<Vec<usize>> {
    (0..mean.dims[0]).map(|b| top_n_indices(mean.scores(b, k), n)).collect()
}

fn assemble(templates: &TemplateEmbeddings, rows: Vec<Vec<f64>>, selected: Vec<Vec<Vec<usize>>>) -> ClassEmbeddings {
    let k = rows.len();
    let data = rows.into_iter().flat_map(unit).collect();
    ClassEmbeddings { class_names: templates.class_names.clone(), vectors: Mat::from_vec(k, templates.dim, data), selected }
}

/// Plain template average per class, ignoring similarities.
pub fn select_templates_mean_all(templates: &TemplateEmbeddings) -> ClassEmbeddings {
    let t = templates.num_templates();
    let rows = (0..templates.num_classes()).map(|k| mean_of(templates, k, 0..t)).collect();
    let selected = vec![vec![(0..t).collect()]; templates.num_classes()];
    assemble(templates, rows, selected)
}

/// Top-N is taken per batch element; the top term averages over batches and
/// selected templates, then blends with the all-template mean by `lambda`.
pub fn select_templates_mixed(
    mean: &MeanSimilarity,
    templates: &TemplateEmbeddings,
    cfg: &SelectionConfig,
) -> Result<ClassEmbeddings> {
    check_shapes(mean, templates)?;
    let [b, k, t] = mean.dims;
    cfg.validate(t)?;
    let mut rows = Vec::with_capacity(k);
    let mut selected = Vec::with_capacity(k);
    for ki in 0..k {
        let sel = selections(mean, ki, cfg.top_n);
        let all = mean_of(templates, ki, 0..t);
        // When every batch keeps every template the two terms are the same
        // set; skip the blend so the result is exactly the mean.
        let row = if cfg.top_n == t {
            all
        } else {
            let mut top = vec![0.0; templates.dim];
            for s in &sel {
                let mut sorted = s.clone();
                sorted.sort_unstable();
                for (a, v) in top.iter_mut().zip(mean_of(templates, ki, sorted.into_iter())) {
                    *a += v / b as f64;
                }
            }
            top.iter().zip(&all).map(|(tp, m)| cfg.lambda * tp + (1.0 - cfg.lambda) * m).collect()
        };
        rows.push(row);
        selected.push(sel);
    }
    Ok(assemble(templates, rows, selected))
}

/// Normalised template weights of class `k`, one row per batch element.
pub fn weighted_template_weights(mean: &MeanSimilarity, k: usize, cfg: &SelectionConfig) -> Mat {
    let [b, _, t] = mean.dims;
    let mut w = Mat::filled(b, t, 1.0);
    for bi in 0..b {
        for ti in top_n_indices(mean.scores(bi, k), cfg.top_n) {
            w.set(bi, ti, cfg.alpha_enh);
        }
        let total: f64 = w.row(bi).iter().sum();
        w.row_mut(bi).iter_mut().for_each(|v| *v /= total);
    }
    w
}

pub fn select_templates_weighted(
    mean: &MeanSimilarity,
    templates: &TemplateEmbeddings,
    cfg: &SelectionConfig,
) -> Result<ClassEmbeddings> {
    check_shapes(mean, templates)?;
    let [b, k, t] = mean.dims;
    cfg.validate(t)?;
    let mut rows = Vec::with_capacity(k);
    let mut selected = Vec::with_capacity(k);
    for ki in 0..k {
        let w = weighted_template_weights(mean, ki, cfg);
        let mut row = vec![0.0; templates.dim];
        for bi in 0..b {
            for ti in 0..t {
                let wt = w.get(bi, ti) / b as f64;
                for (a, v) in row.iter_mut().zip(templates.get(ki, ti)) {
                    *a += wt * v;
                }
            }
        }
        rows.push(row);
        selected.push(selections(mean, ki, cfg.top_n));
    }
    Ok(assemble(templates, rows, selected))
}

pub fn select_templates(
    mean: &MeanSimilarity,
    templates: &TemplateEmbeddings,
    cfg: &SelectionConfig,
) -> Result<ClassEmbeddings> {
    match cfg.strategy {
        Strategy::MeanAll => {
            check_shapes(mean, templates)?;
            Ok(select_templates_mean_all(templates))
        }
        Strategy::Mixed => select_templates_mixed(mean, templates, cfg),
        Strategy::Weighted => select_templates_weighted(mean, templates, cfg),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleImageSelection {
    pub embeddings: ClassEmbeddings,
    /// Image id sampled for each class, `None` where the class had no images.
    pub sampled: Vec<Option<u64>>,
    pub warnings: Vec<String>,
}

/// Draws the image used for each class: one uniform pick from the class's
/// ascending image ids, classes in vocabulary order, skipping absent classes.
pub fn sample_class_images(dataset: &DatasetIndex, class_names: &[String], seed: u64) -> Vec<Option<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    class_names
        .iter()
        .map(|name| {
            let ids = dataset.image_ids_with_category(name);
            (!ids.is_empty()).then(|| ids[rng.random_range(0..ids.len())])
        })
        .collect()
}

/// Scores templates on one sampled image per class and applies the configured
/// strategy to that class alone. Classes without images use the plain mean.
pub fn select_with_single_image(
    dataset: &DatasetIndex,
    class_names: &[String],
    encoders: &EncoderSet,
    bank: &TemplateBank,
    cfg: &SelectionConfig,
) -> Result<SingleImageSelection> {
    let templates = encode_text_with(encoders.text.as_ref(), class_names, &bank.templates(), Some(&bank.ids()))?;
    cfg.validate(templates.num_templates())?;
    let sampled = sample_class_images(dataset, class_names, cfg.seed);
    let mut rows = Vec::with_capacity(class_names.len());
    let mut selected = Vec::with_capacity(class_names.len());
    let mut warnings = Vec::new();
    for (k, pick) in sampled.iter().enumerate() {
        let one = templates.subset(&[k]);
        let emb = match pick {
            None => {
                warnings.push(format!("class {:?} has no images; using the mean of all templates", class_names[k]));
                select_templates_mean_all(&one)
            }
            Some(id) => {
                let image = dataset.load_image(*id)?;
                let dense = encoders.visual.encode_dense(&image)?;
                let (h, w) = (dense.rows, 1);
                let pixels = PixelFeatures { height: h, width: w, batch: vec![dense] };
                let mean = mean_spatial(&compute_similarity_tensor(&pixels, &one)?);
                select_templates(&mean, &one, cfg)?
            }
        };
        rows.push(emb.vectors.row(0).to_vec());
        selected.extend(emb.selected);
    }
    let dim = templates.dim;
    let vectors = Mat::from_vec(class_names.len(), dim, rows.concat());
    Ok(SingleImageSelection {
        embeddings: ClassEmbeddings { class_names: class_names.to_vec(), vectors, selected },
        sampled,
        warnings,
    })
}
