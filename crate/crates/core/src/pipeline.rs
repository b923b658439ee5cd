//! Dataset-level inference, evaluation and the top-N sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassSplit, DatasetIndex};
use crate::encoders::EncoderSet;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport, InstancePrediction};
use crate::model::{infer, InferConfig, Model};
use crate::saim::{build_prompt_bank, select_with_single_image, SelectionConfig, SingleImageSelection};
use crate::trainer::Checkpoint;

/// The top-N grid of the ablation table.
pub const TOPN_GRID: [usize; 7] = [1, 2, 5, 10, 20, 50, 80];

/// Class embeddings for `vocabulary` from one sampled image per class.
pub fn class_embeddings(
    dataset: &DatasetIndex,
    vocabulary: &[String],
    encoders: &EncoderSet,
    selection: &SelectionConfig,
) -> Result<SingleImageSelection> {
    select_with_single_image(dataset, vocabulary, encoders, &build_prompt_bank(), selection)
}

/// Predictions for every image, in image order.
pub fn predict_dataset(
    model: &Model,
    encoders: &EncoderSet,
    dataset: &DatasetIndex,
    vocabulary: &[String],
    selection: &SingleImageSelection,
    cfg: &InferConfig,
) -> Result<Vec<InstancePrediction>> {
    let per_image: Vec<Vec<InstancePrediction>> = dataset
        .images
        .par_iter()
        .map(|im| {
            let image = dataset.load_image(im.id)?;
            infer(model, encoders, &image, vocabulary, &selection.embeddings, cfg)
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<InstancePrediction>,
    pub selection: SingleImageSelection,
}

pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    dataset: &DatasetIndex,
    vocabulary: &[String],
    split: &ClassSplit,
    selection_cfg: &SelectionConfig,
) -> Result<Evaluation> {
    let encoders = EncoderSet::from_config(&checkpoint.config.encoder)?;
    let selection = class_embeddings(dataset, vocabulary, &encoders, selection_cfg)?;
    let model = checkpoint.model();
    let predictions = predict_dataset(&model, &encoders, dataset, vocabulary, &selection, &checkpoint.config.infer)?;
    let report = evaluate(&predictions, dataset, vocabulary, split)?;
    Ok(Evaluation { report, predictions, selection })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub top_n: usize,
    /// `top_n` clamped to the template count.
    pub effective_n: usize,
    pub intersection_map: Option<f64>,
    pub ov_map: Option<f64>,
    pub overall_map: Option<f64>,
    pub overall_ap50: Option<f64>,
    pub overall_ap75: Option<f64>,
}

pub fn topn_sweep(
    checkpoint: &Checkpoint,
    dataset: &DatasetIndex,
    vocabulary: &[String],
    split: &ClassSplit,
    base: &SelectionConfig,
    grid: &[usize],
) -> Result<Vec<SweepRow>> {
    let templates = build_prompt_bank().len();
    grid.iter()
        .map(|&n| {
            let effective_n = n.min(templates);
            let cfg = SelectionConfig { top_n: effective_n, ..base.clone() };
            let r = evaluate_checkpoint(checkpoint, dataset, vocabulary, split, &cfg)?.report;
            let g = &r.groups;
            Ok(SweepRow {
                top_n: n,
                effective_n,
                intersection_map: g.intersection.as_ref().map(|m| m.m_ap),
                ov_map: g.open_vocabulary.as_ref().map(|m| m.m_ap),
                overall_map: g.overall.as_ref().map(|m| m.m_ap),
                overall_ap50: g.overall.as_ref().map(|m| m.ap50),
                overall_ap75: g.overall.as_ref().map(|m| m.ap75),
            })
        })
        .collect()
}

/// Tab-separated sweep table with a header row; absent values print `-`.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    let mut s = String::from("top_n\teffective_n\tintersection_mAP\tov_mAP\toverall_mAP\toverall_AP50\toverall_AP75\n");
    for r in rows {
        s += &format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.top_n,
            r.effective_n,
            f(r.intersection_map),
            f(r.ov_map),
            f(r.overall_map),
            f(r.overall_ap50),
            f(r.overall_ap75)
        );
    }
    s
}
