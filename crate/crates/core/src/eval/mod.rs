//! Mask AP evaluation and reporting.

mod ap;
mod report;

pub use ap::{
    compute_ap, interpolated_ap, iou_thresholds, mask_iou, predictions_from_json, predictions_to_json, GroundTruth,
    InstancePrediction, RECALL_POINTS,
};
pub use report::{
    evaluate, group_metrics, per_class_report, write_ranking_svg, ClassAp, ClassRanking, EvalReport, GroupMetric,
    GroupTable, RankEntry, OVERALL_RULE,
};
