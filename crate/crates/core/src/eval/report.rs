//! Per-class and grouped metrics, ranked best/worst lists and bar charts.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ap::{iou_thresholds, GroundTruth, InstancePrediction};
use crate::data::{ClassSplit, DatasetIndex};
use crate::error::{Error, Result};

pub const OVERALL_RULE: &str = "class-weighted: mean over every class of the intersection and open-vocabulary groups";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    /// Mean over the IoU grid.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_threshold: Vec<f64>,
    pub num_gt: usize,
}

impl ClassAp {
    pub fn from_grid(per_threshold: Vec<f64>, num_gt: usize) -> Self {
        let thr = iou_thresholds();
        let at = |t: f64| per_threshold[thr.iter().position(|&x| (x - t).abs() < 1e-12).expect("grid has 0.50/0.75")];
        let ap = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
        Self { ap, ap50: at(0.5), ap75: at(0.75), num_gt, per_threshold }
    }

    /// Same value at every threshold.
    pub fn constant(v: f64) -> Self {
        Self::from_grid(vec![v; 10], 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetric {
    pub m_ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupTable {
    pub intersection: Option<GroupMetric>,
    pub open_vocabulary: Option<GroupMetric>,
    pub overall: Option<GroupMetric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_rule: String,
    pub iou_thresholds: Vec<f64>,
    pub per_class: BTreeMap<String, ClassAp>,
    pub groups: GroupTable,
    /// Vocabulary classes without ground truth, left out of every mean.
    pub excluded: Vec<String>,
    pub num_predictions: usize,
}

impl EvalReport {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Three groups × three metrics, as a fixed-width text table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<18}{:>8}{:>8}{:>8}{:>9}\n", "group", "mAP", "AP50", "AP75", "classes");
        for (name, g) in [
            ("Intersection", &self.groups.intersection),
            ("Open-Vocabulary", &self.groups.open_vocabulary),
            ("Overall", &self.groups.overall),
        ] {
            match g {
                Some(m) => s += &format!("{name:<18}{:>8.2}{:>8.2}{:>8.2}{:>9}\n", m.m_ap, m.ap50, m.ap75, m.num_classes),
                None => s += &format!("{name:<18}{:>8}{:>8}{:>8}{:>9}\n", "-", "-", "-", 0),
            }
        }
        s
    }
}

fn mean_group<'a>(classes: impl Iterator<Item = &'a ClassAp>) -> Option<GroupMetric> {
    let list: Vec<_> = classes.collect();
    if list.is_empty() {
        return None;
    }
    let n = list.len() as f64;
    Some(GroupMetric {
        m_ap: list.iter().map(|c| c.ap).sum::<f64>() / n,
        ap50: list.iter().map(|c| c.ap50).sum::<f64>() / n,
        ap75: list.iter().map(|c| c.ap75).sum::<f64>() / n,
        num_classes: list.len(),
    })
}

/// Groups the per-class table by the split; classes absent from `per_class`
/// contribute nothing.
pub fn group_metrics(per_class: &BTreeMap<String, ClassAp>, split: &ClassSplit) -> EvalReport {
    let pick = |names: &[String]| names.iter().filter_map(|n| per_class.get(n)).collect::<Vec<_>>();
    let inter = pick(&split.intersection);
    let ov = pick(&split.ov_exclusive);
    let groups = GroupTable {
        intersection: mean_group(inter.iter().copied()),
        open_vocabulary: mean_group(ov.iter().copied()),
        overall: mean_group(inter.iter().chain(ov.iter()).copied()),
    };
    EvalReport {
        overall_rule: OVERALL_RULE.to_string(),
        iou_thresholds: iou_thresholds(),
        per_class: per_class.clone(),
        groups,
        excluded: Vec::new(),
        num_predictions: 0,
    }
}

/// Per-class AP over `vocabulary`, computed class-parallel and reduced in
/// vocabulary order.
pub fn evaluate(
    predictions: &[InstancePrediction],
    gts: &DatasetIndex,
    vocabulary: &[String],
    split: &ClassSplit,
) -> Result<EvalReport> {
    let gt = GroundTruth::new(gts)?;
    let thr = iou_thresholds();
    let results: Vec<(String, Option<Vec<f64>>)> = vocabulary
        .par_iter()
        .map(|c| gt.class_ap(predictions, c, &thr).map(|r| (c.clone(), r)))
        .collect::<Result<_>>()?;
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for (name, r) in results {
        match r {
            Some(grid) => {
                let n = gt.num_instances(&name);
                per_class.insert(name, ClassAp::from_grid(grid, n));
            }
            None => excluded.push(name),
        }
    }
    let mut report = group_metrics(&per_class, split);
    report.excluded = excluded;
    report.num_predictions = predictions.len();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub class: String,
    pub ap: f64,
    /// AP of the same class in the second report, when paired.
    pub paired_ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRanking {
    pub best: Vec<RankEntry>,
    pub worst: Vec<RankEntry>,
    pub notice: Option<String>,
}

/// Best and worst `top_k` classes by AP; equal APs order by class name.
pub fn per_class_report(report: &EvalReport, top_k: usize, paired: Option<&EvalReport>) -> ClassRanking {
    let mut rows: Vec<(&String, f64)> = report.per_class.iter().map(|(k, v)| (k, v.ap)).collect();
    let notice = (top_k > rows.len())
        .then(|| format!("requested top {top_k} but only {} classes have ground truth", rows.len()));
    let k = top_k.min(rows.len());
    let entry = |(name, ap): (&String, f64)| RankEntry {
        class: name.clone(),
        ap,
        paired_ap: paired.and_then(|p| p.per_class.get(name)).map(|c| c.ap),
    };
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    let best = rows.iter().take(k).copied().map(entry).collect();
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    let worst = rows.iter().take(k).copied().map(entry).collect();
    ClassRanking { best, worst, notice }
}

/// Horizontal-free grouped bar chart of one ranked list.
pub fn write_ranking_svg(entries: &[RankEntry], title: &str, labels: (&str, &str), path: &Path) -> Result<()> {
    use plotters::prelude::*;

    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let width = 120 + 60 * entries.len().max(1) as u32;
        let root = SVGBackend::new(path, (width, 420)).into_drawing_area();
        root.fill(&WHITE)?;
        let n = entries.len().max(1);
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(110)
            .y_label_area_size(45)
            .build_cartesian_2d(0.0..n as f64, 0.0..100.0)?;
        let names: Vec<String> = entries.iter().map(|e| e.class.clone()).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| {
                let i = (*x - 0.5).round();
                if (x - 0.5 - i).abs() < 1e-6 && i >= 0.0 {
                    names.get(i as usize).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc("AP")
            .draw()?;
        let paired = entries.iter().any(|e| e.paired_ap.is_some());
        let bw = if paired { 0.38 } else { 0.7 };
        chart
            .draw_series(entries.iter().enumerate().map(|(i, e)| {
                let x0 = i as f64 + 0.5 - if paired { bw } else { bw / 2.0 };
                Rectangle::new([(x0, 0.0), (x0 + bw, e.ap)], BLUE.filled())
            }))?
            .label(labels.0)
            .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], BLUE.filled()));
        if paired {
            chart
                .draw_series(entries.iter().enumerate().map(|(i, e)| {
                    let x0 = i as f64 + 0.5;
                    Rectangle::new([(x0, 0.0), (x0 + bw, e.paired_ap.unwrap_or(0.0))], RED.filled())
                }))?
                .label(labels.1)
                .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], RED.filled()));
        }
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
