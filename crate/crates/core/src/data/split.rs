//! Name-keyed class splits and task configuration.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::coco::DatasetIndex;
use crate::error::{Error, Result};

/// Three disjoint, sorted name lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSplit {
    pub train_exclusive: Vec<String>,
    pub intersection: Vec<String>,
    pub ov_exclusive: Vec<String>,
}

impl ClassSplit {
    pub fn from_names<S: AsRef<str>>(train: &[S], val: &[S]) -> Self {
        let train: BTreeSet<String> = train.iter().map(|s| s.as_ref().to_string()).collect();
        let val: BTreeSet<String> = val.iter().map(|s| s.as_ref().to_string()).collect();
        Self {
            train_exclusive: train.difference(&val).cloned().collect(),
            intersection: train.intersection(&val).cloned().collect(),
            ov_exclusive: val.difference(&train).cloned().collect(),
        }
    }

    /// `train_exclusive ∪ intersection`, sorted.
    pub fn train(&self) -> Vec<String> {
        sorted_union(&self.train_exclusive, &self.intersection)
    }

    /// `intersection ∪ ov_exclusive`, sorted.
    pub fn val(&self) -> Vec<String> {
        sorted_union(&self.intersection, &self.ov_exclusive)
    }

    pub fn is_disjoint(&self) -> bool {
        let a: BTreeSet<_> = self.train_exclusive.iter().collect();
        let b: BTreeSet<_> = self.intersection.iter().collect();
        let c: BTreeSet<_> = self.ov_exclusive.iter().collect();
        a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c)
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train_exclusive.len() + self.intersection.len(),
            val: self.intersection.len() + self.ov_exclusive.len(),
            train_exclusive: self.train_exclusive.len(),
            intersection: self.intersection.len(),
            ov_exclusive: self.ov_exclusive.len(),
        }
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("split serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if !split.is_disjoint() {
            return Err(Error::Parse { record: path.display().to_string(), detail: "split groups overlap".into() });
        }
        Ok(split)
    }
}

fn sorted_union(a: &[String], b: &[String]) -> Vec<String> {
    a.iter().chain(b).cloned().collect::<BTreeSet<_>>().into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub train_exclusive: usize,
    pub intersection: usize,
    pub ov_exclusive: usize,
}

pub fn build_class_split(train_index: &DatasetIndex, val_index: &DatasetIndex) -> ClassSplit {
    ClassSplit::from_names(&train_index.category_names(), &val_index.category_names())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    #[default]
    InDomain,
    CrossDomain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub mode: TaskMode,
    pub train_source: String,
    pub eval_source: String,
    /// Classes supervised during training.
    pub train_classes: Vec<String>,
    /// Ordered class names scored at inference.
    pub vocabulary: Vec<String>,
}

/// In-domain trains on the split's train classes; cross-domain trains on the
/// source's classes and requires that no name is shared with the target.
pub fn make_task_config(
    mode: TaskMode,
    train_source: &str,
    eval_source: &str,
    split: &ClassSplit,
) -> Result<TaskConfig> {
    if mode == TaskMode::CrossDomain && !split.intersection.is_empty() {
        return Err(Error::Config(format!(
            "cross-domain task shares {} categories with the target (first: {:?})",
            split.intersection.len(),
            split.intersection[0]
        )));
    }
    Ok(TaskConfig {
        mode,
        train_source: train_source.to_string(),
        eval_source: eval_source.to_string(),
        train_classes: split.train(),
        vocabulary: split.val(),
    })
}
