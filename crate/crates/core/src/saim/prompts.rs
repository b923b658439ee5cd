//! The underwater prompt bank.
//!
//! The built-in bank is stored as JSON lines, one `{"group", "template"}`
//! record per template, in bank order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUILTIN_BANK: &str = include_str!("../../data/prompt_bank.jsonl");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateGroup {
    pub name: String,
    pub templates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateBank {
    pub groups: Vec<TemplateGroup>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    group: String,
    template: String,
}

impl TemplateBank {
    /// Parses JSON-lines records. Records of one group must be contiguous.
    pub fn parse(text: &str) -> Result<Self> {
        let mut groups: Vec<TemplateGroup> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| Error::Parse { record: format!("line {}", i + 1), detail: e.to_string() })?;
            if !rec.template.contains(crate::encoders::PLACEHOLDER) {
                return Err(Error::Format { template: rec.template });
            }
            match groups.last_mut() {
                Some(g) if g.name == rec.group => g.templates.push(rec.template),
                _ => {
                    if groups.iter().any(|g| g.name == rec.group) {
                        return Err(Error::Parse {
                            record: format!("line {}", i + 1),
                            detail: format!("group {:?} is split", rec.group),
                        });
                    }
                    groups.push(TemplateGroup { name: rec.group, templates: vec![rec.template] });
                }
            }
        }
        Ok(Self { groups })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            for t in &g.templates {
                let rec = Record { group: g.name.clone(), template: t.clone() };
                out.push_str(&serde_json::to_string(&rec).expect("plain strings serialise"));
                out.push('\n');
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.templates.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn templates(&self) -> Vec<String> {
        self.groups.iter().flat_map(|g| g.templates.iter().cloned()).collect()
    }

    /// Stable ids of the form `group:NN`, in bank order.
    pub fn ids(&self) -> Vec<String> {
        self.groups
            .iter()
            .flat_map(|g| (0..g.templates.len()).map(move |i| format!("{}:{i:02}", g.name)))
            .collect()
    }

    pub fn group(&self, name: &str) -> Option<&TemplateGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

pub fn build_prompt_bank() -> TemplateBank {
    TemplateBank::parse(BUILTIN_BANK).expect("built-in prompt bank is well formed")
}
