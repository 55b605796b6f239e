//! On-disk datasets: one MERT `(H, W, 3)` f32 tensor per sample plus an
//! `index.json` array of `{path, label, subject}` entries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dgcm::LabelSpace;
use crate::error::{Error, Result};
use crate::model::FlowTriplet;
use crate::tensor::{read_mert, write_mert};
use crate::train::synth::Sample;

pub const INDEX: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Relative to the dataset directory.
    pub path: String,
    pub label: String,
    pub subject: String,
}

/// `labels[sample.label]` names each sample's class.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample], labels: &[String]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("flows"))?;
    let mut index = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let label = labels
            .get(s.label)
            .ok_or_else(|| Error::InvalidArgument(format!("sample {i} has label {} without a name", s.label)))?;
        let path = format!("flows/{i:05}.mert");
        write_mert(dir.join(&path), &s.flow.to_tensor::<f32>())?;
        index.push(IndexEntry {
            path,
            label: label.clone(),
            subject: s.subject.clone(),
        });
    }
    fs::write(dir.join(INDEX), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// Loads a dataset, mapping label names to full-label indices of `space`.
pub fn read_dataset(dir: impl AsRef<Path>, space: &LabelSpace) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(INDEX))?;
    let index: Vec<IndexEntry> = serde_json::from_str(&text)?;
    index
        .into_iter()
        .map(|e| {
            let t = read_mert::<f32>(dir.join(&e.path))?;
            Ok(Sample {
                flow: FlowTriplet::from_tensor(&t)?,
                label: space.full_index(&e.label)?,
                subject: e.subject,
            })
        })
        .collect()
}
