//! On-disk dataset format: `images/<id>.png`, `masks/<id>.png`, and
//! `labels.csv` with columns `id,label,background_class,split`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CfaugError, Result};
use crate::img::{Image, Region};
use crate::synth::LabeledExample;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRow {
    pub id: String,
    pub label: usize,
    pub background_class: usize,
    pub split: String,
}

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub id: String,
    pub split: String,
    pub example: LabeledExample,
}

pub fn images_dir(root: &Path) -> PathBuf {
    root.join("images")
}

pub fn masks_dir(root: &Path) -> PathBuf {
    root.join("masks")
}

pub fn labels_path(root: &Path) -> PathBuf {
    root.join("labels.csv")
}

/// Writes a split's examples under `root`, appending to labels.csv rows.
pub fn write_split(
    root: &Path,
    split: &str,
    examples: &[LabeledExample],
    rows: &mut Vec<LabelRow>,
) -> Result<()> {
    std::fs::create_dir_all(images_dir(root))?;
    std::fs::create_dir_all(masks_dir(root))?;
    for (i, e) in examples.iter().enumerate() {
        let id = format!("{split}-{i:05}");
        e.image.save_png(&images_dir(root).join(format!("{id}.png")))?;
        e.region.save_png(&masks_dir(root).join(format!("{id}.png")))?;
        rows.push(LabelRow {
            id,
            label: e.label,
            background_class: e.background_class,
            split: split.to_string(),
        });
    }
    Ok(())
}

pub fn write_labels(root: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(labels_path(root))
        .map_err(|e| CfaugError::Io(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| CfaugError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses labels.csv content. Untrusted input: header is required and
/// rows are validated.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<LabelRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let mut out = Vec::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| CfaugError::Format(format!("labels.csv: {e}")))?;
        if row.id.is_empty()
            || row.id.contains(['/', '\\', '\0'])
            || row.id.starts_with('.')
        {
            return Err(CfaugError::Format(format!(
                "labels.csv: unsafe id {:?}",
                row.id
            )));
        }
        out.push(row);
    }
    Ok(out)
}

/// Loads a dataset directory, grouped by split in labels.csv order.
pub fn load_dataset(root: &Path) -> Result<BTreeMap<String, Vec<DatasetRecord>>> {
    let bytes = std::fs::read(labels_path(root))?;
    let rows = parse_labels(&bytes)?;
    let mut out: BTreeMap<String, Vec<DatasetRecord>> = BTreeMap::new();
    for row in rows {
        let image = Image::load_png(&images_dir(root).join(format!("{}.png", row.id)))?;
        let region = Region::load_png(&masks_dir(root).join(format!("{}.png", row.id)))?;
        if image.height != region.height || image.width != region.width {
            return Err(CfaugError::ShapeMismatch(format!(
                "{}: image and mask sizes differ",
                row.id
            )));
        }
        out.entry(row.split.clone()).or_default().push(DatasetRecord {
            id: row.id,
            split: row.split,
            example: LabeledExample {
                image,
                region,
                label: row.label,
                background_class: row.background_class,
            },
        });
    }
    Ok(out)
}
