//! On-disk corpus formats.
//!
//! * Case: `corpus/<case_id>/{image.raw, mask_<k>.raw, meta.json}` where each
//!   `.raw` is a little-endian 32-bit-float voxel blob in `(H, W, D)`
//!   row-major order.
//! * Prompt bank: `bank/<category>/<case_id>.raw` plus `bank/index.json`.
//! * Text corpus: a single JSON file (see [`crate::synth::text`]).

use crate::error::{Error, Result};
use crate::synth::bank::{BankEntry, PromptBank, Provenance};
use crate::synth::generate::LabeledCase;
use crate::synth::taxonomy::{Stage, Taxonomy};
use crate::synth::volume::{GridShape, Mask, Volume};
use dpseg_tensor::Scalar;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Serialize, Deserialize)]
pub struct CaseMeta {
    pub case_id: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub categories: Vec<String>,
    pub present: Vec<bool>,
    pub stage: Vec<Option<String>>,
    pub seed: u64,
    #[serde(default)]
    pub overflow: Vec<bool>,
}

pub fn write_raw_f32<T: Scalar>(path: &Path, data: &[T]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_raw_f32<T: Scalar>(path: &Path, expect: usize) -> Result<Vec<T>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expect * 4 {
        return Err(Error::Shape(format!("{} holds {} bytes, expected {}", path.display(), bytes.len(), expect * 4)));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| T::from_f64_c(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
        .collect())
}

pub fn write_case<T: Scalar>(root: &Path, case: &LabeledCase<T>, taxonomy: &Taxonomy) -> Result<()> {
    let dir = root.join(&case.case_id);
    fs::create_dir_all(&dir)?;
    write_raw_f32(&dir.join("image.raw"), &case.image.data)?;
    for (k, mask) in case.masks.iter().enumerate() {
        write_raw_f32(&dir.join(format!("mask_{k}.raw")), &mask.to_scalar_row::<T>())?;
    }
    let meta = CaseMeta {
        case_id: case.case_id.clone(),
        shape: case.image.shape.0,
        spacing: case.image.spacing,
        categories: taxonomy.names(),
        present: case.present.clone(),
        stage: taxonomy.categories.iter().map(|c| c.stage.map(|s| s.label().to_string())).collect(),
        seed: case.seed,
        overflow: case.overflow.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_case<T: Scalar>(dir: &Path) -> Result<LabeledCase<T>> {
    let meta: CaseMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let shape = GridShape(meta.shape);
    let image = Volume::new(shape, meta.spacing, read_raw_f32(&dir.join("image.raw"), shape.numel())?)?;
    let mut masks = Vec::with_capacity(meta.categories.len());
    for k in 0..meta.categories.len() {
        let raw: Vec<T> = read_raw_f32(&dir.join(format!("mask_{k}.raw")), shape.numel())?;
        let data = raw.iter().map(|v| v.as_f64() >= 0.5).collect();
        masks.push(Mask { shape, spacing: meta.spacing, data });
    }
    let overflow = if meta.overflow.len() == meta.categories.len() { meta.overflow } else { vec![false; meta.categories.len()] };
    Ok(LabeledCase {
        case_id: meta.case_id,
        image,
        masks,
        present: meta.present,
        overflow,
        seed: meta.seed,
    })
}

/// Load every case directory under `root`, sorted by case id.
pub fn read_corpus<T: Scalar>(root: &Path) -> Result<Vec<LabeledCase<T>>> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir() && e.path().join("meta.json").exists())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!("no cases found under {}", root.display())));
    }
    dirs.iter().map(|d| read_case(d)).collect()
}

#[derive(Serialize, Deserialize)]
pub struct BankIndexEntry {
    pub category: String,
    pub case_id: String,
    pub path: String,
    pub bbox_lo: [usize; 3],
    pub bbox_hi: [usize; 3],
}

#[derive(Serialize, Deserialize)]
pub struct BankIndex {
    pub prompt_shape: [usize; 3],
    pub entries: Vec<BankIndexEntry>,
    pub warnings: Vec<String>,
}

pub fn write_bank<T: Scalar>(root: &Path, bank: &PromptBank<T>) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut index = BankIndex { prompt_shape: bank.prompt_shape.0, entries: Vec::new(), warnings: bank.warnings.clone() };
    for per_cat in &bank.entries {
        for e in per_cat {
            let rel = format!("{}/{}.raw", e.provenance.category, e.provenance.case_id);
            let path = root.join(&rel);
            fs::create_dir_all(path.parent().unwrap())?;
            write_raw_f32(&path, &e.volume.data)?;
            index.entries.push(BankIndexEntry {
                category: e.provenance.category.clone(),
                case_id: e.provenance.case_id.clone(),
                path: rel,
                bbox_lo: e.bbox_lo,
                bbox_hi: e.bbox_hi,
            });
        }
    }
    fs::write(root.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn read_bank<T: Scalar>(root: &Path, taxonomy: &Taxonomy) -> Result<PromptBank<T>> {
    let index: BankIndex = serde_json::from_slice(&fs::read(root.join("index.json"))?)?;
    let shape = GridShape(index.prompt_shape);
    let mut entries: Vec<Vec<BankEntry<T>>> = vec![Vec::new(); taxonomy.len()];
    for e in &index.entries {
        let Some(cat_idx) = taxonomy.index_of(&e.category) else {
            return Err(Error::Config(format!("bank entry references unknown category '{}'", e.category)));
        };
        let data = read_raw_f32(&root.join(&e.path), shape.numel())?;
        entries[cat_idx].push(BankEntry {
            volume: Volume::new(shape, [1.0, 1.0, 1.0], data)?,
            provenance: Provenance { case_id: e.case_id.clone(), category: e.category.clone() },
            bbox_lo: e.bbox_lo,
            bbox_hi: e.bbox_hi,
        });
    }
    Ok(PromptBank { prompt_shape: shape, entries, warnings: index.warnings.clone() })
}

/// Parse a stage label back from `meta.json`.
pub fn parse_stage(label: &str) -> Option<Stage> {
    match label {
        "T1" => Some(Stage::T1),
        "T2" => Some(Stage::T2),
        "T3" => Some(Stage::T3),
        "T4" => Some(Stage::T4),
        _ => None,
    }
}
