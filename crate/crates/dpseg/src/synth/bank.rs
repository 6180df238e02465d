//! Anatomical prompt bank: tight bounding-box crops of labeled structures,
//! resampled to one fixed prompt shape.

use crate::error::{Error, Result};
use crate::synth::generate::LabeledCase;
use crate::synth::taxonomy::Taxonomy;
use crate::synth::volume::{crop_resample_trilinear, GridShape, Volume};
use dpseg_tensor::Scalar;

/// Where a bank entry came from.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub case_id: String,
    pub category: String,
}

#[derive(Clone, Debug)]
pub struct BankEntry<T> {
    pub volume: Volume<T>,
    pub provenance: Provenance,
    /// Source-bbox corners, for audit and the closure property.
    pub bbox_lo: [usize; 3],
    pub bbox_hi: [usize; 3],
}

/// Per-category prompt volumes, all sharing `prompt_shape`.
#[derive(Clone, Debug)]
pub struct PromptBank<T> {
    pub prompt_shape: GridShape,
    /// `entries[i]` holds the prompts for taxonomy category `i`.
    pub entries: Vec<Vec<BankEntry<T>>>,
    /// Categories that ended up with fewer than two entries. Kept as a
    /// warning: exclusion sampling for them will fail later.
    pub warnings: Vec<String>,
}

impl<T: Scalar> PromptBank<T> {
    pub fn total_entries(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }
}

/// Crop the tight bounding box of every nonempty (case, category) mask from
/// the case image and resample it to `prompt_shape`.
pub fn build_prompt_bank<T: Scalar>(
    cases: &[LabeledCase<T>],
    taxonomy: &Taxonomy,
    prompt_shape: GridShape,
) -> Result<PromptBank<T>> {
    taxonomy.validate()?;
    for case in cases {
        if case.present.iter().all(|&p| !p) {
            return Err(Error::Input(format!("case '{}' has no nonempty mask", case.case_id)));
        }
    }
    let mut entries: Vec<Vec<BankEntry<T>>> = vec![Vec::new(); taxonomy.len()];
    for case in cases {
        for (i, mask) in case.masks.iter().enumerate() {
            let Some((lo, hi)) = mask.bbox() else { continue };
            let volume = crop_resample_trilinear(&case.image, lo, hi, prompt_shape);
            entries[i].push(BankEntry {
                volume,
                provenance: Provenance { case_id: case.case_id.clone(), category: taxonomy.categories[i].name.clone() },
                bbox_lo: lo,
                bbox_hi: hi,
            });
        }
    }
    let warnings = taxonomy
        .categories
        .iter()
        .enumerate()
        .filter(|(i, _)| !entries[*i].is_empty() && entries[*i].len() < 2)
        .map(|(i, c)| format!("category '{}' has only {} prompt entr{}", c.name, entries[i].len(), if entries[i].len() == 1 { "y" } else { "ies" }))
        .collect();
    Ok(PromptBank { prompt_shape, entries, warnings })
}
