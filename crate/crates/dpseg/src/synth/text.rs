//! Textual prompt corpus: deterministic per-category long descriptions plus
//! the four short templates instantiated around a `[CLS]` placeholder.

use crate::error::{Error, Result};
use crate::synth::taxonomy::{Kind, Stage, Taxonomy};
use dpseg_tensor::rng::KeyedRng;
use serde::{Deserialize, Serialize};

pub const CLS_PLACEHOLDER: &str = "[CLS]";

/// The four short phrase templates.
pub const SHORT_TEMPLATES: [&str; 4] = [
    "A computerized tomography of a [CLS].",
    "A photo of a [CLS].",
    "There is [CLS] in this computerized tomography.",
    "[CLS]",
];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TextCorpus {
    /// Per-category long description, aligned with the taxonomy ordering.
    pub long_descriptions: Vec<String>,
    pub short_templates: Vec<String>,
}

impl TextCorpus {
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        if self.long_descriptions.len() != taxonomy.len() {
            return Err(Error::Config(format!(
                "corpus has {} long descriptions for {} categories",
                self.long_descriptions.len(),
                taxonomy.len()
            )));
        }
        if self.short_templates.is_empty() {
            return Err(Error::Config("corpus needs at least one short template".into()));
        }
        for t in &self.short_templates {
            if t.matches(CLS_PLACEHOLDER).count() != 1 {
                return Err(Error::Config(format!("template '{t}' must contain {CLS_PLACEHOLDER} exactly once")));
            }
        }
        Ok(())
    }

    pub fn instantiate(&self, template_idx: usize, name: &str) -> String {
        self.short_templates[template_idx].replace(CLS_PLACEHOLDER, name)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

// Descriptor pools. Long descriptions draw several clauses so each category
// accumulates distinctive vocabulary; short templates stay generic.
const TEXTURE: [&str; 4] = ["homogeneous", "mildly heterogeneous", "granular", "stippled"];
const BOUNDARY: [&str; 4] = ["smooth", "lobulated", "well demarcated", "slightly irregular"];
const SIZE_WORD: [&str; 3] = ["compact", "medium sized", "bulky"];

fn stage_clause(stage: Stage) -> &'static str {
    match stage {
        Stage::T1 => "a small early stage lesion confined deep within the parenchyma",
        Stage::T2 => "a moderately sized lesion still confined to the organ of origin",
        Stage::T3 => "a large lesion expanding toward the organ capsule",
        Stage::T4 => "an invasive lesion breaching the organ boundary into adjacent tissue",
    }
}

/// Build the corpus. Long descriptions are assembled deterministically from
/// category attributes; the seed only selects among descriptor synonyms.
pub fn make_text_corpus(taxonomy: &Taxonomy, seed: u64) -> Result<TextCorpus> {
    taxonomy.validate()?;
    let mut long_descriptions = Vec::with_capacity(taxonomy.len());
    for (i, cat) in taxonomy.categories.iter().enumerate() {
        let mut rng = KeyedRng::from_key(&[seed, 0x7e47, i as u64]);
        let texture = TEXTURE[rng.index(TEXTURE.len())];
        let boundary = BOUNDARY[rng.index(BOUNDARY.len())];
        let size = SIZE_WORD[rng.index(SIZE_WORD.len())];
        let text = match cat.kind {
            Kind::Organ => format!(
                "The {name} is a {size} abdominal structure with {texture} tissue and a {boundary} outline; \
on computerized tomography it shows a steady {name} attenuation band that distinguishes {name} parenchyma \
from surrounding fat planes.",
                name = cat.name,
            ),
            Kind::Tumor => {
                let host = &taxonomy.categories[cat.host.unwrap()].name;
                let stage_part = cat.stage.map(|s| format!(" Staging: {}, {}.", s.label(), stage_clause(s))).unwrap_or_default();
                format!(
                    "The {name} is a focal {texture} mass arising within the {host}, appearing as a {size} region of \
altered attenuation against {host} tissue with a {boundary} margin.{stage_part}",
                    name = cat.name,
                )
            }
        };
        long_descriptions.push(text);
    }
    Ok(TextCorpus {
        long_descriptions,
        short_templates: SHORT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::taxonomy::{organ, tumor, Taxonomy};

    fn tax() -> Taxonomy {
        Taxonomy::new(vec![organ("liver"), tumor("liver_mass", 0, Stage::T2)]).unwrap()
    }

    #[test]
    fn short_template_instantiates_exactly_as_printed() {
        let corpus = make_text_corpus(&tax(), 0).unwrap();
        assert_eq!(corpus.instantiate(0, "liver"), "A computerized tomography of a liver.");
    }

    #[test]
    fn stageless_tumor_omits_stage_clause() {
        let t = Taxonomy::new(vec![organ("o"), crate::synth::taxonomy::Category {
            name: "lesion".into(),
            kind: Kind::Tumor,
            host: Some(0),
            stage: None,
        }])
        .unwrap();
        let corpus = make_text_corpus(&t, 0).unwrap();
        assert!(!corpus.long_descriptions[1].contains("Staging:"));
        let staged = make_text_corpus(&tax(), 0).unwrap();
        assert!(staged.long_descriptions[1].contains("Staging: T2"));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = make_text_corpus(&tax(), 7).unwrap();
        let b = make_text_corpus(&tax(), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_validates_against_taxonomy() {
        let corpus = make_text_corpus(&tax(), 1).unwrap();
        corpus.validate(&tax()).unwrap();
        let mut broken = corpus.clone();
        broken.short_templates[0] = "no placeholder here".into();
        assert!(broken.validate(&tax()).is_err());
    }
}
