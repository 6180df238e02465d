//! Category taxonomy: organs, tumors, hosts and stages.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Organ,
    Tumor,
}

/// Tumor extent stage. Higher stages mean larger tumors; T4 additionally
/// permits invasion beyond the host organ boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    T1,
    T2,
    T3,
    T4,
}

impl Stage {
    /// Tumor radius as a fraction of the host organ's effective radius.
    pub fn radius_fraction(self) -> f64 {
        match self {
            Stage::T1 => 0.25,
            Stage::T2 => 0.35,
            Stage::T3 => 0.50,
            Stage::T4 => 0.62,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stage::T1 => "T1",
            Stage::T2 => "T2",
            Stage::T3 => "T3",
            Stage::T4 => "T4",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub kind: Kind,
    /// Index of the host organ; required for tumors, absent for organs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Taxonomy {
    pub categories: Vec<Category>,
}

impl Taxonomy {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        let t = Self { categories };
        t.validate()?;
        Ok(t)
    }

    /// Number of categories (and of queries/masks downstream).
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Config("taxonomy must have at least one category".into()));
        }
        for (i, c) in self.categories.iter().enumerate() {
            for other in &self.categories[..i] {
                if other.name == c.name {
                    return Err(Error::Config(format!("duplicate category name '{}'", c.name)));
                }
            }
            match c.kind {
                Kind::Organ => {
                    if c.host.is_some() {
                        return Err(Error::Config(format!("organ '{}' must not declare a host", c.name)));
                    }
                }
                Kind::Tumor => {
                    let host = c.host.ok_or_else(|| Error::Config(format!("tumor '{}' has no host", c.name)))?;
                    if host >= i {
                        return Err(Error::Config(format!(
                            "tumor '{}' host index {host} must precede it in the ordering",
                            c.name
                        )));
                    }
                    if self.categories[host].kind != Kind::Organ {
                        return Err(Error::Config(format!("tumor '{}' host must be an organ", c.name)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let t: Taxonomy = serde_json::from_slice(&std::fs::read(path)?)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Convenience constructors used by tests and the default configs.
pub fn organ(name: &str) -> Category {
    Category { name: name.into(), kind: Kind::Organ, host: None, stage: None }
}

pub fn tumor(name: &str, host: usize, stage: Stage) -> Category {
    Category { name: name.into(), kind: Kind::Tumor, host: Some(host), stage: Some(stage) }
}
