//! Synthetic corpus: taxonomy, volumes, case generation, prompt bank and
//! textual prompt corpus.

pub mod bank;
pub mod generate;
pub mod io;
pub mod taxonomy;
pub mod text;
pub mod volume;

pub use bank::{build_prompt_bank, BankEntry, PromptBank, Provenance};
pub use generate::{case_seed, generate_case, generate_corpus, GenParams, LabeledCase};
pub use taxonomy::{organ, tumor, Category, Kind, Stage, Taxonomy};
pub use text::{make_text_corpus, TextCorpus, CLS_PLACEHOLDER, SHORT_TEMPLATES};
pub use volume::{crop_resample_trilinear, GridShape, Mask, Volume};
