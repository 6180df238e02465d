//! Command-line driver.
//!
//! Configuration comes from a single JSON file; any field can be overridden
//! on the command line with `--set dotted.path=value`, and the common fields
//! also have dedicated flags. Exit codes: 0 success, 2 configuration error,
//! 3 numeric abort, 1 anything else.

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::synth::generate::{generate_corpus, GenParams};
use crate::synth::taxonomy::{organ, tumor, Stage, Taxonomy};
use crate::synth::volume::GridShape;
use crate::synth::{self, io as corpus_io};
use crate::train::{self, TrainConfig, TrainData};
use crate::Real;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dpseg", about = "Dual-prompt 3D organ/tumor segmentation on synthetic phantoms", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config file (defaults apply when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config field: `--set steps=200 --set model.c=48`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub text_corpus: Option<PathBuf>,
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub use_ap: Option<bool>,
    #[arg(long)]
    pub use_tp: Option<bool>,
    #[arg(long)]
    pub hard_assign: Option<bool>,
    #[arg(long)]
    pub group_mask: Option<bool>,
    #[arg(long)]
    pub loss_s2p: Option<bool>,
    #[arg(long)]
    pub loss_p2p: Option<bool>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (plus taxonomy and text corpus files).
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of cases to generate.
        #[arg(long, default_value_t = 8)]
        cases: usize,
        /// Cubic case edge length.
        #[arg(long, default_value_t = 32)]
        extent: usize,
    },
    /// Build the anatomical prompt bank from a corpus.
    BuildBank {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run sliding-window inference on one case directory.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Case directory (image.raw + meta.json).
        #[arg(long)]
        case: PathBuf,
    },
    /// Train and evaluate the whole ablation grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Export prompt/query embeddings to CSV for external plotting.
    ExportEmbeddings {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn apply_override(value: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{part}' is not an object field")))?;
        if i + 1 == parts.len() {
            let parsed: serde_json::Value =
                serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            obj.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut value: serde_json::Value = match &self.config {
            Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
            None => serde_json::to_value(TrainConfig::default())?,
        };
        if !value.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        for ov in &self.overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{ov}' must be KEY=VALUE")))?;
            apply_override(&mut value, key, raw)?;
        }
        let mut cfg: TrainConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        macro_rules! override_path {
            ($($field:ident),*) => { $( if let Some(v) = &self.$field { cfg.$field = v.clone().into(); } )* };
        }
        override_path!(taxonomy, corpus, bank, text_corpus, out);
        if let Some(v) = &self.eval_corpus {
            cfg.eval_corpus = Some(v.clone());
        }
        macro_rules! override_val {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { cfg.$field = v; } )* };
        }
        override_val!(steps, batch_size, patch_size, base_lr, seed, use_ap, use_tp, hard_assign, group_mask, loss_s2p, loss_p2p);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Default desk-scale taxonomy: three organs plus a hosted tumor and an
/// invasive (T4) tumor.
pub fn default_taxonomy() -> Taxonomy {
    Taxonomy::new(vec![
        organ("hepar"),
        organ("lien"),
        organ("ren"),
        tumor("hepar_mass", 0, Stage::T2),
        tumor("lien_inv", 1, Stage::T4),
    ])
    .expect("default taxonomy is valid")
}

fn load_train_data(cfg: &TrainConfig) -> Result<TrainData<Real>> {
    let taxonomy = Taxonomy::load(&cfg.taxonomy)?;
    let cases = corpus_io::read_corpus::<Real>(&cfg.corpus)?;
    let bank = corpus_io::read_bank::<Real>(&cfg.bank, &taxonomy)?;
    let corpus = synth::text::TextCorpus::load(&cfg.text_corpus)?;
    Ok(TrainData { taxonomy, cases, bank, corpus })
}

fn load_model(cfg: &TrainConfig, taxonomy: Taxonomy, checkpoint: &Path) -> Result<Model<Real>> {
    let store = dpseg_tensor::load_params::<Real>(checkpoint)?;
    Model::from_store(cfg.model.clone(), taxonomy, store)
}

fn write_report(out: &Path, label: &str, taxonomy: &Taxonomy, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(format!("report_{label}.json")), serde_json::to_string_pretty(report)?)?;
    let csv = format!("{}\n{}\n", MetricsReport::csv_header(taxonomy), report.csv_row(taxonomy, label));
    std::fs::write(out.join(format!("report_{label}.csv")), csv)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { cfg, cases, extent } => {
            let cfg = cfg.resolve()?;
            let taxonomy = if cfg.taxonomy.exists() {
                Taxonomy::load(&cfg.taxonomy)?
            } else {
                let t = default_taxonomy();
                t.save(&cfg.taxonomy)?;
                t
            };
            let gen = GenParams::default();
            let generated = generate_corpus::<Real>(&taxonomy, GridShape::cube(extent), cases, cfg.seed, &gen)?;
            for case in &generated {
                corpus_io::write_case(&cfg.corpus, case, &taxonomy)?;
            }
            let text = synth::text::make_text_corpus(&taxonomy, cfg.seed)?;
            text.save(&cfg.text_corpus)?;
            println!("wrote {} cases under {}", generated.len(), cfg.corpus.display());
            Ok(())
        }
        Command::BuildBank { cfg } => {
            let cfg = cfg.resolve()?;
            let taxonomy = Taxonomy::load(&cfg.taxonomy)?;
            let cases = corpus_io::read_corpus::<Real>(&cfg.corpus)?;
            let bank = synth::build_prompt_bank(&cases, &taxonomy, GridShape::cube(cfg.model.prompt_shape))?;
            for warning in &bank.warnings {
                eprintln!("warning: {warning}");
            }
            corpus_io::write_bank(&cfg.bank, &bank)?;
            println!("wrote {} bank entries under {}", bank.total_entries(), cfg.bank.display());
            Ok(())
        }
        Command::Train { cfg } => {
            let cfg = cfg.resolve()?;
            let data = load_train_data(&cfg)?;
            std::fs::create_dir_all(&cfg.out)?;
            std::fs::write(cfg.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            let summary = train::run_training(&cfg, &data, &cfg.out)?;
            if let Some(losses) = &summary.last_losses {
                println!("finished {} steps; final total loss {:.6}", summary.steps_run, losses.total);
            } else {
                println!("finished {} steps", summary.steps_run);
            }
            println!("checkpoint: {}", summary.checkpoint_final.display());
            Ok(())
        }
        Command::Eval { cfg, checkpoint } => {
            let cfg = cfg.resolve()?;
            let data = load_train_data(&cfg)?;
            let eval_dir = cfg.eval_corpus.clone().unwrap_or_else(|| cfg.corpus.clone());
            let eval_cases = corpus_io::read_corpus::<Real>(&eval_dir)?;
            let model = load_model(&cfg, data.taxonomy.clone(), &checkpoint)?;
            let report = train::evaluate_model(&model, &data, &eval_cases, &cfg)?;
            write_report(&cfg.out, "eval", &data.taxonomy, &report)?;
            println!("mean DSC {:.4} over {} cases", report.mean_dsc(), eval_cases.len());
            Ok(())
        }
        Command::Infer { cfg, checkpoint, case } => {
            let cfg = cfg.resolve()?;
            let data = load_train_data(&cfg)?;
            let case = corpus_io::read_case::<Real>(&case)?;
            let model = load_model(&cfg, data.taxonomy.clone(), &checkpoint)?;
            let mask = if cfg.group_mask {
                crate::refer::build_attention_mask(&data.taxonomy, &cfg.extra_links)?
            } else {
                crate::refer::GroupMask::all_visible(&data.taxonomy)
            };
            let outcome = train::infer(&model, &data, &case.case_id, &case.image, &cfg, &mask)?;
            let out_dir = cfg.out.join(format!("pred_{}", case.case_id));
            std::fs::create_dir_all(&out_dir)?;
            for (k, m) in outcome.binary.iter().enumerate() {
                corpus_io::write_raw_f32(&out_dir.join(format!("mask_{k}.raw")), &m.to_scalar_row::<Real>())?;
            }
            let meta = corpus_io::CaseMeta {
                case_id: case.case_id.clone(),
                shape: case.image.shape.0,
                spacing: case.image.spacing,
                categories: data.taxonomy.names(),
                present: outcome.binary.iter().map(|m| !m.is_empty()).collect(),
                stage: data.taxonomy.categories.iter().map(|c| c.stage.map(|s| s.label().to_string())).collect(),
                seed: cfg.seed,
                overflow: vec![outcome.padded; data.taxonomy.len()],
            };
            std::fs::write(out_dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
            if outcome.padded {
                eprintln!("note: volume smaller than one patch; zero-padded for inference");
            }
            println!("wrote predictions under {}", out_dir.display());
            Ok(())
        }
        Command::Ablate { cfg } => {
            let cfg = cfg.resolve()?;
            let data = load_train_data(&cfg)?;
            let eval_dir = cfg
                .eval_corpus
                .clone()
                .ok_or_else(|| Error::Config("ablate needs eval_corpus".into()))?;
            let eval_cases = corpus_io::read_corpus::<Real>(&eval_dir)?;
            let grid_out = cfg.out.join("ablate");
            let rows = train::run_ablation_grid(&cfg, &data, &eval_cases, &grid_out)?;
            let mut csv = format!("{}\n", MetricsReport::csv_header(&data.taxonomy));
            for (name, report) in &rows {
                csv.push_str(&report.csv_row(&data.taxonomy, name));
                csv.push('\n');
                write_report(&grid_out, name, &data.taxonomy, report)?;
                println!("{name}: mean DSC {:.4}", report.mean_dsc());
            }
            std::fs::write(grid_out.join("ablation.csv"), csv)?;
            Ok(())
        }
        Command::ExportEmbeddings { cfg, checkpoint } => {
            let cfg = cfg.resolve()?;
            let data = load_train_data(&cfg)?;
            let model = load_model(&cfg, data.taxonomy.clone(), &checkpoint)?;
            let csv = train::export_embeddings(&model, &data, &data.cases, &cfg)?;
            std::fs::create_dir_all(&cfg.out)?;
            let path = cfg.out.join("embeddings.csv");
            std::fs::write(&path, csv)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}
