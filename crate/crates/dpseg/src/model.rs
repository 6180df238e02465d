//! Whole-model assembly: parameter initialization, tape binding and the
//! end-to-end forward pass from an image patch to masks, presence logits and
//! contrastive embeddings.

use crate::backbone::{self, BackboneConfig};
use crate::error::{Error, Result};
use crate::heads::{self, S2pTarget};
use crate::prompts;
use crate::refer::{self, ContrastEmbeddings, DecodedQueries, GroupMask};
use crate::refiner::{self, RefinedQuerySet};
use crate::synth::taxonomy::Taxonomy;
use dpseg_tensor::rng::{hash_str, KeyedRng};
use dpseg_tensor::{Gradients, NdArray, ParamStore, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Query channel width C.
    pub c: usize,
    /// Anatomical / textual embedding widths.
    pub c_a: usize,
    pub c_t: usize,
    /// Contrastive projection width.
    pub c_k: usize,
    /// Edge length of the cubic prompt volumes.
    pub prompt_shape: usize,
    pub infonce_temperature: f64,
    pub paper_literal_infonce: bool,
    pub s2p_target: S2pTarget,
    pub dice_smooth: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            c: 32,
            c_a: 64,
            c_t: 64,
            c_k: 32,
            prompt_shape: 16,
            infonce_temperature: 0.07,
            paper_literal_infonce: false,
            s2p_target: S2pTarget::Both,
            dice_smooth: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.prompt_shape % 4 != 0 {
            return Err(Error::Config(format!("prompt_shape {} must be divisible by 4", self.prompt_shape)));
        }
        if self.infonce_temperature <= 0.0 {
            return Err(Error::Config("infonce_temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Ablation switches threaded through the forward pass.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_ap: bool,
    pub use_tp: bool,
    pub hard_assign: bool,
    pub group_mask: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { use_ap: true, use_tp: true, hard_assign: true, group_mask: true }
    }
}

/// Tape-bound parameters: one leaf per named parameter, so gradients can be
/// collected back by name after the backward sweep.
pub struct Binding<'t, T: Scalar> {
    tape: &'t Tape<T>,
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Binding<'t, T> {
    pub fn bind(tape: &'t Tape<T>, store: &ParamStore<T>) -> Self {
        let mut vars = BTreeMap::new();
        for (name, param) in store.iter() {
            vars.insert(name.clone(), tape.leaf(param.value.clone()));
        }
        Self { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn var(&self, name: &str) -> Var<'t, T> {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collect parameter gradients by name, skipping frozen entries.
    pub fn grads_by_name(&self, grads: &Gradients<T>, store: &ParamStore<T>) -> BTreeMap<String, NdArray<T>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if store.get(name).frozen {
                continue;
            }
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// The dual-prompt segmentation model: taxonomy, hyperparameters and the
/// named parameter store.
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub taxonomy: Taxonomy,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Initialize all parameters deterministically from `seed`.
    pub fn init(cfg: ModelConfig, taxonomy: Taxonomy, seed: u64) -> Result<Self> {
        cfg.validate()?;
        taxonomy.validate()?;
        let mut store = ParamStore::new();
        backbone::init_params(&mut store, &cfg.backbone, seed);
        prompts::init_params(&mut store, cfg.c_a, cfg.c_t, cfg.c, seed);
        refiner::init_params(&mut store, cfg.backbone.levels, cfg.c, &cfg.backbone.channels, seed);
        refer::init_params(&mut store, cfg.c, cfg.c_k, seed);
        let n = taxonomy.len();
        let bound = 1.0 / (cfg.c as f64).sqrt();
        store.insert(
            "queries.seg",
            KeyedRng::from_key(&[seed, hash_str("queries.seg")]).fill_uniform(
                &[n, cfg.c],
                T::from_f64_c(-bound),
                T::from_f64_c(bound),
            ),
        );
        if cfg.c != cfg.backbone.c_o {
            let b = 1.0 / (cfg.c as f64).sqrt();
            store.insert(
                "head.adapt.w",
                KeyedRng::from_key(&[seed, hash_str("head.adapt.w")]).fill_uniform(
                    &[cfg.c, cfg.backbone.c_o],
                    T::from_f64_c(-b),
                    T::from_f64_c(b),
                ),
            );
            store.insert("head.adapt.b", NdArray::zeros(&[cfg.backbone.c_o]));
        }
        Ok(Self { cfg, taxonomy, store })
    }

    pub fn from_store(cfg: ModelConfig, taxonomy: Taxonomy, store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        taxonomy.validate()?;
        if !store.contains("queries.seg") {
            return Err(Error::Config("checkpoint store is missing queries.seg".into()));
        }
        Ok(Self { cfg, taxonomy, store })
    }
}

/// Everything one forward pass produces that later stages may need.
pub struct ForwardOutputs<'t, T: Scalar> {
    /// Soft masks, `(N, V)` over the flattened patch grid.
    pub masks: Var<'t, T>,
    pub presence_logits: Var<'t, T>,
    pub refined: RefinedQuerySet<'t, T>,
    pub o_s: Var<'t, T>,
    pub contrast: Option<ContrastEmbeddings<'t, T>>,
    pub patch_shape: [usize; 3],
}

/// Inputs to one forward pass. Prompt embeddings are computed outside the
/// tape (the anatomical encoder is frozen; the textual encoder has no
/// parameters) and enter as constants.
pub struct ForwardInputs<'a, T: Scalar> {
    pub image: &'a NdArray<T>,
    pub anat_embeddings: Option<NdArray<T>>,
    pub text_embeddings: Option<NdArray<T>>,
    pub group_mask: &'a GroupMask,
    pub flags: AblationFlags,
    pub noise_seed: u64,
    pub noise_enabled: bool,
    /// Compute the contrastive projections (needed only when the
    /// contrastive losses are on).
    pub want_contrast: bool,
}

pub fn forward<'t, T: Scalar>(
    binding: &Binding<'t, T>,
    model: &Model<T>,
    inputs: &ForwardInputs<'_, T>,
) -> Result<ForwardOutputs<'t, T>> {
    let cfg = &model.cfg;
    let n = model.taxonomy.len();
    let flags = inputs.flags;
    if flags.group_mask && !flags.use_ap && !flags.use_tp {
        return Err(Error::Config("group_mask requires at least one prompt family".into()));
    }

    let image = binding.tape().leaf(inputs.image.clone());
    let feats = backbone::encode(binding, image, &cfg.backbone)?;
    let pixel_map = backbone::decode(binding, &feats, &cfg.backbone)?;
    let ps = pixel_map.shape();
    let patch_shape = [ps[1], ps[2], ps[3]];
    let pixel_flat = pixel_map.reshape(&[cfg.backbone.c_o, ps[1] * ps[2] * ps[3]]);

    let e_a = match (&inputs.anat_embeddings, flags.use_ap) {
        (Some(e), true) => {
            if e.shape() != [n, cfg.c_a] {
                return Err(Error::Shape(format!("anatomical embeddings {:?}, wanted ({n}, {})", e.shape(), cfg.c_a)));
            }
            Some(binding.tape().leaf(e.clone()))
        }
        (None, true) => return Err(Error::Input("use_ap set but no anatomical embeddings supplied".into())),
        _ => None,
    };
    let e_t = match (&inputs.text_embeddings, flags.use_tp) {
        (Some(e), true) => {
            if e.shape() != [n, cfg.c_t] {
                return Err(Error::Shape(format!("textual embeddings {:?}, wanted ({n}, {})", e.shape(), cfg.c_t)));
            }
            Some(binding.tape().leaf(e.clone()))
        }
        (None, true) => return Err(Error::Input("use_tp set but no textual embeddings supplied".into())),
        _ => None,
    };
    let (q_a, q_t) = prompts::project_to_queries(binding, e_a, e_t);
    let q_s = binding.var("queries.seg");

    let refined = refiner::refine(binding, &feats, q_s, q_t, q_a, flags.hard_assign, inputs.noise_seed, inputs.noise_enabled)?;

    let DecodedQueries { o_s, presence_logits } =
        refer::decode_queries(binding, refined.q_s, refined.q_a, refined.q_t, inputs.group_mask)?;

    let o_s_pix = if binding.has("head.adapt.w") {
        o_s.matmul(binding.var("head.adapt.w")).add_row(binding.var("head.adapt.b"))
    } else {
        o_s
    };
    let masks = heads::predict_masks(o_s_pix, pixel_flat)?;

    let contrast = if inputs.want_contrast && (refined.q_a.is_some() || refined.q_t.is_some()) {
        Some(refer::project_for_contrast(binding, o_s, refined.q_a, refined.q_t)?)
    } else {
        None
    };

    Ok(ForwardOutputs { masks, presence_logits, refined, o_s, contrast, patch_shape })
}

/// Contrastive losses for one forward pass, honoring the family toggles.
pub fn contrastive_losses<'t, T: Scalar>(
    model: &Model<T>,
    contrast: &ContrastEmbeddings<'t, T>,
    want_s2p: bool,
    want_p2p: bool,
) -> Result<(Option<Var<'t, T>>, Option<Var<'t, T>>)> {
    let temp = T::from_f64_c(model.cfg.infonce_temperature);
    let literal = model.cfg.paper_literal_infonce;
    let s2p = if want_s2p {
        let anat = matches!(model.cfg.s2p_target, S2pTarget::Both | S2pTarget::AnatomicalOnly)
            .then_some(contrast.anat)
            .flatten();
        let text = matches!(model.cfg.s2p_target, S2pTarget::Both | S2pTarget::TextualOnly)
            .then_some(contrast.text)
            .flatten();
        let mut terms = Vec::new();
        if let Some(a) = anat {
            terms.push(heads::infonce(contrast.seg, a, temp, literal)?);
        }
        if let Some(t) = text {
            terms.push(heads::infonce(contrast.seg, t, temp, literal)?);
        }
        match terms.len() {
            0 => None,
            1 => Some(terms[0]),
            _ => Some(terms[0].add(terms[1]).mul_scalar(T::from_f64_c(0.5))),
        }
    } else {
        None
    };
    let p2p = match (want_p2p, contrast.anat, contrast.text) {
        (true, Some(a), Some(t)) => Some(heads::infonce(a, t, temp, literal)?),
        _ => None,
    };
    Ok((s2p, p2p))
}
