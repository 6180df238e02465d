//! Training, inference and experiment drivers.
//!
//! All per-step randomness is keyed by `(seed, role, step, slot)`, so worker
//! scheduling can never alter results: identical config and seed produce
//! byte-identical checkpoints and reports.

use crate::error::{Error, Result};
use crate::heads::{self, LossParts, LossReport};
use crate::metrics::{self, Hd95Variant, MetricsReport, PredictionSet};
use crate::model::{self, AblationFlags, Binding, ForwardInputs, Model, ModelConfig};
use crate::prompts;
use crate::refer::{build_attention_mask, GroupMask};
use crate::refiner;
use crate::synth::bank::{BankEntry, PromptBank};
use crate::synth::generate::LabeledCase;
use crate::synth::taxonomy::Taxonomy;
use crate::synth::text::TextCorpus;
use crate::synth::volume::{GridShape, Mask, Volume};
use dpseg_tensor::rng::{hash_str, mix_key, KeyedRng};
use dpseg_tensor::{AdamW, NdArray, Scalar, Tape};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// On-the-fly augmentation ranges: random shift, zoom and intensity scaling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentRanges {
    /// Max |shift| per axis as a fraction of the extent.
    pub shift_frac: f64,
    pub zoom: (f64, f64),
    pub intensity: (f64, f64),
}

impl AugmentRanges {
    /// The default on-the-fly ranges.
    pub fn standard() -> Self {
        Self { shift_frac: 0.25, zoom: (0.8, 1.2), intensity: (0.9, 1.1) }
    }

    /// Zero-width ranges: the identity transform.
    pub fn identity() -> Self {
        Self { shift_frac: 0.0, zoom: (1.0, 1.0), intensity: (1.0, 1.0) }
    }

    pub fn is_identity(&self) -> bool {
        self.shift_frac == 0.0 && self.zoom == (1.0, 1.0) && self.intensity == (1.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.shift_frac) {
            return Err(Error::Config(format!("shift_frac {} outside [0, 0.5]", self.shift_frac)));
        }
        if !(self.zoom.0 > 0.0 && self.zoom.0 <= self.zoom.1) {
            return Err(Error::Config(format!("zoom range {:?} invalid", self.zoom)));
        }
        if !(self.intensity.0 > 0.0 && self.intensity.0 <= self.intensity.1) {
            return Err(Error::Config(format!("intensity range {:?} invalid", self.intensity)));
        }
        Ok(())
    }
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self::standard()
    }
}

/// Apply one random shift/zoom/intensity transform; the identical spatial
/// map is applied to the image (trilinear) and every mask (nearest).
pub fn augment<T: Scalar>(case: &LabeledCase<T>, ranges: &AugmentRanges, seed: u64) -> Result<LabeledCase<T>> {
    ranges.validate()?;
    if ranges.is_identity() {
        return Ok(case.clone());
    }
    let mut rng = KeyedRng::from_key(&[seed, hash_str("augment")]);
    let shape = case.image.shape;
    let [h, w, d] = shape.0;
    let shift = [
        rng.uniform(-ranges.shift_frac, ranges.shift_frac) * h as f64,
        rng.uniform(-ranges.shift_frac, ranges.shift_frac) * w as f64,
        rng.uniform(-ranges.shift_frac, ranges.shift_frac) * d as f64,
    ];
    let zoom = rng.uniform(ranges.zoom.0, ranges.zoom.1);
    let gain = rng.uniform(ranges.intensity.0, ranges.intensity.1);
    let center = [(h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0, (d as f64 - 1.0) / 2.0];
    // Output voxel x samples the input at c + (x − c − t) / z: the object
    // appears shifted by t and scaled by z.
    let src = |p: [usize; 3]| -> [f64; 3] {
        let mut q = [0.0f64; 3];
        for a in 0..3 {
            q[a] = center[a] + (p[a] as f64 - center[a] - shift[a]) / zoom;
        }
        q
    };
    let inside = |q: &[f64; 3]| {
        q[0] >= -0.5 && q[0] <= h as f64 - 0.5 && q[1] >= -0.5 && q[1] <= w as f64 - 0.5 && q[2] >= -0.5 && q[2] <= d as f64 - 0.5
    };

    let mut image = Volume::zeros(shape, case.image.spacing);
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                let q = src([z, y, x]);
                let v = if inside(&q) { case.image.sample_trilinear(q).as_f64() * gain } else { 0.0 };
                image.set(z, y, x, T::from_f64_c(v));
            }
        }
    }
    let masks: Vec<Mask> = case
        .masks
        .iter()
        .map(|m| {
            let mut out = Mask::empty(shape, m.spacing);
            for z in 0..h {
                for y in 0..w {
                    for x in 0..d {
                        let q = src([z, y, x]);
                        if inside(&q) {
                            let nz = q[0].round().clamp(0.0, h as f64 - 1.0) as usize;
                            let ny = q[1].round().clamp(0.0, w as f64 - 1.0) as usize;
                            let nx = q[2].round().clamp(0.0, d as f64 - 1.0) as usize;
                            out.set(z, y, x, m.at(nz, ny, nx));
                        }
                    }
                }
            }
            out
        })
        .collect();
    let present = masks.iter().map(|m| !m.is_empty()).collect();
    Ok(LabeledCase {
        case_id: case.case_id.clone(),
        image,
        masks,
        present,
        overflow: case.overflow.clone(),
        seed: case.seed,
    })
}

// ---------------------------------------------------------------------------
// prompt sampling
// ---------------------------------------------------------------------------

/// Uniform draw over the category's bank entries whose provenance case
/// differs from `current_case_id`.
pub fn sample_anatomical_prompt<'b, T: Scalar>(
    bank: &'b PromptBank<T>,
    category: usize,
    category_name: &str,
    current_case_id: &str,
    seed: u64,
) -> Result<&'b BankEntry<T>> {
    let eligible: Vec<&BankEntry<T>> = bank.entries[category]
        .iter()
        .filter(|e| e.provenance.case_id != current_case_id)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Sampling {
            category: category_name.to_string(),
            reason: format!(
                "no entry outside case '{current_case_id}' ({} total)",
                bank.entries[category].len()
            ),
        });
    }
    let mut rng = KeyedRng::from_key(&[seed, hash_str("anat_prompt"), category as u64]);
    Ok(eligible[rng.index(eligible.len())])
}

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    // data locations (CLI side; in-memory drivers ignore them)
    pub taxonomy: PathBuf,
    pub corpus: PathBuf,
    pub bank: PathBuf,
    pub text_corpus: PathBuf,
    pub eval_corpus: Option<PathBuf>,
    pub out: PathBuf,

    pub patch_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub threshold: f64,

    pub use_ap: bool,
    pub use_tp: bool,
    pub hard_assign: bool,
    pub group_mask: bool,
    pub loss_s2p: bool,
    pub loss_p2p: bool,
    pub extra_links: Vec<(String, String)>,

    pub augment: AugmentRanges,
    pub hd95_variant: Hd95Variant,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            taxonomy: "taxonomy.json".into(),
            corpus: "corpus".into(),
            bank: "bank".into(),
            text_corpus: "text_corpus.json".into(),
            eval_corpus: None,
            out: "out".into(),
            patch_size: 32,
            batch_size: 2,
            steps: 500,
            base_lr: 1e-4,
            warmup_frac: 0.05,
            poly_power: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            checkpoint_every: 500,
            threshold: 0.5,
            use_ap: true,
            use_tp: true,
            hard_assign: true,
            group_mask: true,
            loss_s2p: true,
            loss_p2p: true,
            extra_links: Vec::new(),
            augment: AugmentRanges::standard(),
            hd95_variant: Hd95Variant::Pooled,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            use_ap: self.use_ap,
            use_tp: self.use_tp,
            hard_assign: self.hard_assign,
            group_mask: self.group_mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        let div = self.model.backbone.required_divisor();
        if self.patch_size == 0 || self.patch_size % div != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of {div}",
                self.patch_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.group_mask && !self.use_ap && !self.use_tp {
            return Err(Error::Config("group_mask requires at least one prompt family".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        if self.base_lr <= 0.0 || self.steps == usize::MAX {
            return Err(Error::Config("bad optimizer settings".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Linear warmup followed by polynomial decay.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_frac: f64, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let warmup = ((total as f64 * warmup_frac).ceil() as usize).clamp(1, total);
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        let rest = (total - warmup).max(1) as f64;
        let t = (step - warmup) as f64 / rest;
        base * (1.0 - t).max(0.0).powf(power)
    }
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// Everything the training loop consumes, already loaded.
pub struct TrainData<T: Scalar> {
    pub taxonomy: Taxonomy,
    pub cases: Vec<LabeledCase<T>>,
    pub bank: PromptBank<T>,
    pub corpus: TextCorpus,
}

#[derive(Debug, Serialize)]
struct StepLog<'a> {
    step: usize,
    lr: f64,
    #[serde(flatten)]
    losses: &'a LossReport,
}

pub struct TrainSummary {
    pub steps_run: usize,
    pub last_losses: Option<LossReport>,
    pub checkpoint_final: PathBuf,
}

fn crop_patch<T: Scalar>(case: &LabeledCase<T>, patch: usize, rng: &mut KeyedRng) -> (NdArray<T>, Vec<Mask>) {
    let [h, w, d] = case.image.shape.0;
    let origin = [
        if h > patch { rng.index(h - patch + 1) } else { 0 },
        if w > patch { rng.index(w - patch + 1) } else { 0 },
        if d > patch { rng.index(d - patch + 1) } else { 0 },
    ];
    let mut img = Vec::with_capacity(patch * patch * patch);
    for z in 0..patch {
        for y in 0..patch {
            for x in 0..patch {
                img.push(case.image.at(origin[0] + z, origin[1] + y, origin[2] + x));
            }
        }
    }
    let shape = GridShape::cube(patch);
    let masks = case
        .masks
        .iter()
        .map(|m| {
            let mut out = Mask::empty(shape, m.spacing);
            for z in 0..patch {
                for y in 0..patch {
                    for x in 0..patch {
                        out.set(z, y, x, m.at(origin[0] + z, origin[1] + y, origin[2] + x));
                    }
                }
            }
            out
        })
        .collect();
    (NdArray::from_vec(&[1, patch, patch, patch], img), masks)
}

/// Ground-truth rows `(N, V)` for the dice loss.
fn gt_rows<T: Scalar>(masks: &[Mask]) -> NdArray<T> {
    let v = masks[0].shape.numel();
    let mut data = Vec::with_capacity(masks.len() * v);
    for m in masks {
        data.extend(m.to_scalar_row::<T>());
    }
    NdArray::from_vec(&[masks.len(), v], data)
}

/// Gather per-category anatomical prompt volumes for one case.
fn gather_prompts<T: Scalar>(
    data: &TrainData<T>,
    case_id: &str,
    seed: u64,
) -> Result<Vec<Volume<T>>> {
    let mut vols = Vec::with_capacity(data.taxonomy.len());
    for (k, cat) in data.taxonomy.categories.iter().enumerate() {
        let entry = sample_anatomical_prompt(&data.bank, k, &cat.name, case_id, seed)?;
        vols.push(entry.volume.clone());
    }
    Ok(vols)
}

/// Run the full training loop on already-loaded data.
pub fn run_training<T: Scalar>(cfg: &TrainConfig, data: &TrainData<T>, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    data.taxonomy.validate()?;
    data.corpus.validate(&data.taxonomy)?;
    if data.cases.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    for case in &data.cases {
        case.validate(&data.taxonomy)?;
    }
    std::fs::create_dir_all(out)?;
    let mut model = Model::<T>::init(cfg.model.clone(), data.taxonomy.clone(), cfg.seed)?;
    let group_mask = if cfg.group_mask {
        build_attention_mask(&data.taxonomy, &cfg.extra_links)?
    } else {
        GroupMask::all_visible(&data.taxonomy)
    };
    std::fs::write(out.join("group_mask.json"), group_mask.to_json()?)?;

    let latest = out.join("checkpoint_latest");
    dpseg_tensor::save_params(&model.store, &latest)?;
    let mut opt: AdamW<T> = AdamW::new(T::from_f64_c(cfg.weight_decay));
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("train_log.jsonl"))?);
    let mut last_losses: Option<LossReport> = None;

    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg.steps, cfg.base_lr, cfg.warmup_frac, cfg.poly_power);
        let tape: Tape<T> = Tape::new();
        let binding = Binding::bind(&tape, &model.store);

        let mut dice_terms = Vec::new();
        let mut cls_terms = Vec::new();
        let mut s2p_terms = Vec::new();
        let mut p2p_terms = Vec::new();
        for b in 0..cfg.batch_size {
            let bi = b as u64;
            let step_u = step as u64;
            let case_idx = KeyedRng::from_key(&[cfg.seed, hash_str("case"), step_u, bi]).index(data.cases.len());
            let base = &data.cases[case_idx];
            let augmented;
            let case = if cfg.augment.is_identity() {
                base
            } else {
                augmented = augment(base, &cfg.augment, mix_key(&[cfg.seed, hash_str("aug"), step_u, bi]))?;
                &augmented
            };
            let mut crop_rng = KeyedRng::from_key(&[cfg.seed, hash_str("crop"), step_u, bi]);
            let (img, patch_masks) = crop_patch(case, cfg.patch_size, &mut crop_rng);
            let present: Vec<bool> = patch_masks.iter().map(|m| !m.is_empty()).collect();

            let anat = if cfg.use_ap {
                let vols = gather_prompts(data, &case.case_id, mix_key(&[cfg.seed, hash_str("anat"), step_u, bi]))?;
                Some(prompts::encode_anatomical(&vols, &model.store)?)
            } else {
                None
            };
            let text = if cfg.use_tp {
                let texts = prompts::assemble_textual_prompts(
                    &data.taxonomy,
                    &data.corpus,
                    &present,
                    mix_key(&[cfg.seed, hash_str("text"), step_u, bi]),
                )?;
                Some(prompts::encode_textual(&texts, cfg.model.c_t)?)
            } else {
                None
            };
            let outputs = model::forward(
                &binding,
                &model,
                &ForwardInputs {
                    image: &img,
                    anat_embeddings: anat,
                    text_embeddings: text,
                    group_mask: &group_mask,
                    flags: cfg.flags(),
                    noise_seed: mix_key(&[cfg.seed, hash_str("gumbel"), step_u, bi]),
                    noise_enabled: true,
                    want_contrast: cfg.loss_s2p || cfg.loss_p2p,
                },
            )?;
            let gt = binding.tape().leaf(gt_rows::<T>(&patch_masks));
            dice_terms.push(heads::dice_loss(outputs.masks, gt, T::from_f64_c(cfg.model.dice_smooth)));
            cls_terms.push(heads::cls_loss(outputs.presence_logits, &present));
            if let Some(contrast) = &outputs.contrast {
                let (s2p, p2p) = model::contrastive_losses(&model, contrast, cfg.loss_s2p, cfg.loss_p2p)?;
                if let Some(v) = s2p {
                    s2p_terms.push(v);
                }
                if let Some(v) = p2p {
                    p2p_terms.push(v);
                }
            }
        }

        let inv_b = T::from_f64_c(1.0 / cfg.batch_size as f64);
        fn mean_of<'t, T: Scalar>(terms: Vec<dpseg_tensor::Var<'t, T>>, inv: T) -> dpseg_tensor::Var<'t, T> {
            let mut acc = terms[0];
            for t in &terms[1..] {
                acc = acc.add(*t);
            }
            acc.mul_scalar(inv)
        }
        let parts = LossParts {
            dice: mean_of(dice_terms, inv_b),
            cls: mean_of(cls_terms, inv_b),
            s2p: (!s2p_terms.is_empty()).then(|| mean_of(s2p_terms, inv_b)),
            p2p: (!p2p_terms.is_empty()).then(|| mean_of(p2p_terms, inv_b)),
        };
        let (total, report) = heads::total_loss(parts)?; // errors leave checkpoint_latest in place

        let grads = tape.backward(total);
        let named = binding.grads_by_name(&grads, &model.store);
        opt.step(&mut model.store, &named, T::from_f64_c(lr));
        refiner::clamp_tau(&mut model.store);

        serde_json::to_writer(&mut log, &StepLog { step, lr, losses: &report })?;
        log.write_all(b"\n")?;
        last_losses = Some(report);

        if (step + 1) % cfg.checkpoint_every == 0 {
            log.flush()?;
            dpseg_tensor::save_params(&model.store, &latest)?;
        }
    }
    log.flush()?;
    let final_dir = out.join("checkpoint_final");
    dpseg_tensor::save_params(&model.store, &final_dir)?;
    Ok(TrainSummary { steps_run: cfg.steps, last_losses, checkpoint_final: final_dir })
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

pub struct InferOutcome<T> {
    pub soft: Vec<Volume<T>>,
    pub binary: Vec<Mask>,
    /// Set when the volume was smaller than one patch and had to be padded.
    pub padded: bool,
}

fn window_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + patch < extent).collect();
    starts.push(extent - patch);
    starts.dedup();
    starts
}

/// Sliding-window inference with overlap averaging of the sigmoid outputs.
///
/// Prompts are assembled once per case: anatomical prompts sampled from the
/// bank excluding this case's own entries, textual prompts using every
/// category's long description (presence is unknown at test time).
#[allow(clippy::too_many_arguments)]
pub fn infer<T: Scalar>(
    model: &Model<T>,
    data: &TrainData<T>,
    case_id: &str,
    image: &Volume<T>,
    cfg: &TrainConfig,
    group_mask: &GroupMask,
) -> Result<InferOutcome<T>> {
    let n = model.taxonomy.len();
    let patch = cfg.patch_size;
    let [h0, w0, d0] = image.shape.0;
    let padded = h0 < patch || w0 < patch || d0 < patch;
    let (work, shape) = if padded {
        let [h, w, d] = [h0.max(patch), w0.max(patch), d0.max(patch)];
        let mut v = Volume::zeros(GridShape([h, w, d]), image.spacing);
        for z in 0..h0 {
            for y in 0..w0 {
                for x in 0..d0 {
                    v.set(z, y, x, image.at(z, y, x));
                }
            }
        }
        let s = v.shape;
        (v, s)
    } else {
        (image.clone(), image.shape)
    };
    let [h, w, d] = shape.0;

    let anat = if cfg.use_ap {
        let mut vols = Vec::with_capacity(n);
        for (k, cat) in model.taxonomy.categories.iter().enumerate() {
            let entry = sample_anatomical_prompt(
                &data.bank,
                k,
                &cat.name,
                case_id,
                mix_key(&[cfg.seed, hash_str("infer_anat"), hash_str(case_id)]),
            )?;
            vols.push(entry.volume.clone());
        }
        Some(prompts::encode_anatomical(&vols, &model.store)?)
    } else {
        None
    };
    let text = if cfg.use_tp {
        Some(prompts::encode_textual(&data.corpus.long_descriptions, cfg.model.c_t)?)
    } else {
        None
    };

    let stride = (patch / 2).max(1);
    let mut sums = vec![vec![0.0f64; shape.numel()]; n];
    let mut counts = vec![0.0f64; shape.numel()];
    for &z0 in &window_starts(h, patch, stride) {
        for &y0 in &window_starts(w, patch, stride) {
            for &x0 in &window_starts(d, patch, stride) {
                let mut img = Vec::with_capacity(patch * patch * patch);
                for z in 0..patch {
                    for y in 0..patch {
                        for x in 0..patch {
                            img.push(work.at(z0 + z, y0 + y, x0 + x));
                        }
                    }
                }
                let img = NdArray::from_vec(&[1, patch, patch, patch], img);
                let tape: Tape<T> = Tape::new();
                let binding = Binding::bind(&tape, &model.store);
                let outputs = model::forward(
                    &binding,
                    model,
                    &ForwardInputs {
                        image: &img,
                        anat_embeddings: anat.clone(),
                        text_embeddings: text.clone(),
                        group_mask,
                        flags: cfg.flags(),
                        noise_seed: 0,
                        noise_enabled: false,
                        want_contrast: false,
                    },
                )?;
                let m = outputs.masks.value();
                for k in 0..n {
                    for (vi, val) in m.data()[k * patch * patch * patch..(k + 1) * patch * patch * patch].iter().enumerate() {
                        let z = vi / (patch * patch);
                        let y = (vi / patch) % patch;
                        let x = vi % patch;
                        let gi = ((z0 + z) * w + (y0 + y)) * d + (x0 + x);
                        sums[k][gi] += val.as_f64();
                        if k == 0 {
                            counts[gi] += 1.0;
                        }
                    }
                }
            }
        }
    }

    let mut soft = Vec::with_capacity(n);
    let mut binary = Vec::with_capacity(n);
    for k in 0..n {
        let mut vol = Volume::zeros(image.shape, image.spacing);
        let mut mask = Mask::empty(image.shape, image.spacing);
        for z in 0..h0 {
            for y in 0..w0 {
                for x in 0..d0 {
                    let gi = (z * w + y) * d + x;
                    let v = sums[k][gi] / counts[gi].max(1.0);
                    vol.set(z, y, x, T::from_f64_c(v));
                    mask.set(z, y, x, v >= cfg.threshold);
                }
            }
        }
        soft.push(vol);
        binary.push(mask);
    }
    Ok(InferOutcome { soft, binary, padded })
}

/// Infer every case of an evaluation set and aggregate the metrics.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    data: &TrainData<T>,
    eval_cases: &[LabeledCase<T>],
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let group_mask = if cfg.group_mask {
        build_attention_mask(&model.taxonomy, &cfg.extra_links)?
    } else {
        GroupMask::all_visible(&model.taxonomy)
    };
    let mut pairs = Vec::with_capacity(eval_cases.len());
    for case in eval_cases {
        let outcome = infer(model, data, &case.case_id, &case.image, cfg, &group_mask)?;
        pairs.push((PredictionSet { case_id: case.case_id.clone(), soft_masks: outcome.soft }, case));
    }
    metrics::evaluate(&pairs, &model.taxonomy, cfg.threshold, cfg.hd95_variant)
}

// ---------------------------------------------------------------------------
// embedding export
// ---------------------------------------------------------------------------

/// Dump `(case, category, family, vector)` rows for external visualization
/// tooling. Families: raw prompt embeddings, refined prompt queries, decoded
/// segmentation queries.
pub fn export_embeddings<T: Scalar>(
    model: &Model<T>,
    data: &TrainData<T>,
    cases: &[LabeledCase<T>],
    cfg: &TrainConfig,
) -> Result<String> {
    let group_mask = if cfg.group_mask {
        build_attention_mask(&model.taxonomy, &cfg.extra_links)?
    } else {
        GroupMask::all_visible(&model.taxonomy)
    };
    let mut csv = String::from("case_id,category,family,dim,values\n");
    let mut order: Vec<&LabeledCase<T>> = cases.iter().collect();
    order.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    for case in order {
        let (img, _) = crop_patch(case, cfg.patch_size, &mut KeyedRng::from_key(&[cfg.seed, hash_str("export_crop"), hash_str(&case.case_id)]));
        let vols = gather_prompts(data, &case.case_id, mix_key(&[cfg.seed, hash_str("export_anat"), hash_str(&case.case_id)]))?;
        let e_a = prompts::encode_anatomical(&vols, &model.store)?;
        let e_t = prompts::encode_textual::<T>(&data.corpus.long_descriptions, cfg.model.c_t)?;
        let tape: Tape<T> = Tape::new();
        let binding = Binding::bind(&tape, &model.store);
        let outputs = model::forward(
            &binding,
            model,
            &ForwardInputs {
                image: &img,
                anat_embeddings: Some(e_a.clone()),
                text_embeddings: Some(e_t.clone()),
                group_mask: &group_mask,
                flags: AblationFlags { use_ap: true, use_tp: true, ..cfg.flags() },
                noise_seed: 0,
                noise_enabled: false,
                want_contrast: false,
            },
        )?;
        let q_a = outputs.refined.q_a.expect("anatomical family enabled").value();
        let q_t = outputs.refined.q_t.expect("textual family enabled").value();
        let o_s = outputs.o_s.value();
        let families: [(&str, &NdArray<T>); 5] =
            [("E_A", &e_a), ("E_T", &e_t), ("QA_ref", &q_a), ("QT_ref", &q_t), ("O_S", &o_s)];
        for (family, mat) in families {
            for (k, cat) in model.taxonomy.categories.iter().enumerate() {
                let dim = mat.cols();
                let values: Vec<String> =
                    (0..dim).map(|c| format!("{}", mat.at2(k, c).as_f64())).collect();
                csv.push_str(&format!("{},{},{},{},{}\n", case.case_id, cat.name, family, dim, values.join(" ")));
            }
        }
    }
    Ok(csv)
}

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

/// The ablation axes as runnable configurations.
pub const ABLATION_GRID: [(&str, AblationFlags); 7] = [
    ("baseline", AblationFlags { use_ap: false, use_tp: false, hard_assign: false, group_mask: false }),
    ("ap", AblationFlags { use_ap: true, use_tp: false, hard_assign: false, group_mask: false }),
    ("tp", AblationFlags { use_ap: false, use_tp: true, hard_assign: false, group_mask: false }),
    ("ap_tp", AblationFlags { use_ap: true, use_tp: true, hard_assign: false, group_mask: false }),
    ("ap_tp_hard", AblationFlags { use_ap: true, use_tp: true, hard_assign: true, group_mask: false }),
    ("ap_tp_mask", AblationFlags { use_ap: true, use_tp: true, hard_assign: false, group_mask: true }),
    ("full", AblationFlags { use_ap: true, use_tp: true, hard_assign: true, group_mask: true }),
];

/// Apply one grid row to a config.
pub fn with_flags(base: &TrainConfig, flags: AblationFlags) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.use_ap = flags.use_ap;
    cfg.use_tp = flags.use_tp;
    cfg.hard_assign = flags.hard_assign;
    cfg.group_mask = flags.group_mask;
    // Contrastive terms need their prompt families.
    cfg.loss_s2p = base.loss_s2p && (flags.use_ap || flags.use_tp);
    cfg.loss_p2p = base.loss_p2p && flags.use_ap && flags.use_tp;
    cfg
}

/// Train and evaluate every ablation configuration; returns `(name, report)`
/// pairs in grid order.
pub fn run_ablation_grid<T: Scalar>(
    base: &TrainConfig,
    data: &TrainData<T>,
    eval_cases: &[LabeledCase<T>],
    out: &Path,
) -> Result<Vec<(String, MetricsReport)>> {
    let mut rows = Vec::new();
    for (name, flags) in ABLATION_GRID {
        let cfg = with_flags(base, flags);
        let run_dir = out.join(name);
        let summary = run_training(&cfg, data, &run_dir)?;
        let store = dpseg_tensor::load_params(&summary.checkpoint_final)?;
        let model = Model::from_store(cfg.model.clone(), data.taxonomy.clone(), store)?;
        let report = evaluate_model(&model, data, eval_cases, &cfg)?;
        rows.push((name.to_string(), report));
    }
    Ok(rows)
}
