//! Synthetic organ/tumor case generation.
//!
//! Organs are unions of randomized ellipsoids with category-specific
//! intensity bands; tumors are smaller blobs seeded inside their host with a
//! contrasting band. Tumor intensity deliberately lands near another organ's
//! band so that appearance alone is ambiguous and context carries signal.
//! Everything is keyed off the case seed: two calls with identical arguments
//! produce bit-identical cases.

use crate::error::{Error, Result};
use crate::synth::taxonomy::{Kind, Stage, Taxonomy};
use crate::synth::volume::{GridShape, Mask, Volume};
use dpseg_tensor::rng::{mix_key, KeyedRng};
use dpseg_tensor::Scalar;

/// Geometry and intensity knobs for case generation.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct GenParams {
    /// Organ radius as a fraction of the smallest volume extent.
    pub organ_radius_frac: f64,
    /// Probability that a tumor is present in a given case.
    pub tumor_presence: f64,
    /// Target fraction of a T4 tumor's volume protruding beyond its host.
    pub t4_protrusion: f64,
    /// Background intensity level.
    pub background: f64,
    /// Per-voxel noise amplitude.
    pub noise: f64,
    /// First organ band and per-organ band step.
    pub band_base: f64,
    pub band_step: f64,
    /// Tumor band contrast against the host band.
    pub tumor_contrast: f64,
    /// Per-case band jitter amplitude.
    pub band_jitter: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            organ_radius_frac: 0.21,
            tumor_presence: 0.85,
            t4_protrusion: 0.3,
            background: 0.08,
            noise: 0.03,
            band_base: 0.30,
            band_step: 0.12,
            tumor_contrast: 0.22,
            band_jitter: 0.02,
        }
    }
}

/// One labeled synthetic case: image plus per-category binary masks.
#[derive(Clone, Debug)]
pub struct LabeledCase<T> {
    pub case_id: String,
    pub image: Volume<T>,
    pub masks: Vec<Mask>,
    pub present: Vec<bool>,
    /// Per category: true when a (T4) tumor protrudes beyond its host.
    pub overflow: Vec<bool>,
    pub seed: u64,
}

impl<T: Scalar> LabeledCase<T> {
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        if self.masks.len() != taxonomy.len() {
            return Err(Error::Shape(format!("{} masks for {} categories", self.masks.len(), taxonomy.len())));
        }
        for (i, m) in self.masks.iter().enumerate() {
            if m.shape != self.image.shape {
                return Err(Error::Shape(format!("mask {i} shape differs from image")));
            }
            if self.present[i] != !m.is_empty() {
                return Err(Error::Shape(format!("present[{i}] disagrees with mask emptiness")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut q = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.semi[a];
            q += t * t;
        }
        q <= 1.0
    }

    fn bound_lo_hi(&self, shape: GridShape) -> ([usize; 3], [usize; 3]) {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            lo[a] = (self.center[a] - self.semi[a]).floor().max(0.0) as usize;
            hi[a] = ((self.center[a] + self.semi[a]).ceil() as usize).min(shape.0[a] - 1);
        }
        (lo, hi)
    }
}

/// A blob is a union of ellipsoids.
struct Blob(Vec<Ellipsoid>);

impl Blob {
    fn rasterize(&self, shape: GridShape, spacing: [f64; 3]) -> Mask {
        let mut mask = Mask::empty(shape, spacing);
        for e in &self.0 {
            let (lo, hi) = e.bound_lo_hi(shape);
            for z in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for x in lo[2]..=hi[2] {
                        if e.contains([z as f64, y as f64, x as f64]) {
                            mask.set(z, y, x, true);
                        }
                    }
                }
            }
        }
        mask
    }
}

fn random_blob(rng: &mut KeyedRng, center: [f64; 3], r0: f64, satellites: usize) -> Blob {
    let mut parts = Vec::with_capacity(1 + satellites);
    let semi = |rng: &mut KeyedRng, lo: f64, hi: f64| {
        [r0 * rng.uniform(lo, hi), r0 * rng.uniform(lo, hi), r0 * rng.uniform(lo, hi)]
    };
    parts.push(Ellipsoid { center, semi: semi(rng, 0.8, 1.15) });
    for _ in 0..satellites {
        let dir = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
        let off = 0.55 * r0;
        let c = [center[0] + dir[0] * off, center[1] + dir[1] * off, center[2] + dir[2] * off];
        parts.push(Ellipsoid { center: c, semi: semi(rng, 0.5, 0.8) });
    }
    Blob(parts)
}

/// Effective radius of a voxel set, from its volume.
fn effective_radius(count: usize) -> f64 {
    (3.0 * count as f64 / (4.0 * std::f64::consts::PI)).cbrt()
}

fn centroid(mask: &Mask) -> [f64; 3] {
    let [h, w, d] = mask.shape.0;
    let mut acc = [0.0f64; 3];
    let mut n = 0.0;
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                if mask.at(z, y, x) {
                    acc[0] += z as f64;
                    acc[1] += y as f64;
                    acc[2] += x as f64;
                    n += 1.0;
                }
            }
        }
    }
    [acc[0] / n, acc[1] / n, acc[2] / n]
}

/// Per-category feasibility: minimum blob radius in voxels that the given
/// shape affords. Returns `Err` naming the first category that cannot fit.
fn check_feasibility(taxonomy: &Taxonomy, shape: GridShape, params: &GenParams) -> Result<()> {
    let min_ext = shape.min_extent() as f64;
    for c in &taxonomy.categories {
        let organ_r = params.organ_radius_frac * min_ext * 0.85;
        let r = match c.kind {
            Kind::Organ => organ_r,
            Kind::Tumor => {
                let frac = c.stage.map_or(0.35, Stage::radius_fraction);
                organ_r * frac
            }
        };
        if r < 1.2 {
            return Err(Error::Generation {
                category: c.name.clone(),
                reason: format!("shape {:?} affords radius {r:.2} voxels (< 1.2)", shape.0),
            });
        }
    }
    Ok(())
}

/// Generate one labeled case. Pure function of `(taxonomy, shape, seed)`.
pub fn generate_case<T: Scalar>(
    taxonomy: &Taxonomy,
    shape: GridShape,
    seed: u64,
    params: &GenParams,
) -> Result<LabeledCase<T>> {
    taxonomy.validate()?;
    if shape.0.iter().any(|&e| e < 16) {
        return Err(Error::Generation {
            category: taxonomy.categories[0].name.clone(),
            reason: format!("each extent must be >= 16, got {:?}", shape.0),
        });
    }
    check_feasibility(taxonomy, shape, params)?;

    let n = taxonomy.len();
    let spacing = [1.0, 1.0, 1.0];
    let min_ext = shape.min_extent() as f64;
    let mut masks: Vec<Mask> = Vec::with_capacity(n);
    let mut claimed = Mask::empty(shape, spacing); // union of organ voxels so organs stay disjoint
    let mut bands = vec![0.0f64; n];

    // Organs first (hosts precede tumors by taxonomy invariant).
    let mut organ_rank = 0usize;
    let mut centers: Vec<[f64; 3]> = Vec::new();
    for (i, cat) in taxonomy.categories.iter().enumerate() {
        if cat.kind != Kind::Organ {
            masks.push(Mask::empty(shape, spacing)); // placeholder, filled below
            continue;
        }
        let mut rng = KeyedRng::from_key(&[seed, 0x0123, i as u64]);
        // Spread centers: keep the best of several draws by min distance.
        let mut best: ([f64; 3], f64) = ([0.0; 3], -1.0);
        for _ in 0..24 {
            let c = [
                rng.uniform(0.28, 0.72) * (shape.0[0] as f64 - 1.0),
                rng.uniform(0.28, 0.72) * (shape.0[1] as f64 - 1.0),
                rng.uniform(0.28, 0.72) * (shape.0[2] as f64 - 1.0),
            ];
            let dmin = centers
                .iter()
                .map(|o| (0..3).map(|a| (o[a] - c[a]).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            if dmin > best.1 {
                best = (c, dmin);
            }
        }
        centers.push(best.0);
        let r0 = params.organ_radius_frac * min_ext * rng.uniform(0.85, 1.15);
        let blob = random_blob(&mut rng, best.0, r0, 2);
        let mut mask = blob.rasterize(shape, spacing);
        // Earlier organs keep contested voxels.
        for (mv, cv) in mask.data.iter_mut().zip(claimed.data.iter()) {
            if *cv {
                *mv = false;
            }
        }
        if mask.is_empty() {
            return Err(Error::Generation { category: cat.name.clone(), reason: "organ fully occluded".into() });
        }
        for (cv, mv) in claimed.data.iter_mut().zip(mask.data.iter()) {
            *cv |= *mv;
        }
        bands[i] = params.band_base
            + params.band_step * organ_rank as f64
            + rng.uniform(-params.band_jitter, params.band_jitter);
        organ_rank += 1;
        masks.push(mask);
    }

    // Tumors inside (or, for T4, poking out of) their hosts.
    let mut overflow = vec![false; n];
    for (i, cat) in taxonomy.categories.iter().enumerate() {
        if cat.kind != Kind::Tumor {
            continue;
        }
        let host_idx = cat.host.expect("validated tumor host");
        let host = masks[host_idx].clone();
        let mut rng = KeyedRng::from_key(&[seed, 0x4567, i as u64]);
        if rng.unit::<f64>() > params.tumor_presence {
            continue; // tumor absent in this case
        }
        let stage = cat.stage;
        let frac = stage.map_or(0.35, Stage::radius_fraction);
        let host_r = effective_radius(host.count());
        let tumor_r = (host_r * frac).max(1.2);
        let host_voxels: Vec<[usize; 3]> = {
            let [h, w, d] = shape.0;
            let mut v = Vec::new();
            for z in 0..h {
                for y in 0..w {
                    for x in 0..d {
                        if host.at(z, y, x) {
                            v.push([z, y, x]);
                        }
                    }
                }
            }
            v
        };
        let invasive = stage == Some(Stage::T4);
        let host_c = centroid(&host);
        let center = if invasive {
            // Start interior, push outward until roughly the target volume
            // fraction protrudes.
            let anchor = host_voxels[rng.index(host_voxels.len())];
            let anchor = [anchor[0] as f64, anchor[1] as f64, anchor[2] as f64];
            let mut dir = [anchor[0] - host_c[0], anchor[1] - host_c[1], anchor[2] - host_c[2]];
            let norm = (dir.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-9);
            dir.iter_mut().for_each(|v| *v /= norm);
            let mut chosen = anchor;
            let mut best_gap = f64::INFINITY;
            for k in 0..=12 {
                let t = host_r * 1.2 * k as f64 / 12.0;
                let c = [host_c[0] + dir[0] * t, host_c[1] + dir[1] * t, host_c[2] + dir[2] * t];
                let probe = Blob(vec![Ellipsoid { center: c, semi: [tumor_r; 3] }]).rasterize(shape, spacing);
                let total = probe.count().max(1);
                let outside = probe.data.iter().zip(host.data.iter()).filter(|(&t, &h)| t && !h).count();
                let gap = (outside as f64 / total as f64 - params.t4_protrusion).abs();
                if gap < best_gap {
                    best_gap = gap;
                    chosen = c;
                }
            }
            chosen
        } else {
            // Prefer interior anchors so the blob fits inside the host.
            let mut pick = host_voxels[rng.index(host_voxels.len())];
            for _ in 0..16 {
                let cand = host_voxels[rng.index(host_voxels.len())];
                let d_c = |p: [usize; 3]| {
                    (0..3).map(|a| (p[a] as f64 - host_c[a]).powi(2)).sum::<f64>().sqrt()
                };
                if d_c(cand) < d_c(pick) {
                    pick = cand;
                }
            }
            [pick[0] as f64, pick[1] as f64, pick[2] as f64]
        };
        let blob = random_blob(&mut rng, center, tumor_r, 1);
        let mut mask = blob.rasterize(shape, spacing);
        if !invasive {
            // Containment by construction: clip to the host.
            for (mv, hv) in mask.data.iter_mut().zip(host.data.iter()) {
                *mv &= *hv;
            }
        }
        if mask.is_empty() {
            // Degenerate draw; fall back to a minimal sphere at the anchor.
            let fallback = Blob(vec![Ellipsoid { center, semi: [1.3; 3] }]).rasterize(shape, spacing);
            mask = fallback;
            if !invasive {
                for (mv, hv) in mask.data.iter_mut().zip(host.data.iter()) {
                    *mv &= *hv;
                }
            }
        }
        overflow[i] = mask.data.iter().zip(host.data.iter()).any(|(&t, &h)| t && !h);
        bands[i] = {
            let hb = bands[host_idx];
            if hb < 0.5 {
                hb + params.tumor_contrast
            } else {
                hb - params.tumor_contrast
            }
        };
        masks[i] = mask;
    }

    // Paint the image: background noise, organ bands, tumor bands on top.
    let mut noise_rng = KeyedRng::from_key(&[seed, 0x89ab]);
    let mut img = vec![0.0f64; shape.numel()];
    for v in img.iter_mut() {
        *v = params.background + params.noise * noise_rng.uniform(-1.0, 1.0);
    }
    for (i, cat) in taxonomy.categories.iter().enumerate() {
        if cat.kind != Kind::Organ {
            continue;
        }
        for (vi, m) in masks[i].data.iter().enumerate() {
            if *m {
                img[vi] = bands[i] + params.noise * noise_rng.uniform(-1.0, 1.0);
            }
        }
    }
    for (i, cat) in taxonomy.categories.iter().enumerate() {
        if cat.kind != Kind::Tumor {
            continue;
        }
        for (vi, m) in masks[i].data.iter().enumerate() {
            if *m {
                img[vi] = bands[i] + params.noise * noise_rng.uniform(-1.0, 1.0);
            }
        }
    }

    let present: Vec<bool> = masks.iter().map(|m| !m.is_empty()).collect();
    let image = Volume::new(shape, spacing, img.into_iter().map(T::from_f64_c).collect())?;
    Ok(LabeledCase { case_id: format!("seed{seed}"), image, masks, present, overflow, seed })
}

/// Derive a per-case seed from the corpus seed and the case id, so that
/// parallel generation schedules can never change a case's content.
pub fn case_seed(corpus_seed: u64, case_id: &str) -> u64 {
    mix_key(&[corpus_seed, dpseg_tensor::rng::hash_str(case_id)])
}

/// Generate a corpus of cases named `case_0000`, `case_0001`, ...
///
/// Presence draws are respected except that the first two cases force every
/// category present, keeping exclusion sampling possible for small corpora.
pub fn generate_corpus<T: Scalar>(
    taxonomy: &Taxonomy,
    shape: GridShape,
    count: usize,
    corpus_seed: u64,
    params: &GenParams,
) -> Result<Vec<LabeledCase<T>>> {
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let case_id = format!("case_{i:04}");
        let seed = case_seed(corpus_seed, &case_id);
        let p = if i < 2 {
            let mut forced = params.clone();
            forced.tumor_presence = 1.0;
            forced
        } else {
            params.clone()
        };
        let mut case = generate_case::<T>(taxonomy, shape, seed, &p)?;
        case.case_id = case_id;
        cases.push(case);
    }
    Ok(cases)
}
