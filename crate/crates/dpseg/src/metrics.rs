//! Segmentation metrics: Dice similarity and the 95th-percentile symmetric
//! surface distance on anisotropically spaced grids, plus per-category and
//! per-stage aggregation.
//!
//! HD95 runs on an exact separable Euclidean distance transform seeded at
//! the other mask's surface voxels, so it scales to full volumes; the test
//! suite holds it against a quadratic all-pairs oracle.

use crate::error::{Error, Result};
use crate::synth::generate::LabeledCase;
use crate::synth::taxonomy::{Kind, Taxonomy};
use crate::synth::volume::{Mask, Volume};
use dpseg_tensor::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// How the two directional distance sets combine into HD95.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hd95Variant {
    /// Merge both directions into one pool before taking the percentile.
    Pooled,
    /// 95th percentile per direction, then the maximum.
    MaxDirectional,
}

impl Default for Hd95Variant {
    fn default() -> Self {
        Hd95Variant::Pooled
    }
}

/// Dice similarity coefficient; 1.0 when both masks are empty.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.shape != gt.shape {
        return Err(Error::Shape(format!("dsc shapes {:?} vs {:?}", pred.shape.0, gt.shape.0)));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        a += usize::from(p);
        b += usize::from(g);
        inter += usize::from(p && g);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Surface voxels: mask voxels 6-adjacent to a non-mask voxel or to the
/// volume boundary.
pub fn surface_voxels(mask: &Mask) -> Vec<[usize; 3]> {
    let [h, w, d] = mask.shape.0;
    let mut out = Vec::new();
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                if !mask.at(z, y, x) {
                    continue;
                }
                let boundary = z == 0
                    || z == h - 1
                    || y == 0
                    || y == w - 1
                    || x == 0
                    || x == d - 1
                    || !mask.at(z - 1, y, x)
                    || !mask.at(z + 1, y, x)
                    || !mask.at(z, y - 1, x)
                    || !mask.at(z, y + 1, x)
                    || !mask.at(z, y, x - 1)
                    || !mask.at(z, y, x + 1);
                if boundary {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// 1-d squared-distance lower envelope (Felzenszwalb & Huttenlocher) with a
/// physical sample step. `f` holds squared distances, updated in place;
/// positions with `+inf` carry no parabola.
fn dt1d(f: &mut [f64], step: f64) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        return;
    }
    let sq = |q: usize| {
        let x = q as f64 * step;
        x * x
    };
    let mut v = vec![0usize; sites.len()];
    let mut z = vec![0.0f64; sites.len() + 1];
    let mut k = 0usize;
    v[0] = sites[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &sites[1..] {
        loop {
            let p = v[k];
            let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * step * (q as f64 - p as f64));
            if s <= z[k] {
                // z[0] is −inf, so k never underflows here.
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    let out: Vec<f64> = (0..n)
        .map(|q| {
            let qx = q as f64 * step;
            while z[k + 1] < qx {
                k += 1;
            }
            let p = v[k];
            let dx = qx - p as f64 * step;
            dx * dx + f[p]
        })
        .collect();
    f.copy_from_slice(&out);
}

/// Exact squared Euclidean distance from every voxel center to the nearest
/// seed voxel center, with per-axis spacing.
fn edt_squared(shape: [usize; 3], spacing: [f64; 3], seeds: &[[usize; 3]]) -> Vec<f64> {
    let [h, w, d] = shape;
    let idx = |z: usize, y: usize, x: usize| (z * w + y) * d + x;
    let mut f = vec![f64::INFINITY; h * w * d];
    for s in seeds {
        f[idx(s[0], s[1], s[2])] = 0.0;
    }
    // Pass along x, then y, then z.
    let mut line = vec![0.0f64; d.max(w).max(h)];
    for z in 0..h {
        for y in 0..w {
            for x in 0..d {
                line[x] = f[idx(z, y, x)];
            }
            dt1d(&mut line[..d], spacing[2]);
            for x in 0..d {
                f[idx(z, y, x)] = line[x];
            }
        }
    }
    for z in 0..h {
        for x in 0..d {
            for y in 0..w {
                line[y] = f[idx(z, y, x)];
            }
            dt1d(&mut line[..w], spacing[1]);
            for y in 0..w {
                f[idx(z, y, x)] = line[y];
            }
        }
    }
    for y in 0..w {
        for x in 0..d {
            for z in 0..h {
                line[z] = f[idx(z, y, x)];
            }
            dt1d(&mut line[..h], spacing[0]);
            for z in 0..h {
                f[idx(z, y, x)] = line[z];
            }
        }
    }
    f
}

/// Percentile with linear interpolation between order statistics; `xs` must
/// be sorted ascending.
pub fn percentile_sorted(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty(), "percentile of empty set");
    let m = xs.len();
    if m == 1 {
        return xs[0];
    }
    let rank = q * (m as f64 - 1.0);
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= m {
        xs[m - 1]
    } else {
        xs[lo] + frac * (xs[lo + 1] - xs[lo])
    }
}

/// 95% Hausdorff distance in millimetres over voxel centers; `None` when
/// either mask is empty (undefined, flagged upstream).
pub fn hd95(pred: &Mask, gt: &Mask, variant: Hd95Variant) -> Result<Option<f64>> {
    if pred.shape != gt.shape {
        return Err(Error::Shape(format!("hd95 shapes {:?} vs {:?}", pred.shape.0, gt.shape.0)));
    }
    if pred.spacing != gt.spacing {
        return Err(Error::Shape(format!("hd95 spacings {:?} vs {:?}", pred.spacing, gt.spacing)));
    }
    if pred.is_empty() || gt.is_empty() {
        return Ok(None);
    }
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    let dt_gt = edt_squared(pred.shape.0, pred.spacing, &sg);
    let dt_pred = edt_squared(pred.shape.0, pred.spacing, &sp);
    let idx = |p: &[usize; 3]| (p[0] * pred.shape.0[1] + p[1]) * pred.shape.0[2] + p[2];
    let mut fwd: Vec<f64> = sp.iter().map(|p| dt_gt[idx(p)].sqrt()).collect();
    let mut bwd: Vec<f64> = sg.iter().map(|p| dt_pred[idx(p)].sqrt()).collect();
    Ok(Some(match variant {
        Hd95Variant::Pooled => {
            let mut pool = Vec::with_capacity(fwd.len() + bwd.len());
            pool.append(&mut fwd);
            pool.append(&mut bwd);
            pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
            percentile_sorted(&pool, 0.95)
        }
        Hd95Variant::MaxDirectional => {
            fwd.sort_by(|a, b| a.partial_cmp(b).unwrap());
            bwd.sort_by(|a, b| a.partial_cmp(b).unwrap());
            percentile_sorted(&fwd, 0.95).max(percentile_sorted(&bwd, 0.95))
        }
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

fn mean_sd(values: &[f64]) -> Option<MeanSd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    // Population standard deviation.
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MeanSd { mean, sd: var.sqrt(), count: values.len() })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategoryStats {
    pub dsc: MeanSd,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hd95: Option<MeanSd>,
    /// Cases where HD95 was undefined (an empty mask on either side).
    pub hd95_undefined: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub category: String,
    pub dsc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_category: BTreeMap<String, CategoryStats>,
    /// Mean DSC of staged tumor categories, keyed by stage tag.
    pub per_stage: BTreeMap<String, f64>,
    pub case_table: Vec<CaseRow>,
}

impl MetricsReport {
    /// Mean DSC across categories (of per-category means).
    pub fn mean_dsc(&self) -> f64 {
        let n = self.per_category.len().max(1);
        self.per_category.values().map(|s| s.dsc.mean).sum::<f64>() / n as f64
    }

    pub fn category_dsc(&self, name: &str) -> Option<f64> {
        self.per_category.get(name).map(|s| s.dsc.mean)
    }

    /// CSV mirroring the tabular layout: configurations as rows, categories
    /// as columns.
    pub fn csv_header(taxonomy: &Taxonomy) -> String {
        let mut cols = vec!["config".to_string()];
        for name in taxonomy.names() {
            cols.push(format!("{name}_dsc"));
            cols.push(format!("{name}_hd95"));
        }
        cols.push("avg_dsc".into());
        cols.join(",")
    }

    pub fn csv_row(&self, taxonomy: &Taxonomy, label: &str) -> String {
        let mut cols = vec![label.to_string()];
        for name in taxonomy.names() {
            match self.per_category.get(&name) {
                Some(stats) => {
                    cols.push(format!("{:.4}", stats.dsc.mean));
                    cols.push(stats.hd95.as_ref().map_or("nan".into(), |h| format!("{:.4}", h.mean)));
                }
                None => {
                    cols.push("nan".into());
                    cols.push("nan".into());
                }
            }
        }
        cols.push(format!("{:.4}", self.mean_dsc()));
        cols.join(",")
    }
}

/// Per-case soft predictions for every category.
pub struct PredictionSet<T> {
    pub case_id: String,
    pub soft_masks: Vec<Volume<T>>,
}

/// Binarize at `threshold` and aggregate both metrics per category, plus
/// per-stage DSC means for staged tumor categories.
pub fn evaluate<T: Scalar>(
    cases: &[(PredictionSet<T>, &LabeledCase<T>)],
    taxonomy: &Taxonomy,
    threshold: f64,
    variant: Hd95Variant,
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Input("evaluate needs at least one case".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Input(format!("threshold {threshold} must lie in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by(|&a, &b| cases[a].0.case_id.cmp(&cases[b].0.case_id));

    let n = taxonomy.len();
    let mut dsc_per_cat: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut hd_per_cat: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut hd_undef: Vec<usize> = vec![0; n];
    let mut case_table = Vec::new();
    let mut stage_pool: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for &i in &order {
        let (pred, case) = &cases[i];
        if pred.soft_masks.len() != n {
            return Err(Error::Shape(format!("prediction for '{}' has {} masks, wanted {n}", pred.case_id, pred.soft_masks.len())));
        }
        for (k, cat) in taxonomy.categories.iter().enumerate() {
            let soft = &pred.soft_masks[k];
            if soft.shape != case.image.shape {
                return Err(Error::Shape(format!("prediction shape mismatch for '{}'", pred.case_id)));
            }
            let bin = Mask {
                shape: soft.shape,
                spacing: soft.spacing,
                data: soft.data.iter().map(|v| v.as_f64() >= threshold).collect(),
            };
            let d = dsc(&bin, &case.masks[k])?;
            let h = hd95(&bin, &case.masks[k], variant)?;
            dsc_per_cat[k].push(d);
            match h {
                Some(v) => hd_per_cat[k].push(v),
                None => hd_undef[k] += 1,
            }
            if cat.kind == Kind::Tumor {
                if let Some(stage) = cat.stage {
                    stage_pool.entry(stage.label().to_string()).or_default().push(d);
                }
            }
            case_table.push(CaseRow { case_id: pred.case_id.clone(), category: cat.name.clone(), dsc: d, hd95: h });
        }
    }

    let mut per_category = BTreeMap::new();
    for (k, cat) in taxonomy.categories.iter().enumerate() {
        per_category.insert(
            cat.name.clone(),
            CategoryStats {
                dsc: mean_sd(&dsc_per_cat[k]).expect("at least one case per category"),
                hd95: mean_sd(&hd_per_cat[k]),
                hd95_undefined: hd_undef[k],
            },
        );
    }
    let per_stage = stage_pool
        .into_iter()
        .map(|(stage, pool)| {
            let m = pool.iter().sum::<f64>() / pool.len() as f64;
            (stage, m)
        })
        .collect();
    Ok(MetricsReport { per_category, per_stage, case_table })
}
