//! Mask prediction and the training losses.

use crate::error::{Error, Result};
use dpseg_tensor::{Scalar, Var};
use serde::{Deserialize, Serialize};

/// Per-category soft masks: `M[n, x] = σ(⟨query_n, pixel_x⟩)`.
///
/// `o_s` must already be at the pixel-embedding width (the model applies an
/// affine adapter first when the query width differs).
pub fn predict_masks<'t, T: Scalar>(o_s: Var<'t, T>, pixel_map_flat: Var<'t, T>) -> Result<Var<'t, T>> {
    let qs = o_s.shape();
    let ps = pixel_map_flat.shape();
    if qs.len() != 2 || ps.len() != 2 || qs[1] != ps[0] {
        return Err(Error::Shape(format!(
            "predict_masks: queries {qs:?} need width {} to match the pixel map {ps:?}",
            ps.first().copied().unwrap_or(0)
        )));
    }
    Ok(o_s.matmul(pixel_map_flat).sigmoid())
}

/// Soft dice loss, mean over categories:
/// `1 − (2·Σ m·g + s) / (Σ m + Σ g + s)`.
pub fn dice_loss<'t, T: Scalar>(m: Var<'t, T>, gt: Var<'t, T>, smooth: T) -> Var<'t, T> {
    let inter = m.mul(gt).row_sums();
    let denom = m.row_sums().add(gt.row_sums()).add_scalar(smooth);
    let frac = inter.mul_scalar(T::from_f64_c(2.0)).add_scalar(smooth).div(denom);
    frac.neg().add_scalar(T::one()).mean()
}

/// Mean binary cross-entropy between presence logits and labels.
pub fn cls_loss<'t, T: Scalar>(presence_logits: Var<'t, T>, present: &[bool]) -> Var<'t, T> {
    presence_logits.bce_logits_mean(present)
}

/// Which prompt family (or both, averaged) the query-to-prompt contrastive
/// term aligns against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum S2pTarget {
    Both,
    AnatomicalOnly,
    TextualOnly,
}

impl Default for S2pTarget {
    fn default() -> Self {
        S2pTarget::Both
    }
}

/// InfoNCE over row-aligned anchor/positive pairs:
/// `−(1/N) Σ_i log[ exp(a_i·p_i/τ) / Σ_j exp(a_i·p_j/τ) ]`.
///
/// With `paper_literal` the logarithm is dropped (the printed form), kept
/// only for side-by-side comparison — it is not a proper contrastive
/// objective.
pub fn infonce<'t, T: Scalar>(
    anchors: Var<'t, T>,
    positives: Var<'t, T>,
    temperature: T,
    paper_literal: bool,
) -> Result<Var<'t, T>> {
    if !(temperature > T::zero()) {
        return Err(Error::Domain(format!("infonce temperature must be positive, got {temperature}")));
    }
    let a = anchors.shape();
    let p = positives.shape();
    if a != p || a.len() != 2 {
        return Err(Error::Shape(format!("infonce rows {a:?} vs {p:?}")));
    }
    let tol = T::from_f64_c(1e-4);
    for (side, v) in [("anchor", anchors.value()), ("positive", positives.value())] {
        for r in 0..v.rows() {
            let norm = v.data()[r * v.cols()..(r + 1) * v.cols()].iter().map(|&x| x * x).sum::<T>().sqrt();
            if (norm - T::one()).abs() > tol {
                return Err(Error::Input(format!("infonce {side} row {r} has norm {norm}, expected 1")));
            }
        }
    }
    let sims = anchors.matmul_nt(positives).mul_scalar(T::one() / temperature);
    if paper_literal {
        Ok(sims.softmax_rows().take_diag().mean().neg())
    } else {
        Ok(sims.logsumexp_rows().sub(sims.take_diag()).mean())
    }
}

/// Loss components of one step. Disabled terms are absent, not zero, so the
/// training log only ever contains the losses that were actually active.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub dice: f64,
    pub cls: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s2p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p2p: Option<f64>,
    pub total: f64,
}

pub struct LossParts<'t, T: Scalar> {
    pub dice: Var<'t, T>,
    pub cls: Var<'t, T>,
    pub s2p: Option<Var<'t, T>>,
    pub p2p: Option<Var<'t, T>>,
}

/// Unweighted sum of the enabled components. Errors name the first component
/// that is not finite.
pub fn total_loss<'t, T: Scalar>(parts: LossParts<'t, T>) -> Result<(Var<'t, T>, LossReport)> {
    let named: [(&str, Option<&Var<'t, T>>); 4] = [
        ("dice", Some(&parts.dice)),
        ("cls", Some(&parts.cls)),
        ("s2p", parts.s2p.as_ref()),
        ("p2p", parts.p2p.as_ref()),
    ];
    for (name, v) in named {
        if let Some(v) = v {
            if !v.item().is_finite() {
                return Err(Error::Numeric { component: (*name).into() });
            }
        }
    }
    let mut total = parts.dice.add(parts.cls);
    if let Some(s2p) = parts.s2p {
        total = total.add(s2p);
    }
    if let Some(p2p) = parts.p2p {
        total = total.add(p2p);
    }
    let report = LossReport {
        dice: parts.dice.item().as_f64(),
        cls: parts.cls.item().as_f64(),
        s2p: parts.s2p.map(|v| v.item().as_f64()),
        p2p: parts.p2p.map(|v| v.item().as_f64()),
        total: total.item().as_f64(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dpseg_tensor::{NdArray, Tape};

    #[test]
    fn zero_query_row_gives_half_everywhere() {
        let tape: Tape<f64> = Tape::new();
        let o_s = tape.leaf(NdArray::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, -1.0]));
        let pix = tape.leaf(NdArray::from_vec(&[3, 4], (0..12).map(|i| i as f64 * 0.1).collect()));
        let m = predict_masks(o_s, pix).unwrap();
        for x in 0..4 {
            assert_eq!(m.value().at2(0, x), 0.5);
        }
    }

    #[test]
    fn aligned_pixel_gives_saturated_probability() {
        // pixel = 10·q/‖q‖² at voxel x makes the logit exactly 10.
        let tape: Tape<f64> = Tape::new();
        let q = vec![1.0, 2.0, 2.0];
        let n2: f64 = q.iter().map(|v| v * v).sum();
        let o_s = tape.leaf(NdArray::from_vec(&[1, 3], q.clone()));
        let pix_col: Vec<f64> = q.iter().map(|v| 10.0 * v / n2).collect();
        let pix = tape.leaf(NdArray::from_vec(&[3, 1], pix_col));
        let m = predict_masks(o_s, pix).unwrap();
        let expect = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((m.value().data()[0] - expect).abs() < 1e-12);
        assert!(m.value().data()[0] > 0.9999);
    }

    #[test]
    fn masks_match_brute_force_dot_oracle() {
        let tape: Tape<f64> = Tape::new();
        let mut rng = dpseg_tensor::rng::KeyedRng::from_key(&[41]);
        let o = rng.fill_uniform(&[2, 8], -1.0, 1.0);
        let p = rng.fill_uniform(&[8, 64], -1.0, 1.0);
        let m = predict_masks(tape.leaf(o.clone()), tape.leaf(p.clone())).unwrap();
        for n in 0..2 {
            for x in 0..64 {
                let mut dot = 0.0;
                for c in 0..8 {
                    dot += o.at2(n, c) * p.at2(c, x);
                }
                let expect = 1.0 / (1.0 + (-dot).exp());
                assert!((m.value().at2(n, x) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dice_trivial_cases() {
        let tape: Tape<f64> = Tape::new();
        let smooth = 1e-5;
        // Perfect binary overlap: loss within smooth-induced slack of 0.
        let m = tape.leaf(NdArray::from_vec(&[1, 4], vec![1.0, 0.0, 1.0, 0.0]));
        let g = tape.leaf(NdArray::from_vec(&[1, 4], vec![1.0, 0.0, 1.0, 0.0]));
        assert!(dice_loss(m, g, smooth).item() <= 1e-5);
        // Disjoint nonempty: per-category term within slack of 1.
        let m = tape.leaf(NdArray::from_vec(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]));
        let g = tape.leaf(NdArray::from_vec(&[1, 4], vec![0.0, 0.0, 1.0, 1.0]));
        assert!((dice_loss(m, g, smooth).item() - 1.0).abs() <= 1e-5);
        // Two-voxel masks overlapping in one voxel: dice 1/2 in the
        // smooth → 0 limit.
        let m = tape.leaf(NdArray::from_vec(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]));
        let g = tape.leaf(NdArray::from_vec(&[1, 4], vec![0.0, 1.0, 1.0, 0.0]));
        let loss = dice_loss(m, g, 0.0).item();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cls_trivial_cases() {
        let tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(NdArray::from_vec(&[1], vec![20.0]));
        assert!(cls_loss(logits, &[true]).item() <= 1e-8);
        let logits = tape.leaf(NdArray::from_vec(&[2], vec![0.0, 0.0]));
        let loss = cls_loss(logits, &[true, false]).item();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn infonce_single_row_is_exactly_zero() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(NdArray::from_vec(&[1, 2], vec![1.0, 0.0]));
        let p = tape.leaf(NdArray::from_vec(&[1, 2], vec![0.0, 1.0]));
        assert_eq!(infonce(a, p, 1.0, false).unwrap().item(), 0.0);
    }

    #[test]
    fn infonce_identity_similarity_closed_form() {
        // Orthonormal rows: diagonal similarity 1, off-diagonal 0.
        let tape: Tape<f64> = Tape::new();
        let eye = |n: usize| {
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                d[i * n + i] = 1.0;
            }
            NdArray::from_vec(&[n, n], d)
        };
        let a = tape.leaf(eye(2));
        let p = tape.leaf(eye(2));
        let loss = infonce(a, p, 1.0, false).unwrap().item();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        assert!((loss - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn infonce_invariant_to_negative_permutation() {
        // Permuting the off-diagonal columns consistently (keeping each
        // anchor's positive fixed) leaves the loss unchanged.
        let tape: Tape<f64> = Tape::new();
        let mut rng = dpseg_tensor::rng::KeyedRng::from_key(&[77]);
        let raw = rng.fill_uniform(&[3, 4], -1.0, 1.0);
        let a = tape.leaf(raw.clone()).l2_normalize_rows(1e-12);
        let p_raw = rng.fill_uniform(&[3, 4], -1.0, 1.0);
        let p = tape.leaf(p_raw.clone()).l2_normalize_rows(1e-12);
        let base = infonce(a, p, 0.07, false).unwrap().item();
        // The loss only reads row-aligned diagonals and row-wise sums, so a
        // permutation of rows applied to BOTH inputs leaves it unchanged.
        let perm = [2usize, 0, 1];
        let permute = |x: &NdArray<f64>| {
            let mut d = Vec::new();
            for &r in &perm {
                d.extend_from_slice(&x.data()[r * 4..(r + 1) * 4]);
            }
            NdArray::from_vec(&[3, 4], d)
        };
        let a2 = tape.leaf(permute(&raw)).l2_normalize_rows(1e-12);
        let p2 = tape.leaf(permute(&p_raw)).l2_normalize_rows(1e-12);
        let permuted = infonce(a2, p2, 0.07, false).unwrap().item();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn infonce_rejects_unnormalized_rows() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(NdArray::from_vec(&[1, 2], vec![2.0, 0.0]));
        let p = tape.leaf(NdArray::from_vec(&[1, 2], vec![1.0, 0.0]));
        assert!(infonce(a, p, 1.0, false).is_err());
    }

    #[test]
    fn total_loss_sums_exactly() {
        let tape: Tape<f64> = Tape::new();
        let mk = |v: f64| tape.leaf(NdArray::scalar(v));
        let (total, report) = total_loss(LossParts {
            dice: mk(0.5),
            cls: mk(0.2),
            s2p: Some(mk(0.1)),
            p2p: Some(mk(0.1)),
        })
        .unwrap();
        assert!((total.item() - 0.9).abs() < 1e-12);
        assert_eq!(report.total, ((0.5 + 0.2) + 0.1) + 0.1);

        let (total, report) = total_loss(LossParts { dice: mk(0.0), cls: mk(0.0), s2p: None, p2p: None }).unwrap();
        assert_eq!(total.item(), 0.0);
        assert_eq!(report.total, 0.0);

        // Contrastive terms disabled: total is dice + cls exactly, and the
        // serialized log line contains only those components.
        let (total, report) = total_loss(LossParts { dice: mk(0.31), cls: mk(0.07), s2p: None, p2p: None }).unwrap();
        assert_eq!(total.item(), 0.31 + 0.07);
        let line = serde_json::to_string(&report).unwrap();
        assert!(line.contains("dice") && line.contains("cls"));
        assert!(!line.contains("s2p") && !line.contains("p2p"));
    }

    #[test]
    fn total_loss_names_nonfinite_component() {
        let tape: Tape<f64> = Tape::new();
        let mk = |v: f64| tape.leaf(NdArray::scalar(v));
        let err = total_loss(LossParts { dice: mk(0.1), cls: mk(f64::NAN), s2p: None, p2p: None }).unwrap_err();
        match err {
            crate::error::Error::Numeric { component } => assert_eq!(component, "cls"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
