//! Group-masked prompt decoding.
//!
//! Each segmentation query attends over the 2N prompt queries through a
//! boolean visibility mask: its own anatomical and textual prompts, the host
//! organ's prompts for tumors, plus any configured extra links. Disallowed
//! positions receive exactly zero attention weight, so out-of-group prompts
//! cannot change a query's output in any bit.

use crate::error::{Error, Result};
use crate::model::Binding;
use crate::synth::taxonomy::{Kind, Taxonomy};
use dpseg_tensor::rng::{hash_str, KeyedRng};
use dpseg_tensor::{NdArray, ParamStore, Scalar, Var};
use serde::{Deserialize, Serialize};

/// Boolean prompt-visibility matrix. Row `i` governs segmentation query `i`;
/// column `j < N` refers to anatomical prompt `j`, column `N + j` to textual
/// prompt `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMask {
    pub names: Vec<String>,
    /// Row-major `N × 2N` boolean matrix.
    pub allow: Vec<Vec<bool>>,
}

impl GroupMask {
    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allow[row][col]
    }

    /// Mask that lets every query see every prompt (the no-mask ablation).
    pub fn all_visible(taxonomy: &Taxonomy) -> Self {
        let n = taxonomy.len();
        Self { names: taxonomy.names(), allow: vec![vec![true; 2 * n]; n] }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        for (i, row) in self.allow.iter().enumerate() {
            if row.len() != 2 * n {
                return Err(Error::Config(format!("group mask row {i} has {} columns, wanted {}", row.len(), 2 * n)));
            }
            if !row.iter().any(|&b| b) {
                return Err(Error::Config(format!("group mask row {i} allows no prompts")));
            }
            if !row[i] || !row[n + i] {
                return Err(Error::Config(format!("group mask row {i} must allow its own prompts")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Build the prompt-visibility groups: own prompts always; host-organ
/// prompts for tumors; `extra_links` (by category name, directed) add both
/// prompt columns of the target to the source row.
pub fn build_attention_mask(taxonomy: &Taxonomy, extra_links: &[(String, String)]) -> Result<GroupMask> {
    taxonomy.validate()?;
    let n = taxonomy.len();
    let mut allow = vec![vec![false; 2 * n]; n];
    for (i, cat) in taxonomy.categories.iter().enumerate() {
        allow[i][i] = true;
        allow[i][n + i] = true;
        if cat.kind == Kind::Tumor {
            let host = cat.host.expect("validated tumor host");
            allow[i][host] = true;
            allow[i][n + host] = true;
        }
    }
    for (from, to) in extra_links {
        let fi = taxonomy
            .index_of(from)
            .ok_or_else(|| Error::Config(format!("extra link references unknown category '{from}'")))?;
        let ti = taxonomy
            .index_of(to)
            .ok_or_else(|| Error::Config(format!("extra link references unknown category '{to}'")))?;
        allow[fi][ti] = true;
        allow[fi][n + ti] = true;
    }
    let mask = GroupMask { names: taxonomy.names(), allow };
    mask.validate()?;
    Ok(mask)
}

/// Decoded segmentation queries plus the per-category presence logits.
pub struct DecodedQueries<'t, T: Scalar> {
    pub o_s: Var<'t, T>,
    pub presence_logits: Var<'t, T>,
}

/// L2-normalized projections feeding the contrastive losses.
pub struct ContrastEmbeddings<'t, T: Scalar> {
    pub seg: Var<'t, T>,
    pub anat: Option<Var<'t, T>>,
    pub text: Option<Var<'t, T>>,
}

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, c: usize, c_k: usize, seed: u64) {
    let mat = |name: &str, rows: usize, cols: usize, zero: bool| {
        if zero {
            NdArray::zeros(&[rows, cols])
        } else {
            let bound = 1.0 / (rows as f64).sqrt();
            KeyedRng::from_key(&[seed, hash_str(name)]).fill_uniform(&[rows, cols], T::from_f64_c(-bound), T::from_f64_c(bound))
        }
    };
    for w in ["wq", "wk", "wv"] {
        let name = format!("refer.cross.{w}");
        let arr = mat(&name, c, c, false);
        store.insert(&name, arr);
    }
    store.insert("refer.cross.wo", NdArray::zeros(&[c, c]));
    store.insert("refer.ff.w1", mat("refer.ff.w1", c, 2 * c, false));
    store.insert("refer.ff.b1", NdArray::zeros(&[2 * c]));
    store.insert("refer.ff.w2", NdArray::zeros(&[2 * c, c]));
    store.insert("refer.ff.b2", NdArray::zeros(&[c]));
    store.insert("refer.presence.w", mat("refer.presence.w", c, 1, false));
    store.insert("refer.presence.b", NdArray::zeros(&[1]));
    store.insert("contrast.seg.w", mat("contrast.seg.w", c, c_k, false));
    store.insert("contrast.seg.b", NdArray::zeros(&[c_k]));
    store.insert("contrast.anat.w", mat("contrast.anat.w", c, c_k, false));
    store.insert("contrast.anat.b", NdArray::zeros(&[c_k]));
    store.insert("contrast.text.w", mat("contrast.text.w", c, c_k, false));
    store.insert("contrast.text.b", NdArray::zeros(&[c_k]));
}

/// Update segmentation queries by masked cross-attention over the enabled
/// prompt families, then a residual feed-forward; the presence head reads the
/// decoded queries.
pub fn decode_queries<'t, T: Scalar>(
    binding: &Binding<'t, T>,
    q_s: Var<'t, T>,
    q_a: Option<Var<'t, T>>,
    q_t: Option<Var<'t, T>>,
    mask: &GroupMask,
) -> Result<DecodedQueries<'t, T>> {
    let n = q_s.shape()[0];
    if mask.n() != n {
        return Err(Error::Config(format!("group mask covers {} categories, queries have {n}", mask.n())));
    }
    mask.validate()?;
    let c = q_s.shape()[1];
    let scale = T::from_f64_c(1.0 / (c as f64).sqrt());

    let mut o_s = q_s;
    let mut token_parts: Vec<Var<'t, T>> = Vec::new();
    let mut allowed: Vec<Vec<bool>> = vec![Vec::new(); n];
    if let Some(qa) = q_a {
        token_parts.push(qa);
        for (i, row) in allowed.iter_mut().enumerate() {
            row.extend((0..n).map(|j| mask.allows(i, j)));
        }
    }
    if let Some(qt) = q_t {
        token_parts.push(qt);
        for (i, row) in allowed.iter_mut().enumerate() {
            row.extend((0..n).map(|j| mask.allows(i, n + j)));
        }
    }
    if !token_parts.is_empty() {
        for (i, row) in allowed.iter_mut().enumerate() {
            if !row.iter().any(|&b| b) {
                return Err(Error::Config(format!("query {i} has no visible prompts among enabled families")));
            }
        }
        let tokens = if token_parts.len() == 1 { token_parts[0] } else { binding.tape().concat_rows(&token_parts) };
        let flat_mask: Vec<bool> = allowed.into_iter().flatten().collect();
        let wq = binding.var("refer.cross.wq");
        let wk = binding.var("refer.cross.wk");
        let wv = binding.var("refer.cross.wv");
        let wo = binding.var("refer.cross.wo");
        let logits = o_s.matmul(wq).matmul_nt(tokens.matmul(wk)).mul_scalar(scale);
        let attn = logits.masked_softmax_rows(&flat_mask);
        o_s = o_s.add(attn.matmul(tokens.matmul(wv)).matmul(wo));
    }
    let w1 = binding.var("refer.ff.w1");
    let b1 = binding.var("refer.ff.b1");
    let w2 = binding.var("refer.ff.w2");
    let b2 = binding.var("refer.ff.b2");
    o_s = o_s.add(o_s.matmul(w1).add_row(b1).silu().matmul(w2).add_row(b2));

    let pw = binding.var("refer.presence.w");
    let pb = binding.var("refer.presence.b");
    let presence_logits = o_s.matmul(pw).add_row(pb).reshape(&[n]);
    Ok(DecodedQueries { o_s, presence_logits })
}

/// Affine-project the decoded and refined queries to the contrastive width
/// and L2-normalize each row.
pub fn project_for_contrast<'t, T: Scalar>(
    binding: &Binding<'t, T>,
    o_s: Var<'t, T>,
    q_a: Option<Var<'t, T>>,
    q_t: Option<Var<'t, T>>,
) -> Result<ContrastEmbeddings<'t, T>> {
    let eps = T::from_f64_c(1e-12);
    let proj = |x: Var<'t, T>, which: &str| -> Result<Var<'t, T>> {
        let w = binding.var(&format!("contrast.{which}.w"));
        let b = binding.var(&format!("contrast.{which}.b"));
        let y = x.matmul(w).add_row(b);
        let v = y.value();
        for r in 0..v.rows() {
            let norm = v.data()[r * v.cols()..(r + 1) * v.cols()].iter().map(|&x| x * x).sum::<T>().sqrt();
            if !(norm > eps) {
                return Err(Error::Numeric { component: format!("contrast.{which} row {r} norm") });
            }
        }
        Ok(y.l2_normalize_rows(eps))
    };
    Ok(ContrastEmbeddings {
        seg: proj(o_s, "seg")?,
        anat: q_a.map(|q| proj(q, "anat")).transpose()?,
        text: q_t.map(|q| proj(q, "text")).transpose()?,
    })
}
