//! Shared query refinement against multi-scale features.
//!
//! Segmentation and textual queries follow soft scaled-dot-product cross
//! attention; anatomical queries follow the hard route: raw similarity
//! logits, Gumbel-perturbed column softmax, per-voxel one-hot assignment
//! with a straight-through gradient, then an exclusive partition mean.
//! One refinement layer per feature level, applied coarse to fine, with all
//! attention/feed-forward weights shared across the query families.

use crate::backbone::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::model::Binding;
use dpseg_tensor::rng::{gumbel_at, hash_str, KeyedRng};
use dpseg_tensor::{NdArray, ParamStore, Scalar, Var};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 10.0;

/// The three refined query families. Absent families were disabled by the
/// ablation flags.
pub struct RefinedQuerySet<'t, T: Scalar> {
    pub q_s: Var<'t, T>,
    pub q_t: Option<Var<'t, T>>,
    pub q_a: Option<Var<'t, T>>,
}

fn insert_mat<T: Scalar>(store: &mut ParamStore<T>, name: &str, rows: usize, cols: usize, zero: bool, seed: u64) {
    let arr = if zero {
        NdArray::zeros(&[rows, cols])
    } else {
        let bound = 1.0 / (rows as f64).sqrt();
        KeyedRng::from_key(&[seed, hash_str(name)]).fill_uniform(&[rows, cols], T::from_f64_c(-bound), T::from_f64_c(bound))
    };
    store.insert(name, arr);
}

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, levels: usize, c: usize, channels: &[usize], seed: u64) {
    store.insert("refiner.tau", NdArray::scalar(T::one()));
    for l in 1..=levels {
        let c_in = channels[l - 1];
        insert_mat(store, &format!("refiner.l{l}.adapt.w"), c_in, c, false, seed);
        store.insert(&format!("refiner.l{l}.adapt.b"), NdArray::zeros(&[c]));
        for attn in ["cross", "self"] {
            insert_mat(store, &format!("refiner.l{l}.{attn}.wq"), c, c, false, seed);
            insert_mat(store, &format!("refiner.l{l}.{attn}.wk"), c, c, false, seed);
            insert_mat(store, &format!("refiner.l{l}.{attn}.wv"), c, c, false, seed);
            // Output projections start at zero: refinement begins as the
            // identity and residual branches grow during training.
            insert_mat(store, &format!("refiner.l{l}.{attn}.wo"), c, c, true, seed);
        }
        insert_mat(store, &format!("refiner.l{l}.ff.w1"), c, 2 * c, false, seed);
        store.insert(&format!("refiner.l{l}.ff.b1"), NdArray::zeros(&[2 * c]));
        insert_mat(store, &format!("refiner.l{l}.ff.w2"), 2 * c, c, true, seed);
        store.insert(&format!("refiner.l{l}.ff.b2"), NdArray::zeros(&[c]));
    }
}

/// Raw query/feature similarity: `S[n, v] = ⟨query_n, feature_v⟩` with the
/// features flattened row-major over the spatial grid.
pub fn similarity_logits<'t, T: Scalar>(queries: Var<'t, T>, features: Var<'t, T>) -> Result<Var<'t, T>> {
    let qs = queries.shape();
    let fs = features.shape();
    if qs.len() != 2 || fs.len() != 2 || qs[1] != fs[1] {
        return Err(Error::Shape(format!("similarity_logits: queries {qs:?} vs features {fs:?}")));
    }
    Ok(queries.matmul_nt(features))
}

/// Column one-hot at the argmax over the query axis, ties broken toward the
/// lowest index.
pub fn argmax_onehot_cols<T: Scalar>(a: &NdArray<T>) -> NdArray<T> {
    let (n, v) = (a.rows(), a.cols());
    let mut out = NdArray::zeros(&[n, v]);
    for col in 0..v {
        let mut best = 0usize;
        for row in 1..n {
            if a.at2(row, col) > a.at2(best, col) {
                best = row;
            }
        }
        out.set2(best, col, T::one());
    }
    out
}

/// Noise key for schedule-independent Gumbel draws.
#[derive(Clone, Copy, Debug)]
pub struct NoiseKey {
    pub seed: u64,
    pub layer: u64,
}

/// Gumbel-perturbed column softmax plus the hard one-hot assignment.
///
/// `S_gumbel = softmax_N((S + G) / τ)` per spatial column, with `G ≡ 0` when
/// noise is disabled. Each Gumbel sample is keyed by `(seed, layer, n, v)`.
pub fn gumbel_hard_assign<'t, T: Scalar>(
    s: Var<'t, T>,
    tau: Var<'t, T>,
    key: NoiseKey,
    noise_enabled: bool,
) -> Result<(Var<'t, T>, NdArray<T>)> {
    let tau_v = tau.item();
    if !(tau_v > T::zero()) {
        return Err(Error::Domain(format!("gumbel_hard_assign: tau must be positive, got {tau_v}")));
    }
    let shape = s.shape();
    let (n, v) = (shape[0], shape[1]);
    let noisy = if noise_enabled {
        let mut g = NdArray::<T>::zeros(&[n, v]);
        for row in 0..n {
            for col in 0..v {
                g.data_mut()[row * v + col] = gumbel_at(&[key.seed, key.layer, row as u64, col as u64]);
            }
        }
        s.add(s.leaf_like(g))
    } else {
        s
    };
    let s_gumbel = noisy.scale_by(tau.recip()).softmax_cols();
    let s_onehot = argmax_onehot_cols(&s_gumbel.value());
    Ok((s_gumbel, s_onehot))
}

/// Straight-through assignment: value is the one-hot, gradient is the soft
/// relaxation's.
pub fn straight_through<'t, T: Scalar>(s_gumbel: Var<'t, T>, s_onehot: &NdArray<T>) -> Var<'t, T> {
    s_gumbel.straight_through(s_onehot.clone())
}

/// Exclusive partition mean: each query receives the mean of the features
/// assigned to it; queries with no voxels receive a zero update.
pub fn hard_gather<'t, T: Scalar>(s_prime: Var<'t, T>, features: Var<'t, T>, s_onehot: &NdArray<T>) -> Var<'t, T> {
    let n = s_onehot.rows();
    let v = s_onehot.cols();
    let mut factors = Vec::with_capacity(n);
    for row in 0..n {
        let count: usize = (0..v).filter(|&col| s_onehot.at2(row, col) > T::zero()).count();
        factors.push(T::one() / T::from_f64_c(count.max(1) as f64));
    }
    s_prime.matmul(features).row_scale_const(factors)
}

struct LayerWeights<'t, T: Scalar> {
    wq: Var<'t, T>,
    wk: Var<'t, T>,
    wv: Var<'t, T>,
    wo: Var<'t, T>,
}

fn weights<'t, T: Scalar>(binding: &Binding<'t, T>, level: usize, which: &str) -> LayerWeights<'t, T> {
    LayerWeights {
        wq: binding.var(&format!("refiner.l{level}.{which}.wq")),
        wk: binding.var(&format!("refiner.l{level}.{which}.wk")),
        wv: binding.var(&format!("refiner.l{level}.{which}.wv")),
        wo: binding.var(&format!("refiner.l{level}.{which}.wo")),
    }
}

fn scaled_dot_attention<'t, T: Scalar>(
    q_tokens: Var<'t, T>,
    kv_tokens: Var<'t, T>,
    w: &LayerWeights<'t, T>,
    scale: T,
) -> Var<'t, T> {
    let logits = q_tokens.matmul(w.wq).matmul_nt(kv_tokens.matmul(w.wk)).mul_scalar(scale);
    logits.softmax_rows().matmul(kv_tokens.matmul(w.wv)).matmul(w.wo)
}

fn feed_forward<'t, T: Scalar>(binding: &Binding<'t, T>, level: usize, x: Var<'t, T>) -> Var<'t, T> {
    let w1 = binding.var(&format!("refiner.l{level}.ff.w1"));
    let b1 = binding.var(&format!("refiner.l{level}.ff.b1"));
    let w2 = binding.var(&format!("refiner.l{level}.ff.w2"));
    let b2 = binding.var(&format!("refiner.l{level}.ff.b2"));
    x.add(x.matmul(w1).add_row(b1).silu().matmul(w2).add_row(b2))
}

/// Refine all enabled query families over the feature pyramid.
///
/// Per level, coarse to fine: soft cross-attention for `[Q_S, Q_T]`, the hard
/// assignment route (or soft, when `hard_assign` is off) for `Q_A`, then a
/// self-attention layer and a feed-forward layer per family, all residual.
#[allow(clippy::too_many_arguments)]
pub fn refine<'t, T: Scalar>(
    binding: &Binding<'t, T>,
    feats: &MultiScaleFeatures<'t, T>,
    q_s: Var<'t, T>,
    q_t: Option<Var<'t, T>>,
    q_a: Option<Var<'t, T>>,
    hard_assign: bool,
    seed: u64,
    noise_enabled: bool,
) -> Result<RefinedQuerySet<'t, T>> {
    let c = q_s.shape()[1];
    for (name, q) in [("q_t", &q_t), ("q_a", &q_a)] {
        if let Some(q) = q {
            if q.shape()[1] != c {
                return Err(Error::Shape(format!("{name} width {} differs from {c}", q.shape()[1])));
            }
        }
    }
    let scale = T::from_f64_c(1.0 / (c as f64).sqrt());
    let tau = binding.var("refiner.tau");
    let mut q_s = q_s;
    let mut q_t = q_t;
    let mut q_a = q_a;

    for idx in (0..feats.levels.len()).rev() {
        let level = idx + 1; // 1-based level number
        let fs = feats.levels[idx].shape();
        let flat = feats.levels[idx].reshape(&[fs[0], fs[1] * fs[2] * fs[3]]).transpose2(); // (V, C_in)
        let aw = binding.var(&format!("refiner.l{level}.adapt.w"));
        let ab = binding.var(&format!("refiner.l{level}.adapt.b"));
        let features = flat.matmul(aw).add_row(ab); // (V, C)
        let cross = weights(binding, level, "cross");

        q_s = q_s.add(scaled_dot_attention(q_s, features, &cross, scale));
        if let Some(qt) = q_t {
            q_t = Some(qt.add(scaled_dot_attention(qt, features, &cross, scale)));
        }
        if let Some(qa) = q_a {
            let updated = if hard_assign {
                let s = similarity_logits(qa, features)?;
                let (s_gumbel, s_onehot) = gumbel_hard_assign(s, tau, NoiseKey { seed, layer: level as u64 }, noise_enabled)?;
                let s_prime = straight_through(s_gumbel, &s_onehot);
                let gathered = hard_gather(s_prime, features, &s_onehot);
                qa.add(gathered.matmul(cross.wo))
            } else {
                qa.add(scaled_dot_attention(qa, features, &cross, scale))
            };
            q_a = Some(updated);
        }

        let selfw = weights(binding, level, "self");
        let self_then_ff = |x: Var<'t, T>| -> Var<'t, T> {
            let x = x.add(scaled_dot_attention(x, x, &selfw, scale));
            feed_forward(binding, level, x)
        };
        q_s = self_then_ff(q_s);
        q_t = q_t.map(self_then_ff);
        q_a = q_a.map(self_then_ff);
    }
    Ok(RefinedQuerySet { q_s, q_t, q_a })
}

/// Clamp the learnable temperature back into its admissible range after an
/// optimizer step.
pub fn clamp_tau<T: Scalar>(store: &mut ParamStore<T>) {
    let p = store.get_mut("refiner.tau");
    let v = p.value.data()[0];
    let lo = T::from_f64_c(TAU_MIN);
    let hi = T::from_f64_c(TAU_MAX);
    p.value.data_mut()[0] = v.max(lo).min(hi);
}
