//! Vision backbone: a strided-convolution encoder producing multi-scale
//! features and a lateral-fusion decoder producing the full-resolution pixel
//! embedding map.

use crate::error::{Error, Result};
use crate::model::Binding;
use dpseg_tensor::conv::{conv3d, upsample2x, ConvSpec};
use dpseg_tensor::rng::{hash_str, KeyedRng};
use dpseg_tensor::{NdArray, ParamStore, Scalar, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Number of encoder levels; level `i` lives at `1/2^i` resolution.
    pub levels: usize,
    /// Channel width per level; must have `levels` entries, nondecreasing.
    pub channels: Vec<usize>,
    /// Pixel-embedding-map width.
    pub c_o: usize,
    /// Drop decoder nonlinearities (the homogeneity test mode).
    pub linear_decoder: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { levels: 3, channels: vec![16, 32, 64], c_o: 32, linear_decoder: false }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "backbone wants {} channel widths for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("backbone channel widths must be nondecreasing".into()));
        }
        Ok(())
    }

    /// Every input extent must be divisible by this.
    pub fn required_divisor(&self) -> usize {
        1 << self.levels
    }
}

/// Multi-scale encoder features. `levels[i]` holds level `i+1`, channel-first
/// `(C_i, H/2^(i+1), W/2^(i+1), D/2^(i+1))`. The original input shape rides
/// along so the decoder knows the target resolution.
#[derive(Debug)]
pub struct MultiScaleFeatures<'t, T: Scalar> {
    pub input_shape: [usize; 3],
    pub levels: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> MultiScaleFeatures<'t, T> {
    pub fn level_shape(&self, i: usize) -> Vec<usize> {
        self.levels[i].shape()
    }
}

fn uniform_init<T: Scalar>(shape: &[usize], fan_in: usize, key: &[u64]) -> NdArray<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    KeyedRng::from_key(key).fill_uniform(shape, T::from_f64_c(-bound), T::from_f64_c(bound))
}

/// Register backbone parameters.
pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, cfg: &BackboneConfig, seed: u64) {
    let mut prev_c = 1usize;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let name_w = format!("backbone.enc.l{}.w", i + 1);
        let fan_in = prev_c * 27;
        store.insert(&name_w, uniform_init(&[c, prev_c, 3, 3, 3], fan_in, &[seed, hash_str(&name_w)]));
        store.insert(&format!("backbone.enc.l{}.b", i + 1), NdArray::zeros(&[c]));
        prev_c = c;
    }
    for (i, &c) in cfg.channels.iter().enumerate() {
        let name_w = format!("backbone.dec.lat{}.w", i + 1);
        store.insert(&name_w, uniform_init(&[cfg.c_o, c], c, &[seed, hash_str(&name_w)]));
        store.insert(&format!("backbone.dec.lat{}.b", i + 1), NdArray::zeros(&[cfg.c_o]));
    }
    store.insert("backbone.dec.out.w", uniform_init(&[cfg.c_o, cfg.c_o], cfg.c_o, &[seed, hash_str("backbone.dec.out.w")]));
    store.insert("backbone.dec.out.b", NdArray::zeros(&[cfg.c_o]));
}

/// Encode a `(1, H, W, D)` volume (already on the tape) into `levels`
/// feature grids of halving resolution.
pub fn encode<'t, T: Scalar>(
    binding: &Binding<'t, T>,
    image: Var<'t, T>,
    cfg: &BackboneConfig,
) -> Result<MultiScaleFeatures<'t, T>> {
    cfg.validate()?;
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Shape(format!("encode expects (1, H, W, D), got {s:?}")));
    }
    let div = cfg.required_divisor();
    let input_shape = [s[1], s[2], s[3]];
    if input_shape.iter().any(|&e| e % div != 0) {
        return Err(Error::Shape(format!(
            "input extents {input_shape:?} must be divisible by {div} for {} levels",
            cfg.levels
        )));
    }
    let mut x = image;
    let mut levels = Vec::with_capacity(cfg.levels);
    for i in 1..=cfg.levels {
        let w = binding.var(&format!("backbone.enc.l{i}.w"));
        let b = binding.var(&format!("backbone.enc.l{i}.b"));
        x = conv3d(x, w, b, ConvSpec { stride: 2, pad: 1 }).silu();
        levels.push(x);
    }
    Ok(MultiScaleFeatures { input_shape, levels })
}

/// Flatten a channel-first volume var to `(C, V)`.
fn flat<'t, T: Scalar>(v: Var<'t, T>) -> (Var<'t, T>, [usize; 3]) {
    let s = v.shape();
    let spatial = [s[1], s[2], s[3]];
    (v.reshape(&[s[0], s[1] * s[2] * s[3]]), spatial)
}

/// Fuse all feature levels up to the input resolution and project to the
/// pixel embedding map `(C_o, H, W, D)`.
pub fn decode<'t, T: Scalar>(
    binding: &Binding<'t, T>,
    feats: &MultiScaleFeatures<'t, T>,
    cfg: &BackboneConfig,
) -> Result<Var<'t, T>> {
    cfg.validate()?;
    if feats.levels.is_empty() {
        return Err(Error::Shape("decode needs at least one feature level".into()));
    }
    // Structural check: each coarser level halves the previous one.
    for i in 1..feats.levels.len() {
        let prev = feats.levels[i - 1].shape();
        let cur = feats.levels[i].shape();
        if prev.len() != 4 || cur.len() != 4 || prev[1] != cur[1] * 2 || prev[2] != cur[2] * 2 || prev[3] != cur[3] * 2 {
            return Err(Error::Shape(format!("level {} shape {:?} does not halve {:?}", i + 1, cur, prev)));
        }
    }

    let lateral = |idx: usize, v: Var<'t, T>| -> Var<'t, T> {
        let w = binding.var(&format!("backbone.dec.lat{}.w", idx + 1));
        let b = binding.var(&format!("backbone.dec.lat{}.b", idx + 1));
        let (f, spatial) = flat(v);
        let y = w.matmul(f).add_col(b);
        y.reshape(&[cfg.c_o, spatial[0], spatial[1], spatial[2]])
    };
    let act = |v: Var<'t, T>| if cfg.linear_decoder { v } else { v.silu() };

    let coarsest = feats.levels.len() - 1;
    let mut y = act(lateral(coarsest, feats.levels[coarsest]));
    for i in (0..coarsest).rev() {
        y = act(upsample2x(y).add(lateral(i, feats.levels[i])));
    }
    // Lift to full input resolution (one 2× step unless the single level
    // already sits there — the degenerate projection-only configuration).
    let cur = y.shape();
    let mut spatial = [cur[1], cur[2], cur[3]];
    if spatial != feats.input_shape {
        y = upsample2x(y);
        let s2 = y.shape();
        spatial = [s2[1], s2[2], s2[3]];
    }
    if spatial != feats.input_shape {
        return Err(Error::Shape(format!(
            "decoded map at {spatial:?} cannot reach input resolution {:?}",
            feats.input_shape
        )));
    }
    let wo = binding.var("backbone.dec.out.w");
    let bo = binding.var("backbone.dec.out.b");
    let (f, sp) = flat(y);
    let out = wo.matmul(f).add_col(bo);
    Ok(out.reshape(&[cfg.c_o, sp[0], sp[1], sp[2]]))
}
