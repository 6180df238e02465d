//! Prompt encoders and assembly.
//!
//! Anatomical prompts go through a frozen pooling encoder (average pooling to
//! a 4³ grid followed by a fixed random projection). Textual prompts use a
//! deterministic hashed bag-of-tokens embedding. Both are projected to the
//! shared query width by trainable affine maps.

use crate::error::{Error, Result};
use crate::model::Binding;
use crate::synth::taxonomy::Taxonomy;
use crate::synth::text::TextCorpus;
use crate::synth::volume::Volume;
use dpseg_tensor::conv::avg_pool3d_raw;
use dpseg_tensor::rng::{hash_str, KeyedRng};
use dpseg_tensor::{NdArray, ParamStore, Scalar, Var};

/// Pooled grid edge of the frozen anatomical encoder.
const POOL_GRID: usize = 4;

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, c_a: usize, c_t: usize, c: usize, seed: u64) {
    let pooled = POOL_GRID * POOL_GRID * POOL_GRID;
    let bound = 1.0 / (pooled as f64).sqrt();
    // The anatomical encoder stands in for a pre-trained feature extractor:
    // random, but frozen for the whole life of the model.
    store.insert_frozen(
        "prompt.anat.enc.w",
        KeyedRng::from_key(&[seed, hash_str("prompt.anat.enc.w")]).fill_uniform(
            &[pooled, c_a],
            T::from_f64_c(-bound),
            T::from_f64_c(bound),
        ),
    );
    let proj_bound_a = 1.0 / (c_a as f64).sqrt();
    store.insert(
        "prompt.anat.proj.w",
        KeyedRng::from_key(&[seed, hash_str("prompt.anat.proj.w")]).fill_uniform(
            &[c_a, c],
            T::from_f64_c(-proj_bound_a),
            T::from_f64_c(proj_bound_a),
        ),
    );
    store.insert("prompt.anat.proj.b", NdArray::zeros(&[c]));
    let proj_bound_t = 1.0 / (c_t as f64).sqrt();
    store.insert(
        "prompt.text.proj.w",
        KeyedRng::from_key(&[seed, hash_str("prompt.text.proj.w")]).fill_uniform(
            &[c_t, c],
            T::from_f64_c(-proj_bound_t),
            T::from_f64_c(proj_bound_t),
        ),
    );
    store.insert("prompt.text.proj.b", NdArray::zeros(&[c]));
}

/// Encode N prompt volumes into `(N, C_A)` embeddings with the frozen
/// encoder. Runs outside the tape: no gradient ever reaches it.
pub fn encode_anatomical<T: Scalar>(prompts: &[Volume<T>], store: &ParamStore<T>) -> Result<NdArray<T>> {
    if prompts.is_empty() {
        return Err(Error::Input("encode_anatomical needs at least one prompt volume".into()));
    }
    let shape = prompts[0].shape;
    for (i, p) in prompts.iter().enumerate() {
        if p.shape != shape {
            return Err(Error::Shape(format!("prompt {i} shape {:?} differs from {:?}", p.shape.0, shape.0)));
        }
    }
    let [h, w, d] = shape.0;
    if h != w || w != d || h % POOL_GRID != 0 {
        return Err(Error::Shape(format!("prompt shape {:?} must be cubic and divisible by {POOL_GRID}", shape.0)));
    }
    let factor = h / POOL_GRID;
    let enc_w = &store.get("prompt.anat.enc.w").value;
    let c_a = enc_w.cols();
    let mut rows = Vec::with_capacity(prompts.len() * c_a);
    for p in prompts {
        let pooled = avg_pool3d_raw(&p.to_array(), factor);
        let flat = NdArray::from_vec(&[1, pooled.numel()], pooled.into_data());
        let row = NdArray::gemm(&flat, false, enc_w, false);
        rows.extend_from_slice(row.data());
    }
    Ok(NdArray::from_vec(&[prompts.len(), c_a], rows))
}

/// Lowercased alphanumeric token runs.
fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|ch: char| !ch.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Bucket index a token hashes to, for `c_t` buckets.
pub fn token_bucket(token: &str, c_t: usize) -> usize {
    (hash_str(token) % c_t as u64) as usize
}

/// Hashed bag-of-tokens embedding: hash each token into one of `c_t`
/// buckets, sum counts, L2-normalize. `(N, C_T)` output.
pub fn encode_textual<T: Scalar>(texts: &[String], c_t: usize) -> Result<NdArray<T>> {
    if texts.is_empty() {
        return Err(Error::Input("encode_textual needs at least one text".into()));
    }
    let mut out = NdArray::zeros(&[texts.len(), c_t]);
    for (i, text) in texts.iter().enumerate() {
        if text.trim().is_empty() {
            return Err(Error::Input(format!("text {i} is empty")));
        }
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Input(format!("text {i} has no tokens")));
        }
        for tok in &tokens {
            let b = token_bucket(tok, c_t);
            let v = out.at2(i, b) + T::one();
            out.set2(i, b, v);
        }
        let norm = out.data()[i * c_t..(i + 1) * c_t].iter().map(|&x| x * x).sum::<T>().sqrt();
        for b in 0..c_t {
            let v = out.at2(i, b) / norm;
            out.set2(i, b, v);
        }
    }
    Ok(out)
}

/// Project both embedding families to the shared query width.
pub fn project_to_queries<'t, T: Scalar>(
    binding: &Binding<'t, T>,
    anat: Option<Var<'t, T>>,
    text: Option<Var<'t, T>>,
) -> (Option<Var<'t, T>>, Option<Var<'t, T>>) {
    let q_a = anat.map(|e| e.matmul(binding.var("prompt.anat.proj.w")).add_row(binding.var("prompt.anat.proj.b")));
    let q_t = text.map(|e| e.matmul(binding.var("prompt.text.proj.w")).add_row(binding.var("prompt.text.proj.b")));
    (q_a, q_t)
}

/// Positive categories get their long description; negatives a uniformly
/// sampled instantiated short template. Deterministic given the seed.
pub fn assemble_textual_prompts(
    taxonomy: &Taxonomy,
    corpus: &TextCorpus,
    positives: &[bool],
    seed: u64,
) -> Result<Vec<String>> {
    corpus.validate(taxonomy)?;
    if positives.len() != taxonomy.len() {
        return Err(Error::Input(format!("{} positive flags for {} categories", positives.len(), taxonomy.len())));
    }
    let mut texts = Vec::with_capacity(taxonomy.len());
    for (i, cat) in taxonomy.categories.iter().enumerate() {
        if positives[i] {
            texts.push(corpus.long_descriptions[i].clone());
        } else {
            let mut rng = KeyedRng::from_key(&[seed, 0x7e77, i as u64]);
            let t = rng.index(corpus.short_templates.len());
            texts.push(corpus.instantiate(t, &cat.name));
        }
    }
    Ok(texts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::taxonomy::{organ, tumor, Stage};
    use crate::synth::text::make_text_corpus;
    use crate::synth::volume::GridShape;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_params(&mut s, 64, 64, 32, 7);
        s
    }

    #[test]
    fn identical_prompt_volumes_give_identical_rows() {
        let s = store();
        let v = Volume::new(GridShape::cube(16), [1.0; 3], (0..4096).map(|i| (i % 17) as f64 * 0.1).collect()).unwrap();
        let e = encode_anatomical(&[v.clone(), v], &s).unwrap();
        for c in 0..64 {
            assert_eq!(e.at2(0, c), e.at2(1, c));
        }
    }

    #[test]
    fn zero_volume_gives_zero_embedding() {
        let s = store();
        let v = Volume::<f64>::zeros(GridShape::cube(16), [1.0; 3]);
        let e = encode_anatomical(&[v], &s).unwrap();
        assert!(e.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn inverted_volume_embedding_differs() {
        // Sampled check: random volumes vs their intensity-inverted copies.
        let s = store();
        for seed in 0..100u64 {
            let mut rng = KeyedRng::from_key(&[seed, 0xdead]);
            let data: Vec<f64> = (0..4096).map(|_| rng.uniform(0.0, 1.0)).collect();
            let v = Volume::new(GridShape::cube(16), [1.0; 3], data.clone()).unwrap();
            let inv = Volume::new(GridShape::cube(16), [1.0; 3], data.iter().map(|x| 1.0 - x).collect()).unwrap();
            let e = encode_anatomical(&[v, inv], &s).unwrap();
            let dist: f64 = (0..64).map(|c| (e.at2(0, c) - e.at2(1, c)).powi(2)).sum::<f64>().sqrt();
            assert!(dist > 1e-9, "inverted copy collided at seed {seed}");
        }
    }

    #[test]
    fn bag_of_tokens_is_order_invariant_and_normalized() {
        let a = encode_textual::<f64>(&["liver liver".into()], 64).unwrap();
        let b = encode_textual::<f64>(&["liver".into()], 64).unwrap();
        for c in 0..64 {
            assert!((a.at2(0, c) - b.at2(0, c)).abs() < 1e-12, "direction must match");
        }
        let n: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);

        let p1 = encode_textual::<f64>(&["big liver mass".into()], 64).unwrap();
        let p2 = encode_textual::<f64>(&["mass big liver".into()], 64).unwrap();
        assert_eq!(p1.data(), p2.data());
    }

    #[test]
    fn token_disjoint_bucket_disjoint_texts_are_orthogonal() {
        // Oracle scan: find two token sets with disjoint buckets, then
        // verify the embeddings' dot product is exactly zero.
        let c_t = 64;
        let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut used = std::collections::BTreeSet::new();
        for w in &words {
            let b = token_bucket(w, c_t);
            if first.len() < 4 && !used.contains(&b) {
                used.insert(b);
                first.push(w.clone());
            }
        }
        let first_buckets: std::collections::BTreeSet<usize> = first.iter().map(|w| token_bucket(w, c_t)).collect();
        for w in &words {
            let b = token_bucket(w, c_t);
            if second.len() < 4 && !first_buckets.contains(&b) && !second.iter().any(|s: &String| token_bucket(s, c_t) == b) {
                second.push(w.clone());
            }
        }
        assert_eq!(first.len(), 4);
        assert_eq!(second.len(), 4);
        let e = encode_textual::<f64>(&[first.join(" "), second.join(" ")], c_t).unwrap();
        let dot: f64 = (0..c_t).map(|c| e.at2(0, c) * e.at2(1, c)).sum();
        assert_eq!(dot, 0.0);
    }

    #[test]
    fn empty_text_is_an_input_error() {
        assert!(encode_textual::<f64>(&["  ".into()], 64).is_err());
    }

    #[test]
    fn assemble_positive_long_negative_template() {
        let tax = Taxonomy::new(vec![organ("liver"), tumor("lesion", 0, Stage::T2)]).unwrap();
        let corpus = make_text_corpus(&tax, 0).unwrap();
        let all_pos = assemble_textual_prompts(&tax, &corpus, &[true, true], 1).unwrap();
        assert_eq!(all_pos, corpus.long_descriptions);

        let mut single = corpus.clone();
        single.short_templates = vec!["A photo of a [CLS].".into()];
        let all_neg = assemble_textual_prompts(&tax, &single, &[false, false], 1).unwrap();
        assert_eq!(all_neg, vec!["A photo of a liver.".to_string(), "A photo of a lesion.".to_string()]);
    }

    #[test]
    fn negative_template_sampling_is_uniform() {
        // Monte-Carlo frequency oracle over 10000 seeds, 3σ multinomial band.
        let tax = Taxonomy::new(vec![organ("a"), organ("b")]).unwrap();
        let corpus = make_text_corpus(&tax, 0).unwrap();
        let k = corpus.short_templates.len();
        let trials = 10_000;
        let mut counts = vec![0usize; k];
        for seed in 0..trials as u64 {
            let texts = assemble_textual_prompts(&tax, &corpus, &[false, true], seed).unwrap();
            let hit = (0..k).find(|&t| texts[0] == corpus.instantiate(t, "a")).expect("template output");
            counts[hit] += 1;
        }
        let p = 1.0 / k as f64;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for (t, &c) in counts.iter().enumerate() {
            let expect = trials as f64 * p;
            assert!((c as f64 - expect).abs() < 3.0 * sd, "template {t}: {c} vs {expect}±{sd}");
        }
    }
}
