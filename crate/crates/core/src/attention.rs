//! Multi-head adaptive double attention: simultaneous window and
//! shifted-window branches, entropy-guided score reweighting, and joint
//! softmax fusion over the concatenated key set.
//!
//! The window branch's queries score against both key sets ("cross
//! integration"); each branch's keys carry their own entropy weights from the
//! graph domain discriminator. With the entropy source disabled the block is
//! plain double-key windowed self-attention.

use crate::backbone::{
    cyclic_shift, window_partition, window_reverse, FeatureMap, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::tensor::{Tape, TensorRef};
use rand_chacha::ChaCha8Rng;

/// QKV projections for both branches. `wq_shift` exists as a declared
/// parameter but the default forward never consumes it: the shifted scores
/// use the window branch's queries.
#[derive(Debug, Clone)]
pub struct AttentionProjections {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wq_shift: ParamId,
    pub wk_shift: ParamId,
    pub wv_shift: ParamId,
}

#[derive(Debug, Clone)]
pub struct MadaBlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub proj: AttentionProjections,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

impl MadaBlockParams {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = channels;
        let hidden = 4 * c;
        let tn = Init::TruncNormal { std: 0.02 };
        MadaBlockParams {
            ln1_gain: store.add(&format!("{prefix}.ln1.gain"), &[c], Init::Ones, rng),
            ln1_bias: store.add(&format!("{prefix}.ln1.bias"), &[c], Init::Zeros, rng),
            ln2_gain: store.add(&format!("{prefix}.ln2.gain"), &[c], Init::Ones, rng),
            ln2_bias: store.add(&format!("{prefix}.ln2.bias"), &[c], Init::Zeros, rng),
            proj: AttentionProjections {
                wq: store.add(&format!("{prefix}.attn.wq"), &[c, c], tn, rng),
                wk: store.add(&format!("{prefix}.attn.wk"), &[c, c], tn, rng),
                wv: store.add(&format!("{prefix}.attn.wv"), &[c, c], tn, rng),
                wq_shift: store.add(&format!("{prefix}.attn.wq_shift"), &[c, c], tn, rng),
                wk_shift: store.add(&format!("{prefix}.attn.wk_shift"), &[c, c], tn, rng),
                wv_shift: store.add(&format!("{prefix}.attn.wv_shift"), &[c, c], tn, rng),
            },
            mlp_w1: store.add(&format!("{prefix}.mlp.w1"), &[c, hidden], tn, rng),
            mlp_b1: store.add(&format!("{prefix}.mlp.b1"), &[hidden], Init::Zeros, rng),
            mlp_w2: store.add(&format!("{prefix}.mlp.w2"), &[hidden, c], tn, rng),
            mlp_b2: store.add(&format!("{prefix}.mlp.b2"), &[c], Init::Zeros, rng),
        }
    }
}

/// Per-token binary entropies of discriminator outputs, bounded by ln 2.
#[derive(Debug, Clone)]
pub struct EntropyWeights {
    pub h: TensorRef,
    /// Which discriminator pass produced the probabilities.
    pub provenance: String,
}

/// Where the per-token domain probabilities for reweighting come from.
#[derive(Debug, Clone, Copy)]
pub enum EntropySource {
    /// h = 1: no reweighting (evaluation mode, or the toggle disabled).
    Ones,
    /// One probability tensor `(b, tokens, 1)` in grid order, reused by both
    /// branches (the shifted branch sees it rolled with its tokens).
    SharedProbs(TensorRef),
    /// Separate probabilities per branch: window-branch in grid order,
    /// shifted-branch aligned with the shifted token order.
    BranchProbs { window: TensorRef, shifted: TensorRef },
}

/// Binary entropy of per-token domain probabilities:
/// `h = -p ln p - (1-p) ln(1-p)` with `0 log 0 = 0`.
pub fn entropy_from_domain_probs(
    tape: &mut Tape,
    probs: TensorRef,
    provenance: impl Into<String>,
) -> Result<EntropyWeights> {
    let h = tape.binary_entropy(probs)?;
    Ok(EntropyWeights {
        h,
        provenance: provenance.into(),
    })
}

/// Scaled dot-product scores with the entropy weight broadcast along the key
/// axis: `scores[i, j] = (q_i · k_j / sqrt(d)) * h_j`.
pub fn reweight_scores(
    tape: &mut Tape,
    q: TensorRef,
    k: TensorRef,
    h: Option<TensorRef>,
) -> Result<TensorRef> {
    let d = *tape.shape(q).last().unwrap();
    let kt = tape.transpose_last2(k)?;
    let raw = tape.matmul(q, kt)?;
    let scaled = tape.scale(raw, 1.0 / (d as f64).sqrt());
    match h {
        None => Ok(scaled),
        Some(h) => {
            let n_keys = tape.shape(k)[tape.shape(k).len() - 2];
            let h_shape = tape.shape(h).to_vec();
            if h_shape.last() != Some(&n_keys) || h_shape.len() != tape.shape(scaled).len() {
                return Err(Error::contract(
                    "reweight_scores",
                    format!(
                        "entropy shape {:?} does not align with {} keys",
                        h_shape, n_keys
                    ),
                ));
            }
            tape.mul(scaled, h)
        }
    }
}

/// Fuse the two branches: concatenate scores along the key axis, softmax over
/// the joint 2n keys, and mix the stacked values.
pub fn mada_fuse(
    tape: &mut Tape,
    scores: TensorRef,
    scores_shift: TensorRef,
    v: TensorRef,
    v_shift: TensorRef,
) -> Result<TensorRef> {
    if tape.shape(scores) != tape.shape(scores_shift) {
        return Err(Error::dimension("mada_fuse", tape.shape(scores), tape.shape(scores_shift)));
    }
    if tape.shape(v) != tape.shape(v_shift) {
        return Err(Error::dimension("mada_fuse", tape.shape(v), tape.shape(v_shift)));
    }
    let rank = tape.shape(scores).len();
    let joint = tape.concat(scores, scores_shift, rank - 1)?;
    let attn = tape.softmax(joint, rank - 1)?;
    let stacked = tape.concat(v, v_shift, rank - 2)?;
    tape.matmul(attn, stacked)
}

/// Pre-attention artifacts shared with the discriminator: the normalized
/// token features of both branches and their key projections in token order.
pub struct MadaPre {
    pub zn: TensorRef,
    pub zn_shift: TensorRef,
    pub k_tok: TensorRef,
    pub k_shift_tok: TensorRef,
}

/// Normalize the input and project both branches' keys per token.
pub fn mada_pre(
    tape: &mut Tape,
    params: &MadaBlockParams,
    b: &Bindings,
    z: &FeatureMap,
    shift: usize,
) -> Result<MadaPre> {
    let zn = tape.layer_norm(z.data, b[params.ln1_gain], b[params.ln1_bias], LAYER_NORM_EPS)?;
    let zn_shift = cyclic_shift(tape, zn, z.grid, shift)?;
    let k_tok = tape.matmul(zn, b[params.proj.wk])?;
    let k_shift_tok = tape.matmul(zn_shift, b[params.proj.wk_shift])?;
    Ok(MadaPre {
        zn,
        zn_shift,
        k_tok,
        k_shift_tok,
    })
}

fn split_heads(tape: &mut Tape, x: TensorRef, heads: usize) -> Result<TensorRef> {
    let shape = tape.shape(x).to_vec(); // (bw, n, c)
    let (bw, n, c) = (shape[0], shape[1], shape[2]);
    let r = tape.reshape(x, &[bw, n, heads, c / heads])?;
    tape.permute_axes(r, &[0, 2, 1, 3])
}

fn merge_heads(tape: &mut Tape, x: TensorRef) -> Result<TensorRef> {
    let shape = tape.shape(x).to_vec(); // (bw, h, n, dh)
    let (bw, h, n, dh) = (shape[0], shape[1], shape[2], shape[3]);
    let p = tape.permute_axes(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[bw, n, h * dh])
}

/// Window-partition per-token entropies and shape them to broadcast along the
/// key axis of `(bw, heads, n, n)` scores.
fn entropy_for_keys(
    tape: &mut Tape,
    probs: TensorRef,
    grid: (usize, usize),
    window: usize,
    provenance: &str,
) -> Result<TensorRef> {
    let weights = entropy_from_domain_probs(tape, probs, provenance)?;
    let win = window_partition(tape, weights.h, grid, window)?; // (bw, w^2, 1)
    let shape = tape.shape(win).to_vec();
    tape.reshape(win, &[shape[0], 1, 1, shape[1]])
}

/// Attention plus MLP with pre-norm residuals, given the precomputed
/// normalized features. Entropy probabilities must already be split per
/// branch and token-aligned.
#[allow(clippy::too_many_arguments)]
pub fn mada_block_with_pre(
    tape: &mut Tape,
    params: &MadaBlockParams,
    b: &Bindings,
    z: &FeatureMap,
    pre: &MadaPre,
    heads: usize,
    window: usize,
    entropy: EntropySource,
) -> Result<FeatureMap> {
    let grid = z.grid;
    let shape = tape.shape(z.data).to_vec();
    let (batch, _n, c) = (shape[0], shape[1], shape[2]);
    if c % heads != 0 {
        return Err(Error::contract(
            "mada_block",
            format!("channels {} not divisible by heads {}", c, heads),
        ));
    }

    let q_tok = tape.matmul(pre.zn, b[params.proj.wq])?;
    let v_tok = tape.matmul(pre.zn, b[params.proj.wv])?;
    let v_shift_tok = tape.matmul(pre.zn_shift, b[params.proj.wv_shift])?;

    let q_win = window_partition(tape, q_tok, grid, window)?;
    let k_win = window_partition(tape, pre.k_tok, grid, window)?;
    let v_win = window_partition(tape, v_tok, grid, window)?;
    let ks_win = window_partition(tape, pre.k_shift_tok, grid, window)?;
    let vs_win = window_partition(tape, v_shift_tok, grid, window)?;

    let q = split_heads(tape, q_win, heads)?;
    let k = split_heads(tape, k_win, heads)?;
    let v = split_heads(tape, v_win, heads)?;
    let ks = split_heads(tape, ks_win, heads)?;
    let vs = split_heads(tape, vs_win, heads)?;

    let (h_win, h_shift) = match entropy {
        EntropySource::Ones => (None, None),
        // resolved by mada_block, where the shift amount is known
        EntropySource::SharedProbs(_) => {
            return Err(Error::contract(
                "mada_block",
                "SharedProbs must be resolved to BranchProbs before attention",
            ));
        }
        EntropySource::BranchProbs { window: pw, shifted: ps } => (
            Some(entropy_for_keys(tape, pw, grid, window, "gdd:window")?),
            Some(entropy_for_keys(tape, ps, grid, window, "gdd:shifted")?),
        ),
    };

    let scores = reweight_scores(tape, q, k, h_win)?;
    let scores_shift = reweight_scores(tape, q, ks, h_shift)?;
    let fused = mada_fuse(tape, scores, scores_shift, v, vs)?;

    let merged = merge_heads(tape, fused)?;
    let attn_out = window_reverse(tape, merged, grid, window, batch)?;
    let z_mada = tape.add(attn_out, z.data)?;

    let z2 = tape.layer_norm(z_mada, b[params.ln2_gain], b[params.ln2_bias], LAYER_NORM_EPS)?;
    let hidden = tape.shape(b[params.mlp_b1])[0];
    let b1 = tape.reshape(b[params.mlp_b1], &[1, 1, hidden])?;
    let b2 = tape.reshape(b[params.mlp_b2], &[1, 1, c])?;
    let m = tape.matmul(z2, b[params.mlp_w1])?;
    let m = tape.add(m, b1)?;
    let m = tape.relu(m);
    let m = tape.matmul(m, b[params.mlp_w2])?;
    let m = tape.add(m, b2)?;
    let out = tape.add(z_mada, m)?;

    FeatureMap::new(tape, out, grid, z.stream)
}

/// Full adaptive double attention block on a feature map.
#[allow(clippy::too_many_arguments)]
pub fn mada_block(
    tape: &mut Tape,
    params: &MadaBlockParams,
    b: &Bindings,
    z: &FeatureMap,
    heads: usize,
    window: usize,
    shift: usize,
    entropy: EntropySource,
) -> Result<FeatureMap> {
    let pre = mada_pre(tape, params, b, z, shift)?;
    // resolve SharedProbs here, where the shift is known
    let entropy = match entropy {
        EntropySource::SharedProbs(p) => {
            let shifted = cyclic_shift(tape, p, z.grid, shift)?;
            EntropySource::BranchProbs { window: p, shifted }
        }
        other => other,
    };
    mada_block_with_pre(tape, params, b, z, &pre, heads, window, entropy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Stream;
    use crate::rng::stream;
    use std::f64::consts::LN_2;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn entropy_examples_and_bounds() {
        let mut tape = Tape::new();
        let p = tape.leaf(vec![0.5, 1.0, 0.9], &[3], false).unwrap();
        let w = entropy_from_domain_probs(&mut tape, p, "test").unwrap();
        let v = tape.value(w.h);
        assert!((v[0] - LN_2).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - 0.3251).abs() < 1e-4);
        assert!(v.iter().all(|&h| (0.0..=LN_2 + 1e-15).contains(&h)));

        // maximal at p = 0.5; tiny offsets never exceed it
        let q = tape
            .leaf(vec![0.5 - 1e-9, 0.5 + 1e-9, 0.5 - 1e-6, 0.5 + 1e-6], &[4], false)
            .unwrap();
        let hq = entropy_from_domain_probs(&mut tape, q, "test").unwrap();
        let hv = tape.value(hq.h);
        assert!(hv[0] <= LN_2 && hv[1] <= LN_2);
        assert!(hv[2] < LN_2 && hv[3] < LN_2);

        let bad = tape.leaf(vec![-0.1], &[1], false).unwrap();
        assert!(entropy_from_domain_probs(&mut tape, bad, "test").is_err());
    }

    #[test]
    fn reweight_hand_case() {
        // n=2, d=1, q=[1,1], k=[2,4], h=[ln2, 0.3251]
        let mut tape = Tape::new();
        let q = tape.leaf(vec![1.0, 1.0], &[2, 1], false).unwrap();
        let k = tape.leaf(vec![2.0, 4.0], &[2, 1], false).unwrap();
        let h = tape.leaf(vec![LN_2, 0.3251], &[1, 2], false).unwrap();
        let s = reweight_scores(&mut tape, q, k, Some(h)).unwrap();
        let expect = [2.0 * LN_2, 4.0 * 0.3251, 2.0 * LN_2, 4.0 * 0.3251];
        assert!(approx(tape.value(s), &expect, 1e-12));
    }

    #[test]
    fn reweight_identity_and_zero() {
        let mut tape = Tape::new();
        let q = tape.leaf(vec![1.0, 0.5, -0.5, 2.0], &[2, 2], false).unwrap();
        let k = tape.leaf(vec![0.3, 1.0, -1.0, 0.7], &[2, 2], false).unwrap();
        let ones = tape.leaf(vec![1.0, 1.0], &[1, 2], false).unwrap();
        let s_plain = reweight_scores(&mut tape, q, k, None).unwrap();
        let s_ones = reweight_scores(&mut tape, q, k, Some(ones)).unwrap();
        assert_eq!(tape.value(s_plain), tape.value(s_ones));

        let zeros = tape.leaf(vec![0.0, 0.0], &[1, 2], false).unwrap();
        let s_zero = reweight_scores(&mut tape, q, k, Some(zeros)).unwrap();
        assert!(tape.value(s_zero).iter().all(|&v| v == 0.0));
        // zero scores -> uniform attention after softmax
        let sm = tape.softmax(s_zero, 1).unwrap();
        assert!(approx(tape.value(sm), &[0.5, 0.5, 0.5, 0.5], 1e-15));
    }

    #[test]
    fn reweight_misalignment_is_contract_error() {
        let mut tape = Tape::new();
        let q = tape.leaf(vec![1.0, 1.0], &[2, 1], false).unwrap();
        let k = tape.leaf(vec![2.0, 4.0], &[2, 1], false).unwrap();
        let h = tape.leaf(vec![1.0, 1.0, 1.0], &[1, 3], false).unwrap();
        assert!(matches!(
            reweight_scores(&mut tape, q, k, Some(h)),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn fuse_duplicate_branches_match_single_attention() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.2, -1.0, 0.5, 0.9], &[2, 2], false).unwrap();
        let v = tape.leaf(vec![1.0, 2.0, -1.0, 0.5], &[2, 2], false).unwrap();
        let fused = mada_fuse(&mut tape, a, a, v, v).unwrap();
        let sm = tape.softmax(a, 1).unwrap();
        let single = tape.matmul(sm, v).unwrap();
        assert!(approx(tape.value(fused), tape.value(single), 1e-12));
    }

    #[test]
    fn fuse_single_token_is_two_way_mix() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.7], &[1, 1], false).unwrap();
        let a_s = tape.leaf(vec![-0.3], &[1, 1], false).unwrap();
        let v = tape.leaf(vec![2.0], &[1, 1], false).unwrap();
        let v_s = tape.leaf(vec![-4.0], &[1, 1], false).unwrap();
        let fused = mada_fuse(&mut tape, a, a_s, v, v_s).unwrap();
        let w = (0.7f64).exp() / ((0.7f64).exp() + (-0.3f64).exp());
        let expect = w * 2.0 + (1.0 - w) * -4.0;
        assert!((tape.value(fused)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn fuse_uniform_scores_average_all_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.4; 4], &[2, 2], false).unwrap();
        let v = tape.leaf(vec![1.0, 1.0, 3.0, 3.0], &[2, 2], false).unwrap();
        let v_s = tape.leaf(vec![5.0, 5.0, 7.0, 7.0], &[2, 2], false).unwrap();
        let fused = mada_fuse(&mut tape, a, a, v, v_s).unwrap();
        assert!(approx(tape.value(fused), &[4.0, 4.0, 4.0, 4.0], 1e-12));
    }

    #[test]
    fn fuse_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
        let b = tape.leaf(vec![0.0; 2], &[1, 2], false).unwrap();
        let v = tape.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
        assert!(matches!(
            mada_fuse(&mut tape, a, b, v, v),
            Err(Error::Dimension { .. })
        ));
    }

    fn block_setup(c: usize) -> (ParamStore, MadaBlockParams) {
        let mut rng = stream(21, "attn-test", &[]);
        let mut store = ParamStore::new();
        let params = MadaBlockParams::register(&mut store, "blk", c, &mut rng);
        (store, params)
    }

    #[test]
    fn zero_weights_make_block_identity() {
        let (mut store, params) = block_setup(4);
        for id in [
            params.proj.wq,
            params.proj.wk,
            params.proj.wv,
            params.proj.wq_shift,
            params.proj.wk_shift,
            params.proj.wv_shift,
            params.mlp_w1,
            params.mlp_w2,
        ] {
            store.data_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape).unwrap();
        let data: Vec<f64> = (0..2 * 16 * 4).map(|v| (v as f64 * 0.13).cos()).collect();
        let x = tape.leaf(data.clone(), &[2, 16, 4], false).unwrap();
        let f = FeatureMap::new(&tape, x, (4, 4), Stream::Source).unwrap();
        let out = mada_block(&mut tape, &params, &b, &f, 2, 2, 1, EntropySource::Ones).unwrap();
        assert_eq!(tape.value(out.data), data.as_slice());
    }

    #[test]
    fn block_preserves_shape() {
        let (store, params) = block_setup(4);
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape).unwrap();
        let data: Vec<f64> = (0..3 * 16 * 4).map(|v| (v as f64 * 0.29).sin()).collect();
        let x = tape.leaf(data, &[3, 16, 4], false).unwrap();
        let f = FeatureMap::new(&tape, x, (4, 4), Stream::Target).unwrap();
        let out = mada_block(&mut tape, &params, &b, &f, 2, 4, 2, EntropySource::Ones).unwrap();
        assert_eq!(tape.shape(out.data), &[3, 16, 4]);
        assert_eq!(out.stream, Stream::Target);
    }

    /// Straight-line single-head reference without windowing, for the
    /// whole-grid oracle.
    fn reference_block(
        z: &[f64],
        n: usize,
        c: usize,
        store: &ParamStore,
        params: &MadaBlockParams,
    ) -> Vec<f64> {
        let get = |id: ParamId| store.entry(id).data.clone();
        let layer_norm = |x: &[f64], gain: &[f64], bias: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            for t in 0..x.len() / c {
                let row = &x[t * c..(t + 1) * c];
                let mean: f64 = row.iter().sum::<f64>() / c as f64;
                let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..c {
                    out[t * c + j] = (row[j] - mean) * inv * gain[j] + bias[j];
                }
            }
            out
        };
        let project = |x: &[f64], w: &[f64], rows: usize, ci: usize, co: usize| -> Vec<f64> {
            let mut out = vec![0.0; rows * co];
            for i in 0..rows {
                for j in 0..co {
                    let mut s = 0.0;
                    for p in 0..ci {
                        s += x[i * ci + p] * w[p * co + j];
                    }
                    out[i * co + j] = s;
                }
            }
            out
        };

        let zn = layer_norm(z, &get(params.ln1_gain), &get(params.ln1_bias));
        let q = project(&zn, &get(params.proj.wq), n, c, c);
        let k = project(&zn, &get(params.proj.wk), n, c, c);
        let v = project(&zn, &get(params.proj.wv), n, c, c);
        let ks = project(&zn, &get(params.proj.wk_shift), n, c, c);
        let vs = project(&zn, &get(params.proj.wv_shift), n, c, c);

        let scale = 1.0 / (c as f64).sqrt();
        let mut z_mada = vec![0.0; n * c];
        for i in 0..n {
            let mut logits = vec![0.0; 2 * n];
            for j in 0..n {
                let mut s = 0.0;
                let mut s2 = 0.0;
                for p in 0..c {
                    s += q[i * c + p] * k[j * c + p];
                    s2 += q[i * c + p] * ks[j * c + p];
                }
                logits[j] = s * scale;
                logits[n + j] = s2 * scale;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for p in 0..c {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += exps[j] / denom * v[j * c + p];
                    acc += exps[n + j] / denom * vs[j * c + p];
                }
                z_mada[i * c + p] = acc + z[i * c + p];
            }
        }

        let z2 = layer_norm(&z_mada, &get(params.ln2_gain), &get(params.ln2_bias));
        let hidden = 4 * c;
        let b1 = get(params.mlp_b1);
        let b2 = get(params.mlp_b2);
        let mut h1 = project(&z2, &get(params.mlp_w1), n, c, hidden);
        for t in 0..n {
            for j in 0..hidden {
                h1[t * hidden + j] = (h1[t * hidden + j] + b1[j]).max(0.0);
            }
        }
        let mut out = project(&h1, &get(params.mlp_w2), n, hidden, c);
        for t in 0..n {
            for j in 0..c {
                out[t * c + j] += b2[j] + z_mada[t * c + j];
            }
        }
        out
    }

    #[test]
    fn whole_grid_block_matches_brute_force() {
        // h = 1, shift 0, window = whole (2x2) grid, one head
        let (store, params) = block_setup(4);
        let n = 4;
        let c = 4;
        let data: Vec<f64> = (0..n * c).map(|v| ((v * 7 % 11) as f64 - 5.0) * 0.21).collect();
        let expect = reference_block(&data, n, c, &store, &params);

        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape).unwrap();
        let x = tape.leaf(data, &[1, n, c], false).unwrap();
        let f = FeatureMap::new(&tape, x, (2, 2), Stream::Source).unwrap();
        let out = mada_block(&mut tape, &params, &b, &f, 1, 2, 0, EntropySource::Ones).unwrap();
        let got = tape.value(out.data);
        let max_diff = got
            .iter()
            .zip(&expect)
            .map(|(a, e)| (a - e).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-10, "max diff {}", max_diff);
    }

    #[test]
    fn post_fusion_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(vec![0.1, -0.4, 0.9, 1.4, -2.0, 0.3, 0.0, 0.8], &[2, 2, 2], false)
            .unwrap();
        let joint = tape.concat(a, a, 2).unwrap();
        let attn = tape.softmax(joint, 2).unwrap();
        let v = tape.value(attn);
        for row in v.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
