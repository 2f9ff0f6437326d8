//! Cross feature transform: bidirectional cross-attention between the source
//! and target token sets, a sigmoid-gated convex mix of the two directions,
//! and a distance-scaled residual injected into the target stream after one
//! randomly chosen block per iteration.

use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::tensor::{Tape, TensorRef};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CftParams {
    pub f_proj: ParamId,
    pub g_proj: ParamId,
    pub gamma: ParamId,
}

impl CftParams {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let tn = Init::TruncNormal { std: 0.02 };
        CftParams {
            f_proj: store.add(&format!("{prefix}.f_proj"), &[channels, channels], tn, rng),
            g_proj: store.add(&format!("{prefix}.g_proj"), &[channels, channels], tn, rng),
            gamma: store.add(&format!("{prefix}.gamma"), &[1], Init::Zeros, rng),
        }
    }
}

/// Token-aligned attended features in both directions.
///
/// `f_s2t = softmax(g(xt) f(xs)^T) xs` lets target queries pull source
/// content; `f_t2s = softmax(f(xs) g(xt)^T) xt` the reverse. Inputs are
/// `(.., n, c)` with equal token counts.
pub fn cross_attention_features(
    tape: &mut Tape,
    xs: TensorRef,
    xt: TensorRef,
    params: &CftParams,
    b: &Bindings,
) -> Result<(TensorRef, TensorRef)> {
    let s_shape = tape.shape(xs).to_vec();
    let t_shape = tape.shape(xt).to_vec();
    if s_shape != t_shape {
        return Err(Error::contract(
            "cross_attention_features",
            format!("token sets must align: {:?} vs {:?}", s_shape, t_shape),
        ));
    }
    let rank = s_shape.len();
    let fs = tape.matmul(xs, b[params.f_proj])?;
    let gt = tape.matmul(xt, b[params.g_proj])?;
    let fs_t = tape.transpose_last2(fs)?;
    let gt_t = tape.transpose_last2(gt)?;

    let m_s2t = tape.matmul(gt, fs_t)?;
    let m_s2t = tape.softmax(m_s2t, rank - 1)?;
    let f_s2t = tape.matmul(m_s2t, xs)?;

    let m_t2s = tape.matmul(fs, gt_t)?;
    let m_t2s = tape.softmax(m_t2s, rank - 1)?;
    let f_t2s = tape.matmul(m_t2s, xt)?;

    Ok((f_s2t, f_t2s))
}

/// Convex mix `(1 - sigmoid(gamma)) * f_s2t + sigmoid(gamma) * f_t2s`.
pub fn gated_combine(
    tape: &mut Tape,
    f_s2t: TensorRef,
    f_t2s: TensorRef,
    gamma: TensorRef,
) -> Result<TensorRef> {
    if tape.shape(f_s2t) != tape.shape(f_t2s) {
        return Err(Error::dimension("gated_combine", tape.shape(f_s2t), tape.shape(f_t2s)));
    }
    let rank = tape.shape(f_s2t).len();
    let gate = tape.sigmoid(gamma); // (1,)
    let gate = tape.reshape(gate, &vec![1; rank])?;
    let one_minus = tape.neg(gate);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let a = tape.mul(one_minus, f_s2t)?;
    let c = tape.mul(gate, f_t2s)?;
    tape.add(a, c)
}

/// Distance-scaled residual output replacing the target features:
/// `out[i] = gating[i] * (||f_s2t[i] - f_t2s[i]||^2 / c) + xt[i]`.
pub fn cft_output(
    tape: &mut Tape,
    gating: TensorRef,
    f_s2t: TensorRef,
    f_t2s: TensorRef,
    xt: TensorRef,
) -> Result<TensorRef> {
    let shape = tape.shape(gating).to_vec();
    let rank = shape.len();
    let c = *shape.last().unwrap();
    let diff = tape.sub(f_s2t, f_t2s)?;
    let sq = tape.mul(diff, diff)?;
    let dist = tape.sum_axis(sq, rank - 1)?; // (.., n)
    let dist = tape.scale(dist, 1.0 / c as f64);
    let mut dist_shape = shape.clone();
    *dist_shape.last_mut().unwrap() = 1;
    let dist = tape.reshape(dist, &dist_shape)?;
    let scaled = tape.mul(gating, dist)?;
    tape.add(scaled, xt)
}

/// Full transform of the target stream given both streams' block outputs.
pub fn cft_apply(
    tape: &mut Tape,
    xs: TensorRef,
    xt: TensorRef,
    params: &CftParams,
    b: &Bindings,
) -> Result<TensorRef> {
    let (f_s2t, f_t2s) = cross_attention_features(tape, xs, xt, params, b)?;
    let gating = gated_combine(tape, f_s2t, f_t2s, b[params.gamma])?;
    cft_output(tape, gating, f_s2t, f_t2s, xt)
}

/// Uniform block index for this iteration's transform placement.
pub fn select_cft_block(depth: usize, rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(0..depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn setup(c: usize) -> (ParamStore, CftParams) {
        let mut rng = stream(31, "cft-test", &[]);
        let mut store = ParamStore::new();
        let params = CftParams::register(&mut store, "cft", c, &mut rng);
        (store, params)
    }

    #[test]
    fn single_token_maps_are_identity() {
        let (store, params) = setup(3);
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape).unwrap();
        let xs = tape.leaf(vec![1.0, -2.0, 0.5], &[1, 3], false).unwrap();
        let xt = tape.leaf(vec![0.3, 0.9, -1.1], &[1, 3], false).unwrap();
        let (f_s2t, f_t2s) = cross_attention_features(&mut tape, xs, xt, &params, &b).unwrap();
        assert!(approx(tape.value(f_s2t), tape.value(xs), 1e-15));
        assert!(approx(tape.value(f_t2s), tape.value(xt), 1e-15));
    }

    #[test]
    fn identical_streams_and_projections_give_equal_features() {
        let (mut store, params) = setup(3);
        let f_data = store.entry(params.f_proj).data.clone();
        store.data_mut(params.g_proj).copy_from_slice(&f_data);
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape).unwrap();
        let data = vec![0.4, -0.2, 1.0, 0.8, 0.1, -0.7];
        let xs = tape.leaf(data.clone(), &[2, 3], false).unwrap();
        let xt = tape.leaf(data, &[2, 3], false).unwrap();
        let (f_s2t, f_t2s) = cross_attention_features(&mut tape, xs, xt, &params, &b).unwrap();
        assert!(approx(tape.value(f_s2t), tape.value(f_t2s), 1e-12));
    }

    #[test]
    fn two_token_orthogonal_concentration() {
        // identity projections, orthogonal tokens: each target token attends
        // to sources with weights softmax([s, 0]) where s is the dot product
        let (mut store, params) = setup(2);
        store.data_mut(params.f_proj).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        store.data_mut(params.g_proj).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape).unwrap();
        let s = 3.0;
        let xs = tape.leaf(vec![s, 0.0, 0.0, s], &[2, 2], false).unwrap();
        let xt = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false).unwrap();
        let (f_s2t, _) = cross_attention_features(&mut tape, xs, xt, &params, &b).unwrap();
        let w = s.exp() / (s.exp() + 1.0);
        // target token 0 pulls source token 0 with weight softmax([s, 0])
        let expect = [w * s, (1.0 - w) * s, (1.0 - w) * s, w * s];
        assert!(approx(tape.value(f_s2t), &expect, 1e-12));
    }

    #[test]
    fn gate_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![2.0, 4.0], &[1, 2], false).unwrap();
        let c = tape.leaf(vec![6.0, 8.0], &[1, 2], false).unwrap();

        let g0 = tape.leaf(vec![0.0], &[1], false).unwrap();
        let mix = gated_combine(&mut tape, a, c, g0).unwrap();
        assert!(approx(tape.value(mix), &[4.0, 6.0], 1e-12));

        let gsat = tape.leaf(vec![50.0], &[1], false).unwrap();
        let mix = gated_combine(&mut tape, a, c, gsat).unwrap();
        assert!(approx(tape.value(mix), &[6.0, 8.0], 1e-9));

        let gln3 = tape.leaf(vec![3.0f64.ln()], &[1], false).unwrap();
        let mix = gated_combine(&mut tape, a, c, gln3).unwrap();
        assert!(approx(tape.value(mix), &[0.25 * 2.0 + 0.75 * 6.0, 0.25 * 4.0 + 0.75 * 8.0], 1e-12));
    }

    #[test]
    fn gate_is_convex_for_any_gamma() {
        let mut tape = Tape::new();
        for gamma in [-30.0, -1.0, 0.0, 0.7, 12.0] {
            let g = tape.leaf(vec![gamma], &[1], false).unwrap();
            let s = tape.sigmoid(g);
            let w = tape.value(s)[0];
            assert!((0.0..=1.0).contains(&w));
        }
    }

    #[test]
    fn output_identity_when_directions_agree() {
        let mut tape = Tape::new();
        let f = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false).unwrap();
        let xt = tape.leaf(vec![-0.5, 0.25, 0.75, -1.0], &[2, 2], false).unwrap();
        let gate = tape.leaf(vec![9.9, -3.0, 0.1, 2.2], &[2, 2], false).unwrap();
        let out = cft_output(&mut tape, gate, f, f, xt).unwrap();
        assert!(approx(tape.value(out), tape.value(xt), 1e-12));
    }

    #[test]
    fn output_scalar_hand_case() {
        // c=1: f_s2t=2, f_t2s=0, gate=1, xt=5 -> d=4, out = 1*4 + 5 = 9
        let mut tape = Tape::new();
        let f_s2t = tape.leaf(vec![2.0], &[1, 1], false).unwrap();
        let f_t2s = tape.leaf(vec![0.0], &[1, 1], false).unwrap();
        let gate = tape.leaf(vec![1.0], &[1, 1], false).unwrap();
        let xt = tape.leaf(vec![5.0], &[1, 1], false).unwrap();
        let out = cft_output(&mut tape, gate, f_s2t, f_t2s, xt).unwrap();
        assert_eq!(tape.value(out), &[9.0]);
    }

    #[test]
    fn output_reduces_to_gating_when_unit_distance_zero_target() {
        let mut tape = Tape::new();
        // c=2 with per-channel diff 1 -> d = 2/2 = 1
        let f_s2t = tape.leaf(vec![1.0, 1.0], &[1, 2], false).unwrap();
        let f_t2s = tape.leaf(vec![0.0, 0.0], &[1, 2], false).unwrap();
        let gate = tape.leaf(vec![0.3, -0.6], &[1, 2], false).unwrap();
        let xt = tape.leaf(vec![0.0, 0.0], &[1, 2], false).unwrap();
        let out = cft_output(&mut tape, gate, f_s2t, f_t2s, xt).unwrap();
        assert!(approx(tape.value(out), &[0.3, -0.6], 1e-15));
    }

    #[test]
    fn attention_rows_sum_to_one_in_both_directions() {
        let (store, params) = setup(3);
        let mut rng = stream(33, "cft-rows", &[]);
        use rand::Rng;
        let data_s: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let data_t: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape).unwrap();
        let xs = tape.leaf(data_s, &[4, 3], false).unwrap();
        let xt = tape.leaf(data_t, &[4, 3], false).unwrap();
        let fs = tape.matmul(xs, b[params.f_proj]).unwrap();
        let gt = tape.matmul(xt, b[params.g_proj]).unwrap();
        let fst = tape.transpose_last2(fs).unwrap();
        let gtt = tape.transpose_last2(gt).unwrap();
        let m1 = tape.matmul(gt, fst).unwrap();
        let m1 = tape.softmax(m1, 1).unwrap();
        let m2 = tape.matmul(fs, gtt).unwrap();
        let m2 = tape.softmax(m2, 1).unwrap();
        for m in [m1, m2] {
            for row in tape.value(m).chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn select_block_is_deterministic_and_uniform() {
        let mut rng = stream(7, "cft", &[0]);
        assert_eq!(select_cft_block(1, &mut rng), 0);

        let mut r1 = stream(7, "cft", &[1]);
        let mut r2 = stream(7, "cft", &[1]);
        let seq1: Vec<usize> = (0..50).map(|_| select_cft_block(4, &mut r1)).collect();
        let seq2: Vec<usize> = (0..50).map(|_| select_cft_block(4, &mut r2)).collect();
        assert_eq!(seq1, seq2);

        // 10^4 draws at depth 4: each frequency within 4 sigma of 0.25
        let mut rng = stream(7, "cft", &[2]);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[select_cft_block(4, &mut rng)] += 1;
        }
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - 0.25).abs() <= 4.0 * sigma,
                "frequency {} outside 4 sigma",
                freq
            );
        }
    }

    #[test]
    fn mismatched_token_counts_are_contract_error() {
        let (store, params) = setup(2);
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape).unwrap();
        let xs = tape.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
        let xt = tape.leaf(vec![0.0; 6], &[3, 2], false).unwrap();
        assert!(matches!(
            cross_attention_features(&mut tape, xs, xt, &params, &b),
            Err(Error::Contract { .. })
        ));
    }
}
