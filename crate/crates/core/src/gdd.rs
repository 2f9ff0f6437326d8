//! Graph domain discriminator: cosine-similarity adjacency over source and
//! target nodes, three graph convolutions with a width-halving feature pool
//! after the first, a gradient reversal layer, and per-node domain
//! probabilities.
//!
//! All operations accept an optional leading batch axis, so a batch of
//! independent graphs `(p, m, c)` runs in one call.

use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::tensor::{Tape, TensorRef};
use rand_chacha::ChaCha8Rng;

/// Degree / norm floor guarding against isolated or zero-norm nodes.
const EPS_FLOOR: f64 = 1e-8;

/// Where the gradient reversal layer sits in the discriminator stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrlPosition {
    /// Before the projection and convolutions (default).
    Input,
    /// Between the last convolution and the domain head.
    AfterConvs,
}

#[derive(Debug, Clone, Copy)]
pub struct GddConfig {
    pub grl_lambda: f64,
    pub grl_position: GrlPosition,
}

impl Default for GddConfig {
    fn default() -> Self {
        GddConfig {
            grl_lambda: 1.0,
            grl_position: GrlPosition::Input,
        }
    }
}

/// Learnable pieces of one discriminator instance.
///
/// Dimensions: projection `(c, c)`, conv chain `(c, c) -> pool -> (c/2, c/2)
/// -> (c/2, c/2)`, head `(c/2, 1)`.
#[derive(Debug, Clone)]
pub struct GddParams {
    pub proj: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub head: ParamId,
}

impl GddParams {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(channels % 2 == 0, "channels must be even for the feature pool");
        let half = channels / 2;
        // Glorot rather than the backbone's 0.02 convention: the conv stack
        // is unnormalized, and a flat small init collapses its output scale.
        let init = Init::Glorot;
        GddParams {
            proj: store.add(&format!("{prefix}.proj"), &[channels, channels], init, rng),
            w1: store.add(&format!("{prefix}.w1"), &[channels, channels], init, rng),
            w2: store.add(&format!("{prefix}.w2"), &[half, half], init, rng),
            w3: store.add(&format!("{prefix}.w3"), &[half, half], init, rng),
            head: store.add(&format!("{prefix}.head"), &[half, 1], init, rng),
        }
    }
}

/// Raw cosine-similarity matrix plus its normalization state, so consumers
/// can insist on the right variant.
#[derive(Debug, Clone, Copy)]
pub struct AdjacencyMatrix {
    pub a: TensorRef,
    pub normalized: bool,
}

/// Pairwise cosine similarities of feature rows `(.., m, c) -> (.., m, m)`.
/// Zero-norm rows are floored at 1e-8 in the denominator and yield zero
/// similarity instead of an error.
pub fn cosine_matrix(tape: &mut Tape, features: TensorRef) -> Result<AdjacencyMatrix> {
    let shape = tape.shape(features).to_vec();
    if shape.len() < 2 {
        return Err(Error::contract("cosine_matrix", "need (.., m, c) features"));
    }
    let sq = tape.mul(features, features)?;
    let norm_sq = tape.sum_axis(sq, shape.len() - 1)?; // (.., m)
    let norm = tape.sqrt(norm_sq)?;
    let norm = tape.clamp(norm, EPS_FLOOR, f64::INFINITY);
    let inv = tape.pow_scalar(norm, -1.0);
    let mut col_shape = shape.clone();
    *col_shape.last_mut().unwrap() = 1;
    let inv_col = tape.reshape(inv, &col_shape)?;
    let unit = tape.mul(features, inv_col)?;
    let unit_t = tape.transpose_last2(unit)?;
    let a = tape.matmul(unit, unit_t)?;
    Ok(AdjacencyMatrix { a, normalized: false })
}

/// Cosine adjacency of `nodes` under the learnable projection `proj`.
pub fn build_adjacency(tape: &mut Tape, nodes: TensorRef, proj: TensorRef) -> Result<AdjacencyMatrix> {
    let projected = tape.matmul(nodes, proj)?;
    cosine_matrix(tape, projected)
}

/// Clamp negatives to zero, then symmetrically normalize:
/// `Â = D^{-1/2} A D^{-1/2}` with degrees floored at 1e-8.
pub fn normalize_adjacency(tape: &mut Tape, adj: AdjacencyMatrix) -> Result<AdjacencyMatrix> {
    if adj.normalized {
        return Err(Error::contract("normalize_adjacency", "already normalized"));
    }
    let shape = tape.shape(adj.a).to_vec();
    let rank = shape.len();
    let clamped = tape.relu(adj.a);
    let degree = tape.sum_axis(clamped, rank - 1)?; // (.., m)
    let degree = tape.clamp(degree, EPS_FLOOR, f64::INFINITY);
    let inv_sqrt = tape.pow_scalar(degree, -0.5);
    let mut col = shape.clone();
    *col.last_mut().unwrap() = 1;
    let mut row = shape.clone();
    row[rank - 2] = 1;
    let d_col = tape.reshape(inv_sqrt, &col)?;
    let d_row = tape.reshape(inv_sqrt, &row)?;
    let scaled = tape.mul(clamped, d_col)?;
    let a_hat = tape.mul(scaled, d_row)?;
    Ok(AdjacencyMatrix { a: a_hat, normalized: true })
}

/// One graph convolution: `relu(Â · x · W)`.
pub fn graph_conv(tape: &mut Tape, x: TensorRef, adj: &AdjacencyMatrix, w: TensorRef) -> Result<TensorRef> {
    if !adj.normalized {
        return Err(Error::contract("graph_conv", "adjacency must be normalized"));
    }
    let agg = tape.matmul(adj.a, x)?;
    let mixed = tape.matmul(agg, w)?;
    Ok(tape.relu(mixed))
}

/// Feature-axis max pool with non-overlapping width-2 windows; the node
/// count is preserved.
pub fn pool_halve(tape: &mut Tape, x: TensorRef) -> Result<TensorRef> {
    tape.pool_pairs_max(x)
}

/// Full discriminator: nodes `(.., m, c)` to domain probabilities
/// `(.., m, 1)`.
///
/// `include_grl=false` bypasses the reversal layer; finite-difference
/// verification needs the true forward derivative, and the GRL's sign flip
/// has its own exact test.
pub fn gdd_forward(
    tape: &mut Tape,
    nodes: TensorRef,
    params: &GddParams,
    b: &Bindings,
    cfg: &GddConfig,
    include_grl: bool,
) -> Result<TensorRef> {
    let mut x = nodes;
    if include_grl && cfg.grl_position == GrlPosition::Input {
        x = tape.grl(x, cfg.grl_lambda)?;
    }
    let projected = tape.matmul(x, b[params.proj])?;
    let adj = cosine_matrix(tape, projected)?;
    let adj = normalize_adjacency(tape, adj)?;
    let h1 = graph_conv(tape, projected, &adj, b[params.w1])?;
    let h1 = pool_halve(tape, h1)?;
    let h2 = graph_conv(tape, h1, &adj, b[params.w2])?;
    let h3 = graph_conv(tape, h2, &adj, b[params.w3])?;
    let mut feats = h3;
    if include_grl && cfg.grl_position == GrlPosition::AfterConvs {
        feats = tape.grl(feats, cfg.grl_lambda)?;
    }
    let logits = tape.matmul(feats, b[params.head])?;
    Ok(tape.sigmoid(logits))
}
