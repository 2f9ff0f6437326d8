//! Tiny windowed-attention backbone: patch embedding, window partitioning,
//! cyclic shifting, target-stream feature correction, and the classifier
//! head. The per-block attention itself lives in [`crate::attention`].

use crate::attention::MadaBlockParams;
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorRef};
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 32,
            depth: 4,
            heads: 4,
            window: 4,
            shift: 2,
            num_classes: 3,
        }
    }
}

impl BackboneConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::contract("backbone_config", msg.to_string()))
            }
        };
        check(self.image_size % self.patch_size == 0, "image_size must be divisible by patch_size")?;
        check(self.grid_side() % self.window == 0, "token grid side must be divisible by window")?;
        check(self.shift < self.window, "shift must be smaller than window")?;
        check(self.embed_dim % self.heads == 0, "embed_dim must be divisible by heads")?;
        check(self.embed_dim % 2 == 0, "embed_dim must be even")?;
        check(self.depth >= 1, "depth must be at least 1")?;
        check(self.num_classes >= 2, "need at least two classes")?;
        Ok(())
    }
}

/// Per-stream token features carried between blocks.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub data: TensorRef,
    pub grid: (usize, usize),
    pub stream: Stream,
}

impl FeatureMap {
    pub fn new(tape: &Tape, data: TensorRef, grid: (usize, usize), stream: Stream) -> Result<Self> {
        let shape = tape.shape(data);
        if shape.len() != 3 || shape[1] != grid.0 * grid.1 {
            return Err(Error::contract(
                "feature_map",
                format!("shape {:?} does not match grid {:?}", shape, grid),
            ));
        }
        Ok(FeatureMap { data, grid, stream })
    }
}

// ── token rearrangements ────────────────────────────────────────────────

/// Permutation taking grid-ordered tokens to window-ordered tokens:
/// `perm[window_index] = grid_index`.
pub fn window_perm(grid: (usize, usize), window: usize) -> Vec<usize> {
    let (rows, cols) = grid;
    let wcols = cols / window;
    let mut perm = Vec::with_capacity(rows * cols);
    for wr in 0..rows / window {
        for wc in 0..wcols {
            for lr in 0..window {
                for lc in 0..window {
                    perm.push((wr * window + lr) * cols + wc * window + lc);
                }
            }
        }
    }
    perm
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Toroidal roll of the token grid by `(-shift, -shift)`:
/// `out(i, j) = in((i + shift) % rows, (j + shift) % cols)`.
pub fn shift_perm(grid: (usize, usize), shift: usize) -> Vec<usize> {
    let (rows, cols) = grid;
    let mut perm = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            perm.push(((i + shift) % rows) * cols + (j + shift) % cols);
        }
    }
    perm
}

/// Rearrange `(b, tokens, c)` into `(b * num_windows, window^2, c)`.
pub fn window_partition(tape: &mut Tape, x: TensorRef, grid: (usize, usize), window: usize) -> Result<TensorRef> {
    let (rows, cols) = grid;
    if rows % window != 0 || cols % window != 0 {
        return Err(Error::contract(
            "window_partition",
            format!("grid {:?} not divisible by window {}", grid, window),
        ));
    }
    let shape = tape.shape(x).to_vec();
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    if n != rows * cols {
        return Err(Error::contract(
            "window_partition",
            format!("token count {} does not match grid {:?}", n, grid),
        ));
    }
    let per = window_perm(grid, window);
    let nw = (rows / window) * (cols / window);
    let y = tape.permute_tokens(x, &per)?;
    tape.reshape(y, &[b * nw, window * window, c])
}

/// Inverse of [`window_partition`]; exact bijection.
pub fn window_reverse(
    tape: &mut Tape,
    x: TensorRef,
    grid: (usize, usize),
    window: usize,
    batch: usize,
) -> Result<TensorRef> {
    let (rows, cols) = grid;
    let n = rows * cols;
    let c = tape.shape(x)[2];
    let y = tape.reshape(x, &[batch, n, c])?;
    let inv = invert(&window_perm(grid, window));
    tape.permute_tokens(y, &inv)
}

/// Roll tokens by `(-shift, -shift)` on the torus. `shift = 0` is identity.
pub fn cyclic_shift(tape: &mut Tape, x: TensorRef, grid: (usize, usize), shift: usize) -> Result<TensorRef> {
    if shift == 0 {
        return Ok(x);
    }
    let perm = shift_perm(grid, shift);
    tape.permute_tokens(x, &perm)
}

/// Inverse roll restoring [`cyclic_shift`] exactly.
pub fn inverse_cyclic_shift(tape: &mut Tape, x: TensorRef, grid: (usize, usize), shift: usize) -> Result<TensorRef> {
    if shift == 0 {
        return Ok(x);
    }
    let perm = invert(&shift_perm(grid, shift));
    tape.permute_tokens(x, &perm)
}

// ── parameters ──────────────────────────────────────────────────────────

/// One transformer block: attention plus the target-stream correction MLP.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub mada: MadaBlockParams,
    pub corr_w1: ParamId,
    pub corr_b1: ParamId,
    pub corr_w2: ParamId,
    pub corr_b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub blocks: Vec<BlockParams>,
    /// Normalization between the last block and the classifier, as in the
    /// standard backbone; without it the raw residual stream leaks global
    /// image brightness straight into the pooled logits.
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl BackboneParams {
    pub fn register(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.embed_dim;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let tn = Init::TruncNormal { std: 0.02 };
        let patch_w = store.add("patch.w", &[patch_dim, c], tn, rng);
        let patch_b = store.add("patch.b", &[c], Init::Zeros, rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let mada = MadaBlockParams::register(store, &format!("block{l}"), c, rng);
            blocks.push(BlockParams {
                mada,
                corr_w1: store.add(&format!("block{l}.corr.w1"), &[c, c], tn, rng),
                corr_b1: store.add(&format!("block{l}.corr.b1"), &[c], Init::Zeros, rng),
                corr_w2: store.add(&format!("block{l}.corr.w2"), &[c, c], tn, rng),
                corr_b2: store.add(&format!("block{l}.corr.b2"), &[c], Init::Zeros, rng),
            });
        }
        let final_gain = store.add("final_norm.gain", &[c], Init::Ones, rng);
        let final_bias = store.add("final_norm.bias", &[c], Init::Zeros, rng);
        let head_w = store.add("head.w", &[c, cfg.num_classes], tn, rng);
        let head_b = store.add("head.b", &[cfg.num_classes], Init::Zeros, rng);
        BackboneParams {
            patch_w,
            patch_b,
            blocks,
            final_gain,
            final_bias,
            head_w,
            head_b,
        }
    }
}

// ── forward pieces ──────────────────────────────────────────────────────

/// Flatten non-overlapping patches and project to the embedding width.
pub fn patch_embed(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    params: &BackboneParams,
    b: &Bindings,
    images: &Tensor,
    stream: Stream,
) -> Result<FeatureMap> {
    let shape = &images.shape;
    if shape.len() != 4 || shape[1] != cfg.image_size || shape[2] != cfg.image_size || shape[3] != 3 {
        return Err(Error::dimension(
            "patch_embed",
            shape,
            &[0, cfg.image_size, cfg.image_size, 3],
        ));
    }
    let batch = shape[0];
    let p = cfg.patch_size;
    let side = cfg.grid_side();
    let tokens = side * side;
    let pdim = p * p * 3;
    let hw = cfg.image_size;

    let mut patches = vec![0.0; batch * tokens * pdim];
    for bi in 0..batch {
        for pr in 0..side {
            for pc in 0..side {
                let t = pr * side + pc;
                let dst = &mut patches[(bi * tokens + t) * pdim..(bi * tokens + t + 1) * pdim];
                let mut o = 0;
                for dy in 0..p {
                    let row = pr * p + dy;
                    for dx in 0..p {
                        let col = pc * p + dx;
                        let src = ((bi * hw + row) * hw + col) * 3;
                        dst[o..o + 3].copy_from_slice(&images.data[src..src + 3]);
                        o += 3;
                    }
                }
            }
        }
    }
    let flat = tape.leaf(patches, &[batch * tokens, pdim], false)?;
    let projected = tape.matmul(flat, b[params.patch_w])?;
    let bias = tape.reshape(b[params.patch_b], &[1, cfg.embed_dim])?;
    let with_bias = tape.add(projected, bias)?;
    let out = tape.reshape(with_bias, &[batch, tokens, cfg.embed_dim])?;
    FeatureMap::new(tape, out, (side, side), stream)
}

/// Target-stream residual correction: `x + FC2(relu(FC1(x)))`.
/// Source streams never route here; calling with one is a contract error.
pub fn feature_correction(
    tape: &mut Tape,
    block: &BlockParams,
    b: &Bindings,
    f: &FeatureMap,
) -> Result<FeatureMap> {
    if f.stream != Stream::Target {
        return Err(Error::contract(
            "feature_correction",
            "only target streams are corrected",
        ));
    }
    let c = tape.shape(f.data)[2];
    let b1 = tape.reshape(b[block.corr_b1], &[1, 1, c])?;
    let b2 = tape.reshape(b[block.corr_b2], &[1, 1, c])?;
    let h = tape.matmul(f.data, b[block.corr_w1])?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, b[block.corr_w2])?;
    let h = tape.add(h, b2)?;
    let out = tape.add(f.data, h)?;
    FeatureMap::new(tape, out, f.grid, f.stream)
}

/// The pre-classification normalization on the final block's tokens.
pub fn final_norm(
    tape: &mut Tape,
    params: &BackboneParams,
    b: &Bindings,
    f: &FeatureMap,
) -> Result<FeatureMap> {
    let out = tape.layer_norm(f.data, b[params.final_gain], b[params.final_bias], LAYER_NORM_EPS)?;
    FeatureMap::new(tape, out, f.grid, f.stream)
}

/// Mean-pool tokens, then a linear projection to class logits.
pub fn classifier_head(
    tape: &mut Tape,
    params: &BackboneParams,
    b: &Bindings,
    f: &FeatureMap,
) -> Result<TensorRef> {
    let pooled = tape.mean_axis(f.data, 1)?; // (batch, c)
    let logits = tape.matmul(pooled, b[params.head_w])?;
    let k = tape.shape(b[params.head_b])[0];
    let bias = tape.reshape(b[params.head_b], &[1, k])?;
    tape.add(logits, bias)
}

/// Mean over tokens; the sample-level feature used by discriminator taps and
/// embedding export.
pub fn pool_tokens(tape: &mut Tape, f: TensorRef) -> Result<TensorRef> {
    tape.mean_axis(f, 1)
}
