//! The assembled model: shared-weight dual-stream backbone, the three
//! discriminator instances, and the cross-feature transform, plus the
//! forward passes used by training and evaluation.
//!
//! Discriminator instances: one token-level instance shared by every
//! attention block (entropy reweighting), one sample-level instance tapping
//! an early block (local alignment), one sample-level instance tapping the
//! final block (global alignment).

use crate::attention::{mada_block, mada_block_with_pre, mada_pre, EntropySource};
use crate::backbone::{
    classifier_head, feature_correction, patch_embed, BackboneConfig, BackboneParams, FeatureMap,
    Stream,
};
use crate::cft::{cft_apply, CftParams};
use crate::error::{Error, Result};
use crate::gdd::{gdd_forward, GddConfig, GddParams};
use crate::params::{Bindings, ParamStore};
use crate::rng::stream as rng_stream;
use crate::tensor::{Tape, Tensor, TensorRef};

#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gdd: GddConfig,
    /// 1-based block index feeding the local discriminator.
    pub local_tap: usize,
    /// 1-based block index feeding the global discriminator.
    pub global_tap: usize,
}

impl ModelConfig {
    pub fn with_backbone(backbone: BackboneConfig) -> Self {
        ModelConfig {
            backbone,
            gdd: GddConfig::default(),
            local_tap: 2.min(backbone.depth),
            global_tap: backbone.depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let depth = self.backbone.depth;
        if self.local_tap == 0 || self.local_tap > depth {
            return Err(Error::contract(
                "model_config",
                format!("local tap {} outside 1..={}", self.local_tap, depth),
            ));
        }
        if self.global_tap == 0 || self.global_tap > depth {
            return Err(Error::contract(
                "model_config",
                format!("global tap {} outside 1..={}", self.global_tap, depth),
            ));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_backbone(BackboneConfig::default())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: BackboneParams,
    pub ada_gdd: GddParams,
    pub local_gdd: GddParams,
    pub global_gdd: GddParams,
    pub cft: CftParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = rng_stream(seed, "init", &[]);
        let mut store = ParamStore::new();
        let c = cfg.backbone.embed_dim;
        let backbone = BackboneParams::register(&mut store, &cfg.backbone, &mut rng);
        let ada_gdd = GddParams::register(&mut store, "gdd.ada", c, &mut rng);
        let local_gdd = GddParams::register(&mut store, "gdd.local", c, &mut rng);
        let global_gdd = GddParams::register(&mut store, "gdd.global", c, &mut rng);
        let cft = CftParams::register(&mut store, "cft", c, &mut rng);
        Ok(Model {
            cfg,
            store,
            backbone,
            ada_gdd,
            local_gdd,
            global_gdd,
            cft,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DualOptions {
    /// Entropy-reweight attention scores from the shared token-level
    /// discriminator.
    pub ada_entropy: bool,
    /// Apply the cross-feature transform after this block (0-based).
    pub cft_block: Option<usize>,
    /// Keep gradient reversal active (training); verification disables it.
    pub include_grl: bool,
}

pub struct DualOutput {
    pub src_blocks: Vec<FeatureMap>,
    pub tgt_blocks: Vec<FeatureMap>,
    pub src_logits: TensorRef,
    pub tgt_logits: TensorRef,
}

/// Run both streams through the shared-weight backbone.
///
/// The target stream passes feature correction before each block. With
/// `ada_entropy`, each block's key features of both streams form
/// per-sample-pair graphs (source tokens then target tokens) whose
/// discriminator probabilities reweight that block's attention. When
/// `cft_block` is set, the target features are replaced by the cross-feature
/// transform output after that block.
pub fn forward_dual(
    tape: &mut Tape,
    model: &Model,
    b: &Bindings,
    src_images: &Tensor,
    tgt_images: &Tensor,
    opts: &DualOptions,
) -> Result<DualOutput> {
    if src_images.shape[0] != tgt_images.shape[0] {
        return Err(Error::contract(
            "forward_dual",
            format!(
                "batch sizes differ: {} vs {}",
                src_images.shape[0], tgt_images.shape[0]
            ),
        ));
    }
    let cfg = &model.cfg.backbone;
    if let Some(idx) = opts.cft_block {
        if idx >= cfg.depth {
            return Err(Error::contract(
                "forward_dual",
                format!("cft block {} outside 0..{}", idx, cfg.depth),
            ));
        }
    }
    let mut src = patch_embed(tape, cfg, &model.backbone, b, src_images, Stream::Source)?;
    let mut tgt = patch_embed(tape, cfg, &model.backbone, b, tgt_images, Stream::Target)?;
    let n = cfg.tokens();

    let mut src_blocks = Vec::with_capacity(cfg.depth);
    let mut tgt_blocks = Vec::with_capacity(cfg.depth);
    for (l, block) in model.backbone.blocks.iter().enumerate() {
        tgt = feature_correction(tape, block, b, &tgt)?;
        if opts.ada_entropy {
            let pre_s = mada_pre(tape, &block.mada, b, &src, cfg.shift)?;
            let pre_t = mada_pre(tape, &block.mada, b, &tgt, cfg.shift)?;
            // per-sample-pair graphs over the window-branch keys
            let nodes = tape.concat(pre_s.k_tok, pre_t.k_tok, 1)?;
            let probs = gdd_forward(tape, nodes, &model.ada_gdd, b, &model.cfg.gdd, opts.include_grl)?;
            let p_src = tape.narrow(probs, 1, 0, n)?;
            let p_tgt = tape.narrow(probs, 1, n, n)?;
            // and over the shifted-branch keys
            let nodes_s = tape.concat(pre_s.k_shift_tok, pre_t.k_shift_tok, 1)?;
            let probs_s = gdd_forward(tape, nodes_s, &model.ada_gdd, b, &model.cfg.gdd, opts.include_grl)?;
            let ps_src = tape.narrow(probs_s, 1, 0, n)?;
            let ps_tgt = tape.narrow(probs_s, 1, n, n)?;
            src = mada_block_with_pre(
                tape,
                &block.mada,
                b,
                &src,
                &pre_s,
                cfg.heads,
                cfg.window,
                EntropySource::BranchProbs { window: p_src, shifted: ps_src },
            )?;
            tgt = mada_block_with_pre(
                tape,
                &block.mada,
                b,
                &tgt,
                &pre_t,
                cfg.heads,
                cfg.window,
                EntropySource::BranchProbs { window: p_tgt, shifted: ps_tgt },
            )?;
        } else {
            src = mada_block(tape, &block.mada, b, &src, cfg.heads, cfg.window, cfg.shift, EntropySource::Ones)?;
            tgt = mada_block(tape, &block.mada, b, &tgt, cfg.heads, cfg.window, cfg.shift, EntropySource::Ones)?;
        }
        if opts.cft_block == Some(l) {
            let out = cft_apply(tape, src.data, tgt.data, &model.cft, b)?;
            tgt = FeatureMap::new(tape, out, tgt.grid, Stream::Target)?;
        }
        src_blocks.push(src);
        tgt_blocks.push(tgt);
    }
    let src_normed = crate::backbone::final_norm(tape, &model.backbone, b, &src)?;
    let tgt_normed = crate::backbone::final_norm(tape, &model.backbone, b, &tgt)?;
    let src_logits = classifier_head(tape, &model.backbone, b, &src_normed)?;
    let tgt_logits = classifier_head(tape, &model.backbone, b, &tgt_normed)?;
    Ok(DualOutput {
        src_blocks,
        tgt_blocks,
        src_logits,
        tgt_logits,
    })
}

/// Single-stream forward used by evaluation, pseudo-labeling, and the
/// source-only configuration: entropy identity, no cross transform. Target
/// streams still pass feature correction.
pub fn forward_single(
    tape: &mut Tape,
    model: &Model,
    b: &Bindings,
    images: &Tensor,
    stream: Stream,
) -> Result<(Vec<FeatureMap>, TensorRef)> {
    let cfg = &model.cfg.backbone;
    let mut f = patch_embed(tape, cfg, &model.backbone, b, images, stream)?;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for block in &model.backbone.blocks {
        if stream == Stream::Target {
            f = feature_correction(tape, block, b, &f)?;
        }
        f = mada_block(tape, &block.mada, b, &f, cfg.heads, cfg.window, cfg.shift, EntropySource::Ones)?;
        blocks.push(f);
    }
    let normed = crate::backbone::final_norm(tape, &model.backbone, b, &f)?;
    let logits = classifier_head(tape, &model.backbone, b, &normed)?;
    Ok((blocks, logits))
}

/// Frozen forward returning per-sample softmax probabilities.
pub fn predict_probs(model: &Model, images: &Tensor, stream: Stream) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let b = model.store.bind_frozen(&mut tape)?;
    let (_, logits) = forward_single(&mut tape, model, &b, images, stream)?;
    let probs = tape.softmax(logits, 1)?;
    let k = model.cfg.backbone.num_classes;
    Ok(tape.value(probs).chunks(k).map(|c| c.to_vec()).collect())
}

/// Frozen forward returning final-block mean-pooled embeddings.
pub fn pooled_embeddings(model: &Model, images: &Tensor, stream: Stream) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let b = model.store.bind_frozen(&mut tape)?;
    let (blocks, _) = forward_single(&mut tape, model, &b, images, stream)?;
    let last = blocks.last().expect("depth >= 1");
    let pooled = crate::backbone::pool_tokens(&mut tape, last.data)?;
    let c = model.cfg.backbone.embed_dim;
    Ok(tape.value(pooled).chunks(c).map(|r| r.to_vec()).collect())
}
