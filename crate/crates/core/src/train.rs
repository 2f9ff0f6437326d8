//! Deterministic training loop: SGD with classical momentum and weight
//! decay, a warmup-cosine schedule, dual-stream stepping with the adaptation
//! modules behind independent toggles, and evaluation.
//!
//! Every stochastic draw comes from a stream keyed by `(seed, purpose,
//! step)`, so resuming at step `t` needs no generator state: the checkpoint
//! carries parameters, momentum buffers, the step counter, and the pseudo
//! label set.

use crate::backbone::Stream;
use crate::checkpoint::{self, NamedTensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward_dual, forward_single, DualOptions, Model};
use crate::objective::{adversarial_losses, cls_loss, total_loss, LossReport};
use crate::params::ParamStore;
use crate::pixmix::{augment_source_batch, one_hot, pseudo_label, MixKind, PseudoLabelSet};
use crate::rng::stream;
use crate::tensor::{Tape, Tensor};
use rand::Rng;
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub lambda_local: f64,
    pub lambda_global: f64,
    pub focal_gamma: f64,
    pub toggle_gdd: bool,
    pub toggle_ada_entropy: bool,
    pub toggle_cft: bool,
    pub toggle_pixmix: bool,
    pub p_mix: f64,
    pub mix_alpha: f64,
    /// Steps used to train the throwaway source-only pseudo-labeler.
    pub pseudo_pretrain_steps: usize,
    /// Stop early at this step (schedule still spans `total_steps`), for
    /// checkpoint/resume workflows.
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let total_steps = 2000;
        TrainConfig {
            total_steps,
            warmup_steps: total_steps / 20,
            batch_size: 16,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            seed: 0,
            lambda_local: 0.1,
            lambda_global: 0.01,
            focal_gamma: 2.0,
            toggle_gdd: true,
            toggle_ada_entropy: true,
            toggle_cft: true,
            toggle_pixmix: true,
            p_mix: 0.5,
            mix_alpha: 1.0,
            pseudo_pretrain_steps: 500,
            stop_after: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::contract(
                "train_config",
                format!(
                    "warmup {} must be below total steps {}",
                    self.warmup_steps, self.total_steps
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("train_config", "batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_mix) {
            return Err(Error::contract("train_config", "p_mix must lie in [0, 1]"));
        }
        Ok(())
    }

    fn source_only(&self) -> TrainConfig {
        TrainConfig {
            toggle_gdd: false,
            toggle_ada_entropy: false,
            toggle_cft: false,
            toggle_pixmix: false,
            stop_after: None,
            ..self.clone()
        }
    }
}

/// Linear warmup to `base`, then cosine decay to zero at `total`.
pub fn warmup_cosine_lr(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Momentum buffers parallel to the parameter store, plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub momentum: Vec<Vec<f64>>,
    pub step: usize,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        OptimState {
            momentum: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            step: 0,
        }
    }
}

/// Classical momentum SGD: `g' = g + wd * theta; v = m * v + g';
/// theta -= lr * v`. Parameters without a gradient still see weight decay.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.momentum.len() != store.len() {
        return Err(Error::contract("sgd_step", "gradient/momentum arity mismatch"));
    }
    for (i, grad) in grads.iter().enumerate() {
        let entry_len = store.entries()[i].data.len();
        if let Some(g) = grad {
            if g.len() != entry_len {
                return Err(Error::contract("sgd_step", format!("gradient {i} length mismatch")));
            }
        }
        let v = &mut state.momentum[i];
        let data = store.data_mut(crate::params::index_id(i));
        for j in 0..entry_len {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            let gp = g + weight_decay * data[j];
            v[j] = momentum * v[j] + gp;
            data[j] -= lr * v[j];
        }
    }
    state.step += 1;
    Ok(())
}

/// Paired source and target minibatch.
pub struct DomainBatch {
    pub src_images: Tensor,
    pub src_labels: Vec<Vec<f64>>,
    pub tgt_images: Tensor,
    pub tgt_indices: Vec<usize>,
}

/// Uniform-with-replacement sampling from both training sets, keyed by step.
pub fn sample_batch(src: &Dataset, tgt: &Dataset, batch_size: usize, seed: u64, step: usize) -> DomainBatch {
    let mut rng = stream(seed, "batch", &[step as u64]);
    let src_idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..src.len())).collect();
    let tgt_idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..tgt.len())).collect();
    let src_labels = src_idx
        .iter()
        .map(|&i| one_hot(src.labels[i], src.num_classes))
        .collect();
    DomainBatch {
        src_images: src.batch_images(&src_idx),
        src_labels,
        tgt_images: tgt.batch_images(&tgt_idx),
        tgt_indices: tgt_idx,
    }
}

fn finite_or_err(name: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric("train_step", format!("{name} is {v}")))
    }
}

/// One optimization step over a domain batch. Returns the loss report and
/// appends audit lines (cft placement, mix decisions) to `log`.
pub fn train_step(
    model: &mut Model,
    optim: &mut OptimState,
    cfg: &TrainConfig,
    src_train: &Dataset,
    tgt_train: &Dataset,
    pseudo: Option<&PseudoLabelSet>,
    step: usize,
    log: &mut String,
) -> Result<LossReport> {
    let mut batch = sample_batch(src_train, tgt_train, cfg.batch_size, cfg.seed, step);

    if cfg.toggle_pixmix {
        if let Some(pseudo) = pseudo {
            let specs = augment_source_batch(
                &mut batch.src_images,
                &mut batch.src_labels,
                pseudo,
                tgt_train,
                cfg.p_mix,
                cfg.mix_alpha,
                cfg.seed,
                step,
            )?;
            for s in &specs {
                let kind = match s.kind {
                    MixKind::Mixup => "mixup",
                    MixKind::Cutmix => "cutmix",
                };
                log.push_str(&format!(
                    "step={} mix={} lambda={} partner={}{}\n",
                    step,
                    kind,
                    s.lambda,
                    s.partner,
                    s.cut_box
                        .map(|b| format!(" box={},{},{},{}", b.0, b.1, b.2, b.3))
                        .unwrap_or_default(),
                ));
            }
        }
    }

    let cft_block = if cfg.toggle_cft {
        let mut rng = stream(cfg.seed, "cft", &[step as u64]);
        let idx = crate::cft::select_cft_block(model.cfg.backbone.depth, &mut rng);
        log.push_str(&format!("step={step} cft_block={idx}\n"));
        Some(idx)
    } else {
        None
    };

    let lr = warmup_cosine_lr(step, cfg.base_lr, cfg.warmup_steps, cfg.total_steps);
    let needs_dual = cfg.toggle_gdd || cfg.toggle_ada_entropy || cfg.toggle_cft;

    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape)?;
    let classes = model.cfg.backbone.num_classes;
    let label_data: Vec<f64> = batch.src_labels.iter().flatten().copied().collect();
    let labels = tape.leaf(label_data, &[cfg.batch_size, classes], false)?;

    let (l_cls, l_local, l_global, l_total) = if needs_dual {
        let opts = DualOptions {
            ada_entropy: cfg.toggle_ada_entropy,
            cft_block,
            include_grl: true,
        };
        let out = forward_dual(&mut tape, model, &b, &batch.src_images, &batch.tgt_images, &opts)?;
        let l_cls = cls_loss(&mut tape, out.src_logits, labels)?;
        let (l_local, l_global) = if cfg.toggle_gdd {
            let local_idx = model.cfg.local_tap - 1;
            let global_idx = model.cfg.global_tap - 1;
            let src_local = crate::backbone::pool_tokens(&mut tape, out.src_blocks[local_idx].data)?;
            let tgt_local = crate::backbone::pool_tokens(&mut tape, out.tgt_blocks[local_idx].data)?;
            let src_global = crate::backbone::pool_tokens(&mut tape, out.src_blocks[global_idx].data)?;
            let tgt_global = crate::backbone::pool_tokens(&mut tape, out.tgt_blocks[global_idx].data)?;
            // one graph per tap over the 2b sample nodes, source first
            let local_nodes = tape.concat(src_local, tgt_local, 0)?;
            let global_nodes = tape.concat(src_global, tgt_global, 0)?;
            let local_probs =
                crate::gdd::gdd_forward(&mut tape, local_nodes, &model.local_gdd, &b, &model.cfg.gdd, true)?;
            let global_probs =
                crate::gdd::gdd_forward(&mut tape, global_nodes, &model.global_gdd, &b, &model.cfg.gdd, true)?;
            let ls = tape.narrow(local_probs, 0, 0, cfg.batch_size)?;
            let lt = tape.narrow(local_probs, 0, cfg.batch_size, cfg.batch_size)?;
            let gs = tape.narrow(global_probs, 0, 0, cfg.batch_size)?;
            let gt = tape.narrow(global_probs, 0, cfg.batch_size, cfg.batch_size)?;
            adversarial_losses(&mut tape, ls, lt, gs, gt, cfg.focal_gamma)?
        } else {
            let z1 = tape.leaf(vec![0.0], &[1], false)?;
            let z2 = tape.leaf(vec![0.0], &[1], false)?;
            (z1, z2)
        };
        let l_total = total_loss(&mut tape, l_cls, l_local, l_global, cfg.lambda_local, cfg.lambda_global)?;
        (l_cls, l_local, l_global, l_total)
    } else {
        let (_, logits) = forward_single(&mut tape, model, &b, &batch.src_images, Stream::Source)?;
        let l_cls = cls_loss(&mut tape, logits, labels)?;
        let z1 = tape.leaf(vec![0.0], &[1], false)?;
        let z2 = tape.leaf(vec![0.0], &[1], false)?;
        let l_total = total_loss(&mut tape, l_cls, z1, z2, cfg.lambda_local, cfg.lambda_global)?;
        (l_cls, z1, z2, l_total)
    };

    let report = LossReport {
        step,
        l_cls: finite_or_err("l_cls", tape.value(l_cls)[0])?,
        l_local: finite_or_err("l_local", tape.value(l_local)[0])?,
        l_global: finite_or_err("l_global", tape.value(l_global)[0])?,
        l_total: finite_or_err("l_total", tape.value(l_total)[0])?,
        lambda_local: cfg.lambda_local,
        lambda_global: cfg.lambda_global,
        lr,
    };
    report.validate()?;

    tape.backward(l_total)?;
    let grads: Vec<Option<Vec<f64>>> = b
        .refs()
        .iter()
        .map(|&r| tape.grad(r).map(|g| g.to_vec()))
        .collect();
    sgd_step(&mut model.store, &grads, optim, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(report)
}

// ── evaluation ──────────────────────────────────────────────────────────

pub struct EvalResult {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// Final-block mean-pooled feature per sample.
    pub embeddings: Vec<Vec<f64>>,
    pub predictions: Vec<u16>,
}

/// Top-1 accuracy over a dataset with deterministic chunking; argmax ties
/// break toward the lowest class index.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::contract("evaluate", "empty dataset"));
    }
    let stream_kind = match ds.domain {
        crate::data::Domain::Source => Stream::Source,
        crate::data::Domain::Target => Stream::Target,
    };
    let classes = model.cfg.backbone.num_classes;
    let mut correct = 0usize;
    let mut class_total = vec![0usize; classes];
    let mut class_correct = vec![0usize; classes];
    let mut embeddings = Vec::with_capacity(ds.len());
    let mut predictions = Vec::with_capacity(ds.len());
    let chunk = 32;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let indices: Vec<usize> = (start..end).collect();
        let images = ds.batch_images(&indices);
        let mut tape = Tape::new();
        let b = model.store.bind_frozen(&mut tape)?;
        let (blocks, logits) = forward_single(&mut tape, model, &b, &images, stream_kind)?;
        let pooled = crate::backbone::pool_tokens(&mut tape, blocks.last().unwrap().data)?;
        let c = model.cfg.backbone.embed_dim;
        for row in tape.value(pooled).chunks(c) {
            embeddings.push(row.to_vec());
        }
        for (&i, row) in indices.iter().zip(tape.value(logits).chunks(classes)) {
            let pred = crate::pixmix::argmax(row);
            predictions.push(pred as u16);
            let truth = ds.labels[i] as usize;
            class_total[truth] += 1;
            if pred == truth {
                correct += 1;
                class_correct[truth] += 1;
            }
        }
        start = end;
    }
    let per_class = class_correct
        .iter()
        .zip(&class_total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    Ok(EvalResult {
        accuracy: correct as f64 / ds.len() as f64,
        per_class,
        embeddings,
        predictions,
    })
}

/// One row per sample: id, domain tag, label, then the pooled feature
/// channels.
pub fn export_embeddings(model: &Model, ds: &Dataset, path: &Path) -> Result<()> {
    let result = evaluate(model, ds)?;
    let c = model.cfg.backbone.embed_dim;
    let mut out = String::new();
    out.push_str("id,domain,label");
    for j in 0..c {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for (i, emb) in result.embeddings.iter().enumerate() {
        out.push_str(&format!("{},{},{}", i, ds.domain.tag(), ds.labels[i]));
        for v in emb {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── checkpoint binding ──────────────────────────────────────────────────

const MOMENTUM_PREFIX: &str = "__opt.momentum.";
const STEP_NAME: &str = "__sched.step";
const PIXMIX_INDICES: &str = "__pixmix.indices";
const PIXMIX_LABELS: &str = "__pixmix.labels";
const PIXMIX_CONF: &str = "__pixmix.confidences";
const PIXMIX_THRESHOLD: &str = "__pixmix.threshold";

pub fn save_model_checkpoint(
    path: &Path,
    model: &Model,
    optim: &OptimState,
    pseudo: Option<&PseudoLabelSet>,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.store.len() * 2 + 5);
    for e in model.store.entries() {
        tensors.push(NamedTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: e.data.clone(),
        });
    }
    for (e, m) in model.store.entries().iter().zip(&optim.momentum) {
        tensors.push(NamedTensor {
            name: format!("{MOMENTUM_PREFIX}{}", e.name),
            shape: e.shape.clone(),
            data: m.clone(),
        });
    }
    tensors.push(NamedTensor {
        name: STEP_NAME.into(),
        shape: vec![1],
        data: vec![optim.step as f64],
    });
    if let Some(p) = pseudo {
        tensors.push(NamedTensor {
            name: PIXMIX_INDICES.into(),
            shape: vec![p.len()],
            data: p.indices.iter().map(|&i| i as f64).collect(),
        });
        tensors.push(NamedTensor {
            name: PIXMIX_LABELS.into(),
            shape: vec![p.len()],
            data: p.labels.iter().map(|&l| l as f64).collect(),
        });
        tensors.push(NamedTensor {
            name: PIXMIX_CONF.into(),
            shape: vec![p.len()],
            data: p.confidences.clone(),
        });
        tensors.push(NamedTensor {
            name: PIXMIX_THRESHOLD.into(),
            shape: vec![1],
            data: vec![p.threshold],
        });
    }
    checkpoint::save(path, &tensors)
}

/// Restore parameters, momentum, step counter, and the stored pseudo-label
/// set. Names present in the file but unknown to the model are an error,
/// listed explicitly.
pub fn load_model_checkpoint(
    path: &Path,
    model: &mut Model,
    optim: &mut OptimState,
) -> Result<Option<PseudoLabelSet>> {
    let tensors = checkpoint::load(path)?;
    let mut by_name: std::collections::BTreeMap<String, NamedTensor> =
        tensors.into_iter().map(|t| (t.name.clone(), t)).collect();

    let names: Vec<String> = model.store.entries().iter().map(|e| e.name.clone()).collect();
    let mut missing = Vec::new();
    for name in &names {
        match by_name.remove(name) {
            Some(t) => model.store.restore(name, &t.shape, t.data)?,
            None => missing.push(name.clone()),
        }
    }
    for (i, name) in names.iter().enumerate() {
        let key = format!("{MOMENTUM_PREFIX}{name}");
        match by_name.remove(&key) {
            Some(t) => {
                if t.data.len() != optim.momentum[i].len() {
                    return Err(Error::contract("load_checkpoint", format!("momentum {name} length mismatch")));
                }
                optim.momentum[i] = t.data;
            }
            None => missing.push(key),
        }
    }
    let step = by_name
        .remove(STEP_NAME)
        .ok_or_else(|| Error::contract("load_checkpoint", format!("missing {STEP_NAME}")))?;
    optim.step = step.data[0] as usize;

    let pseudo = match (
        by_name.remove(PIXMIX_INDICES),
        by_name.remove(PIXMIX_LABELS),
        by_name.remove(PIXMIX_CONF),
        by_name.remove(PIXMIX_THRESHOLD),
    ) {
        (Some(i), Some(l), Some(c), Some(t)) => Some(PseudoLabelSet {
            indices: i.data.iter().map(|&v| v as usize).collect(),
            labels: l.data.iter().map(|&v| v as u16).collect(),
            confidences: c.data,
            threshold: t.data[0],
        }),
        (None, None, None, None) => None,
        _ => {
            return Err(Error::contract(
                "load_checkpoint",
                "partial pseudo-label state in checkpoint",
            ))
        }
    };

    if !missing.is_empty() {
        return Err(Error::contract(
            "load_checkpoint",
            format!("checkpoint is missing tensors: {}", missing.join(", ")),
        ));
    }
    if !by_name.is_empty() {
        let unknown: Vec<String> = by_name.keys().cloned().collect();
        return Err(Error::contract(
            "load_checkpoint",
            format!("unknown tensors in checkpoint: {}", unknown.join(", ")),
        ));
    }
    Ok(pseudo)
}

// ── full runs ───────────────────────────────────────────────────────────

pub struct RunData<'a> {
    pub src_train: &'a Dataset,
    pub tgt_train: &'a Dataset,
    pub src_eval: Option<&'a Dataset>,
    pub tgt_eval: Option<&'a Dataset>,
}

pub struct RunSummary {
    pub steps_run: usize,
    pub final_step: usize,
    pub src_eval_accuracy: Option<f64>,
    pub tgt_eval_accuracy: Option<f64>,
    pub loss_rows: Vec<LossReport>,
    pub loss_csv: String,
    pub run_log: String,
    /// The pseudo-label set the run used (resumed or freshly built).
    pub pseudo: Option<PseudoLabelSet>,
}

impl RunSummary {
    pub fn summary_json(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_else(|| "null".into());
        format!(
            "{{\"steps\":{},\"source_accuracy\":{},\"target_accuracy\":{}}}",
            self.final_step,
            fmt(self.src_eval_accuracy),
            fmt(self.tgt_eval_accuracy),
        )
    }
}

/// Train the pseudo-labeler (its own instance, source-only), measure its
/// source validation accuracy, and label the target training set with the
/// accuracy-derived threshold clamped to [0.5, 0.99].
pub fn build_pseudo_labels(
    cfg: &TrainConfig,
    model_cfg: &crate::model::ModelConfig,
    data: &RunData,
    log: &mut String,
) -> Result<PseudoLabelSet> {
    let src_eval = data.src_eval.ok_or_else(|| {
        Error::Usage("pixel mixing needs a source eval split (--data-src-eval) for the confidence threshold".into())
    })?;
    let labeler_seed = stream(cfg.seed, "labeler", &[]).random::<u64>();
    let mut labeler = Model::new(*model_cfg, labeler_seed)?;
    let mut optim = OptimState::new(&labeler.store);
    let mut labeler_cfg = cfg.source_only();
    labeler_cfg.seed = labeler_seed;
    labeler_cfg.total_steps = cfg.pseudo_pretrain_steps.max(2);
    labeler_cfg.warmup_steps = labeler_cfg.total_steps / 20;
    let mut sink = String::new();
    for step in 0..labeler_cfg.total_steps {
        train_step(
            &mut labeler,
            &mut optim,
            &labeler_cfg,
            data.src_train,
            data.tgt_train,
            None,
            step,
            &mut sink,
        )?;
    }
    let acc = evaluate(&labeler, src_eval)?.accuracy;
    let threshold = acc.clamp(0.5, 0.99);
    let pseudo = pseudo_label(&labeler, data.tgt_train, threshold)?;
    log.push_str(&format!(
        "pseudo labeler_accuracy={} threshold={} retained={} of {}\n",
        acc,
        threshold,
        pseudo.len(),
        data.tgt_train.len()
    ));
    Ok(pseudo)
}

/// Run the training loop from `optim.step` to the configured end, returning
/// the loss log and final evaluations. `pseudo` comes from a resumed
/// checkpoint when present.
pub fn train_run(
    model: &mut Model,
    optim: &mut OptimState,
    cfg: &TrainConfig,
    data: &RunData,
    mut pseudo: Option<PseudoLabelSet>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let mut log = String::new();
    if cfg.toggle_pixmix && pseudo.is_none() {
        pseudo = Some(build_pseudo_labels(cfg, &model.cfg, data, &mut log)?);
    }
    let end = cfg.stop_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut csv = String::from(LossReport::csv_header());
    csv.push('\n');
    let mut rows = Vec::new();
    let start = optim.step;
    for step in start..end {
        let report = train_step(
            model,
            optim,
            cfg,
            data.src_train,
            data.tgt_train,
            pseudo.as_ref(),
            step,
            &mut log,
        )?;
        csv.push_str(&report.csv_row());
        csv.push('\n');
        rows.push(report);
    }
    let src_eval_accuracy = match data.src_eval {
        Some(ds) => Some(evaluate(model, ds)?.accuracy),
        None => None,
    };
    let tgt_eval_accuracy = match data.tgt_eval {
        Some(ds) => Some(evaluate(model, ds)?.accuracy),
        None => None,
    };
    Ok(RunSummary {
        steps_run: end.saturating_sub(start),
        final_step: end,
        src_eval_accuracy,
        tgt_eval_accuracy,
        loss_rows: rows,
        loss_csv: csv,
        run_log: log,
        pseudo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{generate_split, Domain, Split, SyntheticSpec};
    use crate::model::ModelConfig;

    #[test]
    fn lr_schedule_boundaries() {
        let base = 0.01;
        assert_eq!(warmup_cosine_lr(0, base, 100, 2000), 0.0);
        assert_eq!(warmup_cosine_lr(100, base, 100, 2000), base);
        assert!((warmup_cosine_lr(2000, base, 100, 2000)).abs() < 1e-18);
        // midpoint of decay: half the base rate
        let mid = 100 + (2000 - 100) / 2;
        assert!((warmup_cosine_lr(mid, base, 100, 2000) - base / 2.0).abs() < 1e-12);
    }

    fn single_param_store(value: f64) -> ParamStore {
        let mut rng = stream(1, "t", &[]);
        let mut store = ParamStore::new();
        store.add("theta", &[1], crate::params::Init::Zeros, &mut rng);
        store.data_mut(crate::params::index_id(0))[0] = value;
        store
    }

    #[test]
    fn sgd_two_step_recursion() {
        let mut store = single_param_store(1.0);
        let mut optim = OptimState::new(&store);
        let g = vec![Some(vec![1.0])];
        sgd_step(&mut store, &g, &mut optim, 0.1, 0.9, 0.0).unwrap();
        assert!((store.entries()[0].data[0] - 0.9).abs() < 1e-15);
        sgd_step(&mut store, &g, &mut optim, 0.1, 0.9, 0.0).unwrap();
        // v = 0.9 * 1 + 1 = 1.9; theta = 0.9 - 0.19 = 0.71
        assert!((store.entries()[0].data[0] - 0.71).abs() < 1e-15);
        assert_eq!(optim.step, 2);
    }

    #[test]
    fn sgd_weight_decay_only() {
        let mut store = single_param_store(1.0);
        let mut optim = OptimState::new(&store);
        let g = vec![Some(vec![0.0])];
        sgd_step(&mut store, &g, &mut optim, 0.01, 0.9, 1e-3).unwrap();
        // v = 0.001, theta = 1 - 0.01 * 0.001 = 0.99999
        assert!((store.entries()[0].data[0] - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_everything_is_identity() {
        let mut store = single_param_store(0.75);
        let mut optim = OptimState::new(&store);
        let g = vec![Some(vec![0.0])];
        sgd_step(&mut store, &g, &mut optim, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(store.entries()[0].data[0], 0.75);
    }

    fn tiny_setup() -> (ModelConfig, TrainConfig, Dataset, Dataset, Dataset, Dataset) {
        let model_cfg = ModelConfig::with_backbone(BackboneConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 4,
            depth: 2,
            heads: 2,
            window: 2,
            shift: 1,
            num_classes: 3,
        });
        let cfg = TrainConfig {
            total_steps: 6,
            warmup_steps: 2,
            batch_size: 4,
            pseudo_pretrain_steps: 4,
            seed: 11,
            ..Default::default()
        };
        let spec = SyntheticSpec {
            per_class_train: 4,
            per_class_eval: 2,
            image_size: 8,
            seed: 3,
            ..Default::default()
        };
        (
            model_cfg,
            cfg,
            generate_split(&spec, Domain::Source, Split::Train),
            generate_split(&spec, Domain::Source, Split::Eval),
            generate_split(&spec, Domain::Target, Split::Train),
            generate_split(&spec, Domain::Target, Split::Eval),
        )
    }

    #[test]
    fn full_toggles_run_is_deterministic() {
        let (model_cfg, cfg, src_tr, src_ev, tgt_tr, tgt_ev) = tiny_setup();
        let run = || {
            let mut model = Model::new(model_cfg, cfg.seed).unwrap();
            let mut optim = OptimState::new(&model.store);
            let data = RunData {
                src_train: &src_tr,
                tgt_train: &tgt_tr,
                src_eval: Some(&src_ev),
                tgt_eval: Some(&tgt_ev),
            };
            let summary = train_run(&mut model, &mut optim, &cfg, &data, None).unwrap();
            (summary.loss_csv, summary.run_log, model)
        };
        let (csv1, log1, m1) = run();
        let (csv2, log2, m2) = run();
        assert_eq!(csv1, csv2);
        assert_eq!(log1, log2);
        for (a, b) in m1.store.entries().iter().zip(m2.store.entries()) {
            assert_eq!(
                a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn toggles_off_matches_zero_lambda_run() {
        let (model_cfg, mut cfg, src_tr, _src_ev, tgt_tr, _tgt_ev) = tiny_setup();
        cfg.toggle_pixmix = false;
        cfg.toggle_cft = false;
        cfg.toggle_ada_entropy = false;

        // run A: gdd off entirely
        let mut cfg_off = cfg.clone();
        cfg_off.toggle_gdd = false;
        let mut model_a = Model::new(model_cfg, cfg.seed).unwrap();
        let mut optim_a = OptimState::new(&model_a.store);
        let data = RunData {
            src_train: &src_tr,
            tgt_train: &tgt_tr,
            src_eval: None,
            tgt_eval: None,
        };
        let sum_a = train_run(&mut model_a, &mut optim_a, &cfg_off, &data, None).unwrap();
        assert!(sum_a.loss_rows.iter().all(|r| r.l_local == 0.0 && r.l_global == 0.0));

        // run B: gdd on with zero lambda weights
        let mut cfg_zero = cfg.clone();
        cfg_zero.toggle_gdd = true;
        cfg_zero.lambda_local = 0.0;
        cfg_zero.lambda_global = 0.0;
        let mut model_b = Model::new(model_cfg, cfg.seed).unwrap();
        let mut optim_b = OptimState::new(&model_b.store);
        let _ = train_run(&mut model_b, &mut optim_b, &cfg_zero, &data, None).unwrap();

        for (a, b) in model_a.store.entries().iter().zip(model_b.store.entries()) {
            assert_eq!(
                a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "parameter {} diverged",
                a.name
            );
        }
    }

    #[test]
    fn checkpoint_resume_reproduces_trajectory() {
        let (model_cfg, cfg, src_tr, src_ev, tgt_tr, tgt_ev) = tiny_setup();
        let data = RunData {
            src_train: &src_tr,
            tgt_train: &tgt_tr,
            src_eval: Some(&src_ev),
            tgt_eval: Some(&tgt_ev),
        };

        // uninterrupted
        let mut model_full = Model::new(model_cfg, cfg.seed).unwrap();
        let mut optim_full = OptimState::new(&model_full.store);
        let full = train_run(&mut model_full, &mut optim_full, &cfg, &data, None).unwrap();

        // stop at 3, checkpoint, resume
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("mid.tadp");
        let mut cfg_half = cfg.clone();
        cfg_half.stop_after = Some(3);
        let mut model_half = Model::new(model_cfg, cfg.seed).unwrap();
        let mut optim_half = OptimState::new(&model_half.store);
        let first = train_run(&mut model_half, &mut optim_half, &cfg_half, &data, None).unwrap();
        let mut log = String::new();
        let pseudo = build_pseudo_labels(&cfg, &model_cfg, &data, &mut log).unwrap();
        save_model_checkpoint(&ckpt, &model_half, &optim_half, Some(&pseudo)).unwrap();

        let mut model_res = Model::new(model_cfg, cfg.seed).unwrap();
        let mut optim_res = OptimState::new(&model_res.store);
        let restored = load_model_checkpoint(&ckpt, &mut model_res, &mut optim_res).unwrap();
        assert_eq!(optim_res.step, 3);
        let second = train_run(&mut model_res, &mut optim_res, &cfg, &data, restored).unwrap();

        let full_rows: Vec<String> = full.loss_rows.iter().map(|r| r.csv_row()).collect();
        let mut stitched: Vec<String> = first.loss_rows.iter().map(|r| r.csv_row()).collect();
        stitched.extend(second.loss_rows.iter().map(|r| r.csv_row()));
        assert_eq!(full_rows, stitched);
        for (a, b) in model_full.store.entries().iter().zip(model_res.store.entries()) {
            assert_eq!(
                a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn zero_head_on_balanced_data_is_one_third() {
        let (model_cfg, _cfg, _src_tr, src_ev, _tgt_tr, _tgt_ev) = tiny_setup();
        let mut model = Model::new(model_cfg, 5).unwrap();
        let head_w = model.backbone.head_w;
        let head_b = model.backbone.head_b;
        model.store.data_mut(head_w).iter_mut().for_each(|v| *v = 0.0);
        model.store.data_mut(head_b).iter_mut().for_each(|v| *v = 0.0);
        let r = evaluate(&model, &src_ev).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        let (model_cfg, ..) = tiny_setup();
        let model = Model::new(model_cfg, 5).unwrap();
        let empty = Dataset {
            domain: Domain::Source,
            image_size: 8,
            num_classes: 3,
            labels: vec![],
            pixels: vec![],
        };
        assert!(matches!(evaluate(&model, &empty), Err(Error::Contract { .. })));
    }

    #[test]
    fn checkpoint_roundtrip_restores_model() {
        let (model_cfg, cfg, ..) = tiny_setup();
        let mut model = Model::new(model_cfg, cfg.seed).unwrap();
        let optim = OptimState::new(&model.store);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tadp");
        save_model_checkpoint(&path, &model, &optim, None).unwrap();

        // perturb, then restore
        let first = crate::params::index_id(0);
        model.store.data_mut(first)[0] += 1.0;
        let mut optim2 = OptimState::new(&model.store);
        let pseudo = load_model_checkpoint(&path, &mut model, &mut optim2).unwrap();
        assert!(pseudo.is_none());
        assert_eq!(optim2.step, 0);

        // a checkpoint with an extra unknown tensor must be rejected by name
        let mut tensors = checkpoint::load(&path).unwrap();
        tensors.push(NamedTensor {
            name: "mystery".into(),
            shape: vec![1],
            data: vec![1.0],
        });
        checkpoint::save(&path, &tensors).unwrap();
        match load_model_checkpoint(&path, &mut model, &mut optim2) {
            Err(Error::Contract { msg, .. }) => assert!(msg.contains("mystery")),
            other => panic!("expected unknown-name error, got {:?}", other.map(|_| ())),
        }
    }
}
