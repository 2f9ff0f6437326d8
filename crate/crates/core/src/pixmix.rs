//! Pseudo-labeling of target images with a source-trained model, confidence
//! gating, and CutMix/MixUp of source images with high-confidence target
//! partners. Mixing is applied to the source side only; target images enter
//! solely as mix partners.

use crate::data::{Dataset, CHANNELS};
use crate::error::{Error, Result};
use crate::model::{predict_probs, Model};
use crate::backbone::Stream;
use crate::rng::stream;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

/// Retained high-confidence predictions for the target training set.
#[derive(Debug, Clone, Default)]
pub struct PseudoLabelSet {
    pub indices: Vec<usize>,
    pub labels: Vec<u16>,
    pub confidences: Vec<f64>,
    pub threshold: f64,
}

impl PseudoLabelSet {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Gate per-sample probability rows at `threshold` (boundary inclusive).
pub fn gate_predictions(probs: &[Vec<f64>], threshold: f64) -> PseudoLabelSet {
    let mut set = PseudoLabelSet {
        threshold,
        ..Default::default()
    };
    for (i, row) in probs.iter().enumerate() {
        let label = argmax(row);
        let conf = row[label];
        if conf >= threshold {
            set.indices.push(i);
            set.labels.push(label as u16);
            set.confidences.push(conf);
        }
    }
    set
}

/// Label every target sample with a frozen source-trained model, keeping
/// predictions whose max-softmax confidence reaches `threshold`.
pub fn pseudo_label(model: &Model, targets: &Dataset, threshold: f64) -> Result<PseudoLabelSet> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::contract(
            "pseudo_label",
            format!("threshold {threshold} outside [0, 1]"),
        ));
    }
    let mut probs = Vec::with_capacity(targets.len());
    let chunk = 32;
    let mut start = 0;
    while start < targets.len() {
        let end = (start + chunk).min(targets.len());
        let indices: Vec<usize> = (start..end).collect();
        let images = targets.batch_images(&indices);
        probs.extend(predict_probs(model, &images, Stream::Target)?);
        start = end;
    }
    Ok(gate_predictions(&probs, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixKind {
    Mixup,
    Cutmix,
}

/// Record of one applied mix, for the audit log.
#[derive(Debug, Clone)]
pub struct MixSpec {
    pub kind: MixKind,
    pub lambda: f64,
    pub cut_box: Option<(usize, usize, usize, usize)>,
    pub partner: usize,
}

/// Convex pixel and label blend with an explicit coefficient.
pub fn mixup_with_lambda(
    xs: &[f64],
    ys: &[f64],
    xt: &[f64],
    yt: &[f64],
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let image: Vec<f64> = xs
        .iter()
        .zip(xt)
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let label: Vec<f64> = ys
        .iter()
        .zip(yt)
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    (image, label)
}

/// Side length of the cut box for a drawn coefficient: `sqrt(1 - lambda)`
/// of the image side, rounded.
pub fn cut_side(lambda: f64, image_size: usize) -> usize {
    (((1.0 - lambda).sqrt() * image_size as f64).round() as usize).min(image_size)
}

/// Paste the target box into the source image. Returns the mixed image, the
/// mixed label, and the adjusted coefficient
/// `lambda* = 1 - replaced_pixels / total_pixels`.
pub fn cutmix_with_box(
    xs: &[f64],
    ys: &[f64],
    xt: &[f64],
    yt: &[f64],
    image_size: usize,
    cut_box: (usize, usize, usize, usize),
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let (row, col, h, w) = cut_box;
    if row + h > image_size || col + w > image_size {
        return Err(Error::contract(
            "cutmix",
            format!("box {cut_box:?} exceeds {image_size}x{image_size} image"),
        ));
    }
    let mut image = xs.to_vec();
    for y in row..row + h {
        for x in col..col + w {
            let off = (y * image_size + x) * CHANNELS;
            image[off..off + CHANNELS].copy_from_slice(&xt[off..off + CHANNELS]);
        }
    }
    let replaced = (h * w) as f64 / (image_size * image_size) as f64;
    let lambda_star = 1.0 - replaced;
    let label: Vec<f64> = ys
        .iter()
        .zip(yt)
        .map(|(&a, &b)| lambda_star * a + (1.0 - lambda_star) * b)
        .collect();
    Ok((image, label, lambda_star))
}

/// MixUp with `lambda ~ Beta(alpha, alpha)`.
pub fn mixup(
    xs: &[f64],
    ys: &[f64],
    xt: &[f64],
    yt: &[f64],
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::contract("mixup", format!("alpha {alpha}: {e}")))?;
    let lambda = beta.sample(rng);
    let (image, label) = mixup_with_lambda(xs, ys, xt, yt, lambda);
    Ok((image, label, lambda))
}

/// CutMix with `lambda ~ Beta(alpha, alpha)`; a zero-area box degrades to
/// the identity on `(xs, ys)`.
#[allow(clippy::type_complexity)]
pub fn cutmix(
    xs: &[f64],
    ys: &[f64],
    xt: &[f64],
    yt: &[f64],
    image_size: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>, f64, Option<(usize, usize, usize, usize)>)> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::contract("cutmix", format!("alpha {alpha}: {e}")))?;
    let lambda = beta.sample(rng);
    let side = cut_side(lambda, image_size);
    if side == 0 {
        return Ok((xs.to_vec(), ys.to_vec(), 1.0, None));
    }
    let row = rng.random_range(0..=image_size - side);
    let col = rng.random_range(0..=image_size - side);
    let cut_box = (row, col, side, side);
    let (image, label, lambda_star) = cutmix_with_box(xs, ys, xt, yt, image_size, cut_box)?;
    Ok((image, label, lambda_star, Some(cut_box)))
}

pub fn one_hot(label: u16, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label as usize] = 1.0;
    v
}

/// Per-sample mixing of a source batch against retained target partners.
///
/// Each source sample is mixed with probability `p_mix` using a fair coin
/// between MixUp and CutMix and a uniformly drawn retained partner. Labels
/// become soft distributions. Per-item substreams keyed by
/// `(seed, step, item)` make the result independent of processing order.
#[allow(clippy::too_many_arguments)]
pub fn augment_source_batch(
    images: &mut Tensor,
    labels: &mut [Vec<f64>],
    pseudo: &PseudoLabelSet,
    target_train: &Dataset,
    p_mix: f64,
    alpha: f64,
    seed: u64,
    step: usize,
) -> Result<Vec<MixSpec>> {
    if !(0.0..=1.0).contains(&p_mix) {
        return Err(Error::contract("augment", format!("p_mix {p_mix} outside [0, 1]")));
    }
    let batch = images.shape[0];
    let image_size = images.shape[1];
    let pixels = image_size * image_size * CHANNELS;
    let classes = labels.first().map(|l| l.len()).unwrap_or(0);
    let mut specs = Vec::new();
    if pseudo.is_empty() || p_mix == 0.0 {
        return Ok(specs);
    }
    for item in 0..batch {
        let mut rng = stream(seed, "pixmix", &[step as u64, item as u64]);
        if rng.random_range(0.0..1.0) >= p_mix {
            continue;
        }
        let pick = rng.random_range(0..pseudo.len());
        let partner = pseudo.indices[pick];
        let yt = one_hot(pseudo.labels[pick], classes);
        let xt = target_train.image_f64(partner);
        let xs = images.data[item * pixels..(item + 1) * pixels].to_vec();
        let use_mixup = rng.random_range(0.0..1.0) < 0.5;
        if use_mixup {
            let (image, label, lambda) = mixup(&xs, &labels[item], &xt, &yt, alpha, &mut rng)?;
            images.data[item * pixels..(item + 1) * pixels].copy_from_slice(&image);
            labels[item] = label;
            specs.push(MixSpec {
                kind: MixKind::Mixup,
                lambda,
                cut_box: None,
                partner,
            });
        } else {
            let (image, label, lambda_star, cut_box) =
                cutmix(&xs, &labels[item], &xt, &yt, image_size, alpha, &mut rng)?;
            images.data[item * pixels..(item + 1) * pixels].copy_from_slice(&image);
            labels[item] = label;
            specs.push(MixSpec {
                kind: MixKind::Cutmix,
                lambda: lambda_star,
                cut_box,
                partner,
            });
        }
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, Domain, Split, SyntheticSpec};

    #[test]
    fn gating_examples() {
        let probs = vec![vec![0.95, 0.03, 0.02], vec![0.6, 0.3, 0.1]];
        let set = gate_predictions(&probs, 0.9);
        assert_eq!(set.indices, vec![0]);
        assert_eq!(set.labels, vec![0]);
        assert_eq!(set.confidences, vec![0.95]);

        // boundary inclusive
        let set = gate_predictions(&vec![vec![0.9, 0.1]], 0.9);
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn mixup_hand_cases() {
        let xs = vec![0.0, 0.0];
        let xt = vec![1.0, 1.0];
        let ys = vec![1.0, 0.0, 0.0];
        let yt = vec![0.0, 0.0, 1.0];
        let (img, lab) = mixup_with_lambda(&xs, &ys, &xt, &yt, 1.0);
        assert_eq!(img, xs);
        assert_eq!(lab, ys);
        let (img, _) = mixup_with_lambda(&xs, &ys, &xt, &yt, 0.5);
        assert_eq!(img, vec![0.5, 0.5]);
        let (_, lab) = mixup_with_lambda(&xs, &ys, &xt, &yt, 0.7);
        let expect = [0.7, 0.0, 0.3];
        assert!(lab.iter().zip(&expect).all(|(a, e)| (a - e).abs() < 1e-12));
    }

    #[test]
    fn cutmix_box_arithmetic() {
        // lambda = 0.64 on 32x32: side ratio 0.6 -> 19, replaced 361/1024
        assert_eq!(cut_side(0.64, 32), 19);
        let xs = vec![0.0; 32 * 32 * 3];
        let xt = vec![1.0; 32 * 32 * 3];
        let ys = vec![1.0, 0.0];
        let yt = vec![0.0, 1.0];
        let (img, lab, lambda_star) =
            cutmix_with_box(&xs, &ys, &xt, &yt, 32, (3, 7, 19, 19)).unwrap();
        assert!((lambda_star - (1.0 - 361.0 / 1024.0)).abs() < 1e-15);
        // mask-count oracle: replaced pixel count and coefficient agree exactly
        let ones = img.iter().filter(|&&p| p == 1.0).count() / 3;
        assert_eq!(ones, 361);
        assert_eq!(lambda_star, 1.0 - ones as f64 / 1024.0);
        assert!((lab[0] - lambda_star).abs() < 1e-15);

        // full-image box replaces everything
        let (img, lab, l) = cutmix_with_box(&xs, &ys, &xt, &yt, 32, (0, 0, 32, 32)).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(img, xt);
        assert_eq!(lab, yt);

        // lambda = 1 -> zero-area side
        assert_eq!(cut_side(1.0, 32), 0);
    }

    #[test]
    fn soft_labels_stay_distributions_and_pixels_bounded() {
        let spec = SyntheticSpec {
            per_class_train: 3,
            per_class_eval: 1,
            ..Default::default()
        };
        let tgt = generate_split(&spec, Domain::Target, Split::Train);
        let pseudo = PseudoLabelSet {
            indices: vec![0, 4, 7],
            labels: vec![0, 1, 2],
            confidences: vec![0.99, 0.97, 0.95],
            threshold: 0.9,
        };
        let src = generate_split(&spec, Domain::Source, Split::Train);
        let idx: Vec<usize> = (0..6).collect();
        let mut images = src.batch_images(&idx);
        let mut labels: Vec<Vec<f64>> = idx.iter().map(|&i| one_hot(src.labels[i], 3)).collect();
        let specs =
            augment_source_batch(&mut images, &mut labels, &pseudo, &tgt, 1.0, 1.0, 9, 0).unwrap();
        assert!(!specs.is_empty());
        for l in &labels {
            assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(l.iter().all(|&v| v >= 0.0));
        }
        assert!(images.data.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn empty_pseudo_set_and_zero_pmix_are_identity() {
        let spec = SyntheticSpec {
            per_class_train: 2,
            per_class_eval: 1,
            ..Default::default()
        };
        let src = generate_split(&spec, Domain::Source, Split::Train);
        let tgt = generate_split(&spec, Domain::Target, Split::Train);
        let idx: Vec<usize> = (0..4).collect();
        let mut images = src.batch_images(&idx);
        let before = images.data.clone();
        let mut labels: Vec<Vec<f64>> = idx.iter().map(|&i| one_hot(src.labels[i], 3)).collect();

        let empty = PseudoLabelSet::default();
        let specs =
            augment_source_batch(&mut images, &mut labels, &empty, &tgt, 1.0, 1.0, 9, 0).unwrap();
        assert!(specs.is_empty());
        assert_eq!(images.data, before);

        let full = PseudoLabelSet {
            indices: vec![0],
            labels: vec![0],
            confidences: vec![1.0],
            threshold: 0.5,
        };
        let specs =
            augment_source_batch(&mut images, &mut labels, &full, &tgt, 0.0, 1.0, 9, 0).unwrap();
        assert!(specs.is_empty());
        assert_eq!(images.data, before);
    }

    #[test]
    fn augmentation_is_deterministic() {
        let spec = SyntheticSpec {
            per_class_train: 3,
            per_class_eval: 1,
            ..Default::default()
        };
        let src = generate_split(&spec, Domain::Source, Split::Train);
        let tgt = generate_split(&spec, Domain::Target, Split::Train);
        let pseudo = PseudoLabelSet {
            indices: vec![1, 2, 5],
            labels: vec![0, 0, 1],
            confidences: vec![0.99, 0.98, 0.97],
            threshold: 0.9,
        };
        let idx: Vec<usize> = (0..6).collect();
        let run = || {
            let mut images = src.batch_images(&idx);
            let mut labels: Vec<Vec<f64>> =
                idx.iter().map(|&i| one_hot(src.labels[i], 3)).collect();
            augment_source_batch(&mut images, &mut labels, &pseudo, &tgt, 0.5, 1.0, 77, 3).unwrap();
            (images.data, labels)
        };
        let (i1, l1) = run();
        let (i2, l2) = run();
        assert_eq!(
            i1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            i2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(l1, l2);
    }
}
