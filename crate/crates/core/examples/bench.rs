// probe: sensitivity of a trained model's predictions to a global affine
// pixel shift applied to the SAME source images
use swinadapt::data::read_dataset;
use swinadapt::model::{predict_probs, Model, ModelConfig};
use swinadapt::backbone::Stream;
use swinadapt::train::{load_model_checkpoint, OptimState};
use swinadapt::tensor::Tensor;
use std::path::Path;

fn main() {
    let mut model = Model::new(ModelConfig::default(), 0).unwrap();
    let mut optim = OptimState::new(&model.store);
    load_model_checkpoint(Path::new("/tmp/exp/src6.tadp"), &mut model, &mut optim).unwrap();
    let ds = read_dataset(Path::new("/tmp/bench/j0.0/source_eval.tds")).unwrap();
    let idx: Vec<usize> = (0..30).collect();
    let images = ds.batch_images(&idx);

    for (gain, lift) in [(1.0, 0.0), (0.9, 0.05), (0.78, 0.14), (0.45, 0.35)] {
        let shifted = Tensor::new(
            images.data.iter().map(|&p| (gain * p + lift_min(lift, p)).clamp(0.0, 1.0)).collect(),
            &images.shape,
        ).unwrap();
        fn lift_min(l: f64, _p: f64) -> f64 { l }
        let probs = predict_probs(&model, &shifted, Stream::Source).unwrap();
        let correct = idx.iter().zip(&probs).filter(|(&i, row)| {
            let pred = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            pred == ds.labels[i] as usize
        }).count();
        let mean_conf: f64 = probs.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / probs.len() as f64;
        println!("gain={gain} lift={lift}: correct {correct}/30, mean max-prob {mean_conf:.3}");
    }
}
