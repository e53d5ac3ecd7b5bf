//! Fixtures shared by the benchmarks.

use mdcdet_core::boxes::{Annotation, BBox};
use mdcdet_core::{Prediction, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4))
}

/// `p` predictions over `classes` object classes plus background, and `g` labels.
pub fn matching_instance(seed: u64, p: usize, g: usize, classes: usize) -> (Vec<Prediction>, Vec<Annotation>) {
    let mut rng = rng(seed);
    let preds = (0..p)
        .map(|_| {
            let raw: Vec<f64> = (0..=classes).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            Prediction { scores: raw.iter().map(|x| x / s).collect(), bbox: random_box(&mut rng) }
        })
        .collect();
    let truth = (0..g).map(|_| Annotation::new(rng.gen_range(0..classes), random_box(&mut rng))).collect();
    (preds, truth)
}
