use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{PredictionMap, RegMode};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), scale: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.random_range(-scale..scale))
}

/// Two levels (2×2 at stride 8, 1×1 at stride 16) of random predictions.
pub fn random_preds(rng: &mut ChaCha8Rng, classes: usize, mode: RegMode) -> Vec<PredictionMap<f64>> {
    [(2, 8), (1, 16)]
        .iter()
        .enumerate()
        .map(|(level, &(size, stride))| PredictionMap {
            cls_logits: random_array(rng, (classes, size, size), 2.0),
            reg_output: random_array(rng, (mode.channels(), size, size), 1.5),
            stride,
            level_id: level,
        })
        .collect()
}

pub fn close(analytic: f64, numeric: f64, rel: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + 1e-9
}

/// Central difference of `f` along one array element.
pub fn central_diff(
    x: &mut Array3<f64>,
    idx: (usize, usize, usize),
    h: f64,
    mut f: impl FnMut(&Array3<f64>) -> f64,
) -> f64 {
    let orig = x[idx];
    x[idx] = orig + h;
    let up = f(x);
    x[idx] = orig - h;
    let down = f(x);
    x[idx] = orig;
    (up - down) / (2.0 * h)
}
