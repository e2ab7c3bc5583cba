//! Seeded synthetic shapes: circles, squares and triangles with tight boxes,
//! drawn with anti-aliased edges over Gaussian noise.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assign::{GroundTruth, Instance};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

/// Sub-pixel samples per axis used for edge coverage.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn class_id(self) -> usize {
        self as usize
    }

    /// Whether `(x, y)` lies inside the shape inscribed in `b`.
    fn covers(self, b: &BBox<f64>, x: f64, y: f64) -> bool {
        match self {
            Shape::Square => x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2,
            Shape::Circle => {
                let (cx, cy) = b.center();
                let r = b.width() / 2.0;
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
            Shape::Triangle => {
                // apex at top centre, base along the bottom edge
                if y < b.y1 || y > b.y2 {
                    return false;
                }
                let frac = (y - b.y1) / b.height();
                let half = frac * b.width() / 2.0;
                let cx = (b.x1 + b.x2) / 2.0;
                x >= cx - half && x <= cx + half
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub size_min: f64,
    pub size_max: f64,
    pub noise: f64,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            objects_min: 1,
            objects_max: 3,
            size_min: 10.0,
            size_max: 28.0,
            noise: 0.05,
            seed: 0,
            train_size: 128,
            val_size: 64,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > Shape::ALL.len() {
            return Err(Error::config(format!("num_classes must be 1..=3, got {}", self.num_classes)));
        }
        if self.image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::config("objects_min exceeds objects_max"));
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max <= self.image_size as f64) {
            return Err(Error::config("size range must satisfy 0 < size_min <= size_max <= image_size"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be >= 0"));
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// `(1, size, size)` intensities.
    pub image: Array3<T>,
    pub gts: GroundTruth<T>,
}

/// Paints `shape` inscribed in `bbox` at `intensity`, blending partially
/// covered pixels by their coverage fraction.
pub fn render_shape(image: &mut Array3<f64>, shape: Shape, bbox: &BBox<f64>, intensity: f64) {
    let (_, h, w) = image.dim();
    let x0 = bbox.x1.floor().max(0.0) as usize;
    let y0 = bbox.y1.floor().max(0.0) as usize;
    let x1 = (bbox.x2.ceil() as usize).min(w);
    let y1 = (bbox.y2.ceil() as usize).min(h);
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    if shape.covers(bbox, px, py) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let v = &mut image[[0, y, x]];
                *v = *v * (1.0 - cov) + intensity * cov;
            }
        }
    }
}

fn sample_rng(spec: &SyntheticDatasetSpec, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let split_id: u64 = match split {
        Split::Train => 0,
        Split::Val => 1,
    };
    rng.set_stream((split_id << 32) | index as u64);
    rng
}

/// Deterministic sample `index` of `split`.
pub fn generate_sample<T: Scalar>(spec: &SyntheticDatasetSpec, split: Split, index: usize) -> Result<Sample<T>> {
    spec.validate()?;
    let n = spec.split_size(split);
    if index >= n {
        return Err(Error::contract(format!("index {index} outside split of size {n}")));
    }
    let mut rng = sample_rng(spec, split, index);
    let size = spec.image_size;
    let sf = size as f64;
    let mut image = Array3::<f64>::zeros((1, size, size));
    let count = rng.random_range(spec.objects_min..=spec.objects_max);
    let mut placed: Vec<Instance<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.random_range(0..spec.num_classes);
        let shape = Shape::ALL[class_id];
        // a few attempts to avoid heavy overlap; give up on the object otherwise
        for _ in 0..20 {
            let side = rng.random_range(spec.size_min..=spec.size_max);
            let x1 = rng.random_range(0.0..=(sf - side));
            let y1 = rng.random_range(0.0..=(sf - side));
            let bbox = BBox::new(x1, y1, x1 + side, y1 + side);
            if placed.iter().all(|p| p.bbox.iou(&bbox) < 0.3) {
                let intensity = rng.random_range(0.6..1.0);
                render_shape(&mut image, shape, &bbox, intensity);
                placed.push(Instance { bbox, class_id });
                break;
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        image.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    Ok(Sample {
        image: image.mapv(T::lit),
        gts: GroundTruth::new(
            placed
                .into_iter()
                .map(|i| Instance { bbox: i.bbox.cast(), class_id: i.class_id })
                .collect(),
        ),
    })
}

/// Every sample of a split.
pub fn generate_split<T: Scalar>(spec: &SyntheticDatasetSpec, split: Split) -> Result<Vec<Sample<T>>> {
    (0..spec.split_size(split)).map(|i| generate_sample(spec, split, i)).collect()
}
