//! Deterministic synthetic shapes: a filled circle, square or triangle on a
//! plain background with additive Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::tensor::Tensor;

pub const SHAPE_SIZE: usize = 64;
pub const SHAPE_NOISE: f32 = 0.05;
pub const SHAPE_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ShapeClass {
    Circle = 0,
    Square = 1,
    Triangle = 2,
}

impl ShapeClass {
    pub fn from_index(i: usize) -> Option<Self> {
        [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle].get(i).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    /// `[3, 64, 64]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
}

/// Sample generator keyed by `(seed, index)`.
#[derive(Clone, Copy, Debug)]
pub struct ShapeGenerator {
    pub seed: u64,
    pub noise: f32,
}

impl ShapeGenerator {
    pub fn new(seed: u64) -> Self {
        ShapeGenerator { seed, noise: SHAPE_NOISE }
    }

    pub fn with_noise(self, noise: f32) -> Self {
        ShapeGenerator { noise, ..self }
    }

    pub fn sample(&self, index: u64) -> ShapeSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let label = rng.random_range(0..SHAPE_CLASSES);
        let size = SHAPE_SIZE as f32;
        let r: f32 = rng.random_range(8.0..20.0);
        let cx: f32 = rng.random_range(r..size - r);
        let cy: f32 = rng.random_range(r..size - r);
        let bg: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let mut fg: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        // Keep the shape visible against the background.
        while fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f32>() < 0.6 {
            fg = [rng.random(), rng.random(), rng.random()];
        }
        let half = r * 0.85;
        let (sx, sy) = (r * 0.866_025_4, r * 0.5);
        let tri = [(cx, cy - r), (cx - sx, cy + sy), (cx + sx, cy + sy)];
        let inside = |x: f32, y: f32| -> bool {
            match label {
                0 => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
                1 => (x - cx).abs() <= half && (y - cy).abs() <= half,
                _ => {
                    let edge = |(ax, ay): (f32, f32), (bx, by): (f32, f32)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                    let e = [edge(tri[0], tri[1]), edge(tri[1], tri[2]), edge(tri[2], tri[0])];
                    e.iter().all(|&v| v >= 0.0) || e.iter().all(|&v| v <= 0.0)
                }
            }
        };
        let noise = (self.noise > 0.0).then(|| Normal::new(0.0f32, self.noise).expect("positive sigma"));
        let plane = SHAPE_SIZE * SHAPE_SIZE;
        let mut data = vec![0.0f32; 3 * plane];
        for y in 0..SHAPE_SIZE {
            for x in 0..SHAPE_SIZE {
                let colour = if inside(x as f32 + 0.5, y as f32 + 0.5) { &fg } else { &bg };
                for c in 0..3 {
                    let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                    data[c * plane + y * SHAPE_SIZE + x] = (colour[c] + n).clamp(0.0, 1.0);
                }
            }
        }
        let image = Tensor::new(vec![3, SHAPE_SIZE, SHAPE_SIZE], data).expect("fixed shape");
        ShapeSample { image, label }
    }

    /// The samples at `indices` as an `[n, 3, 64, 64]` batch with labels.
    pub fn batch(&self, indices: impl IntoIterator<Item = u64>) -> (Tensor<f32>, Vec<usize>) {
        let samples: Vec<ShapeSample> = indices.into_iter().map(|i| self.sample(i)).collect();
        let labels = samples.iter().map(|s| s.label).collect();
        let images: Vec<Tensor<f32>> = samples.into_iter().map(|s| s.image).collect();
        (Tensor::stack(&images).expect("equal shapes"), labels)
    }
}

/// The first `n` samples for `seed`.
pub fn gen_shapes(seed: u64, n: usize) -> Vec<ShapeSample> {
    let g = ShapeGenerator::new(seed);
    (0..n as u64).map(|i| g.sample(i)).collect()
}
