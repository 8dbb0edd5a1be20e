use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bbox::BBox;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Side lengths of planted squares. Even sides put the box centre on a pixel
/// corner, so the distances from that anchor to the four edges are integers.
pub const SQUARE_SIDES: [usize; 2] = [2, 4];
pub const NOISE_STD: f64 = 0.1;
pub const OBJECT_LEVEL: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub seed: u64,
    pub samples: Vec<ToySample>,
}

fn overlaps_with_margin(a: &BBox, b: &BBox) -> bool {
    a.x1 <= b.x2 && b.x1 <= a.x2 && a.y1 <= b.y2 && b.y1 <= a.y2
}

/// `n_samples` noisy `C×H×W` images, each with 1–3 non-touching bright squares.
pub fn make_toy_task(seed: u64, n_samples: usize, c: usize, h: usize, w: usize) -> Result<ToyTask> {
    if h < 8 || w < 8 || c == 0 {
        return Err(TensorError::Config(format!(
            "toy task needs H, W >= 8 and C >= 1, got {c}x{h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let n_obj = rng.random_range(1..=3);
        let mut boxes: Vec<BBox> = Vec::with_capacity(n_obj);
        let mut attempts = 0;
        while boxes.len() < n_obj && attempts < 1000 {
            attempts += 1;
            let side = SQUARE_SIDES[rng.random_range(0..SQUARE_SIDES.len())];
            let x = rng.random_range(0..=w - side);
            let y = rng.random_range(0..=h - side);
            let b = BBox::raw(x as f64, y as f64, (x + side) as f64, (y + side) as f64);
            if boxes.iter().all(|o| !overlaps_with_margin(o, &b)) {
                boxes.push(b);
            }
        }
        let mut image = Tensor::zeros(&[c, h, w]);
        {
            let data = image.data_mut();
            for v in data.iter_mut() {
                *v = noise.sample(&mut rng);
            }
            for b in &boxes {
                for ch in 0..c {
                    for yy in b.y1 as usize..b.y2 as usize {
                        for xx in b.x1 as usize..b.x2 as usize {
                            data[(ch * h + yy) * w + xx] += OBJECT_LEVEL;
                        }
                    }
                }
            }
        }
        let labels = vec![0; boxes.len()];
        samples.push(ToySample {
            image,
            boxes,
            labels,
        });
    }
    Ok(ToyTask { seed, samples })
}
