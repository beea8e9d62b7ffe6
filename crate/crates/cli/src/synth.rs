//! Synthetic stained-tissue tiles: dark elliptical nuclei on a pale, noisy
//! background, with exact masks. Small enough to train the toy network on a
//! laptop CPU.

use aenet_core::imaging::{Image, Mask, Sample, BACKGROUND, CELL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: usize,
    pub min_nuclei: usize,
    pub max_nuclei: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Standard deviation of the per-pixel intensity noise (8-bit units).
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_nuclei: 3,
            max_nuclei: 8,
            min_radius: 3.0,
            max_radius: 8.0,
            noise: 12.0,
        }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Sample `index` of the stream identified by `seed`. Each sample has its own
/// generator so any subset can be regenerated independently.
pub fn synth_sample(cfg: &SynthConfig, seed: u64, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = cfg.size;
    let count = rng.random_range(cfg.min_nuclei..=cfg.max_nuclei.max(cfg.min_nuclei));
    let nuclei: Vec<Ellipse> = (0..count)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cy: rng.random_range(0.0..n as f64),
                cx: rng.random_range(0.0..n as f64),
                a: rng.random_range(cfg.min_radius..=cfg.max_radius),
                b: rng.random_range(cfg.min_radius..=cfg.max_radius),
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect();

    let tint =
        |rng: &mut ChaCha8Rng, base: [f64; 3]| base.map(|v| v + rng.random_range(-20.0..20.0));
    let background = tint(&mut rng, [228.0, 196.0, 214.0]);
    let nucleus = tint(&mut rng, [92.0, 54.0, 136.0]);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise level");

    let mut labels = Vec::with_capacity(n * n);
    let mut pixels = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let inside = nuclei
                .iter()
                .any(|e| e.contains(y as f64 + 0.5, x as f64 + 0.5));
            labels.push(if inside { CELL } else { BACKGROUND });
            let base = if inside { nucleus } else { background };
            for v in base {
                pixels.push((v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Sample {
        image: Image::new(n, n, 3, pixels).expect("size matches buffer"),
        mask: Mask::new(n, n, labels).expect("labels are binary"),
    }
}

pub fn synth_dataset(cfg: &SynthConfig, seed: u64, first: u64, count: usize) -> Vec<Sample> {
    (0..count as u64)
        .map(|i| synth_sample(cfg, seed, first + i))
        .collect()
}
