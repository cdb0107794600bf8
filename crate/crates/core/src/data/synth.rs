//! Seeded desk-scale benchmarks.

use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Two isotropic 2-D Gaussians (unit variance) centred at `(-2, -2)` and `(2, 2)`.
    TwoGaussians,
    /// Two interleaved noisy half circles.
    TwoMoonsLike,
    /// 1x8x8 images of four texture classes: horizontal stripes, vertical
    /// stripes, checkerboard, diagonal stripes.
    GridTextures,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [
        SynthKind::TwoGaussians,
        SynthKind::TwoMoonsLike,
        SynthKind::GridTextures,
    ];
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::TwoGaussians => "two_gaussians",
            SynthKind::TwoMoonsLike => "two_moons_like",
            SynthKind::GridTextures => "grid_textures",
        })
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic dataset `{s}`")))
    }
}

/// Deterministic for a fixed seed. Labels cycle through the classes so every
/// class gets `n / classes` examples (the first few one more).
pub fn synth_generate(kind: SynthKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f32, 1.0).expect("valid normal");
    match kind {
        SynthKind::TwoGaussians => {
            let mut features = Vec::with_capacity(2 * n);
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            for &l in &labels {
                let c = if l == 0 { -2.0 } else { 2.0 };
                features.push(c + unit.sample(&mut rng));
                features.push(c + unit.sample(&mut rng));
            }
            Dataset::new(features, vec![2], labels, 2)
        }
        SynthKind::TwoMoonsLike => {
            let mut features = Vec::with_capacity(2 * n);
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            for &l in &labels {
                let t = rng.gen_range(0.0..PI);
                let (x, y) = if l == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                features.push(x + 0.1 * unit.sample(&mut rng));
                features.push(y + 0.1 * unit.sample(&mut rng));
            }
            Dataset::new(features, vec![2], labels, 2)
        }
        SynthKind::GridTextures => {
            const S: usize = 8;
            let mut features = Vec::with_capacity(S * S * n);
            let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
            for &l in &labels {
                let phase = rng.gen_range(0..2usize);
                let amp = rng.gen_range(0.6f32..1.0);
                for r in 0..S {
                    for c in 0..S {
                        let on = match l {
                            0 => (r + phase) % 2 == 0,
                            1 => (c + phase) % 2 == 0,
                            2 => (r + c + phase) % 2 == 0,
                            _ => (r + c + phase) % 4 < 2,
                        };
                        let v = if on { amp } else { -amp };
                        features.push(v + 0.3 * unit.sample(&mut rng));
                    }
                }
            }
            Dataset::new(features, vec![1, S, S], labels, 4)
        }
    }
}
