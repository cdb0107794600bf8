//! Datasets, file formats, synthetic benchmarks and checkpoints.

mod checkpoint;
mod idx;
mod synth;
mod table;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, MAGIC, VERSION,
};
pub use idx::{load_idx, write_idx};
pub use synth::{synth_generate, SynthKind};
pub use table::{load_csv, write_csv};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Per-channel affine applied to the features at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Labelled examples stored as one flat feature buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f32>,
    /// Shape of one example, e.g. `[2]` or `[1, 8, 8]`.
    pub feature_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(features: Vec<f32>, feature_shape: Vec<usize>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = feature_shape.iter().product();
        if per == 0 || features.len() != per * labels.len() {
            return Err(Error::Config(format!(
                "{} feature values for {} examples of shape {feature_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite feature in example {}", i / per)));
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::Config(format!(
                "label {} of example {i} outside [0, {classes})",
                labels[i]
            )));
        }
        Ok(Self {
            features,
            feature_shape,
            labels,
            classes,
            split: Split::Train,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn example(&self, i: usize) -> &[f32] {
        let f = self.feature_len();
        &self.features[i * f..(i + 1) * f]
    }

    /// Stacks the given examples into `[B, feature_shape...]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.feature_len());
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.feature_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&shape, data).expect("batch shape matches data"), labels)
    }

    /// A fresh permutation cut into batches; the last batch may be short.
    pub fn shuffled_batches<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.feature_len());
        for &i in indices {
            features.extend_from_slice(self.example(i));
        }
        Self {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }

    /// Splits off the last `test_fraction` of a seeded permutation.
    pub fn split<R: Rng + ?Sized>(&self, test_fraction: f64, rng: &mut R) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let (train, test) = idx.split_at(self.len() - n_test.min(self.len()));
        let mut test = self.subset(test);
        test.split = Split::Test;
        (self.subset(train), test)
    }

    fn channels(&self) -> (usize, usize) {
        let c = self.feature_shape[0];
        (c, self.feature_len() / c)
    }

    /// Per-channel mean and population std over all examples and positions.
    pub fn channel_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let (c, inner) = self.channels();
        let count = (self.len() * inner) as f64;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &v) in self.features.iter().enumerate() {
            let ch = (i / inner) % c;
            mean[ch] += v as f64;
            sq[ch] += (v as f64) * (v as f64);
        }
        for ch in 0..c {
            mean[ch] /= count;
            sq[ch] = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0).sqrt();
        }
        (mean, sq)
    }

    /// Standardizes each channel and records the transform.
    pub fn normalize(&mut self) {
        let (mean, std) = self.channel_moments();
        let norm = Normalization {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: std.iter().map(|&s| if s > 1e-12 { s as f32 } else { 1.0 }).collect(),
        };
        self.apply_normalization(norm);
    }

    /// Applies a transform computed elsewhere, e.g. a training split's.
    pub fn apply_normalization(&mut self, norm: Normalization) {
        let (c, inner) = self.channels();
        for (i, v) in self.features.iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = (*v - norm.mean[ch]) / norm.std[ch];
        }
        self.normalization = Some(norm);
    }
}

/// Where a dataset comes from, written `synth:KIND:N:SEED`, `csv:PATH` or
/// `idx:IMAGES,LABELS`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Synth { kind: SynthKind, n: usize, seed: u64 },
    Csv(String),
    Idx { images: String, labels: String },
}

impl FromStr for DataSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "bad data spec `{s}`; expected synth:KIND:N:SEED, csv:PATH or idx:IMAGES,LABELS"
            ))
        };
        let (scheme, rest) = s.split_once(':').ok_or_else(bad)?;
        match scheme {
            "synth" => {
                let parts: Vec<&str> = rest.split(':').collect();
                let [kind, n, seed] = parts[..] else { return Err(bad()) };
                Ok(DataSpec::Synth {
                    kind: kind.parse()?,
                    n: n.parse().map_err(|_| bad())?,
                    seed: seed.parse().map_err(|_| bad())?,
                })
            }
            "csv" => Ok(DataSpec::Csv(rest.to_string())),
            "idx" => {
                let (images, labels) = rest.split_once(',').ok_or_else(bad)?;
                Ok(DataSpec::Idx {
                    images: images.into(),
                    labels: labels.into(),
                })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSpec::Synth { kind, n, seed } => write!(f, "synth:{kind}:{n}:{seed}"),
            DataSpec::Csv(p) => write!(f, "csv:{p}"),
            DataSpec::Idx { images, labels } => write!(f, "idx:{images},{labels}"),
        }
    }
}

impl DataSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSpec::Synth { kind, n, seed } => synth_generate(*kind, *n, *seed),
            DataSpec::Csv(p) => load_csv(p),
            DataSpec::Idx { images, labels } => load_idx(images, labels),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_labels_and_nan() {
        assert!(Dataset::new(vec![0.0, 1.0], vec![1], vec![0, 2], 2).is_err());
        assert!(Dataset::new(vec![0.0, f32::NAN], vec![1], vec![0, 1], 2).is_err());
        assert!(Dataset::new(vec![0.0], vec![1], vec![0, 1], 2).is_err());
    }

    #[test]
    fn batch_stacks_examples() {
        let d = Dataset::new((0..12).map(|v| v as f32).collect(), vec![3], vec![0, 1, 0, 1], 2).unwrap();
        let (x, y) = d.batch(&[2, 0]);
        assert_eq!(x.shape(), [2, 3]);
        assert_eq!(x.to_vec(), vec![6.0, 7.0, 8.0, 0.0, 1.0, 2.0]);
        assert_eq!(y, vec![0, 0]);
    }

    #[test]
    fn normalization_standardizes_channels() {
        let mut d = synth_generate(SynthKind::GridTextures, 40, 3).unwrap();
        d.normalize();
        let (m, s) = d.channel_moments();
        assert!(m[0].abs() < 1e-5 && (s[0] - 1.0).abs() < 1e-4);
        assert!(d.normalization.is_some());
    }

    #[test]
    fn split_partitions_examples() {
        let d = synth_generate(SynthKind::TwoGaussians, 100, 1).unwrap();
        let (a, b) = d.split(0.2, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((a.len(), b.len()), (80, 20));
        assert_eq!(b.split, Split::Test);
    }

    #[test]
    fn data_spec_round_trip() {
        for s in ["synth:two_gaussians:512:7", "csv:a/b.csv", "idx:img.idx,lbl.idx"] {
            assert_eq!(s.parse::<DataSpec>().unwrap().to_string(), s);
        }
        assert!("synth:two_gaussians:x:7".parse::<DataSpec>().is_err());
        assert!("ftp:x".parse::<DataSpec>().is_err());
    }
}
