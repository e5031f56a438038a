//! Simulated data streams: synthetic Gaussian mixtures, optional feature
//! and label noise, and CSV replay.

use std::io::Write;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, StreamselError};
use crate::model::Sample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    None,
    /// Additive Gaussian noise on the features of a random fraction.
    FeatureGaussian { sigma: f64, fraction: f64 },
    /// A random fraction gets its label replaced by a different class.
    LabelFlip { fraction: f64 },
}

#[derive(Debug, Clone)]
pub struct MixtureSpec {
    pub dim: usize,
    /// Per-class mean vectors.
    pub means: Vec<Vec<f64>>,
    /// Per-class isotropic standard deviations.
    pub scales: Vec<f64>,
}

impl MixtureSpec {
    /// Deterministic class means: random directions on the sphere of the
    /// given radius.
    pub fn with_random_means(
        dim: usize,
        classes: usize,
        radius: f64,
        scales: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if scales.len() != classes {
            return Err(StreamselError::Config(format!(
                "{} class scales for {classes} classes",
                scales.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| radius * x / n).collect()
            })
            .collect();
        Ok(MixtureSpec { dim, means, scales })
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }
}

enum SourceKind {
    Mixture(MixtureSpec),
    Replay { samples: Vec<Sample>, cursor: usize },
}

/// Streaming sample generator; one `next_window` call per training round.
pub struct StreamSource {
    kind: SourceKind,
    pub velocity: usize,
    noise: NoiseSpec,
    rng: ChaCha8Rng,
    next_id: usize,
}

impl StreamSource {
    pub fn mixture(spec: MixtureSpec, velocity: usize, noise: NoiseSpec, seed: u64) -> Self {
        StreamSource {
            kind: SourceKind::Mixture(spec),
            velocity,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
        }
    }

    /// Replays a CSV dataset in order, cycling when exhausted.
    pub fn replay(samples: Vec<Sample>, velocity: usize, noise: NoiseSpec, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(StreamselError::Config("replay dataset is empty".into()));
        }
        Ok(StreamSource {
            kind: SourceKind::Replay { samples, cursor: 0 },
            velocity,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
        })
    }

    pub fn classes(&self) -> usize {
        match &self.kind {
            SourceKind::Mixture(spec) => spec.classes(),
            SourceKind::Replay { samples, .. } => {
                samples.iter().map(|s| s.label).max().unwrap_or(0) + 1
            }
        }
    }

    pub fn next_sample(&mut self) -> Sample {
        let mut sample = match &mut self.kind {
            SourceKind::Mixture(spec) => {
                let class = self.rng.random_range(0..spec.classes());
                let features = spec.means[class]
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        m + spec.scales[class] * z
                    })
                    .collect();
                Sample {
                    id: self.next_id,
                    features,
                    label: class,
                }
            }
            SourceKind::Replay { samples, cursor } => {
                let mut s = samples[*cursor].clone();
                *cursor = (*cursor + 1) % samples.len();
                s.id = self.next_id;
                s
            }
        };
        self.next_id += 1;
        self.apply_noise(&mut sample);
        sample
    }

    fn apply_noise(&mut self, sample: &mut Sample) {
        match self.noise {
            NoiseSpec::None => {}
            NoiseSpec::FeatureGaussian { sigma, fraction } => {
                if self.rng.random::<f64>() < fraction {
                    for f in sample.features.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        *f += sigma * z;
                    }
                }
            }
            NoiseSpec::LabelFlip { fraction } => {
                let classes = match &self.kind {
                    SourceKind::Mixture(spec) => spec.classes(),
                    SourceKind::Replay { samples, .. } => {
                        samples.iter().map(|s| s.label).max().unwrap_or(0) + 1
                    }
                };
                if classes > 1 && self.rng.random::<f64>() < fraction {
                    let shift = self.rng.random_range(1..classes);
                    sample.label = (sample.label + shift) % classes;
                }
            }
        }
    }

    pub fn next_window(&mut self) -> Vec<Sample> {
        (0..self.velocity).map(|_| self.next_sample()).collect()
    }
}

/// Header `label,f0,...,f{d-1}`, one sample per row, 0-based labels.
pub fn write_csv(samples: &[Sample], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = samples.first().map(|s| s.features.len()).unwrap_or(0);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..dim).map(|i| format!("f{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for s in samples {
        let row: Vec<String> = std::iter::once(s.label.to_string())
            .chain(s.features.iter().map(|f| format!("{f}")))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| StreamselError::Config("empty csv".into()))?;
    if !header.starts_with("label,") {
        return Err(StreamselError::Config(
            "csv header must start with 'label,'".into(),
        ));
    }
    let dim = header.split(',').count() - 1;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|e| StreamselError::Config(format!("row {i}: bad label: {e}")))?;
        let features: Vec<f64> = fields
            .map(|f| {
                f.parse()
                    .map_err(|e| StreamselError::Config(format!("row {i}: bad feature: {e}")))
            })
            .collect::<Result<_>>()?;
        if features.len() != dim {
            return Err(StreamselError::Config(format!(
                "row {i}: {} features, expected {dim}",
                features.len()
            )));
        }
        samples.push(Sample {
            id: i,
            features,
            label,
        });
    }
    Ok(samples)
}
