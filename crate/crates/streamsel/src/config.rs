//! Flat `key = value` experiment configuration. Unknown keys are errors.

use std::path::{Path, PathBuf};

use crate::error::{Result, StreamselError};
use crate::importance::Strategy;
use crate::model::ModelSpec;
use crate::pipeline::TimingModel;
use crate::stream::NoiseSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Mixture,
    Csv,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub strategies: Vec<Strategy>,
    pub batch_size: usize,
    pub velocity: usize,
    pub buffer_capacity: usize,
    pub rounds: usize,
    pub lr: f64,
    /// Multiplicative factor applied to the learning rate per 100 rounds.
    pub lr_decay: f64,
    pub seeds: Vec<u64>,
    /// One-round-delay co-execution when true; plain sequential otherwise.
    pub pipeline: bool,
    pub timing: TimingModel,
    pub stream: StreamKind,
    pub csv_path: Option<PathBuf>,
    pub mean_radius: f64,
    pub class_scales: Vec<f64>,
    pub noise: NoiseSpec,
    pub stats_decay: f64,
    pub feature_block: usize,
    pub clear_after_round: bool,
    pub holdout: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSpec::Mlp {
                input: 20,
                hidden: 16,
                classes: 4,
            },
            strategies: vec![Strategy::Cis],
            batch_size: 10,
            velocity: 100,
            buffer_capacity: 30,
            rounds: 500,
            lr: 0.2,
            lr_decay: 1.0,
            seeds: vec![42],
            pipeline: false,
            timing: TimingModel::default(),
            stream: StreamKind::Mixture,
            csv_path: None,
            mean_radius: 2.0,
            class_scales: default_scales(4),
            noise: NoiseSpec::None,
            stats_decay: 0.9,
            feature_block: 0,
            clear_after_round: true,
            holdout: 400,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StreamselError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut model_name = "mlp".to_string();
        let mut input_dim = 20usize;
        let mut hidden_dim = 16usize;
        let mut classes = 4usize;
        let mut noise_name = "none".to_string();
        let mut noise_sigma = 1.0;
        let mut noise_fraction = 0.0;
        let mut scales_given = false;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                StreamselError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |e: String| StreamselError::Config(format!("key '{key}': {e}"));
            match key {
                "model" => model_name = value.to_string(),
                "input_dim" => input_dim = parse_num(value).map_err(bad)?,
                "hidden_dim" => hidden_dim = parse_num(value).map_err(bad)?,
                "classes" => classes = parse_num(value).map_err(bad)?,
                "strategy" => {
                    cfg.strategies = value
                        .split(',')
                        .map(|s| Strategy::parse(s.trim()))
                        .collect::<Result<_>>()?;
                }
                "batch_size" => cfg.batch_size = parse_num(value).map_err(bad)?,
                "velocity" | "stream_velocity" => cfg.velocity = parse_num(value).map_err(bad)?,
                "buffer_capacity" => cfg.buffer_capacity = parse_num(value).map_err(bad)?,
                "rounds" => cfg.rounds = parse_num(value).map_err(bad)?,
                "lr" => cfg.lr = parse_num(value).map_err(bad)?,
                "lr_decay" => cfg.lr_decay = parse_num(value).map_err(bad)?,
                "seeds" | "seed" => {
                    cfg.seeds = value
                        .split(',')
                        .map(|s| parse_num(s.trim()).map_err(|e| bad(e)))
                        .collect::<Result<_>>()?;
                }
                "pipeline" => cfg.pipeline = parse_bool(value).map_err(bad)?,
                "t_filter" => cfg.timing.t_filter = parse_num(value).map_err(bad)?,
                "t_grad" => cfg.timing.t_grad = parse_num(value).map_err(bad)?,
                "t_plan" => cfg.timing.t_plan = parse_num(value).map_err(bad)?,
                "t_train" => cfg.timing.t_train = parse_num(value).map_err(bad)?,
                "t_sync" => cfg.timing.t_sync = parse_num(value).map_err(bad)?,
                "stream" => {
                    cfg.stream = match value {
                        "mixture" => StreamKind::Mixture,
                        "csv" => StreamKind::Csv,
                        other => {
                            return Err(bad(format!("unknown stream kind '{other}'")));
                        }
                    }
                }
                "csv_path" => cfg.csv_path = Some(PathBuf::from(value)),
                "mean_radius" => cfg.mean_radius = parse_num(value).map_err(bad)?,
                "class_scales" => {
                    scales_given = true;
                    cfg.class_scales = value
                        .split(',')
                        .map(|s| parse_num(s.trim()).map_err(|e| bad(e)))
                        .collect::<Result<_>>()?;
                }
                "noise" => noise_name = value.to_string(),
                "noise_sigma" => noise_sigma = parse_num(value).map_err(bad)?,
                "noise_fraction" => noise_fraction = parse_num(value).map_err(bad)?,
                "stats_decay" => cfg.stats_decay = parse_num(value).map_err(bad)?,
                "feature_block" => cfg.feature_block = parse_num(value).map_err(bad)?,
                "clear_after_round" => cfg.clear_after_round = parse_bool(value).map_err(bad)?,
                "holdout" => cfg.holdout = parse_num(value).map_err(bad)?,
                other => {
                    return Err(StreamselError::Config(format!("unknown key '{other}'")));
                }
            }
        }

        cfg.model = match model_name.as_str() {
            "linear" => ModelSpec::Linear {
                input: input_dim,
                classes,
            },
            "mlp" => ModelSpec::Mlp {
                input: input_dim,
                hidden: hidden_dim,
                classes,
            },
            other => {
                return Err(StreamselError::Config(format!(
                    "key 'model': unknown model '{other}'"
                )));
            }
        };
        cfg.noise = match noise_name.as_str() {
            "none" => NoiseSpec::None,
            "feature" => NoiseSpec::FeatureGaussian {
                sigma: noise_sigma,
                fraction: noise_fraction,
            },
            "label" => NoiseSpec::LabelFlip {
                fraction: noise_fraction,
            },
            other => {
                return Err(StreamselError::Config(format!(
                    "key 'noise': unknown noise kind '{other}'"
                )));
            }
        };
        if !scales_given {
            cfg.class_scales = default_scales(classes);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(StreamselError::Config("key 'rounds': must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(StreamselError::Config(
                "key 'batch_size': must be >= 1".into(),
            ));
        }
        if self.batch_size > self.velocity {
            return Err(StreamselError::Config(format!(
                "key 'batch_size': {} exceeds velocity {}",
                self.batch_size, self.velocity
            )));
        }
        if self.lr < 0.0 {
            return Err(StreamselError::Config("key 'lr': must be >= 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(StreamselError::Config("key 'seeds': none given".into()));
        }
        if self.strategies.is_empty() {
            return Err(StreamselError::Config("key 'strategy': none given".into()));
        }
        if self.class_scales.len() != self.model.classes() {
            return Err(StreamselError::Config(format!(
                "key 'class_scales': {} values for {} classes",
                self.class_scales.len(),
                self.model.classes()
            )));
        }
        if let crate::stream::NoiseSpec::FeatureGaussian { fraction, .. }
        | crate::stream::NoiseSpec::LabelFlip { fraction } = self.noise
        {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(StreamselError::Config(
                    "key 'noise_fraction': must be in [0, 1]".into(),
                ));
            }
        }
        if self.timing.t_filter < 0.0
            || self.timing.t_grad < 0.0
            || self.timing.t_plan < 0.0
            || self.timing.t_train < 0.0
            || self.timing.t_sync < 0.0
        {
            return Err(StreamselError::Config("timing values must be >= 0".into()));
        }
        if self.stream == StreamKind::Csv {
            match &self.csv_path {
                None => {
                    return Err(StreamselError::Config(
                        "key 'csv_path': required for stream = csv".into(),
                    ));
                }
                Some(p) if !p.exists() => {
                    return Err(StreamselError::Config(format!(
                        "key 'csv_path': {} does not exist",
                        p.display()
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

// Homogeneous spread by default: the coarse filter's score is a per-class
// constant, so heterogeneous spread starves the low-variance classes of
// buffer slots and stalls every strategy. Heterogeneous-diversity studies
// belong in variance-lab instances, not the training stream.
fn default_scales(classes: usize) -> Vec<f64> {
    vec![1.0; classes]
}

fn parse_num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| format!("'{s}': {e}"))
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(format!("'{other}' is not a boolean")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.batch_size, 10);
        assert_eq!(cfg.velocity, 100);
        assert_eq!(cfg.buffer_capacity, 30);
        assert_eq!(cfg.class_scales, vec![1.0; 4]);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(matches!(
            ExperimentConfig::parse("bogus = 1"),
            Err(StreamselError::Config(_))
        ));
    }

    #[test]
    fn batch_larger_than_velocity_is_rejected() {
        assert!(ExperimentConfig::parse("batch_size = 200\nvelocity = 100").is_err());
    }

    #[test]
    fn strategies_and_seeds_parse_as_lists() {
        let cfg = ExperimentConfig::parse("strategy = cis, rs\nseeds = 1, 2, 3").unwrap();
        assert_eq!(cfg.strategies, vec![Strategy::Cis, Strategy::Rs]);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = ExperimentConfig::parse("# comment\n\nlr = 0.1 # trailing\n").unwrap();
        assert_eq!(cfg.lr, 0.1);
    }

    #[test]
    fn missing_csv_path_is_rejected() {
        assert!(ExperimentConfig::parse("stream = csv").is_err());
    }
}
