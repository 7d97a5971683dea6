//! Run configuration: a TOML file laid over one of two presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::csi::SynthConfig;
use crate::error::{Error, Result};
use crate::matching::LossConfig;
use crate::rvq::RvqConfig;
use crate::transformer::TransformerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!(
                "unknown preset {s:?} (expected desk or paper)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rvq: RvqConfig,
    pub transformer: TransformerConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.rvq.validate()?;
        self.transformer.validate()?;
        if self.backbone.d() != self.transformer.d {
            return Err(Error::Config(format!(
                "backbone emits d = {} but the transformer expects {}",
                self.backbone.d(),
                self.transformer.d
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count()
            + self.rvq.layers * self.rvq.codebook_size * self.backbone.d()
            + self.transformer.param_count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// Synthetic dataset size.
    pub samples: usize,
    pub fractions: [f64; 3],
    /// Skip activities without support in macro averages.
    pub skip_unsupported: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub seeds: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => desk(),
            Preset::Paper => paper(),
        }
    }

    /// Parses TOML text over a preset; keys absent from `text` keep the preset value.
    pub fn from_toml_over(text: &str, base: Preset) -> Result<Self> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("bad TOML: {e}")))?;
        let base =
            toml::Table::try_from(Self::preset(base)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, overlay);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_over(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        let t = &self.model.transformer;
        if self.model.backbone.in_channels != self.synth.channels() {
            return Err(Error::Config(format!(
                "backbone reads {} channels, data has N_rx*N_tx*N_sc = {}",
                self.model.backbone.in_channels,
                self.synth.channels()
            )));
        }
        if t.n_act != self.synth.n_act {
            return Err(Error::Config(format!(
                "model has {} activities, data {}",
                t.n_act, self.synth.n_act
            )));
        }
        if self.synth.max_occupancy > t.queries {
            return Err(Error::Config(format!(
                "max occupancy {} exceeds N_q = {}",
                self.synth.max_occupancy, t.queries
            )));
        }
        let tr = &self.train;
        if tr.batch_size == 0 || self.seeds == 0 {
            return Err(Error::Config(
                "batch size and seed count must be >= 1".into(),
            ));
        }
        if !(tr.lr > 0.0) || !(tr.weight_decay >= 0.0) || !(tr.clip_norm >= 0.0) {
            return Err(Error::Config(
                "lr must be > 0, weight decay and clip norm >= 0".into(),
            ));
        }
        crate::csi::split_sizes(tr.samples, tr.fractions)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Token count ℓ for this configuration.
    pub fn tokens(&self) -> usize {
        self.model.backbone.output_len(self.synth.time_len)
    }
}

fn merge(mut base: toml::Table, overlay: toml::Table) -> toml::Table {
    for (k, v) in overlay {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

fn train_defaults() -> TrainConfig {
    TrainConfig {
        epochs: 300,
        batch_size: 16,
        lr: 5e-4,
        weight_decay: 1e-4,
        clip_norm: 1.0,
        samples: 3000,
        fractions: [0.8, 0.1, 0.1],
        skip_unsupported: false,
    }
}

/// T = 300, C = 32, ℓ = 19, d = 32, N_q = 6, V = 2, K = 16.
fn desk() -> RunConfig {
    let synth = SynthConfig::default();
    let d = 32;
    let backbone = BackboneConfig::standard(synth.channels(), 32, d);
    let layers = 2;
    // the summed codebook term scales with ℓ·V; unscaled it swamps the set loss
    let weight = 1.0 / (backbone.output_len(synth.time_len) * layers) as f64;
    RunConfig {
        seed: 0,
        seeds: 8,
        model: ModelConfig {
            backbone,
            rvq: RvqConfig {
                layers,
                codebook_size: 16,
                weight,
                ..Default::default()
            },
            transformer: TransformerConfig {
                d,
                heads: 4,
                enc_layers: 2,
                dec_layers: 3,
                queries: 6,
                n_act: synth.n_act,
                ffn_hidden: 2 * d,
                queries_at_self_attention: false,
            },
        },
        synth,
        loss: LossConfig::default(),
        train: TrainConfig {
            epochs: 60,
            lr: 2e-3,
            ..train_defaults()
        },
    }
}

/// Full-size model (ℓ = 188, d = 64, V = 4) at T = 3000 with 3x3 antennas and 30 subcarriers.
fn paper() -> RunConfig {
    let synth = SynthConfig {
        time_len: 3000,
        subcarriers: 30,
        rx: 3,
        tx: 3,
        ..Default::default()
    };
    RunConfig {
        seed: 0,
        seeds: 8,
        model: ModelConfig {
            backbone: BackboneConfig::standard(synth.channels(), 96, 64),
            rvq: RvqConfig::default(),
            transformer: TransformerConfig {
                ffn_hidden: 16,
                ..Default::default()
            },
        },
        synth,
        loss: LossConfig::default(),
        train: train_defaults(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        let d = RunConfig::preset(Preset::Desk);
        d.validate().unwrap();
        assert_eq!(d.tokens(), 19);
        let p = RunConfig::preset(Preset::Paper);
        p.validate().unwrap();
        assert_eq!(p.tokens(), 188);
        assert_eq!(p.synth.channels(), 270);
    }

    #[test]
    fn overlay_keeps_unset_keys() {
        let cfg = RunConfig::from_toml_over(
            "seed = 7\n[train]\nepochs = 3\n[model.rvq]\nlayers = 4\n",
            Preset::Desk,
        )
        .unwrap();
        assert_eq!(
            (cfg.seed, cfg.train.epochs, cfg.model.rvq.layers),
            (7, 3, 4)
        );
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.model.transformer.d, 32);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::preset(Preset::Paper);
        assert_eq!(
            RunConfig::from_toml_over(&cfg.to_toml(), Preset::Desk).unwrap(),
            cfg
        );
    }

    #[test]
    fn invalid_combinations_rejected() {
        assert!(
            RunConfig::from_toml_over("[model.transformer]\nheads = 3\n", Preset::Desk).is_err()
        );
        assert!(
            RunConfig::from_toml_over("[model.rvq]\ncodebook_size = 12\n", Preset::Desk).is_err()
        );
        assert!(
            RunConfig::from_toml_over("[train]\nfractions = [0.5, 0.1, 0.1]\n", Preset::Desk)
                .is_err()
        );
        assert!(RunConfig::from_toml_over("[synth]\nmax_occupancy = 7\n", Preset::Desk).is_err());
        assert!(RunConfig::from_toml_over("not toml = = 1", Preset::Desk).is_err());
    }
}
