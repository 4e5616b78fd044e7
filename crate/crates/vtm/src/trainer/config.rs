//! Training configuration: modes, dimensions, loss weights, optimizer and
//! schedule settings. Values load from a flat TOML file; command-line flags
//! override file values, which override the built-in defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::ModelDims;
use crate::objectives::Weights;

/// Training mode. The ablations zero the corresponding loss terms; the
/// table-to-sequence baseline drops the latent variables entirely and trains
/// a plain attention encoder-decoder on paired data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "vtm")]
    Vtm,
    #[serde(rename = "vtm-noraw")]
    VtmNoRaw,
    #[serde(rename = "vtm-noraw-noMI")]
    VtmNoRawNoMi,
    #[serde(rename = "vtm-noraw-noMI-noPT")]
    VtmNoRawNoMiNoPt,
    #[serde(rename = "vtm-noPC")]
    VtmNoPc,
    #[serde(rename = "table2seq")]
    Table2Seq,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::Vtm,
        TrainMode::VtmNoRaw,
        TrainMode::VtmNoRawNoMi,
        TrainMode::VtmNoRawNoMiNoPt,
        TrainMode::VtmNoPc,
        TrainMode::Table2Seq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Vtm => "vtm",
            TrainMode::VtmNoRaw => "vtm-noraw",
            TrainMode::VtmNoRawNoMi => "vtm-noraw-noMI",
            TrainMode::VtmNoRawNoMiNoPt => "vtm-noraw-noMI-noPT",
            TrainMode::VtmNoPc => "vtm-noPC",
            TrainMode::Table2Seq => "table2seq",
        }
    }

    /// Whether raw text participates in training (and model selection).
    pub fn uses_raw(self) -> bool {
        matches!(self, TrainMode::Vtm | TrainMode::VtmNoPc)
    }

    pub fn is_table2seq(self) -> bool {
        matches!(self, TrainMode::Table2Seq)
    }

    /// Effective loss weights after mode-specific zeroing.
    pub fn weights(self, lambda_mi: f64, lambda_pt: f64, lambda_pc: f64) -> Weights {
        match self {
            TrainMode::Vtm | TrainMode::VtmNoRaw => {
                Weights { mi: lambda_mi, pt: lambda_pt, pc: lambda_pc }
            }
            TrainMode::VtmNoRawNoMi => Weights { mi: 0.0, pt: lambda_pt, pc: lambda_pc },
            TrainMode::VtmNoRawNoMiNoPt => Weights { mi: 0.0, pt: 0.0, pc: lambda_pc },
            TrainMode::VtmNoPc => Weights { mi: lambda_mi, pt: lambda_pt, pc: 0.0 },
            TrainMode::Table2Seq => Weights { mi: 0.0, pt: 0.0, pc: 0.0 },
        }
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = TrainMode::ALL.iter().map(|m| m.name()).collect();
                format!("unknown mode `{s}`; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub seed: u64,
    /// Word/field/value embedding dimension.
    pub embed_dim: usize,
    /// Recurrent hidden size of encoder and decoders.
    pub hidden_dim: usize,
    /// Record-encoding dimension (`d_t`).
    pub table_dim: usize,
    /// Template latent dimension.
    pub d_z: usize,
    /// Content latent dimension.
    pub d_c: usize,
    pub lambda_mi: f64,
    pub lambda_pt: f64,
    pub lambda_pc: f64,
    pub learning_rate: f64,
    pub batch_size_paired: usize,
    pub batch_size_raw: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip: f64,
    pub min_count: usize,
    pub paired_train: Option<PathBuf>,
    pub paired_valid: Option<PathBuf>,
    pub raw_train: Option<PathBuf>,
    pub raw_valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// Defaults follow the biography-corpus recipe: 300-dim embeddings and
    /// hiddens, latent dims 100/200, weights 0.5/1.0/0.5, Adam at 0.001.
    fn default() -> Self {
        Self {
            mode: TrainMode::Vtm,
            seed: 1,
            embed_dim: 300,
            hidden_dim: 300,
            table_dim: 300,
            d_z: 100,
            d_c: 200,
            lambda_mi: 0.5,
            lambda_pt: 1.0,
            lambda_pc: 0.5,
            learning_rate: 0.001,
            batch_size_paired: 32,
            batch_size_raw: 32,
            max_epochs: 30,
            patience: 5,
            grad_clip: 5.0,
            min_count: 5,
            paired_train: None,
            paired_valid: None,
            raw_train: None,
            raw_valid: None,
            test: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    /// Restaurant-corpus recipe: latent dims 64/100, all weights 1.0.
    pub fn spnlg_preset() -> Self {
        Self {
            d_z: 64,
            d_c: 100,
            lambda_mi: 1.0,
            lambda_pt: 1.0,
            lambda_pc: 1.0,
            ..Self::default()
        }
    }

    /// Biography-corpus recipe (also the default).
    pub fn wiki_preset() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("malformed config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.learning_rate <= 0.0 {
            anyhow::bail!("learning_rate must be > 0");
        }
        if self.batch_size_paired == 0 || self.batch_size_raw == 0 {
            anyhow::bail!("batch sizes must be >= 1");
        }
        if self.max_epochs == 0 {
            anyhow::bail!("max_epochs must be >= 1");
        }
        Ok(())
    }

    pub fn weights(&self) -> Weights {
        self.mode.weights(self.lambda_mi, self.lambda_pt, self.lambda_pc)
    }

    pub fn dims(&self, vocab_words: usize, vocab_fields: usize) -> ModelDims {
        ModelDims {
            vocab: vocab_words,
            fields: vocab_fields,
            embed: self.embed_dim,
            hidden: self.hidden_dim,
            table: self.table_dim,
            template_latent: self.d_z,
            content_latent: self.d_c,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spnlg_preset_weights_are_all_one() {
        let cfg = TrainConfig::spnlg_preset();
        assert_eq!(cfg.lambda_mi, 1.0);
        assert_eq!(cfg.lambda_pt, 1.0);
        assert_eq!(cfg.lambda_pc, 1.0);
        assert_eq!(cfg.d_z, 64);
        assert_eq!(cfg.d_c, 100);
    }

    #[test]
    fn wiki_preset_weights_and_dims() {
        let cfg = TrainConfig::wiki_preset();
        assert_eq!(cfg.lambda_mi, 0.5);
        assert_eq!(cfg.lambda_pt, 1.0);
        assert_eq!(cfg.lambda_pc, 0.5);
        assert_eq!(cfg.d_z, 100);
        assert_eq!(cfg.d_c, 200);
        assert_eq!(cfg.embed_dim, 300);
        assert_eq!(cfg.table_dim, 300);
        assert_eq!(cfg.learning_rate, 0.001);
    }

    #[test]
    fn mode_round_trips_through_names() {
        for mode in TrainMode::ALL {
            assert_eq!(mode.name().parse::<TrainMode>().unwrap(), mode);
        }
        assert!("bogus".parse::<TrainMode>().is_err());
    }

    #[test]
    fn ablations_zero_the_declared_terms() {
        let w = TrainMode::VtmNoRawNoMi.weights(0.5, 1.0, 0.5);
        assert_eq!(w, Weights { mi: 0.0, pt: 1.0, pc: 0.5 });
        let w = TrainMode::VtmNoRawNoMiNoPt.weights(0.5, 1.0, 0.5);
        assert_eq!(w, Weights { mi: 0.0, pt: 0.0, pc: 0.5 });
        let w = TrainMode::VtmNoPc.weights(0.5, 1.0, 0.5);
        assert_eq!(w, Weights { mi: 0.5, pt: 1.0, pc: 0.0 });
        let w = TrainMode::Table2Seq.weights(0.5, 1.0, 0.5);
        assert_eq!(w, Weights { mi: 0.0, pt: 0.0, pc: 0.0 });
        assert!(!TrainMode::VtmNoRaw.uses_raw());
        assert!(TrainMode::VtmNoPc.uses_raw());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys_rejected() {
        let cfg = TrainConfig::spnlg_preset();
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert!(toml::from_str::<TrainConfig>("bogus_key = 3").is_err());
    }
}
