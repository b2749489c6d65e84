use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the decoders relate to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// One decoder; the target is selected by a tag on the source. Used for
    /// multilingual pretraining.
    Single,
    /// Two decoders sharing the encoder, no dependency between them.
    Independent,
    /// Two decoders that attend to each other's prefixes.
    Dual,
}

/// Where the cross-decoder sublayer sits inside a decoder block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossPosition {
    #[default]
    AfterEncDec,
    BeforeEncDec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieMode {
    /// Each decoder ties its own input embedding to its output projection.
    #[default]
    PerDecoder,
    /// Both decoders' input embeddings and output projections are one matrix.
    AllFour,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub coupling: Coupling,
    #[serde(default)]
    pub cross_position: CrossPosition,
    #[serde(default)]
    pub tie_mode: TieMode,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_dropout() -> f64 {
    0.1
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// Transformer-base sized dual model.
    pub fn base(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            d_model: 512,
            d_ff: 2048,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            src_vocab,
            tgt_vocab,
            coupling: Coupling::Dual,
            cross_position: CrossPosition::AfterEncDec,
            tie_mode: TieMode::PerDecoder,
            dropout: default_dropout(),
            ln_eps: default_ln_eps(),
        }
    }

    /// Small model for tests and toy tasks.
    pub fn tiny(src_vocab: usize, tgt_vocab: usize, d_model: usize, layers: usize) -> Self {
        ModelConfig {
            d_model,
            d_ff: 2 * d_model,
            heads: 2,
            enc_layers: layers,
            dec_layers: layers,
            dropout: 0.0,
            ..Self::base(src_vocab, tgt_vocab)
        }
    }

    pub fn with_coupling(mut self, coupling: Coupling) -> Self {
        self.coupling = coupling;
        self
    }

    pub fn num_decoders(&self) -> usize {
        match self.coupling {
            Coupling::Single => 1,
            Coupling::Independent | Coupling::Dual => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.src_vocab <= crate::subword::UNK as usize || self.tgt_vocab <= crate::subword::UNK as usize {
            return Err(Error::Config("vocabularies must hold at least the four core specials".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        if self.coupling == Coupling::Single && self.tie_mode == TieMode::AllFour {
            return Err(Error::Config("all-four tying needs two decoders".into()));
        }
        Ok(())
    }
}
