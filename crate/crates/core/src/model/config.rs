use alloc::format;

use crate::{Error, Result};

/// Shape of the shared-encoder transformer.
///
/// The output vocabulary is laid out as
/// `[blank, symbols.., sos/eos, accent tags..]`: blank is id 0, the combined
/// start/end symbol sits just below the accent tags, and the last
/// `accent_count` ids are the accent tags used by tag-appending joint
/// recognition.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub accent_count: usize,
    pub subsample_factor: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults for 20 symbols and 8 accents.
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            enc_layers: 4,
            dec_layers: 2,
            ffn_dim: 128,
            dropout: 0.1,
            vocab_size: Self::vocab_for(20, 8),
            accent_count: 8,
            subsample_factor: 4,
            feature_dim: 83,
        }
    }
}

impl ModelConfig {
    /// The published configuration: 12 encoder layers, 6 decoder layers,
    /// 4 heads, dropout 0.1 and 83-dimensional input features.
    pub fn paper_scale(symbols: usize) -> Self {
        Self {
            d_model: 256,
            heads: 4,
            enc_layers: 12,
            dec_layers: 6,
            ffn_dim: 2048,
            dropout: 0.1,
            vocab_size: Self::vocab_for(symbols, 8),
            accent_count: 8,
            subsample_factor: 4,
            feature_dim: 83,
        }
    }

    /// Vocabulary size for `symbols` output symbols plus blank, sos/eos and
    /// one tag per accent.
    pub fn vocab_for(symbols: usize, accents: usize) -> usize {
        symbols + 2 + accents
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidConfig(msg));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.accent_count < 2 {
            return bad(format!("need at least 2 accents, got {}", self.accent_count));
        }
        if self.vocab_size < self.accent_count + 3 {
            return bad(format!(
                "vocab_size {} leaves no symbols beside blank, sos/eos and {} accent tags",
                self.vocab_size, self.accent_count
            ));
        }
        if self.subsample_factor == 0 || self.feature_dim == 0 || self.ffn_dim == 0 {
            return bad("subsample_factor, feature_dim and ffn_dim must be positive".into());
        }
        Ok(())
    }

    pub const BLANK: usize = 0;

    /// Shared start/end-of-sequence id.
    pub fn sos_eos(&self) -> usize {
        self.vocab_size - self.accent_count - 1
    }

    /// Number of ordinary output symbols (ids `1..=symbols`).
    pub fn symbols(&self) -> usize {
        self.vocab_size - self.accent_count - 2
    }

    pub fn accent_tag(&self, accent: usize) -> usize {
        self.vocab_size - self.accent_count + accent
    }

    /// The accent encoded by `token`, if it is an accent tag.
    pub fn tag_accent(&self, token: usize) -> Option<usize> {
        let first = self.vocab_size - self.accent_count;
        (first..self.vocab_size).contains(&token).then(|| token - first)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Which encoder layer (1-based) feeds the accent branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct SharingConfig {
    pub tap_layer: usize,
}

impl SharingConfig {
    pub fn new(tap_layer: usize, config: &ModelConfig) -> Result<Self> {
        let s = Self { tap_layer };
        s.validate(config)?;
        Ok(s)
    }

    /// Tap the last encoder layer.
    pub fn full(config: &ModelConfig) -> Self {
        Self { tap_layer: config.enc_layers }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.tap_layer == 0 || self.tap_layer > config.enc_layers {
            return Err(Error::InvalidConfig(format!(
                "tap_layer {} outside 1..={}",
                self.tap_layer, config.enc_layers
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocab_layout() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.vocab_size, 30);
        assert_eq!(c.symbols(), 20);
        assert_eq!(c.sos_eos(), 21);
        assert_eq!(c.accent_tag(0), 22);
        assert_eq!(c.accent_tag(7), 29);
        assert_eq!(c.tag_accent(25), Some(3));
        assert_eq!(c.tag_accent(21), None);
    }

    #[test]
    fn paper_scale_is_valid_and_taps_accept_grid() {
        let c = ModelConfig::paper_scale(100);
        c.validate().unwrap();
        assert_eq!((c.enc_layers, c.dec_layers, c.heads, c.feature_dim), (12, 6, 4, 83));
        for k in [3, 6, 9, 12] {
            SharingConfig::new(k, &c).unwrap();
        }
        assert!(SharingConfig::new(0, &c).is_err());
        assert!(SharingConfig::new(13, &c).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { dropout: 1.0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { accent_count: 1, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }
}
