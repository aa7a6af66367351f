//! Run configuration: architecture knobs, corpus and schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::charset::Charset;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

/// Flat configuration, read from JSON with snake_case keys. Unknown keys are
/// rejected; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub base_channels: usize,
    pub num_scales: usize,
    pub rus_per_rs: usize,
    pub vab_enabled: bool,
    pub vab_convs: usize,
    pub max_length: usize,
    pub hidden_size: usize,
    pub embedding_dim: usize,

    pub input_height: usize,
    pub input_width: usize,

    /// Characters labels are drawn from.
    pub alphabet: String,
    pub min_label_len: usize,
    pub max_label_len: usize,
    pub num_samples: usize,
    /// Amplitude of additive uniform pixel noise.
    pub noise: f64,
    /// Largest horizontal shear angle in degrees.
    pub max_shear_deg: f64,

    pub batch_size: usize,
    pub epochs: usize,
    /// Stops training early after this many steps when set.
    pub max_steps: Option<usize>,
    pub lr_initial: f64,
    pub lr_decayed: f64,
    /// First 1-based epoch trained at `lr_decayed`.
    pub lr_decay_epoch: usize,
    pub rho: f64,
    pub eps: f64,

    pub seed: u64,
    pub precision: Precision,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            base_channels: 8,
            num_scales: 3,
            rus_per_rs: 5,
            vab_enabled: true,
            vab_convs: 4,
            max_length: 25,
            hidden_size: 256,
            embedding_dim: 256,
            input_height: 32,
            input_width: 128,
            alphabet: "abcdefghijklmnopqrstuvwxyz0123456789".into(),
            min_label_len: 1,
            max_label_len: 10,
            num_samples: 32,
            noise: 0.05,
            max_shear_deg: 15.0,
            batch_size: 16,
            epochs: 250,
            max_steps: None,
            lr_initial: 1.0,
            lr_decayed: 0.1,
            lr_decay_epoch: 4,
            rho: 0.9,
            eps: 1e-6,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl Config {
    /// Full-size architecture: 32 base channels, batch 64.
    pub fn full_scale() -> Self {
        Self { base_channels: 32, batch_size: 64, ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            base_channels: self.base_channels,
            num_scales: self.num_scales,
            rus_per_rs: self.rus_per_rs,
            vab_enabled: self.vab_enabled,
            vab_convs: self.vab_convs,
        }
    }

    /// Width of one decoder step vector.
    pub fn k(&self) -> usize {
        (self.input_height >> self.num_scales) * (self.input_width >> self.num_scales)
    }

    /// Step multiplier for a 1-based epoch.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        if epoch < self.lr_decay_epoch {
            self.lr_initial
        } else {
            self.lr_decayed
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.num_samples.div_ceil(self.batch_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.encoder().check_input(self.input_height, self.input_width).map_err(|e| Error::Config(e.to_string()))?;
        if self.max_length < 2 {
            return bad(format!("max_length {} must be at least 2", self.max_length));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.hidden_size == 0 || self.embedding_dim == 0 {
            return bad("hidden_size and embedding_dim must be positive".into());
        }
        if self.alphabet.is_empty() {
            return bad("alphabet is empty".into());
        }
        let charset = Charset::new();
        for c in self.alphabet.chars() {
            charset.class_of(c).map_err(|_| Error::Config(format!("alphabet character {c:?} is not recognized")))?;
        }
        if self.min_label_len == 0 || self.min_label_len > self.max_label_len {
            return bad(format!("label length range {}..={} is empty", self.min_label_len, self.max_label_len));
        }
        if self.max_label_len + 1 > self.max_length {
            return bad(format!("max_label_len {} does not fit max_length {}", self.max_label_len, self.max_length));
        }
        if !(0.0..=0.1).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 0.1]", self.noise));
        }
        if !(0.0..=15.0).contains(&self.max_shear_deg) {
            return bad(format!("max_shear_deg {} outside [0, 15]", self.max_shear_deg));
        }
        if self.lr_decay_epoch == 0 {
            return bad("lr_decay_epoch is 1-based".into());
        }
        if !(0.0..1.0).contains(&self.rho) || self.eps <= 0.0 {
            return bad("rho must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}
