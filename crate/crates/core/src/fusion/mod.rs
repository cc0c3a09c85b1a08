//! Multimodal fusion: per-modality adapters, condition-aware addition,
//! windowed condition-aware cross-attention, static baselines and
//! modality dropout.

mod adapter;
mod ca2;
mod dropout;
mod weights;
mod window;

pub use adapter::{Adapter, AdapterBank};
pub use ca2::{ca2_window_attention, Ca2Fusion, Ca2Level};
pub use dropout::{dropout_keep_mask, modality_dropout};
pub use weights::{masked_softmax, weighted_fuse, CaaHead, StaticWeights};
pub use window::{
    partition_windows, reverse_windows, window_partition, window_reverse, PadInfo, WINDOW, WINDOW_TOKENS,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_MODALITIES: usize = 4;

/// Sensor streams, in the fixed order used by all weight vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Lidar,
    Radar,
    Event,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [Modality::Rgb, Modality::Lidar, Modality::Radar, Modality::Event];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Lidar => "lidar",
            Modality::Radar => "radar",
            Modality::Event => "event",
        }
    }

    /// Single-letter code: C(amera), L, R, E.
    pub fn letter(self) -> char {
        match self {
            Modality::Rgb => 'C',
            Modality::Lidar => 'L',
            Modality::Radar => 'R',
            Modality::Event => 'E',
        }
    }
}

/// Which modalities a model consumes. RGB is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask(pub [bool; NUM_MODALITIES]);

impl Default for ModalityMask {
    fn default() -> Self {
        Self([true; NUM_MODALITIES])
    }
}

impl ModalityMask {
    pub fn rgb_only() -> Self {
        Self([true, false, false, false])
    }

    /// Parses letter codes such as `CLRE` or `CL`.
    pub fn parse(code: &str) -> Result<Self> {
        let mut m = [false; NUM_MODALITIES];
        for ch in code.trim().chars() {
            let modality = Modality::ALL
                .into_iter()
                .find(|x| x.letter() == ch.to_ascii_uppercase())
                .ok_or_else(|| Error::Config(format!("unknown modality letter '{ch}' in '{code}'")))?;
            m[modality.index()] = true;
        }
        let mask = Self(m);
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.0[Modality::Rgb.index()] {
            return Err(Error::Config("modality mask must include RGB".into()));
        }
        Ok(())
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0[m.index()]
    }

    pub fn present(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|&m| self.contains(m)).collect()
    }

    pub fn code(&self) -> String {
        self.present().iter().map(|m| m.letter()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Mean,
    Random,
    LearnedStatic,
    #[default]
    Caa,
    Ca2,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::Mean,
        FusionKind::Random,
        FusionKind::LearnedStatic,
        FusionKind::Caa,
        FusionKind::Ca2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Mean => "mean",
            FusionKind::Random => "random",
            FusionKind::LearnedStatic => "learned_static",
            FusionKind::Caa => "caa",
            FusionKind::Ca2 => "ca2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown fusion kind '{s}'")))
    }
}

/// Where the condition token joins the cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CtTarget {
    #[default]
    Q,
    Kv,
    Qkv,
    None,
}

impl CtTarget {
    pub const ALL: [CtTarget; 4] = [CtTarget::Q, CtTarget::Kv, CtTarget::Qkv, CtTarget::None];

    pub fn name(self) -> &'static str {
        match self {
            CtTarget::Q => "q",
            CtTarget::Kv => "kv",
            CtTarget::Qkv => "qkv",
            CtTarget::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown ct_target '{s}'")))
    }

    pub fn on_query(self) -> bool {
        matches!(self, CtTarget::Q | CtTarget::Qkv)
    }

    pub fn on_key_value(self) -> bool {
        matches!(self, CtTarget::Kv | CtTarget::Qkv)
    }
}
