use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{expanded_width, ShortcutSource};
use crate::error::{Error, Result};

/// Block type used by one stage of the U-shaped network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    /// Stack of dynamic-convolution blocks.
    #[serde(rename = "C")]
    Cnn,
    /// Stack of transformer blocks.
    #[serde(rename = "T")]
    Transformer,
}

impl StageKind {
    fn letter(self) -> char {
        match self {
            StageKind::Cnn => 'C',
            StageKind::Transformer => 'T',
        }
    }
}

/// Seven stage slots: encoder levels 1–3, latent, decoder levels 3–1.
pub const STAGES: usize = 7;

/// Human-readable slot names, in slot order.
pub const STAGE_NAMES: [&str; STAGES] = ["enc1", "enc2", "enc3", "latent", "dec3", "dec2", "dec1"];

/// Encoder / latent / decoder block types, written as `"C-T-C"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout(pub [StageKind; STAGES]);

impl Layout {
    pub fn from_parts(encoder: StageKind, latent: StageKind, decoder: StageKind) -> Self {
        let mut s = [encoder; STAGES];
        s[3] = latent;
        for k in &mut s[4..] {
            *k = decoder;
        }
        Layout(s)
    }
}

impl Default for Layout {
    fn default() -> Self {
        Layout::from_parts(StageKind::Cnn, StageKind::Transformer, StageKind::Cnn)
    }
}

impl FromStr for Layout {
    type Err = Error;

    /// Accepts the three-part form `"C-T-C"` or the seven-slot form
    /// `"C-C-C-T-C-C-C"`.
    fn from_str(s: &str) -> Result<Self> {
        let kinds = s
            .split('-')
            .map(|p| match p.trim() {
                "C" | "c" => Ok(StageKind::Cnn),
                "T" | "t" => Ok(StageKind::Transformer),
                other => Err(Error::Config(format!("unknown stage type {other:?} in layout {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        match kinds.len() {
            3 => Ok(Layout::from_parts(kinds[0], kinds[1], kinds[2])),
            STAGES => {
                let mut a = [StageKind::Cnn; STAGES];
                a.copy_from_slice(&kinds);
                Ok(Layout(a))
            }
            n => Err(Error::Config(format!(
                "layout {s:?} has {n} parts, expected 3 or {STAGES}"
            ))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.0;
        let uniform_enc = s[..3].iter().all(|k| *k == s[0]);
        let uniform_dec = s[4..].iter().all(|k| *k == s[4]);
        let parts: Vec<char> = if uniform_enc && uniform_dec {
            vec![s[0].letter(), s[3].letter(), s[4].letter()]
        } else {
            s.iter().map(|k| k.letter()).collect()
        };
        let strs: Vec<String> = parts.iter().map(|c| c.to_string()).collect();
        write!(f, "{}", strs.join("-"))
    }
}

impl Serialize for Layout {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Layout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Width `C0` of the first level.
    pub base_dim: usize,
    /// Blocks per non-latent stage: `[enc1, enc2, enc3, dec3, dec2, dec1]`.
    pub mdab_counts: [usize; 6],
    /// Blocks in the latent stage.
    pub etb_count: usize,
    #[serde(default)]
    pub layout: Layout,
    /// Hidden width multiplier of the gated feed-forward paths.
    #[serde(default = "default_expansion")]
    pub expansion: f64,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub ffn_shortcut_source: ShortcutSource,
}

fn default_expansion() -> f64 {
    2.0
}

fn default_heads() -> usize {
    1
}

impl ModelConfig {
    /// `C0 = 60`, counts `[3, 6, 6, 6, 6, 3]`, 10 latent blocks.
    pub fn full() -> Self {
        ModelConfig {
            base_dim: 60,
            mdab_counts: [3, 6, 6, 6, 6, 3],
            etb_count: 10,
            layout: Layout::default(),
            expansion: default_expansion(),
            heads: default_heads(),
            ffn_shortcut_source: ShortcutSource::default(),
        }
    }

    /// `C0 = 48`, counts `[2, 6, 8, 4, 3, 2]`, 10 latent blocks.
    pub fn small() -> Self {
        ModelConfig {
            base_dim: 48,
            mdab_counts: [2, 6, 8, 4, 3, 2],
            ..Self::full()
        }
    }

    /// Desk-scale model: `C0 = 8`, one block per stage, 2 latent blocks.
    pub fn tiny() -> Self {
        ModelConfig {
            base_dim: 8,
            mdab_counts: [1; 6],
            etb_count: 2,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "small" => Ok(Self::small()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected full, small or tiny)"
            ))),
        }
    }

    pub fn with_layout(mut self, layout: &str) -> Result<Self> {
        self.layout = layout.parse()?;
        Ok(self)
    }

    /// Nominal stage widths `[C0, 2C0, 4C0, 8C0, 4C0, 2C0, C0]`.
    pub fn dims(&self) -> [usize; STAGES] {
        let c = self.base_dim;
        [c, 2 * c, 4 * c, 8 * c, 4 * c, 2 * c, c]
    }

    /// Width at which the blocks of a slot run. Equals [`dims`](Self::dims)
    /// except at decoder level 1, which keeps the concatenated `2C0`.
    pub fn block_width(&self, slot: usize) -> usize {
        if slot == STAGES - 1 {
            2 * self.base_dim
        } else {
            self.dims()[slot]
        }
    }

    pub fn block_count(&self, slot: usize) -> usize {
        match slot {
            0..=2 => self.mdab_counts[slot],
            3 => self.etb_count,
            _ => self.mdab_counts[slot - 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_dim == 0 || !self.base_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "base_dim must be a positive even number, got {}",
                self.base_dim
            )));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be at least 1".into()));
        }
        for slot in 0..STAGES {
            let name = STAGE_NAMES[slot];
            let width = self.block_width(slot);
            if self.block_count(slot) == 0 {
                continue;
            }
            expanded_width(width, self.expansion)
                .map_err(|e| Error::Config(format!("stage {name}: {e}")))?;
            if self.layout.0[slot] == StageKind::Transformer && !width.is_multiple_of(self.heads) {
                return Err(Error::Config(format!(
                    "stage {name}: {} heads do not divide width {width}",
                    self.heads
                )));
            }
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}
