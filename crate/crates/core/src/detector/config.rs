use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named depth/width scaling of the architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    N,
    S,
    M,
    L,
    X,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::N, Preset::S, Preset::M, Preset::L, Preset::X];

    /// (depth_multiple, width_multiple)
    pub fn multiples(self) -> (f64, f64) {
        match self {
            Preset::N => (0.33, 0.25),
            Preset::S => (0.33, 0.50),
            Preset::M => (0.67, 0.75),
            Preset::L => (1.0, 1.0),
            Preset::X => (1.33, 1.25),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Preset::N => "n",
            Preset::S => "s",
            Preset::M => "m",
            Preset::L => "l",
            Preset::X => "x",
        };
        f.write_str(s)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "n" => Ok(Preset::N),
            "s" => Ok(Preset::S),
            "m" => Ok(Preset::M),
            "l" => Ok(Preset::L),
            "x" => Ok(Preset::X),
            other => Err(Error::config("preset", format!("unknown preset `{other}`"))),
        }
    }
}

/// Anchor (width, height) pairs in pixels at a 640-pixel input, per scale.
pub const BASE_ANCHORS: [[[f64; 2]; 3]; 3] = [
    [[10.0, 13.0], [16.0, 30.0], [33.0, 23.0]],
    [[30.0, 61.0], [62.0, 45.0], [59.0, 119.0]],
    [[116.0, 90.0], [156.0, 198.0], [373.0, 326.0]],
];

pub const STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth_multiple: f64,
    pub width_multiple: f64,
    pub num_classes: usize,
    pub input_size: usize,
    /// Per scale, three (width, height) anchors in input pixels.
    pub anchors: [[[f64; 2]; 3]; 3],
    pub strides: [usize; 3],
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn from_preset(preset: Preset, num_classes: usize, input_size: usize) -> Self {
        let (depth, width) = preset.multiples();
        Self::with_multiples(depth, width, num_classes, input_size)
    }

    pub fn with_multiples(depth: f64, width: f64, num_classes: usize, input_size: usize) -> Self {
        Self {
            depth_multiple: depth,
            width_multiple: width,
            num_classes,
            input_size,
            anchors: scaled_anchors(input_size),
            strides: STRIDES,
            leaky_slope: 0.1,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        positive("depth_multiple", self.depth_multiple)?;
        positive("width_multiple", self.width_multiple)?;
        positive("bn_eps", self.bn_eps)?;
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be at least 1"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::config(
                "input_size",
                format!("must be a positive multiple of 32, got {}", self.input_size),
            ));
        }
        if self.strides != STRIDES {
            return Err(Error::config("strides", "must be [8, 16, 32]"));
        }
        if self
            .anchors
            .iter()
            .flatten()
            .flatten()
            .any(|&a| !(a > 0.0 && a.is_finite()))
        {
            return Err(Error::config(
                "anchors",
                "all anchor dimensions must be positive",
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Channel count for a base width: nearest multiple of 8, at least 8.
    pub fn channels(&self, base: usize) -> usize {
        let scaled = (base as f64 * self.width_multiple / 8.0).round() as usize * 8;
        scaled.max(8)
    }

    /// Repeat count for a base depth: rounded, at least 1.
    pub fn repeats(&self, base: usize) -> usize {
        ((base as f64 * self.depth_multiple).round() as usize).max(1)
    }

    /// Values predicted per anchor: 4 box terms, objectness, class scores.
    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn head_channels(&self) -> usize {
        3 * self.outputs_per_anchor()
    }

    pub fn grid_sizes(&self) -> [usize; 3] {
        self.strides.map(|s| self.input_size / s)
    }
}

pub fn scaled_anchors(input_size: usize) -> [[[f64; 2]; 3]; 3] {
    let k = input_size as f64 / 640.0;
    BASE_ANCHORS.map(|scale| scale.map(|[w, h]| [w * k, h * k]))
}
