use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::stda::StdaShape;

/// Architecture hyper-parameters of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Frames per clip.
    pub frames: usize,
    pub levels: usize,
    pub channels: usize,
    pub heads: usize,
    /// Sampling points per (head, frame, level).
    pub points: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Object queries.
    pub queries: usize,
    pub ffn_hidden: usize,
    /// Object classes, excluding "no object".
    pub num_classes: usize,
    /// Width of the convolutional stem before the per-level projections.
    pub stem_channels: usize,
}

impl NetConfig {
    pub fn paper() -> Self {
        Self {
            frames: 6,
            levels: 4,
            channels: 256,
            heads: 8,
            points: 4,
            enc_layers: 6,
            dec_layers: 6,
            queries: 300,
            ffn_hidden: 1024,
            num_classes: 2,
            stem_channels: 64,
        }
    }

    pub fn toy() -> Self {
        Self {
            frames: 6,
            levels: 2,
            channels: 32,
            heads: 2,
            points: 2,
            enc_layers: 2,
            dec_layers: 2,
            queries: 20,
            ffn_hidden: 64,
            num_classes: 2,
            stem_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("levels", self.levels),
            ("channels", self.channels),
            ("heads", self.heads),
            ("points", self.points),
            ("queries", self.queries),
            ("ffn_hidden", self.ffn_hidden),
            ("num_classes", self.num_classes),
            ("stem_channels", self.stem_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid!("{name} must be positive"));
        }
        if self.levels > 8 {
            return Err(invalid!("at most 8 pyramid levels are supported, got {}", self.levels));
        }
        self.stda_shape().validate()
    }

    pub fn stda_shape(&self) -> StdaShape {
        StdaShape {
            channels: self.channels,
            heads: self.heads,
            frames: self.frames,
            levels: self.levels,
            points: self.points,
        }
    }

    /// Frame height and width must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.levels + 1)
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::toy()
    }
}
