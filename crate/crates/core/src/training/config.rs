use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Precision;
use crate::transformer::NetConfig;

macro_rules! bad {
    ($($arg:tt)*) => {
        Error::Config(format!($($arg)*))
    };
}

/// Everything a training or evaluation run needs besides the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub net: NetConfig,
    /// Phase 1 (AdamW) learning rate.
    pub lr: f64,
    /// Phase 2 (plain SGD) learning rate.
    pub phase2_lr: f64,
    pub weight_decay: f64,
    /// Clips whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Largest global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
    /// Target frames drawn per training video and epoch; 0 uses every valid centre.
    pub clips_per_video: usize,
    /// Random horizontal flips of whole clips.
    pub augment: bool,
    /// Evaluate every `eval_stride`-th inner frame of each test video.
    pub eval_stride: usize,
    /// Videos `0..train_videos` train, the rest evaluate.
    pub train_videos: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::toy(),
            lr: 5e-5,
            phase2_lr: 5e-5,
            weight_decay: 1e-4,
            batch_size: 1,
            phase1_epochs: 8,
            phase2_epochs: 20,
            seed: 0,
            precision: Precision::F32,
            grad_clip: 0.1,
            clips_per_video: 0,
            augment: true,
            eval_stride: 1,
            train_videos: 40,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Desk-scale schedule. The only place where toy overrides live:
    /// 3 + 5 epochs, two clips per step and larger learning rates for both phases.
    pub fn toy() -> Self {
        Self {
            lr: 1e-3,
            phase2_lr: 1e-2,
            batch_size: 2,
            phase1_epochs: 3,
            phase2_epochs: 5,
            ..Self::default()
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.phase2_lr > 0.0 && self.phase2_lr.is_finite()) {
            return Err(bad!(
                "learning rates must be positive, got {} and {}",
                self.lr,
                self.phase2_lr
            ));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(bad!("weight_decay and grad_clip must be non-negative"));
        }
        if self.batch_size == 0 || self.eval_stride == 0 {
            return Err(bad!("batch_size and eval_stride must be positive"));
        }
        if self.net.frames == 2 {
            return Err(bad!("clips hold 1 frame or at least 3"));
        }
        Ok(())
    }

    /// Sets one `key=value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| bad!("bad value for {key}: '{v}'"))
        }
        let v = value.trim();
        let n = &mut self.net;
        match key.trim() {
            "frames" => n.frames = num(key, v)?,
            "levels" => n.levels = num(key, v)?,
            "channels" => n.channels = num(key, v)?,
            "heads" => n.heads = num(key, v)?,
            "points" => n.points = num(key, v)?,
            "enc_layers" => n.enc_layers = num(key, v)?,
            "dec_layers" => n.dec_layers = num(key, v)?,
            "queries" => n.queries = num(key, v)?,
            "ffn_hidden" => n.ffn_hidden = num(key, v)?,
            "num_classes" => n.num_classes = num(key, v)?,
            "stem_channels" => n.stem_channels = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "phase2_lr" => self.phase2_lr = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "phase1_epochs" => self.phase1_epochs = num(key, v)?,
            "phase2_epochs" => self.phase2_epochs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "precision" => self.precision = v.parse().map_err(|e: String| bad!("{e}"))?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "clips_per_video" => self.clips_per_video = num(key, v)?,
            "augment" => self.augment = num(key, v)?,
            "eval_stride" => self.eval_stride = num(key, v)?,
            "train_videos" => self.train_videos = num(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(bad!("unknown config key '{other}'")),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad!("line {}: '{line}' is not key=value", i + 1))?;
            self.set(k, v).map_err(|e| bad!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn parse(text: &str, base: RunConfig) -> Result<Self> {
        let mut cfg = base;
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, base).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Every key with its current value, in a form `parse` accepts.
    pub fn dump(&self) -> String {
        let n = &self.net;
        let precision = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let entries: Vec<(&str, String)> = vec![
            ("frames", n.frames.to_string()),
            ("levels", n.levels.to_string()),
            ("channels", n.channels.to_string()),
            ("heads", n.heads.to_string()),
            ("points", n.points.to_string()),
            ("enc_layers", n.enc_layers.to_string()),
            ("dec_layers", n.dec_layers.to_string()),
            ("queries", n.queries.to_string()),
            ("ffn_hidden", n.ffn_hidden.to_string()),
            ("num_classes", n.num_classes.to_string()),
            ("stem_channels", n.stem_channels.to_string()),
            ("lr", self.lr.to_string()),
            ("phase2_lr", self.phase2_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("phase1_epochs", self.phase1_epochs.to_string()),
            ("phase2_epochs", self.phase2_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", precision.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("clips_per_video", self.clips_per_video.to_string()),
            ("augment", self.augment.to_string()),
            ("eval_stride", self.eval_stride.to_string()),
            ("train_videos", self.train_videos.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        entries.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::toy();
        cfg.seed = 17;
        cfg.precision = Precision::F64;
        cfg.data_dir = PathBuf::from("/tmp/x y");
        let back = RunConfig::parse(&cfg.dump(), RunConfig::default()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = RunConfig::parse("# toy\nlr = 0.01 # faster\n\nframes=1\n", RunConfig::default()).unwrap();
        assert_eq!((cfg.lr, cfg.net.frames), (0.01, 1));
        assert!(RunConfig::parse("bogus=1", RunConfig::default()).is_err());
        assert!(RunConfig::parse("lr", RunConfig::default()).is_err());
        let err = RunConfig::parse("x=1\nlr=abc", RunConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 1"), "{err}");
        let bad = RunConfig {
            lr: 0.0,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
