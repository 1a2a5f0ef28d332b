//! Wire types shared by the job server and its clients.
//!
//! Every operation is submitted as a [`JobRequest`] to `POST /v1/jobs` and
//! polled through `GET /v1/jobs/{id}` until it leaves the queued and
//! running states.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use stnet_core::detection::ApReport;
use stnet_core::inference::BenchReport;
use stnet_core::verify::CheckOutcome;

pub use stnet_core::training::RunConfig;

/// Configuration source of a run: a preset, then a `key=value` text, then
/// individual overrides, each applied on top of the previous one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigSpec {
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Paper,
}

impl ConfigSpec {
    pub fn resolve(&self) -> stnet_core::Result<RunConfig> {
        let mut cfg = match self.preset {
            Preset::Toy => RunConfig::toy(),
            Preset::Paper => RunConfig {
                net: stnet_core::transformer::NetConfig::paper(),
                ..RunConfig::default()
            },
        };
        cfg.apply_text(&self.text)?;
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferMode {
    Full,
    Shuffle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum JobRequest {
    Synth {
        out: PathBuf,
        seed: u64,
        videos: usize,
        height: usize,
        width: usize,
        frames: usize,
        difficulty: f64,
    },
    Train {
        config: ConfigSpec,
    },
    Eval {
        config: ConfigSpec,
        checkpoint: PathBuf,
    },
    Infer {
        config: ConfigSpec,
        checkpoint: PathBuf,
        video: usize,
        mode: InferMode,
        report: PathBuf,
        /// Detections kept per frame, best first.
        top: usize,
    },
    Bench {
        config: ConfigSpec,
        checkpoint: Option<PathBuf>,
        triples: usize,
        repetitions: usize,
    },
    Gradcheck {
        seed: u64,
    },
    Oracle {
        seed: u64,
    },
}

impl JobRequest {
    pub fn name(&self) -> &'static str {
        match self {
            JobRequest::Synth { .. } => "synth",
            JobRequest::Train { .. } => "train",
            JobRequest::Eval { .. } => "eval",
            JobRequest::Infer { .. } => "infer",
            JobRequest::Bench { .. } => "bench",
            JobRequest::Gradcheck { .. } => "gradcheck",
            JobRequest::Oracle { .. } => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum JobOutput {
    Synth {
        videos: usize,
        occluded_frames: usize,
    },
    Train {
        final_checkpoint: Option<PathBuf>,
        eval: ApReport,
    },
    Eval {
        eval: ApReport,
        frames: usize,
    },
    Infer {
        frames: usize,
        detections: usize,
    },
    Bench {
        report: BenchReport,
        /// Mean largest deviation of the shuffled `k-1` and `k+1` outputs
        /// from re-centred full inference.
        neighbour_divergence: f64,
    },
    Checks {
        checks: Vec<CheckOutcome>,
    },
}

impl JobOutput {
    /// False when a verification check failed.
    pub fn passed(&self) -> bool {
        match self {
            JobOutput::Checks { checks } => checks.iter().all(|c| c.passed),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobState {
    pub fn is_finished(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub op: String,
    pub state: JobState,
    /// Progress lines in emission order.
    pub log: Vec<String>,
    pub output: Option<JobOutput>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobCreated {
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDump {
    pub config: RunConfig,
    /// The same configuration as `key=value` lines.
    pub text: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requests_round_trip_through_json() {
        let req = JobRequest::Infer {
            config: ConfigSpec {
                preset: Preset::Toy,
                text: "frames=6\n".into(),
                overrides: vec![("seed".into(), "3".into())],
            },
            checkpoint: "c.stn1".into(),
            video: 2,
            mode: InferMode::Shuffle,
            report: "r.txt".into(),
            top: 3,
        };
        let json = serde_json::to_string(&req).unwrap();
        assert!(json.contains(r#""op":"infer""#) && json.contains(r#""mode":"shuffle""#));
        assert_eq!(serde_json::from_str::<JobRequest>(&json).unwrap(), req);
    }

    #[test]
    fn config_layers_apply_in_order() {
        let spec = ConfigSpec {
            preset: Preset::Toy,
            text: "lr=0.5\nseed=4".into(),
            overrides: vec![("lr".into(), "0.25".into())],
        };
        let cfg = spec.resolve().unwrap();
        assert_eq!((cfg.lr, cfg.seed), (0.25, 4));
        let bad = ConfigSpec {
            overrides: vec![("nope".into(), "1".into())],
            ..ConfigSpec::default()
        };
        assert!(bad.resolve().is_err());
    }
}
