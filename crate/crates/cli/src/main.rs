//! `stnet`: command-line client of the job service. Without `--server` an
//! in-process server is started on a free local port.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stnet_api::{ConfigSpec, InferMode, JobOutput, JobRequest, JobState, Preset};
use stnet_client::Client;

#[derive(Parser)]
#[command(
    name = "stnet",
    version,
    about = "Spatial-temporal deformable attention lesion detector"
)]
struct Cli {
    /// Base URL of a running server; an in-process server is used otherwise.
    #[arg(long, global = true)]
    server: Option<String>,

    /// Print every configuration key of the preset (with overrides applied) and exit.
    #[arg(long)]
    dump_config: bool,

    #[command(flatten)]
    config: ConfigArgs,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key=value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Toy)]
    preset: PresetArg,

    /// Overrides a configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Default)]
enum PresetArg {
    #[default]
    Toy,
    Paper,
}

#[derive(ValueEnum, Clone, Copy)]
enum ModeArg {
    Full,
    Shuffle,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "STDA_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        videos: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Frames per video.
        #[arg(long, default_value_t = 32)]
        frames: usize,
        /// Lesion contrast and motion scale in [0, 1].
        #[arg(long, default_value_t = 0.3)]
        difficulty: f64,
    },
    /// Two-phase training; writes per-epoch checkpoints to the output directory.
    Train {
        /// Dataset directory; overrides `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory; overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "STDA_SEED")]
        seed: Option<u64>,
    },
    /// AP, AP50 and AP75 of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; overrides `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-frame detections of one video written to a text report.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; overrides `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Index into the whole dataset.
        #[arg(long, default_value_t = 0)]
        video: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Shuffle)]
        mode: ModeArg,
        #[arg(long)]
        report: PathBuf,
        /// Detections kept per frame.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Frames per second of full against shuffle inference.
    Bench {
        /// Randomly initialised weights when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; generated 64x64 videos when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Consecutive frame triples timed per repetition.
        #[arg(long, default_value_t = 10)]
        triples: usize,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
    },
    /// 64-bit finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long, env = "STDA_SEED")]
        seed: Option<u64>,
    },
    /// Equivalence checks against the brute-force reference implementations.
    Oracle {
        #[arg(long, env = "STDA_SEED")]
        seed: Option<u64>,
    },
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    Ok(std::env::current_dir()
        .context("reading the working directory")?
        .join(p))
}

impl ConfigArgs {
    fn spec(&self, extra: Vec<(String, String)>) -> anyhow::Result<ConfigSpec> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        let mut overrides = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("--set {s}: expected KEY=VALUE"))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        overrides.extend(extra);
        let mut spec = ConfigSpec {
            preset: match self.preset {
                PresetArg::Toy => Preset::Toy,
                PresetArg::Paper => Preset::Paper,
            },
            text,
            overrides,
        };
        // paths reach the server as absolute paths
        let resolved = spec.resolve()?;
        spec.overrides
            .push(("data_dir".into(), absolute(&resolved.data_dir)?.display().to_string()));
        spec.overrides
            .push(("out_dir".into(), absolute(&resolved.out_dir)?.display().to_string()));
        Ok(spec)
    }

    fn seed(&self) -> anyhow::Result<u64> {
        Ok(self.spec(Vec::new())?.resolve()?.seed)
    }
}

fn path_override(key: &str, p: &Option<PathBuf>) -> anyhow::Result<Vec<(String, String)>> {
    Ok(match p {
        Some(p) => vec![(key.to_string(), absolute(p)?.display().to_string())],
        None => Vec::new(),
    })
}

fn request(command: Command, cfg: &ConfigArgs) -> anyhow::Result<JobRequest> {
    Ok(match command {
        Command::Synth {
            out,
            seed,
            videos,
            height,
            width,
            frames,
            difficulty,
        } => JobRequest::Synth {
            out: absolute(&out)?,
            seed,
            videos,
            height,
            width,
            frames,
            difficulty,
        },
        Command::Train { data, out, seed } => {
            let mut extra = path_override("data_dir", &data)?;
            extra.extend(path_override("out_dir", &out)?);
            if let Some(s) = seed {
                extra.push(("seed".into(), s.to_string()));
            }
            JobRequest::Train {
                config: cfg.spec(extra)?,
            }
        }
        Command::Eval { checkpoint, data } => JobRequest::Eval {
            config: cfg.spec(path_override("data_dir", &data)?)?,
            checkpoint: absolute(&checkpoint)?,
        },
        Command::Infer {
            checkpoint,
            data,
            video,
            mode,
            report,
            top,
        } => JobRequest::Infer {
            config: cfg.spec(path_override("data_dir", &data)?)?,
            checkpoint: absolute(&checkpoint)?,
            video,
            mode: match mode {
                ModeArg::Full => InferMode::Full,
                ModeArg::Shuffle => InferMode::Shuffle,
            },
            report: absolute(&report)?,
            top,
        },
        Command::Bench {
            checkpoint,
            data,
            triples,
            repetitions,
        } => JobRequest::Bench {
            config: cfg.spec(path_override("data_dir", &data)?)?,
            checkpoint: checkpoint.as_deref().map(absolute).transpose()?,
            triples,
            repetitions,
        },
        Command::Gradcheck { seed } => JobRequest::Gradcheck {
            seed: seed.map_or_else(|| cfg.seed(), Ok)?,
        },
        Command::Oracle { seed } => JobRequest::Oracle {
            seed: seed.map_or_else(|| cfg.seed(), Ok)?,
        },
    })
}

fn print_output(out: &JobOutput) {
    match out {
        JobOutput::Synth {
            videos,
            occluded_frames,
        } => {
            println!("videos {videos} occluded_frames {occluded_frames}")
        }
        JobOutput::Train { final_checkpoint, eval } => {
            if let Some(p) = final_checkpoint {
                println!("checkpoint {}", p.display());
            }
            println!("AP {:.4} AP50 {:.4} AP75 {:.4}", eval.ap, eval.ap50, eval.ap75);
        }
        JobOutput::Eval { .. } | JobOutput::Infer { .. } => {}
        JobOutput::Bench {
            report,
            neighbour_divergence,
        } => {
            println!("{:.3} {:.3} {:.3}", report.fps_full, report.fps_shuffle, report.ratio);
            println!("neighbour divergence {neighbour_divergence:.4}");
        }
        JobOutput::Checks { checks } => {
            let worst = checks.iter().map(|c| c.error).fold(0.0, f64::max);
            let failed = checks.iter().filter(|c| !c.passed).count();
            let verdict = if failed == 0 { "PASS" } else { "FAIL" };
            println!("{} checks, max err {worst:.2e} {verdict}", checks.len());
        }
    }
}

async fn run(cli: Cli) -> anyhow::Result<bool> {
    if cli.dump_config {
        let cfg = cli.config.spec(Vec::new())?.resolve()?;
        print!("{}", cfg.dump());
        return Ok(true);
    }
    let Some(command) = cli.command else {
        bail!("no subcommand given; see --help");
    };
    let req = request(command, &cli.config)?;
    let base = match cli.server {
        Some(url) => url,
        None => {
            let addr = stnet_server::spawn(([127, 0, 0, 1], 0).into())
                .await
                .context("starting the in-process server")?;
            format!("http://{addr}")
        }
    };
    let client = Client::new(base);
    let status = client.run(&req, |line| println!("{line}")).await?;
    match status.state {
        JobState::Succeeded => {
            let out = status.output.context("finished job without output")?;
            print_output(&out);
            Ok(out.passed())
        }
        _ => bail!(status.error.unwrap_or_else(|| "job failed".into())),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).await {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
