//! Blocking implementations of the job operations.

use std::fmt::Write as _;
use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stnet_api::{InferMode, JobOutput, JobRequest, RunConfig};
use stnet_core::detection::ScoredBoxes;
use stnet_core::inference::{bench_compare, divergence, Predictor};
use stnet_core::numerics::Precision;
use stnet_core::synthdata::{read_dataset, synthesize, Dataset, SyntheticVideo, VideoOptions};
use stnet_core::training::{evaluate, train};
use stnet_core::transformer::{load_checkpoint, Net};
use stnet_core::verify::{gradient_suite, oracle_suite, CheckOutcome};
use stnet_core::{Error, Result};

/// Runs one job to completion, reporting progress lines through `log`.
pub fn run(req: &JobRequest, log: &mut dyn FnMut(String)) -> Result<JobOutput> {
    match req {
        JobRequest::Synth {
            out,
            seed,
            videos,
            height,
            width,
            frames,
            difficulty,
        } => {
            let opts = VideoOptions {
                height: *height,
                width: *width,
                frames: *frames,
                difficulty: *difficulty,
            };
            let ds = synthesize(*seed, *videos, &opts)?;
            stnet_core::synthdata::write_dataset(&ds, out)?;
            let occluded = ds
                .videos
                .iter()
                .map(|v| v.occluded.as_ref().map_or(0, |o| o.iter().filter(|&&x| x).count()))
                .sum();
            log(format!("wrote {} videos to {}", ds.videos.len(), out.display()));
            Ok(JobOutput::Synth {
                videos: ds.videos.len(),
                occluded_frames: occluded,
            })
        }
        JobRequest::Train { config } => {
            let cfg = config.resolve()?;
            run_train(&cfg, log)
        }
        JobRequest::Eval { config, checkpoint } => {
            let cfg = config.resolve()?;
            let net = load_checkpoint::<f32>(cfg.net, checkpoint)?;
            let ds = read_dataset(&cfg.data_dir)?;
            let (_, test) = ds.split(cfg.train_videos);
            let eval = evaluate(&net, test, cfg.seed, cfg.eval_stride)?;
            let frames = test
                .iter()
                .map(|v| (1..v.len().saturating_sub(1)).step_by(cfg.eval_stride).count())
                .sum();
            log(format!("AP {:.4} AP50 {:.4} AP75 {:.4}", eval.ap, eval.ap50, eval.ap75));
            Ok(JobOutput::Eval { eval, frames })
        }
        JobRequest::Infer {
            config,
            checkpoint,
            video,
            mode,
            report,
            top,
        } => {
            let cfg = config.resolve()?;
            let net = load_checkpoint::<f32>(cfg.net, checkpoint)?;
            let ds = read_dataset(&cfg.data_dir)?;
            let v = ds
                .videos
                .get(*video)
                .ok_or_else(|| Error::Config(format!("video {video} not in a {}-video dataset", ds.videos.len())))?;
            let predictor = Predictor::new(net, cfg.seed);
            let dets = predictor.infer_video(v, *mode == InferMode::Shuffle)?;
            let (text, frames, detections) = format_report(
                &dets.iter().map(|d| d.as_ref().map(|d| d.scored())).collect::<Vec<_>>(),
                *top,
            );
            fs::write(report, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", report.display())))?;
            let counts = predictor.counts();
            log(format!(
                "{frames} frames, {detections} detections; passes: stem {} encoder {} decoder {}",
                counts.stem, counts.encoder, counts.decoder
            ));
            Ok(JobOutput::Infer { frames, detections })
        }
        JobRequest::Bench {
            config,
            checkpoint,
            triples,
            repetitions,
        } => {
            let cfg = config.resolve()?;
            let net = match checkpoint {
                Some(path) => load_checkpoint::<f32>(cfg.net, path)?,
                None => Net::init(cfg.net, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
            };
            let videos = bench_videos(&cfg, *triples)?;
            let predictor = Predictor::new(net, cfg.seed);
            let report = bench_compare(&predictor, &videos, *triples, *repetitions)?;
            let neighbour_divergence = neighbour_divergence(&predictor, &videos, *triples)?;
            log(format!(
                "fps_full {:.2} fps_shuffle {:.2} ratio {:.3}",
                report.fps_full, report.fps_shuffle, report.ratio
            ));
            Ok(JobOutput::Bench {
                report,
                neighbour_divergence,
            })
        }
        JobRequest::Gradcheck { seed } => checks(gradient_suite(*seed)?, "max rel err", log),
        JobRequest::Oracle { seed } => checks(oracle_suite(*seed)?, "max abs err", log),
    }
}

fn checks(checks: Vec<CheckOutcome>, label: &str, log: &mut dyn FnMut(String)) -> Result<JobOutput> {
    for c in &checks {
        log(format!(
            "{}: {label} {:.2e} {}",
            c.name,
            c.error,
            if c.passed { "PASS" } else { "FAIL" }
        ));
    }
    Ok(JobOutput::Checks { checks })
}

fn run_train(cfg: &RunConfig, log: &mut dyn FnMut(String)) -> Result<JobOutput> {
    let ds = read_dataset(&cfg.data_dir)?;
    let (train_set, test_set) = ds.split(cfg.train_videos);
    let out = cfg.out_dir.as_path();
    let mut emit = |e: &stnet_core::training::EpochLog| log(e.to_string());
    let eval = match cfg.precision {
        Precision::F32 => train::<f32>(cfg, train_set, test_set, Some(out), &mut emit)?.eval,
        Precision::F64 => train::<f64>(cfg, train_set, test_set, Some(out), &mut emit)?.eval,
    };
    fs::write(out.join("config.txt"), cfg.dump()).map_err(|e| Error::Config(format!("cannot write config: {e}")))?;
    Ok(JobOutput::Train {
        final_checkpoint: Some(out.join("final.stn1")),
        eval,
    })
}

/// Dataset videos when `data_dir` holds a dataset, generated 64x64 videos otherwise.
fn bench_videos(cfg: &RunConfig, triples: usize) -> Result<Vec<SyntheticVideo>> {
    if cfg.data_dir.join("meta.txt").exists() {
        return Ok(read_dataset(&cfg.data_dir)?.videos);
    }
    let opts = VideoOptions::default();
    let per_video = (opts.frames - 4).div_ceil(3);
    let ds: Dataset = synthesize(cfg.seed, triples.div_ceil(per_video), &opts)?;
    Ok(ds.videos)
}

fn neighbour_divergence(p: &Predictor, videos: &[SyntheticVideo], triples: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for v in videos {
        for k in (2..v.len().saturating_sub(2)).step_by(3) {
            if n >= 2 * triples {
                break;
            }
            let s = p.shuffle_infer(v, k)?;
            total += divergence(&s[0], &p.full_infer(v, k - 1)?);
            total += divergence(&s[2], &p.full_infer(v, k + 1)?);
            n += 2;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// `frame <i> class <c> score <s> box <cx> <cy> <w> <h>` lines, best first within a frame.
pub fn format_report(frames: &[Option<ScoredBoxes>], top: usize) -> (String, usize, usize) {
    let mut text = String::new();
    let (mut n_frames, mut n_det) = (0, 0);
    for (i, f) in frames.iter().enumerate() {
        let Some(s) = f else { continue };
        n_frames += 1;
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]).then(a.cmp(&b)));
        for &q in order.iter().take(top) {
            let b = s.boxes[q];
            let _ = writeln!(
                text,
                "frame {i} class {} score {:.6} box {:.6} {:.6} {:.6} {:.6}",
                s.labels[q], s.scores[q], b[0], b[1], b[2], b[3]
            );
            n_det += 1;
        }
    }
    (text, n_frames, n_det)
}
