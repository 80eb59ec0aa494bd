//! Command-line dispatch. Exit codes: 0 success, 1 runtime failure, 2 usage
//! error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attention::AttentionRecord;
use crate::config::Config;
use crate::data::{compute_metrics, read_boxes, read_sequence, synth_sequence, write_boxes, write_pgm, write_sequence, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::selfcheck;
use crate::tracker::Tracker;
use crate::train::{load_model, save_model, train};

#[derive(Parser, Debug)]
#[command(name = "transt", version, about = "Feature-fusion attention tracker at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the gradient and invariant suite.
    Selfcheck,
    /// Write a synthetic sequence.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        distractors: usize,
        #[arg(long)]
        occluder: bool,
    },
    /// Train a model on pairs from one sequence.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track a sequence from its first annotated box.
    Track {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-frame attention maps as PGM files into this directory.
        #[arg(long)]
        dump_attn: Option<PathBuf>,
    },
    /// Score a results file against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// `Ok(false)` reports a completed command whose checks failed.
fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Selfcheck => {
            let mut all = true;
            for suite in selfcheck::run_all() {
                println!("{suite}");
                all &= suite.passed;
            }
            Ok(all)
        }
        Command::Synth { seed, frames, out, distractors, occluder } => {
            let spec = SynthSpec { seed, frame_count: frames, distractor_count: distractors, occluder, ..SynthSpec::default() };
            write_sequence(&out, &synth_sequence(&spec)?)?;
            Ok(true)
        }
        Command::TrainToy { config, data, steps, out, seed } => {
            let mut cfg = Config::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let seq = read_sequence(&data)?;
            let params = train(&seq, &cfg, steps, |step, stats| {
                if (step + 1) % 100 == 0 || step + 1 == steps {
                    eprintln!(
                        "step {:>6}  loss {:.5}  cls {:.5}  reg {:.5}",
                        step + 1,
                        stats.loss,
                        stats.classification,
                        stats.regression
                    );
                }
            })?;
            save_model(&out, &params)?;
            Ok(true)
        }
        Command::Track { config, model, seq, out, dump_attn } => {
            let cfg = Config::load(&config)?;
            let params = load_model(&model, &cfg.model)?;
            let seq = read_sequence(&seq)?;
            let boxes = track_sequence(&cfg, &params, &seq, dump_attn.as_deref())?;
            write_boxes(&out, &boxes)?;
            Ok(true)
        }
        Command::Eval { results, gt, out } => {
            let report = compute_metrics(&read_boxes(&results)?, &read_boxes(&gt)?)?;
            fs::write(&out, report.to_json()).map_err(|e| Error::io(format!("writing {}", out.display()), e))?;
            print!("{}", report.to_text());
            Ok(true)
        }
    }
}

/// One box per frame; frame 0 is the initial annotation.
fn track_sequence(
    cfg: &Config,
    params: &ModelParams,
    seq: &crate::data::Sequence,
    dump_attn: Option<&Path>,
) -> Result<Vec<crate::bbox::BBox>> {
    if let Some(dir) = dump_attn {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut tracker = Tracker::new(cfg, params);
    tracker.init(&seq.frames[0], &seq.gt[0])?;
    let mut boxes = vec![seq.gt[0]];
    for (i, frame) in seq.frames.iter().enumerate().skip(1) {
        let result = tracker.track(frame, dump_attn.is_some())?;
        if let Some(dir) = dump_attn {
            let grids = (cfg.tracker.template_grid(), cfg.tracker.search_grid());
            for rec in &result.records {
                dump_record(dir, i, rec, grids)?;
            }
        }
        boxes.push(result.bbox);
    }
    Ok(boxes)
}

/// Query and key/value grid sides of an attention site.
fn site_grids(tag: &str, (template, search): (usize, usize)) -> (usize, usize) {
    if tag.ends_with("search_self") {
        (search, search)
    } else if tag.ends_with("template_self") {
        (template, template)
    } else if tag.ends_with("template_cross") {
        (template, search)
    } else {
        (search, template)
    }
}

/// Head-averaged weights of the center query, min-max scaled to 0..=255.
fn dump_record(dir: &Path, frame: usize, rec: &AttentionRecord, grids: (usize, usize)) -> Result<()> {
    let (q, kv) = site_grids(&rec.layer_tag, grids);
    let row = rec.mean_row((q / 2) * q + q / 2);
    if row.len() != kv * kv {
        return Err(Error::Contract(format!("{}: {} weights for a {kv}×{kv} grid", rec.layer_tag, row.len())));
    }
    let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let pixels: Vec<u8> = row
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 })
        .collect();
    write_pgm(&dir.join(format!("f{frame:06}_{}.pgm", rec.layer_tag)), kv, kv, &pixels)
}
