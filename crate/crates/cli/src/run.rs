use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use amar::config::RunConfig;
use amar::csi::{load_tensor_file, split_dataset, CsiSample, Synthesizer};
use amar::metrics::{render_records, render_table, summarize, MetricReport};
use amar::train::{evaluate_model, run_seed, run_seed_value, EpochRecord};
use amar::{Error, Model, Real, Result};
use clap::{Args, ValueEnum};
use log::info;

use crate::Common;

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}.ckpt"))
}

/// Synthesized dataset for `cfg`, split with `seed` into train/val/test.
pub fn splits(
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Vec<CsiSample>, Vec<CsiSample>, Vec<CsiSample>)> {
    let data = Synthesizer::new(cfg.synth.clone())?.dataset(cfg.train.samples, cfg.synth.seed)?;
    split_dataset(data, cfg.train.fractions, seed)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn render_history(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,rvq_loss,val_pps,val_oce\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch, r.loss, r.rvq_loss, r.val_pps, r.val_oce
        );
    }
    s
}

fn report_line(seed: u64, r: &MetricReport) -> String {
    format!(
        "seed {seed}: pps {:.4} oce {:.4} macro_f1 {:.4} ({} samples)",
        r.pps, r.oce, r.macro_f1, r.samples
    )
}

pub fn train(common: &Common, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&common.out)?;
    write(&common.out.join("config.toml"), &cfg.to_toml())?;
    let mut reports = Vec::with_capacity(cfg.seeds);
    for i in 0..cfg.seeds {
        let seed = run_seed_value(cfg.seed, i);
        info!("seed {seed} ({}/{})", i + 1, cfg.seeds);
        let mut history = Vec::new();
        let run = match run_seed::<Real>(cfg, seed, common.no_rvq, |r| history.push(r.clone())) {
            Ok(run) => run,
            Err(e @ Error::Numeric(_)) => {
                let path = common.out.join(format!("seed-{seed}.failure.txt"));
                write(
                    &path,
                    &format!("{e}\n\n{}\n{}", render_history(&history), cfg.to_toml()),
                )?;
                eprintln!("diagnostic snapshot written to {}", path.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let ckpt = checkpoint_path(&common.out, seed);
        run.outcome.model.save(&ckpt)?;
        write(
            &common.out.join(format!("seed-{seed}.log.csv")),
            &render_history(&run.outcome.history),
        )?;
        match run.outcome.best_epoch {
            Some(e) => info!(
                "seed {seed}: best epoch {e}, validation pps {:.4}, saved {}",
                run.outcome.best_val_pps().unwrap_or(0.0),
                ckpt.display()
            ),
            None => info!(
                "seed {seed}: no epochs, untrained checkpoint {}",
                ckpt.display()
            ),
        }
        println!("{}", report_line(seed, &run.test));
        reports.push(run.test);
    }
    let summary = summarize(&reports);
    print!("{}", render_table(&summary, reports.len()));
    write(&common.out.join("metrics.txt"), &render_records(&summary))?;
    Ok(())
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file, or a training output directory holding one per seed.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Evaluate on a `.csit` file instead of the synthesized split.
    #[arg(long)]
    data: Option<PathBuf>,
}

pub fn load_model(cfg: &RunConfig, path: &Path, seed: u64) -> Result<Model> {
    let file = if path.is_dir() {
        checkpoint_path(path, seed)
    } else {
        path.to_path_buf()
    };
    Model::load(cfg.model.clone(), &file).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", file.display())),
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", file.display())),
        other => other,
    })
}

pub fn eval(common: &Common, cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let file_data = match &args.data {
        Some(p) => Some(load_tensor_file(p)?.collect::<Result<Vec<CsiSample>>>()?),
        None => None,
    };
    let mut reports = Vec::with_capacity(cfg.seeds);
    for i in 0..cfg.seeds {
        let seed = run_seed_value(cfg.seed, i);
        let model = load_model(cfg, &args.checkpoint, seed)?;
        let samples = match &file_data {
            Some(d) => d.clone(),
            None => {
                let (tr, va, te) = splits(cfg, seed)?;
                match args.split {
                    Split::Train => tr,
                    Split::Val => va,
                    Split::Test => te,
                }
            }
        };
        let r = evaluate_model(&model, &samples, common.no_rvq, cfg.train.skip_unsupported)?;
        println!("{}", report_line(seed, &r));
        reports.push(r);
    }
    let summary = summarize(&reports);
    print!("{}", render_table(&summary, reports.len()));
    print!("{}", render_records(&summary));
    Ok(())
}
