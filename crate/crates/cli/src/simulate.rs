use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use amar::config::RunConfig;
use amar::edge_cloud::{
    bandwidth_report, connect_tcp, loopback, serve_tcp, stream_frames, LinkStats, PredictionRecord,
};
use amar::metrics::{evaluate, label_counts, standardize};
use amar::train::predict;
use amar::{CloudRole, EdgeRole, Error, Result};
use clap::{Args, ValueEnum};
use log::info;

use crate::run::{load_model, splits};
use crate::Common;

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Edge,
    Cloud,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transport {
    /// Both roles in this process over an in-memory stream.
    Loopback,
    /// One role per process over TCP.
    Socket,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Checkpoint file, or a training output directory (uses the base seed's).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Required with `--transport socket`.
    #[arg(long, value_enum)]
    role: Option<Role>,
    #[arg(long, value_enum, default_value_t = Transport::Loopback)]
    transport: Transport,
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: String,
    /// Test-split samples the edge sends.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Cloud exits after this many edge connections (serves forever if unset).
    #[arg(long)]
    connections: Option<usize>,
}

pub fn simulate(common: &Common, cfg: &RunConfig, args: &SimulateArgs) -> Result<()> {
    let model = load_model(cfg, &args.checkpoint, cfg.seed)?;
    let t = cfg.synth.time_len;
    let m = &cfg.model;
    let report = bandwidth_report(
        cfg.tokens(),
        m.backbone.d(),
        m.rvq.layers,
        m.rvq.codebook_size,
        32,
    )?;
    match (args.transport, args.role) {
        (Transport::Socket, Some(Role::Cloud)) => {
            let cloud = Arc::new(CloudRole::new(model, t)?);
            let listener = TcpListener::bind(&args.addr)
                .map_err(|e| Error::Transport(format!("bind {}: {e}", args.addr)))?;
            info!("cloud listening on {}", args.addr);
            let stats = serve_tcp(&listener, cloud, args.connections)?;
            print_stats(&stats);
            Ok(())
        }
        (Transport::Socket, None) => Err(Error::Config(
            "--transport socket needs --role edge or --role cloud".into(),
        )),
        (transport, role) => {
            if transport == Transport::Loopback && role.is_some() {
                info!("loopback runs both roles; --role ignored");
            }
            let (_, _, test) = splits(cfg, cfg.seed)?;
            let samples = &test[..args.samples.min(test.len())];
            let edge = EdgeRole::new(model.clone(), t)?;
            let n_q = cfg.model.transformer.queries;
            let start = Instant::now();
            let (records, stats) = if transport == Transport::Loopback {
                let cloud = Arc::new(CloudRole::new(model.clone(), t)?);
                let refs: Vec<_> = samples.iter().map(|s| &s.amplitude).collect();
                loopback(&edge, cloud, &refs)?
            } else {
                let frames = samples
                    .iter()
                    .map(|s| edge.process(&s.amplitude))
                    .collect::<Result<Vec<_>>>()?;
                let addr = args.addr.clone();
                stream_frames(
                    move || connect_tcp(&addr, Duration::from_secs(10)),
                    &frames,
                    n_q,
                    3,
                )?
            };
            let secs = start.elapsed().as_secs_f64();
            print_stats(&stats);
            println!(
                "{} frames in {secs:.2} s ({:.1} frames/s)",
                records.len(),
                records.len() as f64 / secs.max(1e-9)
            );
            summarize_records(cfg, &model, samples, &records, common.no_rvq)?;
            println!("bandwidth: {report}");
            Ok(())
        }
    }
}

fn print_stats(s: &LinkStats) {
    println!(
        "{} frames, {} frame bytes, {} record bytes, {} rejected",
        s.frames, s.frame_bytes, s.record_bytes, s.rejected
    );
}

/// Metrics of the split predictions and their agreement with the monolithic model.
fn summarize_records(
    cfg: &RunConfig,
    model: &amar::Model,
    samples: &[amar::csi::CsiSample],
    records: &[PredictionRecord],
    no_rvq: bool,
) -> Result<()> {
    let n_act = cfg.model.transformer.n_act;
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (r, s) in records.iter().zip(samples) {
        if let Some(q) = r.queries() {
            truth.push(label_counts(&s.labels, n_act)?);
            pred.push(standardize(&q, n_act)?);
        }
    }
    if truth.is_empty() {
        println!("no accepted frames");
        return Ok(());
    }
    let r = evaluate(&truth, &pred, cfg.train.skip_unsupported)?;
    println!(
        "split predictions: pps {:.4} oce {:.4} macro_f1 {:.4}",
        r.pps, r.oce, r.macro_f1
    );
    if !no_rvq {
        let direct = predict(model, samples, false)?;
        let agree = records
            .iter()
            .zip(&direct)
            .filter(|(r, d)| r.queries().as_ref() == Some(*d))
            .count();
        println!(
            "agreement with the monolithic model: {agree}/{}",
            records.len()
        );
    }
    Ok(())
}
