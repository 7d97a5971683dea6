//! Training loop and evaluation helpers.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::csi::{derive_seed, split_dataset, ActivityId, CsiSample, Synthesizer};
use crate::error::{Error, Result};
use crate::matching::{pad_targets, set_loss};
use crate::metrics::{evaluate, label_counts, standardize, MetricReport};
use crate::model::{predicted_sets, AmarModel, Quantize};
use crate::nn::{update_running_stats, Forward};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::rvq::init_codebooks;
use crate::scalar::Scalar;

/// Inference batch size; results do not depend on it.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total training loss over the epoch's steps.
    pub loss: f64,
    /// Mean codebook loss part of `loss` (0 without quantization).
    pub rvq_loss: f64,
    pub val_pps: f64,
    pub val_oce: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    /// Parameters of the epoch with the best validation PPS (the initial
    /// model when no epoch ran).
    pub model: AmarModel<S>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl<S> TrainOutcome<S> {
    pub fn best_val_pps(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.history[e - 1].val_pps)
    }
}

/// Final-layer predicted label sets, one per sample.
pub fn predict<S: Scalar>(
    model: &AmarModel<S>,
    samples: &[CsiSample],
    no_rvq: bool,
) -> Result<Vec<Vec<Option<ActivityId>>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<_> = chunk.iter().map(|s| &s.amplitude).collect();
        let x = AmarModel::<S>::batch_input(&refs)?;
        out.extend(predicted_sets(&model.logits(&x, no_rvq)?));
    }
    Ok(out)
}

pub fn evaluate_model<S: Scalar>(
    model: &AmarModel<S>,
    samples: &[CsiSample],
    no_rvq: bool,
    skip_unsupported: bool,
) -> Result<MetricReport> {
    let n_act = model.config.transformer.n_act;
    let pred = predict(model, samples, no_rvq)?;
    let truth: Vec<_> = samples
        .iter()
        .map(|s| label_counts(&s.labels, n_act))
        .collect::<Result<_>>()?;
    let pred: Vec<_> = pred
        .iter()
        .map(|p| standardize(p, n_act))
        .collect::<Result<_>>()?;
    evaluate(&truth, &pred, skip_unsupported)
}

/// Trains from scratch. `seed` fixes initialization, shuffling and layer
/// dropout; `on_epoch` sees each record as it is produced.
pub fn train<S: Scalar>(
    cfg: &RunConfig,
    seed: u64,
    no_rvq: bool,
    train_set: &[CsiSample],
    val_set: &[CsiSample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = AmarModel::<S>::new(cfg.model.clone(), &mut rng)?;
    let tc = &cfg.train;
    let n_q = cfg.model.transformer.queries;
    let n_act = cfg.model.transformer.n_act;
    let rvq = &cfg.model.rvq;
    let mut adam = Adam::new(AdamConfig {
        lr: tc.lr,
        weight_decay: tc.weight_decay,
        ..Default::default()
    });

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, AmarModel<S>)> = None;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut rvq_sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let samples: Vec<&CsiSample> = batch.iter().map(|&i| &train_set[i]).collect();
            let refs: Vec<_> = samples.iter().map(|s| &s.amplitude).collect();
            let x = AmarModel::<S>::batch_input(&refs)?;
            if epoch == 1 && steps == 0 && !no_rvq {
                // data-dependent codebooks from the first batch's features
                let mut fw = Forward::frozen_train(&model.params);
                let xv = fw.graph.constant(x.clone());
                let z = crate::backbone::backbone_forward(
                    &mut fw,
                    &model.config.backbone,
                    crate::model::BACKBONE_PREFIX,
                    xv,
                )?;
                let z = fw.graph.value(z);
                let rows = z.reshape(&[z.shape()[0] * z.shape()[1], z.shape()[2]])?;
                init_codebooks(&mut model.params, rvq, &rows, &mut rng)?;
            }
            let targets: Vec<Vec<usize>> = samples
                .iter()
                .map(|s| pad_targets(&s.labels, n_q, n_act))
                .collect::<Result<_>>()?;
            let dropped: Vec<Vec<bool>> = (0..batch.len())
                .map(|_| (0..rvq.layers).map(|_| rng.gen_bool(rvq.p_drop)).collect())
                .collect();

            let (loss, rvq_part, mut grads, stats) = {
                let mut fw = Forward::new(&model.params, true);
                let xv = fw.graph.constant(x);
                let quantize = if no_rvq {
                    Quantize::Bypass
                } else {
                    Quantize::Rvq
                };
                let out = model.forward(&mut fw, xv, &quantize, &dropped)?;
                let (set, _) = set_loss(&mut fw, &cfg.loss, &out.logits, &targets)?;
                let rvq_part = out
                    .rvq_loss
                    .map_or(0.0, |r| fw.graph.value(r).item().as_f64());
                let total = match out.rvq_loss {
                    Some(r) => fw.graph.add(set, r)?,
                    None => set,
                };
                let value = fw.graph.value(total).item().as_f64();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss is {value} at epoch {epoch}, step {}",
                        steps + 1
                    )));
                }
                fw.graph.backward(total)?;
                (
                    value,
                    rvq_part,
                    fw.graph.param_grads(),
                    std::mem::take(&mut fw.bn_stats),
                )
            };
            if tc.clip_norm > 0.0 {
                let norm = clip_global_norm(&mut grads, tc.clip_norm);
                if !norm.is_finite() {
                    return Err(Error::Numeric(format!(
                        "gradient norm is {norm} at epoch {epoch}, step {}",
                        steps + 1
                    )));
                }
            }
            adam.step(&mut model.params, &grads)?;
            update_running_stats(&mut model.params, &stats)?;
            loss_sum += loss;
            rvq_sum += rvq_part;
            steps += 1;
            debug!("epoch {epoch} step {steps} loss {loss:.5}");
        }
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_model(
                &model,
                val_set,
                no_rvq,
                tc.skip_unsupported,
            )?)
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / steps as f64,
            rvq_loss: rvq_sum / steps as f64,
            val_pps: val.as_ref().map_or(0.0, |r| r.pps),
            val_oce: val.as_ref().map_or(0.0, |r| r.oce),
        };
        info!(
            "epoch {epoch} loss {:.4} val_pps {:.4} val_oce {:.4}",
            record.loss, record.val_pps, record.val_oce
        );
        on_epoch(&record);
        if best
            .as_ref()
            .is_none_or(|(_, pps, _)| record.val_pps > *pps)
        {
            best = Some((epoch, record.val_pps, model.clone()));
        }
        history.push(record);
    }
    Ok(match best {
        Some((epoch, _, model)) => TrainOutcome {
            model,
            history,
            best_epoch: Some(epoch),
        },
        None => TrainOutcome {
            model,
            history,
            best_epoch: None,
        },
    })
}

/// Everything one seed produces: the trained outcome and its test metrics.
#[derive(Clone, Debug)]
pub struct SeedRun<S> {
    pub seed: u64,
    pub outcome: TrainOutcome<S>,
    pub test: MetricReport,
}

/// Synthesizes the dataset for `cfg`, splits it with `seed` and trains.
pub fn run_seed<S: Scalar>(
    cfg: &RunConfig,
    seed: u64,
    no_rvq: bool,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<SeedRun<S>> {
    let synth = Synthesizer::new(cfg.synth.clone())?;
    let data = synth.dataset(cfg.train.samples, cfg.synth.seed)?;
    let (tr, va, te) = split_dataset(data, cfg.train.fractions, seed)?;
    let outcome = train::<S>(cfg, seed, no_rvq, &tr, &va, on_epoch)?;
    let test = evaluate_model(&outcome.model, &te, no_rvq, cfg.train.skip_unsupported)?;
    Ok(SeedRun {
        seed,
        outcome,
        test,
    })
}

/// Seed of run `i` in a multi-seed experiment.
pub fn run_seed_value(base: u64, i: usize) -> u64 {
    if i == 0 {
        base
    } else {
        derive_seed(base, i as u64)
    }
}
