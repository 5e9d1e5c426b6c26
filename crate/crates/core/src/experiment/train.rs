//! The training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{write_atomic, Ablation, ExperimentConfig, TrainingSet};
use crate::error::{Error, Result};
use crate::losses::{total_loss_var, LossValue};
use crate::metrics::ClassSummary;
use crate::model::{Model, ModelConfig};
use crate::rng::{indexed_stream, stream, Stream};
use crate::tensor::{Graph, ParamId, SgdMomentum};
use crate::volume::{Manifest, Split, TrainingSample};

/// Mean loss breakdown of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub dice: f64,
    /// Absent when the DCD term is disabled.
    pub dcd: Option<f64>,
    pub lambda: Option<f64>,
    pub stacks: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub ablation: Ablation,
    pub model: ModelConfig,
    pub params: usize,
    pub lambda: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub organ: Option<ClassSummary>,
    pub lesion: Option<ClassSummary>,
}

/// Window order of every epoch: successive shuffles of all windows,
/// truncated to `stacks_per_epoch`. Depends only on the seed.
fn epoch_order(rng: &mut crate::rng::Rng, windows: usize, stacks: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(stacks);
    while order.len() < stacks {
        let mut perm: Vec<usize> = (0..windows).collect();
        perm.shuffle(rng);
        order.extend(perm.into_iter().take(stacks - order.len()));
    }
    order
}

type SampleGrads = (LossValue, Vec<(ParamId, Vec<f64>)>);

fn sample_gradients(model: &Model<f32>, s: &TrainingSample, use_dcd: bool, scale: f64) -> Result<SampleGrads> {
    let mut g = Graph::new();
    let x = g.constant(s.input.clone());
    let out = model.forward_graph(&mut g, x)?;
    let target = s.target_one_hot::<f32>(model.config().classes)?;
    let (loss, value) = total_loss_var(&mut g, out.probs, &target, use_dcd)?;
    if !value.total.is_finite() {
        return Ok((value, Vec::new()));
    }
    let scaled = g.scale(loss, scale);
    Ok((value, g.param_gradients(scaled)?))
}

/// Trains one model on `set` with the schedule of `cfg`. With `run_dir`,
/// the latest checkpoint is written there after every epoch.
pub fn train_in_memory(
    cfg: &ExperimentConfig,
    seed: u64,
    set: &TrainingSet,
    run_dir: Option<&Path>,
) -> Result<(Model<f32>, RunRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let model_cfg = cfg.model_config();
    let use_dcd = cfg.ablation.dcd;
    let tc = &cfg.train;
    let mut model = Model::<f32>::build(model_cfg.clone(), seed)?;
    let mut opt = SgdMomentum::new(model.params(), tc.lr0, tc.momentum)?;
    let mut order_rng = stream(seed, Stream::DataOrder);
    let stacks = tc.stacks_per_epoch.unwrap_or(set.len());
    let checkpoint = run_dir.map(|d| d.join("checkpoint.ckpt"));
    let mut record = RunRecord {
        label: cfg.ablation.label(),
        seed,
        ablation: cfg.ablation,
        params: model.count_params(),
        model: model_cfg,
        lambda: None,
        epochs: Vec::new(),
        wall_seconds: 0.0,
        checkpoint: checkpoint.clone(),
        report: None,
        organ: None,
        lesion: None,
    };
    let mut counter = 0u64;
    for epoch in 0..tc.epochs {
        let t0 = Instant::now();
        let lr = tc.lr_at(epoch);
        opt.set_lr(lr)?;
        let order = epoch_order(&mut order_rng, set.len(), stacks);
        let (mut sum_total, mut sum_dice, mut sum_dcd, mut lambda) = (0.0, 0.0, 0.0, None);
        for (batch_no, batch) in order.chunks(tc.batch_size).enumerate() {
            let samples = batch
                .iter()
                .map(|&w| {
                    let mut rng = indexed_stream(seed, Stream::Augment, counter);
                    counter += 1;
                    set.sample(w, &cfg.augment, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let results = samples
                .par_iter()
                .map(|s| sample_gradients(&model, s, use_dcd, scale))
                .collect::<Result<Vec<_>>>()?;
            model.params_mut().zero_grad();
            for (value, grads) in results {
                let finite = value.total.is_finite() && grads.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()));
                if !finite {
                    return Err(Error::Numeric(format!(
                        "non-finite loss or gradient at epoch {epoch}, batch {batch_no} (lr {lr:e}, loss {})",
                        value.total
                    )));
                }
                for (id, g) in &grads {
                    model.params_mut().accumulate_grad(*id, g)?;
                }
                sum_total += value.total;
                sum_dice += value.dice;
                sum_dcd += value.dcd.unwrap_or(0.0);
                lambda = value.lambda;
            }
            opt.step(model.params_mut())?;
            log::debug!("epoch {epoch} batch {batch_no}: loss {:.6}", sum_total / order.len() as f64);
        }
        let n = order.len() as f64;
        let rec = EpochRecord {
            epoch,
            lr,
            total: sum_total / n,
            dice: sum_dice / n,
            dcd: use_dcd.then_some(sum_dcd / n),
            lambda,
            stacks: order.len(),
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} seed {seed} epoch {epoch}: lr {lr:.3e} loss {:.5} dice {:.5}{} ({:.1}s)",
            record.label,
            rec.total,
            rec.dice,
            rec.dcd.map(|d| format!(" dcd {d:.5}")).unwrap_or_default(),
            rec.seconds
        );
        record.lambda = lambda;
        record.epochs.push(rec);
        if let Some(path) = &checkpoint {
            write_atomic(path, &model.to_checkpoint_bytes()?)?;
        }
    }
    record.wall_seconds = started.elapsed().as_secs_f64();
    Ok((model, record))
}

/// Directory of one run below the experiment output directory.
pub(crate) fn run_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    let slug: String = cfg
        .ablation
        .label()
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    let slug = slug.split('_').filter(|s| !s.is_empty()).collect::<Vec<_>>().join("_");
    cfg.out_dir.join(slug).join(format!("seed_{seed}"))
}

/// Loads the manifest of `cfg`, trains with `seed`, evaluates on the
/// validation split and writes `checkpoint.ckpt`, `report.txt` and
/// `run.json` into the run directory.
pub fn train(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let set = TrainingSet::load(&manifest, Split::Train, cfg.model.c_in, &cfg.inference)?;
    let dir = run_dir(cfg, seed);
    let (model, mut record) = train_in_memory(cfg, seed, &set, Some(&dir))?;
    if manifest.split(Split::Val).next().is_some() {
        let report = super::evaluate_model(&model, &manifest, Split::Val, &cfg.inference)?;
        let path = dir.join("report.txt");
        write_atomic(&path, report.to_text().as_bytes())?;
        record.report = Some(path);
        record.organ = Some(report.organ);
        record.lesion = Some(report.lesion);
    }
    let json = serde_json::to_vec_pretty(&record).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&dir.join("run.json"), &json)?;
    Ok(record)
}
