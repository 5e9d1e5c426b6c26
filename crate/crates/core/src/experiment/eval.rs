//! Whole-volume inference and evaluation against a manifest.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::inference::{segment_volume, InferenceOptions, InferenceStats};
use crate::metrics::{AggregateReport, CaseMetrics};
use crate::model::Model;
use crate::volume::{read_svol, write_svol, CaseEntry, Manifest, Split, Volume};

use super::write_atomic;

/// Evaluation report plus whether every case had a prediction.
pub type EvalOutcome = AggregateReport;

/// File name of the prediction for `case` inside a prediction directory.
pub fn prediction_path(dir: &Path, case: &CaseEntry) -> PathBuf {
    dir.join(format!("{}.svol", case.id))
}

/// Segments every case of `split` with `model` and scores it.
pub fn evaluate_model(model: &Model<f32>, manifest: &Manifest, split: Split, options: &InferenceOptions) -> Result<AggregateReport> {
    let mut cases = Vec::new();
    for case in manifest.split(split) {
        let raw: Volume<f32> = read_svol(manifest.image_path(case))?;
        let reference: Volume<u8> = read_svol(manifest.label_path(case))?;
        let (pred, _) = segment_volume(model, &raw, options)?;
        cases.push(CaseMetrics::compute(&case.id, &pred, &reference)?);
    }
    if cases.is_empty() {
        return Err(Error::InvalidArgument(format!("manifest has no {split} cases")));
    }
    AggregateReport::new(cases, Vec::new())
}

/// Segments one SVOL volume with a checkpoint and writes the label volume
/// plus a JSON sidecar (`<out>.json`) with the inference statistics.
pub fn infer_file(checkpoint: &Path, input: &Path, out: &Path, options: &InferenceOptions) -> Result<InferenceStats> {
    let model = Model::<f32>::load(checkpoint)?;
    infer_with(&model, input, out, options)
}

pub(crate) fn infer_with(model: &Model<f32>, input: &Path, out: &Path, options: &InferenceOptions) -> Result<InferenceStats> {
    let raw: Volume<f32> = read_svol(input)?;
    let (labels, stats) = segment_volume(model, &raw, options)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_svol(&labels, out)?;
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".json");
    let json = serde_json::to_vec_pretty(&stats).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(Path::new(&sidecar), &json)?;
    Ok(stats)
}

/// Writes `<id>.svol` predictions for every case of `split` into `out_dir`.
pub fn predict_manifest(model: &Model<f32>, manifest: &Manifest, split: Split, out_dir: &Path, options: &InferenceOptions) -> Result<usize> {
    let mut n = 0;
    for case in manifest.split(split) {
        infer_with(model, &manifest.image_path(case), &prediction_path(out_dir, case), options)?;
        n += 1;
    }
    Ok(n)
}

/// Scores `<id>.svol` files in `pred_dir` against the `split` cases of the
/// manifest (all cases when `split` is `None`). Cases without a prediction
/// are listed in the report's `missing` field.
pub fn eval_predictions(pred_dir: &Path, manifest: &Manifest, split: Option<Split>) -> Result<EvalOutcome> {
    let mut cases = Vec::new();
    let mut missing = Vec::new();
    for case in manifest.cases.iter().filter(|c| split.map_or(true, |s| c.split == s)) {
        let path = prediction_path(pred_dir, case);
        if !path.exists() {
            missing.push(case.id.clone());
            continue;
        }
        let pred: Volume<u8> = read_svol(&path)?;
        let reference: Volume<u8> = read_svol(manifest.label_path(case))?;
        cases.push(CaseMetrics::compute(&case.id, &pred, &reference)?);
    }
    if cases.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no predictions found in {} for {} listed cases",
            pred_dir.display(),
            missing.len()
        )));
    }
    AggregateReport::new(cases, missing)
}
