//! Loading and windowing of training cases.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::inference::InferenceOptions;
use crate::rng::Rng;
use crate::volume::{
    augment, read_svol, resample_z_labels, stack_at, window_plans, AugmentConfig, CaseEntry, Manifest, Split,
    TrainingSample, Volume, WindowPlan,
};

/// Reads one case and applies the inference preprocessing; labels follow
/// any z resampling by nearest slice.
pub fn load_case(manifest: &Manifest, case: &CaseEntry, options: &InferenceOptions) -> Result<(Volume<f32>, Volume<u8>)> {
    let raw: Volume<f32> = read_svol(manifest.image_path(case))?;
    let labels: Volume<u8> = read_svol(manifest.label_path(case))?;
    if raw.dims() != labels.dims() {
        return Err(shape_err!("case {}: image {:?} and labels {:?} differ", case.id, raw.dims(), labels.dims()));
    }
    let image = options.preprocess(&raw)?;
    let labels = if image.dims()[2] == labels.dims()[2] {
        labels
    } else {
        resample_z_labels(&labels, image.spacing()[2])?
    };
    if image.dims() != labels.dims() {
        return Err(shape_err!("case {}: resampled image and labels disagree", case.id));
    }
    Ok((image, labels))
}

/// Preprocessed training volumes and every unpadded stride-1 window.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    cases: Vec<(Volume<f32>, Volume<u8>)>,
    windows: Vec<(usize, WindowPlan)>,
}

impl TrainingSet {
    pub fn from_volumes(cases: Vec<(Volume<f32>, Volume<u8>)>, c_in: usize) -> Result<Self> {
        let mut windows = Vec::new();
        for (i, (image, _)) in cases.iter().enumerate() {
            for plan in window_plans(image.dims()[2], c_in, 1, false)? {
                windows.push((i, plan));
            }
        }
        if windows.is_empty() {
            return Err(shape_err!("no training windows"));
        }
        Ok(TrainingSet { cases, windows })
    }

    /// The `split` cases of `manifest`.
    pub fn load(manifest: &Manifest, split: Split, c_in: usize, options: &InferenceOptions) -> Result<Self> {
        let entries: Vec<&CaseEntry> = manifest.split(split).collect();
        let cases = entries
            .par_iter()
            .map(|c| load_case(manifest, c, options))
            .collect::<Result<Vec<_>>>()?;
        Self::from_volumes(cases, c_in)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn cases(&self) -> usize {
        self.cases.len()
    }

    /// Window `index` without augmentation.
    pub fn window(&self, index: usize) -> Result<TrainingSample> {
        let (case, plan) = &self.windows[index];
        let (image, labels) = &self.cases[*case];
        stack_at(image, labels, plan)
    }

    /// Window `index`, rescaled and cropped with draws from `rng`.
    pub fn sample(&self, index: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Result<TrainingSample> {
        augment(&self.window(index)?, cfg, rng)
    }
}
