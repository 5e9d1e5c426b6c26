//! Sliding-window volumetric prediction and postprocessing.
//!
//! Every stride-1 window of a (replication-padded) volume is run through the
//! model; the class probabilities of each predicted slice are summed at its
//! global z position, divided by the number of windows that predicted it and
//! renormalised per voxel.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::model::{Model, OUTPUT_STRIDE};
use crate::tensor::{kernels, Tensor};
use crate::volume::{hu_window, resample_z, stack_at, window_plans, Volume, HU_HI, HU_LO};

/// Anything that maps a `[1, c_in, H, W]` stack to class probabilities
/// `[c_in - 2, classes, H, W]`.
pub trait SlicePredictor: Sync {
    fn c_in(&self) -> usize;
    fn classes(&self) -> usize;
    fn predict(&self, stack: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl SlicePredictor for Model<f32> {
    fn c_in(&self) -> usize {
        self.config().c_in
    }

    fn classes(&self) -> usize {
        self.config().classes
    }

    fn predict(&self, stack: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(stack)
    }
}

/// Predicts equal logits for every class.
#[derive(Debug, Clone, Copy)]
pub struct ConstantLogits {
    pub c_in: usize,
    pub classes: usize,
}

impl SlicePredictor for ConstantLogits {
    fn c_in(&self) -> usize {
        self.c_in
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn predict(&self, stack: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [_, _, h, w] = stack.dims4()?;
        let c_out = self.c_in - 2;
        let logits = vec![0.0f32; c_out * self.classes * h * w];
        let probs = kernels::softmax_forward(&logits, c_out, self.classes, h * w);
        Tensor::new(vec![c_out, self.classes, h, w], probs)
    }
}

/// Per-voxel class probabilities of a whole volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    classes: usize,
    /// Slice-major, then class, then the `Y x X` plane.
    data: Vec<f32>,
    coverage: Vec<usize>,
}

impl ProbVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], classes: usize, data: Vec<f32>, coverage: Vec<usize>) -> Result<Self> {
        let n = dims.iter().product::<usize>() * classes;
        if data.len() != n || coverage.len() != dims[2] {
            return Err(shape_err!(
                "{} probabilities and {} coverage counts do not fit {dims:?} x {classes}",
                data.len(),
                coverage.len()
            ));
        }
        Ok(ProbVolume {
            dims,
            spacing,
            classes,
            data,
            coverage,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Number of windows that predicted each slice.
    pub fn coverage(&self) -> &[usize] {
        &self.coverage
    }

    pub fn prob(&self, x: usize, y: usize, z: usize, class: usize) -> f32 {
        let [nx, ny, _] = self.dims;
        self.data[((z * self.classes + class) * ny + y) * nx + x]
    }
}

/// Windows evaluated per parallel batch; bounds peak memory.
const CHUNK: usize = 16;

/// Sliding-window prediction over a preprocessed volume whose in-plane
/// extents are multiples of 16.
pub fn sliding_window_predict(model: &dyn SlicePredictor, volume: &Volume<f32>) -> Result<ProbVolume> {
    let [nx, ny, nz] = volume.dims();
    if nx % OUTPUT_STRIDE != 0 || ny % OUTPUT_STRIDE != 0 {
        return Err(shape_err!("in-plane extents {nx}x{ny} must be multiples of {OUTPUT_STRIDE}"));
    }
    let (c_in, classes) = (model.c_in(), model.classes());
    let plans = window_plans(nz, c_in, 1, true)?;
    let labels = Volume::filled(volume.dims(), volume.spacing(), 0u8)?;
    let plane = nx * ny;
    let mut acc = vec![0.0f64; nz * classes * plane];
    let mut coverage = vec![0usize; nz];
    for chunk in plans.chunks(CHUNK) {
        let outputs: Vec<Tensor<f32>> = chunk
            .par_iter()
            .map(|plan| model.predict(&stack_at(volume, &labels, plan)?.input))
            .collect::<Result<_>>()?;
        for (plan, out) in chunk.iter().zip(&outputs) {
            let expect = [plan.targets.len(), classes, ny, nx];
            if out.shape() != expect {
                return Err(shape_err!("predictor returned {:?}, expected {expect:?}", out.shape()));
            }
            for (j, &z) in plan.targets.iter().enumerate() {
                coverage[z] += 1;
                let src = &out.data()[j * classes * plane..][..classes * plane];
                let dst = &mut acc[z * classes * plane..][..classes * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s as f64;
                }
            }
        }
    }
    let mut data = vec![0.0f32; acc.len()];
    for z in 0..nz {
        let n = coverage[z] as f64;
        let a = &acc[z * classes * plane..][..classes * plane];
        let d = &mut data[z * classes * plane..][..classes * plane];
        for i in 0..plane {
            let total: f64 = (0..classes).map(|c| a[c * plane + i] / n).sum();
            for c in 0..classes {
                d[c * plane + i] = if total > 0.0 {
                    (a[c * plane + i] / n / total) as f32
                } else {
                    (1.0 / classes as f64) as f32
                };
            }
        }
    }
    Ok(ProbVolume {
        dims: volume.dims(),
        spacing: volume.spacing(),
        classes,
        data,
        coverage,
    })
}

/// Mirror index for reflect padding (edge sample not repeated).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn pad_in_plane(volume: &Volume<f32>, px: usize, py: usize) -> Result<Volume<f32>> {
    let [nx, ny, nz] = volume.dims();
    let mut data = Vec::with_capacity(px * py * nz);
    for z in 0..nz {
        let s = volume.slice(z);
        for y in 0..py {
            let row = &s[reflect(y, ny) * nx..][..nx];
            data.extend((0..px).map(|x| row[reflect(x, nx)]));
        }
    }
    Volume::new([px, py, nz], volume.spacing(), data)
}

/// [`sliding_window_predict`] for any in-plane size: the volume is
/// reflect-padded on the high side up to a multiple of 16 and the prediction
/// cropped back.
pub fn predict_padded(model: &dyn SlicePredictor, volume: &Volume<f32>) -> Result<ProbVolume> {
    let [nx, ny, nz] = volume.dims();
    let up = |n: usize| n.div_ceil(OUTPUT_STRIDE) * OUTPUT_STRIDE;
    let (px, py) = (up(nx), up(ny));
    if (px, py) == (nx, ny) {
        return sliding_window_predict(model, volume);
    }
    let full = sliding_window_predict(model, &pad_in_plane(volume, px, py)?)?;
    let classes = full.classes;
    let mut data = Vec::with_capacity(nx * ny * nz * classes);
    for zc in 0..nz * classes {
        let plane = &full.data[zc * px * py..][..px * py];
        for y in 0..ny {
            data.extend_from_slice(&plane[y * px..][..nx]);
        }
    }
    Ok(ProbVolume {
        dims: [nx, ny, nz],
        data,
        ..full
    })
}

/// Per-voxel argmax; ties go to the lower class.
pub fn argmax_labels(probs: &ProbVolume) -> Result<Volume<u8>> {
    let [nx, ny, nz] = probs.dims;
    let plane = nx * ny;
    let k = probs.classes;
    let mut out = Vec::with_capacity(plane * nz);
    for z in 0..nz {
        let p = &probs.data[z * k * plane..][..k * plane];
        for i in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if p[c * plane + i] > p[best * plane + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Volume::new(probs.dims, probs.spacing, out)
}

/// Keeps the largest 6-connected component of `mask`. Equal sizes go to the
/// component whose first voxel comes first in storage order.
pub fn largest_component(mask: &Volume<bool>) -> Volume<bool> {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let mut comp = vec![u32::MAX; data.len()];
    let mut queue = VecDeque::new();
    let (mut best, mut best_size, mut next) = (u32::MAX, 0usize, 0u32);
    for seed in 0..data.len() {
        if !data[seed] || comp[seed] != u32::MAX {
            continue;
        }
        let id = next;
        next += 1;
        comp[seed] = id;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let mut visit = |j: usize| {
                if data[j] && comp[j] == u32::MAX {
                    comp[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        if size > best_size {
            best = id;
            best_size = size;
        }
    }
    mask.with_data(comp.iter().map(|&c| c == best && best != u32::MAX).collect())
}

/// Keeps the largest component of the organ mask (organ and lesion voxels)
/// and clears everything outside it.
pub fn postprocess(labels: &Volume<u8>) -> Volume<u8> {
    let keep = largest_component(&labels.map(|l| l == 1 || l == 2));
    let data = labels.data().iter().zip(keep.data()).map(|(&l, &k)| if k { l } else { 0 }).collect();
    labels.with_data(data)
}

/// Preprocessing and resampling options for whole-volume segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceOptions {
    pub hu_window: [f64; 2],
    /// Slices thicker than this are resampled to it before prediction.
    pub resample_thickness_mm: Option<f64>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            hu_window: [HU_LO, HU_HI],
            resample_thickness_mm: Some(1.0),
        }
    }
}

impl InferenceOptions {
    /// Windowed and, if thicker than the target, z-resampled intensities.
    pub fn preprocess(&self, raw: &Volume<f32>) -> Result<Volume<f32>> {
        let v = hu_window(raw, self.hu_window[0], self.hu_window[1])?;
        match self.resample_thickness_mm {
            Some(t) if raw.spacing()[2] > t => resample_z(&v, t),
            Some(t) if !(t > 0.0) => Err(arg_err!("resample thickness must be positive, got {t}")),
            _ => Ok(v),
        }
    }
}

/// Summary written next to a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceStats {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Slices the model actually saw after resampling.
    pub model_slices: usize,
    pub model_thickness_mm: f64,
    pub windows: usize,
    pub coverage_min: usize,
    pub coverage_max: usize,
    pub voxels_per_label: [usize; 3],
}

/// Labels of `fine` (z spacing `fine_dz`) sampled at the `nz` slice positions
/// `k * dz` of the original grid, nearest slice with ties upward.
fn labels_to_grid(fine: &Volume<u8>, nz: usize, dz: f64) -> Result<Volume<u8>> {
    let [nx, ny, fz] = fine.dims();
    let fine_dz = fine.spacing()[2];
    let mut data = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        let u = k as f64 * dz / fine_dz;
        let i = ((u + 0.5).floor() as usize).min(fz - 1);
        data.extend_from_slice(fine.slice(i));
    }
    let [sx, sy, _] = fine.spacing();
    Volume::new([nx, ny, nz], [sx, sy, dz], data)
}

/// Raw intensities in, postprocessed labels on the input grid out.
pub fn segment_volume(
    model: &dyn SlicePredictor,
    raw: &Volume<f32>,
    options: &InferenceOptions,
) -> Result<(Volume<u8>, InferenceStats)> {
    let pre = options.preprocess(raw)?;
    let probs = predict_padded(model, &pre)?;
    let fine = argmax_labels(&probs)?;
    let [_, _, nz] = raw.dims();
    let labels = if pre.dims()[2] == nz {
        Volume::new(raw.dims(), raw.spacing(), fine.into_data())?
    } else {
        let back = labels_to_grid(&fine, nz, raw.spacing()[2])?;
        Volume::new(raw.dims(), raw.spacing(), back.into_data())?
    };
    let labels = postprocess(&labels);
    let mut counts = [0usize; 3];
    for &l in labels.data() {
        counts[(l as usize).min(2)] += 1;
    }
    let stats = InferenceStats {
        dims: raw.dims(),
        spacing_mm: raw.spacing(),
        model_slices: pre.dims()[2],
        model_thickness_mm: pre.spacing()[2],
        windows: window_plans(pre.dims()[2], model.c_in(), 1, true)?.len(),
        coverage_min: probs.coverage.iter().copied().min().unwrap_or(0),
        coverage_max: probs.coverage.iter().copied().max().unwrap_or(0),
        voxels_per_label: counts,
    };
    Ok((labels, stats))
}
