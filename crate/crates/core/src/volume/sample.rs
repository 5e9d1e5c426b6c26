//! Multi-slice training samples, window extraction and augmentation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{arg_err, shape_err, Result};
use crate::losses::one_hot;
use crate::rng::Rng;
use crate::tensor::{kernels, Real, Tensor};

/// A stack of `c_in` normalised slices and the labels of its central
/// `c_out = c_in - 2` slices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `[1, c_in, H, W]`
    pub input: Tensor<f32>,
    /// `c_out` label planes of `H x W`, slice-major.
    pub target: Vec<u8>,
    pub c_out: usize,
}

impl TrainingSample {
    pub fn c_in(&self) -> usize {
        self.input.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.input.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.input.shape()[3]
    }

    /// One-hot targets `[c_out, classes, H, W]`.
    pub fn target_one_hot<T: Real>(&self, classes: usize) -> Result<Tensor<T>> {
        one_hot(&self.target, self.c_out, classes, self.height(), self.width())
    }
}

/// Source slices of one window: `inputs[i]` feeds input channel `i`,
/// `targets[j]` is the slice predicted by output `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Consecutive `c_in`-slice windows along z at `stride`. With `pad`, the
/// volume is first extended by replicating one edge slice at each end so
/// that every slice is the target of at least one window.
pub fn window_plans(z: usize, c_in: usize, stride: usize, pad: bool) -> Result<Vec<WindowPlan>> {
    if c_in < 3 || c_in % 2 == 0 {
        return Err(arg_err!("c_in must be odd and at least 3, got {c_in}"));
    }
    if stride == 0 {
        return Err(arg_err!("window stride must be positive"));
    }
    let halo = usize::from(pad);
    let zp = z + 2 * halo;
    if z == 0 || zp < c_in {
        return Err(shape_err!(
            "{z} slices are too few for {c_in}-slice windows{}",
            if pad { " even after edge replication" } else { "" }
        ));
    }
    let source = |j: usize| (j as isize - halo as isize).clamp(0, z as isize - 1) as usize;
    Ok((0..=zp - c_in)
        .step_by(stride)
        .map(|s| WindowPlan {
            inputs: (s..s + c_in).map(source).collect(),
            targets: (s + 1..s + c_in - 1).map(source).collect(),
        })
        .collect())
}

/// How many windows predict each slice.
pub fn coverage(z: usize, c_in: usize, stride: usize, pad: bool) -> Result<Vec<usize>> {
    let mut counts = vec![0; z];
    for plan in window_plans(z, c_in, stride, pad)? {
        for t in plan.targets {
            counts[t] += 1;
        }
    }
    Ok(counts)
}

/// Builds the sample of one window from a normalised intensity volume and
/// its labels.
pub fn stack_at(image: &Volume<f32>, labels: &Volume<u8>, plan: &WindowPlan) -> Result<TrainingSample> {
    if !image.same_grid(labels) {
        return Err(shape_err!("image {:?} and labels {:?} differ", image.dims(), labels.dims()));
    }
    let [x, y, _] = image.dims();
    let mut input = Vec::with_capacity(plan.inputs.len() * x * y);
    for &z in &plan.inputs {
        input.extend_from_slice(image.slice(z));
    }
    let mut target = Vec::with_capacity(plan.targets.len() * x * y);
    for &z in &plan.targets {
        target.extend_from_slice(labels.slice(z));
    }
    Ok(TrainingSample {
        input: Tensor::new(vec![1, plan.inputs.len(), y, x], input)?,
        target,
        c_out: plan.targets.len(),
    })
}

pub fn extract_windows(
    image: &Volume<f32>,
    labels: &Volume<u8>,
    c_in: usize,
    stride: usize,
    pad: bool,
) -> Result<Vec<TrainingSample>> {
    window_plans(image.dims()[2], c_in, stride, pad)?
        .iter()
        .map(|p| stack_at(image, labels, p))
        .collect()
}

/// In-plane augmentation: isotropic rescaling by a factor drawn uniformly
/// from `scale_range`, then a random `crop x crop` window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_range: [f64; 2],
    pub crop: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_range: [0.8, 1.2],
            crop: 64,
        }
    }
}

/// Nearest-neighbour source index for each of `dst` samples of an axis of
/// length `src` (half-pixel centres).
fn nearest_taps(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| ((((i as f64 + 0.5) * src as f64 / dst as f64).floor()) as usize).min(src - 1))
        .collect()
}

/// Deterministic core of [`augment`]: rescale by `scale`, then crop at
/// `origin = (row, col)`, or centrally when `origin` is `None`.
pub fn augment_with(sample: &TrainingSample, scale: f64, crop: usize, origin: Option<(usize, usize)>) -> Result<TrainingSample> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(arg_err!("scale factor must be positive, got {scale}"));
    }
    let (c_in, h, w) = (sample.c_in(), sample.height(), sample.width());
    let nh = (h as f64 * scale).round() as usize;
    let nw = (w as f64 * scale).round() as usize;
    if crop == 0 || crop > nh || crop > nw {
        return Err(arg_err!("crop {crop} does not fit a {nh}x{nw} rescaled slice"));
    }
    let (image, labels) = if (nh, nw) == (h, w) {
        (sample.input.data().to_vec(), sample.target.clone())
    } else {
        let image = kernels::bilinear_forward(sample.input.data(), c_in, h, w, nh, nw);
        let (ty, tx) = (nearest_taps(h, nh), nearest_taps(w, nw));
        let mut labels = Vec::with_capacity(sample.c_out * nh * nw);
        for m in 0..sample.c_out {
            let plane = &sample.target[m * h * w..][..h * w];
            for &sy in &ty {
                labels.extend(tx.iter().map(|&sx| plane[sy * w + sx]));
            }
        }
        (image, labels)
    };
    let (y0, x0) = origin.unwrap_or(((nh - crop) / 2, (nw - crop) / 2));
    if y0 + crop > nh || x0 + crop > nw {
        return Err(arg_err!("crop at ({y0}, {x0}) leaves the {nh}x{nw} slice"));
    }
    fn cut<T: Copy>(src: &[T], planes: usize, (nh, nw): (usize, usize), (y0, x0): (usize, usize), crop: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(planes * crop * crop);
        for p in 0..planes {
            for r in y0..y0 + crop {
                out.extend_from_slice(&src[(p * nh + r) * nw + x0..][..crop]);
            }
        }
        out
    }
    let image = cut(&image, c_in, (nh, nw), (y0, x0), crop);
    let target = cut(&labels, sample.c_out, (nh, nw), (y0, x0), crop);
    Ok(TrainingSample {
        input: Tensor::new(vec![1, c_in, crop, crop], image)?,
        target,
        c_out: sample.c_out,
    })
}

/// Random rescale and crop; consumes three draws from `rng`.
pub fn augment(sample: &TrainingSample, cfg: &AugmentConfig, rng: &mut Rng) -> Result<TrainingSample> {
    let [lo, hi] = cfg.scale_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(arg_err!("scale range must satisfy 0 < lo <= hi, got {:?}", cfg.scale_range));
    }
    let scale = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let nh = (sample.height() as f64 * scale).round() as usize;
    let nw = (sample.width() as f64 * scale).round() as usize;
    if cfg.crop > nh || cfg.crop > nw {
        return Err(arg_err!("crop {} does not fit a {nh}x{nw} rescaled slice", cfg.crop));
    }
    let y0 = rng.gen_range(0..=nh - cfg.crop);
    let x0 = rng.gen_range(0..=nw - cfg.crop);
    augment_with(sample, scale, cfg.crop, Some((y0, x0)))
}
