//! Synthetic anisotropic phantoms.
//!
//! A case is drawn on a fine grid with 1 mm slices: air, a body cross-section,
//! one rotated ellipsoidal organ (label 1) and one to four spherical lesions
//! inside it (label 2), each region with its own mean intensity plus Gaussian
//! noise. Thick-slice acquisition is then simulated by averaging groups of
//! `t` fine slices (labels by majority vote), with `t` drawn from the
//! configured slice thicknesses.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, Rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// In-plane extent `[X, Y]` in voxels.
    pub in_plane: [usize; 2],
    /// Slices of the 1 mm source grid.
    pub fine_slices: usize,
    /// Range of the in-plane pixel spacing in mm.
    pub pixel_spacing_mm: [f64; 2],
    /// Candidate slice thicknesses in mm (whole fine slices).
    pub thickness_choices: Vec<usize>,
    /// Ranges of the organ semi-axes in voxels along x, y and z.
    pub organ_semi_axes: [[f64; 2]; 3],
    /// Largest offset of the organ centre from the volume centre, per axis.
    pub organ_offset: [f64; 3],
    pub lesion_count: [usize; 2],
    /// Lesion radius range in voxels.
    pub lesion_radius: [f64; 2],
    pub air_hu: f64,
    pub body_hu: f64,
    pub organ_hu: f64,
    pub lesion_hu: f64,
    /// Uniform per-case jitter applied to each region mean.
    pub mean_jitter_hu: f64,
    pub noise_sigma_hu: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            in_plane: [80, 80],
            fine_slices: 48,
            pixel_spacing_mm: [0.6, 0.9],
            thickness_choices: vec![1, 2, 4],
            organ_semi_axes: [[18.0, 26.0], [14.0, 20.0], [12.0, 18.0]],
            organ_offset: [6.0, 6.0, 4.0],
            lesion_count: [1, 4],
            lesion_radius: [3.0, 7.0],
            air_hu: -1000.0,
            body_hu: 20.0,
            organ_hu: 120.0,
            lesion_hu: 50.0,
            mean_jitter_hu: 10.0,
            noise_sigma_hu: 15.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [x, y] = self.in_plane;
        let extents = [x as f64, y as f64, self.fine_slices as f64];
        if x == 0 || y == 0 || self.fine_slices == 0 {
            return bad("phantom extents must be positive".into());
        }
        if self.thickness_choices.is_empty() || self.thickness_choices.contains(&0) {
            return bad(format!("thickness choices must be non-empty and positive, got {:?}", self.thickness_choices));
        }
        if let Some(&t) = self.thickness_choices.iter().find(|&&t| self.fine_slices / t < 3) {
            return bad(format!("thickness {t} leaves fewer than 3 of {} slices", self.fine_slices));
        }
        let [s0, s1] = self.pixel_spacing_mm;
        if !(s0 > 0.0 && s0 <= s1) {
            return bad(format!("pixel spacing range {:?} is invalid", self.pixel_spacing_mm));
        }
        for (axis, ([lo, hi], off)) in self.organ_semi_axes.iter().zip(self.organ_offset).enumerate() {
            if !(*lo > 0.0 && lo <= hi && off >= 0.0) {
                return bad(format!("organ semi-axis range {:?} on axis {axis} is invalid", [lo, hi]));
            }
            // the in-plane rotation can swing either semi-axis along x or y
            let reach = if axis < 2 { self.organ_semi_axes[0][1].max(self.organ_semi_axes[1][1]) } else { *hi };
            if reach + off > extents[axis] / 2.0 - 1.0 {
                return bad(format!("organ does not fit the volume along axis {axis}"));
            }
        }
        let [c0, c1] = self.lesion_count;
        let [r0, r1] = self.lesion_radius;
        if !(c0 <= c1 && r0 > 0.0 && r0 <= r1) {
            return bad("lesion count or radius range is invalid".into());
        }
        if !(self.noise_sigma_hu >= 0.0 && self.mean_jitter_hu >= 0.0) {
            return bad("noise and jitter must be non-negative".into());
        }
        Ok(())
    }
}

/// Ellipsoid in voxel coordinates, rotated by `angle` about the z axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub angle: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (dx, dy, dz) = (p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let [a, b, cz] = self.semi_axes;
        (u / a).powi(2) + (v / b).powi(2) + (dz / cz).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d2: f64 = (0..3).map(|i| (p[i] - self.center[i]).powi(2)).sum();
        d2 <= self.radius * self.radius
    }

    /// Integer voxel positions inside the sphere.
    fn voxels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        let r = self.radius.ceil() as i64;
        let c = self.center.map(|v| v.round() as i64);
        (-r..=r).flat_map(move |dz| {
            (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| [(c[0] + dx) as f64, (c[1] + dy) as f64, (c[2] + dz) as f64]))
        })
        .filter(|p| self.contains(*p))
    }
}

/// One generated case.
#[derive(Debug, Clone)]
pub struct Phantom {
    /// Intensities in Hounsfield-like units.
    pub image: Volume<f32>,
    pub labels: Volume<u8>,
    pub thickness_mm: usize,
    /// Geometry on the fine grid.
    pub organ: Ellipsoid,
    pub lesions: Vec<Sphere>,
}

fn uniform(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Generates case `index` on the 1 mm grid and returns it with the thickness
/// drawn for it.
pub fn gen_phantom_fine(config: &PhantomConfig, seed: u64, index: u64) -> Result<(Phantom, usize)> {
    config.validate()?;
    let mut rng = indexed_stream(seed, Stream::Phantom, index);
    let [nx, ny] = config.in_plane;
    let nz = config.fine_slices;
    let mid = [(nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0, (nz as f64 - 1.0) / 2.0];

    let thickness = *config.thickness_choices.choose(&mut rng).expect("validated non-empty");
    let spacing = uniform(&mut rng, config.pixel_spacing_mm);
    let mut semi = [0.0; 3];
    let mut center = [0.0; 3];
    for i in 0..3 {
        semi[i] = uniform(&mut rng, config.organ_semi_axes[i]);
        let off = config.organ_offset[i];
        center[i] = mid[i] + uniform(&mut rng, [-off, off]);
    }
    let organ = Ellipsoid {
        center,
        semi_axes: semi,
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    };

    let count = rng.gen_range(config.lesion_count[0]..=config.lesion_count[1]);
    let mut lesions = Vec::with_capacity(count);
    for k in 0..count {
        let radius = uniform(&mut rng, config.lesion_radius);
        let mut placed = None;
        for _ in 0..500 {
            let c = [0, 1, 2].map(|i| {
                let reach = semi[0].max(semi[1]).max(semi[2]);
                organ.center[i] + rng.gen_range(-reach..reach)
            });
            let s = Sphere { center: c, radius };
            if organ.contains(c) && s.voxels().all(|p| organ.contains(p)) {
                placed = Some(s);
                break;
            }
        }
        let s = placed.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "case {index}: lesion {k} of radius {radius:.2} does not fit inside the organ"
            ))
        })?;
        lesions.push(s);
    }

    let jitter = |rng: &mut Rng, m: f64| m + uniform(rng, [-config.mean_jitter_hu, config.mean_jitter_hu]);
    let body_hu = jitter(&mut rng, config.body_hu);
    let organ_hu = jitter(&mut rng, config.organ_hu);
    let lesion_hu = jitter(&mut rng, config.lesion_hu);
    let body = [0.45 * nx as f64, 0.45 * ny as f64];
    let noise = Normal::new(0.0, config.noise_sigma_hu).map_err(|e| Error::Config(e.to_string()))?;

    let mut image = Vec::with_capacity(nx * ny * nz);
    let mut labels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let in_body = ((p[0] - mid[0]) / body[0]).powi(2) + ((p[1] - mid[1]) / body[1]).powi(2) <= 1.0;
                let (label, mean) = if lesions.iter().any(|s| s.contains(p)) {
                    (2u8, lesion_hu)
                } else if organ.contains(p) {
                    (1, organ_hu)
                } else if in_body {
                    (0, body_hu)
                } else {
                    (0, config.air_hu)
                };
                labels.push(label);
                image.push((mean + noise.sample(&mut rng)) as f32);
            }
        }
    }
    let sp = [spacing, spacing, 1.0];
    Ok((
        Phantom {
            image: Volume::new([nx, ny, nz], sp, image)?,
            labels: Volume::new([nx, ny, nz], sp, labels)?,
            thickness_mm: 1,
            organ,
            lesions,
        },
        thickness,
    ))
}

/// Simulates `t`-times thicker slices: intensities are averaged and labels
/// majority-voted (ties to the higher label) over groups of `t` slices; a
/// trailing partial group is dropped.
pub fn decimate(image: &Volume<f32>, labels: &Volume<u8>, t: usize) -> Result<(Volume<f32>, Volume<u8>)> {
    if t == 0 {
        return Err(Error::InvalidArgument("decimation factor must be positive".into()));
    }
    let [nx, ny, nz] = image.dims();
    if labels.dims() != image.dims() {
        return Err(Error::Shape(format!("image {:?} and labels {:?} differ", image.dims(), labels.dims())));
    }
    let out_z = nz / t;
    if out_z == 0 {
        return Err(Error::InvalidArgument(format!("{nz} slices cannot be grouped by {t}")));
    }
    let plane = nx * ny;
    let mut img = Vec::with_capacity(plane * out_z);
    let mut lab = Vec::with_capacity(plane * out_z);
    for k in 0..out_z {
        for i in 0..plane {
            let mut sum = 0.0;
            let mut votes = [0usize; 3];
            for z in k * t..(k + 1) * t {
                sum += image.slice(z)[i] as f64;
                votes[labels.slice(z)[i].min(2) as usize] += 1;
            }
            img.push((sum / t as f64) as f32);
            let best = (0..3).rev().max_by_key(|&c| (votes[c], c)).unwrap_or(0);
            lab.push(best as u8);
        }
    }
    let [sx, sy, sz] = image.spacing();
    let spacing = [sx, sy, sz * t as f64];
    Ok((Volume::new([nx, ny, out_z], spacing, img)?, Volume::new([nx, ny, out_z], spacing, lab)?))
}

/// Case `index` of the phantom family of `seed`, at its drawn thickness.
pub fn gen_phantom(config: &PhantomConfig, seed: u64, index: u64) -> Result<Phantom> {
    let (fine, t) = gen_phantom_fine(config, seed, index)?;
    let (image, labels) = decimate(&fine.image, &fine.labels, t)?;
    Ok(Phantom {
        image,
        labels,
        thickness_mm: t,
        ..fine
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig {
            in_plane: [48, 48],
            fine_slices: 24,
            organ_semi_axes: [[12.0, 16.0], [10.0, 14.0], [7.0, 9.0]],
            organ_offset: [3.0, 3.0, 2.0],
            lesion_radius: [2.0, 4.0],
            ..Default::default()
        }
    }

    #[test]
    fn seeded_generation_is_bit_identical() {
        let a = gen_phantom(&small(), 5, 3).unwrap();
        let b = gen_phantom(&small(), 5, 3).unwrap();
        assert_eq!(a.image.to_svol_bytes().unwrap(), b.image.to_svol_bytes().unwrap());
        assert_eq!(a.labels, b.labels);
        let c = gen_phantom(&small(), 5, 4).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn lesions_lie_inside_the_organ() {
        for index in 0..6 {
            let (fine, _) = gen_phantom_fine(&small(), 9, index).unwrap();
            let [nx, ny, nz] = fine.labels.dims();
            let mut lesion_voxels = 0;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        if fine.labels.get(x, y, z) == 2 {
                            lesion_voxels += 1;
                            assert!(fine.organ.contains([x as f64, y as f64, z as f64]));
                        }
                    }
                }
            }
            assert!(lesion_voxels > 0);
            assert!((1..=4).contains(&fine.lesions.len()));
        }
    }

    #[test]
    fn decimated_lesions_keep_organ_support() {
        for index in 0..4 {
            let (fine, _) = gen_phantom_fine(&small(), 2, index).unwrap();
            for t in [2, 4] {
                let (_, lab) = decimate(&fine.image, &fine.labels, t).unwrap();
                let [nx, ny, nz] = lab.dims();
                for k in 0..nz {
                    for y in 0..ny {
                        for x in 0..nx {
                            if lab.get(x, y, k) == 2 {
                                let inside = (k * t..(k + 1) * t).any(|z| fine.organ.contains([x as f64, y as f64, z as f64]));
                                assert!(inside);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn decimation_arithmetic() {
        let (fine, _) = gen_phantom_fine(&small(), 1, 0).unwrap();
        let (a, _) = decimate(&fine.image, &fine.labels, 1).unwrap();
        let (b, lb) = decimate(&fine.image, &fine.labels, 4).unwrap();
        assert_eq!(a.dims()[2], 4 * b.dims()[2]);
        assert_eq!(a, fine.image);
        assert_eq!(b.spacing()[2], 4.0);
        assert_eq!(lb.spacing()[2], 4.0);
        let v = Volume::new([1, 1, 4], [1.0; 3], vec![0.0f32, 2.0, 4.0, 10.0]).unwrap();
        let l = Volume::new([1, 1, 4], [1.0; 3], vec![0u8, 1, 1, 2]).unwrap();
        let (dv, dl) = decimate(&v, &l, 2).unwrap();
        assert_eq!(dv.data(), &[1.0, 7.0]);
        // 0/1 tie goes to 1, 1/2 tie to 2
        assert_eq!(dl.data(), &[1, 2]);
        assert!(decimate(&v, &l, 5).is_err());
    }

    #[test]
    fn thickness_is_drawn_from_choices() {
        let mut seen = std::collections::BTreeSet::new();
        for index in 0..30 {
            let p = gen_phantom(&small(), 7, index).unwrap();
            assert_eq!(p.image.dims()[2], 24 / p.thickness_mm);
            assert_eq!(p.image.spacing()[2], p.thickness_mm as f64);
            seen.insert(p.thickness_mm);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), [1, 2, 4]);
    }

    #[test]
    fn oversized_lesions_report_the_case() {
        let cfg = PhantomConfig {
            lesion_radius: [30.0, 30.0],
            ..small()
        };
        match gen_phantom(&cfg, 0, 17) {
            Err(Error::InvalidArgument(msg)) => assert!(msg.contains("case 17"), "{msg}"),
            other => panic!("expected a placement error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = PhantomConfig::default();
        c.validate().unwrap();
        c.thickness_choices.clear();
        assert!(c.validate().is_err());
        let c = PhantomConfig {
            organ_semi_axes: [[50.0, 60.0], [14.0, 20.0], [12.0, 18.0]],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = PhantomConfig {
            thickness_choices: vec![20],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
