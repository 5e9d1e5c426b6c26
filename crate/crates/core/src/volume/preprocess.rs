//! Intensity windowing and through-plane resampling.

use super::Volume;
use crate::error::{arg_err, Result};

/// Default intensity window in Hounsfield units.
pub const HU_LO: f64 = -200.0;
pub const HU_HI: f64 = 250.0;

/// Clamps to `[lo, hi]` and rescales linearly onto `[0, 1]`.
pub fn hu_window(volume: &Volume<f32>, lo: f64, hi: f64) -> Result<Volume<f32>> {
    if !(lo < hi) {
        return Err(arg_err!("window bounds must satisfy lo < hi, got [{lo}, {hi}]"));
    }
    let span = hi - lo;
    Ok(volume.map(|v| (((v as f64).clamp(lo, hi) - lo) / span) as f32))
}

/// Output slice count and the source coordinate of each output slice on a
/// node-centred grid (slice `k` sits at `k * spacing`).
fn z_grid(z: usize, source: f64, target: f64) -> Result<Vec<f64>> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(arg_err!("target slice thickness must be positive, got {target}"));
    }
    let n = ((z - 1) as f64 * source / target + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|k| (k as f64 * target / source).min((z - 1) as f64)).collect())
}

fn resample_with<T: Copy>(volume: &Volume<T>, target: f64, mut pick: impl FnMut(&[T], &[T], f64, &mut Vec<T>)) -> Result<Volume<T>> {
    let [x, y, z] = volume.dims();
    let coords = z_grid(z, volume.spacing()[2], target)?;
    let mut data = Vec::with_capacity(x * y * coords.len());
    for &u in &coords {
        let i0 = (u.floor() as usize).min(z - 1);
        let i1 = (i0 + 1).min(z - 1);
        pick(volume.slice(i0), volume.slice(i1), u - i0 as f64, &mut data);
    }
    let [sx, sy, _] = volume.spacing();
    Volume::new([x, y, coords.len()], [sx, sy, target], data)
}

/// Linear interpolation along z; the first and last source slices are kept.
pub fn resample_z(volume: &Volume<f32>, target_mm: f64) -> Result<Volume<f32>> {
    resample_with(volume, target_mm, |a, b, f, out| {
        if f == 0.0 {
            out.extend_from_slice(a);
        } else {
            out.extend(a.iter().zip(b).map(|(&p, &q)| ((1.0 - f) * p as f64 + f * q as f64) as f32));
        }
    })
}

/// Nearest-slice resampling along z (ties go to the upper slice).
pub fn resample_z_labels(volume: &Volume<u8>, target_mm: f64) -> Result<Volume<u8>> {
    resample_with(volume, target_mm, |a, b, f, out| {
        out.extend_from_slice(if f < 0.5 { a } else { b });
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(values: &[f32], sz: f64) -> Volume<f32> {
        Volume::new([1, 1, values.len()], [0.8, 0.8, sz], values.to_vec()).unwrap()
    }

    #[test]
    fn window_examples() {
        let v = column(&[-300.0, 25.0, 250.0, -200.0, 1000.0], 1.0);
        let w = hu_window(&v, HU_LO, HU_HI).unwrap();
        assert_eq!(w.data(), &[0.0, 0.5, 1.0, 0.0, 1.0]);
        assert!(hu_window(&v, 10.0, 10.0).is_err());
        assert!(hu_window(&v, 10.0, -10.0).is_err());
    }

    #[test]
    fn window_is_idempotent_on_unit_range() {
        let v = column(&[0.0, 0.25, 0.5, 1.0], 1.0);
        assert_eq!(hu_window(&v, 0.0, 1.0).unwrap(), v);
    }

    #[test]
    fn resample_examples() {
        let v = column(&[0.0, 10.0], 2.0);
        let r = resample_z(&v, 1.0).unwrap();
        assert_eq!(r.data(), &[0.0, 5.0, 10.0]);
        assert_eq!(r.spacing(), [0.8, 0.8, 1.0]);
        assert_eq!(r.dims(), [1, 1, 3]);

        let v = column(&[1.0, 4.0, -2.0, 7.0], 1.5);
        assert_eq!(resample_z(&v, 1.5).unwrap(), v);

        let v = column(&[0.0, 4.0, 8.0], 4.0);
        assert_eq!(resample_z(&v, 1.0).unwrap().data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert!(resample_z(&v, 0.0).is_err());
        assert!(resample_z(&v, -1.0).is_err());
    }

    #[test]
    fn labels_use_nearest_slices() {
        let l = Volume::new([1, 1, 3], [1.0, 1.0, 4.0], vec![0u8, 1, 0]).unwrap();
        let r = resample_z_labels(&l, 1.0).unwrap();
        assert_eq!(r.data(), &[0, 0, 1, 1, 1, 1, 0, 0, 0]);
        // and back onto the original grid
        assert_eq!(resample_z_labels(&r, 4.0).unwrap(), l);
    }

    proptest! {
        #[test]
        fn resample_stays_within_bounds(values in prop::collection::vec(-1000.0f32..1000.0, 2..12), sz in 0.5f64..6.0, t in 0.3f64..3.0) {
            let v = column(&values, sz);
            let r = resample_z(&v, t).unwrap();
            let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(r.data().iter().all(|&x| x >= lo && x <= hi));
            prop_assert_eq!(r.data()[0], values[0]);
        }

        #[test]
        fn window_is_monotone(a in -2000.0f32..2000.0, b in -2000.0f32..2000.0) {
            let w = hu_window(&column(&[a.min(b), a.max(b)], 1.0), HU_LO, HU_HI).unwrap();
            prop_assert!(w.data()[0] <= w.data()[1]);
            prop_assert!(w.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
