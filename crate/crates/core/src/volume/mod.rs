//! Volumes, the SVOL file format, preprocessing, training samples and the
//! synthetic phantom generator.
//!
//! Voxels are stored x-fastest: index `x + X * (y + Y * z)`, so each axial
//! slice is a contiguous `Y x X` plane.

mod manifest;
mod phantom;
mod preprocess;
mod sample;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub use manifest::{CaseEntry, Manifest, Split};
pub use phantom::{decimate, gen_phantom, gen_phantom_fine, Ellipsoid, Phantom, PhantomConfig, Sphere};
pub use preprocess::{hu_window, resample_z, resample_z_labels, HU_HI, HU_LO};
pub use sample::{
    augment, augment_with, coverage, extract_windows, stack_at, window_plans, AugmentConfig, TrainingSample,
    WindowPlan,
};

/// Largest label value: 0 background, 1 organ, 2 lesion.
pub const MAX_LABEL: u8 = 2;

const SVOL_MAGIC: &str = "SVOL1";

/// Element type of an SVOL payload.
pub trait Voxel: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Domain check applied when reading and writing.
    fn validate(self) -> bool {
        true
    }
}

impl Voxel for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl Voxel for u8 {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(b: &[u8]) -> Self {
        b[0]
    }
    fn validate(self) -> bool {
        self <= MAX_LABEL
    }
}

/// A 3-D grid with physical voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

impl<T: Copy> Volume<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err!("volume {dims:?} holds {n} voxels, got {}", data.len()));
        }
        if n == 0 {
            return Err(shape_err!("volume {dims:?} is empty"));
        }
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    /// Voxels in one axial plane.
    pub fn plane_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// Axial slice `z` as a `Y x X` row-major plane.
    pub fn slice(&self, z: usize) -> &[T] {
        let p = self.plane_len();
        &self.data[z * p..][..p]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same grid, new voxels; `data` must have the same length.
    pub(crate) fn with_data<U>(&self, data: Vec<U>) -> Volume<U> {
        assert_eq!(data.len(), self.data.len(), "voxel count must not change");
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }

    pub fn same_grid<U>(&self, other: &Volume<U>) -> bool {
        self.dims == other.dims
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SvolHeader {
    magic: String,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
}

impl<T: Voxel> Volume<T> {
    pub fn to_svol_bytes(&self) -> Result<Vec<u8>> {
        if let Some(v) = self.data.iter().find(|v| !v.validate()) {
            return Err(Error::InvalidArgument(format!("voxel value {v:?} outside the {} domain", T::DTYPE)));
        }
        let header = SvolHeader {
            magic: SVOL_MAGIC.into(),
            dims: self.dims,
            spacing_mm: self.spacing,
            dtype: T::DTYPE.into(),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
        out.reserve(self.data.len() * T::BYTES);
        for &v in &self.data {
            v.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_svol_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("SVOL header line missing".into()))?;
        let header: SvolHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format(format!("SVOL header: {e}")))?;
        if header.magic != SVOL_MAGIC {
            return Err(Error::Format(format!("bad SVOL magic {:?}", header.magic)));
        }
        if header.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "SVOL dtype {:?}, expected {:?}",
                header.dtype,
                T::DTYPE
            )));
        }
        let n: usize = header.dims.iter().product();
        let payload = &bytes[nl + 1..];
        if payload.len() != n * T::BYTES {
            return Err(Error::Format(format!(
                "SVOL payload has {} bytes, expected {} for {:?} {}",
                payload.len(),
                n * T::BYTES,
                header.dims,
                T::DTYPE
            )));
        }
        let data: Vec<T> = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        if let Some(v) = data.iter().find(|v| !v.validate()) {
            return Err(Error::Format(format!("voxel value {v:?} outside the {} domain", T::DTYPE)));
        }
        Volume::new(header.dims, header.spacing_mm, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn write_svol<T: Voxel>(volume: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, volume.to_svol_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_svol<T: Voxel>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_svol_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn svol_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..64)
            .map(|i| if i == 5 { f32::NAN } else { f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff) })
            .collect();
        let v = Volume::new([4, 4, 4], [0.7, 0.7, 2.5], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.svol");
        write_svol(&v, &p).unwrap();
        let back: Volume<f32> = read_svol(&p).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing(), v.spacing());
        let bits = |v: &Volume<f32>| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));

        let l = Volume::new([3, 2, 2], [1.0; 3], vec![0u8, 1, 2, 0, 1, 2, 2, 2, 1, 0, 0, 1]).unwrap();
        assert_eq!(Volume::<u8>::from_svol_bytes(&l.to_svol_bytes().unwrap()).unwrap(), l);
    }

    #[test]
    fn header_is_one_json_line() {
        let l = Volume::filled([2, 1, 1], [1.0, 1.0, 2.0], 1u8).unwrap();
        let bytes = l.to_svol_bytes().unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["magic"], "SVOL1");
        assert_eq!(header["dtype"], "u8");
        assert_eq!(header["dims"], serde_json::json!([2, 1, 1]));
        assert_eq!(&bytes[nl + 1..], &[1, 1]);
    }

    #[test]
    fn svol_rejects_malformed_input() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 0.5f32).unwrap();
        let bytes = v.to_svol_bytes().unwrap();
        assert!(matches!(Volume::<f32>::from_svol_bytes(&bytes[..bytes.len() - 2]), Err(Error::Format(_))));
        assert!(matches!(Volume::<u8>::from_svol_bytes(&bytes), Err(Error::Format(_))));
        let bad = String::from_utf8_lossy(&bytes).replacen("SVOL1", "SVOL9", 1);
        assert!(Volume::<f32>::from_svol_bytes(bad.as_bytes()).is_err());
        let odd = String::from_utf8_lossy(&bytes).replacen("\"f32\"", "\"f16\"", 1);
        assert!(Volume::<f32>::from_svol_bytes(odd.as_bytes()).is_err());
        assert!(Volume::<f32>::from_svol_bytes(b"no newline").is_err());
    }

    #[test]
    fn labels_outside_domain_are_rejected() {
        let l = Volume::new([2, 1, 1], [1.0; 3], vec![0u8, 3]).unwrap();
        assert!(matches!(l.to_svol_bytes(), Err(Error::InvalidArgument(_))));
        let ok = Volume::new([2, 1, 1], [1.0; 3], vec![0u8, 2]).unwrap();
        let mut bytes = ok.to_svol_bytes().unwrap();
        *bytes.last_mut().unwrap() = 3;
        assert!(matches!(Volume::<u8>::from_svol_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn construction_checks() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0u8; 7]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0u8; 8]).is_err());
        assert!(Volume::<u8>::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        let v = Volume::new([3, 2, 2], [1.0; 3], (0..12).collect::<Vec<u32>>()).unwrap();
        assert_eq!(v.get(1, 1, 1), 1 + 3 * (1 + 2));
        assert_eq!(v.slice(1), &[6, 7, 8, 9, 10, 11]);
    }
}
