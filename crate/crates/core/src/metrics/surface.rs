//! Surface extraction and symmetric surface distances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::volume::Volume;

/// Centres (in mm) of mask voxels with at least one of their six face
/// neighbours outside the mask or the volume, in storage order.
pub fn surface_points(mask: &Volume<bool>) -> Vec<[f64; 3]> {
    let [nx, ny, nz] = mask.dims();
    let [sx, sy, sz] = mask.spacing();
    let on = |x: usize, y: usize, z: usize| mask.get(x, y, z);
    let mut pts = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !on(x, y, z) {
                    continue;
                }
                let interior = x > 0
                    && x + 1 < nx
                    && y > 0
                    && y + 1 < ny
                    && z > 0
                    && z + 1 < nz
                    && on(x - 1, y, z)
                    && on(x + 1, y, z)
                    && on(x, y - 1, z)
                    && on(x, y + 1, z)
                    && on(x, y, z - 1)
                    && on(x, y, z + 1);
                if !interior {
                    pts.push([x as f64 * sx, y as f64 * sy, z as f64 * sz]);
                }
            }
        }
    }
    pts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub assd: f64,
    /// Symmetric Hausdorff distance.
    pub msd: f64,
    pub rmsd: f64,
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Squared distance from each of `from` to its nearest point of `to`.
/// `to` is sorted by z and scanned outward from the query's z; a candidate
/// whose z gap alone reaches the best squared distance cannot win, because
/// the rounded sum of non-negative terms never falls below one of them.
fn nearest_sq(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    let mut sorted = to.to_vec();
    sorted.sort_by(|a, b| a[2].total_cmp(&b[2]));
    from.par_iter()
        .map(|p| {
            let start = sorted.partition_point(|q| q[2] < p[2]);
            let mut best = f64::INFINITY;
            for q in &sorted[start..] {
                let dz = q[2] - p[2];
                if dz * dz >= best {
                    break;
                }
                best = best.min(dist2(p, q));
            }
            for q in sorted[..start].iter().rev() {
                let dz = q[2] - p[2];
                if dz * dz >= best {
                    break;
                }
                best = best.min(dist2(p, q));
            }
            best
        })
        .collect()
}

/// Distances between the two mask surfaces, pooled over both directions
/// (prediction to reference first, each in storage order). `None` when
/// either mask is empty.
pub fn surface_distances(pred: &Volume<bool>, reference: &Volume<bool>) -> Result<Option<SurfaceDistances>> {
    if pred.dims() != reference.dims() {
        return Err(shape_err!("prediction {:?} and reference {:?} differ", pred.dims(), reference.dims()));
    }
    let a = surface_points(pred);
    let b = surface_points(reference);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let d: Vec<f64> = nearest_sq(&a, &b).into_iter().chain(nearest_sq(&b, &a)).map(f64::sqrt).collect();
    let n = d.len() as f64;
    let (mut sum, mut sum2, mut max) = (0.0, 0.0, 0.0f64);
    for &x in &d {
        sum += x;
        sum2 += x * x;
        max = max.max(x);
    }
    Ok(Some(SurfaceDistances {
        assd: sum / n,
        msd: max,
        rmsd: (sum2 / n).sqrt(),
    }))
}
