//! Dice-family objectives over multi-slice predictions.
//!
//! Predictions and labels are `[c_out, classes, H, W]`: one probability map
//! per output slice and class. Slice indices are zero-based here; the pair
//! `(m, n)` always has `m < n`.
//!
//! * Dice loss: `-sum_c sum_m (2 sum p g + eps) / (sum p^2 + sum g^2 + eps)`.
//! * Pairwise Dice `P(m, n)`: the same ratio evaluated on the unions
//!   `p_m + p_n` and `g_m + g_n` (no clipping), summed over classes.
//! * Densely connected Dice: `sum_{m<n} P(m, n) / (n - m)`.
//! * Total: `dice + lambda * dcd`, `lambda = c_out / sum_{m<n} 1 / (n - m)`.
//!
//! Values are computed in `f64`. The gradient with respect to the
//! probabilities is available in closed form and is what the training graph
//! uses (see [`total_loss_var`]).

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Stabiliser added to numerator and denominator of every Dice ratio. A class
/// absent from both prediction and reference scores exactly 1.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
struct Layout {
    slices: usize,
    classes: usize,
    voxels: usize,
}

impl Layout {
    fn of<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<Self> {
        if probs.shape() != labels.shape() {
            return Err(shape_err!(
                "prediction {:?} and label {:?} shapes differ",
                probs.shape(),
                labels.shape()
            ));
        }
        match probs.shape() {
            [s, c, rest @ ..] if !rest.is_empty() => Ok(Layout {
                slices: *s,
                classes: *c,
                voxels: rest.iter().product(),
            }),
            other => Err(shape_err!("expected [slices, classes, H, W], got {other:?}")),
        }
    }

    fn offset(&self, m: usize, c: usize) -> usize {
        (m * self.classes + c) * self.voxels
    }
}

/// `(2 sum a b + eps) / (sum a^2 + sum b^2 + eps)`; with `grad`, adds
/// `scale * d(ratio)/d(a_i)` into `grad[i]`.
fn ratio(a: &[f64], b: &[f64], grad: Option<(&mut [f64], f64)>) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let num = 2.0 * ab + DICE_EPS;
    let den = aa + bb + DICE_EPS;
    if let Some((g, scale)) = grad {
        let inv = scale / (den * den);
        for ((gi, &x), &y) in g.iter_mut().zip(a).zip(b) {
            *gi += inv * (2.0 * y * den - 2.0 * x * num);
        }
    }
    num / den
}

fn plane<T: Real>(t: &Tensor<T>, start: usize, len: usize) -> Vec<f64> {
    t.data()[start..start + len].iter().map(|v| v.as_f64()).collect()
}

fn union<T: Real>(t: &Tensor<T>, a: usize, b: usize, len: usize) -> Vec<f64> {
    let d = t.data();
    (0..len).map(|i| d[a + i].as_f64() + d[b + i].as_f64()).collect()
}

fn dice_impl<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>, mut grad: Option<(&mut [f64], f64)>) -> Result<f64> {
    let l = Layout::of(probs, labels)?;
    let mut total = 0.0;
    for m in 0..l.slices {
        for c in 0..l.classes {
            let off = l.offset(m, c);
            let p = plane(probs, off, l.voxels);
            let g = plane(labels, off, l.voxels);
            let gslot = grad
                .as_mut()
                .map(|(buf, s)| (&mut buf[off..off + l.voxels], -*s));
            total += ratio(&p, &g, gslot);
        }
    }
    Ok(-total)
}

fn check_pair(slices: usize, m: usize, n: usize) -> Result<()> {
    if m >= n {
        return Err(arg_err!("pair ({m}, {n}) must satisfy m < n"));
    }
    if n >= slices {
        return Err(arg_err!("pair ({m}, {n}) out of range for {slices} slices"));
    }
    Ok(())
}

fn pairwise_impl<T: Real>(
    probs: &Tensor<T>,
    labels: &Tensor<T>,
    m: usize,
    n: usize,
    mut grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    let l = Layout::of(probs, labels)?;
    check_pair(l.slices, m, n)?;
    let mut total = 0.0;
    let mut tmp = vec![0.0; l.voxels];
    for c in 0..l.classes {
        let (om, on) = (l.offset(m, c), l.offset(n, c));
        let q = union(probs, om, on, l.voxels);
        let h = union(labels, om, on, l.voxels);
        match grad.as_mut() {
            Some((buf, s)) => {
                tmp.iter_mut().for_each(|v| *v = 0.0);
                total += ratio(&q, &h, Some((&mut tmp, -*s)));
                // d/dp_m and d/dp_n both equal d/dq
                for (i, &t) in tmp.iter().enumerate() {
                    buf[om + i] += t;
                    buf[on + i] += t;
                }
            }
            None => total += ratio(&q, &h, None),
        }
    }
    Ok(-total)
}

/// Dice loss summed over every slice and class.
pub fn dice_loss<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<f64> {
    dice_impl(probs, labels, None)
}

/// Pairwise Dice loss `P(m, n)` of output slices `m < n` (zero-based).
pub fn pairwise_dice<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>, m: usize, n: usize) -> Result<f64> {
    pairwise_impl(probs, labels, m, n, None)
}

/// Distance weight of a slice pair.
pub fn pair_weight(m: usize, n: usize) -> f64 {
    1.0 / (n - m) as f64
}

/// All pairs `(m, n)`, `m < n < c_out`, ordered by `m` then `n`.
pub fn slice_pairs(c_out: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..c_out).flat_map(move |m| (m + 1..c_out).map(move |n| (m, n)))
}

/// Balance factor between the Dice and DCD terms.
pub fn lambda_weight(c_out: usize) -> Result<f64> {
    if c_out < 2 {
        return Err(arg_err!("the DCD term needs at least two output slices, got {c_out}"));
    }
    let sum: f64 = slice_pairs(c_out).map(|(m, n)| pair_weight(m, n)).sum();
    Ok(c_out as f64 / sum)
}

/// One weighted term of the DCD loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTerm {
    pub m: usize,
    pub n: usize,
    pub weight: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcdValue {
    pub value: f64,
    pub pairs: Vec<PairTerm>,
}

fn dcd_impl<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>, mut grad: Option<(&mut [f64], f64)>) -> Result<DcdValue> {
    let l = Layout::of(probs, labels)?;
    if l.slices < 2 {
        return Err(arg_err!("the DCD term needs at least two output slices, got {}", l.slices));
    }
    let mut pairs = Vec::new();
    let mut value = 0.0;
    for (m, n) in slice_pairs(l.slices) {
        let w = pair_weight(m, n);
        let slot = grad.as_mut().map(|(buf, s)| (&mut **buf, *s * w));
        let p = pairwise_impl(probs, labels, m, n, slot)?;
        value += w * p;
        pairs.push(PairTerm { m, n, weight: w, value: p });
    }
    Ok(DcdValue { value, pairs })
}

/// Densely connected Dice loss with its per-pair breakdown.
pub fn dcd_loss<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<DcdValue> {
    dcd_impl(probs, labels, None)
}

/// Full breakdown of the combined objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub dice: f64,
    /// Absent when the DCD term is disabled.
    pub dcd: Option<f64>,
    pub lambda: Option<f64>,
    pub pairs: Vec<PairTerm>,
}

fn total_impl<T: Real>(
    probs: &Tensor<T>,
    labels: &Tensor<T>,
    use_dcd: bool,
    mut grad: Option<&mut [f64]>,
) -> Result<LossValue> {
    let dice = dice_impl(probs, labels, grad.as_deref_mut().map(|g| (g, 1.0)))?;
    if !use_dcd {
        return Ok(LossValue {
            total: dice,
            dice,
            dcd: None,
            lambda: None,
            pairs: Vec::new(),
        });
    }
    let lambda = lambda_weight(probs.shape()[0])?;
    let dcd = dcd_impl(probs, labels, grad.map(|g| (g, lambda)))?;
    Ok(LossValue {
        total: dice + lambda * dcd.value,
        dice,
        dcd: Some(dcd.value),
        lambda: Some(lambda),
        pairs: dcd.pairs,
    })
}

/// `dice + lambda * dcd`, or the Dice loss alone when `use_dcd` is false.
pub fn total_loss<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>, use_dcd: bool) -> Result<LossValue> {
    total_impl(probs, labels, use_dcd, None)
}

/// [`total_loss`] plus its gradient with respect to `probs`.
pub fn total_loss_with_grad<T: Real>(
    probs: &Tensor<T>,
    labels: &Tensor<T>,
    use_dcd: bool,
) -> Result<(LossValue, Vec<f64>)> {
    let mut grad = vec![0.0; probs.len()];
    let v = total_impl(probs, labels, use_dcd, Some(&mut grad))?;
    Ok((v, grad))
}

/// Attaches the combined objective to a graph as a scalar node depending on
/// `probs`.
pub fn total_loss_var<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &Tensor<T>,
    use_dcd: bool,
) -> Result<(Var, LossValue)> {
    let (value, grad) = total_loss_with_grad(g.value(probs), labels, use_dcd)?;
    let v = g.linearized(probs, value.total, grad)?;
    Ok((v, value))
}

/// One-hot encoding of `[slices, H, W]` integer labels into
/// `[slices, classes, H, W]`.
pub fn one_hot<T: Real>(labels: &[u8], slices: usize, classes: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if labels.len() != slices * h * w {
        return Err(shape_err!(
            "{} labels for {slices} slices of {h}x{w}",
            labels.len()
        ));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(vec![slices, classes, h, w]);
    let data = out.data_mut();
    for m in 0..slices {
        for i in 0..plane {
            let c = labels[m * plane + i] as usize;
            if c >= classes {
                return Err(arg_err!("label {c} outside 0..{classes}"));
            }
            data[(m * classes + c) * plane + i] = T::from_f64(1.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    /// Labels for 3 slices of 2x2 so that every class appears in every slice.
    fn full_labels() -> Tensor<f64> {
        let l = [0u8, 1, 2, 1, 2, 0, 1, 2, 1, 2, 0, 0];
        one_hot(&l, 3, 3, 2, 2).unwrap()
    }

    /// Random softmax-normalised predictions.
    fn random_probs(rng: &mut ChaCha8Rng, s: usize, k: usize, v: usize) -> Tensor<f64> {
        let mut d = vec![0.0; s * k * v];
        for m in 0..s {
            for i in 0..v {
                let e: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0f64..2.0).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..k {
                    d[(m * k + c) * v + i] = e[c] / z;
                }
            }
        }
        Tensor::new(vec![s, k, v, 1], d).unwrap()
    }

    fn random_labels(rng: &mut ChaCha8Rng, s: usize, k: usize, v: usize) -> Tensor<f64> {
        let l: Vec<u8> = (0..s * v).map(|_| rng.gen_range(0..k as u8)).collect();
        one_hot(&l, s, k, v, 1).unwrap()
    }

    #[test]
    fn perfect_dice_is_minus_nine() {
        let l = full_labels();
        assert!((dice_loss(&l, &l).unwrap() + 9.0).abs() < 1e-9);
    }

    #[test]
    fn single_voxel_dice_by_hand() {
        let p = t(&[1, 3, 1, 1], &[0.5, 0.5, 0.0]);
        let g = one_hot::<f64>(&[0], 1, 3, 1, 1).unwrap();
        let e = DICE_EPS;
        let expect = -((1.0 + e) / (1.25 + e) + e / (0.25 + e) + 1.0);
        let got = dice_loss(&p, &g).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got + 1.8).abs() < 1e-5);
    }

    #[test]
    fn empty_class_contributes_one() {
        // class 2 absent everywhere: its term is exactly 1 for each slice
        let g = one_hot::<f64>(&[0, 1, 1, 0], 1, 3, 2, 2).unwrap();
        let mut p = g.clone();
        let with = dice_loss(&p, &g).unwrap();
        assert!((with + 3.0).abs() < 1e-12);
        // perturbing classes 0/1 leaves the class-2 term at 1
        p.data_mut()[0] = 0.9;
        p.data_mut()[4] = 0.1;
        let l = Layout::of(&p, &g).unwrap();
        let off = l.offset(0, 2);
        assert_eq!(ratio(&plane(&p, off, 4), &plane(&g, off, 4), None), 1.0);
    }

    #[test]
    fn pairwise_examples() {
        let l = full_labels();
        assert!((pairwise_dice(&l, &l, 0, 1).unwrap() + 3.0).abs() < 1e-9);
        assert!((pairwise_dice(&l, &l, 0, 2).unwrap() + 3.0).abs() < 1e-9);

        let p = t(&[2, 3, 1, 1], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let g = one_hot::<f64>(&[1, 1], 2, 3, 1, 1).unwrap();
        let e = DICE_EPS;
        let expect = -(e / (1.0 + e) + (4.0 + e) / (5.0 + e) + e / e);
        assert!((pairwise_dice(&p, &g, 0, 1).unwrap() - expect).abs() < 1e-12);
        assert!((expect + 1.8).abs() < 1e-5);

        assert!(pairwise_dice(&p, &g, 1, 1).is_err());
        assert!(pairwise_dice(&p, &g, 1, 0).is_err());
        assert!(pairwise_dice(&p, &g, 0, 2).is_err());
    }

    #[test]
    fn pairwise_symmetric_under_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_probs(&mut rng, 2, 3, 8);
        let g = random_labels(&mut rng, 2, 3, 8);
        let swap = |x: &Tensor<f64>| {
            let half = x.len() / 2;
            let mut d = x.data()[half..].to_vec();
            d.extend_from_slice(&x.data()[..half]);
            Tensor::new(x.shape().to_vec(), d).unwrap()
        };
        let a = pairwise_dice(&p, &g, 0, 1).unwrap();
        let b = pairwise_dice(&swap(&p), &swap(&g), 0, 1).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn lambda_examples() {
        assert!((lambda_weight(2).unwrap() - 2.0).abs() < 1e-12);
        assert!((lambda_weight(3).unwrap() - 1.2).abs() < 1e-12);
        let sum5 = 4.0 + 1.5 + 2.0 / 3.0 + 0.25;
        assert!((lambda_weight(5).unwrap() - 5.0 / sum5).abs() < 1e-12);
        assert!((lambda_weight(5).unwrap() - 0.779221).abs() < 1e-6);
        assert!(lambda_weight(1).is_err());
        for c in 2..10 {
            let sum: f64 = slice_pairs(c).map(|(m, n)| pair_weight(m, n)).sum();
            assert!((lambda_weight(c).unwrap() * sum - c as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn dcd_examples() {
        let l = full_labels();
        let v = dcd_loss(&l, &l).unwrap();
        assert!((v.value + 7.5).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_probs(&mut rng, 2, 3, 6);
        let g = random_labels(&mut rng, 2, 3, 6);
        let v = dcd_loss(&p, &g).unwrap();
        assert_eq!(v.value, pairwise_dice(&p, &g, 0, 1).unwrap());

        let p = random_probs(&mut rng, 4, 3, 6);
        let g = random_labels(&mut rng, 4, 3, 6);
        let v = dcd_loss(&p, &g).unwrap();
        let weight = |m, n| v.pairs.iter().find(|t| (t.m, t.n) == (m, n)).unwrap().weight;
        for (m, n, w) in [
            (0, 1, 1.0),
            (1, 2, 1.0),
            (2, 3, 1.0),
            (0, 2, 0.5),
            (1, 3, 0.5),
            (0, 3, 1.0 / 3.0),
        ] {
            assert_eq!(weight(m, n), w);
        }
        assert_eq!(v.pairs.len(), 6);

        let one = random_probs(&mut rng, 1, 3, 6);
        assert!(dcd_loss(&one, &one).is_err());
    }

    #[test]
    fn total_examples() {
        let l = full_labels();
        let v = total_loss(&l, &l, true).unwrap();
        assert!((v.total + 18.0).abs() < 1e-9);
        assert!((v.total - (v.dice + v.lambda.unwrap() * v.dcd.unwrap())).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_probs(&mut rng, 3, 3, 10);
        let g = random_labels(&mut rng, 3, 3, 10);
        let v = total_loss(&p, &g, false).unwrap();
        assert_eq!(v.total, v.dice);
        assert!(v.dcd.is_none() && v.lambda.is_none());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for use_dcd in [false, true] {
            let p = random_probs(&mut rng, 3, 3, 7);
            let g = random_labels(&mut rng, 3, 3, 7);
            let (_, grad) = total_loss_with_grad(&p, &g, use_dcd).unwrap();
            let h = 1e-6;
            for i in 0..p.len() {
                let mut a = p.clone();
                a.data_mut()[i] += h;
                let mut b = p.clone();
                b.data_mut()[i] -= h;
                let fd = (total_loss(&a, &g, use_dcd).unwrap().total
                    - total_loss(&b, &g, use_dcd).unwrap().total)
                    / (2.0 * h);
                let rel = (grad[i] - fd).abs() / fd.abs().max(1.0);
                assert!(rel < 1e-5, "i={i} analytic={} fd={fd}", grad[i]);
            }
        }
    }

    #[test]
    fn slice_permutation_changes_dcd() {
        // slices 0 and 2 predicted the same way as their labels but slice 1
        // disagrees; swapping predictions of slices 0 and 1 changes the
        // distance-weighted pairing
        let g = one_hot::<f64>(&[0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2], 3, 3, 2, 2).unwrap();
        let p = one_hot::<f64>(&[0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 2], 3, 3, 2, 2).unwrap();
        let mut swapped = p.clone();
        let plane = 3 * 4;
        let (a, b) = swapped.data_mut().split_at_mut(plane);
        a.swap_with_slice(&mut b[..plane]);
        let d0 = dcd_loss(&p, &g).unwrap().value;
        let d1 = dcd_loss(&swapped, &g).unwrap().value;
        assert_ne!(d0, d1);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(one_hot::<f32>(&[3], 1, 3, 1, 1).is_err());
        assert!(one_hot::<f32>(&[0, 1], 1, 3, 1, 1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn bounds_hold(seed in 0u64..100_000, slices in 2usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = random_probs(&mut rng, slices, 3, 9);
                let g = random_labels(&mut rng, slices, 3, 9);
                let v = total_loss(&p, &g, true).unwrap();
                let sw: f64 = slice_pairs(slices).map(|(m, n)| pair_weight(m, n)).sum();
                prop_assert!(v.dice >= -3.0 * slices as f64 - 1e-12 && v.dice < 0.0);
                prop_assert!(v.dcd.unwrap() >= -3.0 * sw - 1e-12 && v.dcd.unwrap() < 0.0);
                prop_assert!((v.total - (v.dice + v.lambda.unwrap() * v.dcd.unwrap())).abs() < 1e-9);
            }

            #[test]
            fn interpolating_toward_labels_decreases_losses(seed in 0u64..100_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = random_labels(&mut rng, 3, 3, 12);
                let uniform = Tensor::full(g.shape().to_vec(), 1.0 / 3.0);
                let mut last: Option<LossValue> = None;
                for step in 0..=10 {
                    let a = step as f64 / 10.0;
                    let d: Vec<f64> = uniform.data().iter().zip(g.data()).map(|(u, l)| (1.0 - a) * u + a * l).collect();
                    let p = Tensor::new(g.shape().to_vec(), d).unwrap();
                    let v = total_loss(&p, &g, true).unwrap();
                    if let Some(prev) = &last {
                        prop_assert!(v.dice <= prev.dice + 1e-12);
                        prop_assert!(v.dcd.unwrap() <= prev.dcd.unwrap() + 1e-12);
                        prop_assert!(v.total <= prev.total + 1e-12);
                    }
                    last = Some(v);
                }
            }
        }
    }
}
