//! Distance and accuracy metrics between images and label masks.
//!
//! With background fixed to label 0, for each pixel let `A = [y1 == y2]`
//! (agreement) and `B = [y1 + y2 != 0]` (foreground in either mask). Then
//! `IoU = Σ(A ∧ B) / ΣB` and `PA = ΣA / (H·W)`. When `ΣB = 0` both masks are
//! pure background and IoU is defined as 1.

use crate::error::Result;
use crate::mask::LabelMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceReport {
    pub l2: f64,
    pub linf: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyReport {
    pub iou: f64,
    pub pa: f64,
}

impl DistanceReport {
    pub fn between(x1: &Tensor, x2: &Tensor) -> Result<Self> {
        Ok(Self {
            l2: l2_distance(x1, x2)?,
            linf: linf_distance(x1, x2)?,
        })
    }
}

impl AccuracyReport {
    pub fn between(y1: &LabelMask, y2: &LabelMask) -> Result<Self> {
        Ok(Self {
            iou: iou(y1, y2)?,
            pa: pixel_accuracy(y1, y2)?,
        })
    }
}

/// Returns `(Σ A∧B, Σ B, Σ A)`.
fn counts(y1: &LabelMask, y2: &LabelMask) -> Result<(u64, u64, u64)> {
    y1.check_same(y2, "metrics")?;
    let (mut inter, mut union, mut agree) = (0u64, 0u64, 0u64);
    for (&a, &b) in y1.as_slice().iter().zip(y2.as_slice()) {
        let same = a == b;
        let any_fg = a != 0 || b != 0;
        agree += same as u64;
        union += any_fg as u64;
        inter += (same && any_fg) as u64;
    }
    Ok((inter, union, agree))
}

pub fn iou(y1: &LabelMask, y2: &LabelMask) -> Result<f64> {
    let (inter, union, _) = counts(y1, y2)?;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

pub fn pixel_accuracy(y1: &LabelMask, y2: &LabelMask) -> Result<f64> {
    let (_, _, agree) = counts(y1, y2)?;
    Ok(agree as f64 / y1.len() as f64)
}

pub fn l2_distance(x1: &Tensor, x2: &Tensor) -> Result<f64> {
    x1.same_shape(x2, "l2_distance")?;
    let sum: f64 = x1
        .as_slice()
        .iter()
        .zip(x2.as_slice())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(libm::sqrt(sum))
}

pub fn linf_distance(x1: &Tensor, x2: &Tensor) -> Result<f64> {
    x1.same_shape(x2, "linf_distance")?;
    Ok(x1
        .as_slice()
        .iter()
        .zip(x2.as_slice())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn m(rows: &[[u8; 2]; 2]) -> LabelMask {
        LabelMask::new(2, 2, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn hand_enumerated_two_by_two() {
        let y1 = m(&[[1, 0], [0, 0]]);
        let y2 = m(&[[1, 1], [0, 0]]);
        assert_eq!(iou(&y1, &y2).unwrap(), 0.5);
        assert_eq!(pixel_accuracy(&y1, &y2).unwrap(), 0.75);
    }

    #[test]
    fn identical_disjoint_complementary() {
        let a = m(&[[1, 0], [0, 1]]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        let b = m(&[[0, 1], [1, 0]]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(pixel_accuracy(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn empty_union_counts_as_agreement() {
        let z = LabelMask::filled(3, 3, 0);
        assert_eq!(iou(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = LabelMask::filled(2, 2, 0);
        let b = LabelMask::filled(2, 3, 0);
        assert!(iou(&a, &b).is_err());
        assert!(pixel_accuracy(&a, &b).is_err());
        assert!(l2_distance(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 2, 3])).is_err());
    }

    #[test]
    fn distances() {
        let x = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(DistanceReport::between(&x, &x).unwrap(), DistanceReport { l2: 0.0, linf: 0.0 });
        let one = Tensor::new(&[1, 2, 2], vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        let d = DistanceReport::between(&x, &one).unwrap();
        assert_eq!((d.l2, d.linf), (0.5, 0.5));
        let base = Tensor::full(&[1, 2, 2], 0.5);
        let two = Tensor::new(&[1, 2, 2], vec![0.8, 0.1, 0.5, 0.5]).unwrap();
        let d = DistanceReport::between(&base, &two).unwrap();
        // deltas are 0.3 and -0.4 up to f32 rounding of the stored pixels
        assert!((d.l2 - 0.5).abs() < 1e-7);
        assert!((d.linf - 0.4).abs() < 1e-7);
    }
}
