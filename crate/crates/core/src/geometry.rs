//! Axis-aligned boxes and point helpers.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub type Point3<S = f64> = [S; 3];

/// Axis-aligned 3D box given by center and full extents (meters).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D<S = f64> {
    pub center: Point3<S>,
    pub size: Point3<S>,
}

impl<S: Scalar> Box3D<S> {
    pub fn new(center: Point3<S>, size: Point3<S>) -> Self {
        Self { center, size }
    }

    /// Smallest box holding every point; `None` for an empty set.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a Point3<S>>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some(Self::from_min_max(lo, hi))
    }

    pub fn from_min_max(lo: Point3<S>, hi: Point3<S>) -> Self {
        let two = S::one() + S::one();
        Self {
            center: [0, 1, 2].map(|a| (lo[a] + hi[a]) / two),
            size: [0, 1, 2].map(|a| hi[a] - lo[a]),
        }
    }

    pub fn min(&self) -> Point3<S> {
        let two = S::one() + S::one();
        [0, 1, 2].map(|a| self.center[a] - self.size[a] / two)
    }

    pub fn max(&self) -> Point3<S> {
        let two = S::one() + S::one();
        [0, 1, 2].map(|a| self.center[a] + self.size[a] / two)
    }

    pub fn volume(&self) -> S {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn has_positive_extent(&self) -> bool {
        self.size.iter().all(|&s| s > S::zero())
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Point3<S>) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    /// Grows the box by `margin` on every side.
    pub fn inflate(&self, margin: S) -> Self {
        let two = S::one() + S::one();
        Self { center: self.center, size: self.size.map(|s| s + two * margin) }
    }

    /// `[cx, cy, cz, sx, sy, sz]`.
    pub fn to_array(&self) -> [S; 6] {
        [self.center[0], self.center[1], self.center[2], self.size[0], self.size[1], self.size[2]]
    }

    pub fn cast<T: Scalar>(&self) -> Box3D<T> {
        Box3D {
            center: self.center.map(|v| T::from_f64_lossy(v.as_f64())),
            size: self.size.map(|v| T::from_f64_lossy(v.as_f64())),
        }
    }
}

/// Intersection volume over union volume of two axis-aligned boxes.
pub fn iou3d<S: Scalar>(a: &Box3D<S>, b: &Box3D<S>) -> S {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    let mut inter = S::one();
    for axis in 0..3 {
        let overlap = ahi[axis].min(bhi[axis]) - alo[axis].max(blo[axis]);
        if overlap <= S::zero() {
            return S::zero();
        }
        inter *= overlap;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= S::zero() {
        return S::zero();
    }
    (inter / union).min(S::one())
}

pub fn distance<S: Scalar>(a: &Point3<S>, b: &Point3<S>) -> S {
    distance_sq(a, b).sqrt()
}

pub fn distance_sq<S: Scalar>(a: &Point3<S>, b: &Point3<S>) -> S {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(x: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.0], [1.0, 1.0, 1.0])
    }

    #[test]
    fn iou_reference_cases() {
        let b = Box3D::new([1.0, 2.0, 0.5], [2.0, 1.0, 1.0]);
        assert_eq!(iou3d(&b, &b), 1.0);
        assert_eq!(iou3d(&unit(0.0), &unit(3.0)), 0.0);
        // 0.5 overlap volume over 1.5 union
        assert!((iou3d(&unit(0.0), &unit(0.5)) - 1.0 / 3.0).abs() < 1e-15);
        // touching faces share no volume
        assert_eq!(iou3d(&unit(0.0), &unit(1.0)), 0.0);
    }

    #[test]
    fn iou_works_at_single_precision() {
        let a = Box3D::<f32>::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        let b = Box3D::<f32>::new([0.5, 0.0, 0.0], [1.0, 1.0, 1.0]);
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-6);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (prop::array::uniform3(-3.0f64..3.0), prop::array::uniform3(0.1f64..2.0))
            .prop_map(|(c, s)| Box3D::new(c, s))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded_translation_invariant(a in arb_box(), b in arb_box(), t in prop::array::uniform3(-5.0f64..5.0)) {
            let ab = iou3d(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou3d(&b, &a));
            let shift = |x: &Box3D| Box3D::new([x.center[0] + t[0], x.center[1] + t[1], x.center[2] + t[2]], x.size);
            prop_assert!((iou3d(&shift(&a), &shift(&b)) - ab).abs() < 1e-9);
        }

        #[test]
        fn enclosing_box_contains_its_points(pts in prop::collection::vec(prop::array::uniform3(-4.0f64..4.0), 1..20)) {
            let b = Box3D::enclosing(&pts).unwrap();
            for p in &pts {
                prop_assert!(b.inflate(1e-12).contains(p));
            }
        }
    }
}
