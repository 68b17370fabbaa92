//! Axis-aligned boxes and detections.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    /// Extents along x, y, z (width, length, height).
    pub size: [f64; 3],
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self> {
        let b = Box3D { center, size };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.center.iter().chain(&self.size).any(|v| !v.is_finite()) || self.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::Invalid(format!("box needs finite center and positive size: {self:?}")));
        }
        Ok(())
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|d| self.center[d] - 0.5 * self.size[d])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|d| self.center[d] + 0.5 * self.size[d])
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// Closed containment test.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|d| (p[d] - self.center[d]).abs() <= 0.5 * self.size[d])
    }

    pub fn intersection(&self, other: &Box3D) -> f64 {
        let (a0, a1, b0, b1) = (self.min(), self.max(), other.min(), other.max());
        (0..3).map(|d| (a1[d].min(b1[d]) - a0[d].max(b0[d])).max(0.0)).product()
    }
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou_aabb3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

/// A ground-truth box with its class id.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub bbox: Box3D,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub class: usize,
    pub score: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(c: [f64; 3]) -> Box3D {
        Box3D::new(c, [1.0; 3]).unwrap()
    }

    #[test]
    fn closed_form_cases() {
        let a = unit([0.0; 3]);
        assert_eq!(iou_aabb3d(&a, &a), 1.0);
        assert!((iou_aabb3d(&a, &unit([0.5, 0.0, 0.0])) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou_aabb3d(&a, &unit([3.0, 0.0, 0.0])), 0.0);
        assert_eq!(iou_aabb3d(&a, &unit([1.0, 0.0, 0.0])), 0.0);
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            c1 in prop::array::uniform3(-2.0..2.0f64), s1 in prop::array::uniform3(0.1..2.0f64),
            c2 in prop::array::uniform3(-2.0..2.0f64), s2 in prop::array::uniform3(0.1..2.0f64),
        ) {
            let (a, b) = (Box3D::new(c1, s1).unwrap(), Box3D::new(c2, s2).unwrap());
            let (x, y) = (iou_aabb3d(&a, &b), iou_aabb3d(&b, &a));
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
