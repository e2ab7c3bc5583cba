//! Axis-aligned boxes in image coordinates.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Box as `(x1, y1, x2, y2)`; valid boxes have `x1 < x2` and `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Square box of side `side` centered on `(cx, cy)`.
    pub fn centered(cx: T, cy: T, side: T) -> Self {
        let half = side / T::lit(2.0);
        Self::new(cx - half, cy - half, cx + half, cy + half)
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.to_array().iter().all(|v| v.is_finite())
    }

    /// Area, clamped at zero for inverted boxes.
    pub fn area(&self) -> T {
        self.width().max(T::zero()) * self.height().max(T::zero())
    }

    pub fn center(&self) -> (T, T) {
        let two = T::lit(2.0);
        ((self.x1 + self.x2) / two, (self.y1 + self.y2) / two)
    }

    pub fn contains_point(&self, x: T, y: T) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    pub fn intersection(&self, other: &Self) -> T {
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        iw.max(T::zero()) * ih.max(T::zero())
    }

    /// Smallest axis-aligned box enclosing both.
    pub fn enclosing(&self, other: &Self) -> Self {
        Self::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    /// Intersection over union; zero when the union is empty.
    pub fn iou(&self, other: &Self) -> T {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= T::zero() {
            T::zero()
        } else {
            inter / union
        }
    }

    /// Distances `(l, t, r, b)` from a point to the box edges.
    pub fn edge_distances(&self, x: T, y: T) -> [T; 4] {
        [x - self.x1, y - self.y1, self.x2 - x, self.y2 - y]
    }

    /// Inverse of [`BBox::edge_distances`].
    pub fn from_distances(x: T, y: T, d: [T; 4]) -> Self {
        Self::new(x - d[0], y - d[1], x + d[2], y + d[3])
    }

    pub fn cast<U: Scalar>(self) -> BBox<U> {
        BBox::new(
            U::lit(self.x1.to_f64_lossy()),
            U::lit(self.y1.to_f64_lossy()),
            U::lit(self.x2.to_f64_lossy()),
            U::lit(self.y2.to_f64_lossy()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_hand_values() {
        let a = BBox::<f64>::new(0.0, 0.0, 4.0, 4.0);
        let b = BBox::new(2.0, 0.0, 6.0, 4.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
        let c = BBox::<f64>::new(0.0, 0.0, 2.0, 2.0);
        let d = BBox::new(1.0, 0.0, 3.0, 2.0);
        assert!((c.iou(&d) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(10.0, 10.0, 11.0, 11.0)), 0.0);
    }

    #[test]
    fn distances_round_trip() {
        let b = BBox::new(1.5, 2.0, 9.0, 7.25);
        let d = b.edge_distances(4.0, 4.0);
        assert_eq!(BBox::from_distances(4.0, 4.0, d), b);
    }
}
