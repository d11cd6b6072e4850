//! Planar geometry on the BEV plane: oriented boxes, rigid transforms and
//! rotated-rectangle IoU.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};
use crate::scalar::Scalar;

/// Oriented rectangle on the BEV plane. `l` runs along the heading `yaw`,
/// `w` across it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3DLite<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub l: T,
    pub yaw: T,
    pub class_id: usize,
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle<T: Scalar>(a: T) -> T {
    if a >= -T::PI() && a < T::PI() {
        return a;
    }
    let two_pi = T::PI() + T::PI();
    let mut r = (a + T::PI()) % two_pi;
    if r < T::zero() {
        r += two_pi;
    }
    r - T::PI()
}

impl<T: Scalar> Box3DLite<T> {
    pub fn new(cx: T, cy: T, w: T, l: T, yaw: T, class_id: usize) -> Self {
        Self { cx, cy, w, l, yaw: wrap_angle(yaw), class_id }
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.cx, self.cy, self.w, self.l, self.yaw].iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite box (cx={}, cy={}, w={}, l={}, yaw={})",
                self.cx, self.cy, self.w, self.l, self.yaw
            )));
        }
        if self.w <= T::zero() || self.l <= T::zero() {
            return Err(domain_err!("degenerate box (w={}, l={})", self.w, self.l));
        }
        Ok(())
    }

    pub fn area(&self) -> T {
        self.w * self.l
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [(T, T); 4] {
        let half = T::lit(0.5);
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l * half, self.w * half);
        let ax = (c * hl, s * hl);
        let ay = (-s * hw, c * hw);
        [
            (self.cx + ax.0 + ay.0, self.cy + ax.1 + ay.1),
            (self.cx - ax.0 + ay.0, self.cy - ax.1 + ay.1),
            (self.cx - ax.0 - ay.0, self.cy - ax.1 - ay.1),
            (self.cx + ax.0 - ay.0, self.cy + ax.1 - ay.1),
        ]
    }

    /// Point-in-rectangle test (boundary counts as inside).
    pub fn contains(&self, x: T, y: T) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let along = c * dx + s * dy;
        let across = -s * dx + c * dy;
        let half = T::lit(0.5);
        along.abs() <= self.l * half && across.abs() <= self.w * half
    }

    /// Axis-aligned bounds `(xmin, ymin, xmax, ymax)`.
    pub fn bounds(&self) -> (T, T, T, T) {
        let cs = self.corners();
        let mut b = (cs[0].0, cs[0].1, cs[0].0, cs[0].1);
        for &(x, y) in &cs[1..] {
            b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
        b
    }
}

fn polygon_area<T: Scalar>(poly: &[(T, T)]) -> T {
    if poly.len() < 3 {
        return T::zero();
    }
    let mut s = T::zero();
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        s += x0 * y1 - x1 * y0;
    }
    (s * T::lit(0.5)).abs()
}

/// Sutherland-Hodgman clip of `subject` by the convex CCW polygon `clip`.
fn clip_convex<T: Scalar>(subject: &[(T, T)], clip: &[(T, T)]) -> Vec<(T, T)> {
    let mut out: Vec<(T, T)> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: (T, T)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= T::zero() {
                if sp < T::zero() {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= T::zero() {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

#[inline]
fn intersect<T: Scalar>(p: (T, T), q: (T, T), sp: T, sq: T) -> (T, T) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Area of overlap of two oriented rectangles.
pub fn intersection_area<T: Scalar>(a: &Box3DLite<T>, b: &Box3DLite<T>) -> T {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    if ax1 < bx0 || bx1 < ax0 || ay1 < by0 || by1 < ay0 {
        return T::zero();
    }
    polygon_area(&clip_convex(&a.corners(), &b.corners()))
}

/// Rotated-rectangle intersection over union, in `[0, 1]`.
pub fn iou_bev<T: Scalar>(a: &Box3DLite<T>, b: &Box3DLite<T>) -> Result<T> {
    a.validate()?;
    b.validate()?;
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let v = if union > T::zero() { inter / union } else { T::zero() };
    Ok(v.max(T::zero()).min(T::one()))
}

/// Rigid planar transform `p ↦ R p + t` (meters).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoTransform<T> {
    pub rot: [[T; 2]; 2],
    pub trans: [T; 2],
}

impl<T: Scalar> EgoTransform<T> {
    pub fn identity() -> Self {
        Self { rot: [[T::one(), T::zero()], [T::zero(), T::one()]], trans: [T::zero(), T::zero()] }
    }

    pub fn from_angle(theta: T, tx: T, ty: T) -> Self {
        let (s, c) = theta.sin_cos();
        Self { rot: [[c, -s], [s, c]], trans: [tx, ty] }
    }

    pub fn angle(&self) -> T {
        self.rot[1][0].atan2(self.rot[0][0])
    }

    /// Checks RᵀR = I and det R = 1 within `tol`.
    pub fn validate(&self, tol: T) -> Result<()> {
        let r = &self.rot;
        let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
        let rtr = [
            r[0][0] * r[0][0] + r[1][0] * r[1][0],
            r[0][0] * r[0][1] + r[1][0] * r[1][1],
            r[0][1] * r[0][1] + r[1][1] * r[1][1],
        ];
        let ok = (det - T::one()).abs() <= tol
            && (rtr[0] - T::one()).abs() <= tol
            && rtr[1].abs() <= tol
            && (rtr[2] - T::one()).abs() <= tol
            && self.trans.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(domain_err!("not a proper rigid transform (det = {det})"))
        }
    }

    pub fn apply(&self, x: T, y: T) -> (T, T) {
        let r = &self.rot;
        (r[0][0] * x + r[0][1] * y + self.trans[0], r[1][0] * x + r[1][1] * y + self.trans[1])
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rot;
        let rt = [[r[0][0], r[1][0]], [r[0][1], r[1][1]]];
        let t = [
            -(rt[0][0] * self.trans[0] + rt[0][1] * self.trans[1]),
            -(rt[1][0] * self.trans[0] + rt[1][1] * self.trans[1]),
        ];
        Self { rot: rt, trans: t }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.rot;
        let b = &other.rot;
        let rot = [
            [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
            [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
        ];
        let (tx, ty) = self.apply(other.trans[0], other.trans[1]);
        Self { rot, trans: [tx, ty] }
    }

    pub fn apply_box(&self, b: &Box3DLite<T>) -> Box3DLite<T> {
        let (cx, cy) = self.apply(b.cx, b.cy);
        Box3DLite::new(cx, cy, b.w, b.l, b.yaw + self.angle(), b.class_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, w: f64, l: f64, yaw: f64) -> Box3DLite<f64> {
        Box3DLite::new(cx, cy, w, l, yaw, 0)
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        assert!((iou_bev(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let far = bx(10.0, 0.0, 2.0, 2.0, 0.3);
        assert_eq!(iou_bev(&a, &far).unwrap(), 0.0);
        let shifted = bx(1.0, 0.0, 2.0, 2.0, 0.0);
        assert!((iou_bev(&a, &shifted).unwrap() - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        assert!(iou_bev(&a, &bx(0.0, 0.0, 0.0, 1.0, 0.0)).is_err());
        assert!(iou_bev(&bx(0.0, 0.0, 1.0, -1.0, 0.0), &a).is_err());
    }

    #[test]
    fn iou_is_symmetric_and_rotation_invariant() {
        let a = bx(0.3, -0.2, 1.8, 4.0, 0.4);
        let b = bx(1.1, 0.5, 2.5, 3.0, -0.9);
        let ab = iou_bev(&a, &b).unwrap();
        assert!((ab - iou_bev(&b, &a).unwrap()).abs() < 1e-12);
        let t = EgoTransform::from_angle(1.1, 3.0, -2.0);
        let rotated = iou_bev(&t.apply_box(&a), &t.apply_box(&b)).unwrap();
        assert!((ab - rotated).abs() < 1e-10);
    }

    #[test]
    fn iou_in_f32() {
        let a = Box3DLite::<f32>::new(0.0, 0.0, 2.0, 2.0, 0.0, 0);
        let b = Box3DLite::<f32>::new(1.0, 0.0, 2.0, 2.0, 0.0, 0);
        assert!((iou_bev(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn transform_inverse_and_validation() {
        let t = EgoTransform::<f64>::from_angle(0.3, 1.5, -0.7);
        t.validate(1e-9).unwrap();
        let id = t.compose(&t.inverse());
        let (x, y) = id.apply(2.0, 5.0);
        assert!((x - 2.0).abs() < 1e-12 && (y - 5.0).abs() < 1e-12);
        let bad = EgoTransform { rot: [[1.0, 0.0], [0.0, -1.0]], trans: [0.0, 0.0] };
        assert!(bad.validate(1e-9).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let a = k as f64 * 0.7;
            let w = wrap_angle(a);
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&w));
            let turns: f64 = (a - w) / (2.0 * std::f64::consts::PI);
            assert!((turns - turns.round()).abs() < 1e-9);
        }
    }
}
