//! Axis-aligned boxes in normalized centre-size form.

use serde::{Deserialize, Serialize};

use crate::diffcore::Var;
use crate::error::{Error, Result};

/// Smallest extent a predicted box may take.
pub const MIN_EXTENT: f64 = 1e-4;

/// Centre-size box `(cx, cy, w, h)`.
///
/// Coordinates are normalized to the image in practice, but only positive
/// finite extents are enforced so corner-form fixtures outside the unit
/// square stay expressible.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Bbox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl TryFrom<[f64; 4]> for Bbox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Bbox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Bbox> for [f64; 4] {
    fn from(b: Bbox) -> Self {
        b.to_array()
    }
}

impl Bbox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let finite = [cx, cy, w, h].iter().all(|v| v.is_finite());
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(Error::DegenerateBox { cx, cy, w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }
}

fn intersection(a: &Bbox, b: &Bbox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let inter = intersection(a, b);
    inter / (a.area() + b.area() - inter)
}

pub fn giou(a: &Bbox, b: &Bbox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let enclose = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (enclose - union) / enclose
}

/// Sum of absolute coordinate differences over `(cx, cy, w, h)`.
pub fn l1_box(a: &Bbox, b: &Bbox) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// Per-row `1 - GIoU` of tape-backed `p × 4` predictions against targets.
pub fn giou_loss<'t>(pred: Var<'t>, targets: &[Bbox]) -> Result<Var<'t>> {
    let corners: Vec<[f64; 4]> = targets.iter().map(Bbox::corners).collect();
    pred.giou_loss_rows(&corners)
}

/// Per-row L1 distance of tape-backed `p × 4` predictions to targets.
pub fn l1_loss<'t>(pred: Var<'t>, targets: &[Bbox]) -> Result<Var<'t>> {
    let arr: Vec<[f64; 4]> = targets.iter().map(Bbox::to_array).collect();
    pred.l1_rows(&arr)
}

/// Reads row `i` of a `p × 4` value buffer as a box, flooring the extents.
pub fn bbox_from_row(values: &[f64], i: usize) -> Bbox {
    let r = &values[i * 4..i * 4 + 4];
    Bbox {
        cx: r[0],
        cy: r[1],
        w: r[2].max(MIN_EXTENT),
        h: r[3].max(MIN_EXTENT),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, Tensor};
    use proptest::prelude::*;

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
        Bbox::from_corners(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = corners(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &corners(2.0, 0.0, 3.0, 1.0)), 0.0);
        // intersection 0.5, union 1.5
        let v = iou(&a, &corners(0.5, 0.0, 1.5, 1.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-15, "{v}");
    }

    #[test]
    fn giou_examples() {
        let a = corners(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        // enclosing (0,0,3,1) area 3, union 2 → 0 - 1/3
        let v = giou(&a, &corners(2.0, 0.0, 3.0, 1.0));
        assert!((v + 1.0 / 3.0).abs() < 1e-15, "{v}");
    }

    #[test]
    fn l1_examples() {
        let a = Bbox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let b = Bbox::new(0.5, 0.5, 0.4, 0.2).unwrap();
        assert_eq!(l1_box(&a, &a), 0.0);
        assert!((l1_box(&a, &b) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(matches!(
            Bbox::new(0.5, 0.5, 0.0, 0.2),
            Err(Error::DegenerateBox { .. })
        ));
        assert!(Bbox::new(0.5, 0.5, 0.1, -0.2).is_err());
        assert!(Bbox::new(f64::NAN, 0.5, 0.1, 0.2).is_err());
        assert!(serde_json::from_str::<Bbox>("[0.5, 0.5, 0.0, 0.1]").is_err());
    }

    #[test]
    fn giou_loss_tensor_matches_scalar_route() {
        let pred = Bbox::new(0.45, 0.5, 0.3, 0.25).unwrap();
        let gt = Bbox::new(0.5, 0.55, 0.2, 0.3).unwrap();
        let tape = crate::diffcore::Tape::new();
        let p = tape.constant(&[1, 4], pred.to_array().to_vec()).unwrap();
        let l = giou_loss(p, &[gt]).unwrap().item();
        assert!((l - (1.0 - giou(&pred, &gt))).abs() < 1e-14);
    }

    fn arb_box() -> impl Strategy<Value = Bbox> {
        (0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.5, 0.05f64..0.5)
            .prop_map(|(cx, cy, w, h)| Bbox::new(cx, cy, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn giou_bounds_and_symmetry(a in arb_box(), b in arb_box()) {
            let (i, g) = (iou(&a, &b), giou(&a, &b));
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!(g <= i + 1e-15);
            prop_assert!(g > -1.0 && g <= 1.0);
            prop_assert!((g - giou(&b, &a)).abs() < 1e-15);
            prop_assert!((i - iou(&b, &a)).abs() < 1e-15);
        }

        #[test]
        fn giou_equals_iou_under_containment(a in arb_box(), s in 0.2f64..0.9) {
            let inner = Bbox::new(a.cx(), a.cy(), a.w() * s, a.h() * s).unwrap();
            prop_assert!((giou(&a, &inner) - iou(&a, &inner)).abs() < 1e-12);
        }

        #[test]
        fn translation_invariance(a in arb_box(), b in arb_box(), dx in -0.3f64..0.3, dy in -0.3f64..0.3) {
            let (ta, tb) = (a.translate(dx, dy), b.translate(dx, dy));
            prop_assert!((iou(&a, &b) - iou(&ta, &tb)).abs() < 1e-12);
            prop_assert!((giou(&a, &b) - giou(&ta, &tb)).abs() < 1e-12);
        }

        #[test]
        fn l1_triangle_inequality(a in arb_box(), b in arb_box(), c in arb_box()) {
            prop_assert!(l1_box(&a, &c) <= l1_box(&a, &b) + l1_box(&b, &c) + 1e-12);
        }

        #[test]
        fn giou_loss_gradient_check(a in arb_box(), b in arb_box()) {
            // stay away from coincident edges where GIoU is not differentiable
            let (ac, bc) = (a.corners(), b.corners());
            prop_assume!(ac.iter().zip(bc.iter()).all(|(x, y)| (x - y).abs() > 1e-3));
            let theta = Tensor::new(&[1, 4], a.to_array().to_vec()).unwrap();
            let err = finite_diff_check(|_, x| Ok(giou_loss(x, &[b])?.sum_all()), &theta, 1e-5).unwrap();
            prop_assert!(err < 1e-4, "err = {}", err);
        }
    }
}
