//! Axis-aligned boxes, IoU and crowd detection.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default IoU above which two ground-truth objects count as overlapped.
pub const DEFAULT_CROWD_TAU: f64 = 0.3;

/// Corner-encoded box with strictly positive area.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("box {coords:?} has non-finite coordinates")));
        }
        if x_max <= x_min || y_max <= y_min {
            return Err(Error::invalid(format!("box {coords:?} has zero or negative area")));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from center/size encoding.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
        )
    }

    /// Builds a box from COCO-style `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(x, y, x + width, y + height)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union using continuous areas.
///
/// Degenerate boxes cannot be constructed, so this never fails.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Symmetric IoU matrix with an exact unit diagonal.
pub fn iou_matrix(boxes: &[BoundingBox]) -> DMatrix<f64> {
    let n = boxes.len();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = iou(&boxes[i], &boxes[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// IoU between every row box and every column box.
pub fn iou_cross(rows: &[BoundingBox], cols: &[BoundingBox]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| iou(&rows[i], &cols[j]))
}

/// An annotated object in a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthObject {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: u32,
    pub instance_id: u64,
}

/// Checks that instance ids are unique and class ids are below `n_classes`.
pub fn validate_ground_truth(gts: &[GroundTruthObject], n_classes: Option<usize>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for gt in gts {
        if !seen.insert(gt.instance_id) {
            return Err(Error::invalid(format!(
                "duplicate ground-truth instance_id {}",
                gt.instance_id
            )));
        }
        if let Some(n_c) = n_classes {
            if gt.class_id as usize >= n_c {
                return Err(Error::invalid(format!(
                    "ground-truth class_id {} outside 0..{n_c}",
                    gt.class_id
                )));
            }
        }
    }
    Ok(())
}

/// Instance ids of objects whose IoU with at least one other object exceeds `tau`.
pub fn crowd_objects(gts: &[GroundTruthObject], tau: f64) -> Result<BTreeSet<u64>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("crowd threshold {tau} outside [0, 1]")));
    }
    let mut crowd = BTreeSet::new();
    for i in 0..gts.len() {
        for j in (i + 1)..gts.len() {
            if iou(&gts[i].bbox, &gts[j].bbox) > tau {
                crowd.insert(gts[i].instance_id);
                crowd.insert(gts[j].instance_id);
            }
        }
    }
    Ok(crowd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn gt(b: BoundingBox, id: u64) -> GroundTruthObject {
        GroundTruthObject {
            bbox: b,
            class_id: 0,
            instance_id: id,
        }
    }

    /// Counts unit pixels covered by each box on an integer grid.
    fn raster_iou(a: &BoundingBox, b: &BoundingBox, cells_per_unit: usize) -> f64 {
        let s = cells_per_unit as f64;
        let (mut inter, mut union) = (0usize, 0usize);
        let lo = a.x_min().min(b.x_min()).floor() as i64;
        let hi = a.x_max().max(b.x_max()).ceil() as i64;
        let lo_y = a.y_min().min(b.y_min()).floor() as i64;
        let hi_y = a.y_max().max(b.y_max()).ceil() as i64;
        let inside = |bb: &BoundingBox, x: f64, y: f64| {
            x >= bb.x_min() && x < bb.x_max() && y >= bb.y_min() && y < bb.y_max()
        };
        for xi in (lo * cells_per_unit as i64)..(hi * cells_per_unit as i64) {
            for yi in (lo_y * cells_per_unit as i64)..(hi_y * cells_per_unit as i64) {
                let (x, y) = ((xi as f64 + 0.5) / s, (yi as f64 + 0.5) / s);
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    union += 1;
                }
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn identity_and_disjoint() {
        let b = bx(1.0, 2.0, 4.0, 7.0);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
    }

    #[test]
    fn half_shifted_square_matches_pixel_count() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        let oracle = raster_iou(&a, &b, 1);
        assert!((oracle - 50.0 / 150.0).abs() < 1e-15);
        assert!((iou(&a, &b) - oracle).abs() < 1e-15);
    }

    #[test]
    fn raster_oracle_converges_on_fractional_boxes() {
        let a = bx(0.25, 0.5, 3.75, 2.5);
        let b = bx(1.5, 1.0, 4.5, 3.25);
        let coarse = (raster_iou(&a, &b, 4) - iou(&a, &b)).abs();
        assert!(coarse < 1e-12, "quarter-pixel grid is exact here: {coarse}");
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(matches!(
            BoundingBox::new(0.0, 0.0, 0.0, 1.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(BoundingBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        let parsed: std::result::Result<BoundingBox, _> = serde_json::from_str("[0, 0, 1, 0]");
        assert!(parsed.is_err());
    }

    #[test]
    fn iou_matrix_examples() {
        let one = iou_matrix(&[bx(0.0, 0.0, 1.0, 1.0)]);
        assert_eq!(one, DMatrix::from_element(1, 1, 1.0));
        let two = iou_matrix(&[bx(0.0, 0.0, 1.0, 1.0), bx(2.0, 2.0, 3.0, 3.0)]);
        assert_eq!(two, DMatrix::identity(2, 2));

        let boxes = [
            bx(0.0, 0.0, 4.0, 4.0),
            bx(2.0, 1.0, 6.0, 5.0),
            bx(3.0, 3.0, 7.0, 8.0),
        ];
        let m = iou_matrix(&boxes);
        for i in 0..3 {
            for j in 0..3 {
                let oracle = if i == j {
                    1.0
                } else {
                    raster_iou(&boxes[i], &boxes[j], 1)
                };
                assert!((m[(i, j)] - oracle).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn crowd_examples() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert!(crowd_objects(&[gt(b, 7)], 0.3).unwrap().is_empty());
        let both = crowd_objects(&[gt(b, 1), gt(b, 2)], 0.3).unwrap();
        assert_eq!(both.into_iter().collect::<Vec<_>>(), vec![1, 2]);

        // a-b overlap 1/3, b-c overlap 1/9, a-c disjoint
        let chain = [
            gt(bx(0.0, 0.0, 10.0, 10.0), 10),
            gt(bx(5.0, 0.0, 15.0, 10.0), 11),
            gt(bx(13.0, 0.0, 23.0, 10.0), 12),
        ];
        let oracle: BTreeSet<u64> = {
            let mut s = BTreeSet::new();
            for i in 0..3 {
                for j in 0..3 {
                    if i != j && raster_iou(&chain[i].bbox, &chain[j].bbox, 1) > 0.3 {
                        s.insert(chain[i].instance_id);
                    }
                }
            }
            s
        };
        assert_eq!(crowd_objects(&chain, 0.3).unwrap(), oracle);
        assert_eq!(oracle.into_iter().collect::<Vec<_>>(), vec![10, 11]);
        assert!(crowd_objects(&chain, 1.5).is_err());
    }

    #[test]
    fn duplicate_instance_ids_rejected() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        assert!(validate_ground_truth(&[gt(b, 1), gt(b, 1)], None).is_err());
        assert!(validate_ground_truth(&[gt(b, 1)], Some(0)).is_err());
        assert!(validate_ground_truth(&[gt(b, 1), gt(b, 2)], Some(1)).is_ok());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.1..30.0f64, 0.1..30.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn containment_monotone(
            a in arb_box(),
            grow1 in prop::array::uniform4(0.0..5.0f64),
            grow2 in prop::array::uniform4(0.0..5.0f64),
        ) {
            let b = BoundingBox::new(a.x_min() - grow1[0], a.y_min() - grow1[1],
                a.x_max() + grow1[2], a.y_max() + grow1[3]).unwrap();
            let c = BoundingBox::new(b.x_min() - grow2[0], b.y_min() - grow2[1],
                b.x_max() + grow2[2], b.y_max() + grow2[3]).unwrap();
            prop_assert!(b.contains(&a) && c.contains(&b));
            prop_assert!(iou(&a, &c) <= iou(&a, &b) + 1e-15);
        }

        #[test]
        fn iou_matrix_unit_diagonal_and_bitwise_symmetric(boxes in prop::collection::vec(arb_box(), 0..8)) {
            let m = iou_matrix(&boxes);
            for i in 0..boxes.len() {
                prop_assert_eq!(m[(i, i)], 1.0);
                for j in 0..boxes.len() {
                    prop_assert_eq!(m[(i, j)].to_bits(), m[(j, i)].to_bits());
                }
            }
        }

        #[test]
        fn crowd_monotone_in_threshold(boxes in prop::collection::vec(arb_box(), 0..7), tau in 0.0..1.0f64) {
            let gts: Vec<_> = boxes.into_iter().enumerate().map(|(i, b)| gt(b, i as u64)).collect();
            let loose = crowd_objects(&gts, 0.0).unwrap();
            let tight = crowd_objects(&gts, tau).unwrap();
            prop_assert!(tight.is_subset(&loose));
        }
    }
}
