//! Crop boxes in normalized center format, overlap measures, and their
//! differentiable counterparts over graph columns.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, TensorError, Var};

/// Smallest accepted width or height.
pub const MIN_EXTENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("box component {name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("degenerate box: width {w}, height {h}")]
    Degenerate { w: f64, h: f64 },
}

/// Rectangle `(cx, cy, w, h)` as fractions of the image extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct CropBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

/// Corner coordinates `(x1, y1, x2, y2)`, clamped to the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Corners {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

impl CropBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        for (name, value) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(GeometryError::OutOfRange { name, value });
            }
        }
        if w < MIN_EXTENT || h < MIN_EXTENT {
            return Err(GeometryError::Degenerate { w, h });
        }
        Ok(CropBox { cx, cy, w, h })
    }

    /// The whole image.
    pub fn full() -> Self {
        CropBox {
            cx: 0.5,
            cy: 0.5,
            w: 1.0,
            h: 1.0,
        }
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

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corners clamped to `[0, 1]`; stored fields are left untouched.
    pub fn to_corners(&self) -> Result<Corners, GeometryError> {
        let c = Corners {
            x1: (self.cx - self.w / 2.0).clamp(0.0, 1.0),
            y1: (self.cy - self.h / 2.0).clamp(0.0, 1.0),
            x2: (self.cx + self.w / 2.0).clamp(0.0, 1.0),
            y2: (self.cy + self.h / 2.0).clamp(0.0, 1.0),
        };
        if c.x2 <= c.x1 || c.y2 <= c.y1 {
            return Err(GeometryError::Degenerate {
                w: c.x2 - c.x1,
                h: c.y2 - c.y1,
            });
        }
        Ok(c)
    }

    pub fn from_corners(c: Corners) -> Result<Self, GeometryError> {
        if c.x2 <= c.x1 || c.y2 <= c.y1 {
            return Err(GeometryError::Degenerate {
                w: c.x2 - c.x1,
                h: c.y2 - c.y1,
            });
        }
        CropBox::new(
            (c.x1 + c.x2) / 2.0,
            (c.y1 + c.y2) / 2.0,
            c.x2 - c.x1,
            c.y2 - c.y1,
        )
    }

    fn clamped_corners(&self) -> Corners {
        // Valid boxes always keep a positive extent after clamping since the
        // center lies inside the image.
        self.to_corners().unwrap_or(Corners {
            x1: self.cx,
            y1: self.cy,
            x2: self.cx,
            y2: self.cy,
        })
    }
}

impl TryFrom<[f64; 4]> for CropBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        CropBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<CropBox> for [f64; 4] {
    fn from(b: CropBox) -> Self {
        b.to_array()
    }
}

/// A ground-truth crop with its mean opinion score in `[1, 5]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCrop {
    #[serde(rename = "box")]
    pub crop: CropBox,
    pub mos: f64,
}

pub const MOS_MIN: f64 = 1.0;
pub const MOS_MAX: f64 = 5.0;

impl ScoredCrop {
    pub fn new(crop: CropBox, mos: f64) -> Option<Self> {
        (MOS_MIN..=MOS_MAX)
            .contains(&mos)
            .then_some(ScoredCrop { crop, mos })
    }
}

struct Overlap {
    inter: f64,
    union: f64,
    enclosing: f64,
}

fn overlap(a: &CropBox, b: &CropBox) -> Overlap {
    let (ca, cb) = (a.clamped_corners(), b.clamped_corners());
    let iw = (ca.x2.min(cb.x2) - ca.x1.max(cb.x1)).max(0.0);
    let ih = (ca.y2.min(cb.y2) - ca.y1.max(cb.y1)).max(0.0);
    let inter = iw * ih;
    let union = ca.area() + cb.area() - inter;
    let ew = ca.x2.max(cb.x2) - ca.x1.min(cb.x1);
    let eh = ca.y2.max(cb.y2) - ca.y1.min(cb.y1);
    Overlap {
        inter,
        union,
        enclosing: ew * eh,
    }
}

pub fn iou(a: &CropBox, b: &CropBox) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union
}

/// Generalized IoU, in `(-1, 1]`. The matching loss term is `1 - giou`.
pub fn giou(a: &CropBox, b: &CropBox) -> f64 {
    let o = overlap(a, b);
    o.inter / o.union - (o.enclosing - o.union) / o.enclosing
}

/// Sum of absolute differences over the four center-format components.
pub fn l1_box(a: &CropBox, b: &CropBox) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// A batch of `k` boxes on a graph, one `[k]` column per component.
#[derive(Clone, Copy, Debug)]
pub struct BoxColumns {
    pub cx: Var,
    pub cy: Var,
    pub w: Var,
    pub h: Var,
}

impl BoxColumns {
    /// Splits a `[k×4]` center-format tensor into columns.
    pub fn split(g: &mut Graph, boxes: Var) -> Result<Self, TensorError> {
        Ok(BoxColumns {
            cx: g.column(boxes, 0)?,
            cy: g.column(boxes, 1)?,
            w: g.column(boxes, 2)?,
            h: g.column(boxes, 3)?,
        })
    }
}

struct CornerColumns {
    x1: Var,
    y1: Var,
    x2: Var,
    y2: Var,
}

fn corner_columns(g: &mut Graph, b: &BoxColumns) -> Result<CornerColumns, TensorError> {
    let w = g.clamp(b.w, MIN_EXTENT, 1.0)?;
    let h = g.clamp(b.h, MIN_EXTENT, 1.0)?;
    let hw = g.scale(w, 0.5)?;
    let hh = g.scale(h, 0.5)?;
    let x1 = g.sub(b.cx, hw)?;
    let x2 = g.add(b.cx, hw)?;
    let y1 = g.sub(b.cy, hh)?;
    let y2 = g.add(b.cy, hh)?;
    Ok(CornerColumns {
        x1: g.clamp(x1, 0.0, 1.0)?,
        y1: g.clamp(y1, 0.0, 1.0)?,
        x2: g.clamp(x2, 0.0, 1.0)?,
        y2: g.clamp(y2, 0.0, 1.0)?,
    })
}

fn area(g: &mut Graph, c: &CornerColumns) -> Result<Var, TensorError> {
    let w = g.sub(c.x2, c.x1)?;
    let h = g.sub(c.y2, c.y1)?;
    g.mul(w, h)
}

/// Row-wise generalized IoU between two equally sized box batches, as a `[k]` tensor.
pub fn giou_columns(g: &mut Graph, a: &BoxColumns, b: &BoxColumns) -> Result<Var, TensorError> {
    let ca = corner_columns(g, a)?;
    let cb = corner_columns(g, b)?;
    let area_a = area(g, &ca)?;
    let area_b = area(g, &cb)?;

    let ix2 = g.minimum(ca.x2, cb.x2)?;
    let ix1 = g.maximum(ca.x1, cb.x1)?;
    let iy2 = g.minimum(ca.y2, cb.y2)?;
    let iy1 = g.maximum(ca.y1, cb.y1)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;

    let sum = g.add(area_a, area_b)?;
    let union = g.sub(sum, inter)?;
    let iou = g.div(inter, union)?;

    let ex2 = g.maximum(ca.x2, cb.x2)?;
    let ex1 = g.minimum(ca.x1, cb.x1)?;
    let ey2 = g.maximum(ca.y2, cb.y2)?;
    let ey1 = g.minimum(ca.y1, cb.y1)?;
    let ew = g.sub(ex2, ex1)?;
    let eh = g.sub(ey2, ey1)?;
    let enclosing = g.mul(ew, eh)?;
    let gap = g.sub(enclosing, union)?;
    let penalty = g.div(gap, enclosing)?;
    g.sub(iou, penalty)
}

/// Total L1 distance between two `[k×4]` center-format box tensors.
pub fn l1_sum(g: &mut Graph, a: Var, b: Var) -> Result<Var, TensorError> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.sum(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> CropBox {
        CropBox::from_corners(Corners { x1, y1, x2, y2 }).unwrap()
    }

    #[test]
    fn corner_conversion() {
        let c = CropBox::new(0.5, 0.5, 1.0, 1.0).unwrap().to_corners().unwrap();
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 1.0, 1.0));
        let c = CropBox::new(0.25, 0.25, 0.5, 0.5).unwrap().to_corners().unwrap();
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 0.5, 0.5));
    }

    #[test]
    fn validation() {
        assert!(matches!(
            CropBox::new(1.2, 0.5, 0.1, 0.1),
            Err(GeometryError::OutOfRange { name: "cx", .. })
        ));
        assert!(matches!(
            CropBox::new(0.5, 0.5, 0.0, 0.1),
            Err(GeometryError::Degenerate { .. })
        ));
        assert!(CropBox::from_corners(Corners {
            x1: 0.5,
            y1: 0.0,
            x2: 0.5,
            y2: 1.0
        })
        .is_err());
        assert!(ScoredCrop::new(CropBox::full(), 5.1).is_none());
    }

    #[test]
    fn iou_cases() {
        let b = CropBox::new(0.3, 0.6, 0.2, 0.4).unwrap();
        assert_eq!(iou(&b, &b), 1.0);
        let left = corners(0.0, 0.0, 0.5, 1.0);
        let right = corners(0.5, 0.0, 1.0, 1.0);
        assert_eq!(iou(&left, &right), 0.0);
        let a = corners(0.0, 0.0, 0.5, 0.5);
        let c = corners(0.25, 0.25, 0.75, 0.75);
        // inter 1/16, union 1/4 + 1/4 - 1/16 = 7/16
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn giou_cases() {
        let b = CropBox::new(0.3, 0.6, 0.2, 0.4).unwrap();
        assert_eq!(giou(&b, &b), 1.0);
        let left = corners(0.0, 0.0, 0.5, 1.0);
        let right = corners(0.5, 0.0, 1.0, 1.0);
        assert_eq!(giou(&left, &right), 0.0);
        let a = corners(0.0, 0.0, 0.25, 1.0);
        let c = corners(0.75, 0.0, 1.0, 1.0);
        // iou 0, union 1/2, enclosing 1
        assert!((giou(&a, &c) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn l1_cases() {
        let a = CropBox::new(0.4, 0.4, 0.3, 0.3).unwrap();
        assert_eq!(l1_box(&a, &a), 0.0);
        let b = CropBox::new(0.5, 0.5, 0.4, 0.4).unwrap();
        assert!((l1_box(&a, &b) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn graph_giou_matches_scalar() {
        let pairs = [
            ([0.5, 0.5, 0.4, 0.3], [0.45, 0.55, 0.5, 0.2]),
            ([0.2, 0.3, 0.3, 0.5], [0.8, 0.7, 0.2, 0.3]),
            ([0.1, 0.9, 0.3, 0.3], [0.15, 0.85, 0.25, 0.4]),
        ];
        let mut g = Graph::new();
        let a = g.constant(
            Tensor::new(vec![3, 4], pairs.iter().flat_map(|p| p.0).collect()).unwrap(),
        );
        let b = g.constant(
            Tensor::new(vec![3, 4], pairs.iter().flat_map(|p| p.1).collect()).unwrap(),
        );
        let ca = BoxColumns::split(&mut g, a).unwrap();
        let cb = BoxColumns::split(&mut g, b).unwrap();
        let v = giou_columns(&mut g, &ca, &cb).unwrap();
        for (k, (pa, pb)) in pairs.iter().enumerate() {
            let want = giou(&CropBox::try_from(*pa).unwrap(), &CropBox::try_from(*pb).unwrap());
            assert!((g.data(v)[k] - want).abs() < 1e-14);
        }
        let s = l1_sum(&mut g, a, b).unwrap();
        let want: f64 = pairs
            .iter()
            .map(|(pa, pb)| {
                l1_box(&CropBox::try_from(*pa).unwrap(), &CropBox::try_from(*pb).unwrap())
            })
            .sum();
        assert!((g.item(s) - want).abs() < 1e-14);
    }

    #[test]
    fn serde_as_array() {
        let b = CropBox::new(0.5, 0.25, 0.5, 0.5).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[0.5,0.25,0.5,0.5]");
        assert!(serde_json::from_str::<CropBox>("[0.5,0.25,0.0,0.5]").is_err());
    }
}
