use serde::{Deserialize, Serialize};

/// Tolerance for unit-square containment checks on sums of coordinates.
const EPS: f64 = 1e-9;

/// Axis-aligned box in page-normalized coordinates, serialized as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Coordinates in [0,1], positive extent, and `x+w <= 1`, `y+h <= 1`.
    pub fn check_unit(&self) -> Result<(), String> {
        let coords = [self.x, self.y, self.w, self.h];
        if coords.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
            return Err(format!("box coordinates must lie in [0,1]: {coords:?}"));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!("box width and height must be positive: {coords:?}"));
        }
        if self.right() > 1.0 + EPS || self.bottom() > 1.0 + EPS {
            return Err(format!("box exceeds the unit square: {coords:?}"));
        }
        Ok(())
    }

    /// Length of the vertical overlap between two boxes (0 when disjoint).
    pub fn vertical_overlap(&self, other: &BBox) -> f64 {
        (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0)
    }
}

/// Intersection over union; 0 when either box has no area.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Counts cells of a `res`-spaced grid whose centres fall in the boxes.
    fn raster_iou(a: &BBox, b: &BBox, res: f64) -> f64 {
        let n = (1.0 / res).round() as usize;
        let inside = |bx: &BBox, px: f64, py: f64| {
            px >= bx.x && px < bx.right() && py >= bx.y && py < bx.bottom()
        };
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                let (px, py) = ((i as f64 + 0.5) * res, (j as f64 + 0.5) * res);
                let (ia, ib) = (inside(a, px, py), inside(b, px, py));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn identical_and_disjoint() {
        let a = BBox::new(0.1, 0.1, 0.2, 0.2);
        assert_eq!(box_iou(&a, &a), 1.0);
        let b = BBox::new(0.5, 0.5, 0.1, 0.1);
        assert_eq!(box_iou(&a, &b), 0.0);
    }

    #[test]
    fn offset_boxes_match_raster_oracle() {
        let a = BBox::new(0.0, 0.0, 0.10, 0.10);
        let b = BBox::new(0.05, 0.05, 0.10, 0.10);
        // Frozen from the 1e-3 raster count: 2500 / 17500.
        let oracle = raster_iou(&a, &b, 1e-3);
        assert!((oracle - 0.142857).abs() < 1e-4, "{oracle}");
        assert!((box_iou(&a, &b) - 0.0025 / 0.0175).abs() < 1e-12);
        assert!((box_iou(&a, &b) - oracle).abs() < 1e-3);
    }

    #[test]
    fn unit_square_checks() {
        assert!(BBox::new(0.6, 0.0, 0.4, 1.0).check_unit().is_ok());
        assert!(BBox::new(0.7, 0.0, 0.4, 0.1).check_unit().is_err());
        assert!(BBox::new(0.1, 0.1, 0.0, 0.1).check_unit().is_err());
        assert!(BBox::new(-0.1, 0.1, 0.1, 0.1).check_unit().is_err());
        assert!(BBox::new(f64::NAN, 0.1, 0.1, 0.1).check_unit().is_err());
    }

    #[test]
    fn serializes_as_array() {
        let b = BBox::new(0.1, 0.2, 0.3, 0.4);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[0.1,0.2,0.3,0.4]");
    }
}
