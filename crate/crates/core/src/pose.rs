//! Head pose and bounding-box value types.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// Wrap an angle in degrees into `[-180, 180)`.
pub fn normalize_angle(angle: f64) -> Result<f64> {
    if !angle.is_finite() {
        return Err(Error::NonFinite(format!("angle {angle}")));
    }
    let wrapped = (angle + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    Ok(if wrapped >= 180.0 { wrapped - 360.0 } else { wrapped })
}

/// Head orientation in degrees, each component in `[-180, 180)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pitch: f64,
    yaw: f64,
    roll: f64,
}

impl EulerAngles {
    pub fn new(pitch: f64, yaw: f64, roll: f64) -> Result<Self> {
        Ok(Self {
            pitch: normalize_angle(pitch)?,
            yaw: normalize_angle(yaw)?,
            roll: normalize_angle(roll)?,
        })
    }

    pub fn zero() -> Self {
        Self { pitch: 0.0, yaw: 0.0, roll: 0.0 }
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn roll(&self) -> f64 {
        self.roll
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.pitch, self.yaw, self.roll]
    }

    /// Component-wise offset, re-normalized.
    pub fn offset(&self, d_pitch: f64, d_yaw: f64, d_roll: f64) -> Result<Self> {
        Self::new(self.pitch + d_pitch, self.yaw + d_yaw, self.roll + d_roll)
    }

    /// Sum of absolute per-axis differences, measured along the shorter arc.
    pub fn l1_separation(&self, other: &EulerAngles) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| {
                let d = (a - b).abs().rem_euclid(360.0);
                d.min(360.0 - d)
            })
            .sum()
    }
}

impl Serialize for EulerAngles {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.as_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for EulerAngles {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [p, y, r] = <[f64; 3]>::deserialize(d)?;
        EulerAngles::new(p, y, r).map_err(serde::de::Error::custom)
    }
}

/// Frame size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDims {
    pub width: u32,
    pub height: u32,
}

impl Default for FrameDims {
    fn default() -> Self {
        Self { width: 832, height: 480 }
    }
}

/// Axis-aligned rectangle `(x1, y1)`–`(x2, y2)` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let c = [self.x1, self.y1, self.x2, self.y2];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("bbox {c:?}")));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::InvalidArgument(format!("degenerate bbox {c:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Truncate to `[0, width] × [0, height]`.
    pub fn clamp(&self, f: FrameDims) -> Result<Self> {
        let (w, h) = (f64::from(f.width), f64::from(f.height));
        BBox::new(
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
            self.x2.clamp(0.0, w),
            self.y2.clamp(0.0, h),
        )
        .map_err(|_| Error::InvalidArgument(format!("bbox {self:?} lies outside the frame")))
    }

    /// Outward rounding to the pixel grid: floor the min corner, ceil the max corner.
    pub fn round_outward(&self) -> Self {
        Self {
            x1: self.x1.floor(),
            y1: self.y1.floor(),
            x2: self.x2.ceil(),
            y2: self.y2.ceil(),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.as_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        BBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

/// Scale `b` about its center by `factor`, then truncate to the frame.
pub fn enlarge_bbox(b: &BBox, factor: f64, frame: FrameDims) -> Result<BBox> {
    b.validate()?;
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidArgument(format!("enlargement factor {factor}")));
    }
    let (cx, cy) = b.center();
    let hw = b.width() * factor / 2.0;
    let hh = b.height() * factor / 2.0;
    BBox::new(cx - hw, cy - hh, cx + hw, cy + hh)?.clamp(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FRAME: FrameDims = FrameDims { width: 832, height: 480 };

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_angle(0.0).unwrap(), 0.0);
        assert_eq!(normalize_angle(360.0).unwrap(), 0.0);
        assert_eq!(normalize_angle(-190.0).unwrap(), 170.0);
        assert_eq!(normalize_angle(180.0).unwrap(), -180.0);
        assert_eq!(normalize_angle(-180.0).unwrap(), -180.0);
        assert!(normalize_angle(-1e-18).unwrap() < 180.0);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        assert!(normalize_angle(f64::NAN).is_err());
        assert!(normalize_angle(f64::INFINITY).is_err());
        assert!(EulerAngles::new(0.0, f64::NEG_INFINITY, 0.0).is_err());
    }

    #[test]
    fn euler_serde_normalizes_on_ingest() {
        let e: EulerAngles = serde_json::from_str("[370, -190, 0]").unwrap();
        assert_eq!(e.as_array(), [10.0, 170.0, 0.0]);
        assert_eq!(serde_json::to_string(&e).unwrap(), "[10.0,170.0,0.0]");
    }

    #[test]
    fn enlarge_examples() {
        let b = BBox::new(100.0, 100.0, 200.0, 200.0).unwrap();
        assert_eq!(enlarge_bbox(&b, 1.5, FRAME).unwrap().as_array(), [75.0, 75.0, 225.0, 225.0]);

        let b = BBox::new(0.0, 0.0, 100.0, 100.0).unwrap();
        assert_eq!(enlarge_bbox(&b, 1.5, FRAME).unwrap().as_array(), [0.0, 0.0, 125.0, 125.0]);

        let b = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        assert_eq!(enlarge_bbox(&b, 1.0, FRAME).unwrap().as_array(), [10.0, 10.0, 20.0, 20.0]);
    }

    #[test]
    fn enlarge_rejects_bad_input() {
        assert!(BBox::new(10.0, 10.0, 10.0, 20.0).is_err());
        let b = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        assert!(enlarge_bbox(&b, 0.0, FRAME).is_err());
        assert!(enlarge_bbox(&b, -1.0, FRAME).is_err());
        let outside = BBox::new(900.0, 10.0, 950.0, 20.0).unwrap();
        assert!(enlarge_bbox(&outside, 1.5, FRAME).is_err());
    }

    #[test]
    fn round_outward_floors_and_ceils() {
        let b = BBox::new(1.2, 3.7, 10.1, 20.9).unwrap().round_outward();
        assert_eq!(b.as_array(), [1.0, 3.0, 11.0, 21.0]);
    }

    #[test]
    fn separation_uses_short_arc() {
        let a = EulerAngles::new(170.0, 0.0, 0.0).unwrap();
        let b = EulerAngles::new(-170.0, 10.0, -5.0).unwrap();
        assert!((a.l1_separation(&b) - 35.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_periodic(a in -1e4f64..1e4, k in -20i32..20) {
            let n = normalize_angle(a).unwrap();
            prop_assert!((-180.0..180.0).contains(&n));
            prop_assert_eq!(normalize_angle(n).unwrap(), n);
            let shifted = normalize_angle(a + 360.0 * f64::from(k)).unwrap();
            let d = (shifted - n).abs();
            prop_assert!(d < 1e-9 || (360.0 - d) < 1e-9);
        }

        #[test]
        fn enlarge_identity_inside_frame(x in 0.0f64..700.0, y in 0.0f64..400.0, w in 1.0f64..100.0, h in 1.0f64..70.0) {
            let b = BBox::new(x, y, x + w, y + h).unwrap();
            let out = enlarge_bbox(&b, 1.0, FRAME).unwrap();
            for (p, q) in out.as_array().iter().zip(b.as_array()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn enlarge_preserves_center_and_area(x in 0.0f64..800.0, y in 0.0f64..450.0, w in 1.0f64..300.0, h in 1.0f64..300.0, factor in 1.0f64..3.0) {
            let frame_area = 832.0 * 480.0;
            let Ok(b) = BBox::new(x, y, x + w, y + h).and_then(|b| b.clamp(FRAME)) else { return Ok(()); };
            let out = enlarge_bbox(&b, factor, FRAME).unwrap();
            prop_assert!(out.x1 >= 0.0 && out.y1 >= 0.0 && out.x2 <= 832.0 && out.y2 <= 480.0);
            prop_assert!(out.area() + 1e-9 >= b.area().min(frame_area));
            let unclamped_w = b.width() * factor;
            let unclamped_h = b.height() * factor;
            if (out.width() - unclamped_w).abs() < 1e-9 && (out.height() - unclamped_h).abs() < 1e-9 {
                let (cx, cy) = b.center();
                let (ox, oy) = out.center();
                prop_assert!((cx - ox).abs() < 1e-9 && (cy - oy).abs() < 1e-9);
            }
        }
    }
}
