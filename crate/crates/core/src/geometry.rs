//! Box arithmetic, coordinate quantization onto the `{0, ..., 1000}` location
//! vocabulary, and overlap measures.
//!
//! Boxes use continuous corner coordinates `(x1, y1, x2, y2)` with area
//! `(x2 - x1) * (y2 - y1)`; there is no "+1" pixel inclusivity.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper end of the quantized coordinate vocabulary (inclusive).
pub const QUANT_MAX: u16 = 1000;

/// Quotients closer than this to an integer are treated as that integer when
/// flooring, so values produced by [`dequantize`] quantize back exactly.
const SNAP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coord {
    X1,
    Y1,
    X2,
    Y2,
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Coord::X1 => "x1",
            Coord::Y1 => "y1",
            Coord::X2 => "x2",
            Coord::Y2 => "y2",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("coordinate {coord} is not finite")]
    NonFinite { coord: Coord },
    #[error("coordinate {coord} = {value} is negative")]
    Negative { coord: Coord, value: f64 },
    #[error("inverted box: {lo} = {lo_value} exceeds {hi} = {hi_value}")]
    Inverted {
        lo: Coord,
        lo_value: f64,
        hi: Coord,
        hi_value: f64,
    },
    #[error("coordinate {coord} = {value} lies outside the image extent {extent}")]
    OutOfBounds { coord: Coord, value: f64, extent: u32 },
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("quantized coordinate {coord} = {value} exceeds {QUANT_MAX}")]
    OutOfVocab { coord: Coord, value: u32 },
    #[error("inverted quantized box: {lo} = {lo_value} exceeds {hi} = {hi_value}")]
    InvertedQuantized {
        lo: Coord,
        lo_value: u16,
        hi: Coord,
        hi_value: u16,
    },
}

/// Axis-aligned box in pixel space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = GeometryError;
    fn try_from(r: RawBox) -> Result<Self, Self::Error> {
        BoundingBox::new(r.x1, r.y1, r.x2, r.y2)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        }
    }
}

impl BoundingBox {
    /// Validated constructor: finite, non-negative, `x1 <= x2`, `y1 <= y2`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        for (coord, v) in [(Coord::X1, x1), (Coord::Y1, y1), (Coord::X2, x2), (Coord::Y2, y2)] {
            if !v.is_finite() {
                return Err(GeometryError::NonFinite { coord });
            }
            if v < 0.0 {
                return Err(GeometryError::Negative { coord, value: v });
            }
        }
        if x1 > x2 {
            return Err(GeometryError::Inverted {
                lo: Coord::X1,
                lo_value: x1,
                hi: Coord::X2,
                hi_value: x2,
            });
        }
        if y1 > y2 {
            return Err(GeometryError::Inverted {
                lo: Coord::Y1,
                lo_value: y1,
                hi: Coord::Y2,
                hi_value: y2,
            });
        }
        Ok(Self { x1, y1, x2, y2 })
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

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Whether the box lies inside `[0, W] x [0, H]`.
    pub fn fits(&self, dims: ImageDims) -> bool {
        self.check_bounds(dims).is_ok()
    }

    fn check_bounds(&self, dims: ImageDims) -> Result<(), GeometryError> {
        for (coord, value, extent) in [
            (Coord::X1, self.x1, dims.width),
            (Coord::Y1, self.y1, dims.height),
            (Coord::X2, self.x2, dims.width),
            (Coord::Y2, self.y2, dims.height),
        ] {
            if value > f64::from(extent) {
                return Err(GeometryError::OutOfBounds { coord, value, extent });
            }
        }
        Ok(())
    }

    /// Intersects the box with the image rectangle. Coordinates are not
    /// validated again, so this never fails for a valid box.
    pub fn clamp_to(&self, dims: ImageDims) -> BoundingBox {
        let w = f64::from(dims.width);
        let h = f64::from(dims.height);
        BoundingBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    /// Translation without validation; callers must keep the result
    /// non-negative if they intend to store it.
    pub(crate) fn translated(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

/// Image extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDims")]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
struct RawDims {
    width: u32,
    height: u32,
}

impl TryFrom<RawDims> for ImageDims {
    type Error = GeometryError;
    fn try_from(r: RawDims) -> Result<Self, Self::Error> {
        ImageDims::new(r.width, r.height)
    }
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage { width, height });
        }
        Ok(Self { width, height })
    }
}

/// Box on the `{0, ..., 1000}` location vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u16; 4]")]
pub struct QuantizedBox {
    pub qx1: u16,
    pub qy1: u16,
    pub qx2: u16,
    pub qy2: u16,
}

impl TryFrom<[u32; 4]> for QuantizedBox {
    type Error = GeometryError;
    fn try_from(v: [u32; 4]) -> Result<Self, Self::Error> {
        QuantizedBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<QuantizedBox> for [u16; 4] {
    fn from(q: QuantizedBox) -> Self {
        q.values()
    }
}

impl QuantizedBox {
    pub fn new(qx1: u32, qy1: u32, qx2: u32, qy2: u32) -> Result<Self, GeometryError> {
        for (coord, value) in [(Coord::X1, qx1), (Coord::Y1, qy1), (Coord::X2, qx2), (Coord::Y2, qy2)] {
            if value > u32::from(QUANT_MAX) {
                return Err(GeometryError::OutOfVocab { coord, value });
            }
        }
        // lossless after the range check above
        let (qx1, qy1, qx2, qy2) = (qx1 as u16, qy1 as u16, qx2 as u16, qy2 as u16);
        if qx1 > qx2 {
            return Err(GeometryError::InvertedQuantized {
                lo: Coord::X1,
                lo_value: qx1,
                hi: Coord::X2,
                hi_value: qx2,
            });
        }
        if qy1 > qy2 {
            return Err(GeometryError::InvertedQuantized {
                lo: Coord::Y1,
                lo_value: qy1,
                hi: Coord::Y2,
                hi_value: qy2,
            });
        }
        Ok(Self { qx1, qy1, qx2, qy2 })
    }

    pub fn values(&self) -> [u16; 4] {
        [self.qx1, self.qy1, self.qx2, self.qy2]
    }
}

fn quantize_coord(value: f64, extent: u32) -> u16 {
    let scaled = value * f64::from(QUANT_MAX) / f64::from(extent);
    let nearest = scaled.round();
    let q = if (scaled - nearest).abs() <= SNAP_EPS * nearest.abs().max(1.0) {
        nearest
    } else {
        scaled.floor()
    };
    q.clamp(0.0, f64::from(QUANT_MAX)) as u16
}

/// Maps a pixel box onto the location vocabulary with
/// `q = floor(coord / extent * 1000)`; `coord == extent` maps to 1000.
pub fn quantize(bbox: &BoundingBox, dims: ImageDims) -> Result<QuantizedBox, GeometryError> {
    bbox.check_bounds(dims)?;
    let q = QuantizedBox {
        qx1: quantize_coord(bbox.x1, dims.width),
        qy1: quantize_coord(bbox.y1, dims.height),
        qx2: quantize_coord(bbox.x2, dims.width),
        qy2: quantize_coord(bbox.y2, dims.height),
    };
    Ok(q)
}

/// Inverse mapping `coord = q / 1000 * extent`.
pub fn dequantize(qbox: &QuantizedBox, dims: ImageDims) -> BoundingBox {
    let scale = |q: u16, extent: u32| f64::from(q) * f64::from(extent) / f64::from(QUANT_MAX);
    BoundingBox {
        x1: scale(qbox.qx1, dims.width),
        y1: scale(qbox.qy1, dims.height),
        x2: scale(qbox.qx2, dims.width),
        y2: scale(qbox.qy2, dims.height),
    }
}

pub fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Intersection over union. Zero-area boxes score 0 against anything,
/// including themselves.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}
