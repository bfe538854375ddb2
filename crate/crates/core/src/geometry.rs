//! Axis-aligned boxes, IoU and the anchor-in-box spatial prior.

use core::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryError {
    /// A coordinate was NaN or infinite.
    NonFinite,
    /// `x_min > x_max` or `y_min > y_max`.
    Inverted,
    /// Anchor stride was not strictly positive.
    InvalidStride,
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::NonFinite => f.write_str("non-finite coordinate"),
            GeometryError::Inverted => f.write_str("box corners are inverted (min > max)"),
            GeometryError::InvalidStride => f.write_str("anchor stride must be positive"),
        }
    }
}

impl core::error::Error for GeometryError {}

/// Corner-form box `(x_min, y_min, x_max, y_max)`.
///
/// All boxes handed to one computation must share a coordinate frame.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let c = self.to_array();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(GeometryError::Inverted);
        }
        Ok(())
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

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BoundingBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Intersection area with `other` (0 when disjoint).
    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Anchor point of a prediction on a feature map.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnchorPoint {
    pub x: f64,
    pub y: f64,
    /// Feature-map cell size. Informational only.
    pub stride: f64,
}

impl AnchorPoint {
    pub fn new(x: f64, y: f64, stride: f64) -> Result<Self, GeometryError> {
        if !x.is_finite() || !y.is_finite() || !stride.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if stride <= 0.0 {
            return Err(GeometryError::InvalidStride);
        }
        Ok(AnchorPoint { x, y, stride })
    }
}

/// Intersection over union. Two zero-area boxes give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// `true` when the anchor lies inside `gt` using half-open intervals
/// `[x_min, x_max) x [y_min, y_max)`, so an anchor on a shared edge belongs to
/// exactly one of two abutting boxes.
pub fn spatial_prior(anchor: &AnchorPoint, gt: &BoundingBox) -> bool {
    anchor.x >= gt.x_min && anchor.x < gt.x_max && anchor.y >= gt.y_min && anchor.y < gt.y_max
}
