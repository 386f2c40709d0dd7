use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// A point cloud as read from disk. Colors stay as 8-bit integers until
/// feature extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub normals: Option<Vec<Point3>>,
    pub name: String,
}

impl PointCloud {
    pub fn new(
        name: impl Into<String>,
        positions: Vec<Point3>,
        colors: Option<Vec<[u8; 3]>>,
        normals: Option<Vec<Point3>>,
    ) -> Result<Self> {
        let cloud = PointCloud {
            positions,
            colors,
            normals,
            name: name.into(),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    /// Positions only, no attributes.
    pub fn from_positions(name: impl Into<String>, positions: Vec<Point3>) -> Result<Self> {
        Self::new(name, positions, None, None)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::InvalidCloud("cloud has no points".into()));
        }
        if let Some((i, _)) = self
            .positions
            .iter()
            .enumerate()
            .find(|(_, p)| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::InvalidCloud(format!("non-finite position at point {i}")));
        }
        if let Some(colors) = &self.colors {
            if colors.len() != n {
                return Err(Error::InvalidCloud(format!(
                    "{} colors for {n} points",
                    colors.len()
                )));
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::InvalidCloud(format!(
                    "{} normals for {n} points",
                    normals.len()
                )));
            }
            for (i, nrm) in normals.iter().enumerate() {
                if (norm(*nrm) - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidCloud(format!("normal {i} is not unit length")));
                }
            }
        }
        Ok(())
    }

    /// Applies `f` to every position, keeping attributes.
    pub fn map_positions(&self, f: impl Fn(Point3) -> Point3) -> PointCloud {
        PointCloud {
            positions: self.positions.iter().map(|&p| f(p)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_corner: Point3,
    pub max_corner: Point3,
    pub diagonal: f64,
}

pub fn bounding_box(cloud: &PointCloud) -> BoundingBox {
    bounding_box_of(&cloud.positions)
}

pub(crate) fn bounding_box_of(points: &[Point3]) -> BoundingBox {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    if points.is_empty() {
        lo = [0.0; 3];
        hi = [0.0; 3];
    }
    BoundingBox {
        min_corner: lo,
        max_corner: hi,
        diagonal: dist(lo, hi),
    }
}

#[inline]
pub(crate) fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[inline]
pub(crate) fn dist(a: Point3, b: Point3) -> f64 {
    dist2(a, b).sqrt()
}
