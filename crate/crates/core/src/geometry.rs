//! Fan-beam and circular cone-beam acquisition geometries.
//!
//! Conventions: the source starts on the +x axis at angle 0 and rotates
//! counter-clockwise about z. The flat detector sits opposite the source,
//! perpendicular to the central ray, with its `u` axis along
//! `(-sin β, cos β)` and (cone only) its `v` axis along +z.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const FULL_TURN: f64 = 2.0 * PI;

fn is_full_turn(range: (f64, f64)) -> bool {
    ((range.1 - range.0) - FULL_TURN).abs() < 1e-9
}

fn angle_at(range: (f64, f64), n: usize, i: usize) -> f64 {
    let span = range.1 - range.0;
    if is_full_turn(range) {
        range.0 + i as f64 * span / n as f64
    } else if n > 1 {
        range.0 + i as f64 * span / (n - 1) as f64
    } else {
        range.0
    }
}

fn check_common(n_angles: usize, source_distance: f64, detector_distance: f64) -> Result<()> {
    if n_angles == 0 {
        return Err(invalid("n_angles must be >= 1"));
    }
    if !(source_distance > 0.0 && source_distance.is_finite()) {
        return Err(invalid("source_distance must be > 0"));
    }
    if !(detector_distance >= 0.0 && detector_distance.is_finite()) {
        return Err(invalid("detector_distance must be >= 0"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FanGeometry {
    pub n_angles: usize,
    /// Radians, `(start, end)`.
    pub angular_range: (f64, f64),
    pub source_distance: f64,
    pub detector_distance: f64,
    pub n_detectors: usize,
    pub detector_pixel_size: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConeGeometry {
    pub n_angles: usize,
    pub angular_range: (f64, f64),
    pub source_distance: f64,
    pub detector_distance: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub detector_pixel_size: f64,
    pub trajectory_height: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectorIndex {
    Fan(usize),
    Cone { row: usize, col: usize },
}

/// A single source-to-detector-pixel line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub angle_index: usize,
    pub detector_index: DetectorIndex,
}

impl Ray {
    /// Distance from `point` to the (infinite) line of this ray.
    pub fn distance_to(&self, point: [f64; 3]) -> f64 {
        let w = [
            point[0] - self.origin[0],
            point[1] - self.origin[1],
            point[2] - self.origin[2],
        ];
        let t = w[0] * self.direction[0] + w[1] * self.direction[1] + w[2] * self.direction[2];
        let d2 = (w[0] - t * self.direction[0]).powi(2)
            + (w[1] - t * self.direction[1]).powi(2)
            + (w[2] - t * self.direction[2]).powi(2);
        d2.sqrt()
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl FanGeometry {
    /// Uniform fan geometry with 1 mm detector pixels; see
    /// [`FanGeometry::with_pixel_size`].
    pub fn new(
        n_angles: usize,
        n_detectors: usize,
        source_distance: f64,
        detector_distance: f64,
        angular_range: f64,
    ) -> Result<Self> {
        check_common(n_angles, source_distance, detector_distance)?;
        if n_detectors == 0 {
            return Err(invalid("n_detectors must be >= 1"));
        }
        if !(angular_range > 0.0 && angular_range.is_finite()) {
            return Err(invalid("angular_range must be > 0"));
        }
        Ok(Self {
            n_angles,
            angular_range: (0.0, angular_range),
            source_distance,
            detector_distance,
            n_detectors,
            detector_pixel_size: 1.0,
        })
    }

    pub fn with_pixel_size(mut self, size: f64) -> Result<Self> {
        if !(size > 0.0 && size.is_finite()) {
            return Err(invalid("detector_pixel_size must be > 0"));
        }
        self.detector_pixel_size = size;
        Ok(self)
    }

    pub fn angle(&self, i: usize) -> f64 {
        angle_at(self.angular_range, self.n_angles, i)
    }

    pub fn angular_increment(&self) -> f64 {
        if self.n_angles > 1 {
            self.angle(1) - self.angle(0)
        } else {
            self.angular_range.1 - self.angular_range.0
        }
    }

    /// Detector coordinate (mm, physical detector plane) of pixel `j`.
    pub fn detector_u(&self, j: usize) -> f64 {
        (j as f64 - 0.5 * (self.n_detectors as f64 - 1.0)) * self.detector_pixel_size
    }

    pub fn source_position(&self, i: usize) -> [f64; 3] {
        let (s, c) = self.angle(i).sin_cos();
        [self.source_distance * c, self.source_distance * s, 0.0]
    }

    pub fn ray(&self, angle_index: usize, detector: usize) -> Result<Ray> {
        if angle_index >= self.n_angles || detector >= self.n_detectors {
            return Err(Error::Index(format!(
                "fan ray ({angle_index}, {detector}) outside {}x{}",
                self.n_angles, self.n_detectors
            )));
        }
        Ok(self.ray_unchecked(angle_index, detector))
    }

    pub(crate) fn ray_unchecked(&self, angle_index: usize, detector: usize) -> Ray {
        let (s, c) = self.angle(angle_index).sin_cos();
        let u = self.detector_u(detector);
        let origin = [self.source_distance * c, self.source_distance * s, 0.0];
        let target = [
            -self.detector_distance * c - u * s,
            -self.detector_distance * s + u * c,
            0.0,
        ];
        Ray {
            origin,
            direction: unit([target[0] - origin[0], target[1] - origin[1], 0.0]),
            angle_index,
            detector_index: DetectorIndex::Fan(detector),
        }
    }
}

impl ConeGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_angles: usize,
        detector_rows: usize,
        detector_cols: usize,
        source_distance: f64,
        detector_distance: f64,
        detector_pixel_size: f64,
        angular_range: f64,
    ) -> Result<Self> {
        check_common(n_angles, source_distance, detector_distance)?;
        if detector_rows == 0 || detector_cols == 0 {
            return Err(invalid("detector rows and cols must be >= 1"));
        }
        if !(detector_pixel_size > 0.0 && detector_pixel_size.is_finite()) {
            return Err(invalid("detector_pixel_size must be > 0"));
        }
        if !(angular_range > 0.0 && angular_range.is_finite()) {
            return Err(invalid("angular_range must be > 0"));
        }
        let g = Self {
            n_angles,
            angular_range: (0.0, angular_range),
            source_distance,
            detector_distance,
            detector_rows,
            detector_cols,
            detector_pixel_size,
            trajectory_height: 0.0,
        };
        let cone = g.cone_angle();
        if cone >= 0.5 * PI {
            return Err(Error::InvalidGeometry(format!(
                "cone angle {:.3} deg must be < 90 deg",
                cone.to_degrees()
            )));
        }
        Ok(g)
    }

    pub fn with_trajectory_height(mut self, h: f64) -> Self {
        self.trajectory_height = h;
        self
    }

    /// Full axial cone angle (radians) spanned by the detector rows.
    pub fn cone_angle(&self) -> f64 {
        let half_height = 0.5 * self.detector_rows as f64 * self.detector_pixel_size;
        2.0 * (half_height / (self.source_distance + self.detector_distance)).atan()
    }

    pub fn angle(&self, i: usize) -> f64 {
        angle_at(self.angular_range, self.n_angles, i)
    }

    pub fn angular_increment(&self) -> f64 {
        if self.n_angles > 1 {
            self.angle(1) - self.angle(0)
        } else {
            self.angular_range.1 - self.angular_range.0
        }
    }

    pub fn detector_u(&self, col: usize) -> f64 {
        (col as f64 - 0.5 * (self.detector_cols as f64 - 1.0)) * self.detector_pixel_size
    }

    pub fn detector_v(&self, row: usize) -> f64 {
        (row as f64 - 0.5 * (self.detector_rows as f64 - 1.0)) * self.detector_pixel_size
    }

    pub fn source_position(&self, i: usize) -> [f64; 3] {
        let (s, c) = self.angle(i).sin_cos();
        [
            self.source_distance * c,
            self.source_distance * s,
            self.trajectory_height,
        ]
    }

    pub fn ray(&self, angle_index: usize, row: usize, col: usize) -> Result<Ray> {
        if angle_index >= self.n_angles || row >= self.detector_rows || col >= self.detector_cols {
            return Err(Error::Index(format!(
                "cone ray ({angle_index}, {row}, {col}) outside {}x{}x{}",
                self.n_angles, self.detector_rows, self.detector_cols
            )));
        }
        Ok(self.ray_unchecked(angle_index, row, col))
    }

    pub(crate) fn ray_unchecked(&self, angle_index: usize, row: usize, col: usize) -> Ray {
        let (s, c) = self.angle(angle_index).sin_cos();
        let u = self.detector_u(col);
        let v = self.detector_v(row);
        let origin = self.source_position(angle_index);
        let target = [
            -self.detector_distance * c - u * s,
            -self.detector_distance * s + u * c,
            self.trajectory_height + v,
        ];
        Ray {
            origin,
            direction: unit([
                target[0] - origin[0],
                target[1] - origin[1],
                target[2] - origin[2],
            ]),
            angle_index,
            detector_index: DetectorIndex::Cone { row, col },
        }
    }
}

/// Either acquisition geometry. Serialized with angles in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryDoc", into = "GeometryDoc")]
pub enum Geometry {
    Fan(FanGeometry),
    Cone(ConeGeometry),
}

impl From<FanGeometry> for Geometry {
    fn from(g: FanGeometry) -> Self {
        Geometry::Fan(g)
    }
}

impl From<ConeGeometry> for Geometry {
    fn from(g: ConeGeometry) -> Self {
        Geometry::Cone(g)
    }
}

impl Geometry {
    pub fn n_angles(&self) -> usize {
        match self {
            Geometry::Fan(g) => g.n_angles,
            Geometry::Cone(g) => g.n_angles,
        }
    }

    /// Detector samples per projection angle.
    pub fn detector_len(&self) -> usize {
        match self {
            Geometry::Fan(g) => g.n_detectors,
            Geometry::Cone(g) => g.detector_rows * g.detector_cols,
        }
    }

    /// Total ray count `N`.
    pub fn n_rays(&self) -> usize {
        self.n_angles() * self.detector_len()
    }

    pub fn dims(&self) -> usize {
        match self {
            Geometry::Fan(_) => 2,
            Geometry::Cone(_) => 3,
        }
    }

    pub fn angle(&self, i: usize) -> f64 {
        match self {
            Geometry::Fan(g) => g.angle(i),
            Geometry::Cone(g) => g.angle(i),
        }
    }

    pub fn angular_increment(&self) -> f64 {
        match self {
            Geometry::Fan(g) => g.angular_increment(),
            Geometry::Cone(g) => g.angular_increment(),
        }
    }

    pub fn source_distance(&self) -> f64 {
        match self {
            Geometry::Fan(g) => g.source_distance,
            Geometry::Cone(g) => g.source_distance,
        }
    }

    /// Ray by flat sinogram index `angle * detector_len + detector`.
    pub fn ray_at(&self, flat: usize) -> Ray {
        let per = self.detector_len();
        let (a, d) = (flat / per, flat % per);
        match self {
            Geometry::Fan(g) => g.ray_unchecked(a, d),
            Geometry::Cone(g) => g.ray_unchecked(a, d / g.detector_cols, d % g.detector_cols),
        }
    }

    pub fn ray_for(&self, angle_index: usize, detector: DetectorIndex) -> Result<Ray> {
        match (self, detector) {
            (Geometry::Fan(g), DetectorIndex::Fan(j)) => g.ray(angle_index, j),
            (Geometry::Cone(g), DetectorIndex::Cone { row, col }) => g.ray(angle_index, row, col),
            _ => Err(invalid("detector index kind does not match geometry")),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum GeometryDoc {
    Fan {
        n_angles: usize,
        angular_range: (f64, f64),
        source_distance: f64,
        detector_distance: f64,
        n_detectors: usize,
        detector_pixel_size: f64,
    },
    Cone {
        n_angles: usize,
        angular_range: (f64, f64),
        source_distance: f64,
        detector_distance: f64,
        detector_rows: usize,
        detector_cols: usize,
        detector_pixel_size: f64,
        #[serde(default)]
        trajectory_height: f64,
    },
}

impl From<Geometry> for GeometryDoc {
    fn from(g: Geometry) -> Self {
        let deg = |r: (f64, f64)| (r.0.to_degrees(), r.1.to_degrees());
        match g {
            Geometry::Fan(f) => GeometryDoc::Fan {
                n_angles: f.n_angles,
                angular_range: deg(f.angular_range),
                source_distance: f.source_distance,
                detector_distance: f.detector_distance,
                n_detectors: f.n_detectors,
                detector_pixel_size: f.detector_pixel_size,
            },
            Geometry::Cone(c) => GeometryDoc::Cone {
                n_angles: c.n_angles,
                angular_range: deg(c.angular_range),
                source_distance: c.source_distance,
                detector_distance: c.detector_distance,
                detector_rows: c.detector_rows,
                detector_cols: c.detector_cols,
                detector_pixel_size: c.detector_pixel_size,
                trajectory_height: c.trajectory_height,
            },
        }
    }
}

impl TryFrom<GeometryDoc> for Geometry {
    type Error = Error;

    fn try_from(doc: GeometryDoc) -> Result<Self> {
        let rad = |r: (f64, f64)| -> Result<(f64, f64)> {
            let (a, b) = (r.0.to_radians(), r.1.to_radians());
            // snap round-tripped full turns back onto exactly 2π
            let b = if ((b - a) - FULL_TURN).abs() < 1e-9 { a + FULL_TURN } else { b };
            if !(b > a) {
                return Err(invalid("angular_range end must exceed start"));
            }
            Ok((a, b))
        };
        match doc {
            GeometryDoc::Fan {
                n_angles,
                angular_range,
                source_distance,
                detector_distance,
                n_detectors,
                detector_pixel_size,
            } => {
                let range = rad(angular_range)?;
                let mut g = FanGeometry::new(
                    n_angles,
                    n_detectors,
                    source_distance,
                    detector_distance,
                    range.1 - range.0,
                )?
                .with_pixel_size(detector_pixel_size)?;
                g.angular_range = range;
                Ok(Geometry::Fan(g))
            }
            GeometryDoc::Cone {
                n_angles,
                angular_range,
                source_distance,
                detector_distance,
                detector_rows,
                detector_cols,
                detector_pixel_size,
                trajectory_height,
            } => {
                let range = rad(angular_range)?;
                let mut g = ConeGeometry::new(
                    n_angles,
                    detector_rows,
                    detector_cols,
                    source_distance,
                    detector_distance,
                    detector_pixel_size,
                    range.1 - range.0,
                )?
                .with_trajectory_height(trajectory_height);
                g.angular_range = range;
                Ok(Geometry::Cone(g))
            }
        }
    }
}
