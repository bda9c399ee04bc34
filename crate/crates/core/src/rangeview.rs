//! Range-view geometry: beam tables, range images, sensor poses and the
//! forward/inverse projection between point clouds and range images.
//!
//! Row `h` holds beam `H - 1 - h`, so the top row is the highest elevation.
//! Column `w` looks along azimuth `theta = pi * (1 - 2w / (W - 1))`; columns
//! `0` and `W - 1` both look backwards (theta = +pi and -pi).

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-beam elevation angles plus the azimuth resolution of a scanner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BeamTableRepr", into = "BeamTableRepr")]
pub struct BeamTable {
    elevations: Vec<f64>,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct BeamTableRepr {
    beams: Vec<f64>,
    width: usize,
}

impl TryFrom<BeamTableRepr> for BeamTable {
    type Error = Error;
    fn try_from(r: BeamTableRepr) -> Result<Self> {
        BeamTable::new(r.beams, r.width)
    }
}

impl From<BeamTable> for BeamTableRepr {
    fn from(b: BeamTable) -> Self {
        BeamTableRepr {
            beams: b.elevations,
            width: b.width,
        }
    }
}

impl BeamTable {
    pub fn new(elevations: Vec<f64>, width: usize) -> Result<Self> {
        if elevations.len() < 2 {
            return Err(Error::invalid("beam table needs at least two beams"));
        }
        if width < 4 {
            return Err(Error::invalid("beam table width must be at least 4"));
        }
        if elevations.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid("non-finite beam elevation"));
        }
        if elevations.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::invalid("beam elevations must be strictly increasing"));
        }
        Ok(Self { elevations, width })
    }

    /// Evenly spaced beams between `min` and `max` elevation (radians).
    pub fn uniform(min: f64, max: f64, height: usize, width: usize) -> Result<Self> {
        if height < 2 {
            return Err(Error::invalid("beam table needs at least two beams"));
        }
        let step = (max - min) / (height - 1) as f64;
        Self::new(
            (0..height).map(|i| min + step * i as f64).collect(),
            width,
        )
    }

    pub fn height(&self) -> usize {
        self.elevations.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn elevations(&self) -> &[f64] {
        &self.elevations
    }

    /// Closest beam to elevation `phi` and its position ratio `index / (H - 1)`.
    /// Ties go to the lower index.
    pub fn nearest_beam(&self, phi: f64) -> (usize, f64) {
        let e = &self.elevations;
        let upper = e.partition_point(|&x| x < phi);
        let index = if upper == 0 {
            0
        } else if upper == e.len() {
            e.len() - 1
        } else if (phi - e[upper - 1]).abs() <= (e[upper] - phi).abs() {
            upper - 1
        } else {
            upper
        };
        (index, index as f64 / (e.len() - 1) as f64)
    }

    /// Elevation of the beam shown in row `h`.
    pub fn row_elevation(&self, h: usize) -> f64 {
        self.elevations[self.height() - 1 - h]
    }

    pub fn column_azimuth(&self, w: usize) -> f64 {
        PI * (1.0 - 2.0 * w as f64 / (self.width - 1) as f64)
    }

    /// Continuous (unrounded) column coordinate of azimuth `theta`.
    pub fn azimuth_column(&self, theta: f64) -> f64 {
        0.5 * (1.0 - theta / PI) * (self.width - 1) as f64
    }

    /// Ray for pixel `(h, w)`: elevation, azimuth and unit direction.
    pub fn pixel_to_ray(&self, h: usize, w: usize) -> Result<Ray> {
        if h >= self.height() || w >= self.width {
            return Err(Error::OutOfRange {
                row: h,
                col: w,
                height: self.height(),
                width: self.width,
            });
        }
        Ok(Ray::new(self.row_elevation(h), self.column_azimuth(w)))
    }

    /// All pixel rays in row-major order.
    pub fn rays(&self) -> Vec<Ray> {
        let mut out = Vec::with_capacity(self.height() * self.width);
        for h in 0..self.height() {
            let phi = self.row_elevation(h);
            for w in 0..self.width {
                out.push(Ray::new(phi, self.column_azimuth(w)));
            }
        }
        out
    }
}

/// A sensor ray through the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub phi: f64,
    pub theta: f64,
    pub dir: Vector3<f64>,
}

impl Ray {
    pub fn new(phi: f64, theta: f64) -> Self {
        let (sp, cp) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        Self {
            phi,
            theta,
            dir: Vector3::new(ct * cp, st * cp, sp),
        }
    }
}

/// A LiDAR return in some frame, intensity in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub position: Vector3<f64>,
    pub intensity: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            intensity,
        }
    }
}

/// Three-channel `H x W` image, row-major. Depth 0 with raydrop 0 encodes
/// "no return"; the raydrop channel stores the return probability.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    height: usize,
    width: usize,
    pub depth: Vec<f64>,
    pub intensity: Vec<f64>,
    pub raydrop: Vec<f64>,
}

impl RangeImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            depth: vec![0.0; n],
            intensity: vec![0.0; n],
            raydrop: vec![0.0; n],
        }
    }

    pub fn from_channels(
        height: usize,
        width: usize,
        depth: Vec<f64>,
        intensity: Vec<f64>,
        raydrop: Vec<f64>,
    ) -> Result<Self> {
        let n = height * width;
        if depth.len() != n || intensity.len() != n || raydrop.len() != n {
            return Err(Error::invalid(format!(
                "channel lengths ({}, {}, {}) do not match {height}x{width}",
                depth.len(),
                intensity.len(),
                raydrop.len()
            )));
        }
        let img = Self {
            height,
            width,
            depth,
            intensity,
            raydrop,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize) -> usize {
        h * self.width + w
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |c: &[f64]| c.iter().all(|v| v.is_finite());
        if !(finite(&self.depth) && finite(&self.intensity) && finite(&self.raydrop)) {
            return Err(Error::invalid("range image contains non-finite values"));
        }
        if self.depth.iter().any(|&d| d < 0.0) {
            return Err(Error::invalid("range image contains negative depth"));
        }
        Ok(())
    }

    pub fn ensure_dims(&self, other: &RangeImage) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: other.dims(),
            });
        }
        Ok(())
    }

    pub fn return_count(&self) -> usize {
        self.raydrop.iter().filter(|&&r| r >= 0.5).count()
    }
}

/// Sensor-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    matrix: Matrix4<f64>,
    pub timestamp: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
            timestamp: 0.0,
        }
    }

    pub fn from_matrix(matrix: Matrix4<f64>, timestamp: f64) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        let bottom = matrix.fixed_view::<1, 4>(3, 0);
        if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).amax() > 1e-12 {
            return Err(Error::invalid("pose bottom row must be (0, 0, 0, 1)"));
        }
        let r: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into();
        if (r.transpose() * r - Matrix3::identity()).amax() > 1e-6 || r.determinant() < 0.0 {
            return Err(Error::invalid("pose rotation block is not a rotation"));
        }
        Ok(Self { matrix, timestamp })
    }

    pub fn from_row_major(values: &[f64; 16], timestamp: f64) -> Result<Self> {
        Self::from_matrix(Matrix4::from_row_slice(values), timestamp)
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::from_matrix(m, 0.0)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self {
            matrix: m,
            timestamp: 0.0,
        }
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into()
    }

    pub fn to_sensor(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (world - self.translation())
    }

    pub fn to_world(&self, sensor: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * sensor + self.translation()
    }

    /// The same pose moved by `offset` expressed in its own sensor frame.
    pub fn translated_local(&self, offset: &Vector3<f64>) -> Pose {
        let mut m = self.matrix;
        let t = self.translation() + self.rotation() * offset;
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose {
            matrix: m,
            timestamp: self.timestamp,
        }
    }

    /// Pose rotated about the world z axis through its own origin.
    pub fn rotated_about_z(&self, angle: f64) -> Pose {
        let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
        let mut m = self.matrix;
        let r = rz.matrix() * self.rotation();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        Pose {
            matrix: m,
            timestamp: self.timestamp,
        }
    }
}

/// Project sensor-frame points into a range image. Colliding points keep
/// the nearest depth; equal depths keep the earlier point.
pub fn project_points(points: &[LidarPoint], beams: &BeamTable) -> Result<RangeImage> {
    let (hh, ww) = (beams.height(), beams.width());
    let mut img = RangeImage::zeros(hh, ww);
    for p in points {
        let v = &p.position;
        if !(v.iter().all(|c| c.is_finite()) && p.intensity.is_finite()) {
            return Err(Error::invalid("point with non-finite coordinates"));
        }
        let range = v.norm();
        if range == 0.0 {
            return Err(Error::invalid("point at the sensor origin"));
        }
        let phi = (v.z / range).clamp(-1.0, 1.0).asin();
        let theta = v.y.atan2(v.x);
        let (_, ratio) = beams.nearest_beam(phi);
        let h = ((1.0 - ratio) * (hh - 1) as f64).round().clamp(0.0, (hh - 1) as f64) as usize;
        let w = beams
            .azimuth_column(theta)
            .round()
            .clamp(0.0, (ww - 1) as f64) as usize;
        let i = img.index(h, w);
        if img.raydrop[i] == 0.0 || range < img.depth[i] {
            img.depth[i] = range;
            img.intensity[i] = p.intensity.clamp(0.0, 1.0);
            img.raydrop[i] = 1.0;
        }
    }
    Ok(img)
}

/// Inverse projection: one point per pixel with a return (raydrop >= 0.5,
/// depth > 0), in the sensor frame.
pub fn unproject(img: &RangeImage, beams: &BeamTable) -> Vec<LidarPoint> {
    debug_assert_eq!(img.dims(), (beams.height(), beams.width()));
    let mut out = Vec::new();
    for h in 0..img.height() {
        let phi = beams.row_elevation(h);
        for w in 0..img.width() {
            let i = img.index(h, w);
            let d = img.depth[i];
            if img.raydrop[i] >= 0.5 && d > 0.0 {
                let ray = Ray::new(phi, beams.column_azimuth(w));
                out.push(LidarPoint {
                    position: ray.dir * d,
                    intensity: img.intensity[i],
                });
            }
        }
    }
    out
}

/// Unproject and move the points into the world frame.
pub fn unproject_world(img: &RangeImage, beams: &BeamTable, pose: &Pose) -> Vec<LidarPoint> {
    unproject(img, beams)
        .into_iter()
        .map(|p| LidarPoint {
            position: pose.to_world(&p.position),
            intensity: p.intensity,
        })
        .collect()
}
