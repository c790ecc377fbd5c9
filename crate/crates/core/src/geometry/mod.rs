//! Coordinate transforms, occupancy-surface projection and query grids.
//!
//! Conventions:
//! - azimuth is `atan2(y, x)` in `(-pi, pi]`
//! - inclination is the polar angle `acos(z / r)` in `[0, pi]`, so a
//!   horizontal ray has inclination `pi / 2`
//! - a point at the origin maps to azimuth 0, inclination 0

mod io;

pub use io::{read_cloud, write_cloud, CloudFormat};

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};

use crate::error::{invalid, Error, Result};

/// A point in the sensor body frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CartesianPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CartesianPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(&self, other: &CartesianPoint) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Spherical coordinates of a point: azimuth, inclination (polar angle) and radius.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SphericalPoint {
    pub azimuth: f64,
    pub inclination: f64,
    pub radius: f64,
}

impl SphericalPoint {
    pub const fn new(azimuth: f64, inclination: f64, radius: f64) -> Self {
        Self {
            azimuth,
            inclination,
            radius,
        }
    }

    pub fn direction(&self) -> Direction {
        Direction::new(self.azimuth, self.inclination)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.azimuth.is_finite()
            && self.inclination.is_finite()
            && self.radius.is_finite()
            && self.radius >= 0.0
            && self.azimuth > -PI - 1e-12
            && self.azimuth <= PI + 1e-12
            && (-1e-12..=PI + 1e-12).contains(&self.inclination);
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid spherical point {self:?}")))
        }
    }
}

/// A location on the occupancy surface; the input domain of the surface model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Direction {
    pub azimuth: f64,
    pub inclination: f64,
}

impl Direction {
    pub const fn new(azimuth: f64, inclination: f64) -> Self {
        Self {
            azimuth,
            inclination,
        }
    }
}

/// An occupied sample on the occupancy surface. `occupancy = r_oc - r`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurfaceSample {
    pub azimuth: f64,
    pub inclination: f64,
    pub occupancy: f64,
}

impl SurfaceSample {
    pub const fn new(azimuth: f64, inclination: f64, occupancy: f64) -> Self {
        Self {
            azimuth,
            inclination,
            occupancy,
        }
    }

    pub fn direction(&self) -> Direction {
        Direction::new(self.azimuth, self.inclination)
    }
}

/// A raw pointcloud in some cartesian frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<CartesianPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<CartesianPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Size of the cloud as packed xyz `f32` triples.
    pub fn raw_bytes(&self) -> usize {
        12 * self.points.len()
    }
}

impl FromIterator<CartesianPoint> for PointCloud {
    fn from_iter<I: IntoIterator<Item = CartesianPoint>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Occupied samples of one scan projected on the sphere of radius `r_oc`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancySurface {
    pub r_oc: f64,
    pub r_min: f64,
    pub samples: Vec<SurfaceSample>,
}

impl OccupancySurface {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Scan pattern of a spinning multi-channel LiDAR.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    /// Angular step between consecutive firings, radians.
    pub azimuth_resolution: f64,
    /// Inclination of every channel, strictly increasing, radians.
    pub inclination_channels: Vec<f64>,
    pub r_min: f64,
    /// Maximum range; doubles as the occupancy-surface radius.
    pub r_max: f64,
}

impl SensorModel {
    pub fn new(
        azimuth_resolution: f64,
        inclination_channels: Vec<f64>,
        r_min: f64,
        r_max: f64,
    ) -> Result<Self> {
        let sensor = Self {
            azimuth_resolution,
            inclination_channels,
            r_min,
            r_max,
        };
        sensor.validate()?;
        Ok(sensor)
    }

    /// 16 channels from 75 to 105 degrees inclination with the given azimuth step.
    pub fn sixteen_channel(azimuth_resolution_deg: f64) -> Self {
        let channels = (0..16)
            .map(|i| (75.0 + 2.0 * i as f64).to_radians())
            .collect();
        Self {
            azimuth_resolution: azimuth_resolution_deg.to_radians(),
            inclination_channels: channels,
            r_min: 0.4,
            r_max: 10.0,
        }
    }

    /// Desk-scale default: 1 degree azimuth steps, 5760 rays per scan.
    pub fn desk() -> Self {
        Self::sixteen_channel(1.0)
    }

    /// Full VLP-16 resolution: 0.1 degree azimuth steps, 57600 rays per scan.
    pub fn vlp16() -> Self {
        Self::sixteen_channel(0.1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.azimuth_resolution.is_finite() && self.azimuth_resolution > 0.0) {
            return Err(invalid("azimuth resolution must be positive"));
        }
        if self.inclination_channels.is_empty() {
            return Err(invalid("sensor needs at least one channel"));
        }
        if self
            .inclination_channels
            .iter()
            .any(|c| !c.is_finite() || *c < 0.0 || *c > PI)
        {
            return Err(invalid("channel inclinations must lie in [0, pi]"));
        }
        if self.inclination_channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("channels must be strictly increasing"));
        }
        if !(self.r_min > 0.0 && self.r_min < self.r_max && self.r_max.is_finite()) {
            return Err(invalid("need 0 < r_min < r_max"));
        }
        Ok(())
    }

    /// Number of firings per revolution at the given up-sampling factor.
    pub fn azimuth_count(&self, upsample: usize) -> usize {
        let step = self.azimuth_resolution / upsample as f64;
        ((2.0 * PI / step).round() as usize).max(1)
    }

    /// Mean spacing between neighbouring channels (azimuth step for a single channel).
    pub fn channel_spacing(&self) -> f64 {
        let c = &self.inclination_channels;
        if c.len() < 2 {
            self.azimuth_resolution
        } else {
            (c[c.len() - 1] - c[0]) / (c.len() - 1) as f64
        }
    }

    /// Inclination rows of the query grid; each channel is split into `upsample` rows.
    pub fn grid_inclinations(&self, upsample: usize) -> Vec<f64> {
        let c = &self.inclination_channels;
        let mut rows = Vec::with_capacity(c.len() * upsample);
        for (i, &center) in c.iter().enumerate() {
            let prev = if i > 0 { center - c[i - 1] } else { f64::INFINITY };
            let next = if i + 1 < c.len() { c[i + 1] - center } else { f64::INFINITY };
            let mut gap = prev.min(next);
            if !gap.is_finite() {
                gap = self.azimuth_resolution;
            }
            for k in 0..upsample {
                let offset = ((k as f64 + 0.5) / upsample as f64 - 0.5) * gap;
                rows.push((center + offset).clamp(0.0, PI));
            }
        }
        rows.dedup();
        rows
    }
}

/// Six degree-of-freedom pose; rotation is `Rz(yaw) * Ry(pitch) * Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            z,
            roll,
            pitch,
            yaw,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.roll, self.pitch, self.yaw]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Maps a body-frame point into the parent frame.
    pub fn transform(&self, p: &CartesianPoint) -> CartesianPoint {
        CartesianPoint::from_vector(self.rotation() * p.to_vector() + self.translation())
    }

    /// The pose whose transform undoes this one.
    pub fn inverse(&self) -> Pose {
        let rot = self.rotation().inverse();
        let t = -(rot * self.translation());
        let (roll, pitch, yaw) = rot.euler_angles();
        Pose::new(t.x, t.y, t.z, roll, pitch, yaw)
    }
}

pub fn cartesian_to_spherical(p: &CartesianPoint) -> Result<SphericalPoint> {
    if !p.is_finite() {
        return Err(invalid(format!("non-finite point {p:?}")));
    }
    let r = p.norm();
    if r == 0.0 {
        return Ok(SphericalPoint::new(0.0, 0.0, 0.0));
    }
    let mut azimuth = p.y.atan2(p.x);
    // atan2 yields -pi for (negative x, -0.0); fold it onto the half-open range
    if azimuth <= -PI {
        azimuth = PI;
    }
    let inclination = (p.z / r).clamp(-1.0, 1.0).acos();
    Ok(SphericalPoint::new(azimuth, inclination, r))
}

pub fn spherical_to_cartesian(s: &SphericalPoint) -> Result<CartesianPoint> {
    s.validate()?;
    let (sin_a, cos_a) = s.inclination.sin_cos();
    let (sin_t, cos_t) = s.azimuth.sin_cos();
    Ok(CartesianPoint::new(
        s.radius * sin_a * cos_t,
        s.radius * sin_a * sin_t,
        s.radius * cos_a,
    ))
}

/// Projects in-range returns onto the occupancy surface.
///
/// Points with `r_min <= r < r_oc` become samples with occupancy `r_oc - r`;
/// everything else is treated as free space and dropped.
pub fn project_to_surface(cloud: &PointCloud, r_oc: f64, r_min: f64) -> Result<OccupancySurface> {
    if !(r_min < r_oc && r_min >= 0.0 && r_oc.is_finite()) {
        return Err(invalid(format!("need 0 <= r_min < r_oc, got {r_min}, {r_oc}")));
    }
    let mut samples = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        let s = cartesian_to_spherical(p)?;
        if s.radius >= r_min && s.radius < r_oc {
            samples.push(SurfaceSample::new(s.azimuth, s.inclination, r_oc - s.radius));
        }
    }
    Ok(OccupancySurface {
        r_oc,
        r_min,
        samples,
    })
}

/// Restores cartesian points at radius `r_oc - occupancy`.
pub fn surface_to_cloud(samples: &[SurfaceSample], r_oc: f64) -> Result<PointCloud> {
    samples
        .iter()
        .map(|s| {
            if !(s.occupancy > 0.0 && s.occupancy <= r_oc) {
                return Err(Error::OutOfRange(format!(
                    "occupancy {} outside (0, {r_oc}]",
                    s.occupancy
                )));
            }
            spherical_to_cartesian(&SphericalPoint::new(
                s.azimuth,
                s.inclination,
                r_oc - s.occupancy,
            ))
        })
        .collect()
}

/// Azimuth-major lattice over `(-pi, pi]` times the (sub-divided) channels.
pub fn make_query_grid(sensor: &SensorModel, upsample: usize) -> Result<Vec<Direction>> {
    if upsample == 0 {
        return Err(invalid("upsample must be at least 1"));
    }
    sensor.validate()?;
    let n_az = sensor.azimuth_count(upsample);
    let step = 2.0 * PI / n_az as f64;
    let rows = sensor.grid_inclinations(upsample);
    let mut grid = Vec::with_capacity(n_az * rows.len());
    for k in 0..n_az {
        let azimuth = -PI + (k + 1) as f64 * step;
        grid.extend(rows.iter().map(|&inc| Direction::new(azimuth, inc)));
    }
    Ok(grid)
}

pub fn apply_pose(cloud: &PointCloud, pose: &Pose) -> Result<PointCloud> {
    if !pose.is_finite() {
        return Err(invalid("pose must be finite"));
    }
    let rot = pose.rotation();
    let t = pose.translation();
    Ok(cloud
        .points
        .iter()
        .map(|p| CartesianPoint::from_vector(rot * p.to_vector() + t))
        .collect())
}
