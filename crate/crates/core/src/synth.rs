//! Synthetic scans of simple convex scenes, with per-ray ground truth.

use std::str::FromStr;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::geometry::{make_query_grid, spherical_to_cartesian, PointCloud, Pose, SensorModel, SphericalPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Axis {
    #[default]
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(invalid(format!("unknown axis {other:?}"))),
        }
    }
}

/// Geometry of a scene, seen from the inside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Axis-aligned room centered at the origin with full side lengths `extents`.
    Box { extents: [f64; 3] },
    /// Infinite cylinder of `radius` around a coordinate axis through the origin.
    Tunnel { radius: f64, axis: Axis },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub shape: Shape,
    /// Standard deviation of additive range noise, meters.
    pub noise_std: f64,
}

impl Scene {
    pub fn tunnel(radius: f64) -> Self {
        Self {
            shape: Shape::Tunnel {
                radius,
                axis: Axis::X,
            },
            noise_std: 0.0,
        }
    }

    pub fn room(extents: [f64; 3]) -> Self {
        Self {
            shape: Shape::Box { extents },
            noise_std: 0.0,
        }
    }

    pub fn sphere(center: [f64; 3], radius: f64) -> Self {
        Self {
            shape: Shape::Sphere { center, radius },
            noise_std: 0.0,
        }
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let ok = match self.shape {
            Shape::Box { extents } => extents.iter().all(|&e| positive(e)),
            Shape::Tunnel { radius, .. } => positive(radius),
            Shape::Sphere { center, radius } => positive(radius) && center.iter().all(|c| c.is_finite()),
        };
        if !ok {
            return Err(invalid(format!("scene dimensions must be positive: {:?}", self.shape)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(invalid("noise std must be non-negative"));
        }
        Ok(())
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        match self.shape {
            Shape::Box { extents } => (0..3).all(|i| p[i].abs() < extents[i] / 2.0),
            Shape::Tunnel { radius, axis } => {
                let mut q = *p;
                q[axis.index()] = 0.0;
                q.norm() < radius
            }
            Shape::Sphere { center, radius } => (p - Vector3::from(center)).norm() < radius,
        }
    }

    /// Distance along the unit direction `d` from the interior point `o` to the wall.
    pub fn first_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match self.shape {
            Shape::Box { extents } => (0..3)
                .filter(|&i| d[i] != 0.0)
                .map(|i| (d[i].signum() * extents[i] / 2.0 - o[i]) / d[i])
                .min_by(f64::total_cmp),
            Shape::Tunnel { radius, axis } => {
                let (mut o2, mut d2) = (*o, *d);
                o2[axis.index()] = 0.0;
                d2[axis.index()] = 0.0;
                exit_distance(&o2, &d2, radius)
            }
            Shape::Sphere { center, radius } => exit_distance(&(o - Vector3::from(center)), d, radius),
        }
    }
}

/// Positive root of `|o + t d|^2 = r^2` for `o` inside the ball.
fn exit_distance(o: &Vector3<f64>, d: &Vector3<f64>, r: f64) -> Option<f64> {
    let q = d.norm_squared();
    if q < 1e-24 {
        return None;
    }
    let b = o.dot(d);
    let c = o.norm_squared() - r * r;
    let disc = (b * b - q * c).max(0.0);
    // c < 0, so the roots have opposite signs; this form avoids cancellation.
    let t = if b >= 0.0 { -c / (b + disc.sqrt()) } else { (disc.sqrt() - b) / q };
    Some(t)
}

/// A synthetic scan with the true range of every grid ray.
#[derive(Debug, Clone)]
pub struct GroundTruthScan {
    /// Returned points in the sensor body frame.
    pub cloud: PointCloud,
    /// True range per cell of `make_query_grid(sensor, 1)`; `None` where nothing is hit within range.
    pub true_radius: Vec<Option<f64>>,
    pub pose: Pose,
    pub sensor: SensorModel,
}

impl GroundTruthScan {
    /// Cells with a true return.
    pub fn occupied(&self) -> Vec<bool> {
        self.true_radius.iter().map(Option::is_some).collect()
    }
}

/// Casts every grid ray from `pose`; noise is seeded per ray so scans are reproducible.
pub fn generate_scan(scene: &Scene, pose: &Pose, sensor: &SensorModel, seed: u64) -> Result<GroundTruthScan> {
    scene.validate()?;
    sensor.validate()?;
    if !pose.is_finite() {
        return Err(invalid("pose must be finite"));
    }
    let origin = pose.translation();
    if !scene.contains(&origin) {
        return Err(invalid(format!("pose {:?} is outside the scene", pose.to_array())));
    }
    let rot = pose.rotation();
    let noise = (scene.noise_std > 0.0)
        .then(|| Normal::new(0.0, scene.noise_std).expect("validated noise std"));
    let grid = make_query_grid(sensor, 1)?;
    let mut true_radius = Vec::with_capacity(grid.len());
    let mut points = Vec::with_capacity(grid.len());
    for (ray, dir) in grid.iter().enumerate() {
        let unit = spherical_to_cartesian(&SphericalPoint::new(dir.azimuth, dir.inclination, 1.0))?;
        let d = rot * Vector3::new(unit.x, unit.y, unit.z);
        let hit = scene.first_hit(&origin, &d).filter(|&r| r < sensor.r_max);
        true_radius.push(hit);
        let Some(r) = hit else { continue };
        let mut measured = r;
        if let Some(n) = &noise {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ray as u64);
            measured += n.sample(&mut rng);
        }
        let measured = measured.max(sensor.r_min);
        if measured >= sensor.r_max {
            continue;
        }
        points.push(spherical_to_cartesian(&SphericalPoint::new(dir.azimuth, dir.inclination, measured))?);
    }
    Ok(GroundTruthScan {
        cloud: PointCloud::new(points),
        true_radius,
        pose: *pose,
        sensor: sensor.clone(),
    })
}

/// A scene, the pose to scan it from and the sensor, read from `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub scene: Scene,
    pub pose: Pose,
    pub sensor: SensorModel,
}

impl SceneConfig {
    /// Keys: `kind` (box | tunnel | sphere), `radius`, `axis`, `extent` (three values),
    /// `center` (three values), `noise`, `pose` (six values), `resolution` (degrees),
    /// `r_min`, `r_max`. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut radius = None;
        let mut axis = Axis::X;
        let mut extent = None;
        let mut center = [0.0; 3];
        let mut noise = 0.0;
        let mut pose = Pose::identity();
        let mut sensor = SensorModel::desk();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: Error| Error::Format(format!("line {}: {key}: {e}", lineno + 1));
            match key {
                "kind" => kind = Some(value.to_ascii_lowercase()),
                "radius" => radius = Some(numbers::<1>(value).map_err(bad)?[0]),
                "axis" => axis = value.parse().map_err(bad)?,
                "extent" | "extents" => extent = Some(numbers::<3>(value).map_err(bad)?),
                "center" => center = numbers::<3>(value).map_err(bad)?,
                "noise" => noise = numbers::<1>(value).map_err(bad)?[0],
                "pose" => pose = Pose::from_array(numbers::<6>(value).map_err(bad)?),
                "resolution" => sensor.azimuth_resolution = numbers::<1>(value).map_err(bad)?[0].to_radians(),
                "r_min" => sensor.r_min = numbers::<1>(value).map_err(bad)?[0],
                "r_max" => sensor.r_max = numbers::<1>(value).map_err(bad)?[0],
                other => return Err(Error::Format(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        let need_radius = || radius.ok_or_else(|| Error::Format("missing radius".into()));
        let shape = match kind.as_deref() {
            Some("tunnel") | Some("cylinder") => Shape::Tunnel {
                radius: need_radius()?,
                axis,
            },
            Some("sphere") => Shape::Sphere {
                center,
                radius: need_radius()?,
            },
            Some("box") | Some("room") => Shape::Box {
                extents: extent.ok_or_else(|| Error::Format("missing extent".into()))?,
            },
            Some(other) => return Err(Error::Format(format!("unknown scene kind {other:?}"))),
            None => return Err(Error::Format("missing kind".into())),
        };
        let scene = Scene {
            shape,
            noise_std: noise,
        };
        scene.validate()?;
        sensor.validate()?;
        Ok(Self { scene, pose, sensor })
    }

    /// Built-in scenes by name: `tunnel`, `room`, `sphere`.
    pub fn builtin(name: &str) -> Option<Self> {
        let scene = match name {
            "tunnel" => Scene::tunnel(3.0),
            "room" => Scene::room([8.0, 6.0, 3.0]),
            "sphere" => Scene::sphere([0.0; 3], 5.0),
            _ => return None,
        };
        Some(Self {
            scene,
            pose: Pose::identity(),
            sensor: SensorModel::desk(),
        })
    }
}

fn numbers<const N: usize>(value: &str) -> Result<[f64; N]> {
    let parsed: Vec<f64> = value
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| invalid(format!("{s:?}: {e}"))))
        .collect::<Result<_>>()?;
    parsed
        .try_into()
        .map_err(|v: Vec<f64>| invalid(format!("expected {N} values, got {}", v.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cartesian_to_spherical;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn sphere_from_center_is_constant() {
        let scan = generate_scan(&Scene::sphere([0.0; 3], 5.0), &Pose::identity(), &SensorModel::desk(), 1).unwrap();
        assert_eq!(scan.true_radius.len(), 5760);
        assert_eq!(scan.cloud.len(), 5760);
        for r in &scan.true_radius {
            assert!((r.unwrap() - 5.0).abs() < 1e-12);
        }
        for p in &scan.cloud.points {
            assert!((p.norm() - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vertical_cylinder_matches_closed_form() {
        let scene = Scene {
            shape: Shape::Tunnel {
                radius: 2.0,
                axis: Axis::Z,
            },
            noise_std: 0.0,
        };
        let sensor = SensorModel::desk();
        let scan = generate_scan(&scene, &Pose::identity(), &sensor, 0).unwrap();
        let grid = make_query_grid(&sensor, 1).unwrap();
        for (d, r) in grid.iter().zip(&scan.true_radius) {
            let expect = 2.0 / d.inclination.sin();
            assert!((r.unwrap() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn horizontal_tunnel_matches_closed_form() {
        let sensor = SensorModel::desk();
        let scan = generate_scan(&Scene::tunnel(3.0), &Pose::identity(), &sensor, 0).unwrap();
        let grid = make_query_grid(&sensor, 1).unwrap();
        let mut free = 0;
        for (d, r) in grid.iter().zip(&scan.true_radius) {
            let (st, sa, ca) = (d.azimuth.sin(), d.inclination.sin(), d.inclination.cos());
            let expect = 3.0 / (sa * sa * st * st + ca * ca).sqrt();
            match r {
                Some(r) => assert!((r - expect).abs() < 1e-9),
                None => {
                    assert!(expect >= 10.0);
                    free += 1;
                }
            }
        }
        assert!(free > 0 && free < grid.len() / 2);
    }

    #[test]
    fn room_half_extent() {
        let scene = Scene::room([4.0, 4.0, 2.0]);
        let o = Vector3::zeros();
        assert!((scene.first_hit(&o, &Vector3::x()).unwrap() - 2.0).abs() < 1e-15);
        assert!((scene.first_hit(&o, &-Vector3::z()).unwrap() - 1.0).abs() < 1e-15);
        let sensor = SensorModel::new(FRAC_PI_2, vec![FRAC_PI_2], 0.4, 10.0).unwrap();
        let scan = generate_scan(&scene, &Pose::identity(), &sensor, 0).unwrap();
        assert!(scan.true_radius.iter().all(|r| (r.unwrap() - 2.0).abs() < 1e-12));
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let scene = Scene::tunnel(3.0).with_noise(0.05);
        let sensor = SensorModel::desk();
        let a = generate_scan(&scene, &Pose::identity(), &sensor, 7).unwrap();
        let b = generate_scan(&scene, &Pose::identity(), &sensor, 7).unwrap();
        let c = generate_scan(&scene, &Pose::identity(), &sensor, 8).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_ne!(a.cloud, c.cloud);
        assert_eq!(a.true_radius, c.true_radius);
        for p in &a.cloud.points {
            let r = cartesian_to_spherical(p).unwrap().radius;
            assert!(r >= sensor.r_min && r < sensor.r_max);
        }
    }

    #[test]
    fn pose_must_be_inside() {
        let pose = Pose::new(0.0, 5.0, 0.0, 0.0, 0.0, 0.0);
        assert!(generate_scan(&Scene::tunnel(3.0), &pose, &SensorModel::desk(), 0).is_err());
        let inside = Pose::new(10.0, 1.0, 0.5, 0.1, 0.0, 0.3);
        let scan = generate_scan(&Scene::tunnel(3.0), &inside, &SensorModel::desk(), 0).unwrap();
        assert_eq!(scan.pose, inside);
    }

    #[test]
    fn config_text() {
        let cfg = SceneConfig::parse(
            "# tunnel\nkind = tunnel\nradius = 3\naxis = x\nnoise = 0.01\npose = 1 0 0 0 0 0.5\nresolution = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.scene, Scene::tunnel(3.0).with_noise(0.01));
        assert_eq!(cfg.pose.yaw, 0.5);
        assert_eq!(cfg.sensor.azimuth_count(1), 720);
        let room = SceneConfig::parse("kind=box\nextent=4,4,2").unwrap();
        assert_eq!(room.scene, Scene::room([4.0, 4.0, 2.0]));
        assert!(SceneConfig::parse("kind=sphere").is_err());
        assert!(SceneConfig::parse("kind=box\nextent=1 2").is_err());
        assert!(SceneConfig::parse("colour=red").is_err());
        assert!(SceneConfig::builtin("tunnel").is_some());
    }
}
