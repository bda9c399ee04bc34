//! Analytic scenes built from planes, boxes and vertical cylinders, with an
//! exact ray caster that produces ground-truth scans from any pose.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Dataset, Frame};
use crate::rangeview::{BeamTable, Pose, RangeImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    /// Infinite plane through `point` with normal `normal`.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        intensity: f64,
    },
    /// Axis-aligned box.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        intensity: f64,
    },
    /// Vertical capped cylinder.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
        intensity: f64,
    },
}

const HIT_EPS: f64 = 1e-9;

impl Primitive {
    pub fn intensity(&self) -> f64 {
        match self {
            Primitive::Plane { intensity, .. } | Primitive::Box { intensity, .. } | Primitive::Cylinder { intensity, .. } => {
                *intensity
            }
        }
    }

    /// Smallest positive ray parameter of a hit.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match self {
            Primitive::Plane { point, normal, .. } => {
                let n = Vector3::from(*normal);
                let den = d.dot(&n);
                if den.abs() < 1e-15 {
                    return None;
                }
                let t = (Vector3::from(*point) - o).dot(&n) / den;
                (t > HIT_EPS).then_some(t)
            }
            Primitive::Box { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if d[k] == 0.0 {
                        if o[k] < min[k] || o[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (min[k] - o[k]) / d[k];
                    let b = (max[k] - o[k]) / d[k];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 {
                    None
                } else if t0 > HIT_EPS {
                    Some(t0)
                } else if t1 > HIT_EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Primitive::Cylinder {
                center,
                radius,
                z_min,
                z_max,
                ..
            } => {
                let mut best: Option<f64> = None;
                let mut take = |t: f64| {
                    if t > HIT_EPS && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                let (ox, oy) = (o.x - center[0], o.y - center[1]);
                let a = d.x * d.x + d.y * d.y;
                if a > 0.0 {
                    let b = ox * d.x + oy * d.y;
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            let z = o.z + t * d.z;
                            if z >= *z_min && z <= *z_max {
                                take(t);
                            }
                        }
                    }
                }
                if d.z != 0.0 {
                    for zc in [*z_min, *z_max] {
                        let t = (zc - o.z) / d.z;
                        let (x, y) = (ox + t * d.x, oy + t * d.y);
                        if x * x + y * y <= radius * radius {
                            take(t);
                        }
                    }
                }
                best
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
}

impl SyntheticScene {
    /// Nearest hit as `(distance, intensity)`; ties go to the earlier primitive.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for p in &self.primitives {
            if let Some(t) = p.intersect(origin, dir) {
                if best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, p.intensity()));
                }
            }
        }
        best
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Scan of `scene` from `pose`. Depth noise and drops are drawn per pixel in
/// row-major order from a generator seeded with `seed`.
pub fn raycast_scan(
    scene: &SyntheticScene,
    pose: &Pose,
    beams: &BeamTable,
    noise_sigma: f64,
    drop_prob: f64,
    seed: u64,
) -> Result<RangeImage> {
    if !(noise_sigma >= 0.0) || !(0.0..=1.0).contains(&drop_prob) {
        return Err(Error::invalid("noise must be >= 0 and drop probability in [0, 1]"));
    }
    let (h, w) = (beams.height(), beams.width());
    let rot = pose.rotation();
    let origin = pose.translation();
    let rays = beams.rays();
    let hits: Vec<Option<(f64, f64)>> = rays.par_iter().map(|r| scene.raycast(&origin, &(rot * r.dir))).collect();
    let mut img = RangeImage::zeros(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    for (i, hit) in hits.into_iter().enumerate() {
        let noise = if noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        let dropped = drop_prob > 0.0 && rng.random::<f64>() < drop_prob;
        if let Some((t, rho)) = hit {
            if !dropped {
                img.depth[i] = (t + noise).max(1e-6);
                img.intensity[i] = rho.clamp(0.0, 1.0);
                img.raydrop[i] = 1.0;
            }
        }
    }
    Ok(img)
}

/// Lateral offset between the captured trajectory and its neighbour lanes.
pub const LANE_OFFSET: f64 = 3.5;

/// A synthetic capture: the world, the beam layout, the centre trajectory
/// and two parallel trajectories one lane to either side.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub scene: SyntheticScene,
    pub beams: BeamTable,
    pub center: Vec<Pose>,
    pub left: Vec<Pose>,
    pub right: Vec<Pose>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Fixture {
    /// Scan every pose in `poses`; frame `i` uses seed `seed + salt + i`.
    pub fn scan(&self, poses: &[Pose], salt: u64) -> Result<Vec<Frame>> {
        poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s = self.seed.wrapping_add(salt).wrapping_add(i as u64);
                Ok(Frame {
                    pose: *p,
                    scan: raycast_scan(&self.scene, p, &self.beams, self.noise_sigma, 0.0, s)?,
                })
            })
            .collect()
    }

    pub fn dataset(&self, poses: &[Pose], salt: u64) -> Result<Dataset> {
        Ok(Dataset {
            beams: self.beams.clone(),
            frames: self.scan(poses, salt)?,
        })
    }
}

/// Held-out frames of a trajectory: every tenth frame, offset by five.
pub fn is_heldout(index: usize) -> bool {
    index % 10 == 5
}

/// A straight corridor: floor, side walls 7 m either side, end walls, two
/// crates and two pillars. Twenty poses drive along the centre line at
/// sensor height; the seed jitters the props and drives the scan noise.
pub fn corridor_fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut j = |s: f64| rng.random_range(-s..s);
    let plane = |p: [f64; 3], n: [f64; 3], intensity| Primitive::Plane {
        point: p,
        normal: n,
        intensity,
    };
    let (cx1, cx2, px1, px2) = (-3.0 + j(0.3), 5.0 + j(0.3), 2.0 + j(0.3), -7.5 + j(0.3));
    let primitives = vec![
        plane([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 0.35),
        plane([0.0, 7.0, 0.0], [0.0, -1.0, 0.0], 0.5),
        plane([0.0, -7.0, 0.0], [0.0, 1.0, 0.0], 0.45),
        plane([16.0, 0.0, 0.0], [-1.0, 0.0, 0.0], 0.4),
        plane([-16.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.55),
        Primitive::Box {
            min: [cx1 - 0.8, 5.5, 0.0],
            max: [cx1 + 0.8, 7.0, 1.2],
            intensity: 0.6,
        },
        Primitive::Box {
            min: [cx2 - 0.6, -7.0, 0.0],
            max: [cx2 + 0.6, -5.8, 1.0],
            intensity: 0.3,
        },
        Primitive::Cylinder {
            center: [px1, 5.2],
            radius: 0.35,
            z_min: 0.0,
            z_max: 20.0,
            intensity: 0.4,
        },
        Primitive::Cylinder {
            center: [px2, -5.0],
            radius: 0.35,
            z_min: 0.0,
            z_max: 20.0,
            intensity: 0.5,
        },
    ];
    let beams = BeamTable::uniform(-25f64.to_radians(), 10f64.to_radians(), 32, 512).expect("static beam table");
    let lane = |y: f64| -> Vec<Pose> {
        (0..20)
            .map(|i| {
                let x = -6.0 + 12.0 * i as f64 / 19.0;
                Pose::from_translation(Vector3::new(x, y, 1.8)).with_timestamp(0.1 * i as f64)
            })
            .collect()
    };
    Fixture {
        scene: SyntheticScene { primitives },
        beams,
        center: lane(0.0),
        left: lane(LANE_OFFSET),
        right: lane(-LANE_OFFSET),
        noise_sigma: 0.005,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rangeview::unproject_world;

    fn wall() -> SyntheticScene {
        SyntheticScene {
            primitives: vec![Primitive::Plane {
                point: [5.0, 0.0, 0.0],
                normal: [1.0, 0.0, 0.0],
                intensity: 0.7,
            }],
        }
    }

    #[test]
    fn plane_hit_distance() {
        assert_eq!(wall().raycast(&Vector3::zeros(), &Vector3::x()), Some((5.0, 0.7)));
        assert_eq!(wall().raycast(&Vector3::zeros(), &-Vector3::x()), None);
    }

    #[test]
    fn box_and_cylinder_hits() {
        let b = Primitive::Box {
            min: [2.0, -1.0, -1.0],
            max: [3.0, 1.0, 1.0],
            intensity: 0.1,
        };
        assert_eq!(b.intersect(&Vector3::zeros(), &Vector3::x()), Some(2.0));
        assert_eq!(b.intersect(&Vector3::new(2.5, 0.0, 0.0), &Vector3::x()), Some(0.5));
        let c = Primitive::Cylinder {
            center: [4.0, 0.0],
            radius: 1.0,
            z_min: -1.0,
            z_max: 1.0,
            intensity: 0.2,
        };
        assert!((c.intersect(&Vector3::zeros(), &Vector3::x()).unwrap() - 3.0).abs() < 1e-12);
        // straight down through the top cap
        assert!((c.intersect(&Vector3::new(4.0, 0.0, 3.0), &-Vector3::z()).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn full_drop_and_noise_statistics() {
        let beams = BeamTable::uniform(-0.3, 0.3, 20, 500).unwrap();
        let s = raycast_scan(&wall(), &Pose::identity(), &beams, 0.0, 1.0, 1).unwrap();
        assert!(s.raydrop.iter().all(|&r| r == 0.0));
        // rays hitting a plane straight on: compare with the noise-free scan
        let clean = raycast_scan(&wall(), &Pose::identity(), &beams, 0.0, 0.0, 2).unwrap();
        let noisy = raycast_scan(&wall(), &Pose::identity(), &beams, 0.01, 0.0, 2).unwrap();
        let d: Vec<f64> = (0..clean.len())
            .filter(|&i| clean.raydrop[i] == 1.0)
            .map(|i| noisy.depth[i] - clean.depth[i])
            .collect();
        assert!(d.len() >= 4000);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((0.008..=0.012).contains(&std), "{std}");
    }

    #[test]
    fn noise_free_scan_lies_on_surfaces() {
        let f = corridor_fixture(3);
        let pose = f.center[4];
        let scan = raycast_scan(&f.scene, &pose, &f.beams, 0.0, 0.0, 0).unwrap();
        let pts = unproject_world(&scan, &f.beams, &pose);
        assert_eq!(pts.len(), scan.len());
        for p in &pts {
            let x = p.position;
            let on_surface = f.scene.primitives.iter().any(|prim| match prim {
                Primitive::Plane { point, normal, .. } => (x - Vector3::from(*point)).dot(&Vector3::from(*normal)).abs() < 1e-9,
                Primitive::Box { min, max, .. } => {
                    let inside = (0..3).all(|k| x[k] >= min[k] - 1e-9 && x[k] <= max[k] + 1e-9);
                    inside && (0..3).any(|k| (x[k] - min[k]).abs() < 1e-9 || (x[k] - max[k]).abs() < 1e-9)
                }
                Primitive::Cylinder { center, radius, .. } => {
                    ((x.x - center[0]).hypot(x.y - center[1]) - radius).abs() < 1e-9
                }
            });
            assert!(on_surface, "{x:?}");
        }
    }

    #[test]
    fn fixture_is_deterministic_with_parallel_lanes() {
        let a = corridor_fixture(7);
        let b = corridor_fixture(7);
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.center, b.center);
        assert_ne!(a.scene, corridor_fixture(8).scene);
        assert_eq!((a.beams.height(), a.beams.width()), (32, 512));
        for i in 0..20 {
            assert_eq!(a.left[i].translation() - a.center[i].translation(), Vector3::new(0.0, 3.5, 0.0));
            assert_eq!(a.center[i].translation() - a.right[i].translation(), Vector3::new(0.0, 3.5, 0.0));
        }
        let sa = a.scan(&a.center[..2], 0).unwrap();
        let sb = b.scan(&b.center[..2], 0).unwrap();
        assert_eq!(sa[1].scan, sb[1].scan);
    }
}
