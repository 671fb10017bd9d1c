//! Deterministic synthetic scenes for tests and desk-scale experiments:
//! parametric planes, vertical cylinders (poles) and spheres (foliage),
//! range-sampled by a spinning multi-beam sensor along a known path.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::PointCloud;
use crate::geom::Pose;
use crate::odometry::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    /// `normal·x = offset`, optionally clipped to a box.
    Plane { normal: Vector3<f64>, offset: f64, bounds: Option<Aabb> },
    /// Vertical cylinder around `(x, y)` between two heights.
    Pole { x: f64, y: f64, radius: f64, z_min: f64, z_max: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Solid axis-aligned box (a building block).
    Cuboid(Aabb),
}

fn smallest_positive_root(a: f64, b: f64, c: f64) -> [Option<f64>; 2] {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 || a == 0.0 {
        return [None, None];
    }
    let sq = disc.sqrt();
    // numerically stable pair of roots
    let q = -0.5 * (b + b.signum() * sq);
    let (r1, r2) = (q / a, if q != 0.0 { c / q } else { -b / (2.0 * a) });
    let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
    [(lo > 0.0).then_some(lo), (hi > 0.0).then_some(hi)]
}

impl Surface {
    pub fn ground(height: f64) -> Self {
        Surface::Plane { normal: Vector3::z(), offset: height, bounds: None }
    }

    /// Ray parameter of the first hit beyond `t_min`.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, t_min: f64) -> Option<f64> {
        match *self {
            Surface::Plane { normal, offset, bounds } => {
                let den = normal.dot(d);
                if den.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - normal.dot(o)) / den;
                if t <= t_min {
                    return None;
                }
                match bounds {
                    Some(b) if !b.contains(&(o + d * t)) => None,
                    _ => Some(t),
                }
            }
            Surface::Pole { x, y, radius, z_min, z_max } => {
                let (ox, oy) = (o.x - x, o.y - y);
                let a = d.x * d.x + d.y * d.y;
                let b = 2.0 * (ox * d.x + oy * d.y);
                let c = ox * ox + oy * oy - radius * radius;
                smallest_positive_root(a, b, c).into_iter().flatten().find(|&t| {
                    let z = o.z + t * d.z;
                    t > t_min && z >= z_min && z <= z_max
                })
            }
            Surface::Sphere { center, radius } => {
                let oc = o - center;
                let b = 2.0 * oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                smallest_positive_root(d.norm_squared(), b, c).into_iter().flatten().find(|&t| t > t_min)
            }
            Surface::Cuboid(b) => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    if d[i].abs() < 1e-15 {
                        if o[i] < b.min[i] || o[i] > b.max[i] {
                            return None;
                        }
                        continue;
                    }
                    let (a, c) = ((b.min[i] - o[i]) / d[i], (b.max[i] - o[i]) / d[i]);
                    t0 = t0.max(a.min(c));
                    t1 = t1.min(a.max(c));
                }
                if t0 > t1 {
                    None
                } else if t0 > t_min {
                    Some(t0)
                } else {
                    (t1 > t_min).then_some(t1)
                }
            }
        }
    }

    /// Signed distance-like residual; zero on the surface.
    pub fn residual(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Surface::Plane { normal, offset, .. } => normal.dot(p) - offset,
            Surface::Pole { x, y, radius, .. } => ((p.x - x).powi(2) + (p.y - y).powi(2)).sqrt() - radius,
            Surface::Sphere { center, radius } => (p - center).norm() - radius,
            Surface::Cuboid(b) => {
                let outside = (p - b.max).sup(&(b.min - p)).sup(&Vector3::zeros()).norm();
                let inside = (p - b.max).sup(&(b.min - p)).max().min(0.0);
                outside + inside
            }
        }
    }
}

/// Spinning multi-beam range sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lidar {
    pub channels: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_steps: usize,
    pub min_range: f64,
    pub max_range: f64,
    /// Start each sweep at a random azimuth, as a free-running spinner does.
    pub random_phase: bool,
}

impl Default for Lidar {
    fn default() -> Self {
        Self {
            channels: 16,
            elevation_min_deg: -15.0,
            elevation_max_deg: 15.0,
            azimuth_steps: 360,
            min_range: 0.5,
            max_range: 40.0,
            random_phase: false,
        }
    }
}

impl Lidar {
    pub fn elevations(&self) -> Vec<f64> {
        let n = self.channels.max(1);
        (0..n)
            .map(|i| {
                let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                (self.elevation_min_deg + f * (self.elevation_max_deg - self.elevation_min_deg)).to_radians()
            })
            .collect()
    }

    /// Unit ray directions in the sensor frame.
    pub fn rays(&self) -> Vec<Vector3<f64>> {
        self.rays_from(0.0)
    }

    /// Rays with every azimuth shifted by `phase` radians.
    pub fn rays_from(&self, phase: f64) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(self.channels * self.azimuth_steps);
        for e in self.elevations() {
            let (se, ce) = e.sin_cos();
            for j in 0..self.azimuth_steps {
                let a = phase + j as f64 / self.azimuth_steps as f64 * std::f64::consts::TAU;
                let (sa, ca) = a.sin_cos();
                out.push(Vector3::new(ce * ca, ce * sa, se));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub surfaces: Vec<Surface>,
    pub lidar: Lidar,
    /// World-from-sensor poses, one per scan.
    pub path: Vec<Pose>,
    /// Standard deviation of additive range noise, meters.
    pub range_noise: f64,
}

/// Scan taken at `pose` (world-from-sensor), in the sensor frame.
pub fn sample_scan(spec: &WorldSpec, pose: &Pose, rng: &mut impl Rng) -> PointCloud {
    let noise = (spec.range_noise > 0.0).then(|| Normal::new(0.0, spec.range_noise).unwrap());
    let origin = pose.translation;
    let mut positions = Vec::new();
    let phase = if spec.lidar.random_phase {
        rng.random_range(0.0..std::f64::consts::TAU / spec.lidar.azimuth_steps.max(1) as f64)
    } else {
        0.0
    };
    for local in spec.lidar.rays_from(phase) {
        let dir = pose.rotation * local;
        let hit = spec
            .surfaces
            .iter()
            .filter_map(|s| s.intersect(&origin, &dir, spec.lidar.min_range))
            .min_by(f64::total_cmp);
        if let Some(t) = hit.filter(|&t| t <= spec.lidar.max_range) {
            let r = t + noise.as_ref().map_or(0.0, |n| n.sample(rng));
            positions.push(local * r);
        }
    }
    PointCloud::new(positions)
}

/// Scans along the path and the ground-truth trajectory relative to the
/// first scan.
pub fn synth_world(spec: &WorldSpec, seed: u64) -> (Vec<PointCloud>, Trajectory) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scans = spec
        .path
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut c = sample_scan(spec, p, &mut rng);
            c.frame_id = i as u64;
            c
        })
        .collect();
    (scans, Trajectory::from_poses(spec.path.clone()).rebased())
}

/// Forward path with gentle lateral sway and yaw, `step` meters per frame.
pub fn sway_path(frames: usize, step: f64, height: f64, sway: f64, phase: f64) -> Vec<Pose> {
    let wave = |x: f64| sway * (0.07 * x + phase).sin();
    let slope = |x: f64| sway * 0.07 * (0.07 * x + phase).cos();
    (0..frames)
        .map(|i| {
            let x = i as f64 * step;
            Pose::from_yaw(slope(x).atan(), Vector3::new(x, wave(x), height))
        })
        .collect()
}

/// A straight corridor: two infinite walls and a ground plane, with sparse
/// poles and a few foliage blobs as the only features along the corridor
/// axis.
pub fn corridor(seed: u64, frames: usize, step: f64) -> WorldSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC044_1D0E);
    let half_width = 4.0;
    let mut surfaces = vec![
        Surface::ground(0.0),
        Surface::Plane { normal: Vector3::y(), offset: half_width, bounds: None },
        Surface::Plane { normal: Vector3::y(), offset: -half_width, bounds: None },
    ];
    let end = frames as f64 * step + 40.0;
    let mut x = -30.0 + rng.random_range(0.0..6.0);
    let mut side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    while x < end {
        surfaces.push(Surface::Pole {
            x,
            y: side * rng.random_range(2.6..3.4),
            radius: rng.random_range(0.1..0.2),
            z_min: 0.0,
            z_max: rng.random_range(4.0..6.0),
        });
        if rng.random_bool(0.3) {
            surfaces.push(Surface::Sphere {
                center: Vector3::new(x + rng.random_range(2.0..4.0), -side * 3.0, rng.random_range(1.0..2.5)),
                radius: rng.random_range(0.5..0.9),
            });
        }
        x += rng.random_range(9.0..15.0);
        side = -side;
    }
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    WorldSpec { surfaces, lidar: Lidar::default(), path: sway_path(frames, step, 1.8, 0.6, phase), range_noise: 0.0 }
}

/// Open street block: ground, clipped building facades, poles and blobs.
pub fn street(seed: u64, frames: usize, step: f64) -> WorldSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57_EE7);
    let mut surfaces = vec![Surface::ground(0.0)];
    let end = frames as f64 * step + 40.0;
    for side in [-1.0, 1.0] {
        let mut x = -40.0;
        while x < end {
            let len = rng.random_range(8.0..20.0);
            let y = side * rng.random_range(6.0..10.0);
            surfaces.push(Surface::Plane {
                normal: Vector3::y(),
                offset: y,
                bounds: Some(Aabb {
                    min: Vector3::new(x, y - 0.01, 0.0),
                    max: Vector3::new(x + len, y + 0.01, rng.random_range(4.0..12.0)),
                }),
            });
            // facade end wall
            let xe = x + len;
            surfaces.push(Surface::Plane {
                normal: Vector3::x(),
                offset: xe,
                bounds: Some(Aabb {
                    min: Vector3::new(xe - 0.01, y.min(y + side * 6.0), 0.0),
                    max: Vector3::new(xe + 0.01, y.max(y + side * 6.0), 6.0),
                }),
            });
            x = xe + rng.random_range(2.0..6.0);
        }
    }
    let mut x = -30.0;
    while x < end {
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        surfaces.push(Surface::Pole {
            x,
            y: side * rng.random_range(3.5..5.0),
            radius: rng.random_range(0.1..0.25),
            z_min: 0.0,
            z_max: rng.random_range(3.0..7.0),
        });
        if rng.random_bool(0.4) {
            surfaces.push(Surface::Sphere {
                center: Vector3::new(x + 2.0, side * 4.5, rng.random_range(1.0..3.0)),
                radius: rng.random_range(0.6..1.2),
            });
        }
        x += rng.random_range(5.0..10.0);
    }
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    WorldSpec { surfaces, lidar: Lidar::default(), path: sway_path(frames, step, 1.8, 1.0, phase), range_noise: 0.0 }
}

/// Blocks of buildings on both sides of the road with poles and blobs in
/// between; every block face constrains motion, so this is the
/// well-conditioned counterpart of [`corridor`].
pub fn blocks(seed: u64, frames: usize, step: f64) -> WorldSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB10C);
    let mut surfaces = vec![Surface::ground(0.0)];
    let end = frames as f64 * step + 40.0;
    for side in [-1.0, 1.0] {
        let mut x = -40.0;
        while x < end {
            let len = rng.random_range(3.0..9.0);
            let near = rng.random_range(5.0..9.0);
            let depth = rng.random_range(3.0..8.0);
            let (y0, y1) = if side > 0.0 { (near, near + depth) } else { (-near - depth, -near) };
            surfaces.push(Surface::Cuboid(Aabb {
                min: Vector3::new(x, y0, 0.0),
                max: Vector3::new(x + len, y1, rng.random_range(3.0..10.0)),
            }));
            x += len + rng.random_range(1.5..5.0);
        }
    }
    let mut x = -30.0;
    while x < end {
        let y: f64 = rng.random_range(-4.0..4.0);
        if y.abs() > 2.5 {
            surfaces.push(Surface::Pole { x, y, radius: rng.random_range(0.1..0.25), z_min: 0.0, z_max: rng.random_range(3.0..7.0) });
        } else {
            surfaces.push(Surface::Sphere {
                center: Vector3::new(x, 4.0 * y.signum() + y, rng.random_range(1.0..3.0)),
                radius: rng.random_range(0.5..1.0),
            });
        }
        x += rng.random_range(3.0..8.0);
    }
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    WorldSpec { surfaces, lidar: Lidar::default(), path: sway_path(frames, step, 1.8, 0.5, phase), range_noise: 0.0 }
}

/// Area-sampled static scene (ground patch, two perpendicular walls, four
/// poles) for direct registration tests. Points are returned in the scene
/// frame.
pub fn structured_scene(seed: u64, n_points: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 10.0;
    let poles = [(3.0, 4.0), (-4.0, 2.5), (5.5, -3.0), (-2.0, -5.0)];
    let n_poles = n_points / 10;
    let n_walls = n_points * 3 / 10;
    let n_ground = n_points - n_poles - n_walls;
    let mut pts = Vec::with_capacity(n_points);
    for _ in 0..n_ground {
        pts.push(Vector3::new(rng.random_range(-half..half), rng.random_range(-half..half), 0.0));
    }
    for i in 0..n_walls {
        let s = rng.random_range(-half..half);
        let z = rng.random_range(0.0..4.0);
        pts.push(if i % 2 == 0 { Vector3::new(s, half, z) } else { Vector3::new(half, s, z) });
    }
    for i in 0..n_poles {
        let (px, py) = poles[i % poles.len()];
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let z = rng.random_range(0.0..5.0);
        pts.push(Vector3::new(px + 0.15 * a.cos(), py + 0.15 * a.sin(), z));
    }
    PointCloud::new(pts)
}
