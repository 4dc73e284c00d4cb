//! Ray-cast toy scenes with ground-truth labels.
//!
//! A spinning sensor sits above a flat ground carrying a road band, with
//! upright cylinders standing in for cars, people, trunks and poles, all
//! inside a ring of building walls. Beams are cast at more azimuths than
//! the range image has columns so that several points share pixels, which
//! is exactly the situation label recovery has to handle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::kitti_io::{Point, PointCloudScan};

pub mod class {
    pub const CAR: u8 = 1;
    pub const PERSON: u8 = 6;
    pub const ROAD: u8 = 9;
    pub const SIDEWALK: u8 = 11;
    pub const BUILDING: u8 = 13;
    pub const TRUNK: u8 = 16;
    pub const TERRAIN: u8 = 17;
    pub const POLE: u8 = 18;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub beams: usize,
    pub azimuth_samples: usize,
    /// Degrees.
    pub fov_up: f64,
    pub fov_down: f64,
    pub sensor_height: f64,
    pub objects: usize,
    pub wall_radius: f64,
    pub wall_height: f64,
    pub range_noise: f64,
    pub max_range: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            beams: 64,
            azimuth_samples: 2200,
            fov_up: 3.0,
            fov_down: -25.0,
            sensor_height: 1.73,
            objects: 24,
            wall_radius: 35.0,
            wall_height: 8.0,
            range_noise: 0.01,
            max_range: 80.0,
        }
    }
}

impl SceneConfig {
    /// A scene sized for an `h × w` range image with the given vertical fov.
    pub fn for_image(h: usize, w: usize, fov_up: f64, fov_down: f64) -> Self {
        SceneConfig {
            beams: h,
            azimuth_samples: w + w / 16,
            fov_up,
            fov_down,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScan {
    pub scan: PointCloudScan,
    /// Training ids, one per point.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy)]
struct Cylinder {
    cx: f64,
    cy: f64,
    radius: f64,
    height: f64,
    class: u8,
}

fn ground_class(y: f64) -> u8 {
    match y.abs() {
        a if a < 4.0 => class::ROAD,
        a if a < 6.0 => class::SIDEWALK,
        _ => class::TERRAIN,
    }
}

fn remission_of(class: u8) -> f64 {
    match class {
        class::ROAD => 0.2,
        class::SIDEWALK => 0.3,
        class::TERRAIN => 0.35,
        class::BUILDING => 0.5,
        class::CAR => 0.7,
        class::PERSON => 0.4,
        class::TRUNK => 0.25,
        _ => 0.6,
    }
}

/// Nearest hit along unit direction `d` from the origin, as (t, class).
fn cast(d: [f64; 3], cfg: &SceneConfig, objects: &[Cylinder]) -> Option<(f64, u8)> {
    let ground_z = -cfg.sensor_height;
    let mut best: Option<(f64, u8)> = None;
    let mut consider = |t: f64, c: u8| {
        if t > 0.0 && t <= cfg.max_range && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, c));
        }
    };
    if d[2] < 0.0 {
        let t = ground_z / d[2];
        consider(t, ground_class(t * d[1]));
    }
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 1e-12 {
        let t = cfg.wall_radius / a.sqrt();
        let z = t * d[2];
        if z >= ground_z && z <= ground_z + cfg.wall_height {
            consider(t, class::BUILDING);
        }
        for o in objects {
            let b = -2.0 * (d[0] * o.cx + d[1] * o.cy);
            let c = o.cx * o.cx + o.cy * o.cy - o.radius * o.radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                continue;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            let z = t * d[2];
            if z >= ground_z && z <= ground_z + o.height {
                consider(t, o.class);
            }
        }
    }
    best
}

fn place_objects(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Vec<Cylinder> {
    const KINDS: [(u8, f64, f64); 4] = [
        (class::CAR, 1.8, 1.5),
        (class::PERSON, 0.3, 1.8),
        (class::TRUNK, 0.25, 3.0),
        (class::POLE, 0.1, 4.0),
    ];
    let mut out: Vec<Cylinder> = Vec::with_capacity(cfg.objects);
    let mut attempts = 0;
    while out.len() < cfg.objects && attempts < cfg.objects * 50 {
        attempts += 1;
        let (class, radius, height) = KINDS[rng.gen_range(0..KINDS.len())];
        let dist = rng.gen_range(4.0..cfg.wall_radius - 3.0);
        let az = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (cx, cy) = (dist * az.cos(), dist * az.sin());
        let clear = out
            .iter()
            .all(|o| ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt() > o.radius + radius + 0.5);
        if clear {
            out.push(Cylinder { cx, cy, radius, height, class });
        }
    }
    out
}

/// Generates one labelled scan; the same seed always yields the same scan.
pub fn generate(cfg: &SceneConfig, seed: u64) -> SyntheticScan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = place_objects(&mut rng, cfg);
    let noise = Normal::new(0.0, cfg.range_noise.max(0.0)).expect("finite noise");
    let rem_noise = Normal::new(0.0, 0.05).unwrap();
    let (up, down) = (cfg.fov_up.to_radians(), cfg.fov_down.to_radians());
    let az_step = std::f64::consts::TAU / cfg.azimuth_samples as f64;
    let beam_step = (up - down) / cfg.beams.max(1) as f64;

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for b in 0..cfg.beams {
        // centre of beam b's row band, so each beam lands in its own row
        let elev = up - (b as f64 + 0.5) * beam_step + rng.gen_range(-0.1..0.1) * beam_step;
        for s in 0..cfg.azimuth_samples {
            let az = -std::f64::consts::PI + (s as f64 + rng.gen_range(0.0..1.0)) * az_step;
            let d = [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()];
            let Some((t, class)) = cast(d, cfg, &objects) else {
                continue;
            };
            let t = (t + noise.sample(&mut rng)).max(0.05);
            let rem = (remission_of(class) + rem_noise.sample(&mut rng)).clamp(0.0, 1.0);
            points.push(Point::new(
                (t * d[0]) as f32,
                (t * d[1]) as f32,
                (t * d[2]) as f32,
                rem as f32,
            ));
            labels.push(class);
        }
    }
    SyntheticScan {
        scan: PointCloudScan::new(points),
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{spherical_project, ProjectionConfig};

    #[test]
    fn deterministic_and_labelled() {
        let cfg = SceneConfig::for_image(16, 256, 3.0, -25.0);
        let a = generate(&cfg, 3);
        assert_eq!(a, generate(&cfg, 3));
        assert_ne!(a.scan, generate(&cfg, 4).scan);
        assert_eq!(a.scan.count(), a.labels.len());
        assert!(a.labels.iter().all(|&l| l != 0 && l < 20));
        assert!(a.labels.contains(&class::ROAD));
        assert!(a.labels.contains(&class::BUILDING));
    }

    #[test]
    fn oversampling_makes_collisions() {
        let cfg = SceneConfig::for_image(16, 256, 3.0, -25.0);
        let s = generate(&cfg, 1);
        let proj = ProjectionConfig { height: 16, width: 256, ..Default::default() };
        let (img, map) = spherical_project(&s.scan, &proj).unwrap();
        assert!(img.valid_count() < map.len());
        // one beam per row
        assert!(img.valid_count() > 16 * 256 / 2);
    }
}
