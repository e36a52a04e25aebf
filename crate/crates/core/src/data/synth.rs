//! Synthetic 5-class × 4-domain benchmark.
//!
//! Each class is a parametric primitive with per-sample parameter jitter and
//! a random rotation about the vertical axis. Each domain applies one fixed
//! corruption to a dense surface pool:
//!
//! | domain        | corruption                                              |
//! |---------------|---------------------------------------------------------|
//! | `d0_clean`    | none, 1024 uniform surface points                        |
//! | `d1_occluded` | half-space cut keeping 60–80% of the pool, then 1024     |
//! | `d2_noisy`    | additive Gaussian noise, σ = 0.03 per coordinate          |
//! | `d3_density`  | sampling biased 6:1 toward one octant                    |

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::io::{write_manifest, Manifest};
use super::{centroid, DataError, Point, Split};
use crate::rng::{stream, tag, Rng};

pub const POINTS_PER_CLOUD: usize = 1024;
pub const POOL_SIZE: usize = 4096;
pub const NOISE_SIGMA: f64 = 0.03;
const OCTANT_WEIGHT: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Box,
    ChairFrame,
    PoleWithShade,
    RoundedSlab,
    PlaneOnLegs,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Box,
        ShapeClass::ChairFrame,
        ShapeClass::PoleWithShade,
        ShapeClass::RoundedSlab,
        ShapeClass::PlaneOnLegs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Box => "box",
            ShapeClass::ChairFrame => "chair_frame",
            ShapeClass::PoleWithShade => "pole_with_shade",
            ShapeClass::RoundedSlab => "rounded_slab",
            ShapeClass::PlaneOnLegs => "plane_on_legs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DomainShift {
    Clean,
    Occlusion,
    Noise,
    Density,
}

impl DomainShift {
    pub const ALL: [DomainShift; 4] =
        [DomainShift::Clean, DomainShift::Occlusion, DomainShift::Noise, DomainShift::Density];

    pub fn name(self) -> &'static str {
        match self {
            DomainShift::Clean => "d0_clean",
            DomainShift::Occlusion => "d1_occluded",
            DomainShift::Noise => "d2_noisy",
            DomainShift::Density => "d3_density",
        }
    }
}

/// Cutting plane of an occluded cloud; kept points satisfy `normal·p <= offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Point,
    pub offset: f64,
}

impl Plane {
    pub fn side(&self, p: &Point) -> f64 {
        self.normal[0] * p[0] + self.normal[1] * p[1] + self.normal[2] * p[2] - self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCloud {
    pub points: Vec<Point>,
    pub plane: Option<Plane>,
}

#[derive(Debug, Clone, Copy)]
enum Part {
    /// Axis-aligned box surface: center, half extents.
    Cuboid { c: Point, e: Point },
    /// Open vertical cylinder: base center, radius, height.
    Cylinder { c: Point, r: f64, h: f64 },
    /// Horizontal disk.
    Disk { c: Point, r: f64 },
    /// Open vertical cone frustum from radius r0 at the base to r1 at the top.
    Frustum { c: Point, r0: f64, r1: f64, h: f64 },
    /// Superellipsoid with half axes `a` and shape exponent `eps`.
    Superellipsoid { c: Point, a: Point, eps: f64 },
}

impl Part {
    fn area(&self) -> f64 {
        match *self {
            Part::Cuboid { e, .. } => 8.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]),
            Part::Cylinder { r, h, .. } => 2.0 * PI * r * h,
            Part::Disk { r, .. } => PI * r * r,
            Part::Frustum { r0, r1, h, .. } => PI * (r0 + r1) * ((r0 - r1).powi(2) + h * h).sqrt(),
            // Rough estimate; only used to weight against other parts.
            Part::Superellipsoid { a, .. } => 4.0 * PI * ((a[0] * a[1] + a[1] * a[2] + a[0] * a[2]) / 3.0),
        }
    }

    fn sample(&self, rng: &mut Rng) -> Point {
        match *self {
            Part::Cuboid { c, e } => {
                let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
                let total: f64 = areas.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut axis = 2;
                for (k, a) in areas.iter().enumerate() {
                    if u < *a {
                        axis = k;
                        break;
                    }
                    u -= a;
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = if k == axis {
                        c[k] + sign * e[k]
                    } else {
                        c[k] + (2.0 * rng.random::<f64>() - 1.0) * e[k]
                    };
                }
                p
            }
            Part::Cylinder { c, r, h } => {
                let t = 2.0 * PI * rng.random::<f64>();
                [c[0] + r * t.cos(), c[1] + r * t.sin(), c[2] + h * rng.random::<f64>()]
            }
            Part::Disk { c, r } => {
                let t = 2.0 * PI * rng.random::<f64>();
                let rr = r * rng.random::<f64>().sqrt();
                [c[0] + rr * t.cos(), c[1] + rr * t.sin(), c[2]]
            }
            Part::Frustum { c, r0, r1, h } => {
                let u = rng.random::<f64>();
                // Density along the slant grows linearly with the radius.
                let s = if (r1 - r0).abs() < 1e-12 {
                    u
                } else {
                    ((r0 * r0 + u * (r1 * r1 - r0 * r0)).sqrt() - r0) / (r1 - r0)
                };
                let r = r0 + (r1 - r0) * s;
                let t = 2.0 * PI * rng.random::<f64>();
                [c[0] + r * t.cos(), c[1] + r * t.sin(), c[2] + h * s]
            }
            Part::Superellipsoid { c, a, eps } => {
                let eta = PI * (rng.random::<f64>() - 0.5);
                let omega = 2.0 * PI * rng.random::<f64>() - PI;
                let sp = |v: f64| v.signum() * v.abs().powf(eps);
                [
                    c[0] + a[0] * sp(eta.cos()) * sp(omega.cos()),
                    c[1] + a[1] * sp(eta.cos()) * sp(omega.sin()),
                    c[2] + a[2] * sp(eta.sin()),
                ]
            }
        }
    }
}

fn jit(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn legs(w: f64, d: f64, inset: f64, r: f64, h: f64) -> [Part; 4] {
    let (x, y) = (w / 2.0 - inset, d / 2.0 - inset);
    [(x, y), (-x, y), (x, -y), (-x, -y)].map(|(px, py)| Part::Cylinder { c: [px, py, 0.0], r, h })
}

fn parts(class: ShapeClass, rng: &mut Rng) -> Vec<Part> {
    match class {
        ShapeClass::Box => {
            let (w, d, h) = (jit(rng, 0.6, 0.9), jit(rng, 0.4, 0.6), jit(rng, 0.9, 1.3));
            vec![Part::Cuboid { c: [0.0, 0.0, h / 2.0], e: [w / 2.0, d / 2.0, h / 2.0] }]
        }
        ShapeClass::ChairFrame => {
            let (w, d) = (jit(rng, 0.45, 0.6), jit(rng, 0.45, 0.6));
            let hs = jit(rng, 0.4, 0.5);
            let hb = jit(rng, 0.4, 0.6);
            let t = 0.03;
            let mut v = vec![
                Part::Cuboid { c: [0.0, 0.0, hs], e: [w / 2.0, d / 2.0, t] },
                Part::Cuboid { c: [0.0, -d / 2.0 + t, hs + hb / 2.0], e: [w / 2.0, t, hb / 2.0] },
            ];
            v.extend(legs(w, d, 0.04, 0.025, hs));
            v
        }
        ShapeClass::PoleWithShade => {
            let base_r = jit(rng, 0.15, 0.25);
            let h = jit(rng, 0.9, 1.3);
            let (r0, r1) = (jit(rng, 0.25, 0.35), jit(rng, 0.1, 0.18));
            let sh = jit(rng, 0.22, 0.3);
            vec![
                Part::Disk { c: [0.0, 0.0, 0.0], r: base_r },
                Part::Cylinder { c: [0.0, 0.0, 0.0], r: 0.02, h },
                Part::Frustum { c: [0.0, 0.0, h - 0.6 * sh], r0, r1, h: sh },
            ]
        }
        ShapeClass::RoundedSlab => {
            let a = [jit(rng, 0.9, 1.2), jit(rng, 0.4, 0.5), jit(rng, 0.25, 0.35)];
            vec![Part::Superellipsoid { c: [0.0, 0.0, a[2]], a, eps: jit(rng, 0.3, 0.45) }]
        }
        ShapeClass::PlaneOnLegs => {
            let (w, d, h) = (jit(rng, 0.9, 1.3), jit(rng, 0.6, 0.9), jit(rng, 0.6, 0.8));
            let mut v = vec![Part::Cuboid { c: [0.0, 0.0, h], e: [w / 2.0, d / 2.0, 0.02] }];
            v.extend(legs(w, d, 0.06, 0.03, h));
            v
        }
    }
}

/// `n` surface points of a freshly parameterised, randomly rotated shape.
pub fn sample_surface(class: ShapeClass, n: usize, rng: &mut Rng) -> Vec<Point> {
    let parts = parts(class, rng);
    let theta = 2.0 * PI * rng.random::<f64>();
    let (s, c) = theta.sin_cos();
    let areas: Vec<f64> = parts.iter().map(Part::area).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            let mut idx = parts.len() - 1;
            for (k, a) in areas.iter().enumerate() {
                if u < *a {
                    idx = k;
                    break;
                }
                u -= a;
            }
            let p = parts[idx].sample(rng);
            [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
        })
        .collect()
}

pub fn add_gaussian_noise(points: &[Point], sigma: f64, rng: &mut Rng) -> Vec<Point> {
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    points.iter().map(|p| p.map(|v| v + normal.sample(rng))).collect()
}

fn quantize(points: &mut [Point]) {
    for p in points {
        for v in p.iter_mut() {
            *v = (*v * 1e6).round() / 1e6;
        }
    }
}

/// One cloud of `class` under `shift`. The dense pool is drawn first, so two
/// calls with identically seeded streams share the same underlying surface.
pub fn generate_cloud(class: ShapeClass, shift: DomainShift, rng: &mut Rng) -> GeneratedCloud {
    let pool = sample_surface(class, POOL_SIZE, rng);
    let mut plane = None;
    let mut points = match shift {
        DomainShift::Clean => pool[..POINTS_PER_CLOUD].to_vec(),
        DomainShift::Noise => add_gaussian_noise(&pool[..POINTS_PER_CLOUD], NOISE_SIGMA, rng),
        DomainShift::Occlusion => {
            let mut n: Point = [0.0; 3];
            for v in n.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            let n = n.map(|v| v / len);
            let keep = jit(rng, 0.6, 0.8);
            let proj: Vec<f64> = pool.iter().map(|p| n[0] * p[0] + n[1] * p[1] + n[2] * p[2]).collect();
            let mut sorted = proj.clone();
            sorted.sort_by(f64::total_cmp);
            let k = ((keep * POOL_SIZE as f64).ceil() as usize).clamp(POINTS_PER_CLOUD, POOL_SIZE);
            let offset = sorted[k - 1];
            plane = Some(Plane { normal: n, offset });
            pool.iter()
                .zip(&proj)
                .filter(|(_, &s)| s <= offset)
                .map(|(p, _)| *p)
                .take(POINTS_PER_CLOUD)
                .collect()
        }
        DomainShift::Density => {
            let c = centroid(&pool);
            let octant: [bool; 3] = [rng.random(), rng.random(), rng.random()];
            let mut keyed: Vec<(f64, usize)> = pool
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let inside = (0..3).all(|k| (p[k] >= c[k]) == octant[k]);
                    let w = if inside { OCTANT_WEIGHT } else { 1.0 };
                    // Efraimidis–Spirakis weighted sampling without replacement.
                    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    (u.powf(1.0 / w), i)
                })
                .collect();
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut chosen: Vec<usize> = keyed[..POINTS_PER_CLOUD].iter().map(|k| k.1).collect();
            chosen.sort_unstable();
            chosen.into_iter().map(|i| pool[i]).collect()
        }
    };
    quantize(&mut points);
    GeneratedCloud { points, plane }
}

/// Per-split cloud counts for every class and domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seed: 7, train_per_class: 200, test_per_class: 50 }
    }
}

impl SynthConfig {
    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

pub fn sample_id(domain: DomainShift, split: Split, class: ShapeClass, index: usize) -> String {
    format!("{}-{}-{}-{index:05}", domain.name(), split, class.name())
}

pub(crate) fn format_xyz(points: &[Point]) -> String {
    let mut s = String::with_capacity(points.len() * 30);
    for p in points {
        writeln!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    s
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Writes the benchmark under `root`. Refuses a non-empty `root` unless
/// `force`, in which case the benchmark's own files are replaced.
pub fn generate_benchmark(root: &Path, cfg: &SynthConfig, force: bool) -> Result<Manifest, DataError> {
    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(io_err(root))?.next().is_some();
        if non_empty && !force {
            return Err(DataError::OutputNotEmpty(root.to_path_buf()));
        }
        for d in DomainShift::ALL {
            let p = root.join(d.name());
            if p.exists() {
                fs::remove_dir_all(&p).map_err(io_err(&p))?;
            }
        }
    }
    fs::create_dir_all(root).map_err(io_err(root))?;

    let mut counts = BTreeMap::new();
    for (di, domain) in DomainShift::ALL.into_iter().enumerate() {
        let mut per_split = BTreeMap::new();
        for (si, split) in Split::ALL.into_iter().enumerate() {
            let mut per_class = Vec::new();
            for (ci, class) in ShapeClass::ALL.into_iter().enumerate() {
                let dir = root.join(domain.name()).join(split.as_str()).join(class.name());
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let n = cfg.count(split);
                for i in 0..n {
                    let mut rng = stream(cfg.seed, &[tag::GENERATE, di as u64, si as u64, ci as u64, i as u64]);
                    let cloud = generate_cloud(class, domain, &mut rng);
                    let path = dir.join(format!("{}.xyz", sample_id(domain, split, class, i)));
                    fs::write(&path, format_xyz(&cloud.points)).map_err(io_err(&path))?;
                }
                per_class.push(n);
            }
            per_split.insert(split.as_str().to_string(), per_class);
        }
        counts.insert(domain.name().to_string(), per_split);
    }

    let manifest = Manifest {
        format_version: 1,
        domains: DomainShift::ALL.iter().map(|d| d.name().to_string()).collect(),
        classes: ShapeClass::ALL.iter().map(|c| c.name().to_string()).collect(),
        splits: Split::ALL.iter().map(|s| s.as_str().to_string()).collect(),
        counts,
        points_per_cloud: Some(POINTS_PER_CLOUD),
        generator_seed: Some(cfg.seed),
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}
