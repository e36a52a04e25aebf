use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{centroid, dist2, norm, DataError, Point, PointCloud};
use crate::rng::Rng;

/// Per-coordinate Gaussian jitter, clipped to `±clip`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterConfig {
    pub sigma: f64,
    pub clip: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self { sigma: 0.01, clip: 0.05 }
    }
}

/// Centers on the centroid and scales to unit max norm.
pub fn normalize(points: &[Point], sample_id: &str) -> Result<Vec<Point>, DataError> {
    let c = centroid(points);
    let centered: Vec<Point> =
        points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let radius = centered.iter().map(norm).fold(0.0, f64::max);
    if !(radius > 1e-12) {
        return Err(DataError::Degenerate(sample_id.to_string()));
    }
    Ok(centered.into_iter().map(|p| p.map(|v| v / radius)).collect())
}

pub fn add_jitter(points: &mut [Point], cfg: JitterConfig, rng: &mut Rng) {
    if cfg.sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, cfg.sigma).expect("positive sigma");
    for p in points.iter_mut() {
        for v in p.iter_mut() {
            *v += normal.sample(rng).clamp(-cfg.clip, cfg.clip);
        }
    }
}

/// Normalization for every split; jitter only when `train` is set.
pub fn normalize_and_jitter(
    cloud: &PointCloud,
    train: bool,
    cfg: JitterConfig,
    rng: &mut Rng,
) -> Result<PointCloud, DataError> {
    if cfg.sigma < 0.0 {
        return Err(DataError::Format(format!("jitter sigma must be >= 0, got {}", cfg.sigma)));
    }
    let mut points = normalize(&cloud.points, &cloud.sample_id)?;
    if train {
        add_jitter(&mut points, cfg, rng);
    }
    Ok(PointCloud { points, ..cloud.clone() })
}

/// Greedy nearest-neighbour assignment: each point of `a`, in index order,
/// takes the closest unclaimed point of `b` (ties to the lower index).
fn greedy_pairing(a: &[Point], b: &[Point]) -> Vec<usize> {
    let mut used = vec![false; b.len()];
    a.iter()
        .map(|p| {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (j, q) in b.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let d = dist2(p, q);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            used[best] = true;
            best
        })
        .collect()
}

/// Mixes two clouds and their label distributions with ratio `lambda`.
///
/// Points are paired by [`greedy_pairing`] and interpolated; the soft label
/// is `lambda·label_a + (1−lambda)·label_b`. When the clouds differ in
/// size, `b` is resampled to `a`'s point count by even striding.
pub fn pointmix(
    a: &PointCloud,
    b: &PointCloud,
    lambda: f64,
    label_a: &[f64],
    label_b: &[f64],
) -> (PointCloud, Vec<f64>) {
    let lambda = lambda.clamp(0.0, 1.0);
    let resampled: Vec<Point>;
    let b_points: &[Point] = if b.len() == a.len() {
        &b.points
    } else {
        resampled = (0..a.len()).map(|i| b.points[i * b.len() / a.len()]).collect();
        &resampled
    };
    let pairing = greedy_pairing(&a.points, b_points);
    let points = a
        .points
        .iter()
        .zip(&pairing)
        .map(|(p, &j)| {
            let q = b_points[j];
            [
                lambda * p[0] + (1.0 - lambda) * q[0],
                lambda * p[1] + (1.0 - lambda) * q[1],
                lambda * p[2] + (1.0 - lambda) * q[2],
            ]
        })
        .collect();
    let label = label_a.iter().zip(label_b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
    let cloud = PointCloud {
        points,
        class_id: if lambda >= 0.5 { a.class_id } else { b.class_id },
        domain_id: a.domain_id,
        sample_id: format!("{}+{}", a.sample_id, b.sample_id),
    };
    (cloud, label)
}

/// Mixing ratio drawn from Beta(1, 1).
pub(crate) fn sample_lambda(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn cloud(points: Vec<Point>, class_id: usize) -> PointCloud {
        PointCloud { points, class_id, domain_id: 0, sample_id: format!("c{class_id}") }
    }

    fn random_cloud(seed: u64, n: usize) -> Vec<Point> {
        let mut rng = stream(seed, &[0]);
        (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect()
    }

    #[test]
    fn already_unit_centered_is_unchanged() {
        let c = cloud(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]], 0);
        let out = normalize_and_jitter(&c, false, JitterConfig::default(), &mut stream(0, &[])).unwrap();
        assert_eq!(out.points, c.points);
    }

    #[test]
    fn normalization_contract() {
        let pts: Vec<Point> = random_cloud(3, 200).into_iter().map(|p| p.map(|v| 5.0 * v + 2.0)).collect();
        let out = normalize(&pts, "x").unwrap();
        let c = centroid(&out);
        assert!(c.iter().all(|v| v.abs() < 1e-9));
        let r = out.iter().map(norm).fold(0.0, f64::max);
        assert!((r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_cloud_is_error() {
        let c = cloud(vec![[0.3, 0.3, 0.3]; 70], 0);
        assert!(matches!(
            normalize_and_jitter(&c, false, JitterConfig::default(), &mut stream(0, &[])),
            Err(DataError::Degenerate(_))
        ));
    }

    #[test]
    fn test_split_ignores_sigma() {
        let c = cloud(random_cloud(1, 100), 0);
        let a = normalize_and_jitter(&c, false, JitterConfig { sigma: 0.0, clip: 0.05 }, &mut stream(1, &[])).unwrap();
        let b = normalize_and_jitter(&c, false, JitterConfig { sigma: 0.5, clip: 0.05 }, &mut stream(2, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jitter_is_clipped() {
        let base = normalize(&random_cloud(4, 500), "x").unwrap();
        let mut pts = base.clone();
        add_jitter(&mut pts, JitterConfig { sigma: 1.0, clip: 0.05 }, &mut stream(5, &[]));
        for (p, q) in pts.iter().zip(&base) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() <= 0.05 + 1e-15);
            }
        }
    }

    #[test]
    fn pointmix_endpoints() {
        let a = cloud(random_cloud(6, 64), 0);
        let b = cloud(random_cloud(7, 64), 1);
        let (ya, yb) = (vec![1.0, 0.0], vec![0.0, 1.0]);
        let (m, y) = pointmix(&a, &b, 1.0, &ya, &yb);
        assert_eq!(m.points, a.points);
        assert_eq!(y, ya);

        let (m, y) = pointmix(&a, &b, 0.0, &ya, &yb);
        assert_eq!(y, yb);
        let mut got = m.points.clone();
        let mut want = b.points.clone();
        got.sort_by(|p, q| p.partial_cmp(q).unwrap());
        want.sort_by(|p, q| p.partial_cmp(q).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn pointmix_fixed_point() {
        let a = cloud(random_cloud(8, 64), 2);
        let (m, _) = pointmix(&a, &a.clone(), 0.5, &[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0]);
        assert_eq!(m.points, a.points);
    }

    #[test]
    fn pointmix_resamples_unequal_sizes() {
        let a = cloud(random_cloud(9, 80), 0);
        let b = cloud(random_cloud(10, 100), 1);
        let (m, _) = pointmix(&a, &b, 0.3, &[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(m.len(), 80);
    }

    proptest! {
        #[test]
        fn pointmix_preserves_count_and_simplex(lambda in 0.0f64..=1.0, seed in 0u64..1000, n in 64usize..96) {
            let a = cloud(random_cloud(seed, n), 0);
            let b = cloud(random_cloud(seed + 1, n + seed as usize % 7), 3);
            let ya = vec![1.0, 0.0, 0.0, 0.0];
            let yb = vec![0.0, 0.0, 0.0, 1.0];
            let (m, y) = pointmix(&a, &b, lambda, &ya, &yb);
            prop_assert_eq!(m.len(), n);
            prop_assert!(y.iter().all(|&v| v >= 0.0));
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
