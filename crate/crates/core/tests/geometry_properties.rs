use mvot::geometry::{build_covariance, closest_camera, min_max_normalize, Camera, DistanceMode};
use nalgebra::{Matrix2, Point2, Rotation2, Vector2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn covariance_is_spd_with_sigma1_along_the_ray(
        beta in -4.0f64..4.0,
        s1 in 0.01f64..50.0,
        s2 in 0.01f64..50.0,
    ) {
        let cov = build_covariance(beta, s1, s2).unwrap();
        prop_assert!((cov.s - cov.s.transpose()).abs().max() == 0.0);
        let eig = cov.s.symmetric_eigenvalues();
        prop_assert!(eig.iter().all(|e| *e > 0.0));
        let u = Vector2::new(beta.cos(), beta.sin());
        prop_assert!((u.dot(&(cov.s * u)) - s1).abs() <= 1e-9 * s1.max(1.0));
        let w = Vector2::new(-beta.sin(), beta.cos());
        prop_assert!((w.dot(&(cov.s * w)) - s2).abs() <= 1e-9 * s2.max(1.0));
        let id = cov.s * cov.s_inv;
        prop_assert!((id - Matrix2::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn normalization_is_idempotent(mut ds in prop::collection::vec(0.0f64..100.0, 2..20)) {
        ds[0] = 0.0;
        ds[1] = 1.0;
        let once = min_max_normalize(&ds).unwrap();
        let normalized: Vec<f64> = ds.iter().map(|d| d.min(1.0)).collect();
        let n1 = min_max_normalize(&normalized).unwrap();
        prop_assert_eq!(min_max_normalize(&n1).unwrap(), n1.clone());
        prop_assert!(once.iter().all(|v| (0.0..=1.0).contains(v)));
        for (a, b) in ds.iter().zip(&once) {
            for (c, d) in ds.iter().zip(&once) {
                if a < c {
                    prop_assert!(b <= d);
                }
            }
        }
    }
}

#[test]
fn isotropic_covariance_is_scaled_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let beta = rng.random_range(-10.0..10.0);
        let s = rng.random_range(0.1..10.0);
        let cov = build_covariance(beta, s, s).unwrap();
        assert!((cov.s - Matrix2::identity() * s).abs().max() <= 1e-12);
    }
}

#[test]
fn closest_camera_is_invariant_under_rigid_motions() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let cams: Vec<Camera> = (0..rng.random_range(2..=6))
            .map(|k| Camera::new(k, rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(0.0..30.0)))
            .collect();
        let p = Point2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let rot = Rotation2::new(rng.random_range(-3.2..3.2));
        let shift = Vector2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let moved: Vec<Camera> = cams
            .iter()
            .map(|c| {
                let g = rot * c.ground() + shift;
                Camera::new(c.id, g.x, g.y, c.height())
            })
            .collect();
        let p2 = rot * p + shift;
        for mode in [DistanceMode::Ground2d, DistanceMode::Full3d] {
            assert_eq!(closest_camera(&cams, &p, mode).unwrap(), closest_camera(&moved, &p2, mode).unwrap());
        }
    }
}
