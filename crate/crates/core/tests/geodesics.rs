use geocalc::geodesic::{expand3, log_map, shoot, GeodesicExpansion};
use geocalc::manifold::ManifoldSpec;
use proptest::prelude::*;

const TOL: f64 = 1e-12;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sphere_log_inverts_shoot(theta in 0.6f64..2.5, phi in -3.0f64..3.0, vt in -0.4f64..0.4, vp in -0.4f64..0.4) {
        let m = ManifoldSpec::unit_sphere();
        let x0 = [theta, phi];
        let s = shoot(&m, &x0, &[vt, vp], 1.0, TOL).unwrap();
        prop_assume!(m.contains(&s.point));
        let v = log_map(&m, &x0, &s.point, TOL).unwrap();
        prop_assert!(close(&v, &[vt, vp], 1e-7), "{v:?}");
    }

    #[test]
    fn speed_is_conserved(x in -1.0f64..1.0, y in 0.5f64..2.0, vx in -0.5f64..0.5, vy in -0.5f64..0.5) {
        let m = ManifoldSpec::poincare_half_plane();
        let s = shoot(&m, &[x, y], &[vx, vy], 1.0, TOL).unwrap();
        let before = m.norm(&[x, y], &[vx, vy]).unwrap();
        let after = m.norm(&s.point, &s.velocity).unwrap();
        prop_assert!((before - after).abs() < 1e-9 * (1.0 + before));
    }

    #[test]
    fn geodesics_have_length_equal_to_speed(x in -1.0f64..1.0, y in 0.5f64..2.0, vx in -0.3f64..0.3, vy in -0.3f64..0.3) {
        let m = ManifoldSpec::poincare_half_plane();
        let s = shoot(&m, &[x, y], &[vx, vy], 1.0, TOL).unwrap();
        let (x1, y1) = (s.point[0], s.point[1]);
        let d = (1.0 + ((x1 - x).powi(2) + (y1 - y).powi(2)) / (2.0 * y * y1)).acosh();
        prop_assert!((d - m.norm(&[x, y], &[vx, vy]).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn flat_expansion_is_the_straight_line(x in -2.0f64..2.0, y in -2.0f64..2.0, vx in -1.0f64..1.0, vy in -1.0f64..1.0) {
        let m = ManifoldSpec::euclidean(2);
        let e = expand3(&m, &GeodesicExpansion::new(vec![x, y], vec![vx, vy], 3)).unwrap();
        prop_assert_eq!(e.point, vec![x + vx, y + vy]);
    }
}

#[test]
fn reversing_time_retraces_the_geodesic() {
    let m = ManifoldSpec::unit_sphere();
    let x0 = [1.0, 0.5];
    let fwd = shoot(&m, &x0, &[0.3, 0.7], 1.0, TOL).unwrap();
    let back = shoot(&m, &fwd.point, &fwd.velocity, -1.0, TOL).unwrap();
    assert!(close(&back.point, &x0, 1e-10), "{:?}", back.point);
}
