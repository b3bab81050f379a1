use std::f64::consts::PI;

use ccrk::geometry::{
    lemma_sweep, omega_angle, sample_at, sample_triple, sweep_grid, theta_angle, write_sweep_csv,
    AngleSample, Lemma, OmegaTarget, SamplingMode, TripleConfig,
};
use ccrk::numerics::{mat_vec, random_rotation, SeededRng};
use proptest::prelude::*;

fn polar(deg: f64) -> Vec<f64> {
    let r = deg.to_radians();
    vec![r.cos(), r.sin()]
}

/// Planar angle between two 2-D vectors via their polar angles.
fn planar_angle(a: &[f64], b: &[f64]) -> f64 {
    let d = (a[1].atan2(a[0]) - b[1].atan2(b[0])).abs();
    if d > PI {
        2.0 * PI - d
    } else {
        d
    }
}

#[test]
fn theta_plane_example() {
    let t_n = polar(0.0);
    let t_m = polar(60.0);
    let i = polar(90.0);
    let th = theta_angle(&i, &t_m, &t_n).unwrap();
    assert!((th - 15f64.to_radians()).abs() < 1e-12);
    let oracle = planar_angle(&[t_m[0] - t_n[0], t_m[1] - t_n[1]], &[i[0] - t_n[0], i[1] - t_n[1]]);
    assert!((th - oracle).abs() < 1e-12);
}

#[test]
fn omega_plane_example() {
    let i = polar(0.0);
    let t_m = polar(90.0);
    let t_n = polar(30.0);
    let om = omega_angle(&i, &t_m, &t_n, OmegaTarget::M).unwrap();
    assert!((om - 15f64.to_radians()).abs() < 1e-12);
}

#[test]
fn boundary_identities() {
    let mut rng = SeededRng::new(0);
    for d in [2, 3, 16, 64] {
        for _ in 0..20 {
            let a = rng.unit_vector(d);
            let b = rng.unit_vector(d);
            let c = rng.unit_vector(d);
            assert_eq!(theta_angle(&a, &a, &b).unwrap(), 0.0);
            assert_eq!(omega_angle(&c, &a, &a, OmegaTarget::M).unwrap(), 0.0);
            assert_eq!(omega_angle(&c, &a, &a, OmegaTarget::N).unwrap(), 0.0);
        }
    }
    // Antipodal texts with the image on one of them.
    let t_n = vec![1.0, 0.0, 0.0];
    let t_m = vec![-1.0, 0.0, 0.0];
    assert_eq!(theta_angle(&t_m, &t_m, &t_n).unwrap(), 0.0);
}

#[test]
fn degenerate_inputs_are_errors() {
    let a = vec![1.0, 0.0];
    let b = vec![0.0, 1.0];
    assert!(matches!(theta_angle(&a, &b, &b), Err(ccrk::Error::DegenerateDirection)));
    assert!(matches!(
        omega_angle(&b, &a, &[-1.0, 0.0], OmegaTarget::M),
        Err(ccrk::Error::AntipodalTexts)
    ));
}

#[test]
fn omega_targets_agree_when_symmetric() {
    // Texts mirrored about the plane holding the image, so alpha = beta.
    let lift = |v: Vec<f64>| vec![v[0], v[1], 0.0];
    let i = vec![0.6, 0.0, 0.8];
    for half in [5.0, 20.0, 60.0] {
        let (t_m, t_n) = (lift(polar(half)), lift(polar(-half)));
        let a = omega_angle(&i, &t_m, &t_n, OmegaTarget::M).unwrap();
        let b = omega_angle(&i, &t_m, &t_n, OmegaTarget::N).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn fixed_angle_triples_hit_their_angles() {
    let mut rng = SeededRng::new(3);
    let cfg = TripleConfig {
        dim: 8,
        alpha: 0.7,
        beta: 1.1,
        gamma: 0.9,
        mode: SamplingMode::FixedAngles,
    };
    for _ in 0..10 {
        let [i, t_m, t_n] = sample_triple(&cfg, &mut rng).unwrap();
        let s = AngleSample::measure(&i, &t_m, &t_n);
        assert!((s.alpha - 0.7).abs() < 1e-9);
        assert!((s.beta - 1.1).abs() < 1e-9);
        assert!((s.gamma - 0.9).abs() < 1e-9);
    }
    let bad = TripleConfig { gamma: 2.5, ..cfg };
    assert!(sample_triple(&bad, &mut rng).is_err());
}

#[test]
fn controlled_angle_is_exact() {
    let mut rng = SeededRng::new(4);
    for s in sample_at(Lemma::Theta, 0.3, 10, 50, &mut rng).unwrap() {
        assert!((s.alpha - 0.3).abs() < 1e-9);
    }
    for s in sample_at(Lemma::Omega, 0.01, 10, 50, &mut rng).unwrap() {
        assert!((s.gamma - 0.01).abs() < 1e-9);
    }
}

#[test]
fn sweeps_decrease_and_vanish() {
    for lemma in [Lemma::Theta, Lemma::Omega] {
        let rows = lemma_sweep(lemma, 16, 2000, 7).unwrap();
        assert_eq!(rows.len(), sweep_grid().len());
        for w in rows.windows(2) {
            assert!(w[1].controlled_angle_rad < w[0].controlled_angle_rad);
            assert!(w[1].mean_rad < w[0].mean_rad, "{lemma:?}: {w:?}");
        }
        let last = rows.last().unwrap();
        assert_eq!(last.controlled_angle_rad, 0.0);
        assert_eq!(last.mean_rad, 0.0);
        assert_eq!(last.p95_rad, 0.0);
        for r in &rows {
            assert!(r.p5_rad <= r.p95_rad);
            assert!((0.0..=PI).contains(&r.mean_rad));
        }
    }
}

#[test]
fn sweep_is_reproducible_and_serializes() {
    let a = lemma_sweep(Lemma::Theta, 6, 100, 1).unwrap();
    let b = lemma_sweep(Lemma::Theta, 6, 100, 1).unwrap();
    assert_eq!(a, b);
    let mut buf = Vec::new();
    write_sweep_csv(&a, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "controlled_angle_rad,mean_rad,p5_rad,p95_rad,n_samples,seed"
    );
    assert_eq!(lines.count(), a.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn angles_survive_rotation(seed in any::<u64>(), d in 2usize..12) {
        let mut rng = SeededRng::new(seed);
        let (i, t_m, t_n) = (rng.unit_vector(d), rng.unit_vector(d), rng.unit_vector(d));
        let r = random_rotation(d, &mut rng).unwrap();
        let (ri, rm, rn) = (mat_vec(&r, &i), mat_vec(&r, &t_m), mat_vec(&r, &t_n));
        let a = theta_angle(&i, &t_m, &t_n).unwrap();
        let b = theta_angle(&ri, &rm, &rn).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
        for target in [OmegaTarget::M, OmegaTarget::N] {
            let a = omega_angle(&i, &t_m, &t_n, target).unwrap();
            let b = omega_angle(&ri, &rm, &rn, target).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn angles_lie_in_range(seed in any::<u64>(), d in 2usize..12) {
        let mut rng = SeededRng::new(seed);
        let (i, t_m, t_n) = (rng.unit_vector(d), rng.unit_vector(d), rng.unit_vector(d));
        let s = AngleSample::measure(&i, &t_m, &t_n);
        for x in [Some(s.alpha), Some(s.beta), Some(s.gamma), s.theta, s.omega].into_iter().flatten() {
            prop_assert!((0.0..=PI).contains(&x));
        }
    }
}
