use approx::assert_relative_eq;
use bdflow::functionals::{c_n, varphi_tilde};
use bdflow::state::{momentum_from_velocity, velocity_from_momentum};
use bdflow::{Field, Grid};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn field(dim: usize, n: usize, comps: usize, modes: usize, seed: u64) -> Field {
    let g = Grid::new(dim, n).unwrap();
    Field::random_smooth(&g, comps, modes, 0.8, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn projection_is_idempotent_and_self_adjoint(dim in 1usize..=2, m in 1usize..=4, seed in any::<u64>()) {
        let f = field(dim, 16, 2, 7, seed);
        let h = field(dim, 16, 2, 7, seed ^ 0x5eed);
        let p = f.project(m).unwrap();
        prop_assert!(p.project(m).unwrap().sub(&p).max_abs() < 1e-12);
        let lhs = p.inner_product(&h).unwrap();
        let rhs = f.inner_product(&h.project(m).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn parseval_holds(dim in 1usize..=3, seed in any::<u64>()) {
        let n = if dim == 3 { 8 } else { 16 };
        let f = field(dim, n, 1, 2, seed);
        let mean_sq = f.map(|v| v * v).integral();
        prop_assert!((mean_sq - f.forward().energy()).abs() <= 1e-12 * mean_sq.max(1e-300));
    }

    #[test]
    fn transform_round_trip(dim in 1usize..=2, seed in any::<u64>()) {
        let f = field(dim, 16, 3, 5, seed);
        let back = f.forward().inverse();
        prop_assert!(back.sub(&f).max_abs() < 1e-13 * (1.0 + f.max_abs()));
    }

    #[test]
    fn gram_round_trip(seed in any::<u64>(), floor in 0.05f64..1.0) {
        let m = 4;
        let r = field(1, 16, 1, m, seed);
        let (lo, hi) = (r.min_value(), r.max_value());
        // affine map of a band-limited field stays band-limited
        let rho = r.map(|v| floor + (v - lo) / (hi - lo + 1e-12));
        let u = field(1, 16, 1, m, seed ^ 7);
        let q = momentum_from_velocity(&rho, &u, m).unwrap();
        let back = velocity_from_momentum(&rho, &q, m, 1e-13).unwrap();
        prop_assert!(back.sub(&u).max_abs() < 1e-8 * (1.0 + u.max_abs()) / floor);
    }

    #[test]
    fn varphi_tilde_is_monotone_and_below_untruncated(y in 0.0f64..1e4, n in 1.0f64..100.0) {
        let t = varphi_tilde(y, n);
        prop_assert!(t.d1 >= -1e-12);
        prop_assert!(t.value <= (1.0 + y) * (1.0 + y).ln() * (1.0 + 1e-12) + 1e-12);
        prop_assert!(t.value >= 0.0);
        prop_assert!(t.value <= varphi_tilde(c_n(n) * 2.0, n).value * (1.0 + 1e-12));
    }
}

#[test]
fn varphi_tilde_matches_untruncated_below_n() {
    for y in [0.0, 0.5, 3.0, 9.99] {
        let t = varphi_tilde(y, 10.0);
        assert_relative_eq!(t.value, (1.0 + y) * (1.0f64 + y).ln(), max_relative = 1e-15);
    }
}
