use bcm_analysis::*;
use proptest::prelude::*;

proptest! {
    #[test]
    fn tail_plus_head_is_one(k in 0u64..60, mu in 0.0f64..40.0) {
        let head: f64 = (0..k).map(|i| poisson_pmf(i, mu)).sum();
        prop_assert!((poisson_tail(k, mu) + head - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tail_monotone_in_mean(k in 1u64..20, a in 0.0f64..30.0, d in 0.01f64..10.0) {
        prop_assert!(poisson_tail(k, a + d) >= poisson_tail(k, a));
    }

    #[test]
    fn tail_monotone_in_k(k in 0u64..40, mu in 0.0f64..30.0) {
        prop_assert!(poisson_tail(k + 1, mu) <= poisson_tail(k, mu));
    }

    #[test]
    fn joint_is_product(c in proptest::array::uniform4(0u64..15), m in proptest::array::uniform4(0.0f64..12.0)) {
        let direct = poisson_pmf(c[0], m[0]) * poisson_pmf(c[1], m[1]) * poisson_pmf(c[2], m[2]) * poisson_pmf(c[3], m[3]);
        prop_assert_eq!(joint_event_prob(c, m), direct);
    }

    #[test]
    fn fig7_increases_with_rate(k in 1u64..12) {
        let rates: Vec<f64> = (0..=16).map(|l| l as f64).collect();
        let t = emit_fig7_sweep(&rates, &[k]);
        for w in t.rows[0].windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
    }
}
