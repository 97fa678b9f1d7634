use plda_core::privacy::{
    self, account_fixed, dp_to_zcdp, forward_account, zcdp_to_dp, BudgetSpec, CompositionMethod,
    PrivacyError, ZcdpBudget,
};
use proptest::prelude::*;

fn spec(epsilon_tot: f64, iterations: u64, nu: f64, method: CompositionMethod) -> BudgetSpec {
    BudgetSpec {
        epsilon_tot,
        delta_tot: 1e-4,
        iterations,
        sampling_ratio: nu,
        sensitivity: 1.0,
        method,
    }
}

fn method() -> impl Strategy<Value = CompositionMethod> {
    prop::sample::select(CompositionMethod::PRIVATE.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn amplification_never_loosens(eps in 1e-6f64..10.0, delta in 1e-9f64..0.5, nu in 1e-4f64..=1.0) {
        let out = privacy::amplify(eps, delta, nu).unwrap();
        prop_assert!(out.epsilon <= eps * (1.0 + 1e-15));
        prop_assert!(out.delta <= delta);
    }

    #[test]
    fn amplified_epsilon_is_sandwiched(eps in 1e-6f64..5.0, nu in 1e-4f64..=1.0) {
        // ln(1 + nu (e^eps - 1)) lies between nu*eps and nu*(e^eps - 1).
        let out = privacy::amplify(eps, 0.0, nu).unwrap();
        prop_assert!(out.epsilon >= nu * eps * (1.0 - 1e-12));
        prop_assert!(out.epsilon <= nu * eps.exp_m1() * (1.0 + 1e-12));
    }

    #[test]
    fn amplify_inverts(eps in 1e-6f64..5.0, delta in 1e-9f64..1e-4, nu in 1e-3f64..=1.0) {
        let (e, d) = privacy::invert_amplify(eps, delta, nu).unwrap();
        let back = privacy::amplify(e, d, nu).unwrap();
        prop_assert!((back.epsilon / eps - 1.0).abs() < 1e-12);
        prop_assert!((back.delta / delta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zcdp_conversion_is_monotone(rho in 1e-6f64..10.0, scale in 1.0f64..4.0, delta in 1e-9f64..0.1) {
        let lo = zcdp_to_dp(ZcdpBudget { rho }, delta).unwrap().epsilon;
        let hi = zcdp_to_dp(ZcdpBudget { rho: rho * scale }, delta).unwrap().epsilon;
        prop_assert!(lo <= hi);
    }

    #[test]
    fn zcdp_conversion_round_trips(eps in 1e-3f64..10.0, delta in 1e-9f64..0.1) {
        let rho = dp_to_zcdp(eps, delta).unwrap();
        let back = zcdp_to_dp(rho, delta).unwrap().epsilon;
        prop_assert!((back - eps).abs() <= 1e-12 * eps.max(1.0));
    }

    #[test]
    fn sigma_shrinks_with_more_budget(
        eps in 0.1f64..2.0,
        extra in 1.01f64..3.0,
        iterations in 1u64..2000,
        nu in 0.01f64..=1.0,
        m in method(),
    ) {
        let tight = privacy::solve_budget(&spec(eps, iterations, nu, m)).unwrap().sigma;
        let loose = privacy::solve_budget(&spec(eps * extra, iterations, nu, m)).unwrap().sigma;
        prop_assert!(loose <= tight);
    }

    #[test]
    fn sigma_grows_with_iterations(
        eps in 0.1f64..2.0,
        iterations in 1u64..2000,
        more in 1u64..2000,
        nu in 0.01f64..=1.0,
        m in method(),
    ) {
        let few = privacy::solve_budget(&spec(eps, iterations, nu, m)).unwrap().sigma;
        let many = privacy::solve_budget(&spec(eps, iterations + more, nu, m)).unwrap().sigma;
        prop_assert!(many >= few);
    }

    #[test]
    fn solved_budget_accounts_within_total(
        eps in 0.1f64..2.0,
        iterations in 1u64..500,
        nu in 0.01f64..=1.0,
        m in method(),
    ) {
        let s = spec(eps, iterations, nu, m);
        let budget = privacy::solve_budget(&s).unwrap();
        let ledger = account_fixed(m, iterations, 1.0, &budget, nu, s.delta_tot).unwrap();
        let total = forward_account(&ledger).unwrap();
        prop_assert!(total.epsilon <= eps * (1.0 + 1e-6));
        prop_assert!(total.delta <= s.delta_tot * (1.0 + 1e-6));
        prop_assert_eq!(ledger.len() as u64, iterations);
    }
}

#[test]
fn unamplifiable_tolerance_is_reported() {
    let err = privacy::invert_amplify(0.5, 1e-3, 1e-4).unwrap_err();
    assert!(matches!(err, PrivacyError::ToleranceNotAmplifiable { .. }));
}

#[test]
fn no_privacy_has_no_budget() {
    let err = privacy::solve_budget(&spec(1.0, 10, 0.1, CompositionMethod::None)).unwrap_err();
    assert!(matches!(err, PrivacyError::NoPrivacy));
}
