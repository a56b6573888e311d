use interference_core::discovery::{fisher_z_test, kernel_ci_test, Columns, KernelOptions};
use interference_core::estimators::{estimate_table, EstimateOptions, Estimator, NuisanceSpec};
use interference_core::models::Design;
use interference_core::models::{
    fit_logistic, fit_propensity, FeatureSetSpec, FeatureVariant, LogisticOptions, ModelParams, ModelSpec,
    PropensityMode, PropensityOptions, PropensityScore,
};
use interference_core::rng::stream;
use interference_core::sem::simulate_traced;
use interference_core::{Dataset, SemConfig};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn config(m: usize, p: usize, coefs: &[f64], lambda_u: f64, eps_pos: f64, seed: u64) -> SemConfig {
    let mut it = coefs.iter().cycle().copied();
    let mut c = SemConfig::null(m, p, seed);
    c.lambda_u = lambda_u;
    c.beta0 = it.next().unwrap();
    c.delta = (0..m).map(|_| it.next().unwrap()).collect();
    c.gamma = (0..p).map(|_| it.next().unwrap()).collect();
    c.eta = (0..p).map(|_| it.next().unwrap()).collect();
    c.self_weight = (0..p).map(|_| it.next().unwrap()).collect();
    c.w_prop = (0..=m).map(|_| (0..m * p).map(|_| 2.0 * it.next().unwrap()).collect()).collect();
    c.eps_pos = eps_pos;
    c
}

fn sem_strategy() -> impl Strategy<Value = SemConfig> {
    (1usize..4, 1usize..3, proptest::collection::vec(-1.0f64..1.0, 40), 0.0f64..1.0, 0.001f64..0.1, any::<u64>())
        .prop_map(|(m, p, coefs, lu, eps, seed)| config(m, p, &coefs, lu, eps, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulation_respects_positivity_and_consistency(cfg in sem_strategy()) {
        let (d, traces) = simulate_traced(&cfg, 300).unwrap();
        for (pv, tr) in d.pageviews().iter().zip(&traces) {
            let min_p = tr.rule_probs.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(min_p >= cfg.eps_pos * (1.0 - 1e-12));
            prop_assert!((tr.rule_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..cfg.m {
                prop_assert_eq!(cfg.click_probability(tr.u, &pv.x, &pv.a, i), tr.click_probs[i]);
            }
        }
    }

    #[test]
    fn fitted_propensities_are_distributions(cfg in sem_strategy(), product in any::<bool>()) {
        let d = simulate_traced(&cfg, 600).unwrap().0;
        let opts = PropensityOptions {
            mode: if product { PropensityMode::Product } else { PropensityMode::Joint },
            model: ModelSpec::default(),
            smoothing: Some(0.01),
        };
        let fitted = fit_propensity(&d, &opts).unwrap();
        for pv in d.pageviews().iter().take(100) {
            let probs = fitted.rule_probabilities(&pv.x);
            prop_assert_eq!(probs.len(), cfg.m + 1);
            prop_assert!(probs.iter().all(|&q| q > 0.0 && q < 1.0));
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn logistic_optimum_has_vanishing_gradient(seed in any::<u64>(), w in proptest::collection::vec(-1.0f64..1.0, 5)) {
        let mut rng = stream(seed, 950, 0);
        let n = 300;
        let mut data = Vec::with_capacity(n * 4);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let logit = w[0] + (0..4).map(|k| w[k + 1] * row[k]).sum::<f64>();
            y.push(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-logit).exp())));
            data.extend(row);
        }
        prop_assume!(y.contains(&1) && y.contains(&0));
        let design = Design::new((1..=4).map(|k| format!("f{k}")).collect(), data.clone()).unwrap();
        let ridge = 1e-3;
        let fitted = fit_logistic(&design, &y, &LogisticOptions { ridge, ..Default::default() }).unwrap();
        let ModelParams::Logistic(model) = &fitted.params else { panic!("not logistic") };
        // penalized mean log-likelihood, written out independently
        let objective = |b: &[f64]| {
            let ll: f64 = (0..n)
                .map(|r| {
                    let z = b[0] + (0..4).map(|k| b[k + 1] * data[r * 4 + k]).sum::<f64>();
                    f64::from(y[r]) * z - (1.0 + z.exp()).ln()
                })
                .sum::<f64>() / n as f64;
            ll - 0.5 * ridge * b[1..].iter().map(|v| v * v).sum::<f64>()
        };
        let h = 1e-5;
        for k in 0..5 {
            let mut up = model.weights.clone();
            let mut dn = model.weights.clone();
            up[k] += h;
            dn[k] -= h;
            let g = (objective(&up) - objective(&dn)) / (2.0 * h);
            prop_assert!(g.abs() < 1e-5, "component {k}: {g}");
        }
        prop_assert!(fitted.diagnostics.gradient_norm.unwrap() <= 1e-6);
    }

    #[test]
    fn ci_tests_are_symmetric(seed in any::<u64>(), coef in -0.5f64..0.5) {
        let mut rng = stream(seed, 951, 0);
        let n = 400;
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x: Vec<f64> = z.iter().map(|v| v + rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| coef * a * a + b + rng.sample::<f64, _>(StandardNormal)).collect();
        let data = Columns::new(vec!["x".into(), "y".into(), "z".into()], vec![x, y, z]).unwrap();
        let cond = ["z".to_string()];
        let a = fisher_z_test(&data, "x", "y", &cond, 0.05).unwrap();
        let b = fisher_z_test(&data, "y", "x", &cond, 0.05).unwrap();
        prop_assert!((a.statistic - b.statistic).abs() < 1e-9);
        let opts = KernelOptions { n_perm: 60, seed, ..Default::default() };
        let a = kernel_ci_test(&data, "x", "y", &cond, 0.05, &opts).unwrap();
        let b = kernel_ci_test(&data, "y", "x", &cond, 0.05, &opts).unwrap();
        prop_assert!((a.statistic - b.statistic).abs() < 1e-9 * a.statistic.abs().max(1.0));
        prop_assert_eq!(a.p_value, b.p_value);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn estimators_ignore_pageview_order(seed in any::<u64>(), shuffle in any::<u64>()) {
        let mut cfg = SemConfig::null(2, 2, seed);
        cfg.gamma = vec![0.5, 0.0];
        cfg.eta = vec![0.0, -0.5];
        cfg.w_prop = vec![vec![0.4, 0.0, 0.0, 0.2], vec![0.0; 4], vec![-0.4, 0.0, 0.2, 0.0]];
        let d = interference_core::sem::simulate(&cfg, 1_500).unwrap();
        let mut pvs = d.pageviews().to_vec();
        let mut rng = stream(shuffle, 952, 0);
        for i in (1..pvs.len()).rev() {
            pvs.swap(i, rng.random_range(0..=i));
        }
        let shuffled = Dataset::new(d.m(), d.p(), pvs, d.provenance().to_string()).unwrap();
        let spec = NuisanceSpec {
            outcome_model: ModelSpec::default(),
            outcome_features: vec![FeatureSetSpec::new(FeatureVariant::BlockCross)],
            propensity: PropensityOptions::default(),
        };
        let opts = EstimateOptions::default();
        let a = estimate_table(&d, &spec, &opts).unwrap();
        let b = estimate_table(&shuffled, &spec, &opts).unwrap();
        for est in Estimator::FITTED {
            for (x, y) in a.get(est).flat_values().iter().zip(b.get(est).flat_values()) {
                prop_assert!((x - y).abs() < 1e-9, "{est:?}: {x} vs {y}");
            }
        }
    }
}
