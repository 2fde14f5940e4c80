use consensus_ppc::config::{ExperimentConfig, GraphMode, InitialState, PpcParams};
use consensus_ppc::ppc::{edge_state, inverse_transform, transform, PerformanceFunction, PpcBank};
use consensus_ppc::sim::{run_one, Scheme, SimConfig};
use consensus_ppc::{AugmentedState, Controller, DiffusionFunction, DiffusionKind, Graph, NoiseMode, SystemModel};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tree() -> impl Strategy<Value = Graph> {
    (2usize..14, any::<u64>()).prop_map(|(n, seed)| Graph::random_tree(n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
}

fn tree_and_positions() -> impl Strategy<Value = (Graph, DVector<f64>)> {
    tree().prop_flat_map(|g| {
        let n = g.vertex_count();
        (Just(g), prop::collection::vec(-10.0..10.0f64, n).prop_map(DVector::from_vec))
    })
}

fn envelope() -> impl Strategy<Value = PerformanceFunction> {
    (0.01..1.0f64, 0.01..10.0f64, 0.05..20.0f64)
        .prop_map(|(rho_inf, gap, eps)| PerformanceFunction::new(rho_inf + gap, rho_inf, eps).unwrap())
}

fn diffusion() -> impl Strategy<Value = DiffusionFunction> {
    prop_oneof![
        Just(DiffusionKind::Zero),
        (-3.0..3.0f64).prop_map(|sigma| DiffusionKind::Constant { sigma }),
        (-3.0..3.0f64).prop_map(|sigma| DiffusionKind::Linear { sigma }),
        (0.0..2.0f64, -3.0..3.0f64).prop_map(|(a, b)| DiffusionKind::ExpSin { a, b }),
    ]
    .prop_map(|k| DiffusionFunction::new(k).unwrap())
}

fn sorted_eigenvalues(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

proptest! {
    #[test]
    fn laplacians_factor_through_incidence((g, x) in tree_and_positions()) {
        let d = g.incidence();
        prop_assert!((g.laplacian() - d * d.transpose()).amax() < 1e-12);
        prop_assert!((g.edge_laplacian() - d.transpose() * d).amax() < 1e-12);
        let xbar = g.relative_positions(&x);
        prop_assert!((g.laplacian() * &x - d * &xbar).amax() < 1e-10);
        prop_assert!(g.is_tree() && g.is_connected());
        prop_assert_eq!(g.edge_count(), g.vertex_count() - 1);
    }

    #[test]
    fn laplacian_spectra_agree_on_trees(g in tree()) {
        let l = sorted_eigenvalues(g.laplacian());
        let le = sorted_eigenvalues(g.edge_laplacian());
        prop_assert!(l[0].abs() < 1e-9);
        for (a, b) in l[1..].iter().zip(&le) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!(le[0] > 1e-9);
    }

    #[test]
    fn relative_positions_determine_positions_up_to_shift((g, x) in tree_and_positions()) {
        let xbar = g.relative_positions(&x);
        let y = g.positions_from_relative(xbar.as_slice()).unwrap();
        prop_assert!((g.relative_positions(&y) - &xbar).amax() < 1e-9);
        let shift = x[0] - y[0];
        prop_assert!((y.add_scalar(shift) - &x).amax() < 1e-9);
    }

    #[test]
    fn transform_is_odd_and_increasing(a in -0.999_999..0.999_999f64, b in -0.999_999..0.999_999f64) {
        let (ta, tb) = (transform(a).unwrap(), transform(b).unwrap());
        prop_assert_eq!(transform(-a).unwrap(), -ta);
        if a < b {
            prop_assert!(ta < tb);
        }
        prop_assert!((inverse_transform(ta) - a).abs() <= 1e-12);
    }

    #[test]
    fn inverse_transform_round_trips(xi in -9.0..9.0f64) {
        let xhat = inverse_transform(xi);
        prop_assert!(xhat.abs() < 1.0);
        prop_assert!((transform(xhat).unwrap() - xi).abs() <= 1e-12);
    }

    #[test]
    fn round_trip_error_follows_conditioning(xi in 9.0..25.0f64) {
        let xhat = inverse_transform(xi);
        if let Ok(back) = transform(xhat) {
            prop_assert!((back - xi).abs() <= 4.0 * f64::EPSILON * xi.exp());
        }
    }

    #[test]
    fn envelope_shape(pf in envelope(), t in 0.0..50.0f64, dt in 1e-6..5.0f64) {
        let (rho, later) = (pf.rho(t).unwrap(), pf.rho(t + dt).unwrap());
        prop_assert!(rho >= pf.rho_inf() && rho <= pf.rho0());
        prop_assert!(later <= rho);
        let alpha = pf.alpha(t).unwrap();
        prop_assert!(alpha >= 0.0 && alpha < pf.eps());
        prop_assert!((alpha + pf.rho_dot(t).unwrap() / rho).abs() < 1e-12 * (1.0 + alpha));
    }

    #[test]
    fn transformed_error_has_the_sign_of_the_relative_position(pf in envelope(), t in 0.0..10.0f64, u in -0.999..0.999f64) {
        let rho = pf.rho(t).unwrap();
        let s = edge_state(&pf, u * rho, t).unwrap();
        prop_assert!(s.xi * s.xbar >= 0.0);
        prop_assert!(s.phi >= pf.phi_min() * (1.0 - 1e-12));
        prop_assert!((s.phi - 2.0 / (rho * (1.0 - s.xhat * s.xhat))).abs() <= 1e-12 * s.phi);
    }

    #[test]
    fn edge_noise_is_lipschitz(g in diffusion(), xi in -50.0..50.0f64, xj in -50.0..50.0f64) {
        let diff = (g.eval(xi) - g.eval(xj)).abs();
        prop_assert!(diff <= g.lipschitz() * (xi - xj).abs() * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn controls_sum_to_zero_and_vanish_at_consensus((g, x) in tree_and_positions(), c in 0usize..3, level in -5.0..5.0f64) {
        let m = g.edge_count();
        let pf = PerformanceFunction::new(50.0, 0.1, 1.0).unwrap();
        let model = SystemModel::new(g, DiffusionFunction::zero(), NoiseMode::Shared, PpcBank::uniform(pf, m)).unwrap();
        let controller = Controller::ALL[c];
        let state = AugmentedState::from_nodes(&model, x.clone(), 0.0).unwrap();
        let v = controller.control(&model, &state);
        prop_assert!(v.sum().abs() <= 1e-9 * (1.0 + v.amax()));
        let flat = AugmentedState::from_nodes(&model, DVector::from_element(x.len(), level), 0.0).unwrap();
        prop_assert_eq!(controller.control(&model, &flat).amax(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulated_samples_satisfy_the_invariants(g in tree(), seed in any::<u64>(), c in 0usize..3) {
        let n = g.vertex_count();
        let m = g.edge_count();
        let pf = PerformanceFunction::new(3.0, 0.1, 2.0).unwrap();
        let noise = DiffusionFunction::new(DiffusionKind::ExpSin { a: 0.1, b: 1.0 }).unwrap();
        let model = SystemModel::new(g, noise, NoiseMode::Shared, PpcBank::uniform(pf, m)).unwrap();
        let xbar0: Vec<f64> = (0..m).map(|k| if k % 2 == 0 { 1.5 } else { -2.0 }).collect();
        let x0 = model.graph().positions_from_relative(&xbar0).unwrap();
        let cfg = SimConfig { horizon: 0.5, seed, scheme: Scheme::DriftImplicit, ..SimConfig::new(x0) };
        let controller = Controller::ALL[c];
        let rec = run_one(&model, controller, &cfg, 0);
        if controller.uses_envelope() {
            prop_assert!(rec.completed());
        }
        for s in 0..rec.len() {
            let x = DVector::from_column_slice(rec.x(s));
            let xbar = model.graph().relative_positions(&x);
            prop_assert_eq!(xbar.as_slice(), rec.xbar(s));
            for (xi, xb) in rec.xi(s).iter().zip(rec.xbar(s)) {
                prop_assert!(xi * xb >= 0.0);
            }
            prop_assert_eq!(rec.x(s).len(), n);
        }
    }

    #[test]
    fn config_text_round_trips(
        g in tree(),
        kind in 0usize..4,
        a in 0.0..1.0f64,
        b in -2.0..2.0f64,
        rho_inf in 0.05..0.5f64,
        eps in 0.5..12.0f64,
        overrides in prop::collection::vec(prop::option::of(0.5..12.0f64), 0..4),
        controller in 0usize..3,
        dt_exp in 2..5i32,
        seed in any::<u64>(),
        realizations in 1usize..5000,
        sample_every in 1usize..50,
        independent in any::<bool>(),
        relative in any::<bool>(),
    ) {
        let m = g.edge_count();
        let diffusion = match kind {
            0 => DiffusionKind::Zero,
            1 => DiffusionKind::Constant { sigma: b },
            2 => DiffusionKind::Linear { sigma: b },
            _ => DiffusionKind::ExpSin { a, b },
        };
        let ppc_edges = overrides
            .iter()
            .enumerate()
            .filter(|(k, _)| *k < m)
            .filter_map(|(k, e)| e.map(|e| (k, PpcParams { eps: Some(e), ..Default::default() })))
            .collect();
        let xbar0: Vec<f64> = (0..m).map(|k| (k as f64 * 0.37).sin()).collect();
        let initial = if relative {
            InitialState::Relative(xbar0)
        } else {
            InitialState::Nodes(g.positions_from_relative(&xbar0).unwrap().iter().copied().collect())
        };
        let mut config = ExperimentConfig::reference();
        config.n = g.vertex_count();
        config.edges = g.edges().to_vec();
        config.graph_mode = GraphMode::Strict;
        config.diffusion = diffusion;
        config.lipschitz = None;
        config.noise_mode = if independent { NoiseMode::Independent } else { NoiseMode::Shared };
        config.controller = Controller::ALL[controller];
        config.ppc_default = PpcParams { rho0: Some(5.0), rho_inf: Some(rho_inf), eps: Some(eps) };
        config.ppc_edges = ppc_edges;
        config.dt = 10f64.powi(-dt_exp);
        config.seed = seed;
        config.realizations = realizations;
        config.sample_every = sample_every;
        config.initial = initial;
        let text = config.to_text();
        let parsed = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&parsed, &config);
        prop_assert_eq!(parsed.to_text(), text);
    }
}
