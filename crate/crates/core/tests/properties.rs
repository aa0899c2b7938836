use std::sync::OnceLock;

use csmart::data::{format_float, parse_long_table, write_long_table, ClusterRecord, Individual, Schema, TimeGrid, TrialDataset};
use csmart::design::{enumerate_cais, DesignKind, EmbeddedCai, SmartDesign};
use csmart::gee::{design_weights, fit, solve_theta, wald_test, Adjustments, FitOptions, FitResult};
use csmart::mean_model::{Basis, ContrastVector, MeanModelSpec, ThetaEstimate};
use csmart::sim::{
    ByArm, ByCai, MomentCache, MomentMethod, ResponseModel, Simulator, SizeMass, TargetStructure,
};
use csmart::working_cov::{AlphaEstimate, BetweenCorr, CaiPooling, VarianceTime, WithinCorr, WorkingCovSpec};
use proptest::prelude::*;

const KINDS: [DesignKind; 4] = [DesignKind::I, DesignKind::II, DesignKind::III, DesignKind::IV];

fn arm() -> impl Strategy<Value = i8> {
    prop_oneof![Just(1i8), Just(-1i8)]
}

fn finite() -> impl Strategy<Value = f64> {
    any::<f64>().prop_filter("finite", |v| v.is_finite())
}

/// Slots filled the way each design records them.
fn cluster(kind: DesignKind, times: usize) -> impl Strategy<Value = ClusterRecord> {
    (arm(), 0u8..2, arm(), arm(), finite(), prop::collection::vec((finite(), prop::collection::vec(finite(), times)), 1..4))
        .prop_map(move |(a1, r, a2nr, a2r, xc, people)| {
            let (a2nr, a2r) = match kind {
                DesignKind::I => ((r == 0).then_some(a2nr), (r == 1).then_some(a2r)),
                DesignKind::II => ((r == 0).then_some(a2nr), None),
                DesignKind::III => ((r == 0 && a1 == 1).then_some(a2nr), None),
                DesignKind::IV => (Some(a2nr), None),
            };
            let individuals = people
                .into_iter()
                .enumerate()
                .map(|(k, (x, y))| Individual { id: format!("p{k}"), x: vec![x], y })
                .collect();
            ClusterRecord { id: String::new(), a1, r, a2nr, a2r, x_cluster: vec![xc], individuals }
        })
}

fn dataset() -> impl Strategy<Value = TrialDataset> {
    (0usize..4).prop_flat_map(|k| {
        let kind = KINDS[k];
        prop::collection::vec(cluster(kind, 3), 1..8).prop_map(move |mut clusters| {
            for (i, c) in clusters.iter_mut().enumerate() {
                c.id = format!("c{i}");
            }
            TrialDataset {
                design: SmartDesign::balanced(kind),
                grid: TimeGrid::three_point(),
                clusters,
                cluster_covariates: vec!["site".into()],
                individual_covariates: vec!["age".into()],
            }
        })
    })
}

fn schema_for(ds: &TrialDataset, delimiter: char) -> Schema {
    Schema {
        a2r: (ds.design.kind() == DesignKind::I).then(|| "a2r".to_string()),
        cluster_covariates: ds.cluster_covariates.clone(),
        individual_covariates: ds.individual_covariates.clone(),
        delimiter,
        ..Schema::default()
    }
}

fn piecewise(kind: DesignKind, sqrt: bool) -> MeanModelSpec {
    let basis = if sqrt { Basis::PiecewiseSqrt } else { Basis::PiecewiseLinear };
    MeanModelSpec::new(basis, SmartDesign::balanced(kind), TimeGrid::three_point(), vec![]).unwrap()
}

fn theta_for(spec: &MeanModelSpec, v: &[f64]) -> ThetaEstimate {
    ThetaEstimate::from_vector(spec, &v[..spec.n_params()])
}

proptest! {
    #[test]
    fn floats_round_trip_through_text(v in finite()) {
        prop_assert_eq!(format_float(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn long_tables_round_trip(ds in dataset(), tab in any::<bool>()) {
        let schema = schema_for(&ds, if tab { '\t' } else { ',' });
        let mut buf = Vec::new();
        write_long_table(&ds, &schema, &mut buf).unwrap();
        let back = parse_long_table(buf.as_slice(), &schema, &ds.design, &ds.grid).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn cais_display_and_parse_round_trip(k in 0usize..4) {
        for d in enumerate_cais(KINDS[k]) {
            prop_assert_eq!(EmbeddedCai::parse(&d.to_string()).unwrap(), d);
        }
    }

    #[test]
    fn mean_is_linear_in_theta(
        k in 0usize..4,
        sqrt in any::<bool>(),
        a in prop::collection::vec(-5.0f64..5.0, 9),
        b in prop::collection::vec(-5.0f64..5.0, 9),
        s in -3.0f64..3.0,
        t in 0.0f64..2.0,
    ) {
        let spec = piecewise(KINDS[k], sqrt);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        for d in enumerate_cais(spec.kind()) {
            let mu = |v: &[f64]| spec.mu(&d, &[], t, &theta_for(&spec, v)).unwrap();
            let lhs = mu(&sum);
            let rhs = mu(&a) + s * mu(&b);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn contrasts_are_antisymmetric(k in 0usize..4, sqrt in any::<bool>(), which in 0usize..3) {
        let spec = piecewise(KINDS[k], sqrt);
        let cais = enumerate_cais(spec.kind());
        let vector = |d: &EmbeddedCai, dp: &EmbeddedCai| match which {
            0 => spec.contrast_end_of_study(d, dp),
            1 => spec.contrast_second_stage_slope(d, dp),
            _ => spec.contrast_auc(d, dp),
        };
        for d in &cais {
            prop_assert!(vector(d, d).is_err());
            for dp in cais.iter().filter(|x| *x != d) {
                let (f, g) = (vector(d, dp).unwrap().c, vector(dp, d).unwrap().c);
                prop_assert!(f.iter().zip(&g).all(|(x, y)| (x + y).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn trajectories_are_continuous_at_the_knot(k in 0usize..4, sqrt in any::<bool>(), eps in 1e-9f64..1e-6) {
        let spec = piecewise(KINDS[k], sqrt);
        for d in enumerate_cais(spec.kind()) {
            let left = spec.design_row(&d, &[], 1.0 - eps).unwrap();
            let right = spec.design_row(&d, &[], 1.0 + eps).unwrap();
            let at = spec.design_row(&d, &[], 1.0).unwrap();
            for ((l, r), m) in left.iter().zip(&right).zip(&at) {
                prop_assert!((l - m).abs() < 1e-5 && (r - m).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn paths_sharing_a_first_stage_coincide_before_the_knot(k in 0usize..4, sqrt in any::<bool>(), t in 0.0f64..=1.0) {
        let spec = piecewise(KINDS[k], sqrt);
        for d in enumerate_cais(spec.kind()) {
            for dp in enumerate_cais(spec.kind()).iter().filter(|x| x.a1 == d.a1) {
                prop_assert_eq!(spec.design_row(&d, &[], t).unwrap(), spec.design_row(dp, &[], t).unwrap());
            }
        }
    }
}

fn simulated() -> &'static TrialDataset {
    static DATA: OnceLock<TrialDataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let ts = TargetStructure {
            mu_0: 2.0,
            mu_1: ByArm { plus: 2.6, minus: 2.2 },
            mu_2: ByCai { plus_plus: 3.4, plus_minus: 3.0, minus_plus: 2.9, minus_minus: 2.5 },
            sd_0: 1.0,
            sd_1: ByArm { plus: 1.2, minus: 1.1 },
            sd_2: ByCai { plus_plus: 1.4, plus_minus: 1.5, minus_plus: 1.3, minus_minus: 1.45 },
            within_ar1: 0.5,
            between: 0.2,
            responder_shift: ByArm::both(0.1),
            responder_scale: 0.95,
            p_response: ByArm::both(0.5),
            p_a1: 0.5,
            p_a2nr: ByArm::both(0.5),
            covariates: vec![],
            n_clusters: 80,
            cluster_sizes: vec![SizeMass { size: 2, prob: 0.6 }, SizeMass { size: 3, prob: 0.4 }],
            response_model: ResponseModel::ProbitBeta,
        };
        let sim = Simulator::new(&ts.to_spec().unwrap(), &MomentMethod::default(), &MomentCache::memory_only()).unwrap();
        sim.generate(42)
    })
}

fn ar1_exchangeable(variance_time: VarianceTime) -> WorkingCovSpec {
    WorkingCovSpec {
        variance_time,
        variance_cai: CaiPooling::Homogeneous,
        within_corr: WithinCorr::Ar1,
        between_corr: BetweenCorr::Exchangeable,
        corr_cai: CaiPooling::Homogeneous,
    }
}

fn fitted(ds: &TrialDataset, cov: &WorkingCovSpec) -> FitResult {
    let spec = piecewise(DesignKind::II, false);
    let options = FitOptions { adjustments: Adjustments::all(), ..FitOptions::default() };
    fit(ds, &spec, cov, &options).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solution_ignores_the_scale_of_the_weights(scale in 1e-3f64..1e3) {
        let ds = simulated();
        let spec = piecewise(DesignKind::II, false);
        let alpha = AlphaEstimate::identity(&enumerate_cais(DesignKind::II), 3);
        let w = design_weights(ds);
        let scaled: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let a = solve_theta(ds, &spec, &alpha, &w).unwrap().to_vec();
        let b = solve_theta(ds, &spec, &alpha, &scaled).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(close(*x, *y, 1e-10), "{x} vs {y}");
        }
    }

    #[test]
    fn fits_are_affine_equivariant(a in prop_oneof![-4.0f64..-0.25, 0.25f64..4.0], b in -10.0f64..10.0, het in any::<bool>()) {
        let ds = simulated();
        let cov = ar1_exchangeable(if het { VarianceTime::Heteroscedastic } else { VarianceTime::Homoscedastic });
        let mut moved = ds.clone();
        for c in &mut moved.clusters {
            for ind in &mut c.individuals {
                for y in &mut ind.y {
                    *y = a * *y + b;
                }
            }
        }
        let f0 = fitted(ds, &cov);
        let f1 = fitted(&moved, &cov);
        let (t0, t1) = (f0.theta_vec(), f1.theta_vec());
        prop_assert!(close(t1[0], a * t0[0] + b, 1e-7));
        for k in 1..t0.len() {
            prop_assert!(close(t1[k], a * t0[k], 1e-7), "theta[{k}]: {} vs {}", t1[k], a * t0[k]);
        }
        for (s0, s1) in f0.standard_errors().iter().zip(f1.standard_errors()) {
            prop_assert!(close(s1, a.abs() * s0, 1e-6));
        }
        for (v0, v1) in f0.alpha.sigma2[0].iter().zip(&f1.alpha.sigma2[0]) {
            prop_assert!(close(*v1, a * a * v0, 1e-6));
        }
        prop_assert_eq!(f0.df, f1.df);
    }

    #[test]
    fn wald_statistic_ignores_contrast_scale(e in -20i32..20, neg in any::<bool>(), k in 0usize..6) {
        let ds = simulated();
        let f = fitted(ds, &ar1_exchangeable(VarianceTime::Heteroscedastic));
        let spec = piecewise(DesignKind::II, false);
        let cais = enumerate_cais(DesignKind::II);
        let pairs: Vec<(usize, usize)> = (0..4).flat_map(|i| (i + 1..4).map(move |j| (i, j))).collect();
        let (i, j) = pairs[k];
        let base = spec.contrast_auc(&cais[i], &cais[j]).unwrap();
        let s = 2f64.powi(e) * if neg { -1.0 } else { 1.0 };
        let scaled = ContrastVector { c: base.c.iter().map(|v| v * s).collect(), label: base.label.clone() };
        let w0 = wald_test(&f, &base, 0.95).unwrap();
        let w1 = wald_test(&f, &scaled, 0.95).unwrap();
        prop_assert_eq!(w1.statistic, s.signum() * w0.statistic);
        prop_assert_eq!(w1.p_value, w0.p_value);
    }
}
