use csmart::data::{parse_long_table, validate, write_long_table, Schema};
use csmart::design::DesignKind;
use csmart::gee::{fit, Adjustments, FitOptions, WeightSpec};
use csmart::mean_model::{Basis, MeanModelSpec};
use csmart::sim::{
    ByArm, ByCai, CovariateDist, CovariateLevel, CovariateSpec, MomentCache, MomentMethod, ResponseModel, SimSpec,
    Simulator, SizeMass, TargetStructure,
};
use csmart::working_cov::{BetweenCorr, CaiPooling, VarianceTime, WithinCorr, WorkingCovSpec};

fn target(n_clusters: usize) -> TargetStructure {
    TargetStructure {
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
        covariates: vec![CovariateSpec {
            name: "site".into(),
            level: CovariateLevel::Cluster,
            dist: CovariateDist::Normal { sd: 1.0 },
            eta: 0.3,
        }],
        n_clusters,
        cluster_sizes: vec![SizeMass { size: 2, prob: 0.6 }, SizeMass { size: 3, prob: 0.4 }],
        response_model: ResponseModel::ProbitBeta,
    }
}

fn het_ar1() -> WorkingCovSpec {
    WorkingCovSpec {
        variance_time: VarianceTime::Heteroscedastic,
        variance_cai: CaiPooling::Homogeneous,
        within_corr: WithinCorr::Ar1,
        between_corr: BetweenCorr::Exchangeable,
        corr_cai: CaiPooling::Homogeneous,
    }
}

fn mean_model(spec: &SimSpec, sim: &Simulator) -> MeanModelSpec {
    MeanModelSpec::new(Basis::PiecewiseLinear, sim.design().clone(), csmart::data::TimeGrid::three_point(), spec.covariate_terms())
        .unwrap()
}

#[test]
fn fitting_a_written_table_matches_the_in_memory_fit() {
    let spec = target(150).to_spec().unwrap();
    let sim = Simulator::new(&spec, &MomentMethod::default(), &MomentCache::memory_only()).unwrap();
    let ds = sim.generate(7);
    assert!(validate(&ds).is_empty());

    let schema = Schema { cluster_covariates: vec!["site".into()], ..Schema::default() };
    let mut buf = Vec::new();
    write_long_table(&ds, &schema, &mut buf).unwrap();
    let back = parse_long_table(buf.as_slice(), &schema, &ds.design, &ds.grid).unwrap();

    let ms = mean_model(&spec, &sim);
    let options = FitOptions { adjustments: Adjustments::all(), ..FitOptions::default() };
    let a = fit(&ds, &ms, &het_ar1(), &options).unwrap();
    let b = fit(&back, &ms, &het_ar1(), &options).unwrap();
    assert_eq!(a, b);
    assert!(a.converged && a.root_certified());
    assert_eq!(ms.parameter_names().last().unwrap(), "eta[site]");
}

#[test]
fn disk_cached_moments_reproduce_the_same_trials() {
    let dir = tempfile::tempdir().unwrap();
    let spec = target(40).to_spec().unwrap();
    let method = MomentMethod::default();
    let fresh = Simulator::new(&spec, &method, &MomentCache::at(dir.path())).unwrap();
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_some(), "cache was not written");
    let cached = Simulator::new(&spec, &method, &MomentCache::at(dir.path())).unwrap();
    let memory = Simulator::new(&spec, &method, &MomentCache::memory_only()).unwrap();
    for seed in [1, 2, 3] {
        let ds = fresh.generate(seed);
        assert_eq!(ds, cached.generate(seed));
        assert_eq!(ds, memory.generate(seed));
    }
}

#[test]
fn estimated_weights_agree_with_known_weights() {
    let spec = target(400).to_spec().unwrap();
    let sim = Simulator::new(&spec, &MomentMethod::default(), &MomentCache::memory_only()).unwrap();
    let ds = sim.generate(19);
    let ms = mean_model(&spec, &sim);
    let known = fit(&ds, &ms, &het_ar1(), &FitOptions::default()).unwrap();
    let estimated = fit(
        &ds,
        &ms,
        &het_ar1(),
        &FitOptions {
            weights: WeightSpec::Estimated { stage1_covariates: vec!["site".into()], stage2_covariates: vec!["site".into()] },
            ..FitOptions::default()
        },
    )
    .unwrap();
    assert!(estimated.converged && estimated.root_certified());
    let se = known.standard_errors();
    for (k, (a, b)) in known.theta_vec().iter().zip(estimated.theta_vec()).enumerate() {
        assert!((a - b).abs() < se[k], "theta[{k}]: known {a}, estimated {b}, se {}", se[k]);
    }
}

#[test]
fn relabelled_design_four_data_fits() {
    // Relabel design II draws as design IV: the unconditional second-stage arm
    // is then recorded for every cluster.
    let spec = target(120).to_spec().unwrap();
    let sim = Simulator::new(&spec, &MomentMethod::default(), &MomentCache::memory_only()).unwrap();
    let mut ds = sim.generate(3);
    let mut next_arm = 1i8;
    for c in &mut ds.clusters {
        if c.a2nr.is_none() {
            c.a2nr = Some(next_arm);
            next_arm = -next_arm;
        }
    }
    ds.design = csmart::design::SmartDesign::balanced(DesignKind::IV);
    assert!(validate(&ds).is_empty());
    let ms = MeanModelSpec::new(Basis::PiecewiseLinear, ds.design.clone(), ds.grid.clone(), vec!["site".into()]).unwrap();
    let f = fit(&ds, &ms, &het_ar1(), &FitOptions::default()).unwrap();
    assert!(f.converged && f.root_certified());
    assert_eq!(f.theta_vec().len(), 8);
}
