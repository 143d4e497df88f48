//! Shared fixtures for the benchmarks.

use nalgebra::DVector;
use projrl_core::constraints::{build_inverter_set, build_thermal_polytope, HorizonSpec};
use projrl_core::envs::feeder::{synth_feeder, RadialFeeder};
use projrl_core::training::runner::feeder_policy_dims;
use projrl_core::training::FeederPolicy;
use projrl_core::{LinearConstraintSet, LinearDynamics, SensitivityModel};

/// Building-style polytope: scalar zone, 12-step horizon, box action
/// and state bounds. 48 inequality rows.
pub fn thermal_set() -> LinearConstraintSet {
    let model = LinearDynamics {
        a: nalgebra::DMatrix::from_element(1, 1, 0.83),
        b_u: nalgebra::DMatrix::from_element(1, 1, 0.127),
        b_d: nalgebra::DMatrix::from_element(1, 1, 0.042),
        dt_minutes: 15.0,
    };
    let horizon = 12;
    let spec = HorizonSpec {
        state_bounds: vec![(21.9, 25.5); horizon],
        action_bounds: vec![(20.0, 65.0); horizon],
    };
    let w_hat = vec![0.0; horizon];
    build_thermal_polytope(&model, 23.0, &w_hat, &spec).unwrap()
}

pub struct FeederFixture {
    pub feeder: RadialFeeder,
    pub model: SensitivityModel,
    pub policy: FeederPolicy,
    pub set: LinearConstraintSet,
    pub global: Vec<f64>,
    pub local: Vec<f64>,
}

/// Full 21-inverter feeder fixture at a strong-sun operating point.
pub fn feeder_fixture() -> FeederFixture {
    let feeder = synth_feeder(42);
    let pf = |p: &DVector<f64>, q: &DVector<f64>| {
        feeder.solve_powerflow(p, q).map(|s| s.v_mag)
    };
    let n = feeder.n_bus;
    let mut model =
        projrl_core::sysid::linearize_grid(&pf, n, &DVector::zeros(n), &DVector::zeros(n)).unwrap();
    model.eps_v = 0.005;
    let p_av = feeder.available_power(0.9);
    let mults = vec![0.6; n];
    let (lp, lq) = feeder.loads_at(&mults);
    let specs: Vec<_> = (0..feeder.n_pv())
        .map(|i| projrl_core::constraints::InverterSpec {
            rating: feeder.pv_rating[i],
            p_available: p_av[i],
            q_max: projrl_core::constraints::Q_LIMIT_FRAC * feeder.pv_rating[i],
            facets: 8,
        })
        .collect();
    let set = build_inverter_set(&model, &specs, &feeder.pv_buses, &lp, &lq, (0.95, 1.05)).unwrap();
    let (gdim, ldim) = feeder_policy_dims(&feeder);
    let ratings = feeder.pv_rating.clone();
    let mut r = projrl_core::rng::stream(7, "bench/policy-init");
    let policy = FeederPolicy::new(gdim, ldim, &ratings, false, &mut r);
    let mut global = vec![0.0; gdim];
    for (i, g) in global.iter_mut().enumerate() {
        *g = ((i * 37 % 100) as f64) / 100.0 - 0.5;
    }
    let local: Vec<f64> = (0..3 * feeder.n_pv())
        .map(|i| ((i * 17 % 100) as f64) / 100.0 - 0.5)
        .collect();
    FeederFixture {
        feeder,
        model,
        policy,
        set,
        global,
        local,
    }
}
