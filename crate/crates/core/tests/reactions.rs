use gmmdo_core::bgc::{jacobians_fd_check, rates_into, source, CheckPoint};
use gmmdo_core::verify::ALL_MODELS;
use gmmdo_core::{light_g, BioParams, ModelId, ParamId, PiecewiseBasis};
use proptest::prelude::*;

fn point(model: ModelId, x: Vec<f64>, g: f64, scale: Vec<f64>, a: f64, b: f64) -> CheckPoint {
    let base = BioParams::default();
    let mut params = base;
    for (id, s) in ParamId::ALL.iter().zip(&scale) {
        params.set(*id, base.get(*id) * s);
    }
    params.gamma_eg = params.gamma_eg.min(1.0);
    CheckPoint {
        x: x[..model.n_tracers()].to_vec(),
        g: g * params.vm,
        params,
        alpha: vec![a; model.n_alpha()],
        beta: vec![b; model.n_beta()],
    }
}

fn inputs() -> impl Strategy<Value = (usize, Vec<f64>, f64, Vec<f64>, f64, f64)> {
    (
        0..6usize,
        prop::collection::vec(1e-4..1.0f64, 5),
        0.0..1.0f64,
        prop::collection::vec(0.5..2.0f64, ParamId::ALL.len()),
        0.0..1.0f64,
        0.0..1.0f64,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn rates_conserve_total_nitrogen((m, x, g, s, a, b) in inputs(), gamma in prop::collection::vec(0.0..0.08f64, 11)) {
        let model = ALL_MODELS[m];
        let pt = point(model, x, g, s, a, b);
        let basis = PiecewiseBasis::uniform(0.0, 0.3, 10).unwrap();
        for unknown in [None, Some((&basis, gamma.as_slice()))] {
            let mut r = vec![0.0; model.n_tracers()];
            rates_into(model, &pt.x, pt.g, &pt.params, &pt.alpha, &pt.beta, unknown, &mut r);
            let scale = r.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            prop_assert!(r.iter().sum::<f64>().abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn analytic_jacobians_match_central_differences((m, x, g, s, a, b) in inputs()) {
        let model = ALL_MODELS[m];
        let gap = jacobians_fd_check(model, &point(model, x, g, s, a, b), 1e-6).unwrap();
        prop_assert!(gap < 1e-6, "gap {gap:e}");
    }

    /// Rates are affine in the node ordinates, so one finite difference per node is exact.
    #[test]
    fn expansion_sensitivities_match_differences(
        (m, x, g, s, a, b) in inputs(),
        gamma in prop::collection::vec(0.0..0.08f64, 11),
    ) {
        let model = ALL_MODELS[m];
        let pt = point(model, x, g, s, a, b);
        let basis = PiecewiseBasis::uniform(0.0, 0.3, 10).unwrap();
        let ev = source(model, &pt.x, pt.g, &pt.params, &pt.alpha, &pt.beta, Some((&basis, &gamma)), &[]).unwrap();
        let n = model.n_tracers();
        for k in 0..11 {
            let mut gp = gamma.clone();
            gp[k] += 1.0;
            let (mut r0, mut r1) = (vec![0.0; n], vec![0.0; n]);
            rates_into(model, &pt.x, pt.g, &pt.params, &pt.alpha, &pt.beta, Some((&basis, &gamma)), &mut r0);
            rates_into(model, &pt.x, pt.g, &pt.params, &pt.alpha, &pt.beta, Some((&basis, &gp)), &mut r1);
            for i in 0..n {
                prop_assert!((r1[i] - r0[i] - ev.jac_gamma[(i, k)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn light_decays_with_depth(d1 in -2.0..0.0f64, d2 in -2.0..0.0f64) {
        let p = BioParams::default();
        let (shallow, deep) = if d1 > d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(light_g(deep, &p) <= light_g(shallow, &p));
        prop_assert!(light_g(shallow, &p) <= p.vm);
    }
}

#[test]
fn zero_biomass_has_zero_rates() {
    for model in ALL_MODELS {
        let pt = point(model, vec![0.0; 5], 0.5, vec![1.0; ParamId::ALL.len()], 1.0, 1.0);
        let mut r = vec![1.0; model.n_tracers()];
        rates_into(model, &pt.x, pt.g, &pt.params, &pt.alpha, &pt.beta, None, &mut r);
        assert!(r.iter().all(|v| *v == 0.0), "{model:?}: {r:?}");
    }
}

/// With the complexity parameter at zero the detritus pool is inert, egestion vanishes, and
/// the first three rates equal those of the NPZ model without egestion.
#[test]
fn unified_model_embeds_npz() {
    let p = BioParams::default();
    let no_egestion = BioParams { gamma_eg: 0.0, ..p };
    let x = [0.4, 0.2, 0.1, 0.0];
    let (mut unified, mut npz) = ([0.0; 4], [0.0; 3]);
    rates_into(ModelId::NpzdUnified, &x, 0.7 * p.vm, &p, &[], &[0.0], None, &mut unified);
    rates_into(ModelId::Npz, &x[..3], 0.7 * p.vm, &no_egestion, &[], &[], None, &mut npz);
    for i in 0..3 {
        assert!((unified[i] - npz[i]).abs() < 1e-15);
    }
    assert_eq!(unified[3], 0.0);
}
