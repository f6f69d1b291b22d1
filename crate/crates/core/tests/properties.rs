use flexblock::flexibility::{
    abandonment_rate, balance_check, compute_indices, provided_margin, required_margin, MarginPoint,
};
use flexblock::mpc::{DispatchTrace, StepStatus, TraceStep, N_U, N_X};
use flexblock::qpsolver::{solve_qp, QpStatus};
use flexblock::scenario::{scale_penetration, Profiles};
use flexblock::units::{
    feasible_control_bounds, spill_bounds, step_unit, stored_energy_delta, EnergyBlock, UnitControl, UnitDisturbance,
    UnitKind, UnitModel, UnitState,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const DT: f64 = 5.0 / 60.0;

fn storage_kind() -> impl Strategy<Value = UnitKind> {
    prop_oneof![Just(UnitKind::Battery), Just(UnitKind::Hydrogen), Just(UnitKind::Gas)]
}

fn any_kind() -> impl Strategy<Value = UnitKind> {
    prop::sample::select(UnitKind::ALL.to_vec())
}

/// A state of `model` inside its SOC window with last powers inside the
/// static bounds.
fn state_of(model: &UnitModel, a: f64, b: f64, c: f64) -> UnitState {
    UnitState {
        soc: model.soc_min + a * (model.soc_max - model.soc_min),
        last_p_gen_mw: model.p_gen_min_mw + b * (model.p_gen_max_mw - model.p_gen_min_mw),
        last_p_load_mw: model.p_load_min_mw + c * (model.p_load_max_mw - model.p_load_min_mw),
    }
}

fn pick(lo: f64, hi: f64, t: f64) -> f64 {
    lo + t * (hi - lo)
}

proptest! {
    #[test]
    fn energy_is_conserved(
        kind in storage_kind(),
        s in (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64),
        t in (0.0..=1.0f64, 0.0..=1.0f64),
        xi in -0.5..0.5f64,
    ) {
        let model = UnitModel::default_for(kind);
        let state = state_of(&model, s.0, s.1, s.2);
        let bounds = feasible_control_bounds(&model, &state, DT);
        let control = UnitControl {
            p_gen_mw: pick(bounds.p_gen.lo, bounds.p_gen.hi, t.0),
            p_load_mw: pick(bounds.p_load.lo, bounds.p_load.hi, t.1),
            spill_mwh: 0.0,
        };
        let dist = UnitDisturbance { xi_mwh: xi };
        if let Ok(next) = step_unit(&model, &state, &control, &dist, DT) {
            let lhs = model.capacity_mwh * (next.soc - state.soc);
            let rhs = stored_energy_delta(&model, &state, &control, &dist, DT);
            prop_assert!((lhs - rhs).abs() <= 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn feasible_bounds_are_sound(
        kind in storage_kind(),
        s in (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64),
        t in (0.0..=1.0f64, 0.0..=1.0f64),
    ) {
        let model = UnitModel::default_for(kind);
        let state = state_of(&model, s.0, s.1, s.2);
        let bounds = feasible_control_bounds(&model, &state, DT);
        prop_assume!(!bounds.p_gen.is_empty() && !bounds.p_load.is_empty());
        let control = UnitControl {
            p_gen_mw: pick(bounds.p_gen.lo, bounds.p_gen.hi, t.0),
            p_load_mw: pick(bounds.p_load.lo, bounds.p_load.hi, t.1),
            spill_mwh: 0.0,
        };
        let next = step_unit(&model, &state, &control, &UnitDisturbance::default(), DT).unwrap();
        let tol = 1e-9 / model.capacity_mwh;
        prop_assert!(next.soc >= model.soc_min - tol && next.soc <= model.soc_max + tol);
        let residual = model.capacity_mwh * (next.soc - state.soc)
            - stored_energy_delta(&model, &state, &control, &UnitDisturbance::default(), DT);
        prop_assert!(residual.abs() <= 1e-9);
    }

    #[test]
    fn spill_is_non_negative_and_bounded(
        wind in any::<bool>(),
        avail in 0.0..80.0f64,
        t in 0.0..=1.0f64,
    ) {
        let model = UnitModel::default_for(if wind { UnitKind::Wind } else { UnitKind::Pv });
        let xi = avail * DT;
        let dist = UnitDisturbance { xi_mwh: xi };
        let sb = spill_bounds(&model, &dist);
        let w = pick(sb.lo, sb.hi, t);
        let p = (model.eta_ex * xi - w) / (model.eta_gen * DT);
        let control = UnitControl { p_gen_mw: p, p_load_mw: 0.0, spill_mwh: w };
        prop_assert!(w >= 0.0);
        prop_assert!(xi - w >= -1e-12);
        prop_assert!(step_unit(&model, &UnitState::initial(&model), &control, &dist, DT).is_ok());
    }

    #[test]
    fn enlarging_power_bounds_never_shrinks_the_box(
        kind in any_kind(),
        s in (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64),
        extra in (0.0..20.0f64, 0.0..20.0f64, 0.0..5.0f64, 0.0..5.0f64),
    ) {
        let model = UnitModel::default_for(kind);
        let state = state_of(&model, s.0, s.1, s.2);
        let mut wider = model.clone();
        wider.p_gen_max_mw += extra.0;
        wider.p_load_max_mw += extra.1;
        wider.p_gen_min_mw = (wider.p_gen_min_mw - extra.2).max(0.0);
        wider.p_load_min_mw = (wider.p_load_min_mw - extra.3).max(0.0);
        let a = feasible_control_bounds(&model, &state, DT);
        let b = feasible_control_bounds(&wider, &state, DT);
        prop_assert!(b.p_gen.lo <= a.p_gen.lo && b.p_gen.hi >= a.p_gen.hi);
        prop_assert!(b.p_load.lo <= a.p_load.lo && b.p_load.hi >= a.p_load.hi);
    }
}

fn random_trace(block: EnergyBlock, rows: &[([f64; N_U], f64, f64)]) -> DispatchTrace {
    let steps = rows
        .iter()
        .enumerate()
        .map(|(k, (u, soc, eload))| TraceStep {
            time_min: 5.0 * k as f64,
            state: [0.0, 0.0, *soc, *soc, *soc],
            control: *u,
            disturbance: [u[0] * DT + u[7], u[1] * DT + u[8], 0.0, 0.0],
            eload_mw: *eload,
            shed_mw: 0.0,
            surplus_mw: 0.0,
            h2_demand_mwh: 0.0,
            h2_served_mwh: 0.0,
            status: StepStatus::Optimal,
        })
        .collect();
    DispatchTrace {
        dt_h: DT,
        block,
        steps,
        final_state: [0.0; N_X],
    }
}

fn trace_rows() -> impl Strategy<Value = Vec<([f64; N_U], f64, f64)>> {
    prop::collection::vec((prop::array::uniform9(0.0..10.0f64), 0.1..0.9f64, 0.0..70.0f64), 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn indices_are_non_negative(rows in trace_rows(), noise in prop::collection::vec(-80.0..80.0f64, 40)) {
        let trace = random_trace(EnergyBlock::reference(), &rows);
        let net: Vec<f64> = noise[..rows.len()].to_vec();
        let idx = compute_indices(&trace, &net, DT).unwrap();
        prop_assert!(idx.e_ir >= 0.0 && idx.e_io >= 0.0 && idx.e_ic >= 0.0);
        prop_assert!((0.0..=1.0).contains(&idx.rho));
        let zero = idx.e_ir == 0.0 && idx.e_io == 0.0 && idx.e_ic == 0.0;
        prop_assert_eq!(zero, idx.beta == 0);
    }

    #[test]
    fn abandonment_is_a_fraction(rows in trace_rows()) {
        let trace = random_trace(EnergyBlock::reference(), &rows);
        if let Ok(r) = abandonment_rate(&trace) {
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn adding_a_unit_never_lowers_provided_margin(
        s in prop::array::uniform3((0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64)),
        avail in 0.0..120.0f64,
        drop in 2usize..5,
    ) {
        let full = EnergyBlock::reference();
        let states: Vec<UnitState> = full
            .units
            .iter()
            .enumerate()
            .map(|(i, m)| if i < 2 { UnitState::initial(m) } else { state_of(m, s[i - 2].0, s[i - 2].1, s[i - 2].2) })
            .collect();
        let mut sub = full.clone();
        sub.units.remove(drop);
        let mut sub_states = states.clone();
        sub_states.remove(drop);
        let big = provided_margin(&full, &states, avail, DT).to_array();
        let small = provided_margin(&sub, &sub_states, avail, DT).to_array();
        for i in 0..6 {
            prop_assert!(big[i] >= small[i], "{} {} < {}", MarginPoint::FIELDS[i], big[i], small[i]);
        }
    }

    #[test]
    fn dominated_requirements_pass_the_balance_check(
        net in prop::collection::vec(-10.0..10.0f64, 2..20),
    ) {
        let provided = MarginPoint::from_array([1e3; 6]);
        for t in 0..net.len() - 1 {
            let req = required_margin(&net, t, DT).unwrap();
            prop_assert!(balance_check(&provided, &req).all());
        }
    }
}

fn random_qp(seed: &[f64]) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let n = 4;
    let l = DMatrix::from_fn(n, n, |i, j| seed[i * n + j]);
    let h = &l * l.transpose() + DMatrix::identity(n, n);
    let f = DVector::from_fn(n, |i, _| seed[16 + i] * 3.0);
    let a = DMatrix::from_fn(3, n, |i, j| seed[20 + i * n + j]);
    let b = DVector::from_fn(3, |i, _| seed[32 + i].abs());
    (h, f, a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn qp_solution_is_scale_invariant(seed in prop::collection::vec(-1.0..1.0f64, 35), scale in 0.01..100.0f64) {
        let (h, f, a, b) = random_qp(&seed);
        let none = DMatrix::zeros(0, 4);
        let empty = DVector::zeros(0);
        let s1 = solve_qp(&h, &f, &a, &b, &none, &empty, 1e-10, 200).unwrap();
        let s2 = solve_qp(&(&h * scale), &(&f * scale), &a, &b, &none, &empty, 1e-10, 200).unwrap();
        prop_assert_eq!(s1.status, QpStatus::Optimal);
        prop_assert_eq!(s2.status, QpStatus::Optimal);
        prop_assert!((&s1.x - &s2.x).amax() <= 1e-9, "{}", (&s1.x - &s2.x).amax());
    }
}

fn profiles_strategy() -> impl Strategy<Value = Profiles> {
    (2usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0..100.0f64, n),
            prop::collection::vec(0.0..100.0f64, n),
            prop::collection::vec(0.0..100.0f64, n),
            prop::collection::vec(0.0..5.0f64, n),
            prop::collection::vec(0.0..5.0f64, n),
        )
            .prop_map(|(w, pv, l, h, g)| Profiles {
                step_minutes: 5.0,
                wind_avail_mw: w,
                pv_avail_mw: pv,
                eload_mw: l,
                h2_demand_mwh: h,
                gas_supply_mwh: g,
            })
    })
}

proptest! {
    #[test]
    fn profiles_survive_csv(p in profiles_strategy()) {
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        prop_assert_eq!(Profiles::read_csv(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn penetration_composes(p in profiles_strategy(), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let twice = scale_penetration(&scale_penetration(&p, a), b);
        let once = scale_penetration(&p, (1.0 + a) * (1.0 + b) - 1.0);
        prop_assert_eq!(&twice.eload_mw, &p.eload_mw);
        for (x, y) in twice.wind_avail_mw.iter().chain(&twice.pv_avail_mw).zip(once.wind_avail_mw.iter().chain(&once.pv_avail_mw)) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}
