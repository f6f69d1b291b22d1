use std::path::Path;

use flexblock::flexibility::compute_indices;
use flexblock::mpc::{
    run_receding_horizon, DispatchTrace, ForecastMode, MpcConfig, MpcError, StepStatus, U_GEN_B, U_GEN_F, U_GEN_H,
    U_GEN_PV, U_GEN_W, U_LOAD_B, U_LOAD_H, U_SPILL_PV, U_SPILL_W,
};
use flexblock::scenario::{run_scenario, Preset, Profiles, ScenarioSpec};
use flexblock::units::{step_unit, EnergyBlock, UnitControl, UnitDisturbance, UnitKind};

fn constant_profiles(n: usize, wind: f64, load: f64) -> Profiles {
    Profiles {
        step_minutes: 5.0,
        wind_avail_mw: vec![wind; n],
        pv_avail_mw: vec![0.0; n],
        eload_mw: vec![load; n],
        h2_demand_mwh: vec![0.0; n],
        gas_supply_mwh: vec![0.0; n],
    }
}

fn replay(trace: &DispatchTrace) -> f64 {
    let mut worst = 0.0_f64;
    for k in 0..trace.len() {
        let states = trace.unit_states(k);
        let s = &trace.steps[k];
        let u = &s.control;
        let controls = [
            (u[U_GEN_W], 0.0, u[U_SPILL_W]),
            (u[U_GEN_PV], 0.0, u[U_SPILL_PV]),
            (u[U_GEN_B], u[U_LOAD_B], 0.0),
            (u[U_GEN_H], u[U_LOAD_H], 0.0),
            (u[U_GEN_F], 0.0, 0.0),
        ];
        let next = if k + 1 < trace.len() {
            trace.steps[k + 1].state
        } else {
            trace.final_state
        };
        for (i, unit) in trace.block.units.iter().enumerate() {
            let xi = match unit.kind {
                UnitKind::Wind | UnitKind::Pv => s.disturbance[i] / unit.eta_ex,
                UnitKind::Battery => 0.0,
                UnitKind::Hydrogen => s.disturbance[2] * unit.capacity_mwh / unit.eta_ex,
                UnitKind::Gas => s.disturbance[3] * unit.capacity_mwh / unit.eta_ex,
            };
            let c = UnitControl {
                p_gen_mw: controls[i].0,
                p_load_mw: controls[i].1,
                spill_mwh: controls[i].2,
            };
            let out = step_unit(unit, &states[i], &c, &UnitDisturbance { xi_mwh: xi }, trace.dt_h).unwrap();
            worst = worst.max((out.soc - next[i]).abs());
        }
    }
    worst
}

#[test]
fn steady_wind_surplus_charges_storage() {
    let block = EnergyBlock::reference();
    let cfg = MpcConfig::default();
    let trace = run_receding_horizon(&block, &constant_profiles(36, 45.0, 30.0), 36, &cfg).unwrap();
    assert!(trace.steps.iter().all(|s| s.status == StepStatus::Optimal));
    assert!(trace.steps.iter().all(|s| s.shed_mw < 1e-6));
    for s in &trace.steps {
        assert!(s.balance_residual_mw().abs() <= 1e-6);
    }
    assert!(trace.final_state[2] > 0.45 || trace.final_state[3] > 0.40);
    assert!(replay(&trace) <= 1e-9);
}

#[test]
fn calm_deficit_is_covered_by_dispatchable_units() {
    let block = EnergyBlock::reference();
    let trace = run_receding_horizon(&block, &constant_profiles(24, 0.0, 20.0), 24, &MpcConfig::default()).unwrap();
    let late = &trace.steps[12..];
    assert!(
        late.iter().all(|s| s.shed_mw < 1e-6),
        "{:?}",
        late.iter().map(|s| s.shed_mw).collect::<Vec<_>>()
    );
    assert!(replay(&trace) <= 1e-9);
}

#[test]
fn missing_unit_is_rejected() {
    let block = EnergyBlock::new(EnergyBlock::reference().units.into_iter().take(4).collect());
    let err = run_receding_horizon(&block, &constant_profiles(4, 1.0, 1.0), 4, &MpcConfig::default()).unwrap_err();
    assert!(matches!(err, MpcError::MissingUnit(UnitKind::Gas)), "{err:?}");
}

#[test]
fn short_profiles_are_rejected() {
    let err = run_receding_horizon(
        &EnergyBlock::reference(),
        &constant_profiles(4, 1.0, 1.0),
        5,
        &MpcConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, MpcError::InsufficientProfiles { .. }));
}

#[test]
fn persistence_forecast_runs_and_replays() {
    let spec = ScenarioSpec::preset(Preset::S3, 6.0, 3);
    let mut spec = spec;
    spec.mpc.forecast = ForecastMode::Persistence;
    let profiles = spec.profiles(Path::new("."), spec.seed).unwrap();
    let run = run_scenario(&spec, &profiles).unwrap();
    assert_eq!(run.trace.len(), 72);
    assert!(replay(&run.trace) <= 1e-9);
}

#[test]
fn subset_blocks_replay_and_round_trip() {
    for preset in [Preset::S1, Preset::S2] {
        let spec = ScenarioSpec::preset(preset, 6.0, 11);
        let profiles = spec.profiles(Path::new("."), spec.seed).unwrap();
        let run = run_scenario(&spec, &profiles).unwrap();
        assert!(replay(&run.trace) <= 1e-9);

        let mut buf = Vec::new();
        run.trace.write_csv(&mut buf).unwrap();
        let back = DispatchTrace::read_csv(buf.as_slice(), run.trace.block.clone(), run.trace.dt_h).unwrap();
        assert_eq!(back.steps, run.trace.steps);
        let net = profiles.truncated(run.steps).net_load_mw();
        assert_eq!(
            compute_indices(&back, &net, back.dt_h).unwrap(),
            compute_indices(&run.trace, &net, run.trace.dt_h).unwrap()
        );
    }
}

#[test]
fn richer_blocks_are_more_flexible() {
    let mut out = Vec::new();
    for preset in [Preset::S1, Preset::S3] {
        let spec = ScenarioSpec::preset(preset, 12.0, 5);
        let profiles = spec.profiles(Path::new("."), spec.seed).unwrap();
        let run = run_scenario(&spec, &profiles).unwrap();
        let net = profiles.truncated(run.steps).net_load_mw();
        out.push(compute_indices(&run.trace, &net, run.trace.dt_h).unwrap());
    }
    assert!(out[0].e_io > out[1].e_io);
    assert!(out[0].e_ic >= out[1].e_ic);
}
