//! Homogenized unit models.
//!
//! Every unit in the energy block, from a wind farm to the gas turbine, is
//! described by a single storage-balance equation
//!
//! ```text
//! C · Δsoc = η_ex·ξ − η_gen·p_gen·Δt + η_load·p_load·Δt − w
//! ```
//!
//! where `C` is the storage capacity (zero for wind and PV), `ξ` the external
//! carrier exchanged during the step, `w` the spilled (curtailed) energy and the
//! efficiencies weight the generation, load and external paths. Specialising the
//! parameters recovers the wind, PV, battery, hydrogen-chain and gas models.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on energy balance residuals, MWh.
pub const BALANCE_TOL_MWH: f64 = 1e-9;

/// Default lower heating value of hydrogen, kWh per kg.
pub const H2_KWH_PER_KG: f64 = 33.33;

/// Converts a hydrogen mass to MWh-equivalent with the given energy content.
pub fn h2_kg_to_mwh(kg: f64, kwh_per_kg: f64) -> f64 {
    kg * kwh_per_kg / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Wind,
    Pv,
    Battery,
    Hydrogen,
    Gas,
}

impl UnitKind {
    /// State-space ordering.
    pub const ALL: [UnitKind; 5] = [
        UnitKind::Wind,
        UnitKind::Pv,
        UnitKind::Battery,
        UnitKind::Hydrogen,
        UnitKind::Gas,
    ];

    pub fn is_renewable(self) -> bool {
        matches!(self, UnitKind::Wind | UnitKind::Pv)
    }

    pub fn has_storage(self) -> bool {
        !self.is_renewable()
    }

    /// Position of this kind in the state vector.
    pub fn index(self) -> usize {
        match self {
            UnitKind::Wind => 0,
            UnitKind::Pv => 1,
            UnitKind::Battery => 2,
            UnitKind::Hydrogen => 3,
            UnitKind::Gas => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UnitKind::Wind => "Wind",
            UnitKind::Pv => "Pv",
            UnitKind::Battery => "Battery",
            UnitKind::Hydrogen => "Hydrogen",
            UnitKind::Gas => "Gas",
        }
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Piecewise-linear efficiency as a function of power, clamped at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyCurve {
    /// `(power_mw, efficiency)` pairs sorted by power.
    pub points: Vec<(f64, f64)>,
}

impl EfficiencyCurve {
    pub fn eval(&self, power_mw: f64) -> f64 {
        let pts = &self.points;
        match pts.len() {
            0 => 1.0,
            1 => pts[0].1,
            _ => {
                if power_mw <= pts[0].0 {
                    return pts[0].1;
                }
                for win in pts.windows(2) {
                    let (p0, e0) = win[0];
                    let (p1, e1) = win[1];
                    if power_mw <= p1 {
                        if p1 == p0 {
                            return e1;
                        }
                        return e0 + (e1 - e0) * (power_mw - p0) / (p1 - p0);
                    }
                }
                pts[pts.len() - 1].1
            }
        }
    }
}

/// One homogenized energy unit.
///
/// Power bounds are in MW, ramp bounds in MW/min (signed: the `_min` fields are
/// the steepest allowed decrease and are normally negative), SOC values are
/// fractions of `capacity_mwh`. Hydrogen tank and gas store capacities are in
/// MWh-equivalent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitModel {
    pub kind: UnitKind,
    pub capacity_mwh: f64,
    pub eta_gen: f64,
    pub eta_load: f64,
    pub eta_ex: f64,
    pub p_gen_min_mw: f64,
    pub p_gen_max_mw: f64,
    pub p_load_min_mw: f64,
    pub p_load_max_mw: f64,
    pub ramp_gen_min_mw_per_min: f64,
    pub ramp_gen_max_mw_per_min: f64,
    pub ramp_load_min_mw_per_min: f64,
    pub ramp_load_max_mw_per_min: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
    /// Optional power-dependent generation efficiency; overrides `eta_gen`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_gen_curve: Option<EfficiencyCurve>,
    /// Optional power-dependent load efficiency; overrides `eta_load`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_load_curve: Option<EfficiencyCurve>,
}

impl UnitModel {
    /// Default parameters for each kind.
    ///
    /// Capacities follow the reference block (60 MW wind, 60 MW PV, 30 MW gas
    /// turbine, 30 MW fuel cell and electrolyzer, 120 MWh / ±10 MW battery with
    /// SOC 45 %, hydrogen SOC 40 %). Efficiencies, ramp rates, tank and gas
    /// store sizes are placeholders meant to be overridden from configuration.
    pub fn default_for(kind: UnitKind) -> Self {
        let base = UnitModel {
            kind,
            capacity_mwh: 0.0,
            eta_gen: 1.0,
            eta_load: 1.0,
            eta_ex: 1.0,
            p_gen_min_mw: 0.0,
            p_gen_max_mw: 0.0,
            p_load_min_mw: 0.0,
            p_load_max_mw: 0.0,
            ramp_gen_min_mw_per_min: 0.0,
            ramp_gen_max_mw_per_min: 0.0,
            ramp_load_min_mw_per_min: 0.0,
            ramp_load_max_mw_per_min: 0.0,
            soc_min: 0.0,
            soc_max: 1.0,
            soc_init: 0.0,
            eta_gen_curve: None,
            eta_load_curve: None,
        };
        match kind {
            UnitKind::Wind | UnitKind::Pv => UnitModel {
                p_gen_max_mw: 60.0,
                ramp_gen_min_mw_per_min: -60.0,
                ramp_gen_max_mw_per_min: 60.0,
                ..base
            },
            UnitKind::Battery => UnitModel {
                capacity_mwh: 120.0,
                eta_gen: 0.95,
                eta_load: 0.95,
                p_gen_max_mw: 10.0,
                p_load_max_mw: 10.0,
                ramp_gen_min_mw_per_min: -2.0,
                ramp_gen_max_mw_per_min: 2.0,
                ramp_load_min_mw_per_min: -2.0,
                ramp_load_max_mw_per_min: 2.0,
                soc_min: 0.1,
                soc_max: 0.9,
                soc_init: 0.45,
                ..base
            },
            UnitKind::Hydrogen => UnitModel {
                capacity_mwh: 400.0,
                eta_gen: 0.55,
                eta_load: 0.70,
                p_gen_max_mw: 30.0,
                p_load_max_mw: 30.0,
                ramp_gen_min_mw_per_min: -1.0,
                ramp_gen_max_mw_per_min: 1.0,
                ramp_load_min_mw_per_min: -1.0,
                ramp_load_max_mw_per_min: 1.0,
                soc_min: 0.05,
                soc_max: 0.95,
                soc_init: 0.40,
                ..base
            },
            UnitKind::Gas => UnitModel {
                // Sized to run at full output for the default two-week horizon
                // without any pipeline inflow.
                capacity_mwh: 5000.0,
                eta_gen: 0.40,
                p_gen_max_mw: 30.0,
                ramp_gen_min_mw_per_min: -0.5,
                ramp_gen_max_mw_per_min: 0.5,
                soc_min: 0.0,
                soc_max: 1.0,
                soc_init: 1.0,
                ..base
            },
        }
    }

    /// A unit that exists in the state space but can do nothing: no power
    /// range and a collapsed SOC window. Stands in for kinds a scenario leaves
    /// out.
    pub fn placeholder(kind: UnitKind) -> Self {
        let mut m = UnitModel::default_for(kind);
        m.capacity_mwh = if kind.has_storage() { 1.0 } else { 0.0 };
        m.eta_gen = 1.0;
        m.eta_load = 1.0;
        m.eta_ex = 1.0;
        m.p_gen_min_mw = 0.0;
        m.p_gen_max_mw = 0.0;
        m.p_load_min_mw = 0.0;
        m.p_load_max_mw = 0.0;
        m.ramp_gen_min_mw_per_min = 0.0;
        m.ramp_gen_max_mw_per_min = 0.0;
        m.ramp_load_min_mw_per_min = 0.0;
        m.ramp_load_max_mw_per_min = 0.0;
        m.soc_min = 0.0;
        m.soc_max = 0.0;
        m.soc_init = 0.0;
        m.eta_gen_curve = None;
        m.eta_load_curve = None;
        m
    }

    pub fn has_storage(&self) -> bool {
        self.capacity_mwh > 0.0
    }

    /// Generation efficiency at the given output.
    pub fn eta_gen_at(&self, p_gen_mw: f64) -> f64 {
        self.eta_gen_curve.as_ref().map_or(self.eta_gen, |c| c.eval(p_gen_mw))
    }

    /// Load efficiency at the given consumption.
    pub fn eta_load_at(&self, p_load_mw: f64) -> f64 {
        self.eta_load_curve
            .as_ref()
            .map_or(self.eta_load, |c| c.eval(p_load_mw))
    }

    pub fn has_efficiency_curves(&self) -> bool {
        self.eta_gen_curve.is_some() || self.eta_load_curve.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitState {
    pub soc: f64,
    pub last_p_gen_mw: f64,
    pub last_p_load_mw: f64,
}

impl UnitState {
    pub fn initial(model: &UnitModel) -> Self {
        UnitState {
            soc: if model.has_storage() { model.soc_init } else { 0.0 },
            last_p_gen_mw: 0.0,
            last_p_load_mw: 0.0,
        }
    }

    /// Efficiencies in force for the next step; curves are evaluated at the
    /// previous step's powers so the dynamics stay linear in the controls.
    pub fn efficiencies(&self, model: &UnitModel) -> (f64, f64) {
        (
            model.eta_gen_at(self.last_p_gen_mw),
            model.eta_load_at(self.last_p_load_mw),
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitControl {
    pub p_gen_mw: f64,
    pub p_load_mw: f64,
    pub spill_mwh: f64,
}

/// Signed external exchange for one step: positive is supply into the unit,
/// negative is external demand drawn from it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitDisturbance {
    pub xi_mwh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo).max(0.0)
    }

    /// Closest point of the interval; the lower end wins when empty.
    pub fn clamp(&self, v: f64) -> f64 {
        if self.is_empty() {
            self.lo
        } else {
            v.clamp(self.lo, self.hi)
        }
    }
}

/// Admissible controls for one step from a given state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub p_gen: Interval,
    pub p_load: Interval,
    pub spill: Interval,
    pub dp_gen: Interval,
    pub dp_load: Interval,
}

#[derive(Debug, Error, PartialEq)]
pub enum UnitError {
    #[error("{kind} energy balance violated: residual {residual_mwh:e} MWh")]
    BalanceViolation { kind: UnitKind, residual_mwh: f64 },
    #[error("{kind} state of charge {soc} leaves [{soc_min}, {soc_max}]")]
    SocOutOfRange {
        kind: UnitKind,
        soc: f64,
        soc_min: f64,
        soc_max: f64,
    },
    #[error("{kind} control `{field}` is negative ({value})")]
    NegativeControl {
        kind: UnitKind,
        field: &'static str,
        value: f64,
    },
    #[error("time step must be positive, got {0} h")]
    NonPositiveStep(f64),
}

/// Energy the unit stores during one step, MWh; the right-hand side of the
/// balance equation.
pub fn stored_energy_delta(
    model: &UnitModel,
    state: &UnitState,
    control: &UnitControl,
    dist: &UnitDisturbance,
    dt_h: f64,
) -> f64 {
    let (eta_gen, eta_load) = state.efficiencies(model);
    model.eta_ex * dist.xi_mwh - eta_gen * control.p_gen_mw * dt_h + eta_load * control.p_load_mw * dt_h
        - control.spill_mwh
}

/// Advances one unit by one dispatch interval.
pub fn step_unit(
    model: &UnitModel,
    state: &UnitState,
    control: &UnitControl,
    dist: &UnitDisturbance,
    dt_h: f64,
) -> Result<UnitState, UnitError> {
    if dt_h <= 0.0 || !dt_h.is_finite() {
        return Err(UnitError::NonPositiveStep(dt_h));
    }
    for (field, value) in [
        ("p_gen_mw", control.p_gen_mw),
        ("p_load_mw", control.p_load_mw),
        ("spill_mwh", control.spill_mwh),
    ] {
        if value < 0.0 {
            return Err(UnitError::NegativeControl {
                kind: model.kind,
                field,
                value,
            });
        }
    }

    let delta = stored_energy_delta(model, state, control, dist, dt_h);
    let soc = if model.has_storage() {
        let soc = state.soc + delta / model.capacity_mwh;
        let tol = BALANCE_TOL_MWH / model.capacity_mwh;
        if soc < model.soc_min - tol || soc > model.soc_max + tol {
            return Err(UnitError::SocOutOfRange {
                kind: model.kind,
                soc,
                soc_min: model.soc_min,
                soc_max: model.soc_max,
            });
        }
        soc
    } else {
        if delta.abs() > BALANCE_TOL_MWH {
            return Err(UnitError::BalanceViolation {
                kind: model.kind,
                residual_mwh: delta,
            });
        }
        state.soc
    };

    Ok(UnitState {
        soc,
        last_p_gen_mw: control.p_gen_mw,
        last_p_load_mw: control.p_load_mw,
    })
}

/// Static power bounds intersected with ramp limits from the last powers.
/// Returns `(p_gen, p_load)`.
pub fn ramp_limited_bounds(model: &UnitModel, state: &UnitState, dt_h: f64) -> (Interval, Interval) {
    let dt_min = dt_h * 60.0;
    let gen = Interval::new(
        model
            .p_gen_min_mw
            .max(state.last_p_gen_mw + model.ramp_gen_min_mw_per_min * dt_min),
        model
            .p_gen_max_mw
            .min(state.last_p_gen_mw + model.ramp_gen_max_mw_per_min * dt_min),
    );
    let load = Interval::new(
        model
            .p_load_min_mw
            .max(state.last_p_load_mw + model.ramp_load_min_mw_per_min * dt_min),
        model
            .p_load_max_mw
            .min(state.last_p_load_mw + model.ramp_load_max_mw_per_min * dt_min),
    );
    (gen, load)
}

/// Static power bounds intersected with ramp limits from the last powers and
/// the SOC headroom left for one step.
///
/// The SOC limits treat generation and load separately: discharging at the
/// returned `p_gen.hi` alone leaves the unit at `soc_min`, charging at
/// `p_load.hi` alone leaves it at `soc_max`. External exchange is not
/// included; callers with a nonzero `ξ` on a storage unit must account for it.
pub fn feasible_control_bounds(model: &UnitModel, state: &UnitState, dt_h: f64) -> ControlBounds {
    let dt_min = dt_h * 60.0;
    let dp_gen = Interval::new(
        model.ramp_gen_min_mw_per_min * dt_min,
        model.ramp_gen_max_mw_per_min * dt_min,
    );
    let dp_load = Interval::new(
        model.ramp_load_min_mw_per_min * dt_min,
        model.ramp_load_max_mw_per_min * dt_min,
    );
    let (mut p_gen, mut p_load) = ramp_limited_bounds(model, state, dt_h);

    if model.has_storage() {
        let (eta_gen, eta_load) = state.efficiencies(model);
        let discharge_room = ((state.soc - model.soc_min) * model.capacity_mwh).max(0.0);
        let charge_room = ((model.soc_max - state.soc) * model.capacity_mwh).max(0.0);
        p_gen.hi = p_gen.hi.min(discharge_room / (eta_gen * dt_h));
        p_load.hi = p_load.hi.min(charge_room / (eta_load * dt_h));
    }

    let spill = if model.kind.is_renewable() {
        // Everything the resource offers may be spilled; the upper end is
        // resolved against ξ by [`spill_bounds`].
        Interval::new(0.0, f64::INFINITY)
    } else {
        Interval::new(0.0, 0.0)
    };

    ControlBounds {
        p_gen,
        p_load,
        spill,
        dp_gen,
        dp_load,
    }
}

/// Spill bounds once the step's external supply is known.
pub fn spill_bounds(model: &UnitModel, dist: &UnitDisturbance) -> Interval {
    if dist.xi_mwh > 0.0 && model.kind.is_renewable() {
        Interval::new(0.0, model.eta_ex * dist.xi_mwh)
    } else {
        Interval::new(0.0, 0.0)
    }
}

/// The part of an external exchange a storage unit can accept this step
/// without leaving its SOC window, given the controls already chosen.
///
/// Demand that would drain the unit below `soc_min` is served only partially;
/// supply that would overfill it is only partially taken.
pub fn admissible_exchange(model: &UnitModel, state: &UnitState, control: &UnitControl, xi_mwh: f64, dt_h: f64) -> f64 {
    if !model.has_storage() || model.eta_ex <= 0.0 {
        return xi_mwh;
    }
    let internal = stored_energy_delta(model, state, control, &UnitDisturbance::default(), dt_h);
    let energy = state.soc * model.capacity_mwh + internal;
    if xi_mwh < 0.0 {
        let room = (energy - model.soc_min * model.capacity_mwh).max(0.0) / model.eta_ex;
        xi_mwh.max(-room)
    } else {
        let room = (model.soc_max * model.capacity_mwh - energy).max(0.0) / model.eta_ex;
        xi_mwh.min(room)
    }
}

/// One rule broken by a [`UnitModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every [`UnitModel`] invariant; an empty list means the model is valid.
pub fn validate_unit(model: &UnitModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: &str, rule: String| {
        out.push(Violation {
            field: field.to_string(),
            rule,
        })
    };
    let kind = model.kind;

    let numbers = [
        ("capacity_mwh", model.capacity_mwh),
        ("eta_gen", model.eta_gen),
        ("eta_load", model.eta_load),
        ("eta_ex", model.eta_ex),
        ("p_gen_min_mw", model.p_gen_min_mw),
        ("p_gen_max_mw", model.p_gen_max_mw),
        ("p_load_min_mw", model.p_load_min_mw),
        ("p_load_max_mw", model.p_load_max_mw),
        ("ramp_gen_min_mw_per_min", model.ramp_gen_min_mw_per_min),
        ("ramp_gen_max_mw_per_min", model.ramp_gen_max_mw_per_min),
        ("ramp_load_min_mw_per_min", model.ramp_load_min_mw_per_min),
        ("ramp_load_max_mw_per_min", model.ramp_load_max_mw_per_min),
        ("soc_min", model.soc_min),
        ("soc_max", model.soc_max),
        ("soc_init", model.soc_init),
    ];
    for (field, v) in numbers {
        if !v.is_finite() {
            push(field, "value must be finite".into());
        }
    }

    if kind.is_renewable() {
        if model.capacity_mwh != 0.0 {
            push("capacity_mwh", format!("{kind} must have zero storage capacity"));
        }
        if model.p_load_max_mw != 0.0 {
            push(
                "p_load_max_mw",
                format!("{kind} is a pure generator; p_load_max_mw must be 0"),
            );
        }
    } else if !(model.capacity_mwh > 0.0) {
        push("capacity_mwh", format!("{kind} must have positive storage capacity"));
    }

    for (field, eta) in [
        ("eta_gen", model.eta_gen),
        ("eta_load", model.eta_load),
        ("eta_ex", model.eta_ex),
    ] {
        if !(eta > 0.0 && eta <= 1.0) {
            push(field, "efficiency must lie in (0,1]".into());
        }
    }
    for (field, curve) in [
        ("eta_gen_curve", &model.eta_gen_curve),
        ("eta_load_curve", &model.eta_load_curve),
    ] {
        if let Some(curve) = curve {
            if curve.points.is_empty() {
                push(field, "curve needs at least one point".into());
            }
            if curve.points.windows(2).any(|w| w[1].0 < w[0].0) {
                push(field, "curve points must be sorted by power".into());
            }
            if curve.points.iter().any(|&(_, e)| !(e > 0.0 && e <= 1.0)) {
                push(field, "efficiency must lie in (0,1]".into());
            }
        }
    }

    if model.p_gen_min_mw < 0.0 {
        push("p_gen_min_mw", "power bounds must be non-negative".into());
    }
    if model.p_load_min_mw < 0.0 {
        push("p_load_min_mw", "power bounds must be non-negative".into());
    }
    if model.p_gen_min_mw > model.p_gen_max_mw {
        push("p_gen_min_mw", "p_gen_min_mw must not exceed p_gen_max_mw".into());
    }
    if model.p_load_min_mw > model.p_load_max_mw {
        push("p_load_min_mw", "p_load_min_mw must not exceed p_load_max_mw".into());
    }

    if !(model.ramp_gen_min_mw_per_min <= 0.0 && model.ramp_gen_max_mw_per_min >= 0.0) {
        push(
            "ramp_gen_min_mw_per_min",
            "generation ramp bounds must bracket zero (min <= 0 <= max)".into(),
        );
    }
    if !(model.ramp_load_min_mw_per_min <= 0.0 && model.ramp_load_max_mw_per_min >= 0.0) {
        push(
            "ramp_load_min_mw_per_min",
            "load ramp bounds must bracket zero (min <= 0 <= max)".into(),
        );
    }

    if model.has_storage() {
        if !(0.0..=1.0).contains(&model.soc_min) || !(0.0..=1.0).contains(&model.soc_max) {
            push("soc_min", "SOC bounds must lie in [0,1]".into());
        }
        if model.soc_min > model.soc_max {
            push("soc_min", "soc_min must not exceed soc_max".into());
        }
        if model.soc_init < model.soc_min || model.soc_init > model.soc_max {
            push("soc_init", "soc_init must lie in [soc_min, soc_max]".into());
        }
    }
    out
}

/// Ordered collection of units forming one energy block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBlock {
    pub units: Vec<UnitModel>,
}

impl EnergyBlock {
    pub fn new(units: Vec<UnitModel>) -> Self {
        EnergyBlock { units }
    }

    /// All five kinds with default parameters.
    pub fn reference() -> Self {
        EnergyBlock::new(UnitKind::ALL.iter().map(|&k| UnitModel::default_for(k)).collect())
    }

    pub fn unit(&self, kind: UnitKind) -> Option<&UnitModel> {
        self.units.iter().find(|u| u.kind == kind)
    }

    pub fn contains(&self, kind: UnitKind) -> bool {
        self.unit(kind).is_some()
    }

    /// One unit per kind in state-space order, with inert placeholders for
    /// absent kinds. Duplicate kinds keep the first occurrence.
    pub fn completed(&self) -> EnergyBlock {
        EnergyBlock::new(
            UnitKind::ALL
                .iter()
                .map(|&k| self.unit(k).cloned().unwrap_or_else(|| UnitModel::placeholder(k)))
                .collect(),
        )
    }

    pub fn initial_states(&self) -> Vec<UnitState> {
        self.units.iter().map(UnitState::initial).collect()
    }

    pub fn validate(&self) -> Vec<(UnitKind, Violation)> {
        self.units
            .iter()
            .flat_map(|u| validate_unit(u).into_iter().map(move |v| (u.kind, v)))
            .collect()
    }
}
