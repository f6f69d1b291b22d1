//! Flexibility margins and insufficiency indices.
//!
//! Each step compares the flexibility the block can provide against what the
//! net load requires, in three dimensions (ramp MW/min, power MW, energy MWh)
//! and two directions. Net load is renewable availability minus electric load:
//! a negative value is a deficit and calls for upward flexibility, a positive
//! value a surplus that calls for downward flexibility.
//!
//! Provided margins per controllable unit, from its state at the start of the
//! step:
//!
//! * power: the largest net injection (up) or absorption (down) its static
//!   bounds and SOC headroom allow for one step;
//! * ramp: the power change reachable from the current operating point within
//!   one step, capped by the ramp limits, per minute;
//! * energy: dischargeable `(soc − soc_min)·C·η_gen` (up, units that can
//!   generate) or chargeable `(soc_max − soc)·C/η_load` (down, units that can
//!   absorb).
//!
//! Renewables contribute downward flexibility only, through curtailment of all
//! their available output within one step.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpc::{DispatchTrace, U_GEN_PV, U_GEN_W, U_SPILL_PV, U_SPILL_W};
use crate::units::{EnergyBlock, UnitState};

#[derive(Debug, Error, PartialEq)]
pub enum FlexError {
    #[error("index {index} out of range for series of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("trace has {trace} steps but net load has {net}")]
    LengthMismatch { trace: usize, net: usize },
    #[error("trace contains no renewable energy")]
    DivisionByZero,
}

/// Six non-negative margin magnitudes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MarginPoint {
    pub ramp_up: f64,
    pub ramp_down: f64,
    pub power_up: f64,
    pub power_down: f64,
    pub energy_up: f64,
    pub energy_down: f64,
}

impl MarginPoint {
    pub const ZERO: MarginPoint = MarginPoint {
        ramp_up: 0.0,
        ramp_down: 0.0,
        power_up: 0.0,
        power_down: 0.0,
        energy_up: 0.0,
        energy_down: 0.0,
    };

    pub const FIELDS: [&'static str; 6] = [
        "ramp_up",
        "ramp_down",
        "power_up",
        "power_down",
        "energy_up",
        "energy_down",
    ];

    pub fn to_array(self) -> [f64; 6] {
        [
            self.ramp_up,
            self.ramp_down,
            self.power_up,
            self.power_down,
            self.energy_up,
            self.energy_down,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        MarginPoint {
            ramp_up: a[0],
            ramp_down: a[1],
            power_up: a[2],
            power_down: a[3],
            energy_up: a[4],
            energy_down: a[5],
        }
    }

    /// Component-wise `max(0, required − provided)`.
    pub fn shortfall(provided: &MarginPoint, required: &MarginPoint) -> MarginPoint {
        let p = provided.to_array();
        let r = required.to_array();
        MarginPoint::from_array(std::array::from_fn(|i| (r[i] - p[i]).max(0.0)))
    }
}

/// Pass/fail of `provided ≥ required` per dimension and direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceCheck {
    pub ramp_up: bool,
    pub ramp_down: bool,
    pub power_up: bool,
    pub power_down: bool,
    pub energy_up: bool,
    pub energy_down: bool,
}

impl BalanceCheck {
    pub fn all(&self) -> bool {
        self.to_array().iter().all(|b| *b)
    }

    pub fn to_array(self) -> [bool; 6] {
        [
            self.ramp_up,
            self.ramp_down,
            self.power_up,
            self.power_down,
            self.energy_up,
            self.energy_down,
        ]
    }
}

pub fn balance_check(provided: &MarginPoint, required: &MarginPoint) -> BalanceCheck {
    BalanceCheck {
        ramp_up: provided.ramp_up >= required.ramp_up,
        ramp_down: provided.ramp_down >= required.ramp_down,
        power_up: provided.power_up >= required.power_up,
        power_down: provided.power_down >= required.power_down,
        energy_up: provided.energy_up >= required.energy_up,
        energy_down: provided.energy_down >= required.energy_down,
    }
}

pub fn net_load_at(eload_mw: f64, renewable_avail_mw: f64) -> f64 {
    renewable_avail_mw - eload_mw
}

pub fn net_load(eload_mw: &[f64], renewable_avail_mw: &[f64], t: usize) -> Result<f64, FlexError> {
    let len = eload_mw.len().min(renewable_avail_mw.len());
    if t >= len {
        return Err(FlexError::IndexOutOfRange { index: t, len });
    }
    Ok(net_load_at(eload_mw[t], renewable_avail_mw[t]))
}

/// Flexibility the block offers from `states` (aligned with `block.units`)
/// with `renewable_avail_mw` of renewable output available for curtailment.
pub fn provided_margin(block: &EnergyBlock, states: &[UnitState], renewable_avail_mw: f64, dt_h: f64) -> MarginPoint {
    let dt_min = dt_h * 60.0;
    let mut m = MarginPoint::ZERO;
    let mut has_renewable = false;
    for (unit, s) in block.units.iter().zip(states) {
        if unit.kind.is_renewable() {
            has_renewable = true;
            continue;
        }
        let (eta_gen, eta_load) = s.efficiencies(unit);
        let mut gen_cap = unit.p_gen_max_mw;
        let mut load_cap = unit.p_load_max_mw;
        if unit.has_storage() {
            let discharge = ((s.soc - unit.soc_min) * unit.capacity_mwh).max(0.0);
            let charge = ((unit.soc_max - s.soc) * unit.capacity_mwh).max(0.0);
            gen_cap = gen_cap.min(discharge / (eta_gen * dt_h));
            load_cap = load_cap.min(charge / (eta_load * dt_h));
        }
        let gen_floor = unit.p_gen_min_mw;
        let load_floor = unit.p_load_min_mw;

        m.power_up += (gen_cap - load_floor).max(0.0);
        m.power_down += (load_cap - gen_floor).max(0.0);

        m.ramp_up += unit
            .ramp_gen_max_mw_per_min
            .min((gen_cap - s.last_p_gen_mw).max(0.0) / dt_min)
            + (-unit.ramp_load_min_mw_per_min).min((s.last_p_load_mw - load_floor).max(0.0) / dt_min);
        m.ramp_down += (-unit.ramp_gen_min_mw_per_min).min((s.last_p_gen_mw - gen_floor).max(0.0) / dt_min)
            + unit
                .ramp_load_max_mw_per_min
                .min((load_cap - s.last_p_load_mw).max(0.0) / dt_min);

        if unit.has_storage() {
            if unit.p_gen_max_mw > 0.0 {
                m.energy_up += (s.soc - unit.soc_min).max(0.0) * unit.capacity_mwh * eta_gen;
            }
            if unit.p_load_max_mw > 0.0 {
                m.energy_down += (unit.soc_max - s.soc).max(0.0) * unit.capacity_mwh / eta_load;
            }
        }
    }
    if has_renewable {
        let avail = renewable_avail_mw.max(0.0);
        m.power_down += avail;
        m.ramp_down += avail / dt_min;
        m.energy_down += avail * dt_h;
    }
    m
}

/// Flexibility the net load asks for over `[t, t+1]`.
pub fn required_margin(net_load_mw: &[f64], t: usize, dt_h: f64) -> Result<MarginPoint, FlexError> {
    if t + 1 >= net_load_mw.len() {
        return Err(FlexError::IndexOutOfRange {
            index: t + 1,
            len: net_load_mw.len(),
        });
    }
    let (n0, n1) = (net_load_mw[t], net_load_mw[t + 1]);
    let ramp = (n1 - n0) / (dt_h * 60.0);
    let energy = 0.5 * (n0 + n1) * dt_h;
    Ok(MarginPoint {
        ramp_up: (-ramp).max(0.0),
        ramp_down: ramp.max(0.0),
        power_up: (-n0).max(0.0),
        power_down: n0.max(0.0),
        energy_up: (-energy).max(0.0),
        energy_down: energy.max(0.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePoint {
    pub time_min: f64,
    pub provided: MarginPoint,
    pub required: MarginPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub dt_h: f64,
    pub points: Vec<EnvelopePoint>,
}

impl Envelope {
    pub fn csv_header() -> Vec<String> {
        let mut h = vec!["time_min".to_string()];
        h.extend(MarginPoint::FIELDS.iter().map(|f| format!("provided_{f}")));
        h.extend(MarginPoint::FIELDS.iter().map(|f| format!("required_{f}")));
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::csv_header())?;
        for p in &self.points {
            let mut rec = vec![p.time_min.to_string()];
            rec.extend(p.provided.to_array().iter().map(f64::to_string));
            rec.extend(p.required.to_array().iter().map(f64::to_string));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn shortfalls(&self) -> Vec<MarginPoint> {
        self.points
            .iter()
            .map(|p| MarginPoint::shortfall(&p.provided, &p.required))
            .collect()
    }
}

/// Net load at every step of a trace, from the recorded renewable resource
/// and electric load.
pub fn trace_net_load(trace: &DispatchTrace) -> Vec<f64> {
    (0..trace.len())
        .map(|k| {
            let (w, pv) = trace.renewable_avail_mw(k);
            net_load_at(trace.steps[k].eload_mw, w + pv)
        })
        .collect()
}

/// Provided margin at step `k` of a trace, from the recorded state, the
/// previous step's controls and the recorded renewable resource.
pub fn provided_at(trace: &DispatchTrace, k: usize, dt_h: f64) -> MarginPoint {
    let (w, pv) = trace.renewable_avail_mw(k);
    provided_margin(&trace.block, &trace.unit_states(k), w + pv, dt_h)
}

/// Provided and required margins at every step. The net load is extended by
/// holding its last value, so the final step sees no ramp.
pub fn build_envelope(trace: &DispatchTrace, net_load_mw: &[f64], dt_h: f64) -> Result<Envelope, FlexError> {
    if trace.len() != net_load_mw.len() {
        return Err(FlexError::LengthMismatch {
            trace: trace.len(),
            net: net_load_mw.len(),
        });
    }
    let mut padded = net_load_mw.to_vec();
    if let Some(&last) = net_load_mw.last() {
        padded.push(last);
    }
    let points = (0..trace.len())
        .map(|k| {
            Ok(EnvelopePoint {
                time_min: trace.steps[k].time_min,
                provided: provided_at(trace, k, dt_h),
                required: required_margin(&padded, k, dt_h)?,
            })
        })
        .collect::<Result<Vec<_>, FlexError>>()?;
    Ok(Envelope { dt_h, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlexIndices {
    /// Expected ramp insufficiency, MW/min.
    pub e_ir: f64,
    /// Expected power insufficiency, MW.
    pub e_io: f64,
    /// Expected energy insufficiency, MWh.
    pub e_ic: f64,
    /// Share of steps with any shortfall.
    pub rho: f64,
    /// Number of steps with any shortfall.
    pub beta: usize,
    pub n_steps: usize,
    /// Spilled share of the available renewable energy.
    pub abandonment: f64,
    /// Mean per-step, per-unit ratio of used to available renewable energy.
    pub utilization: f64,
}

/// Indices from an already built envelope and trace.
pub fn indices_from_envelope(envelope: &Envelope, trace: &DispatchTrace) -> FlexIndices {
    let n = envelope.points.len();
    let mut beta = 0usize;
    let mut sum = [0.0f64; 3];
    for p in &envelope.points {
        if !balance_check(&p.provided, &p.required).all() {
            beta += 1;
        }
        let s = MarginPoint::shortfall(&p.provided, &p.required);
        sum[0] += s.ramp_up + s.ramp_down;
        sum[1] += s.power_up + s.power_down;
        sum[2] += s.energy_up + s.energy_down;
    }
    let rho = if n == 0 { 0.0 } else { beta as f64 / n as f64 };
    FlexIndices {
        e_ir: rho * sum[0],
        e_io: rho * sum[1],
        e_ic: rho * sum[2],
        rho,
        beta,
        n_steps: n,
        abandonment: abandonment_rate(trace).unwrap_or(0.0),
        utilization: utilization(trace).unwrap_or(0.0),
    }
}

/// Insufficiency indices of a dispatch trace. Shortfalls are summed over
/// steps and directions and weighted by the share of steps with any
/// shortfall.
pub fn compute_indices(trace: &DispatchTrace, net_load_mw: &[f64], dt_h: f64) -> Result<FlexIndices, FlexError> {
    let env = build_envelope(trace, net_load_mw, dt_h)?;
    Ok(indices_from_envelope(&env, trace))
}

fn renewable_terms(trace: &DispatchTrace) -> impl Iterator<Item = (f64, f64)> + '_ {
    let dt = trace.dt_h;
    trace.steps.iter().flat_map(move |s| {
        [
            (s.control[U_GEN_W] * dt, s.control[U_SPILL_W]),
            (s.control[U_GEN_PV] * dt, s.control[U_SPILL_PV]),
        ]
    })
}

/// Spilled renewable energy over available renewable energy.
pub fn abandonment_rate(trace: &DispatchTrace) -> Result<f64, FlexError> {
    let (spill, total) = renewable_terms(trace).fold((0.0, 0.0), |(s, t), (used, w)| (s + w, t + used + w));
    if total <= 0.0 {
        return Err(FlexError::DivisionByZero);
    }
    Ok(spill / total)
}

/// Average over steps and renewable units of used over available energy,
/// skipping terms with nothing available.
pub fn utilization(trace: &DispatchTrace) -> Result<f64, FlexError> {
    let (sum, count) = renewable_terms(trace)
        .filter(|(used, w)| used + w > 0.0)
        .fold((0.0, 0usize), |(s, c), (used, w)| (s + used / (used + w), c + 1));
    if count == 0 {
        return Err(FlexError::DivisionByZero);
    }
    Ok(sum / count as f64)
}
