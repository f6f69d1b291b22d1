//! Discrete state space, condensed MPC and the receding-horizon dispatch loop.
//!
//! State `x = (x_w, x_pv, x_b, x_h, x_f)`, control
//! `u = (p_gen_w, p_gen_pv, p_gen_b, p_load_b, p_gen_h, p_load_h, p_gen_f, w_w, w_pv)`,
//! disturbance `d = (ξ_w, ξ_pv, ξ_h, ξ_f)` and tracked output `y = (x_b, x_h)`:
//!
//! ```text
//! x(k+1) = A·x(k) + B·u(k) + D·d(k)
//! y(k)   = C·x(k)
//! ```
//!
//! The disturbance vector is carried in state-space units: renewable entries
//! are the resource energy `η_ex·ξ` in MWh, storage entries the SOC change
//! `η_ex·ξ/C`, so `D` is a pure selector. Renewable rows have no memory
//! (`A` is zero there) and are neither tracked nor constrained; the resource
//! balance `η_gen·p_gen·Δt + w = η_ex·ξ` is imposed through
//! [`StateSpace::resource`] instead.
//!
//! The MPC decision variable is the stacked increment sequence
//! `ΔU = (Δu(k), …, Δu(k+N_c−1))`, extended with one load-shedding and one
//! surplus slack per control step.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qpsolver::{QpError, QpSettings, QpSolution, QpSolver, QpStatus};
use crate::scenario::Profiles;
use crate::units::{
    admissible_exchange, ramp_limited_bounds, step_unit, EnergyBlock, UnitControl, UnitDisturbance, UnitError,
    UnitKind, UnitModel, UnitState,
};

pub const N_X: usize = 5;
pub const N_U: usize = 9;
pub const N_D: usize = 4;
pub const N_Y: usize = 2;
/// Constrained outputs: every storage SOC.
pub const N_CON: usize = 3;

pub const X_W: usize = 0;
pub const X_PV: usize = 1;
pub const X_B: usize = 2;
pub const X_H: usize = 3;
pub const X_F: usize = 4;

pub const U_GEN_W: usize = 0;
pub const U_GEN_PV: usize = 1;
pub const U_GEN_B: usize = 2;
pub const U_LOAD_B: usize = 3;
pub const U_GEN_H: usize = 4;
pub const U_LOAD_H: usize = 5;
pub const U_GEN_F: usize = 6;
pub const U_SPILL_W: usize = 7;
pub const U_SPILL_PV: usize = 8;

pub const D_W: usize = 0;
pub const D_PV: usize = 1;
pub const D_H: usize = 2;
pub const D_F: usize = 3;

/// Control columns injecting power into the bus.
pub const GEN_COLUMNS: [usize; 5] = [U_GEN_W, U_GEN_PV, U_GEN_B, U_GEN_H, U_GEN_F];
/// Control columns drawing power from the bus.
pub const LOAD_COLUMNS: [usize; 2] = [U_LOAD_B, U_LOAD_H];

pub const STATE_NAMES: [&str; N_X] = ["x_w", "x_pv", "x_b", "x_h", "x_f"];
pub const CONTROL_NAMES: [&str; N_U] = [
    "p_gen_w", "p_gen_pv", "p_gen_b", "p_load_b", "p_gen_h", "p_load_h", "p_gen_f", "w_w", "w_pv",
];
pub const DISTURBANCE_NAMES: [&str; N_D] = ["d_w", "d_pv", "d_h", "d_f"];

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("energy block has no {0} unit")]
    MissingUnit(UnitKind),
    #[error("energy block has more than one {0} unit")]
    DuplicateUnit(UnitKind),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid MPC configuration: {0}")]
    InvalidConfig(String),
    #[error("profiles have {available} steps, run needs {needed}")]
    InsufficientProfiles { needed: usize, available: usize },
    #[error("profile step is {profile_min} min but the controller step is {config_min} min")]
    StepMismatch { profile_min: f64, config_min: f64 },
    #[error("step {step}: {source}")]
    Unit {
        step: usize,
        #[source]
        source: UnitError,
    },
    #[error("step {step}: relaxation ladder exhausted: {reason}")]
    LadderExhausted { step: usize, reason: String },
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Tracked outputs `(x_b, x_h)`.
    pub c_out: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Constrained outputs `(x_b, x_h, x_f)`.
    pub c_con: DMatrix<f64>,
    /// Renewable resource drawn by a control, used plus spilled:
    /// `resource·u = (d_w, d_pv)` for a balanced step.
    pub resource: DMatrix<f64>,
    pub dt_h: f64,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub du_min: DVector<f64>,
    pub du_max: DVector<f64>,
    /// SOC bounds of the constrained outputs.
    pub x_min: DVector<f64>,
    pub x_max: DVector<f64>,
}

/// Units of `block` in state-space order. Fails unless each kind appears once.
pub fn ordered_units(block: &EnergyBlock) -> Result<[&UnitModel; 5], MpcError> {
    let mut slots: [Option<&UnitModel>; 5] = [None; 5];
    for unit in &block.units {
        let i = unit.kind.index();
        if slots[i].is_some() {
            return Err(MpcError::DuplicateUnit(unit.kind));
        }
        slots[i] = Some(unit);
    }
    let mut out = [&block.units[0]; 5];
    for kind in UnitKind::ALL {
        out[kind.index()] = slots[kind.index()].ok_or(MpcError::MissingUnit(kind))?;
    }
    Ok(out)
}

/// State space with constant (nominal) efficiencies.
pub fn build_state_space(block: &EnergyBlock, dt_h: f64) -> Result<StateSpace, MpcError> {
    let units = ordered_units(block)?;
    let etas: Vec<(f64, f64)> = units.iter().map(|u| (u.eta_gen, u.eta_load)).collect();
    Ok(assemble_state_space(&units, &etas, dt_h))
}

/// State space with efficiencies evaluated at the units' previous powers.
/// Identical to [`build_state_space`] unless a unit carries efficiency curves.
pub fn build_state_space_at(block: &EnergyBlock, states: &[UnitState], dt_h: f64) -> Result<StateSpace, MpcError> {
    let units = ordered_units(block)?;
    if states.len() != N_X {
        return Err(MpcError::DimensionMismatch(format!(
            "{} unit states for a {N_X}-unit block",
            states.len()
        )));
    }
    let etas: Vec<(f64, f64)> = units.iter().map(|u| states[u.kind.index()].efficiencies(u)).collect();
    Ok(assemble_state_space(&units, &etas, dt_h))
}

fn assemble_state_space(units: &[&UnitModel; 5], etas: &[(f64, f64)], dt_h: f64) -> StateSpace {
    let mut a = DMatrix::zeros(N_X, N_X);
    for i in [X_B, X_H, X_F] {
        a[(i, i)] = 1.0;
    }

    let mut b = DMatrix::zeros(N_X, N_U);
    b[(X_W, U_GEN_W)] = -etas[X_W].0 * dt_h;
    b[(X_W, U_SPILL_W)] = 1.0;
    b[(X_PV, U_GEN_PV)] = -etas[X_PV].0 * dt_h;
    b[(X_PV, U_SPILL_PV)] = 1.0;
    let cb = units[X_B].capacity_mwh;
    b[(X_B, U_GEN_B)] = -etas[X_B].0 * dt_h / cb;
    b[(X_B, U_LOAD_B)] = etas[X_B].1 * dt_h / cb;
    let ch = units[X_H].capacity_mwh;
    b[(X_H, U_GEN_H)] = -etas[X_H].0 * dt_h / ch;
    b[(X_H, U_LOAD_H)] = etas[X_H].1 * dt_h / ch;
    let cf = units[X_F].capacity_mwh;
    b[(X_F, U_GEN_F)] = -etas[X_F].0 * dt_h / cf;

    let mut c_out = DMatrix::zeros(N_Y, N_X);
    c_out[(0, X_B)] = 1.0;
    c_out[(1, X_H)] = 1.0;

    let mut d = DMatrix::zeros(N_X, N_D);
    d[(X_W, D_W)] = 1.0;
    d[(X_PV, D_PV)] = 1.0;
    d[(X_H, D_H)] = 1.0;
    d[(X_F, D_F)] = 1.0;

    let mut c_con = DMatrix::zeros(N_CON, N_X);
    c_con[(0, X_B)] = 1.0;
    c_con[(1, X_H)] = 1.0;
    c_con[(2, X_F)] = 1.0;

    let mut resource = DMatrix::zeros(2, N_U);
    resource[(0, U_GEN_W)] = etas[X_W].0 * dt_h;
    resource[(0, U_SPILL_W)] = 1.0;
    resource[(1, U_GEN_PV)] = etas[X_PV].0 * dt_h;
    resource[(1, U_SPILL_PV)] = 1.0;

    let mut u_min = DVector::zeros(N_U);
    let mut u_max = DVector::zeros(N_U);
    let mut du_min = DVector::zeros(N_U);
    let mut du_max = DVector::zeros(N_U);
    let gen_cols = [
        (X_W, U_GEN_W),
        (X_PV, U_GEN_PV),
        (X_B, U_GEN_B),
        (X_H, U_GEN_H),
        (X_F, U_GEN_F),
    ];
    let dt_min = dt_h * 60.0;
    for (unit, col) in gen_cols {
        let m = units[unit];
        u_min[col] = m.p_gen_min_mw;
        u_max[col] = m.p_gen_max_mw;
        du_min[col] = m.ramp_gen_min_mw_per_min * dt_min;
        du_max[col] = m.ramp_gen_max_mw_per_min * dt_min;
    }
    for (unit, col) in [(X_B, U_LOAD_B), (X_H, U_LOAD_H)] {
        let m = units[unit];
        u_min[col] = m.p_load_min_mw;
        u_max[col] = m.p_load_max_mw;
        du_min[col] = m.ramp_load_min_mw_per_min * dt_min;
        du_max[col] = m.ramp_load_max_mw_per_min * dt_min;
    }
    // Spill is bounded per step by the resource itself.
    for col in [U_SPILL_W, U_SPILL_PV] {
        u_min[col] = 0.0;
        u_max[col] = f64::INFINITY;
        du_min[col] = f64::NEG_INFINITY;
        du_max[col] = f64::INFINITY;
    }

    let x_min = DVector::from_iterator(N_CON, [X_B, X_H, X_F].iter().map(|&i| units[i].soc_min));
    let x_max = DVector::from_iterator(N_CON, [X_B, X_H, X_F].iter().map(|&i| units[i].soc_max));

    StateSpace {
        a,
        b,
        c_out,
        d,
        c_con,
        resource,
        dt_h,
        u_min,
        u_max,
        du_min,
        du_max,
        x_min,
        x_max,
    }
}

/// Disturbance vector in state-space units from raw exchanges `ξ` (MWh per step).
pub fn disturbance_vector(block: &EnergyBlock, xi: [f64; N_D]) -> Result<DVector<f64>, MpcError> {
    let u = ordered_units(block)?;
    Ok(DVector::from_row_slice(&[
        u[X_W].eta_ex * xi[D_W],
        u[X_PV].eta_ex * xi[D_PV],
        u[X_H].eta_ex * xi[D_H] / u[X_H].capacity_mwh,
        u[X_F].eta_ex * xi[D_F] / u[X_F].capacity_mwh,
    ]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ForecastMode {
    /// The controller sees the true profiles over the horizon.
    #[default]
    Perfect,
    /// Every future step repeats the current value.
    Persistence,
}

impl std::str::FromStr for ForecastMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "perfect" => Ok(ForecastMode::Perfect),
            "persistence" => Ok(ForecastMode::Persistence),
            other => Err(format!(
                "unknown forecast mode `{other}` (expected perfect|persistence)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub n_p: usize,
    pub n_c: usize,
    pub dt_h: f64,
    /// Output-error weights for `(x_b, x_h)`.
    pub q_weights: Vec<f64>,
    /// Input-increment weights, one per control.
    pub r_weights: Vec<f64>,
    /// Constant SOC reference for `(x_b, x_h)`; defaults to the units' `soc_init`.
    pub y_ref: Option<[f64; 2]>,
    /// Linear cost per MW of shed load and per step.
    pub shed_penalty: f64,
    /// Linear cost per MW of unabsorbable surplus and per step.
    pub surplus_penalty: f64,
    /// Linear cost per MWh of spilled renewable energy.
    pub spill_weight: f64,
    /// Quadratic weight on the shed and surplus slacks.
    pub slack_weight: f64,
    /// SOC widening used when the bounded problem is infeasible.
    pub soc_relaxation: f64,
    pub forecast: ForecastMode,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            n_p: 12,
            n_c: 6,
            dt_h: 5.0 / 60.0,
            q_weights: vec![1.0, 1.0],
            r_weights: vec![0.01; N_U],
            y_ref: None,
            shed_penalty: 1e4,
            surplus_penalty: 1e4,
            spill_weight: 1.0,
            slack_weight: 0.01,
            soc_relaxation: 0.01,
            forecast: ForecastMode::Perfect,
            qp_tol: 1e-6,
            qp_max_iter: 2000,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |m: String| Err(MpcError::InvalidConfig(m));
        if self.n_c < 1 || self.n_c > self.n_p {
            return bad(format!(
                "need 1 <= n_c <= n_p, got n_c = {}, n_p = {}",
                self.n_c, self.n_p
            ));
        }
        if !(self.dt_h > 0.0 && self.dt_h.is_finite()) {
            return bad(format!("dt_h must be positive, got {}", self.dt_h));
        }
        if self.q_weights.len() != N_Y {
            return bad(format!("q_weights needs {N_Y} entries, got {}", self.q_weights.len()));
        }
        if self.r_weights.len() != N_U {
            return bad(format!("r_weights needs {N_U} entries, got {}", self.r_weights.len()));
        }
        let weights = self.q_weights.iter().chain(&self.r_weights);
        if weights.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("weights must be finite and non-negative".into());
        }
        if self.q_weights.iter().chain(&self.r_weights).all(|w| *w == 0.0) {
            return bad("Q and R must not both be zero".into());
        }
        for (name, v) in [
            ("shed_penalty", self.shed_penalty),
            ("surplus_penalty", self.surplus_penalty),
            ("spill_weight", self.spill_weight),
            ("soc_relaxation", self.soc_relaxation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.slack_weight.is_finite() && self.slack_weight > 0.0) {
            return bad("slack_weight must be positive".into());
        }
        if !(self.qp_tol > 0.0) || self.qp_max_iter == 0 {
            return bad("qp_tol and qp_max_iter must be positive".into());
        }
        Ok(())
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.q_weights))
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.r_weights))
    }
}

/// Stacked prediction of one output map over the horizon:
/// `Y = m_x·x + m_u·u(k−1) + m_delta_u·ΔU + m_d·D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condensed {
    pub m_x: DMatrix<f64>,
    pub m_u: DMatrix<f64>,
    pub m_delta_u: DMatrix<f64>,
    pub m_d: DMatrix<f64>,
}

/// Condenses `x(k+1) = A·x + B·u + D·d`, `y = C·x` over `n_p` steps with `n_c`
/// free increments; the last increment holds for the rest of the horizon.
pub fn condense(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    n_p: usize,
    n_c: usize,
) -> Condensed {
    let nx = a.nrows();
    let nu = b.ncols();
    let nd = d.ncols();
    let ny = c.nrows();

    // C·A^i for i = 0..=n_p.
    let mut ca = Vec::with_capacity(n_p + 1);
    let mut pow = DMatrix::identity(nx, nx);
    for _ in 0..=n_p {
        ca.push(c * &pow);
        pow = a * pow;
    }
    let cab: Vec<DMatrix<f64>> = ca.iter().map(|m| m * b).collect();
    let cad: Vec<DMatrix<f64>> = ca.iter().map(|m| m * d).collect();
    // S[m] = Σ_{i=0}^{m} C·A^i·B
    let mut s = Vec::with_capacity(n_p);
    let mut acc = DMatrix::zeros(ny, nu);
    for m in cab.iter().take(n_p) {
        acc += m;
        s.push(acc.clone());
    }

    let mut m_x = DMatrix::zeros(ny * n_p, nx);
    let mut m_u = DMatrix::zeros(ny * n_p, nu);
    let mut m_delta_u = DMatrix::zeros(ny * n_p, nu * n_c);
    let mut m_d = DMatrix::zeros(ny * n_p, nd * n_p);
    for j in 1..=n_p {
        let r = (j - 1) * ny;
        m_x.view_mut((r, 0), (ny, nx)).copy_from(&ca[j]);
        m_u.view_mut((r, 0), (ny, nu)).copy_from(&s[j - 1]);
        for l in 1..=n_c.min(j) {
            m_delta_u.view_mut((r, (l - 1) * nu), (ny, nu)).copy_from(&s[j - l]);
        }
        for i in 0..j {
            m_d.view_mut((r, i * nd), (ny, nd)).copy_from(&cad[j - 1 - i]);
        }
    }
    Condensed {
        m_x,
        m_u,
        m_delta_u,
        m_d,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    pub m_x1: DMatrix<f64>,
    pub m_u1: DMatrix<f64>,
    pub m_delta_u1: DMatrix<f64>,
    pub m_d1: DMatrix<f64>,
    pub m_x2: DMatrix<f64>,
    pub m_u2: DMatrix<f64>,
    pub m_delta_u2: DMatrix<f64>,
    pub m_d2: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub psi: DMatrix<f64>,
}

pub fn build_prediction_matrices(ss: &StateSpace, cfg: &MpcConfig) -> PredictionMatrices {
    let track = condense(&ss.a, &ss.b, &ss.c_out, &ss.d, cfg.n_p, cfg.n_c);
    let con = condense(&ss.a, &ss.b, &ss.c_con, &ss.d, cfg.n_p, cfg.n_c);
    let nu = ss.b.ncols();
    let n_c = cfg.n_c;
    let mut lambda = DMatrix::zeros(nu * n_c, nu * n_c);
    let mut psi = DMatrix::zeros(nu * n_c, nu);
    let eye = DMatrix::<f64>::identity(nu, nu);
    for j in 0..n_c {
        psi.view_mut((j * nu, 0), (nu, nu)).copy_from(&eye);
        for l in 0..=j {
            lambda.view_mut((j * nu, l * nu), (nu, nu)).copy_from(&eye);
        }
    }
    PredictionMatrices {
        m_x1: track.m_x,
        m_u1: track.m_u,
        m_delta_u1: track.m_delta_u,
        m_d1: track.m_d,
        m_x2: con.m_x,
        m_u2: con.m_u,
        m_delta_u2: con.m_delta_u,
        m_d2: con.m_d,
        lambda,
        psi,
    }
}

/// `minimize ½zᵀHz + fᵀz  s.t.  a_ineq·z ≤ b_ineq, a_eq·z = b_eq` over
/// `z = (ΔU, shed_0..shed_{N_c−1}, surplus_0..surplus_{N_c−1})`.
///
/// Inequality rows, in order: `Π`, `−Π`, `Λ`, `−Λ`, `M_Δu2`, `−M_Δu2`, then
/// non-negativity of the slacks. Equality rows come in triples per control
/// step: power balance, wind balance, PV balance. Blocks without any
/// controllable range add one row per step and fixed control.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub n_c: usize,
}

impl QpProblem {
    pub fn n_delta_u(&self) -> usize {
        N_U * self.n_c
    }

    /// First-step increment `Δu(k)` from a solution vector.
    pub fn first_move(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(0, N_U).into_owned()
    }

    pub fn shed(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(self.n_delta_u(), self.n_c).into_owned()
    }

    pub fn surplus(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(self.n_delta_u() + self.n_c, self.n_c).into_owned()
    }
}

/// Row offsets of each inequality block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IneqLayout {
    pub pi: usize,
    pub neg_pi: usize,
    pub lambda: usize,
    pub neg_lambda: usize,
    pub out: usize,
    pub neg_out: usize,
    pub slack: usize,
    pub total: usize,
}

impl IneqLayout {
    pub fn new(n_p: usize, n_c: usize) -> Self {
        let ndu = N_U * n_c;
        let nout = N_CON * n_p;
        let pi = 0;
        let neg_pi = pi + ndu;
        let lambda = neg_pi + ndu;
        let neg_lambda = lambda + ndu;
        let out = neg_lambda + ndu;
        let neg_out = out + nout;
        let slack = neg_out + nout;
        IneqLayout {
            pi,
            neg_pi,
            lambda,
            neg_lambda,
            out,
            neg_out,
            slack,
            total: slack + 2 * n_c,
        }
    }
}

/// `(f, b_ineq, b_eq)` of one step.
pub type QpVectors = (DVector<f64>, DVector<f64>, DVector<f64>);

/// The parts of the QP that do not change between steps.
#[derive(Debug, Clone)]
pub struct QpStructure {
    pub h: DMatrix<f64>,
    pub a_ineq: DMatrix<f64>,
    pub a_eq: DMatrix<f64>,
    pub layout: IneqLayout,
    /// Controls whose static bounds coincide. Their moves are pinned by
    /// equality rows appended after the balance triples, and their box and
    /// increment rows are left unbounded.
    pub fixed_columns: Vec<usize>,
    /// Constrained outputs of units with only fixed controls; their SOC rows
    /// are left unbounded since no move can affect them.
    pub fixed_outputs: [bool; N_CON],
    n_p: usize,
    n_c: usize,
}

impl QpStructure {
    pub fn new(ss: &StateSpace, pred: &PredictionMatrices, cfg: &MpcConfig) -> Self {
        let (n_p, n_c) = (cfg.n_p, cfg.n_c);
        let ndu = N_U * n_c;
        let nz = ndu + 2 * n_c;

        let q = DMatrix::from_diagonal(&DVector::from_iterator(
            N_Y * n_p,
            (0..n_p).flat_map(|_| cfg.q_weights.iter().copied()),
        ));
        let r = DMatrix::from_diagonal(&DVector::from_iterator(
            ndu,
            (0..n_c).flat_map(|_| cfg.r_weights.iter().copied()),
        ));
        let m = &pred.m_delta_u1;
        let h_du = (m.transpose() * &q * m + r) * 2.0;
        let mut h = DMatrix::zeros(nz, nz);
        h.view_mut((0, 0), (ndu, ndu)).copy_from(&h_du);
        for i in ndu..nz {
            h[(i, i)] = 2.0 * cfg.slack_weight;
        }

        let layout = IneqLayout::new(n_p, n_c);
        let mut a_ineq = DMatrix::zeros(layout.total, nz);
        let eye = DMatrix::<f64>::identity(ndu, ndu);
        a_ineq.view_mut((layout.pi, 0), (ndu, ndu)).copy_from(&eye);
        a_ineq.view_mut((layout.neg_pi, 0), (ndu, ndu)).copy_from(&(-&eye));
        a_ineq.view_mut((layout.lambda, 0), (ndu, ndu)).copy_from(&pred.lambda);
        a_ineq
            .view_mut((layout.neg_lambda, 0), (ndu, ndu))
            .copy_from(&(-&pred.lambda));
        let nout = N_CON * n_p;
        a_ineq
            .view_mut((layout.out, 0), (nout, ndu))
            .copy_from(&pred.m_delta_u2);
        a_ineq
            .view_mut((layout.neg_out, 0), (nout, ndu))
            .copy_from(&(-&pred.m_delta_u2));
        for i in 0..2 * n_c {
            a_ineq[(layout.slack + i, ndu + i)] = -1.0;
        }

        let fixed_columns: Vec<usize> = (0..N_U).filter(|&c| ss.u_min[c] == ss.u_max[c]).collect();
        let fixed_outputs = [
            [U_GEN_B, U_LOAD_B].iter().all(|c| fixed_columns.contains(c)),
            [U_GEN_H, U_LOAD_H].iter().all(|c| fixed_columns.contains(c)),
            fixed_columns.contains(&U_GEN_F),
        ];

        let mut a_eq = DMatrix::zeros(3 * n_c + n_c * fixed_columns.len(), nz);
        for (i, (l, &c)) in (0..n_c)
            .flat_map(|l| fixed_columns.iter().map(move |c| (l, c)))
            .enumerate()
        {
            a_eq[(3 * n_c + i, l * N_U + c)] = 1.0;
        }
        for j in 0..n_c {
            let row = 3 * j;
            for l in 0..=j {
                for &c in &GEN_COLUMNS {
                    a_eq[(row, l * N_U + c)] = 1.0;
                }
                for &c in &LOAD_COLUMNS {
                    a_eq[(row, l * N_U + c)] = -1.0;
                }
                for k in 0..2 {
                    for c in 0..N_U {
                        a_eq[(row + 1 + k, l * N_U + c)] = ss.resource[(k, c)];
                    }
                }
            }
            a_eq[(row, ndu + j)] = 1.0;
            a_eq[(row, ndu + n_c + j)] = -1.0;
        }

        QpStructure {
            h,
            a_ineq,
            a_eq,
            layout,
            fixed_columns,
            fixed_outputs,
            n_p,
            n_c,
        }
    }

    /// Step-dependent vectors `(f, b_ineq, b_eq)`.
    #[allow(clippy::too_many_arguments)]
    pub fn vectors(
        &self,
        ss: &StateSpace,
        pred: &PredictionMatrices,
        cfg: &MpcConfig,
        y_ref: [f64; 2],
        x_k: &DVector<f64>,
        u_prev: &DVector<f64>,
        d_forecast: &[DVector<f64>],
        load_forecast: &[f64],
        soc_relax: f64,
    ) -> Result<QpVectors, MpcError> {
        let (n_p, n_c) = (self.n_p, self.n_c);
        if x_k.len() != N_X || u_prev.len() != N_U {
            return Err(MpcError::DimensionMismatch(format!(
                "state has {} entries and previous control {}, expected {N_X} and {N_U}",
                x_k.len(),
                u_prev.len()
            )));
        }
        if d_forecast.len() < n_p || load_forecast.len() < n_c {
            return Err(MpcError::DimensionMismatch(format!(
                "forecasts cover {} disturbance and {} load steps, need {n_p} and {n_c}",
                d_forecast.len(),
                load_forecast.len()
            )));
        }
        if let Some(d) = d_forecast.iter().find(|d| d.len() != N_D) {
            return Err(MpcError::DimensionMismatch(format!(
                "disturbance has {} entries, expected {N_D}",
                d.len()
            )));
        }

        let ndu = N_U * n_c;
        let nz = ndu + 2 * n_c;
        let mut d_stack = DVector::zeros(N_D * n_p);
        for (j, d) in d_forecast.iter().take(n_p).enumerate() {
            d_stack.rows_mut(j * N_D, N_D).copy_from(d);
        }

        let y_ref_stack = DVector::from_iterator(N_Y * n_p, (0..n_p).flat_map(|_| y_ref));
        let e = y_ref_stack - &pred.m_x1 * x_k - &pred.m_u1 * u_prev - &pred.m_d1 * &d_stack;
        let q = DVector::from_iterator(N_Y * n_p, (0..n_p).flat_map(|_| cfg.q_weights.iter().copied()));
        let qe = e.component_mul(&q);
        let f_du = pred.m_delta_u1.transpose() * qe * -2.0;
        let mut f = DVector::zeros(nz);
        f.rows_mut(0, ndu).copy_from(&f_du);
        for l in 0..n_c {
            let w = cfg.spill_weight * (n_c - l) as f64;
            f[l * N_U + U_SPILL_W] += w;
            f[l * N_U + U_SPILL_PV] += w;
        }
        for j in 0..n_c {
            f[ndu + j] = cfg.shed_penalty;
            f[ndu + n_c + j] = cfg.surplus_penalty;
        }

        let lay = &self.layout;
        let mut b = DVector::zeros(lay.total);
        for (j, d) in d_forecast.iter().take(n_c).enumerate() {
            for c in 0..N_U {
                let i = j * N_U + c;
                b[lay.pi + i] = ss.du_max[c];
                b[lay.neg_pi + i] = -ss.du_min[c];
                let mut hi = ss.u_max[c];
                if c == U_SPILL_W {
                    hi = hi.min(d[D_W].max(0.0));
                }
                if c == U_SPILL_PV {
                    hi = hi.min(d[D_PV].max(0.0));
                }
                b[lay.lambda + i] = hi - u_prev[c];
                b[lay.neg_lambda + i] = u_prev[c] - ss.u_min[c];
                if self.fixed_columns.contains(&c) {
                    for row in [lay.pi, lay.neg_pi, lay.lambda, lay.neg_lambda] {
                        b[row + i] = f64::INFINITY;
                    }
                }
            }
        }
        let free = &pred.m_x2 * x_k + &pred.m_u2 * u_prev + &pred.m_d2 * &d_stack;
        for j in 0..n_p {
            for o in 0..N_CON {
                let i = j * N_CON + o;
                if self.fixed_outputs[o] {
                    b[lay.out + i] = f64::INFINITY;
                    b[lay.neg_out + i] = f64::INFINITY;
                } else {
                    b[lay.out + i] = ss.x_max[o] + soc_relax - free[i];
                    b[lay.neg_out + i] = free[i] - (ss.x_min[o] - soc_relax);
                }
            }
        }

        let mut b_eq = DVector::zeros(self.a_eq.nrows());
        for (i, &c) in self.fixed_columns.iter().enumerate() {
            b_eq[3 * n_c + i] = ss.u_min[c] - u_prev[c];
        }
        let net_prev: f64 =
            GEN_COLUMNS.iter().map(|&c| u_prev[c]).sum::<f64>() - LOAD_COLUMNS.iter().map(|&c| u_prev[c]).sum::<f64>();
        for j in 0..n_c {
            b_eq[3 * j] = load_forecast[j] - net_prev;
            for (k, dcol) in [D_W, D_PV].into_iter().enumerate() {
                let ru: f64 = (0..N_U).map(|c| ss.resource[(k, c)] * u_prev[c]).sum();
                b_eq[3 * j + 1 + k] = d_forecast[j][dcol] - ru;
            }
        }
        Ok((f, b, b_eq))
    }
}

/// Assembles the condensed QP for one step.
///
/// `d_forecast` holds state-space disturbance vectors for at least `N_p`
/// steps, `load_forecast` the electric load in MW for at least `N_c` steps.
#[allow(clippy::too_many_arguments)]
pub fn build_qp(
    ss: &StateSpace,
    pred: &PredictionMatrices,
    x_k: &DVector<f64>,
    u_prev: &DVector<f64>,
    d_forecast: &[DVector<f64>],
    load_forecast: &[f64],
    y_ref: [f64; 2],
    cfg: &MpcConfig,
) -> Result<QpProblem, MpcError> {
    let s = QpStructure::new(ss, pred, cfg);
    let (f, b_ineq, b_eq) = s.vectors(ss, pred, cfg, y_ref, x_k, u_prev, d_forecast, load_forecast, 0.0)?;
    Ok(QpProblem {
        h: s.h,
        f,
        a_ineq: s.a_ineq,
        b_ineq,
        a_eq: s.a_eq,
        b_eq,
        n_c: cfg.n_c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepStatus {
    Optimal,
    /// The QP stopped at its iteration limit with a feasible iterate.
    Inexact,
    /// Solved after widening the SOC bounds.
    Relaxed,
    /// No QP solution; the previous control was held within current bounds.
    Held,
}

impl StepStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StepStatus::Optimal => "optimal",
            StepStatus::Inexact => "inexact",
            StepStatus::Relaxed => "relaxed",
            StepStatus::Held => "held",
        }
    }
}

impl fmt::Display for StepStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StepStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "optimal" => Ok(StepStatus::Optimal),
            "inexact" => Ok(StepStatus::Inexact),
            "relaxed" => Ok(StepStatus::Relaxed),
            "held" => Ok(StepStatus::Held),
            other => Err(format!("unknown step status `{other}`")),
        }
    }
}

/// One dispatch interval. `state` is `x(k)` before the step; `control` and
/// `disturbance` are what was applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub time_min: f64,
    pub state: [f64; N_X],
    pub control: [f64; N_U],
    pub disturbance: [f64; N_D],
    pub eload_mw: f64,
    pub shed_mw: f64,
    pub surplus_mw: f64,
    pub h2_demand_mwh: f64,
    pub h2_served_mwh: f64,
    pub status: StepStatus,
}

impl TraceStep {
    pub fn h2_unserved_mwh(&self) -> f64 {
        (self.h2_demand_mwh - self.h2_served_mwh).max(0.0)
    }

    pub fn served_load_mw(&self) -> f64 {
        self.eload_mw - self.shed_mw
    }

    /// `Σ p_gen − Σ p_load + shed − surplus − P_load`.
    pub fn balance_residual_mw(&self) -> f64 {
        let gen: f64 = GEN_COLUMNS.iter().map(|&c| self.control[c]).sum();
        let load: f64 = LOAD_COLUMNS.iter().map(|&c| self.control[c]).sum();
        gen - load + self.shed_mw - self.surplus_mw - self.eload_mw
    }

    /// Steps that fell back on a relaxation or could not absorb all supply.
    pub fn flagged(&self) -> bool {
        matches!(self.status, StepStatus::Relaxed | StepStatus::Held) || self.surplus_mw > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchTrace {
    pub dt_h: f64,
    /// The five-unit block the trace was produced with.
    pub block: EnergyBlock,
    pub steps: Vec<TraceStep>,
    pub final_state: [f64; N_X],
}

const CSV_TAIL: [&str; 8] = [
    "shed_mw",
    "spill_w_mwh",
    "spill_pv_mwh",
    "qp_status",
    "eload_mw",
    "surplus_mw",
    "h2_demand_mwh",
    "h2_served_mwh",
];

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("trace row {row}: {message}")]
    Format { row: usize, message: String },
}

impl DispatchTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn csv_header() -> Vec<String> {
        let mut h = vec!["time_min".to_string()];
        h.extend(STATE_NAMES.iter().map(|s| s.to_string()));
        h.extend(CONTROL_NAMES.iter().map(|s| s.to_string()));
        h.extend(DISTURBANCE_NAMES.iter().map(|s| s.to_string()));
        h.extend(CSV_TAIL.iter().map(|s| s.to_string()));
        h
    }

    /// Unit states in force at step `k`: recorded SOC with the previous
    /// step's powers.
    pub fn unit_states(&self, k: usize) -> Vec<UnitState> {
        let step = &self.steps[k];
        let prev = if k == 0 { None } else { Some(&self.steps[k - 1].control) };
        let last = |c: usize| prev.map_or(0.0, |u| u[c]);
        let powers = [
            (last(U_GEN_W), 0.0),
            (last(U_GEN_PV), 0.0),
            (last(U_GEN_B), last(U_LOAD_B)),
            (last(U_GEN_H), last(U_LOAD_H)),
            (last(U_GEN_F), 0.0),
        ];
        (0..N_X)
            .map(|i| UnitState {
                soc: step.state[i],
                last_p_gen_mw: powers[i].0,
                last_p_load_mw: powers[i].1,
            })
            .collect()
    }

    /// Available wind and PV power at step `k`, recovered from the recorded
    /// resource energy.
    pub fn renewable_avail_mw(&self, k: usize) -> (f64, f64) {
        let step = &self.steps[k];
        let avail = |kind: UnitKind, d: f64| {
            let eta = self.block.unit(kind).map_or(1.0, |u| u.eta_gen);
            d / (eta * self.dt_h)
        };
        (
            avail(UnitKind::Wind, step.disturbance[D_W]),
            avail(UnitKind::Pv, step.disturbance[D_PV]),
        )
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TraceIoError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::csv_header())?;
        for s in &self.steps {
            let mut rec: Vec<String> = Vec::with_capacity(30);
            rec.push(s.time_min.to_string());
            rec.extend(s.state.iter().map(f64::to_string));
            rec.extend(s.control.iter().map(f64::to_string));
            rec.extend(s.disturbance.iter().map(f64::to_string));
            rec.push(s.shed_mw.to_string());
            rec.push(s.control[U_SPILL_W].to_string());
            rec.push(s.control[U_SPILL_PV].to_string());
            rec.push(s.status.to_string());
            rec.push(s.eload_mw.to_string());
            rec.push(s.surplus_mw.to_string());
            rec.push(s.h2_demand_mwh.to_string());
            rec.push(s.h2_served_mwh.to_string());
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a trace written by [`DispatchTrace::write_csv`]. The block and
    /// step length are not part of the CSV and must be supplied.
    pub fn read_csv<R: Read>(r: R, block: EnergyBlock, dt_h: f64) -> Result<Self, TraceIoError> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != Self::csv_header() {
            return Err(TraceIoError::Format {
                row: 0,
                message: "unexpected header".into(),
            });
        }
        let mut steps = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let num = |j: usize| -> Result<f64, TraceIoError> {
                rec[j].parse::<f64>().map_err(|e| TraceIoError::Format {
                    row,
                    message: format!("column {}: {e}", header[j]),
                })
            };
            let mut state = [0.0; N_X];
            for (k, v) in state.iter_mut().enumerate() {
                *v = num(1 + k)?;
            }
            let mut control = [0.0; N_U];
            for (k, v) in control.iter_mut().enumerate() {
                *v = num(1 + N_X + k)?;
            }
            let mut disturbance = [0.0; N_D];
            for (k, v) in disturbance.iter_mut().enumerate() {
                *v = num(1 + N_X + N_U + k)?;
            }
            let base = 1 + N_X + N_U + N_D;
            let status = rec[base + 3]
                .parse()
                .map_err(|message| TraceIoError::Format { row, message })?;
            steps.push(TraceStep {
                time_min: num(0)?,
                state,
                control,
                disturbance,
                shed_mw: num(base)?,
                status,
                eload_mw: num(base + 4)?,
                surplus_mw: num(base + 5)?,
                h2_demand_mwh: num(base + 6)?,
                h2_served_mwh: num(base + 7)?,
            });
        }
        let final_state = steps.last().map_or([0.0; N_X], |s| s.state);
        Ok(DispatchTrace {
            dt_h,
            block,
            steps,
            final_state,
        })
    }

    pub fn to_json(&self) -> Result<String, TraceIoError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, TraceIoError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Receding-horizon dispatch of `block` over the first `steps` entries of
/// `profiles`. Forecasts beyond the end of the profiles hold the last value.
pub fn run_receding_horizon(
    block: &EnergyBlock,
    profiles: &Profiles,
    steps: usize,
    cfg: &MpcConfig,
) -> Result<DispatchTrace, MpcError> {
    cfg.validate()?;
    let units = ordered_units(block)?;
    let block = EnergyBlock::new(units.iter().map(|u| (*u).clone()).collect());
    let units: Vec<&UnitModel> = block.units.iter().collect();
    if profiles.len() < steps {
        return Err(MpcError::InsufficientProfiles {
            needed: steps,
            available: profiles.len(),
        });
    }
    if (profiles.step_minutes - cfg.dt_h * 60.0).abs() > 1e-9 {
        return Err(MpcError::StepMismatch {
            profile_min: profiles.step_minutes,
            config_min: cfg.dt_h * 60.0,
        });
    }
    let dt = cfg.dt_h;
    let y_ref = cfg.y_ref.unwrap_or([units[X_B].soc_init, units[X_H].soc_init]);
    let curves = units.iter().any(|u| u.has_efficiency_curves());

    let mut states = block.initial_states();
    let mut u_prev = DVector::<f64>::zeros(N_U);
    let mut hint: Option<DVector<f64>> = None;
    let mut trace = Vec::with_capacity(steps);

    let settings = QpSettings {
        tol: cfg.qp_tol,
        max_iter: cfg.qp_max_iter,
        ..QpSettings::default()
    };
    let mut cached: Option<(StateSpace, PredictionMatrices, QpStructure, QpSolver)> = None;

    for k in 0..steps {
        if cached.is_none() || curves {
            let ss = build_state_space_at(&block, &states, dt)?;
            let pred = build_prediction_matrices(&ss, cfg);
            let structure = QpStructure::new(&ss, &pred, cfg);
            let solver = QpSolver::new(&structure.h, &structure.a_ineq, &structure.a_eq, settings)?;
            cached = Some((ss, pred, structure, solver));
        }
        let (ss, pred, structure, solver) = cached.as_ref().expect("built above");

        let x_k = DVector::from_iterator(N_X, states.iter().map(|s| s.soc));
        let (d_fc, load_fc) = forecast(&units, &states, profiles, k, cfg, dt);

        let mut outcome: Option<(DVector<f64>, StepStatus)> = None;
        for (relax, status) in [(0.0, StepStatus::Optimal), (cfg.soc_relaxation, StepStatus::Relaxed)] {
            let (f, b_ineq, b_eq) = structure.vectors(ss, pred, cfg, y_ref, &x_k, &u_prev, &d_fc, &load_fc, relax)?;
            match solver.solve(&f, &b_ineq, &b_eq, hint.as_ref()) {
                Ok(sol) => match accept(&sol, status) {
                    Some(st) => {
                        outcome = Some((sol.x, st));
                        break;
                    }
                    None => log::debug!("step {k}: QP {:?} at relaxation {relax}", sol.status),
                },
                Err(e) => log::warn!("step {k}: QP error {e}"),
            }
        }

        let (u_raw, status) = match &outcome {
            Some((z, st)) => {
                let du = z.rows(0, N_U);
                (&u_prev + du, *st)
            }
            None => {
                log::info!("step {k}: holding previous control");
                (u_prev.clone(), StepStatus::Held)
            }
        };
        hint = outcome.as_ref().map(|(z, _)| shift_plan(z, cfg.n_c));

        let idx = k.min(profiles.len() - 1);
        let applied = apply_step(
            &units,
            &states,
            &u_raw,
            profiles.wind_avail_mw[idx],
            profiles.pv_avail_mw[idx],
            profiles.eload_mw[idx],
            profiles.h2_demand_mwh[idx],
            profiles.gas_supply_mwh[idx],
            dt,
        );

        let mut next = Vec::with_capacity(N_X);
        for (i, unit) in units.iter().enumerate() {
            let s = step_unit(unit, &states[i], &applied.unit_controls[i], &applied.unit_dists[i], dt).map_err(
                |source| {
                    if status == StepStatus::Held {
                        MpcError::LadderExhausted {
                            step: k,
                            reason: source.to_string(),
                        }
                    } else {
                        MpcError::Unit { step: k, source }
                    }
                },
            )?;
            next.push(s);
        }

        let mut disturbance = [0.0; N_D];
        disturbance[D_W] = units[X_W].eta_ex * applied.unit_dists[X_W].xi_mwh;
        disturbance[D_PV] = units[X_PV].eta_ex * applied.unit_dists[X_PV].xi_mwh;
        disturbance[D_H] = units[X_H].eta_ex * applied.unit_dists[X_H].xi_mwh / units[X_H].capacity_mwh;
        disturbance[D_F] = units[X_F].eta_ex * applied.unit_dists[X_F].xi_mwh / units[X_F].capacity_mwh;

        let mut state = [0.0; N_X];
        for (i, s) in states.iter().enumerate() {
            state[i] = s.soc;
        }
        let control: [f64; N_U] = std::array::from_fn(|c| applied.u[c]);
        trace.push(TraceStep {
            time_min: k as f64 * profiles.step_minutes,
            state,
            control,
            disturbance,
            eload_mw: profiles.eload_mw[idx],
            shed_mw: applied.shed_mw,
            surplus_mw: applied.surplus_mw,
            h2_demand_mwh: profiles.h2_demand_mwh[idx],
            h2_served_mwh: applied.h2_served_mwh,
            status,
        });

        states = next;
        u_prev = applied.u;
    }

    let final_state = std::array::from_fn(|i| states[i].soc);
    Ok(DispatchTrace {
        dt_h: dt,
        block,
        steps: trace,
        final_state,
    })
}

fn accept(sol: &QpSolution, status: StepStatus) -> Option<StepStatus> {
    match sol.status {
        QpStatus::Optimal => Some(status),
        QpStatus::MaxIterations if status == StepStatus::Optimal => Some(StepStatus::Inexact),
        QpStatus::MaxIterations => Some(status),
        QpStatus::Infeasible => None,
    }
}

/// Previous plan advanced by one step, used to seed the next solve.
fn shift_plan(z: &DVector<f64>, n_c: usize) -> DVector<f64> {
    let ndu = N_U * n_c;
    let mut out = DVector::zeros(z.len());
    if n_c > 1 {
        out.rows_mut(0, ndu - N_U).copy_from(&z.rows(N_U, ndu - N_U));
        out.rows_mut(ndu, n_c - 1).copy_from(&z.rows(ndu + 1, n_c - 1));
        out.rows_mut(ndu + n_c, n_c - 1)
            .copy_from(&z.rows(ndu + n_c + 1, n_c - 1));
    }
    out
}

/// Disturbance and load forecasts over the prediction horizon.
///
/// Hydrogen demand is clipped, step by step, to what the tank holds above its
/// minimum so the predicted demand alone never forces the SOC out of bounds;
/// gas supply is clipped likewise against the store's free room.
fn forecast(
    units: &[&UnitModel],
    states: &[UnitState],
    profiles: &Profiles,
    k: usize,
    cfg: &MpcConfig,
    dt: f64,
) -> (Vec<DVector<f64>>, Vec<f64>) {
    let last = profiles.len() - 1;
    let at = |j: usize| match cfg.forecast {
        ForecastMode::Perfect => (k + j).min(last),
        ForecastMode::Persistence => k.min(last),
    };
    let (h, f) = (units[X_H], units[X_F]);
    let mut h_room = ((states[X_H].soc - h.soc_min) * h.capacity_mwh).max(0.0);
    let mut f_room = ((f.soc_max - states[X_F].soc) * f.capacity_mwh).max(0.0);
    let mut d = Vec::with_capacity(cfg.n_p);
    let mut load = Vec::with_capacity(cfg.n_p);
    for j in 0..cfg.n_p {
        let i = at(j);
        let h_take = (h.eta_ex * profiles.h2_demand_mwh[i]).min(h_room);
        h_room -= h_take;
        let f_take = (f.eta_ex * profiles.gas_supply_mwh[i]).min(f_room);
        f_room -= f_take;
        d.push(DVector::from_row_slice(&[
            units[X_W].eta_gen * profiles.wind_avail_mw[i] * dt,
            units[X_PV].eta_gen * profiles.pv_avail_mw[i] * dt,
            -h_take / h.capacity_mwh,
            f_take / f.capacity_mwh,
        ]));
        load.push(profiles.eload_mw[i]);
    }
    (d, load)
}

struct Applied {
    u: DVector<f64>,
    unit_controls: Vec<UnitControl>,
    unit_dists: Vec<UnitDisturbance>,
    shed_mw: f64,
    surplus_mw: f64,
    h2_served_mwh: f64,
}

/// Turns the controller's proposal into controls the units accept: powers
/// clipped to ramp and SOC limits, renewable spill recomputed from the
/// resource, oversupply curtailed, and storage exchanges capped to what the
/// SOC window admits. Shed and surplus take up the remaining imbalance.
#[allow(clippy::too_many_arguments)]
fn apply_step(
    units: &[&UnitModel],
    states: &[UnitState],
    u_raw: &DVector<f64>,
    wind_avail: f64,
    pv_avail: f64,
    eload: f64,
    h2_demand: f64,
    gas_supply: f64,
    dt: f64,
) -> Applied {
    let mut u = u_raw.map(|v| if v.is_finite() { v } else { 0.0 });

    for (unit, gen_col, load_col) in [
        (X_B, Some(U_GEN_B), Some(U_LOAD_B)),
        (X_H, Some(U_GEN_H), Some(U_LOAD_H)),
        (X_F, Some(U_GEN_F), None),
    ] {
        let m = units[unit];
        let s = &states[unit];
        let (gen_box, load_box) = ramp_limited_bounds(m, s, dt);
        let mut pg = gen_col.map_or(0.0, |c| gen_box.clamp(u[c]).max(0.0));
        let mut pl = load_col.map_or(0.0, |c| load_box.clamp(u[c]).max(0.0));
        let (eg, el) = s.efficiencies(m);
        let c = m.capacity_mwh;
        let soc_next = s.soc + (-eg * pg * dt + el * pl * dt) / c;
        if soc_next < m.soc_min {
            pg = (((s.soc - m.soc_min) * c + el * pl * dt) / (eg * dt)).max(0.0);
        } else if soc_next > m.soc_max {
            pl = (((m.soc_max - s.soc) * c + eg * pg * dt) / (el * dt)).max(0.0);
        }
        if let Some(col) = gen_col {
            u[col] = pg;
        }
        if let Some(col) = load_col {
            u[col] = pl;
        }
    }

    let mut resource = [0.0; 2];
    for (k, (unit, gen_col, avail)) in [(X_W, U_GEN_W, wind_avail), (X_PV, U_GEN_PV, pv_avail)]
        .into_iter()
        .enumerate()
    {
        let m = units[unit];
        let (gen_box, _) = ramp_limited_bounds(m, &states[unit], dt);
        let p = gen_box.clamp(u[gen_col]).min(avail).max(0.0);
        u[gen_col] = p;
        resource[k] = m.eta_gen * avail * dt;
    }

    let gen: f64 = GEN_COLUMNS.iter().map(|&c| u[c]).sum();
    let load: f64 = LOAD_COLUMNS.iter().map(|&c| u[c]).sum();
    let mut excess = gen - load - eload;
    if excess > 0.0 {
        for col in [U_GEN_W, U_GEN_PV] {
            let cut = excess.min(u[col]);
            u[col] -= cut;
            excess -= cut;
        }
    }
    for (k, (gen_col, spill_col)) in [(U_GEN_W, U_SPILL_W), (U_GEN_PV, U_SPILL_PV)].into_iter().enumerate() {
        let unit = units[[X_W, X_PV][k]];
        u[spill_col] = (resource[k] - unit.eta_gen * u[gen_col] * dt).max(0.0);
    }
    let gen: f64 = GEN_COLUMNS.iter().map(|&c| u[c]).sum();
    let load: f64 = LOAD_COLUMNS.iter().map(|&c| u[c]).sum();
    let residual = eload - (gen - load);
    let (shed_mw, surplus_mw) = if residual >= 0.0 {
        (residual, 0.0)
    } else {
        (0.0, -residual)
    };

    let unit_controls: Vec<UnitControl> = (0..N_X)
        .map(|i| match i {
            X_W => UnitControl {
                p_gen_mw: u[U_GEN_W],
                p_load_mw: 0.0,
                spill_mwh: u[U_SPILL_W],
            },
            X_PV => UnitControl {
                p_gen_mw: u[U_GEN_PV],
                p_load_mw: 0.0,
                spill_mwh: u[U_SPILL_PV],
            },
            X_B => UnitControl {
                p_gen_mw: u[U_GEN_B],
                p_load_mw: u[U_LOAD_B],
                spill_mwh: 0.0,
            },
            X_H => UnitControl {
                p_gen_mw: u[U_GEN_H],
                p_load_mw: u[U_LOAD_H],
                spill_mwh: 0.0,
            },
            _ => UnitControl {
                p_gen_mw: u[U_GEN_F],
                p_load_mw: 0.0,
                spill_mwh: 0.0,
            },
        })
        .collect();

    let xi_w = resource[0] / units[X_W].eta_ex;
    let xi_pv = resource[1] / units[X_PV].eta_ex;
    let xi_h = admissible_exchange(units[X_H], &states[X_H], &unit_controls[X_H], -h2_demand, dt);
    let xi_f = admissible_exchange(units[X_F], &states[X_F], &unit_controls[X_F], gas_supply, dt);
    let unit_dists = vec![
        UnitDisturbance { xi_mwh: xi_w },
        UnitDisturbance { xi_mwh: xi_pv },
        UnitDisturbance { xi_mwh: 0.0 },
        UnitDisturbance { xi_mwh: xi_h },
        UnitDisturbance { xi_mwh: xi_f },
    ];

    Applied {
        u,
        unit_controls,
        unit_dists,
        shed_mw,
        surplus_mw,
        h2_served_mwh: -xi_h,
    }
}
