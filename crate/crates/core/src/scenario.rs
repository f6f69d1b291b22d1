//! Scenario configuration, profile ingestion and synthesis.
//!
//! Profiles CSV schema, one row per step:
//!
//! ```text
//! minute,wind_mw,pv_mw,eload_mw,h2_mwh,gas_mwh
//! 0,42.1,0,51.3,0.25,0
//! 5,41.7,0,50.9,0.25,0
//! ```
//!
//! `wind_mw` and `pv_mw` are available renewable power, `eload_mw` the
//! electric load, `h2_mwh` the hydrogen demand drawn from the tank during the
//! step (MWh-equivalent, positive) and `gas_mwh` the gas delivered into the
//! gas store during the step.
//!
//! Synthesized profiles use the ChaCha8 generator seeded with
//! `ChaCha8Rng::seed_from_u64(seed)`, so a seed reproduces the same series on
//! every platform.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpc::{run_receding_horizon, DispatchTrace, MpcConfig, MpcError};
use crate::units::{EfficiencyCurve, EnergyBlock, UnitKind, UnitModel, H2_KWH_PER_KG};

pub const PROFILE_COLUMNS: [&str; 6] = ["minute", "wind_mw", "pv_mw", "eload_mw", "h2_mwh", "gas_mwh"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// `row` counts data rows from 1; header problems are reported as row 0.
    #[error("row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("invalid profiles: {0}")]
    Validation(String),
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mpc(#[from] MpcError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profiles {
    pub step_minutes: f64,
    pub wind_avail_mw: Vec<f64>,
    pub pv_avail_mw: Vec<f64>,
    pub eload_mw: Vec<f64>,
    /// Hydrogen drawn from the tank per step, MWh-equivalent.
    pub h2_demand_mwh: Vec<f64>,
    /// Gas delivered to the gas store per step, MWh.
    pub gas_supply_mwh: Vec<f64>,
}

impl Profiles {
    pub fn len(&self) -> usize {
        self.eload_mw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eload_mw.is_empty()
    }

    pub fn step_h(&self) -> f64 {
        self.step_minutes / 60.0
    }

    fn series(&self) -> [(&'static str, &Vec<f64>); 5] {
        [
            ("wind_mw", &self.wind_avail_mw),
            ("pv_mw", &self.pv_avail_mw),
            ("eload_mw", &self.eload_mw),
            ("h2_mwh", &self.h2_demand_mwh),
            ("gas_mwh", &self.gas_supply_mwh),
        ]
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.step_minutes > 0.0 && self.step_minutes.is_finite()) {
            return Err(ScenarioError::Validation(format!(
                "step must be positive, got {} min",
                self.step_minutes
            )));
        }
        let n = self.len();
        for (name, s) in self.series() {
            if s.len() != n {
                return Err(ScenarioError::Validation(format!(
                    "series {name} has {} entries, expected {n}",
                    s.len()
                )));
            }
            if let Some(i) = s.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(ScenarioError::Validation(format!(
                    "{name} must be finite and non-negative (row {}: {})",
                    i + 1,
                    s[i]
                )));
            }
        }
        Ok(())
    }

    /// The first `n` steps.
    pub fn truncated(&self, n: usize) -> Profiles {
        let cut = |v: &Vec<f64>| v[..n.min(v.len())].to_vec();
        Profiles {
            step_minutes: self.step_minutes,
            wind_avail_mw: cut(&self.wind_avail_mw),
            pv_avail_mw: cut(&self.pv_avail_mw),
            eload_mw: cut(&self.eload_mw),
            h2_demand_mwh: cut(&self.h2_demand_mwh),
            gas_supply_mwh: cut(&self.gas_supply_mwh),
        }
    }

    /// Renewable availability minus electric load, per step.
    pub fn net_load_mw(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| crate::flexibility::net_load_at(self.eload_mw[i], self.wind_avail_mw[i] + self.pv_avail_mw[i]))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ScenarioError> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| ScenarioError::Io {
            path: PathBuf::from("<profiles>"),
            source: e.into(),
        };
        wr.write_record(PROFILE_COLUMNS).map_err(io)?;
        for i in 0..self.len() {
            wr.write_record([
                (i as f64 * self.step_minutes).to_string(),
                self.wind_avail_mw[i].to_string(),
                self.pv_avail_mw[i].to_string(),
                self.eload_mw[i].to_string(),
                self.h2_demand_mwh[i].to_string(),
                self.gas_supply_mwh[i].to_string(),
            ])
            .map_err(io)?;
        }
        wr.flush().map_err(|e| ScenarioError::Io {
            path: PathBuf::from("<profiles>"),
            source: e,
        })
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Profiles, ScenarioError> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd
            .headers()
            .map_err(|e| parse_error(0, "header", e.to_string()))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut pos = [0usize; 6];
        for (k, name) in PROFILE_COLUMNS.iter().enumerate() {
            pos[k] = header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| parse_error(0, name, "missing column".into()))?;
        }

        let mut cols: [Vec<f64>; 6] = Default::default();
        for (i, rec) in rd.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| parse_error(row, "*", e.to_string()))?;
            for (k, name) in PROFILE_COLUMNS.iter().enumerate() {
                let raw = rec.get(pos[k]).unwrap_or("").trim();
                let v: f64 = raw
                    .parse()
                    .map_err(|_| parse_error(row, name, format!("`{raw}` is not a number")))?;
                cols[k].push(v);
            }
        }
        let [minute, wind, pv, eload, h2, gas] = cols;
        if minute.len() < 2 {
            return Err(ScenarioError::Validation(
                "at least two rows are needed to infer the step".into(),
            ));
        }
        let step = minute[1] - minute[0];
        if !(step > 0.0) {
            return Err(ScenarioError::Validation("minute column must increase".into()));
        }
        for (i, m) in minute.iter().enumerate() {
            let expected = minute[0] + i as f64 * step;
            if (m - expected).abs() > 1e-6 * step.max(1.0) {
                return Err(ScenarioError::Validation(format!(
                    "minute column must be uniformly spaced (row {}: {m}, expected {expected})",
                    i + 1
                )));
            }
        }
        let p = Profiles {
            step_minutes: step,
            wind_avail_mw: wind,
            pv_avail_mw: pv,
            eload_mw: eload,
            h2_demand_mwh: h2,
            gas_supply_mwh: gas,
        };
        p.validate()?;
        Ok(p)
    }
}

fn parse_error(row: usize, column: &str, message: String) -> ScenarioError {
    ScenarioError::Parse {
        row,
        column: column.to_string(),
        message,
    }
}

pub fn load_profiles(path: &Path) -> Result<Profiles, ScenarioError> {
    let file = fs::File::open(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Profiles::read_csv(std::io::BufReader::new(file))
}

pub fn write_profiles(path: &Path, profiles: &Profiles) -> Result<(), ScenarioError> {
    let file = fs::File::create(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    profiles.write_csv(std::io::BufWriter::new(file))
}

/// Multiplies wind and PV availability by `1 + ratio`.
pub fn scale_penetration(profiles: &Profiles, ratio: f64) -> Profiles {
    let k = 1.0 + ratio;
    Profiles {
        wind_avail_mw: profiles.wind_avail_mw.iter().map(|v| v * k).collect(),
        pv_avail_mw: profiles.pv_avail_mw.iter().map(|v| v * k).collect(),
        ..profiles.clone()
    }
}

/// Shape parameters for synthetic profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSpec {
    pub hours: f64,
    pub step_minutes: f64,
    pub wind_peak_mw: f64,
    pub pv_peak_mw: f64,
    pub load_min_mw: f64,
    pub load_max_mw: f64,
    /// Mean hydrogen demand in kg per hour.
    pub h2_kg_per_h: f64,
    pub h2_kwh_per_kg: f64,
    /// Constant gas delivery into the gas store, MW.
    pub gas_supply_mw: f64,
    /// Chance that a given night is calm.
    pub calm_night_probability: f64,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        SynthesisSpec {
            hours: 336.0,
            step_minutes: 5.0,
            wind_peak_mw: 60.0,
            pv_peak_mw: 60.0,
            load_min_mw: 32.0,
            load_max_mw: 65.0,
            h2_kg_per_h: 90.0,
            h2_kwh_per_kg: H2_KWH_PER_KG,
            gas_supply_mw: 0.0,
            calm_night_probability: 0.5,
        }
    }
}

impl SynthesisSpec {
    pub fn steps(&self) -> usize {
        (self.hours * 60.0 / self.step_minutes).round() as usize
    }
}

/// AR(1) process with unit stationary variance and the given correlation time.
struct Ar1 {
    phi: f64,
    value: f64,
}

impl Ar1 {
    fn new(step_minutes: f64, tau_minutes: f64, rng: &mut ChaCha8Rng) -> Self {
        Ar1 {
            phi: (-step_minutes / tau_minutes).exp(),
            value: StandardNormal.sample(rng),
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let e: f64 = StandardNormal.sample(rng);
        self.value = self.phi * self.value + (1.0 - self.phi * self.phi).sqrt() * e;
        self.value
    }
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic synthetic profiles: a diurnal PV bell under drifting cloud
/// cover, autocorrelated wind that dies down on randomly chosen calm nights, a
/// double-peak electric load and a slowly varying hydrogen demand.
pub fn synthesize_profiles(spec: &SynthesisSpec, seed: u64) -> Profiles {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.steps();
    let step = spec.step_minutes;
    let dt_h = step / 60.0;
    let days = (spec.hours / 24.0).ceil() as usize + 2;
    let unit = Uniform::new(0.0, 1.0).expect("valid range");

    let clear_sky: Vec<f64> = (0..days).map(|_| 0.55 + 0.45 * unit.sample(&mut rng)).collect();
    let calm: Vec<bool> = (0..days)
        .map(|_| unit.sample(&mut rng) < spec.calm_night_probability)
        .collect();
    // Calm episodes start between 19:00 and 21:00 and end between 05:00 and 07:00.
    let calm_start: Vec<f64> = (0..days).map(|_| 19.0 + 2.0 * unit.sample(&mut rng)).collect();
    let calm_end: Vec<f64> = (0..days).map(|_| 5.0 + 2.0 * unit.sample(&mut rng)).collect();

    let mut cloud = Ar1::new(step, 90.0, &mut rng);
    let mut wind_slow = Ar1::new(step, 360.0, &mut rng);
    let mut wind_fast = Ar1::new(step, 30.0, &mut rng);
    let mut load_noise = Ar1::new(step, 60.0, &mut rng);
    let mut h2_noise = Ar1::new(step, 240.0, &mut rng);

    let load_span = spec.load_max_mw - spec.load_min_mw;
    let h2_mw = spec.h2_kg_per_h * spec.h2_kwh_per_kg / 1000.0;
    let ramp_h = 0.25;

    let mut p = Profiles {
        step_minutes: step,
        wind_avail_mw: Vec::with_capacity(n),
        pv_avail_mw: Vec::with_capacity(n),
        eload_mw: Vec::with_capacity(n),
        h2_demand_mwh: Vec::with_capacity(n),
        gas_supply_mwh: Vec::with_capacity(n),
    };
    for i in 0..n {
        let t_h = i as f64 * dt_h;
        let day = (t_h / 24.0).floor() as usize;
        let hod = t_h - 24.0 * day as f64;

        let bell = if hod > 6.0 && hod < 18.0 {
            (PI * (hod - 6.0) / 12.0).sin().powf(1.5)
        } else {
            0.0
        };
        let cover = (clear_sky[day] + 0.15 * cloud.next(&mut rng)).clamp(0.1, 1.0);
        p.pv_avail_mw.push(spec.pv_peak_mw * bell * cover);

        let s = 0.5 + 0.22 * wind_slow.next(&mut rng) + 0.06 * wind_fast.next(&mut rng);
        let mut envelope = 1.0;
        // Tonight's episode begins on `day`; this morning's began on `day - 1`.
        if calm[day] && hod >= calm_start[day] {
            envelope = 1.0 - smoothstep((hod - calm_start[day]) / ramp_h);
        }
        if day > 0 && calm[day - 1] && hod <= calm_end[day] + ramp_h {
            envelope = smoothstep((hod - calm_end[day]) / ramp_h);
        }
        p.wind_avail_mw.push(spec.wind_peak_mw * s.clamp(0.0, 1.0) * envelope);

        let morning = (-((hod - 9.0) / 2.0).powi(2)).exp();
        let evening = (-((hod - 19.5) / 2.2).powi(2)).exp();
        let shape = (0.25 + 0.55 * morning + 0.75 * evening).min(1.0);
        let load = spec.load_min_mw + load_span * (shape + 0.03 * load_noise.next(&mut rng));
        p.eload_mw.push(load.clamp(spec.load_min_mw, spec.load_max_mw));

        let h2 = h2_mw * (1.0 + 0.2 * (2.0 * PI * (hod - 8.0) / 24.0).sin() + 0.05 * h2_noise.next(&mut rng));
        p.h2_demand_mwh.push(h2.max(0.0) * dt_h);
        p.gas_supply_mwh.push(spec.gas_supply_mw.max(0.0) * dt_h);
    }
    p
}

/// The three reference compositions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Wind and PV only; no controllable resources.
    S1,
    /// Wind, PV and the hydrogen chain.
    S2,
    /// All five units.
    S3,
}

impl Preset {
    pub fn kinds(self) -> Vec<UnitKind> {
        match self {
            Preset::S1 => vec![UnitKind::Wind, UnitKind::Pv],
            Preset::S2 => vec![UnitKind::Wind, UnitKind::Pv, UnitKind::Hydrogen],
            Preset::S3 => UnitKind::ALL.to_vec(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::S1 => "s1-renewables",
            Preset::S2 => "s2-hydrogen",
            Preset::S3 => "s3-full",
        }
    }
}

/// Parameter overrides for one unit; absent fields keep the kind's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitEntry {
    pub kind: UnitKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_mwh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_gen: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_load: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_ex: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_gen_min_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_gen_max_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_load_min_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_load_max_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_gen_min_mw_per_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_gen_max_mw_per_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_load_min_mw_per_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_load_max_mw_per_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soc_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soc_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soc_init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_gen_curve: Option<EfficiencyCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_load_curve: Option<EfficiencyCurve>,
}

impl UnitEntry {
    pub fn new(kind: UnitKind) -> Self {
        UnitEntry {
            kind,
            capacity_mwh: None,
            eta_gen: None,
            eta_load: None,
            eta_ex: None,
            p_gen_min_mw: None,
            p_gen_max_mw: None,
            p_load_min_mw: None,
            p_load_max_mw: None,
            ramp_gen_min_mw_per_min: None,
            ramp_gen_max_mw_per_min: None,
            ramp_load_min_mw_per_min: None,
            ramp_load_max_mw_per_min: None,
            soc_min: None,
            soc_max: None,
            soc_init: None,
            eta_gen_curve: None,
            eta_load_curve: None,
        }
    }

    pub fn model(&self) -> UnitModel {
        let mut m = UnitModel::default_for(self.kind);
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { m.$f = v; } )* };
        }
        set!(
            capacity_mwh,
            eta_gen,
            eta_load,
            eta_ex,
            p_gen_min_mw,
            p_gen_max_mw,
            p_load_min_mw,
            p_load_max_mw,
            ramp_gen_min_mw_per_min,
            ramp_gen_max_mw_per_min,
            ramp_load_min_mw_per_min,
            ramp_load_max_mw_per_min,
            soc_min,
            soc_max,
            soc_init
        );
        if self.eta_gen_curve.is_some() {
            m.eta_gen_curve = self.eta_gen_curve.clone();
        }
        if self.eta_load_curve.is_some() {
            m.eta_load_curve = self.eta_load_curve.clone();
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ProfileSource {
    /// CSV file; relative paths resolve against the scenario file's directory.
    File(PathBuf),
    Synthesize(SynthesisSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub units: Vec<UnitEntry>,
    pub profiles: ProfileSource,
    #[serde(default)]
    pub seed: u64,
    /// Fractional increase applied to wind and PV availability.
    #[serde(default)]
    pub penetration_scale: f64,
    #[serde(default = "default_run_hours")]
    pub run_hours: f64,
    /// Controller settings; the step length always follows the profiles.
    #[serde(default)]
    pub mpc: MpcConfig,
}

fn default_run_hours() -> f64 {
    336.0
}

/// Output of [`run_scenario`].
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub profiles: Profiles,
    pub steps: usize,
    pub trace: DispatchTrace,
}

impl ScenarioSpec {
    pub fn preset(preset: Preset, run_hours: f64, seed: u64) -> Self {
        ScenarioSpec {
            name: preset.name().to_string(),
            units: preset.kinds().into_iter().map(UnitEntry::new).collect(),
            profiles: ProfileSource::Synthesize(SynthesisSpec {
                hours: run_hours,
                ..SynthesisSpec::default()
            }),
            seed,
            penetration_scale: 0.0,
            run_hours,
            mpc: MpcConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ScenarioError::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Included units with overrides applied, in the listed order.
    pub fn block(&self) -> Result<EnergyBlock, ScenarioError> {
        let mut seen = Vec::new();
        for u in &self.units {
            if seen.contains(&u.kind) {
                return Err(ScenarioError::Config(format!("unit {} listed twice", u.kind)));
            }
            seen.push(u.kind);
        }
        Ok(EnergyBlock::new(self.units.iter().map(UnitEntry::model).collect()))
    }

    /// Raw profiles before penetration scaling.
    pub fn base_profiles(&self, base_dir: &Path, seed: u64) -> Result<Profiles, ScenarioError> {
        match &self.profiles {
            ProfileSource::File(p) => {
                let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                load_profiles(&path)
            }
            ProfileSource::Synthesize(spec) => {
                if !(spec.step_minutes > 0.0 && spec.hours > 0.0) {
                    return Err(ScenarioError::Config(
                        "profiles.synthesize needs positive hours and step_minutes".into(),
                    ));
                }
                Ok(synthesize_profiles(spec, seed))
            }
        }
    }

    pub fn profiles(&self, base_dir: &Path, seed: u64) -> Result<Profiles, ScenarioError> {
        if !(self.penetration_scale >= 0.0) {
            return Err(ScenarioError::Config("penetration_scale must be non-negative".into()));
        }
        Ok(scale_penetration(
            &self.base_profiles(base_dir, seed)?,
            self.penetration_scale,
        ))
    }

    pub fn run_steps(&self, step_minutes: f64) -> usize {
        (self.run_hours * 60.0 / step_minutes).round() as usize
    }

    /// Controller settings with the step taken from the profiles.
    pub fn mpc_config(&self, profiles: &Profiles) -> MpcConfig {
        MpcConfig {
            dt_h: profiles.step_h(),
            ..self.mpc.clone()
        }
    }
}

/// Runs the scenario's block over already resolved profiles.
pub fn run_scenario(spec: &ScenarioSpec, profiles: &Profiles) -> Result<ScenarioRun, ScenarioError> {
    profiles.validate()?;
    let block = spec.block()?;
    let violations = block.validate();
    if let Some((kind, v)) = violations.first() {
        return Err(ScenarioError::Config(format!("{kind}: {v}")));
    }
    let steps = spec.run_steps(profiles.step_minutes);
    if steps == 0 {
        return Err(ScenarioError::Config("run length is shorter than one step".into()));
    }
    if profiles.len() < steps {
        return Err(ScenarioError::Validation(format!(
            "insufficient horizon: profiles cover {} steps, run needs {steps}",
            profiles.len()
        )));
    }
    let cfg = spec.mpc_config(profiles);
    let trace = run_receding_horizon(&block.completed(), profiles, steps, &cfg)?;
    Ok(ScenarioRun {
        profiles: profiles.clone(),
        steps,
        trace,
    })
}
