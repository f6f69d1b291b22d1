//! Command implementations behind the `flexblock` binary.

pub mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use flexblock::flexibility::{build_envelope, indices_from_envelope, trace_net_load, Envelope, FlexIndices};
use flexblock::mpc::{DispatchTrace, ForecastMode, MpcError, U_SPILL_PV, U_SPILL_W};
use flexblock::scenario::{run_scenario, Profiles, ScenarioError, ScenarioSpec};
use flexblock::units::validate_unit;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } | CliError::Output { .. } => EXIT_USAGE,
            CliError::Scenario(e) => match e {
                ScenarioError::Validation(_) => EXIT_VALIDATION,
                ScenarioError::Mpc(MpcError::LadderExhausted { .. } | MpcError::Qp(_) | MpcError::Unit { .. }) => {
                    EXIT_SOLVER
                }
                ScenarioError::Mpc(MpcError::InsufficientProfiles { .. }) => EXIT_VALIDATION,
                _ => EXIT_USAGE,
            },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn output_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the scenario's seed.
    pub seed: Option<u64>,
    pub no_plots: bool,
    pub forecast: Option<ForecastMode>,
}

/// Largest shortfall of one margin dimension over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortfallPeak {
    pub value: f64,
    /// `"up"` or `"down"`.
    pub direction: String,
    pub time_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSummary {
    pub ramp_mw_per_min: ShortfallPeak,
    pub power_mw: ShortfallPeak,
    pub energy_mwh: ShortfallPeak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub steps: usize,
    pub indices: FlexIndices,
    pub envelope: EnvelopeSummary,
    pub curtailed_mwh: f64,
    pub shed_mwh: f64,
    pub surplus_mwh: f64,
    pub h2_unserved_mwh: f64,
    pub flagged_steps: usize,
    pub artifacts: Vec<PathBuf>,
}

impl RunReport {
    /// Summary table printed by `flexblock run`.
    pub fn summary(&self) -> String {
        let i = &self.indices;
        let mut s = String::new();
        let _ = writeln!(s, "scenario       {}", self.scenario);
        let _ = writeln!(s, "steps          {} (flagged {})", self.steps, self.flagged_steps);
        let _ = writeln!(s, "E_IR           {:.6} MW/min", i.e_ir);
        let _ = writeln!(s, "E_IO           {:.6} MW", i.e_io);
        let _ = writeln!(s, "E_IC           {:.6} MWh", i.e_ic);
        let _ = writeln!(
            s,
            "rho            {:.6} ({} of {} steps short)",
            i.rho, i.beta, i.n_steps
        );
        let _ = writeln!(s, "abandonment    {:.4}", i.abandonment);
        let _ = writeln!(s, "utilization    {:.4}", i.utilization);
        let _ = writeln!(s, "curtailed      {:.3} MWh", self.curtailed_mwh);
        let _ = writeln!(s, "shed           {:.3} MWh", self.shed_mwh);
        let _ = write!(s, "H2 unserved    {:.3} MWh", self.h2_unserved_mwh);
        s
    }
}

fn peak(env: &Envelope, up: impl Fn(usize) -> f64, down: impl Fn(usize) -> f64) -> ShortfallPeak {
    let mut best = ShortfallPeak {
        value: 0.0,
        direction: "up".into(),
        time_min: env.points.first().map_or(0.0, |p| p.time_min),
    };
    for (k, p) in env.points.iter().enumerate() {
        for (dir, v) in [("up", up(k)), ("down", down(k))] {
            if v > best.value {
                best = ShortfallPeak {
                    value: v,
                    direction: dir.into(),
                    time_min: p.time_min,
                };
            }
        }
    }
    best
}

pub fn summarize_envelope(env: &Envelope) -> EnvelopeSummary {
    let sf = env.shortfalls();
    EnvelopeSummary {
        ramp_mw_per_min: peak(env, |k| sf[k].ramp_up, |k| sf[k].ramp_down),
        power_mw: peak(env, |k| sf[k].power_up, |k| sf[k].power_down),
        energy_mwh: peak(env, |k| sf[k].energy_up, |k| sf[k].energy_down),
    }
}

/// Indices of a trace using its own recorded net load, as written to
/// `indices.json`.
pub fn trace_indices(trace: &DispatchTrace) -> FlexIndices {
    let net = trace_net_load(trace);
    let env = build_envelope(trace, &net, trace.dt_h).expect("net load follows the trace");
    indices_from_envelope(&env, trace)
}

fn base_dir(scenario_path: &Path) -> PathBuf {
    scenario_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_spec(scenario_path: &Path, opts: &RunOptions) -> Result<(ScenarioSpec, Profiles), CliError> {
    let mut spec = ScenarioSpec::load(scenario_path)?;
    if let Some(seed) = opts.seed {
        spec.seed = seed;
    }
    if let Some(mode) = opts.forecast {
        spec.mpc.forecast = mode;
    }
    let profiles = spec.profiles(&base_dir(scenario_path), spec.seed)?;
    Ok((spec, profiles))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

/// Runs an already resolved scenario and writes its artifacts to `out_dir`.
pub fn run_resolved(
    spec: &ScenarioSpec,
    profiles: &Profiles,
    out_dir: &Path,
    plots: bool,
) -> Result<RunReport, CliError> {
    let run = run_scenario(spec, profiles)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let trace = &run.trace;
    let net = trace_net_load(trace);
    let env = build_envelope(trace, &net, trace.dt_h).expect("net load follows the trace");
    let indices = indices_from_envelope(&env, trace);

    let mut artifacts = Vec::new();
    let trace_path = out_dir.join("trace.csv");
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).map_err(output_err(&trace_path))?;
    write_file(&trace_path, &buf)?;
    artifacts.push(trace_path);

    let env_path = out_dir.join("envelope.csv");
    let mut buf = Vec::new();
    env.write_csv(&mut buf).map_err(output_err(&env_path))?;
    write_file(&env_path, &buf)?;
    artifacts.push(env_path);

    let idx_path = out_dir.join("indices.json");
    write_file(&idx_path, to_json(&indices).as_bytes())?;
    artifacts.push(idx_path);

    if plots {
        let p = out_dir.join("dispatch.svg");
        plot::dispatch_svg(&p, trace).map_err(output_err(&p))?;
        artifacts.push(p);
        let p = out_dir.join("envelope.svg");
        plot::envelope_svg(&p, &env).map_err(output_err(&p))?;
        artifacts.push(p);
    }

    let dt = trace.dt_h;
    let report_path = out_dir.join("report.json");
    artifacts.push(report_path.clone());
    let report = RunReport {
        scenario: spec.name.clone(),
        seed: spec.seed,
        steps: run.steps,
        indices,
        envelope: summarize_envelope(&env),
        curtailed_mwh: trace
            .steps
            .iter()
            .map(|s| s.control[U_SPILL_W] + s.control[U_SPILL_PV])
            .sum(),
        shed_mwh: trace.steps.iter().map(|s| s.shed_mw * dt).sum(),
        surplus_mwh: trace.steps.iter().map(|s| s.surplus_mw * dt).sum(),
        h2_unserved_mwh: trace.steps.iter().map(|s| s.h2_unserved_mwh()).sum(),
        flagged_steps: trace.steps.iter().filter(|s| s.flagged()).count(),
        artifacts,
    };
    write_file(&report_path, to_json(&report).as_bytes())?;
    Ok(report)
}

pub fn cmd_run(scenario_path: &Path, out_dir: &Path, opts: &RunOptions) -> Result<RunReport, CliError> {
    let (spec, profiles) = load_spec(scenario_path, opts)?;
    run_resolved(&spec, &profiles, out_dir, !opts.no_plots)
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub indices: Option<FlexIndices>,
    pub error: Option<String>,
    #[serde(skip)]
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub artifacts: Vec<PathBuf>,
}

impl SweepReport {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// Exit code of the most severe failed ratio.
    pub fn exit_code(&self) -> i32 {
        self.rows.iter().map(|r| r.exit_code).max().unwrap_or(EXIT_OK)
    }
}

/// Parses `a,b,c` into ratios.
pub fn parse_ratios(text: &str) -> Result<Vec<f64>, CliError> {
    let ratios = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|r| r.is_finite() && *r >= 0.0)
                .ok_or_else(|| CliError::Usage(format!("invalid ratio `{s}`: expected a number ≥ 0")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if ratios.is_empty() {
        return Err(CliError::Usage("--ratios needs at least one value".into()));
    }
    Ok(ratios)
}

pub fn ratio_dir_name(ratio: f64) -> String {
    format!("ratio-{ratio:.3}")
}

/// Runs the scenario once per penetration ratio, `jobs` at a time. Failed
/// ratios are reported in their rows; the others still produce output.
pub fn cmd_sweep(
    scenario_path: &Path,
    ratios: &[f64],
    out_dir: &Path,
    jobs: usize,
    opts: &RunOptions,
) -> Result<SweepReport, CliError> {
    if ratios.is_empty() {
        return Err(CliError::Usage("--ratios needs at least one value".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(CliError::Usage(format!("invalid ratio {r}: expected a number ≥ 0")));
    }
    let mut spec = ScenarioSpec::load(scenario_path)?;
    if let Some(seed) = opts.seed {
        spec.seed = seed;
    }
    if let Some(mode) = opts.forecast {
        spec.mpc.forecast = mode;
    }
    let base = spec.base_profiles(&base_dir(scenario_path), spec.seed)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} jobs: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        ratios
            .par_iter()
            .map(|&ratio| {
                let mut s = spec.clone();
                s.penetration_scale = ratio;
                let profiles = flexblock::scenario::scale_penetration(&base, ratio);
                let dir = out_dir.join(ratio_dir_name(ratio));
                match run_resolved(&s, &profiles, &dir, false) {
                    Ok(rep) => SweepRow {
                        ratio,
                        indices: Some(rep.indices),
                        error: None,
                        exit_code: EXIT_OK,
                    },
                    Err(e) => {
                        log::warn!("ratio {ratio}: {e}");
                        SweepRow {
                            ratio,
                            indices: None,
                            error: Some(e.to_string()),
                            exit_code: e.exit_code(),
                        }
                    }
                }
            })
            .collect()
    });

    let mut artifacts = Vec::new();
    let csv_path = out_dir.join("sweep.csv");
    let mut text = String::from("ratio,e_ir,e_io,e_ic,abandonment,status\n");
    for r in &rows {
        match (&r.indices, &r.error) {
            (Some(i), _) => {
                let _ = writeln!(
                    text,
                    "{},{},{},{},{},ok",
                    r.ratio, i.e_ir, i.e_io, i.e_ic, i.abandonment
                );
            }
            (None, err) => {
                let msg = err.as_deref().unwrap_or("failed").replace(['"', '\n'], " ");
                let _ = writeln!(text, "{},,,,,\"failed: {msg}\"", r.ratio);
            }
        }
    }
    write_file(&csv_path, text.as_bytes())?;
    artifacts.push(csv_path);

    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.indices.map(|i| (r.ratio, i.abandonment)))
        .collect();
    let svg_path = out_dir.join("abandonment.svg");
    plot::abandonment_svg(&svg_path, &points).map_err(output_err(&svg_path))?;
    artifacts.push(svg_path);

    Ok(SweepReport { rows, artifacts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckItem {
    pub rule: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for i in &self.items {
            let mark = if i.passed { "PASS" } else { "FAIL" };
            if i.detail.is_empty() {
                let _ = writeln!(s, "{mark} {}", i.rule);
            } else {
                let _ = writeln!(s, "{mark} {}: {}", i.rule, i.detail);
            }
        }
        s
    }
}

/// Validates the units, controller settings and profiles of a scenario
/// without running it. Only an unreadable scenario file is an error.
pub fn cmd_check(scenario_path: &Path) -> Result<CheckReport, CliError> {
    let spec = ScenarioSpec::load(scenario_path)?;
    let mut items = Vec::new();
    let mut item = |rule: String, result: Result<(), String>| {
        items.push(CheckItem {
            rule,
            passed: result.is_ok(),
            detail: result.err().unwrap_or_default(),
        })
    };

    item("unit list".into(), spec.block().map(|_| ()).map_err(|e| e.to_string()));
    for u in &spec.units {
        let model = u.model();
        let violations = validate_unit(&model);
        if violations.is_empty() {
            item(format!("{} parameters", u.kind), Ok(()));
        }
        for v in violations {
            item(format!("{} {}", u.kind, v.field), Err(v.rule));
        }
    }
    item("mpc settings".into(), spec.mpc.validate().map_err(|e| e.to_string()));

    match spec.profiles(&base_dir(scenario_path), spec.seed) {
        Err(e) => item("profiles".into(), Err(e.to_string())),
        Ok(p) => {
            item("profiles".into(), p.validate().map_err(|e| e.to_string()));
            let needed = spec.run_steps(p.step_minutes);
            let horizon = if p.len() >= needed && needed > 0 {
                Ok(())
            } else {
                Err(format!(
                    "insufficient horizon: profiles cover {} steps, run needs {needed}",
                    p.len()
                ))
            };
            item("run length".into(), horizon);
        }
    }
    Ok(CheckReport { items })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratios("0,0.1, 0.5").unwrap(), vec![0.0, 0.1, 0.5]);
        assert_eq!(parse_ratios("").unwrap_err().exit_code(), EXIT_USAGE);
        assert!(parse_ratios("0.1,-2").is_err());
        assert!(parse_ratios("x").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_USAGE);
        assert_eq!(
            CliError::Scenario(ScenarioError::Validation("x".into())).exit_code(),
            EXIT_VALIDATION
        );
        assert_eq!(
            CliError::Scenario(ScenarioError::Mpc(MpcError::LadderExhausted {
                step: 3,
                reason: "x".into()
            }))
            .exit_code(),
            EXIT_SOLVER
        );
        assert_eq!(
            CliError::Scenario(ScenarioError::Config("x".into())).exit_code(),
            EXIT_USAGE
        );
    }

    #[test]
    fn ratio_directories_sort() {
        assert_eq!(ratio_dir_name(0.1), "ratio-0.100");
        assert!(ratio_dir_name(0.2) < ratio_dir_name(0.3));
    }
}
