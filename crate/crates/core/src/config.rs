//! Sectioned key-value run configuration.
//!
//! The on-disk grammar is deliberately small. A file is a sequence of
//! `[section]` headers and `key = value` lines; blank lines and lines whose
//! first non-space character is `#` are ignored. The sections and keys are
//!
//! ```text
//! [domain]
//! mesh_h  = 0.05            # required, target edge length in (0, 1)
//! holdall = 2.0             # optional, hold-all disk radius, > 1
//!
//! [flow]
//! field = rotation 1.0      # required unless the forcing is manufactured
//!
//! [advection]
//! velocity = equal-w        # optional; "equal-w" or a field spec
//!
//! [forcing]
//! kind = zero               # "zero" | "manufactured:rotation-stokes"
//!                           #        | "manufactured:rotation-oseen"
//!
//! [time]
//! tau      = 0.1            # exactly one of tau / tau_list
//! tau_list = 0.1 0.05
//! t_end    = 0.5            # required, at least the largest step
//! substeps = 10             # optional, flow substeps per time step
//!
//! [solver]
//! tolerance      = 1e-10    # optional, relative residual bound
//! max_iterations = 500      # optional, linear-solver iteration cap
//!
//! [output]
//! directory  = out          # optional
//! csv        = true         # optional
//! vtk_stride = 0            # optional, 0 disables VTK snapshots
//! ```
//!
//! A field spec is one of `zero`, `rotation <omega>`,
//! `shear <a11> <a12> <a21> <a22>`,
//! `bump <cx> <cy> <radius> <amplitude> <exponent>`, or a `+`-separated sum
//! of those. Manufactured forcing fixes the flow, the advection and the
//! initial velocity, so the `[flow]` and `[advection]` sections must then be
//! absent; zero-forcing runs start from the built-in bump initial velocity.
//! Unknown sections and keys are rejected, and every diagnostic names the
//! offending `section.key`.

use std::fmt::Write as _;
use std::path::Path;

use crate::flowmap::VelocityField;
use crate::timestepper::RunConfig;
use crate::verification::{
    rotation_oseen_case, rotation_stokes_case, standard_bump, ManufacturedCase,
};
use crate::{Error, Mat2, Result, Vec2};

/// Output controls for the command-line driver.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputOptions {
    /// Directory all files are written into; created if missing.
    pub directory: String,
    /// Whether CSV tables are written.
    pub csv: bool,
    /// Write a VTK snapshot every this many steps; 0 disables snapshots.
    pub vtk_stride: usize,
}

impl Default for OutputOptions {
    fn default() -> Self {
        OutputOptions {
            directory: "out".into(),
            csv: true,
            vtk_stride: 0,
        }
    }
}

/// A fully validated configuration: the solver parameters of a [`RunConfig`]
/// plus the step-size list and output controls the driver needs.
#[derive(Clone)]
pub struct JobConfig {
    /// Target mesh edge length.
    pub mesh_h: f64,
    /// Hold-all disk radius.
    pub holdall: f64,
    /// Step sizes, strictly decreasing; a single entry means a plain run.
    pub taus: Vec<f64>,
    /// Final time.
    pub t_end: f64,
    /// Flow-integration substeps per time step.
    pub substeps: usize,
    /// Relative residual bound for the saddle solver.
    pub solver_tol: f64,
    /// Iteration cap for the linear solver.
    pub max_iterations: usize,
    /// Output controls.
    pub output: OutputOptions,
    flow: Option<VelocityField>,
    advection: Option<VelocityField>,
    case: Option<(String, ManufacturedCase)>,
}

impl JobConfig {
    /// The manufactured case selected by the forcing, if any.
    pub fn case(&self) -> Option<&ManufacturedCase> {
        self.case.as_ref().map(|(_, case)| case)
    }

    /// Name of the manufactured case, as written in the file.
    pub fn case_name(&self) -> Option<&str> {
        self.case.as_ref().map(|(name, _)| name.as_str())
    }

    /// Whether the file requested a multi-step-size study.
    pub fn is_study(&self) -> bool {
        self.taus.len() > 1
    }

    /// Solver configuration for one step size from the list.
    pub fn run_config(&self, tau: f64) -> RunConfig {
        let mut cfg = match &self.case {
            Some((_, case)) => case.run_config(tau, self.t_end, self.mesh_h),
            None => {
                let flow = self.flow.clone().expect("flow is present when no case is");
                let mut cfg = RunConfig::new(flow, tau, self.t_end, self.mesh_h);
                cfg.advection = self.advection.clone();
                cfg.u0 = Some(default_initial_velocity());
                cfg
            }
        };
        cfg.substeps = self.substeps;
        cfg.holdall = self.holdall;
        cfg.solver_tol = self.solver_tol;
        cfg
    }

    /// The effective configuration, defaults included, in the same grammar
    /// the parser reads; parsing the echo reproduces the configuration.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        writeln!(s, "[domain]").unwrap();
        writeln!(s, "mesh_h = {:?}", self.mesh_h).unwrap();
        writeln!(s, "holdall = {:?}", self.holdall).unwrap();
        match &self.case {
            Some((name, _)) => {
                writeln!(s, "[forcing]").unwrap();
                writeln!(s, "kind = manufactured:{name}").unwrap();
            }
            None => {
                let flow = self.flow.as_ref().expect("flow is present when no case is");
                writeln!(s, "[flow]").unwrap();
                writeln!(s, "field = {}", render_field(flow)).unwrap();
                writeln!(s, "[advection]").unwrap();
                match &self.advection {
                    Some(v) => writeln!(s, "velocity = {}", render_field(v)).unwrap(),
                    None => writeln!(s, "velocity = equal-w").unwrap(),
                }
                writeln!(s, "[forcing]").unwrap();
                writeln!(s, "kind = zero").unwrap();
            }
        }
        writeln!(s, "[time]").unwrap();
        if let [tau] = self.taus[..] {
            writeln!(s, "tau = {tau:?}").unwrap();
        } else {
            let list: Vec<String> = self.taus.iter().map(|t| format!("{t:?}")).collect();
            writeln!(s, "tau_list = {}", list.join(" ")).unwrap();
        }
        writeln!(s, "t_end = {:?}", self.t_end).unwrap();
        writeln!(s, "substeps = {}", self.substeps).unwrap();
        writeln!(s, "[solver]").unwrap();
        writeln!(s, "tolerance = {:?}", self.solver_tol).unwrap();
        writeln!(s, "max_iterations = {}", self.max_iterations).unwrap();
        writeln!(s, "[output]").unwrap();
        writeln!(s, "directory = {}", self.output.directory).unwrap();
        writeln!(s, "csv = {}", self.output.csv).unwrap();
        writeln!(s, "vtk_stride = {}", self.output.vtk_stride).unwrap();
        s
    }
}

/// Initial velocity used by zero-forcing runs: a sharply localized bump
/// well inside the disk.
pub fn default_initial_velocity() -> VelocityField {
    standard_bump().field().expect("standard bump parameters are valid")
}

/// Read and validate a configuration file.
pub fn parse_config(path: &Path) -> Result<JobConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Validate configuration text; see the module docs for the grammar.
pub fn parse_config_str(text: &str) -> Result<JobConfig> {
    let mut entries = Entries::parse(text)?;

    let mesh_h = entries.require_f64("domain", "mesh_h")?;
    if !(mesh_h > 0.0 && mesh_h < 1.0) {
        return Err(bad_value("domain.mesh_h", "must lie in (0, 1)", mesh_h));
    }
    let holdall = entries.f64("domain", "holdall")?.unwrap_or(2.0);
    if !(holdall > 1.0) {
        return Err(bad_value("domain.holdall", "must be greater than 1", holdall));
    }

    let case = match entries.string("forcing", "kind")?.as_deref() {
        None | Some("zero") => None,
        Some("manufactured:rotation-stokes") => {
            Some(("rotation-stokes".to_string(), rotation_stokes_case()))
        }
        Some("manufactured:rotation-oseen") => {
            Some(("rotation-oseen".to_string(), rotation_oseen_case()))
        }
        Some(other) => {
            return Err(Error::Config(format!(
                "forcing.kind: unknown value '{other}' (expected zero, \
                 manufactured:rotation-stokes or manufactured:rotation-oseen)"
            )))
        }
    };

    let flow_spec = entries.string("flow", "field")?;
    let advection_spec = entries.string("advection", "velocity")?;
    let (flow, advection) = if let Some((name, _)) = &case {
        if flow_spec.is_some() {
            return Err(Error::Config(format!(
                "flow.field conflicts with forcing.kind = manufactured:{name}, \
                 which fixes the flow; remove the [flow] section"
            )));
        }
        if advection_spec.is_some() {
            return Err(Error::Config(format!(
                "advection.velocity conflicts with forcing.kind = \
                 manufactured:{name}, which fixes the advection; remove the \
                 [advection] section"
            )));
        }
        (None, None)
    } else {
        let spec = flow_spec
            .ok_or_else(|| Error::Config("missing required key flow.field".into()))?;
        let flow = parse_field_spec("flow.field", &spec)?;
        let advection = match advection_spec.as_deref() {
            None | Some("equal-w") => None,
            Some(spec) => Some(parse_field_spec("advection.velocity", spec)?),
        };
        (Some(flow), advection)
    };

    let tau = entries.f64("time", "tau")?;
    let tau_list = entries.f64_list("time", "tau_list")?;
    let mut taus = match (tau, tau_list) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "time.tau and time.tau_list are mutually exclusive".into(),
            ))
        }
        (Some(tau), None) => vec![tau],
        (None, Some(list)) => list,
        (None, None) => {
            return Err(Error::Config(
                "missing required key time.tau (or time.tau_list)".into(),
            ))
        }
    };
    for &tau in &taus {
        if !(tau > 0.0) {
            return Err(bad_value("time.tau", "must be positive", tau));
        }
    }
    taus.sort_by(|a, b| b.partial_cmp(a).expect("taus are finite"));
    if taus.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("time.tau_list entries must be distinct".into()));
    }

    let t_end = entries.require_f64("time", "t_end")?;
    if t_end < taus[0] {
        return Err(Error::Config(format!(
            "time.t_end must be at least the largest time step (got {t_end:?} < {:?})",
            taus[0]
        )));
    }
    let substeps = entries.usize("time", "substeps")?.unwrap_or(10);
    if substeps == 0 {
        return Err(Error::Config("time.substeps must be at least 1".into()));
    }

    let solver_tol = entries.f64("solver", "tolerance")?.unwrap_or(1e-10);
    if !(solver_tol > 0.0 && solver_tol <= 1e-4) {
        return Err(bad_value("solver.tolerance", "must lie in (0, 1e-4]", solver_tol));
    }
    let max_iterations = entries.usize("solver", "max_iterations")?.unwrap_or(500);
    if max_iterations == 0 {
        return Err(Error::Config("solver.max_iterations must be at least 1".into()));
    }

    let directory = entries
        .string("output", "directory")?
        .unwrap_or_else(|| "out".into());
    if directory.is_empty() {
        return Err(Error::Config("output.directory must be non-empty".into()));
    }
    let csv = entries.bool("output", "csv")?.unwrap_or(true);
    let vtk_stride = entries.usize("output", "vtk_stride")?.unwrap_or(0);

    entries.finish()?;

    let job = JobConfig {
        mesh_h,
        holdall,
        taus,
        t_end,
        substeps,
        solver_tol,
        max_iterations,
        output: OutputOptions {
            directory,
            csv,
            vtk_stride,
        },
        flow,
        advection,
        case,
    };
    for &tau in &job.taus {
        job.run_config(tau).validate()?;
    }
    Ok(job)
}

fn bad_value(key: &str, rule: &str, got: f64) -> Error {
    Error::Config(format!("{key} {rule} (got {got:?})"))
}

const SECTIONS: [&str; 7] = [
    "domain",
    "flow",
    "advection",
    "forcing",
    "time",
    "solver",
    "output",
];

/// Raw `(section, key, value)` entries, with syntax errors already rejected;
/// the typed getters below consume entries so leftovers are unknown keys.
struct Entries {
    items: Vec<(usize, String, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Entries> {
        let mut items: Vec<(usize, String, String)> = Vec::new();
        let mut section: Option<usize> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        Error::Config(format!("line {lineno}: unterminated section header"))
                    })?
                    .trim();
                let pos = SECTIONS.iter().position(|s| *s == name).ok_or_else(|| {
                    Error::Config(format!("line {lineno}: unknown section [{name}]"))
                })?;
                section = Some(pos);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {lineno}: expected 'key = value', got '{line}'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {lineno}: empty key")));
            }
            let sec = section.ok_or_else(|| {
                Error::Config(format!("line {lineno}: key '{key}' before any [section]"))
            })?;
            if items.iter().any(|(s, k, _)| *s == sec && k == key) {
                return Err(Error::Config(format!(
                    "line {lineno}: duplicate key {}.{key}",
                    SECTIONS[sec]
                )));
            }
            items.push((sec, key.to_string(), value.to_string()));
        }
        Ok(Entries { items })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        let sec = SECTIONS.iter().position(|s| *s == section).expect("known section");
        let at = self.items.iter().position(|(s, k, _)| *s == sec && k == key)?;
        Some(self.items.remove(at).2)
    }

    fn string(&mut self, section: &str, key: &str) -> Result<Option<String>> {
        Ok(self.take(section, key))
    }

    fn f64(&mut self, section: &str, key: &str) -> Result<Option<f64>> {
        self.take(section, key)
            .map(|v| parse_number(&format!("{section}.{key}"), &v))
            .transpose()
    }

    fn require_f64(&mut self, section: &str, key: &str) -> Result<f64> {
        self.f64(section, key)?.ok_or_else(|| {
            Error::Config(format!("missing required key {section}.{key}"))
        })
    }

    fn f64_list(&mut self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.take(section, key) else {
            return Ok(None);
        };
        let label = format!("{section}.{key}");
        let list: Vec<f64> = v
            .split_whitespace()
            .map(|tok| parse_number(&label, tok))
            .collect::<Result<_>>()?;
        if list.is_empty() {
            return Err(Error::Config(format!("{label} must list at least one number")));
        }
        Ok(Some(list))
    }

    fn usize(&mut self, section: &str, key: &str) -> Result<Option<usize>> {
        self.take(section, key)
            .map(|v| {
                v.parse::<usize>().map_err(|_| {
                    Error::Config(format!(
                        "{section}.{key}: expected a non-negative integer, got '{v}'"
                    ))
                })
            })
            .transpose()
    }

    fn bool(&mut self, section: &str, key: &str) -> Result<Option<bool>> {
        self.take(section, key)
            .map(|v| match v.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!(
                    "{section}.{key}: expected true or false, got '{v}'"
                ))),
            })
            .transpose()
    }

    fn finish(self) -> Result<()> {
        match self.items.first() {
            None => Ok(()),
            Some((sec, key, _)) => Err(Error::Config(format!(
                "unknown key {}.{key}",
                SECTIONS[*sec]
            ))),
        }
    }
}

fn parse_number(label: &str, token: &str) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| Error::Config(format!("{label}: expected a number, got '{token}'")))?;
    if !v.is_finite() {
        return Err(Error::Config(format!("{label}: number must be finite, got '{token}'")));
    }
    Ok(v)
}

/// Parse a field spec; `label` is the `section.key` used in diagnostics.
fn parse_field_spec(label: &str, spec: &str) -> Result<VelocityField> {
    let bad = |msg: String| Error::Config(format!("{label}: {msg}"));
    let mut parts = Vec::new();
    for chunk in spec.split('+') {
        let toks: Vec<&str> = chunk.split_whitespace().collect();
        let (&kind, args) = toks
            .split_first()
            .ok_or_else(|| bad("empty field spec".into()))?;
        let expect = |n: usize| -> Result<Vec<f64>> {
            if args.len() != n {
                return Err(bad(format!(
                    "{kind} takes {n} number(s), got {}",
                    args.len()
                )));
            }
            args.iter().map(|tok| parse_number(label, tok)).collect()
        };
        let field = match kind {
            "zero" => {
                expect(0)?;
                VelocityField::zero()
            }
            "rotation" => {
                let a = expect(1)?;
                VelocityField::rigid_rotation(a[0])
            }
            "shear" => {
                let a = expect(4)?;
                VelocityField::shear(Mat2::new(a[0], a[1], a[2], a[3]))
                    .map_err(|e| bad(e.to_string()))?
            }
            "bump" => {
                if args.len() != 5 {
                    return Err(bad(format!("bump takes 5 numbers, got {}", args.len())));
                }
                let a: Vec<f64> = args[..4]
                    .iter()
                    .map(|tok| parse_number(label, tok))
                    .collect::<Result<_>>()?;
                let exponent: u32 = args[4].parse().map_err(|_| {
                    bad(format!(
                        "bump exponent must be a non-negative integer, got '{}'",
                        args[4]
                    ))
                })?;
                VelocityField::stream_bump(Vec2::new(a[0], a[1]), a[2], a[3], exponent)
                    .map_err(|e| bad(e.to_string()))?
            }
            other => {
                return Err(bad(format!(
                    "unknown field kind '{other}' (expected zero, rotation, shear or bump)"
                )))
            }
        };
        parts.push(field);
    }
    Ok(if parts.len() == 1 {
        parts.pop().expect("one part")
    } else {
        VelocityField::sum(parts)
    })
}

/// Render a field back into spec syntax; inverse of [`parse_field_spec`].
fn render_field(field: &VelocityField) -> String {
    match field {
        VelocityField::Zero => "zero".into(),
        VelocityField::RigidRotation { omega } => format!("rotation {omega:?}"),
        VelocityField::Shear { matrix } => format!(
            "shear {:?} {:?} {:?} {:?}",
            matrix[(0, 0)],
            matrix[(0, 1)],
            matrix[(1, 0)],
            matrix[(1, 1)]
        ),
        VelocityField::StreamBump {
            center,
            radius,
            amplitude,
            exponent,
        } => format!(
            "bump {:?} {:?} {radius:?} {amplitude:?} {exponent}",
            center.x, center.y
        ),
        VelocityField::Sum(parts) => {
            let rendered: Vec<String> = parts.iter().map(render_field).collect();
            rendered.join(" + ")
        }
    }
}
