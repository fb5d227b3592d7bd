//! Config-driven runs: TOML in, `results.json` plus CSV traces (and optional
//! SVG plots) out.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::oracle::{fd_eigenvalues, FdProblem};
use crate::plot;
use crate::potential::{
    check_condition_a, check_condition_b, check_theorem3, find_anchor, region_anchor, rho_growth,
    sample_n_region, LambdaRect, Potential, C64,
};
use crate::spectrum::{
    apply_resolvent, find_eigenvalues, total_multiplicity, weighted_bound_report, BoundaryForm, CharFunction,
    EigenSearch, ResolventSettings, Source, SpectralSettings,
};
use crate::weyl::{boundary_limit_trace, weyl_solution_from, weyl_theta, WeylSettings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NONCONVERGENCE: i32 = 2;
pub const EXIT_PRECONDITION: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    CheckA,
    CheckB,
    CheckThm3,
    RegionMap,
    Weyl,
    Eigs,
    Resolvent,
    Bounds,
    OracleCompare,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::CheckA => "check-a",
            Task::CheckB => "check-b",
            Task::CheckThm3 => "check-thm3",
            Task::RegionMap => "region-map",
            Task::Weyl => "weyl",
            Task::Eigs => "eigs",
            Task::Resolvent => "resolvent",
            Task::Bounds => "bounds",
            Task::OracleCompare => "oracle-compare",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum PotentialFamily {
    Constant {
        value: C64,
    },
    MonomialPhase {
        amplitude: f64,
        exponent: f64,
        #[serde(default)]
        phase: f64,
    },
    ComplexAiry,
    Harmonic,
    Polynomial {
        coefficients: Vec<C64>,
    },
    /// Inline samples, or a CSV file with header `x,re,im` (relative paths
    /// resolve against the config file).
    Tabulated {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        xs: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        values: Option<Vec<C64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialConfig {
    #[serde(flatten)]
    pub family: PotentialFamily,
    #[serde(default)]
    pub smooth_start: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedBoundary {
    Dirichlet,
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundaryConfig {
    Named(NamedBoundary),
    Form { alpha0: C64, alpha1: C64 },
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig::Named(NamedBoundary::Dirichlet)
    }
}

impl BoundaryConfig {
    pub fn build(&self) -> Result<BoundaryForm> {
        match *self {
            BoundaryConfig::Named(NamedBoundary::Dirichlet) => Ok(BoundaryForm::dirichlet()),
            BoundaryConfig::Named(NamedBoundary::Neumann) => Ok(BoundaryForm::neumann()),
            BoundaryConfig::Form { alpha0, alpha1 } => BoundaryForm::new(alpha0, alpha1),
        }
    }
}

/// Numeric settings shared by the tasks; each task reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub lambda: C64,
    /// Residual tolerance of the eigenvalue search and the resolvent.
    pub tol: f64,
    /// ODE tolerance; task default when absent.
    pub ode_tol: Option<f64>,
    /// Target Weyl disk radius; task default when absent.
    pub radius_tol: Option<f64>,
    pub b_max: Option<f64>,
    pub anchor: Option<f64>,
    pub condition_c: f64,
    pub epsilon: f64,
    pub kappa: f64,
    pub delta: f64,
    /// Start of the checked window; the smoothness start when absent.
    pub x_lo: Option<f64>,
    pub x_max: f64,
    pub n_grid: usize,
    pub region: Option<LambdaRect>,
    /// Lambda samples `[n_re, n_im]` of the region map.
    pub region_n: [usize; 2],
    pub contour_samples: usize,
    pub max_refine: usize,
    pub max_subdivision: usize,
    pub resolvent_h: f64,
    pub bound_c: Option<f64>,
    pub rho_windows: usize,
    pub eta_samples: usize,
    pub fd_length: f64,
    pub fd_n: usize,
    pub fd_count: Option<usize>,
}

impl Default for Settings {
    fn default() -> Self {
        let spectral = SpectralSettings::default();
        Self {
            lambda: C64::new(0.0, 0.0),
            tol: spectral.tol,
            ode_tol: None,
            radius_tol: None,
            b_max: None,
            anchor: None,
            condition_c: spectral.condition_c,
            epsilon: 0.25,
            kappa: std::f64::consts::FRAC_PI_4,
            delta: 0.5,
            x_lo: None,
            x_max: 20.0,
            n_grid: crate::potential::DEFAULT_GRID,
            region: None,
            region_n: [21, 21],
            contour_samples: spectral.contour_samples,
            max_refine: spectral.max_refine,
            max_subdivision: spectral.max_subdivision,
            resolvent_h: ResolventSettings::default().h,
            bound_c: None,
            rho_windows: 8,
            eta_samples: 401,
            fd_length: 20.0,
            fd_n: 2000,
            fd_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub potential: PotentialConfig,
    #[serde(default)]
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub settings: Settings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Directory against which relative data paths resolve.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn build_potential(&self) -> Result<Potential> {
        let pot = match &self.potential.family {
            PotentialFamily::Constant { value } => Potential::new(crate::potential::Family::Constant { value: *value })?,
            PotentialFamily::MonomialPhase { amplitude, exponent, phase } => {
                Potential::monomial_phase(*amplitude, *exponent, *phase)?
            }
            PotentialFamily::ComplexAiry => Potential::complex_airy(),
            PotentialFamily::Harmonic => Potential::harmonic(),
            PotentialFamily::Polynomial { coefficients } => Potential::polynomial(coefficients.clone())?,
            PotentialFamily::Tabulated { path, xs, values } => match (path, xs, values) {
                (Some(p), None, None) => {
                    let (xs, values) = read_table(&self.base_dir.join(p))?;
                    Potential::tabulated(xs, values)?
                }
                (None, Some(xs), Some(values)) => Potential::tabulated(xs.clone(), values.clone())?,
                _ => return Err(Error::Config("tabulated potential needs either `path` or both `xs` and `values`".into())),
            },
        };
        if !(self.potential.smooth_start >= 0.0) {
            return Err(Error::Config("smooth_start must be non-negative".into()));
        }
        Ok(pot.with_smooth_start(self.potential.smooth_start))
    }

    /// Everything `validate` checks: the potential, the boundary form and the
    /// settings the task needs.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.build_potential().map_err(cfg_err)?;
        self.boundary.build().map_err(cfg_err)?;
        let s = &self.settings;
        let positive = [
            ("tol", Some(s.tol)),
            ("ode_tol", s.ode_tol),
            ("radius_tol", s.radius_tol),
            ("condition_c", Some(s.condition_c)),
            ("x_max", Some(s.x_max)),
            ("resolvent_h", Some(s.resolvent_h)),
            ("fd_length", Some(s.fd_length)),
        ];
        for (name, v) in positive {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
                }
            }
        }
        if !s.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        if s.n_grid < 2 || s.contour_samples < 8 || s.eta_samples < 2 || s.fd_n < 8 || s.rho_windows == 0 {
            return Err(Error::Config("grid counts too small".into()));
        }
        if let Some(r) = &s.region {
            let ok = [r.re.0, r.re.1, r.im.0, r.im.1].iter().all(|v| v.is_finite()) && r.re.1 > r.re.0 && r.im.1 > r.im.0;
            if !ok {
                return Err(Error::Config("region needs finite bounds with re[0] < re[1] and im[0] < im[1]".into()));
            }
        }
        if s.region_n.contains(&0) {
            return Err(Error::Config("region_n entries must be positive".into()));
        }
        match self.task {
            Task::RegionMap | Task::Eigs | Task::OracleCompare if s.region.is_none() => {
                return Err(Error::Config(format!("task {} needs settings.region", self.task.name())))
            }
            Task::Resolvent | Task::Bounds if self.source.is_none() => {
                return Err(Error::Config(format!("task {} needs a [source] table", self.task.name())))
            }
            _ => {}
        }
        if let Some(src) = &self.source {
            if !src.eval(0.0).is_finite() {
                return Err(Error::Config("source is not finite at x = 0".into()));
            }
        }
        Ok(())
    }

    fn weyl_settings(&self) -> WeylSettings {
        let d = WeylSettings::default();
        WeylSettings {
            ode_tol: self.settings.ode_tol.unwrap_or(d.ode_tol),
            radius_tol: self.settings.radius_tol.unwrap_or(d.radius_tol),
            b_max: self.settings.b_max,
            ..d
        }
    }

    fn spectral_settings(&self) -> SpectralSettings {
        let s = &self.settings;
        let d = SpectralSettings::default();
        SpectralSettings {
            weyl: WeylSettings {
                ode_tol: s.ode_tol.unwrap_or(d.weyl.ode_tol),
                radius_tol: s.radius_tol.unwrap_or(d.weyl.radius_tol),
                b_max: s.b_max,
                ..d.weyl
            },
            tol: s.tol,
            contour_samples: s.contour_samples,
            max_refine: s.max_refine,
            max_subdivision: s.max_subdivision,
            condition_c: s.condition_c,
            anchor_x_max: s.x_max,
            anchor_grid: s.n_grid,
            ..d
        }
    }

    fn resolvent_settings(&self) -> ResolventSettings {
        ResolventSettings { x_max: self.settings.x_max, h: self.settings.resolvent_h, tol: self.settings.tol, ..Default::default() }
    }
}

fn read_table(path: &Path) -> Result<(Vec<f64>, Vec<C64>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut xs = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.deserialize::<(f64, f64, f64)>() {
        let (x, re, im) = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        xs.push(x);
        values.push(C64::new(re, im));
    }
    Ok((xs, values))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Io(_) => EXIT_CONFIG,
        Error::Precondition(_) | Error::NoAnchor { .. } | Error::Branch { .. } | Error::DiskDenominator { .. } => {
            EXIT_PRECONDITION
        }
        _ => EXIT_NONCONVERGENCE,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match exit_code(e) {
        EXIT_CONFIG => "config",
        EXIT_PRECONDITION => "precondition",
        _ => "non-convergence",
    }
}

/// A CSV table: header plus pre-formatted rows.
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&'static str]) -> Self {
        Self { name: name.to_string(), header: header.to_vec(), rows: Vec::new() }
    }
}

/// Everything a task produced.
pub struct Outcome {
    pub code: i32,
    pub results: Value,
    pub diagnostics: Map<String, Value>,
    pub tables: Vec<Table>,
    pub plots: Vec<(String, String)>,
}

impl Outcome {
    fn new(results: Value) -> Self {
        Self { code: EXIT_OK, results, diagnostics: Map::new(), tables: Vec::new(), plots: Vec::new() }
    }
}

/// 17 significant digits, the shortest width that round-trips every `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// Pretty JSON with fixed float formatting. Keys come out sorted because
/// `serde_json::Map` is ordered.
struct Canonical {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*);)*) => {
        $(fn $name<W: ?Sized + std::io::Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> std::io::Result<()> {
            self.inner.$name(w $(, $arg)*)
        })*
    };
}

impl serde_json::ser::Formatter for Canonical {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        w.write_all(fmt_f64(v).as_bytes())
    }

    fn write_f32<W: ?Sized + std::io::Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        self.write_f64(w, v as f64)
    }

    delegate! {
        begin_array();
        end_array();
        begin_array_value(first: bool);
        end_array_value();
        begin_object();
        end_object();
        begin_object_key(first: bool);
        begin_object_value();
        end_object_value();
    }
}

pub fn canonical_json(v: &Value) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Canonical { inner: Default::default() });
    v.serialize(&mut ser).expect("serialising a Value cannot fail");
    out.push(b'\n');
    String::from_utf8(out).expect("JSON is UTF-8")
}

/// The `results.json` document of a run.
pub fn document(cfg: &RunConfig, outcome: &Outcome) -> Value {
    json!({
        "task": cfg.task.name(),
        "config_echo": to_json(cfg),
        "results": outcome.results,
        "diagnostics": Value::Object(outcome.diagnostics.clone()),
        "version": env!("CARGO_PKG_VERSION"),
    })
}

/// Run the configured task and write its files into `out`. Returns the exit code.
pub fn run(cfg: &RunConfig, out: &Path, plots: bool) -> Result<i32> {
    let outcome = execute(cfg);
    fs::create_dir_all(out)?;
    fs::write(out.join("results.json"), canonical_json(&document(cfg, &outcome)))?;
    for t in &outcome.tables {
        let mut w = csv::Writer::from_path(out.join(&t.name)).map_err(|e| Error::Io(e.to_string()))?;
        w.write_record(&t.header).map_err(|e| Error::Io(e.to_string()))?;
        for r in &t.rows {
            w.write_record(r).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
    }
    if plots {
        for (name, svg) in &outcome.plots {
            fs::File::create(out.join(name))?.write_all(svg.as_bytes())?;
        }
    }
    Ok(outcome.code)
}

/// Run the task in memory. Failures become a `diagnostics.error` entry and
/// the matching exit code.
pub fn execute(cfg: &RunConfig) -> Outcome {
    let result = cfg.validate().and_then(|_| {
        let pot = cfg.build_potential()?;
        let bc = cfg.boundary.build()?;
        match cfg.task {
            Task::CheckA | Task::CheckB | Task::CheckThm3 => task_check(cfg, &pot),
            Task::RegionMap => task_region(cfg, &pot),
            Task::Weyl => task_weyl(cfg, &pot),
            Task::Eigs => task_eigs(cfg, &pot, bc),
            Task::Resolvent => task_resolvent(cfg, &pot, bc),
            Task::Bounds => task_bounds(cfg, &pot, bc),
            Task::OracleCompare => task_oracle(cfg, &pot, bc),
        }
    });
    match result {
        Ok(o) => o,
        Err(e) => {
            let mut o = Outcome::new(Value::Null);
            o.code = exit_code(&e);
            o.diagnostics.insert("error".into(), Value::String(e.to_string()));
            o.diagnostics.insert("error_kind".into(), Value::String(error_kind(&e).into()));
            o
        }
    }
}

fn task_check(cfg: &RunConfig, pot: &Potential) -> Result<Outcome> {
    let s = &cfg.settings;
    let x_lo = s.x_lo.unwrap_or(pot.smooth_start());
    let report = match cfg.task {
        Task::CheckA => check_condition_a(pot, s.lambda, x_lo, s.x_max, s.condition_c, s.n_grid)?,
        Task::CheckB => check_condition_b(pot, s.lambda, x_lo, s.x_max, s.condition_c, s.epsilon, s.n_grid)?,
        _ => check_theorem3(pot, s.kappa, s.delta, x_lo, s.x_max, s.n_grid)?,
    };
    let mut results = Map::new();
    results.insert("report".into(), to_json(&report));
    if cfg.task != Task::CheckThm3 {
        let growth = rho_growth(pot, s.lambda, x_lo, s.x_max, s.rho_windows, s.n_grid)?;
        results.insert("rho_growth".into(), to_json(&growth));
        results.insert("lambda".into(), to_json(&s.lambda));
    }
    let mut o = Outcome::new(Value::Object(results));
    if !report.holds {
        o.code = EXIT_PRECONDITION;
        o.diagnostics.insert(
            "violation".into(),
            json!({ "first_violation": report.first_violation, "margin": report.margin }),
        );
    }
    Ok(o)
}

fn task_region(cfg: &RunConfig, pot: &Potential) -> Result<Outcome> {
    let s = &cfg.settings;
    let rect = s.region.expect("validated");
    let [n_re, n_im] = s.region_n;
    let lambdas = rect.grid(n_re, n_im);
    let samples = sample_n_region(pot, &lambdas, s.condition_c, s.x_max, s.n_grid)?;
    let members = samples.iter().filter(|r| r.member).count();
    let max_anchor = samples.iter().filter_map(|r| r.anchor).fold(f64::NEG_INFINITY, f64::max);
    let mut table = Table::new("region.csv", &["re", "im", "member", "anchor", "margin"]);
    for r in &samples {
        table.rows.push(vec![
            fmt_f64(r.lambda.re),
            fmt_f64(r.lambda.im),
            (r.member as u8).to_string(),
            fmt_opt(r.anchor),
            fmt_opt(r.margin),
        ]);
    }
    let mut o = Outcome::new(json!({
        "region": to_json(&rect),
        "grid": [n_re, n_im],
        "samples": samples.len(),
        "members": members,
        "max_anchor": if members > 0 { Some(max_anchor) } else { None },
    }));
    o.tables.push(table);
    o.plots.push(("region.svg".into(), plot::region_plot(&samples, &rect, n_re, n_im)));
    Ok(o)
}

fn anchor_for(cfg: &RunConfig, pot: &Potential, lambda: C64) -> Result<f64> {
    let s = &cfg.settings;
    if let Some(a) = s.anchor {
        return Ok(a);
    }
    find_anchor(pot, lambda, s.condition_c, s.x_max, s.n_grid)?.ok_or(Error::NoAnchor { re: lambda.re, im: lambda.im })
}

fn task_weyl(cfg: &RunConfig, pot: &Potential) -> Result<Outcome> {
    let s = &cfg.settings;
    let ws = cfg.weyl_settings();
    let anchor = anchor_for(cfg, pot, s.lambda)?;
    let wr = weyl_theta(pot, s.lambda, anchor, &ws)?;
    let mut disks = Table::new("disks.csv", &["b", "center_re", "center_im", "radius"]);
    for d in &wr.disks {
        disks.rows.push(vec![fmt_f64(d.b), fmt_f64(d.center.re), fmt_f64(d.center.im), fmt_f64(d.radius)]);
    }
    let mut results = json!({
        "lambda": s.lambda,
        "anchor": wr.anchor,
        "theta": wr.theta,
        "mu": wr.mu,
        "converged": wr.converged,
        "final_radius": wr.final_radius,
        "radius_tol": ws.radius_tol,
        "disk_count": wr.disks.len(),
        "wronskian_drift": wr.wronskian_drift,
    });
    let mut o = Outcome::new(Value::Null);
    o.plots.push(("disks.svg".into(), plot::disk_plot(&wr.disks)));
    o.tables.push(disks);
    if !wr.converged {
        o.code = EXIT_NONCONVERGENCE;
        o.diagnostics.insert(
            "error".into(),
            Value::String(format!("Weyl disks did not reach radius {} (last radius {})", ws.radius_tol, wr.final_radius)),
        );
        o.diagnostics.insert("error_kind".into(), Value::String("non-convergence".into()));
        o.results = results;
        return Ok(o);
    }
    let x_max = s.x_max.max(anchor);
    let sol = weyl_solution_from(pot, &wr, x_max, ws.ode_tol)?;
    let (eta0, deta0) = sol.at_zero(pot)?;
    let mut eta = Table::new("eta.csv", &["x", "eta_re", "eta_im", "deta_re", "deta_im"]);
    for (x, e, d) in sol.samples(pot, s.eta_samples)? {
        eta.rows.push(vec![fmt_f64(x), fmt_f64(e.re), fmt_f64(e.im), fmt_f64(d.re), fmt_f64(d.im)]);
    }
    let trace = boundary_limit_trace(&sol, pot, s.eta_samples)?;
    let mut limit = Table::new("boundary_limit.csv", &["x", "h"]);
    for (x, h) in &trace {
        limit.rows.push(vec![fmt_f64(*x), fmt_f64(*h)]);
    }
    let extra = json!({
        "eta0": eta0,
        "deta0": deta0,
        "x_max": x_max,
        "tail_norms": to_json(&sol.tail_norms),
        "boundary_limit_end": trace.last().map(|t| t.1),
    });
    if let (Value::Object(r), Value::Object(e)) = (&mut results, extra) {
        r.extend(e);
    }
    o.diagnostics.insert("continuity_residual".into(), json!(sol.continuity_residual));
    o.results = results;
    o.tables.push(eta);
    o.tables.push(limit);
    Ok(o)
}

fn char_function<'a>(cfg: &RunConfig, pot: &'a Potential, bc: BoundaryForm, rect: &LambdaRect) -> Result<CharFunction<'a>> {
    let ss = cfg.spectral_settings();
    match cfg.settings.anchor {
        Some(a) => Ok(CharFunction::new(pot, bc, a, ss)),
        None => CharFunction::for_region(pot, bc, rect, ss),
    }
}

fn eigen_table(search: &EigenSearch) -> Table {
    let mut t = Table::new("eigenvalues.csv", &["re", "im", "multiplicity", "residual", "enclosure_radius", "refined"]);
    for e in &search.eigenvalues {
        t.rows.push(vec![
            fmt_f64(e.lambda.re),
            fmt_f64(e.lambda.im),
            e.multiplicity.to_string(),
            fmt_f64(e.residual),
            fmt_f64(e.enclosure_radius),
            (e.refined as u8).to_string(),
        ]);
    }
    t
}

fn search_outcome(search: &EigenSearch, rect: &LambdaRect) -> Outcome {
    let mut o = Outcome::new(json!({
        "anchor": search.anchor,
        "eigenvalues": to_json(&search.eigenvalues),
        "total_winding": search.total_winding,
        "total_multiplicity": total_multiplicity(&search.eigenvalues),
        "subdivision_capped": search.subdivision_capped,
    }));
    if search.subdivision_capped {
        o.code = EXIT_NONCONVERGENCE;
        o.diagnostics.insert("error".into(), Value::String("subdivision cap reached before every zero was isolated".into()));
        o.diagnostics.insert("error_kind".into(), Value::String("non-convergence".into()));
    }
    o.tables.push(eigen_table(search));
    let points: Vec<C64> = search.eigenvalues.iter().map(|e| e.lambda).collect();
    o.plots.push(("eigenvalues.svg".into(), plot::eigenvalue_plot(&points, rect)));
    o
}

fn task_eigs(cfg: &RunConfig, pot: &Potential, bc: BoundaryForm) -> Result<Outcome> {
    let rect = cfg.settings.region.expect("validated");
    let w = char_function(cfg, pot, bc, &rect)?;
    let search = find_eigenvalues(&w, &rect)?;
    Ok(search_outcome(&search, &rect))
}

fn task_resolvent(cfg: &RunConfig, pot: &Potential, bc: BoundaryForm) -> Result<Outcome> {
    let s = &cfg.settings;
    let f = cfg.source.as_ref().expect("validated");
    let point = LambdaRect::new((s.lambda.re, s.lambda.re), (s.lambda.im, s.lambda.im));
    let ss = cfg.spectral_settings();
    let anchor = match s.anchor {
        Some(a) => a,
        None => region_anchor(pot, &point, s.condition_c, s.x_max, s.n_grid, 2)?,
    };
    let w = CharFunction::new(pot, bc, anchor, ss);
    let out = apply_resolvent(&w, s.lambda, f, &cfg.resolvent_settings())?;
    let mut table = Table::new("resolvent.csv", &["x", "y_re", "y_im", "dy_re", "dy_im"]);
    for i in 0..out.x.len() {
        table.rows.push(vec![
            fmt_f64(out.x[i]),
            fmt_f64(out.y[i].re),
            fmt_f64(out.y[i].im),
            fmt_f64(out.dy[i].re),
            fmt_f64(out.dy[i].im),
        ]);
    }
    let mut results = to_json(&out);
    if let Value::Object(m) = &mut results {
        for k in ["x", "y", "dy"] {
            m.remove(k);
        }
        m.insert("anchor".into(), json!(anchor));
        m.insert("grid_points".into(), json!(out.x.len()));
    }
    let mut o = Outcome::new(results);
    o.tables.push(table);
    Ok(o)
}

fn task_bounds(cfg: &RunConfig, pot: &Potential, bc: BoundaryForm) -> Result<Outcome> {
    let s = &cfg.settings;
    let f = cfg.source.as_ref().expect("validated");
    let report = weighted_bound_report(pot, &bc, s.lambda, f, s.bound_c, &cfg.spectral_settings(), &cfg.resolvent_settings())?;
    Ok(Outcome::new(to_json(&report)))
}

fn task_oracle(cfg: &RunConfig, pot: &Potential, bc: BoundaryForm) -> Result<Outcome> {
    let s = &cfg.settings;
    let rect = s.region.expect("validated");
    let w = char_function(cfg, pot, bc, &rect)?;
    let search = find_eigenvalues(&w, &rect)?;
    let count = s.fd_count.unwrap_or(search.eigenvalues.len()).max(1);
    let fd = fd_eigenvalues(pot, &FdProblem { length: s.fd_length, n: s.fd_n, bc }, count)?;
    let mut pairs = Vec::new();
    let mut worst = 0.0f64;
    for e in &search.eigenvalues {
        let nearest = fd
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - e.lambda).norm().total_cmp(&(b.1 - e.lambda).norm()));
        if let Some((i, z)) = nearest {
            let diff = (z - e.lambda).norm();
            worst = worst.max(diff);
            pairs.push(json!({ "weyl": e.lambda, "fd": z, "fd_error": fd.errors[i], "difference": diff }));
        }
    }
    let mut o = search_outcome(&search, &rect);
    if let Value::Object(m) = &mut o.results {
        m.insert("fd_eigenvalues".into(), to_json(&fd.eigenvalues));
        m.insert("fd_errors".into(), to_json(&fd.errors));
        m.insert("fd_tail_ratios".into(), to_json(&fd.tail_ratios));
        m.insert("pairs".into(), Value::Array(pairs));
        m.insert("max_difference".into(), json!(worst));
    }
    let mut t = Table::new("fd_eigenvalues.csv", &["re", "im", "error", "tail_ratio"]);
    for (i, z) in fd.eigenvalues.iter().enumerate() {
        t.rows.push(vec![fmt_f64(z.re), fmt_f64(z.im), fmt_f64(fd.errors[i]), fmt_f64(fd.tail_ratios[i])]);
    }
    o.tables.push(t);
    Ok(o)
}

/// Configure the global rayon pool from `HALFLINE_WEYL_THREADS`.
pub fn init_threads() -> Result<()> {
    match std::env::var("HALFLINE_WEYL_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("HALFLINE_WEYL_THREADS must be a positive integer, got {v:?}")))?;
            // a second initialisation in the same process keeps the first pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(())
        }
        Err(_) => Ok(()),
    }
}
