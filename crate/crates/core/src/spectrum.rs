//! Characteristic function, argument-principle eigenvalue search, the
//! resolvent by the Green formula and the weighted resolvent bounds.
//!
//! Within one search region a single anchor is used for every `lambda`, so
//! `W(lambda) = a0 eta(0) + a1 eta'(0)` is analytic there and its zeros are
//! the eigenvalues with their algebraic multiplicities.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, TAU};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::{check_condition_a, p_and_log_derivative, region_anchor, LambdaRect, Potential, Table, C64};
use crate::propagate::{integrate_scalar, sample_scalar, IntegratorOptions, ScalarState};
use crate::weyl::{weyl_solution_on_grid, weyl_theta, WeylResult, WeylSettings};

/// `U(y) = alpha0 y(0) + alpha1 y'(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryForm {
    pub alpha0: C64,
    pub alpha1: C64,
}

impl BoundaryForm {
    pub fn new(alpha0: C64, alpha1: C64) -> Result<Self> {
        if alpha0.norm() + alpha1.norm() == 0.0 || !(alpha0.is_finite() && alpha1.is_finite()) {
            return Err(Error::InvalidArgument("boundary form needs |alpha0| + |alpha1| > 0".into()));
        }
        Ok(Self { alpha0, alpha1 })
    }

    pub fn dirichlet() -> Self {
        Self { alpha0: C64::new(1.0, 0.0), alpha1: C64::new(0.0, 0.0) }
    }

    pub fn neumann() -> Self {
        Self { alpha0: C64::new(0.0, 0.0), alpha1: C64::new(1.0, 0.0) }
    }

    pub fn apply(&self, y0: C64, dy0: C64) -> C64 {
        self.alpha0 * y0 + self.alpha1 * dy0
    }

    pub fn weight(&self) -> f64 {
        self.alpha0.norm() + self.alpha1.norm()
    }

    pub fn is_real(&self) -> bool {
        self.alpha0.im == 0.0 && self.alpha1.im == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub lambda: C64,
    pub multiplicity: u32,
    /// `|W(lambda)| / ((|a0| + |a1|) max(|eta(0)|, |eta'(0)|))` at the reported point.
    pub residual: f64,
    /// Radius of a disk around `lambda` containing the zero cluster.
    pub enclosure_radius: f64,
    /// False when the subdivision cap stopped the search before isolation.
    pub refined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralSettings {
    pub weyl: WeylSettings,
    /// Target normalised residual of `W` for refinement and the contour guard.
    pub tol: f64,
    /// Initial number of samples along a contour.
    pub contour_samples: usize,
    /// Maximum number of midpoint refinements of one contour edge.
    pub max_refine: usize,
    /// Maximum depth of the recursive subdivision.
    pub max_subdivision: usize,
    /// Constant of condition A used to choose the anchor of a region.
    pub condition_c: f64,
    /// Right end of the window searched for an anchor.
    pub anchor_x_max: f64,
    pub anchor_grid: usize,
    /// Lambda samples per side when fixing the anchor of a region.
    pub anchor_lambda_grid: usize,
}

impl Default for SpectralSettings {
    fn default() -> Self {
        Self {
            weyl: WeylSettings::with_tolerances(1e-11, 1e-12),
            tol: 1e-8,
            contour_samples: 64,
            max_refine: 14,
            max_subdivision: 10,
            condition_c: 0.5,
            anchor_x_max: 40.0,
            anchor_grid: 2049,
            anchor_lambda_grid: 9,
        }
    }
}

/// Value of the characteristic function with its normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharValue {
    pub lambda: C64,
    pub value: C64,
    pub eta0: C64,
    pub deta0: C64,
}

impl CharValue {
    pub fn scale(&self, bc: &BoundaryForm) -> f64 {
        bc.weight() * self.eta0.norm().max(self.deta0.norm())
    }

    pub fn residual(&self, bc: &BoundaryForm) -> f64 {
        let s = self.scale(bc);
        if s == 0.0 {
            f64::INFINITY
        } else {
            self.value.norm() / s
        }
    }
}

/// `W(lambda)` for a fixed potential, boundary form and anchor, with a cache
/// shared by the contour and subdivision passes.
pub struct CharFunction<'a> {
    pot: &'a Potential,
    bc: BoundaryForm,
    anchor: f64,
    settings: SpectralSettings,
    cache: Mutex<HashMap<(u64, u64), CharValue>>,
}

impl<'a> CharFunction<'a> {
    pub fn new(pot: &'a Potential, bc: BoundaryForm, anchor: f64, settings: SpectralSettings) -> Self {
        Self { pot, bc, anchor, settings, cache: Mutex::new(HashMap::new()) }
    }

    /// Evaluator whose anchor is valid on the whole closed rectangle.
    pub fn for_region(pot: &'a Potential, bc: BoundaryForm, rect: &LambdaRect, settings: SpectralSettings) -> Result<Self> {
        let anchor = region_anchor(
            pot,
            rect,
            settings.condition_c,
            settings.anchor_x_max,
            settings.anchor_grid,
            settings.anchor_lambda_grid,
        )?;
        Ok(Self::new(pot, bc, anchor, settings))
    }

    pub fn anchor(&self) -> f64 {
        self.anchor
    }

    pub fn boundary(&self) -> &BoundaryForm {
        &self.bc
    }

    pub fn settings(&self) -> &SpectralSettings {
        &self.settings
    }

    pub fn potential(&self) -> &Potential {
        self.pot
    }

    pub fn weyl(&self, lambda: C64) -> Result<WeylResult> {
        let wr = weyl_theta(self.pot, lambda, self.anchor, &self.settings.weyl)?;
        if !wr.converged {
            return Err(Error::NotConverged { b: wr.disks.last().map(|d| d.b).unwrap_or(self.anchor), radius: wr.final_radius });
        }
        Ok(wr)
    }

    pub fn eval(&self, lambda: C64) -> Result<CharValue> {
        let key = (lambda.re.to_bits(), lambda.im.to_bits());
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let wr = self.weyl(lambda)?;
        let (eta0, deta0) = if self.anchor > 0.0 {
            let t = integrate_scalar(
                self.pot,
                lambda,
                ScalarState { x: self.anchor, y: wr.mu, dy: C64::new(1.0, 0.0) },
                0.0,
                IntegratorOptions::new(self.settings.weyl.ode_tol),
            )?;
            let s = t.end_state();
            (s[0], s[1])
        } else {
            (wr.mu, C64::new(1.0, 0.0))
        };
        let v = CharValue { lambda, value: self.bc.apply(eta0, deta0), eta0, deta0 };
        self.cache.lock().expect("cache lock").insert(key, v);
        Ok(v)
    }

    fn eval_many(&self, lambdas: &[C64]) -> Result<Vec<CharValue>> {
        lambdas.par_iter().map(|&l| self.eval(l)).collect()
    }
}

/// `W(lambda)` with the anchor fixed by the caller.
pub fn char_function(pot: &Potential, bc: &BoundaryForm, lambda: C64, anchor: f64, settings: &SpectralSettings) -> Result<C64> {
    Ok(CharFunction::new(pot, *bc, anchor, *settings).eval(lambda)?.value)
}

/// Closed positively oriented contour in the lambda plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum Contour {
    Rectangle { rect: LambdaRect },
    Circle { center: C64, radius: f64 },
}

impl Contour {
    /// Point at parameter `t` in `[0, 1)`; rectangle corners sit at multiples of 1/4.
    pub fn point(&self, t: f64) -> C64 {
        match self {
            Contour::Circle { center, radius } => center + C64::from_polar(*radius, TAU * t),
            Contour::Rectangle { rect } => {
                let (x0, x1) = rect.re;
                let (y0, y1) = rect.im;
                let s = 4.0 * t.rem_euclid(1.0);
                let (k, u) = ((s.floor() as usize).min(3), s - s.floor().min(3.0));
                match k {
                    0 => C64::new(x0 + (x1 - x0) * u, y0),
                    1 => C64::new(x1, y0 + (y1 - y0) * u),
                    2 => C64::new(x1 - (x1 - x0) * u, y1),
                    _ => C64::new(x0, y1 - (y1 - y0) * u),
                }
            }
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Contour::Circle { radius, .. } => 2.0 * radius,
            Contour::Rectangle { rect } => rect.diameter(),
        }
    }

    /// Smallest rectangle holding the contour.
    pub fn bounding_rect(&self) -> LambdaRect {
        match self {
            Contour::Rectangle { rect } => *rect,
            Contour::Circle { center, radius } => {
                LambdaRect::new((center.re - radius, center.re + radius), (center.im - radius, center.im + radius))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Winding {
    pub count: i64,
    /// Total argument change divided by `2 pi` before rounding.
    pub raw: f64,
    pub samples: usize,
    /// Smallest normalised `|W|` on the samples.
    pub min_residual: f64,
}

/// Number of zeros of `W` inside the contour, by phase unwrapping with
/// adaptive refinement until every phase jump is below `pi/2`.
pub fn winding_number(w: &CharFunction<'_>, contour: &Contour) -> Result<Winding> {
    let n0 = w.settings.contour_samples.max(8);
    let n0 = n0.div_ceil(4) * 4;
    let tol = w.settings.tol;
    let bc = w.bc;
    let mut ts: Vec<f64> = (0..n0).map(|i| i as f64 / n0 as f64).collect();
    let mut vals = w.eval_many(&ts.iter().map(|&t| contour.point(t)).collect::<Vec<_>>())?;
    let min_dt = 0.5f64.powi(w.settings.max_refine as i32) / n0 as f64;
    loop {
        let n = ts.len();
        let mut insert = Vec::new();
        for i in 0..n {
            let a = vals[i].value;
            let b = vals[(i + 1) % n].value;
            let jump = (b / a).arg();
            if jump.abs() >= FRAC_PI_2 {
                let t1 = if i + 1 == n { 1.0 } else { ts[i + 1] };
                if t1 - ts[i] < 2.0 * min_dt {
                    return Err(Error::UnwrapInstability);
                }
                insert.push((i, 0.5 * (ts[i] + t1)));
            }
        }
        if insert.is_empty() {
            break;
        }
        let new_vals = w.eval_many(&insert.iter().map(|&(_, t)| contour.point(t)).collect::<Vec<_>>())?;
        let mut merged_t = Vec::with_capacity(n + insert.len());
        let mut merged_v = Vec::with_capacity(n + insert.len());
        let mut k = 0;
        for i in 0..n {
            merged_t.push(ts[i]);
            merged_v.push(vals[i]);
            if k < insert.len() && insert[k].0 == i {
                merged_t.push(insert[k].1);
                merged_v.push(new_vals[k]);
                k += 1;
            }
        }
        ts = merged_t;
        vals = merged_v;
    }
    // guard: a zero close to the contour makes the count meaningless
    let n = ts.len();
    let mut min_residual = f64::INFINITY;
    let mut total = 0.0;
    for i in 0..n {
        let a = vals[i];
        let b = vals[(i + 1) % n];
        let r = a.residual(&bc);
        min_residual = min_residual.min(r);
        let slope = (b.value - a.value) / (b.lambda - a.lambda);
        let distance = a.value.norm() / slope.norm();
        if r <= 10.0 * tol || distance <= 10.0 * tol {
            return Err(Error::ZeroOnContour { re: a.lambda.re, im: a.lambda.im });
        }
        total += (b.value / a.value).arg();
    }
    let raw = total / TAU;
    Ok(Winding { count: raw.round() as i64, raw, samples: n, min_residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSearch {
    pub eigenvalues: Vec<Eigenvalue>,
    pub anchor: f64,
    /// Winding number of the region boundary.
    pub total_winding: i64,
    /// The subdivision cap stopped at least one branch.
    pub subdivision_capped: bool,
}

const SPLITS: [f64; 5] = [0.5, 0.47, 0.53, 0.44, 0.56];

fn split_rect(r: &LambdaRect, f: f64) -> [LambdaRect; 4] {
    let xm = r.re.0 + f * (r.re.1 - r.re.0);
    let ym = r.im.0 + (1.0 - f) * (r.im.1 - r.im.0);
    [
        LambdaRect::new((r.re.0, xm), (r.im.0, ym)),
        LambdaRect::new((xm, r.re.1), (r.im.0, ym)),
        LambdaRect::new((r.re.0, xm), (ym, r.im.1)),
        LambdaRect::new((xm, r.re.1), (ym, r.im.1)),
    ]
}

struct Found {
    eigenvalues: Vec<Eigenvalue>,
    capped: bool,
}

/// Newton iteration on `W` with central differences; `None` if it leaves `rect`.
fn newton(w: &CharFunction<'_>, rect: &LambdaRect) -> Result<Option<(C64, f64)>> {
    let tol = w.settings.tol;
    let diam = rect.diameter();
    let h = 1e-5 * diam;
    let slack = 0.1 * diam;
    let mut z = rect.center();
    let mut best: Option<(C64, f64)> = None;
    for _ in 0..60 {
        let v = w.eval(z)?;
        let r = v.residual(&w.bc);
        if best.is_none_or(|(_, b)| r < b) {
            best = Some((z, r));
        }
        if r <= tol {
            return Ok(Some((z, r)));
        }
        let fp = w.eval(z + h)?.value;
        let fm = w.eval(z - h)?.value;
        let d = (fp - fm) / (2.0 * h);
        if d.norm() == 0.0 {
            return Ok(None);
        }
        let step = v.value / d;
        z -= step;
        if !rect.contains(z, slack) {
            return Ok(None);
        }
        if step.norm() <= 1e-14 * z.norm().max(1.0) {
            let v = w.eval(z)?;
            return Ok(Some((z, v.residual(&w.bc))));
        }
    }
    // no convergence to the requested residual: accept a stagnated iterate
    // only if it is close to the requested level
    Ok(best.filter(|&(_, r)| r <= 1e3 * tol))
}

fn search(w: &CharFunction<'_>, rect: LambdaRect, count: i64, depth: usize) -> Result<Found> {
    if count <= 0 {
        return Ok(Found { eigenvalues: Vec::new(), capped: false });
    }
    let tol = w.settings.tol;
    let diam = rect.diameter();
    if diam < 100.0 * tol {
        let v = w.eval(rect.center())?;
        return Ok(Found {
            eigenvalues: vec![Eigenvalue {
                lambda: rect.center(),
                multiplicity: count as u32,
                residual: v.residual(&w.bc),
                enclosure_radius: 0.5 * diam,
                refined: true,
            }],
            capped: false,
        });
    }
    if count == 1 {
        if let Some((z, r)) = newton(w, &rect)? {
            if rect.contains(z, 0.0) {
                return Ok(Found {
                    eigenvalues: vec![Eigenvalue { lambda: z, multiplicity: 1, residual: r, enclosure_radius: 0.5 * diam, refined: true }],
                    capped: false,
                });
            }
        }
    }
    if depth >= w.settings.max_subdivision {
        let v = w.eval(rect.center())?;
        return Ok(Found {
            eigenvalues: vec![Eigenvalue {
                lambda: rect.center(),
                multiplicity: count as u32,
                residual: v.residual(&w.bc),
                enclosure_radius: 0.5 * diam,
                refined: false,
            }],
            capped: true,
        });
    }
    for f in SPLITS {
        let children = split_rect(&rect, f);
        let windings: Vec<Result<Winding>> =
            children.par_iter().map(|r| winding_number(w, &Contour::Rectangle { rect: *r })).collect();
        let counts: Result<Vec<i64>> = windings.into_iter().map(|r| r.map(|w| w.count)).collect();
        let counts = match counts {
            Ok(c) => c,
            Err(Error::ZeroOnContour { .. }) | Err(Error::UnwrapInstability) => continue,
            Err(e) => return Err(e),
        };
        if counts.iter().sum::<i64>() != count || counts.iter().any(|&c| c < 0) {
            continue;
        }
        let found: Vec<Result<Found>> = children
            .par_iter()
            .zip(counts.par_iter())
            .map(|(r, &c)| search(w, *r, c, depth + 1))
            .collect();
        let mut out = Found { eigenvalues: Vec::new(), capped: false };
        for f in found {
            let f = f?;
            out.capped |= f.capped;
            out.eigenvalues.extend(f.eigenvalues);
        }
        return Ok(out);
    }
    let v = w.eval(rect.center())?;
    Ok(Found {
        eigenvalues: vec![Eigenvalue {
            lambda: rect.center(),
            multiplicity: count as u32,
            residual: v.residual(&w.bc),
            enclosure_radius: 0.5 * diam,
            refined: false,
        }],
        capped: true,
    })
}

/// Eigenvalues inside `rect` with multiplicities, sorted by real then imaginary part.
pub fn find_eigenvalues(w: &CharFunction<'_>, rect: &LambdaRect) -> Result<EigenSearch> {
    let total = winding_number(w, &Contour::Rectangle { rect: *rect })?;
    let found = search(w, *rect, total.count, 0)?;
    let mut eigenvalues = found.eigenvalues;
    eigenvalues.sort_by(|a, b| a.lambda.re.total_cmp(&b.lambda.re).then(a.lambda.im.total_cmp(&b.lambda.im)));
    Ok(EigenSearch { eigenvalues, anchor: w.anchor, total_winding: total.count, subdivision_capped: found.capped })
}

/// Right-hand sides for the resolvent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Source {
    Zero,
    /// `amplitude * exp(-rate x)`.
    Exponential { amplitude: C64, rate: f64 },
    /// `(sum_k c_k x^k) * exp(-x^2 / (2 width^2))`.
    PolyGaussian { coefficients: Vec<C64>, width: f64 },
    Tabulated(Table),
}

impl Source {
    pub fn eval(&self, x: f64) -> C64 {
        match self {
            Source::Zero => C64::new(0.0, 0.0),
            Source::Exponential { amplitude, rate } => amplitude * (-rate * x).exp(),
            Source::PolyGaussian { coefficients, width } => {
                let poly = coefficients.iter().rev().fold(C64::new(0.0, 0.0), |acc, c| acc * x + c);
                poly * (-x * x / (2.0 * width * width)).exp()
            }
            Source::Tabulated(t) => {
                if x > *t.xs().last().unwrap_or(&0.0) {
                    C64::new(0.0, 0.0)
                } else {
                    t.eval(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResolventSettings {
    pub x_max: f64,
    /// Grid spacing of the quadrature.
    pub h: f64,
    /// Admissible tail contribution and near-eigenvalue threshold.
    pub tol: f64,
    /// Window width of the integrated ODE residual.
    pub residual_spacing: f64,
}

impl Default for ResolventSettings {
    fn default() -> Self {
        Self { x_max: 20.0, h: 0.005, tol: 1e-8, residual_spacing: 0.04 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolventOutput {
    pub lambda: C64,
    pub x: Vec<f64>,
    pub y: Vec<C64>,
    pub dy: Vec<C64>,
    pub norm_y: f64,
    /// `None` when `rho` is undefined somewhere on the grid.
    pub norm_y_rho: Option<f64>,
    pub norm_y2_rho: Option<f64>,
    /// `||f||` in `L2(1/|q - lambda|)`, which is `||f / p||`.
    pub norm_f_weighted: f64,
    pub norm_f: f64,
    pub char_value: C64,
    pub ode_residual: f64,
    pub boundary_residual: f64,
    pub tail_estimate: f64,
    pub continuity_residual: f64,
}

fn uniform_grid(x_max: f64, h: f64) -> Vec<f64> {
    let mut n = (x_max / h).ceil() as usize + 1;
    if n.is_multiple_of(2) {
        n += 1;
    }
    n = n.max(5);
    (0..n).map(|i| x_max * i as f64 / (n - 1) as f64).collect()
}

/// Running integral `int_{x_0}^{x_i} g` on a uniform grid; four-point
/// rule per interval, one-sided at the ends (fourth order overall).
fn cumulative(g: &[C64], h: f64) -> Vec<C64> {
    let n = g.len();
    debug_assert!(n >= 4);
    let mut out = vec![C64::new(0.0, 0.0); n];
    let w = h / 24.0;
    for i in 0..n - 1 {
        let piece = if i == 0 {
            (g[0] * 9.0 + g[1] * 19.0 - g[2] * 5.0 + g[3]) * w
        } else if i + 2 == n {
            (g[i - 2] - g[i - 1] * 5.0 + g[i] * 19.0 + g[i + 1] * 9.0) * w
        } else {
            (-g[i - 1] + g[i] * 13.0 + g[i + 1] * 13.0 - g[i + 2]) * w
        };
        out[i + 1] = out[i] + piece;
    }
    out
}

/// Composite Simpson rule of real samples on an odd uniform grid.
pub(crate) fn simpson(g: &[f64], h: f64) -> f64 {
    let n = g.len();
    debug_assert!(n % 2 == 1 && n >= 3);
    let mut s = g[0] + g[n - 1];
    for (i, v) in g.iter().enumerate().take(n - 1).skip(1) {
        s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    s * h / 3.0
}

/// `(R_lambda f)(x) = (eta(x) int_0^x chi f + chi(x) int_x^inf eta f) / W`
/// with `chi = a0 phi - a1 psi`.
pub fn apply_resolvent(
    w: &CharFunction<'_>,
    lambda: C64,
    f: &Source,
    rs: &ResolventSettings,
) -> Result<ResolventOutput> {
    apply_resolvent_fn(w, lambda, &|x| f.eval(x), rs)
}

/// [`apply_resolvent`] for a right-hand side given as a function.
pub fn apply_resolvent_fn(
    w: &CharFunction<'_>,
    lambda: C64,
    f: &dyn Fn(f64) -> C64,
    rs: &ResolventSettings,
) -> Result<ResolventOutput> {
    let pot = w.pot;
    let bc = w.bc;
    if !(rs.h > 0.0 && rs.x_max > rs.h && rs.tol > 0.0) {
        return Err(Error::InvalidArgument("resolvent needs x_max > h > 0 and tol > 0".into()));
    }
    let cv = w.eval(lambda)?;
    if cv.residual(&bc) <= rs.tol {
        return Err(Error::NearEigenvalue { re: lambda.re, im: lambda.im, residual: cv.residual(&bc) });
    }
    let wr = w.weyl(lambda)?;
    let xs = uniform_grid(rs.x_max.max(w.anchor + rs.h), rs.h);
    let h = xs[1] - xs[0];
    let n = xs.len();
    let ode_tol = w.settings.weyl.ode_tol;
    let grid = weyl_solution_on_grid(pot, &wr, &xs, ode_tol)?;
    let opts = IntegratorOptions::new(ode_tol);
    let one = C64::new(1.0, 0.0);
    let zero = C64::new(0.0, 0.0);
    let phi = sample_scalar(pot, lambda, ScalarState { x: 0.0, y: zero, dy: one }, &xs[1..], opts)?;
    let psi = sample_scalar(pot, lambda, ScalarState { x: 0.0, y: one, dy: zero }, &xs[1..], opts)?;
    let mut chi = Vec::with_capacity(n);
    let mut dchi = Vec::with_capacity(n);
    chi.push(-bc.alpha1);
    dchi.push(bc.alpha0);
    for (a, b) in phi.iter().zip(&psi) {
        chi.push(bc.alpha0 * a[0] - bc.alpha1 * b[0]);
        dchi.push(bc.alpha0 * a[1] - bc.alpha1 * b[1]);
    }
    let fv: Vec<C64> = xs.iter().map(|&x| f(x)).collect();
    let wv = bc.apply(grid.eta[0], grid.deta[0]);

    let chi_f: Vec<C64> = chi.iter().zip(&fv).map(|(c, f)| c * f).collect();
    let eta_f: Vec<C64> = grid.eta.iter().zip(&fv).map(|(e, f)| e * f).collect();
    let lower = cumulative(&chi_f, h);
    // accumulated from the right: subtracting from the total would cancel
    // where chi is large
    let reversed: Vec<C64> = eta_f.iter().rev().copied().collect();
    let mut upper = cumulative(&reversed, h);
    upper.reverse();

    // tail beyond x_max, bounded by the local decay rates of eta and f
    let f_last = fv[n - 1].norm();
    let f_prev = fv[n - 2].norm();
    let f_rate = if f_last > 0.0 && f_prev > 0.0 { ((f_prev / f_last).ln() / h).max(0.0) } else { 0.0 };
    let rate = grid.decay_rate + f_rate;
    let tail_estimate = if eta_f[n - 1].norm() == 0.0 { 0.0 } else { eta_f[n - 1].norm() / rate.max(1e-300) };
    let norm_f = simpson(&fv.iter().map(|v| v.norm_sqr()).collect::<Vec<_>>(), h).sqrt();
    let sup_f = fv.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if tail_estimate > rs.tol * (1.0 + sup_f) {
        return Err(Error::TailTruncation { estimate: tail_estimate });
    }

    let y: Vec<C64> = (0..n).map(|i| (grid.eta[i] * lower[i] + chi[i] * upper[i]) / wv).collect();
    let dy: Vec<C64> = (0..n).map(|i| (grid.deta[i] * lower[i] + dchi[i] * upper[i]) / wv).collect();

    let norm_y = simpson(&y.iter().map(|v| v.norm_sqr()).collect::<Vec<_>>(), h).sqrt();
    let weighted = |g: &dyn Fn(usize, C64, C64) -> f64| -> Option<f64> {
        let mut vals = Vec::with_capacity(n);
        for (i, &x) in xs.iter().enumerate() {
            let (p, lp) = p_and_log_derivative(pot, lambda, x).ok()?;
            vals.push(g(i, p, lp));
        }
        Some(simpson(&vals, h).max(0.0).sqrt())
    };
    let norm_y_rho = weighted(&|i, p, lp| (p.re - 0.5 * lp.norm()) * y[i].norm_sqr());
    let norm_y2_rho = weighted(&|i, p, lp| (p.re - 0.5 * lp.norm()) * (dy[i] / p).norm_sqr());
    let fw: Vec<f64> = xs
        .iter()
        .zip(&fv)
        .map(|(&x, fx)| {
            let mut d = (pot.q(x) - lambda).norm();
            if d == 0.0 {
                // removable singularity when f vanishes with q - lambda
                let xe = x + 1e-6 * h;
                d = (pot.q(xe) - lambda).norm();
                return f(xe).norm_sqr() / d;
            }
            fx.norm_sqr() / d
        })
        .collect();
    let norm_f_weighted = simpson(&fw, h).sqrt();

    // integrated form of y' = dy, dy' = (q - lambda) y - f over windows of
    // width `residual_spacing`, divided by the width; unlike a second
    // difference it stays meaningful for piecewise smooth f
    let stride = ((rs.residual_spacing / h).round() as usize).clamp(1, n - 1);
    let hh = stride as f64 * h;
    let rhs: Vec<C64> = (0..n).map(|i| (pot.q(xs[i]) - lambda) * y[i] - fv[i]).collect();
    let int_rhs = cumulative(&rhs, h);
    let int_dy = cumulative(&dy, h);
    let mut ode_residual: f64 = 0.0;
    for i in 0..n - stride {
        let j = i + stride;
        let r1 = (dy[j] - dy[i] - (int_rhs[j] - int_rhs[i])).norm();
        let r2 = (y[j] - y[i] - (int_dy[j] - int_dy[i])).norm();
        ode_residual = ode_residual.max(r1.max(r2) / hh);
    }
    ode_residual /= 1.0 + sup_f;
    let boundary_residual = bc.apply(y[0], dy[0]).norm();

    Ok(ResolventOutput {
        lambda,
        x: xs,
        y,
        dy,
        norm_y,
        norm_y_rho,
        norm_y2_rho,
        norm_f_weighted,
        norm_f,
        char_value: wv,
        ode_residual,
        boundary_residual,
        tail_estimate,
        continuity_residual: grid.continuity_residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lambda: C64,
    /// Lower bound of `rho` used in the inequalities.
    pub c: f64,
    pub norm_y: f64,
    pub norm_y_rho: f64,
    pub norm_y2_rho: f64,
    /// `||f||_{L2(1/|q|)} = ||f / p||`.
    pub norm_g: f64,
    /// `C ||y|| <= ||g||`.
    pub plain_bound: bool,
    /// `||y1||_rho^2 + ||y2||_rho^2 <= ||g|| ||y||`.
    pub energy_bound: bool,
    /// `C^{1/2} max(||y1||_rho, ||y2||_rho) <= ||g||`.
    pub weighted_bound: bool,
    /// Largest ratio left side / right side over the three inequalities.
    pub worst_ratio: f64,
}

/// Check the three weighted resolvent inequalities at `lambda` (by shifting
/// the potential to `lambda = 0`). Condition A must hold from `x = 0`; when
/// `c` is `None` the smallest `rho` on the grid is used.
pub fn weighted_bound_report(
    pot: &Potential,
    bc: &BoundaryForm,
    lambda: C64,
    f: &Source,
    c: Option<f64>,
    settings: &SpectralSettings,
    rs: &ResolventSettings,
) -> Result<BoundReport> {
    weighted_bound_report_fn(pot, bc, lambda, &|x| f.eval(x), c, settings, rs)
}

/// [`weighted_bound_report`] for a right-hand side given as a function.
pub fn weighted_bound_report_fn(
    pot: &Potential,
    bc: &BoundaryForm,
    lambda: C64,
    f: &dyn Fn(f64) -> C64,
    c: Option<f64>,
    settings: &SpectralSettings,
    rs: &ResolventSettings,
) -> Result<BoundReport> {
    let shifted = pot.shifted(lambda);
    let zero = C64::new(0.0, 0.0);
    let grid_n = 4097;
    let c = match c {
        Some(c) => c,
        None => {
            let mut m = f64::INFINITY;
            for i in 0..grid_n {
                let x = rs.x_max * i as f64 / (grid_n - 1) as f64;
                let r = p_and_log_derivative(&shifted, zero, x)
                    .map(|(p, lp)| p.re - 0.5 * lp.norm())
                    .map_err(|e| Error::Precondition(format!("condition A fails at x = {x}: {e}")))?;
                m = m.min(r);
            }
            if !(m > 0.0) {
                return Err(Error::Precondition(format!("rho is not positive on [0, {}] (min {m})", rs.x_max)));
            }
            m
        }
    };
    let report = check_condition_a(&shifted, zero, 0.0, rs.x_max, c, grid_n)?;
    if !report.holds {
        return Err(Error::Precondition(format!(
            "condition A with C = {c} fails at x = {}",
            report.first_violation.unwrap_or(f64::NAN)
        )));
    }
    let w = CharFunction::new(&shifted, *bc, 0.0, *settings);
    let out = apply_resolvent_fn(&w, zero, f, rs)?;
    let ny = out.norm_y;
    let n1 = out.norm_y_rho.ok_or_else(|| Error::Precondition("rho undefined on the grid".into()))?;
    let n2 = out.norm_y2_rho.ok_or_else(|| Error::Precondition("rho undefined on the grid".into()))?;
    let g = out.norm_f_weighted;
    let slack = 1.0 + 100.0 * rs.tol;
    let ratio = |lhs: f64, rhs: f64| if rhs > 0.0 { lhs / rhs } else if lhs > 0.0 { f64::INFINITY } else { 0.0 };
    let r1 = ratio(c * ny, g);
    let r2 = ratio(n1 * n1 + n2 * n2, g * ny);
    let r3 = ratio(c.sqrt() * n1.max(n2), g);
    Ok(BoundReport {
        lambda,
        c,
        norm_y: ny,
        norm_y_rho: n1,
        norm_y2_rho: n2,
        norm_g: g,
        plain_bound: r1 <= slack,
        energy_bound: r2 <= slack,
        weighted_bound: r3 <= slack,
        worst_ratio: r1.max(r2).max(r3),
    })
}

/// Sum of multiplicities, for comparison with the boundary winding.
pub fn total_multiplicity(eigs: &[Eigenvalue]) -> i64 {
    eigs.iter().map(|e| e.multiplicity as i64).sum()
}

/// Phase of `W` along a contour, for plots: `(t, lambda, arg W)` unwrapped.
pub fn contour_phase(w: &CharFunction<'_>, contour: &Contour, n: usize) -> Result<Vec<(f64, C64, f64)>> {
    let ts: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let vals = w.eval_many(&ts.iter().map(|&t| contour.point(t)).collect::<Vec<_>>())?;
    let mut out = Vec::with_capacity(vals.len());
    let mut phase = vals[0].value.arg();
    out.push((0.0, vals[0].lambda, phase));
    for i in 1..vals.len() {
        phase += (vals[i].value / vals[i - 1].value).arg();
        out.push((ts[i], vals[i].lambda, phase));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }
    const Z: C64 = C64::new(0.0, 0.0);
    const ONE: C64 = C64::new(1.0, 0.0);

    #[test]
    fn boundary_form_validation() {
        assert!(BoundaryForm::new(Z, Z).is_err());
        let b = BoundaryForm::new(c(2.0, 1.0), ONE).unwrap();
        assert_eq!(b.apply(ONE, ONE), c(3.0, 1.0));
    }

    #[test]
    fn char_function_constant_potential() {
        let pot = Potential::constant(ONE);
        let s = SpectralSettings::default();
        let d = char_function(&pot, &BoundaryForm::dirichlet(), Z, 0.0, &s).unwrap();
        assert!((d + 1.0).norm() < 1e-8);
        let n = char_function(&pot, &BoundaryForm::neumann(), Z, 0.0, &s).unwrap();
        assert!((n - 1.0).norm() < 1e-8);
    }

    #[test]
    fn contour_points() {
        let r = Contour::Rectangle { rect: LambdaRect::new((0.0, 2.0), (0.0, 1.0)) };
        assert_eq!(r.point(0.0), c(0.0, 0.0));
        assert_eq!(r.point(0.25), c(2.0, 0.0));
        assert_eq!(r.point(0.5), c(2.0, 1.0));
        assert_eq!(r.point(0.75), c(0.0, 1.0));
        assert_eq!(r.point(0.125), c(1.0, 0.0));
        let ci = Contour::Circle { center: ONE, radius: 0.5 };
        assert!((ci.point(0.25) - c(1.0, 0.5)).norm() < 1e-15);
    }

    #[test]
    fn winding_constant_is_zero() {
        let pot = Potential::constant(ONE);
        let w = CharFunction::new(&pot, BoundaryForm::dirichlet(), 0.0, SpectralSettings::default());
        let k = winding_number(&w, &Contour::Circle { center: c(0.5, 0.0), radius: 0.25 }).unwrap();
        assert_eq!(k.count, 0);
    }

    #[test]
    fn winding_harmonic() {
        let pot = Potential::harmonic();
        let s = SpectralSettings::default();
        let rect = LambdaRect::new((2.0, 8.0), (-0.5, 0.5));
        let w = CharFunction::for_region(&pot, BoundaryForm::dirichlet(), &rect, s).unwrap();
        let k = winding_number(&w, &Contour::Circle { center: c(3.0, 0.0), radius: 0.5 }).unwrap();
        assert_eq!(k.count, 1);
        let k = winding_number(&w, &Contour::Rectangle { rect }).unwrap();
        assert_eq!(k.count, 2);
        assert!((k.raw - 2.0).abs() < 1e-6);
    }

    #[test]
    fn eigenvalues_harmonic_dirichlet() {
        let pot = Potential::harmonic();
        let rect = LambdaRect::new((0.0, 12.0), (-1.0, 1.0));
        let w = CharFunction::for_region(&pot, BoundaryForm::dirichlet(), &rect, SpectralSettings::default()).unwrap();
        let found = find_eigenvalues(&w, &rect).unwrap();
        let lams: Vec<C64> = found.eigenvalues.iter().map(|e| e.lambda).collect();
        assert_eq!(lams.len(), 3, "{lams:?}");
        for (l, want) in lams.iter().zip([3.0, 7.0, 11.0]) {
            assert!((l - want).norm() < 1e-6, "{l} vs {want}");
        }
        assert!(found.eigenvalues.iter().all(|e| e.multiplicity == 1 && e.residual <= 1e-6));
        assert_eq!(found.total_winding, total_multiplicity(&found.eigenvalues));
    }

    #[test]
    fn resolvent_constant_potential() {
        let pot = Potential::constant(ONE);
        let w = CharFunction::new(&pot, BoundaryForm::dirichlet(), 0.0, SpectralSettings::default());
        let f = Source::Exponential { amplitude: ONE, rate: 1.0 };
        let out = apply_resolvent(&w, Z, &f, &ResolventSettings::default()).unwrap();
        let i1 = out.x.iter().position(|&x| (x - 1.0).abs() < 1e-9).unwrap();
        assert!((out.y[i1].re - 0.1839397).abs() < 1e-7);
        for (x, y) in out.x.iter().zip(&out.y) {
            assert!((y - 0.5 * x * (-x).exp()).norm() < 1e-8);
        }
        assert!((out.norm_y - 0.25).abs() < 1e-7);
        assert!((out.norm_f_weighted - 0.5f64.sqrt()).abs() < 1e-7);
        assert!(out.boundary_residual <= 1e-8);
        assert!(out.ode_residual <= 1e-6, "{}", out.ode_residual);
    }

    #[test]
    fn resolvent_of_zero_is_zero() {
        let pot = Potential::complex_airy();
        let w = CharFunction::new(&pot, BoundaryForm::neumann(), 3.0, SpectralSettings::default());
        let out = apply_resolvent(&w, c(-1.0, 0.5), &Source::Zero, &ResolventSettings::default()).unwrap();
        assert!(out.y.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn resolvent_recovers_domain_function() {
        let pot = Potential::harmonic();
        let rect = LambdaRect::new((-0.5, 0.5), (-0.5, 0.5));
        let w = CharFunction::for_region(&pot, BoundaryForm::dirichlet(), &rect, SpectralSettings::default()).unwrap();
        // g = x exp(-x^2/2), -g'' + x^2 g = 3 x exp(-x^2/2)
        let f = Source::PolyGaussian { coefficients: vec![Z, c(3.0, 0.0)], width: 1.0 };
        let rs = ResolventSettings { x_max: 12.0, ..ResolventSettings::default() };
        let out = apply_resolvent(&w, Z, &f, &rs).unwrap();
        let err = out.x.iter().zip(&out.y).map(|(x, y)| (y - x * (-x * x / 2.0).exp()).norm()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn near_eigenvalue_rejected() {
        let pot = Potential::harmonic();
        let rect = LambdaRect::new((2.5, 3.5), (-0.5, 0.5));
        let w = CharFunction::for_region(&pot, BoundaryForm::dirichlet(), &rect, SpectralSettings::default()).unwrap();
        let f = Source::Exponential { amplitude: ONE, rate: 1.0 };
        let r = apply_resolvent(&w, c(3.0, 0.0), &f, &ResolventSettings { x_max: 12.0, ..Default::default() });
        assert!(matches!(r, Err(Error::NearEigenvalue { .. })), "{r:?}");
    }

    #[test]
    fn tail_truncation_detected() {
        let pot = Potential::constant(ONE);
        let w = CharFunction::new(&pot, BoundaryForm::dirichlet(), 0.0, SpectralSettings::default());
        let f = Source::Exponential { amplitude: ONE, rate: 0.01 };
        let r = apply_resolvent(&w, Z, &f, &ResolventSettings { x_max: 5.0, ..Default::default() });
        assert!(matches!(r, Err(Error::TailTruncation { .. })));
    }

    #[test]
    fn bounds_constant_potential() {
        let pot = Potential::constant(ONE);
        let f = Source::Exponential { amplitude: ONE, rate: 1.0 };
        let r = weighted_bound_report(
            &pot,
            &BoundaryForm::dirichlet(),
            Z,
            &f,
            Some(1.0),
            &SpectralSettings::default(),
            &ResolventSettings::default(),
        )
        .unwrap();
        assert!((r.norm_y - 0.25).abs() < 1e-7);
        assert!((r.norm_y_rho - 0.25).abs() < 1e-7);
        assert!((r.norm_g - 0.5f64.sqrt()).abs() < 1e-7);
        assert!(r.plain_bound && r.energy_bound && r.weighted_bound);
        let r0 = weighted_bound_report(
            &pot,
            &BoundaryForm::neumann(),
            Z,
            &Source::Zero,
            None,
            &SpectralSettings::default(),
            &ResolventSettings::default(),
        )
        .unwrap();
        assert_eq!(r0.norm_y, 0.0);
        assert!(r0.plain_bound && r0.energy_bound && r0.weighted_bound);
    }

    #[test]
    fn bounds_need_condition_a_from_zero() {
        let pot = Potential::harmonic();
        let f = Source::Exponential { amplitude: ONE, rate: 1.0 };
        let r = weighted_bound_report(
            &pot,
            &BoundaryForm::dirichlet(),
            Z,
            &f,
            None,
            &SpectralSettings::default(),
            &ResolventSettings::default(),
        );
        assert!(matches!(r, Err(Error::Precondition(_))));
    }
}
