//! Complex potentials, the square-root branch `p = sqrt(q - lambda)` and the
//! pointwise hypothesis checks built on it.
//!
//! Every check in this module is a grid surrogate: the analytic conditions are
//! "almost everywhere" statements, here they are evaluated on a uniform grid
//! over a finite window.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Default number of grid points per condition window.
pub const DEFAULT_GRID: usize = 2049;

/// Builtin potential families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    Constant { value: C64 },
    /// `amplitude * x^exponent * exp(i * phase)`, exponent 0 or >= 1.
    MonomialPhase { amplitude: f64, exponent: f64, phase: f64 },
    /// `q(x) = i x`.
    ComplexAiry,
    /// `sum_k c_k x^k`, lowest degree first.
    Polynomial { coefficients: Vec<C64> },
    Tabulated(Table),
}

/// Samples of a potential with shape-preserving (Fritsch-Carlson) cubic
/// interpolation applied separately to the real and imaginary parts. Outside
/// the sampled range the end values are held constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    xs: Vec<f64>,
    values: Vec<C64>,
    #[serde(skip)]
    slopes: Vec<C64>,
}

impl Table {
    pub fn new(xs: Vec<f64>, values: Vec<C64>) -> Result<Self> {
        if xs.len() != values.len() || xs.len() < 2 {
            return Err(Error::InvalidArgument(
                "tabulated potential needs at least two (x, q) samples of equal length".into(),
            ));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("tabulated abscissae must be strictly increasing".into()));
        }
        if xs.iter().any(|x| !x.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("tabulated potential contains non-finite samples".into()));
        }
        let re: Vec<f64> = values.iter().map(|v| v.re).collect();
        let im: Vec<f64> = values.iter().map(|v| v.im).collect();
        let sr = monotone_slopes(&xs, &re);
        let si = monotone_slopes(&xs, &im);
        let slopes = sr.into_iter().zip(si).map(|(a, b)| C64::new(a, b)).collect();
        Ok(Self { xs, values, slopes })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    fn ensure_slopes(&self) -> std::borrow::Cow<'_, [C64]> {
        if self.slopes.len() == self.xs.len() {
            std::borrow::Cow::Borrowed(&self.slopes)
        } else {
            // deserialised tables arrive without slopes
            let t = Table::new(self.xs.clone(), self.values.clone()).expect("validated table");
            std::borrow::Cow::Owned(t.slopes)
        }
    }

    pub fn eval(&self, x: f64) -> C64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.values[0];
        }
        if x >= self.xs[n - 1] {
            return self.values[n - 1];
        }
        let k = match self.xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => return self.values[i],
            Err(i) => i - 1,
        };
        let slopes = self.ensure_slopes();
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        self.values[k] * h00 + slopes[k] * (h10 * h) + self.values[k + 1] * h01 + slopes[k + 1] * (h11 * h)
    }
}

fn monotone_slopes(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (ys[k + 1] - ys[k]) / h[k]).collect();
    let mut d = vec![0.0; n];
    if n == 2 {
        d[0] = delta[0];
        d[1] = delta[0];
        return d;
    }
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] <= 0.0 {
            d[k] = 0.0;
        } else {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if s * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        s
    }
}

/// A complex potential `q` on `[0, inf)`, optionally shifted: the evaluated
/// function is `family(x) - shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    family: Family,
    #[serde(default)]
    shift: C64,
    #[serde(default)]
    smooth_start: f64,
}

impl Potential {
    pub fn new(family: Family) -> Result<Self> {
        match &family {
            Family::Constant { value } if !value.is_finite() => {
                return Err(Error::InvalidArgument("constant potential must be finite".into()))
            }
            Family::MonomialPhase { amplitude, exponent, phase } => {
                if !(amplitude.is_finite() && exponent.is_finite() && phase.is_finite()) {
                    return Err(Error::InvalidArgument("monomial parameters must be finite".into()));
                }
                if *exponent != 0.0 && *exponent < 1.0 {
                    return Err(Error::InvalidArgument(
                        "monomial exponent must be 0 or >= 1 (q' must be finite at x = 0)".into(),
                    ));
                }
            }
            Family::Polynomial { coefficients } => {
                if coefficients.is_empty() || coefficients.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidArgument("polynomial needs finite coefficients".into()));
                }
            }
            Family::Tabulated(t) => {
                // re-validate (covers deserialised tables)
                Table::new(t.xs.clone(), t.values.clone())?;
            }
            _ => {}
        }
        let family = match family {
            Family::Tabulated(t) => Family::Tabulated(Table::new(t.xs, t.values)?),
            f => f,
        };
        Ok(Self { family, shift: C64::new(0.0, 0.0), smooth_start: 0.0 })
    }

    pub fn constant(value: C64) -> Self {
        Self::new(Family::Constant { value }).expect("finite constant")
    }

    pub fn monomial_phase(amplitude: f64, exponent: f64, phase: f64) -> Result<Self> {
        Self::new(Family::MonomialPhase { amplitude, exponent, phase })
    }

    pub fn complex_airy() -> Self {
        Self::new(Family::ComplexAiry).unwrap()
    }

    pub fn polynomial(coefficients: Vec<C64>) -> Result<Self> {
        Self::new(Family::Polynomial { coefficients })
    }

    /// `q(x) = x^2`.
    pub fn harmonic() -> Self {
        Self::polynomial(vec![C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(1.0, 0.0)]).unwrap()
    }

    pub fn tabulated(xs: Vec<f64>, values: Vec<C64>) -> Result<Self> {
        Self::new(Family::Tabulated(Table::new(xs, values)?))
    }

    /// The potential `q - s`.
    pub fn shifted(&self, s: C64) -> Self {
        let mut out = self.clone();
        out.shift += s;
        out
    }

    pub fn with_smooth_start(mut self, x_s: f64) -> Self {
        self.smooth_start = x_s.max(0.0);
        self
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn shift(&self) -> C64 {
        self.shift
    }

    /// Point from which `q` is treated as locally absolutely continuous.
    pub fn smooth_start(&self) -> f64 {
        self.smooth_start
    }

    pub fn is_real(&self) -> bool {
        self.shift.im == 0.0
            && match &self.family {
                Family::Constant { value } => value.im == 0.0,
                Family::MonomialPhase { phase, amplitude, .. } => *amplitude == 0.0 || phase.sin() == 0.0,
                Family::ComplexAiry => false,
                Family::Polynomial { coefficients } => coefficients.iter().all(|c| c.im == 0.0),
                Family::Tabulated(t) => t.values.iter().all(|c| c.im == 0.0),
            }
    }

    pub fn q(&self, x: f64) -> C64 {
        let v = match &self.family {
            Family::Constant { value } => *value,
            Family::MonomialPhase { amplitude, exponent, phase } => {
                let r = if *exponent == 0.0 { *amplitude } else { amplitude * x.powf(*exponent) };
                C64::from_polar(r, *phase)
            }
            Family::ComplexAiry => C64::new(0.0, x),
            Family::Polynomial { coefficients } => {
                coefficients.iter().rev().fold(C64::new(0.0, 0.0), |acc, c| acc * x + c)
            }
            Family::Tabulated(t) => t.eval(x),
        };
        v - self.shift
    }

    pub fn dq(&self, x: f64) -> C64 {
        match &self.family {
            Family::Constant { .. } => C64::new(0.0, 0.0),
            Family::MonomialPhase { amplitude, exponent, phase } => {
                if *exponent == 0.0 {
                    C64::new(0.0, 0.0)
                } else if *exponent == 1.0 {
                    C64::from_polar(*amplitude, *phase)
                } else {
                    C64::from_polar(amplitude * exponent * x.powf(exponent - 1.0), *phase)
                }
            }
            Family::ComplexAiry => C64::new(0.0, 1.0),
            Family::Polynomial { coefficients } => {
                let n = coefficients.len();
                (1..n).rev().fold(C64::new(0.0, 0.0), |acc, k| acc * x + coefficients[k] * k as f64)
            }
            Family::Tabulated(t) => {
                let h = 1e-6 * (1.0 + x.abs());
                if x < h {
                    (t.eval(x + h) - t.eval(x)) / h
                } else {
                    (t.eval(x + h) - t.eval(x - h)) / (2.0 * h)
                }
            }
        }
    }
}

fn branch_ok(z: C64) -> bool {
    !(z.im == 0.0 && z.re <= 0.0) && z.is_finite()
}

/// Principal square root of `q(x) - lambda`; fails on the closed negative real axis.
pub fn eval_p(pot: &Potential, lambda: C64, x: f64) -> Result<C64> {
    let z = pot.q(x) - lambda;
    if !branch_ok(z) {
        return Err(Error::Branch { x, re: z.re, im: z.im });
    }
    Ok(z.sqrt())
}

/// `(p, p'/p)` at `x`, with `p'/p = q' / (2 (q - lambda))`.
pub fn p_and_log_derivative(pot: &Potential, lambda: C64, x: f64) -> Result<(C64, C64)> {
    let z = pot.q(x) - lambda;
    if !branch_ok(z) {
        return Err(Error::Branch { x, re: z.re, im: z.im });
    }
    Ok((z.sqrt(), pot.dq(x) / (2.0 * z)))
}

/// The weight `Re p - |p'/p| / 2`.
pub fn rho(pot: &Potential, lambda: C64, x: f64) -> Result<f64> {
    let (p, lp) = p_and_log_derivative(pot, lambda, x)?;
    Ok(p.re - 0.5 * lp.norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn point(&self, i: usize) -> f64 {
        if self.n == 1 {
            return self.x_lo;
        }
        if i + 1 == self.n {
            return self.x_hi;
        }
        self.x_lo + (self.x_hi - self.x_lo) * i as f64 / (self.n - 1) as f64
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.point(i))
    }

    pub fn spacing(&self) -> f64 {
        (self.x_hi - self.x_lo) / (self.n.max(2) - 1) as f64
    }
}

/// Outcome of a grid check. `holds` is equivalent to `margin >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub holds: bool,
    /// Threshold of the inequality (the constant `C`, or the right-hand side bound).
    pub constant: f64,
    pub margin: f64,
    pub first_violation: Option<f64>,
    pub grid: GridSpec,
}

fn validate_window(pot: &Potential, x_lo: f64, x_hi: f64, n_grid: usize) -> Result<GridSpec> {
    if n_grid < 2 {
        return Err(Error::InvalidArgument("n_grid must be at least 2".into()));
    }
    if !(x_lo.is_finite() && x_hi.is_finite()) || x_hi < x_lo {
        return Err(Error::InvalidArgument(format!("invalid window [{x_lo}, {x_hi}]")));
    }
    if x_lo < pot.smooth_start() {
        return Err(Error::InvalidArgument(format!(
            "window start {x_lo} precedes the smoothness start {}",
            pot.smooth_start()
        )));
    }
    Ok(GridSpec { x_lo, x_hi, n: n_grid })
}

// Pointwise margin of `Re p >= C + factor |p'/p|`; branch failures count as -C.
fn pointwise_margin(pot: &Potential, lambda: C64, x: f64, c: f64, factor: f64) -> f64 {
    match p_and_log_derivative(pot, lambda, x) {
        Ok((p, lp)) => p.re - c - factor * lp.norm(),
        Err(_) => -c.abs().max(f64::MIN_POSITIVE),
    }
}

fn summarise(grid: GridSpec, constant: f64, margins: impl Iterator<Item = (f64, f64)>) -> ConditionReport {
    let mut margin = f64::INFINITY;
    let mut first_violation = None;
    for (x, m) in margins {
        if m < margin {
            margin = m;
        }
        if m < 0.0 && first_violation.is_none() {
            first_violation = Some(x);
        }
    }
    ConditionReport { holds: margin >= 0.0, constant, margin, first_violation, grid }
}

/// Grid check of `Re p >= C + |p'/p| / 2` together with `q - lambda` in the slit plane.
pub fn check_condition_a(
    pot: &Potential,
    lambda: C64,
    x_lo: f64,
    x_hi: f64,
    c: f64,
    n_grid: usize,
) -> Result<ConditionReport> {
    check_condition_b(pot, lambda, x_lo, x_hi, c, 0.0, n_grid)
}

/// Grid check of `Re p >= C + (1/2 + eps) |p'/p|`.
pub fn check_condition_b(
    pot: &Potential,
    lambda: C64,
    x_lo: f64,
    x_hi: f64,
    c: f64,
    eps: f64,
    n_grid: usize,
) -> Result<ConditionReport> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument("condition constant C must be positive".into()));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument("epsilon must be non-negative".into()));
    }
    let grid = validate_window(pot, x_lo, x_hi, n_grid)?;
    let factor = 0.5 + eps;
    Ok(summarise(grid, c, grid.points().map(|x| (x, pointwise_margin(pot, lambda, x, c, factor)))))
}

/// `4 delta tan^{3/2}(kappa) sin(kappa / 2)`; infinite at `kappa = pi/2`.
pub fn theorem3_bound(kappa: f64, delta: f64) -> f64 {
    if kappa >= std::f64::consts::FRAC_PI_2 {
        return f64::INFINITY;
    }
    4.0 * delta * kappa.tan().powf(1.5) * (0.5 * kappa).sin()
}

/// Is `z` in the open sector `|arg z| < pi - kappa`?
pub fn in_sector(z: C64, kappa: f64) -> bool {
    z.norm() > 0.0 && z.arg().abs() < std::f64::consts::PI - kappa
}

/// Grid check of `q(x)` in the sector of half-opening `pi - kappa` and
/// `|q'/q^{3/2}| < 4 delta tan^{3/2}(kappa) sin(kappa/2)`.
pub fn check_theorem3(
    pot: &Potential,
    kappa: f64,
    delta: f64,
    x_lo: f64,
    x_hi: f64,
    n_grid: usize,
) -> Result<ConditionReport> {
    if !(kappa > 0.0 && kappa <= std::f64::consts::FRAC_PI_2) {
        return Err(Error::InvalidArgument("kappa must lie in (0, pi/2]".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument("delta must lie in (0, 1)".into()));
    }
    let grid = validate_window(pot, x_lo, x_hi, n_grid)?;
    let bound = theorem3_bound(kappa, delta);
    let sentinel = if bound.is_finite() { -bound } else { -1.0 };
    let margins = grid.points().map(|x| {
        let q = pot.q(x);
        if !in_sector(q, kappa) {
            return (x, sentinel);
        }
        let ratio = pot.dq(x).norm() / q.norm().powf(1.5);
        let m = bound - ratio;
        // strict inequality: equality is a violation
        (x, if m == 0.0 { -f64::MIN_POSITIVE } else { m })
    });
    Ok(summarise(grid, bound, margins))
}

/// Smallest grid point `a` of `[x_s, x_max]` such that condition A holds at
/// every grid point of `[a, x_max]`.
pub fn find_anchor(pot: &Potential, lambda: C64, c: f64, x_max: f64, n_grid: usize) -> Result<Option<f64>> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument("condition constant C must be positive".into()));
    }
    let grid = validate_window(pot, pot.smooth_start(), x_max, n_grid)?;
    let mut anchor = None;
    for i in (0..grid.n).rev() {
        if pointwise_margin(pot, lambda, grid.point(i), c, 0.5) >= 0.0 {
            anchor = Some(grid.point(i));
        } else {
            break;
        }
    }
    Ok(anchor)
}

/// Membership sample of the set of admissible spectral parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSample {
    pub lambda: C64,
    pub member: bool,
    pub anchor: Option<f64>,
    /// `min(rho - C)` on `[anchor, x_max]` (absent for non-members).
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaRect {
    pub re: (f64, f64),
    pub im: (f64, f64),
}

impl LambdaRect {
    pub fn new(re: (f64, f64), im: (f64, f64)) -> Self {
        Self { re, im }
    }

    pub fn center(&self) -> C64 {
        C64::new(0.5 * (self.re.0 + self.re.1), 0.5 * (self.im.0 + self.im.1))
    }

    pub fn diameter(&self) -> f64 {
        (self.re.1 - self.re.0).hypot(self.im.1 - self.im.0)
    }

    pub fn contains(&self, z: C64, slack: f64) -> bool {
        z.re >= self.re.0 - slack && z.re <= self.re.1 + slack && z.im >= self.im.0 - slack && z.im <= self.im.1 + slack
    }

    /// `n_re x n_im` grid including the corners, row-major in the imaginary part.
    pub fn grid(&self, n_re: usize, n_im: usize) -> Vec<C64> {
        let lin = |(a, b): (f64, f64), n: usize, i: usize| {
            if n <= 1 {
                0.5 * (a + b)
            } else {
                a + (b - a) * i as f64 / (n - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(n_re * n_im);
        for j in 0..n_im {
            for i in 0..n_re {
                out.push(C64::new(lin(self.re, n_re, i), lin(self.im, n_im, j)));
            }
        }
        out
    }
}

pub fn region_sample(pot: &Potential, lambda: C64, c: f64, x_max: f64, n_grid: usize) -> Result<RegionSample> {
    let anchor = find_anchor(pot, lambda, c, x_max, n_grid)?;
    let margin = match anchor {
        Some(a) => Some(check_condition_a(pot, lambda, a, x_max, c, n_grid)?.margin),
        None => None,
    };
    Ok(RegionSample { lambda, member: anchor.is_some(), anchor, margin })
}

/// Numerical picture of the admissible set on a rectangular lambda grid.
pub fn sample_n_region(
    pot: &Potential,
    lambdas: &[C64],
    c: f64,
    x_max: f64,
    n_grid: usize,
) -> Result<Vec<RegionSample>> {
    lambdas.par_iter().map(|&l| region_sample(pot, l, c, x_max, n_grid)).collect()
}

/// One anchor valid for every sampled lambda of the closed rectangle, moved
/// right by one grid cell.
pub fn region_anchor(
    pot: &Potential,
    rect: &LambdaRect,
    c: f64,
    x_max: f64,
    n_grid: usize,
    n_lambda: usize,
) -> Result<f64> {
    let lambdas = rect.grid(n_lambda.max(2), n_lambda.max(2));
    let anchors: Vec<Result<Option<f64>>> =
        lambdas.par_iter().map(|&l| find_anchor(pot, l, c, x_max, n_grid)).collect();
    let mut worst = pot.smooth_start();
    for (l, a) in lambdas.iter().zip(anchors) {
        match a? {
            Some(a) => worst = worst.max(a),
            None => return Err(Error::NoAnchor { re: l.re, im: l.im }),
        }
    }
    let cell = (x_max - pot.smooth_start()) / (n_grid - 1) as f64;
    let anchored = if worst > pot.smooth_start() { worst + cell } else { worst };
    Ok(anchored.min(x_max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpennessProbe {
    pub radius: f64,
    pub passed: bool,
    /// Smallest margin of condition A (constant `C / 2`) over the perturbed points.
    pub worst_margin: f64,
}

/// Perturb a member `lambda` by `radius` in eight directions and re-check
/// condition A with constant `C / 2` on `[anchor, x_max]`. The default radius
/// scales with the margin: `Re p` moves by at most `|d lambda| / (2C)` and
/// `|p'/p|` by about `|d lambda| / C^2`.
pub fn openness_probe(
    pot: &Potential,
    sample: &RegionSample,
    c: f64,
    x_max: f64,
    n_grid: usize,
    radius: Option<f64>,
) -> Result<OpennessProbe> {
    let (Some(anchor), Some(margin)) = (sample.anchor, sample.margin) else {
        return Err(Error::InvalidArgument("openness probe needs a member sample".into()));
    };
    let radius = radius.unwrap_or_else(|| (0.25 * margin * c.min(c * c)).min(0.1));
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("openness probe needs a positive margin or radius".into()));
    }
    let mut worst_margin = f64::INFINITY;
    for k in 0..8 {
        let dir = C64::from_polar(radius, k as f64 * std::f64::consts::FRAC_PI_4);
        let r = check_condition_a(pot, sample.lambda + dir, anchor, x_max, 0.5 * c, n_grid)?;
        worst_margin = worst_margin.min(r.margin);
    }
    Ok(OpennessProbe { radius, passed: worst_margin >= 0.0, worst_margin })
}

/// Minima of `rho` over consecutive windows of `[x_lo, x_hi]`, a finite
/// picture of `rho -> +inf`. Points where `rho` is undefined count as `-inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoGrowth {
    /// `(window start, min rho)` per window.
    pub window_minima: Vec<(f64, f64)>,
    pub nondecreasing: bool,
    /// Last window minimum minus the first.
    pub gain: f64,
}

pub fn rho_growth(
    pot: &Potential,
    lambda: C64,
    x_lo: f64,
    x_hi: f64,
    windows: usize,
    n_grid: usize,
) -> Result<RhoGrowth> {
    if windows == 0 {
        return Err(Error::InvalidArgument("need at least one window".into()));
    }
    let grid = validate_window(pot, x_lo, x_hi, n_grid.max(2 * windows))?;
    let per = grid.n / windows;
    let window_minima: Vec<(f64, f64)> = (0..windows)
        .map(|w| {
            let end = if w + 1 == windows { grid.n } else { (w + 1) * per };
            let m = (w * per..end)
                .map(|i| rho(pot, lambda, grid.point(i)).unwrap_or(f64::NEG_INFINITY))
                .fold(f64::INFINITY, f64::min);
            (grid.point(w * per), m)
        })
        .collect();
    let nondecreasing = window_minima.windows(2).all(|p| p[1].1 >= p[0].1);
    let gain = window_minima.last().unwrap().1 - window_minima[0].1;
    Ok(RhoGrowth { window_minima, nondecreasing, gain })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn eval_p_examples() {
        assert_eq!(eval_p(&Potential::constant(c(1.0, 0.0)), c(0.0, 0.0), 3.0).unwrap(), c(1.0, 0.0));
        let p = eval_p(&Potential::complex_airy(), c(0.0, 0.0), 2.0).unwrap();
        assert_relative_eq!(p.re, 1.0, epsilon = 1e-15);
        assert_relative_eq!(p.im, 1.0, epsilon = 1e-15);
        let p = eval_p(&Potential::harmonic(), c(-1.0, 0.0), 2.0).unwrap();
        assert_relative_eq!(p.re, 5f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(
            eval_p(&Potential::constant(c(1.0, 0.0)), c(2.0, 0.0), 1.0),
            Err(Error::Branch { .. })
        ));
        assert!(eval_p(&Potential::constant(c(1.0, 0.0)), c(1.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn rho_examples() {
        assert_eq!(rho(&Potential::constant(c(1.0, 0.0)), c(0.0, 0.0), 7.0).unwrap(), 1.0);
        assert_relative_eq!(rho(&Potential::complex_airy(), c(0.0, 0.0), 2.0).unwrap(), 0.875, epsilon = 1e-14);
        assert_relative_eq!(rho(&Potential::harmonic(), c(0.0, 0.0), 1.0).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn condition_a_examples() {
        let r = check_condition_a(&Potential::constant(c(1.0, 0.0)), c(0.0, 0.0), 0.0, 50.0, 0.5, 501).unwrap();
        assert!(r.holds);
        assert_relative_eq!(r.margin, 0.5, epsilon = 1e-15);

        let r = check_condition_a(&Potential::complex_airy(), c(0.0, 0.0), 4.0, 100.0, 1.0, 1001).unwrap();
        assert!(r.holds);
        assert_relative_eq!(r.margin, 2f64.sqrt() - 1.0 / 16.0 - 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.margin, 0.35171, epsilon = 1e-5);

        let r = check_condition_a(&Potential::constant(c(1.0, 0.0)), c(2.0, 0.0), 0.0, 50.0, 0.1, 501).unwrap();
        assert!(!r.holds);
        assert_eq!(r.first_violation, Some(0.0));
        assert!(r.margin < 0.0);
    }

    #[test]
    fn condition_b_examples() {
        let r = check_condition_b(&Potential::constant(c(1.0, 0.0)), c(0.0, 0.0), 0.0, 50.0, 0.5, 1.0, 501).unwrap();
        assert!(r.holds);
        let r = check_condition_b(&Potential::complex_airy(), c(0.0, 0.0), 4.0, 100.0, 1.0, 0.25, 1001).unwrap();
        assert!(r.holds);
        assert_relative_eq!(r.margin, 2f64.sqrt() - 1.0 - 0.09375, epsilon = 1e-12);
        let r = check_condition_b(&Potential::harmonic(), c(0.0, 0.0), 1.0, 2.0, 0.4, 10.0, 101).unwrap();
        assert!(!r.holds);
        assert_eq!(r.first_violation, Some(1.0));
        assert_relative_eq!(r.margin, 1.0 - 0.4 - 10.5, epsilon = 1e-12);
    }

    #[test]
    fn theorem3_examples() {
        let r = check_theorem3(&Potential::constant(c(1.0, 0.0)), 0.7, 0.5, 0.0, 10.0, 101).unwrap();
        assert!(r.holds);
        let r = check_theorem3(&Potential::complex_airy(), std::f64::consts::FRAC_PI_4, 0.9, 4.0, 100.0, 1001).unwrap();
        assert!(r.holds);
        assert_relative_eq!(r.constant, 1.3776, epsilon = 1e-4);
        assert_relative_eq!(r.margin, 3.6 * (std::f64::consts::PI / 8.0).sin() - 0.125, epsilon = 1e-12);
        let r = check_theorem3(&Potential::complex_airy(), std::f64::consts::FRAC_PI_4, 0.9, 0.01, 1.0, 100).unwrap();
        assert!(!r.holds);
        assert_eq!(r.first_violation, Some(0.01));
        // q = i x is outside the sector at x = 0
        let r = check_theorem3(&Potential::complex_airy(), 0.5, 0.5, 0.0, 1.0, 11).unwrap();
        assert!(!r.holds);
    }

    // Root of sqrt(x/2) - 1/(4x) = 1 by bisection on the closed form.
    fn airy_anchor_oracle() -> f64 {
        let f = |x: f64| (x / 2.0).sqrt() - 0.25 / x - 1.0;
        let (mut lo, mut hi) = (1.0, 5.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn anchor_examples() {
        assert_eq!(find_anchor(&Potential::constant(c(1.0, 0.0)), c(0.0, 0.0), 0.5, 50.0, 501).unwrap(), Some(0.0));
        let root = airy_anchor_oracle();
        assert_relative_eq!(root, 2.43227, epsilon = 1e-4);
        let n = 2049;
        let a = find_anchor(&Potential::complex_airy(), c(0.0, 0.0), 1.0, 100.0, n).unwrap().unwrap();
        let cell = 100.0 / (n - 1) as f64;
        assert!(a >= root && a < root + cell, "anchor {a} vs root {root}");
        assert_eq!(find_anchor(&Potential::constant(c(1.0, 0.0)), c(2.0, 0.0), 0.1, 50.0, 501).unwrap(), None);
    }

    #[test]
    fn region_examples() {
        let pot = Potential::constant(c(1.0, 0.0));
        let s = sample_n_region(&pot, &[c(2.0, 0.0), c(0.5, 0.0)], 0.1, 50.0, 501).unwrap();
        assert!(!s[0].member);
        assert!(s[1].member);
        assert_eq!(s[1].anchor, Some(0.0));
        let rect = LambdaRect::new((-5.0, 5.0), (-5.0, 5.0));
        let s = sample_n_region(&Potential::complex_airy(), &rect.grid(10, 10), 1.0, 100.0, 2049).unwrap();
        assert_eq!(s.len(), 100);
        assert!(s.iter().all(|r| r.member));
    }

    #[test]
    fn region_anchor_covers_samples() {
        let rect = LambdaRect::new((0.0, 12.0), (-1.0, 1.0));
        let a = region_anchor(&Potential::harmonic(), &rect, 1.0, 30.0, 2049, 9).unwrap();
        for l in rect.grid(17, 17) {
            assert!(check_condition_a(&Potential::harmonic(), l, a, 30.0, 1.0, 2049).unwrap().holds);
        }
    }

    #[test]
    fn builtin_derivatives_match_finite_differences() {
        let pots = vec![
            Potential::monomial_phase(1.5, 2.5, 0.7).unwrap(),
            Potential::complex_airy(),
            Potential::polynomial(vec![c(1.0, -2.0), c(0.5, 0.25), c(-0.1, 1.0), c(0.02, 0.0)]).unwrap(),
            Potential::constant(c(3.0, 1.0)),
        ];
        for pot in &pots {
            for &x in &[0.3, 1.7, 4.2, 9.9] {
                let h = 1e-5;
                let fd = (pot.q(x + h) - pot.q(x - h)) / (2.0 * h);
                let d = pot.dq(x);
                assert!((fd - d).norm() <= 1e-6 * d.norm().max(1.0), "{pot:?} at {x}");
            }
        }
    }

    #[test]
    fn tabulated_interpolation() {
        let xs: Vec<f64> = (0..=40).map(|i| i as f64 * 0.25).collect();
        let vals: Vec<C64> = xs.iter().map(|&x| c(x * x, x)).collect();
        let pot = Potential::tabulated(xs, vals).unwrap();
        assert_relative_eq!(pot.q(2.0).re, 4.0, epsilon = 1e-12);
        assert!((pot.q(3.1) - c(9.61, 3.1)).norm() < 2e-3);
        assert!((pot.dq(3.1) - c(6.2, 1.0)).norm() < 2e-2);
        assert_eq!(pot.q(20.0), c(100.0, 10.0));
        assert!(Potential::tabulated(vec![0.0, 0.0], vec![c(0.0, 0.0); 2]).is_err());
    }

    #[test]
    fn tabulated_is_monotone_between_monotone_samples() {
        let xs = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let vals = vec![c(0.0, 0.0), c(0.1, 0.0), c(5.0, 0.0), c(5.1, 0.0), c(10.0, 0.0)];
        let pot = Potential::tabulated(xs, vals).unwrap();
        let mut prev = pot.q(0.0).re;
        for i in 1..=400 {
            let v = pot.q(i as f64 * 0.01).re;
            assert!(v >= prev - 1e-14);
            prev = v;
        }
    }

    proptest! {
        #[test]
        fn branch_consistency(x in 0.0f64..50.0, lr in -20.0f64..20.0, li in -20.0f64..20.0) {
            let pots = [Potential::complex_airy(), Potential::harmonic()];
            for pot in &pots {
                let lambda = c(lr, li);
                if let Ok(p) = eval_p(pot, lambda, x) {
                    let z = pot.q(x) - lambda;
                    prop_assert!((p * p - z).norm() <= 1e-12 * z.norm().max(1e-300));
                    prop_assert!(p.re > 0.0);
                }
            }
        }

        #[test]
        fn sector_inequality(x in 0.01f64..30.0, lr in -10.0f64..10.0, li in -10.0f64..10.0, kappa in 0.01f64..1.5) {
            let pot = Potential::complex_airy();
            let lambda = c(lr, li);
            let z = pot.q(x) - lambda;
            if in_sector(z, kappa) {
                let p = eval_p(&pot, lambda, x).unwrap();
                prop_assert!(p.re >= p.norm() * (0.5 * kappa).sin() * (1.0 - 1e-12));
            }
        }

        #[test]
        fn condition_b_weight_bound(c0 in 0.1f64..2.0, eps in 0.05f64..2.0, x0 in 1.0f64..20.0) {
            let pot = Potential::complex_airy();
            let lambda = c(0.0, 0.0);
            let r = check_condition_b(&pot, lambda, x0, x0 + 30.0, c0, eps, 65).unwrap();
            if r.holds {
                for x in r.grid.points() {
                    prop_assert!(c0 * eps / (0.5 + eps) <= rho(&pot, lambda, x).unwrap());
                }
            }
        }
    }

    #[test]
    fn members_survive_small_perturbations() {
        let pots = [Potential::complex_airy(), Potential::harmonic(), Potential::constant(c(1.0, 0.0))];
        let rect = LambdaRect::new((-3.0, 3.0), (-3.0, 3.0));
        for pot in &pots {
            let samples = sample_n_region(pot, &rect.grid(5, 5), 0.2, 60.0, 1025).unwrap();
            for s in samples.iter().filter(|s| s.member) {
                let m = s.margin.unwrap();
                if m <= 0.0 {
                    continue;
                }
                let h = 0.1 * m;
                for d in [c(h, 0.0), c(-h, 0.0), c(0.0, h), c(0.0, -h)] {
                    let n = region_sample(pot, s.lambda + d, 0.2, 60.0, 1025).unwrap();
                    assert!(n.member, "{pot:?} {:?}", s.lambda + d);
                }
            }
        }
    }

    #[test]
    fn rho_growth_separates_confining_from_constant() {
        let g = rho_growth(&Potential::harmonic(), c(1.0, 0.0), 2.0, 20.0, 6, 601).unwrap();
        assert!(g.nondecreasing && g.gain > 10.0);
        let flat = rho_growth(&Potential::constant(c(1.0, 0.0)), c(0.0, 0.0), 0.0, 20.0, 4, 401).unwrap();
        assert!(flat.gain.abs() < 1e-12);
    }

    #[test]
    fn openness_probe_on_constant_potential() {
        let pot = Potential::constant(c(1.0, 0.0));
        let s = region_sample(&pot, c(0.5, 0.0), 0.5, 10.0, 257).unwrap();
        let probe = openness_probe(&pot, &s, 0.5, 10.0, 257, None).unwrap();
        assert!(probe.passed && probe.radius > 0.0);
        // far too large a radius reaches the cut
        let big = openness_probe(&pot, &s, 0.5, 10.0, 257, Some(1.0)).unwrap();
        assert!(!big.passed);
    }
}
