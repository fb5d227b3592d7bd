//! Nested Weyl disks, the Weyl function and the square-integrable solution.
//!
//! With `U(a) = (0, 1)` and `V(a) = (1, 0)` the solutions `Y = U + theta V`
//! whose energy form `Re y1 conj(y2)` is non-positive at `b` fill a closed disk
//! in the `theta` plane. The disks shrink as `b` grows and their limit point
//! is `theta(lambda)`. The Weyl solution is normalised at the anchor by
//! `eta(a) = mu = theta / p(a)`, `eta'(a) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::{check_condition_a, eval_p, p_and_log_derivative, Potential, C64};
use crate::propagate::{
    integrate_scalar, integrate_system_scaled, wronskian_drift, FundamentalPair, IntegratorOptions, PairState,
    ScaledTrajectory, ScalarState, SystemState, Trajectory,
};

/// Number of grid points used to confirm condition A before building disks.
const PRECONDITION_GRID: usize = 513;
/// Decay exponent `int Re p` past `x_max` at which the backward tail integration starts.
const TAIL_DECAY: f64 = 18.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeylDisk {
    pub b: f64,
    pub center: C64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeylSettings {
    /// Local error tolerance of the ODE integration.
    pub ode_tol: f64,
    /// Stop once the disk radius is at most this.
    pub radius_tol: f64,
    /// Last endpoint of the schedule; `None` means `anchor + 64`.
    pub b_max: Option<f64>,
    /// First offset of the geometric schedule `b_k = anchor + b_first * growth^k`.
    pub b_first: f64,
    pub growth: f64,
}

impl Default for WeylSettings {
    fn default() -> Self {
        Self { ode_tol: 1e-10, radius_tol: 1e-8, b_max: None, b_first: 1.0, growth: 2.0 }
    }
}

impl WeylSettings {
    pub fn with_tolerances(ode_tol: f64, radius_tol: f64) -> Self {
        Self { ode_tol, radius_tol, ..Self::default() }
    }

    fn b_max_for(&self, anchor: f64) -> f64 {
        self.b_max.unwrap_or(anchor + 64.0)
    }

    /// Endpoints of the schedule after `anchor`, ending exactly at `b_max`.
    pub fn schedule(&self, anchor: f64) -> Result<Vec<f64>> {
        let b_max = self.b_max_for(anchor);
        if !(self.b_first > 0.0 && self.growth > 1.0) {
            return Err(Error::InvalidArgument("schedule needs b_first > 0 and growth > 1".into()));
        }
        if !(b_max > anchor) {
            return Err(Error::InvalidArgument(format!("b_max {b_max} must exceed the anchor {anchor}")));
        }
        let mut out = Vec::new();
        let mut step = self.b_first;
        loop {
            let b = anchor + step;
            if b >= b_max {
                out.push(b_max);
                return Ok(out);
            }
            out.push(b);
            step *= self.growth;
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.ode_tol > 0.0) || !(self.radius_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeylResult {
    pub lambda: C64,
    pub anchor: f64,
    pub theta: C64,
    pub mu: C64,
    pub disks: Vec<WeylDisk>,
    pub converged: bool,
    pub final_radius: f64,
    /// Largest relative Wronskian drift seen along the schedule.
    pub wronskian_drift: f64,
}

fn disk_from_state(st: &PairState) -> Result<WeylDisk> {
    let den = 2.0 * (st.v[0] * st.v[1].conj()).re;
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::DiskDenominator { b: st.x, value: den });
    }
    let cross = st.u_perp[0] * st.v[1].conj() + st.v[0].conj() * st.u_perp[1];
    let center = -st.coeff - cross * ((st.log_u - st.log_v).exp() / den);
    let radius = ((-2.0 * st.log_v).exp() / den).max(f64::MIN_POSITIVE);
    if !center.is_finite() {
        return Err(Error::NonFinite { x: st.x });
    }
    Ok(WeylDisk { b: st.x, center, radius })
}

fn require_condition_a(pot: &Potential, lambda: C64, anchor: f64, b: f64) -> Result<()> {
    let report = check_condition_a(pot, lambda, anchor, b, f64::MIN_POSITIVE, PRECONDITION_GRID)?;
    if report.holds {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "condition A fails on [{anchor}, {b}] at x = {} for lambda = {lambda}",
            report.first_violation.unwrap_or(f64::NAN)
        )))
    }
}

/// The disk of admissible `theta` for the interval `[anchor, b]`.
pub fn disk_at(pot: &Potential, lambda: C64, anchor: f64, b: f64, tol: f64) -> Result<WeylDisk> {
    if !(b > anchor) {
        return Err(Error::InvalidArgument(format!("b = {b} must exceed the anchor {anchor}")));
    }
    require_condition_a(pot, lambda, anchor, b)?;
    let mut pair = FundamentalPair::new(pot, lambda, anchor, IntegratorOptions::new(tol))?;
    pair.advance_to(b)?;
    disk_from_state(&pair.state())
}

/// Follow the nested disks along the schedule until the radius drops below
/// `settings.radius_tol` or `b_max` is reached.
pub fn weyl_theta(pot: &Potential, lambda: C64, anchor: f64, settings: &WeylSettings) -> Result<WeylResult> {
    settings.validate()?;
    let schedule = settings.schedule(anchor)?;
    let b_max = *schedule.last().expect("schedule is never empty");
    require_condition_a(pot, lambda, anchor, b_max)?;
    let mut pair = FundamentalPair::new(pot, lambda, anchor, IntegratorOptions::new(settings.ode_tol))?;
    let mut disks: Vec<WeylDisk> = Vec::new();
    let mut drift: f64 = 0.0;
    let mut converged = false;
    for &b in &schedule {
        pair.advance_to(b)?;
        let disk = disk_from_state(&pair.state())?;
        drift = drift.max(wronskian_drift(&pair, pot)?);
        if let Some(prev) = disks.last() {
            check_nesting(prev, &disk, settings.ode_tol)?;
        }
        disks.push(disk);
        if disk.radius <= settings.radius_tol {
            converged = true;
            break;
        }
    }
    let last = *disks.last().expect("at least one disk");
    let theta = last.center;
    let mu = theta / eval_p(pot, lambda, anchor)?;
    Ok(WeylResult { lambda, anchor, theta, mu, disks, converged, final_radius: last.radius, wronskian_drift: drift })
}

fn check_nesting(outer: &WeylDisk, inner: &WeylDisk, tol: f64) -> Result<()> {
    let slack = 10.0 * tol * inner.center.norm().max(1.0);
    let shift = (inner.center - outer.center).norm();
    let gap = outer.radius - inner.radius;
    if shift > gap + slack || inner.radius > outer.radius * (1.0 + 10.0 * tol) + slack {
        return Err(Error::Nesting { b1: outer.b, b2: inner.b, shift, gap });
    }
    Ok(())
}

/// Point past `x_max` where `int_{x_max}^{x} Re p` first reaches `decay`.
pub fn tail_extent(pot: &Potential, lambda: C64, x_max: f64, decay: f64) -> Result<f64> {
    let mut x = x_max;
    let mut acc = 0.0;
    for _ in 0..1_000_000 {
        let p = eval_p(pot, lambda, x)?;
        let dx = (0.5 / p.norm().max(1e-3)).min(0.5);
        let pm = eval_p(pot, lambda, x + 0.5 * dx)?;
        if pm.re <= 0.0 {
            return Err(Error::Precondition(format!("Re p is not positive at {} beyond x_max", x + 0.5 * dx)));
        }
        acc += pm.re * dx;
        x += dx;
        if acc >= decay {
            return Ok(x);
        }
    }
    Err(Error::Precondition("the solution does not decay beyond x_max".into()))
}

/// Norms of the Weyl solution over `[anchor, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailNorms {
    /// `||eta||_{L2}`.
    pub l2: f64,
    /// `(int rho |eta|^2)^{1/2}`.
    pub rho: f64,
    /// `(int |eta'|^2 / |q - lambda|)^{1/2}`.
    pub derivative: f64,
}

/// The square-integrable solution on `[0, x_far]` with `eta(a) = mu`, `eta'(a) = 1`.
#[derive(Debug, Clone)]
pub struct WeylSolution {
    pub lambda: C64,
    pub anchor: f64,
    pub x_max: f64,
    pub theta: C64,
    pub mu: C64,
    pub final_radius: f64,
    pub converged: bool,
    /// `|eta_tail(a) - mu| / max(1, |mu|)`.
    pub continuity_residual: f64,
    pub tail_norms: TailNorms,
    p_anchor: C64,
    head: Option<Trajectory>,
    tail: ScaledTrajectory,
    tail_factor: C64,
    tail_reference: f64,
}

/// Build the Weyl solution. `theta` comes from [`weyl_theta`]; the solution
/// beyond the anchor is integrated backward from the far tail, where the
/// decaying solution dominates, and scaled to `eta'(a) = 1`.
pub fn weyl_solution(
    pot: &Potential,
    lambda: C64,
    anchor: f64,
    x_max: f64,
    settings: &WeylSettings,
) -> Result<WeylSolution> {
    let wr = weyl_theta(pot, lambda, anchor, settings)?;
    if !wr.converged {
        return Err(Error::NotConverged { b: wr.disks.last().map(|d| d.b).unwrap_or(anchor), radius: wr.final_radius });
    }
    weyl_solution_from(pot, &wr, x_max, settings.ode_tol)
}

/// Build the Weyl solution from an already computed Weyl result.
pub fn weyl_solution_from(pot: &Potential, wr: &WeylResult, x_max: f64, tol: f64) -> Result<WeylSolution> {
    let lambda = wr.lambda;
    let anchor = wr.anchor;
    if !(x_max > anchor) {
        return Err(Error::InvalidArgument(format!("x_max = {x_max} must exceed the anchor {anchor}")));
    }
    let opts = IntegratorOptions::new(tol);
    let p_anchor = eval_p(pot, lambda, anchor)?;
    let head = if anchor > 0.0 {
        Some(integrate_scalar(pot, lambda, ScalarState { x: anchor, y: wr.mu, dy: C64::new(1.0, 0.0) }, 0.0, opts)?)
    } else {
        None
    };
    let x_far = tail_extent(pot, lambda, x_max, TAIL_DECAY)?;
    let init = SystemState { x: x_far, y1: C64::new(1.0, 0.0), y2: C64::new(-1.0, 0.0) };
    let tail = integrate_system_scaled(pot, lambda, init, anchor, opts)?;
    let end = tail.end_state_scaled();
    if end[1].norm() == 0.0 {
        return Err(Error::NonFinite { x: anchor });
    }
    let tail_reference = tail.end_log_scale();
    let tail_factor = 1.0 / (p_anchor * end[1]);
    let mut sol = WeylSolution {
        lambda,
        anchor,
        x_max,
        theta: wr.theta,
        mu: wr.mu,
        final_radius: wr.final_radius,
        converged: wr.converged,
        continuity_residual: 0.0,
        tail_norms: TailNorms { l2: 0.0, rho: 0.0, derivative: 0.0 },
        p_anchor,
        head,
        tail,
        tail_factor,
        tail_reference,
    };
    let eta_a = tail_factor * end[0];
    sol.continuity_residual = (eta_a - wr.mu).norm() / wr.mu.norm().max(1.0);
    sol.tail_norms = sol.norms_until(pot, x_max)?;
    Ok(sol)
}

impl WeylSolution {
    /// Largest abscissa where the solution is available.
    pub fn x_far(&self) -> f64 {
        self.tail.x_start()
    }

    pub fn p_anchor(&self) -> C64 {
        self.p_anchor
    }

    /// `(eta(x), eta'(x))` for `x` in `[0, x_far]`.
    pub fn eval(&self, pot: &Potential, x: f64) -> Result<(C64, C64)> {
        if x < self.anchor {
            let head = self.head.as_ref().ok_or_else(|| Error::InvalidArgument(format!("x = {x} is negative")))?;
            let s = head.state(x).ok_or_else(|| Error::InvalidArgument(format!("x = {x} outside [0, anchor]")))?;
            return Ok((s[0], s[1]));
        }
        let (y, _) = self
            .tail
            .eval_relative(x, self.tail_reference)
            .ok_or_else(|| Error::InvalidArgument(format!("x = {x} beyond the computed tail {}", self.x_far())))?;
        let p = eval_p(pot, self.lambda, x)?;
        Ok((self.tail_factor * y[0], self.tail_factor * p * y[1]))
    }

    /// `(eta(0), eta'(0))`.
    pub fn at_zero(&self, pot: &Potential) -> Result<(C64, C64)> {
        match &self.head {
            Some(h) => {
                let s = h.end_state();
                Ok((s[0], s[1]))
            }
            None => self.eval(pot, 0.0),
        }
    }

    /// `n` uniform samples `(x, eta, eta')` of `[0, x_max]`.
    pub fn samples(&self, pot: &Potential, n: usize) -> Result<Vec<(f64, C64, C64)>> {
        let n = n.max(2);
        (0..n)
            .map(|i| {
                let x = self.x_max * i as f64 / (n - 1) as f64;
                let (e, d) = self.eval(pot, x)?;
                Ok((x, e, d))
            })
            .collect()
    }

    /// Quadrature of `g(x, eta, eta', p, p'/p)` over `[anchor, hi]` on the tail steps.
    fn tail_quadrature<G>(&self, pot: &Potential, hi: f64, mut g: G) -> Result<f64>
    where
        G: FnMut(f64, C64, C64, C64, C64) -> f64,
    {
        let mut total = 0.0;
        for seg in self.tail.segments() {
            let (lo_s, hi_s) = (seg.x1.min(seg.x0), seg.x1.max(seg.x0));
            let lo = lo_s.max(self.anchor);
            let up = hi_s.min(hi);
            if up <= lo {
                continue;
            }
            let mut f = |x: f64| -> Result<f64> {
                let (e, d) = self.eval(pot, x)?;
                let (p, lp) = p_and_log_derivative(pot, self.lambda, x)?;
                Ok(g(x, e, d, p, lp))
            };
            let xm = 0.5 * (lo + up);
            total += (up - lo) / 6.0 * (f(lo)? + 4.0 * f(xm)? + f(up)?);
        }
        Ok(total)
    }

    fn norms_until(&self, pot: &Potential, hi: f64) -> Result<TailNorms> {
        let l2 = self.tail_quadrature(pot, hi, |_, e, _, _, _| e.norm_sqr())?;
        let rho = self.tail_quadrature(pot, hi, |_, e, _, p, lp| (p.re - 0.5 * lp.norm()) * e.norm_sqr())?;
        let derivative = self.tail_quadrature(pot, hi, |_, _, d, p, _| d.norm_sqr() / p.norm_sqr())?;
        Ok(TailNorms { l2: l2.sqrt(), rho: rho.max(0.0).sqrt(), derivative: derivative.sqrt() })
    }

    /// Tail norms over `[anchor, hi]` for any `hi` up to `x_far`.
    pub fn tail_norms_until(&self, pot: &Potential, hi: f64) -> Result<TailNorms> {
        self.norms_until(pot, hi.min(self.x_far()))
    }

    /// `int_a^{x_max} rho (|y1|^2 + |y2|^2)` for `Y = U + theta V`, which
    /// is `p(a) eta` in system form.
    pub fn weighted_energy(&self, pot: &Potential) -> Result<f64> {
        let scale = self.p_anchor.norm_sqr();
        let v = self.tail_quadrature(pot, self.x_max, |_, e, d, p, lp| {
            (p.re - 0.5 * lp.norm()) * (e.norm_sqr() + (d / p).norm_sqr())
        })?;
        Ok(scale * v)
    }
}

/// The Weyl solution sampled on an ascending grid starting at or after 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution {
    pub eta: Vec<C64>,
    pub deta: Vec<C64>,
    pub continuity_residual: f64,
    /// Decay rate `Re p` at the last grid point.
    pub decay_rate: f64,
}

/// Sample the Weyl solution of `wr` at the points `xs` with steps ending on
/// every point. Same construction as [`weyl_solution_from`].
pub fn weyl_solution_on_grid(pot: &Potential, wr: &WeylResult, xs: &[f64], tol: f64) -> Result<GridSolution> {
    let lambda = wr.lambda;
    let anchor = wr.anchor;
    let x_last = *xs.last().ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
    if xs.windows(2).any(|w| w[1] <= w[0]) || xs[0] < 0.0 {
        return Err(Error::InvalidArgument("grid must be ascending and non-negative".into()));
    }
    let opts = IntegratorOptions::new(tol);
    let p_anchor = eval_p(pot, lambda, anchor)?;
    let split = xs.partition_point(|&x| x < anchor);
    let mut eta = vec![C64::new(0.0, 0.0); xs.len()];
    let mut deta = eta.clone();

    let x_far = tail_extent(pot, lambda, x_last.max(anchor), TAIL_DECAY)?;
    let mut tail_xs: Vec<f64> = xs[split..].iter().rev().copied().collect();
    tail_xs.push(anchor);
    let init = SystemState { x: x_far, y1: C64::new(1.0, 0.0), y2: C64::new(-1.0, 0.0) };
    let tail = crate::propagate::sample_system_scaled(pot, lambda, init, &tail_xs, opts)?;
    let (ya, la) = *tail.last().expect("anchor sample");
    if ya[1].norm() == 0.0 {
        return Err(Error::NonFinite { x: anchor });
    }
    let kappa = 1.0 / (p_anchor * ya[1]);
    for (k, &x) in tail_xs[..tail_xs.len() - 1].iter().enumerate() {
        let (y, l) = tail[k];
        let f = kappa * (l - la).exp();
        let i = xs.len() - 1 - k;
        eta[i] = f * y[0];
        deta[i] = f * eval_p(pot, lambda, x)? * y[1];
    }
    let continuity_residual = (kappa * ya[0] - wr.mu).norm() / wr.mu.norm().max(1.0);

    if split > 0 {
        let head_xs: Vec<f64> = xs[..split].iter().rev().copied().collect();
        let head = crate::propagate::sample_scalar(
            pot,
            lambda,
            ScalarState { x: anchor, y: wr.mu, dy: C64::new(1.0, 0.0) },
            &head_xs,
            opts,
        )?;
        for (k, v) in head.iter().enumerate() {
            let i = split - 1 - k;
            eta[i] = v[0];
            deta[i] = v[1];
        }
    }
    let decay_rate = eval_p(pot, lambda, x_last.max(anchor))?.re;
    Ok(GridSolution { eta, deta, continuity_residual, decay_rate })
}

/// `h(x) = Re(conj(eta) eta' / p)` on `n` uniform points of `[anchor, x_max]`.
pub fn boundary_limit_trace(sol: &WeylSolution, pot: &Potential, n: usize) -> Result<Vec<(f64, f64)>> {
    let n = n.max(2);
    (0..n)
        .map(|i| {
            let x = sol.anchor + (sol.x_max - sol.anchor) * i as f64 / (n - 1) as f64;
            let (e, d) = sol.eval(pot, x)?;
            let p = eval_p(pot, sol.lambda, x)?;
            Ok((x, (e.conj() * d / p).re))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }
    const Z: C64 = C64::new(0.0, 0.0);
    const ONE: C64 = C64::new(1.0, 0.0);

    #[test]
    fn disk_closed_forms() {
        let pot = Potential::constant(ONE);
        let d = disk_at(&pot, Z, 0.0, 1.0, 1e-11).unwrap();
        assert_relative_eq!(d.center.re, -1.0373147, epsilon = 1e-7);
        assert!((d.center.re + 1.0 / 2f64.tanh()).abs() < 1e-9 && d.center.im.abs() < 1e-12);
        assert!((d.radius - 1.0 / 2f64.sinh()).abs() < 1e-9);
        assert_relative_eq!(d.radius, 0.2757205, epsilon = 1e-7);
        let d = disk_at(&pot, Z, 0.0, 5.0, 1e-11).unwrap();
        assert!((d.center.re + 1.0 / 10f64.tanh()).abs() < 1e-9);
        assert!((d.radius - 1.0 / 10f64.sinh()).abs() < 1e-9 * d.radius.max(1e-5));
    }

    #[test]
    fn disk_radius_shrinks_airy() {
        let pot = Potential::complex_airy();
        let r6 = disk_at(&pot, Z, 4.0, 6.0, 1e-10).unwrap().radius;
        let r8 = disk_at(&pot, Z, 4.0, 8.0, 1e-10).unwrap().radius;
        assert!(r8 < r6);
    }

    #[test]
    fn disk_requires_condition_a() {
        let pot = Potential::constant(ONE);
        assert!(matches!(disk_at(&pot, c(2.0, 0.0), 0.0, 1.0, 1e-8), Err(Error::Branch { .. } | Error::Precondition(_))));
        assert!(disk_at(&pot, Z, 1.0, 1.0, 1e-8).is_err());
    }

    #[test]
    fn theta_constant_potential() {
        let pot = Potential::constant(ONE);
        let s = WeylSettings::with_tolerances(1e-11, 1e-8);
        let r = weyl_theta(&pot, Z, 0.0, &s).unwrap();
        assert!(r.converged && r.final_radius <= 1e-8);
        assert!((r.theta + 1.0).norm() < 1e-7);
        assert!((r.mu + 1.0).norm() < 1e-7);
        let r = weyl_theta(&pot, c(0.75, 0.0), 0.0, &s).unwrap();
        assert!((r.theta + 1.0).norm() < 1e-7);
        assert!((r.mu + 2.0).norm() < 1e-6);
        for w in r.disks.windows(2) {
            assert!(w[1].radius <= w[0].radius);
        }
    }

    #[test]
    fn theta_airy_converges() {
        let pot = Potential::complex_airy();
        let s = WeylSettings::with_tolerances(1e-10, 1e-8);
        let r = weyl_theta(&pot, Z, 2.6, &s).unwrap();
        assert!(r.converged && r.final_radius <= 1e-8);
        assert!(r.theta.re < 0.0);
        assert!(r.wronskian_drift < 1e-6);
    }

    #[test]
    fn theta_unconverged_is_flagged() {
        let pot = Potential::constant(ONE);
        let s = WeylSettings { b_max: Some(2.0), ..WeylSettings::with_tolerances(1e-10, 1e-12) };
        let r = weyl_theta(&pot, Z, 0.0, &s).unwrap();
        assert!(!r.converged);
        assert!(r.final_radius > 1e-12);
        assert!(weyl_solution(&pot, Z, 0.0, 5.0, &s).is_err());
    }

    #[test]
    fn schedule_is_geometric_and_capped() {
        let s = WeylSettings { b_max: Some(10.0), ..WeylSettings::default() };
        assert_eq!(s.schedule(1.0).unwrap(), vec![2.0, 3.0, 5.0, 9.0, 10.0]);
    }

    #[test]
    fn solution_constant_potential() {
        let pot = Potential::constant(ONE);
        let s = WeylSettings::with_tolerances(1e-11, 1e-9);
        let sol = weyl_solution(&pot, Z, 0.0, 8.0, &s).unwrap();
        let (e0, d0) = sol.at_zero(&pot).unwrap();
        assert!((e0 + 1.0).norm() < 1e-7 && (d0 - 1.0).norm() < 1e-7);
        for x in [0.5, 2.0, 5.0] {
            let (e, d) = sol.eval(&pot, x).unwrap();
            assert!((e + (-x).exp()).norm() < 1e-8, "{x}: {e}");
            assert!((d - (-x).exp()).norm() < 1e-8);
        }
        assert!(sol.continuity_residual < 1e-7);
        // ||e^{-x}||^2 on [0, 8]
        assert_relative_eq!(sol.tail_norms.l2, (0.5 * (1.0 - (-16f64).exp())).sqrt(), epsilon = 1e-7);
        let h = boundary_limit_trace(&sol, &pot, 9).unwrap();
        assert!((h[0].1 + 1.0).abs() < 1e-7);
        let h5 = boundary_limit_trace(&WeylSolution { x_max: 5.0, ..sol.clone() }, &pot, 2).unwrap();
        assert_relative_eq!(h5[1].1, -(-10f64).exp(), epsilon = 1e-9);
        assert_relative_eq!(h5[1].1.abs(), 4.54e-5, epsilon = 1e-7);
    }

    #[test]
    fn solution_backward_from_anchor() {
        // anchor away from zero: the head is integrated back to 0
        let pot = Potential::constant(ONE);
        let s = WeylSettings::with_tolerances(1e-11, 1e-9);
        let sol = weyl_solution(&pot, Z, 1.5, 8.0, &s).unwrap();
        let (e0, d0) = sol.at_zero(&pot).unwrap();
        // eta = -e^{-(x - a)} normalised by eta'(a) = 1
        assert!((e0 + 1.5f64.exp()).norm() < 1e-6);
        assert!((d0 - 1.5f64.exp()).norm() < 1e-6);
    }

    #[test]
    fn solution_is_nontrivial_and_budgeted() {
        let pot = Potential::complex_airy();
        let s = WeylSettings::with_tolerances(1e-10, 1e-9);
        let sol = weyl_solution(&pot, Z, 2.6, 12.0, &s).unwrap();
        let (e0, d0) = sol.at_zero(&pot).unwrap();
        assert!(e0.norm().max(d0.norm()) > 0.0);
        assert!(sol.continuity_residual < 1e-6);
        let budget = sol.weighted_energy(&pot).unwrap();
        assert!(budget <= -sol.theta.re + 100.0 * 1e-10, "{budget} vs {}", -sol.theta.re);
        let h = boundary_limit_trace(&sol, &pot, 11).unwrap();
        assert!(h.last().unwrap().1.abs() < 1e-6);
    }

    #[test]
    fn grid_solution_matches_dense_solution() {
        let pot = Potential::complex_airy();
        let s = WeylSettings::with_tolerances(1e-11, 1e-10);
        let wr = weyl_theta(&pot, Z, 2.6, &s).unwrap();
        let sol = weyl_solution_from(&pot, &wr, 8.0, 1e-11).unwrap();
        let xs: Vec<f64> = (0..=80).map(|i| i as f64 * 0.1).collect();
        let g = weyl_solution_on_grid(&pot, &wr, &xs, 1e-11).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let (e, d) = sol.eval(&pot, x).unwrap();
            let scale = e.norm().max(1e-3);
            assert!((g.eta[i] - e).norm() < 1e-7 * scale, "{x}");
            assert!((g.deta[i] - d).norm() < 1e-7 * d.norm().max(1e-3), "{x}");
        }
        assert!(g.continuity_residual < 1e-8);
    }

    #[test]
    fn real_potential_gives_real_theta() {
        let pot = Potential::harmonic();
        let s = WeylSettings::with_tolerances(1e-10, 1e-9);
        let r = weyl_theta(&pot, c(-1.0, 0.0), 0.0, &s).unwrap();
        assert!(r.theta.im.abs() < 1e-8 && r.mu.im.abs() < 1e-8);
        assert!(r.theta.re < 0.0);
    }
}
