//! Reference computations sharing no code with the Weyl pipeline: a
//! finite-difference eigensolver on a truncated interval and the Airy
//! function with its zeros.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::{Potential, C64};
use crate::spectrum::BoundaryForm;

/// `-y'' + q y` on `[0, length]` with `n` intervals, the boundary form at 0
/// and a Dirichlet condition at `length`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdProblem {
    pub length: f64,
    pub n: usize,
    pub bc: BoundaryForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdEigenvalues {
    /// Richardson extrapolation `(4 lambda_2n - lambda_n) / 3`.
    pub eigenvalues: Vec<C64>,
    /// `|lambda_2n - lambda_n| / 3`.
    pub errors: Vec<f64>,
    pub coarse: Vec<C64>,
    pub fine: Vec<C64>,
    /// `max |y|` on the last tenth of the interval relative to `max |y|`, per eigenvalue.
    pub tail_ratios: Vec<f64>,
}

const TAIL_RATIO: f64 = 4.539_992_976_248_485e-5; // e^{-10}
const QL_MAX_ITER: usize = 60;

/// Tridiagonal matrix with `sub[i] = A[i+1][i]` and `sup[i] = A[i][i+1]`.
#[derive(Debug, Clone)]
struct Tridiagonal {
    diag: Vec<C64>,
    sub: Vec<C64>,
    sup: Vec<C64>,
}

fn assemble(pot: &Potential, problem: &FdProblem) -> Result<(Tridiagonal, f64)> {
    let n = problem.n;
    if n < 100 {
        return Err(Error::InvalidArgument(format!("finite-difference grid needs n >= 100, got {n}")));
    }
    if !(problem.length > 0.0) {
        return Err(Error::InvalidArgument("truncation length must be positive".into()));
    }
    let h = problem.length / n as f64;
    let h2 = h * h;
    let m = n - 1;
    let mut diag: Vec<C64> = (1..=m).map(|i| pot.q(i as f64 * h) + 2.0 / h2).collect();
    let sub = vec![C64::new(-1.0 / h2, 0.0); m - 1];
    let mut sup = sub.clone();
    // one-sided y'(0) = (-3 y0 + 4 y1 - y2) / (2h) eliminates y0 = c1 y1 + c2 y2
    let a0 = problem.bc.alpha0;
    let a1 = problem.bc.alpha1;
    let d = a0 - a1 * (3.0 / (2.0 * h));
    if d.norm() == 0.0 {
        return Err(Error::Eigensolver("boundary stencil is singular for this grid".into()));
    }
    let c1 = -a1 * 4.0 / (2.0 * h * d);
    let c2 = a1 / (2.0 * h * d);
    diag[0] -= c1 / h2;
    sup[0] -= c2 / h2;
    Ok((Tridiagonal { diag, sub, sup }, h))
}

/// Eigenvalues of a complex symmetric tridiagonal matrix by implicit QL with
/// complex orthogonal rotations. `off[i]` couples `i` and `i + 1`.
fn complex_ql(mut d: Vec<C64>, off: &[C64]) -> Result<Vec<C64>> {
    let n = d.len();
    let mut e = vec![C64::new(0.0, 0.0); n];
    e[..n - 1].copy_from_slice(off);
    let eps = f64::EPSILON;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].norm() + d[m + 1].norm();
                if e[m].norm() <= eps * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > QL_MAX_ITER {
                return Err(Error::Eigensolver(format!("QL iteration did not converge for index {l}")));
            }
            let mut g = (d[l + 1] - d[l]) / (e[l] * 2.0);
            let mut r = (g * g + 1.0).sqrt();
            let denom = if (g + r).norm() >= (g - r).norm() { g + r } else { g - r };
            g = d[m] - d[l] + e[l] / denom;
            let (mut s, mut c, mut p) = (C64::new(1.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0));
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = (f * f + g * g).sqrt();
                e[i + 1] = r;
                if r.norm() == 0.0 {
                    d[i + 1] -= p;
                    e[m] = C64::new(0.0, 0.0);
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + c * b * 2.0;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = C64::new(0.0, 0.0);
        }
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigensolver("QL produced non-finite eigenvalues".into()));
    }
    Ok(d)
}

/// Solve a tridiagonal system with partial pivoting (the LAPACK `gtsv` scheme).
fn solve_tridiagonal(t: &Tridiagonal, shift: C64, rhs: &[C64]) -> Vec<C64> {
    let n = t.diag.len();
    let mut d: Vec<C64> = t.diag.iter().map(|v| v - shift).collect();
    let mut dl = t.sub.clone();
    let mut du = t.sup.clone();
    let mut du2 = vec![C64::new(0.0, 0.0); n.saturating_sub(2)];
    let mut b = rhs.to_vec();
    let tiny = f64::MIN_POSITIVE.sqrt();
    for i in 0..n - 1 {
        if d[i].norm() >= dl[i].norm() {
            if d[i].norm() == 0.0 {
                d[i] = C64::new(tiny, 0.0);
            }
            let fact = dl[i] / d[i];
            d[i + 1] -= fact * du[i];
            b[i + 1] = b[i + 1] - fact * b[i];
        } else {
            let fact = d[i] / dl[i];
            d[i] = dl[i];
            let temp = d[i + 1];
            d[i + 1] = du[i] - fact * temp;
            if i + 2 < n {
                du2[i] = du[i + 1];
                du[i + 1] = -fact * du2[i];
            }
            du[i] = temp;
            let tb = b[i];
            b[i] = b[i + 1];
            b[i + 1] = tb - fact * b[i + 1];
        }
        dl[i] = C64::new(0.0, 0.0);
    }
    if d[n - 1].norm() == 0.0 {
        d[n - 1] = C64::new(tiny, 0.0);
    }
    b[n - 1] /= d[n - 1];
    if n > 1 {
        b[n - 2] = (b[n - 2] - du[n - 2] * b[n - 1]) / d[n - 2];
    }
    for i in (0..n.saturating_sub(2)).rev() {
        b[i] = (b[i] - du[i] * b[i + 1] - du2[i] * b[i + 2]) / d[i];
    }
    b
}

fn smallest(mut values: Vec<C64>, count: usize) -> Vec<C64> {
    values.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    values.truncate(count);
    values
}

/// The `count` eigenvalues of smallest modulus on one grid.
fn eigenvalues_on_grid(pot: &Potential, problem: &FdProblem, count: usize) -> Result<(Vec<C64>, Tridiagonal)> {
    let (t, _) = assemble(pot, problem)?;
    // diagonal similarity makes the matrix complex symmetric
    let off: Vec<C64> = t.sub.iter().zip(&t.sup).map(|(a, b)| (a * b).sqrt()).collect();
    let all = complex_ql(t.diag.clone(), &off)?;
    Ok((smallest(all, count), t))
}

fn tail_ratio(t: &Tridiagonal, lambda: C64) -> f64 {
    let n = t.diag.len();
    let shift = lambda + C64::new(1e-10, 1e-10) * lambda.norm().max(1.0);
    let mut v = vec![C64::new(1.0, 0.0); n];
    for _ in 0..3 {
        v = solve_tridiagonal(t, shift, &v);
        let m = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if !(m > 0.0 && m.is_finite()) {
            return f64::INFINITY;
        }
        for z in v.iter_mut() {
            *z /= m;
        }
    }
    let start = n - n / 10;
    v[start..].iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Eigenvalues of the truncated finite-difference problem with the smallest
/// modulus, extrapolated from grids `n` and `2n`.
pub fn fd_eigenvalues(pot: &Potential, problem: &FdProblem, count: usize) -> Result<FdEigenvalues> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    let fine_problem = FdProblem { n: 2 * problem.n, ..*problem };
    let (coarse, fine_all) = rayon::join(
        || eigenvalues_on_grid(pot, problem, count),
        || eigenvalues_on_grid(pot, &fine_problem, count + 2),
    );
    let (coarse, _) = coarse?;
    let (fine_all, t_fine) = fine_all?;
    let mut fine = Vec::with_capacity(count);
    let mut eigenvalues = Vec::with_capacity(count);
    let mut errors = Vec::with_capacity(count);
    let mut tail_ratios = Vec::with_capacity(count);
    for c in &coarse {
        let f = *fine_all
            .iter()
            .min_by(|a, b| (*a - c).norm().total_cmp(&(*b - c).norm()))
            .expect("fine grid has eigenvalues");
        fine.push(f);
        eigenvalues.push((f * 4.0 - c) / 3.0);
        errors.push((f - c).norm() / 3.0);
        let ratio = tail_ratio(&t_fine, f);
        if ratio > TAIL_RATIO {
            return Err(Error::Eigensolver(format!(
                "eigenfunction for {f} has not decayed by e^-10 before L = {} (tail ratio {ratio:.3e})",
                problem.length
            )));
        }
        tail_ratios.push(ratio);
    }
    Ok(FdEigenvalues { eigenvalues, errors, coarse, fine, tail_ratios })
}

// Ai(0) and -Ai'(0)
const AI0: f64 = 0.355_028_053_887_817_2;
const AIP0: f64 = 0.258_819_403_792_806_8;
const SERIES_LIMIT: f64 = 6.0;

/// `(Ai, Ai', Ai'')` by the Maclaurin series; meant for `|z| <= 6`.
pub fn airy_series(z: C64) -> (C64, C64, C64) {
    // Ai = AI0 f - AIP0 g with f = sum a_k z^{3k}, g = sum b_k z^{3k+1}
    let mut val = C64::new(0.0, 0.0);
    let mut d1 = C64::new(0.0, 0.0);
    let mut d2 = C64::new(0.0, 0.0);
    let mut a = 1.0f64;
    let mut b = 1.0f64;
    let pw = |e: usize| if e == 0 { C64::new(1.0, 0.0) } else { z.powu(e as u32) };
    for k in 0..200usize {
        let m = 3 * k;
        if k > 0 {
            a /= ((3 * k - 1) * (3 * k)) as f64;
            b /= ((3 * k) * (3 * k + 1)) as f64;
        }
        let mf = m as f64;
        let zm = pw(m);
        // f terms carry z^m, g terms z^{m+1}
        let f_d1 = if m >= 1 { pw(m - 1) * (a * mf) } else { C64::new(0.0, 0.0) };
        let f_d2 = if m >= 2 { pw(m - 2) * (a * mf * (mf - 1.0)) } else { C64::new(0.0, 0.0) };
        let g_d2 = if m >= 1 { pw(m - 1) * (b * (mf + 1.0) * mf) } else { C64::new(0.0, 0.0) };
        let tv = zm * a * AI0 - zm * z * b * AIP0;
        let td = f_d1 * AI0 - zm * (b * (mf + 1.0)) * AIP0;
        val += tv;
        d1 += td;
        d2 += f_d2 * AI0 - g_d2 * AIP0;
        if k > 3 && tv.norm() <= 1e-18 * val.norm() && td.norm() <= 1e-18 * d1.norm() {
            break;
        }
        if z.norm() == 0.0 {
            break;
        }
    }
    (val, d1, d2)
}

/// `(Ai, Ai')` by the asymptotic expansions for real `|t| > 6`.
pub fn airy_asymptotic(t: f64) -> (f64, f64) {
    let x = t.abs();
    let zeta = 2.0 / 3.0 * x.powf(1.5);
    let sqrt_pi = std::f64::consts::PI.sqrt();
    // u_k and v_k coefficients, truncated at the smallest term
    let mut u = vec![1.0f64];
    let mut v = vec![1.0f64];
    for k in 1..40usize {
        let kf = k as f64;
        let uk = u[k - 1] * (6.0 * kf - 5.0) * (6.0 * kf - 3.0) * (6.0 * kf - 1.0) / ((2.0 * kf - 1.0) * 216.0 * kf);
        let vk = -(6.0 * kf + 1.0) / (6.0 * kf - 1.0) * uk;
        if uk / zeta.powi(k as i32) > u[k - 1] / zeta.powi(k as i32 - 1) {
            break;
        }
        u.push(uk);
        v.push(vk);
    }
    if t > 0.0 {
        let mut su = 0.0;
        let mut sv = 0.0;
        for k in 0..u.len() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            su += sign * u[k] / zeta.powi(k as i32);
            sv += sign * v[k] / zeta.powi(k as i32);
        }
        let e = (-zeta).exp();
        (e / (2.0 * sqrt_pi * x.powf(0.25)) * su, -x.powf(0.25) * e / (2.0 * sqrt_pi) * sv)
    } else {
        let (mut ue, mut uo, mut ve, mut vo) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..u.len() {
            let j = k / 2;
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let zk = zeta.powi(k as i32);
            if k % 2 == 0 {
                ue += sign * u[k] / zk;
                ve += sign * v[k] / zk;
            } else {
                uo += sign * u[k] / zk;
                vo += sign * v[k] / zk;
            }
        }
        let phase = zeta - std::f64::consts::FRAC_PI_4;
        let (s, c) = phase.sin_cos();
        let ai = (c * ue + s * uo) / (sqrt_pi * x.powf(0.25));
        let aip = x.powf(0.25) / sqrt_pi * (s * ve - c * vo);
        (ai, aip)
    }
}

/// `(Ai(t), Ai'(t))` for real `t`.
pub fn airy_ai(t: f64) -> (f64, f64) {
    if t.abs() <= SERIES_LIMIT {
        let (v, d, _) = airy_series(C64::new(t, 0.0));
        (v.re, d.re)
    } else {
        airy_asymptotic(t)
    }
}

/// The `n`-th negative zero of `Ai`, `1 <= n <= 20`, by bisection.
pub fn airy_zero(n: usize) -> Result<f64> {
    if !(1..=20).contains(&n) {
        return Err(Error::InvalidArgument(format!("airy_zero supports 1 <= n <= 20, got {n}")));
    }
    let s = 3.0 * std::f64::consts::PI * (4.0 * n as f64 - 1.0) / 8.0;
    let guess = -s.powf(2.0 / 3.0) * (1.0 + 5.0 / 48.0 / (s * s));
    let ai = |t: f64| airy_ai(t).0;
    let (mut lo, mut hi) = (guess - 0.2, guess + 0.2);
    if ai(lo).signum() == ai(hi).signum() {
        return Err(Error::Eigensolver(format!("no sign change bracketing the Airy zero {n}")));
    }
    let flo = ai(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if ai(mid).signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Dirichlet eigenvalues of `-y'' + i x y` on the half-line: `|a_n| e^{i pi/3}`.
pub fn complex_airy_eigenvalue(n: usize) -> Result<C64> {
    Ok(C64::from_polar(airy_zero(n)?.abs(), std::f64::consts::FRAC_PI_3))
}
