"""Smoke test for the halfline_weyl extension module.

Build and install first:  pip install --no-build-isolation -e crates/python
"""

import cmath
import math
import sys

import halfline_weyl as hw


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    checks = []

    # q = 1: eta = e^{-x}, mu = -p(0) = -1 at lambda = 0
    one = hw.Potential.constant(1.0)
    wr = hw.weyl_theta(one, 0j, 0.0)
    checks.append(("constant mu", wr.converged and close(wr.mu, -1.0, 1e-9)))

    rep = hw.check_condition_a(one, 2.0 + 0j, 0.0, 10.0, 0.5)
    checks.append(("condition A fails on the cut", not rep.holds))

    # harmonic oscillator, Dirichlet: 3, 7, 11
    eigs = hw.find_eigenvalues(hw.Potential.harmonic(), hw.BoundaryForm.dirichlet(), (0.0, 12.0), (-1.0, 1.0))
    got = [e.lambda_ for e in eigs]
    checks.append(("oscillator eigenvalues", len(got) == 3 and all(close(z, w, 1e-6) for z, w in zip(got, [3, 7, 11]))))

    # i x with Dirichlet: -a_n e^{i pi/3}
    airy = hw.Potential.complex_airy()
    lam1 = hw.complex_airy_eigenvalue(1)
    checks.append(("airy closed form", close(lam1, -hw.airy_zero(1) * cmath.exp(1j * math.pi / 3), 1e-12)))
    eigs = hw.find_eigenvalues(airy, hw.BoundaryForm.dirichlet(), (0.5, 2.0), (1.0, 3.0))
    checks.append(("airy eigenvalue", len(eigs) == 1 and close(eigs[0].lambda_, lam1, 1e-7)))

    fd, err = hw.fd_eigenvalues(hw.Potential.harmonic(), hw.BoundaryForm.neumann(), 10.0, 2000, 2)
    checks.append(("finite differences", close(fd[0], 1.0, 1e-4) and close(fd[1], 5.0, 1e-4)))

    # (-d^2 + 1) y = e^{-x}, y(0) = 0  =>  y = x e^{-x} / 2
    out = hw.apply_resolvent(one, hw.BoundaryForm.dirichlet(), 0j, lambda x: math.exp(-x), anchor=0.0)
    worst = max(abs(y - 0.5 * x * math.exp(-x)) for x, y in zip(out.x, out.y))
    checks.append(("resolvent closed form", worst < 1e-8))

    bounds = hw.weighted_bound_report(one, hw.BoundaryForm.dirichlet(), 0j, lambda x: math.exp(-x))
    checks.append(("weighted bounds", bounds.plain_bound and bounds.energy_bound and bounds.weighted_bound))

    try:
        hw.weighted_bound_report(hw.Potential.constant(-1.0), hw.BoundaryForm.dirichlet(), 0j, lambda x: 1.0)
        checks.append(("precondition error", False))
    except hw.PreconditionError:
        checks.append(("precondition error", True))

    try:
        hw.apply_resolvent(one, hw.BoundaryForm.dirichlet(), 0j, lambda x: 1 / 0, anchor=0.0)
        checks.append(("callback error propagates", False))
    except ZeroDivisionError:
        checks.append(("callback error propagates", True))

    failed = 0
    for name, ok in checks:
        print(f"{'ok  ' if ok else 'FAIL'} {name}")
        failed += not ok
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
