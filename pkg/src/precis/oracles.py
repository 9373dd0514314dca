"""Reference solvers used as ground truth for the PDE benchmarks.

Nothing here touches the tensor engine; everything runs in binary64.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.linalg import solve_banded
from scipy.special import logsumexp


def diffusion_reaction_cn(
    source: np.ndarray,
    D: float = 0.01,
    k: float = 0.01,
    nx: int = 101,
    nt: int = 101,
    T: float = 1.0,
    tol: float = 1e-13,
    max_newton: int = 20,
) -> np.ndarray:
    """Crank-Nicolson solution of u_t = D u_xx - k u^2 + v(x) on [0, 1].

    ``source`` holds v at the ``nx`` grid points ``linspace(0, 1, nx)``.
    Zero initial state and zero Dirichlet boundaries. Each step solves the
    implicit nonlinear system by Newton iteration with a tridiagonal Jacobian.
    Returns ``u`` with shape ``(nt, nx)``; row ``n`` is time ``n*T/(nt-1)``.
    """
    v = np.asarray(source, dtype=np.float64)
    if v.shape != (nx,):
        raise ValueError(f"source must have {nx} grid values, got shape {v.shape}")
    dx = 1.0 / (nx - 1)
    dt = T / (nt - 1)
    m = nx - 2
    r = D * dt / dx**2
    vi = v[1:-1]

    def lap(w):
        out = -2.0 * w
        out[1:] += w[:-1]
        out[:-1] += w[1:]
        return out

    u = np.zeros((nt, nx))
    cur = np.zeros(m)
    for n in range(1, nt):
        rhs = cur + 0.5 * r * lap(cur) - 0.5 * dt * k * cur**2 + dt * vi
        w = cur.copy()
        for _ in range(max_newton):
            F = w - 0.5 * r * lap(w) + 0.5 * dt * k * w**2 - rhs
            ab = np.zeros((3, m))
            ab[0, 1:] = -0.5 * r
            ab[1, :] = 1.0 + r + dt * k * w
            ab[2, :-1] = -0.5 * r
            dw = solve_banded((1, 1), ab, F)
            w -= dw
            if np.max(np.abs(dw)) <= tol * max(1.0, np.max(np.abs(w))):
                break
        cur = w
        u[n, 1:-1] = cur
    return u


def burgers_cole_hopf(x, t, nu: float, n_quad: int = 4000) -> np.ndarray:
    """Exact viscous Burgers solution for u(x,0) = -sin(pi x), u(+-1,t) = 0.

    Uses the Cole-Hopf representation
    u = -int sin(pi(x-s)) f(x-s) G(s) ds / int f(x-s) G(s) ds with
    f(y) = exp(-cos(pi y) / (2 pi nu)) and G the heat kernel, evaluated on a
    uniform grid in s with log-sum-exp weights.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    x, t = np.broadcast_arrays(x, t)
    out = np.empty(x.shape)
    flat_x, flat_t, flat_o = x.reshape(-1), t.reshape(-1), out.reshape(-1)
    for i, (xi, ti) in enumerate(zip(flat_x, flat_t)):
        if ti <= 0.0:
            flat_o[i] = -np.sin(np.pi * xi)
            continue
        sd = np.sqrt(2.0 * nu * ti)
        s = np.linspace(-12.0 * sd, 12.0 * sd, n_quad)
        y = xi - s
        logw = -np.cos(np.pi * y) / (2.0 * np.pi * nu) - s**2 / (4.0 * nu * ti)
        num_sign = -np.sin(np.pi * y)
        lw = logsumexp(logw)
        num = np.sum(num_sign * np.exp(logw - lw))
        flat_o[i] = num
    return out


def burgers_mol(nu: float, nx: int = 2001, t_eval=None, rtol: float = 1e-8, atol: float = 1e-10):
    """Method-of-lines Burgers solver on [-1, 1] (conservative central differences).

    Returns ``(x, t, u)`` with ``u`` shaped ``(len(t), nx)``.
    """
    x = np.linspace(-1.0, 1.0, nx)
    dx = x[1] - x[0]
    t_eval = np.linspace(0.0, 1.0, 101) if t_eval is None else np.asarray(t_eval)
    u0 = -np.sin(np.pi * x[1:-1])

    def rhs(_t, w):
        full = np.concatenate([[0.0], w, [0.0]])
        flux = 0.5 * full**2
        conv = (flux[2:] - flux[:-2]) / (2 * dx)
        diff = nu * (full[2:] - 2 * full[1:-1] + full[:-2]) / dx**2
        return diff - conv

    n = nx - 2
    sparsity = sparse.diags([np.ones(n - 1), np.ones(n), np.ones(n - 1)], [-1, 0, 1])
    sol = solve_ivp(
        rhs, (t_eval[0], t_eval[-1]), u0, method="BDF", t_eval=t_eval, rtol=rtol, atol=atol, jac_sparsity=sparsity
    )
    if not sol.success:
        raise RuntimeError(sol.message)
    u = np.zeros((len(t_eval), nx))
    u[:, 1:-1] = sol.y.T
    return x, sol.t, u
