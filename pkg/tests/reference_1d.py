"""Stand-alone 1-D Richards column solver used as a cross-check oracle.

Written independently of the package: plain per-node loops, its own van
Genuchten evaluations and a dense Newton iteration with a numerically
differenced Jacobian.  The column runs from z=0 (bottom) to z=depth (surface)
with the same two-point flux scheme contract: arithmetic interface
conductivity, unit gravity gradient in the vertical flux, free drainage or a
sealed wall at the bottom, and a prescribed outward flux density at the top.
"""

import numpy as np


def vg_theta(h, p):
    if h >= 0:
        return p["theta_s"]
    u = (-p["alpha"] * h) ** p["n"]
    return p["theta_r"] + (p["theta_s"] - p["theta_r"]) * (1.0 + u) ** (-(1.0 - 1.0 / p["n"]))


def vg_k(h, p):
    if h >= 0:
        return p["k_s"]
    n = p["n"]
    m = 1.0 - 1.0 / n
    u = (-p["alpha"] * h) ** n
    se = (1.0 + u) ** (-m)
    return p["k_s"] * np.sqrt(se) * (1.0 - (1.0 - se ** (1.0 / m)) ** m) ** 2


def vg_storage(h, p):
    if h >= 0:
        return p["theta_s"] + p["s_r"] * h
    return vg_theta(h, p)


def vg_c(h, p):
    if h >= 0:
        return p["s_r"]
    n, al = p["n"], p["alpha"]
    m = 1.0 - 1.0 / n
    u = (-al * h) ** n
    return (p["theta_s"] - p["theta_r"]) * al * n * m * (-al * h) ** (n - 1) * (1.0 + u) ** (-(2.0 - 1.0 / n))


def _net_outflux(h, p, z_nodes, dz_layers, q_top_out, free_drainage):
    """Outward flux-density balance per cell (m/s, positive = losing water)."""
    n_z = len(h)
    k = np.array([vg_k(hh, p) for hh in h])
    out = np.zeros(n_z)
    for kk in range(n_z - 1):
        k_face = 0.5 * (k[kk] + k[kk + 1])
        dz = z_nodes[kk + 1] - z_nodes[kk]
        flux_up = k_face * ((h[kk] + z_nodes[kk]) - (h[kk + 1] + z_nodes[kk + 1])) / dz
        out[kk] += flux_up
        out[kk + 1] -= flux_up
    if free_drainage:
        out[0] += k[0]
    out[n_z - 1] += q_top_out
    return out


def column_rhs(h, p, z_nodes, dz_layers, q_top_out=0.0, free_drainage=True):
    """Instantaneous dh/dt of the column (m/s)."""
    out = _net_outflux(h, p, z_nodes, dz_layers, q_top_out, free_drainage)
    c = np.array([vg_c(hh, p) for hh in h])
    return -out / dz_layers / c


def column_step(h0, p, z_nodes, dz_layers, dt, q_top_out=0.0, free_drainage=True, tol=1e-11, max_iter=80):
    """One backward-Euler step solved by dense Newton on the storage residual."""
    h0 = np.asarray(h0, dtype=float)
    n_z = len(h0)
    w0 = np.array([vg_storage(hh, p) for hh in h0])

    def residual(h):
        out = _net_outflux(h, p, z_nodes, dz_layers, q_top_out, free_drainage)
        w = np.array([vg_storage(hh, p) for hh in h])
        return w - w0 + dt * out / dz_layers

    h = h0.copy()
    for _ in range(max_iter):
        res = residual(h)
        jac = np.zeros((n_z, n_z))
        for j in range(n_z):
            step = 1e-7 * max(abs(h[j]), 1e-3)
            hp = h.copy()
            hp[j] += step
            hm = h.copy()
            hm[j] -= step
            jac[:, j] = (residual(hp) - residual(hm)) / (2.0 * step)
        delta = np.linalg.solve(jac, -res)
        h = h + delta
        if np.max(np.abs(delta)) < tol:
            return h
    raise RuntimeError("reference Newton failed to converge")


def simulate_column(h0, p, z_nodes, dz_layers, dt, n_steps, q_top_out=0.0, free_drainage=True):
    """March the reference column forward, returning the head history."""
    hist = [np.asarray(h0, dtype=float)]
    for _ in range(n_steps):
        hist.append(column_step(hist[-1], p, z_nodes, dz_layers, dt, q_top_out, free_drainage))
    return np.array(hist)
