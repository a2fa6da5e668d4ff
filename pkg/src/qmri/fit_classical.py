"""Dictionary matching and Levenberg-Marquardt fitting of FLASH data.

Both solvers are vectorised over voxels. PD never appears on the dictionary
grid: the model is linear in PD, so each atom's optimal PD is a projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flash
from .core import PD_MIN, ContrastStack, DomainError, PropertyMap, Protocol, TissueProperties, require_valid

DEFAULT_MAX_DICT_ENTRIES = 50_000_000


class ProtocolMismatchError(DomainError):
    pass


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Unit-PD signal shapes on a (T1, T2*) grid; atom ``i`` has shape ``shapes[i]``."""

    protocol: Protocol
    t1_ms: np.ndarray
    t2s_ms: np.ndarray
    shapes: np.ndarray

    def __len__(self) -> int:
        return int(self.shapes.shape[0])


@dataclass(frozen=True, eq=False)
class FitResult:
    properties: PropertyMap
    residual_norm: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    degenerate: np.ndarray | None = None


def default_t1_grid(n: int = 128) -> np.ndarray:
    return np.geomspace(200.0, 3000.0, n)


def default_t2s_grid(n: int = 128) -> np.ndarray:
    return np.geomspace(5.0, 200.0, n)


def build_dictionary(
    protocol: Protocol,
    t1_grid: np.ndarray,
    t2s_grid: np.ndarray,
    max_entries: int = DEFAULT_MAX_DICT_ENTRIES,
) -> Dictionary:
    t1_grid = np.asarray(t1_grid, dtype=np.float64).ravel()
    t2s_grid = np.asarray(t2s_grid, dtype=np.float64).ravel()
    require_valid(protocol)
    for name, g in (("t1_grid", t1_grid), ("t2s_grid", t2s_grid)):
        if g.size == 0 or not (g > 0).all() or not np.all(np.isfinite(g)):
            raise DomainError(f"{name} must be non-empty and positive")
        if (np.diff(g) <= 0).any():
            raise DomainError(f"{name} must be strictly ascending")
    n_atoms = t1_grid.size * t2s_grid.size
    if n_atoms * len(protocol) > max_entries:
        raise MemoryError(f"dictionary of {n_atoms} atoms x {len(protocol)} contrasts exceeds cap {max_entries}")
    t1, t2s = (a.ravel() for a in np.meshgrid(t1_grid, t2s_grid, indexing="ij"))
    phi = protocol.as_array()
    shapes = flash.signal(t1[:, None], t2s[:, None], 1.0, phi[None, :, 0], phi[None, :, 1], phi[None, :, 2])
    return Dictionary(protocol, t1, t2s, shapes)


def _same_protocol(a: Protocol, b: Protocol) -> bool:
    return len(a) == len(b) and np.array_equal(a.as_array(), b.as_array())


def dictionary_fit(stack: ContrastStack, atoms: Dictionary, chunk: int = 4096) -> FitResult:
    """Best atom per voxel by least squares with a projected, clamped PD.

    Ties go to the lowest atom index. All-zero voxels are flagged degenerate.
    """
    if not _same_protocol(stack.protocol, atoms.protocol):
        raise ProtocolMismatchError("stack protocol differs from the dictionary protocol")
    s = stack.voxels()
    n = s.shape[0]
    a = atoms.shapes
    a_norm2 = np.einsum("ij,ij->i", a, a)
    best = np.empty(n, dtype=np.int64)
    best_pd = np.empty(n)
    for start in range(0, n, chunk):
        sb = s[start:start + chunk]
        dots = sb @ a.T
        pd = np.clip(dots / a_norm2, PD_MIN, 1.0)
        # ||s||^2 is constant per voxel and dropped from the comparison
        cost = pd * (pd * a_norm2 - 2.0 * dots)
        idx = np.argmin(cost, axis=1)
        best[start:start + chunk] = idx
        best_pd[start:start + chunk] = pd[np.arange(idx.size), idx]
    resid = s - best_pd[:, None] * a[best]
    residual = np.sqrt(np.einsum("ij,ij->i", resid, resid))
    degenerate = ~np.any(s != 0, axis=1)
    props = PropertyMap.from_flat(
        np.stack([atoms.t1_ms[best], atoms.t2s_ms[best], best_pd], axis=1), stack.height, stack.width)
    shape = (stack.height, stack.width)
    return FitResult(props, residual.reshape(shape), best.reshape(shape),
                     (~degenerate).reshape(shape), degenerate.reshape(shape))


# --------------------------------------------------------------------------
# Levenberg-Marquardt


# box on the unconstrained coordinates: T1 in [1, 1e5] ms, T2* in [0.1, 1e4] ms,
# logit PD in [-40, 40]; keeps exp() finite when a voxel carries no signal
Q_LOW = np.array([0.0, np.log(0.1), -40.0])
Q_HIGH = np.array([np.log(1e5), np.log(1e4), 40.0])


def _to_natural(q: np.ndarray) -> np.ndarray:
    """(log T1, log T2*, logit PD) -> (T1, T2*, PD)."""
    out = np.empty_like(q)
    out[:, 0] = np.exp(q[:, 0])
    out[:, 1] = np.exp(q[:, 1])
    out[:, 2] = 1.0 / (1.0 + np.exp(-q[:, 2]))
    return out


def _to_unconstrained(p: np.ndarray) -> np.ndarray:
    pd = np.clip(p[:, 2], 1e-12, 1.0 - 1e-12)
    return np.stack([np.log(p[:, 0]), np.log(p[:, 1]), np.log(pd) - np.log1p(-pd)], axis=1)


def residuals_and_jacobian(q: np.ndarray, y: np.ndarray, phi: np.ndarray):
    """Residuals (N, K), Jacobian (N, K, 3) in unconstrained coordinates."""
    p = _to_natural(q)
    t1, t2s, pd = p[:, 0:1], p[:, 1:2], p[:, 2:3]
    tr, te, fa = phi[None, :, 0], phi[None, :, 1], phi[None, :, 2]
    d1, d2, dp = flash.jacobian(t1, t2s, pd, tr, te, fa)
    r = pd * dp - y
    jac = np.stack([d1 * t1, d2 * t2s, dp * (pd * (1.0 - pd))], axis=2)
    return r, jac


def _cost(q: np.ndarray, y: np.ndarray, phi: np.ndarray) -> np.ndarray:
    p = _to_natural(q)
    r = flash.signal(p[:, 0:1], p[:, 1:2], p[:, 2:3], phi[None, :, 0], phi[None, :, 1], phi[None, :, 2]) - y
    return np.einsum("ij,ij->i", r, r)


@dataclass
class LMTrace:
    """Accepted cost per iteration for each voxel; used to audit monotonicity."""

    costs: list[np.ndarray]


def nlls_fit(
    stack: ContrastStack,
    init: TissueProperties | PropertyMap | None = None,
    max_iter: int = 200,
    tol: float = 1e-12,
    atol: float = 1e-30,
    trace: LMTrace | None = None,
) -> FitResult:
    """Per-voxel Levenberg-Marquardt on ``sum_k (f(p, phi_k) - y_k)^2``.

    Iterates live in (log T1, log T2*, logit PD), projected onto a wide box
    (``Q_LOW``..``Q_HIGH``) so voxels without signal stay finite.

    Damping starts at 1e-3, grows x10 on a rejected step and shrinks /10 on
    an accepted one; rejected steps never change the iterate. A voxel stops
    when an accepted step lowers the cost by less than ``tol`` relative, when
    the cost drops below ``atol``, or when damping saturates.
    """
    y = stack.voxels()
    n, k = y.shape
    phi = stack.protocol.as_array()
    if init is None:
        init = TissueProperties(1000.0, 50.0, 0.5)
    if isinstance(init, TissueProperties):
        require_valid(init)
        p0 = np.tile([init.t1_ms, init.t2s_ms, init.pd], (n, 1))
    else:
        if init.shape != (stack.height, stack.width):
            raise DomainError("init map shape differs from stack shape")
        p0 = init.flat()
    q = np.clip(_to_unconstrained(p0), Q_LOW, Q_HIGH)
    cost = _cost(q, y, phi)
    lam = np.full(n, 1e-3)
    iters = np.zeros(n, dtype=np.int64)
    done = cost <= atol
    converged = done.copy()
    if trace is not None:
        trace.costs.append(cost.copy())

    for _ in range(max_iter):
        act = np.nonzero(~done)[0]
        if act.size == 0:
            break
        r, jac = residuals_and_jacobian(q[act], y[act], phi)
        jtj = np.einsum("nki,nkj->nij", jac, jac)
        grad = np.einsum("nki,nk->ni", jac, r)
        diag = np.diagonal(jtj, axis1=1, axis2=2)
        floor = 1e-12 * np.max(diag, axis=1, keepdims=True) + 1e-300
        damp = lam[act, None] * (diag + floor)
        a = jtj + damp[:, :, None] * np.eye(3)[None]
        bad = ~np.all(np.isfinite(a.reshape(act.size, -1)), axis=1) | ~np.all(np.isfinite(grad), axis=1)
        a[bad] = np.eye(3)
        # a Jacobian column that is exactly zero (no signal) also has zero gradient
        idx = np.arange(3)
        dead = a[:, idx, idx] <= 0.0
        a[:, idx, idx] = np.where(dead, 1.0, a[:, idx, idx])
        grad[bad] = 0.0
        try:
            step = -np.linalg.solve(a, grad[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            # rank-deficient normal equations (e.g. flat voxels): minimum-norm step
            step = -(np.linalg.pinv(a) @ grad[:, :, None])[:, :, 0]
        q_new = np.clip(q[act] + step, Q_LOW, Q_HIGH)
        with np.errstate(over="ignore", invalid="ignore"):
            new_cost = _cost(q_new, y[act], phi)
        ok = np.isfinite(new_cost) & (new_cost <= cost[act])
        iters[act] += 1

        acc = act[ok]
        rel = (cost[acc] - new_cost[ok]) / np.maximum(cost[acc], 1e-300)
        q[acc] = q_new[ok]
        cost[acc] = new_cost[ok]
        lam[acc] = np.maximum(lam[acc] / 10.0, 1e-12)
        rej = act[~ok]
        lam[rej] *= 10.0

        stop = (rel < tol) | (cost[acc] <= atol)
        done[acc[stop]] = True
        converged[acc[stop]] = True
        saturated = rej[lam[rej] > 1e16]
        done[saturated] = True
        converged[saturated] = True
        if trace is not None:
            trace.costs.append(cost.copy())

    props = PropertyMap.from_flat(_to_natural(q), stack.height, stack.width)
    shape = (stack.height, stack.width)
    return FitResult(props, np.sqrt(cost).reshape(shape), iters.reshape(shape), converged.reshape(shape))


def cost_gradient(q: np.ndarray, y: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Gradient of ``sum r^2`` in unconstrained coordinates, 2 J^T r."""
    r, jac = residuals_and_jacobian(q, y, phi)
    return 2.0 * np.einsum("nki,nk->ni", jac, r)
