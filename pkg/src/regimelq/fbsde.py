"""Forward-backward verification of the Riccati fixed point.

For a frozen regime i, the matrix-valued forward-backward system

    dX = [A X + B u] dt + [C X + D u] dW,                X(0) = I,
    dY = -[A'Y + C'Z + (Qtilde + coupling(t)) X + Stilde' u] dt + Z dW,
    Y(T) = Gtilde X(T),
    u  = -Rtilde^{-1} (B'Y + D'Z + Stilde X),

with ``coupling(t) = sum_{j != i} q_ij exp((q_ii - q_jj) t)
Ptilde_prev(t, j)``, is solved by the product ansatz

    Y = Ptilde X,        Z = Lamtilde X + Ptilde C X + Ptilde D u,

where (Ptilde, Lamtilde) is the Riccati iterate fed by the same frozen
coupling.  The routines here measure how well computed solutions honor
that identity:

:func:`ypx_residual`
    sets Y := Ptilde X along the closed-loop forward dynamics and reports
    the one-step defect of the backward equation (per unit time), for a
    ladder of step sizes;
:func:`tree_fbsde_oracle`
    solves the coupled system itself on a *non-recombining* binary tree by
    alternating forward/backward sweeps, then compares ``Y X^{-1}``
    against the Riccati iterate computed independently on the matching
    recombining lattice;
:func:`xinv_product_check`
    integrates the closed-loop state and its inverse by their respective
    discrete schemes along shared noise and reports how far the product
    drifts from the identity.  Writing ``Acl = A + B K`` and
    ``Ccl = C + D K`` for the closed-loop matrices, the inverse satisfies

        d(X^{-1}) = -X^{-1} [Acl - Ccl^2] dt - X^{-1} Ccl dW.

All measurements are deterministic given (spec, seed, step size).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control import FeedbackGain, feedback_gain
from .errors import NoConvergence, SingularState, StructuralError
from .esre import EsreSolution, SolverOptions, TreeIterate, picard_step
from .model import ProblemSpec, tilde_transform
from .regime_chain import path_substream

DET_GUARD = 1e-12


@dataclass(frozen=True)
class ResidualStats:
    """Residual magnitudes per unit time: ``rms <= max`` by construction."""

    rms: float
    max: float
    dt: float
    sample_count: int


@dataclass
class FbsdeTriple:
    """Solution of the coupled system on a binary tree, one regime.

    ``x[k]``, ``y[k]``, ``z[k]`` have shape (2^k, n, n) and ``u[k]`` shape
    (2^k, m, n); path index p at level k encodes the up/down history in
    its bits (child p -> 2p down, 2p+1 up).  ``X(0) = I`` and
    ``Y(T) = Gtilde X(T)`` hold by construction.
    """

    regime: int
    depth: int
    dt: float
    x: tuple
    y: tuple
    z: tuple
    u: tuple


def _solution_samples(solution: EsreSolution, dt: float):
    """Indices of the solution grid matching a coarser step dt."""
    grid = solution.grid
    dt_sol = grid[1] - grid[0]
    ratio = dt / dt_sol
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise StructuralError(
            f"dt={dt} is not a multiple of the solution grid step {dt_sol}"
        )
    return np.arange(0, len(grid), stride)


def ypx_residual(solution: EsreSolution, spec: ProblemSpec, regime: int,
                 dt_list) -> list:
    """One-step backward-equation defect of Y := Ptilde X, per dt.

    The forward state follows the closed-loop Euler recursion; at every
    grid time Y is *re-anchored* to ``Ptilde X`` and the defect

        Y(t+dt) - Y(t) + f(t, X, Y, Z) dt

    is recorded (deterministic coefficients, so no martingale term).  The
    stats are normalized by dt, making the values step-size densities: a
    consistent scheme shows them shrinking linearly in dt.
    """
    if solution.backend == "tree":
        raise StructuralError("ypx_residual expects a grid-backend solution")
    if not 1 <= regime <= spec.ell:
        raise StructuralError(f"regime {regime} outside 1..{spec.ell}")
    gains = feedback_gain(solution, spec)
    tilde = tilde_transform(spec)
    i = regime
    out = []
    for dt in dt_list:
        idx = _solution_samples(solution, dt)
        times = solution.grid[idx]
        pt = solution.Ptilde[idx, i - 1]                 # (K, n, n)
        ktab = gains.gains[idx, i - 1]                   # (K, m, n)
        w = tilde.coupling_weights(times)                # (K, ell, ell)
        src = np.einsum("kj,kjab->kab", w[:, i - 1, :], solution.Ptilde[idx])
        n_steps = len(idx) - 1
        res = np.empty(n_steps)
        x = np.eye(spec.n)
        for k in range(n_steps):
            t = times[k]
            a = spec.A.eval(t, i)
            b = spec.B.eval(t, i)
            c = spec.C.eval(t, i)
            d = spec.D.eval(t, i)
            kk = ktab[k]
            u = kk @ x
            y = pt[k] @ x
            z = pt[k] @ (c @ x) + pt[k] @ (d @ u)
            f = (
                a.T @ y + c.T @ z
                + (tilde.q_tilde(t, i) + src[k]) @ x
                + tilde.s_tilde(t, i).T @ u
            )
            x_next = x + dt * (a @ x + b @ u)
            y_next = pt[k + 1] @ x_next
            res[k] = np.linalg.norm(y_next - y + dt * f)
            x = x_next
        res /= dt
        out.append(ResidualStats(
            rms=float(np.sqrt(np.mean(res**2))), max=float(res.max()),
            dt=float(dt), sample_count=n_steps,
        ))
    return out


# ---------------------------------------------------------------------------
# coupled oracle on the full binary tree
# ---------------------------------------------------------------------------


def _upcounts(level: int) -> np.ndarray:
    return np.array([bin(p).count("1") for p in range(2**level)], dtype=np.intp)


def tree_fbsde_oracle(spec: ProblemSpec, regime: int, prev: TreeIterate,
                      options: SolverOptions = None, fp_tol: float = 1e-10,
                      max_sweeps: int = 200):
    """Solve the coupled forward-backward system for one regime and compare
    against the Riccati sweep fed by the same frozen coupling.

    Returns ``(triple, deviation)`` where ``deviation`` is the largest
    Frobenius distance over tree nodes between ``Y X^{-1}`` and the
    matching Riccati iterate.  Restricted to D identically zero (the
    forward diffusion then carries no Z feedback) and small trees.

    Raises
    ------
    NoConvergence
        If alternating forward/backward sweeps fail to settle to
        ``fp_tol``.
    SingularState
        If a forward state matrix loses invertibility (determinant below
        1e-12).
    """
    options = options or SolverOptions(backend="tree", tree_depth=prev.tree.depth)
    if not spec.D.is_zero():
        raise StructuralError("the forward-backward oracle requires D identically zero")
    if spec.n > 2:
        raise StructuralError("oracle restricted to state dimension n <= 2")
    depth = prev.tree.depth
    if depth > 12:
        raise StructuralError("oracle restricted to tree depth <= 12")
    if not 1 <= regime <= spec.ell:
        raise StructuralError(f"regime {regime} outside 1..{spec.ell}")

    nxt = picard_step(spec, prev, options)              # Riccati sweep to compare with

    tilde = tilde_transform(spec)
    i = regime
    tree = prev.tree
    dt, sq = tree.dt, tree.sqrt_dt
    n, m = spec.n, spec.m
    times = tree.times
    ups = [_upcounts(k) for k in range(depth + 1)]

    # per-level coefficients for the frozen regime (deterministic: D == 0)
    A = [spec.A.eval(times[k], i) for k in range(depth)]
    B = [spec.B.eval(times[k], i) for k in range(depth)]
    C = [spec.C.eval(times[k], i) for k in range(depth)]
    Qt = [tilde.q_tilde(times[k], i) for k in range(depth)]
    St = [tilde.s_tilde(times[k], i) for k in range(depth)]
    Rt_inv = [np.linalg.inv(tilde.r_tilde(times[k], i)) for k in range(depth)]
    Gt = tilde.g_tilde(i)
    w = tilde.coupling_weights(times)                   # (K+1, ell, ell)
    # frozen coupling mapped from the recombining lattice to path nodes
    src = [
        np.einsum("j,njab->nab", w[k, i - 1, :], prev.levels[k])[ups[k]]
        for k in range(depth)
    ]

    x = [np.broadcast_to(np.eye(n), (2**k, n, n)).copy() for k in range(depth + 1)]
    y = [np.zeros((2**k, n, n)) for k in range(depth + 1)]
    z = [np.zeros((2**k, n, n)) for k in range(depth)]
    u = [np.zeros((2**k, m, n)) for k in range(depth)]

    last_diff = np.inf
    damping = False
    for _ in range(max_sweeps):
        # forward sweep given (y, z)
        x_new = [x[0]]
        for k in range(depth):
            uk = -Rt_inv[k] @ (B[k].T @ y[k] + St[k] @ x_new[k])
            b_drift = A[k] @ x_new[k] + B[k] @ uk
            sig = C[k] @ x_new[k]
            base = x_new[k] + dt * b_drift
            child = np.empty((2 ** (k + 1), n, n))
            child[0::2] = base - sq * sig
            child[1::2] = base + sq * sig
            x_new.append(child)
        if damping:
            x_new = [0.5 * (a + b) for a, b in zip(x_new, x)]
        # backward sweep given x
        y_new = [None] * (depth + 1)
        z_new = [None] * depth
        u_new = [None] * depth
        y_new[depth] = Gt @ x_new[depth]
        for k in range(depth - 1, -1, -1):
            up_c = y_new[k + 1][1::2]
            dn_c = y_new[k + 1][0::2]
            ybar = 0.5 * (up_c + dn_c)
            zk = (up_c - dn_c) / (2.0 * sq)
            uk = -Rt_inv[k] @ (B[k].T @ ybar + St[k] @ x_new[k])
            f = (A[k].T @ ybar + C[k].T @ zk
                 + (Qt[k] + src[k]) @ x_new[k] + St[k].T @ uk)
            y_new[k] = ybar + dt * f
            z_new[k] = zk
            u_new[k] = uk
        diff = 0.0
        for k in range(depth + 1):
            diff = max(diff, float(np.max(np.abs(x_new[k] - x[k]))))
            diff = max(diff, float(np.max(np.abs(y_new[k] - y[k]))))
        x, y, z, u = x_new, y_new, z_new, u_new
        if diff <= fp_tol:
            break
        if diff > last_diff:
            damping = True
        last_diff = diff
    else:
        raise NoConvergence(
            f"forward-backward sweeps stalled at diff={diff:.3e}",
        )

    dev = 0.0
    for k in range(depth + 1):
        dets = np.linalg.det(x[k])
        if np.any(np.abs(dets) < DET_GUARD):
            raise SingularState(f"forward state not invertible at level {k}")
        ratio = y[k] @ np.linalg.inv(x[k])
        target = nxt.levels[k][ups[k], i - 1]
        dev = max(dev, float(np.max(np.linalg.norm(ratio - target, axis=(-2, -1)))))
    triple = FbsdeTriple(
        regime=i, depth=depth, dt=dt,
        x=tuple(x), y=tuple(y), z=tuple(z), u=tuple(u),
    )
    return triple, dev


# ---------------------------------------------------------------------------
# inverse-state product check
# ---------------------------------------------------------------------------


def xinv_product_check(spec: ProblemSpec, regime: int, gains: FeedbackGain,
                       dt: float, seed: int = 0) -> ResidualStats:
    """Euler-integrate the closed-loop state and its inverse side by side
    and report the deviation of ``X^{-1} X`` from the identity.

    With zero closed-loop diffusion this is a pure ODE check and the seed
    is irrelevant; otherwise both recursions share the same Brownian
    increments drawn from ``path_substream(seed, 0)``.
    """
    if not 1 <= regime <= spec.ell:
        raise StructuralError(f"regime {regime} outside 1..{spec.ell}")
    n_steps = int(round(spec.T / dt))
    if n_steps < 1 or abs(n_steps * dt - spec.T) > 1e-12 * max(1.0, spec.T):
        raise StructuralError(f"dt={dt} does not divide the horizon T={spec.T}")
    i = regime
    n = spec.n
    times = dt * np.arange(n_steps + 1)
    acl = np.empty((n_steps, n, n))
    ccl = np.empty((n_steps, n, n))
    for k in range(n_steps):
        t = times[k]
        kk = gains.at(t, i)
        acl[k] = spec.A.eval(t, i) + spec.B.eval(t, i) @ kk
        ccl[k] = spec.C.eval(t, i) + spec.D.eval(t, i) @ kk
    noisy = bool(np.any(ccl))
    dw = np.zeros(n_steps)
    if noisy:
        dw = np.sqrt(dt) * path_substream(seed, 0).standard_normal(n_steps)

    x = np.eye(n)
    xinv = np.eye(n)
    devs = np.empty(n_steps + 1)
    devs[0] = 0.0
    for k in range(n_steps):
        a, c = acl[k], ccl[k]
        x = x + (a @ x) * dt + (c @ x) * dw[k]
        xinv = xinv - (xinv @ (a - c @ c)) * dt - (xinv @ c) * dw[k]
        devs[k + 1] = np.linalg.norm(xinv @ x - np.eye(n))
    return ResidualStats(
        rms=float(np.sqrt(np.mean(devs**2))), max=float(devs.max()),
        dt=float(dt), sample_count=n_steps + 1,
    )
