"""Dynamics interface and the benchmark systems.

Every callable is vectorized over leading axes: ``x`` of shape ``(..., n)``
gives ``f`` of shape ``(..., n)``, ``g`` of shape ``(..., n, m)`` and
Jacobians of shape ``(..., n, n)``. The time ``t`` is a scalar.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from chreach.errors import ConfigError, InterpolationError


@dataclass(frozen=True)
class SystemDef:
    """Control-affine-in-disturbance dynamics ``xdot = f(t, x) + g(t, x) w``."""

    n: int
    m: int
    f: Callable
    g: Callable
    jac_f: Callable
    jac_g_times: Callable
    label: str = ""

    def eval_f(self, t, x):
        return self.f(t, np.asarray(x, dtype=float))

    def eval_g(self, t, x):
        return self.g(t, np.asarray(x, dtype=float))

    def eval_jac_f(self, t, x):
        return self.jac_f(t, np.asarray(x, dtype=float))

    def eval_jac_g_times(self, t, x, w):
        return self.jac_g_times(t, np.asarray(x, dtype=float), np.asarray(w, dtype=float))

    def rhs(self, t, x, w):
        """State derivative for a given disturbance ``w``."""
        return self.f(t, x) + np.einsum("...ij,...j->...i", self.g(t, x), w)


def _const_g(G):
    G = np.asarray(G, dtype=float)

    def g(t, x):
        return np.broadcast_to(G, x.shape[:-1] + G.shape)

    def jac_g_times(t, x, w):
        return np.zeros(x.shape[:-1] + (x.shape[-1], x.shape[-1]))

    return g, jac_g_times


def _matvec(A, v):
    return np.einsum("ij,...j->...i", A, v)


def skew(v):
    """Cross-product matrices ``S(v)`` with ``S(v) u = v x u``; shape ``(..., 3, 3)``."""
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
        np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
        np.stack([-v[..., 1], v[..., 0], z], axis=-1),
    ], axis=-2)


def numerical_jacobian(fun: Callable, x, step: float = 1e-6):
    """Central finite-difference Jacobian of ``fun`` at points ``x`` (batched)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        cols.append((fun(x + e) - fun(x - e)) / (2 * step))
    return np.stack(cols, axis=-1)


def check_jacobians(sys: SystemDef, points, t: float = 0.0, step: float = 1e-6,
                    rng=None) -> float:
    """Largest relative error of the analytic Jacobians against central differences.

    Errors are measured as ``|analytic - fd| / max(|fd|, 1)`` so that the
    absolute floor applies near zero entries.
    """
    points = np.atleast_2d(points)
    worst = 0.0
    fd = numerical_jacobian(lambda x: sys.f(t, x), points, step)
    an = sys.jac_f(t, points)
    worst = max(worst, float(np.max(np.abs(an - fd) / np.maximum(np.abs(fd), 1.0))))
    if rng is not None:
        w = np.random.default_rng(rng).standard_normal(points.shape[:-1] + (sys.m,))
        fdg = numerical_jacobian(
            lambda x: np.einsum("...ij,...j->...i", sys.g(t, x), w), points, step)
        ang = sys.jac_g_times(t, points, w)
        worst = max(worst, float(np.max(np.abs(ang - fdg) / np.maximum(np.abs(fdg), 1.0))))
    return worst


def make_single_integrator(n: int = 2) -> SystemDef:
    """``xdot = w``: the reachable set from a point is the ball of radius ``t`` times W."""
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")

    def f(t, x):
        return np.zeros_like(x)

    def jac_f(t, x):
        return np.zeros(x.shape[:-1] + (n, n))

    g, jac_g_times = _const_g(np.eye(n))
    return SystemDef(n, n, f, g, jac_f, jac_g_times, label="single-integrator")


# -- Dubins car --------------------------------------------------------------

def make_dubins(v: float = 0.5, omega: float = 0.5, G=None) -> SystemDef:
    """Dubins car ``(v cos th, v sin th, omega) + G w`` with state ``(p1, p2, th)``."""
    G = np.eye(3) if G is None else np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != 3 or G.shape[1] not in (2, 3):
        raise ConfigError(f"Dubins G must be 3x2 or 3x3, got shape {G.shape}")

    def f(t, x):
        th = x[..., 2]
        return np.stack([v * np.cos(th), v * np.sin(th), np.full_like(th, omega)], axis=-1)

    def jac_f(t, x):
        th = x[..., 2]
        J = np.zeros(x.shape[:-1] + (3, 3))
        J[..., 0, 2] = -v * np.sin(th)
        J[..., 1, 2] = v * np.cos(th)
        return J

    g, jac_g_times = _const_g(G)
    return SystemDef(3, G.shape[1], f, g, jac_f, jac_g_times, label="dubins")


# -- attraction-repulsion ------------------------------------------------------

def _bump(u):
    return np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)


def _dbump(u):
    safe = np.where(u > 0, u, 1.0)
    return np.where(u > 0, np.exp(-1.0 / safe) / safe ** 2, 0.0)


def smooth_step(u):
    """C-infinity step: 0 for u <= 0, 1 for u >= 1. Returns (value, derivative)."""
    a, b = _bump(u), _bump(1.0 - u)
    da, db = _dbump(u), -_dbump(1.0 - u)
    s = a + b
    return a / s, (da * s - a * (da + db)) / s ** 2


def make_attraction_repulsion(x_a=(1.0, 0.0), x_r=(-1.0, 0.0),
                              cutoff_radius: float = 0.2) -> SystemDef:
    """Planar attraction to ``x_a`` and repulsion from ``x_r`` with unit disturbance gain.

    Each inverse-square term is multiplied by a smooth cut-off that is zero
    within ``cutoff_radius`` of its pole and one beyond twice that radius.
    """
    x_a = np.asarray(x_a, dtype=float)
    x_r = np.asarray(x_r, dtype=float)
    rc = float(cutoff_radius)
    if rc <= 0:
        raise ConfigError("cutoff_radius must be positive")
    if np.allclose(x_a, x_r):
        raise ConfigError("attraction and repulsion poles must differ")

    def term(pole, x):
        v = pole - x
        r = np.linalg.norm(v, axis=-1)
        safe = np.maximum(r, 0.5 * rc)
        s, ds = smooth_step((r - rc) / rc)
        return v, safe, s, ds / rc

    def f(t, x):
        out = 0.0
        for pole, sign in ((x_a, 1.0), (x_r, -1.0)):
            v, r, s, _ = term(pole, x)
            out = out + sign * (s / r ** 3)[..., None] * v
        return out

    def jac_f(t, x):
        J = 0.0
        eye = np.eye(2)
        for pole, sign in ((x_a, 1.0), (x_r, -1.0)):
            v, r, s, ds = term(pole, x)
            vvT = v[..., :, None] * v[..., None, :]
            dv = (s / r ** 3)[..., None, None] * eye \
                - (3 * s / r ** 5)[..., None, None] * vvT \
                + (ds / r ** 4)[..., None, None] * vvT
            J = J - sign * dv  # dv/dx = -I
        return J

    g, jac_g_times = _const_g(np.eye(2))
    return SystemDef(2, 2, f, g, jac_f, jac_g_times, label="attraction-repulsion")


# -- neural feedback loop ----------------------------------------------------

def softplus(z, beta: float = 1.0):
    return np.logaddexp(0.0, beta * z) / beta


def softplus_grad(z, beta: float = 1.0):
    return 0.5 * (1.0 + np.tanh(0.5 * beta * z))


@dataclass
class MlpPolicy:
    """Fully connected network with softplus hidden activations and linear output."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    beta: float = 1.0

    def __post_init__(self):
        self.weights = [np.atleast_2d(np.asarray(W, dtype=float)) for W in self.weights]
        self.biases = [np.atleast_1d(np.asarray(b, dtype=float)) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigError("need one bias per weight matrix")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ConfigError(f"layer {i}: bias length {b.shape[0]} != rows {W.shape[0]}")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigError(f"layer {i}: input size does not chain")

    @property
    def sizes(self) -> List[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def __call__(self, x):
        h = np.asarray(x, dtype=float)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = softplus(_matvec(W, h) + b, self.beta)
        return _matvec(self.weights[-1], h) + self.biases[-1]

    def jacobian(self, x):
        """Jacobian of the output with respect to the input, shape ``(..., k, d)``."""
        h = np.asarray(x, dtype=float)
        J = np.broadcast_to(np.eye(h.shape[-1]), h.shape[:-1] + (h.shape[-1],) * 2)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = _matvec(W, h) + b
            J = softplus_grad(z, self.beta)[..., :, None] * np.einsum("ij,...jk->...ik", W, J)
            h = softplus(z, self.beta)
        return np.einsum("ij,...jk->...ik", self.weights[-1], J)


def make_neural_loop(A, B, policy: MlpPolicy) -> SystemDef:
    """Closed loop ``A x + B pi(x) + w`` of a linear plant and an MLP policy."""
    A = np.asarray(A, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape != (2, 2) or B.shape[0] != 2:
        raise ConfigError("neural loop needs A 2x2 and B 2xk")
    if policy.sizes[0] != 2 or policy.sizes[-1] != B.shape[1]:
        raise ConfigError(
            f"policy maps {policy.sizes[0]} -> {policy.sizes[-1]}, need 2 -> {B.shape[1]}")

    def f(t, x):
        return _matvec(A, x) + _matvec(B, policy(x))

    def jac_f(t, x):
        return A + np.einsum("ij,...jk->...ik", B, policy.jacobian(x))

    g, jac_g_times = _const_g(np.eye(2))
    return SystemDef(2, 2, f, g, jac_f, jac_g_times, label="neural-loop")


POLICY_MAGIC = "chreach-softplus-mlp 1"


def save_neural_loop(path, A, B, policy: MlpPolicy) -> None:
    """Writes plant matrices and policy weights in the text parameter format.

    Layout (UTF-8, LF, floats as ``%.17g``)::

        chreach-softplus-mlp 1
        beta <beta>
        sizes <d0> <d1> ... <dL>
        A <rows> <cols> <row-major entries>
        B <rows> <cols> <row-major entries>
        W<i> <rows> <cols> <row-major entries>      (one line per layer)
        b<i> <len> <entries>
    """
    def row(tag, M):
        M = np.atleast_2d(M)
        vals = " ".join(f"{v:.17g}" for v in M.ravel())
        return f"{tag} {M.shape[0]} {M.shape[1]} {vals}"

    lines = [POLICY_MAGIC, f"beta {policy.beta:.17g}",
             "sizes " + " ".join(str(s) for s in policy.sizes),
             row("A", A), row("B", B)]
    for i, (W, b) in enumerate(zip(policy.weights, policy.biases)):
        lines.append(row(f"W{i}", W))
        lines.append(f"b{i} {b.shape[0]} " + " ".join(f"{v:.17g}" for v in b))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_neural_loop(path=None):
    """Reads ``(A, B, policy)``; defaults to the shipped reference loop."""
    if path is None:
        text = resources.files("chreach").joinpath("data/neural_loop.txt").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != POLICY_MAGIC:
        raise ConfigError("not a chreach policy file (bad header)")
    fields = {}
    for ln in lines[1:]:
        if ln.strip():
            tag, *rest = ln.split()
            fields[tag] = rest
    beta = float(fields["beta"][0])
    sizes = [int(s) for s in fields["sizes"]]

    def mat(tag):
        r, c, *vals = fields[tag]
        return np.array(vals, dtype=float).reshape(int(r), int(c))

    Ws, bs = [], []
    for i in range(len(sizes) - 1):
        Ws.append(mat(f"W{i}"))
        k, *vals = fields[f"b{i}"]
        bs.append(np.array(vals, dtype=float).reshape(int(k)))
    return mat("A"), mat("B"), MlpPolicy(Ws, bs, beta)


def build_reference_policy(seed: int = 20240611, hidden: int = 16):
    """Deterministic double-integrator loop with a stabilizing softplus policy.

    Hidden layers are seeded random features; the linear readout is fit by
    least squares to the LQR law ``u = -(x1 + sqrt(3) x2)`` on a box
    covering the operating region.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    W0 = rng.normal(0.0, 1.0, (hidden, 2))
    b0 = rng.normal(0.0, 1.0, hidden)
    W1 = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden))
    b1 = rng.normal(0.0, 0.5, hidden)
    grid = np.stack(np.meshgrid(np.linspace(-1.0, 4.0, 41),
                                np.linspace(-4.0, 2.0, 41)), axis=-1).reshape(-1, 2)
    feats = softplus(_matvec(W1, softplus(_matvec(W0, grid) + b0)) + b1)
    target = -(grid[:, 0] + np.sqrt(3.0) * grid[:, 1])
    design = np.hstack([feats, np.ones((feats.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    policy = MlpPolicy([W0, W1, coef[None, :-1]], [b0, b1, coef[-1:]], beta=1.0)
    return A, B, policy


# -- spacecraft attitude -------------------------------------------------------

class PiecewiseConstant:
    """Zero-order-hold signal: ``values[k]`` on ``[nodes[k], nodes[k+1])``.

    The final node belongs to the last segment. Queries outside
    ``[nodes[0], nodes[-1]]`` raise :class:`InterpolationError`.
    """

    def __init__(self, nodes, values):
        self.nodes = np.asarray(nodes, dtype=float)
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        if self.values.shape[0] != self.nodes.shape[0] - 1:
            raise ConfigError("need exactly one value per segment")

    def __call__(self, t):
        if t < self.nodes[0] or t > self.nodes[-1]:
            raise InterpolationError(
                f"signal defined on [{self.nodes[0]}, {self.nodes[-1]}], queried at {t}")
        k = int(np.searchsorted(self.nodes, t, side="right")) - 1
        return self.values[min(k, self.values.shape[0] - 1)]


def _as_signal(ubar):
    if ubar is None:
        return lambda t: np.zeros(3)
    if callable(ubar):
        return ubar
    u = np.asarray(ubar, dtype=float)
    return lambda t: u


def make_spacecraft_omega(J=(5.0, 2.0, 1.0), K=(-5.0, -2.0, -1.0), ubar=None) -> SystemDef:
    """Closed-loop angular-velocity dynamics ``J^{-1}(ubar + K w - w x J w) + J^{-1} d``.

    ``J`` and ``K`` accept diagonals or full matrices; ``ubar`` is a callable
    of time (e.g. :class:`PiecewiseConstant`), a constant vector, or None.
    """
    Jm = np.diag(J) if np.ndim(J) == 1 else np.asarray(J, dtype=float)
    Km = np.diag(K) if np.ndim(K) == 1 else np.asarray(K, dtype=float)
    if Jm.shape != (3, 3) or np.any(np.diag(Jm) <= 0) or np.any(Jm != np.diag(np.diag(Jm))):
        raise ConfigError("J must be a positive diagonal 3x3 matrix")
    Jinv = np.diag(1.0 / np.diag(Jm))
    u_of_t = _as_signal(ubar)
    j1, j2, j3 = np.diag(Jm)
    jinv = 1.0 / np.diag(Jm)
    k_diag = np.diag(Km) if np.all(Km == np.diag(np.diag(Km))) else None

    # With J diagonal the gyroscopic term w x Jw and its Jacobian have closed forms.
    def f(t, w):
        w1, w2, w3 = w[..., 0], w[..., 1], w[..., 2]
        gyro = np.stack([(j3 - j2) * w2 * w3, (j1 - j3) * w3 * w1, (j2 - j1) * w1 * w2], axis=-1)
        fb = k_diag * w if k_diag is not None else _matvec(Km, w)
        return jinv * (u_of_t(t) + fb - gyro)

    def jac_f(t, w):
        w1, w2, w3 = w[..., 0], w[..., 1], w[..., 2]
        out = np.zeros(w.shape[:-1] + (3, 3))
        out[..., 0, 1] = (j2 - j3) * w3
        out[..., 0, 2] = (j2 - j3) * w2
        out[..., 1, 0] = (j3 - j1) * w3
        out[..., 1, 2] = (j3 - j1) * w1
        out[..., 2, 0] = (j1 - j2) * w2
        out[..., 2, 1] = (j1 - j2) * w1
        out += Km
        return jinv[:, None] * out

    g, jac_g_times = _const_g(Jinv)
    return SystemDef(3, 3, f, g, jac_f, jac_g_times, label="spacecraft-omega")


def quat_rate_matrix(w):
    """``Omega(w)`` with ``qdot = Omega(w) q`` for scalar-first quaternions and body rates."""
    w = np.asarray(w, dtype=float)
    z = np.zeros(w.shape[:-1])
    w1, w2, w3 = w[..., 0], w[..., 1], w[..., 2]
    return 0.5 * np.stack([
        np.stack([z, -w1, -w2, -w3], axis=-1),
        np.stack([w1, z, w3, -w2], axis=-1),
        np.stack([w2, -w3, z, w1], axis=-1),
        np.stack([w3, w2, -w1, z], axis=-1),
    ], axis=-2)


def make_spacecraft_full(J=(5.0, 2.0, 1.0), K=(-5.0, -2.0, -1.0), ubar=None) -> SystemDef:
    """Attitude quaternion plus angular velocity, ``x = (q, w)`` in ``R^7``."""
    omega_sys = make_spacecraft_omega(J, K, ubar)
    Jinv = omega_sys.g(0.0, np.zeros(3))

    def f(t, x):
        q, w = x[..., :4], x[..., 4:]
        qdot = np.einsum("...ij,...j->...i", quat_rate_matrix(w), q)
        return np.concatenate([qdot, omega_sys.f(t, w)], axis=-1)

    def jac_f(t, x):
        q, w = x[..., :4], x[..., 4:]
        Jx = np.zeros(x.shape[:-1] + (7, 7))
        Jx[..., :4, :4] = quat_rate_matrix(w)
        q0, qv = q[..., 0], q[..., 1:]
        Jx[..., 0, 4:] = -0.5 * qv
        Jx[..., 1:4, 4:] = 0.5 * q0[..., None, None] * np.eye(3) + 0.5 * skew(qv)
        Jx[..., 4:, 4:] = omega_sys.jac_f(t, w)
        return Jx

    G = np.zeros((7, 3))
    G[4:, :] = Jinv
    g, jac_g_times = _const_g(G)
    return SystemDef(7, 3, f, g, jac_f, jac_g_times, label="spacecraft-full")
