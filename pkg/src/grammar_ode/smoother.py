"""Small SiLU MLP fitted to noisy samples, with exact input derivatives.

The network is fixed at ``1 -> H -> H -> 1``. Its first and second derivatives
with respect to t are propagated in closed form next to the forward pass, and
parameter gradients of any loss over (u, u', u'') come from a hand-written
reverse sweep through those same equations. Everything is float64 numpy.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .trajectories import Trajectory

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
_MAGIC = b"SMLP"
_FORMAT = 1


class SmootherDivergence(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"smoother loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch, self.loss = epoch, loss


def silu_derivs(x: np.ndarray):
    """SiLU and its first three derivatives."""
    s = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
    s1 = s * (1.0 - s)
    s2 = s1 * (1.0 - 2.0 * s)
    s3 = s2 * (1.0 - 2.0 * s) - 2.0 * s1 * s1
    return x * s, s + x * s1, 2.0 * s1 + x * s2, 3.0 * s2 + x * s3


@dataclass
class SmootherConfig:
    hidden: int = 32
    epochs: int = 10_000
    batch_size: int = 32
    lr: float = 1e-3
    step_size: int = 500
    gamma: float = 0.95
    beta_ddu: float = 1e-3
    force_period: float | None = None
    initial_conditions: tuple[float, float] | None = None
    ic_weight: float = 1.0
    standardize_output: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.beta_ddu < 0:
            raise ValueError("beta_ddu must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("epochs, batch_size and hidden must be positive")


@dataclass
class SmootherNet:
    params: dict[str, np.ndarray]
    t_lo: float
    t_hi: float
    out_shift: float = 0.0
    out_scale: float = 1.0
    history: list[float] = field(default_factory=list, repr=False)

    @classmethod
    def init(cls, hidden: int, t_lo: float, t_hi: float, seed: int,
             out_shift: float = 0.0, out_scale: float = 1.0) -> "SmootherNet":
        if not t_hi > t_lo:
            raise ValueError("empty time domain")
        rng = np.random.default_rng(seed)

        def lin(fan_in, fan_out):
            b = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-b, b, (fan_out, fan_in)), rng.uniform(-b, b, fan_out)

        W1, b1 = lin(1, hidden)
        W2, b2 = lin(hidden, hidden)
        W3, b3 = lin(hidden, 1)
        return cls(dict(W1=W1, b1=b1, W2=W2, b2=b2, W3=W3, b3=b3), t_lo, t_hi, out_shift, out_scale)

    @property
    def hidden(self) -> int:
        return self.params["b1"].size

    @property
    def a(self) -> float:
        """d x / d t for the map of [t_lo, t_hi] onto [-1, 1]."""
        return 2.0 / (self.t_hi - self.t_lo)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _x(self, t):
        return self.a * (np.asarray(t, dtype=float) - self.t_lo) - 1.0

    # raw network y(x) and its x-derivatives
    def _forward(self, x: np.ndarray):
        P = self.params
        w1 = P["W1"][:, 0]
        z1 = np.outer(x, w1) + P["b1"]
        f1, d1, dd1, ddd1 = silu_derivs(z1)
        h1, h1p, h1pp = f1, d1 * w1, dd1 * (w1 * w1)
        W2t = P["W2"].T
        z2, z2p, z2pp = h1 @ W2t + P["b2"], h1p @ W2t, h1pp @ W2t
        f2, d2, dd2, ddd2 = silu_derivs(z2)
        h2 = f2
        h2p = d2 * z2p
        h2pp = dd2 * z2p * z2p + d2 * z2pp
        w3 = P["W3"][0]
        y, yp, ypp = h2 @ w3 + P["b3"][0], h2p @ w3, h2pp @ w3
        cache = (x, w1, z1, d1, dd1, ddd1, h1, h1p, h1pp, z2p, z2pp, d2, dd2, ddd2, h2, h2p, h2pp)
        return (y, yp, ypp), cache

    def _backward(self, cache, gy, gyp, gypp) -> dict[str, np.ndarray]:
        x, w1, z1, d1, dd1, ddd1, h1, h1p, h1pp, z2p, z2pp, d2, dd2, ddd2, h2, h2p, h2pp = cache
        P = self.params
        w3 = P["W3"][0]
        g = {}
        g["W3"] = (gy @ h2 + gyp @ h2p + gypp @ h2pp)[None, :]
        g["b3"] = np.array([gy.sum()])
        gh2, gh2p, gh2pp = np.outer(gy, w3), np.outer(gyp, w3), np.outer(gypp, w3)

        gz2 = gh2 * d2 + gh2p * dd2 * z2p + gh2pp * (ddd2 * z2p * z2p + dd2 * z2pp)
        gz2p = gh2p * d2 + gh2pp * 2.0 * dd2 * z2p
        gz2pp = gh2pp * d2

        W2 = P["W2"]
        g["W2"] = gz2.T @ h1 + gz2p.T @ h1p + gz2pp.T @ h1pp
        g["b2"] = gz2.sum(0)
        gh1, gh1p, gh1pp = gz2 @ W2, gz2p @ W2, gz2pp @ W2

        gz1 = gh1 * d1 + gh1p * dd1 * w1 + gh1pp * ddd1 * w1 * w1
        gw1 = (gh1p * d1).sum(0) + (gh1pp * dd1).sum(0) * 2.0 * w1 + x @ gz1
        g["W1"] = gw1[:, None]
        g["b1"] = gz1.sum(0)
        return g

    def forward(self, t):
        """(u, u', u'') in physical units plus a cache for :meth:`backward`."""
        (y, yp, ypp), cache = self._forward(self._x(t))
        s, a = self.out_scale, self.a
        return (self.out_shift + s * y, s * a * yp, s * a * a * ypp), cache

    def backward(self, cache, gu, gdu, gddu) -> dict[str, np.ndarray]:
        """Parameter gradient given adjoints of (u, u', u'') from :meth:`forward`."""
        s, a = self.out_scale, self.a
        n = cache[0].size
        z = np.zeros(n)
        as_arr = lambda v: z if v is None else np.asarray(v, dtype=float)
        return self._backward(cache, s * as_arr(gu), s * a * as_arr(gdu), s * a * a * as_arr(gddu))

    def derivatives(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        (u, du, ddu), _ = self.forward(t)
        return u, du, ddu

    def to_trajectory(self, t) -> Trajectory:
        u, du, ddu = self.derivatives(t)
        return Trajectory(t=np.asarray(t, dtype=float), u=u, du=du, ddu=ddu, provenance="smoothed")

    # -- checkpointing --------------------------------------------------
    def arch_hash(self) -> str:
        return hashlib.sha256(f"silu-mlp:1-{self.hidden}-{self.hidden}-1".encode()).hexdigest()[:16]

    def to_bytes(self) -> bytes:
        header = json.dumps({
            "format": _FORMAT, "arch": self.arch_hash(), "hidden": self.hidden,
            "t_lo": self.t_lo, "t_hi": self.t_hi, "out_shift": self.out_shift, "out_scale": self.out_scale,
            "shapes": {k: list(self.params[k].shape) for k in PARAM_NAMES},
        }, sort_keys=True).encode()
        body = b"".join(self.params[k].astype("<f8").tobytes() for k in PARAM_NAMES)
        return _MAGIC + struct.pack("<I", len(header)) + header + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SmootherNet":
        if blob[:4] != _MAGIC:
            raise ValueError("not a smoother checkpoint")
        (n,) = struct.unpack("<I", blob[4:8])
        meta = json.loads(blob[8:8 + n])
        if meta["format"] != _FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta['format']}")
        off, params = 8 + n, {}
        for k in PARAM_NAMES:
            shape = tuple(meta["shapes"][k])
            size = int(np.prod(shape)) * 8
            params[k] = np.frombuffer(blob[off:off + size], dtype="<f8").reshape(shape).copy()
            off += size
        net = cls(params, meta["t_lo"], meta["t_hi"], meta["out_shift"], meta["out_scale"])
        if net.arch_hash() != meta["arch"]:
            raise ValueError("architecture hash mismatch")
        return net


# -- losses -----------------------------------------------------------------

def prediction_loss(net: SmootherNet, t, target, channel: str = "u"):
    """Mean squared error of one channel; returns (loss, grads)."""
    (u, du, ddu), cache = net.forward(t)
    pred = {"u": u, "du": du, "ddu": ddu}[channel]
    r = pred - np.asarray(target, dtype=float)
    loss = float(np.mean(r * r))
    adj = {"u": None, "du": None, "ddu": None}
    adj[channel] = 2.0 * r / r.size
    return loss, net.backward(cache, adj["u"], adj["du"], adj["ddu"])


def anti_drift_loss(net: SmootherNet, t_window):
    """Squared linear trend of u plus squared mean of u' over a window."""
    t_window = np.asarray(t_window, dtype=float)
    m = t_window.size
    (u, du, _), cache = net.forward(t_window)
    tc = t_window - t_window.mean()
    basis = np.stack([np.full(m, 1.0 / math.sqrt(m)), tc / np.linalg.norm(tc)], axis=1)
    trend = basis @ (basis.T @ u)  # LS line through u; u - detrended(u)
    mean_du = float(du.mean())  # u' - detrended(u')
    loss = float(np.mean(trend * trend)) + mean_du * mean_du
    return loss, net.backward(cache, 2.0 * trend / m, np.full(m, 2.0 * mean_du / m), None)


def initial_condition_loss(net: SmootherNet, t0: float, ic: tuple[float, float]):
    (u, du, _), cache = net.forward(np.array([t0]))
    ru, rv = u[0] - ic[0], du[0] - ic[1]
    return float(ru * ru + rv * rv), net.backward(cache, np.array([2 * ru]), np.array([2 * rv]), None)


def _axpy(acc: dict | None, g: dict, w: float = 1.0) -> dict:
    if acc is None:
        return {k: w * v for k, v in g.items()}
    for k in acc:
        acc[k] += w * g[k]
    return acc


def acceleration_loss(net: SmootherNet, t_batch, ddu_batch, t_window=None, beta: float = 0.0,
                      t0: float | None = None, ic: tuple[float, float] | None = None,
                      ic_weight: float = 1.0):
    """Prediction on u'' plus the weighted anti-drift and initial-condition terms."""
    loss, g = prediction_loss(net, t_batch, ddu_batch, "ddu")
    if beta > 0 and t_window is not None:
        l2, g2 = anti_drift_loss(net, t_window)
        loss += beta * l2
        g = _axpy(g, g2, beta)
    if ic is not None:
        l3, g3 = initial_condition_loss(net, t0, ic)
        loss += ic_weight * l3
        g = _axpy(g, g3, ic_weight)
    return loss, g


# -- training ---------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.k = 0

    def step(self, params, grads):
        self.k += 1
        c1, c2 = 1 - self.b1 ** self.k, 1 - self.b2 ** self.k
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _train(net: SmootherNet, cfg: SmootherConfig, n: int, batch_loss) -> SmootherNet:
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(net.params, cfg.lr)
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * cfg.gamma ** (epoch // cfg.step_size)
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            loss, g = batch_loss(perm[start:start + bs])
            if not math.isfinite(loss):
                raise SmootherDivergence(epoch, loss)
            opt.step(net.params, g)
            total += loss
        net.history.append(total / math.ceil(n / bs))
    return net


def fit_on_displacement(obs: Trajectory, cfg: SmootherConfig) -> SmootherNet:
    if obs.u is None:
        raise ValueError("displacement fit needs the u channel")
    t, u = obs.t, obs.u
    shift, scale = (float(u.mean()), float(u.std()) or 1.0) if cfg.standardize_output else (0.0, 1.0)
    net = SmootherNet.init(cfg.hidden, float(t[0]), float(t[-1]), cfg.seed, shift, scale)
    return _train(net, cfg, t.size, lambda idx: prediction_loss(net, t[idx], u[idx], "u"))


def drift_window_start(t: np.ndarray, period: float) -> int:
    """Index i_T of the first sample at or after t0 + T."""
    span = t[-1] - t[0]
    if not 0 < period <= span / 2:
        raise ValueError(f"force period {period} must lie in (0, {span / 2}] for this domain")
    return int(np.searchsorted(t, t[0] + period - 1e-12 * max(1.0, abs(t[0]) + period)))


def fit_on_acceleration(obs: Trajectory, cfg: SmootherConfig) -> SmootherNet:
    if obs.ddu is None:
        raise ValueError("acceleration fit needs the ddu channel")
    if cfg.initial_conditions is None:
        raise ValueError("acceleration fit needs initial conditions")
    window = None
    if cfg.beta_ddu > 0:
        if cfg.force_period is None:
            raise ValueError("anti-drift term needs the force period")
        window = obs.t[drift_window_start(obs.t, cfg.force_period):]
    t, a = obs.t, obs.ddu
    net = SmootherNet.init(cfg.hidden, float(t[0]), float(t[-1]), cfg.seed)
    ic = tuple(float(v) for v in cfg.initial_conditions)
    return _train(net, cfg, t.size, lambda idx: acceleration_loss(
        net, t[idx], a[idx], window, cfg.beta_ddu, float(t[0]), ic, cfg.ic_weight))


def smooth(obs: Trajectory, cfg: SmootherConfig) -> Trajectory:
    """Fit whichever channel is observed and return the smoothed trajectory."""
    net = fit_on_displacement(obs, cfg) if obs.u is not None else fit_on_acceleration(obs, cfg)
    return net.to_trajectory(obs.t)
