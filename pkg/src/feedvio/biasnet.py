"""Recurrent IMU bias predictor.

Maps the previous optimized bias and the IMU readings between two frames to
a bias prediction for the current frame::

    h0  = fc1(norm(prev_bias))
    x_t = fc2([norm(prev_bias), norm(gyro_t, accel_t)])
    h_t = GRU(h_{t-1}, x_t)                    # hidden size 64
    out = bias_mean + bias_std * fc3(h_T)      # absolute bias, not a delta

The GRU follows the usual (reset, update, candidate) gate layout.  Forward
activations are kept on a tape so ``backward`` gives exact reverse-mode
gradients without any autodiff framework.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .params import ParamSet
from .preintegration import BiasState, ImuSample

HIDDEN = 64
STD_FLOOR = 1e-6


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_params(seed: int = 0, hidden: int = HIDDEN) -> ParamSet:
    """Cold-start parameters: tiny fully connected weights, zero GRU weights
    and an update-gate bias of +1."""
    rng = np.random.default_rng(seed)
    H = hidden
    b_ih = np.zeros(3 * H)
    b_ih[H:2 * H] = 1.0
    return ParamSet({
        "fc1_w": rng.uniform(-1e-3, 1e-3, (H, 6)),
        "fc1_b": np.zeros(H),
        "fc2_w": rng.uniform(-1e-3, 1e-3, (H, 12)),
        "fc2_b": np.zeros(H),
        "gru_w_ih": np.zeros((3 * H, H)),
        "gru_w_hh": np.zeros((3 * H, H)),
        "gru_b_ih": b_ih,
        "gru_b_hh": np.zeros(3 * H),
        "fc3_w": rng.uniform(-1e-3, 1e-3, (6, H)),
        "fc3_b": np.zeros(6),
    })


def param_shapes(hidden: int = HIDDEN) -> dict[str, tuple]:
    return init_params(0, hidden).shapes()


@dataclass
class NormalizationStats:
    """Per-channel statistics of (gyro, accel) readings and (b_a, b_g) biases.

    Running estimates until ``freeze()``; afterwards updates are ignored.
    """

    meas_mean: np.ndarray = field(default_factory=lambda: np.zeros(6))
    meas_std: np.ndarray = field(default_factory=lambda: np.ones(6))
    bias_mean: np.ndarray = field(default_factory=lambda: np.zeros(6))
    bias_std: np.ndarray = field(default_factory=lambda: np.ones(6))
    frozen: bool = False
    _n_meas: int = 0
    _m2_meas: np.ndarray = field(default_factory=lambda: np.zeros(6))
    _n_bias: int = 0
    _m2_bias: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        self.meas_std = np.maximum(np.asarray(self.meas_std, dtype=float), STD_FLOOR)
        self.bias_std = np.maximum(np.asarray(self.bias_std, dtype=float), STD_FLOOR)

    def update_measurements(self, samples: Sequence[ImuSample]):
        if self.frozen:
            return
        for s in samples:
            x = np.concatenate([s.gyro, s.accel])
            self._n_meas += 1
            d = x - self.meas_mean
            self.meas_mean = self.meas_mean + d / self._n_meas
            self._m2_meas = self._m2_meas + d * (x - self.meas_mean)
        if self._n_meas > 1:
            self.meas_std = np.maximum(np.sqrt(self._m2_meas / (self._n_meas - 1)), STD_FLOOR)

    def update_bias(self, bias: BiasState, std_floor: np.ndarray | float = STD_FLOOR):
        if self.frozen:
            return
        x = bias.vector()
        self._n_bias += 1
        d = x - self.bias_mean
        self.bias_mean = self.bias_mean + d / self._n_bias
        self._m2_bias = self._m2_bias + d * (x - self.bias_mean)
        spread = np.sqrt(self._m2_bias / (self._n_bias - 1)) if self._n_bias > 1 else np.zeros(6)
        self.bias_std = np.maximum(np.maximum(spread, std_floor), STD_FLOOR)

    def freeze(self):
        self.frozen = True

    def as_dict(self) -> dict:
        return {"meas_mean": self.meas_mean.tolist(), "meas_std": self.meas_std.tolist(),
                "bias_mean": self.bias_mean.tolist(), "bias_std": self.bias_std.tolist(),
                "frozen": self.frozen}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["meas_mean"]), np.array(d["meas_std"]), np.array(d["bias_mean"]),
                   np.array(d["bias_std"]), bool(d.get("frozen", True)))


@dataclass(eq=False)
class Tape:
    shapes: dict
    stats: NormalizationStats
    prev_bias: np.ndarray
    samples: np.ndarray  # (T, 6) raw (gyro, accel)
    nb: np.ndarray
    nm: np.ndarray
    hs: list  # h_0 .. h_T
    xs: list
    gates: list  # (r, z, n, hn) per step


@dataclass(eq=False)
class BiasPrediction:
    predicted_bias: BiasState
    tape: Tape


def _forward(params: ParamSet, stats: NormalizationStats, prev: np.ndarray, raw: np.ndarray):
    H = params["fc1_b"].shape[0]
    nb = (prev - stats.bias_mean) / stats.bias_std
    nm = (raw - stats.meas_mean) / stats.meas_std
    h = params["fc1_w"] @ nb + params["fc1_b"]
    hs, xs, gates = [h], [], []
    w_ih, w_hh, b_ih, b_hh = params["gru_w_ih"], params["gru_w_hh"], params["gru_b_ih"], params["gru_b_hh"]
    for t in range(raw.shape[0]):
        x = params["fc2_w"] @ np.concatenate([nb, nm[t]]) + params["fc2_b"]
        gi = w_ih @ x + b_ih
        gh = w_hh @ h + b_hh
        r = _sigmoid(gi[:H] + gh[:H])
        z = _sigmoid(gi[H:2 * H] + gh[H:2 * H])
        hn = gh[2 * H:]
        n = np.tanh(gi[2 * H:] + r * hn)
        h = (1.0 - z) * n + z * h
        xs.append(x)
        gates.append((r, z, n, hn))
        hs.append(h)
    y = params["fc3_w"] @ h + params["fc3_b"]
    out = stats.bias_mean + stats.bias_std * y
    return out, nb, nm, hs, xs, gates


def predict(params: ParamSet, stats: NormalizationStats, prev_bias: BiasState,
            samples: Sequence[ImuSample]) -> BiasPrediction:
    if len(samples) == 0:
        raise ValueError("bias prediction needs at least one IMU sample")
    raw = np.array([np.concatenate([s.gyro, s.accel]) for s in samples])
    prev = prev_bias.vector()
    out, nb, nm, hs, xs, gates = _forward(params, stats, prev, raw)
    tape = Tape(params.shapes(), stats, prev, raw, nb, nm, hs, xs, gates)
    return BiasPrediction(BiasState.from_vector(out), tape)


def replay(params: ParamSet, tape: Tape) -> BiasState:
    out, *_ = _forward(params, tape.stats, tape.prev_bias, tape.samples)
    return BiasState.from_vector(out)


def backward(params: ParamSet, prediction: BiasPrediction, grad_wrt_bias: np.ndarray):
    """Gradients of ``<grad_wrt_bias, predicted_bias>`` w.r.t. every block.

    Returns ``(param_grads, grad_wrt_prev_bias)``.
    """
    tape = prediction.tape
    if params.shapes() != tape.shapes:
        raise ValueError("tape was recorded with differently shaped parameters")
    g = np.asarray(grad_wrt_bias, dtype=float).reshape(6)
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    dy = tape.stats.bias_std * g
    grads["fc3_w"] = np.outer(dy, tape.hs[-1])
    grads["fc3_b"] = dy
    dh = params["fc3_w"].T @ dy
    dnb = np.zeros(6)
    w_ih, w_hh = params["gru_w_ih"], params["gru_w_hh"]
    for t in range(len(tape.xs) - 1, -1, -1):
        r, z, n, hn = tape.gates[t]
        h_prev = tape.hs[t]
        x = tape.xs[t]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z
        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * hn
        dr_pre = dr * r * (1.0 - r)
        dz_pre = dz * z * (1.0 - z)
        dgi = np.concatenate([dr_pre, dz_pre, dn_pre])
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r])
        grads["gru_w_ih"] += np.outer(dgi, x)
        grads["gru_b_ih"] += dgi
        grads["gru_w_hh"] += np.outer(dgh, h_prev)
        grads["gru_b_hh"] += dgh
        dx = w_ih.T @ dgi
        grads["fc2_w"] += np.outer(dx, np.concatenate([tape.nb, tape.nm[t]]))
        grads["fc2_b"] += dx
        dnb += params["fc2_w"][:, :6].T @ dx
        dh = dh_prev + w_hh.T @ dgh
    grads["fc1_w"] = np.outer(dh, tape.nb)
    grads["fc1_b"] = dh
    dnb += params["fc1_w"].T @ dh
    return ParamSet(grads), dnb / tape.stats.bias_std


def random_walk_predict(prev_bias: BiasState) -> BiasState:
    """Zero-mean random-walk baseline: the prediction is the previous bias."""
    return prev_bias
