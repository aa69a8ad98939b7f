"""Learnable rounding: choose floor or ceil per weight to match layer outputs.

Each weight gets a continuous variable ``V``; ``h(V)`` in [0, 1] is the
fraction added on top of ``floor(W / s)``. The loss is the squared output
discrepancy on calibration inputs plus a regularizer that pushes every
``h`` to 0 or 1, after which the rounding is hardened at ``h >= 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, OptimizationError
from .fakequant import PER_CHANNEL, QParams, fake_quantize, quantize, ste_fake_quantize
from .optim import Adam

STRETCH_LO, STRETCH_HI = -0.1, 1.1
V_SATURATED = 6.0  # h(+6) = 1 and h(-6) = 0 exactly


def h_rect(V) -> ad.Tensor:
    """Rectified sigmoid ``clamp(1.2 * sigmoid(V) - 0.1, 0, 1)``.

    Evaluated as ``0.5 + 1.2 * (sigmoid(V) - 0.5)`` so that ``h(0)`` is exactly 0.5.
    """
    V = V if isinstance(V, ad.Tensor) else ad.Tensor(V)
    stretched = ad.add(ad.mul(ad.sub(ad.sigmoid(V), 0.5), STRETCH_HI - STRETCH_LO), 0.5)
    return ad.clamp(stretched, 0.0, 1.0)


def h_values(V) -> np.ndarray:
    return h_rect(np.asarray(V, dtype=np.float64)).data


def v_from_h(h) -> np.ndarray:
    """Inverse of the unclamped rectified sigmoid; ``h`` must lie in [0, 1]."""
    sig = (np.asarray(h, dtype=np.float64) - 0.5) / (STRETCH_HI - STRETCH_LO) + 0.5
    return np.log(sig) - np.log1p(-sig)


def regularizer(V, beta) -> ad.Tensor:
    """``sum(1 - |2 h(V) - 1|^beta)``; zero once every ``h`` is exactly 0 or 1."""
    if not beta > 0:
        raise ContractError("beta must be positive")
    h = h_rect(V)
    spread = ad.tpow(ad.tabs(ad.sub(ad.mul(h, 2.0), 1.0)), float(beta))
    return ad.sub(float(h.size), ad.tsum(spread))


def _grid(W, q: QParams):
    """Per-element scale and zero point, expanded to the shape of ``W``."""
    W = np.asarray(W, dtype=np.float64)
    if q.granularity == PER_CHANNEL:
        if q.scale.shape[0] != W.shape[0]:
            raise ContractError("per-channel QParams do not match the weight rows")
        s = np.broadcast_to(q.scale[:, None], W.shape)
        z = np.broadcast_to(q.zero_point[:, None].astype(np.float64), W.shape)
    else:
        s = np.full(W.shape, float(q.scale))
        z = np.full(W.shape, float(q.zero_point))
    return s, z


def floor_base(W, q: QParams) -> np.ndarray:
    s, _ = _grid(W, q)
    return np.floor(np.asarray(W, dtype=np.float64) / s)


def soft_quant_weights(W, V, q: QParams, base=None) -> ad.Tensor:
    """Soft grid ``clamp(floor(W/s) + h(V) + z, 0, 2^k-1)`` dequantized to ``s * (grid - z)``."""
    W = np.asarray(W, dtype=np.float64)
    V = V if isinstance(V, ad.Tensor) else ad.Tensor(V)
    if V.shape != W.shape:
        raise ContractError(f"V shape {V.shape} does not match W {W.shape}")
    s, z = _grid(W, q)
    base = floor_base(W, q) if base is None else base
    grid = ad.clamp(ad.add(ad.Tensor(base + z), h_rect(V)), 0.0, float(q.qmax))
    return ad.mul(ad.sub(grid, ad.Tensor(z)), ad.Tensor(s))


def harden(W, V, q: QParams, base=None) -> np.ndarray:
    """Integer codes with ``h >= 0.5`` rounded up."""
    _, z = _grid(W, q)
    base = floor_base(W, q) if base is None else base
    up = (h_values(V) >= 0.5).astype(np.float64)
    return np.clip(base + up + z, 0, q.qmax).astype(np.int64)


def saturate(W, codes, q: QParams, base=None) -> np.ndarray:
    """``V`` with ``h`` exactly 0 or 1, reproducing the given hardened codes."""
    _, z = _grid(W, q)
    base = floor_base(W, q) if base is None else base
    up = np.asarray(codes) - base - z >= 1
    return np.where(up, V_SATURATED, -V_SATURATED)


def init_rounding(W, q: QParams, base=None) -> np.ndarray:
    """``V`` whose ``h`` equals the fractional part of ``W / s``."""
    s, _ = _grid(W, q)
    base = floor_base(W, q) if base is None else base
    frac = np.clip(np.asarray(W, dtype=np.float64) / s - base, 0.0, 1.0)
    return v_from_h(frac)


@dataclass
class ReconUnit:
    """One reconstruction target: a layer, or a block of layers optimized jointly.

    ``x`` holds the calibration inputs exactly as the first layer sees them
    (outputs of the already-quantized predecessors, after its activation
    quantizer). The loss compares pre-activation outputs of the last layer.
    ``act_qparams[i]`` quantizes the input of layer ``i`` for ``i >= 1``.
    """

    weights: List[np.ndarray]
    qparams: List[QParams]
    x: np.ndarray
    biases: Optional[List[np.ndarray]] = None
    act_qparams: Optional[List[Optional[QParams]]] = None
    alpha: float = 1.0
    name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] == 0:
            raise ContractError("cached inputs must be a non-empty (n, C_in) matrix")
        if len(self.weights) != len(self.qparams) or not self.weights:
            raise ContractError("one QParams per weight matrix required")
        if self.x.shape[1] != self.weights[0].shape[1]:
            raise ContractError("cached inputs do not match the first layer's input width")
        if self.biases is None:
            self.biases = [np.zeros(w.shape[0]) for w in self.weights]
        if self.act_qparams is None:
            self.act_qparams = [None] * len(self.weights)
        self.bases = [floor_base(w, q) for w, q in zip(self.weights, self.qparams)]
        self.target = self._numpy_forward(self.weights)
        # a single linear layer only needs the input Gram matrix
        self.gram = self.x.T @ self.x if len(self.weights) == 1 else None

    @classmethod
    def for_layer(cls, weight, q: QParams, x, alpha=1.0, name=""):
        return cls([np.asarray(weight, dtype=np.float64)], [q], x, alpha=alpha, name=name)

    def _numpy_forward(self, weights):
        h = self.x
        last = len(weights) - 1
        for i, (w, b) in enumerate(zip(weights, self.biases)):
            if i > 0 and self.act_qparams[i] is not None:
                h = fake_quantize(h, self.act_qparams[i])
            h = h @ w.T + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def mse(self, effective_weights) -> float:
        """Squared output discrepancy summed over the calibration batch."""
        d = self._numpy_forward(effective_weights) - self.target
        return float(np.sum(d * d))

    def effective_from_codes(self, codes) -> List[np.ndarray]:
        out = []
        for c, w, q in zip(codes, self.weights, self.qparams):
            s, z = _grid(w, q)
            out.append(s * (c - z))
        return out

    def rtn_codes(self) -> List[np.ndarray]:
        return [quantize(w, q) for w, q in zip(self.weights, self.qparams)]

    def graph_output(self, Vs: Sequence[ad.Tensor]) -> ad.Tensor:
        n = self.x.shape[0]
        h = ad.Tensor(self.x)
        last = len(self.weights) - 1
        for i, (w, V, q, base, b) in enumerate(zip(self.weights, Vs, self.qparams, self.bases, self.biases)):
            if i > 0 and self.act_qparams[i] is not None:
                h = ste_fake_quantize(h, self.act_qparams[i])
            w_eff = soft_quant_weights(w, V, q, base)
            h = ad.add(ad.matmul(h, w_eff, transpose_b=True), ad.Tensor(np.broadcast_to(b, (n, b.size))))
            if i < last:
                h = ad.relu(h)
        return h


def loss_rec(unit: ReconUnit, V, beta=2.0, alpha=None) -> ad.Tensor:
    """``||W x - W~ x||_F^2 + alpha * R(V)`` for a unit; ``V`` is a tensor or a list of them."""
    Vs = list(V) if isinstance(V, (list, tuple)) else [V]
    Vs = [v if isinstance(v, ad.Tensor) else ad.Tensor(v) for v in Vs]
    alpha = unit.alpha if alpha is None else alpha
    if unit.gram is not None:
        # sum_n ||D x_n||^2 = sum((D G) * D) with D = W - W~ and G = x^T x
        w_eff = soft_quant_weights(unit.weights[0], Vs[0], unit.qparams[0], unit.bases[0])
        D = ad.sub(ad.Tensor(unit.weights[0]), w_eff)
        loss = ad.tsum(ad.mul(ad.matmul(D, unit.gram), D))
    else:
        diff = ad.sub(unit.graph_output(Vs), ad.Tensor(unit.target))
        loss = ad.tsum(ad.tpow(diff, 2))
    if alpha:
        reg = regularizer(Vs[0], beta)
        for v in Vs[1:]:
            reg = ad.add(reg, regularizer(v, beta))
        loss = ad.add(loss, ad.mul(reg, float(alpha)))
    return loss


@dataclass
class RoundingVars:
    """Rounding state of a unit: continuous ``V``, the beta schedule, and the hardened codes."""

    V: List[np.ndarray]
    beta_start: float = 20.0
    beta_end: float = 2.0
    beta: float = 20.0
    alpha: float = 1.0
    codes: Optional[List[np.ndarray]] = None
    mse: float = float("nan")
    rtn_mse: float = float("nan")
    soft_before_harden: float = float("nan")
    soft_V: Optional[List[np.ndarray]] = None  # un-hardened V behind the kept codes
    bases: Optional[List[np.ndarray]] = None
    best_step: int = 0
    history: list = field(default_factory=list)

    @property
    def soft_fraction(self):
        """Fraction of ``h(V)`` strictly inside (0.01, 0.99)."""
        h = np.concatenate([h_values(v).ravel() for v in self.V])
        return float(np.mean((h > 0.01) & (h < 0.99)))


def beta_at(step, steps, start=20.0, end=2.0):
    if steps <= 1:
        return end
    return start + (end - start) * step / (steps - 1)


def optimize_rounding(
    unit: ReconUnit, steps=500, lr=1e-2, beta_schedule=(20.0, 2.0), check_every=25
) -> RoundingVars:
    """Adam on ``loss_rec`` with linearly annealed beta, then hardening.

    The hardened solution is evaluated every ``check_every`` steps (and at
    step 0, which is nearest rounding) and the best one is kept. On return
    ``V`` is saturated to reproduce the kept codes.
    """
    Vs = [init_rounding(w, q, b) for w, q, b in zip(unit.weights, unit.qparams, unit.bases)]
    state = RoundingVars(Vs, beta_schedule[0], beta_schedule[1], beta_schedule[0], unit.alpha)
    rtn = unit.rtn_codes()
    state.rtn_mse = unit.mse(unit.effective_from_codes(rtn))

    def hardened():
        return [harden(w, v, q, b) for w, v, q, b in zip(unit.weights, state.V, unit.qparams, unit.bases)]

    # the initial V hardens to nearest rounding except that exact halves go up
    best_codes = hardened()
    best_mse = unit.mse(unit.effective_from_codes(best_codes))
    if state.rtn_mse < best_mse:
        best_codes, best_mse = rtn, state.rtn_mse
    best_V = [v.copy() for v in state.V]
    opt = Adam(state.V, lr=lr)
    for step in range(steps):
        state.beta = beta_at(step, steps, *beta_schedule)
        params = [ad.Tensor(v, requires_grad=True) for v in state.V]
        loss = loss_rec(unit, params, beta=state.beta)
        value = loss.item()
        if not np.isfinite(value):
            raise OptimizationError(f"reconstruction loss is not finite at step {step}", step=step)
        grads = ad.backward(loss)
        opt.step([grads[p].data for p in params])
        state.history.append(value)
        if (step + 1) % check_every == 0 or step + 1 == steps:
            codes = hardened()
            mse = unit.mse(unit.effective_from_codes(codes))
            if mse < best_mse:
                best_codes, best_mse, state.best_step = codes, mse, step + 1
                best_V = [v.copy() for v in state.V]
    state.soft_before_harden = state.soft_fraction
    state.soft_V = best_V
    state.bases = unit.bases
    state.codes = best_codes
    state.mse = best_mse
    state.V = [saturate(w, c, q, b) for w, c, q, b in zip(unit.weights, best_codes, unit.qparams, unit.bases)]
    return state
