"""Uniform asymmetric affine quantization and pseudo-quantized models.

``int = clamp(round(x / s) + z, 0, 2^k - 1)`` and ``x_hat = s * (int - z)``,
with ties rounded half-to-even. Weights use one ``(s, z)`` pair per output
channel (row), activations one pair per tensor.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DomainError
from .toy import dense_forward

PER_TENSOR = "per-tensor"
PER_CHANNEL = "per-output-channel"

SCALE_FLOOR = 1e-8
#: bit-widths at or above this leave the target in full precision
DISABLED_BITS = 32
#: scales held by quantized models are representable in this type (the packed format)
STORAGE_DTYPE = np.float32


@dataclass(frozen=True)
class QParams:
    """Scale, zero point and bit-width for one quantized target.

    ``scale`` and ``zero_point`` are scalars for per-tensor granularity and
    1-D arrays (one entry per output channel) for per-channel granularity.
    """

    scale: object
    zero_point: object
    bits: int
    granularity: str = PER_TENSOR

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64)
        z = np.asarray(self.zero_point, dtype=np.int64)
        if int(self.bits) != self.bits or self.bits < 2:
            raise ContractError("bit-width must be an integer >= 2")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise ContractError(f"unknown granularity {self.granularity!r}")
        if self.granularity == PER_TENSOR and (s.ndim or z.ndim):
            raise ContractError("per-tensor QParams need scalar scale and zero point")
        if self.granularity == PER_CHANNEL and (s.ndim != 1 or s.shape != z.shape):
            raise ContractError("per-channel QParams need matching 1-D scale and zero point")
        if np.any(~(s > 0)):
            raise ContractError("scale must be positive")
        if np.any(z < 0) or np.any(z > self.qmax):
            raise ContractError("zero point outside [0, 2^k - 1]")
        s.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "zero_point", z)

    @property
    def qmax(self):
        return 2 ** int(self.bits) - 1

    @property
    def n_channels(self):
        return 1 if self.granularity == PER_TENSOR else self.scale.shape[0]

    def _columns(self, x):
        if self.granularity == PER_TENSOR:
            return self.scale, self.zero_point
        if x.ndim == 0 or x.shape[0] != self.scale.shape[0]:
            raise ContractError("per-channel QParams need the output channel on axis 0")
        shape = (-1,) + (1,) * (x.ndim - 1)
        return self.scale.reshape(shape), self.zero_point.reshape(shape)

    def channel(self, i):
        """Per-tensor QParams of output channel ``i``."""
        if self.granularity == PER_TENSOR:
            return self
        return QParams(float(self.scale[i]), int(self.zero_point[i]), self.bits, PER_TENSOR)


def quantize(fp, q: QParams) -> np.ndarray:
    x = np.asarray(fp, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("cannot quantize non-finite values")
    s, z = q._columns(x)
    return np.clip(np.rint(x / s) + z, 0, q.qmax).astype(np.int64)


def dequantize(ints, q: QParams) -> np.ndarray:
    n = np.asarray(ints)
    if np.any(n < 0) or np.any(n > q.qmax):
        raise ContractError(f"integer codes outside [0, {q.qmax}]")
    s, z = q._columns(n)
    return s * (n.astype(np.float64) - z)


def fake_quantize(x, q: QParams) -> np.ndarray:
    return dequantize(quantize(x, q), q)


def ste_fake_quantize(x: ad.Tensor, q: QParams) -> ad.Tensor:
    """Per-tensor fake quantization on a graph tensor with a straight-through gradient.

    The forward value equals :func:`fake_quantize`; the gradient is that of a
    clamp to the representable range.
    """
    lo = float(q.scale * (0 - q.zero_point))
    hi = float(q.scale * (q.qmax - q.zero_point))
    clipped = ad.clamp(x, lo, hi)
    return ad.add(clipped, ad.Tensor(fake_quantize(x.data, q) - clipped.data))


class Observer:
    """Running min/max recorder, per tensor or per output channel (axis 0)."""

    def __init__(self, per_channel=False):
        self.per_channel = per_channel
        self.min = None
        self.max = None
        self.count = 0

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.per_channel:
            flat = x.reshape(x.shape[0], -1)
            lo, hi = flat.min(axis=1), flat.max(axis=1)
        else:
            lo, hi = x.min(), x.max()
        self.min = lo if self.min is None else np.minimum(self.min, lo)
        self.max = hi if self.max is None else np.maximum(self.max, hi)
        self.count += 1
        return self

    def merge(self, other: "Observer") -> "Observer":
        if other.per_channel != self.per_channel:
            raise ContractError("cannot merge per-tensor and per-channel observers")
        out = Observer(self.per_channel)
        for obs in (self, other):
            if obs.count:
                out.min = obs.min if out.min is None else np.minimum(out.min, obs.min)
                out.max = obs.max if out.max is None else np.maximum(out.max, obs.max)
                out.count += obs.count
        return out


def compute_qparams(
    observer: Observer, bits: int, granularity: Optional[str] = None, storage_dtype=None
) -> QParams:
    """Min/max affine parameters; the observed range is widened to contain 0.

    With ``storage_dtype=np.float32`` the scale is rounded to the nearest
    float32 before the zero point is derived, so a single-precision file
    reproduces the parameters exactly.
    """
    if observer.count == 0:
        raise ContractError("observer has recorded nothing")
    granularity = granularity or (PER_CHANNEL if observer.per_channel else PER_TENSOR)
    lo = np.minimum(np.asarray(observer.min, dtype=np.float64), 0.0)
    hi = np.maximum(np.asarray(observer.max, dtype=np.float64), 0.0)
    qmax = 2 ** int(bits) - 1
    s = (hi - lo) / qmax
    # constant (and denormal-width) ranges fall back to the floor scale
    s = np.where(s < SCALE_FLOOR, SCALE_FLOOR, s)
    if storage_dtype is not None:
        s = np.asarray(s, dtype=storage_dtype).astype(np.float64)
    z = np.clip(np.rint(-lo / s), 0, qmax).astype(np.int64)
    if granularity == PER_TENSOR and s.ndim:
        if s.size != 1:
            raise ContractError("per-tensor QParams from a per-channel observer")
        s, z = s.reshape(()), z.reshape(())
    return QParams(s if s.ndim else float(s), z if z.ndim else int(z), int(bits), granularity)


@dataclass
class FakeQuantState:
    """Pseudo-quantization wrapper: observes, then simulates quantization once enabled."""

    qparams: Optional[QParams] = None
    enabled: bool = False
    observer: Optional[Observer] = None
    observing: bool = False

    def __call__(self, x):
        if self.observing and self.observer is not None:
            self.observer.update(x)
        if not self.enabled or self.qparams is None:
            return x
        return fake_quantize(x, self.qparams)


@dataclass
class QuantLayer:
    """A dense layer with pseudo-quantized input activations and weights.

    ``weight``/``bias`` are the full-precision reference values. Once hardened,
    ``codes`` holds the integer weight grid; rows flagged in ``restored`` are
    served from ``weight`` instead.
    """

    name: str
    weight: np.ndarray
    bias: np.ndarray
    relu: bool
    act_fq: FakeQuantState = field(default_factory=FakeQuantState)
    weight_q: Optional[QParams] = None
    codes: Optional[np.ndarray] = None
    restored: Optional[np.ndarray] = None
    rounding: object = None  # un-hardened rounding state, see reconstruct

    def __post_init__(self):
        if self.restored is None:
            self.restored = np.zeros(self.weight.shape[0], dtype=bool)

    @property
    def bits(self):
        return DISABLED_BITS if self.weight_q is None else int(self.weight_q.bits)

    @property
    def quantized(self):
        return self.weight_q is not None

    @property
    def n_params(self):
        return self.weight.size + self.bias.size

    def effective_weight(self) -> np.ndarray:
        if self.weight_q is None:
            return self.weight
        if self.codes is None:
            w = fake_quantize(self.weight, self.weight_q)
        else:
            w = dequantize(self.codes, self.weight_q)
        if self.restored.any():
            w = np.where(self.restored[:, None], self.weight, w)
        return w

    def forward(self, x):
        return dense_forward(self.act_fq(x), self.effective_weight(), self.bias, self.relu)


class QuantizedModel:
    """Pseudo-quantized copy of a trained detector (``M_q`` or ``M_q^v``)."""

    def __init__(self, layers: List[QuantLayer], blocks: List[List[int]]):
        self.layers = layers
        self.blocks = blocks
        self.classes_ = np.array([0, 1])

    @classmethod
    def from_detector(cls, detector) -> "QuantizedModel":
        layers = [
            QuantLayer(l.name, l.weight.copy(), l.bias.copy(), l.relu) for l in detector.layers_
        ]
        return cls(layers, [list(b) for b in detector.blocks_])

    def copy(self) -> "QuantizedModel":
        return copy.deepcopy(self)

    @property
    def feature_layer(self):
        return self.blocks[-1][-1]

    def forward(self, X, upto=None):
        h = np.asarray(X, dtype=np.float64)
        if h.ndim == 3:
            h = h.reshape(h.shape[0], -1)
        last = len(self.layers) - 1 if upto is None else upto
        for layer in self.layers[: last + 1]:
            h = layer.forward(h)
        return h

    __call__ = forward

    def layer_inputs(self, X, index):
        """Input to layer ``index`` as seen by that layer, before its act quantizer."""
        return X.reshape(X.shape[0], -1) if index == 0 else self.forward(X, upto=index - 1)

    def decision_function(self, X):
        z = self.forward(X)
        return z[:, 1] - z[:, 0]

    def predict(self, X):
        return np.argmax(self.forward(X), axis=1)

    def predict_proba(self, X):
        z = self.forward(X)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def features(self, X, block_index=-1):
        n = len(self.blocks)
        if not -n <= block_index < n:
            raise ContractError(f"block index {block_index} out of range for {n} blocks")
        return self.forward(X, upto=self.blocks[block_index][-1])

    # bookkeeping ---------------------------------------------------------

    def set_observing(self, flag):
        for layer in self.layers:
            if flag and layer.act_fq.observer is None:
                layer.act_fq.observer = Observer(per_channel=False)
            layer.act_fq.observing = flag

    def freeze_activation_qparams(self, act_bits):
        """Turn observed ranges into activation QParams and enable simulation."""
        for layer in self.layers:
            fq = layer.act_fq
            fq.observing = False
            if act_bits >= DISABLED_BITS:
                fq.enabled = False
                continue
            fq.qparams = compute_qparams(fq.observer, act_bits, PER_TENSOR, STORAGE_DTYPE)
            fq.enabled = True

    def average_weight_bits(self):
        num = sum(l.bits * l.n_params for l in self.layers)
        return num / sum(l.n_params for l in self.layers)

    @property
    def hardened(self):
        return all(l.codes is not None for l in self.layers if l.quantized)

    @property
    def restored_channels(self):
        return int(sum(l.restored.sum() for l in self.layers))


def weight_qparams(weight, bits) -> Optional[QParams]:
    """Per-output-channel min/max QParams for a weight matrix; None when disabled."""
    if bits >= DISABLED_BITS:
        return None
    return compute_qparams(Observer(per_channel=True).update(weight), bits, PER_CHANNEL, STORAGE_DTYPE)


def calibrate(model: QuantizedModel, calibration_X, act_bits, batch_size=256):
    """Observe activations on the calibration inputs, then freeze and enable them."""
    model.set_observing(True)
    X = np.asarray(calibration_X, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    for start in range(0, X.shape[0], batch_size):
        model.forward(X[start : start + batch_size])
    model.freeze_activation_qparams(act_bits)
    return model


def rtn_quantize_model(model, calibration_set, weight_bits, act_bits=8) -> QuantizedModel:
    """Round-to-nearest baseline: observers, then min/max QParams, no optimization.

    ``weight_bits`` may be one integer or one per layer. Bit-widths of 32 or
    more leave the corresponding target in full precision.
    """
    qm = model.copy() if isinstance(model, QuantizedModel) else QuantizedModel.from_detector(model)
    X = calibration_set.X if hasattr(calibration_set, "X") else np.asarray(calibration_set)
    if len(X) == 0:
        raise ContractError("calibration set is empty")
    calibrate(qm, X, act_bits)
    bits = [weight_bits] * len(qm.layers) if np.isscalar(weight_bits) else list(weight_bits)
    if len(bits) != len(qm.layers):
        raise ContractError("one bit-width per layer required")
    for layer, k in zip(qm.layers, bits):
        layer.weight_q = weight_qparams(layer.weight, int(k))
        layer.codes = None if layer.weight_q is None else quantize(layer.weight, layer.weight_q)
    return qm
