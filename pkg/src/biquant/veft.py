"""Channel restoration and contrastive fine-tuning of quantization parameters.

A small random subset of output channels per block is served from the
full-precision weights, giving a mixed-precision model. The quantized model's
scales, zero points and rounding variables are then tuned so its features
move toward the full-precision features, using an InfoNCE loss whose positive
blends the quantized and mixed-precision features with a weight that grows
over the epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError, OptimizationError
from .fakequant import STORAGE_DTYPE, QParams, QuantizedModel, ste_fake_quantize
from .optim import Adam
from .reconstruct import h_rect

DEFAULT_RHO = 0.1
DEFAULT_TAU = 0.2


@dataclass(frozen=True)
class ChannelMask:
    block_id: int
    layer_index: int
    channels: tuple
    rho: float
    epoch: int
    seed: int

    def as_bool(self, n_channels):
        m = np.zeros(n_channels, dtype=bool)
        m[list(self.channels)] = True
        return m


def restore_count(c_out, rho):
    # half-to-even on exact halves, consistent with the quantizer rounding
    return int(min(c_out, max(1, np.rint(rho * c_out))))


def select_restore_channels(
    model: QuantizedModel, block_id, rho=DEFAULT_RHO, epoch=0, seed=0, fixed=False
) -> List[ChannelMask]:
    """One mask per layer of block ``block_id``, drawn from a ``(seed, epoch, block, layer)`` stream.

    With ``fixed=True`` every epoch gets the epoch-0 draw.
    """
    if not 0 < rho <= 1:
        raise ContractError("rho must lie in (0, 1]")
    if not 0 <= block_id < len(model.blocks):
        raise ContractError(f"unknown block {block_id}")
    draw_epoch = 0 if fixed else epoch
    masks = []
    for pos, li in enumerate(model.blocks[block_id]):
        c_out = model.layers[li].weight.shape[0]
        rng = np.random.default_rng([seed, draw_epoch, block_id, pos])
        chosen = np.sort(rng.choice(c_out, size=restore_count(c_out, rho), replace=False))
        masks.append(ChannelMask(block_id, li, tuple(int(c) for c in chosen), rho, epoch, seed))
    return masks


def sample_masks(model: QuantizedModel, rho=DEFAULT_RHO, epoch=0, seed=0, fixed=False) -> List[ChannelMask]:
    out = []
    for b in range(len(model.blocks)):
        out.extend(select_restore_channels(model, b, rho, epoch, seed, fixed))
    return out


def build_mixed_model(M_q: QuantizedModel, masks: List[ChannelMask]) -> QuantizedModel:
    """Copy of ``M_q`` whose masked rows (weights and bias) are served in full precision."""
    block_layers = {li for block in M_q.blocks for li in block}
    seen = set()
    mixed = M_q.copy()
    for m in masks:
        if m.layer_index not in block_layers or not 0 <= m.block_id < len(M_q.blocks):
            raise ContractError(f"mask references unknown block {m.block_id} / layer {m.layer_index}")
        if m.layer_index in seen:
            raise ContractError(f"layer {m.layer_index} is masked more than once")
        seen.add(m.layer_index)
        layer = mixed.layers[m.layer_index]
        layer.restored = m.as_bool(layer.weight.shape[0])
    return mixed


@dataclass(frozen=True)
class ProgressiveSchedule:
    T: int
    t: int = 0

    def __post_init__(self):
        if self.T < 0 or self.t < 0:
            raise ContractError("epochs must be nonnegative")
        if self.t > self.T:
            raise ContractError(f"epoch {self.t} exceeds T = {self.T}")

    @property
    def w(self):
        return 1.0 if self.T == 0 else self.t / self.T


def combine_positives(x_pos1, x_pos2, schedule):
    """``w * x_pos2 + (1 - w) * x_pos1``; exact at both endpoints for finite inputs.

    Works on arrays and on graph tensors. ``schedule`` is a
    :class:`ProgressiveSchedule` or a weight in [0, 1].
    """
    w = schedule.w if isinstance(schedule, ProgressiveSchedule) else float(schedule)
    graph = isinstance(x_pos1, ad.Tensor) or isinstance(x_pos2, ad.Tensor)
    a = x_pos1 if isinstance(x_pos1, ad.Tensor) else ad.Tensor(x_pos1)
    b = x_pos2 if isinstance(x_pos2, ad.Tensor) else ad.Tensor(x_pos2)
    if a.shape != b.shape:
        raise ContractError("positives differ in shape")
    out = ad.add(ad.mul(b, w), ad.mul(a, 1.0 - w))
    return out if graph else out.data.copy()


@dataclass
class ContrastiveBatch:
    """Anchors ``(n, d)``, negatives ``(n, K, d)`` and the temperature."""

    anchor: object
    negatives: object
    tau: float = DEFAULT_TAU
    x_pos1: object = None
    x_pos2: object = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError("temperature must be positive")
        a = np.shape(self.anchor.data if isinstance(self.anchor, ad.Tensor) else self.anchor)
        n = np.shape(self.negatives.data if isinstance(self.negatives, ad.Tensor) else self.negatives)
        if len(a) != 2 or len(n) != 3 or n[0] != a[0] or n[2] != a[1] or n[1] < 1:
            raise ContractError("need anchors (n, d) and negatives (n, K, d) with K >= 1")

    @property
    def K(self):
        return np.shape(self.negatives.data if isinstance(self.negatives, ad.Tensor) else self.negatives)[1]

    @classmethod
    def in_batch(cls, anchor, tau=DEFAULT_TAU, **kw):
        """Negatives of sample ``i`` are the anchors of every other sample."""
        A = np.asarray(anchor, dtype=np.float64)
        n = A.shape[0]
        if n < 2:
            raise ContractError("in-batch negatives need at least two samples")
        others = np.array([[j for j in range(n) if j != i] for i in range(n)])
        return cls(A, A[others], tau, **kw)


def loss_from_similarities(sim_pos, sim_neg, tau) -> ad.Tensor:
    """Batch mean of ``log(e^{p/tau} + sum_k e^{n_k/tau}) - p/tau``.

    ``sim_pos`` has shape ``(n,)``; ``sim_neg`` is ``(n, K)`` constants or a
    flat ``(n*K,)`` graph tensor in row-major order.
    """
    if not tau > 0:
        raise ContractError("temperature must be positive")
    pos = sim_pos if isinstance(sim_pos, ad.Tensor) else ad.Tensor(sim_pos)
    n = pos.shape[0]
    neg = sim_neg if isinstance(sim_neg, ad.Tensor) else ad.Tensor(np.asarray(sim_neg, dtype=np.float64).ravel())
    K = neg.shape[0] // n
    # per-sample sums of the negative terms through a (n, n*K) selection matrix
    gather = np.kron(np.eye(n), np.ones((1, K)))
    neg_sum = ad.matmul(gather, ad.exp(ad.div(neg, tau)))
    scaled = ad.div(pos, tau)
    per_sample = ad.sub(ad.log(ad.add(ad.exp(scaled), neg_sum)), scaled)
    return ad.mean(per_sample)


def loss_ver(batch: ContrastiveBatch, x_comb) -> ad.Tensor:
    """Contrastive loss of blended positives against in-batch negatives (cosine similarity)."""
    A = batch.anchor if isinstance(batch.anchor, ad.Tensor) else ad.Tensor(batch.anchor)
    C = x_comb if isinstance(x_comb, ad.Tensor) else ad.Tensor(x_comb)
    if C.shape != A.shape:
        raise ContractError("blended positives and anchors differ in shape")
    n, d = A.shape
    K = batch.K
    negs = batch.negatives
    if isinstance(negs, ad.Tensor) and negs.ndim == 3:
        if negs.record is not None:
            raise ContractError("graph-valued negatives must be given flattened to (n*K, d)")
        negs = negs.data
    if not isinstance(negs, ad.Tensor):
        negs = ad.Tensor(np.asarray(negs, dtype=np.float64).reshape(n * K, d))
    # anchor i repeated K times via a (n*K, n) selection matrix
    tiled = ad.matmul(np.kron(np.eye(n), np.ones((K, 1))), A)
    sim_pos = ad.cosine_similarity(A, C)
    sim_neg = ad.cosine_similarity(tiled, negs)
    return loss_from_similarities(sim_pos, sim_neg, batch.tau)


# -- fine-tuning ---------------------------------------------------------------


@dataclass
class _LayerParams:
    index: int
    s0: np.ndarray  # (C_out, 1)
    z0: np.ndarray  # (C_out, 1)
    base: np.ndarray
    u: np.ndarray  # log-scale offset (C_out, 1)
    dz: np.ndarray  # continuous zero-point offset (C_out, 1)
    V: np.ndarray
    qmax: int


def _hard_rounding(V: ad.Tensor) -> ad.Tensor:
    """Forward: ``h >= 0.5`` as 0/1. Backward: gradient of ``h(V)``."""
    h = h_rect(V)
    return ad.add(h, ad.Tensor((h.data >= 0.5).astype(np.float64) - h.data))


def _layer_params(model: QuantizedModel, index) -> Optional[_LayerParams]:
    layer = model.layers[index]
    q = layer.weight_q
    if q is None:
        return None
    s0 = q.scale.reshape(-1, 1).astype(np.float64)
    z0 = q.zero_point.reshape(-1, 1).astype(np.float64)
    rv = layer.rounding
    if rv is not None and rv.soft_V is not None:
        base, V = rv.bases[0], rv.soft_V[0].copy()
    else:
        # no soft state (e.g. plain RTN codes): h(+1) and h(-1) sit on either side of 0.5
        base = np.floor(layer.weight / s0)
        V = np.where(np.asarray(layer.codes) - base - z0 >= 1, 1.0, -1.0)
    return _LayerParams(index, s0, z0, base, np.zeros_like(s0), np.zeros_like(z0), V.copy(), q.qmax)


def _graph_weight(lp: _LayerParams, u, dz, V, n_in):
    scale = ad.rows_to_matrix(ad.mul(ad.exp(u), ad.Tensor(lp.s0)), n_in)
    zero = ad.rows_to_matrix(ad.add(dz, ad.Tensor(lp.z0)), n_in)
    grid = ad.clamp(ad.add(ad.add(ad.Tensor(lp.base), _hard_rounding(V)), zero), 0.0, float(lp.qmax))
    return ad.mul(scale, ad.sub(grid, zero))


def _graph_features(model, X, weights, restored=None):
    """Feature-layer output; ``weights[i]`` is a graph weight or None for fixed layers."""
    n = X.shape[0]
    h = ad.Tensor(X)
    for i in range(model.feature_layer + 1):
        layer = model.layers[i]
        if layer.act_fq.enabled:
            h = ste_fake_quantize(h, layer.act_fq.qparams)
        w = weights[i] if weights[i] is not None else ad.Tensor(layer.effective_weight())
        if restored is not None and restored[i] is not None and weights[i] is not None:
            keep = restored[i][:, None]
            w = ad.add(ad.mul(w, ad.Tensor(np.where(keep, 0.0, 1.0) * np.ones_like(layer.weight))),
                       ad.Tensor(np.where(keep, layer.weight, 0.0)))
        h = ad.add(ad.matmul(h, w, transpose_b=True), ad.Tensor(np.broadcast_to(layer.bias, (n, layer.bias.size))))
        if layer.relu:
            h = ad.relu(h)
    return h


@dataclass
class FinetuneResult:
    M_q: QuantizedModel
    M_qv: QuantizedModel
    masks: List[ChannelMask]
    loss_trace: List[float] = field(default_factory=list)  # mean loss per epoch
    mask_history: List[List[ChannelMask]] = field(default_factory=list)


def finetune(
    M_q: QuantizedModel,
    M_f,
    calibration_X,
    T=10,
    rho=DEFAULT_RHO,
    tau=DEFAULT_TAU,
    K=7,
    lr=1e-3,
    seed=0,
    random_mask=True,
) -> FinetuneResult:
    """Tune scales, zero points and rounding of ``M_q`` toward ``M_f`` features.

    Each epoch draws fresh restoration masks (or reuses the epoch-0 draw when
    ``random_mask`` is false), shuffles the calibration set into batches of
    ``K + 1`` and takes one Adam step per batch. Returns the refined ``M_q``
    and the mixed-precision model built from it with the last epoch's masks.
    """
    X = np.asarray(calibration_X, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    batch_size = K + 1
    if K < 1:
        raise ContractError("need at least one negative")
    if X.shape[0] < batch_size:
        raise ContractError(f"calibration set of {X.shape[0]} cannot form a batch of K + 1 = {batch_size}")
    if T == 0:
        masks = sample_masks(M_q, rho, 0, seed, fixed=not random_mask)
        return FinetuneResult(M_q, build_mixed_model(M_q, masks), masks)

    anchors_all = M_f.features(X)
    n_layers = M_q.feature_layer + 1
    params = [_layer_params(M_q, i) for i in range(n_layers)]
    live = [lp for lp in params if lp is not None]
    arrays = [a for lp in live for a in (lp.u, lp.dz, lp.V)]
    opt = Adam(arrays, lr=lr)
    rng = np.random.default_rng([seed, 0x7EF7])
    trace, history = [], []
    masks = []
    for epoch in range(1, T + 1):
        schedule = ProgressiveSchedule(T, epoch)
        masks = sample_masks(M_q, rho, epoch - 1, seed, fixed=not random_mask)
        history.append(masks)
        restored = [None] * n_layers
        for m in masks:
            if m.layer_index < n_layers:
                restored[m.layer_index] = m.as_bool(M_q.layers[m.layer_index].weight.shape[0])
        order = rng.permutation(X.shape[0])
        losses = []
        for start in range(0, X.shape[0] - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            tensors = {}
            weights = [None] * n_layers
            for lp in live:
                u = ad.Tensor(lp.u, requires_grad=True)
                dz = ad.Tensor(lp.dz, requires_grad=True)
                V = ad.Tensor(lp.V, requires_grad=True)
                tensors[lp.index] = (u, dz, V)
                weights[lp.index] = _graph_weight(lp, u, dz, V, M_q.layers[lp.index].weight.shape[1])
            pos1 = _graph_features(M_q, X[idx], weights)
            pos2 = _graph_features(M_q, X[idx], weights, restored)
            comb = combine_positives(pos1, pos2, schedule)
            batch = ContrastiveBatch.in_batch(anchors_all[idx], tau)
            loss = loss_ver(batch, comb)
            if not np.isfinite(loss.item()):
                raise OptimizationError(f"contrastive loss is not finite in epoch {epoch}", step=epoch)
            grads = ad.backward(loss)
            flat = []
            for lp in live:
                for t in tensors[lp.index]:
                    g = grads.get(t)
                    flat.append(np.zeros_like(t.data) if g is None else g.data)
            opt.step(flat)
            losses.append(loss.item())
        trace.append(float(np.mean(losses)))

    refined = M_q.copy()
    for lp in live:
        layer = refined.layers[lp.index]
        s = (lp.s0 * np.exp(lp.u)).ravel().astype(STORAGE_DTYPE).astype(np.float64)
        z = np.clip(np.rint(lp.z0 + lp.dz), 0, lp.qmax).ravel().astype(np.int64)
        up = (h_rect(lp.V).data >= 0.5).astype(np.float64)
        codes = np.clip(lp.base + up + z[:, None], 0, lp.qmax).astype(np.int64)
        layer.weight_q = QParams(s, z, layer.weight_q.bits, layer.weight_q.granularity)
        layer.codes = codes
        layer.rounding = None
    return FinetuneResult(refined, build_mixed_model(refined, masks), masks, trace, history)
