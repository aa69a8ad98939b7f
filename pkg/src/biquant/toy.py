"""Synthetic subtle-artifact detection task and a small dense detector.

Real images are smooth low-frequency fields. Each fake is its paired real
image plus a faint high-frequency texture confined to one square patch, so the
discriminative cue lives in exactly the kind of fine detail that low-bit
weights wash out.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Optional

import numpy as np
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .errors import AUCUndefinedError, ContractError, FormatError, TrainingError

REAL, FAKE = 0, 1

IMAGE_SIZE = 16
PATCH_SIZE = 8
ARTIFACT_AMPLITUDE = 0.08
_LOW_FREQS = 2  # highest spatial frequency (cycles per image) in real fields
FIELD_AMPLITUDE = 0.45


class ImageSample(NamedTuple):
    pixels: np.ndarray
    label: int
    scene_id: int


@dataclass
class Dataset:
    """Column-oriented sample store; iterate for :class:`ImageSample` views."""

    pixels: np.ndarray  # (n, H, W) float32
    labels: np.ndarray  # (n,) uint8
    scene_ids: np.ndarray  # (n,) int32
    patch_area: int = PATCH_SIZE * PATCH_SIZE

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.scene_ids = np.asarray(self.scene_ids, dtype=np.int32)
        n = len(self.labels)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != n or len(self.scene_ids) != n:
            raise ContractError("dataset columns disagree in length or rank")

    def __len__(self):
        return len(self.labels)

    def __iter__(self) -> Iterator[ImageSample]:
        for p, y, s in zip(self.pixels, self.labels, self.scene_ids):
            yield ImageSample(p, int(y), int(s))

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return ImageSample(self.pixels[idx], int(self.labels[idx]), int(self.scene_ids[idx]))
        idx = np.asarray(idx)
        return Dataset(self.pixels[idx], self.labels[idx], self.scene_ids[idx], self.patch_area)

    @property
    def X(self):
        """Flattened pixels as float64, the detector's input layout."""
        return self.pixels.reshape(len(self), -1).astype(np.float64)

    @property
    def y(self):
        return self.labels.astype(np.int64)

    @property
    def n_scenes(self):
        return int(np.unique(self.scene_ids).size)


def _smooth_field(rng, size):
    coords = np.arange(size) / size
    field_ = np.zeros((size, size))
    for fy in range(_LOW_FREQS + 1):
        for fx in range(_LOW_FREQS + 1):
            if fx == fy == 0:
                continue
            amp = rng.normal() / (1.0 + fx + fy)
            phase = rng.uniform(0, 2 * np.pi)
            field_ += amp * np.cos(2 * np.pi * (fx * coords[None, :] + fy * coords[:, None]) + phase)
    return field_ / max(np.abs(field_).max(), 1e-12)


def _texture(rng, patch):
    """Nyquist-band texture: a checkerboard carrier under a random envelope.

    Mimics the periodic upsampling fingerprint of synthesized faces. Peak
    magnitude is at most 1; the per-sample strength spreads fakes from faint
    to clear so some sit close to the decision boundary.
    """
    i = np.arange(patch)
    carrier = (-1.0) ** (i[:, None] + i[None, :])
    envelope = rng.uniform(0.3, 1.0, size=(patch, patch))
    return rng.uniform(0.15, 1.0) * carrier * envelope


def generate_dataset(
    seed: int,
    n_samples: int,
    n_scenes: int,
    image_size: int = IMAGE_SIZE,
    patch_size: int = PATCH_SIZE,
    amplitude: float = ARTIFACT_AMPLITUDE,
) -> Dataset:
    """Generate ``n_samples`` images, half real and half fake, in real/fake pairs.

    Pairs are assigned to scenes round-robin; every image of a scene shares the
    scene's base field. Output is a pure function of the arguments.
    """
    if n_samples % 2:
        raise ContractError("n_samples must be even")
    if n_scenes < 2:
        raise ContractError("n_scenes must be >= 2")
    if not 0 < amplitude <= 0.15:
        raise ContractError("artifact amplitude must lie in (0, 0.15]")
    rng = np.random.default_rng(seed)
    bases = [_smooth_field(rng, image_size) for _ in range(n_scenes)]
    n_pairs = n_samples // 2
    pixels = np.empty((n_samples, image_size, image_size), dtype=np.float32)
    labels = np.empty(n_samples, dtype=np.uint8)
    scenes = np.empty(n_samples, dtype=np.int32)
    for i in range(n_pairs):
        scene = i % n_scenes
        own = _smooth_field(rng, image_size)
        real = 0.5 + FIELD_AMPLITUDE * (0.6 * bases[scene] + 0.4 * own)
        fake = real.copy()
        top, left = rng.integers(0, image_size - patch_size + 1, size=2)
        fake[top : top + patch_size, left : left + patch_size] += amplitude * _texture(rng, patch_size)
        pixels[2 * i] = np.clip(real, 0.0, 1.0)
        pixels[2 * i + 1] = np.clip(fake, 0.0, 1.0)
        labels[2 * i], labels[2 * i + 1] = REAL, FAKE
        scenes[2 * i] = scenes[2 * i + 1] = scene
    return Dataset(pixels, labels, scenes, patch_size * patch_size)


# -- BQDS flat binary format ------------------------------------------------

_BQDS_MAGIC = b"BQDS"
_BQDS_VERSION = 1
_BQDS_HEADER = struct.Struct("<4sHIHH")


def save_dataset(dataset: Dataset, path) -> None:
    """Write the dataset as header + (label u8, scene i32, H*W float32) records."""
    n, h, w = dataset.pixels.shape
    rec = np.dtype([("label", "u1"), ("scene", "<i4"), ("pixels", "<f4", (h * w,))])
    arr = np.empty(n, dtype=rec)
    arr["label"] = dataset.labels
    arr["scene"] = dataset.scene_ids
    arr["pixels"] = dataset.pixels.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(_BQDS_HEADER.pack(_BQDS_MAGIC, _BQDS_VERSION, n, h, w))
        fh.write(arr.tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _BQDS_HEADER.size:
        raise FormatError("dataset file truncated")
    magic, version, n, h, w = _BQDS_HEADER.unpack_from(raw)
    if magic != _BQDS_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != _BQDS_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    rec = np.dtype([("label", "u1"), ("scene", "<i4"), ("pixels", "<f4", (h * w,))])
    body = raw[_BQDS_HEADER.size :]
    if len(body) != n * rec.itemsize:
        raise FormatError("dataset payload length does not match header")
    arr = np.frombuffer(body, dtype=rec)
    return Dataset(arr["pixels"].reshape(n, h, w).copy(), arr["label"].copy(), arr["scene"].copy())


def split_dataset(dataset: Dataset, fractions=(0.7, 0.1, 0.2), seed=0):
    """Seeded train/val/test split that never separates a real/fake pair.

    Samples ``2i`` and ``2i + 1`` form a pair, as laid out by
    :func:`generate_dataset` and preserved by the BQDS format.
    """
    if len(fractions) != 3 or not np.isclose(sum(fractions), 1.0) or min(fractions) < 0:
        raise ContractError("split fractions must be three non-negative numbers summing to 1")
    if len(dataset) % 2:
        raise ContractError("paired dataset must have an even number of samples")
    n_pairs = len(dataset) // 2
    order = np.random.default_rng(seed).permutation(n_pairs)
    n_train = int(round(fractions[0] * n_pairs))
    n_val = int(round(fractions[1] * n_pairs))

    def take(pairs):
        return dataset[np.stack([2 * pairs, 2 * pairs + 1], axis=1).reshape(-1)]

    return take(order[:n_train]), take(order[n_train : n_train + n_val]), take(order[n_train + n_val :])


# -- detector ---------------------------------------------------------------


@dataclass
class Dense:
    weight: np.ndarray  # (C_out, C_in)
    bias: np.ndarray  # (C_out,)
    relu: bool
    name: str = ""

    @property
    def n_params(self):
        return self.weight.size + self.bias.size


def dense_forward(x, weight, bias, relu):
    """Shared inference kernel; every float path in the package goes through it."""
    y = x @ weight.T + bias
    return np.maximum(y, 0.0) if relu else y


def _as_float32_exact(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.05
    split: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        if not np.isclose(sum(self.split), 1.0):
            raise ContractError("split fractions must sum to 1")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ContractError("invalid training configuration")


class ToyDetector(ClassifierMixin, BaseEstimator):
    """Block-structured dense detector trained by plain mini-batch SGD.

    Layout: a stem ``input -> width``, ``n_blocks`` blocks of
    ``layers_per_block`` dense ``width -> width`` + ReLU layers, and a linear
    head ``width -> 2``. Weights are stored as float32-exact float64 values so
    a packed fp32 copy is lossless.

    Parameters
    ----------
    width : int
        Hidden feature width; also the contrastive feature dimension.
    n_blocks, layers_per_block : int
        Block structure exposed to the channel-restoration stage.
    epochs, batch_size, learning_rate : training schedule.
    input_offset, input_scale : float
        Training sees ``(x - input_offset) * input_scale``; the affine map is
        folded into the stem afterwards, so the fitted model consumes raw
        pixels.
    random_state : int
        Seeds initialization and batch order.
    """

    def __init__(
        self,
        width=64,
        n_blocks=4,
        layers_per_block=1,
        epochs=100,
        batch_size=32,
        learning_rate=0.05,
        input_offset=0.5,
        input_scale=4.0,
        random_state=0,
    ):
        self.width = width
        self.n_blocks = n_blocks
        self.layers_per_block = layers_per_block
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.input_offset = input_offset
        self.input_scale = input_scale
        self.random_state = random_state

    # structure ------------------------------------------------------------

    def _init_layers(self, n_in, rng):
        def he(c_out, c_in):
            return rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_out, c_in))

        layers = [Dense(he(self.width, n_in), np.zeros(self.width), True, "stem")]
        blocks = []
        for b in range(self.n_blocks):
            idx = []
            for j in range(self.layers_per_block):
                idx.append(len(layers))
                layers.append(Dense(he(self.width, self.width), np.zeros(self.width), True, f"block{b}.{j}"))
            blocks.append(idx)
        layers.append(Dense(rng.normal(0.0, np.sqrt(1.0 / self.width), size=(2, self.width)), np.zeros(2), False, "head"))
        return layers, blocks

    @property
    def feature_dim(self):
        return self.width

    def initialize(self, n_features):
        """Create initial weights without training (also the zero-epoch result)."""
        rng = np.random.default_rng(self.random_state)
        self.layers_, self.blocks_ = self._init_layers(n_features, rng)
        self.classes_ = np.array([REAL, FAKE])
        self.n_features_in_ = n_features
        self.history_ = []
        self._fold_input_map()
        return rng

    def _fold_input_map(self):
        stem = self.layers_[0]
        w = stem.weight * self.input_scale
        stem.bias = stem.bias - self.input_offset * w.sum(axis=1)
        stem.weight = w
        for layer in self.layers_:
            layer.weight = _as_float32_exact(layer.weight)
            layer.bias = _as_float32_exact(layer.bias)

    def _unfold_input_map(self):
        stem = self.layers_[0]
        stem.bias = stem.bias + self.input_offset * stem.weight.sum(axis=1)
        stem.weight = stem.weight / self.input_scale

    # training ---------------------------------------------------------------

    def fit(self, X, y):
        X, y = check_X_y(_flatten(X), y, dtype=np.float64)
        if set(np.unique(y)) - {REAL, FAKE}:
            raise ContractError("labels must be 0 (real) or 1 (fake)")
        rng = self.initialize(X.shape[1])
        if self.epochs == 0:
            return self
        self._unfold_input_map()
        Xn = (X - self.input_offset) * self.input_scale
        params = [
            (ad.Tensor(l.weight, requires_grad=True), ad.Tensor(l.bias[None, :], requires_grad=True))
            for l in self.layers_
        ]
        onehot = np.eye(2)[y]
        n = len(y)
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, self.batch_size):
                bi = order[start : start + self.batch_size]
                loss = _cross_entropy(self._graph_forward(params, Xn[bi]), onehot[bi])
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"loss diverged in epoch {epoch}", epoch=epoch)
                grads = ad.backward(loss)
                params = [
                    (
                        ad.Tensor(w.data - self.learning_rate * grads[w].data, requires_grad=True),
                        ad.Tensor(b.data - self.learning_rate * grads[b].data, requires_grad=True),
                    )
                    for w, b in params
                ]
                if not all(np.isfinite(w.data).all() and np.isfinite(b.data).all() for w, b in params):
                    raise TrainingError(f"parameters became non-finite in epoch {epoch}", epoch=epoch)
                losses.append(loss.item() * len(bi))
            acc = float(np.mean(np.argmax(self._graph_forward(params, Xn).data, axis=1) == y))
            self.history_.append({"epoch": epoch + 1, "loss": float(np.sum(losses) / n), "accuracy": acc})
        for layer, (w, b) in zip(self.layers_, params):
            layer.weight = w.data.copy()
            layer.bias = b.data[0].copy()
        self._fold_input_map()
        return self

    def _graph_forward(self, params, X):
        h = ad.Tensor(X)
        n = X.shape[0]
        for layer, (w, b) in zip(self.layers_, params):
            h = ad.add(ad.matmul(h, w, transpose_b=True), ad.tile_rows(b, n))
            if layer.relu:
                h = ad.relu(h)
        return h

    # inference ----------------------------------------------------------------

    def forward(self, X, upto=None):
        """Logits, or the output of layer index ``upto`` when given."""
        check_is_fitted(self, "layers_")
        h = check_array(_flatten(X), dtype=np.float64)
        last = len(self.layers_) - 1 if upto is None else upto
        for layer in self.layers_[: last + 1]:
            h = dense_forward(h, layer.weight, layer.bias, layer.relu)
        return h

    def decision_function(self, X):
        logits = self.forward(X)
        return logits[:, 1] - logits[:, 0]

    def predict_proba(self, X):
        return _softmax(self.forward(X))

    def predict(self, X):
        return np.argmax(self.forward(X), axis=1)

    def features(self, X, block_index=-1):
        check_is_fitted(self, "layers_")
        return extract_features(self, X, block_index)

    @property
    def n_params(self):
        return sum(l.n_params for l in self.layers_)


def _flatten(X):
    X = np.asarray(X)
    return X.reshape(X.shape[0], -1) if X.ndim == 3 else X


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits, onehot):
    p = ad.softmax(logits)
    picked = ad.tsum(ad.mul(p, ad.Tensor(onehot)), axis=1)
    return ad.mean(ad.mul(ad.log(ad.clamp(picked, 1e-12, 1.0)), -1.0))


def train_fp(detector: ToyDetector, dataset: Dataset, config: Optional[TrainConfig] = None):
    """Train ``detector`` on ``dataset``; returns ``(detector, history)``."""
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if config is not None:
        detector.set_params(
            epochs=config.epochs,
            batch_size=config.batch_size,
            learning_rate=config.learning_rate,
            random_state=config.seed,
        )
    detector.fit(dataset.X, dataset.y)
    return detector, list(detector.history_)


def _fake_scores(model, X):
    if hasattr(model, "decision_function"):
        return np.asarray(model.decision_function(X))
    logits = np.asarray(model(X))
    return logits[:, 1] - logits[:, 0]


def roc_auc(scores, labels) -> float:
    """AUC as the Mann-Whitney rank statistic (ties count one half)."""
    labels = np.asarray(labels)
    pos = labels == FAKE
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise AUCUndefinedError("AUC is undefined for a single-class label set")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate(model, dataset: Dataset) -> dict:
    """Accuracy at argmax and rank AUC over fake-class scores.

    ``model`` is anything with ``decision_function``/``predict``, or a callable
    mapping flattened inputs to ``(n, 2)`` logits.
    """
    X, y = dataset.X, dataset.y
    scores = _fake_scores(model, X)
    predicted = model.predict(X) if hasattr(model, "predict") else (scores > 0).astype(int)
    accuracy = float(np.mean(predicted == y))
    try:
        auc = roc_auc(scores, y)
    except AUCUndefinedError as exc:
        exc.accuracy = accuracy
        raise
    return {"accuracy": accuracy, "auc": auc}


def extract_features(detector, X, block_index=-1) -> np.ndarray:
    """Output of the last layer of block ``block_index`` (negative indexes allowed)."""
    n_blocks = len(detector.blocks_)
    if not -n_blocks <= block_index < n_blocks:
        raise ContractError(f"block index {block_index} out of range for {n_blocks} blocks")
    layer_idx = detector.blocks_[block_index][-1]
    return detector.forward(X, upto=layer_idx)
