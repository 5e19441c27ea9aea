"""Exact float64 numerics for side-network fine-tuning at toy scale.

A small encoder-only transformer stays frozen and emits ``b_0..b_L``
(``b_0`` is the embedding output, ``b_i`` the output of layer ``i``). The
trainable side network reads those tensors and never sends gradients back
into the backbone:

    a_0 = b_0 W_down
    u_i = a_{i-1} + b_i D_i
    h_i = tanh(u_i W1_i)
    a_i = a_{i-1} + h_i W2_i                  i = 1..L
    o   = a_L W_up + b_L
    p   = mean over tokens of o
    logits = p W_head,  loss = softmax cross-entropy

Backbone layers use parameter-free pre-norm, multi-head self-attention and a
ReLU FFN; positions are sinusoidal. Every matmul is recorded in a
:class:`Census` as ``2 p q r`` FLOPs under the phase it belongs to, and the
tensors kept for the backward pass are tallied in bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cache_store import CacheMissError, CacheStore, sample_id
from .model_cost import ModelSpec, reference_spec

PARAM_NAMES = ("W_down", "D", "W1", "W2", "W_up", "W_head")
LN_EPS = 1e-5
PHASES = ("backbone_fwd", "backbone_fwd_attention", "backbone_bwd", "adapter_fwd", "adapter_bwd")


# ---------------------------------------------------------------------------
# instrumentation

@dataclass
class Census:
    """FLOP counts per phase and bytes of tensors retained for backward."""

    flops: dict = field(default_factory=lambda: {p: 0 for p in PHASES})
    retained_bytes: int = 0
    peak_retained_bytes: int = 0
    backbone_forward_calls: int = 0

    def matmul(self, phase: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        p, q = a.shape
        q2, r = b.shape
        if q != q2:
            raise ValueError(f"matmul shape mismatch {a.shape} x {b.shape}")
        self.flops[phase] += 2 * p * q * r
        return a @ b

    def retain(self, *arrays: np.ndarray) -> None:
        """Tensors stay counted until :meth:`release_all`, i.e. for a whole
        mini-batch, as if its samples went through one batched pass."""
        self.retained_bytes += sum(x.nbytes for x in arrays)
        self.peak_retained_bytes = max(self.peak_retained_bytes, self.retained_bytes)

    def release_all(self) -> None:
        self.retained_bytes = 0

    def to_dict(self) -> dict:
        return {"flops": dict(self.flops), "peak_retained_bytes": self.peak_retained_bytes,
                "backbone_forward_calls": self.backbone_forward_calls}


def _mm(census: Census | None, phase: str, a, b):
    return census.matmul(phase, a, b) if census is not None else a @ b


# ---------------------------------------------------------------------------
# backbone

@dataclass(frozen=True)
class LayerWeights:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    W1: np.ndarray
    W2: np.ndarray


@dataclass(frozen=True)
class BackboneState:
    spec: ModelSpec
    embedding: np.ndarray
    layers: tuple[LayerWeights, ...]

    def __post_init__(self):
        d = self.spec.hidden_size
        if self.spec.num_decoder_layers:
            raise ValueError("the toy backbone is encoder-only")
        if self.embedding.shape != (self.spec.vocab_size, d):
            raise ValueError("embedding shape does not match the model spec")
        if len(self.layers) != self.spec.num_layers:
            raise ValueError("layer count does not match the model spec")
        for arr in self._arrays():
            arr.setflags(write=False)

    def _arrays(self):
        yield self.embedding
        for lw in self.layers:
            yield from (lw.Wq, lw.Wk, lw.Wv, lw.Wo, lw.W1, lw.W2)

    @classmethod
    def random(cls, spec: ModelSpec, seed: int = 0, scale: float | None = None) -> "BackboneState":
        rng = np.random.default_rng(seed)
        d, f = spec.hidden_size, spec.ffn_hidden
        s = scale if scale is not None else 1.0 / np.sqrt(d)
        emb = rng.normal(0.0, 1.0, (spec.vocab_size, d))
        layers = tuple(
            LayerWeights(*(rng.normal(0.0, s, shape) for shape in
                           [(d, d)] * 4 + [(d, f), (f, d)]))
            for _ in range(spec.num_layers))
        return cls(spec, emb, layers)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.spec.fingerprint().encode())
        for arr in self._arrays():
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def positional_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def transformer_layer(x: np.ndarray, w: LayerWeights, num_heads: int,
                      census: Census | None = None) -> np.ndarray:
    n, d = x.shape
    dh = d // num_heads
    ph, pa = "backbone_fwd", "backbone_fwd_attention"
    y = layer_norm(x)
    q, k, v = _mm(census, ph, y, w.Wq), _mm(census, ph, y, w.Wk), _mm(census, ph, y, w.Wv)
    heads = []
    for j in range(num_heads):
        cols = slice(j * dh, (j + 1) * dh)
        scores = _mm(census, pa, q[:, cols], k[:, cols].T) / np.sqrt(dh)
        heads.append(_mm(census, pa, softmax(scores), v[:, cols]))
    x = x + _mm(census, ph, np.concatenate(heads, axis=1), w.Wo)
    y = layer_norm(x)
    hidden = np.maximum(_mm(census, ph, y, w.W1), 0.0)
    return x + _mm(census, ph, hidden, w.W2)


def backbone_forward(backbone: BackboneState, input_ids: Sequence[int],
                     census: Census | None = None) -> list[np.ndarray]:
    """Frozen forward pass returning ``[b_0, ..., b_L]``, each ``n x d``.

    Raises:
        ValueError: empty sequence or a token id outside the vocabulary.
    """
    ids = np.asarray(input_ids)
    spec = backbone.spec
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("input_ids must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= spec.vocab_size:
        raise ValueError(f"token id out of vocabulary range [0, {spec.vocab_size})")
    if census is not None:
        census.backbone_forward_calls += 1
    x = backbone.embedding[ids] + positional_encoding(ids.size, spec.hidden_size)
    outs = [x]
    for w in backbone.layers:
        x = transformer_layer(x, w, spec.num_heads, census)
        outs.append(x)
    return outs


# ---------------------------------------------------------------------------
# side network

@dataclass
class AdapterState:
    W_down: np.ndarray  # d x r
    D: np.ndarray       # L x d x r
    W1: np.ndarray      # L x r x r
    W2: np.ndarray      # L x r x r
    W_up: np.ndarray    # r x d
    W_head: np.ndarray  # d x C

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0, std: float = 0.02) -> "AdapterState":
        d, r, L, C = spec.hidden_size, spec.adapter_hidden, spec.num_layers, spec.num_labels
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, std, (d, r)), rng.normal(0, std, (L, d, r)),
                   rng.normal(0, std, (L, r, r)), rng.normal(0, std, (L, r, r)),
                   rng.normal(0, std, (r, d)), rng.normal(0, std, (d, C)))

    @classmethod
    def zeros_like(cls, other: "AdapterState") -> "AdapterState":
        return cls(**{k: np.zeros_like(v) for k, v in other.params().items()})

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "AdapterState":
        return AdapterState(**{k: v.copy() for k, v in self.params().items()})

    @property
    def num_layers(self) -> int:
        return self.D.shape[0]

    def num_params(self) -> int:
        return sum(v.size for v in self.params().values())


@dataclass
class ForwardState:
    b: list
    a: list
    u: list
    h: list
    p: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def adapters_forward(adapters: AdapterState, b: Sequence[np.ndarray],
                     census: Census | None = None) -> ForwardState:
    """Run the side network on backbone outputs ``b = [b_0..b_L]``."""
    L = adapters.num_layers
    d, r = adapters.W_down.shape
    if len(b) != L + 1:
        raise ValueError(f"expected {L + 1} backbone tensors, got {len(b)}")
    n = b[0].shape[0]
    for t in b:
        if t.shape != (n, d):
            raise ValueError(f"backbone tensor shape {t.shape} != {(n, d)}")
    ph = "adapter_fwd"
    a = [_mm(census, ph, b[0], adapters.W_down)]
    us, hs = [], []
    for i in range(1, L + 1):
        u = a[-1] + _mm(census, ph, b[i], adapters.D[i - 1])
        h = np.tanh(_mm(census, ph, u, adapters.W1[i - 1]))
        a.append(a[-1] + _mm(census, ph, h, adapters.W2[i - 1]))
        us.append(u)
        hs.append(h)
    o = _mm(census, ph, a[-1], adapters.W_up) + b[-1]
    p = o.mean(axis=0, keepdims=True)
    logits = _mm(census, ph, p, adapters.W_head)
    probs = softmax(logits)
    if census is not None:
        census.retain(*b, *us, *hs, a[-1], p, probs)
    return ForwardState(list(b), a, us, hs, p, logits, probs)


def cross_entropy(state: ForwardState, target: int) -> float:
    z = state.logits[0] - state.logits[0].max()
    return float(np.log(np.exp(z).sum()) - z[target])


def adapters_backward(adapters: AdapterState, state: ForwardState, target: int,
                      loss_scale: float = 1.0, census: Census | None = None) -> AdapterState:
    """Gradients of ``loss_scale * cross_entropy`` for the side network only.

    Backbone tensors are treated as constants: no gradient is formed for
    them or for any backbone weight.
    """
    ph = "adapter_bwd"
    L = adapters.num_layers
    n = state.b[0].shape[0]
    dlogits = state.probs.copy()
    dlogits[0, target] -= 1.0
    dlogits *= loss_scale
    grads = AdapterState.zeros_like(adapters)
    grads.W_head = _mm(census, ph, state.p.T, dlogits)
    dp = _mm(census, ph, dlogits, adapters.W_head.T)
    do = np.repeat(dp / n, n, axis=0)
    grads.W_up = _mm(census, ph, state.a[-1].T, do)
    da = _mm(census, ph, do, adapters.W_up.T)
    for i in range(L, 0, -1):
        h, u = state.h[i - 1], state.u[i - 1]
        grads.W2[i - 1] = _mm(census, ph, h.T, da)
        dh = _mm(census, ph, da, adapters.W2[i - 1].T)
        dz = dh * (1.0 - h * h)
        grads.W1[i - 1] = _mm(census, ph, u.T, dz)
        du = _mm(census, ph, dz, adapters.W1[i - 1].T)
        grads.D[i - 1] = _mm(census, ph, state.b[i].T, du)
        da = da + du
    grads.W_down = _mm(census, ph, state.b[0].T, da)
    return grads


def loss_and_grads(adapters: AdapterState, batch_b: Sequence[Sequence[np.ndarray]],
                   targets: Sequence[int], census: Census | None = None):
    """Mean loss and mean gradients over a batch of samples."""
    total = 0.0
    grads = AdapterState.zeros_like(adapters)
    scale = 1.0 / len(targets)
    for b, y in zip(batch_b, targets):
        state = adapters_forward(adapters, b, census)
        total += cross_entropy(state, y)
        g = adapters_backward(adapters, state, y, scale, census)
        for k in PARAM_NAMES:
            getattr(grads, k).__iadd__(getattr(g, k))
    if census is not None:
        census.release_all()
    return total * scale, grads


def sgd_step(adapters: AdapterState, grads: AdapterState, learning_rate: float) -> AdapterState:
    out = adapters.copy()
    for k in PARAM_NAMES:
        getattr(out, k).__isub__(learning_rate * getattr(grads, k))
    return out


# ---------------------------------------------------------------------------
# training

@dataclass
class EpochResult:
    losses: list
    adapters: AdapterState
    census: Census


def _backbone_outputs(backbone, ids, cache, cache_mode, census):
    if cache_mode == "read":
        return cache.get(sample_id(ids))
    b = backbone_forward(backbone, ids, census)
    if cache_mode == "populate":
        cache.put(sample_id(ids), b)
    return b


def train_epoch(adapters: AdapterState, backbone: BackboneState,
                dataset: Sequence[tuple[Sequence[int], int]], cache: CacheStore | None = None,
                learning_rate: float = 0.1, batch_size: int = 4,
                cache_mode: str | None = None) -> EpochResult:
    """One pass of mini-batch SGD over ``dataset`` in its given order.

    ``cache_mode`` is ``"off"``, ``"populate"`` (run the backbone and store
    its outputs) or ``"read"`` (never run the backbone; a missing entry
    raises :class:`CacheMissError`). With a cache and no explicit mode the
    epoch reads if every sample is cached and populates otherwise.
    """
    if cache_mode is None:
        if cache is None:
            cache_mode = "off"
        else:
            present = all(sample_id(ids) in cache for ids, _ in dataset)
            cache_mode = "read" if present else "populate"
    if cache_mode not in ("off", "populate", "read"):
        raise ValueError(f"unknown cache_mode {cache_mode!r}")
    if cache_mode != "off" and cache is None:
        raise CacheMissError(f"cache_mode {cache_mode!r} needs a cache")
    census = Census()
    losses = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        bs = [_backbone_outputs(backbone, ids, cache, cache_mode, census) for ids, _ in chunk]
        loss, grads = loss_and_grads(adapters, bs, [y for _, y in chunk], census)
        adapters = sgd_step(adapters, grads, learning_rate)
        losses.append(loss)
    return EpochResult(losses, adapters, census)


def train(adapters: AdapterState, backbone: BackboneState, dataset, epochs: int,
          cache: CacheStore | None = None, learning_rate: float = 0.1,
          batch_size: int = 4) -> list[EpochResult]:
    """Several epochs; with a cache the first populates and the rest read."""
    results = []
    for epoch in range(epochs):
        mode = "off" if cache is None else ("populate" if epoch == 0 else "read")
        res = train_epoch(adapters, backbone, dataset, cache, learning_rate, batch_size, mode)
        adapters = res.adapters
        results.append(res)
    return results


def make_toy_dataset(spec: ModelSpec, num_samples: int, seq_len: int, seed: int = 0):
    """Two-class task: class ``c`` draws its tokens from half ``c`` of the vocabulary."""
    if spec.num_labels != 2 or spec.vocab_size < 2:
        raise ValueError("toy dataset needs two labels and a vocabulary of at least 2")
    rng = np.random.default_rng(seed)
    half = spec.vocab_size // 2
    data = []
    for i in range(num_samples):
        label = i % 2
        lo, hi = (0, half) if label == 0 else (half, spec.vocab_size)
        data.append((rng.integers(lo, hi, seq_len).tolist(), label))
    return data


# ---------------------------------------------------------------------------
# estimator front-end

class ParallelAdapterClassifier(ClassifierMixin, BaseEstimator):
    """Sequence classifier that trains only a side network on a frozen toy backbone.

    ``X`` holds token ids, one row per sequence. When ``cache_dir`` is set
    the first epoch writes backbone outputs there and later epochs read them.
    """

    def __init__(self, spec="toy", epochs: int = 3, learning_rate: float = 0.2,
                 batch_size: int = 4, seed: int = 0, cache_dir=None):
        self.spec = spec
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.cache_dir = cache_dir

    def _spec(self) -> ModelSpec:
        return reference_spec(self.spec) if isinstance(self.spec, str) else self.spec

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.int64)
        spec = self._spec()
        self.classes_ = unique_labels(y)
        if len(self.classes_) > spec.num_labels:
            raise ValueError(f"{len(self.classes_)} classes but the model spec has {spec.num_labels} labels")
        encoded = np.searchsorted(self.classes_, y)
        self.backbone_ = BackboneState.random(spec, self.seed)
        adapters = AdapterState.init(spec, self.seed + 1)
        data = [(row.tolist(), int(t)) for row, t in zip(X, encoded)]
        cache = None
        if self.cache_dir is not None:
            cache = CacheStore(self.cache_dir, self.backbone_.fingerprint(), spec.num_layers + 1,
                               X.shape[1], spec.hidden_size)
        self.history_ = train(adapters, self.backbone_, data, self.epochs, cache,
                              self.learning_rate, self.batch_size)
        self.adapters_ = self.history_[-1].adapters if self.history_ else adapters
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "adapters_")
        X = check_array(X, dtype=np.int64)
        out = []
        for row in X:
            state = adapters_forward(self.adapters_, backbone_forward(self.backbone_, row))
            out.append(state.probs[0, :len(self.classes_)])
        probs = np.array(out)
        return probs / probs.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
