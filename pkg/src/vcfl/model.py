"""The two networks and their hand-written forward/backward passes.

Extractor: pixels -> 256 -> 128 -> D embedding (ReLU hidden, linear out).
View classifier: D -> 32 -> 5 logits. Classes 0..3 are the four camera
views; class 4 is the shared "common view" target the embedding is pushed
toward during confusion training.

Both are plain fully-connected stacks over float64 numpy arrays; gradients
are exact and checked against central finite differences in the tests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, ValidationError
from .numcore import assert_finite, rng_stream, softmax

NUM_VIEW_CLASSES = 5   # 4 views + the common-view class
COMMON_VIEW_CLASS = 4

STREAM_INIT_EXTRACTOR = 6_000_001
STREAM_INIT_CLASSIFIER = 6_000_002

CHECKPOINT_MAGIC = b"VCFLCKP1"
CHECKPOINT_VERSION = 1


@dataclass
class Mlp:
    """Weights and biases of one fully-connected stack.

    weights[i] has shape (in_dim, out_dim); hidden layers are rectified,
    the final layer is linear.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def tensors(self) -> list[np.ndarray]:
        """Interleaved [w0, b0, w1, b1, ...]; the in-place update surface."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def checksum(self) -> bytes:
        h = hashlib.sha256()
        for t in self.tensors():
            h.update(t.tobytes())
        return h.digest()


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations for one forward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)


def init_mlp(layer_sizes: list[int], rng: np.random.Generator) -> Mlp:
    """He-style init: weights ~ N(0, 2/fan_in), biases zero."""
    if any(s < 1 for s in layer_sizes):
        raise ValidationError(f"layer sizes must all be >= 1, got {layer_sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def init_extractor(input_dim: int, feature_dim: int, seed: int,
                   hidden: tuple[int, int] = (256, 128)) -> Mlp:
    sizes = [input_dim, hidden[0], hidden[1], feature_dim]
    return init_mlp(sizes, rng_stream(seed, STREAM_INIT_EXTRACTOR))


def init_classifier(feature_dim: int, seed: int, hidden: int = 32) -> Mlp:
    sizes = [feature_dim, hidden, NUM_VIEW_CLASSES]
    return init_mlp(sizes, rng_stream(seed, STREAM_INIT_CLASSIFIER))


def mlp_forward(params: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    assert_finite(x, "network input")
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"input shape {x.shape} does not match layer 0 "
                         f"input dim {params.input_dim}")
    cache = ForwardCache()
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(a)
        z = a @ w + b
        cache.pre_activations.append(z)
        a = z if i == last else np.maximum(z, 0.0)
    return a, cache


def mlp_backward(params: Mlp, cache: ForwardCache,
                 d_output: np.ndarray) -> tuple[MlpGrads, np.ndarray]:
    """Exact gradients for every weight/bias plus the input gradient."""
    d_output = np.asarray(d_output, dtype=np.float64)
    if d_output.shape != cache.pre_activations[-1].shape:
        raise ValueError(f"upstream gradient shape {d_output.shape} does not match "
                         f"output shape {cache.pre_activations[-1].shape}")
    n_layers = len(params.weights)
    d_weights: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    d_biases: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    dz = d_output
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            dz = dz * (cache.pre_activations[i] > 0.0)
        d_weights[i] = cache.inputs[i].T @ dz
        d_biases[i] = dz.sum(axis=0)
        dz = dz @ params.weights[i].T
    return MlpGrads(d_weights, d_biases), dz


def extractor_forward(extractor: Mlp, images: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    return mlp_forward(extractor, images)


def extractor_backward(extractor: Mlp, cache: ForwardCache,
                       d_features: np.ndarray) -> MlpGrads:
    grads, _ = mlp_backward(extractor, cache, d_features)
    return grads


def classifier_forward(classifier: Mlp,
                       features: np.ndarray) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    logits, cache = mlp_forward(classifier, features)
    return logits, softmax(logits, axis=1), cache


def _one_hot_targets(targets: np.ndarray, n: int, mode: str) -> np.ndarray:
    if mode == "common":
        idx = np.full(n, COMMON_VIEW_CLASS, dtype=np.int64)
    elif mode == "true":
        idx = np.asarray(targets, dtype=np.int64)
        if idx.shape != (n,):
            raise ValueError(f"expected {n} targets, got shape {idx.shape}")
        if idx.min() < 0 or idx.max() >= COMMON_VIEW_CLASS:
            raise ValueError(f"true-view targets must lie in 0..{COMMON_VIEW_CLASS - 1}, "
                             f"got range [{idx.min()}, {idx.max()}]")
    else:
        raise ValueError(f"unknown classifier mode {mode!r} (use 'true' or 'common')")
    one_hot = np.zeros((n, NUM_VIEW_CLASSES))
    one_hot[np.arange(n), idx] = 1.0
    return one_hot


def classifier_backward(classifier: Mlp, cache: ForwardCache,
                        targets: np.ndarray | None,
                        mode: str) -> tuple[MlpGrads, np.ndarray]:
    """Gradients of mean cross-entropy against 'true' views or the 'common' class.

    Returns (parameter grads, gradient w.r.t. the input features). The
    feature gradient is what lets the confusion term reach the extractor
    while the classifier parameters stay frozen.
    """
    logits = cache.pre_activations[-1]
    n = logits.shape[0]
    probs = softmax(logits, axis=1)
    one_hot = _one_hot_targets(targets, n, mode)
    d_logits = (probs - one_hot) / n
    return mlp_backward(classifier, cache, d_logits)


def classifier_input_gradient(classifier: Mlp, cache: ForwardCache, mode: str) -> np.ndarray:
    """Only the feature-side gradient; the extractor phase asks for nothing else."""
    _, d_features = classifier_backward(classifier, cache, None, mode)
    return d_features


# ---------------------------------------------------------------------------
# Checkpoint format: magic, u32 version, u64 step, then named float64 tensors
# (u32 name length, UTF-8 name, u32 rank, u32 dims, little-endian payload).
# ---------------------------------------------------------------------------


def _write_tensor(f, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(np.array([len(encoded)], dtype="<u4").tobytes())
    f.write(encoded)
    arr = np.ascontiguousarray(array, dtype="<f8")
    f.write(np.array([arr.ndim], dtype="<u4").tobytes())
    f.write(np.array(arr.shape, dtype="<u4").tobytes())
    f.write(arr.tobytes())


def _read_exact(f, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise DataFormatError(f"truncated checkpoint: expected {count} bytes for {what} "
                              f"at byte offset {f.tell() - len(data)}")
    return data


def save_tensors(path: str, step: int, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.array([CHECKPOINT_VERSION], dtype="<u4").tobytes())
        f.write(np.array([step], dtype="<u8").tobytes())
        for name, array in tensors.items():
            _write_tensor(f, name, array)


def load_tensors(path: str) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(
                f"bad checkpoint magic at byte offset 0: expected {CHECKPOINT_MAGIC!r}, got {magic!r}"
            )
        version = int(np.frombuffer(_read_exact(f, 4, "version"), dtype="<u4")[0])
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}, "
                                  f"expected {CHECKPOINT_VERSION}")
        step = int(np.frombuffer(_read_exact(f, 8, "step"), dtype="<u8")[0])
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataFormatError(f"truncated checkpoint: partial tensor header "
                                      f"at byte offset {f.tell() - len(head)}")
            name_len = int(np.frombuffer(head, dtype="<u4")[0])
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            rank = int(np.frombuffer(_read_exact(f, 4, f"rank of {name}"), dtype="<u4")[0])
            dims = np.frombuffer(_read_exact(f, 4 * rank, f"dims of {name}"), dtype="<u4")
            count = int(np.prod(dims, dtype=np.int64)) if rank > 0 else 1
            body = _read_exact(f, count * 8, f"data of {name}")
            tensors[name] = np.frombuffer(body, dtype="<f8").reshape(
                tuple(int(d) for d in dims)).copy()
    return step, tensors


def mlp_tensor_dict(prefix: str, params: Mlp) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def mlp_from_tensors(prefix: str, tensors: dict[str, np.ndarray]) -> Mlp:
    weights, biases = [], []
    i = 0
    while f"{prefix}.w{i}" in tensors:
        weights.append(tensors[f"{prefix}.w{i}"])
        biases.append(tensors[f"{prefix}.b{i}"])
        i += 1
    if not weights:
        raise DataFormatError(f"checkpoint has no tensors for {prefix!r}")
    return Mlp(weights, biases)
