"""Frozen geometric point encoder and the trainable distillation head."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloudShape


class StudentError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    neighborhood_radii: tuple[float, ...] = (0.05, 0.1, 0.2)
    fourier_features: int = 32
    fourier_seed: int = 0
    fourier_scale: float = 2.0

    def __post_init__(self):
        radii = np.asarray(self.neighborhood_radii, dtype=float)
        if len(radii) == 0 or (radii <= 0).any() or (np.diff(radii) <= 0).any():
            raise StudentError("neighborhood radii must be positive and strictly increasing")
        if self.fourier_features < 0:
            raise StudentError("fourier_features must be >= 0")

    @property
    def output_dim(self) -> int:
        return 3 + 9 * len(self.neighborhood_radii) + 2 * self.fourier_features


def _local_stats(points: np.ndarray, tree: cKDTree, radius: float) -> np.ndarray:
    """Nine statistics of the radius neighborhood of every point (self excluded):
    log neighbor count, centroid offset, covariance eigenvalues (descending) and
    |normal . z| / |normal . radial| where the normal is the least-variance axis."""
    n = len(points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    out = np.zeros((n, 9))
    if len(pairs) == 0:
        return out
    i = np.concatenate([pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([pairs[:, 1], pairs[:, 0]])
    count = np.bincount(i, minlength=n).astype(float)
    has = count > 0
    nbr = points[j]
    s1 = np.stack([np.bincount(i, nbr[:, a], minlength=n) for a in range(3)], axis=1)
    outer = nbr[:, :, None] * nbr[:, None, :]
    s2 = np.stack([np.bincount(i, outer[:, a, b], minlength=n)
                   for a in range(3) for b in range(3)], axis=1).reshape(n, 3, 3)
    c = np.maximum(count, 1.0)
    mean = s1 / c[:, None]
    cov = s2 / c[:, None, None] - mean[:, :, None] * mean[:, None, :]
    evals, evecs = np.linalg.eigh(cov)
    evals = np.maximum(evals[:, ::-1], 0.0)
    normal = evecs[:, :, 0]
    radial = points / np.maximum(np.linalg.norm(points, axis=1, keepdims=True), 1e-12)
    out[:, 0] = np.log1p(count)
    out[:, 1:4] = (mean - points) / radius
    out[:, 4:7] = evals / radius ** 2
    out[:, 7] = np.abs(normal[:, 2])
    out[:, 8] = np.abs((normal * radial).sum(1))
    out[~has] = 0.0
    return out


def encode_points(shape: PointCloudShape, config: EncoderConfig = EncoderConfig()) -> np.ndarray:
    """Per-point features: xyz, local statistics per radius, random Fourier features."""
    pts = shape.points
    tree = cKDTree(pts)
    feats = [pts]
    feats += [_local_stats(pts, tree, r) for r in config.neighborhood_radii]
    if config.fourier_features:
        rng = np.random.default_rng(config.fourier_seed)
        proj = rng.normal(0.0, config.fourier_scale, size=(3, config.fourier_features))
        z = pts @ proj
        feats += [np.sin(z), np.cos(z)]
    return np.concatenate(feats, axis=1)


def write_features(features: np.ndarray, path) -> None:
    features = np.asarray(features, dtype="<f4")
    n, e = features.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", n, e))
        fh.write(features.tobytes(order="C"))


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise StudentError(f"{path}: truncated feature header")
    n, e = struct.unpack("<QQ", data[:16])
    body = data[16:]
    if len(body) != 4 * n * e:
        raise StudentError(f"{path}: expected {n}x{e} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(n, e).astype(np.float64)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class DistillHead:
    """Four dense layers with ReLU in between and a softmax output.

    Optimizer state (Adam moments and step count) lives on the head so a
    snapshot captures the full training state.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
            self.v = [np.zeros_like(p) for p in self.params]

    @classmethod
    def create(cls, input_dim: int, num_parts: int, hidden=(128, 128, 64), seed=0) -> "DistillHead":
        rng = np.random.default_rng(seed)
        widths = [input_dim, *hidden, num_parts]
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def num_parts(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "DistillHead":
        cp = [p.copy() for p in self.params]
        return DistillHead(cp[0::2], cp[1::2], [m.copy() for m in self.m],
                           [v.copy() for v in self.v], self.step)


def head_forward(head: DistillHead, features: np.ndarray, return_cache=False):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.input_dim:
        raise StudentError(f"features of shape {x.shape} do not match head input {head.input_dim}")
    acts = [x]
    last = len(head.weights) - 1
    for k, (w, b) in enumerate(zip(head.weights, head.biases)):
        z = x @ w + b
        x = z if k == last else np.maximum(z, 0.0)
        acts.append(x)
    probs = softmax(x)
    if return_cache:
        return probs, acts
    return probs


def head_backward(head: DistillHead, acts: list[np.ndarray], probs: np.ndarray,
                  grad_probs: np.ndarray) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. (w0, b0, w1, b1, ...) given dL/dprobs."""
    g = probs * (grad_probs - (grad_probs * probs).sum(axis=1, keepdims=True))
    grads = [None] * (2 * len(head.weights))
    for k in range(len(head.weights) - 1, -1, -1):
        grads[2 * k] = acts[k].T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        if k:
            g = (g @ head.weights[k].T) * (acts[k] > 0)
    return grads


def adam_step(head: DistillHead, grads: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999,
              eps=1e-8) -> DistillHead:
    """In-place Adam update with bias correction; returns ``head``."""
    params = head.params
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise StudentError("gradient shapes do not match parameters")
    if not all(np.isfinite(g).all() for g in grads):
        raise StudentError("divergence: non-finite gradient")
    head.step += 1
    t = head.step
    for p, g, m, v in zip(params, grads, head.m, head.v):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return head


@dataclass
class StudentModel:
    encoder: EncoderConfig
    head: DistillHead
    features: dict[str, np.ndarray] = field(default_factory=dict)

    def encode(self, shape: PointCloudShape) -> np.ndarray:
        if shape.shape_id not in self.features:
            feats = encode_points(shape, self.encoder)
            feats.setflags(write=False)
            self.features[shape.shape_id] = feats
        return self.features[shape.shape_id]

    def set_features(self, shape_id: str, features: np.ndarray) -> None:
        feats = np.array(features, dtype=np.float64)
        feats.setflags(write=False)
        self.features[shape_id] = feats

    def predict_probs(self, shape: PointCloudShape) -> np.ndarray:
        return head_forward(self.head, self.encode(shape))

    def save(self, path) -> None:
        arrays = {f"w{k}": w for k, w in enumerate(self.head.weights)}
        arrays.update({f"b{k}": b for k, b in enumerate(self.head.biases)})
        radii = np.asarray(self.encoder.neighborhood_radii)
        np.savez(path, radii=radii, fourier=np.array([self.encoder.fourier_features,
                                                      self.encoder.fourier_seed]),
                 fourier_scale=np.array(self.encoder.fourier_scale), **arrays)

    @classmethod
    def load(cls, path) -> "StudentModel":
        with np.load(path) as z:
            layers = sum(1 for k in z.files if k.startswith("w"))
            weights = [z[f"w{k}"] for k in range(layers)]
            biases = [z[f"b{k}"] for k in range(layers)]
            enc = EncoderConfig(tuple(float(r) for r in z["radii"]), int(z["fourier"][0]),
                                int(z["fourier"][1]), float(z["fourier_scale"]))
        return cls(enc, DistillHead(weights, biases))
