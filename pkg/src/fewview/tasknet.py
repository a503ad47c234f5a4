"""Task networks: extract per-view features, pool them elementwise, decode.

Both networks tolerate any nonempty view subset and produce outputs whose
shape never depends on how many views were supplied. Pooling is an exact
elementwise max; its gradient routes to the lowest-index view attaining the
max, so backward passes are deterministic.
"""

from __future__ import annotations

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CompatibilityError, ShapeError
from .numcore import DenseNet, LayerSpec, bev_mse, cross_entropy

Array = np.ndarray


def aggregate_max(features) -> Array:
    """Elementwise maximum of a nonempty list of same-shape feature arrays."""
    features = list(features)
    if not features:
        raise ShapeError("cannot aggregate zero views")
    out = np.asarray(features[0], dtype=np.float64)
    for feat in features[1:]:
        feat = np.asarray(feat, dtype=np.float64)
        if feat.shape != out.shape:
            raise ShapeError(f"feature shapes differ: {feat.shape} vs {out.shape}")
        out = np.maximum(out, feat)
    return out


def pool_with_argmax(stacked: Array) -> tuple[Array, Array]:
    """Max over the leading axis plus the lowest attaining index per entry."""
    if stacked.shape[0] < 1:
        raise ShapeError("cannot pool zero views")
    return stacked.max(axis=0), stacked.argmax(axis=0)


def route_pooled_grad(grad_pooled: Array, argmax: Array, n_views: int) -> Array:
    """Scatter a pooled gradient back to the views that produced each max."""
    out = np.zeros((n_views,) + grad_pooled.shape)
    idx = np.indices(grad_pooled.shape)
    out[(argmax,) + tuple(idx)] = grad_pooled
    return out


def task_loss(prediction: Array, ground_truth, mode: str) -> tuple[float, Array]:
    """Scalar loss and gradient w.r.t. the prediction for either task."""
    prediction = np.asarray(prediction)
    if mode == "classification":
        if prediction.ndim != 1:
            raise ValueError("classification loss expects a logit vector")
        return cross_entropy(prediction, int(ground_truth))
    if mode == "detection":
        if prediction.ndim != 2:
            raise ValueError("detection loss expects an H x W heatmap")
        return bev_mse(prediction, ground_truth)
    raise ValueError(f"unknown task mode {mode!r}")


class MVClassifier:
    """Per-view feature extractor plus a linear class head over the pooled
    feature vector."""

    kind = "classifier"

    def __init__(self, obs_dim: int, feat_dim: int, n_classes: int, hidden: int, seed: int):
        self.obs_dim = obs_dim
        self.feat_dim = feat_dim
        self.n_classes = n_classes
        self.hidden = hidden
        self.seed = seed
        self.feature_net = DenseNet(
            [
                LayerSpec(obs_dim, hidden, "relu"),
                LayerSpec(hidden, hidden, "relu"),
                LayerSpec(hidden, feat_dim, "relu"),
            ],
            seed=[seed, 0],
        )
        self.head_net = DenseNet([LayerSpec(feat_dim, n_classes, "linear")], seed=[seed, 1])

    # -- parameter plumbing

    def named_params(self):
        return self.feature_net.named_params("feature.") + self.head_net.named_params("head.")

    def feature_params(self):
        return self.feature_net.named_params("feature.")

    def head_params(self):
        return self.head_net.named_params("head.")

    # -- forward pieces

    def features(self, obs: Array) -> Array:
        """f applied to every view: (..., N, obs_dim) -> (..., N, feat_dim)."""
        obs = np.asarray(obs, dtype=np.float64)
        flat = obs.reshape(-1, obs.shape[-1])
        feats = self.feature_net.forward(flat)
        return feats.reshape(obs.shape[:-1] + (self.feat_dim,))

    def features_cache(self, obs: Array):
        obs = np.asarray(obs, dtype=np.float64)
        flat = obs.reshape(-1, obs.shape[-1])
        feats, cache = self.feature_net.forward_cache(flat)
        return feats.reshape(obs.shape[:-1] + (self.feat_dim,)), (cache, obs.shape)

    def features_backward(self, fcache, d_feats: Array) -> dict[str, Array]:
        cache, obs_shape = fcache
        grads, _ = self.feature_net.backward(cache, np.asarray(d_feats).reshape(-1, self.feat_dim))
        return {f"feature.{k}": v for k, v in grads.items()}

    def head(self, pooled: Array) -> Array:
        return self.head_net.forward(pooled)

    def head_cache(self, pooled: Array):
        return self.head_net.forward_cache(pooled)

    def head_backward(self, cache, d_logits: Array):
        grads, d_pooled = self.head_net.backward(cache, d_logits)
        return {f"head.{k}": v for k, v in grads.items()}, d_pooled

    def predict(self, obs: Array, views) -> Array:
        """Logits from the given view subset of one instance's observations."""
        views = list(views)
        feats = self.features(np.asarray(obs)[views])
        return self.head(aggregate_max(feats))

    def mac_counts(self) -> dict[str, int]:
        return {"f_per_view": self.feature_net.mac_count(), "g": self.head_net.mac_count()}

    # -- persistence

    def save(self, path, world_hash: str, extra_meta: dict | None = None) -> None:
        meta = {
            "kind": self.kind,
            "world_hash": world_hash,
            "dims": {
                "obs_dim": self.obs_dim,
                "feat_dim": self.feat_dim,
                "n_classes": self.n_classes,
                "hidden": self.hidden,
                "seed": self.seed,
            },
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, dict(self.named_params()), meta)

    @classmethod
    def load(cls, path) -> tuple["MVClassifier", dict]:
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != cls.kind:
            raise CompatibilityError(f"{path}: checkpoint holds a {meta.get('kind')}, not a {cls.kind}")
        net = cls(**meta["dims"])
        _restore(net, tensors, path)
        return net, meta


class MVDetector:
    """Per-cell feature extractor plus a per-cell sigmoid occupancy head."""

    kind = "detector"

    def __init__(self, channels: int, feat_dim: int, hidden: int, seed: int):
        self.channels = channels
        self.feat_dim = feat_dim
        self.hidden = hidden
        self.seed = seed
        self.feature_net = DenseNet(
            [
                LayerSpec(channels, hidden, "relu"),
                LayerSpec(hidden, feat_dim, "relu"),
            ],
            seed=[seed, 0],
        )
        self.head_net = DenseNet(
            [
                LayerSpec(feat_dim, hidden, "relu"),
                LayerSpec(hidden, 1, "sigmoid"),
            ],
            seed=[seed, 1],
        )

    def named_params(self):
        return self.feature_net.named_params("feature.") + self.head_net.named_params("head.")

    def feature_params(self):
        return self.feature_net.named_params("feature.")

    def head_params(self):
        return self.head_net.named_params("head.")

    def features(self, obs: Array) -> Array:
        """f per cell: (V, C, H, W) -> (V, D, H, W)."""
        obs = np.asarray(obs, dtype=np.float64)
        v, c, h, w = obs.shape
        flat = obs.transpose(0, 2, 3, 1).reshape(-1, c)
        feats = self.feature_net.forward(flat)
        return feats.reshape(v, h, w, self.feat_dim).transpose(0, 3, 1, 2)

    def features_cache(self, obs: Array):
        obs = np.asarray(obs, dtype=np.float64)
        v, c, h, w = obs.shape
        flat = obs.transpose(0, 2, 3, 1).reshape(-1, c)
        feats, cache = self.feature_net.forward_cache(flat)
        return feats.reshape(v, h, w, self.feat_dim).transpose(0, 3, 1, 2), (cache, (v, h, w))

    def features_backward(self, fcache, d_feats: Array) -> dict[str, Array]:
        cache, _shape = fcache
        flat = np.asarray(d_feats).transpose(0, 2, 3, 1).reshape(-1, self.feat_dim)
        grads, _ = self.feature_net.backward(cache, flat)
        return {f"feature.{k}": g for k, g in grads.items()}

    def head(self, pooled: Array) -> Array:
        """g per cell: (D, H, W) -> (H, W) occupancy probabilities."""
        d, h, w = pooled.shape
        flat = pooled.transpose(1, 2, 0).reshape(-1, d)
        return self.head_net.forward(flat).reshape(h, w)

    def head_cache(self, pooled: Array):
        d, h, w = pooled.shape
        flat = pooled.transpose(1, 2, 0).reshape(-1, d)
        out, cache = self.head_net.forward_cache(flat)
        return out.reshape(h, w), (cache, (h, w))

    def head_backward(self, hcache, d_heatmap: Array):
        cache, (h, w) = hcache
        grads, d_flat = self.head_net.backward(cache, np.asarray(d_heatmap).reshape(-1, 1))
        d_pooled = d_flat.reshape(h, w, self.feat_dim).transpose(2, 0, 1)
        return {f"head.{k}": v for k, v in grads.items()}, d_pooled

    def predict(self, obs: Array, views) -> Array:
        views = list(views)
        feats = self.features(np.asarray(obs)[views])
        return self.head(aggregate_max(feats))

    def mac_counts(self) -> dict[str, int]:
        # per-cell nets applied to every grid cell; counts are per full map
        return {"f_per_view_per_cell": self.feature_net.mac_count(), "g_per_cell": self.head_net.mac_count()}

    def save(self, path, world_hash: str, extra_meta: dict | None = None) -> None:
        meta = {
            "kind": self.kind,
            "world_hash": world_hash,
            "dims": {
                "channels": self.channels,
                "feat_dim": self.feat_dim,
                "hidden": self.hidden,
                "seed": self.seed,
            },
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, dict(self.named_params()), meta)

    @classmethod
    def load(cls, path) -> tuple["MVDetector", dict]:
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != cls.kind:
            raise CompatibilityError(f"{path}: checkpoint holds a {meta.get('kind')}, not a {cls.kind}")
        net = cls(**meta["dims"])
        _restore(net, tensors, path)
        return net, meta


def _restore(net, tensors: dict[str, Array], path) -> None:
    for name, param in net.named_params():
        if name not in tensors:
            raise CompatibilityError(f"{path}: checkpoint misses tensor {name!r}")
        stored = tensors[name]
        if stored.shape != param.shape:
            raise CompatibilityError(
                f"{path}: tensor {name!r} has shape {stored.shape}, expected {param.shape}"
            )
        param[...] = stored
    extra = set(tensors) - {name for name, _ in net.named_params()}
    if extra:
        raise CompatibilityError(f"{path}: checkpoint carries unknown tensors {sorted(extra)}")
