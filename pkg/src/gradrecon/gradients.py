"""LoRA and projection-weight gradients, view averaging, and proxy pair collection.

Canonical flattening order (version 1): layer ascending, projection name
ascending, grad_A before grad_B, each matrix row-major.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import container
from . import tensor as T
from .errors import IncompatibleError, NonFiniteError, ShapeError
from .model import (LoraAdapter, ModelParams, answer_logits, check_distribution,
                    merge_lora, proj_name)
from .tensor import Tensor

log = logging.getLogger(__name__)

FLATTEN_VERSION = 1
Key = tuple[int, str]


@dataclass
class LoraGradient:
    grads: dict[Key, tuple[np.ndarray, np.ndarray]]
    n_views: int = 1

    def keys(self) -> list[Key]:
        return sorted(self.grads)

    def flatten(self) -> np.ndarray:
        parts = []
        for k in self.keys():
            ga, gb = self.grads[k]
            parts += [ga.reshape(-1), gb.reshape(-1)]
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, vec: np.ndarray, keys: Sequence[Key], d_model: int, rank: int,
                  n_views: int = 1) -> "LoraGradient":
        step = d_model * rank
        if vec.size != 2 * step * len(keys):
            raise ShapeError("flat LoRA gradient has the wrong length")
        grads, at = {}, 0
        for k in sorted(keys):
            ga = vec[at:at + step].reshape(d_model, rank)
            gb = vec[at + step:at + 2 * step].reshape(rank, d_model)
            grads[k] = (ga.copy(), gb.copy())
            at += 2 * step
        return cls(grads, n_views)

    def block(self, key: Key) -> np.ndarray:
        ga, gb = self.grads[key]
        return np.concatenate([ga.reshape(-1), gb.reshape(-1)])

    def scaled(self, alpha: float) -> "LoraGradient":
        return LoraGradient({k: (ga * np.float32(alpha), gb * np.float32(alpha))
                             for k, (ga, gb) in self.grads.items()}, self.n_views)


@dataclass
class FullGradient:
    grads: dict[Key, np.ndarray]

    def keys(self) -> list[Key]:
        return sorted(self.grads)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.grads[k].reshape(-1) for k in self.keys()])

    @classmethod
    def unflatten(cls, vec: np.ndarray, keys: Sequence[Key], d_model: int) -> "FullGradient":
        step = d_model * d_model
        if vec.size != step * len(keys):
            raise ShapeError("flat full gradient has the wrong length")
        return cls({k: vec[i * step:(i + 1) * step].reshape(d_model, d_model).copy()
                    for i, k in enumerate(sorted(keys))})

    def flatten_keys(self, keys: Sequence[Key]) -> np.ndarray:
        """Float64 flattening restricted to ``keys`` (in sorted order)."""
        return np.concatenate([self.grads[k].reshape(-1).astype(np.float64) for k in sorted(keys)])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten().astype(np.float64)))

    def restrict(self, layers: Sequence[int]) -> "FullGradient":
        keep = set(layers)
        return FullGradient({k: v for k, v in self.grads.items() if k[0] in keep})


@dataclass
class GradientPair:
    example_id: int
    lora: LoraGradient
    full: FullGradient
    source: str = "proxy"


def _target(params: ModelParams, y) -> np.ndarray:
    return check_distribution(y, params.config.vocab_size)[:1]


def lora_gradient(params: ModelParams, adapters: Sequence[LoraAdapter], x: Sequence[int], y) -> LoraGradient:
    """Exact gradient of the answer cross-entropy w.r.t. every adapter's A and B."""
    if not adapters:
        raise ShapeError("lora_gradient needs attached adapters")
    y = _target(params, y)
    with T.Tape() as tape:
        p = {k: Tensor(v) for k, v in params.tensors.items()}
        lora = {a.key: (tape.leaf(f"A:{a.layer}:{a.proj}", a.A),
                        tape.leaf(f"B:{a.layer}:{a.proj}", a.B)) for a in adapters}
        loss = T.cross_entropy(answer_logits(p, lora, params.config, [list(x)]), y)
    g = T.backward_grad(tape, loss)
    return LoraGradient({a.key: (g[f"A:{a.layer}:{a.proj}"], g[f"B:{a.layer}:{a.proj}"])
                         for a in adapters})


def full_gradient(params: ModelParams, x: Sequence[int], y, keys: Sequence[Key],
                  adapters: Sequence[LoraAdapter] | None = None, scale: float = 1.0) -> FullGradient:
    """Exact gradient w.r.t. the projection weights named by ``keys``.

    Adapters, when given, are merged into the base weights first. ``scale``
    multiplies the loss (used by linearity checks).
    """
    if adapters:
        params = merge_lora(params, adapters)
    y = _target(params, y)
    names = {k: proj_name(*k) for k in keys}
    with T.Tape() as tape:
        wanted = set(names.values())
        p = {k: (tape.leaf(k, v) if k in wanted else Tensor(v)) for k, v in params.tensors.items()}
        loss = T.cross_entropy(answer_logits(p, {}, params.config, [list(x)]), y)
        if scale != 1.0:
            loss = T.mul(loss, float(scale))
    g = T.backward_grad(tape, loss)
    return FullGradient({k: g[n] for k, n in names.items()})


def average_views(grads: Sequence[LoraGradient]) -> LoraGradient:
    """Coordinate-wise mean of per-view LoRA gradients."""
    if not grads:
        raise ValueError("cannot average an empty list of gradients")
    keys = grads[0].keys()
    for g in grads[1:]:
        if g.keys() != keys or any(g.grads[k][0].shape != grads[0].grads[k][0].shape
                                   or g.grads[k][1].shape != grads[0].grads[k][1].shape for k in keys):
            raise ShapeError("LoRA gradients disagree in layout")
    out = {}
    for k in keys:
        ga = np.mean(np.stack([g.grads[k][0] for g in grads]).astype(np.float64), axis=0)
        gb = np.mean(np.stack([g.grads[k][1] for g in grads]).astype(np.float64), axis=0)
        out[k] = (ga.astype(np.float32), gb.astype(np.float32))
    return LoraGradient(out, n_views=len(grads))


# ---------------------------------------------------------------- pair dataset


@dataclass
class GradientPairDataset:
    header: dict
    ids: np.ndarray  # (n,) example ids
    lora: np.ndarray  # (n, lora_dim) canonical flattening
    full: np.ndarray  # (n, full_dim) canonical flattening
    keys: list[Key] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d_model(self) -> int:
        return self.header["d_model"]

    @property
    def rank(self) -> int:
        return self.header["adapter"]["rank"]

    @property
    def layers(self) -> list[int]:
        return sorted({k[0] for k in self.keys})

    @property
    def projections(self) -> list[str]:
        return sorted({k[1] for k in self.keys})

    def pair(self, i: int) -> GradientPair:
        return GradientPair(int(self.ids[i]),
                            LoraGradient.unflatten(self.lora[i], self.keys, self.d_model, self.rank),
                            FullGradient.unflatten(self.full[i], self.keys, self.d_model),
                            self.header.get("source", "proxy"))

    def blocks(self, proj: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-layer rows for one projection: (lora (n, L, 2dr), full (n, L, d*d), layer ids)."""
        d, r = self.d_model, self.rank
        keys = sorted(self.keys)
        li = [i for i, k in enumerate(keys) if k[1] == proj]
        lo = self.lora.reshape(len(self), len(keys), 2 * d * r)[:, li]
        fu = self.full.reshape(len(self), len(keys), d * d)[:, li]
        return lo, fu, np.array([keys[i][0] for i in li])

    def subset(self, idx) -> "GradientPairDataset":
        idx = np.asarray(idx, dtype=np.int64)
        h = dict(self.header, n_pairs=int(len(idx)))
        return GradientPairDataset(h, self.ids[idx], self.lora[idx], self.full[idx], list(self.keys))

    def save(self, path) -> None:
        h = dict(self.header, n_pairs=len(self), keys=[list(k) for k in self.keys])
        container.save(path, {"ids": self.ids.astype(np.float32), "lora": self.lora, "full": self.full}, h)

    @classmethod
    def load(cls, path) -> "GradientPairDataset":
        t, h = container.load(path)
        if h.get("kind") != "gradient_pairs":
            raise IncompatibleError(f"{path} is not a gradient-pair dataset")
        if h.get("flatten_version") != FLATTEN_VERSION:
            raise IncompatibleError("unsupported flattening version")
        keys = [(int(a), str(b)) for a, b in h["keys"]]
        return cls(h, t["ids"].astype(np.int64), t["lora"], t["full"], keys)


def pair_header(params: ModelParams, adapters: Sequence[LoraAdapter], source: str,
                label: str, extra: dict | None = None) -> dict:
    spec = {"rank": adapters[0].rank, "projections": sorted({a.proj for a in adapters}),
            "layers": sorted({a.layer for a in adapters})}
    h = {
        "kind": "gradient_pairs",
        "flatten_version": FLATTEN_VERSION,
        "flatten_order": "layer asc, projection asc, A then B, row-major",
        "config_hash": params.config.hash(),
        "d_model": params.config.d_model,
        "adapter": spec,
        "adapter_hash": adapter_hash(adapters),
        "source": source,
        "label": label,
    }
    h.update(extra or {})
    return h


def adapter_hash(adapters: Sequence[LoraAdapter]) -> str:
    """Fingerprint of the LoRA basis (A of the shallowest layer) per projection.

    Depth is left out on purpose: a 2-layer proxy and a 4-layer target built
    with the same adapter seed share the hash.
    """
    h = hashlib.sha256()
    seen = set()
    for a in sorted(adapters, key=lambda a: (a.proj, a.layer)):
        if a.proj in seen:
            continue
        seen.add(a.proj)
        h.update(json.dumps([a.proj, list(a.A.shape)]).encode())
        h.update(np.ascontiguousarray(a.A, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def collect_pairs(params: ModelParams, adapters: Sequence[LoraAdapter],
                  examples: Sequence[tuple[Sequence[int], np.ndarray]], limit: int,
                  source: str = "proxy", label: str = "uniform-answer") -> GradientPairDataset:
    """One (LoRA gradient, projection gradient) pair per example, in example order.

    Both sides are evaluated at the same params, adapters, prompt and label.
    The adapters must still have B = 0 so that the merged weights equal the
    base weights the full gradient is taken against.
    """
    if limit > len(examples):
        raise ValueError(f"limit {limit} exceeds the {len(examples)} available examples")
    keys = sorted(a.key for a in adapters)
    d, r = params.config.d_model, adapters[0].rank
    lora = np.zeros((limit, len(keys) * 2 * d * r), np.float32)
    full = np.zeros((limit, len(keys) * d * d), np.float32)
    for i in range(limit):
        x, y = examples[i]
        try:
            lg = lora_gradient(params, adapters, x, y)
            fg = full_gradient(params, x, y, keys, adapters=adapters)
        except NonFiniteError as exc:
            raise NonFiniteError(f"example {i}: {exc}") from exc
        lora[i] = lg.flatten()
        full[i] = fg.flatten()
    header = pair_header(params, adapters, source, label)
    return GradientPairDataset(header, np.arange(limit, dtype=np.int64), lora, full, keys)


def collect_averaged_pairs(params: ModelParams, adapters: Sequence[LoraAdapter],
                           groups: Sequence[tuple[Sequence[Sequence[int]], np.ndarray]], limit: int,
                           source: str = "proxy", label: str = "uniform-answer") -> GradientPairDataset:
    """Like ``collect_pairs`` but each example is a group of views sharing one label.

    The LoRA side is the view average that unlearning decodes; the full side
    is the mean of the per-view projection gradients. The pair stays
    consistent because grad_B = A^T G is linear in G.
    """
    if limit > len(groups):
        raise ValueError(f"limit {limit} exceeds the {len(groups)} available groups")
    keys = sorted(a.key for a in adapters)
    d, r = params.config.d_model, adapters[0].rank
    lora = np.zeros((limit, len(keys) * 2 * d * r), np.float32)
    full = np.zeros((limit, len(keys) * d * d), np.float32)
    for i in range(limit):
        prompts, y = groups[i]
        if not prompts:
            raise ValueError(f"group {i} has no views")
        try:
            lg = average_views([lora_gradient(params, adapters, x, y) for x in prompts])
            fgs = [full_gradient(params, x, y, keys, adapters=adapters) for x in prompts]
        except NonFiniteError as exc:
            raise NonFiniteError(f"group {i}: {exc}") from exc
        lora[i] = lg.flatten()
        full[i] = np.mean([fg.flatten() for fg in fgs], axis=0)
    header = pair_header(params, adapters, source, label, {"averaged": True})
    return GradientPairDataset(header, np.arange(limit, dtype=np.int64), lora, full, keys)
