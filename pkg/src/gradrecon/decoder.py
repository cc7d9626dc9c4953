"""Gradient decoder: LoRA gradient blocks -> projection-weight gradients.

One decoder per projection name, shared over layer indices. Each decoder is
a two-hidden-layer tanh MLP plus a linear skip path, applied to

    [flatten(grad_A) ++ flatten(grad_B)] / in_scale ++ one_hot(layer)

and its output is multiplied by ``out_scale`` and reshaped to d_model x d_model.
Layers the proxy never had get an all-zero one-hot.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import container
from . import tensor as T
from .errors import ConvergenceError, IncompatibleError, NonFiniteError, ShapeError
from .gradients import FLATTEN_VERSION, FullGradient, GradientPairDataset, LoraGradient
from .model import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

MAX_HIDDEN = 1024


@dataclass
class DecoderHyper:
    epochs: int = 60
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    holdout: float = 0.2
    patience: int = 5
    max_hidden: int = MAX_HIDDEN


@dataclass
class DecoderParams:
    """Weights for every projection plus the header binding them to a proxy setup."""

    nets: dict[str, dict[str, np.ndarray]]  # proj -> {w0,b0,w1,b1,w2,b2,skip}
    in_scale: dict[str, float]
    out_scale: dict[str, float]
    header: dict

    @property
    def d_model(self) -> int:
        return self.header["d_model"]

    @property
    def rank(self) -> int:
        return self.header["adapter"]["rank"]

    @property
    def n_onehot(self) -> int:
        return self.header["n_onehot"]

    @property
    def n_params(self) -> int:
        return sum(v.size for net in self.nets.values() for v in net.values())

    def copy(self) -> "DecoderParams":
        return DecoderParams({p: {k: v.copy() for k, v in net.items()} for p, net in self.nets.items()},
                             dict(self.in_scale), dict(self.out_scale), dict(self.header))

    # -------------------------------------------------------- persistence

    def save(self, path) -> None:
        tensors = {f"{p}/{k}": v for p, net in sorted(self.nets.items()) for k, v in net.items()}
        meta = dict(self.header, kind="decoder", in_scale=self.in_scale, out_scale=self.out_scale)
        container.save(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "DecoderParams":
        t, meta = container.load(path)
        if meta.get("kind") != "decoder":
            raise IncompatibleError(f"{path} is not a decoder checkpoint")
        nets: dict[str, dict[str, np.ndarray]] = {}
        for name, v in t.items():
            p, k = name.split("/")
            nets.setdefault(p, {})[k] = v
        ins = {k: float(v) for k, v in meta.pop("in_scale").items()}
        outs = {k: float(v) for k, v in meta.pop("out_scale").items()}
        meta.pop("kind")
        return cls(nets, ins, outs, meta)


def hidden_width(in_width: int, max_hidden: int = MAX_HIDDEN) -> int:
    return min(4 * in_width, max_hidden)


def init_decoder(header: dict, seed: int = 0, max_hidden: int = MAX_HIDDEN, zero: bool = False) -> DecoderParams:
    """Fresh decoder for the pair layout described by ``header``.

    ``header`` needs d_model, adapter.rank, adapter.projections and n_onehot.
    """
    d, r = header["d_model"], header["adapter"]["rank"]
    n_in = 2 * d * r + header["n_onehot"]
    h = hidden_width(2 * d * r, max_hidden)
    n_out = d * d
    rng = np.random.default_rng(seed)
    nets = {}
    for proj in header["adapter"]["projections"]:
        shapes = {"w0": (n_in, h), "b0": (h,), "w1": (h, h), "b1": (h,),
                  "w2": (h, n_out), "b2": (n_out,), "skip": (n_in, n_out)}
        net = {}
        for k, s in shapes.items():
            if zero or k.startswith("b") or k == "skip":
                net[k] = np.zeros(s, np.float32)
            else:
                net[k] = rng.normal(0.0, 1.0 / math.sqrt(s[0]), s).astype(np.float32)
        nets[proj] = net
    hdr = dict(header, hidden=h, max_hidden=max_hidden, seed=seed)
    projs = header["adapter"]["projections"]
    return DecoderParams(nets, {p: 1.0 for p in projs}, {p: 1.0 for p in projs}, hdr)


def _features(blocks: np.ndarray, layers: np.ndarray, scale: float, n_onehot: int) -> np.ndarray:
    """Rows of normalised LoRA blocks with the layer one-hot appended."""
    oh = np.zeros((len(layers), n_onehot), np.float32)
    seen = layers < n_onehot
    oh[np.nonzero(seen)[0], layers[seen]] = 1.0
    return np.concatenate([blocks.astype(np.float32) / np.float32(scale), oh], axis=1)


def _net(w: dict[str, Tensor], x: Tensor) -> Tensor:
    h = T.tanh(x @ w["w0"] + w["b0"])
    h = T.tanh(h @ w["w1"] + w["b1"])
    return (h @ w["w2"] + w["b2"]) + x @ w["skip"]


def _apply(net: dict[str, np.ndarray], feats: np.ndarray) -> np.ndarray:
    with T.native_accumulation():
        return _net({k: Tensor(v) for k, v in net.items()}, Tensor(feats)).data


def check_compatible(phi: DecoderParams, keys: Sequence[tuple[int, str]], d_model: int, rank: int,
                     adapter_hash: str | None = None) -> None:
    if phi.header.get("flatten_version") != FLATTEN_VERSION:
        raise IncompatibleError("decoder was trained with a different flattening version")
    if d_model != phi.d_model:
        raise IncompatibleError(f"decoder expects d_model={phi.d_model}, model has {d_model}")
    if rank != phi.rank:
        raise IncompatibleError(f"decoder expects LoRA rank {phi.rank}, adapters have {rank}")
    missing = {p for _, p in keys} - set(phi.nets)
    if missing:
        raise IncompatibleError(f"decoder has no network for projections {sorted(missing)}")
    want = phi.header.get("adapter_hash")
    if adapter_hash is not None and want is not None and adapter_hash != want:
        raise IncompatibleError("LoRA bases differ from the ones the decoder was trained on")


def decode(phi: DecoderParams, lora: LoraGradient) -> FullGradient:
    """Reconstruct per-layer projection gradients from a (possibly averaged) LoRA gradient."""
    keys = lora.keys()
    some = lora.grads[keys[0]][0]
    check_compatible(phi, keys, some.shape[0], some.shape[1])
    d = phi.d_model
    out = {}
    for proj in sorted({p for _, p in keys}):
        ks = [k for k in keys if k[1] == proj]
        blocks = np.stack([lora.block(k) for k in ks])
        feats = _features(blocks, np.array([k[0] for k in ks]), phi.in_scale[proj], phi.n_onehot)
        y = _apply(phi.nets[proj], feats) * np.float32(phi.out_scale[proj])
        if not np.all(np.isfinite(y)):
            raise NonFiniteError("decoder produced a non-finite gradient")
        for k, row in zip(ks, y):
            out[k] = row.reshape(d, d)
    return FullGradient(out)


def decode_dataset(phi: DecoderParams, pairs: GradientPairDataset) -> np.ndarray:
    """Decoded full side for every pair, in the dataset's canonical flattening."""
    check_compatible(phi, pairs.keys, pairs.d_model, pairs.rank)
    n, d = len(pairs), pairs.d_model
    keys = sorted(pairs.keys)
    out = np.zeros((n, len(keys), d * d), np.float32)
    for proj in pairs.projections:
        lo, _, layers = pairs.blocks(proj)
        L = lo.shape[1]
        feats = _features(lo.reshape(n * L, -1), np.tile(layers, n), phi.in_scale[proj], phi.n_onehot)
        y = _apply(phi.nets[proj], feats) * np.float32(phi.out_scale[proj])
        cols = [i for i, k in enumerate(keys) if k[1] == proj]
        out[:, cols] = y.reshape(n, L, d * d)
    return out.reshape(n, -1)


def decoder_mse(phi: DecoderParams, pairs: GradientPairDataset) -> float:
    """Mean over pairs of the squared Euclidean reconstruction error."""
    if len(pairs) == 0:
        raise ValueError("no pairs")
    err = decode_dataset(phi, pairs).astype(np.float64) - pairs.full.astype(np.float64)
    return float(np.mean(np.sum(err * err, axis=1)))


def reconstruction_quality(phi: DecoderParams, pairs: GradientPairDataset, tol: float = 1e-8) -> dict:
    """Cosine between decoded and true gradients; degenerate pairs are counted, not scored."""
    if len(pairs) == 0:
        raise ValueError("no pairs")
    pred = decode_dataset(phi, pairs).astype(np.float64)
    true = pairs.full.astype(np.float64)
    pn = np.linalg.norm(pred, axis=1)
    tn = np.linalg.norm(true, axis=1)
    bad_true = tn < tol
    bad_out = (pn < tol) & ~bad_true
    ok = ~(bad_true | bad_out)
    cos = np.sum(pred[ok] * true[ok], axis=1) / (pn[ok] * tn[ok])
    stats = {"n": int(len(pairs)), "n_valid": int(ok.sum()),
             "degenerate_true": int(bad_true.sum()), "degenerate_output": int(bad_out.sum())}
    if ok.any():
        stats.update(mean=float(cos.mean()), median=float(np.median(cos)), min=float(cos.min()))
    else:
        stats.update(mean=float("nan"), median=float("nan"), min=float("nan"))
    return stats


# ---------------------------------------------------------------- training


@dataclass
class TrainCurve:
    initial_holdout: float
    train: list[float] = field(default_factory=list)
    holdout: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 0 means the initialisation was kept

    def rows(self) -> list[dict]:
        return [{"epoch": i + 1, "train_mse": a, "holdout_mse": b}
                for i, (a, b) in enumerate(zip(self.train, self.holdout))]


def split_indices(n: int, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = max(1, int(round(holdout * n)))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def decoder_header(pairs: GradientPairDataset) -> dict:
    h = pairs.header
    return {
        "flatten_version": h["flatten_version"], "config_hash": h["config_hash"],
        "d_model": h["d_model"], "adapter": h["adapter"], "adapter_hash": h.get("adapter_hash"),
        "n_onehot": len(pairs.layers), "label": h.get("label"),
    }


def train_decoder(pairs: GradientPairDataset, hyper: DecoderHyper,
                  init: DecoderParams | None = None) -> tuple[DecoderParams, TrainCurve]:
    """Fit one decoder per projection by minibatch Adam on squared error.

    Before the first epoch the linear skip path is set to a ridge fit (ridge
    strength picked on the holdout split) and the MLP output layer is zeroed,
    so the MLP only has to learn the nonlinear residual. A holdout split (by
    pair) drives early stopping; the weights from the epoch with the lowest
    holdout MSE are returned, or the initialisation if no epoch beat it.
    """
    if len(pairs) < 50:
        raise ValueError(f"need at least 50 pairs, got {len(pairs)}")
    if not 0 < hyper.holdout <= 0.5:
        raise ValueError("holdout fraction must be in (0, 0.5]")
    header = decoder_header(pairs)
    phi = init.copy() if init is not None else init_decoder(header, hyper.seed, hyper.max_hidden)
    check_compatible(phi, pairs.keys, pairs.d_model, pairs.rank)
    tr_idx, ho_idx = split_indices(len(pairs), hyper.holdout, hyper.seed)

    data = {}
    for proj in pairs.projections:
        lo, fu, layers = pairs.blocks(proj)
        L = lo.shape[1]
        if init is None:
            phi.in_scale[proj] = float(np.mean(np.linalg.norm(lo[tr_idx].reshape(-1, lo.shape[2]), axis=1))) or 1.0
            phi.out_scale[proj] = float(np.sqrt(np.mean(fu[tr_idx].astype(np.float64) ** 2))) or 1.0
        rows = {}
        for name, idx in (("train", tr_idx), ("hold", ho_idx)):
            x = _features(lo[idx].reshape(len(idx) * L, -1), np.tile(layers, len(idx)),
                          phi.in_scale[proj], phi.n_onehot)
            y = (fu[idx].reshape(len(idx) * L, -1) / np.float32(phi.out_scale[proj])).astype(np.float32)
            rows[name] = (x, y)
        data[proj] = rows

    def holdout_mse(p: DecoderParams) -> float:
        return decoder_mse(p, pairs.subset(ho_idx))

    curve = TrainCurve(initial_holdout=holdout_mse(phi))
    best, best_val, stale = phi.copy(), curve.initial_holdout, 0
    if hyper.epochs > 0:
        for proj, rows in data.items():
            net = phi.nets[proj]
            net["skip"] = _ridge(*rows["train"], *rows["hold"])
            net["w2"][:] = 0.0
            net["b2"][:] = 0.0
    rng = np.random.default_rng(hyper.seed + 1)
    opts = {p: Adam({k: v.shape for k, v in phi.nets[p].items()}, hyper.lr) for p in data}
    for epoch in range(1, hyper.epochs + 1):
        train_err = 0.0
        for proj, rows in data.items():
            x, y = rows["train"]
            order = rng.permutation(len(x))
            net = phi.nets[proj]
            for at in range(0, len(x), hyper.batch):
                b = order[at:at + hyper.batch]
                with T.native_accumulation(), T.Tape() as tape:
                    w = {k: tape.leaf(k, v) for k, v in net.items()}
                    diff = _net(w, Tensor(x[b])) - Tensor(y[b])
                    loss = T.mul(T.total(diff * diff), 1.0 / len(b))
                    grads = T.backward_grad(tape, loss)
                opts[proj].step(net, grads)
        for proj in data:
            x, y = data[proj]["train"]
            pred = _apply(phi.nets[proj], x)
            train_err += float(np.sum((pred - y).astype(np.float64) ** 2)) * phi.out_scale[proj] ** 2
        train_mse = train_err / len(tr_idx)
        val = holdout_mse(phi)
        if not (math.isfinite(val) and math.isfinite(train_mse)):
            raise ConvergenceError(f"decoder training diverged at epoch {epoch}")
        curve.train.append(train_mse)
        curve.holdout.append(val)
        log.info("decoder epoch %d train %.4g holdout %.4g", epoch, train_mse, val)
        if val < best_val:
            best, best_val, stale, curve.best_epoch = phi.copy(), val, 0, epoch
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    best.header["best_epoch"] = curve.best_epoch
    return best, curve


def _ridge(x: np.ndarray, y: np.ndarray, xh: np.ndarray, yh: np.ndarray) -> np.ndarray:
    """Least-squares linear map x -> y, ridge strength chosen on (xh, yh)."""
    x64, y64 = x.astype(np.float64), y.astype(np.float64)
    gram = x64.T @ x64
    rhs = x64.T @ y64
    scale = max(float(np.trace(gram)) / len(gram), 1e-30)
    best, best_err = None, np.inf
    for lam in (1e-8, 1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 1.0):
        w = np.linalg.solve(gram + lam * scale * np.eye(len(gram)), rhs)
        err = float(np.mean((xh.astype(np.float64) @ w - yh) ** 2))
        if err < best_err:
            best, best_err = w, err
    return best.astype(np.float32)


# ---------------------------------------------------------------- synthetic pairs


def synthetic_pairs(n: int, d_model: int, rank: int, layers: Sequence[int] = (0,),
                    projections: Sequence[str] = ("q",), seed: int = 0,
                    mode: str = "planted", noise_std: float = 1.0):
    """Pair datasets with a known answer, for checking the decoder itself.

    ``planted``: full = M @ lora per block, with one fixed random M per
    projection. ``noise``: full is Gaussian noise independent of the LoRA side.
    Returns the dataset and the planted maps (empty for ``noise``).
    """
    rng = np.random.default_rng(seed)
    keys = sorted((l, p) for l in layers for p in projections)
    n_in, n_out = 2 * d_model * rank, d_model * d_model
    maps = {p: rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_out, n_in)) for p in sorted(projections)}
    lora = rng.normal(0.0, 1.0, (n, len(keys), n_in))
    if mode == "planted":
        full = np.stack([lora[:, i] @ maps[k[1]].T for i, k in enumerate(keys)], axis=1)
    elif mode == "noise":
        full = rng.normal(0.0, noise_std, (n, len(keys), n_out))
        maps = {}
    else:
        raise ValueError(f"unknown mode {mode!r}")
    header = {"kind": "gradient_pairs", "flatten_version": FLATTEN_VERSION, "config_hash": "synthetic",
              "d_model": d_model, "adapter": {"rank": rank, "projections": sorted(projections),
                                              "layers": sorted(layers)},
              "adapter_hash": None, "source": mode, "label": "synthetic"}
    ds = GradientPairDataset(header, np.arange(n), lora.reshape(n, -1).astype(np.float32),
                             full.reshape(n, -1).astype(np.float32), keys)
    return ds, maps


def planted_decoder(header: dict, maps: dict[str, np.ndarray]) -> DecoderParams:
    """A decoder whose skip path is exactly the planted map (MLP weights zero)."""
    phi = init_decoder(header, zero=True)
    for proj, m in maps.items():
        skip = np.zeros_like(phi.nets[proj]["skip"])
        skip[:m.shape[1]] = m.T
        phi.nets[proj]["skip"] = skip.astype(np.float32)
    return phi
