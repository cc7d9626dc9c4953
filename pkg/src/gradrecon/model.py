"""Decoder-only transformer LM with LoRA adapters on attention projections."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ConvergenceError, NonFiniteError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

PROJECTIONS = ("k", "o", "q", "v")
PAD = 0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    seq_len: int = 10
    role: str = "target"

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.seq_len) < 1:
            raise ConfigError(f"non-positive dimension in {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.role not in ("proxy", "target"):
            raise ConfigError(f"role must be proxy or target, got {self.role!r}")

    @property
    def d_mlp(self) -> int:
        return 4 * self.d_model

    def hash(self) -> str:
        """Architecture fingerprint; the role tag is deliberately left out."""
        spec = {k: v for k, v in asdict(self).items() if k != "role"}
        return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()[:16]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (V, d), "pos_emb": (cfg.seq_len, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for proj in PROJECTIONS:
            shapes[p + f"attn.{proj}"] = (d, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.w1"] = (d, cfg.d_mlp)
        shapes[p + "mlp.b1"] = (cfg.d_mlp,)
        shapes[p + "mlp.w2"] = (cfg.d_mlp, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head.w"] = (d, V)
    shapes["head.b"] = (V,)
    return shapes


def proj_name(layer: int, proj: str) -> str:
    return f"layers.{layer}.attn.{proj}"


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if list(self.tensors) != list(shapes):
            raise ShapeError("parameter names do not match the config layout")
        for k, s in shapes.items():
            if self.tensors[k].shape != s:
                raise ShapeError(f"{k}: expected {s}, got {self.tensors[k].shape}")

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.tensors.values()])

    @classmethod
    def unflatten(cls, config: ModelConfig, theta: np.ndarray) -> "ModelParams":
        shapes = param_shapes(config)
        total = sum(math.prod(s) for s in shapes.values())
        if theta.size != total:
            raise ShapeError(f"flat vector has {theta.size} entries, config needs {total}")
        out, at = {}, 0
        for k, s in shapes.items():
            n = math.prod(s)
            out[k] = np.array(theta[at:at + n], dtype=np.float32).reshape(s)
            at += n
        return cls(config, out)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})


def param_count(cfg: ModelConfig) -> int:
    d, V, L, T_, m = cfg.d_model, cfg.vocab_size, cfg.n_layers, cfg.seq_len, cfg.d_mlp
    per_layer = 4 * d * d + 4 * d + (d * m + m) + (m * d + d)
    return V * d + T_ * d + L * per_layer + 2 * d + d * V + V


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    out = {}
    for k, s in param_shapes(config).items():
        if k.endswith(".g"):
            v = np.ones(s)
        elif k.endswith((".b", ".b1", ".b2")):
            v = np.zeros(s)
        elif k in ("tok_emb", "pos_emb"):
            v = rng.normal(0.0, 0.1, s)
        else:
            v = rng.normal(0.0, 1.0 / math.sqrt(s[0]), s)
        out[k] = v.astype(np.float32)
    return ModelParams(config, out)


# ---------------------------------------------------------------- LoRA


@dataclass
class LoraAdapter:
    layer: int
    proj: str
    A: np.ndarray  # d_model x r
    B: np.ndarray  # r x d_model

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def key(self) -> tuple[int, str]:
        return (self.layer, self.proj)

    def delta(self) -> np.ndarray:
        return T._mm(self.A, self.B)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.layer, self.proj, self.A.copy(), self.B.copy())


def attach_lora(params: ModelParams, rank: int, targets: Sequence[str] = ("q", "v"),
                seed: int = 0, max_rank: int | None = None) -> list[LoraAdapter]:
    """Fresh adapters on ``targets`` of every layer: A ~ N(0, 1/r), B = 0.

    A is drawn from a stream keyed by (seed, projection) only, so the same
    projection gets the same LoRA basis at every depth and in every model
    with the same width. That is what lets one decoder serve all layers.
    """
    d = params.config.d_model
    limit = d // 4 if max_rank is None else max_rank
    if rank < 1:
        raise ConfigError("LoRA rank must be >= 1")
    if rank > limit:
        raise ConfigError(f"LoRA rank {rank} exceeds limit {limit} for d_model={d}")
    if not targets:
        raise ConfigError("no LoRA target projections given")
    bad = set(targets) - set(PROJECTIONS)
    if bad:
        raise ConfigError(f"unknown projections {sorted(bad)}")
    bases = {}
    for proj in sorted(set(targets)):
        rng = np.random.default_rng([seed, PROJECTIONS.index(proj)])
        bases[proj] = rng.normal(0.0, 1.0 / math.sqrt(rank), (d, rank)).astype(np.float32)
    return [LoraAdapter(layer, proj, bases[proj].copy(), np.zeros((rank, d), np.float32))
            for layer in range(params.config.n_layers) for proj in sorted(set(targets))]


def merge_lora(params: ModelParams, adapters: Iterable[LoraAdapter] | None) -> ModelParams:
    """Copy of ``params`` with ``W + A @ B`` written into each adapted projection."""
    out = params.copy()
    for ad in adapters or ():
        name = proj_name(ad.layer, ad.proj)
        out.tensors[name] = (out.tensors[name] + ad.delta()).astype(out.tensors[name].dtype)
    return out


def adapter_spec(adapters: Sequence[LoraAdapter]) -> dict:
    return {
        "rank": adapters[0].rank if adapters else 0,
        "projections": sorted({a.proj for a in adapters}),
        "layers": sorted({a.layer for a in adapters}),
    }


# ---------------------------------------------------------------- forward


def _pad(prompts: Sequence[Sequence[int]], cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    if not prompts:
        raise ShapeError("empty batch")
    lens = np.array([len(p) for p in prompts])
    if lens.min() < 1:
        raise ShapeError("empty token sequence")
    if lens.max() > cfg.seq_len:
        raise ShapeError(f"sequence of length {lens.max()} exceeds seq_len={cfg.seq_len}")
    toks = np.full((len(prompts), lens.max()), PAD, dtype=np.int64)
    for i, p in enumerate(prompts):
        toks[i, :len(p)] = p
    if toks.min() < 0 or toks.max() >= cfg.vocab_size:
        raise ShapeError("token id out of range")
    return toks, lens


def _weights(p: Mapping[str, Tensor], lora: Mapping[tuple[int, str], tuple[Tensor, Tensor]],
             layer: int, proj: str) -> Tensor:
    w = p[proj_name(layer, proj)]
    if (layer, proj) in lora:
        a, b = lora[(layer, proj)]
        w = w + a @ b
    return w


def hidden_states(p: Mapping[str, Tensor], lora, cfg: ModelConfig, toks: np.ndarray) -> Tensor:
    """Final layer-normed hidden states, shape (batch, time, d_model)."""
    B, L = toks.shape
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    pos = T.embedding(p["pos_emb"], np.tile(np.arange(L), (B, 1)))
    x = T.embedding(p["tok_emb"], toks) + pos
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h = T.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        heads = []
        for proj in ("q", "k", "v"):
            y = T.reshape(h @ _weights(p, lora, i, proj), (B, L, H, dh))
            heads.append(T.transpose(y, (0, 2, 1, 3)))
        q, k, v = heads
        att = T.softmax(T.mul(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh)), causal=True)
        ctx = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (B, L, d))
        x = x + ctx @ _weights(p, lora, i, "o")
        h = T.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = T.gelu(h @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"])
        x = x + (h @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"])
    return T.layernorm(x, p["ln_f.g"], p["ln_f.b"])


def logits_all(p, lora, cfg: ModelConfig, toks: np.ndarray) -> Tensor:
    return hidden_states(p, lora, cfg, toks) @ p["head.w"] + p["head.b"]


def answer_logits(p, lora, cfg: ModelConfig, prompts: Sequence[Sequence[int]]) -> Tensor:
    """Logits predicting the token after each prompt, shape (batch, vocab)."""
    toks, lens = _pad(prompts, cfg)
    B, L = toks.shape
    z = T.reshape(logits_all(p, lora, cfg, toks), (B * L, cfg.vocab_size))
    return T.take_rows(z, np.arange(B) * L + lens - 1)


def wrap(params: ModelParams, adapters: Sequence[LoraAdapter] | None = None):
    """Constant (non-differentiated) tensor views of params and adapters."""
    p = {k: Tensor(v) for k, v in params.tensors.items()}
    lora = {a.key: (Tensor(a.A), Tensor(a.B)) for a in adapters or ()}
    return p, lora


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_lm(params: ModelParams, adapters: Sequence[LoraAdapter] | None,
               tokens: Sequence[int]) -> np.ndarray:
    """Next-token distribution at every position of ``tokens``, shape (len, vocab)."""
    toks, _ = _pad([list(tokens)], params.config)
    p, lora = wrap(params, adapters)
    return _softmax_np(logits_all(p, lora, params.config, toks).data[0])


def answer_probs(params: ModelParams, adapters, prompts: Sequence[Sequence[int]],
                 batch: int = 256) -> np.ndarray:
    """Next-token distribution after each prompt, shape (n_prompts, vocab)."""
    p, lora = wrap(params, adapters)
    out = [_softmax_np(answer_logits(p, lora, params.config, prompts[i:i + batch]).data)
           for i in range(0, len(prompts), batch)]
    return np.concatenate(out) if out else np.zeros((0, params.config.vocab_size))


def greedy_answers(params: ModelParams, prompts: Sequence[Sequence[int]], adapters=None) -> np.ndarray:
    return answer_probs(params, adapters, prompts).argmax(axis=1)


def embed(params: ModelParams, tokens: Sequence[int], adapters=None) -> np.ndarray:
    """Mean-pooled final hidden state, used as a sentence embedding."""
    toks, _ = _pad([list(tokens)], params.config)
    p, lora = wrap(params, adapters)
    return hidden_states(p, lora, params.config, toks).data[0].astype(np.float64).mean(axis=0)


def check_distribution(y: np.ndarray, vocab: int) -> np.ndarray:
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[-1] != vocab:
        raise ShapeError(f"target distribution has width {y.shape[-1]}, vocab is {vocab}")
    if np.any(y < 0) or np.any(np.abs(y.sum(axis=-1) - 1.0) > 1e-5):
        raise ValueError("target is not a normalized distribution")
    return y


def loss_ce(params: ModelParams, adapters, x: Sequence[int], y) -> float:
    """Cross-entropy between the predicted answer distribution and ``y``."""
    y = check_distribution(y, params.config.vocab_size)
    p, lora = wrap(params, adapters)
    z = answer_logits(p, lora, params.config, [list(x)])
    return T.cross_entropy(z, y[:1]).item()


# ---------------------------------------------------------------- training


@dataclass
class TrainHyper:
    steps: int = 1000
    batch: int = 64
    lr: float = 3e-3
    seed: int = 0
    eval_every: int = 250
    stop_acc: float | None = None


@dataclass
class TrainResult:
    params: ModelParams
    adapters: list[LoraAdapter] | None
    losses: list[float] = field(default_factory=list)
    accuracy: float = float("nan")
    steps_run: int = 0


class Adam:
    def __init__(self, shapes: Mapping[str, tuple[int, ...]], lr: float,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros(s, np.float32) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, np.float32) for k, s in shapes.items()}
        self.t = 0

    def step(self, values: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            values[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(values[k].dtype)


def _batch_loss(params: ModelParams, adapters, prompts, answers, train_adapters: bool):
    cfg = params.config
    with T.Tape() as tape:
        if train_adapters:
            p = {k: Tensor(v) for k, v in params.tensors.items()}
            lora = {a.key: (tape.leaf(f"A:{a.layer}:{a.proj}", a.A),
                            tape.leaf(f"B:{a.layer}:{a.proj}", a.B)) for a in adapters}
        else:
            p = {k: tape.leaf(k, v) for k, v in params.tensors.items()}
            lora = {a.key: (Tensor(a.A), Tensor(a.B)) for a in adapters or ()}
        z = answer_logits(p, lora, cfg, prompts)
        y = np.zeros(z.shape)
        y[np.arange(len(answers)), answers] = 1.0
        loss = T.cross_entropy(z, y)
    return loss.item(), T.backward_grad(tape, loss)


def accuracy(params: ModelParams, examples: Sequence[tuple[Sequence[int], int]], adapters=None) -> float:
    if not examples:
        return float("nan")
    pred = greedy_answers(params, [list(x) for x, _ in examples], adapters)
    return float(np.mean(pred == np.array([a for _, a in examples])))


def pretrain(params: ModelParams, examples: Sequence[tuple[Sequence[int], int]],
             hyper: TrainHyper, adapters: Sequence[LoraAdapter] | None = None,
             train_adapters: bool = False) -> TrainResult:
    """Minimise answer-token cross-entropy over ``examples`` with Adam.

    Returns new objects; the inputs are never modified. With
    ``train_adapters`` only the adapter matrices move and the base weights
    stay bit-identical. With ``stop_acc`` set, stops early once accuracy
    reaches it at an evaluation checkpoint.
    """
    if not examples:
        raise ValueError("empty training corpus")
    params = params.copy()
    adapters = [a.copy() for a in adapters] if adapters else None
    if train_adapters and not adapters:
        raise ConfigError("train_adapters requires adapters")
    res = TrainResult(params, adapters)
    if hyper.steps <= 0:
        return res
    if train_adapters:
        values = {}
        for a in adapters:
            values[f"A:{a.layer}:{a.proj}"] = a.A
            values[f"B:{a.layer}:{a.proj}"] = a.B
    else:
        values = params.tensors
    opt = Adam({k: v.shape for k, v in values.items()}, hyper.lr)
    rng = np.random.default_rng(hyper.seed)
    n = len(examples)
    order = rng.permutation(n)
    at = 0
    for step in range(1, hyper.steps + 1):
        if at + hyper.batch > n:
            order, at = rng.permutation(n), 0
        idx = order[at:at + hyper.batch]
        at += hyper.batch
        prompts = [list(examples[i][0]) for i in idx]
        answers = np.array([examples[i][1] for i in idx])
        try:
            loss, grads = _batch_loss(params, adapters, prompts, answers, train_adapters)
        except NonFiniteError as exc:
            raise ConvergenceError(f"training diverged at step {step}: {exc}") from exc
        res.losses.append(loss)
        opt.step(values, grads)
        res.steps_run = step
        if step % hyper.eval_every == 0 or step == hyper.steps:
            res.accuracy = accuracy(params, examples, adapters if adapters else None)
            log.info("step %d loss %.4f acc %.3f", step, loss, res.accuracy)
            if hyper.stop_acc is not None and res.accuracy >= hyper.stop_acc:
                break
    return res


# ---------------------------------------------------------------- checkpoints


def save_params(path, params: ModelParams, meta: Mapping | None = None) -> None:
    from . import container

    info = {"kind": "model", "config": asdict(params.config), "config_hash": params.config.hash()}
    info.update(meta or {})
    container.save(path, params.tensors, info)


def load_params(path) -> tuple[ModelParams, dict]:
    from . import container

    tensors, meta = container.load(path)
    if meta.get("kind") != "model":
        raise ShapeError(f"{path} is not a model checkpoint")
    cfg = ModelConfig(**meta["config"])
    return ModelParams(cfg, {k: tensors[k] for k in param_shapes(cfg)}), meta
