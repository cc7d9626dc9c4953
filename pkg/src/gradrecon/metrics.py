"""Forgetting, utility, relearning and alignment metrics, and the reconstruction-bound audit."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import Corpus, Fact
from .decoder import DecoderParams, decode
from .errors import ConfigError, IncompatibleError, NonFiniteError
from .gradients import full_gradient, lora_gradient
from .model import (Adam, LoraAdapter, ModelParams, answer_logits, answer_probs, greedy_answers,
                    proj_name)
from .tensor import Tensor

log = logging.getLogger(__name__)


def _pct(num: int, den: int) -> float:
    return 100.0 * num / den if den else 0.0


# ---------------------------------------------------------------- USR / GUR


@dataclass
class UsrResult:
    usr: float
    flipped: list[bool]  # per scored target
    scored: list[int]  # fact ids that the before-model answered correctly
    excluded: list[int]  # fact ids the before-model already got wrong


def usr_from_answers(before: Sequence[int], after: Sequence[int], answers: Sequence[int],
                     ids: Sequence[int] | None = None) -> UsrResult:
    """USR from greedy answers; items the before-model already got wrong are excluded."""
    if len(answers) == 0:
        raise ConfigError("no targets to score")
    ids = list(range(len(answers))) if ids is None else list(ids)
    scored, excluded, flipped = [], [], []
    for i, p, q, a in zip(ids, before, after, answers):
        if p != a:
            excluded.append(i)
            continue
        scored.append(i)
        flipped.append(bool(q != p))
    if excluded:
        log.info("usr: %d targets excluded (already wrong before unlearning)", len(excluded))
    return UsrResult(_pct(sum(flipped), len(scored)), flipped, scored, excluded)


def usr(before: ModelParams, after: ModelParams, targets: Sequence[Fact]) -> UsrResult:
    """Percentage of targets whose greedy answer changed after unlearning."""
    if not targets:
        raise ConfigError("no targets to score")
    prompts = [f.prompt for f in targets]
    return usr_from_answers(greedy_answers(before, prompts), greedy_answers(after, prompts),
                            [f.answer for f in targets], [f.id for f in targets])


@dataclass
class GurResult:
    gur: float
    before: float
    drop: float
    correct: list[bool]


def fact_accuracy(params: ModelParams, facts: Sequence[Fact]) -> tuple[float, list[bool]]:
    ans = greedy_answers(params, [f.prompt for f in facts])
    ok = [bool(a == f.answer) for a, f in zip(ans, facts)]
    return _pct(sum(ok), len(ok)), ok


def gur(after: ModelParams, retain: Sequence[Fact], before: ModelParams | None = None,
        before_acc: float | None = None) -> GurResult:
    """Greedy accuracy on the retain facts, with the drop from the before-model."""
    if not retain:
        raise ConfigError("empty retain set")
    acc, ok = fact_accuracy(after, retain)
    if before_acc is None:
        before_acc = fact_accuracy(before, retain)[0] if before is not None else acc
    return GurResult(acc, before_acc, before_acc - acc, ok)


# ---------------------------------------------------------------- RAP


@dataclass
class AttackHyper:
    steps: int = 20
    lr: float = 1e-3
    n_paraphrases: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.n_paraphrases < 1 or self.lr <= 0:
            raise ConfigError("attack needs steps >= 0, n_paraphrases >= 1, lr > 0")


@dataclass
class RapResult:
    rap: float
    recovered: list[bool]
    diverged: list[int]


def attack_prompts(corpus: Corpus, fact: Fact, m: int) -> list[tuple[int, ...]]:
    """The first ``m`` non-canonical template renderings of ``fact``."""
    from .corpus import TEMPLATES

    if m > len(TEMPLATES) - 1:
        raise ConfigError(f"only {len(TEMPLATES) - 1} attack paraphrases available")
    return [corpus.render(fact, t) for t in range(1, m + 1)]


def relearn(params: ModelParams, keys: Sequence[tuple[int, str]], prompts, answer: int,
            hyper: AttackHyper) -> ModelParams:
    """Fine-tune a copy of ``params`` on (prompt, answer) pairs, adapted projections only."""
    out = params.copy()
    names = [proj_name(*k) for k in keys]
    opt = Adam({n: out.tensors[n].shape for n in names}, hyper.lr)
    y = np.zeros((len(prompts), params.config.vocab_size))
    y[:, answer] = 1.0
    for _ in range(hyper.steps):
        with T.Tape() as tape:
            p = {k: (tape.leaf(k, v) if k in names else Tensor(v)) for k, v in out.tensors.items()}
            loss = T.cross_entropy(answer_logits(p, {}, params.config, prompts), y)
        g = T.backward_grad(tape, loss)
        vals = {n: out.tensors[n] for n in names}
        opt.step(vals, {n: g[n] for n in names})
        out.tensors.update(vals)
    return out


def rap(after: ModelParams, corpus: Corpus, targets: Sequence[Fact], keys: Sequence[tuple[int, str]],
        hyper: AttackHyper = AttackHyper()) -> RapResult:
    """Percentage of targets whose canonical answer comes back after a paraphrase fine-tune.

    Each target is attacked on its own copy of the model. A diverging attack
    counts as recovered.
    """
    if not targets:
        raise ConfigError("no targets to attack")
    recovered, diverged = [], []
    for f in targets:
        try:
            m = relearn(after, keys, attack_prompts(corpus, f, hyper.n_paraphrases), f.answer, hyper)
            recovered.append(bool(greedy_answers(m, [f.prompt])[0] == f.answer))
        except (NonFiniteError, FloatingPointError):
            diverged.append(f.id)
            recovered.append(True)
    return RapResult(_pct(sum(recovered), len(recovered)), recovered, diverged)


# ---------------------------------------------------------------- MIA


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p, np.float64) - np.asarray(q, np.float64)).sum(axis=-1)


def row_cosine(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p, q = np.asarray(p, np.float64), np.asarray(q, np.float64)
    den = np.linalg.norm(p, axis=-1) * np.linalg.norm(q, axis=-1)
    return np.where(den > 0, (p * q).sum(axis=-1) / np.where(den > 0, den, 1.0), 0.0)


@dataclass
class MiaResult:
    cosine: float
    tv: float
    per_probe_cosine: np.ndarray = field(repr=False)
    per_probe_tv: np.ndarray = field(repr=False)


def mia_from_probs(p: np.ndarray, q: np.ndarray) -> MiaResult:
    c, t = row_cosine(p, q), total_variation(p, q)
    return MiaResult(float(c.mean()), float(t.mean()), c, t)


def mia(before: ModelParams, after: ModelParams, probes: Sequence[Sequence[int]]) -> MiaResult:
    """Mean cosine and total variation between next-token distributions on probe prompts."""
    if not probes:
        raise ConfigError("no probe prompts")
    return mia_from_probs(answer_probs(before, None, probes), answer_probs(after, None, probes))


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    method: str
    usr: float
    gur: float
    gur_before: float
    gur_drop: float
    rap: float
    mia_cosine: float
    mia_tv: float
    n_targets: int
    n_excluded: int
    n_retain: int
    n_probes: int
    manifest_hash: str = ""
    details: list[dict] = field(default_factory=list)

    def check(self) -> None:
        for name in ("usr", "gur", "gur_before", "rap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if not -1.0 - 1e-9 <= self.mia_cosine <= 1.0 + 1e-9:
            raise ValueError("mia_cosine outside [-1, 1]")
        if not -1e-12 <= self.mia_tv <= 1.0 + 1e-12:
            raise ValueError("mia_tv outside [0, 1]")

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("details")
        return d

    def to_json(self) -> str:
        return json.dumps(_rounded(self.summary()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        return rows_to_csv(self.details, ["kind", "fact_id", "prompt", "before", "after", "value"])


def _rounded(obj, digits: int = 10):
    """Round floats so reports do not depend on the last ulp of a sum's order."""
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v, digits) for v in obj]
    return obj


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def evaluate(before: ModelParams, after: ModelParams, corpus: Corpus, keys: Sequence[tuple[int, str]],
             method: str = "", attack: AttackHyper | None = AttackHyper(), n_probes: int = 500,
             probe_seed: int = 0, targets: Sequence[Fact] | None = None) -> MetricsReport:
    """All four metrics for one before/after pair. ``attack=None`` skips RAP."""
    targets = list(corpus.target_facts if targets is None else targets)
    retain = corpus.retain_facts
    probes = corpus.probe_prompts(n_probes, probe_seed)
    u = usr(before, after, targets)
    g = gur(after, retain, before)
    scored = [corpus.fact(i) for i in u.scored]
    r = rap(after, corpus, scored, keys, attack) if attack is not None and scored else None
    m = mia(before, after, probes)
    a0 = greedy_answers(before, [f.prompt for f in targets])
    a1 = greedy_answers(after, [f.prompt for f in targets])
    details = []
    flip = dict(zip(u.scored, u.flipped))
    rec = dict(zip(u.scored, r.recovered)) if r else {}
    for f, p, q in zip(targets, a0, a1):
        details.append({"kind": "target", "fact_id": f.id, "prompt": "", "before": int(p), "after": int(q),
                        "value": "excluded" if f.id not in flip else int(flip[f.id])})
        if f.id in rec:
            details.append({"kind": "relearn", "fact_id": f.id, "prompt": "", "before": "", "after": "",
                            "value": int(rec[f.id])})
    for f, ok in zip(retain, g.correct):
        details.append({"kind": "retain", "fact_id": f.id, "prompt": "", "before": "", "after": "",
                        "value": int(ok)})
    for i, (c, t) in enumerate(zip(m.per_probe_cosine, m.per_probe_tv)):
        details.append({"kind": "probe_cosine", "fact_id": "", "prompt": i, "before": "", "after": "",
                        "value": float(c)})
        details.append({"kind": "probe_tv", "fact_id": "", "prompt": i, "before": "", "after": "",
                        "value": float(t)})
    rep = MetricsReport(method, u.usr, g.gur, g.before, g.drop, r.rap if r else 0.0, m.cosine, m.tv,
                        len(targets), len(u.excluded), len(retain), len(probes), details=details)
    rep.check()
    return rep


# ---------------------------------------------------------------- bound audit


@dataclass
class Prop1Audit:
    lhs: np.ndarray  # |D_tar - G_tar| per sample
    term_a: np.ndarray  # |D_tar - G_pro|
    term_c: np.ndarray  # |G_pro - G_tar|
    term_a_pro: np.ndarray  # |D_pro - G_pro|, the in-distribution proxy error
    layers: list[int]
    tol: float = 1e-5

    @property
    def e_lhs(self) -> float:
        return float(np.mean(self.lhs))

    @property
    def e_term_a(self) -> float:
        return float(np.mean(self.term_a))

    @property
    def e_term_a_pro(self) -> float:
        return float(np.mean(self.term_a_pro))

    @property
    def e_term_c(self) -> float:
        return float(np.mean(self.term_c))

    @property
    def dis_hat(self) -> float:
        return max(0.0, self.e_term_a - self.e_term_a_pro)

    @property
    def per_sample_ok(self) -> np.ndarray:
        return self.lhs <= self.term_a + self.term_c + self.tol

    @property
    def bound(self) -> float:
        return self.e_term_a_pro + self.dis_hat + self.e_term_c

    @property
    def bound_satisfied(self) -> bool:
        return bool(self.e_lhs <= self.bound + self.tol and self.per_sample_ok.all())

    def summary(self) -> dict:
        return _rounded({
            "n_samples": int(len(self.lhs)), "layers": list(self.layers),
            "e_lhs": self.e_lhs, "e_term_a": self.e_term_a, "e_term_a_pro": self.e_term_a_pro,
            "dis_hat": self.dis_hat, "e_term_c": self.e_term_c, "bound": self.bound,
            "per_sample_ok": int(self.per_sample_ok.sum()), "bound_satisfied": self.bound_satisfied,
            "tol": self.tol,
        })

    def to_csv(self) -> str:
        rows = [{"sample": i, "lhs": float(a), "term_a": float(b), "term_c": float(c), "term_a_pro": float(d)}
                for i, (a, b, c, d) in enumerate(zip(self.lhs, self.term_a, self.term_c, self.term_a_pro))]
        return rows_to_csv(rows, ["sample", "lhs", "term_a", "term_c", "term_a_pro"])

    @classmethod
    def from_csv(cls, text: str, layers: Sequence[int], tol: float = 1e-5) -> "Prop1Audit":
        rows = list(csv.DictReader(io.StringIO(text)))
        col = lambda k: np.array([float(r[k]) for r in rows])
        return cls(col("lhs"), col("term_a"), col("term_c"), col("term_a_pro"), list(layers), tol)


def audit_prop1(phi: DecoderParams, proxy: ModelParams, proxy_adapters: Sequence[LoraAdapter],
                target: ModelParams, target_adapters: Sequence[LoraAdapter],
                samples: Sequence[tuple[Sequence[int], np.ndarray]]) -> Prop1Audit:
    """Per-sample norms of the reconstruction-error decomposition.

    Every term is measured on the projection layers both models have. The
    decoded target gradient D_tar comes from the target's own LoRA gradient;
    D_pro comes from the proxy's LoRA gradient on the same sample.
    """
    if proxy.config.d_model != target.config.d_model:
        raise IncompatibleError("proxy and target differ in d_model")
    if proxy_adapters[0].rank != target_adapters[0].rank:
        raise IncompatibleError("proxy and target adapters differ in rank")
    pk = {a.key for a in proxy_adapters}
    tk = {a.key for a in target_adapters}
    if {p for _, p in pk} != {p for _, p in tk}:
        raise IncompatibleError("proxy and target adapt different projections")
    keys = sorted(pk & tk)
    if not keys or not samples:
        raise ConfigError("audit needs shared layers and at least one sample")
    rows = []
    for x, y in samples:
        d_tar = decode(phi, lora_gradient(target, target_adapters, x, y)).flatten_keys(keys)
        d_pro = decode(phi, lora_gradient(proxy, proxy_adapters, x, y)).flatten_keys(keys)
        g_tar = full_gradient(target, x, y, keys).flatten_keys(keys)
        g_pro = full_gradient(proxy, x, y, keys).flatten_keys(keys)
        n = lambda v: float(np.linalg.norm(v))
        rows.append((n(d_tar - g_tar), n(d_tar - g_pro), n(g_pro - g_tar), n(d_pro - g_pro)))
    a = np.array(rows)
    return Prop1Audit(a[:, 0], a[:, 1], a[:, 2], a[:, 3], sorted({k[0] for k in keys}))
