"""Single-step unlearning: decoded-gradient method, baselines, and step-size sweep."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import Corpus, Fact, filter_paraphrases, generate_paraphrases
from .decoder import DecoderParams, check_compatible, decode
from .errors import ConfigError, IncompatibleError
from .gradients import (FullGradient, LoraGradient, adapter_hash, average_views, full_gradient,
                        lora_gradient)
from .model import LoraAdapter, ModelParams, answer_probs, merge_lora, proj_name

log = logging.getLogger(__name__)

METHODS = ("r2f", "full_grad", "lora_single", "lora_multi", "grad_ascent")


@dataclass
class UnlearnRequest:
    facts: list[int]
    eta: float
    n_views: int = 5
    method: str = "r2f"
    label: str = "uniform"  # or "counterfactual"
    counterfactual: int | None = None  # token id, single-fact requests only
    seed: int = 0
    tau: float | None = 0.8  # paraphrase filter threshold; None disables filtering

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.n_views < 1:
            raise ConfigError("n_views must be >= 1")
        if self.label not in ("uniform", "counterfactual"):
            raise ConfigError(f"unknown label mode {self.label!r}")
        if not self.facts:
            raise ConfigError("no target facts")

    def with_eta(self, eta: float) -> "UnlearnRequest":
        return UnlearnRequest(list(self.facts), eta, self.n_views, self.method, self.label,
                              self.counterfactual, self.seed, self.tau)


@dataclass
class UnlearnOutcome:
    method: str
    params: ModelParams
    adapters: list[LoraAdapter] | None
    applied_norm: float
    pre_prob: list[float]
    post_prob: list[float]
    duration: float
    deltas: list[dict] = field(default_factory=list, repr=False)  # per-step update, keyed by tensor name

    def merged(self) -> ModelParams:
        """Base params with any adapter update folded in."""
        return merge_lora(self.params, self.adapters) if self.adapters else self.params


def unlearning_label(corpus: Corpus, fact: Fact, req: UnlearnRequest) -> np.ndarray:
    if req.label == "uniform":
        return corpus.unlearning_label()
    tok = req.counterfactual if req.counterfactual is not None else counterfactual_token(corpus, fact)
    if tok == fact.answer:
        raise ConfigError("counterfactual token equals the canonical answer")
    y = np.zeros(len(corpus.vocab))
    y[tok] = 1.0
    return y


def counterfactual_token(corpus: Corpus, fact: Fact) -> int:
    """The next object of the same relation, cyclically."""
    rel = [t for t in corpus.answer_ids
           if corpus.vocab.tokens[t].split(".")[0] == corpus.vocab.tokens[fact.answer].split(".")[0]]
    return rel[(rel.index(fact.answer) + 1) % len(rel)]


def _answer_prob(params: ModelParams, facts: Sequence[Fact]) -> list[float]:
    probs = answer_probs(params, None, [list(f.prompt) for f in facts])
    return [float(probs[i, f.answer]) for i, f in enumerate(facts)]


def views(corpus: Corpus, fact: Fact, req: UnlearnRequest, params: ModelParams) -> list[tuple[int, ...]]:
    pset = generate_paraphrases(corpus, fact, req.n_views, req.seed)
    if req.tau is not None and len(pset) > 1:
        pset = filter_paraphrases(pset, params, req.tau)
    return list(pset.prompts)


def _apply_full(params: ModelParams, grad: FullGradient, eta: float) -> tuple[ModelParams, dict]:
    """theta - eta * grad on the projection weights named by ``grad``."""
    out = params.copy()
    delta = {}
    e = np.float32(eta)
    for key, g in grad.grads.items():
        name = proj_name(*key)
        step = e * g.astype(np.float32)
        out.tensors[name] = out.tensors[name] - step
        delta[name] = step
    return out, delta


def _norm(deltas: Sequence[dict]) -> float:
    return float(np.sqrt(sum(float(np.sum(v.astype(np.float64) ** 2)) for d in deltas for v in d.values())))


def _finish(method, req, corpus, start_params, params, adapters, deltas, t0) -> UnlearnOutcome:
    facts = [corpus.fact(i) for i in req.facts]
    after = merge_lora(params, adapters) if adapters else params
    return UnlearnOutcome(method, params, adapters, _norm(deltas), _answer_prob(start_params, facts),
                          _answer_prob(after, facts), time.perf_counter() - t0, deltas)


def r2f_unlearn(params: ModelParams, adapters: Sequence[LoraAdapter], phi: DecoderParams,
                corpus: Corpus, req: UnlearnRequest) -> UnlearnOutcome:
    """Paraphrase, take LoRA gradients per view, average, decode, and step once per fact.

    The adapters only provide the low-rank probe (they keep B = 0 throughout);
    the decoded gradient is applied to the adapted projection weights.
    """
    keys = sorted(a.key for a in adapters)
    check_compatible(phi, keys, params.config.d_model, adapters[0].rank, adapter_hash(adapters))
    t0 = time.perf_counter()
    cur, deltas = params, []
    for fid in req.facts:
        fact = corpus.fact(fid)
        y = unlearning_label(corpus, fact, req)
        grads = [lora_gradient(cur, adapters, x, y) for x in views(corpus, fact, req, cur)]
        g_hat = decode(phi, average_views(grads))
        cur, delta = _apply_full(cur, g_hat, req.eta)
        deltas.append(delta)
    return _finish("r2f", req, corpus, params, cur, None, deltas, t0)


def _full_grad_steps(params: ModelParams, corpus: Corpus, req: UnlearnRequest, keys,
                     label_fn: Callable[[Fact], np.ndarray], eta: float, method: str) -> UnlearnOutcome:
    t0 = time.perf_counter()
    cur, deltas = params, []
    for fid in req.facts:
        fact = corpus.fact(fid)
        g = full_gradient(cur, fact.prompt, label_fn(fact), keys)
        cur, delta = _apply_full(cur, g, eta)
        deltas.append(delta)
    return _finish(method, req, corpus, params, cur, None, deltas, t0)


def baseline_full_grad(params: ModelParams, corpus: Corpus, req: UnlearnRequest,
                       keys: Sequence[tuple[int, str]]) -> UnlearnOutcome:
    """Exact projection-weight gradient on the canonical prompt, one step per fact."""
    return _full_grad_steps(params, corpus, req, keys,
                            lambda f: unlearning_label(corpus, f, req), req.eta, "full_grad")


def grad_ascent_reference(params: ModelParams, corpus: Corpus, req: UnlearnRequest,
                          keys: Sequence[tuple[int, str]]) -> UnlearnOutcome:
    """Ascend the cross-entropy of the memorised answer: theta + eta * grad."""
    def onehot(f: Fact) -> np.ndarray:
        y = np.zeros(len(corpus.vocab))
        y[f.answer] = 1.0
        return y

    return _full_grad_steps(params, corpus, req, keys, onehot, -req.eta, "grad_ascent")


def baseline_lora(params: ModelParams, adapters: Sequence[LoraAdapter], corpus: Corpus,
                  req: UnlearnRequest) -> UnlearnOutcome:
    """Step the adapters along minus the (single- or multi-view) LoRA gradient."""
    if req.method not in ("lora_single", "lora_multi"):
        raise ConfigError(f"baseline_lora cannot run method {req.method!r}")
    t0 = time.perf_counter()
    ads = [a.copy() for a in adapters]
    e = np.float32(req.eta)
    deltas = []
    for fid in req.facts:
        fact = corpus.fact(fid)
        y = unlearning_label(corpus, fact, req)
        cur = merge_lora(params, ads)
        xs = [fact.prompt] if req.method == "lora_single" else views(corpus, fact, req, cur)
        g = average_views([lora_gradient(params, ads, x, y) for x in xs])
        delta = {}
        for a in ads:
            ga, gb = g.grads[a.key]
            sa, sb = e * ga, e * gb
            a.A = a.A - sa
            a.B = a.B - sb
            delta[f"A:{a.layer}:{a.proj}"] = sa
            delta[f"B:{a.layer}:{a.proj}"] = sb
        deltas.append(delta)
    return _finish(req.method, req, corpus, params, params, ads, deltas, t0)


def run_method(params: ModelParams, corpus: Corpus, req: UnlearnRequest, *, adapters=None,
               phi: DecoderParams | None = None, keys=None) -> UnlearnOutcome:
    """Dispatch ``req.method``; ``keys`` default to the adapted projections."""
    if keys is None:
        if not adapters:
            raise ConfigError("need adapters or explicit projection keys")
        keys = sorted(a.key for a in adapters)
    if req.method == "r2f":
        if phi is None:
            raise IncompatibleError("r2f needs a trained decoder")
        return r2f_unlearn(params, adapters, phi, corpus, req)
    if req.method == "full_grad":
        return baseline_full_grad(params, corpus, req, keys)
    if req.method == "grad_ascent":
        return grad_ascent_reference(params, corpus, req, keys)
    return baseline_lora(params, adapters, corpus, req)


# ---------------------------------------------------------------- step size


@dataclass
class SweepRow:
    eta: float
    usr: float
    gur: float
    gur_drop: float


@dataclass
class EtaSelection:
    eta: float
    rows: list[SweepRow]
    within_budget: bool

    def table(self) -> list[dict]:
        return [vars(r) for r in self.rows]


def eta_sweep(run: Callable[[float], ModelParams], evaluate: Callable[[ModelParams], tuple[float, float, float]],
              grid: Sequence[float], budget: float = 2.0, refine: int = 0) -> EtaSelection:
    """Pick the largest step size whose utility drop stays within ``budget`` points.

    ``run(eta)`` returns the post-unlearning model; ``evaluate(model)`` returns
    (USR, GUR, GUR drop). With ``refine > 0`` the gap between the largest
    in-budget grid point and the next grid point is bisected geometrically
    that many times, since the drop tends to switch on sharply. If no step
    size fits the budget the one with the smallest drop is returned with
    ``within_budget`` False.
    """
    if not grid:
        raise ConfigError("empty step-size grid")
    if any(e < 0 for e in grid):
        raise ConfigError("step sizes must be non-negative")
    if refine < 0:
        raise ConfigError("refine must be >= 0")
    rows: list[SweepRow] = []

    def probe(eta: float) -> SweepRow:
        usr, gur, drop = evaluate(run(eta))
        row = SweepRow(eta, usr, gur, drop)
        rows.append(row)
        return row

    grid_rows = [probe(e) for e in sorted(set(float(e) for e in grid))]
    ok = [r for r in grid_rows if r.gur_drop <= budget]
    if ok:
        lo = max(ok, key=lambda r: r.eta).eta
        above = [r.eta for r in grid_rows if r.eta > lo]
        if above and lo > 0:
            hi = min(above)
            for _ in range(refine):
                mid = float(np.sqrt(lo * hi))
                if probe(mid).gur_drop <= budget:
                    lo = mid
                else:
                    hi = mid
        rows.sort(key=lambda r: r.eta)
        return EtaSelection(lo, rows, True)
    rows.sort(key=lambda r: r.eta)
    best = min(rows, key=lambda r: (r.gur_drop, r.eta))
    log.warning("no step size keeps the GUR drop within %.2f points; using eta=%g", budget, best.eta)
    return EtaSelection(best.eta, rows, False)
