"""Stage drivers shared by the command line and the test suite.

Each stage reads its inputs from an output directory, writes its outputs
there atomically, and depends only on the config and the input files.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .config import RunConfig
from .corpus import TEMPLATES, Corpus, build_synthetic_corpus
from .decoder import DecoderHyper, DecoderParams, train_decoder
from .errors import ConfigError, ConvergenceError
from .gradients import GradientPairDataset, collect_averaged_pairs, collect_pairs
from .metrics import AttackHyper, MetricsReport, audit_prop1, evaluate, fact_accuracy, gur, rows_to_csv, usr
from .model import (LoraAdapter, ModelConfig, ModelParams, TrainHyper, accuracy, attach_lora,
                    init_model, load_params, pretrain, save_params)
from .unlearn import UnlearnOutcome, UnlearnRequest, eta_sweep, run_method

log = logging.getLogger(__name__)

METHODS = ("r2f", "full_grad", "lora_single", "lora_multi", "grad_ascent")
METRIC_COLUMNS = ("usr", "gur", "gur_drop", "rap", "mia_cosine", "mia_tv", "eta")


def write_json(path: Path, obj) -> None:
    container.atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path):
    return json.loads(Path(path).read_text())


@dataclass(frozen=True)
class Layout:
    """File names inside one run directory."""

    root: Path

    @property
    def corpus(self) -> Path:
        return self.root / "corpus.jsonl"

    @property
    def proxy(self) -> Path:
        return self.root / "proxy.r2f"

    @property
    def target(self) -> Path:
        return self.root / "target.r2f"

    @property
    def pretrain_report(self) -> Path:
        return self.root / "pretrain.json"

    @property
    def pairs(self) -> Path:
        return self.root / "pairs.r2f"

    @property
    def decoder(self) -> Path:
        return self.root / "decoder.r2f"

    @property
    def curve(self) -> Path:
        return self.root / "decoder_curve.csv"

    def unlearned(self, method: str) -> Path:
        return self.root / "unlearn" / f"{method}.r2f"

    def adapters(self, method: str) -> Path:
        return self.root / "unlearn" / f"{method}.adapters.r2f"

    def manifest(self, method: str) -> Path:
        return self.root / "unlearn" / f"{method}.manifest.json"

    def sweep_table(self, method: str) -> Path:
        return self.root / "unlearn" / f"{method}.eta_sweep.csv"

    def report(self, method: str) -> Path:
        return self.root / "eval" / f"{method}.json"

    def details(self, method: str) -> Path:
        return self.root / "eval" / f"{method}.csv"

    @property
    def audit(self) -> Path:
        return self.root / "audit.json"

    @property
    def audit_rows(self) -> Path:
        return self.root / "audit.csv"


# ---------------------------------------------------------------- building blocks


def make_corpus(cfg: RunConfig) -> Corpus:
    return build_synthetic_corpus(cfg["corpus.n_facts"], cfg["corpus.n_relations"], cfg["corpus.seed"],
                                  cfg["corpus.target_fraction"], cfg["corpus.objects_per_relation"])


def model_config(cfg: RunConfig, role: str, vocab: int) -> ModelConfig:
    return ModelConfig(vocab, cfg[f"{role}.d_model"], cfg[f"{role}.n_layers"], cfg[f"{role}.n_heads"],
                       cfg["model.seq_len"], role)


def adapters_for(cfg: RunConfig, params: ModelParams, rank: int | None = None,
                 ratio: float | None = None) -> list[LoraAdapter]:
    rank = cfg["adapter.rank"] if rank is None else rank
    ratio = cfg["adapter.max_rank_ratio"] if ratio is None else ratio
    limit = int(ratio * params.config.d_model)
    return attach_lora(params, rank, tuple(cfg["adapter.projections"]), cfg["adapter.seed"], max_rank=limit)


def adapted_keys(cfg: RunConfig, params: ModelParams) -> list[tuple[int, str]]:
    return sorted((l, p) for l in range(params.config.n_layers) for p in cfg["adapter.projections"])


def pair_pool(cfg: RunConfig, corpus: Corpus) -> list[tuple[tuple[int, ...], np.ndarray]]:
    """Retain-fact prompts (all templates) with the unlearning label, shuffled."""
    y = corpus.unlearning_label()
    pool = [(p, y) for p, _ in corpus.training_examples(corpus.retain_facts)]
    order = np.random.default_rng(cfg["collect.seed"]).permutation(len(pool))
    return [pool[i] for i in order]


def view_pool(cfg: RunConfig, corpus: Corpus) -> list[tuple[list[tuple[int, ...]], np.ndarray]]:
    """``pair_pool`` with each prompt joined by other renderings of its fact, n_views in all.

    Uses the same shuffle as ``pair_pool``, so group i leads with pool prompt i.
    """
    y = corpus.unlearning_label()
    n_t = len(TEMPLATES)
    entries = [(f, t) for f in corpus.retain_facts for t in range(n_t)]
    rng = np.random.default_rng(cfg["collect.seed"])
    order = rng.permutation(len(entries))
    n_extra = min(cfg["unlearn.n_views"], n_t) - 1
    groups = []
    for i in order:
        f, t = entries[i]
        extra = sorted(rng.choice([u for u in range(n_t) if u != t], n_extra, replace=False))
        groups.append(([corpus.render(f, t)] + [corpus.render(f, int(u)) for u in extra], y))
    return groups


def load_run(layout: Layout) -> tuple[Corpus, ModelParams, ModelParams]:
    corpus = Corpus.load(layout.corpus)
    return corpus, load_params(layout.proxy)[0], load_params(layout.target)[0]


# ---------------------------------------------------------------- stages


def stage_pretrain(cfg: RunConfig, layout: Layout) -> dict:
    """Build the corpus and train proxy and target to the accuracy gate."""
    corpus = make_corpus(cfg)
    examples = corpus.training_examples()
    layout.root.mkdir(parents=True, exist_ok=True)
    corpus.save(layout.corpus)
    hyper = dict(steps=cfg["pretrain.steps"], batch=cfg["pretrain.batch"], lr=cfg["pretrain.lr"])
    report = {"config_hash": cfg.hash(), "gate": cfg["pretrain.gate"], "models": {}}
    for role, path in (("proxy", layout.proxy), ("target", layout.target)):
        seed = cfg[f"pretrain.{role}_seed"]
        params = init_model(model_config(cfg, role, len(corpus.vocab)), seed)
        res = pretrain(params, examples, TrainHyper(seed=seed, **hyper))
        acc = 100.0 * accuracy(res.params, examples)
        report["models"][role] = {"accuracy": acc, "final_loss": res.losses[-1] if res.losses else None,
                                  "steps": res.steps_run, "config_hash": res.params.config.hash()}
        log.info("%s accuracy %.2f%%", role, acc)
        if acc < cfg["pretrain.gate"]:
            write_json(layout.pretrain_report, report)
            raise ConvergenceError(f"{role} reached {acc:.2f}% fact accuracy, gate is "
                                   f"{cfg['pretrain.gate']}% after {res.steps_run} steps")
        save_params(path, res.params, {"role": role, "seed": seed, "run_config": cfg.hash()})
    write_json(layout.pretrain_report, report)
    return report


def stage_collect(cfg: RunConfig, layout: Layout, rank: int | None = None, ratio: float | None = None,
                  out: Path | None = None) -> GradientPairDataset:
    corpus, proxy, _ = load_run(layout)
    ads = adapters_for(cfg, proxy, rank, ratio)
    if cfg["decoder.train_on_averaged"]:
        ds = collect_averaged_pairs(proxy, ads, view_pool(cfg, corpus), cfg["collect.limit"],
                                    source="proxy", label="uniform-answer")
    else:
        ds = collect_pairs(proxy, ads, pair_pool(cfg, corpus), cfg["collect.limit"],
                           source="proxy", label="uniform-answer")
    ds.header["collect_seed"] = cfg["collect.seed"]
    ds.save(out or layout.pairs)
    return ds


def decoder_hyper(cfg: RunConfig) -> DecoderHyper:
    return DecoderHyper(cfg["decoder.epochs"], cfg["decoder.batch"], cfg["decoder.lr"], cfg["decoder.seed"],
                        cfg["decoder.holdout"], cfg["decoder.patience"], cfg["decoder.max_hidden"])


def stage_train_decoder(cfg: RunConfig, layout: Layout, pairs: Path | None = None,
                        out: Path | None = None, curve_out: Path | None = None):
    ds = GradientPairDataset.load(pairs or layout.pairs)
    phi, curve = train_decoder(ds, decoder_hyper(cfg))
    phi.save(out or layout.decoder)
    rows = [{"epoch": 0, "train_mse": "", "holdout_mse": curve.initial_holdout}] + curve.rows()
    container.atomic_write(curve_out or layout.curve, rows_to_csv(rows, ["epoch", "train_mse", "holdout_mse"]))
    if curve.holdout and min(curve.holdout) >= curve.initial_holdout:
        log.warning("decoder holdout MSE never improved on the initialisation")
    return phi, curve


def request(cfg: RunConfig, corpus: Corpus, method: str, eta: float, n_views: int | None = None) -> UnlearnRequest:
    return UnlearnRequest(list(corpus.target), eta, cfg["unlearn.n_views"] if n_views is None else n_views,
                          method, cfg["unlearn.label"], None, cfg["unlearn.seed"], cfg["unlearn.tau"])


@dataclass
class Unlearned:
    outcome: UnlearnOutcome
    eta: float
    sweep: object | None  # EtaSelection when the step size was tuned


def unlearn(cfg: RunConfig, corpus: Corpus, target: ModelParams, adapters, phi: DecoderParams | None,
            method: str, n_views: int | None = None, eta: float | str | None = None) -> Unlearned:
    """Run one method, tuning the step size first when it is 'auto'."""
    eta = cfg["unlearn.eta"] if eta is None else eta
    keys = sorted(a.key for a in adapters)

    def run(e: float) -> UnlearnOutcome:
        return run_method(target, corpus, request(cfg, corpus, method, e, n_views),
                          adapters=adapters, phi=phi, keys=keys)

    sel = None
    if eta == "auto":
        retain = corpus.retain_facts
        base = fact_accuracy(target, retain)[0]
        targets = corpus.target_facts

        def score(m: ModelParams):
            g = gur(m, retain, before_acc=base)
            return usr(target, m, targets).usr, g.gur, g.drop

        sel = eta_sweep(lambda e: run(e).merged(), score, cfg.eta_grid(), cfg["unlearn.budget"],
                        cfg["unlearn.refine"])
        eta = sel.eta
        log.info("%s: selected eta=%.6g (within budget: %s)", method, eta, sel.within_budget)
    return Unlearned(run(float(eta)), float(eta), sel)


def stage_unlearn(cfg: RunConfig, layout: Layout, method: str, decoder: Path | None = None) -> dict:
    corpus, _, target = load_run(layout)
    ads = adapters_for(cfg, target)
    dec_path = decoder or layout.decoder
    phi = DecoderParams.load(dec_path) if method == "r2f" else None
    res = unlearn(cfg, corpus, target, ads, phi, method)
    out = res.outcome
    path = layout.unlearned(method)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_params(path, out.merged(), {"role": "target", "method": method, "eta": res.eta,
                                     "run_config": cfg.hash()})
    if out.adapters:
        tensors = {}
        for a in out.adapters:
            tensors[f"A:{a.layer}:{a.proj}"] = a.A
            tensors[f"B:{a.layer}:{a.proj}"] = a.B
        container.save(layout.adapters(method), tensors, {"kind": "adapters", "method": method})
    if res.sweep is not None:
        container.atomic_write(layout.sweep_table(method),
                               rows_to_csv(res.sweep.table(), ["eta", "usr", "gur", "gur_drop"]))
    manifest = {
        "method": method,
        "eta": res.eta,
        "eta_source": "sweep" if res.sweep is not None else "config",
        "eta_within_budget": None if res.sweep is None else res.sweep.within_budget,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "facts": list(corpus.target),
        "n_views": cfg["unlearn.n_views"],
        "label": cfg["unlearn.label"],
        "seeds": {k: cfg[k] for k in ("unlearn.seed", "adapter.seed", "decoder.seed")},
        "inputs": {"target": container.file_checksum(layout.target),
                   "decoder": container.file_checksum(dec_path) if method == "r2f" else None},
        "output": container.file_checksum(path),
        "update": "adapters" if out.adapters else "projection_weights",
        "applied_norm": round(out.applied_norm, 10),
        "pre_prob": [round(p, 10) for p in out.pre_prob],
        "post_prob": [round(p, 10) for p in out.post_prob],
    }
    write_json(layout.manifest(method), manifest)
    return manifest


def attack(cfg: RunConfig) -> AttackHyper:
    return AttackHyper(cfg["eval.attack_steps"], cfg["eval.attack_lr"], cfg["eval.attack_paraphrases"])


def evaluate_models(cfg: RunConfig, corpus: Corpus, before: ModelParams, after: ModelParams,
                    method: str = "", with_rap: bool = True) -> MetricsReport:
    return evaluate(before, after, corpus, adapted_keys(cfg, before), method,
                    attack(cfg) if with_rap else None, cfg["eval.n_probes"], cfg["eval.probe_seed"])


def stage_eval(cfg: RunConfig, layout: Layout, method: str, before: Path | None = None,
               after: Path | None = None) -> MetricsReport:
    corpus = Corpus.load(layout.corpus)
    b = load_params(before or layout.target)[0]
    a_path = after or layout.unlearned(method)
    a = load_params(a_path)[0]
    rep = evaluate_models(cfg, corpus, b, a, method)
    manifest = layout.manifest(method)
    if after is None and manifest.exists():
        rep.manifest_hash = container.file_checksum(manifest)[:16]
    path = layout.report(method)
    path.parent.mkdir(parents=True, exist_ok=True)
    container.atomic_write(path, rep.to_json())
    container.atomic_write(layout.details(method), rep.to_csv())
    return rep


def audit_samples(cfg: RunConfig, corpus: Corpus) -> list[tuple[tuple[int, ...], np.ndarray]]:
    """Half target-fact prompts, half proxy prompts that were not used for decoder training."""
    y = corpus.unlearning_label()
    n = cfg["audit.n_samples"]
    rng = np.random.default_rng(cfg["audit.seed"])
    tar = [p for p, _ in corpus.training_examples(corpus.target_facts)]
    pool = pair_pool(cfg, corpus)[cfg["collect.limit"]:] or pair_pool(cfg, corpus)
    n_tar = min(len(tar), n - n // 2)
    n_pro = min(len(pool), n - n_tar)
    pick_t = sorted(rng.choice(len(tar), n_tar, replace=False))
    pick_p = sorted(rng.choice(len(pool), n_pro, replace=False))
    return [(tar[i], y) for i in pick_t] + [(pool[i][0], y) for i in pick_p]


def stage_audit(cfg: RunConfig, layout: Layout, proxy: Path | None = None, target: Path | None = None,
                decoder: Path | None = None) -> dict:
    corpus = Corpus.load(layout.corpus)
    p = load_params(proxy or layout.proxy)[0]
    t = load_params(target or layout.target)[0]
    phi = DecoderParams.load(decoder or layout.decoder)
    aud = audit_prop1(phi, p, adapters_for(cfg, p), t, adapters_for(cfg, t), audit_samples(cfg, corpus))
    summary = aud.summary()
    write_json(layout.audit, summary)
    container.atomic_write(layout.audit_rows, aud.to_csv())
    return summary


# ---------------------------------------------------------------- sweeps


def ensure_base(cfg: RunConfig, layout: Layout) -> None:
    """Run pretrain, collect and decoder training unless a matching run already exists."""
    stamp = layout.root / "base.json"
    if stamp.exists() and read_json(stamp).get("config_hash") == cfg.hash() \
            and all(p.exists() for p in (layout.corpus, layout.proxy, layout.target, layout.pairs, layout.decoder)):
        return
    stage_pretrain(cfg, layout)
    stage_collect(cfg, layout)
    stage_train_decoder(cfg, layout)
    write_json(stamp, {"config_hash": cfg.hash()})


def _metric_row(rep: MetricsReport, eta: float) -> dict:
    return {"usr": rep.usr, "gur": rep.gur, "gur_drop": rep.gur_drop, "rap": rep.rap,
            "mia_cosine": rep.mia_cosine, "mia_tv": rep.mia_tv, "eta": eta}


def sweep_point(cfg: RunConfig, layout: Layout, axis: str, value, method: str = "r2f") -> dict:
    """Metrics for one grid point of one seed."""
    corpus, proxy, target = load_run(layout)
    if axis == "method":
        method = value
    phi = DecoderParams.load(layout.decoder) if method == "r2f" else None
    ads = adapters_for(cfg, target)
    n_views, eta = None, None
    if axis == "views":
        n_views = int(value)
    elif axis == "eta":
        eta = float(value)
    elif axis == "rank":
        ratio = cfg["sweep.rank_max_ratio"]
        sub = layout.root / f"rank{int(value)}"
        sub.mkdir(parents=True, exist_ok=True)
        pairs, dec, curve = sub / "pairs.r2f", sub / "decoder.r2f", sub / "decoder_curve.csv"
        stamp = sub / "stamp.json"
        if not (stamp.exists() and read_json(stamp).get("config_hash") == cfg.hash() and dec.exists()):
            stage_collect(cfg, layout, int(value), ratio, out=pairs)
            stage_train_decoder(cfg, layout, pairs, dec, curve)
            write_json(stamp, {"config_hash": cfg.hash()})
        phi = DecoderParams.load(dec)
        ads = adapters_for(cfg, target, int(value), ratio)
    elif axis != "method":
        raise ConfigError(f"unknown sweep axis {axis!r}")
    res = unlearn(cfg, corpus, target, ads, phi, method, n_views, eta)
    rep = evaluate_models(cfg, corpus, target, res.outcome.merged(), method)
    return _metric_row(rep, res.eta)


def sweep_grid(cfg: RunConfig, axis: str) -> list:
    if axis == "views":
        grid = list(cfg["sweep.views"])
        if max(grid) > len(TEMPLATES) or min(grid) < 1:
            raise ConfigError(f"view counts must be in [1, {len(TEMPLATES)}]")
    elif axis == "rank":
        grid = list(cfg["sweep.ranks"])
    elif axis == "eta":
        grid = cfg.eta_grid()
    elif axis == "method":
        grid = list(METHODS)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if not grid:
        raise ConfigError("empty sweep grid")
    return grid


def stage_sweep(cfg: RunConfig, root: Path, axis: str, grid: Sequence | None = None,
                seeds: int | None = None) -> tuple[list[dict], list[dict]]:
    """Repeat one axis over seed offsets; write per-run and mean/std tables.

    Seed offset ``s`` shifts every stage seed by ``s``, so each repetition
    has its own corpus, models, adapters and decoder. Base artifacts live in
    ``root/seed{s}`` and are reused across axes.
    """
    grid = sweep_grid(cfg, axis) if grid is None else list(grid)
    if not grid:
        raise ConfigError("empty sweep grid")
    seeds = cfg["sweep.seeds"] if seeds is None else seeds
    runs = []
    for s in range(seeds):
        scfg = cfg.with_seed_offset(s)
        layout = Layout(root / f"seed{s}")
        ensure_base(scfg, layout)
        for v in grid:
            t0 = time.perf_counter()
            row = {"axis": axis, "value": v, "seed": s, **sweep_point(scfg, layout, axis, v)}
            log.info("sweep %s=%s seed %d: usr %.1f gur %.1f rap %.1f (%.1fs)", axis, v, s,
                     row["usr"], row["gur"], row["rap"], time.perf_counter() - t0)
            runs.append(row)
    summary = summarize(runs, grid)
    cols = ["axis", "value", "seed", *METRIC_COLUMNS]
    container.atomic_write(root / f"sweep_{axis}_runs.csv", rows_to_csv(runs, cols))
    scols = ["axis", "value", "n"] + [f"{m}_{s}" for m in METRIC_COLUMNS for s in ("mean", "std")]
    container.atomic_write(root / f"sweep_{axis}.csv", rows_to_csv(summary, scols))
    return runs, summary


def summarize(runs: Sequence[dict], grid: Sequence) -> list[dict]:
    """Mean and sample standard deviation over seeds for each grid value."""
    out = []
    for v in grid:
        rows = [r for r in runs if r["value"] == v]
        s = {"axis": rows[0]["axis"], "value": v, "n": len(rows)}
        for m in METRIC_COLUMNS:
            vals = np.array([r[m] for r in rows], dtype=np.float64)
            s[f"{m}_mean"] = float(vals.mean())
            s[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(s)
    return out
