"""Run configuration: flat dotted keys loaded from TOML, every key with a default."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import tomli

from .errors import ConfigError

# key -> (default, description)
SCHEMA: dict[str, tuple[Any, str]] = {
    "corpus.n_facts": (200, "number of synthetic facts"),
    "corpus.n_relations": (5, "relations used (facts are split evenly across them)"),
    "corpus.target_fraction": (0.1, "share of facts placed in the target (forget) split"),
    "corpus.objects_per_relation": (8, "candidate answer tokens per relation"),
    "corpus.seed": (0, "corpus sampling seed"),
    "proxy.d_model": (32, "proxy hidden width (must equal target.d_model)"),
    "proxy.n_layers": (2, "proxy depth"),
    "proxy.n_heads": (4, "proxy attention heads"),
    "target.d_model": (32, "target hidden width"),
    "target.n_layers": (4, "target depth"),
    "target.n_heads": (4, "target attention heads"),
    "model.seq_len": (10, "maximum prompt length in tokens"),
    "pretrain.steps": (1000, "Adam steps per model"),
    "pretrain.batch": (64, "examples per step"),
    "pretrain.lr": (3e-3, "Adam learning rate"),
    "pretrain.gate": (95.0, "minimum training-fact accuracy, percent"),
    "pretrain.proxy_seed": (1, "proxy init and batch-order seed"),
    "pretrain.target_seed": (2, "target init and batch-order seed"),
    "adapter.rank": (8, "LoRA rank"),
    "adapter.projections": (["q", "v"], "adapted attention projections"),
    "adapter.seed": (0, "LoRA basis seed, shared by proxy and target"),
    "adapter.max_rank_ratio": (0.25, "largest allowed rank as a fraction of d_model"),
    "collect.limit": (1000, "gradient pairs collected on the proxy"),
    "collect.seed": (0, "shuffle seed for the pair prompt pool"),
    "decoder.epochs": (60, "maximum training epochs"),
    "decoder.batch": (32, "rows per minibatch"),
    "decoder.lr": (1e-3, "Adam learning rate"),
    "decoder.holdout": (0.2, "share of pairs held out for early stopping"),
    "decoder.patience": (5, "epochs without holdout improvement before stopping"),
    "decoder.max_hidden": (1024, "cap on the hidden width"),
    "decoder.seed": (0, "init, split and shuffle seed"),
    "decoder.train_on_averaged": (False, "train on view-averaged LoRA gradients (unlearn.n_views views per pair)"),
    "unlearn.method": ("r2f", "r2f | full_grad | lora_single | lora_multi | grad_ascent"),
    "unlearn.eta": ("auto", "step size, or 'auto' to take it from the sweep"),
    "unlearn.n_views": (5, "paraphrased views per target"),
    "unlearn.label": ("uniform", "uniform | counterfactual"),
    "unlearn.tau": (0.8, "paraphrase similarity threshold"),
    "unlearn.seed": (0, "paraphrase sampling seed"),
    "unlearn.budget": (2.0, "largest tolerated GUR drop in points during the sweep"),
    "unlearn.grid_min": (1e-3, "smallest step size of the log grid"),
    "unlearn.grid_max": (1.0, "largest step size of the log grid"),
    "unlearn.grid_points": (7, "log-grid points"),
    "unlearn.refine": (6, "geometric bisections at the budget edge"),
    "eval.attack_steps": (20, "relearning attack steps"),
    "eval.attack_lr": (1e-4, "relearning attack Adam learning rate"),
    "eval.attack_paraphrases": (5, "paraphrases used by the attack"),
    "eval.n_probes": (500, "generic probe prompts for the alignment metric"),
    "eval.probe_seed": (0, "probe subsampling seed"),
    "audit.n_samples": (100, "prompts used by the bound audit"),
    "audit.seed": (0, "audit sample seed"),
    "sweep.seeds": (3, "repetitions, each with a distinct seed offset"),
    "sweep.views": ([1, 2, 4, 8], "view counts for the view sweep"),
    "sweep.ranks": ([2, 4, 8, 12, 16], "ranks for the rank sweep"),
    "sweep.rank_max_ratio": (0.5, "rank limit used only inside the rank sweep"),
    "run.out": ("runs/default", "output directory"),
}

SEED_KEYS = ("corpus.seed", "pretrain.proxy_seed", "pretrain.target_seed", "adapter.seed",
             "collect.seed", "decoder.seed", "unlearn.seed", "eval.probe_seed", "audit.seed")


def _flatten(tree: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _check_type(key: str, value: Any) -> Any:
    default = SCHEMA[key][0]
    if key == "unlearn.eta":
        if value == "auto":
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool) and value >= 0:
            return float(value)
        raise ConfigError("unlearn.eta must be 'auto' or a non-negative number")
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(type(x) is type(default[0]) for x in value)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


class RunConfig:
    """Immutable mapping of dotted keys to values, defaults filled in."""

    def __init__(self, overrides: Mapping[str, Any] | None = None):
        values = {k: (list(v) if isinstance(v, list) else v) for k, (v, _) in SCHEMA.items()}
        for k, v in (overrides or {}).items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            values[k] = _check_type(k, v)
        self._v = values
        self._validate()

    def _validate(self) -> None:
        v = self._v
        if v["proxy.d_model"] != v["target.d_model"]:
            raise ConfigError("proxy.d_model and target.d_model must match")
        if v["unlearn.method"] not in ("r2f", "full_grad", "lora_single", "lora_multi", "grad_ascent"):
            raise ConfigError(f"unknown unlearn.method {v['unlearn.method']!r}")
        if v["unlearn.label"] not in ("uniform", "counterfactual"):
            raise ConfigError("unlearn.label must be uniform or counterfactual")
        if not 0 < v["adapter.max_rank_ratio"] <= 1 or not 0 < v["sweep.rank_max_ratio"] <= 1:
            raise ConfigError("rank ratios must be in (0, 1]")
        if not 0 < v["unlearn.grid_min"] <= v["unlearn.grid_max"] or v["unlearn.grid_points"] < 1:
            raise ConfigError("bad step-size grid")
        if v["sweep.seeds"] < 1 or not v["sweep.views"] or not v["sweep.ranks"]:
            raise ConfigError("sweep needs at least one seed and nonempty grids")
        if not 0 <= v["pretrain.gate"] <= 100:
            raise ConfigError("pretrain.gate is a percentage")

    def __getitem__(self, key: str) -> Any:
        return self._v[key]

    def items(self):
        return sorted(self._v.items())

    def replace(self, **changes) -> "RunConfig":
        """Copy with dotted keys given as ``section__name`` keyword arguments."""
        merged = {k: v for k, v in self._v.items() if v != SCHEMA[k][0]}
        merged.update({k.replace("__", "."): v for k, v in changes.items()})
        return RunConfig(merged)

    def with_seed_offset(self, offset: int) -> "RunConfig":
        if offset == 0:
            return self
        return self.replace(**{k.replace(".", "__"): self._v[k] + offset for k in SEED_KEYS})

    def to_dict(self) -> dict[str, Any]:
        return dict(self.items())

    def hash(self) -> str:
        """Stable under key order: JSON with sorted keys."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def eta_grid(self) -> list[float]:
        import numpy as np

        n = self["unlearn.grid_points"]
        if n == 1:
            return [self["unlearn.grid_min"]]
        return [float(x) for x in np.geomspace(self["unlearn.grid_min"], self["unlearn.grid_max"], n)]


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        tree = tomli.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return RunConfig(_flatten(tree))


def describe() -> str:
    """Every key with its default and meaning, as TOML comments."""
    lines = []
    for k, (v, doc) in SCHEMA.items():
        lines.append(f"# {doc}")
        lines.append(f"{k} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"
