"""Synthetic subject-relation-object facts and their template paraphrases.

Entities and relation words are single vocabulary items, so every answer is
exactly one token. Prompt templates mix word tokens with the entity slots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError

# (name, primary word, alternate word)
RELATIONS = [
    ("capital", "capital", "city"),
    ("color", "color", "hue"),
    ("sport", "sport", "game"),
    ("food", "food", "dish"),
    ("language", "language", "tongue"),
    ("pet", "pet", "animal"),
    ("music", "music", "genre"),
    ("element", "element", "metal"),
]

# S = subject, R = primary relation word, R2 = alternate relation word.
# Template 0 is the canonical form; every template ends right before the answer.
TEMPLATES = [
    ("canonical", "what is the R of S ?"),
    ("declarative", "the R of S is"),
    ("possessive", "S 's R is"),
    ("colon", "S R :"),
    ("imperative", "name the R of S ."),
    ("request", "tell me S 's R2"),
    ("question", "which R2 does S have ?"),
    ("reordered", "of S , the R is"),
    ("qa", "q : S R2 ? a :"),
    ("cloze", "fill in : S has R2"),
]

PAD_TOKEN = "<pad>"


def _filler_words() -> list[str]:
    words = []
    for _, text in TEMPLATES:
        for w in text.split():
            if w not in ("S", "R", "R2") and w not in words:
                words.append(w)
    return words


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, tok: str) -> int:
        return self._index[tok]

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self._index[w] for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class Fact:
    id: int
    subject: int
    relation: int
    object: int  # token id of the answer
    prompt: tuple[int, ...]  # canonical prompt tokens

    @property
    def answer(self) -> int:
        return self.object

    @property
    def key(self) -> tuple[int, int]:
        return (self.subject, self.relation)


@dataclass(frozen=True)
class ParaphraseSet:
    fact_id: int
    prompts: tuple[tuple[int, ...], ...]
    template_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.prompts)


@dataclass
class Corpus:
    vocab: Vocab
    facts: list[Fact]
    retain: list[int]
    target: list[int]
    n_subjects: int
    n_relations: int
    objects_per_relation: int
    seed: int
    answer_ids: list[int] = field(default_factory=list)

    def fact(self, fid: int) -> Fact:
        return self.facts[fid]

    @property
    def retain_facts(self) -> list[Fact]:
        return [self.facts[i] for i in self.retain]

    @property
    def target_facts(self) -> list[Fact]:
        return [self.facts[i] for i in self.target]

    def render(self, fact: Fact, template_id: int) -> tuple[int, ...]:
        _, word, alt = RELATIONS[fact.relation]
        subj = self.vocab.tokens[fact.subject]
        out = []
        for w in TEMPLATES[template_id][1].split():
            out.append({"S": subj, "R": word, "R2": alt}.get(w, w))
        return tuple(self.vocab.encode(out))

    def training_examples(self, facts: Sequence[Fact] | None = None) -> list[tuple[tuple[int, ...], int]]:
        """Every template rendering of every fact, paired with its answer."""
        facts = self.facts if facts is None else facts
        return [(self.render(f, t), f.answer) for f in facts for t in range(len(TEMPLATES))]

    def unlearning_label(self) -> np.ndarray:
        """Uniform distribution over the answer-token vocabulary."""
        y = np.zeros(len(self.vocab))
        y[self.answer_ids] = 1.0 / len(self.answer_ids)
        return y

    def probe_prompts(self, limit: int = 500, seed: int = 0) -> list[tuple[int, ...]]:
        """Retain-derived generic prompts, disjoint from every target fact."""
        pool = [p for p, _ in self.training_examples(self.retain_facts)]
        if len(pool) <= limit:
            return pool
        rng = np.random.default_rng(seed)
        return [pool[i] for i in sorted(rng.choice(len(pool), size=limit, replace=False))]

    # -------------------------------------------------------- persistence

    def to_records(self) -> list[dict]:
        split = {i: "target" for i in self.target}
        return [{
            "id": f.id, "subject": self.vocab.tokens[f.subject],
            "relation": RELATIONS[f.relation][0], "object": self.vocab.tokens[f.object],
            "prompt": list(f.prompt), "answer": f.answer,
            "split": split.get(f.id, "retain"),
        } for f in self.facts]

    def save(self, path: str | Path) -> None:
        meta = {"vocab": list(self.vocab.tokens), "n_subjects": self.n_subjects,
                "n_relations": self.n_relations, "objects_per_relation": self.objects_per_relation,
                "seed": self.seed, "answer_ids": self.answer_ids}
        lines = [json.dumps({"header": meta}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.to_records()]
        from .container import atomic_write

        atomic_write(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        meta = rows[0]["header"]
        vocab = Vocab(tuple(meta["vocab"]))
        rel_index = {r[0]: i for i, r in enumerate(RELATIONS)}
        facts, retain, target = [], [], []
        for r in rows[1:]:
            facts.append(Fact(r["id"], vocab.id(r["subject"]), rel_index[r["relation"]],
                              vocab.id(r["object"]), tuple(r["prompt"])))
            (target if r["split"] == "target" else retain).append(r["id"])
        return cls(vocab, facts, retain, target, meta["n_subjects"], meta["n_relations"],
                   meta["objects_per_relation"], meta["seed"], meta["answer_ids"])


def build_synthetic_corpus(n_facts: int = 200, n_relations: int = 5, seed: int = 0,
                           target_fraction: float = 0.1, objects_per_relation: int = 8) -> Corpus:
    """Deterministic fact corpus with disjoint retain/target splits.

    Subjects are shared across relations: ``n_facts / n_relations`` subjects,
    each with one fact per relation.
    """
    if n_facts < 20:
        raise ConfigError("need at least 20 facts")
    if not 1 <= n_relations <= len(RELATIONS):
        raise ConfigError(f"n_relations must be in [1, {len(RELATIONS)}]")
    if n_facts % n_relations:
        raise ConfigError("n_facts must be a multiple of n_relations")
    if not 0 < target_fraction < 1:
        raise ConfigError("target_fraction must be in (0, 1)")
    if objects_per_relation < 2:
        raise ConfigError("need at least 2 objects per relation")
    n_subjects = n_facts // n_relations
    if n_subjects > 10_000:
        raise ConfigError("vocabulary too small for the requested entity count")

    rels = RELATIONS[:n_relations]
    words = [PAD_TOKEN] + _filler_words()
    for _, w, alt in rels:
        words += [w, alt]
    subjects = [f"subj{i:03d}" for i in range(n_subjects)]
    objects = [f"{name}.{j}" for name, _, _ in rels for j in range(objects_per_relation)]
    vocab = Vocab(tuple(words + subjects + objects))

    rng = np.random.default_rng(seed)
    corpus = Corpus(vocab, [], [], [], n_subjects, n_relations, objects_per_relation, seed,
                    answer_ids=vocab.encode(objects))
    fid = 0
    for s in range(n_subjects):
        for r, (name, _, _) in enumerate(rels):
            obj = vocab.id(f"{name}.{int(rng.integers(objects_per_relation))}")
            stub = Fact(fid, vocab.id(subjects[s]), r, obj, ())
            corpus.facts.append(Fact(fid, stub.subject, r, obj, corpus.render(stub, 0)))
            fid += 1
    n_target = int(round(target_fraction * n_facts))
    target = sorted(int(i) for i in rng.choice(n_facts, size=n_target, replace=False))
    corpus.target = target
    corpus.retain = [i for i in range(n_facts) if i not in set(target)]
    return corpus


def generate_paraphrases(corpus: Corpus, fact: Fact, n: int, seed: int = 0) -> ParaphraseSet:
    """``n`` distinct prompts for ``fact``; the first is always the canonical one.

    Extra templates are drawn without replacement from a stream keyed by
    (seed, relation), so facts sharing a relation get the same template ids.
    """
    if n < 1:
        raise ValueError("need at least one paraphrase")
    if n > len(TEMPLATES):
        raise ValueError(f"only {len(TEMPLATES)} templates available, asked for {n}")
    rng = np.random.default_rng([seed, fact.relation])
    extra = rng.permutation(np.arange(1, len(TEMPLATES)))[:n - 1]
    ids = (0,) + tuple(int(t) for t in extra)
    return ParaphraseSet(fact.id, tuple(corpus.render(fact, t) for t in ids), ids)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def filter_paraphrases(pset: ParaphraseSet, params, tau: float = 0.8) -> ParaphraseSet:
    """Keep prompts whose embedding cosine to the canonical prompt is >= tau.

    The canonical prompt (index 0) always survives.
    """
    from .model import embed

    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    ref = embed(params, pset.prompts[0])
    keep = [0] + [i for i in range(1, len(pset))
                  if cosine(embed(params, pset.prompts[i]), ref) >= tau]
    return ParaphraseSet(pset.fact_id, tuple(pset.prompts[i] for i in keep),
                         tuple(pset.template_ids[i] for i in keep))
