import numpy as np
import pytest

from gradrecon.corpus import build_synthetic_corpus
from gradrecon.model import ModelConfig, TrainHyper, attach_lora, init_model, pretrain


class Toy:
    """Small trained proxy/target pair on a 40-fact corpus (d_model=16)."""

    def __init__(self):
        self.corpus = build_synthetic_corpus(n_facts=40, n_relations=4, seed=3, objects_per_relation=4)
        ex = self.corpus.training_examples()
        v = len(self.corpus.vocab)
        hyper = TrainHyper(steps=300, batch=32, lr=1e-2, seed=0)
        self.proxy = pretrain(init_model(ModelConfig(v, 16, 2, 2, 10, "proxy"), 1), ex, hyper).params
        self.target = pretrain(init_model(ModelConfig(v, 16, 3, 2, 10, "target"), 2), ex, hyper).params
        self.rank = 4

    def adapters(self, params, rank=None, seed=0):
        return attach_lora(params, rank or self.rank, seed=seed)


@pytest.fixture(scope="session")
def toy():
    return Toy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(vocab=12, d=8, layers=2, heads=2, seed=0, dtype=np.float64):
    """Untrained model, optionally cast to float64 for finite-difference checks."""
    p = init_model(ModelConfig(vocab, d, layers, heads, 6), seed)
    return p.astype(dtype)


@pytest.fixture(scope="session")
def toy_decoder(toy):
    from gradrecon.decoder import DecoderHyper, train_decoder
    from gradrecon.gradients import collect_pairs

    y = toy.corpus.unlearning_label()
    pool = [(p, y) for p, _ in toy.corpus.training_examples(toy.corpus.retain_facts)]
    ds = collect_pairs(toy.proxy, toy.adapters(toy.proxy), pool, 150)
    phi, _ = train_decoder(ds, DecoderHyper(epochs=3, max_hidden=64))
    return phi


# acceptance criteria report: one line per criterion, printed after the run
CRITERIA: list[str] = []


def record(name: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    CRITERIA.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
