import numpy as np
import pytest

from gradrecon.decoder import (DecoderHyper, DecoderParams, check_compatible, decode, decode_dataset,
                               decoder_header, decoder_mse, hidden_width, init_decoder, planted_decoder,
                               reconstruction_quality, split_indices, synthetic_pairs, train_decoder)
from gradrecon.errors import IncompatibleError
from gradrecon.gradients import FullGradient, LoraGradient


def test_hidden_width_is_capped():
    assert hidden_width(16) == 64
    assert hidden_width(512) == 1024
    assert hidden_width(512, max_hidden=4096) == 2048


def test_planted_decoder_is_exact():
    ds, maps = synthetic_pairs(20, 4, 2, layers=(0, 1), projections=("q", "v"))
    phi = planted_decoder(decoder_header(ds), maps)
    assert decoder_mse(phi, ds) < 1e-8


def test_zero_decoder_outputs_zero_and_mse_is_target_energy():
    ds, _ = synthetic_pairs(30, 4, 2, mode="noise")
    phi = init_decoder(decoder_header(ds), zero=True)
    assert np.all(decode_dataset(phi, ds) == 0)
    expect = np.mean(np.sum(ds.full.astype(np.float64) ** 2, axis=1))
    assert decoder_mse(phi, ds) == pytest.approx(expect)


def test_training_recovers_a_planted_map():
    ds, maps = synthetic_pairs(400, 4, 2, layers=(0, 1), projections=("q",), seed=1)
    phi, curve = train_decoder(ds, DecoderHyper(epochs=5, max_hidden=64))
    tr, ho = split_indices(len(ds), 0.2, 0)
    hold = ds.subset(ho)
    rel = decoder_mse(phi, hold) / np.mean(np.sum(hold.full.astype(np.float64) ** 2, axis=1))
    assert rel < 1e-3
    assert reconstruction_quality(phi, hold)["mean"] > 0.999
    assert min(curve.holdout) < curve.initial_holdout


def test_noise_pairs_do_not_train_below_null():
    ds, _ = synthetic_pairs(200, 4, 2, mode="noise", seed=2)
    phi, curve = train_decoder(ds, DecoderHyper(epochs=5, max_hidden=32))
    tr, ho = split_indices(len(ds), 0.2, 0)
    hold = ds.subset(ho)
    zero = init_decoder(decoder_header(ds), zero=True)
    # nothing to learn: the selected decoder is no better than 10% below the zero map
    assert decoder_mse(phi, hold) > 0.9 * decoder_mse(zero, hold)


def test_zero_epochs_returns_initialisation():
    ds, _ = synthetic_pairs(60, 4, 2)
    phi, curve = train_decoder(ds, DecoderHyper(epochs=0, max_hidden=32))
    init = init_decoder(decoder_header(ds), 0, 32)
    for k in init.nets["q"]:
        np.testing.assert_array_equal(phi.nets["q"][k], init.nets["q"][k])
    assert curve.rows() == [] and curve.best_epoch == 0


def test_training_is_deterministic():
    ds, _ = synthetic_pairs(80, 4, 2, seed=4)
    a, ca = train_decoder(ds, DecoderHyper(epochs=3, max_hidden=32))
    b, cb = train_decoder(ds, DecoderHyper(epochs=3, max_hidden=32))
    assert ca.holdout == cb.holdout
    for k in a.nets["q"]:
        np.testing.assert_array_equal(a.nets["q"][k], b.nets["q"][k])


def test_needs_fifty_pairs():
    ds, _ = synthetic_pairs(49, 4, 2)
    with pytest.raises(ValueError):
        train_decoder(ds, DecoderHyper(epochs=1))


def test_compatibility_checks():
    ds, _ = synthetic_pairs(10, 4, 2, projections=("q",))
    phi = init_decoder(decoder_header(ds), zero=True)
    check_compatible(phi, [(0, "q")], 4, 2)
    with pytest.raises(IncompatibleError):
        check_compatible(phi, [(0, "q")], 8, 2)
    with pytest.raises(IncompatibleError):
        check_compatible(phi, [(0, "q")], 4, 1)
    with pytest.raises(IncompatibleError):
        check_compatible(phi, [(0, "v")], 4, 2)
    phi.header["adapter_hash"] = "abc"
    with pytest.raises(IncompatibleError):
        check_compatible(phi, [(0, "q")], 4, 2, adapter_hash="def")


def test_decode_handles_layers_beyond_training_depth():
    ds, maps = synthetic_pairs(10, 4, 2, layers=(0, 1), projections=("q",))
    phi = planted_decoder(decoder_header(ds), maps)
    rng = np.random.default_rng(0)
    g = LoraGradient({(l, "q"): (rng.normal(size=(4, 2)).astype(np.float32),
                                 rng.normal(size=(2, 4)).astype(np.float32)) for l in range(4)})
    out = decode(phi, g)
    assert isinstance(out, FullGradient) and sorted(out.grads) == [(l, "q") for l in range(4)]
    for l in range(4):
        np.testing.assert_allclose(out.grads[(l, "q")].reshape(-1), maps["q"] @ g.block((l, "q")),
                                   rtol=1e-4, atol=1e-5)


def test_save_load_round_trip(tmp_path):
    ds, _ = synthetic_pairs(10, 4, 2, projections=("q", "v"))
    phi = init_decoder(decoder_header(ds), seed=3, max_hidden=16)
    phi.in_scale["q"], phi.out_scale["v"] = 2.5, 0.5
    phi.save(tmp_path / "d.r2f")
    back = DecoderParams.load(tmp_path / "d.r2f")
    assert back.in_scale == phi.in_scale and back.out_scale == phi.out_scale
    assert back.header == phi.header
    back.save(tmp_path / "e.r2f")
    assert (tmp_path / "d.r2f").read_bytes() == (tmp_path / "e.r2f").read_bytes()
