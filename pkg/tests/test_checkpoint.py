import numpy as np
import pytest

from nmtadapt.corpus import batch_of
from nmtadapt.decoding import DecodeConfig, decode
from nmtadapt.errors import FormatError, IntegrityError
from nmtadapt.numerics import Optimizer, backward
from nmtadapt.workbench import checkpoint as ck

from test_model import toy_model, toy_pairs


@pytest.fixture(scope="module")
def trained():
    m = toy_model(seed=3)
    opt = Optimizer(m.trainable_parameters(), max_grad_norm=5.0)
    batch = batch_of(toy_pairs(6), m.vocab)
    for _ in range(3):
        loss, _ = m.loss(batch)
        backward(loss)
        opt.step(1e-2)
    return m, opt


def _random_inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    return [tuple(f"x{k}" for k in rng.integers(0, 12, int(rng.integers(1, 7)))) for _ in range(n)]


def test_round_trip_is_byte_identical(trained, tmp_path):
    m, opt = trained
    p1 = ck.save_checkpoint(m, tmp_path / "a.ckpt", opt, step=3)
    loaded = ck.load_checkpoint(p1)
    p2 = ck.save_checkpoint(loaded.model, tmp_path / "b.ckpt", loaded.optimizer, loaded.step)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.step == 3 and loaded.optimizer.step_count == 3


def test_parameters_and_decodes_preserved(trained, tmp_path):
    m, opt = trained
    loaded = ck.load_checkpoint(ck.save_checkpoint(m, tmp_path / "m.ckpt", opt)).model
    assert loaded.parameter_hash() == m.parameter_hash()
    assert loaded.vocab.tokens == m.vocab.tokens
    xs = _random_inputs(100)  # includes out-of-vocabulary words x10, x11
    cfg = DecodeConfig("yy", beam_size=2)
    assert decode(loaded, xs, "xx", cfg) == decode(m, xs, "xx", cfg)


def test_optimizer_state_restored(trained, tmp_path):
    m, opt = trained
    loaded = ck.load_checkpoint(ck.save_checkpoint(m, tmp_path / "o.ckpt", opt)).optimizer
    a, b = opt.state_arrays(), loaded.state_arrays()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_every_single_byte_corruption_detected(trained):
    m, _ = trained
    data = ck.encode_checkpoint(m)
    rng = np.random.default_rng(0)
    positions = rng.choice(len(data), 300, replace=False)
    for pos in positions:
        bad = bytearray(data)
        bad[pos] ^= 1 << int(rng.integers(0, 8))
        with pytest.raises(FormatError):  # IntegrityError, or FormatError for a broken prefix
            ck.decode_checkpoint(bytes(bad))


def test_payload_corruption_is_integrity_error(trained):
    data = bytearray(ck.encode_checkpoint(trained[0]))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(IntegrityError):
        ck.decode_checkpoint(bytes(data))


def test_truncation(trained):
    data = ck.encode_checkpoint(trained[0])
    for n in (0, 10, len(data) // 2, len(data) - 1):
        with pytest.raises(IntegrityError):
            ck.decode_checkpoint(data[:n])


def test_version_mismatch_names_both(trained):
    data = bytearray(ck.encode_checkpoint(trained[0]))
    data[8:12] = (99).to_bytes(4, "little")
    with pytest.raises(FormatError, match="99.*1"):
        ck.decode_checkpoint(bytes(data))


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        ck.load_checkpoint(tmp_path / "nope.ckpt")


def test_extended_model_keeps_spaces(tmp_path):
    from test_training import _extended
    m = _extended()
    loaded = ck.load_checkpoint(ck.save_checkpoint(m, tmp_path / "e.ckpt")).model
    assert set(loaded.vocab.spaces) == {"xx", "yy", "zz"}
    assert np.array_equal(loaded.vocab.spaces["zz"].transform, m.vocab.spaces["zz"].transform)
    src = [("z1", "z2", "zebra")]
    assert decode(loaded, src, "zz", DecodeConfig("yy")) == decode(m, src, "zz", DecodeConfig("yy"))
