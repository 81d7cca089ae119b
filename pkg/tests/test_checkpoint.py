import json

import numpy as np
import pytest

from dualqe import corpus as C
from dualqe import pipeline as P
from dualqe.checkpoint import load_arrays, load_checkpoint, load_feature_cache, save_arrays, save_feature_cache
from dualqe.estimator import EstimatorConfig, EstimatorModel
from dualqe.nmt import DualNMTPredictor, NMTConfig
from dualqe.xlm import XLMConfig, XLMEncoder


@pytest.fixture(scope="module")
def tok():
    lex = C.make_lexicon(0, n_words=8)
    pairs = C.gen_parallel(0, 20, lex, 2)
    return C.build_tokenizer([p.source for p in pairs] + [p.target for p in pairs], 10, experts=2)


def edit_manifest(d, fn):
    m = json.loads((d / "manifest.json").read_text())
    fn(m)
    (d / "manifest.json").write_text(json.dumps(m))


def test_arrays_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32),
              "scalar": np.float32(2.5).reshape(())}
    save_arrays(tmp_path, arrays, {"kind": "test"})
    got, manifest = load_arrays(tmp_path)
    assert manifest["kind"] == "test"
    for k, v in arrays.items():
        assert got[k].dtype == np.float32 and np.array_equal(got[k], v)
    assert (tmp_path / "weights.bin").stat().st_size == 4 * (12 + 5 + 1)


def test_predictor_round_trip(tmp_path, tok):
    pred = DualNMTPredictor(NMTConfig(len(tok.vocab), d_model=8, heads=2, layers=1, ff_dim=16, experts=2), tok.vocab, 3)
    P.save_nmt(tmp_path, pred)
    back = P.load_nmt(tmp_path, tok)
    a, b = pred.state_dict(), back.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k])
    x = [7, 8, 9]
    assert np.array_equal(pred.token_distributions(x, x, 1), back.token_distributions(x, x, 1))


def test_xlm_round_trip(tmp_path, tok):
    model = XLMEncoder(XLMConfig(len(tok.vocab), d_model=8, heads=2, layers=1, ff_dim=16), tok.vocab, 1)
    P.save_xlm(tmp_path, model)
    back = P.load_xlm(tmp_path, tok)
    for k, v in model.state_dict().items():
        assert np.array_equal(v, back.state_dict()[k])


def test_corrupted_offset_rejected(tmp_path, tok):
    pred = DualNMTPredictor(NMTConfig(len(tok.vocab), d_model=8, heads=2, layers=1, ff_dim=16, experts=2), tok.vocab)
    P.save_nmt(tmp_path, pred)
    edit_manifest(tmp_path, lambda m: m["tensors"][1].__setitem__("offset", m["tensors"][1]["offset"] + 1))
    with pytest.raises(ValueError, match="offset"):
        P.load_nmt(tmp_path, tok)


def test_truncated_weights_rejected(tmp_path):
    save_arrays(tmp_path, {"a": np.ones((4, 4), np.float32)})
    raw = (tmp_path / "weights.bin").read_bytes()
    (tmp_path / "weights.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_arrays(tmp_path)
    (tmp_path / "weights.bin").write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        load_arrays(tmp_path)


def test_trailing_bytes_rejected(tmp_path):
    save_arrays(tmp_path, {"a": np.ones(3, np.float32)})
    with open(tmp_path / "weights.bin", "ab") as fh:
        fh.write(np.zeros(2, np.float32).tobytes())
    with pytest.raises(ValueError):
        load_arrays(tmp_path)


def test_unknown_dtype_and_bad_length_rejected(tmp_path):
    save_arrays(tmp_path, {"a": np.ones((2, 3), np.float32)})
    edit_manifest(tmp_path, lambda m: m["tensors"][0].__setitem__("dtype", "f16"))
    with pytest.raises(ValueError, match="dtype"):
        load_arrays(tmp_path)
    save_arrays(tmp_path, {"a": np.ones((2, 3), np.float32)})
    edit_manifest(tmp_path, lambda m: m["tensors"][0].__setitem__("shape", [3, 3]))
    with pytest.raises(ValueError):
        load_arrays(tmp_path)


def test_vocab_hash_and_kind_checked(tmp_path, tok):
    pred = DualNMTPredictor(NMTConfig(len(tok.vocab), d_model=8, heads=2, layers=1, ff_dim=16, experts=2), tok.vocab)
    P.save_nmt(tmp_path, pred)
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(tmp_path, pred, "nmt", vocab_hash="0" * 16)
    with pytest.raises(ValueError, match="kind"):
        load_checkpoint(tmp_path, pred, "xlm")


def test_shape_mismatch_rejected(tmp_path, tok):
    small = DualNMTPredictor(NMTConfig(len(tok.vocab), d_model=8, heads=2, layers=1, ff_dim=16, experts=2), tok.vocab)
    big = DualNMTPredictor(NMTConfig(len(tok.vocab), d_model=8, heads=2, layers=1, ff_dim=32, experts=2), tok.vocab)
    P.save_nmt(tmp_path, small)
    with pytest.raises(ValueError, match="shape"):
        load_checkpoint(tmp_path, big, "nmt")


def test_estimator_checkpoint_is_task_specific(tmp_path):
    model = EstimatorModel(EstimatorConfig(6, hidden=4, head_hidden=4), seed=2)
    model.shift["nmt"] = np.full(6, 0.5, np.float32)
    P.save_estimator(tmp_path, model, "sentence", "abc")
    back = P.load_estimator(tmp_path, "sentence", "abc")
    for name, p in model.named_parameters():
        if name.startswith(("gru", "sentence")):
            assert np.array_equal(p.data, dict(back.named_parameters())[name].data)
    assert np.array_equal(back.shift["nmt"], model.shift["nmt"])
    with pytest.raises(ValueError, match="sentence"):
        P.load_estimator(tmp_path, "word", "abc")
    with pytest.raises(ValueError, match="hash"):
        P.load_estimator(tmp_path, "sentence", "xyz")


def test_feature_cache_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [{"nmt": rng.standard_normal((3, 4)).astype(np.float32), "xlm": None},
            {"nmt": rng.standard_normal((1, 4)).astype(np.float32), "xlm": np.zeros((1, 4), np.float32)}]
    save_feature_cache(tmp_path, recs, {"use_xlm": True})
    back, manifest = load_feature_cache(tmp_path)
    assert manifest["records"] == 2 and "xlm" not in back[0]
    assert np.array_equal(back[1]["nmt"], recs[1]["nmt"])
