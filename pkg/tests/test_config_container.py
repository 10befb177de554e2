import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from toyunlearn import container
from toyunlearn.config import ConfigError, RunConfig, dump_config, parse_config
from toyunlearn.datagen import Vocabulary


def test_defaults_and_seed_derivation():
    cfg = RunConfig(seed=10).resolved()
    assert cfg.data.seed == 11 and cfg.init_seed == 12 and cfg.order_seed == 13 and cfg.unlearn.seed == 13
    assert cfg.model.vocab_size == Vocabulary(cfg.data).size


def test_parse_sections_and_types():
    cfg = parse_config(
        """
        # comment
        seed = 4
        out = runs/x   # trailing comment
        model.d_model = 32
        data.forget_ratio = 0.15
        vanilla.optimizer = sgd
        unlearn.method = GA
        unlearn.mask_scope = vision_encoder, connector
        unlearn.use_retain = false
        """
    )
    assert cfg.seed == 4 and cfg.out == "runs/x"
    assert cfg.model.d_model == 32 and cfg.data.forget_ratio == 0.15
    assert cfg.vanilla.optimizer == "sgd" and cfg.unlearn.method == "GA"
    assert cfg.unlearn.mask_scope == ("vision_encoder", "connector") and cfg.unlearn.use_retain is False


def test_dump_round_trip():
    cfg = parse_config("seed = 3\nunlearn.method = NPO\nunlearn.mask_scope = language_model\n")
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize(
    "text",
    [
        "model.nope = 1",
        "bogus.d_model = 1",
        "model.d_model = wide",
        "unlearn.use_retain = maybe",
        "just words",
        "data.forget_ratio = 1.5",
        "unlearn.method = Retrain",
        "data.seed = 3",
        "colour = red",
    ],
)
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_fingerprint_tracks_content():
    a, b = RunConfig(), parse_config("vanilla.epochs = 5")
    assert a.fingerprint("model") == b.fingerprint("model")
    assert a.fingerprint("vanilla") != b.fingerprint("vanilla")


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 5)), elements=st.floats(allow_nan=False)),
    arrays(np.bool_, st.integers(0, 9)),
    arrays(np.int64, st.integers(0, 6), elements=st.integers(-(2**40), 2**40)),
)
def test_container_round_trip(f, b, i):
    blob = container.dumps([("f", f, "vision_encoder"), ("b", b, None), ("i", i, "x")], {"kind": "t", "n": 1})
    meta, arrs = container.loads(blob)
    assert meta == {"kind": "t", "n": 1}
    assert list(arrs) == ["f", "b", "i"]
    assert np.array_equal(arrs["f"][0], f) and arrs["f"][1] == "vision_encoder"
    assert arrs["b"][0].dtype == np.bool_ and np.array_equal(arrs["b"][0], b)
    assert np.array_equal(arrs["i"][0], i)
    assert container.dumps([("f", f, "vision_encoder"), ("b", b, None), ("i", i, "x")], {"n": 1, "kind": "t"}) == blob


def test_container_rejects_garbage(tmp_path):
    good = container.dumps([("a", np.arange(4.0), None)], {})
    for bad in (b"NOTMAGIC" + good[8:], good[:12], good[:-8]):
        with pytest.raises(container.ContainerError):
            container.loads(bad)
    with pytest.raises(container.ContainerError):
        container.dumps([("a", np.zeros(1), None), ("a", np.zeros(1), None)], {})
    with pytest.raises(FileNotFoundError):
        container.load(tmp_path / "missing.bin")


def test_container_file_hash(tmp_path):
    digest = container.save(tmp_path / "x.bin", [("a", np.ones(3), "t")], {"k": 1})
    assert container.file_sha256(tmp_path / "x.bin") == digest
