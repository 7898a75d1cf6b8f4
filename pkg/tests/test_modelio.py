import numpy as np
import pytest

from tdtd.decoder import TdtdModel, generate, tree_log_prob
from tdtd.modelio import ModelIoError, load_model, save_model
from tdtd.parser import TdtdParserModel, conditional_tree_log_prob
from tdtd.seqlm import SeqLmConfig, SeqLmModel, sequence_log_prob
from tdtd.treebank import parse_bracketed

from conftest import tiny_config

FIVE_NODE = "(S (NP (DT the) (NN cat)) (VB sat))"


def _assert_same_params(a, b):
    assert a.store.names() == b.store.names()
    for name, t in a.store.items():
        assert np.array_equal(t.values, b.store[name].values), name


def test_tdtd_round_trip(tmp_path, tiny_model):
    path = tmp_path / "model.ckpt"
    save_model(tiny_model, path)
    text = path.read_text()
    assert text.splitlines()[0] == "TDTD-MODEL v1"
    assert "kind=tdtd" in text
    assert "[nonterminals]" in text and "[terminals]" in text
    assert "TDTD-CKPT v1" in text
    loaded = load_model(path)
    assert loaded.kind == "tdtd"
    assert loaded.config == tiny_model.config
    _assert_same_params(tiny_model, loaded)
    tree = parse_bracketed(FIVE_NODE)
    assert tree_log_prob(loaded, tree).item() == tree_log_prob(tiny_model, tree).item()


def test_parser_round_trip(tmp_path):
    model = TdtdParserModel(tiny_config(), rng=np.random.default_rng(3))
    path = tmp_path / "parser.ckpt"
    save_model(model, path)
    loaded = load_model(path)
    assert isinstance(loaded, TdtdParserModel) and loaded.kind == "tdtd-p"
    _assert_same_params(model, loaded)
    tree = parse_bracketed(FIVE_NODE)
    sent = ["the", "cat", "sat"]
    assert (conditional_tree_log_prob(loaded, tree, sent).item()
            == conditional_tree_log_prob(model, tree, sent).item())


def test_seqlm_round_trip(tmp_path):
    config = SeqLmConfig(tokens=("<bos>", "<eos>", "(S", ")", "a"),
                         hidden_size=5, embed_size=5, max_length=17)
    model = SeqLmModel(config, rng=np.random.default_rng(4))
    path = tmp_path / "lm.ckpt"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.kind == "seq-lm"
    assert loaded.config == config
    _assert_same_params(model, loaded)
    seq = ["(S", "a", ")"]
    assert sequence_log_prob(loaded, seq).item() == sequence_log_prob(model, seq).item()


def test_loaded_model_generates_identically(tmp_path, tiny_model):
    path = tmp_path / "model.ckpt"
    save_model(tiny_model, path)
    loaded = load_model(path)
    a = generate(tiny_model, rng=np.random.default_rng(5))
    b = generate(loaded, rng=np.random.default_rng(5))
    assert a == b


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("MODEL v9\n")
    with pytest.raises(ModelIoError, match="line 1"):
        load_model(path)


def test_unknown_kind_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("TDTD-MODEL v1\nkind=transformer\n")
    with pytest.raises(ModelIoError, match="kind"):
        load_model(path)


def test_missing_config_field_rejected(tmp_path, tiny_model):
    path = tmp_path / "model.ckpt"
    save_model(tiny_model, path)
    text = path.read_text().replace("max_depth=4\n", "")
    path.write_text(text)
    with pytest.raises(ModelIoError, match="max_depth"):
        load_model(path)


def test_tampered_params_rejected(tmp_path, tiny_model):
    path = tmp_path / "model.ckpt"
    save_model(tiny_model, path)
    lines = path.read_text().splitlines()
    # drop the first tensor's header line inside [params]
    idx = lines.index("TDTD-CKPT v1") + 1
    del lines[idx]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(Exception):
        load_model(path)
