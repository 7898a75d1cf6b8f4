import numpy as np
import pytest

from tdtd.decoder import TdtdConfig, TdtdModel
from tdtd.pcfg import load_grammar

TOY_GRAMMAR = """\
# toy grammar used across the suite
S   NP VP   0.75
S   VP      0.25
NP  DT NN   0.32
NP  NN      0.16
NP  PRP     0.14
NP  NP PP   0.16
NP  JJ NN   0.22
VP  VB NP   0.38
VP  VB      0.16
VP  VP PP   0.16
VP  MD VB   0.12
VP  VB RB   0.18
PP  IN NP   1.00
DT  "the"   0.60
DT  "a"     0.40
NN  "cat"   0.30
NN  "dog"   0.30
NN  "park"  0.22
NN  "ball"  0.18
JJ  "big"   0.55
JJ  "red"   0.45
VB  "sees"  0.40
VB  "runs"  0.35
VB  "takes" 0.25
IN  "in"    0.60
IN  "with"  0.40
MD  "can"   1.00
PRP "it"    1.00
RB  "today" 1.00
"""

HAND_GRAMMAR = """\
S   NP VP   0.8
NP  DT NN   1.0
VP  VBD     0.6
DT  "the"   1.0
NN  "cat"   0.7
VBD "sat"   1.0
"""


@pytest.fixture(scope="session")
def toy_grammar():
    return load_grammar(TOY_GRAMMAR)


@pytest.fixture(scope="session")
def hand_grammar():
    return load_grammar(HAND_GRAMMAR)


TINY_NONTERMINALS = ("S", "NP", "VP", "DT", "NN", "VB")
TINY_TERMINALS = ("<unk>", "the", "cat", "sat")


def tiny_config(**overrides):
    params = dict(
        nonterminals=TINY_NONTERMINALS,
        terminals=TINY_TERMINALS,
        hidden_size=8,
        embed_size=8,
        max_depth=4,
        max_children_per_node=3,
        max_layer_width=8,
    )
    params.update(overrides)
    return TdtdConfig(**params)


@pytest.fixture
def tiny_model():
    return TdtdModel(tiny_config(), rng=np.random.default_rng(42))
