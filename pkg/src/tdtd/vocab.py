"""Vocabulary construction: frequency-sorted symbol lists from datasets."""
from __future__ import annotations

from collections import Counter

from .treebank import linearize_brackets

UNK = "<unk>"
BOS = "<bos>"
EOS = "<eos>"

__all__ = ["UNK", "BOS", "EOS", "build_tree_vocab", "build_token_vocab"]


def _by_frequency(counter):
    return [s for s, _ in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))]


def build_tree_vocab(trees):
    """(nonterminals, terminals) sorted by frequency then name; UNK first
    among terminals."""
    nt = Counter()
    term = Counter()
    for tree in trees:
        for node in tree.nodes:
            (term if node.terminal else nt)[node.label] += 1
    terminals = [UNK] + [s for s in _by_frequency(term) if s != UNK]
    return _by_frequency(nt), terminals


def build_token_vocab(trees):
    """Token vocabulary for the sequential baseline: BOS/EOS first, then the
    linearized-bracket alphabet by frequency."""
    counts = Counter()
    for tree in trees:
        counts.update(linearize_brackets(tree))
    return [BOS, EOS] + [s for s in _by_frequency(counts) if s not in (BOS, EOS)]
