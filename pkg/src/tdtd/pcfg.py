"""PCFG oracle: rule files, pruning, tree sampling and NLL scoring.

The grammar plays two roles: it samples ground-truth trees (root drawn
uniformly from a start set, per-LHS categorical expansion, whole-tree
rejection on depth overflow) and it scores arbitrary trees by the negative
log-likelihood of their productions, with a fixed penalty probability for
productions it has never seen.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .treebank import Tree, TreeBuilder

__all__ = [
    "GrammarError",
    "SamplingError",
    "Rule",
    "Grammar",
    "load_grammar",
    "load_grammar_file",
    "prune_grammar",
    "sample_tree",
    "oracle_nll",
    "generate_dataset",
    "DEFAULT_PRUNE_THRESHOLD",
    "DEFAULT_PENALTY_PROB",
    "DEFAULT_MAX_DEPTH",
]

DEFAULT_PRUNE_THRESHOLD = 1e-6
DEFAULT_PENALTY_PROB = 1e-6
DEFAULT_MAX_DEPTH = 7


class GrammarError(ValueError):
    """Malformed rule file or inconsistent grammar."""


class SamplingError(RuntimeError):
    """Sampler could not satisfy its constraints within budget."""


@dataclass(frozen=True)
class Rule:
    lhs: str
    rhs: tuple[str, ...]  # 1 or 2 symbols
    rhs_terminal: tuple[bool, ...]
    prob: float  # scoring probability (original unless renormalized)

    @property
    def key(self):
        return (self.lhs, self.rhs, self.rhs_terminal)


class Grammar:
    """Indexed PCFG rule set plus a start-symbol set."""

    def __init__(self, rules, start_set):
        self.rules = list(rules)
        self.start_set = tuple(start_set)
        self.by_lhs: dict[str, list[int]] = {}
        self._score: dict[tuple, float] = {}
        for i, r in enumerate(self.rules):
            self.by_lhs.setdefault(r.lhs, []).append(i)
            if r.key in self._score:
                raise GrammarError(f"duplicate rule {r.lhs} -> {' '.join(r.rhs)}")
            self._score[r.key] = r.prob
        self.nonterminals = set(self.by_lhs)
        for r in self.rules:
            for sym, term in zip(r.rhs, r.rhs_terminal):
                if not term:
                    self.nonterminals.add(sym)
        self.terminals = {
            sym
            for r in self.rules
            for sym, term in zip(r.rhs, r.rhs_terminal)
            if term
        }
        # per-LHS sampling tables, renormalized to sum to 1
        self._cum: dict[str, np.ndarray] = {}
        for lhs, idxs in self.by_lhs.items():
            weights = np.array([self.rules[i].prob for i in idxs])
            probs = weights / weights.sum()
            self._cum[lhs] = np.cumsum(probs)

    def sampling_probs(self, lhs):
        """Renormalized expansion distribution for one LHS."""
        cum = self._cum[lhs]
        probs = np.diff(cum, prepend=0.0)
        return [(self.rules[i], p) for i, p in zip(self.by_lhs[lhs], probs)]

    def score_prob(self, lhs, rhs, rhs_terminal):
        """Scoring probability of a production, or None if unseen."""
        return self._score.get((lhs, tuple(rhs), tuple(rhs_terminal)))

    def sample_rule(self, lhs, rng):
        idxs = self.by_lhs[lhs]
        j = int(np.searchsorted(self._cum[lhs], rng.random(), side="right"))
        if j >= len(idxs):  # guard the cum[-1] == 1.0 - eps edge
            j = len(idxs) - 1
        return self.rules[idxs[j]]

    def __len__(self):
        return len(self.rules)


def _default_start(lhs_symbols):
    return [s for s in lhs_symbols if s.startswith("S")]


def load_grammar(text, start=None):
    """Load a grammar from rule-file text.

    One rule per line: `LHS RHS1 [RHS2] PROB`, terminals double-quoted,
    `#` comments.  `start` overrides the start set; by default it is every
    LHS whose name starts with "S" (the sentence family).
    """
    rules = []
    seen = set()
    lhs_order = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (3, 4):
            raise GrammarError(
                f"line {lineno}: expected `LHS RHS1 [RHS2] PROB`, got {len(fields)} fields"
            )
        lhs = fields[0]
        if lhs.startswith('"'):
            raise GrammarError(f"line {lineno}: LHS must be a nonterminal")
        try:
            prob = float(fields[-1])
        except ValueError:
            raise GrammarError(f"line {lineno}: bad probability {fields[-1]!r}") from None
        if not 0.0 < prob <= 1.0:
            raise GrammarError(f"line {lineno}: probability {prob} outside (0, 1]")
        rhs = []
        rhs_terminal = []
        for sym in fields[1:-1]:
            if sym.startswith('"') and sym.endswith('"') and len(sym) >= 3:
                rhs.append(sym[1:-1])
                rhs_terminal.append(True)
            elif sym.startswith('"') or sym.endswith('"'):
                raise GrammarError(f"line {lineno}: bad quoting in {sym!r}")
            else:
                rhs.append(sym)
                rhs_terminal.append(False)
        rule = Rule(lhs, tuple(rhs), tuple(rhs_terminal), prob)
        if rule.key in seen:
            raise GrammarError(f"line {lineno}: duplicate rule {lhs} -> {' '.join(rhs)}")
        seen.add(rule.key)
        if lhs not in set(lhs_order):
            lhs_order.append(lhs)
        rules.append(rule)
    if not rules:
        raise GrammarError("no rules in grammar")
    if start is None:
        start = _default_start(lhs_order)
        if not start:
            raise GrammarError(
                "no start symbols: no LHS starts with 'S'; pass an explicit start set"
            )
    else:
        start = list(start)
        missing = [s for s in start if not any(r.lhs == s for r in rules)]
        if missing:
            raise GrammarError(f"start symbol(s) with no rules: {', '.join(missing)}")
    grammar = Grammar(rules, start)
    _check_reachable(grammar)
    return grammar


def load_grammar_file(path, start=None):
    with open(path, "r", encoding="utf-8") as fh:
        return load_grammar(fh.read(), start=start)


def _check_reachable(grammar):
    """Every nonterminal reachable from the start set must have rules."""
    seen = set(grammar.start_set)
    frontier = list(grammar.start_set)
    while frontier:
        lhs = frontier.pop()
        for i in grammar.by_lhs.get(lhs, ()):
            rule = grammar.rules[i]
            for sym, term in zip(rule.rhs, rule.rhs_terminal):
                if not term and sym not in seen:
                    seen.add(sym)
                    frontier.append(sym)
    dead = sorted(s for s in seen if s not in grammar.by_lhs)
    if dead:
        raise GrammarError(
            f"reachable nonterminal(s) with no rules: {', '.join(dead)}"
        )


def prune_grammar(grammar, threshold=DEFAULT_PRUNE_THRESHOLD, renormalize_scoring=False):
    """Drop rules with prob < threshold.

    Sampling distributions are always renormalized per LHS.  Scoring
    probabilities keep their original values unless `renormalize_scoring`
    (whether the oracle renormalizes after pruning is left open; the default
    keeps the stated rule probabilities so the unseen-rule penalty stays
    meaningful).
    """
    if threshold < 0:
        raise GrammarError("prune threshold must be >= 0")
    kept = [r for r in grammar.rules if r.prob >= threshold]
    kept_lhs = {r.lhs for r in kept}
    lost_starts = [s for s in grammar.start_set if s not in kept_lhs]
    if lost_starts:
        raise GrammarError(
            f"pruning at {threshold} left start symbol(s) with no rules: "
            f"{', '.join(lost_starts)}"
        )
    if renormalize_scoring:
        totals: dict[str, float] = {}
        for r in kept:
            totals[r.lhs] = totals.get(r.lhs, 0.0) + r.prob
        kept = [
            Rule(r.lhs, r.rhs, r.rhs_terminal, r.prob / totals[r.lhs]) for r in kept
        ]
    pruned = Grammar(kept, grammar.start_set)
    _check_reachable(pruned)
    return pruned


def sample_tree(grammar, max_depth=DEFAULT_MAX_DEPTH, rng=None, max_rejections=10_000):
    """Sample one tree: uniform root over the start set, categorical
    expansion, whole-tree rejection when any node would exceed max_depth."""
    if max_depth < 1:
        raise SamplingError("max_depth must be >= 1")
    if not grammar.start_set:
        raise SamplingError("empty start set")
    if rng is None:
        rng = np.random.default_rng()
    rejections = 0
    while True:
        root = grammar.start_set[int(rng.integers(len(grammar.start_set)))]
        tree = _try_expand(grammar, root, max_depth, rng)
        if tree is not None:
            return tree
        rejections += 1
        if rejections >= max_rejections:
            raise SamplingError(
                f"{max_rejections} consecutive depth rejections; grammar and "
                f"start set are incompatible with max_depth={max_depth}"
            )


def _try_expand(grammar, root, max_depth, rng):
    builder = TreeBuilder(root, terminal=False)
    # frontier of (node index, lhs, depth), expanded breadth-first
    frontier = deque([(0, root, 0)])
    while frontier:
        idx, lhs, depth = frontier.popleft()
        if depth >= max_depth:
            return None  # children would exceed the cap
        rule = grammar.sample_rule(lhs, rng)
        for sym, term in zip(rule.rhs, rule.rhs_terminal):
            child = builder.add_child(idx, sym, term)
            if not term:
                frontier.append((child, sym, depth + 1))
    return builder.build()


def oracle_nll(grammar, tree, penalty_prob=DEFAULT_PENALTY_PROB):
    """Negative log-likelihood of `tree` conditional on its root, in nats.

    Sums -log P(children | node) over every nonterminal node; a production
    the grammar has never seen contributes -log(penalty_prob).
    """
    root_label = tree.label(tree.root)
    if root_label not in grammar.nonterminals:
        raise GrammarError(f"root label {root_label!r} unknown to the grammar")
    total = 0.0
    for i, node in enumerate(tree.nodes):
        if node.terminal:
            continue
        rhs = tuple(tree.label(c) for c in node.children)
        rhs_terminal = tuple(tree.is_terminal(c) for c in node.children)
        prob = grammar.score_prob(node.label, rhs, rhs_terminal)
        if prob is None:
            prob = penalty_prob
        total -= math.log(prob)
    return total


def generate_dataset(
    grammar,
    count,
    target_node_count,
    max_depth=DEFAULT_MAX_DEPTH,
    seed=None,
    rng=None,
    max_attempts=None,
):
    """Rejection-sample `count` trees with exactly `target_node_count`
    nonterminal nodes (preterminals included) and depth <= max_depth.
    Deterministic given a seed."""
    if count < 1:
        raise SamplingError("count must be >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    if max_attempts is None:
        max_attempts = max(200_000, 2_000 * count)
    trees = []
    attempts = 0
    while len(trees) < count:
        if attempts >= max_attempts:
            rate = len(trees) / attempts if attempts else 0.0
            raise SamplingError(
                f"dataset generation budget exhausted after {attempts} attempts "
                f"(acceptance rate {rate:.2%}) targeting {target_node_count} nodes"
            )
        attempts += 1
        tree = sample_tree(grammar, max_depth=max_depth, rng=rng)
        if tree.nonterminal_count() == target_node_count:
            trees.append(tree)
    return trees
