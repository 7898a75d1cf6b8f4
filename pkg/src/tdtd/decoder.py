"""Top-down breadth-first tree decoder.

A tree is generated layer by layer.  Three recurrences cooperate:

* layer encoder: a bidirectional GRU over each completed layer, where every
  node's input is its embedding concatenated with its parent's encoded state
  from the layer above, so the state carries sibling and ancestral context;
* ancestor GRU: a unidirectional GRU down the label path from the root,
  producing the ancestor summary used when predicting a node's children;
* emission GRU: a forward GRU over the symbols already emitted in the layer
  under construction (siblings and cousins alike), reset at each new layer.

Children of each parent are emitted left to right and closed by a reserved
STOP symbol.  Each prediction first picks a class (nonterminal / terminal /
STOP) with a softmax gate, then a symbol from the class vocabulary, so the
distribution over {STOP} + terminals + nonterminals is properly normalized.
STOP is masked out at the first child position (a nonterminal must dominate
at least one child), in scoring and generation alike.

tree_log_prob is the pure model distribution: depth / children / width caps
constrain sampling only.  generate() records the model log-prob of every
decision it takes, so the recorded sum equals tree_log_prob of the result
even when a cap forced a decision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .treebank import Tree, TreeBuilder, layer_view
from .vocab import UNK

__all__ = [
    "DecoderError",
    "TdtdConfig",
    "TdtdModel",
    "NodeDistribution",
    "LayerContext",
    "encode_layer",
    "depth_step",
    "gen_step",
    "predict_node",
    "tree_log_prob",
    "generate",
    "generate_scored",
]

STOP_ID = 0
LSTART_ID = 1
CLASS_NT, CLASS_TERM, CLASS_STOP = 0, 1, 2


class DecoderError(ValueError):
    """Configuration or input violates the decoder's contracts."""


@dataclass(frozen=True)
class TdtdConfig:
    nonterminals: tuple[str, ...]
    terminals: tuple[str, ...]
    hidden_size: int = 32
    embed_size: int = 32
    max_depth: int = 7
    max_children_per_node: int = 8
    max_layer_width: int = 64
    scaled_attention: bool = True  # used by the conditional variant only

    def __post_init__(self):
        for name in ("hidden_size", "embed_size", "max_depth",
                     "max_children_per_node", "max_layer_width"):
            if getattr(self, name) < 1:
                raise DecoderError(f"{name} must be >= 1")
        if not self.nonterminals or not self.terminals:
            raise DecoderError("vocabularies must be non-empty")
        overlap = set(self.nonterminals) & set(self.terminals)
        if overlap:
            raise DecoderError(f"vocabularies overlap: {sorted(overlap)}")
        for reserved in ("<stop>", "<lstart>"):
            if reserved in self.nonterminals or reserved in self.terminals:
                raise DecoderError(f"{reserved} is reserved")

    def scalar_fields(self):
        return {
            "hidden_size": self.hidden_size,
            "embed_size": self.embed_size,
            "max_depth": self.max_depth,
            "max_children_per_node": self.max_children_per_node,
            "max_layer_width": self.max_layer_width,
            "scaled_attention": int(self.scaled_attention),
        }


class TdtdModel:
    """Parameters plus vocabulary index maps for the breadth-first decoder."""

    kind = "tdtd"

    def __init__(self, config: TdtdConfig, rng=None, seed=0):
        if rng is None:
            rng = np.random.default_rng(seed)
        self.config = config
        self.store = ad.ParamStore()
        n_nt = len(config.nonterminals)
        n_term = len(config.terminals)
        e = config.embed_size
        h = config.hidden_size
        # one embedding table for STOP, layer-start, nonterminals, terminals
        self.n_symbols = 2 + n_nt + n_term
        self._nt_base = 2
        self._term_base = 2 + n_nt
        self._nt_index = {s: i for i, s in enumerate(config.nonterminals)}
        self._term_index = {s: i for i, s in enumerate(config.terminals)}
        s = self.store
        self.emb = s.param("emb", (self.n_symbols, e), rng, fan_in=e)
        self.layer_fwd = ad.GruCell(s, "layer_fwd", e + 2 * h, h, rng)
        self.layer_bwd = ad.GruCell(s, "layer_bwd", e + 2 * h, h, rng)
        self.layer_fwd_init = s.param("layer_fwd_init", (h,), zero=True)
        self.layer_bwd_init = s.param("layer_bwd_init", (h,), zero=True)
        self.root_parent_ctx = s.param("root_parent_ctx", (2 * h,), zero=True)
        self.depth_rnn = ad.GruCell(s, "depth", e, h, rng)
        self.depth_init = s.param("depth_init", (h,), zero=True)
        self.gen_rnn = ad.GruCell(s, "gen", e, h, rng)
        self.gen_init = s.param("gen_init", (h,), zero=True)
        self.root_feat = s.param("root_feat", (e,), zero=True)
        self.w_root = s.param("w_root", (e, n_nt), rng)
        self.b_root = s.param("b_root", (n_nt,), zero=True)
        f = self.feature_size()
        self.w_gate = s.param("w_gate", (f, 3), rng)
        self.b_gate = s.param("b_gate", (3,), zero=True)
        self.w_nt = s.param("w_nt", (f, n_nt), rng)
        self.b_nt = s.param("b_nt", (n_nt,), zero=True)
        self.w_term = s.param("w_term", (f, n_term), rng)
        self.b_term = s.param("b_term", (n_term,), zero=True)

    def feature_size(self):
        # emission state + ancestor state + encoded parent state
        return self.config.hidden_size * 2 + self.config.hidden_size * 2

    # -- vocabulary ---------------------------------------------------------

    def symbol_id(self, label, terminal):
        if terminal:
            idx = self._term_index.get(label)
            if idx is None:
                raise DecoderError(f"terminal {label!r} not in vocabulary")
            return self._term_base + idx
        idx = self._nt_index.get(label)
        if idx is None:
            raise DecoderError(f"nonterminal {label!r} not in vocabulary")
        return self._nt_base + idx

    def term_symbol_id(self, word):
        idx = self._term_index.get(word)
        if idx is None:
            idx = self._term_index.get(UNK)
            if idx is None:
                raise DecoderError(f"terminal {word!r} not in vocabulary (no {UNK})")
        return self._term_base + idx

    def nt_index(self, label):
        idx = self._nt_index.get(label)
        if idx is None:
            raise DecoderError(f"nonterminal {label!r} not in vocabulary")
        return idx

    def term_index(self, word):
        idx = self._term_index.get(word)
        if idx is None:
            raise DecoderError(f"terminal {word!r} not in vocabulary")
        return idx

    def embed(self, symbol_id):
        return ad.embed_row(self.emb, symbol_id)

    # -- root head ----------------------------------------------------------

    def root_log_probs(self, root_input=None):
        feat = self.root_feat if root_input is None else root_input
        return ad.log_softmax(ad.affine(feat, self.w_root, self.b_root))


@dataclass
class LayerContext:
    """Encoded states (2*hidden each) and ancestor states for one layer."""

    states: list  # per-node contextual vectors
    ancestors: list  # per-node ancestor-path states (None for terminals)


def encode_layer(model, symbol_ids, parent_positions, prev: LayerContext | None):
    """Bidirectional GRU over one layer.

    `parent_positions[i]` indexes into `prev.states`; pass None for the root
    layer, which uses the learned root-parent vector.  Returns the list of
    per-node states (forward || backward).
    """
    n = len(symbol_ids)
    if prev is None:
        parents = [model.root_parent_ctx] * n
    else:
        if parent_positions is None or len(parent_positions) != n:
            raise DecoderError("encode_layer: parent positions required per node")
        try:
            parents = [prev.states[p] for p in parent_positions]
        except IndexError:
            raise DecoderError("encode_layer: dangling parent index") from None
    embs = [model.embed(s) for s in symbol_ids]
    inputs = [ad.concat((v, p)) for v, p in zip(embs, parents)]
    fwd = []
    h = model.layer_fwd_init
    for x in inputs:
        h = model.layer_fwd.step(x, h)
        fwd.append(h)
    bwd = [None] * n
    h = model.layer_bwd_init
    for i in range(n - 1, -1, -1):
        h = model.layer_bwd.step(inputs[i], h)
        bwd[i] = h
    return [ad.concat((f, b)) for f, b in zip(fwd, bwd)]


def depth_step(model, parent_ancestor_state, label_symbol_id):
    """One GRU step down the ancestor path; root uses the learned init."""
    state = model.depth_init if parent_ancestor_state is None else parent_ancestor_state
    return model.depth_rnn.step(model.embed(label_symbol_id), state)


def gen_step(model, prev_state, symbol_id):
    """Advance the emission GRU with one consumed symbol (layer-start, a
    vocabulary symbol, or STOP)."""
    state = model.gen_init if prev_state is None else prev_state
    return model.gen_rnn.step(model.embed(symbol_id), state)


# ---------------------------------------------------------------------------
# prediction


class _Prediction:
    """Graph-level pieces of one prediction step."""

    __slots__ = ("gate_nt", "gate_term", "gate_stop", "nt_logp", "term_logp")

    def __init__(self, gate_nt, gate_term, gate_stop, nt_logp, term_logp):
        self.gate_nt = gate_nt
        self.gate_term = gate_term
        self.gate_stop = gate_stop
        self.nt_logp = nt_logp
        self.term_logp = term_logp

    def log_prob_nt(self, nt_index):
        if self.gate_nt is None:
            raise DecoderError("nonterminal class is masked here")
        return ad.add(self.gate_nt, ad.pick(self.nt_logp, nt_index))

    def log_prob_term(self, term_index):
        return ad.add(self.gate_term, ad.pick(self.term_logp, term_index))

    def log_prob_stop(self):
        if self.gate_stop is None:
            raise DecoderError("STOP is masked here")
        return self.gate_stop

    def argmax_symbol(self):
        """Greedy (class, index) over the masked outcome space."""
        best = None
        if self.gate_nt is not None:
            j = int(np.argmax(self.nt_logp.values))
            best = (float(self.gate_nt.values) + float(self.nt_logp.values[j]),
                    CLASS_NT, j)
        j = int(np.argmax(self.term_logp.values))
        cand = (float(self.gate_term.values) + float(self.term_logp.values[j]),
                CLASS_TERM, j)
        if best is None or cand > best:
            best = cand
        if self.gate_stop is not None:
            cand = (float(self.gate_stop.values), CLASS_STOP, -1)
            if cand > best:
                best = cand
        return best[1], best[2]


def _predict(model, u, ancestor, parent_state, extra=None,
             allow_stop=True, force_terminal=False):
    parts = [u, ancestor, parent_state]
    if extra is not None:
        parts.append(extra)
    feats = ad.concat(parts)
    gate_logits = ad.affine(feats, model.w_gate, model.b_gate)
    if force_terminal and not allow_stop:
        gate_nt = None
        gate_term = ad.const(0.0)  # the only class left: log 1
        gate_stop = None
    elif force_terminal:
        lp = ad.log_softmax(ad.slice_vec(gate_logits, 1, 3))
        gate_nt = None
        gate_term = ad.pick(lp, 0)
        gate_stop = ad.pick(lp, 1)
    elif not allow_stop:
        lp = ad.log_softmax(ad.slice_vec(gate_logits, 0, 2))
        gate_nt = ad.pick(lp, 0)
        gate_term = ad.pick(lp, 1)
        gate_stop = None
    else:
        lp = ad.log_softmax(gate_logits)
        gate_nt = ad.pick(lp, 0)
        gate_term = ad.pick(lp, 1)
        gate_stop = ad.pick(lp, 2)
    nt_logp = ad.log_softmax(ad.affine(feats, model.w_nt, model.b_nt))
    term_logp = ad.log_softmax(ad.affine(feats, model.w_term, model.b_term))
    return _Prediction(gate_nt, gate_term, gate_stop, nt_logp, term_logp)


@dataclass
class NodeDistribution:
    """Inspectable prediction: class gate plus class-conditional categoricals."""

    gate: np.ndarray  # probabilities over (NONTERMINAL, TERMINAL, STOP)
    nonterminal: np.ndarray
    terminal: np.ndarray

    def log_prob(self, label, terminal, model):
        if terminal:
            return math.log(self.gate[CLASS_TERM]) + math.log(
                self.terminal[model.term_index(label)]
            )
        return math.log(self.gate[CLASS_NT]) + math.log(
            self.nonterminal[model.nt_index(label)]
        )

    def log_prob_stop(self):
        return math.log(self.gate[CLASS_STOP])

    def total_mass(self):
        return float(
            self.gate[CLASS_NT] * self.nonterminal.sum()
            + self.gate[CLASS_TERM] * self.terminal.sum()
            + self.gate[CLASS_STOP]
        )


def predict_node(model, u, ancestor, parent_state, extra=None,
                 allow_stop=True, force_terminal=False):
    """Distribution over {STOP} + terminals + nonterminals for one position.

    `force_terminal` masks the nonterminal class (used at the depth cap);
    `allow_stop=False` masks STOP (first child position).  The gate is
    renormalized over the remaining classes.
    """
    with ad.no_grad():
        p = _predict(model, u, ancestor, parent_state, extra,
                     allow_stop=allow_stop, force_terminal=force_terminal)
    gate = np.zeros(3)
    if p.gate_nt is not None:
        gate[CLASS_NT] = math.exp(float(p.gate_nt.values))
    gate[CLASS_TERM] = math.exp(float(p.gate_term.values))
    if p.gate_stop is not None:
        gate[CLASS_STOP] = math.exp(float(p.gate_stop.values))
    return NodeDistribution(
        gate=gate,
        nonterminal=np.exp(p.nt_logp.values),
        terminal=np.exp(p.term_logp.values),
    )


# ---------------------------------------------------------------------------
# teacher-forced scoring


class _ScheduledSampler:
    """Replaces consumed emission-GRU inputs with greedy model predictions
    with probability 1 - teacher_forcing_prob.  Targets and tree topology
    are never touched."""

    def __init__(self, rng, teacher_forcing_prob):
        self.rng = rng
        self.p = teacher_forcing_prob

    def consumed_symbol(self, model, prediction, gold_symbol_id):
        if self.rng.random() < self.p:
            return gold_symbol_id
        cls, idx = prediction.argmax_symbol()
        if cls == CLASS_STOP:
            return STOP_ID
        if cls == CLASS_NT:
            return model._nt_base + idx
        return model._term_base + idx


def _score_tree(model, tree, conditioning=None, sampler=None, exclude_root=False):
    """Teacher-forced log-probability as a scalar graph tensor.

    `conditioning`, when given, supplies per-prediction extra context and a
    root input (used by the conditional variant).  `sampler` optionally
    applies scheduled sampling to emission-GRU inputs.
    """
    view = layer_view(tree)
    terms = []
    root = tree.root
    root_nt = model.nt_index(tree.label(root))  # validates the label early
    if not exclude_root:
        root_input = conditioning.root_input() if conditioning is not None else None
        terms.append(ad.pick(model.root_log_probs(root_input), root_nt))

    prev_states = None
    prev_ancestors = None
    prev_positions = None  # map node index -> position in its layer
    for d, layer in enumerate(view.layers):
        symbol_ids = [
            model.symbol_id(tree.label(i), tree.is_terminal(i)) for i in layer
        ]
        if d == 0:
            parent_pos = None
            prev_ctx = None
        else:
            parent_pos = [prev_positions[tree.nodes[i].parent] for i in layer]
            prev_ctx = LayerContext(prev_states, prev_ancestors)
        states = encode_layer(model, symbol_ids, parent_pos, prev_ctx)
        ancestors = []
        for pos, i in enumerate(layer):
            if tree.is_terminal(i):
                ancestors.append(None)
            else:
                parent_anc = None if d == 0 else prev_ancestors[parent_pos[pos]]
                ancestors.append(depth_step(model, parent_anc, symbol_ids[pos]))

        if any(not tree.is_terminal(i) for i in layer):
            u = gen_step(model, None, LSTART_ID)
            for pos, i in enumerate(layer):
                if tree.is_terminal(i):
                    continue
                ancestor = ancestors[pos]
                parent_state = states[pos]
                children = tree.nodes[i].children
                if not children:
                    raise DecoderError(
                        f"cannot score node {i}: nonterminal without children"
                    )
                for j, c in enumerate(children):
                    pred = _predict(
                        model, u, ancestor, parent_state,
                        extra=conditioning.attend(u, parent_state)
                        if conditioning is not None else None,
                        allow_stop=j > 0,
                    )
                    child = tree.nodes[c]
                    if child.terminal:
                        terms.append(pred.log_prob_term(model.term_index(child.label)))
                        gold_sym = model._term_base + model.term_index(child.label)
                    else:
                        terms.append(pred.log_prob_nt(model.nt_index(child.label)))
                        gold_sym = model._nt_base + model.nt_index(child.label)
                    consumed = (
                        sampler.consumed_symbol(model, pred, gold_sym)
                        if sampler is not None else gold_sym
                    )
                    u = gen_step(model, u, consumed)
                pred = _predict(
                    model, u, ancestor, parent_state,
                    extra=conditioning.attend(u, parent_state)
                    if conditioning is not None else None,
                    allow_stop=True,
                )
                terms.append(pred.log_prob_stop())
                consumed = (
                    sampler.consumed_symbol(model, pred, STOP_ID)
                    if sampler is not None else STOP_ID
                )
                u = gen_step(model, u, consumed)

        prev_states = states
        prev_ancestors = ancestors
        prev_positions = {i: pos for pos, i in enumerate(layer)}
    return ad.add_scalars(terms)


def tree_log_prob(model, tree, exclude_root=False):
    """Teacher-forced log p(tree) in nats, as a scalar graph tensor.

    With exclude_root=True the root term is dropped, matching the oracle's
    conditional-on-root scoring.
    """
    return _score_tree(model, tree, exclude_root=exclude_root)


# ---------------------------------------------------------------------------
# generation


def generate_scored(model, rng=None, greedy=False, root_label=None,
                    max_depth=None, max_children=None, max_layer_width=None):
    """Sample (or argmax) one tree; returns (tree, recorded log-prob).

    Safety rails: parents at the depth cap only emit terminals, child groups
    are cut at max_children, layers at max_layer_width (while reserving one
    slot per remaining parent, so every nonterminal still gets a child).
    Sampling follows the rail-constrained distribution; the recorded log-prob
    is the model's own score of each decision, so the sum equals
    tree_log_prob of the returned tree.
    """
    cfg = model.config
    max_depth = cfg.max_depth if max_depth is None else max_depth
    max_children = cfg.max_children_per_node if max_children is None else max_children
    max_layer_width = cfg.max_layer_width if max_layer_width is None else max_layer_width
    if max_depth < 1 or max_children < 1 or max_layer_width < 1:
        raise DecoderError("generation limits must be >= 1")
    if rng is None and not greedy:
        raise DecoderError("sampling requires an rng (or pass greedy=True)")

    with ad.no_grad():
        total = 0.0
        root_lp = model.root_log_probs()
        if root_label is not None:
            root_idx = model.nt_index(root_label)
        elif greedy:
            root_idx = int(np.argmax(root_lp.values))
        else:
            root_idx = _sample_categorical(np.exp(root_lp.values), rng)
        total += float(root_lp.values[root_idx])
        root_name = model.config.nonterminals[root_idx]

        builder = TreeBuilder(root_name, terminal=False)
        layer_nodes = [0]
        layer_syms = [model.symbol_id(root_name, False)]
        layer_terminal = [False]
        states = encode_layer(model, layer_syms, None, None)
        ancestors = [depth_step(model, None, layer_syms[0])]
        depth = 0

        while depth < max_depth:
            parents = [pos for pos, t in enumerate(layer_terminal) if not t]
            if not parents:
                break
            next_nodes, next_syms, next_terminal, next_parent_pos = [], [], [], []
            u = gen_step(model, None, LSTART_ID)
            force_terminal_layer = depth + 1 >= max_depth
            for k, pos in enumerate(parents):
                groups_left = len(parents) - k - 1
                node_idx = layer_nodes[pos]
                n_children = 0
                while True:
                    allowance = max_layer_width - len(next_syms) - groups_left
                    pred = _predict(
                        model, u, ancestors[pos], states[pos],
                        allow_stop=n_children > 0,
                    )
                    force_stop = n_children >= max_children or n_children >= allowance
                    cls, idx = _draw(pred, rng, greedy,
                                     force_terminal=force_terminal_layer,
                                     force_stop=force_stop)
                    if cls == CLASS_STOP:
                        total += float(pred.gate_stop.values)
                        u = gen_step(model, u, STOP_ID)
                        break
                    if cls == CLASS_NT:
                        total += float(pred.gate_nt.values) + float(pred.nt_logp.values[idx])
                        label = cfg.nonterminals[idx]
                        sym = model._nt_base + idx
                        terminal = False
                    else:
                        total += float(pred.gate_term.values) + float(pred.term_logp.values[idx])
                        label = cfg.terminals[idx]
                        sym = model._term_base + idx
                        terminal = True
                    child = builder.add_child(node_idx, label, terminal)
                    next_nodes.append(child)
                    next_syms.append(sym)
                    next_terminal.append(terminal)
                    next_parent_pos.append(pos)
                    n_children += 1
                    u = gen_step(model, u, sym)
            prev_ctx = LayerContext(states, ancestors)
            states = encode_layer(model, next_syms, next_parent_pos, prev_ctx)
            ancestors = []
            for sym, ppos, terminal in zip(next_syms, next_parent_pos, next_terminal):
                ancestors.append(
                    None if terminal else depth_step(model, prev_ctx.ancestors[ppos], sym)
                )
            layer_nodes, layer_syms, layer_terminal = next_nodes, next_syms, next_terminal
            depth += 1
    return builder.build(), total


def generate(model, rng=None, greedy=False, **limits):
    tree, _ = generate_scored(model, rng=rng, greedy=greedy, **limits)
    return tree


def _sample_categorical(probs, rng):
    total = probs.sum()
    r = rng.random() * total
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if r < acc:
            return i
    return len(probs) - 1


def _draw(pred, rng, greedy, force_terminal, force_stop):
    """Pick (class, index) from a prediction under the generation rails."""
    if force_stop:
        return CLASS_STOP, -1
    gate = []
    if pred.gate_nt is not None and not force_terminal:
        gate.append((CLASS_NT, math.exp(float(pred.gate_nt.values))))
    gate.append((CLASS_TERM, math.exp(float(pred.gate_term.values))))
    if pred.gate_stop is not None:
        gate.append((CLASS_STOP, math.exp(float(pred.gate_stop.values))))
    if greedy:
        best = None
        for cls, gp in gate:
            if cls == CLASS_STOP:
                score, idx = math.log(gp), -1
            else:
                logp = pred.nt_logp if cls == CLASS_NT else pred.term_logp
                idx = int(np.argmax(logp.values))
                score = math.log(gp) + float(logp.values[idx])
            if best is None or score > best[0]:
                best = (score, cls, idx)
        return best[1], best[2]
    weights = np.array([gp for _, gp in gate])
    cls = gate[_sample_categorical(weights, rng)][0]
    if cls == CLASS_STOP:
        return CLASS_STOP, -1
    logp = pred.nt_logp if cls == CLASS_NT else pred.term_logp
    return cls, _sample_categorical(np.exp(logp.values), rng)
