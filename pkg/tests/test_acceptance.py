"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`.  The heavy criteria train
real models; the whole module takes roughly 12 minutes on one CPU core.
Where a criterion pins no model size or training budget, small ones are
used; every pinned tolerance, count and cap is asserted as stated.
"""
import copy
import math
import time

import numpy as np
import pytest

from tdtd import autodiff as ad
from tdtd.decoder import TdtdConfig, TdtdModel, generate_scored, tree_log_prob
from tdtd.metrics import bleu_n, bracket_f1, sample_report
from tdtd.pcfg import generate_dataset, load_grammar, oracle_nll
from tdtd.parser import rerank
from tdtd.seqlm import sample_sequence
from tdtd.training import TrainConfig, build_model, build_model_config, train
from tdtd.treebank import Tree, parse_bracketed, to_bracketed, validate

from conftest import TOY_GRAMMAR
from enumeration import enumerate_process


def report(number, name, ok, details):
    print(f"\nACCEPTANCE {number:02d} {name}: {'PASS' if ok else 'FAIL'} ({details})")
    assert ok, f"criterion {number} ({name}): {details}"


@pytest.fixture(scope="module")
def grammar():
    return load_grammar(TOY_GRAMMAR)


@pytest.fixture(scope="module")
def criterion2_runs(grammar):
    """Both models trained on the same 2,000-tree budget (criterion 2)."""
    trees = generate_dataset(grammar, 2000, 15, seed=301)
    config = TrainConfig(seed=11, epochs=10, batch_size=16)
    overrides = {"hidden_size": 32, "embed_size": 32}
    started = time.time()
    seq = train("seq-lm", trees, config, model_overrides=overrides)
    tdtd = train("tdtd", trees, config, model_overrides=overrides)
    return {"seq": seq.model, "tdtd": tdtd.model, "train_seconds": time.time() - started}


def test_criterion_01_structural_validity(grammar):
    # 10,000 trees from an untrained checkpoint: Fail% exactly 0, all valid
    trees = generate_dataset(grammar, 50, 10, seed=1)
    config = build_model_config("tdtd", trees, hidden_size=16, embed_size=16,
                                max_depth=6)
    model = build_model("tdtd", config, np.random.default_rng(0))
    rng = np.random.default_rng(5)
    started = time.time()
    samples = []
    invalid = 0
    for _ in range(10_000):
        tree = generate_scored(model, rng=rng)[0]
        samples.append(tree)
        if not validate(tree).ok:
            invalid += 1
    rep = sample_report(samples, grammar)
    elapsed = time.time() - started
    ok = rep.fail_rate == 0.0 and invalid == 0 and elapsed < 120
    report(1, "structural validity", ok,
           f"fail_rate={rep.fail_rate}, invalid={invalid}/10000, {elapsed:.0f}s < 120s")


def test_criterion_02_baseline_fail_contrast(grammar, criterion2_runs):
    # seq-lm trained 10 epochs on 2,000 linearized 15-node trees shows
    # Fail% > 0 on 1,000 samples; TDTD under the same budget shows 0
    started = time.time()
    rng = np.random.default_rng(0)
    seq_samples = [sample_sequence(criterion2_runs["seq"], rng=rng, max_length=120)
                   for _ in range(1000)]
    seq_rep = sample_report(seq_samples, grammar)
    rng = np.random.default_rng(0)
    tdtd_samples = [generate_scored(criterion2_runs["tdtd"], rng=rng)[0]
                    for _ in range(1000)]
    tdtd_rep = sample_report(tdtd_samples, grammar)
    elapsed = criterion2_runs["train_seconds"] + time.time() - started
    ok = seq_rep.fail_rate > 0.0 and tdtd_rep.fail_rate == 0.0 and elapsed < 900
    report(2, "baseline Fail% contrast", ok,
           f"seq-lm fail={seq_rep.fail_rate:.3f} > 0, tdtd fail={tdtd_rep.fail_rate}, "
           f"{elapsed:.0f}s < 900s")


def test_criterion_03_oracle_nll_ordering(grammar):
    # TDTD's mean per-tree oracle NLL (node counts 10 and 15) <= seq-lm's at
    # node count 15, in at least 4 of 5 seeds; budget unpinned, small used
    wins = 0
    lines = []
    for seed in range(5):
        d10 = generate_dataset(grammar, 400, 10, seed=1000 + seed)
        d15 = generate_dataset(grammar, 400, 15, seed=2000 + seed)
        config = TrainConfig(seed=seed, epochs=5, batch_size=16)
        overrides = {"hidden_size": 16, "embed_size": 16}
        m10 = train("tdtd", d10, config, model_overrides=overrides).model
        m15 = train("tdtd", d15, config, model_overrides=overrides).model
        mseq = train("seq-lm", d15, config, model_overrides=overrides).model
        rng = np.random.default_rng(seed)
        nll10 = sample_report(
            [generate_scored(m10, rng=rng)[0] for _ in range(1000)], grammar).mean_nll
        nll15 = sample_report(
            [generate_scored(m15, rng=rng)[0] for _ in range(1000)], grammar).mean_nll
        nllseq = sample_report(
            [sample_sequence(mseq, rng=rng, max_length=120) for _ in range(1000)],
            grammar).mean_nll
        win = nll10 <= nllseq and nll15 <= nllseq
        wins += win
        lines.append(f"seed{seed}: {nll10:.1f}/{nll15:.1f} vs {nllseq:.1f}")
    ok = wins >= 4
    report(3, "oracle NLL ordering", ok, f"{wins}/5 seeds ({'; '.join(lines)})")


def test_criterion_04_oracle_self_consistency(grammar):
    # two disjoint 10,000-tree oracle samples at a fixed node count agree
    # within 3 standard errors of the difference
    started = time.time()
    a = generate_dataset(grammar, 10_000, 12, seed=11)
    b = generate_dataset(grammar, 10_000, 12, seed=12)
    nll_a = np.array([oracle_nll(grammar, t) for t in a])
    nll_b = np.array([oracle_nll(grammar, t) for t in b])
    se = math.sqrt(nll_a.var(ddof=1) / len(a) + nll_b.var(ddof=1) / len(b))
    diff = abs(float(nll_a.mean() - nll_b.mean()))
    elapsed = time.time() - started
    ok = diff <= 3 * se and elapsed < 60
    report(4, "oracle self-consistency", ok,
           f"|{nll_a.mean():.4f} - {nll_b.mean():.4f}| = {diff:.4f} <= 3*SE={3 * se:.4f}, "
           f"{elapsed:.0f}s < 60s")


def test_criterion_05_gradient_correctness():
    from tdtd.cli import _grad_check_error

    started = time.time()
    errors = {kind: _grad_check_error(kind, seed=0)
              for kind in ("tdtd", "tdtd-p", "seq-lm")}
    elapsed = time.time() - started
    ok = all(err < 1e-4 for err in errors.values()) and elapsed < 60
    report(5, "gradient correctness", ok,
           ", ".join(f"{k}={v:.2e}" for k, v in errors.items())
           + f"; all < 1e-4, {elapsed:.0f}s < 60s")


def test_criterion_06_normalization_by_enumeration():
    # terminal vocab 3, nonterminal vocab 2, max_depth 2, max_children 2:
    # mass of all within-cap trees plus cap-violating prefixes equals 1
    started = time.time()
    config = TdtdConfig(nonterminals=("X", "Y"), terminals=("a", "b", "c"),
                        hidden_size=4, embed_size=4, max_depth=2,
                        max_children_per_node=2, max_layer_width=64)
    model = TdtdModel(config, rng=np.random.default_rng(20))
    result = enumerate_process(model, max_depth=2, max_children=2,
                               max_layer_width=64)
    tree_mass = 0.0
    with ad.no_grad():
        for tree, _ in result.trees:
            tree_mass += math.exp(tree_log_prob(model, tree).item())
    total = tree_mass + result.violation_mass
    elapsed = time.time() - started
    ok = abs(total - 1.0) <= 1e-8 and elapsed < 60
    report(6, "normalization by enumeration", ok,
           f"{len(result.trees)} trees mass {tree_mass:.6f} + violations "
           f"{result.violation_mass:.6f} = {total!r}, |dev| <= 1e-8, {elapsed:.0f}s < 60s")


def test_criterion_07_scoring_generation_consistency(grammar):
    # recorded decision log-probs of 1,000 sampled trees match tree_log_prob
    trees = generate_dataset(grammar, 50, 10, seed=2)
    config = build_model_config("tdtd", trees, hidden_size=16, embed_size=16,
                                max_depth=5)
    model = build_model("tdtd", config, np.random.default_rng(3))
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        tree, recorded = generate_scored(model, rng=rng)
        worst = max(worst, abs(tree_log_prob(model, tree).item() - recorded))
    ok = worst <= 1e-10
    report(7, "scoring/generation consistency", ok, f"max |diff| = {worst:.2e} <= 1e-10")


def _swap_labels(tree, rng, nonterminals, n_swaps):
    nodes = copy.deepcopy(tree.nodes)
    positions = [i for i, n in enumerate(nodes) if not n.terminal]
    for _ in range(n_swaps):
        i = int(rng.choice(positions))
        choices = [s for s in nonterminals if s != nodes[i].label]
        nodes[i].label = str(rng.choice(choices))
    return Tree(nodes, tree.root)


def _rotate(tree, rng):
    """Promote a first grandchild one level up (yield-preserving)."""
    nodes = copy.deepcopy(tree.nodes)
    candidates = [i for i, n in enumerate(nodes)
                  if not n.terminal and len(n.children) >= 2
                  and not nodes[n.children[0]].terminal
                  and len(nodes[n.children[0]].children) >= 2]
    if not candidates:
        return None
    a = int(rng.choice(candidates))
    b = nodes[a].children[0]
    moved = nodes[b].children.pop(0)
    nodes[a].children.insert(0, moved)
    nodes[moved].parent = a
    return Tree(nodes, tree.root)


def test_criterion_08_reranking_sanity(grammar):
    # TDTD-P trained on 500 pairs; gold + 9 corrupted candidates for 200
    # held-out sentences; gold top-1 >= 70%, top-3 >= 90%
    started = time.time()
    train_trees = generate_dataset(grammar, 500, 12, seed=201)
    held = generate_dataset(grammar, 200, 12, seed=202)
    config = TrainConfig(seed=8, epochs=8, batch_size=16)
    result = train("tdtd-p", train_trees, config,
                   model_overrides={"hidden_size": 24, "embed_size": 24})
    model = result.model
    nonterminals = model.config.nonterminals
    rng = np.random.default_rng(42)
    top1 = top3 = 0
    for tree in held:
        gold_text = to_bracketed(tree)
        candidates = [tree]
        seen = {gold_text}
        attempts = 0
        while len(candidates) < 10 and attempts < 300:
            attempts += 1
            if rng.random() < 0.3:
                corrupted = _rotate(tree, rng)
            else:
                corrupted = _swap_labels(tree, rng, nonterminals,
                                         int(rng.integers(1, 3)))
            if corrupted is None or not validate(corrupted).ok:
                continue
            text = to_bracketed(corrupted)
            if text in seen:
                continue
            seen.add(text)
            candidates.append(corrupted)
        assert len(candidates) == 10
        ranked = rerank(model, tree.terminal_yield(), candidates)
        position = next(i for i, c in enumerate(ranked)
                        if to_bracketed(c.tree) == gold_text)
        top1 += position == 0
        top3 += position < 3
    elapsed = time.time() - started
    ok = top1 / 200 >= 0.70 and top3 / 200 >= 0.90 and elapsed < 1200
    report(8, "reranking sanity", ok,
           f"top1={top1 / 200:.1%} >= 70%, top3={top3 / 200:.1%} >= 90%, "
           f"{elapsed:.0f}s < 1200s")


def test_criterion_09_metric_fixtures():
    bleu = bleu_n([["the", "cat", "sat"]], [["the", "cat", "sat", "down"]], 2)
    gold = parse_bracketed("(S (NP (DT a) (NN b)) (VP (VB c)))")
    pred = parse_bracketed("(S (NP (DT a)) (VP (NN b) (VB c)))")
    f1 = bracket_f1(pred, gold).f1
    ok = abs(bleu - 0.7165) <= 1e-4 and abs(f1 - 1 / 3) <= 1e-9
    report(9, "metric fixtures", ok,
           f"bleu={bleu:.6f} (0.7165 ± 1e-4), f1={f1:.9f} (1/3 ± 1e-9)")


def test_criterion_10_training_determinism(grammar, tmp_path):
    trees = generate_dataset(grammar, 40, 10, seed=77)
    config = TrainConfig(seed=13, epochs=2, batch_size=8)
    outputs = []
    for run_dir in (tmp_path / "a", tmp_path / "b"):
        train("tdtd", trees, config, model_overrides={"hidden_size": 10, "embed_size": 10},
              checkpoint_dir=str(run_dir))
        outputs.append(((run_dir / "final.ckpt").read_bytes(),
                        (run_dir / "report.tsv").read_bytes()))
    ok = outputs[0] == outputs[1]
    report(10, "training determinism", ok,
           f"checkpoints identical={outputs[0][0] == outputs[1][0]}, "
           f"reports identical={outputs[0][1] == outputs[1][1]}")
