"""Model files: config header + vocabulary listings + parameter checkpoint.

Layout (UTF-8, LF):

    TDTD-MODEL v1
    kind=tdtd            # tdtd | tdtd-p | seq-lm
    hidden_size=32
    ...                  # every scalar config field, key=value
    [nonterminals]       # one symbol per line ([tokens] for seq-lm)
    S
    [terminals]
    <unk>
    [params]
    TDTD-CKPT v1
    ...
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .decoder import TdtdConfig, TdtdModel
from .parser import TdtdParserModel
from .seqlm import SeqLmConfig, SeqLmModel

__all__ = ["ModelIoError", "save_model", "load_model"]

MODEL_MAGIC = "TDTD-MODEL v1"


class ModelIoError(ValueError):
    pass


def _format_header(model):
    lines = [MODEL_MAGIC, f"kind={model.kind}"]
    for key, value in model.config.scalar_fields().items():
        lines.append(f"{key}={value}")
    return lines


def save_model(model, destination):
    lines = _format_header(model)
    if model.kind == "seq-lm":
        lines.append("[tokens]")
        lines.extend(model.config.tokens)
    else:
        lines.append("[nonterminals]")
        lines.extend(model.config.nonterminals)
        lines.append("[terminals]")
        lines.extend(model.config.terminals)
    lines.append("[params]")
    text = "\n".join(lines) + "\n" + ad.format_params(model.store)
    with open(destination, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _parse_scalars(lines, start):
    scalars = {}
    i = start
    while i < len(lines) and not lines[i].startswith("["):
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ModelIoError(f"line {i}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        scalars[key.strip()] = value.strip()
    return scalars, i


def _parse_listing(lines, i, section):
    if i >= len(lines) or lines[i].strip() != f"[{section}]":
        found = lines[i].strip() if i < len(lines) else "<end of file>"
        raise ModelIoError(f"line {i + 1}: expected [{section}], found {found!r}")
    i += 1
    symbols = []
    while i < len(lines) and not lines[i].startswith("["):
        sym = lines[i].rstrip("\n")
        if sym:
            symbols.append(sym)
        i += 1
    return symbols, i


def load_model(source):
    with open(source, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0].strip() != MODEL_MAGIC:
        raise ModelIoError(f"line 1: expected header {MODEL_MAGIC!r}")
    scalars, i = _parse_scalars(lines, 1)
    kind = scalars.pop("kind", None)
    if kind not in ("tdtd", "tdtd-p", "seq-lm"):
        raise ModelIoError(f"unknown or missing model kind: {kind!r}")

    def intval(key):
        try:
            return int(scalars[key])
        except KeyError:
            raise ModelIoError(f"missing config field {key!r}") from None
        except ValueError:
            raise ModelIoError(f"bad integer for {key!r}: {scalars[key]!r}") from None

    if kind == "seq-lm":
        tokens, i = _parse_listing(lines, i, "tokens")
        config = SeqLmConfig(
            tokens=tuple(tokens),
            hidden_size=intval("hidden_size"),
            embed_size=intval("embed_size"),
            max_length=intval("max_length"),
        )
        model = SeqLmModel(config, rng=np.random.default_rng(0))
    else:
        nonterminals, i = _parse_listing(lines, i, "nonterminals")
        terminals, i = _parse_listing(lines, i, "terminals")
        config = TdtdConfig(
            nonterminals=tuple(nonterminals),
            terminals=tuple(terminals),
            hidden_size=intval("hidden_size"),
            embed_size=intval("embed_size"),
            max_depth=intval("max_depth"),
            max_children_per_node=intval("max_children_per_node"),
            max_layer_width=intval("max_layer_width"),
            scaled_attention=bool(intval("scaled_attention")),
        )
        cls = TdtdParserModel if kind == "tdtd-p" else TdtdModel
        model = cls(config, rng=np.random.default_rng(0))

    if i >= len(lines) or lines[i].strip() != "[params]":
        raise ModelIoError(f"line {i + 1}: expected [params] section")
    params_text = "\n".join(lines[i + 1 :]) + "\n"
    expect = {name: t.values.shape for name, t in model.store.items()}
    loaded = ad.parse_params(params_text, expect_shapes=expect)
    for name, tensor in model.store.items():
        tensor.values[...] = loaded[name].values
    return model
