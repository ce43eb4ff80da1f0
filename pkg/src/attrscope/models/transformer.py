"""Transformer forward passes expressed as autodiff graphs.

Graphs depend only on (hyperparams, sequence length, attention mode), so
they are cached and re-evaluated with different leaf values; weights and
the per-token input embeddings are all differentiable leaves.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Graph
from .params import Hyperparams, ModelParams, CLASSIFIER

NEG_MASK = -1e9  # additive attention mask; large but finite


class ContextOverflowError(Exception):
    """Sequence longer than the model's context window."""


@dataclass(frozen=True)
class ForwardGraph:
    graph: Graph
    seq_len: int
    logits: int
    log_probs: int  # log_softmax node: (L, V), or (1, C) for classifiers


_CACHE: dict[tuple, ForwardGraph] = {}


def build_forward_graph(hp: Hyperparams, seq_len: int, causal: bool) -> ForwardGraph:
    key = (hp, seq_len, causal)
    if key in _CACHE:
        return _CACHE[key]
    fg = build_fresh_forward_graph(hp, seq_len, causal)
    _CACHE[key] = fg
    return fg


def build_fresh_forward_graph(hp: Hyperparams, seq_len: int, causal: bool,
                              graph: Graph | None = None,
                              suffix: str = "") -> ForwardGraph:
    """Uncached variant; callers may append further nodes to the graph.

    ``suffix`` renames every leaf, so several forward passes can share one
    graph (each pass binds its own leaf values).
    """
    g = graph if graph is not None else Graph()
    d, dh = hp.width, hp.head_dim
    emb = g.leaf((seq_len, d), "emb" + suffix)
    pos = g.leaf((seq_len, d), "pos" + suffix)
    x = g.add(emb, pos)

    if causal:
        mask = np.triu(np.full((seq_len, seq_len), NEG_MASK), k=1)
    else:
        mask = np.zeros((seq_len, seq_len))
    mask_c = g.const(mask)
    scale_c = g.const(1.0 / np.sqrt(dh))

    def wleaf(shape, name: str) -> int:
        return g.leaf(shape, name + suffix)

    def affine_ln(xid: int, gname: str, bname: str) -> int:
        h = g.layer_norm(xid)
        h = g.mul(h, wleaf((d,), gname))
        return g.add(h, wleaf((d,), bname))

    for i in range(hp.layers):
        p = f"blk{i}."
        h = affine_ln(x, p + "ln1.g", p + "ln1.b")
        attn = None
        for hd in range(hp.heads):
            q = g.matmul(h, wleaf((d, dh), p + f"wq{hd}"))
            k = g.matmul(h, wleaf((d, dh), p + f"wk{hd}"))
            v = g.matmul(h, wleaf((d, dh), p + f"wv{hd}"))
            s = g.mul(g.matmul(q, g.transpose(k)), scale_c)
            s = g.add(s, mask_c)
            a = g.softmax(s)
            o = g.matmul(g.matmul(a, v), wleaf((dh, d), p + f"wo{hd}"))
            attn = o if attn is None else g.add(attn, o)
        x = g.add(x, attn)

        h2 = affine_ln(x, p + "ln2.g", p + "ln2.b")
        u = g.add(g.matmul(h2, wleaf((d, hp.mlp_hidden), p + "mlp.w1")),
                  wleaf((hp.mlp_hidden,), p + "mlp.b1"))
        y = g.add(g.matmul(g.gelu(u), wleaf((hp.mlp_hidden, d), p + "mlp.w2")),
                  wleaf((d,), p + "mlp.b2"))
        x = g.add(x, y)

    xf = affine_ln(x, "lnf.g", "lnf.b")
    if hp.kind == CLASSIFIER:
        pool = g.matmul(g.const(np.full((1, seq_len), 1.0 / seq_len)), xf)
        logits = g.add(g.matmul(pool, wleaf((d, hp.n_classes), "head.w")),
                       wleaf((hp.n_classes,), "head.b"))
    else:
        logits = g.add(g.matmul(xf, wleaf((d, hp.vocab_size), "out.w")),
                       wleaf((hp.vocab_size,), "out.b"))
    lsm = g.log_softmax(logits)

    return ForwardGraph(graph=g, seq_len=seq_len, logits=logits, log_probs=lsm)


def check_context(hp: Hyperparams, length: int) -> None:
    if length > hp.context_len:
        raise ContextOverflowError(
            f"sequence length {length} exceeds context {hp.context_len}")
    if length < 1:
        raise ValueError("sequence must be non-empty")


def embed_tokens(params: ModelParams, tokens) -> np.ndarray:
    """Token-embedding rows for a sequence (positional added in-graph)."""
    ids = np.asarray(tokens, dtype=int)
    if ids.size and (ids.min() < 0 or ids.max() >= params.hyper.vocab_size):
        raise ValueError("token index out of vocab range")
    return params.weights["emb"][ids]


def leaf_values(params: ModelParams, tokens) -> dict[str, np.ndarray]:
    """Leaf bindings for a forward pass over concrete tokens."""
    L = len(tokens)
    check_context(params.hyper, L)
    vals = {name: w for name, w in params.weights.items()
            if name not in ("emb", "pos")}
    vals["emb"] = embed_tokens(params, tokens)
    vals["pos"] = params.weights["pos"][:L]
    return vals
