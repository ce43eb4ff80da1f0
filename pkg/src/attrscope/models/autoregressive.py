"""Autoregressive scores and decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import evaluate
from .params import ModelParams, AR
from .transformer import build_forward_graph, check_context, leaf_values
from .instrumentation import bump


def _require_ar(params: ModelParams) -> None:
    if params.kind != AR:
        raise ValueError(f"operation requires an autoregressive model, got {params.kind}")


def _log_prob_rows(params: ModelParams, tokens: list[int]) -> np.ndarray:
    fg = build_forward_graph(params.hyper, len(tokens), causal=True)
    vals = evaluate(fg.graph, leaf_values(params, tokens))
    return vals[fg.log_probs]


def ar_next_log_probs(params: ModelParams, prompt, prefix) -> np.ndarray:
    """log p(. | prompt, prefix): a vector over the vocabulary."""
    _require_ar(params)
    tokens = list(prompt) + list(prefix)
    check_context(params.hyper, len(tokens))
    return _log_prob_rows(params, tokens)[-1]


def token_log_prob(params: ModelParams, prompt, prefix, target: int) -> float:
    return float(ar_next_log_probs(params, prompt, prefix)[target])


def span_log_prob(params: ModelParams, prompt, span) -> float:
    """log p(span | prompt) = sum of per-token conditionals, one forward pass."""
    _require_ar(params)
    span = list(span)
    if not span:
        raise ValueError("span must be non-empty")
    tokens = list(prompt) + span
    check_context(params.hyper, len(tokens))
    rows = _log_prob_rows(params, tokens)
    n = len(prompt)
    return float(sum(rows[n + i - 1, span[i]] for i in range(len(span))))


@dataclass(frozen=True)
class GreedyPolicy:
    name: str = "greedy"


@dataclass(frozen=True)
class SamplePolicy:
    temperature: float = 1.0
    name: str = "sample"


def ar_generate(params: ModelParams, prompt, max_len: int, policy, seed: int) -> list[int]:
    """Decode until EOS or max_len; deterministic given (params, inputs, seed)."""
    _require_ar(params)
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    bump("ar_generate")
    rng = np.random.default_rng(seed)
    out: list[int] = []
    for _ in range(max_len):
        check_context(params.hyper, len(prompt) + len(out) + 1)
        logp = ar_next_log_probs(params, prompt, out)
        if isinstance(policy, GreedyPolicy):
            tok = int(np.argmax(logp))
        elif isinstance(policy, SamplePolicy):
            scaled = logp / policy.temperature
            p = np.exp(scaled - scaled.max())
            p /= p.sum()
            tok = int(rng.choice(len(p), p=p))
        else:
            raise ValueError(f"unknown decode policy {policy!r}")
        out.append(tok)
        if tok == params.vocab.eos:
            break
    return out
