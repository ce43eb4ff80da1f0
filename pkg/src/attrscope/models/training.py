"""Plain SGD training with cosine-decayed learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Graph, NumericError, evaluate, grad
from .params import (
    AR, CLASSIFIER, DIFFUSION, Hyperparams, ModelParams, init_params,
)
from .transformer import build_fresh_forward_graph, check_context
from .vocab import Vocab


class TrainingDiverged(Exception):
    """Loss became non-finite; aborts with the offending step recorded."""


@dataclass(frozen=True)
class LossGraph:
    graph: Graph
    loss: int  # scalar node: -sum(target_mask * log_probs)


_LOSS_CACHE: dict[tuple, LossGraph] = {}


def _loss_graph(hp: Hyperparams, seq_len: int) -> LossGraph:
    key = (hp, seq_len)
    if key in _LOSS_CACHE:
        return _LOSS_CACHE[key]
    causal = hp.kind == AR
    fg = build_fresh_forward_graph(hp, seq_len, causal)
    g = fg.graph
    if hp.kind == CLASSIFIER:
        mask_shape = (1, hp.n_classes)
    else:
        mask_shape = (seq_len, hp.vocab_size)
    mask = g.leaf(mask_shape, "target_mask", differentiable=False)
    loss = g.mul(g.sum_all(g.mul(fg.log_probs, mask)), g.const(-1.0))
    lg = LossGraph(graph=g, loss=loss)
    _LOSS_CACHE[key] = lg
    return lg


def _example_inputs(params: ModelParams, example, rng: np.random.Generator):
    """Tokens and target mask for one training example of the model's kind."""
    hp = params.hyper
    if hp.kind == AR:
        prompt, target = example
        tokens = list(prompt) + list(target)
        mask = np.zeros((len(tokens), hp.vocab_size))
        for i, tok in enumerate(target):
            mask[len(prompt) + i - 1, tok] = 1.0
        return tokens, mask
    if hp.kind == DIFFUSION:
        prompt, response = example
        n = len(prompt)
        tokens = list(prompt) + list(response)
        p_mask = float(rng.uniform(0.15, 1.0))
        masked = [s for s in range(len(response)) if rng.uniform() < p_mask]
        if not masked:
            masked = [int(rng.integers(len(response)))]
        mask = np.zeros((len(tokens), hp.vocab_size))
        for s in masked:
            tokens[n + s] = params.vocab.mask
            mask[n + s, response[s]] = 1.0
        return tokens, mask
    # classifier
    tokens, label = example
    mask = np.zeros((1, hp.n_classes))
    mask[0, label] = 1.0
    return list(tokens), mask


def _step_grads(params: ModelParams, tokens, mask) -> tuple[float, dict[str, np.ndarray]]:
    hp = params.hyper
    check_context(hp, len(tokens))
    lg = _loss_graph(hp, len(tokens))
    leaf_vals = {name: w for name, w in params.weights.items()
                 if name not in ("emb", "pos")}
    ids = np.asarray(tokens, dtype=int)
    leaf_vals["emb"] = params.weights["emb"][ids]
    leaf_vals["pos"] = params.weights["pos"][:len(tokens)]
    leaf_vals["target_mask"] = mask
    vals = evaluate(lg.graph, leaf_vals)
    grads = grad(lg.graph, lg.loss, leaf_vals, forward=vals)

    full: dict[str, np.ndarray] = {}
    for name, gval in grads.items():
        if name == "emb":
            ge = np.zeros_like(params.weights["emb"])
            np.add.at(ge, ids, gval)
            full["emb"] = ge
        elif name == "pos":
            gp = np.zeros_like(params.weights["pos"])
            gp[:len(tokens)] = gval
            full["pos"] = gp
        else:
            full[name] = gval
    return float(vals[lg.loss]), full


def _mean_loss(params: ModelParams, corpus, seed: int) -> float:
    rng = np.random.default_rng(seed)  # fixed seed: checkpoints comparable
    total = 0.0
    for example in corpus:
        tokens, mask = _example_inputs(params, example, rng)
        lg = _loss_graph(params.hyper, len(tokens))
        leaf_vals = {name: w for name, w in params.weights.items()
                     if name not in ("emb", "pos")}
        ids = np.asarray(tokens, dtype=int)
        leaf_vals["emb"] = params.weights["emb"][ids]
        leaf_vals["pos"] = params.weights["pos"][:len(tokens)]
        leaf_vals["target_mask"] = mask
        total += float(evaluate(lg.graph, leaf_vals)[lg.loss])
    return total / len(corpus)


@dataclass
class TrainResult:
    params: ModelParams
    final_loss: float
    checkpoint_losses: list[float] = field(default_factory=list)


def train(kind: str, corpus, vocab: Vocab, hp: Hyperparams, seed: int, *,
          steps: int = 2000, lr: float = 0.5, batch_size: int = 8,
          checkpoints: int = 5, lr_floor_frac: float = 0.02) -> TrainResult:
    """SGD with cosine decay; deterministic given (corpus, hp, seed)."""
    if not corpus:
        raise ValueError("corpus must be non-empty")
    if hp.kind != kind:
        raise ValueError("hyperparams kind disagrees with requested kind")
    rng = np.random.default_rng(seed)
    params = init_params(hp, vocab, seed)
    eval_corpus = list(corpus[: min(64, len(corpus))])
    checkpoint_at = {round(i * steps / max(1, checkpoints - 1))
                     for i in range(checkpoints)}
    losses: list[float] = []
    last_loss = math.nan

    for step in range(steps + 1):
        if step in checkpoint_at:
            losses.append(_mean_loss(params, eval_corpus, seed=seed + 1))
        if step == steps:
            break
        lr_t = max(lr * lr_floor_frac,
                   0.5 * lr * (1.0 + math.cos(math.pi * step / steps)))
        idx = rng.integers(0, len(corpus), size=batch_size)
        acc: dict[str, np.ndarray] = {}
        batch_loss = 0.0
        try:
            for j in idx:
                tokens, mask = _example_inputs(params, corpus[int(j)], rng)
                loss, grads = _step_grads(params, tokens, mask)
                batch_loss += loss
                for name, gval in grads.items():
                    if name in acc:
                        acc[name] += gval
                    else:
                        acc[name] = gval.copy()
        except NumericError as exc:
            raise TrainingDiverged(
                f"non-finite loss at step {step} (last finite: {last_loss})") from exc
        last_loss = batch_loss / batch_size
        new_weights = dict(params.weights)
        for name, gval in acc.items():
            new_weights[name] = params.weights[name] - (lr_t / batch_size) * gval
        params = ModelParams(hyper=hp, vocab=params.vocab, weights=new_weights)

    return TrainResult(params=params, final_loss=losses[-1],
                       checkpoint_losses=losses)
