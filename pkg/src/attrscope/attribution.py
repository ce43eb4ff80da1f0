"""Contract-dispatched attribution: Integrated Gradients with held-fixed
path semantics, gradient-times-input, occlusion, and stage perturbation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, evaluate, grad
from .contract import (
    CLASS_LOG_PROB, OUTPUT_LOG_PROB, SPAN_LOG_PROB, STAGE, STAGE_DELTA,
    STATE_COMMITMENT, STATE_LOG_PROB, TOKEN_LOG_PROB,
    PREFIX_TOKEN, PROMPT_TOKEN,
    AttributionContract, ContractError, FeatureRef, canonical_id, validate,
)
from .models import (
    InfeasiblePerturbationError, ModelParams, PromptedInstance,
    StagePerturbation, classifier_log_prob, instance_digest, run_perturbed_chain,
    span_log_prob, state_log_prob, token_log_prob, trajectory_score,
)
from .models.transformer import build_fresh_forward_graph, check_context


class StageScoreError(ContractError):
    """stage_delta is not a single differentiable scalar; use stage_attribution."""


@dataclass(frozen=True)
class BaselinePolicy:
    kind: str  # pad_token | mask_token | zero_embedding

    def __post_init__(self):
        if self.kind not in ("pad_token", "mask_token", "zero_embedding"):
            raise ValueError(f"unknown baseline policy {self.kind!r}")

    def token_id(self, params: ModelParams) -> int:
        if self.kind == "pad_token":
            return params.vocab.pad
        if self.kind == "mask_token":
            return params.vocab.mask
        raise ValueError("zero_embedding has no token form")

    def embedding(self, params: ModelParams) -> np.ndarray:
        if self.kind == "zero_embedding":
            return np.zeros(params.hyper.width)
        return params.weights["emb"][self.token_id(params)].copy()


PAD_BASELINE = BaselinePolicy("pad_token")
MASK_BASELINE = BaselinePolicy("mask_token")
ZERO_BASELINE = BaselinePolicy("zero_embedding")


@dataclass(frozen=True)
class AttributionMap:
    entries: tuple[tuple[FeatureRef, float | None], ...]  # None = infeasible
    contract_id: str
    method: tuple[tuple[str, object], ...]  # sorted (key, value) pairs
    model_id: str
    instance_digest: str
    seed: int

    def __post_init__(self):
        for ref, score in self.entries:
            if score is not None and not np.isfinite(score):
                raise ValueError(f"non-finite attribution for {ref.label()}")

    def scores(self) -> dict[FeatureRef, float | None]:
        return dict(self.entries)

    def argmax_ref(self) -> FeatureRef:
        finite = [(ref, s) for ref, s in self.entries if s is not None]
        if not finite:
            raise ValueError("map has no finite entries")
        return max(finite, key=lambda e: (e[1], e[0]))[0]


def _method_desc(**kw) -> tuple[tuple[str, object], ...]:
    return tuple(sorted(kw.items()))


# -- differentiable score binding ----------------------------------------


@dataclass
class BoundScore:
    """A contract's score as a re-evaluable graph plus the feature geometry.

    ``feature_rows`` maps every token-kind FeatureRef of the instance (not
    just the eligible ones) to the embedding rows it occupies, so callers
    can move any subset of features along a path while everything else
    stays at its actual value.
    """
    graph: Graph
    scalar: int
    actual: dict[str, np.ndarray]
    feature_rows: dict[FeatureRef, tuple[tuple[str, int], ...]]

    def value(self, leaf_values: dict[str, np.ndarray] | None = None) -> float:
        vals = evaluate(self.graph, leaf_values or self.actual)
        return float(vals[self.scalar])

    def with_rows(self, rows: dict[FeatureRef, np.ndarray]) -> dict[str, np.ndarray]:
        """Leaf values with the given refs' embedding rows replaced."""
        out = dict(self.actual)
        touched: dict[str, np.ndarray] = {}
        for ref, vec in rows.items():
            for leaf, row in self.feature_rows[ref]:
                if leaf not in touched:
                    touched[leaf] = out[leaf].copy()
                    out[leaf] = touched[leaf]
                touched[leaf][row] = vec
        return out


def _weight_leaves(params: ModelParams, suffix: str = "") -> dict[str, np.ndarray]:
    return {name + suffix: w for name, w in params.weights.items()
            if name not in ("emb", "pos")}


def _emb_rows(params: ModelParams, tokens) -> np.ndarray:
    return params.weights["emb"][np.asarray(tokens, dtype=int)]


def bind_score(params: ModelParams, instance: PromptedInstance,
               contract: AttributionContract) -> BoundScore:
    """Build the contract's score graph over the instance's embeddings."""
    hp = params.hyper
    n = len(instance.prompt)
    kind = contract.score_kind

    if kind == STAGE_DELTA:
        raise StageScoreError("stage_delta has no single differentiable scalar")

    if kind in (TOKEN_LOG_PROB, SPAN_LOG_PROB):
        gen = list(instance.generation)
        if kind == TOKEN_LOG_PROB:
            t = contract.target[1]
            tokens = list(instance.prompt) + gen[: t - 1]
            check_context(hp, len(tokens))
            fg = build_fresh_forward_graph(hp, len(tokens), causal=True)
            scalar = fg.graph.pick(fg.log_probs, (len(tokens) - 1, gen[t - 1]))
        else:
            tokens = list(instance.prompt) + gen
            check_context(hp, len(tokens))
            fg = build_fresh_forward_graph(hp, len(tokens), causal=True)
            mask = np.zeros((len(tokens), hp.vocab_size))
            for i, tok in enumerate(gen):
                mask[n + i - 1, tok] = 1.0
            scalar = fg.graph.sum_all(fg.graph.mul(fg.log_probs, fg.graph.const(mask)))
        actual = _weight_leaves(params)
        actual["emb"] = _emb_rows(params, tokens)
        actual["pos"] = params.weights["pos"][: len(tokens)]
        rows: dict[FeatureRef, tuple[tuple[str, int], ...]] = {}
        for i in range(n):
            rows[FeatureRef(PROMPT_TOKEN, i)] = (("emb", i),)
        for i in range(len(tokens) - n):
            rows[FeatureRef(PREFIX_TOKEN, i)] = (("emb", n + i),)
        return BoundScore(graph=fg.graph, scalar=scalar, actual=actual,
                          feature_rows=rows)

    if kind == STATE_LOG_PROB:
        traj = instance.trajectory
        t = contract.target[1]
        state = traj.state_tokens(t, params.vocab.mask)
        tokens = list(instance.prompt) + state
        check_context(hp, len(tokens))
        fg = build_fresh_forward_graph(hp, len(tokens), causal=False)
        mask = np.zeros((len(tokens), hp.vocab_size))
        for s in range(traj.response_len):
            if traj.commit_steps[s] == t:
                mask[n + s, traj.commit_tokens[s]] = 1.0
        scalar = fg.graph.sum_all(fg.graph.mul(fg.log_probs, fg.graph.const(mask)))
        actual = _weight_leaves(params)
        actual["emb"] = _emb_rows(params, tokens)
        actual["pos"] = params.weights["pos"][: len(tokens)]
        rows = {}
        for i in range(n):
            rows[FeatureRef(PROMPT_TOKEN, i)] = (("emb", i),)
        for s in range(traj.response_len):
            if traj.commit_steps[s] > t:
                ref = FeatureRef(STATE_COMMITMENT, traj.commit_steps[s], slot=s)
                rows[ref] = (("emb", n + s),)
        return BoundScore(graph=fg.graph, scalar=scalar, actual=actual,
                          feature_rows=rows)

    if kind == OUTPUT_LOG_PROB:
        traj = instance.trajectory
        g = Graph()
        total = None
        actual: dict[str, np.ndarray] = {}
        prompt_rows: dict[int, list[tuple[str, int]]] = {i: [] for i in range(n)}
        commit_rows: dict[FeatureRef, list[tuple[str, int]]] = {}
        for t in range(traj.num_steps, 0, -1):
            slots = [s for s in range(traj.response_len)
                     if traj.commit_steps[s] == t]
            if not slots:
                continue
            suffix = f"@{t}"
            tokens = list(instance.prompt) + traj.state_tokens(t, params.vocab.mask)
            check_context(hp, len(tokens))
            fg = build_fresh_forward_graph(hp, len(tokens), causal=False,
                                           graph=g, suffix=suffix)
            mask = np.zeros((len(tokens), hp.vocab_size))
            for s in slots:
                mask[n + s, traj.commit_tokens[s]] = 1.0
            term = g.sum_all(g.mul(fg.log_probs, g.const(mask)))
            total = term if total is None else g.add(total, term)
            actual.update(_weight_leaves(params, suffix))
            actual["emb" + suffix] = _emb_rows(params, tokens)
            actual["pos" + suffix] = params.weights["pos"][: len(tokens)]
            for i in range(n):
                prompt_rows[i].append(("emb" + suffix, i))
            for s in range(traj.response_len):
                if traj.commit_steps[s] > t:
                    ref = FeatureRef(STATE_COMMITMENT, traj.commit_steps[s], slot=s)
                    commit_rows.setdefault(ref, []).append(("emb" + suffix, n + s))
        rows = {FeatureRef(PROMPT_TOKEN, i): tuple(r) for i, r in prompt_rows.items()}
        rows.update({ref: tuple(r) for ref, r in commit_rows.items()})
        return BoundScore(graph=g, scalar=total, actual=actual, feature_rows=rows)

    if kind == CLASS_LOG_PROB:
        tokens = list(instance.prompt)
        check_context(hp, len(tokens))
        fg = build_fresh_forward_graph(hp, len(tokens), causal=False)
        scalar = fg.graph.pick(fg.log_probs, (0, contract.target[1]))
        actual = _weight_leaves(params)
        actual["emb"] = _emb_rows(params, tokens)
        actual["pos"] = params.weights["pos"][: len(tokens)]
        rows = {FeatureRef(PROMPT_TOKEN, i): (("emb", i),) for i in range(n)}
        return BoundScore(graph=fg.graph, scalar=scalar, actual=actual,
                          feature_rows=rows)

    raise ContractError(f"cannot bind score kind {kind!r}")


# -- score dispatch -------------------------------------------------------


def _check(contract: AttributionContract, params: ModelParams,
           instance: PromptedInstance) -> None:
    violations = validate(contract, instance)
    if violations:
        raise ContractError("; ".join(violations))
    kind_map = {"autoregressive": "autoregressive",
                "masked_diffusion": "diffusion",
                "classifier": "classifier"}
    if kind_map[params.kind] != contract.process:
        raise ContractError(
            f"model kind {params.kind} does not match contract process {contract.process}")


def score(contract: AttributionContract, params: ModelParams,
          instance: PromptedInstance) -> float:
    """Evaluate the contract's score S on the (possibly perturbed) instance."""
    _check(contract, params, instance)
    kind = contract.score_kind
    if kind == TOKEN_LOG_PROB:
        t = contract.target[1]
        gen = list(instance.generation)
        return token_log_prob(params, instance.prompt, gen[: t - 1], gen[t - 1])
    if kind == SPAN_LOG_PROB:
        return span_log_prob(params, instance.prompt, instance.generation)
    if kind == STATE_LOG_PROB:
        return state_log_prob(params, instance.prompt, instance.trajectory,
                              contract.target[1])
    if kind == OUTPUT_LOG_PROB:
        return trajectory_score(params, instance.prompt, instance.trajectory)
    if kind == CLASS_LOG_PROB:
        return classifier_log_prob(params, instance.prompt, contract.target[1])
    raise StageScoreError(
        "stage_delta is not a single scalar; use stage_attribution")


# -- methods --------------------------------------------------------------


def integrated_gradients(params: ModelParams, instance: PromptedInstance,
                         contract: AttributionContract,
                         baseline: BaselinePolicy = PAD_BASELINE,
                         steps: int = 64) -> AttributionMap:
    """Midpoint-Riemann IG along the straight embedding path; features in
    the held-fixed set and all non-eligible context stay at their actual
    values at every path point."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check(contract, params, instance)
    bs = bind_score(params, instance, contract)
    base_vec = baseline.embedding(params)
    eligible = contract.eligible

    accum = {ref: None for ref in eligible}
    for k in range(1, steps + 1):
        alpha = (k - 0.5) / steps
        rows = {}
        for ref in eligible:
            leaf, row = bs.feature_rows[ref][0]
            e = bs.actual[leaf][row]
            rows[ref] = base_vec + alpha * (e - base_vec)
        leaf_vals = bs.with_rows(rows)
        grads = grad(bs.graph, bs.scalar, leaf_vals)
        for ref in eligible:
            gsum = None
            for leaf, row in bs.feature_rows[ref]:
                grow = grads[leaf][row]
                gsum = grow.copy() if gsum is None else gsum + grow
            accum[ref] = gsum if accum[ref] is None else accum[ref] + gsum

    entries = []
    for ref in eligible:
        leaf, row = bs.feature_rows[ref][0]
        e = bs.actual[leaf][row]
        avg = accum[ref] / steps
        entries.append((ref, float(np.dot(e - base_vec, avg))))
    return AttributionMap(
        entries=tuple(entries), contract_id=canonical_id(contract).digest,
        method=_method_desc(name="ig", steps=steps, baseline=baseline.kind),
        model_id=params.model_id, instance_digest=instance_digest(instance),
        seed=instance.seed)


def baseline_endpoint_score(params: ModelParams, instance: PromptedInstance,
                            contract: AttributionContract,
                            baseline: BaselinePolicy) -> float:
    """S with every eligible feature at the baseline embedding (held-fixed
    and context at actual values): the completeness reference point."""
    bs = bind_score(params, instance, contract)
    base_vec = baseline.embedding(params)
    rows = {ref: base_vec for ref in contract.eligible}
    return bs.value(bs.with_rows(rows))


def grad_times_input(params: ModelParams, instance: PromptedInstance,
                     contract: AttributionContract) -> AttributionMap:
    _check(contract, params, instance)
    bs = bind_score(params, instance, contract)
    grads = grad(bs.graph, bs.scalar, bs.actual)
    entries = []
    for ref in contract.eligible:
        total = 0.0
        for leaf, row in bs.feature_rows[ref]:
            total += float(np.dot(bs.actual[leaf][row], grads[leaf][row]))
        entries.append((ref, total))
    return AttributionMap(
        entries=tuple(entries), contract_id=canonical_id(contract).digest,
        method=_method_desc(name="grad_x_input"),
        model_id=params.model_id, instance_digest=instance_digest(instance),
        seed=instance.seed)


def occlusion(params: ModelParams, instance: PromptedInstance,
              contract: AttributionContract,
              baseline: BaselinePolicy = PAD_BASELINE) -> AttributionMap:
    """S(actual) - S(feature's token replaced by the baseline token)."""
    if baseline.kind == "zero_embedding":
        raise ValueError("occlusion works in token space; use pad or mask baseline")
    _check(contract, params, instance)
    bs = bind_score(params, instance, contract)
    base_vec = baseline.embedding(params)
    s_actual = bs.value()
    entries = []
    for ref in contract.eligible:
        s_occ = bs.value(bs.with_rows({ref: base_vec}))
        entries.append((ref, s_actual - s_occ))
    return AttributionMap(
        entries=tuple(entries), contract_id=canonical_id(contract).digest,
        method=_method_desc(name="occlusion", baseline=baseline.kind),
        model_id=params.model_id, instance_digest=instance_digest(instance),
        seed=instance.seed)


def stage_attribution(params: ModelParams, instance: PromptedInstance,
                      contract: AttributionContract,
                      pert_kind: str, commit_count: int | None = None,
                      temperature: float = 1.0) -> AttributionMap:
    """Per-stage score deltas from one-stage perturbed chain re-runs.

    Infeasible stages get a None entry rather than a number."""
    _check(contract, params, instance)
    if contract.score_kind != STAGE_DELTA:
        raise ContractError("stage_attribution needs a stage_delta contract")
    traj = instance.trajectory
    base = trajectory_score(params, instance.prompt, traj)
    plan = traj.commit_plan()
    entries = []
    for ref in contract.eligible:
        t = ref.index
        count = plan[t] if (pert_kind == "noise_schedule" and commit_count is None) \
            else commit_count
        pert = StagePerturbation(stage=t, kind=pert_kind, commit_count=count,
                                 temperature=temperature)
        try:
            _, perturbed = run_perturbed_chain(params, instance.prompt, traj, pert)
            entries.append((ref, base - perturbed))
        except InfeasiblePerturbationError:
            entries.append((ref, None))
    return AttributionMap(
        entries=tuple(entries), contract_id=canonical_id(contract).digest,
        method=_method_desc(name="stage", kind=pert_kind,
                            commit_count=commit_count, temperature=temperature),
        model_id=params.model_id, instance_digest=instance_digest(instance),
        seed=instance.seed)


def prefix_mass(attr_map: AttributionMap) -> float:
    """Fraction of absolute attribution mass on generated-prefix features."""
    kinds = {ref.kind for ref, _ in attr_map.entries}
    if STAGE in kinds:
        raise ValueError("prefix_mass is undefined for stage maps")
    total = 0.0
    prefix = 0.0
    for ref, s in attr_map.entries:
        if s is None:
            continue
        total += abs(s)
        if ref.kind == PREFIX_TOKEN:
            prefix += abs(s)
    if total == 0.0:
        return 0.0
    return prefix / total
