"""Masked-diffusion generation: confidence-ordered unmasking, state scores,
and stage-perturbed chain re-runs.

Step indexing: stage t in {1..T} maps state z_t to z_{t-1}; higher t runs
earlier. A slot with commit step u is present (committed) in every state
z_t with t < u.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import evaluate
from .params import ModelParams, DIFFUSION
from .transformer import build_forward_graph, check_context, leaf_values
from .instrumentation import bump

ABLATE = "ablate"
NOISE_SCHEDULE = "noise_schedule"
SUBSTITUTE_STEP = "substitute_step"
PERT_KINDS = (ABLATE, NOISE_SCHEDULE, SUBSTITUTE_STEP)


class InfeasiblePerturbationError(Exception):
    """The requested stage perturbation cannot keep the chain completable."""


@dataclass(frozen=True)
class StagePerturbation:
    stage: int
    kind: str
    commit_count: int | None = None   # noise_schedule replacement k
    temperature: float = 1.0          # substitute_step decode temperature

    def __post_init__(self):
        if self.kind not in PERT_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == NOISE_SCHEDULE and self.commit_count is None:
            raise ValueError("noise_schedule perturbation needs commit_count")


@dataclass(frozen=True)
class DenoisingTrajectory:
    num_steps: int
    response_len: int
    commit_tokens: tuple[int, ...]  # final token per slot
    commit_steps: tuple[int, ...]   # stage (1..T) at which each slot committed
    seed: int

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if len(self.commit_tokens) != self.response_len:
            raise ValueError("commit_tokens length mismatch")
        if len(self.commit_steps) != self.response_len:
            raise ValueError("commit_steps length mismatch")
        for u in self.commit_steps:
            if not (1 <= u <= self.num_steps):
                raise ValueError(f"commit step {u} outside 1..{self.num_steps}")

    @property
    def final_output(self) -> tuple[int, ...]:
        return self.commit_tokens

    def state_tokens(self, t: int, mask_id: int) -> list[int]:
        """Slot tokens of state z_t; uncommitted slots carry the MASK id."""
        if not (0 <= t <= self.num_steps):
            raise ValueError(f"state index {t} outside 0..{self.num_steps}")
        return [tok if step > t else mask_id
                for tok, step in zip(self.commit_tokens, self.commit_steps)]

    def states(self, mask_id: int) -> list[list[int]]:
        """z_T .. z_0 as token lists."""
        return [self.state_tokens(t, mask_id) for t in range(self.num_steps, -1, -1)]

    def commit_plan(self) -> dict[int, int]:
        plan = {t: 0 for t in range(self.num_steps, 0, -1)}
        for u in self.commit_steps:
            plan[u] += 1
        return plan


def _require_diffusion(params: ModelParams) -> None:
    if params.kind != DIFFUSION:
        raise ValueError(f"operation requires a masked-diffusion model, got {params.kind}")


def masked_log_probs(params: ModelParams, tokens) -> np.ndarray:
    """Bidirectional per-position log-probabilities, shape (L, vocab)."""
    _require_diffusion(params)
    check_context(params.hyper, len(tokens))
    fg = build_forward_graph(params.hyper, len(tokens), causal=False)
    vals = evaluate(fg.graph, leaf_values(params, tokens))
    return vals[fg.log_probs]


def default_commit_plan(response_len: int, num_steps: int) -> dict[int, int]:
    """k_t = ceil(remaining / stages_left), walking t = T..1."""
    if not (1 <= num_steps <= response_len):
        raise ValueError("need 1 <= num_steps <= response_len")
    plan = {}
    remaining = response_len
    for t in range(num_steps, 0, -1):
        k = -(-remaining // t)
        plan[t] = k
        remaining -= k
    return plan


def run_chain(params: ModelParams, prompt, response_len: int,
               plan: dict[int, int], seed: int,
               substitute: StagePerturbation | None = None,
               forced: dict[int, dict[int, int]] | None = None) -> DenoisingTrajectory:
    """Execute the unmasking chain under an explicit per-stage commit plan.

    ``forced`` optionally pins {stage: {slot: token}} commitments, used by
    state-level evaluation to replay a chain with substituted commitments.
    """
    bump("diffusion_chain")
    num_steps = max(plan)
    if sum(plan.values()) != response_len:
        raise ValueError("commit plan does not cover the response")
    n = len(prompt)
    check_context(params.hyper, n + response_len)
    mask_id = params.vocab.mask
    rng = np.random.default_rng(seed)

    slots = [mask_id] * response_len
    commit_tokens = [0] * response_len
    commit_steps = [0] * response_len
    committed = [False] * response_len

    for t in range(num_steps, 0, -1):
        k = plan.get(t, 0)
        if k == 0:
            continue
        open_slots = [s for s in range(response_len) if not committed[s]]
        if k > len(open_slots):
            raise ValueError(f"stage {t} commits {k} but only {len(open_slots)} open")
        rows = masked_log_probs(params, list(prompt) + slots)
        # confidence = model's max log-prob at the open slot
        ranked = sorted(open_slots, key=lambda s: (-float(rows[n + s].max()), s))
        chosen = ranked[:k]
        stage_forced = (forced or {}).get(t, {})
        for s in sorted(chosen):
            if s in stage_forced:
                tok = stage_forced[s]
            elif substitute is not None and substitute.stage == t:
                logp = rows[n + s] / substitute.temperature
                p = np.exp(logp - logp.max())
                p /= p.sum()
                tok = int(rng.choice(len(p), p=p))
            else:
                tok = int(np.argmax(rows[n + s]))
            slots[s] = tok
            commit_tokens[s] = tok
            commit_steps[s] = t
            committed[s] = True

    return DenoisingTrajectory(num_steps=num_steps, response_len=response_len,
                               commit_tokens=tuple(commit_tokens),
                               commit_steps=tuple(commit_steps), seed=seed)


def diffusion_generate(params: ModelParams, prompt, response_len: int,
                       num_steps: int, seed: int) -> DenoisingTrajectory:
    _require_diffusion(params)
    bump("diffusion_generate")
    plan = default_commit_plan(response_len, num_steps)
    return run_chain(params, prompt, response_len, plan, seed)


def state_log_prob(params: ModelParams, prompt, trajectory: DenoisingTrajectory,
                   t: int) -> float:
    """Sum of log-probs of the tokens committed at stage t, conditioned on z_t."""
    _require_diffusion(params)
    if not (1 <= t <= trajectory.num_steps):
        raise ValueError(f"step {t} outside 1..{trajectory.num_steps}")
    slots = [s for s in range(trajectory.response_len)
             if trajectory.commit_steps[s] == t]
    if not slots:
        return 0.0
    n = len(prompt)
    tokens = list(prompt) + trajectory.state_tokens(t, params.vocab.mask)
    rows = masked_log_probs(params, tokens)
    return float(sum(rows[n + s, trajectory.commit_tokens[s]] for s in slots))


def teacher_forced_score(params: ModelParams, prompt,
                         schedule: DenoisingTrajectory,
                         conditioning: DenoisingTrajectory) -> float:
    """Score ``schedule``'s tokens at their commit stages under another
    chain's conditioning states."""
    _require_diffusion(params)
    if conditioning.num_steps != schedule.num_steps:
        raise ValueError("conditioning chain has a different stage count")
    n = len(prompt)
    mask_id = params.vocab.mask
    total = 0.0
    for t in range(schedule.num_steps, 0, -1):
        slots = [s for s in range(schedule.response_len)
                 if schedule.commit_steps[s] == t]
        if not slots:
            continue
        tokens = list(prompt) + conditioning.state_tokens(t, mask_id)
        rows = masked_log_probs(params, tokens)
        total += float(sum(rows[n + s, schedule.commit_tokens[s]] for s in slots))
    return total


def trajectory_score(params: ModelParams, prompt,
                     trajectory: DenoisingTrajectory) -> float:
    """Realized-trajectory surrogate for log p(y | x)."""
    return teacher_forced_score(params, prompt, trajectory, trajectory)


def perturbed_plan(plan: dict[int, int], pert: StagePerturbation,
                   response_len: int) -> dict[int, int]:
    """Rebalanced commit plan; raises when the chain cannot stay completable."""
    t = pert.stage
    if t not in plan:
        raise ValueError(f"stage {t} not in plan")
    new = dict(plan)
    if pert.kind == SUBSTITUTE_STEP:
        return new

    target = 0 if pert.kind == ABLATE else int(pert.commit_count)
    if target < 0:
        raise InfeasiblePerturbationError("negative commit count")
    remaining_at_t = response_len - sum(k for u, k in plan.items() if u > t)
    if target > remaining_at_t:
        raise InfeasiblePerturbationError(
            f"stage {t} cannot commit {target}; only {remaining_at_t} slots open")
    delta = plan[t] - target  # commits the later stages must absorb
    later = [u for u in range(t - 1, 0, -1)]
    if delta != 0 and not later:
        raise InfeasiblePerturbationError(
            f"stage {t} is the last stage; no later stage can absorb {delta} commits")
    new[t] = target
    if delta > 0:
        base, rem = divmod(delta, len(later))
        for u in later:
            new[u] += base
        # remainder goes to the latest-running stages (lowest indices)
        for u in sorted(later)[:rem]:
            new[u] += 1
    elif delta < 0:
        to_remove = -delta
        # round-robin removal starting from the latest-running stage
        order = sorted(later)
        guard = 0
        while to_remove > 0:
            progressed = False
            for u in order:
                if to_remove == 0:
                    break
                if new[u] > 0:
                    new[u] -= 1
                    to_remove -= 1
                    progressed = True
            if not progressed:
                raise InfeasiblePerturbationError(
                    "later stages have no commits left to remove")
            guard += 1
            if guard > response_len + 1:
                raise InfeasiblePerturbationError("rebalancing did not converge")
    return new


def run_perturbed_chain(params: ModelParams, prompt,
                        trajectory: DenoisingTrajectory,
                        pert: StagePerturbation) -> tuple[DenoisingTrajectory, float]:
    """Re-run the chain with one stage perturbed; return the new trajectory and
    the original output's teacher-forced score under the new chain's states."""
    _require_diffusion(params)
    if not (1 <= pert.stage <= trajectory.num_steps):
        raise ValueError(f"stage {pert.stage} outside 1..{trajectory.num_steps}")
    plan = perturbed_plan(trajectory.commit_plan(), pert, trajectory.response_len)
    substitute = pert if pert.kind == SUBSTITUTE_STEP else None
    new_traj = run_chain(params, prompt, trajectory.response_len, plan,
                          trajectory.seed, substitute=substitute)
    score = teacher_forced_score(params, prompt, trajectory, new_traj)
    return new_traj, score
