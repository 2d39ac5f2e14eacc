"""Decision policies derived from the critic: arm-set masking, exploration
with exact logged propensities, linear and hypervolume scalarization, and
average-cost constraint handling via online dual ascent.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from . import critic as critic_mod
from .critic import CriticModel, SchemaMismatch
from .encoding import EncodedRecord
from .schema import (ExplorationConfig, HypervolumeScalarization,
                     LinearScalarization, ProblemSpec, canonical_json)

ARTIFACT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Scalarization


@dataclass(frozen=True)
class LinearParams:
    weights: np.ndarray  # length k

    def value(self, y: np.ndarray) -> float:
        return float(self.weights @ y)

    def grad(self, y: np.ndarray) -> np.ndarray:
        return self.weights


@dataclass(frozen=True)
class HypervolumeParams:
    reference: np.ndarray  # z, length k
    direction: Optional[np.ndarray] = None  # positive unit vector, or
    # None to sample a fresh direction per decision

    def value(self, y: np.ndarray) -> float:
        if self.direction is None:
            raise ValueError("hypervolume direction not resolved")
        gains = np.maximum(0.0, y - self.reference) / self.direction
        return float(gains.min())

    def grad(self, y: np.ndarray) -> np.ndarray:
        gains = np.maximum(0.0, y - self.reference) / self.direction
        g = np.zeros_like(y)
        j = int(np.argmin(gains))
        if y[j] > self.reference[j]:
            g[j] = 1.0 / self.direction[j]
        return g


ScalarizationParams = Union[LinearParams, HypervolumeParams]


def scalarize(params: ScalarizationParams, y: np.ndarray) -> float:
    """Linear: w.y. Hypervolume: min_i max(0, y_i - z_i) / lambda_i."""
    return params.value(np.asarray(y, dtype=float))


def sample_hv_direction(rng: np.random.Generator, k: int) -> np.ndarray:
    """Uniform direction on the positive unit sphere: |g| / ||g||, g ~ N(0,I).
    Exact zeros are resampled so every component is strictly positive.
    """
    if k < 2:
        raise ValueError("need k >= 2 metrics for a direction")
    while True:
        g = np.abs(rng.standard_normal(k))
        if np.all(g > 0.0):
            return g / np.linalg.norm(g)


# ---------------------------------------------------------------------------
# Constraint handling (dual ascent on the average-cost gap)


@dataclass(frozen=True)
class ConstraintState:
    """Lagrangian state for 'maximize primary subject to avg cost <= C'.

    Costs are kept in natural units (the value the target bounds from
    above). For a maximize-direction metric under a floor constraint the
    cost and target are both negated on construction, so one update rule
    covers every case.
    """

    primary_index: int
    cost_indices: tuple[int, ...]
    targets: np.ndarray  # C, length k-1 (one per cost metric)
    duals: np.ndarray  # lambda >= 0
    step_size: float
    avg_costs: np.ndarray  # running average cost, same space as targets
    decay: float  # gamma for the running average

    def scores(self, predictions: np.ndarray) -> np.ndarray:
        """Lagrangian value per arm: r_hat - lambda . cost_hat."""
        r = predictions[:, self.primary_index]
        # Canonical predictions are all-maximize; natural cost = -canonical.
        costs = -predictions[:, list(self.cost_indices)]
        return r - costs @ self.duals

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "constrained",
                "primary_index": self.primary_index,
                "cost_indices": list(self.cost_indices),
                "targets": self.targets.tolist(),
                "duals": self.duals.tolist(),
                "step_size": self.step_size,
                "avg_costs": self.avg_costs.tolist(),
                "decay": self.decay}


def update_duals(state: ConstraintState,
                 observed_costs: np.ndarray) -> ConstraintState:
    """One dual-ascent step from observed natural costs:
    avg <- (1-gamma) avg + gamma observed; dual <- max(0, dual + eta (avg - C)).
    """
    observed = np.asarray(observed_costs, dtype=float)
    avg = (1.0 - state.decay) * state.avg_costs + state.decay * observed
    duals = np.maximum(0.0, state.duals + state.step_size
                       * (avg - state.targets))
    return replace(state, avg_costs=avg, duals=duals)


def natural_costs(state: ConstraintState,
                  feedback: np.ndarray) -> np.ndarray:
    """Extract the cost components (natural units) from canonical feedback."""
    return -np.asarray(feedback, dtype=float)[list(state.cost_indices)]


ObjectiveState = Union[LinearParams, HypervolumeParams, ConstraintState]


def objective_state_from_config(problem: ProblemSpec) -> ObjectiveState:
    """Initial objective state; hypervolume reference defaults to zeros
    until training derives it from observed feedback minima.
    """
    obj = problem.objective
    names = list(problem.metric_names)
    signs = problem.direction_signs
    k = problem.k
    if obj.mode == "constrained":
        primary_index = names.index(obj.primary_metric)
        cost_indices = []
        targets = []
        for name, target in obj.cost_targets.items():
            i = names.index(name)
            cost_indices.append(i)
            # Natural cost is -canonical; for maximize-direction metrics a
            # floor constraint becomes a negated ceiling.
            targets.append(target if signs[i] < 0 else -target)
        order = np.argsort(cost_indices)
        cost_indices = [cost_indices[i] for i in order]
        targets = [targets[i] for i in order]
        return ConstraintState(
            primary_index=primary_index,
            cost_indices=tuple(cost_indices),
            targets=np.asarray(targets, dtype=float),
            duals=np.zeros(len(targets)),
            step_size=obj.dual_step_size,
            avg_costs=np.zeros(len(targets)),
            decay=obj.cost_average_decay)
    sc = obj.scalarization
    if isinstance(sc, LinearScalarization):
        # Weights are authored against natural metric values; canonical
        # predictions flip minimize metrics, so flip the weights to match.
        w = np.array([sc.weights.get(n, 0.0) * s
                      for n, s in zip(names, signs)])
        return LinearParams(weights=w)
    assert isinstance(sc, HypervolumeScalarization)
    if sc.reference is not None:
        z = np.array([sc.reference.get(n, 0.0) * s
                      for n, s in zip(names, signs)])
    else:
        z = np.zeros(k)
    direction = None
    if sc.direction is not None:
        direction = np.array([sc.direction[n] for n in names])
    return HypervolumeParams(reference=z, direction=direction)


def objective_state_to_dict(state: ObjectiveState) -> dict[str, Any]:
    if isinstance(state, LinearParams):
        return {"kind": "linear", "weights": state.weights.tolist()}
    if isinstance(state, HypervolumeParams):
        return {"kind": "hypervolume",
                "reference": state.reference.tolist(),
                "direction": None if state.direction is None
                else state.direction.tolist()}
    return state.to_dict()


def objective_state_from_dict(obj: dict[str, Any]) -> ObjectiveState:
    kind = obj["kind"]
    if kind == "linear":
        return LinearParams(weights=np.asarray(obj["weights"], dtype=float))
    if kind == "hypervolume":
        direction = obj.get("direction")
        return HypervolumeParams(
            reference=np.asarray(obj["reference"], dtype=float),
            direction=None if direction is None
            else np.asarray(direction, dtype=float))
    if kind == "constrained":
        return ConstraintState(
            primary_index=int(obj["primary_index"]),
            cost_indices=tuple(obj["cost_indices"]),
            targets=np.asarray(obj["targets"], dtype=float),
            duals=np.asarray(obj["duals"], dtype=float),
            step_size=float(obj["step_size"]),
            avg_costs=np.asarray(obj["avg_costs"], dtype=float),
            decay=float(obj["decay"]))
    raise ValueError(f"unknown objective state kind {kind!r}")


def scalarizer_for(state: ObjectiveState, k: int,
                   rng: Optional[np.random.Generator] = None,
                   ) -> ScalarizationParams:
    """A concrete scalarizer for training-side uses (imitation term,
    scalarized CPE). Constrained mode scalarizes to the primary metric.
    """
    if isinstance(state, ConstraintState):
        w = np.zeros(k)
        w[state.primary_index] = 1.0
        return LinearParams(weights=w)
    if isinstance(state, HypervolumeParams) and state.direction is None:
        direction = (sample_hv_direction(rng, k) if rng is not None
                     else np.full(k, 1.0 / np.sqrt(k)))
        return replace(state, direction=direction)
    return state


# ---------------------------------------------------------------------------
# Decisions


@dataclass(frozen=True)
class Decision:
    index: int
    propensity: float  # exact probability the exploration rule assigned
    predictions: np.ndarray  # |arms| x k critic outputs (canonical)
    policy_id: str
    objective_snapshot: dict[str, Any]
    fallback: bool = False
    error: Optional[str] = None


@dataclass(frozen=True)
class Policy:
    """Immutable, versioned decision policy: critic snapshot + exploration
    + objective state + metadata.
    """

    policy_id: str
    critic: CriticModel
    exploration: ExplorationConfig
    objective_state: ObjectiveState
    created_at: float
    format_version: int = ARTIFACT_FORMAT_VERSION

    def __post_init__(self):
        e = self.exploration
        if e.kind == "epsilon_greedy":
            if not e.floor <= e.epsilon_or_temperature <= 1.0:
                raise ValueError("epsilon must lie in [floor, 1]")
        elif e.epsilon_or_temperature <= 0.0:
            raise ValueError("temperature must be > 0")


def _fallback_decision(policy_id: str, n_arms: int, k: int,
                       default_index: int, snapshot: dict[str, Any],
                       error: str) -> Decision:
    return Decision(index=default_index, propensity=1.0,
                    predictions=np.zeros((n_arms, k)), policy_id=policy_id,
                    objective_snapshot=snapshot, fallback=True, error=error)


def choose(policy: Policy, context: EncodedRecord,
           arms: Sequence[EncodedRecord], mask: Sequence[bool],
           default_index: int, rng: np.random.Generator,
           scalarization: Optional[ScalarizationParams] = None,
           constraint_state: Optional[ConstraintState] = None) -> Decision:
    """Score unmasked arms, apply the exploration rule, and record the
    exact selection probability. Any internal failure yields the default
    arm with propensity 1.0 and a fallback flag; this never raises for
    critic or numeric errors.
    """
    n = len(arms)
    if len(mask) != n:
        raise ValueError("mask length must match arms")
    if not 0 <= default_index < n or not mask[default_index]:
        raise ValueError("default_index must be a valid unmasked arm")
    unmasked = [i for i in range(n) if mask[i]]

    state = constraint_state if constraint_state is not None \
        else policy.objective_state
    k = policy.critic.k

    scorer: ObjectiveState = scalarization if scalarization is not None \
        else state
    if isinstance(scorer, HypervolumeParams) and scorer.direction is None:
        scorer = replace(scorer, direction=sample_hv_direction(rng, k))
    snapshot = objective_state_to_dict(scorer)

    try:
        predictions = critic_mod.predict_many(policy.critic, context, arms)
    except (SchemaMismatch, ValueError, IndexError, TypeError) as e:
        return _fallback_decision(policy.policy_id, n, k, default_index,
                                  snapshot, f"critic failure: {e}")
    if not np.all(np.isfinite(predictions)):
        return _fallback_decision(policy.policy_id, n, k, default_index,
                                  snapshot, "non-finite predictions")

    if isinstance(scorer, ConstraintState):
        scores = scorer.scores(predictions)
    else:
        scores = np.array([scorer.value(predictions[i]) for i in range(n)])
    if not np.all(np.isfinite(scores[unmasked])):
        return _fallback_decision(policy.policy_id, n, k, default_index,
                                  snapshot, "non-finite scores")

    e = policy.exploration
    m = len(unmasked)
    # Ties at the argmax break to the lowest index.
    greedy = min(unmasked, key=lambda i: (-scores[i], i))
    if e.kind == "epsilon_greedy":
        eps = e.epsilon_or_temperature
        if m == 1:
            index, propensity = unmasked[0], 1.0
        elif rng.random() < eps:
            index = unmasked[int(rng.integers(m))]
            propensity = (1.0 - eps) * (index == greedy) + eps / m
        else:
            index = greedy
            propensity = (1.0 - eps) + eps / m
    else:  # boltzmann
        tau = e.epsilon_or_temperature
        v = scores[unmasked] / tau
        p = np.exp(v - v.max())
        p /= p.sum()
        j = int(rng.choice(m, p=p))
        index, propensity = unmasked[j], float(p[j])

    return Decision(index=index, propensity=float(propensity),
                    predictions=predictions, policy_id=policy.policy_id,
                    objective_snapshot=snapshot)


# ---------------------------------------------------------------------------
# Pareto frontier sweep


@dataclass(frozen=True)
class SweepEntry:
    direction: np.ndarray
    arm_counts: dict[int, int]  # greedy arm index -> times chosen
    achieved: np.ndarray  # mean predicted metrics of the greedy choices


PredictFn = Callable[[EncodedRecord, EncodedRecord], np.ndarray]


def _as_predict_fn(critic: Union[CriticModel, PredictFn]) -> PredictFn:
    if isinstance(critic, CriticModel):
        return lambda c, a: critic_mod.predict(critic, c, a)
    return critic


def default_reference(predictions: np.ndarray,
                      margin: float = 0.01) -> np.ndarray:
    """Per-metric minimum minus a 1%-of-range margin. The margin keeps
    boundary points strictly above the reference so extreme directions can
    still select them.
    """
    lo = predictions.min(axis=0)
    span = predictions.max(axis=0) - lo
    return lo - margin * np.maximum(span, 1e-6)


def _sweep_directions(k: int, n: int,
                      rng: Optional[np.random.Generator]) -> list[np.ndarray]:
    if k == 2:
        # Deterministic angle grid: even coverage of the quarter circle,
        # endpoints offset half a step so components stay positive.
        angles = (np.arange(n) + 0.5) / n * (np.pi / 2.0)
        return [np.array([np.cos(a), np.sin(a)]) for a in angles]
    if rng is None:
        rng = np.random.default_rng(0)
    return [sample_hv_direction(rng, k) for _ in range(n)]


def pareto_sweep(critic: Union[CriticModel, PredictFn],
                 contexts: Sequence[EncodedRecord],
                 arms: Sequence[EncodedRecord], n_directions: int,
                 rng: Optional[np.random.Generator] = None,
                 reference: Optional[np.ndarray] = None) -> list[SweepEntry]:
    """Greedy hypervolume choices across a direction sweep; recovers the
    achievable metric frontier, including points no linear weighting finds.
    Output sorted by the first metric of the achieved vector.
    """
    if n_directions < 1:
        raise ValueError("n_directions must be >= 1")
    predict_fn = _as_predict_fn(critic)
    preds = np.array([[predict_fn(c, a) for a in arms] for c in contexts])
    k = preds.shape[-1]
    z = default_reference(preds.reshape(-1, k)) if reference is None \
        else np.asarray(reference, dtype=float)

    entries = []
    for direction in _sweep_directions(k, n_directions, rng):
        params = HypervolumeParams(reference=z, direction=direction)
        counts: dict[int, int] = {}
        chosen = np.zeros((len(contexts), k))
        for ci in range(len(contexts)):
            scores = [params.value(preds[ci, ai])
                      for ai in range(len(arms))]
            best = min(range(len(arms)), key=lambda i: (-scores[i], i))
            counts[best] = counts.get(best, 0) + 1
            chosen[ci] = preds[ci, best]
        entries.append(SweepEntry(direction=direction, arm_counts=counts,
                                  achieved=chosen.mean(axis=0)))
    entries.sort(key=lambda e: e.achieved[0])
    return entries


# ---------------------------------------------------------------------------
# Policy artifact (self-contained, versioned file format)


def _policy_core_dict(critic: CriticModel, exploration: ExplorationConfig,
                      objective_state: ObjectiveState,
                      created_at: float) -> dict[str, Any]:
    return {
        "format_version": ARTIFACT_FORMAT_VERSION,
        "schema_hash": critic.schema_hash_hex,
        "created_at": created_at,
        "critic": critic.to_dict(),
        "exploration": {
            "kind": exploration.kind,
            "epsilon_or_temperature": exploration.epsilon_or_temperature,
            "decay": exploration.decay,
            "floor": exploration.floor,
        },
        "objective_state": objective_state_to_dict(objective_state),
    }


def build_policy(critic: CriticModel, exploration: ExplorationConfig,
                 objective_state: ObjectiveState,
                 created_at: float) -> Policy:
    """Assemble an immutable policy; the id is a content hash, so identical
    inputs always produce the identical artifact.
    """
    core = _policy_core_dict(critic, exploration, objective_state,
                             created_at)
    digest = hashlib.sha256(canonical_json(core).encode()).hexdigest()
    return Policy(policy_id=f"p{digest[:16]}", critic=critic,
                  exploration=exploration, objective_state=objective_state,
                  created_at=created_at)


def to_artifact(policy: Policy) -> bytes:
    core = _policy_core_dict(policy.critic, policy.exploration,
                             policy.objective_state, policy.created_at)
    core["policy_id"] = policy.policy_id
    return canonical_json(core).encode()


def from_artifact(problem: ProblemSpec, data: bytes) -> Policy:
    """Parse and check a policy artifact. Raises SchemaMismatch when the
    artifact was built for a different problem spec, ValueError when the
    bytes are not a valid artifact.
    """
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"invalid policy artifact: {e}") from None
    if not isinstance(obj, dict):
        raise ValueError("invalid policy artifact: not an object")
    if obj.get("format_version") != ARTIFACT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported artifact format {obj.get('format_version')!r}")
    try:
        model = CriticModel.from_dict(problem, obj["critic"])
        e = obj["exploration"]
        exploration = ExplorationConfig(
            kind=e["kind"],
            epsilon_or_temperature=float(e["epsilon_or_temperature"]),
            decay=float(e["decay"]), floor=float(e["floor"]))
        state = objective_state_from_dict(obj["objective_state"])
        return Policy(policy_id=str(obj["policy_id"]), critic=model,
                      exploration=exploration, objective_state=state,
                      created_at=float(obj["created_at"]))
    except SchemaMismatch:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"invalid policy artifact: {e}") from None
