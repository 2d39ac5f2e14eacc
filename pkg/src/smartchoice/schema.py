"""Problem specification: typed context/arm/feedback schemas plus all
deployment settings, parsed from one diffable JSON config file.

The config file is the single source of truth for a deployment. Everything
is validated up front; a config that parses never fails at decision time.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional, Sequence, Union

Record = Mapping[str, Any]

_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")


class ConfigError(ValueError):
    """Raised for any config syntax or invariant violation, at load time."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


# ---------------------------------------------------------------------------
# Field kinds


@dataclass(frozen=True)
class NumericKind:
    shape: tuple[int, ...] = (1,)

    @property
    def size(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n


@dataclass(frozen=True)
class CategoricalKind:
    num_categories: int

    @property
    def oov_index(self) -> int:
        # Reserved index for out-of-vocabulary values in lenient paths.
        return self.num_categories


@dataclass(frozen=True)
class TextKind:
    max_length: int
    table_size: int = 65536


FieldKind = Union[NumericKind, CategoricalKind, TextKind]


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: FieldKind
    log_only: bool = False
    direction: Optional[str] = None  # "maximize" | "minimize", feedback only


@dataclass(frozen=True)
class MessageSpec:
    role: str  # "context" | "arm" | "feedback"
    fields: tuple[FieldSpec, ...]

    def field(self, name: str) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def model_fields(self) -> tuple[FieldSpec, ...]:
        """Fields visible to the critic (log_only excluded)."""
        return tuple(f for f in self.fields if not f.log_only)


# ---------------------------------------------------------------------------
# Objective


@dataclass(frozen=True)
class LinearScalarization:
    weights: Mapping[str, float]


@dataclass(frozen=True)
class HypervolumeScalarization:
    # reference=None means "derive from running per-metric minima".
    reference: Optional[Mapping[str, float]] = None
    # direction=None means "sample a fresh direction per decision".
    direction: Optional[Mapping[str, float]] = None


ScalarizationSpec = Union[LinearScalarization, HypervolumeScalarization]


@dataclass(frozen=True)
class ObjectiveConfig:
    mode: str  # "constrained" | "scalarized"
    primary_metric: Optional[str] = None
    cost_targets: Mapping[str, float] = field(default_factory=dict)
    scalarization: Optional[ScalarizationSpec] = None
    dual_step_size: float = 0.05
    cost_average_decay: float = 0.02


@dataclass(frozen=True)
class ProblemSpec:
    context: MessageSpec
    arm: MessageSpec
    feedback: MessageSpec
    objective: ObjectiveConfig

    @property
    def metric_names(self) -> tuple[str, ...]:
        """Optimizable feedback metrics, in schema order. k = len of this."""
        return tuple(f.name for f in self.feedback.model_fields)

    @property
    def direction_signs(self) -> tuple[float, ...]:
        """+1 for maximize, -1 for minimize, aligned with metric_names."""
        return tuple(
            1.0 if f.direction == "maximize" else -1.0
            for f in self.feedback.model_fields
        )

    @property
    def k(self) -> int:
        return len(self.metric_names)


# ---------------------------------------------------------------------------
# Training / exploration / validation / runtime settings


@dataclass(frozen=True)
class ImitationSchedule:
    initial: float = 0.0
    decay: float = 0.99
    warm_start_steps: int = 0
    margin: float = 0.1

    def weight_at(self, step: int) -> float:
        if step >= self.warm_start_steps or self.initial <= 0.0:
            return 0.0
        return self.initial * self.decay**step


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.05
    batch_size: int = 32
    steps_per_policy: int = 500
    seed: int = 0
    imitation_weight_schedule: ImitationSchedule = ImitationSchedule()
    hidden_width: int = 64
    embed_dim: int = 8
    grad_clip: float = 10.0
    min_examples: int = 100
    retrain_every_n: int = 500
    retrain_every_seconds: float = 60.0
    holdout_fraction: float = 0.1
    warm_start: bool = True
    max_policy_age_seconds: Optional[float] = None


@dataclass(frozen=True)
class ExplorationConfig:
    kind: str = "epsilon_greedy"  # | "boltzmann"
    epsilon_or_temperature: float = 0.1
    decay: float = 1.0  # applied once per published policy
    floor: float = 0.02


@dataclass(frozen=True)
class ValidationCriterion:
    kind: str
    margin: float = 0.0
    confidence: float = 0.9
    metric: str = "scalarized"
    n: int = 1
    bound: float = 1.0
    lo: float = float("-inf")
    hi: float = float("inf")
    stat_path: str = ""
    comparator: str = ">="
    value: float = 0.0


@dataclass(frozen=True)
class RuntimeConfig:
    mode: str = "in_process"  # | "service"
    service_address: Optional[str] = None
    queue_capacity: int = 10000
    join_ttl_seconds: float = 3600.0
    tag: str = "live"
    flush_interval_seconds: float = 1.0
    flush_batch_size: int = 500
    policy_poll_seconds: float = 10.0
    synchronous_training: bool = False


@dataclass(frozen=True)
class DeploymentConfig:
    problem: ProblemSpec
    training: TrainingConfig = TrainingConfig()
    exploration: ExplorationConfig = ExplorationConfig()
    validation: tuple[ValidationCriterion, ...] = ()
    runtime: RuntimeConfig = RuntimeConfig()


@dataclass(frozen=True)
class SchemaHash:
    digest: bytes  # 32-byte content hash of the canonical problem spec

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.hex


# ---------------------------------------------------------------------------
# Parsing

_FIELD_KEYS = {
    "name", "kind", "shape", "num_categories", "max_length", "table_size",
    "log_only", "direction",
}
_TOP_KEYS = {
    "context", "arm", "feedback", "objective", "training", "exploration",
    "validation", "deployment",
}


def _check_keys(obj: Mapping[str, Any], allowed: set[str], path: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", path)


def _expect(cond: bool, message: str, path: str) -> None:
    if not cond:
        raise ConfigError(message, path)


def _parse_field(obj: Any, role: str, index: int) -> FieldSpec:
    path = f"{role}[{index}]"
    _expect(isinstance(obj, dict), "field must be an object", path)
    _check_keys(obj, _FIELD_KEYS, path)
    name = obj.get("name")
    _expect(isinstance(name, str) and bool(_NAME_RE.match(name)),
            f"invalid field name {name!r}", path)
    path = f"{role}.{name}"
    kind_name = obj.get("kind")
    log_only = obj.get("log_only", False)
    _expect(isinstance(log_only, bool), "log_only must be a boolean", path)

    kind: FieldKind
    if kind_name == "numeric":
        _expect("num_categories" not in obj and "max_length" not in obj
                and "table_size" not in obj,
                "numeric field takes only 'shape'", path)
        shape = obj.get("shape", [1])
        if isinstance(shape, int):
            shape = [shape]
        _expect(isinstance(shape, list) and len(shape) >= 1
                and all(isinstance(s, int) and not isinstance(s, bool)
                        and s >= 1 for s in shape),
                f"shape must be a list of positive ints, got {shape!r}", path)
        kind = NumericKind(tuple(shape))
    elif kind_name == "categorical":
        _expect("shape" not in obj and "max_length" not in obj
                and "table_size" not in obj,
                "categorical field takes only 'num_categories'", path)
        n = obj.get("num_categories")
        _expect(isinstance(n, int) and not isinstance(n, bool) and n >= 2,
                f"num_categories must be an int >= 2, got {n!r}", path)
        kind = CategoricalKind(n)
    elif kind_name == "text":
        _expect("shape" not in obj and "num_categories" not in obj,
                "text field takes 'max_length' (and optional 'table_size')",
                path)
        n = obj.get("max_length")
        _expect(isinstance(n, int) and not isinstance(n, bool) and n >= 1,
                f"max_length must be an int >= 1, got {n!r}", path)
        table = obj.get("table_size", 65536)
        _expect(isinstance(table, int) and table >= 2
                and table & (table - 1) == 0,
                f"table_size must be a power of two >= 2, got {table!r}", path)
        kind = TextKind(n, table)
    else:
        raise ConfigError(f"unknown field kind {kind_name!r}", path)

    direction = obj.get("direction")
    if role == "feedback" and not log_only:
        _expect(direction in ("maximize", "minimize"),
                "feedback field needs direction 'maximize' or 'minimize'",
                path)
    else:
        _expect(direction is None,
                "direction is only valid on non-log_only feedback fields",
                path)
    return FieldSpec(name=name, kind=kind, log_only=log_only,
                     direction=direction)


def _parse_message(obj: Any, role: str) -> MessageSpec:
    _expect(isinstance(obj, list), f"'{role}' must be an array of fields",
            role)
    fields = tuple(_parse_field(f, role, i) for i, f in enumerate(obj))
    names = [f.name for f in fields]
    _expect(len(names) == len(set(names)), "duplicate field names", role)
    if role in ("arm", "feedback"):
        _expect(any(not f.log_only for f in fields),
                f"{role} schema has no optimizable field", role)
    if role == "feedback":
        for f in fields:
            if not f.log_only:
                _expect(isinstance(f.kind, NumericKind) and f.kind.size == 1,
                        f"metric {f.name!r} must be a scalar numeric field",
                        role)
    return MessageSpec(role=role, fields=fields)


def _parse_scalarization(obj: Any, metrics: Sequence[str]) -> ScalarizationSpec:
    path = "objective.scalarization"
    _expect(isinstance(obj, dict), "scalarization must be an object", path)
    kind = obj.get("kind")
    if kind == "linear":
        _check_keys(obj, {"kind", "weights"}, path)
        weights = obj.get("weights")
        _expect(isinstance(weights, dict) and weights,
                "linear scalarization needs a 'weights' map", path)
        for m, w in weights.items():
            _expect(m in metrics, f"unknown metric {m!r}", path)
            _expect(isinstance(w, (int, float)) and math.isfinite(w),
                    f"weight for {m!r} must be finite", path)
        _expect(any(w != 0 for w in weights.values()),
                "at least one weight must be nonzero", path)
        return LinearScalarization(dict(weights))
    if kind == "hypervolume":
        _check_keys(obj, {"kind", "reference", "direction"}, path)
        reference = obj.get("reference")
        if reference is not None:
            _expect(isinstance(reference, dict), "reference must be a map",
                    path)
            for m, z in reference.items():
                _expect(m in metrics, f"unknown metric {m!r}", path)
                _expect(isinstance(z, (int, float)) and math.isfinite(z),
                        f"reference for {m!r} must be finite", path)
            reference = dict(reference)
        direction = obj.get("direction")
        if direction is not None:
            _expect(isinstance(direction, dict)
                    and set(direction) == set(metrics),
                    "direction must map every metric", path)
            vals = [direction[m] for m in metrics]
            _expect(all(isinstance(v, (int, float)) and v > 0 for v in vals),
                    "direction components must be > 0", path)
            norm = math.sqrt(sum(v * v for v in vals))
            _expect(abs(norm - 1.0) <= 1e-9,
                    f"direction must have unit norm, got {norm}", path)
            direction = dict(direction)
        return HypervolumeScalarization(reference, direction)
    raise ConfigError(f"unknown scalarization kind {kind!r}", path)


def _parse_objective(obj: Any, feedback: MessageSpec) -> ObjectiveConfig:
    path = "objective"
    _expect(isinstance(obj, dict), "'objective' must be an object", path)
    metrics = [f.name for f in feedback.model_fields]
    mode = obj.get("mode")
    if mode == "constrained":
        _check_keys(obj, {"mode", "primary_metric", "cost_targets",
                          "dual_step_size", "cost_average_decay"}, path)
        primary = obj.get("primary_metric")
        _expect(primary in metrics,
                f"primary_metric {primary!r} not an optimizable feedback "
                "field", path)
        targets = obj.get("cost_targets")
        _expect(isinstance(targets, dict) and targets,
                "constrained mode needs a nonempty 'cost_targets' map", path)
        for m, c in targets.items():
            _expect(m in metrics, f"unknown metric {m!r} in cost_targets",
                    path)
            _expect(m != primary, "primary_metric cannot be a cost target",
                    path)
            _expect(isinstance(c, (int, float)) and math.isfinite(c),
                    f"cost target for {m!r} must be finite", path)
        eta = obj.get("dual_step_size", 0.05)
        gamma = obj.get("cost_average_decay", 0.02)
        _expect(isinstance(eta, (int, float)) and eta > 0,
                "dual_step_size must be > 0", path)
        _expect(isinstance(gamma, (int, float)) and 0 < gamma <= 1,
                "cost_average_decay must be in (0, 1]", path)
        return ObjectiveConfig(mode="constrained", primary_metric=primary,
                               cost_targets=dict(targets),
                               dual_step_size=float(eta),
                               cost_average_decay=float(gamma))
    if mode == "scalarized":
        _check_keys(obj, {"mode", "scalarization"}, path)
        sc = _parse_scalarization(obj.get("scalarization"), metrics)
        return ObjectiveConfig(mode="scalarized", scalarization=sc)
    raise ConfigError(f"mode must be 'constrained' or 'scalarized', "
                      f"got {mode!r}", path)


def _get_number(obj: Mapping[str, Any], key: str, default: float, path: str,
                minimum: Optional[float] = None, strict: bool = False,
                maximum: Optional[float] = None) -> float:
    v = obj.get(key, default)
    _expect(isinstance(v, (int, float)) and not isinstance(v, bool)
            and math.isfinite(v), f"{key} must be a finite number", path)
    if minimum is not None:
        _expect(v > minimum if strict else v >= minimum,
                f"{key} must be {'>' if strict else '>='} {minimum}", path)
    if maximum is not None:
        _expect(v <= maximum, f"{key} must be <= {maximum}", path)
    return float(v)


def _get_int(obj: Mapping[str, Any], key: str, default: int, path: str,
             minimum: int = 0) -> int:
    v = obj.get(key, default)
    _expect(isinstance(v, int) and not isinstance(v, bool) and v >= minimum,
            f"{key} must be an int >= {minimum}", path)
    return v


def _parse_training(obj: Any) -> TrainingConfig:
    path = "training"
    obj = obj if obj is not None else {}
    _expect(isinstance(obj, dict), "'training' must be an object", path)
    _check_keys(obj, {"learning_rate", "batch_size", "steps_per_policy",
                      "seed", "imitation_weight_schedule", "hidden_width",
                      "embed_dim", "grad_clip", "min_examples",
                      "retrain_every_n", "retrain_every_seconds",
                      "holdout_fraction", "warm_start",
                      "max_policy_age_seconds"}, path)
    imit_obj = obj.get("imitation_weight_schedule") or {}
    ipath = path + ".imitation_weight_schedule"
    _expect(isinstance(imit_obj, dict), "must be an object", ipath)
    _check_keys(imit_obj, {"initial", "decay", "warm_start_steps", "margin"},
                ipath)
    imitation = ImitationSchedule(
        initial=_get_number(imit_obj, "initial", 0.0, ipath, minimum=0.0),
        decay=_get_number(imit_obj, "decay", 0.99, ipath, minimum=0.0,
                          strict=True, maximum=1.0),
        warm_start_steps=_get_int(imit_obj, "warm_start_steps", 0, ipath),
        margin=_get_number(imit_obj, "margin", 0.1, ipath, minimum=0.0),
    )
    warm_start = obj.get("warm_start", True)
    _expect(isinstance(warm_start, bool), "warm_start must be a boolean",
            path)
    max_age = obj.get("max_policy_age_seconds")
    if max_age is not None:
        _expect(isinstance(max_age, (int, float)) and max_age > 0,
                "max_policy_age_seconds must be > 0 or null", path)
        max_age = float(max_age)
    return TrainingConfig(
        learning_rate=_get_number(obj, "learning_rate", 0.05, path,
                                  minimum=0.0, strict=True),
        batch_size=_get_int(obj, "batch_size", 32, path, minimum=1),
        steps_per_policy=_get_int(obj, "steps_per_policy", 500, path,
                                  minimum=1),
        seed=_get_int(obj, "seed", 0, path),
        imitation_weight_schedule=imitation,
        hidden_width=_get_int(obj, "hidden_width", 64, path, minimum=1),
        embed_dim=_get_int(obj, "embed_dim", 8, path, minimum=1),
        grad_clip=_get_number(obj, "grad_clip", 10.0, path, minimum=0.0,
                              strict=True),
        min_examples=_get_int(obj, "min_examples", 100, path, minimum=1),
        retrain_every_n=_get_int(obj, "retrain_every_n", 500, path,
                                 minimum=1),
        retrain_every_seconds=_get_number(obj, "retrain_every_seconds", 60.0,
                                          path, minimum=0.0, strict=True),
        holdout_fraction=_get_number(obj, "holdout_fraction", 0.1, path,
                                     minimum=0.0, maximum=0.5),
        warm_start=warm_start,
        max_policy_age_seconds=max_age,
    )


def _parse_exploration(obj: Any) -> ExplorationConfig:
    path = "exploration"
    obj = obj if obj is not None else {}
    _expect(isinstance(obj, dict), "'exploration' must be an object", path)
    _check_keys(obj, {"kind", "epsilon_or_temperature", "decay", "floor"},
                path)
    kind = obj.get("kind", "epsilon_greedy")
    _expect(kind in ("epsilon_greedy", "boltzmann"),
            f"kind must be 'epsilon_greedy' or 'boltzmann', got {kind!r}",
            path)
    param = _get_number(obj, "epsilon_or_temperature", 0.1, path)
    floor = _get_number(obj, "floor", 0.02, path, minimum=0.0)
    decay = _get_number(obj, "decay", 1.0, path, minimum=0.0, strict=True,
                        maximum=1.0)
    if kind == "epsilon_greedy":
        _expect(0.0 <= floor <= param <= 1.0,
                "need 0 <= floor <= epsilon <= 1", path)
    else:
        _expect(param > 0 and floor > 0,
                "boltzmann temperature and floor must be > 0", path)
    return ExplorationConfig(kind=kind, epsilon_or_temperature=param,
                             decay=decay, floor=floor)


_CRITERION_KEYS = {
    "cpe_not_worse_than_default": {"margin", "confidence", "metric"},
    "min_examples": {"n"},
    "max_arm_frequency": {"bound"},
    "prediction_range": {"metric", "lo", "hi"},
    "custom_threshold": {"stat_path", "comparator", "value"},
}


def _parse_criterion(obj: Any, index: int,
                     metrics: Sequence[str]) -> ValidationCriterion:
    path = f"validation[{index}]"
    _expect(isinstance(obj, dict), "criterion must be an object", path)
    kind = obj.get("kind")
    _expect(kind in _CRITERION_KEYS,
            f"unknown criterion kind {kind!r}", path)
    _check_keys(obj, _CRITERION_KEYS[kind] | {"kind"}, path)
    crit = ValidationCriterion(kind=kind)
    if kind == "cpe_not_worse_than_default":
        metric = obj.get("metric", "scalarized")
        _expect(metric == "scalarized" or metric in metrics,
                f"unknown metric {metric!r}", path)
        crit = replace(
            crit,
            margin=_get_number(obj, "margin", 0.0, path, minimum=0.0),
            confidence=_get_number(obj, "confidence", 0.9, path),
            metric=metric,
        )
        _expect(0.0 < crit.confidence < 1.0,
                "confidence must be in (0, 1)", path)
    elif kind == "min_examples":
        crit = replace(crit, n=_get_int(obj, "n", 1, path, minimum=1))
    elif kind == "max_arm_frequency":
        crit = replace(crit, bound=_get_number(obj, "bound", 1.0, path,
                                               minimum=0.0, maximum=1.0))
    elif kind == "prediction_range":
        metric = obj.get("metric")
        _expect(metric in metrics, f"unknown metric {metric!r}", path)
        lo = _get_number(obj, "lo", 0.0, path)
        hi = _get_number(obj, "hi", 0.0, path)
        _expect(lo <= hi, "need lo <= hi", path)
        crit = replace(crit, metric=metric, lo=lo, hi=hi)
    else:  # custom_threshold
        stat_path = obj.get("stat_path")
        comparator = obj.get("comparator", ">=")
        _expect(isinstance(stat_path, str) and stat_path,
                "stat_path must be a nonempty string", path)
        _expect(comparator in (">=", "<=", ">", "<", "=="),
                f"unknown comparator {comparator!r}", path)
        crit = replace(crit, stat_path=stat_path, comparator=comparator,
                       value=_get_number(obj, "value", 0.0, path))
    return crit


def _parse_runtime(obj: Any) -> RuntimeConfig:
    path = "deployment"
    obj = obj if obj is not None else {}
    _expect(isinstance(obj, dict), "'deployment' must be an object", path)
    _check_keys(obj, {"mode", "service_address", "queue_capacity",
                      "join_ttl_seconds", "tag", "flush_interval_seconds",
                      "flush_batch_size", "policy_poll_seconds",
                      "synchronous_training"}, path)
    mode = obj.get("mode", "in_process")
    _expect(mode in ("in_process", "service"),
            f"mode must be 'in_process' or 'service', got {mode!r}", path)
    address = obj.get("service_address")
    if mode == "service":
        _expect(isinstance(address, str) and ":" in address,
                "service mode needs 'service_address' as host:port", path)
    else:
        _expect(address is None,
                "service_address is only valid in service mode", path)
    tag = obj.get("tag", "live")
    _expect(isinstance(tag, str) and tag, "tag must be a nonempty string",
            path)
    sync = obj.get("synchronous_training", False)
    _expect(isinstance(sync, bool), "synchronous_training must be a boolean",
            path)
    return RuntimeConfig(
        mode=mode,
        service_address=address,
        queue_capacity=_get_int(obj, "queue_capacity", 10000, path,
                                minimum=1),
        join_ttl_seconds=_get_number(obj, "join_ttl_seconds", 3600.0, path,
                                     minimum=0.0, strict=True),
        tag=tag,
        flush_interval_seconds=_get_number(obj, "flush_interval_seconds",
                                           1.0, path, minimum=0.0,
                                           strict=True),
        flush_batch_size=_get_int(obj, "flush_batch_size", 500, path,
                                  minimum=1),
        policy_poll_seconds=_get_number(obj, "policy_poll_seconds", 10.0,
                                        path, minimum=0.0, strict=True),
        synchronous_training=sync,
    )


def parse_config_dict(obj: Mapping[str, Any]) -> DeploymentConfig:
    _expect(isinstance(obj, dict), "config root must be a JSON object", "")
    _check_keys(obj, _TOP_KEYS, "")
    for key in ("context", "arm", "feedback", "objective"):
        _expect(key in obj, f"missing required section '{key}'", "")
    context = _parse_message(obj["context"], "context")
    arm = _parse_message(obj["arm"], "arm")
    feedback = _parse_message(obj["feedback"], "feedback")
    objective = _parse_objective(obj["objective"], feedback)
    problem = ProblemSpec(context=context, arm=arm, feedback=feedback,
                          objective=objective)

    validation_obj = obj.get("validation", [])
    _expect(isinstance(validation_obj, list),
            "'validation' must be an array", "validation")
    metrics = problem.metric_names
    validation = tuple(_parse_criterion(c, i, metrics)
                       for i, c in enumerate(validation_obj))
    return DeploymentConfig(
        problem=problem,
        training=_parse_training(obj.get("training")),
        exploration=_parse_exploration(obj.get("exploration")),
        validation=validation,
        runtime=_parse_runtime(obj.get("deployment")),
    )


def parse_config(text: str) -> DeploymentConfig:
    """Parse and fully validate a JSON config document.

    Any syntax error or invariant violation raises ConfigError here, never
    at decision time.
    """
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"syntax error at line {e.lineno} column {e.colno}: {e.msg}"
        ) from None
    return parse_config_dict(obj)


# ---------------------------------------------------------------------------
# Serialization (canonical form)


def _field_to_dict(f: FieldSpec) -> dict[str, Any]:
    out: dict[str, Any] = {"name": f.name}
    if isinstance(f.kind, NumericKind):
        out["kind"] = "numeric"
        out["shape"] = list(f.kind.shape)
    elif isinstance(f.kind, CategoricalKind):
        out["kind"] = "categorical"
        out["num_categories"] = f.kind.num_categories
    else:
        out["kind"] = "text"
        out["max_length"] = f.kind.max_length
        out["table_size"] = f.kind.table_size
    if f.log_only:
        out["log_only"] = True
    if f.direction is not None:
        out["direction"] = f.direction
    return out


def _objective_to_dict(o: ObjectiveConfig) -> dict[str, Any]:
    if o.mode == "constrained":
        return {
            "mode": "constrained",
            "primary_metric": o.primary_metric,
            "cost_targets": dict(o.cost_targets),
            "dual_step_size": o.dual_step_size,
            "cost_average_decay": o.cost_average_decay,
        }
    sc = o.scalarization
    if isinstance(sc, LinearScalarization):
        sc_obj: dict[str, Any] = {"kind": "linear",
                                  "weights": dict(sc.weights)}
    else:
        assert isinstance(sc, HypervolumeScalarization)
        sc_obj = {"kind": "hypervolume"}
        if sc.reference is not None:
            sc_obj["reference"] = dict(sc.reference)
        if sc.direction is not None:
            sc_obj["direction"] = dict(sc.direction)
    return {"mode": "scalarized", "scalarization": sc_obj}


def problem_to_dict(p: ProblemSpec) -> dict[str, Any]:
    return {
        "context": [_field_to_dict(f) for f in p.context.fields],
        "arm": [_field_to_dict(f) for f in p.arm.fields],
        "feedback": [_field_to_dict(f) for f in p.feedback.fields],
        "objective": _objective_to_dict(p.objective),
    }


def config_to_dict(cfg: DeploymentConfig) -> dict[str, Any]:
    t, e, r = cfg.training, cfg.exploration, cfg.runtime
    imit = t.imitation_weight_schedule
    out = problem_to_dict(cfg.problem)
    out["training"] = {
        "learning_rate": t.learning_rate,
        "batch_size": t.batch_size,
        "steps_per_policy": t.steps_per_policy,
        "seed": t.seed,
        "imitation_weight_schedule": {
            "initial": imit.initial,
            "decay": imit.decay,
            "warm_start_steps": imit.warm_start_steps,
            "margin": imit.margin,
        },
        "hidden_width": t.hidden_width,
        "embed_dim": t.embed_dim,
        "grad_clip": t.grad_clip,
        "min_examples": t.min_examples,
        "retrain_every_n": t.retrain_every_n,
        "retrain_every_seconds": t.retrain_every_seconds,
        "holdout_fraction": t.holdout_fraction,
        "warm_start": t.warm_start,
        "max_policy_age_seconds": t.max_policy_age_seconds,
    }
    out["exploration"] = {
        "kind": e.kind,
        "epsilon_or_temperature": e.epsilon_or_temperature,
        "decay": e.decay,
        "floor": e.floor,
    }
    out["validation"] = [_criterion_to_dict(c) for c in cfg.validation]
    out["deployment"] = {
        "mode": r.mode,
        "queue_capacity": r.queue_capacity,
        "join_ttl_seconds": r.join_ttl_seconds,
        "tag": r.tag,
        "flush_interval_seconds": r.flush_interval_seconds,
        "flush_batch_size": r.flush_batch_size,
        "policy_poll_seconds": r.policy_poll_seconds,
        "synchronous_training": r.synchronous_training,
    }
    if r.service_address is not None:
        out["deployment"]["service_address"] = r.service_address
    return out


def _criterion_to_dict(c: ValidationCriterion) -> dict[str, Any]:
    if c.kind == "cpe_not_worse_than_default":
        return {"kind": c.kind, "margin": c.margin,
                "confidence": c.confidence, "metric": c.metric}
    if c.kind == "min_examples":
        return {"kind": c.kind, "n": c.n}
    if c.kind == "max_arm_frequency":
        return {"kind": c.kind, "bound": c.bound}
    if c.kind == "prediction_range":
        return {"kind": c.kind, "metric": c.metric, "lo": c.lo, "hi": c.hi}
    return {"kind": c.kind, "stat_path": c.stat_path,
            "comparator": c.comparator, "value": c.value}


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def serialize_config(cfg: DeploymentConfig) -> str:
    """Canonical JSON text; parse(serialize(parse(t))) == parse(t)."""
    return canonical_json(config_to_dict(cfg))


def schema_hash(problem: ProblemSpec) -> SchemaHash:
    """Content hash of the canonicalized problem spec.

    Stable under annotation-key reordering and whitespace; any semantic
    change to a field or the objective changes the digest.
    """
    text = canonical_json(problem_to_dict(problem))
    return SchemaHash(hashlib.sha256(text.encode()).digest())


# ---------------------------------------------------------------------------
# Config diffing


def _flatten(obj: Any, prefix: str, out: dict[str, Any]) -> None:
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(obj[k], f"{prefix}.{k}" if prefix else str(k), out)
    elif isinstance(obj, list) and obj and all(
            isinstance(x, dict) and "name" in x for x in obj):
        # Schema field arrays: index by field name so adds/removes read well.
        for x in obj:
            _flatten(x, f"{prefix}.{x['name']}", out)
    elif isinstance(obj, list):
        for i, x in enumerate(obj):
            _flatten(x, f"{prefix}[{i}]", out)
    else:
        out[prefix] = obj


def diff_configs(a: DeploymentConfig, b: DeploymentConfig) -> list[str]:
    """One line per changed path; empty iff canonical forms are equal."""
    fa: dict[str, Any] = {}
    fb: dict[str, Any] = {}
    _flatten(config_to_dict(a), "", fa)
    _flatten(config_to_dict(b), "", fb)
    lines = []
    for path in sorted(set(fa) | set(fb)):
        if path not in fb:
            lines.append(f"- {path}")
        elif path not in fa:
            lines.append(f"+ {path}")
        elif fa[path] != fb[path]:
            lines.append(f"{path}: {fa[path]} → {fb[path]}")
    return lines


# ---------------------------------------------------------------------------
# Record validation


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_record(spec: MessageSpec, value: Record) -> list[str]:
    """Check a raw record against its schema; violations are returned,
    never raised. Total over arbitrary field contents.
    """
    violations: list[str] = []
    if not isinstance(value, Mapping):
        return [f"{spec.role} record must be a mapping, got "
                f"{type(value).__name__}"]
    known = {f.name for f in spec.fields}
    for name in value:
        if name not in known:
            violations.append(f"{name} is not in the {spec.role} schema")
    for f in spec.fields:
        if f.log_only:
            continue  # retained verbatim in logs, never encoded or checked
        if f.name not in value or value[f.name] is None:
            violations.append(f"{f.name} is unset")
            continue
        v = value[f.name]
        if isinstance(f.kind, NumericKind):
            flat = _flatten_numeric(v, f.kind)
            if flat is None:
                violations.append(
                    f"{f.name} must be numeric with shape "
                    f"{list(f.kind.shape)}")
            elif not all(math.isfinite(x) for x in flat):
                violations.append(f"{f.name} contains non-finite values")
        elif isinstance(f.kind, CategoricalKind):
            if not isinstance(v, int) or isinstance(v, bool):
                violations.append(f"{f.name} must be an integer category")
            elif not 0 <= v < f.kind.num_categories:
                violations.append(
                    f"{f.name} out of range [0, {f.kind.num_categories})")
        else:  # TextKind
            if not isinstance(v, str):
                violations.append(f"{f.name} must be a string")
            elif len(v.split()) > f.kind.max_length:
                violations.append(
                    f"{f.name} exceeds max_length {f.kind.max_length}")
    return violations


def _flatten_numeric(v: Any, kind: NumericKind) -> Optional[list[float]]:
    """Flatten a numeric value to kind.size floats, or None on mismatch."""
    if _is_number(v):
        return [float(v)] if kind.size == 1 else None
    flat: list[float] = []

    def walk(x: Any) -> bool:
        if _is_number(x):
            flat.append(float(x))
            return True
        if isinstance(x, (list, tuple)):
            return all(walk(y) for y in x)
        if hasattr(x, "tolist"):  # numpy arrays and scalars
            return walk(x.tolist())
        return False

    if not walk(v) or len(flat) != kind.size:
        return None
    return flat


def normalize_record(spec: MessageSpec, value: Record) -> dict[str, Any]:
    """Canonical form: numerics flattened to float lists, other values as
    is. Two records are 'the same value' iff their normal forms are equal.
    Unknown or malformed entries pass through verbatim (validation reports
    them separately).
    """
    out: dict[str, Any] = {}
    for name, v in value.items():
        try:
            f = spec.field(name)
        except KeyError:
            out[name] = v
            continue
        if isinstance(f.kind, NumericKind) and not f.log_only:
            flat = _flatten_numeric(v, f.kind)
            out[name] = flat if flat is not None else v
        else:
            out[name] = v
    return out
