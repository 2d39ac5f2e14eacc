"""The learned critic: (encoded context, encoded arm) -> k metric estimates.

A small feed-forward network with embedding tables for categorical and
text slots, trained by plain SGD with gradient-norm clipping. All math is
float64 numpy; training is bit-reproducible given the same seed and batch
stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np

from .encoding import EncodedRecord, Layout, NormalizerSnapshot, fresh_snapshot
from .schema import ProblemSpec, TrainingConfig, schema_hash


class SchemaMismatch(ValueError):
    """Inputs do not fit the model; callers fall back to the default arm."""


@dataclass
class TrainingExample:
    context: EncodedRecord
    arm: EncodedRecord
    feedback: np.ndarray  # length k, canonical (all-maximize)
    is_default_arm: bool = False
    weight: float = 1.0
    # Encoding of the decision's default arm; needed by the imitation
    # regularizer when the chosen arm deviated from it.
    default_arm: Optional[EncodedRecord] = None


# Scalarizer protocol for the imitation term: (value, grad) pair.
Scalarizer = Any


@dataclass
class CriticModel:
    schema_hash_hex: str
    ctx_layout: Layout
    arm_layout: Layout
    k: int
    embed_dim: int
    ctx_cat_emb: list[np.ndarray]
    ctx_text_emb: list[np.ndarray]
    arm_cat_emb: list[np.ndarray]
    arm_text_emb: list[np.ndarray]
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ctx_normalizer: NormalizerSnapshot
    arm_normalizer: NormalizerSnapshot
    train_seed: int = 0
    step_count: int = 0

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    def params(self) -> list[tuple[str, np.ndarray]]:
        named = [("w1", self.w1), ("b1", self.b1), ("w2", self.w2),
                 ("b2", self.b2)]
        for group, tables in (("ctx_cat", self.ctx_cat_emb),
                              ("ctx_text", self.ctx_text_emb),
                              ("arm_cat", self.arm_cat_emb),
                              ("arm_text", self.arm_text_emb)):
            named.extend((f"{group}[{i}]", t) for i, t in enumerate(tables))
        return named

    def copy(self) -> "CriticModel":
        return CriticModel(
            schema_hash_hex=self.schema_hash_hex,
            ctx_layout=self.ctx_layout, arm_layout=self.arm_layout,
            k=self.k, embed_dim=self.embed_dim,
            ctx_cat_emb=[t.copy() for t in self.ctx_cat_emb],
            ctx_text_emb=[t.copy() for t in self.ctx_text_emb],
            arm_cat_emb=[t.copy() for t in self.arm_cat_emb],
            arm_text_emb=[t.copy() for t in self.arm_text_emb],
            w1=self.w1.copy(), b1=self.b1.copy(),
            w2=self.w2.copy(), b2=self.b2.copy(),
            ctx_normalizer=self.ctx_normalizer,
            arm_normalizer=self.arm_normalizer,
            train_seed=self.train_seed, step_count=self.step_count)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a in self.params())

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_hash": self.schema_hash_hex,
            "k": self.k,
            "embed_dim": self.embed_dim,
            "train_seed": self.train_seed,
            "step_count": self.step_count,
            "params": {name: arr.tolist() for name, arr in self.params()},
            "normalizers": {"context": self.ctx_normalizer.to_dict(),
                            "arm": self.arm_normalizer.to_dict()},
        }

    @classmethod
    def from_dict(cls, problem: ProblemSpec,
                  obj: dict[str, Any]) -> "CriticModel":
        expected = schema_hash(problem).hex
        if obj.get("schema_hash") != expected:
            raise SchemaMismatch(
                f"model schema {obj.get('schema_hash')!r} != {expected!r}")
        ctx_layout = Layout.for_spec(problem.context)
        arm_layout = Layout.for_spec(problem.arm)
        params = obj["params"]

        def arr(name: str) -> np.ndarray:
            return np.asarray(params[name], dtype=float)

        model = cls(
            schema_hash_hex=obj["schema_hash"],
            ctx_layout=ctx_layout, arm_layout=arm_layout,
            k=int(obj["k"]), embed_dim=int(obj["embed_dim"]),
            ctx_cat_emb=[arr(f"ctx_cat[{i}]")
                         for i in range(len(ctx_layout.categorical))],
            ctx_text_emb=[arr(f"ctx_text[{i}]")
                          for i in range(len(ctx_layout.text))],
            arm_cat_emb=[arr(f"arm_cat[{i}]")
                         for i in range(len(arm_layout.categorical))],
            arm_text_emb=[arr(f"arm_text[{i}]")
                          for i in range(len(arm_layout.text))],
            w1=arr("w1"), b1=arr("b1"), w2=arr("w2"), b2=arr("b2"),
            ctx_normalizer=NormalizerSnapshot.from_dict(
                obj["normalizers"]["context"]),
            arm_normalizer=NormalizerSnapshot.from_dict(
                obj["normalizers"]["arm"]),
            train_seed=int(obj["train_seed"]),
            step_count=int(obj["step_count"]),
        )
        if not model.all_finite():
            raise SchemaMismatch("model contains non-finite parameters")
        return model


def init_critic(problem: ProblemSpec, config: TrainingConfig,
                ctx_normalizer: Optional[NormalizerSnapshot] = None,
                arm_normalizer: Optional[NormalizerSnapshot] = None,
                ) -> CriticModel:
    ctx_layout = Layout.for_spec(problem.context)
    arm_layout = Layout.for_spec(problem.arm)
    k = problem.k
    d = config.embed_dim
    n_slots = (len(ctx_layout.categorical) + len(ctx_layout.text)
               + len(arm_layout.categorical) + len(arm_layout.text))
    input_dim = ctx_layout.dense_size + arm_layout.dense_size + d * n_slots
    h = config.hidden_width
    rng = np.random.default_rng(config.seed)

    def emb(vocab: int) -> np.ndarray:
        return rng.normal(scale=0.1, size=(vocab + 1, d))

    return CriticModel(
        schema_hash_hex=schema_hash(problem).hex,
        ctx_layout=ctx_layout, arm_layout=arm_layout, k=k, embed_dim=d,
        ctx_cat_emb=[emb(n) for _, n in ctx_layout.categorical],
        ctx_text_emb=[emb(t) for _, _, t in ctx_layout.text],
        arm_cat_emb=[emb(n) for _, n in arm_layout.categorical],
        arm_text_emb=[emb(t) for _, _, t in arm_layout.text],
        w1=rng.normal(scale=np.sqrt(2.0 / max(input_dim, 1)),
                      size=(input_dim, h)),
        b1=np.zeros(h),
        w2=rng.normal(scale=np.sqrt(1.0 / h), size=(h, k)),
        b2=np.zeros(k),
        ctx_normalizer=ctx_normalizer or fresh_snapshot(problem.context),
        arm_normalizer=arm_normalizer or fresh_snapshot(problem.arm),
        train_seed=config.seed,
    )


# ---------------------------------------------------------------------------
# Forward / backward


def _features(model: CriticModel, ctx: EncodedRecord,
              arm: EncodedRecord) -> np.ndarray:
    """Concatenate dense parts and embedding lookups into one input row."""
    d = model.embed_dim
    parts = [ctx.dense]
    for slot, cid in ctx.categorical_ids:
        parts.append(model.ctx_cat_emb[slot][cid])
    for slot, ids in ctx.token_ids:
        table = model.ctx_text_emb[slot]
        parts.append(table[list(ids)].mean(axis=0) if ids else np.zeros(d))
    parts.append(arm.dense)
    for slot, cid in arm.categorical_ids:
        parts.append(model.arm_cat_emb[slot][cid])
    for slot, ids in arm.token_ids:
        table = model.arm_text_emb[slot]
        parts.append(table[list(ids)].mean(axis=0) if ids else np.zeros(d))
    x = np.concatenate(parts) if parts else np.zeros(0)
    if x.shape[0] != model.input_dim:
        raise SchemaMismatch(
            f"feature size {x.shape[0]} != model input {model.input_dim}")
    return x


def predict(model: CriticModel, context: EncodedRecord,
            arm: EncodedRecord) -> np.ndarray:
    """Deterministic critic output, length k."""
    x = _features(model, context, arm)
    h = np.maximum(0.0, x @ model.w1 + model.b1)
    return h @ model.w2 + model.b2


def predict_many(model: CriticModel, context: EncodedRecord,
                 arms: Sequence[EncodedRecord]) -> np.ndarray:
    """Batched predictions for one context over an arm list: (|arms|, k).

    This is the serving hot path: one matmul for all candidate arms.
    """
    x = np.stack([_features(model, context, a) for a in arms])
    h = np.maximum(0.0, x @ model.w1 + model.b1)
    return h @ model.w2 + model.b2


def _forward_cached(model: CriticModel, x: np.ndarray):
    pre = x @ model.w1 + model.b1
    h = np.maximum(0.0, pre)
    y = h @ model.w2 + model.b2
    return pre, h, y


def _zero_grads(model: CriticModel) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in model.params()}


def _backprop_input(model: CriticModel, x: np.ndarray, pre: np.ndarray,
                    h: np.ndarray, gy: np.ndarray,
                    grads: dict[str, np.ndarray]) -> np.ndarray:
    """Accumulate parameter grads for one row; return grad wrt features."""
    grads["w2"] += np.outer(h, gy)
    grads["b2"] += gy
    gh = model.w2 @ gy
    gh[pre <= 0.0] = 0.0  # ReLU subgradient at 0 fixed to 0
    grads["w1"] += np.outer(x, gh)
    grads["b1"] += gh
    return model.w1 @ gh


def _scatter_embedding_grads(model: CriticModel, ctx: EncodedRecord,
                             arm: EncodedRecord, gx: np.ndarray,
                             grads: dict[str, np.ndarray]) -> None:
    d = model.embed_dim
    off = model.ctx_layout.dense_size
    for slot, cid in ctx.categorical_ids:
        grads[f"ctx_cat[{slot}]"][cid] += gx[off:off + d]
        off += d
    for slot, ids in ctx.token_ids:
        if ids:
            g = gx[off:off + d] / len(ids)
            table = grads[f"ctx_text[{slot}]"]
            for tid in ids:
                table[tid] += g
        off += d
    off += model.arm_layout.dense_size
    for slot, cid in arm.categorical_ids:
        grads[f"arm_cat[{slot}]"][cid] += gx[off:off + d]
        off += d
    for slot, ids in arm.token_ids:
        if ids:
            g = gx[off:off + d] / len(ids)
            table = grads[f"arm_text[{slot}]"]
            for tid in ids:
                table[tid] += g
        off += d


def _loss_and_grads(model: CriticModel, batch: Sequence[TrainingExample],
                    beta: float, margin: float,
                    scalarizer: Optional[Scalarizer] = None,
                    ) -> tuple[float, dict[str, np.ndarray]]:
    n = len(batch)
    grads = _zero_grads(model)
    loss = 0.0
    for ex in batch:
        x = _features(model, ex.context, ex.arm)
        pre, h, y = _forward_cached(model, x)
        err = y - ex.feedback
        loss += ex.weight * float(err @ err) / n
        gx = _backprop_input(model, x, pre, h, 2.0 * ex.weight * err / n,
                             grads)
        _scatter_embedding_grads(model, ex.context, ex.arm, gx, grads)

        if (beta > 0.0 and scalarizer is not None and ex.default_arm
                is not None and not ex.is_default_arm):
            loss += _imitation_term(model, ex, beta / n, margin, scalarizer,
                                    grads)
    return loss, grads


def _imitation_term(model: CriticModel, ex: TrainingExample, beta: float,
                    margin: float, scalarizer: Scalarizer,
                    grads: dict[str, np.ndarray]) -> float:
    """Margin loss pushing the default arm's scalarized prediction above the
    chosen arm's, skipped when observed feedback already contradicts the
    default (the deviation paid off).
    """
    xd = _features(model, ex.context, ex.default_arm)
    pre_d, h_d, y_d = _forward_cached(model, xd)
    if scalarizer.value(ex.feedback) > scalarizer.value(y_d):
        return 0.0
    xa = _features(model, ex.context, ex.arm)
    pre_a, h_a, y_a = _forward_cached(model, xa)
    gap = margin + scalarizer.value(y_a) - scalarizer.value(y_d)
    if gap <= 0.0:
        return 0.0
    ga = beta * scalarizer.grad(y_a)
    gd = -beta * scalarizer.grad(y_d)
    gxa = _backprop_input(model, xa, pre_a, h_a, ga, grads)
    _scatter_embedding_grads(model, ex.context, ex.arm, gxa, grads)
    gxd = _backprop_input(model, xd, pre_d, h_d, gd, grads)
    _scatter_embedding_grads(model, ex.context, ex.default_arm, gxd, grads)
    return beta * gap


def train(model: CriticModel, batch: Sequence[TrainingExample],
          config: TrainingConfig, scalarizer: Optional[Scalarizer] = None,
          ) -> tuple[CriticModel, float]:
    """One SGD step on the batch; returns (updated model, pre-step loss).

    A non-finite loss aborts the step: the previous parameters are
    returned untouched so the serving policy stays at its last good state.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    sched = config.imitation_weight_schedule
    beta = sched.weight_at(model.step_count)
    loss, grads = _loss_and_grads(model, batch, beta, sched.margin,
                                  scalarizer)
    if not np.isfinite(loss):
        return model, loss

    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    scale = config.grad_clip / norm if norm > config.grad_clip else 1.0

    out = model.copy()
    for name, arr in out.params():
        arr -= config.learning_rate * scale * grads[name]
    out.step_count = model.step_count + 1
    if not out.all_finite():
        return model, loss
    return out, loss


def gradient_check(model: CriticModel, example: TrainingExample,
                   eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients
    of the squared-error loss, over every parameter.
    """
    _, grads = _loss_and_grads(model.copy(), [example], 0.0, 0.0)

    def loss_of(m: CriticModel) -> float:
        err = predict(m, example.context, example.arm) - example.feedback
        return example.weight * float(err @ err)

    probe = model.copy()
    worst = 0.0
    for name, arr in probe.params():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_of(probe)
            flat[i] = orig - eps
            down = loss_of(probe)
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(fd), 1e-8)
            worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst
