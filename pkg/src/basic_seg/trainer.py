"""Mean-teacher training loop with a dual-task student.

Every random draw (batch order, rotations, noise) comes from a stream seeded
by ``(seed, purpose, step)``, so a run resumed from a checkpoint at step
``t`` replays steps ``t, t+1, ...`` exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import segnet
from .data import Dataset

if TYPE_CHECKING:
    from .partition import SubclassTable

logger = logging.getLogger(__name__)

_BATCH_LABELED, _BATCH_UNLABELED, _ROTATION, _NOISE_STUDENT, _NOISE_TEACHER = range(5)

LOSS_COLUMNS = ("step", "L_sup", "L_model_con", "L_task_con", "L_cnf", "lambda1", "total")


def stream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, purpose, *keys]))


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 4
    labeled_per_batch: int = 1
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.99
    mu: float = 1.0
    lambda1_max: float = 0.1
    lambda2: float = 0.5
    lambda3: float = 1.0
    noise_sigma: float = 0.05
    rotate: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    val_every: int = 0
    use_scs: bool = True
    semi_supervised: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.semi_supervised and not 1 <= self.labeled_per_batch < self.batch_size:
            raise ValueError(
                f"config contradiction: labeled_per_batch={self.labeled_per_batch} "
                f"must satisfy 1 <= labeled_per_batch < batch_size={self.batch_size}"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.mu, self.lambda1_max, self.lambda2, self.lambda3)

    @property
    def labeled_count(self) -> int:
        return self.labeled_per_batch if self.semi_supervised else self.batch_size

    @property
    def unlabeled_count(self) -> int:
        return self.batch_size - self.labeled_per_batch if self.semi_supervised else 0


# ---------------------------------------------------------------- key=value text


def to_text(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def coerce(cls, values: dict[str, str], strict: bool = True):
    """Build dataclass ``cls`` from string values, converting by field type."""
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, raw in values.items():
        if key not in fields:
            if strict:
                raise ValueError(f"unknown config key {key!r}")
            continue
        default = getattr(cls(), key) if key in fields else None
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"{key}: expected a boolean, got {raw!r}")
            kwargs[key] = raw.lower() in ("true", "1")
        elif isinstance(default, int):
            kwargs[key] = int(raw)
        elif isinstance(default, float):
            kwargs[key] = float(raw)
        elif isinstance(default, tuple) or (default is None and raw.startswith("(")):
            kwargs[key] = tuple(float(v) for v in raw.strip("()").split(",") if v.strip())
        else:
            kwargs[key] = raw
    return cls(**kwargs)


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam over ``state.student``; moments live in ``state.optim``."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, state: segnet.ModelState, grads: dict) -> None:
        t = state.optim.get("t", np.asarray(0.0)) + 1.0
        state.optim["t"] = np.asarray(t)
        c1 = 1.0 - self.beta1 ** float(t)
        c2 = 1.0 - self.beta2 ** float(t)
        for name, param in state.student.items():
            g = grads.get(param)
            if g is None:
                continue
            m = state.optim.get(f"m/{name}", np.zeros_like(g))
            v = state.optim.get(f"v/{name}", np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            state.optim[f"m/{name}"], state.optim[f"v/{name}"] = m, v
            param.data = param.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    x_labeled: np.ndarray  # n x 1 x H x W
    y_labeled: np.ndarray  # n x H x W
    ysub_labeled: np.ndarray | None
    x_unlabeled: np.ndarray  # m x 1 x H x W
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    rotations: np.ndarray  # quarter turns, labeled first


def _cycle_indices(pool_size: int, count: int, step: int, seed: int, purpose: int) -> np.ndarray:
    """Positions ``step*count .. step*count+count-1`` of a reshuffled-per-cycle stream."""
    out = np.empty(count, dtype=np.int64)
    perms: dict[int, np.ndarray] = {}
    for j in range(count):
        pos = step * count + j
        cycle = pos // pool_size
        if cycle not in perms:
            perms[cycle] = stream(seed, purpose, cycle).permutation(pool_size)
        out[j] = perms[cycle][pos % pool_size]
    return out


def rotate(arr: np.ndarray, quarter_turns: int) -> np.ndarray:
    return np.rot90(arr, quarter_turns, axes=(-2, -1)).copy()


def assemble_batch(labeled: Dataset, unlabeled: Dataset | None, config: TrainConfig, step: int) -> Batch:
    """Draw one batch; each sample gets one rotation shared by image and labels."""
    if len(labeled) == 0:
        raise ValueError("empty labeled pool")
    n_l, n_u = config.labeled_count, config.unlabeled_count
    if n_u and (unlabeled is None or len(unlabeled) == 0):
        raise ValueError("empty unlabeled pool")
    li = _cycle_indices(len(labeled), n_l, step, config.seed, _BATCH_LABELED)
    ui = _cycle_indices(len(unlabeled), n_u, step, config.seed, _BATCH_UNLABELED) if n_u else np.zeros(0, np.int64)
    rot = stream(config.seed, _ROTATION, step).integers(0, 4, size=n_l + n_u) if config.rotate else np.zeros(n_l + n_u, np.int64)
    xl = np.stack([rotate(labeled.images[i], r) for i, r in zip(li, rot[:n_l])])
    yl = np.stack([rotate(labeled.labels[i], r) for i, r in zip(li, rot[:n_l])])
    ysub = None
    if labeled.sub_labels is not None:
        ysub = np.stack([rotate(labeled.sub_labels[i], r) for i, r in zip(li, rot[:n_l])])
    if n_u:
        xu = np.stack([rotate(unlabeled.images[i], r) for i, r in zip(ui, rot[n_l:])])
    else:
        xu = np.zeros((0,) + labeled.images.shape[1:])
    return Batch(xl[:, None], yl, ysub, xu[:, None], li, ui, rot)


def perturb(images: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise; ``sigma=0`` returns an unchanged copy."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return images.copy()
    return images + rng.normal(0.0, sigma, size=images.shape)


def noise_streams(seed: int, step: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (student, teacher) noise generators for one step."""
    return stream(seed, _NOISE_STUDENT, step), stream(seed, _NOISE_TEACHER, step)


# ---------------------------------------------------------------- one step


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value: float, step: int):
        self.term = term
        super().__init__(f"non-finite loss term {term}={value} at step {step}")


def train_step(
    state: segnet.ModelState,
    batch: Batch,
    config: TrainConfig,
    table: "SubclassTable | None" = None,
    optimizer: Adam | None = None,
) -> tuple[dict[str, float], dict]:
    """One student update followed by the teacher EMA.

    Returns the loss breakdown and the gradient map of the student update.
    """
    step = state.step
    if step >= config.iterations:
        raise ValueError(f"step {step} is past the configured {config.iterations} iterations")
    if config.use_scs and (table is None or batch.ysub_labeled is None):
        raise ValueError("subclass training needs a partition (table and subclass labels)")
    optimizer = optimizer or Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    weights = config.weights
    tasks = segnet.TASKS if config.use_scs else ("mos",)
    n_l, n_u = len(batch.x_labeled), len(batch.x_unlabeled)
    rng_s, rng_t = noise_streams(config.seed, step)
    x_student = perturb(np.concatenate([batch.x_labeled, batch.x_unlabeled]), config.noise_sigma, rng_s)

    with ad.Tape() as tape:
        out = segnet.run(state, "student", ad.Tensor(x_student), "train", tasks)
        mos_l = ad.slice_batch(out["mos"], 0, n_l)
        scs_l = ad.slice_batch(out["scs"], 0, n_l) if config.use_scs else None
        terms: dict[str, ad.Tensor | None] = {
            "sup": L.supervised_loss(mos_l, scs_l, batch.y_labeled, batch.ysub_labeled, weights.mu)
        }
        if n_u and (weights.lambda1_max or (config.use_scs and weights.lambda2)):
            mos_u = ad.slice_batch(out["mos"], n_l, n_l + n_u)
            scs_u = ad.slice_batch(out["scs"], n_l, n_l + n_u) if config.use_scs else None
            x_teacher = perturb(batch.x_unlabeled, config.noise_sigma, rng_t)
            teach = segnet.run(state, "teacher", ad.Tensor(x_teacher), "eval", tasks)
            if weights.lambda1_max:
                terms["model_con"] = L.model_consistency_loss(mos_u, scs_u, teach["mos"], teach.get("scs"))
            if config.use_scs and weights.lambda2:
                terms["task_con"] = L.task_consistency_loss(mos_u, teach["scs"], table)
        if config.use_scs and weights.lambda3:
            terms["cnf"] = L.conflict_loss(scs_l, batch.ysub_labeled, table)
        total, breakdown = L.total_loss(terms, weights, step, config.iterations)
        for name, value in breakdown.items():
            if not math.isfinite(value):
                raise NonFiniteLoss(name, value, step)
        grads = tape.backward(total) if total.node is not None else {}

    picked = np.take_along_axis(mos_l.data, batch.y_labeled[:, None], axis=1)
    breakdown["mos_ce"] = float(-np.log(np.maximum(picked, L.LOG_FLOOR)).mean())
    optimizer.step(state, grads)
    segnet.ema_update(state, config.alpha)
    state.step += 1
    breakdown["step"] = step
    return breakdown, grads


# ---------------------------------------------------------------- loop


@dataclass
class FitResult:
    state: segnet.ModelState
    losses: list[dict[str, float]]
    validation: list[dict[str, float]]


def write_loss_csv(path, rows, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOSS_COLUMNS)
        for r in rows:
            writer.writerow(
                [r["step"], repr(r["sup"]), repr(r["model_con"]), repr(r["task_con"]), repr(r["cnf"]),
                 repr(r["lambda1"]), repr(r["total"])]
            )


def fit(
    labeled: Dataset,
    unlabeled: Dataset | None,
    table: "SubclassTable | None",
    config: TrainConfig,
    net_config: segnet.NetConfig | None = None,
    state: segnet.ModelState | None = None,
    out_dir=None,
    validation: Dataset | None = None,
    stop_at: int | None = None,
) -> FitResult:
    """Train until ``config.iterations`` (or ``stop_at``) and return the state.

    The returned state's teacher is the model meant for prediction. Passing a
    ``state`` (for instance one loaded from a checkpoint) resumes from its
    step counter.
    """
    from .evaluation import evaluate  # evaluation depends on trainer-free modules only

    if state is None:
        if net_config is None:
            raise ValueError("fit needs either a state or a net_config")
        state = segnet.build(net_config, seed=config.seed)
    optimizer = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if state.step == 0 and (out_dir / "losses.csv").exists():
            (out_dir / "losses.csv").unlink()
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    log: list[dict[str, float]] = []
    val_log: list[dict[str, float]] = []
    while state.step < end:
        batch = assemble_batch(labeled, unlabeled, config, state.step)
        row, _ = train_step(state, batch, config, table, optimizer)
        log.append(row)
        if out_dir is not None:
            write_loss_csv(out_dir / "losses.csv", [row], append=True)
        if state.step % 50 == 0:
            logger.info("step %d total %.5f sup %.5f", state.step, row["total"], row["sup"])
        if config.checkpoint_every and out_dir is not None and state.step % config.checkpoint_every == 0:
            segnet.save_checkpoint(state, out_dir / f"ckpt_{state.step:06d}.basc", vars(config))
        if config.val_every and validation is not None and state.step % config.val_every == 0:
            report = evaluate(state, validation)
            val_log.append({"step": state.step, **{f"dice_{c}": d for c, d in report.per_class.items()}, "avg": report.average})
    if out_dir is not None and val_log:
        with (out_dir / "validation.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(val_log[0]))
            writer.writeheader()
            writer.writerows(val_log)
    return FitResult(state, log, val_log)
