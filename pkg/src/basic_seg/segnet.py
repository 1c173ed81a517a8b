"""Shared-encoder, dual-decoder U-Net with a mean-teacher twin.

Layout (``b`` = base channels, image side ``S``)::

    enc1: conv3x3 s1 (in->b)   + BN + ReLU  -> skip1 (S)
          conv3x3 s2 (b->b)    + BN + ReLU  -> S/2
    enc2: conv3x3 s1 (b->2b)   ...          -> skip2 (S/2)
          conv3x3 s2 (2b->2b)               -> S/4
    enc3: conv3x3 s1 (2b->4b)               -> skip3 (S/4)
          conv3x3 s2 (4b->4b)               -> S/8
    enc4: conv3x3 s1 (4b->8b), conv3x3 s1 (8b->8b)

    each decoder, for level 3, 2, 1:
          upsample2x + conv3x3 (->skip width) + BN + ReLU
          concat(skip) + conv3x3 (->skip width) + BN + ReLU
    head: conv1x1 + channel softmax

The MoS and SCS decoders share this layout and differ only in the head width.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor

TASKS = ("mos", "scs")
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
CHECKPOINT_MAGIC = b"BASC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    base_channels: int = 8
    num_classes: int = 6
    num_subclasses: int = 12
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if self.height % 8 or self.width % 8:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by 8")
        if self.num_subclasses < self.num_classes:
            raise ValueError("num_subclasses must be >= num_classes")
        if min(self.in_channels, self.base_channels, self.num_classes) < 1:
            raise ValueError("channel counts must be positive")

    def widths(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(4)]


@dataclass
class ModelState:
    """Student parameters, their EMA teacher, and normalization statistics.

    ``optim`` holds optimizer moments keyed by parameter name so a checkpoint
    captures everything needed to resume.
    """

    config: NetConfig
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    student_stats: dict[str, RunningStats]
    teacher_stats: dict[str, RunningStats]
    step: int = 0
    optim: dict[str, np.ndarray] = field(default_factory=dict)

    def params(self, who: str) -> dict[str, Tensor]:
        return self.student if who == "student" else self.teacher

    def stats(self, who: str) -> dict[str, RunningStats]:
        return self.student_stats if who == "student" else self.teacher_stats

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.student.items()},
            {k: Tensor(v.data.copy()) for k, v in self.teacher.items()},
            {k: v.copy() for k, v in self.student_stats.items()},
            {k: v.copy() for k, v in self.teacher_stats.items()},
            self.step,
            {k: v.copy() for k, v in self.optim.items()},
        )


def _layer_specs(config: NetConfig) -> list[tuple[str, int, int, int]]:
    """(name, in, out, kernel) for every conv layer; BN follows all but heads."""
    w = config.widths()
    specs = []
    cin = config.in_channels
    for lvl in range(3):
        specs.append((f"enc{lvl + 1}.conv1", cin, w[lvl], 3))
        specs.append((f"enc{lvl + 1}.conv2", w[lvl], w[lvl], 3))
        cin = w[lvl]
    specs.append(("enc4.conv1", w[2], w[3], 3))
    specs.append(("enc4.conv2", w[3], w[3], 3))
    for task, n_out in (("mos", config.num_classes), ("scs", config.num_subclasses)):
        below = w[3]
        for lvl in (3, 2, 1):
            skip = w[lvl - 1]
            specs.append((f"{task}.up{lvl}.conv1", below, skip, 3))
            specs.append((f"{task}.up{lvl}.conv2", 2 * skip, skip, 3))
            below = skip
        specs.append((f"{task}.head", w[0], n_out, 1))
    return specs


def build(config: NetConfig, seed: int = 0) -> ModelState:
    """Initialize a student with He-normal kernels and copy it into the teacher."""
    rng = np.random.default_rng(seed)
    student: dict[str, Tensor] = {}
    stats: dict[str, RunningStats] = {}
    for name, cin, cout, k in _layer_specs(config):
        std = np.sqrt(2.0 / (cin * k * k))
        student[f"{name}.weight"] = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
        if name.endswith("head"):
            student[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        else:
            student[f"{name}.gamma"] = Tensor(np.ones(cout), requires_grad=True)
            student[f"{name}.beta"] = Tensor(np.zeros(cout), requires_grad=True)
            stats[name] = RunningStats.identity(cout)
    teacher = {k: Tensor(v.data.copy()) for k, v in student.items()}
    return ModelState(config, student, teacher, stats, {k: v.copy() for k, v in stats.items()})


def _block(p, stats, name, x, stride, mode):
    y = ad.conv2d(x, p[f"{name}.weight"], None, stride=stride, padding=1)
    y = ad.batchnorm2d(y, p[f"{name}.gamma"], p[f"{name}.beta"], stats[name], mode, BN_MOMENTUM, BN_EPS)
    return ad.relu(y)


def _encode(p, stats, x, mode):
    skips = []
    h = x
    for lvl in (1, 2, 3):
        h = _block(p, stats, f"enc{lvl}.conv1", h, 1, mode)
        skips.append(h)
        h = _block(p, stats, f"enc{lvl}.conv2", h, 2, mode)
    h = _block(p, stats, "enc4.conv1", h, 1, mode)
    h = _block(p, stats, "enc4.conv2", h, 1, mode)
    return h, skips


def _decode(p, stats, task, bottom, skips, mode):
    h = bottom
    for lvl in (3, 2, 1):
        h = _block(p, stats, f"{task}.up{lvl}.conv1", ad.upsample2x(h), 1, mode)
        h = ad.concat_channels([h, skips[lvl - 1]])
        h = _block(p, stats, f"{task}.up{lvl}.conv2", h, 1, mode)
    return h


def _check_input(config: NetConfig, x: Tensor) -> None:
    expected = (config.in_channels, config.height, config.width)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ad.ShapeError("forward", "input shape", ("N",) + expected, x.shape)


def run(
    state: ModelState,
    who: str,
    x: Tensor,
    mode: str = "train",
    tasks: tuple[str, ...] = TASKS,
    features: bool = False,
) -> dict[str, Tensor]:
    """Forward pass returning a dict of per-task softmax maps.

    With ``features=True`` the hidden maps feeding each head are included
    under ``"<task>_features"``. Teacher passes never record on a tape.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_input(state.config, x)
    p, stats = state.params(who), state.stats(who)
    out: dict[str, Tensor] = {}

    def go():
        bottom, skips = _encode(p, stats, x, mode)
        for task in tasks:
            hidden = _decode(p, stats, task, bottom, skips, mode)
            logits = ad.conv2d(hidden, p[f"{task}.head.weight"], p[f"{task}.head.bias"])
            out[task] = ad.softmax_channel(logits)
            if features:
                out[f"{task}_features"] = hidden

    tape = ad._active_tape()
    if who == "teacher" and tape is not None:
        with tape.paused():
            go()
    else:
        go()
    return out


def forward(state: ModelState, who: str, x: Tensor, mode: str = "train") -> tuple[Tensor, Tensor]:
    """``(mos_probs, scs_probs)`` from one shared encoder pass."""
    out = run(state, who, x, mode)
    return out["mos"], out["scs"]


def ema_update(state: ModelState, alpha: float) -> ModelState:
    """teacher <- alpha * teacher + (1 - alpha) * student, including BN statistics."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    for name, t in state.teacher.items():
        t.data = alpha * t.data + (1.0 - alpha) * state.student[name].data
    for name, ts in state.teacher_stats.items():
        ss = state.student_stats[name]
        ts.mean = alpha * ts.mean + (1.0 - alpha) * ss.mean
        ts.var = alpha * ts.var + (1.0 - alpha) * ss.var
        ts.initialized = ts.initialized or ss.initialized
    return state


def inference(state: ModelState, x) -> np.ndarray:
    """Teacher encoder + MoS decoder in eval mode; per-pixel argmax labels.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    probs = run(state, "teacher", x, mode="eval", tasks=("mos",))["mos"]
    return np.argmax(probs.data, axis=1)


# ---------------------------------------------------------------- checkpoints


def state_entries(state: ModelState) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    for who in ("student", "teacher"):
        for name in sorted(state.params(who)):
            entries[f"{who}/{name}"] = state.params(who)[name].data
        for name in sorted(state.stats(who)):
            rs = state.stats(who)[name]
            entries[f"{who}/{name}.running_mean"] = rs.mean
            entries[f"{who}/{name}.running_var"] = rs.var
    for name in sorted(state.optim):
        entries[f"optim/{name}"] = np.asarray(state.optim[name], dtype=np.float64)
    entries["meta/step"] = np.asarray(float(state.step))
    return entries


def write_entries(path, entries: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_entries(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    entries = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        entries[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return entries


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def save_checkpoint(state: ModelState, path, extra: dict | None = None) -> None:
    """Write the binary checkpoint plus a ``<name>.cfg`` key=value sidecar.

    The sidecar holds the network config as ``net.<field>`` lines and any
    ``extra`` values (the trainer passes its config) as ``train.<key>``.
    """
    write_entries(path, state_entries(state))
    lines = [f"net.{k}={v}\n" for k, v in vars(state.config).items()]
    lines += [f"train.{k}={v}\n" for k, v in (extra or {}).items()]
    sidecar_path(path).write_text("".join(lines))


def read_sidecar(path) -> tuple[NetConfig, dict[str, str]]:
    """Parse a checkpoint sidecar into its NetConfig and raw ``train.*`` values."""
    net, train = {}, {}
    for line in sidecar_path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        group, _, name = key.strip().partition(".")
        (net if group == "net" else train)[name] = value.strip()
    return NetConfig(**{k: int(v) for k, v in net.items()}), train


def load_checkpoint(path, config: NetConfig | None = None) -> ModelState:
    """Rebuild a state from ``path``; the config defaults to the sidecar's."""
    if config is None:
        config = read_sidecar(path)[0]
    entries = read_entries(path)
    state = build(config, seed=0)
    for who in ("student", "teacher"):
        for name, t in state.params(who).items():
            t.data = entries[f"{who}/{name}"].copy()
        for name, rs in state.stats(who).items():
            rs.mean = entries[f"{who}/{name}.running_mean"].copy()
            rs.var = entries[f"{who}/{name}.running_var"].copy()
            rs.initialized = True
    state.optim = {k[len("optim/") :]: v.copy() for k, v in entries.items() if k.startswith("optim/")}
    state.step = int(entries["meta/step"])
    return state
