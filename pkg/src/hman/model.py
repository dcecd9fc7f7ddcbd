"""The full hierarchical multi-scale attention network.

Per time step: attend over the K*K feature grid using the previous
first-layer hidden state, run the layer stack bottom-up (each layer
reads the layer below at t and the layer above at t-1), concatenate the
per-layer hidden states, and classify through an affine head + softmax.
The sequence loss is per-step cross entropy against the clip label.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attention as at
from . import autodiff as ad
from . import cell as hc
from . import stochastic as stu
from .autodiff import ContractError, Tensor
from .errors import ConfigError, FormatError

ATTENTION_MODES = ("soft", "reinforce", "gumbel-constant", "gumbel-adaptive")
EVAL_Z_MODES = ("deterministic", "sampled")

CHECKPOINT_MAGIC = b"HMAN1"


@dataclass
class ModelConfig:
    """Architecture and stochastic-unit configuration.

    ``cell_hidden_tanh`` selects h = o*tanh(c) in the cell (the bounded
    default); clearing it uses the literal h = o*c rule.  ``force_z``
    pins every boundary bit to a constant, which with ``layers=1``
    yields the flat attention-RNN baseline.  ``eval_z`` picks whether
    evaluation draws boundary noise or thresholds the plain sigmoid.
    """

    layers: int = 3
    hidden: int | tuple[int, ...] = 128   # one size, or one per layer
    grid_side: int = 4
    feat_dim: int = 16
    classes: int = 8
    attention: str = "soft"
    cell_hidden_tanh: bool = True
    eval_z: str = "deterministic"
    attention_tau: float = 0.3
    boundary_tau: float = stu.BOUNDARY_TAU
    force_z: float | None = None

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        if isinstance(self.hidden, int):
            return (self.hidden,) * self.layers
        return tuple(self.hidden)

    def validate(self) -> None:
        if self.layers < 2 and self.force_z is None:
            raise ConfigError("the hierarchy needs at least 2 layers (or a forced boundary bit)")
        if self.layers < 1:
            raise ConfigError("layers must be positive")
        if not isinstance(self.hidden, int) and len(self.hidden_sizes) != self.layers:
            raise ConfigError(
                f"{len(self.hidden_sizes)} hidden sizes given for {self.layers} layers")
        if min(self.hidden_sizes) < 1 or min(self.grid_side, self.feat_dim) < 1 \
                or self.classes < 2:
            raise ConfigError("hidden/grid_side/feat_dim must be positive and classes >= 2")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention mode {self.attention!r}; pick one of {ATTENTION_MODES}")
        if self.eval_z not in EVAL_Z_MODES:
            raise ConfigError(f"unknown eval_z mode {self.eval_z!r}; pick one of {EVAL_Z_MODES}")
        if self.attention_tau <= 0 or self.boundary_tau <= 0:
            raise ConfigError("temperatures must be positive")
        if self.force_z is not None and self.force_z not in (0.0, 1.0):
            raise ConfigError("force_z must be 0, 1 or unset")

    @property
    def locations(self) -> int:
        return self.grid_side ** 2


@dataclass
class StepOutput:
    """One time step of a single-clip forward pass."""

    probs: Tensor                      # (C,), sums to 1
    attention: at.AttentionResult
    z: tuple[float, ...]               # per-layer boundary bit
    hidden: list[np.ndarray]           # per-layer hidden state snapshot


@dataclass
class BatchOutput:
    """Everything the trainer needs from one batched forward pass."""

    step_probs: list[Tensor]               # per t: (B, C)
    attention: list[at.AttentionResult]    # per t
    z_history: np.ndarray                  # (T, L, B)
    update_mask: np.ndarray                # (T, L, B); 1 where the layer recomputed state
    h_history: list[np.ndarray]            # per layer: (T, B, hidden_l) value snapshots
    log_probs: list[Tensor] | None         # per t: (B, 1), reinforce mode only
    taus: list[np.ndarray] | None          # per t: (B,), adaptive mode only
    final_states: list[hc.LayerState] = field(default_factory=list)

    def mean_probs(self) -> np.ndarray:
        """Per-sample class probabilities averaged over time steps."""
        return np.mean([p.data for p in self.step_probs], axis=0)


class HMAN:
    """Attention + hierarchical recurrent stack + per-step classifier."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        self._build_params(rng)

    # -- parameters -----------------------------------------------------

    def _build_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        sizes = cfg.hidden_sizes

        def uniform(rows, cols, scale_dim):
            bound = 1.0 / np.sqrt(scale_dim)
            return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)

        self.params["attn.w_loc"] = uniform(cfg.locations, sizes[0], sizes[0])
        if cfg.attention == "gumbel-adaptive":
            self.params["attn.w_temp"] = uniform(sizes[0], 1, sizes[0])
            self.params["attn.b_temp"] = Tensor(np.zeros((1, 1)), requires_grad=True)
        for layer in range(1, cfg.layers + 1):
            below = cfg.feat_dim if layer == 1 else sizes[layer - 2]
            above = sizes[layer] if layer < cfg.layers else None
            lp = hc.init_layer_params(sizes[layer - 1], below_dim=below, above_dim=above,
                                      rng=rng)
            self.params[f"layer{layer}.u_rec"] = lp.u_rec
            if lp.u_top is not None:
                self.params[f"layer{layer}.u_top"] = lp.u_top
            self.params[f"layer{layer}.w_bot"] = lp.w_bot
            self.params[f"layer{layer}.bias"] = lp.bias
        total = sum(sizes)
        self.params["head.w"] = uniform(total, cfg.classes, total)
        self.params["head.b"] = Tensor(np.zeros((1, cfg.classes)), requires_grad=True)
        for name, p in self.params.items():
            p.name = name

    def layer_params(self, layer: int) -> hc.LayerParams:
        return hc.LayerParams(
            u_rec=self.params[f"layer{layer}.u_rec"],
            u_top=self.params.get(f"layer{layer}.u_top"),
            w_bot=self.params[f"layer{layer}.w_bot"],
            bias=self.params[f"layer{layer}.bias"],
        )

    def attention_params(self) -> at.AttentionParams:
        return at.AttentionParams(
            w_loc=self.params["attn.w_loc"],
            w_temp=self.params.get("attn.w_temp"),
            b_temp=self.params.get("attn.b_temp"),
        )

    def zero_grad(self) -> None:
        ad.zero_grad(self.params.values())

    # -- forward ---------------------------------------------------------

    def _attend(self, h1_prev: Tensor, feats: Tensor, rng, train: bool,
                soft_attention_sample: bool) -> at.AttentionResult:
        cfg = self.config
        ap = self.attention_params()
        if cfg.attention == "soft":
            return at.soft_attend(h1_prev, feats, ap)
        if cfg.attention == "reinforce":
            return at.reinforce_hard_attend(h1_prev, feats, ap, rng=rng, training=train)
        deterministic = not train
        if cfg.attention == "gumbel-constant":
            tau = stu.Temperature(cfg.attention_tau)
        else:
            tau = stu.adaptive_tau(h1_prev, ap.w_temp, ap.b_temp)
        return at.gumbel_hard_attend(h1_prev, feats, ap, tau, rng=rng,
                                     deterministic=deterministic,
                                     soft_sample=soft_attention_sample)

    def forward_batch(self, x: np.ndarray, rng: np.random.Generator | None = None,
                      train: bool = True, soft_boundaries: bool = False,
                      soft_attention_sample: bool = False) -> BatchOutput:
        """Run a (B, T, K*K, D) batch through the network.

        Initial states are zero with boundary bits 0.  In training mode
        stochastic units draw from ``rng``; in evaluation mode the
        default configuration is fully deterministic (noise-free
        boundary bits, argmax attention).
        """
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[2] != cfg.locations or x.shape[3] != cfg.feat_dim:
            raise ConfigError(
                f"input shape {x.shape} does not match (B, T, {cfg.locations}, {cfg.feat_dim})")
        batch, steps = x.shape[0], x.shape[1]
        if steps < 1:
            raise ConfigError("need at least one time step")
        deterministic_z = (not train and cfg.eval_z == "deterministic")
        needs_rng = (cfg.force_z is None and not deterministic_z) or \
            (train and cfg.attention != "soft")
        if needs_rng and rng is None:
            raise ContractError("this configuration draws noise; pass an rng")

        states = [hc.initial_state(cfg.hidden, batch) for _ in range(cfg.layers)]
        ones = Tensor(np.ones((batch, 1)))
        reinforce = cfg.attention == "reinforce" and train
        adaptive = cfg.attention == "gumbel-adaptive"
        out = BatchOutput(step_probs=[], attention=[],
                          z_history=np.zeros((steps, cfg.layers, batch)),
                          update_mask=np.zeros((steps, cfg.layers, batch)),
                          h_history=np.zeros((steps, cfg.layers, batch, cfg.hidden)),
                          log_probs=[] if reinforce else None,
                          taus=[] if adaptive and train else None)
        head_w, head_b = self.params["head.w"], self.params["head.b"]

        for t in range(steps):
            feats = Tensor(x[:, t])
            result = self._attend(states[0].h, feats, rng, train, soft_attention_sample)
            out.attention.append(result)
            if reinforce:
                out.log_probs.append(result.log_prob)
            if out.taus is not None and result.tau is not None:
                out.taus.append(np.asarray(result.tau).reshape(-1))

            below_h, below_z = result.attended, ones
            new_states = []
            for idx in range(cfg.layers):
                above = states[idx + 1].h if idx + 1 < cfg.layers else None
                prev = states[idx]
                state = hc.step(prev, below_h, below_z, above, self.layer_params(idx + 1),
                                rng=rng, tau=cfg.boundary_tau,
                                soft_boundaries=soft_boundaries,
                                deterministic=deterministic_z,
                                hidden_tanh=cfg.cell_hidden_tanh,
                                force_z=cfg.force_z)
                out.z_history[t, idx] = state.z.data[:, 0]
                out.update_mask[t, idx] = 1.0 - (1.0 - prev.z.data[:, 0]) * (1.0 - below_z.data[:, 0])
                out.h_history[t, idx] = state.h.data
                new_states.append(state)
                below_h, below_z = state.h, state.z
            states = new_states
            stacked = ad.concat([s.h for s in states], axis=-1)
            probs = ad.softmax(stacked @ head_w + head_b, axis=-1)
            out.step_probs.append(probs)
        out.final_states = states
        return out

    def forward_sequence(self, x: np.ndarray, rng: np.random.Generator | None = None,
                         train: bool = False) -> list[StepOutput]:
        """Single-clip forward; ``x`` is (T, K*K, D)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ConfigError(f"forward_sequence expects (T, K*K, D), got {x.shape}")
        batch_out = self.forward_batch(x[None], rng=rng, train=train)
        steps = []
        for t, probs in enumerate(batch_out.step_probs):
            steps.append(StepOutput(
                probs=ad.reshape(probs, (self.config.classes,)),
                attention=batch_out.attention[t],
                z=tuple(float(v) for v in batch_out.z_history[t, :, 0]),
                hidden=[np.array(batch_out.h_history[t, layer, 0])
                        for layer in range(self.config.layers)],
            ))
        return steps

    def predict_video(self, blocks: list[np.ndarray],
                      rng: np.random.Generator | None = None) -> tuple[int, np.ndarray]:
        """Average per-step predictions within each block, then across blocks.

        Runs in deterministic evaluation mode; hard attention selects by
        argmax and boundary bits are noise-free.  Ties resolve to the
        lowest class index.
        """
        if not blocks:
            raise ContractError("predict_video needs at least one block")
        with ad.no_grad():
            per_block = []
            for block in blocks:
                block = np.asarray(block, dtype=np.float64)
                out = self.forward_batch(block[None], rng=rng, train=False)
                per_block.append(out.mean_probs()[0])
        avg = np.mean(per_block, axis=0)
        return int(np.argmax(avg)), avg

    # -- persistence -------------------------------------------------------

    def save(self, path, extra_scalars: dict[str, str] | None = None,
             extra_tensors: dict[str, np.ndarray] | None = None) -> None:
        save_checkpoint(path, self, extra_scalars, extra_tensors)

    @classmethod
    def load(cls, path) -> "HMAN":
        return load_checkpoint(path)[0]


def batch_sequence_loss(step_probs: list[Tensor], labels: np.ndarray) -> Tensor:
    """Batch mean of the per-sequence summed cross entropy.

    ``step_probs`` holds (B, C) probability rows per step; ``labels``
    is (B,) class ids.  Per sequence the loss sums -log p(label) over
    steps, with the log floored at 1e-12.
    """
    labels = np.asarray(labels, dtype=np.intp)
    classes = step_probs[0].shape[-1]
    if labels.min() < 0 or labels.max() >= classes:
        raise ContractError(f"labels must lie in [0, {classes})")
    total = None
    for probs in step_probs:
        term = ad.clipped_log(ad.take_rows(probs, labels), at.LOG_FLOOR)
        total = term if total is None else total + term
    return -ad.mean(total)


def sequence_loss(outputs: list[StepOutput], label: int) -> Tensor:
    """Summed per-step cross entropy of one clip against a single label."""
    if not outputs:
        raise ContractError("sequence_loss needs at least one step output")
    classes = outputs[0].probs.shape[-1]
    if not 0 <= int(label) < classes:
        raise ContractError(f"label {label} outside [0, {classes})")
    idx = np.array([int(label)])
    total = None
    for step in outputs:
        row = ad.reshape(step.probs, (1, classes))
        term = ad.clipped_log(ad.take_rows(row, idx), at.LOG_FLOOR)
        total = term if total is None else total + term
    return ad.reshape(-total, ())


# -- checkpoint format -------------------------------------------------------
# magic "HMAN1", u32 LE config-block length, the config block as UTF-8
# "key=value" lines, u32 LE tensor count, then per tensor: u16 LE name
# length, name, u8 ndim, ndim u32 LE extents, raw little-endian float64.

_CONFIG_FIELDS = ("layers", "hidden", "grid_side", "feat_dim", "classes", "attention",
                  "cell_hidden_tanh", "eval_z", "attention_tau", "boundary_tau", "force_z")


def _config_to_text(cfg: ModelConfig, extra: dict[str, str] | None) -> str:
    lines = ["format_version=1"]
    for name in _CONFIG_FIELDS:
        value = getattr(cfg, name)
        if value is None:
            text = ""
        elif isinstance(value, bool):
            text = "1" if value else "0"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{name}={text}")
    for key, value in (extra or {}).items():
        lines.append(f"x.{key}={value}")
    return "\n".join(lines) + "\n"


def _config_from_text(text: str, path) -> tuple[ModelConfig, dict[str, str]]:
    values: dict[str, str] = {}
    extras: dict[str, str] = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed config line {line!r}")
        key, _, val = line.partition("=")
        if key.startswith("x."):
            extras[key[2:]] = val
        else:
            values[key] = val
    try:
        cfg = ModelConfig(
            layers=int(values["layers"]), hidden=int(values["hidden"]),
            grid_side=int(values["grid_side"]), feat_dim=int(values["feat_dim"]),
            classes=int(values["classes"]), attention=values["attention"],
            cell_hidden_tanh=values["cell_hidden_tanh"] == "1",
            eval_z=values["eval_z"],
            attention_tau=float(values["attention_tau"]),
            boundary_tau=float(values["boundary_tau"]),
            force_z=None if values["force_z"] == "" else float(values["force_z"]),
        )
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: bad config block ({e})") from e
    return cfg, extras


def save_checkpoint(path, model: HMAN, extra_scalars: dict[str, str] | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    config_bytes = _config_to_text(model.config, extra_scalars).encode("utf-8")
    entries: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in model.params.items()]
    entries += [(n, np.asarray(v, dtype=np.float64)) for n, v in (extra_tensors or {}).items()]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(config_bytes)))
        f.write(config_bytes)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    """Byte reader that reports the offset of any truncation."""

    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.path = path
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(
                f"{self.path}: short read at byte {self.pos}: needed {n} bytes for {what}, "
                f"only {len(self.raw) - self.pos} left")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> tuple[HMAN, dict[str, str], dict[str, np.ndarray]]:
    """Rebuild a model (plus extra scalars/tensors) from a checkpoint file."""
    reader = _Reader(Path(path).read_bytes(), path)
    magic = reader.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {CHECKPOINT_MAGIC!r}")
    config_len = reader.u32("config length")
    cfg, extras = _config_from_text(reader.take(config_len, "config block").decode("utf-8"), path)
    model = HMAN(cfg, np.random.default_rng(0))
    count = reader.u32("tensor count")
    extra_tensors: dict[str, np.ndarray] = {}
    seen = set()
    for _ in range(count):
        name_len = struct.unpack("<H", reader.take(2, "name length"))[0]
        name = reader.take(name_len, "tensor name").decode("utf-8")
        ndim = struct.unpack("<B", reader.take(1, "rank"))[0]
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim, f"shape of {name}"))
        data = np.frombuffer(reader.take(8 * int(np.prod(shape, dtype=np.int64)),
                                         f"data of {name}"), dtype="<f8").reshape(shape)
        seen.add(name)
        if name in model.params:
            if model.params[name].shape != tuple(shape):
                raise FormatError(
                    f"{path}: tensor {name} has shape {tuple(shape)}, model expects "
                    f"{model.params[name].shape}")
            model.params[name].data = np.array(data)
        else:
            extra_tensors[name] = np.array(data)
    if reader.pos != len(reader.raw):
        raise FormatError(f"{path}: {len(reader.raw) - reader.pos} trailing bytes at byte {reader.pos}")
    missing = sorted(set(model.params) - seen)
    if missing:
        raise FormatError(f"{path}: checkpoint is missing parameters {missing}")
    return model, extras, extra_tensors
