"""A seeded two-expert toy diffusion Transformer and its denoising trajectory.

Each expert is a stack of pre-norm blocks (self-attention, cross-attention
against a fixed context, 4x FFN) whose linear layers carry the module names
used for sensitivity reporting. Early (noisy) timesteps are routed to the
high-noise expert and the normalized block inputs are modulated by
``gain ** t``, so activation ranges shrink as denoising proceeds.
"""

from __future__ import annotations

import enum
import fnmatch
import json
import struct
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError, FormatError

MODULES = (
    "self_attn.q",
    "self_attn.k",
    "self_attn.v",
    "self_attn.o",
    "cross_attn.q",
    "cross_attn.k",
    "cross_attn.v",
    "cross_attn.o",
    "ffn.0",
    "ffn.2",
)


class Expert(str, enum.Enum):
    HIGH_NOISE = "high_noise"
    LOW_NOISE = "low_noise"


EXPERTS = (Expert.HIGH_NOISE, Expert.LOW_NOISE)


def layer_path(block: int, module: str) -> str:
    return f"blocks.{block}.{module}"


def split_path(path: str) -> tuple[int, str]:
    parts = path.split(".", 2)
    if len(parts) != 3 or parts[0] != "blocks" or not parts[1].isdigit() or parts[2] not in MODULES:
        raise DomainError(f"not a layer path: {path!r}")
    return int(parts[1]), parts[2]


@dataclass(frozen=True)
class ToyDiTConfig:
    d_model: int = 64
    n_blocks: int = 6
    seq_len: int = 32
    n_steps: int = 40
    expert_boundary: float = 0.5
    nonstationarity_gain: float = 8.0
    seed: int = 0
    context_len: int = 16
    ffn_mult: int = 4
    weight_outlier_fraction: float = 0.05
    weight_outlier_scale: float = 8.0
    act_outlier_channels: int = 3
    act_outlier_scale: float = 12.0

    def __post_init__(self):
        if self.d_model < 8:
            raise DomainError("d_model must be at least 8")
        if self.n_blocks < 2:
            raise DomainError("n_blocks must be at least 2")
        if not 0.0 < self.expert_boundary < 1.0:
            raise DomainError("expert_boundary must lie strictly between 0 and 1")
        if self.nonstationarity_gain < 1.0:
            raise DomainError("nonstationarity_gain must be >= 1")
        if self.seq_len < 1 or self.n_steps < 1 or self.context_len < 1:
            raise DomainError("seq_len, n_steps and context_len must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDiTConfig":
        return cls(**d)

    def layer_paths(self) -> list[str]:
        return [layer_path(b, m) for b in range(self.n_blocks) for m in MODULES]

    def layer_dims(self, path: str) -> tuple[int, int]:
        _, module = split_path(path)
        d, f = self.d_model, self.d_model * self.ffn_mult
        if module == "ffn.0":
            return d, f
        if module == "ffn.2":
            return f, d
        return d, d

    def timesteps(self) -> np.ndarray:
        """Trajectory timesteps from 1 (pure noise) down to 0."""
        if self.n_steps == 1:
            return np.array([1.0])
        return np.linspace(1.0, 0.0, self.n_steps)

    def expert_for(self, t: float) -> Expert:
        return Expert.HIGH_NOISE if t >= self.expert_boundary else Expert.LOW_NOISE

    def expert_range(self, expert) -> tuple[float, float]:
        """Timestep interval handled by ``expert``."""
        if Expert(expert) is Expert.HIGH_NOISE:
            return self.expert_boundary, 1.0
        return 0.0, self.expert_boundary


@dataclass
class ToyModel:
    config: ToyDiTConfig
    weights: dict  # expert -> layer path -> float32 (c_in, c_out)
    norms: dict  # expert -> list of per-block (3, d_model) float32 gains
    context: np.ndarray

    def layer_weight(self, expert, path: str) -> np.ndarray:
        return self.weights[Expert(expert)][path]


@dataclass(frozen=True, eq=False)
class CalibrationRecord:
    layer: str
    expert: Expert
    timestep: float
    input: np.ndarray = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, CalibrationRecord):
            return NotImplemented
        return (
            (self.layer, self.expert, self.timestep) == (other.layer, other.expert, other.timestep)
            and self.input.dtype == other.input.dtype
            and np.array_equal(self.input, other.input)
        )


def _init_linear(rng, c_in, c_out, cfg: ToyDiTConfig) -> np.ndarray:
    w = rng.standard_normal((c_in, c_out)) / np.sqrt(c_in)
    n_out = max(1, int(round(cfg.weight_outlier_fraction * c_in)))
    rows = rng.choice(c_in, size=n_out, replace=False)
    w[rows] *= cfg.weight_outlier_scale
    return w.astype(np.float32)


def build_model(cfg: ToyDiTConfig) -> ToyModel:
    """Draw both experts' weights from ``cfg.seed``; bit-identical per seed."""
    rng = np.random.default_rng([cfg.seed, 0])
    weights, norms = {}, {}
    for expert in EXPERTS:
        layers = {}
        gains = []
        for block in range(cfg.n_blocks):
            for module in MODULES:
                path = layer_path(block, module)
                layers[path] = _init_linear(rng, *cfg.layer_dims(path), cfg)
            g = 1.0 + 0.1 * rng.standard_normal((3, cfg.d_model))
            for row in g:
                hot = rng.choice(cfg.d_model, size=min(cfg.act_outlier_channels, cfg.d_model), replace=False)
                row[hot] = cfg.act_outlier_scale * (1.0 + 0.25 * rng.random(hot.size))
            gains.append(g.astype(np.float32))
        weights[expert] = layers
        norms[expert] = gains
    context = rng.standard_normal((cfg.context_len, cfg.d_model)).astype(np.float32)
    return ToyModel(cfg, weights, norms, context)


def modulation(cfg: ToyDiTConfig, t: float) -> float:
    """Timestep gain applied to normalized block inputs: ``gain ** (t * t)``.

    Equals 1 at t=0 and ``gain`` at t=1, with most of the inflation
    concentrated in the noisiest steps.
    """
    t = float(t)
    return float(cfg.nonstationarity_gain) ** (t * t)


def _rmsnorm(x):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)


def _softmax(a):
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _make_filter(capture):
    if capture is None:
        return lambda path: True
    if callable(capture):
        return capture
    if isinstance(capture, str):
        capture = [capture]
    patterns = list(capture)
    return lambda path: any(
        fnmatch.fnmatchcase(path, p) or path.endswith("." + p) or path == p for p in patterns
    )


def expert_forward(model: ToyModel, expert, x: np.ndarray, t: float, linear=None, on_input=None):
    """Run one expert's block stack on latent ``x`` at timestep ``t``.

    Args:
        linear: optional ``linear(path, inp) -> out`` replacing ``inp @ W``.
        on_input: optional ``on_input(path, inp)`` hook called before every linear.
    """
    expert = Expert(expert)
    cfg = model.config
    ws = model.weights[expert]
    mod = modulation(cfg, t)
    scale = 1.0 / np.sqrt(cfg.d_model)

    def lin(path, inp):
        if on_input is not None:
            on_input(path, inp)
        if linear is not None:
            return linear(path, inp)
        return inp @ ws[path].astype(np.float64)

    ctx = model.context.astype(np.float64)
    for b in range(cfg.n_blocks):
        g = model.norms[expert][b].astype(np.float64)
        p = f"blocks.{b}."
        h = _rmsnorm(x) * g[0] * mod
        q, k, v = lin(p + "self_attn.q", h), lin(p + "self_attn.k", h), lin(p + "self_attn.v", h)
        x = x + lin(p + "self_attn.o", _softmax(q @ k.T * scale) @ v)
        h = _rmsnorm(x) * g[1] * mod
        q, k, v = lin(p + "cross_attn.q", h), lin(p + "cross_attn.k", ctx), lin(p + "cross_attn.v", ctx)
        x = x + lin(p + "cross_attn.o", _softmax(q @ k.T * scale) @ v)
        h = _rmsnorm(x) * g[2] * mod
        x = x + lin(p + "ffn.2", _gelu(lin(p + "ffn.0", h)))
    return x


def initial_latent(cfg: ToyDiTConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 1])
    return rng.standard_normal((cfg.seq_len, cfg.d_model))


def denoise_trajectory(model: ToyModel, cfg: ToyDiTConfig | None = None, capture=None, linear=None):
    """Euler-style denoising from t=1 to t=0, capturing per-layer inputs.

    Args:
        capture: ``None`` for every layer, a pattern/suffix list, a predicate,
            or an empty list to capture nothing.
        linear: optional ``linear(expert, path, t, inp)`` override, e.g. a
            quantized layer; defaults to the full-precision weights.

    Returns:
        ``(latent, records)``; records hold float32 copies of layer inputs.
    """
    cfg = cfg or model.config
    want = _make_filter(capture)
    ts = cfg.timesteps()
    dt = 1.0 / max(cfg.n_steps - 1, 1)
    x = initial_latent(cfg)
    records = []
    for t in ts:
        t = float(t)
        expert = cfg.expert_for(t)

        def hook(path, inp, expert=expert, t=t):
            if want(path):
                records.append(CalibrationRecord(path, expert, t, np.asarray(inp, dtype=np.float32).copy()))

        lin = None
        if linear is not None:
            lin = lambda path, inp, expert=expert, t=t: linear(expert, path, t, inp)  # noqa: E731
        y = expert_forward(model, expert, x, t, linear=lin, on_input=hook)
        x = x - (y - x) * dt
    return x, records


def group_records(records) -> dict:
    """Map ``(expert, layer)`` to that pair's records in trajectory order."""
    out = defaultdict(list)
    for r in records:
        out[(Expert(r.expert), r.layer)].append(r)
    return dict(out)


# ------------------------------------------------------------ calibration dump

_MAGIC = b"TSQCAL1\n"
_EXPERT_CODE = {Expert.HIGH_NOISE: 0, Expert.LOW_NOISE: 1}
_CODE_EXPERT = {v: k for k, v in _EXPERT_CODE.items()}


def save_records(path, cfg: ToyDiTConfig, records) -> None:
    """Write a calibration dump: magic, JSON header, then packed records.

    Each record is ``u16 path_len | path | u8 expert | f64 t | u32 rows |
    u32 cols | rows*cols little-endian float32``.
    """
    header = json.dumps({"config": cfg.to_dict(), "n_records": len(records)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for r in records:
            name = r.layer.encode()
            data = np.ascontiguousarray(r.input, dtype="<f4")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<BdII", _EXPERT_CODE[Expert(r.expert)], r.timestep, *data.shape))
            fh.write(data.tobytes())


def load_records(path):
    """Inverse of :func:`save_records`; returns ``(config, records)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise FormatError(f"{path} is not a calibration dump")
    pos = len(_MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        header = json.loads(blob[pos : pos + hlen])
        pos += hlen
        cfg = ToyDiTConfig.from_dict(header["config"])
        records = []
        for _ in range(header["n_records"]):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode()
            pos += nlen
            code, t, rows, cols = struct.unpack_from("<BdII", blob, pos)
            pos += struct.calcsize("<BdII")
            nbytes = rows * cols * 4
            if pos + nbytes > len(blob):
                raise FormatError("calibration dump is truncated")
            data = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols)
            pos += nbytes
            records.append(CalibrationRecord(name, _CODE_EXPERT[code], t, data.astype(np.float32)))
    except (struct.error, KeyError, ValueError) as exc:
        raise FormatError(f"corrupt calibration dump {path}: {exc}") from exc
    return cfg, records
