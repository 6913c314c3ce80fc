"""Calibrated W4A4 layers, whole-model quantization, memory accounting and I/O.

A quantized layer computes

    x_hat = x / d
    y = x_hat @ l1 @ l2 + Q_A(x_hat; s_A) @ dequant(R)

with ``s_A`` fetched from the clipping policy for the current timestep bin.
Layers retained at high precision skip smoothing and compute ``x @ W``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from . import clip_search as cs
from . import quantizers as qz
from .errors import CoverageError, FormatError, IntegrityError, PolicyIncompleteError, ShapeError
from .gptq import HessianAccumulator, accumulate, gptq_quantize
from .lowrank import LowRankFactors, split_low_rank
from .smoothing import channel_absmax, compute_smoothing
from .toy_dit import EXPERTS, Expert, ToyDiTConfig, ToyModel, group_records, split_path

log = logging.getLogger(__name__)

FORMAT_VERSION = "w4a4-v1"

VARIANTS = ("rtn", "svd_rtn", "svd_gptq", "svd_gptq_tsclip", "keepfp_diag")
SENSITIVE_MODULES = ("self_attn.o", "ffn.2")


@dataclass(frozen=True)
class QuantConfig:
    variant: str = "svd_gptq_tsclip"
    rank: int = 2
    grid: str = "mxfp4"
    group: int | None = None
    weight_mode: str = "gptq"  # or "rtn"
    smooth: bool = True
    migration: float = 0.5
    bins: int = 4
    ratios: tuple = cs.DEFAULT_RATIOS
    stat_mode: str = "absmax"
    damping: float = 0.01
    keep_fp: tuple = ()
    hp_dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(self, "keep_fp", tuple(self.keep_fp))
        object.__setattr__(self, "grid", qz.QuantGrid.parse(self.grid).value)
        if self.weight_mode not in ("gptq", "rtn"):
            raise ValueError(f"weight_mode must be 'gptq' or 'rtn', got {self.weight_mode!r}")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "QuantConfig":
        """Preset matching one ablation row; ``overrides`` win over the preset."""
        presets = {
            "rtn": dict(smooth=False, rank=0, weight_mode="rtn", bins=1, ratios=(1.0,)),
            "svd_rtn": dict(weight_mode="rtn", bins=1, ratios=(1.0,)),
            "svd_gptq": dict(weight_mode="gptq", bins=1, ratios=(1.0,)),
            "svd_gptq_tsclip": dict(weight_mode="gptq"),
            "keepfp_diag": dict(weight_mode="gptq", keep_fp=SENSITIVE_MODULES),
        }
        if variant not in presets:
            raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        kw = {**presets[variant], **{k: v for k, v in overrides.items() if v is not None}}
        return cls(variant=variant, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["keep_fp"] = list(self.keep_fp)
        return d

    @classmethod
    def from_dict(cls, d) -> "QuantConfig":
        return cls(**d)

    def is_kept(self, path: str) -> bool:
        _, module = split_path(path)
        return any(p == "*" or module == p or path.endswith("." + p) for p in self.keep_fp)


@dataclass(eq=False)
class QuantizedLinear:
    path: str
    c_in: int
    c_out: int
    grid: qz.QuantGrid
    smoothing: np.ndarray
    lowrank: LowRankFactors | None = None
    residual: qz.GroupedWeight | None = None
    w_hat: np.ndarray | None = None
    original: np.ndarray | None = field(default=None, repr=False)

    @property
    def kept_fp(self) -> bool:
        return self.w_hat is not None

    @property
    def rank(self) -> int:
        return 0 if self.lowrank is None else self.lowrank.rank

    @cached_property
    def _residual_dq(self) -> np.ndarray:
        return self.residual.dequantize()

    @cached_property
    def _d(self) -> np.ndarray:
        return self.smoothing.astype(np.float64)

    @cached_property
    def _l1(self) -> np.ndarray:
        return self.lowrank.l1.astype(np.float64)

    @cached_property
    def _l2(self) -> np.ndarray:
        return self.lowrank.l2.astype(np.float64)

    def residual_dequant(self) -> np.ndarray:
        return self._residual_dq

    def reference_weight(self) -> np.ndarray:
        """Full-precision ``W`` this layer approximates (calibration only)."""
        if self.original is not None:
            return np.asarray(self.original, dtype=np.float64)
        if self.kept_fp:
            return self.w_hat.astype(np.float64) / self._d[:, None]
        return (self._l1 @ self._l2 + self._residual_dq) / self._d[:, None]

    def forward_with_params(self, x, params: qz.UniformQuantParams) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.c_in:
            raise ShapeError(f"{self.path}: input has {x.shape[-1]} channels, expected {self.c_in}")
        x_hat = x / self._d
        if self.kept_fp:
            return x_hat @ self.w_hat.astype(np.float64)
        out = qz.quantize_activation(x_hat, params, self.grid) @ self._residual_dq
        if self.rank:
            out = out + (x_hat @ self._l1) @ self._l2
        return out

    def __eq__(self, other):
        if not isinstance(other, QuantizedLinear):
            return NotImplemented
        return (
            (self.path, self.c_in, self.c_out, self.grid) == (other.path, other.c_in, other.c_out, other.grid)
            and _arr_eq(self.smoothing, other.smoothing)
            and self.lowrank == other.lowrank
            and self.residual == other.residual
            and _arr_eq(self.w_hat, other.w_hat)
        )


def _arr_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)


def forward_quantized(layer: QuantizedLinear, x, t: float, expert, policy: cs.ClippingPolicy | None) -> np.ndarray:
    """Quantized forward of ``layer`` at timestep ``t`` using the bin's stored scale."""
    if layer.kept_fp:
        return layer.forward_with_params(x, None)
    if policy is None:
        raise PolicyIncompleteError(f"no clipping policy for {layer.path}")
    return layer.forward_with_params(x, policy.lookup_scale(layer.path, expert, t))


@dataclass
class LayerReport:
    expert: Expert
    path: str
    gptq_objective: float | None = None
    rtn_objective: float | None = None


def quantize_layer(path: str, w, inputs, qcfg: QuantConfig, keep_original: bool = True):
    """Smooth, split and round one layer from its calibration inputs.

    Returns:
        ``(layer, report_or_None)``; the clipping policy is not touched.
    """
    w = np.asarray(w, dtype=np.float64)
    c_in, c_out = w.shape
    hp = np.dtype(qcfg.hp_dtype)
    grid = qz.QuantGrid.parse(qcfg.grid)
    original = w if keep_original else None
    if qcfg.is_kept(path):
        d = np.ones(c_in, dtype=hp)
        return QuantizedLinear(path, c_in, c_out, grid, d, w_hat=w.astype(hp), original=original), None

    if qcfg.smooth:
        d = compute_smoothing(channel_absmax(inputs), w, qcfg.migration).astype(hp)
    else:
        d = np.ones(c_in, dtype=hp)
    d64 = d.astype(np.float64)
    w_hat = w * d64[:, None]
    rank = min(qcfg.rank, c_in, c_out)
    factors, _ = split_low_rank(w_hat, rank)
    factors = factors.astype(hp)
    residual = w_hat - factors.product()

    report = None
    if qcfg.weight_mode == "gptq":
        acc = HessianAccumulator.zeros(c_in)
        for x in inputs:
            acc = accumulate(acc, np.asarray(x, dtype=np.float64) / d64)
        packed, rep = gptq_quantize(residual, acc, grid, qcfg.group, qcfg.damping)
        report = (rep.objective, rep.rtn_objective)
    else:
        packed = qz.quantize_weight_grouped(residual, grid, qcfg.group)
    layer = QuantizedLinear(path, c_in, c_out, grid, d, lowrank=factors, residual=packed, original=original)
    return layer, report


@dataclass(eq=False)
class QuantizedModel:
    config: ToyDiTConfig
    qconfig: QuantConfig
    layers: dict  # expert -> path -> QuantizedLinear
    policy: cs.ClippingPolicy
    version: str = FORMAT_VERSION
    reports: list = field(default_factory=list, repr=False)

    def layer(self, expert, path: str) -> QuantizedLinear:
        return self.layers[Expert(expert)][path]

    def iter_layers(self):
        for expert in sorted(self.layers, key=lambda e: e.value):
            for path in sorted(self.layers[expert]):
                yield expert, self.layers[expert][path]

    def linear(self, expert, path: str, t: float, x) -> np.ndarray:
        """Drop-in for the toy trajectory's ``linear`` hook."""
        return forward_quantized(self.layer(expert, path), x, t, expert, self.policy)

    def check_policy(self) -> None:
        pairs = [(e, l.path) for e, l in self.iter_layers() if not l.kept_fp]
        missing = self.policy.missing(pairs)
        if missing:
            raise PolicyIncompleteError(
                f"clipping policy incomplete: {len(missing)} keys missing, e.g. {cs.policy_key(*missing[0])}"
            )

    def __eq__(self, other):
        if not isinstance(other, QuantizedModel):
            return NotImplemented
        if (self.version, self.config, self.qconfig) != (other.version, other.config, other.qconfig):
            return False
        if self.policy.to_dict() != other.policy.to_dict():
            return False
        if {e: set(v) for e, v in self.layers.items()} != {e: set(v) for e, v in other.layers.items()}:
            return False
        return all(l == other.layer(e, l.path) for e, l in self.iter_layers())


def quantize_model(model: ToyModel, records, qcfg: QuantConfig | None = None) -> QuantizedModel:
    """Run smoothing, low-rank split, residual rounding and clip search per expert and layer.

    Raises:
        CoverageError: some (expert, layer, bin) triple has no records.
    """
    qcfg = qcfg or QuantConfig()
    cfg = model.config
    grid = qz.QuantGrid.parse(qcfg.grid)
    binnings = cs.expert_binnings(cfg, qcfg.bins)
    grouped = group_records(records)
    pairs = [(e, p) for e in EXPERTS for p in cfg.layer_paths()]
    binned = cs.bin_inputs(records, binnings)
    cs.check_coverage(binned, binnings, pairs)

    policy = cs.ClippingPolicy(grid, tuple(sorted(qcfg.ratios)), binnings)
    layers = {e: {} for e in EXPERTS}
    reports = []
    for expert, path in pairs:
        inputs = [np.asarray(r.input, dtype=np.float64) for r in grouped[(expert, path)]]
        layer, rep = quantize_layer(path, model.layer_weight(expert, path), inputs, qcfg)
        layers[expert][path] = layer
        if rep is not None:
            reports.append(LayerReport(expert, path, *rep))
        if layer.kept_fp:
            continue
        by_bin = {k: binned[(expert, path, k)] for k in range(binnings[expert].n_bins)}
        d = layer.smoothing.astype(np.float64)
        stats = {k: cs.reference_magnitude([x / d for x in xs], qcfg.stat_mode) for k, xs in by_bin.items()}
        result = cs.search_clip_ratio(layer, by_bin, stats, qcfg.ratios)
        for k, entry in result.entries.items():
            policy.entries[(expert, path, k)] = entry
    log.debug("quantized %d layers (%s)", sum(len(v) for v in layers.values()), qcfg.variant)
    qm = QuantizedModel(cfg, qcfg, layers, policy, reports=reports)
    qm.check_policy()
    return qm


# ---------------------------------------------------------- memory + file I/O


def _layer_arrays(layer: QuantizedLinear) -> list[tuple[str, np.ndarray]]:
    arrays = [("smoothing", layer.smoothing)]
    if layer.kept_fp:
        arrays.append(("w_hat", layer.w_hat))
        return arrays
    if layer.rank:
        arrays += [("l1", layer.lowrank.l1), ("l2", layer.lowrank.l2)]
    arrays += [("codes", layer.residual.codes), ("scales", layer.residual.scales)]
    return arrays


def estimate_memory(qm: QuantizedModel) -> dict:
    """Byte counts per component; ``total`` equals the serialized payload size."""
    parts = {"codes": 0, "scales": 0, "lowrank": 0, "smoothing": 0, "kept_fp": 0}
    baseline = 0
    for _, layer in qm.iter_layers():
        baseline += 2 * layer.c_in * layer.c_out
        for name, arr in _layer_arrays(layer):
            key = {"l1": "lowrank", "l2": "lowrank", "w_hat": "kept_fp"}.get(name, name)
            parts[key] += int(arr.nbytes)
    parts["total"] = sum(parts.values())
    parts["baseline_16bit"] = baseline
    return parts


def payload_path(path) -> Path:
    path = Path(path)
    if path.suffix == ".bin":
        raise FormatError("manifest path must not end in .bin")
    return path.with_suffix(".bin")


def _checksum(blob: bytes) -> str:
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def serialize(qm: QuantizedModel, path) -> Path:
    """Write ``path`` (JSON manifest) and its sibling ``.bin`` payload."""
    path = Path(path)
    chunks, layers_meta, offset = [], [], 0
    for expert, layer in qm.iter_layers():
        meta = {
            "expert": expert.value,
            "path": layer.path,
            "c_in": layer.c_in,
            "c_out": layer.c_out,
            "grid": layer.grid.value,
            "kept_fp": layer.kept_fp,
            "rank": layer.rank,
            "group": None if layer.residual is None else layer.residual.group,
            "arrays": {},
        }
        for name, arr in _layer_arrays(layer):
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            blob = le.tobytes()
            meta["arrays"][name] = {
                "offset": offset,
                "nbytes": len(blob),
                "dtype": arr.dtype.str.lstrip("<>=|"),
                "shape": list(arr.shape),
            }
            chunks.append(blob)
            offset += len(blob)
        layers_meta.append(meta)
    payload = b"".join(chunks)
    manifest = {
        "version": qm.version,
        "config": qm.config.to_dict(),
        "quant": qm.qconfig.to_dict(),
        "policy": qm.policy.to_dict(),
        "layers": layers_meta,
        "payload": {"file": payload_path(path).name, "bytes": len(payload), "checksum": _checksum(payload)},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    payload_path(path).write_bytes(payload)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def deserialize(path) -> QuantizedModel:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {manifest.get('version')!r}")
    payload = (path.parent / manifest["payload"]["file"]).read_bytes()
    if len(payload) != manifest["payload"]["bytes"]:
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, manifest says {manifest['payload']['bytes']}")
    if _checksum(payload) != manifest["payload"]["checksum"]:
        raise IntegrityError(f"{path}: payload checksum mismatch")

    def load(spec):
        dt = np.dtype(spec["dtype"]).newbyteorder("<")
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(spec["shape"])), offset=spec["offset"])
        return arr.reshape(spec["shape"]).astype(dt.newbyteorder("="))

    cfg = ToyDiTConfig.from_dict(manifest["config"])
    qcfg = QuantConfig.from_dict(manifest["quant"])
    layers = {e: {} for e in EXPERTS}
    for meta in manifest["layers"]:
        arrs = {k: load(v) for k, v in meta["arrays"].items()}
        grid = qz.QuantGrid.parse(meta["grid"])
        if meta["kept_fp"]:
            layer = QuantizedLinear(meta["path"], meta["c_in"], meta["c_out"], grid, arrs["smoothing"], w_hat=arrs["w_hat"])
        else:
            hp = arrs["smoothing"].dtype
            factors = LowRankFactors(
                arrs.get("l1", np.zeros((meta["c_in"], 0), dtype=hp)),
                arrs.get("l2", np.zeros((0, meta["c_out"]), dtype=hp)),
            )
            residual = qz.GroupedWeight(grid, meta["group"], meta["c_in"], meta["c_out"], arrs["codes"], arrs["scales"])
            layer = QuantizedLinear(meta["path"], meta["c_in"], meta["c_out"], grid, arrs["smoothing"],
                                    lowrank=factors, residual=residual)
        layers[Expert(meta["expert"])][meta["path"]] = layer
    layers = {e: v for e, v in layers.items() if v}
    policy = cs.ClippingPolicy.from_dict(manifest["policy"])
    return QuantizedModel(cfg, qcfg, layers, policy, version=manifest["version"])


def empty_model(cfg: ToyDiTConfig | None = None, qcfg: QuantConfig | None = None) -> QuantizedModel:
    """A model with no layers (valid on disk, useful as a degenerate case)."""
    cfg = cfg or ToyDiTConfig()
    qcfg = qcfg or QuantConfig()
    grid = qz.QuantGrid.parse(qcfg.grid)
    policy = cs.ClippingPolicy(grid, tuple(sorted(qcfg.ratios)), cs.expert_binnings(cfg, qcfg.bins))
    return QuantizedModel(cfg, qcfg, {}, policy)


def with_layers(qm: QuantizedModel, layers: dict) -> QuantizedModel:
    return replace(qm, layers=layers)
