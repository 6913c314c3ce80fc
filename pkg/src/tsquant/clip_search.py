"""Timestep-binned activation clipping: statistics, ratio search and lookup.

For every (expert, layer, bin) the activation clip threshold is
``ratio * m`` where ``m`` is the bin's reference magnitude, and the static
activation scale is ``ratio * m / q_max``. The ratio is chosen from a small
candidate set by minimizing the layer's local output error over that bin's
calibration inputs.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError, DomainError, PolicyIncompleteError, RangeError
from .quantizers import QuantGrid, UniformQuantParams
from .toy_dit import Expert

DEFAULT_RATIOS = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
MIN_MAGNITUDE = 1e-12
_RANGE_TOL = 1e-12


@dataclass(frozen=True)
class TimestepBinning:
    """Partition of ``[lo, hi]`` at ascending ``boundaries``.

    Bin indices grow with the timestep; a boundary value belongs to the bin
    above it (the noisier side).
    """

    lo: float
    hi: float
    boundaries: tuple = ()

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if not self.lo < self.hi:
            raise DomainError(f"empty timestep range [{self.lo}, {self.hi}]")
        if any(y <= x for x, y in zip(b, b[1:])):
            raise DomainError(f"bin boundaries must be strictly ascending: {b}")
        if b and not (self.lo < b[0] and b[-1] < self.hi):
            raise DomainError(f"bin boundaries {b} must lie inside ({self.lo}, {self.hi})")

    @classmethod
    def uniform(cls, lo: float, hi: float, k: int) -> "TimestepBinning":
        if k < 1:
            raise DomainError(f"need at least one bin, got {k}")
        edges = np.linspace(lo, hi, k + 1)[1:-1]
        return cls(float(lo), float(hi), tuple(float(e) for e in edges))

    @property
    def n_bins(self) -> int:
        return len(self.boundaries) + 1

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "boundaries": list(self.boundaries)}

    @classmethod
    def from_dict(cls, d) -> "TimestepBinning":
        return cls(d["lo"], d["hi"], tuple(d["boundaries"]))


def assign_bin(binning: TimestepBinning, t: float) -> int:
    t = float(t)
    if not binning.lo - _RANGE_TOL <= t <= binning.hi + _RANGE_TOL:
        raise RangeError(f"timestep {t} outside [{binning.lo}, {binning.hi}]")
    return int(np.searchsorted(binning.boundaries, t, side="right"))


def expert_binnings(cfg, k: int) -> dict:
    """Per-expert uniform binning of each expert's share of the trajectory."""
    return {e: TimestepBinning.uniform(*cfg.expert_range(e), k) for e in Expert}


def _binning_for(binning, expert) -> TimestepBinning:
    if isinstance(binning, TimestepBinning):
        return binning
    return binning[Expert(expert)]


def parse_stat_mode(mode) -> tuple[str, float | None]:
    """Accept ``"absmax"``, ``"percentile:99.9"`` or ``("percentile", 99.9)``."""
    if isinstance(mode, tuple):
        name, p = mode
        return str(name), float(p)
    mode = str(mode)
    if mode == "absmax":
        return "absmax", None
    if mode.startswith("percentile"):
        _, _, p = mode.partition(":")
        return "percentile", float(p or 99.9)
    raise DomainError(f"unknown statistic mode {mode!r}")


def bin_inputs(records, binning, transform=None) -> dict:
    """Group record inputs by ``(expert, layer, bin)``.

    ``transform(expert, layer, x)`` may rewrite each input (e.g. smoothing).
    """
    out = defaultdict(list)
    for r in records:
        expert = Expert(r.expert)
        k = assign_bin(_binning_for(binning, expert), r.timestep)
        x = np.asarray(r.input, dtype=np.float64)
        if transform is not None:
            x = transform(expert, r.layer, x)
        out[(expert, r.layer, k)].append(x)
    return dict(out)


def check_coverage(keys, binning, pairs) -> None:
    """Raise CoverageError unless every (expert, layer) in ``pairs`` has all bins."""
    keys = set(keys)
    missing = [
        (Expert(e).value, layer, k)
        for e, layer in pairs
        for k in range(_binning_for(binning, e).n_bins)
        if (Expert(e), layer, k) not in keys
    ]
    if missing:
        head = ", ".join(f"{e}/{l}/{k}" for e, l, k in missing[:5])
        more = f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""
        raise CoverageError(f"no calibration records for {head}{more}", missing)


def reference_magnitude(xs, mode="absmax") -> float:
    name, p = parse_stat_mode(mode)
    if name == "absmax":
        return float(max(np.abs(x).max(initial=0.0) for x in xs))
    flat = np.concatenate([np.abs(np.asarray(x, dtype=np.float64)).ravel() for x in xs])
    return float(np.percentile(flat, p))


def collect_bin_stats(records, binning, mode="absmax", transform=None) -> dict:
    """Reference magnitude ``m`` for every ``(expert, layer, bin)`` seen in ``records``.

    Raises:
        CoverageError: some (expert, layer) pair lacks records in one of its bins.
    """
    grouped = bin_inputs(records, binning, transform)
    check_coverage(grouped, binning, {(e, l) for e, l, _ in grouped})
    return {key: reference_magnitude(xs, mode) for key, xs in grouped.items()}


@dataclass(frozen=True)
class PolicyEntry:
    ratio: float
    m: float
    scale: float

    @classmethod
    def build(cls, ratio: float, m: float, grid) -> "PolicyEntry":
        m_eff = max(float(m), MIN_MAGNITUDE)
        return cls(float(ratio), float(m), ratio * m_eff / QuantGrid.parse(grid).q_max)


def policy_key(expert, layer: str, k: int) -> str:
    return f"{Expert(expert).value}/{layer}/{k}"


@dataclass
class ClippingPolicy:
    """Lookup table ``(expert, layer, bin) -> PolicyEntry`` plus the bin layout."""

    grid: QuantGrid
    candidates: tuple
    binnings: dict  # expert -> TimestepBinning
    entries: dict = field(default_factory=dict)  # (expert, layer, bin) -> PolicyEntry

    def bin_of(self, expert, t: float) -> int:
        return assign_bin(self.binnings[Expert(expert)], t)

    def entry(self, layer: str, expert, t: float) -> PolicyEntry:
        key = (Expert(expert), layer, self.bin_of(expert, t))
        try:
            return self.entries[key]
        except KeyError:
            raise PolicyIncompleteError(f"clipping policy has no entry for {policy_key(*key)}") from None

    def lookup_scale(self, layer: str, expert, t: float) -> UniformQuantParams:
        return params_for(self.entry(layer, expert, t), self.grid)

    def missing(self, layers) -> list:
        """Keys absent for ``layers`` (iterable of (expert, layer))."""
        return [
            (Expert(e), l, k)
            for e, l in layers
            for k in range(self.binnings[Expert(e)].n_bins)
            if (Expert(e), l, k) not in self.entries
        ]

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.value,
            "candidates": list(self.candidates),
            "binnings": {e.value: b.to_dict() for e, b in self.binnings.items()},
            "entries": {
                policy_key(*key): {"ratio": v.ratio, "m": v.m, "scale": v.scale}
                for key, v in sorted(self.entries.items(), key=lambda kv: policy_key(*kv[0]))
            },
        }

    @classmethod
    def from_dict(cls, d) -> "ClippingPolicy":
        entries = {}
        for key, v in d["entries"].items():
            expert, rest = key.split("/", 1)
            layer, k = rest.rsplit("/", 1)
            entries[(Expert(expert), layer, int(k))] = PolicyEntry(v["ratio"], v["m"], v["scale"])
        return cls(
            grid=QuantGrid.parse(d["grid"]),
            candidates=tuple(d["candidates"]),
            binnings={Expert(e): TimestepBinning.from_dict(b) for e, b in d["binnings"].items()},
            entries=entries,
        )

    def ratio_histogram(self) -> dict:
        """``(expert, bin, ratio) -> count`` over all entries."""
        out = defaultdict(int)
        for (expert, _, k), v in self.entries.items():
            out[(expert, k, v.ratio)] += 1
        return dict(out)


def params_for(entry: PolicyEntry, grid) -> UniformQuantParams:
    q = QuantGrid.parse(grid).q_max
    return UniformQuantParams(scale=entry.scale, zero_point=0, q_min=-q, q_max=q)


def lookup_scale(policy: ClippingPolicy, layer: str, expert, t: float) -> UniformQuantParams:
    return policy.lookup_scale(layer, expert, t)


@dataclass
class SearchResult:
    entries: dict  # bin -> PolicyEntry
    errors: dict  # bin -> per-candidate mean squared error (candidate order)


def candidate_errors(layer, xs, reference_w, entries, grid) -> np.ndarray:
    """Mean per-sample ``||Y - Y_hat||^2`` of ``xs`` for each candidate entry."""
    w = np.asarray(reference_w, dtype=np.float64)
    targets = [x @ w for x in xs]
    errs = np.empty(len(entries))
    for i, entry in enumerate(entries):
        p = params_for(entry, grid)
        errs[i] = np.mean([np.sum((y - layer.forward_with_params(x, p)) ** 2) for x, y in zip(xs, targets)])
    return errs


def search_clip_ratio(layer, inputs_by_bin: dict, stats_by_bin: dict, candidates=DEFAULT_RATIOS,
                      reference_w=None) -> SearchResult:
    """Pick, per bin, the candidate ratio with the lowest local output error.

    Args:
        layer: quantized layer exposing ``forward_with_params(x, params)``,
            ``grid`` and ``reference_weight()``.
        inputs_by_bin: bin index -> list of raw layer inputs.
        stats_by_bin: bin index -> reference magnitude of the smoothed inputs.
        candidates: ratio set; ties go to the larger ratio.
        reference_w: full-precision weight; defaults to ``layer.reference_weight()``.
    """
    cands = sorted(float(c) for c in candidates)
    if not cands:
        raise DomainError("candidate ratio set is empty")
    w = layer.reference_weight() if reference_w is None else reference_w
    chosen, errors = {}, {}
    for k, xs in sorted(inputs_by_bin.items()):
        if not xs:
            raise CoverageError(f"bin {k} has no calibration inputs", [k])
        trial = [PolicyEntry.build(c, stats_by_bin[k], layer.grid) for c in cands]
        errs = candidate_errors(layer, xs, w, trial, layer.grid)
        best = 0
        for i in range(1, len(cands)):
            if errs[i] <= errs[best]:
                best = i
        chosen[k] = trial[best]
        errors[k] = errs
    return SearchResult(chosen, errors)
