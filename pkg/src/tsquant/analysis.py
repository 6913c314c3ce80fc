"""Layer-local error evaluation: sensitivity cells, ablation rows, ratio histograms."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .runtime import QuantizedModel, estimate_memory, forward_quantized
from .tensor_math import cosine_error
from .toy_dit import Expert, ToyModel, group_records, split_path

SENSITIVITY_HEADER = ("expert", "block", "module", "cosine_error")
ABLATION_HEADER = ("variant", "mean_layer_mse", "mean_cosine_error", "model_bytes")
HISTOGRAM_HEADER = ("variant", "expert", "bin", "ratio", "count")


@dataclass(frozen=True)
class LayerError:
    expert: Expert
    path: str
    mse: float
    cosine: float


def layer_errors(qm: QuantizedModel, model: ToyModel, records) -> list[LayerError]:
    """Local output error of every quantized layer on its own recorded inputs.

    ``mse`` is the mean squared error over all output elements of all records;
    ``cosine`` is the mean per-record cosine error.
    """
    out = []
    for (expert, path), recs in sorted(group_records(records).items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
        layer = qm.layer(expert, path)
        w = model.layer_weight(expert, path).astype(np.float64)
        sq, n, cos = 0.0, 0, []
        for r in recs:
            x = r.input.astype(np.float64)
            y = x @ w
            y_hat = forward_quantized(layer, x, r.timestep, expert, qm.policy)
            sq += float(np.sum((y - y_hat) ** 2))
            n += y.size
            cos.append(cosine_error(y, y_hat))
        out.append(LayerError(expert, path, sq / n, float(np.mean(cos))))
    return out


@dataclass(frozen=True)
class SensitivityCell:
    expert: Expert
    block: int
    module: str
    cosine_error: float


def sensitivity(errors: list[LayerError]) -> list[SensitivityCell]:
    cells = []
    for e in errors:
        block, module = split_path(e.path)
        cells.append(SensitivityCell(e.expert, block, module, e.cosine))
    return cells


def module_ranking(cells) -> list[tuple[str, float]]:
    """Modules sorted by mean cosine error, most sensitive first."""
    acc = {}
    for c in cells:
        acc.setdefault(c.module, []).append(c.cosine_error)
    return sorted(((m, float(np.mean(v))) for m, v in acc.items()), key=lambda kv: -kv[1])


@dataclass(frozen=True)
class AblationRow:
    variant: str
    mean_layer_mse: float
    mean_cosine_error: float
    model_bytes: int


def ablation_row(qm: QuantizedModel, model: ToyModel, records) -> AblationRow:
    errs = layer_errors(qm, model, records)
    return AblationRow(
        qm.qconfig.variant,
        float(np.mean([e.mse for e in errs])),
        float(np.mean([e.cosine for e in errs])),
        estimate_memory(qm)["total"],
    )


def ratio_histogram(qm: QuantizedModel) -> list[tuple[str, str, int, float, int]]:
    hist = qm.policy.ratio_histogram()
    return [
        (qm.qconfig.variant, e.value, k, ratio, count)
        for (e, k, ratio), count in sorted(hist.items(), key=lambda kv: (kv[0][0].value, kv[0][1], kv[0][2]))
    ]


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([v.value if isinstance(v, Expert) else v for v in row])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
