"""tsquant command line: calibrate -> quantize -> sensitivity -> report.

Exit codes: 0 success, 1 usage error, 2 runtime error. Relative output paths
are resolved against ``$TSQUANT_OUT_DIR`` when it is set.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from . import analysis as an
from .clip_search import bin_inputs, check_coverage, expert_binnings
from .errors import TsQuantError
from .runtime import VARIANTS, QuantConfig, deserialize, estimate_memory, quantize_model, serialize
from .toy_dit import EXPERTS, ToyDiTConfig, build_model, denoise_trajectory, load_records, save_records

log = logging.getLogger("tsquant")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
OUT_ENV = "TSQUANT_OUT_DIR"
ABLATION_VARIANTS = ("rtn", "svd_rtn", "svd_gptq", "svd_gptq_tsclip")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out(path) -> Path:
    path = Path(path)
    base = os.environ.get(OUT_ENV)
    if base and not path.is_absolute():
        return Path(base) / path
    return path


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _ratio_list(text):
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratio list {text!r}") from None
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("ratios must be a non-empty list in (0, 1]")
    return vals


def _suffix_list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


# ------------------------------------------------------------------ commands


def cmd_calibrate(args) -> int:
    cfg = ToyDiTConfig(
        d_model=args.d_model, n_blocks=args.blocks, seq_len=args.seq_len, n_steps=args.steps,
        expert_boundary=args.boundary, nonstationarity_gain=args.gain, seed=args.seed,
    )
    model = build_model(cfg)
    _, records = denoise_trajectory(model)
    binnings = expert_binnings(cfg, args.bins)
    grouped = bin_inputs(records, binnings)
    check_coverage(grouped, binnings, [(e, p) for e in EXPERTS for p in cfg.layer_paths()])
    out = _out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_records(out, cfg, records)
    counts = Counter()
    for (expert, _, k), xs in grouped.items():
        counts[(expert.value, k)] += len(xs)
    print(f"wrote {len(records)} records to {out}")
    for (expert, k), n in sorted(counts.items()):
        print(f"  {expert} bin {k}: {n} records")
    return EXIT_OK


def _quant_config(args) -> QuantConfig:
    return QuantConfig.for_variant(
        args.variant, rank=args.rank, grid=args.grid, keep_fp=args.keep_fp,
        ratios=args.ratios, bins=args.bins, group=args.group,
    )


def cmd_quantize(args) -> int:
    cfg, records = load_records(args.calib)
    qcfg = _quant_config(args)
    qm = quantize_model(build_model(cfg), records, qcfg)
    out = serialize(qm, _out(args.out))
    mem = estimate_memory(qm)
    kept = sum(l.kept_fp for _, l in qm.iter_layers())
    print(f"{qcfg.variant}: wrote {out} ({mem['total']} payload bytes, {kept} layers kept at high precision)")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    cfg, records = load_records(args.calib)
    qm = deserialize(args.model)
    cells = an.sensitivity(an.layer_errors(qm, build_model(cfg), records))
    out = an.write_csv(_out(args.out), an.SENSITIVITY_HEADER,
                       [(c.expert, c.block, c.module, repr(c.cosine_error)) for c in cells])
    print(f"wrote {len(cells)} sensitivity rows to {out}")
    print("most sensitive layers:")
    for c in sorted(cells, key=lambda c: -c.cosine_error)[:5]:
        print(f"  {c.expert.value} blocks.{c.block}.{c.module}: {c.cosine_error:.3e}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg, records = load_records(args.calib)
    model = build_model(cfg)
    rows, hist = [], []
    for path in args.models:
        qm = deserialize(path)
        rows.append(an.ablation_row(qm, model, records))
        hist += an.ratio_histogram(qm)
    rows.sort(key=lambda r: -r.mean_layer_mse)
    out_dir = _out(args.out_dir)
    ab = an.write_csv(out_dir / "ablation.csv", an.ABLATION_HEADER,
                      [(r.variant, repr(r.mean_layer_mse), repr(r.mean_cosine_error), r.model_bytes) for r in rows])
    hi = an.write_csv(out_dir / "ratio_histogram.csv", an.HISTOGRAM_HEADER, hist)
    print(f"{'variant':<18}{'mean MSE':>14}{'mean cos err':>14}{'bytes':>10}")
    for r in rows:
        print(f"{r.variant:<18}{r.mean_layer_mse:>14.5g}{r.mean_cosine_error:>14.5g}{r.model_bytes:>10}")
    print(f"wrote {ab} and {hi}")
    return EXIT_OK


def cmd_run_all(args) -> int:
    out_dir = _out(args.out_dir)
    calib = out_dir / "calibration.bin"
    base = ["--seed", str(args.seed), "--steps", str(args.steps), "--bins", str(args.bins)]
    rc = main(["calibrate", *base, "--out", str(calib)])
    if rc:
        return rc
    variants = list(ABLATION_VARIANTS) + (["keepfp_diag"] if args.with_diagnostic else [])
    models = []
    for v in variants:
        path = out_dir / f"model_{v}.json"
        cmd = ["quantize", "--calib", str(calib), "--variant", v, "--grid", args.grid, "--out", str(path)]
        if args.rank is not None and v != "rtn":
            cmd += ["--rank", str(args.rank)]
        if v in ("svd_gptq_tsclip", "keepfp_diag"):
            cmd += ["--bins", str(args.bins)]
        rc = main(cmd)
        if rc:
            return rc
        models.append(str(path))
    rc = main(["sensitivity", "--model", str(out_dir / "model_svd_gptq_tsclip.json"), "--calib", str(calib),
               "--out", str(out_dir / "sensitivity.csv")])
    if rc:
        return rc
    return main(["report", "--calib", str(calib), "--out-dir", str(out_dir), "--models", *models])


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsquant", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", help="run the toy trajectory and dump layer inputs")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--steps", type=_positive_int, default=40)
    c.add_argument("--bins", type=_positive_int, default=4)
    c.add_argument("--d-model", type=_positive_int, default=64)
    c.add_argument("--blocks", type=_positive_int, default=6)
    c.add_argument("--seq-len", type=_positive_int, default=32)
    c.add_argument("--gain", type=float, default=8.0)
    c.add_argument("--boundary", type=float, default=0.5)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("quantize", help="quantize the toy model from a calibration dump")
    q.add_argument("--calib", required=True, help="calibration dump from `calibrate`")
    q.add_argument("--variant", choices=VARIANTS, default="svd_gptq_tsclip")
    q.add_argument("--rank", type=int, help="low-rank branch rank (preset default: 2, rtn: 0)")
    q.add_argument("--grid", choices=("int4", "mxfp4"), help="4-bit grid (default mxfp4)")
    q.add_argument("--group", type=_positive_int, help="INT4 group size (default 64; MXFP4 is fixed at 32)")
    q.add_argument("--keep-fp", type=_suffix_list, help="comma-separated module suffixes kept at high precision, or *")
    q.add_argument("--ratios", type=_ratio_list, help="comma-separated clip ratio candidates in (0, 1]")
    q.add_argument("--bins", type=_positive_int, help="timestep bins per expert")
    q.add_argument("--out", required=True, help="manifest path; the payload goes next to it as .bin")
    q.set_defaults(func=cmd_quantize)

    s = sub.add_parser("sensitivity", help="per-module cosine error heatmap as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sensitivity)

    r = sub.add_parser("report", help="ablation table and clipping-ratio histogram")
    r.add_argument("--calib", required=True)
    r.add_argument("--models", nargs="+", required=True)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("run-all", help="calibrate, quantize every ablation variant, report")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--steps", type=_positive_int, default=40)
    a.add_argument("--bins", type=_positive_int, default=4)
    a.add_argument("--rank", type=int)
    a.add_argument("--grid", choices=("int4", "mxfp4"), default="mxfp4")
    a.add_argument("--with-diagnostic", action="store_true", help="also build the keepfp_diag variant")
    a.add_argument("--out-dir", default="tsquant_out")
    a.set_defaults(func=cmd_run_all)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TsQuantError, OSError, ValueError) as exc:
        print(f"tsquant {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
