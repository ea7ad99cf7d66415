"""Command-line entry point.

Subcommands: ``stats`` (calibration reports from logs), ``fit`` (variable or
single-temperature calibrator), ``apply`` (rewrite logs recalibrated),
``seqcal`` (sequence-level calibration experiment), ``toy gen`` and
``toy beamsweep`` (synthetic bench). Reports go to files; stdout carries a
one-line summary. Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import SeqcalError
from .features import FeatureConfig, enrich_all
from .metrics import (
    PartitionSpec,
    ece,
    export_reliability,
    head_tail_curve,
    partitioned_metric,
    weighted_ece,
    write_report_json,
    write_reliability_csv,
)
from .records import (
    BinningConfig,
    TokenRecord,
    group_into_sequences,
    read_log_file,
    validate_record,
    write_log_file,
)
from .recalibrate import (
    CalibratedModel,
    CalibratorParams,
    SingleTemperature,
    TrainConfig,
    apply_calibrator,
    apply_single_temperature,
    fit_calibrator,
    fit_single_temperature,
    load_params,
    save_params,
)
from .sequence import BeamConfig
from .toybench import (
    DistortionSpec,
    ToyTaskSpec,
    beam_sweep,
    build_true_model,
    distort,
    emit_logs,
    flatten,
    sequence_calibration_experiment,
)

BEAMSWEEP_EVAL_SOURCES = 400


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 with help text instead of argparse's exit 2
        raise UsageError(f"{message}\n\n{self.format_help()}")


def build_parser() -> _Parser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to $SEQCAL_SEED)")
    shared.add_argument("--threads", type=int, default=1, help="worker pool size for metric reductions")
    shared.add_argument("--out", type=Path, default=None, help="report output path (JSON)")

    parser = _Parser(prog="seqcal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_stats = sub.add_parser("stats", parents=[shared], help="calibration metrics from a log file")
    p_stats.add_argument("--logs", type=Path, required=True)
    p_stats.add_argument("--bins", type=int, default=20)
    p_stats.add_argument("--weighted", action="store_true", help="also report full-distribution calibration")
    p_stats.add_argument(
        "--partition", default=None,
        help="eos | entropy:H | token:ID | headtail:T1,T2,...",
    )

    p_fit = sub.add_parser("fit", parents=[shared], help="fit a calibrator on validation logs")
    p_fit.add_argument("--logs", type=Path, required=True)
    p_fit.add_argument("--mode", choices=("variable", "single"), required=True)
    p_fit.add_argument("--plus-one", action="store_true", dest="plus_one")
    p_fit.add_argument("--delta", type=float, default=0.35, help="coverage threshold")
    p_fit.add_argument("--params-out", type=Path, required=True, dest="params_out")

    p_apply = sub.add_parser("apply", parents=[shared], help="rewrite logs with recalibrated distributions")
    p_apply.add_argument("--logs", type=Path, required=True)
    p_apply.add_argument("--params", type=Path, required=True)
    p_apply.add_argument("--logs-out", type=Path, required=True, dest="logs_out")

    p_seqcal = sub.add_parser("seqcal", parents=[shared], help="sequence-level calibration experiment")
    p_seqcal.add_argument("--task", type=Path, required=True)
    p_seqcal.add_argument("--model", type=Path, required=True,
                          help='model spec JSON: {"distort": {...}?, "params": "path"?}')
    p_seqcal.add_argument("--samples", type=int, default=100)
    p_seqcal.add_argument("--n", type=int, required=True, help="number of evaluated sources")
    p_seqcal.add_argument("--bins", type=int, default=20)

    p_toy = sub.add_parser("toy", help="synthetic bench")
    toy_sub = p_toy.add_subparsers(dest="toy_command", required=True, parser_class=_Parser)

    p_gen = toy_sub.add_parser("gen", parents=[shared], help="emit teacher-forced logs")
    p_gen.add_argument("--spec", type=Path, required=True)
    p_gen.add_argument("--n", type=int, required=True, help="number of sequences")
    p_gen.add_argument("--distort", type=Path, default=None)
    p_gen.add_argument("--logs-out", type=Path, required=True, dest="logs_out")

    p_sweep = toy_sub.add_parser("beamsweep", parents=[shared], help="corpus BLEU per beam width")
    p_sweep.add_argument("--spec", type=Path, required=True)
    p_sweep.add_argument("--distort", type=Path, default=None)
    p_sweep.add_argument("--params", type=Path, default=None)
    p_sweep.add_argument("--beams", required=True, help="comma-separated beam widths")

    return parser


def _resolve_seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SEQCAL_SEED")
    return int(env) if env else None


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required for this command")
    return args.out


def _ensure_features(records: list[TokenRecord], cfg: FeatureConfig) -> list[TokenRecord]:
    if all(r.features is not None for r in records):
        return records
    return flatten(enrich_all(group_into_sequences(records), cfg))


def _parse_partition(text: str):
    if text == "eos":
        return PartitionSpec.eos()
    if text.startswith("entropy:"):
        return PartitionSpec.entropy(float(text.split(":", 1)[1]))
    if text.startswith("token:"):
        return PartitionSpec.token(int(text.split(":", 1)[1]))
    if text.startswith("headtail:"):
        return [float(v) for v in text.split(":", 1)[1].split(",") if v]
    raise UsageError(f"unknown partition {text!r}")


def _cmd_stats(args) -> int:
    out = _require_out(args)
    records = read_log_file(args.logs)
    bins = BinningConfig(args.bins)
    if args.partition is None:
        plain_score, plain_hist = ece(records, bins, threads=args.threads)
        if args.weighted:
            score, hist = weighted_ece(records, bins, threads=args.threads)
            payload = {
                "metric": "weighted_ece",
                "score": score,
                "bins": export_reliability(hist),
                "ece": plain_score,
            }
            summary = f"weighted_ece={score:.6f} ece={plain_score:.6f}"
        else:
            score, hist = plain_score, plain_hist
            payload = {"metric": "ece", "score": score, "bins": export_reliability(hist)}
            summary = f"ece={score:.6f}"
        write_report_json(out, payload)
        write_reliability_csv(out.with_suffix(".csv"), payload["bins"])
        print(f"{summary} records={len(records)} -> {out}")
        return 0

    spec = _parse_partition(args.partition)
    if isinstance(spec, list):
        rows = head_tail_curve(records, spec)
        payload = {"metric": "head_tail", "rows": rows}
        write_report_json(out, payload)
        print(f"head_tail thresholds={len(rows)} records={len(records)} -> {out}")
        return 0
    if spec.kind == "entropy_split":
        records = _ensure_features(records, FeatureConfig())
    groups = partitioned_metric(records, spec, bins)
    payload = {
        "metric": "partitioned",
        "partition": args.partition,
        "groups": {
            label: {"ece": g.ece, "weighted_ece": g.weighted_ece, "count": g.count}
            for label, g in groups.items()
        },
    }
    write_report_json(out, payload)
    parts = " ".join(f"{label}:{g.count}" for label, g in groups.items())
    print(f"partition={args.partition} {parts} -> {out}")
    return 0


def _cmd_fit(args) -> int:
    records = read_log_file(args.logs)
    cfg = FeatureConfig(coverage_threshold=args.delta)
    seed = _resolve_seed(args)
    if args.mode == "single":
        temperature = fit_single_temperature(records)
        save_params(args.params_out, SingleTemperature(temperature=temperature))
        print(f"mode=single temperature={temperature:.6f} records={len(records)} -> {args.params_out}")
        return 0
    records = _ensure_features(records, cfg)
    params = fit_calibrator(
        records, TrainConfig(seed=0 if seed is None else seed), plus_one=args.plus_one
    )
    save_params(args.params_out, params)
    print(
        f"mode=variable plus_one={args.plus_one} w1={params.w1:.4f} w2={params.w2:.4f} "
        f"records={len(records)} -> {args.params_out}"
    )
    return 0


def _cmd_apply(args) -> int:
    records = read_log_file(args.logs)
    params = load_params(args.params)
    if isinstance(params, CalibratorParams):
        records = _ensure_features(records, FeatureConfig())
    rewritten = []
    for record in records:
        if isinstance(params, SingleTemperature):
            dense = apply_single_temperature(record, params.temperature)
        else:
            dense = apply_calibrator(record, params)
        nonzero = dense.nonzero()[0]
        updated = TokenRecord(
            seq_id=record.seq_id,
            t=record.t,
            vocab_size=record.vocab_size,
            eos_id=record.eos_id,
            gold_id=record.gold_id,
            entries=tuple((int(j), float(dense[j])) for j in nonzero),
            rest_mass=0.0,
            attention=record.attention,
            cum_attention=record.cum_attention,
            features=record.features,
        )
        rewritten.append(validate_record(updated))
    write_log_file(args.logs_out, rewritten)
    print(f"recalibrated records={len(rewritten)} -> {args.logs_out}")
    return 0


def _load_model(task: ToyTaskSpec, model_spec_path: Path | None,
                distort_path: Path | None = None, params_path: Path | None = None):
    model = build_true_model(task)
    distortion = None
    params_file = params_path
    if model_spec_path is not None:
        with open(model_spec_path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
        if payload.get("distort") is not None:
            distortion = DistortionSpec.from_payload(payload["distort"])
        if payload.get("params") is not None:
            params_file = Path(payload["params"])
    if distort_path is not None:
        distortion = DistortionSpec.load(distort_path)
    if distortion is not None:
        model = distort(model, distortion)
    if params_file is not None:
        model = CalibratedModel(model, load_params(params_file))
    return model


def _cmd_seqcal(args) -> int:
    out = _require_out(args)
    task = ToyTaskSpec.load(args.task)
    model = _load_model(task, args.model)
    seed = _resolve_seed(args)
    result = sequence_calibration_experiment(
        model,
        task,
        n_eval=args.n,
        num_samples=args.samples,
        bins=BinningConfig(args.bins),
        seed=task.seed if seed is None else seed,
    )
    payload = {
        "metric": "structured_ece",
        "score": result.score,
        "bins": export_reliability(result.histogram),
        "rows": result.rows,
    }
    write_report_json(out, payload)
    write_reliability_csv(out.with_suffix(".csv"), payload["bins"])
    print(f"structured_ece={result.score:.6f} n={args.n} samples={args.samples} -> {out}")
    return 0


def _cmd_toy_gen(args) -> int:
    task = ToyTaskSpec.load(args.spec)
    model = _load_model(task, None, distort_path=args.distort)
    seed = _resolve_seed(args)
    sequences = emit_logs(model, task, args.n, seed=task.seed if seed is None else seed)
    records = flatten(sequences)
    write_log_file(args.logs_out, records)
    print(f"sequences={len(sequences)} records={len(records)} -> {args.logs_out}")
    return 0


def _cmd_toy_beamsweep(args) -> int:
    out = _require_out(args)
    task = ToyTaskSpec.load(args.spec)
    model = _load_model(task, None, distort_path=args.distort, params_path=args.params)
    try:
        beams = [int(b) for b in args.beams.split(",") if b]
    except ValueError as exc:
        raise UsageError(f"--beams must be comma-separated integers: {exc}") from exc
    seed = _resolve_seed(args)
    rows = beam_sweep(
        model,
        task,
        beams,
        n_eval=BEAMSWEEP_EVAL_SOURCES,
        cfg=BeamConfig(),
        seed=task.seed if seed is None else seed,
    )
    write_report_json(out, {"metric": "beam_sweep", "rows": rows})
    summary = " ".join(f"B={r['beam_width']}:{r['corpus_bleu']:.4f}" for r in rows)
    print(f"beamsweep {summary} -> {out}")
    return 0


def run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "stats":
        return _cmd_stats(args)
    if args.command == "fit":
        return _cmd_fit(args)
    if args.command == "apply":
        return _cmd_apply(args)
    if args.command == "seqcal":
        return _cmd_seqcal(args)
    if args.command == "toy":
        if args.toy_command == "gen":
            return _cmd_toy_gen(args)
        return _cmd_toy_beamsweep(args)
    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (SeqcalError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
