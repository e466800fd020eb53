"""``featflow`` command line: sample, train, evaluate, benchmark, report.

Exit codes: 0 on success, 1 on a runtime error (one-line diagnostic on
stderr), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io as _io
import json
import logging
import sys
import time
from pathlib import Path

from featflow import bench, io, metrics
from featflow.errors import FeatFlowError, InvalidInputError

log = logging.getLogger("featflow")


def _lengths(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid length list {text!r}") from None
    if not values or any(v < 2 for v in values):
        raise argparse.ArgumentTypeError("lengths must be integers >= 2")
    return values


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _paths(text: str) -> list[Path]:
    return [Path(p) for p in text.split(",") if p.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("sample", help="sample an ensemble to a multi-model PDB")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output PDB; a .json manifest is written beside it")
    p.add_argument("--samples", type=_positive)
    p.add_argument("--steps", type=_positive)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train the toy denoiser on a PDB ensemble")
    p.add_argument("--config", type=Path)
    p.add_argument("--ref", type=Path, help="training ensemble (overrides train_data)")
    p.add_argument("--out", type=Path, required=True, help="parameter file; a .loss.csv log is written beside it")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("evaluate", help="compare predicted against reference ensembles")
    p.add_argument("--config", type=Path)
    p.add_argument("--ref", type=_paths, required=True, help="comma-separated reference PDBs")
    p.add_argument("--pred", type=_paths, required=True, help="comma-separated predicted PDBs, same order")
    p.add_argument("--out", type=Path, default=Path("evaluation"), help="output directory")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("benchmark", help="time per-step-heavy against precompute-once sampling")
    p.add_argument("--config", type=Path)
    p.add_argument("--lengths", type=_lengths)
    p.add_argument("--steps", type=_positive, default=10)
    p.add_argument("--mode", choices=[*bench.MODES, "both"], default="both")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("benchmark.csv"),
                   help="records CSV; fit JSON and runtime figure are written beside it")

    p = sub.add_parser("report", help="merge evaluation runs into one results table")
    p.add_argument("--pred", type=_paths, required=True,
                   help="comma-separated evaluate output directories (one column each)")
    p.add_argument("--out", type=Path, default=Path("table.csv"))
    return parser


def _config(args) -> io.RunConfig:
    cfg = io.load_config(args.config) if getattr(args, "config", None) else io.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed, metric_seed=args.seed)
    return cfg


def _provider(cfg: io.RunConfig):
    from featflow.features import FileFeatureProvider, SyntheticFeatureProvider

    if cfg.provider == "synthetic":
        return SyntheticFeatureProvider(cfg.provider_seed, cfg.c_s, cfg.c_z)
    if cfg.provider == "file":
        if not cfg.feature_path:
            raise InvalidInputError("provider = file needs feature_path")
        return FileFeatureProvider(cfg.feature_path)
    raise InvalidInputError(f"unknown provider {cfg.provider!r}")


def cmd_sample(args) -> int:
    import torch

    from featflow.denoiser import ToyDenoiser
    from featflow.features import InputEmbedder
    from featflow.flow import FlowSchedule, sample_ensemble

    cfg = _config(args)
    n_samples = args.samples or cfg.n_samples
    n_steps = args.steps or cfg.n_steps
    torch.manual_seed(cfg.seed)
    if cfg.params:
        embedder, denoiser = io.load_model(cfg.params)
    else:
        embedder = InputEmbedder(c_s=cfg.c_s, c_z_out=cfg.c_z, n_blocks=cfg.embed_blocks)
        denoiser = ToyDenoiser(c_s=cfg.c_s, c_z=cfg.c_z, width=cfg.width, n_rounds=cfg.n_rounds)
    t0 = time.perf_counter()
    ens = sample_ensemble(denoiser, _provider(cfg), cfg.sequence, FlowSchedule(n_steps, cfg.embed_angles),
                          n_samples, cfg.seed, embedder, cfg.alpha, cfg.target_id)
    elapsed = time.perf_counter() - t0
    args.out.parent.mkdir(parents=True, exist_ok=True)
    io.write_ensemble(ens, args.out)
    manifest = {
        "output": str(args.out), "target_id": cfg.target_id, "sequence": cfg.sequence,
        "n_samples": n_samples, "n_steps": n_steps, "seed": cfg.seed,
        "embed_angles": cfg.embed_angles, "params": cfg.params or None,
        "provider": cfg.provider, "wall_time": elapsed,
    }
    args.out.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {n_samples} models to {args.out}")
    return 0


def cmd_train(args) -> int:
    from featflow.flow import TrainConfig, train_toy_denoiser

    cfg = _config(args)
    data = args.ref or (Path(cfg.train_data) if cfg.train_data else None)
    if data is None:
        raise InvalidInputError("no training data: pass --ref or set train_data")
    ens = io.read_flow_ensemble(data, stride=cfg.stride)
    tcfg = TrainConfig(steps=cfg.train_steps if args.steps is None else args.steps,
                       batch_size=cfg.batch_size, lr=cfg.lr, time_weighted=cfg.time_weighted,
                       lr_schedule=cfg.lr_schedule,
                       alpha=cfg.alpha, seed=cfg.seed, c_s=cfg.c_s, c_z=cfg.c_z,
                       embed_blocks=cfg.embed_blocks, width=cfg.width, n_rounds=cfg.n_rounds,
                       log_every=100 if args.verbose else 0)
    result = train_toy_denoiser([ens], tcfg, provider=_provider(cfg))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    io.save_model(args.out, result.embedder, result.denoiser,
                  {"n_rounds": cfg.n_rounds, "embed_blocks": cfg.embed_blocks})
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, v in enumerate(result.losses, 1):
        w.writerow([i, repr(v)])
    args.out.with_suffix(".loss.csv").write_text(buf.getvalue())
    print(f"held-out loss {result.heldout_initial:.4f} -> {result.heldout_final:.4f}; "
          f"parameters in {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from featflow import plotting

    cfg = _config(args)
    if len(args.ref) != len(args.pred):
        raise InvalidInputError(f"{len(args.ref)} reference files but {len(args.pred)} predictions")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for ref_path, pred_path in zip(args.ref, args.pred):
        ref = io.read_ensemble(ref_path, ref_path.stem, cfg.stride)
        pred = io.read_ensemble(pred_path, ref_path.stem)
        rep = metrics.evaluate_target(ref, pred, cfg.eval_config())
        io.save_report(rep, out / f"{rep.target_id}.json")
        plotting.rmsf_figure({"reference": rep.rmsf_profile_ref, "predicted": rep.rmsf_profile},
                             out / f"{rep.target_id}_rmsf.png", rep.target_id)
        try:
            maps = {"reference": metrics.dccm(metrics.align_ensemble(ref)),
                    "predicted": metrics.dccm(metrics.align_ensemble(pred))}
            plotting.dccm_figure(maps, out / f"{rep.target_id}_dccm.png")
        except FeatFlowError as exc:
            log.warning("no DCCM figure for %s: %s", rep.target_id, exc)
        for name, msg in rep.errors.items():
            log.warning("%s: %s undefined (%s)", rep.target_id, name, msg)
        reports.append(rep)
    agg = metrics.aggregate(reports)
    io.save_aggregate(agg, out / "aggregate.json")
    print(f"evaluated {len(reports)} target(s); aggregate in {out / 'aggregate.csv'}")
    return 0


def cmd_benchmark(args) -> int:
    from featflow import plotting

    cfg = _config(args)
    lengths = args.lengths or _lengths(cfg.lengths)
    modes = list(bench.MODES) if args.mode == "both" else [args.mode]
    result = bench.run_benchmark(lengths, n_steps=args.steps, repetitions=cfg.repetitions,
                                 seed=cfg.seed, modes=modes)
    for w in result.warnings:
        log.warning("%s", w)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(bench.records_csv(result.records))
    summary: dict = {"warnings": result.warnings, "fits": {}}
    for mode in modes:
        rows = [r for r in result.records if r.mode == mode]
        if len({r.chain_length for r in rows}) >= 3:
            fit = bench.fit_power_law(rows)
            summary["fits"][mode] = dataclasses.asdict(fit)
    if len(modes) == 2:
        table = bench.speedup_table(result.records)
        summary["speedup"] = {"lengths": table.lengths, "ratios": table.ratios, "mean": table.mean}
    args.out.with_suffix(".json").write_text(json.dumps(summary, indent=2))
    plotting.runtime_figure(result.records, args.out.with_suffix(".png"))
    for mode, fit in summary["fits"].items():
        print(f"{mode}: time ~ {fit['coefficient']:.3g} * L^{fit['exponent']:.3f} (r2 {fit['r_squared']:.3f})")
    if "speedup" in summary:
        ratios = ", ".join(f"{n}: {r:.2f}x" for n, r in zip(lengths, summary["speedup"]["ratios"]))
        print(f"speedup {ratios}")
    return 0


def cmd_report(args) -> int:
    from featflow import plotting

    columns: dict[str, metrics.AggregateReport] = {}
    profiles: dict[str, dict[str, list[float]]] = {}
    for d in args.pred:
        if not (d / "aggregate.json").is_file():
            raise InvalidInputError(f"{d} has no aggregate.json (run evaluate first)")
        data = json.loads((d / "aggregate.json").read_text())
        medians = {k: data.get(k) for k in metrics.TABLE_FIELDS}
        columns[d.name or str(d)] = metrics.AggregateReport(
            int(data["n_targets"]), medians, data.get("pairwise_rmsd_pearson"))
        for f in sorted(d.glob("*.json")):
            if f.name == "aggregate.json":
                continue
            rep = io.load_report(f)
            prof = profiles.setdefault(rep.target_id, {})
            prof.setdefault("reference", rep.rmsf_profile_ref)
            prof[d.name or str(d)] = rep.rmsf_profile
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(io.table_csv(columns))
    for target, prof in profiles.items():
        if all(len(p) for p in prof.values()):
            plotting.rmsf_figure(prof, args.out.with_name(f"{args.out.stem}_{target}_rmsf.png"), target)
    print(f"wrote {args.out} ({len(columns)} column(s), {len(profiles)} RMSF figure(s))")
    return 0


COMMANDS = {"sample": cmd_sample, "train": cmd_train, "evaluate": cmd_evaluate,
            "benchmark": cmd_benchmark, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FeatFlowError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"featflow: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
