"""Command-line entry point: ``dispenseforge <subcommand> ...``.

Exit codes: 0 ok, 2 usage or config error, 3 missing prerequisite artifact,
4 degenerate inference (zero-length path), 5 simulation did not converge.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import Config, load_config
from .errors import ConfigError, DispenseForgeError, NotPretrained, ZeroLengthPath
from .flow_oracle import FlowParams, simulate
from .geometry import TargetArea, format_path, parse_path
from .quality import CSV_HEADER, report_for_footprint

log = logging.getLogger("dispenseforge")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_DEGENERATE, EXIT_SIMULATION = 0, 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, seed=True):
    p.add_argument("--config", help="key=value config file; unspecified keys keep their defaults")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads (default: config 'threads')")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dispenseforge", description="Learned dispense-path planning for thermal interface material.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="generate an oracle-labelled dataset of random areas and paths")
    p.add_argument("--n", type=int, required=True, help="number of records")
    p.add_argument("--out", required=True, help="dataset file to write; stats go to <out>.stats.txt")
    _common(p)

    for name, helptext in (
        ("pretrain-flow", "fit the flow surrogate to oracle footprints"),
        ("pretrain-void", "fit the void surrogate to oracle void labels"),
        ("train-process", "label-free training of the process network against the frozen quality model"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True, help="dataset file written by 'datagen'")
        p.add_argument("--epochs", type=int, default=None, help="epochs (default from config)")
        p.add_argument("--out-weights", required=True, help="weights file; manifest and log CSV are written beside it")
        if name == "train-process":
            p.add_argument("--flow-weights", help="flow surrogate weights (default: flow.dfw next to --out-weights)")
            p.add_argument("--void-weights", help="void surrogate weights (default: void.dfw next to --out-weights)")
        _common(p)

    p = sub.add_parser("infer", help="predict a dispense path for one target-area mask")
    p.add_argument("--weights", required=True, help="process network weights")
    p.add_argument("--area", required=True, help="target mask as PGM (P2 or P5)")
    p.add_argument("--out-path", required=True, help="path file to write")
    p.add_argument("--render", help="optional SVG overlay to write")
    _common(p, seed=False)

    p = sub.add_parser("evaluate", help="infer, simulate and score every area of a test set")
    p.add_argument("--weights", required=True, help="process network weights")
    p.add_argument("--testset", required=True, help="dataset file written by 'datagen'")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"), help="records to use (default test)")
    p.add_argument("--out-dir", required=True, help="directory for report.csv, overlays and exported maps")
    _common(p, seed=False)

    p = sub.add_parser("simulate", help="run the flow oracle on a path file and print its quality row")
    p.add_argument("--path", required=True, help="path file")
    p.add_argument("--area", required=True, help="target mask as PGM")
    p.add_argument("--out-heights", help="optional CSV of compressed heights")
    p.add_argument("--out-footprint", help="optional PGM of the binary footprint")
    p.add_argument("--render", help="optional SVG overlay to write")
    _common(p, seed=False)

    p = sub.add_parser("refine", help="improve a path by gradient steps through the quality model")
    p.add_argument("--weights", help="process network weights, used when --path is not given")
    p.add_argument("--flow-weights", required=True, help="flow surrogate weights")
    p.add_argument("--void-weights", required=True, help="void surrogate weights")
    p.add_argument("--area", required=True, help="target mask as PGM")
    p.add_argument("--path", help="start path file (default: the process network's prediction)")
    p.add_argument("--steps", type=int, default=None, help="gradient steps (default from config)")
    p.add_argument("--out-path", required=True, help="refined path file to write")
    _common(p, seed=False)
    return parser


# -- helpers -----------------------------------------------------------------------


def _require(path, hint: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise NotPretrained(f"missing {path}; {hint}")
    return path


def _read_area(path, cfg: Config) -> TargetArea:
    from .io_formats import read_pgm

    path = _require(path, "supply an existing PGM mask")
    try:
        mask = read_pgm(path)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if mask.shape != cfg.grid.shape:
        raise ConfigError(f"{path}: mask is {mask.shape[1]}x{mask.shape[0]}, grid is {cfg.width_cells}x{cfg.height_cells}")
    return TargetArea(mask, cfg.grid)


def _read_dataset(path):
    from .datagen import read_dataset

    return read_dataset(_require(path, "run 'dispenseforge datagen' first"))


def _check_grid(ds, cfg: Config):
    if ds.grid != cfg.grid:
        raise ConfigError(f"dataset grid {ds.grid} differs from configured grid {cfg.grid}")


def _write_log(out_weights: Path, tlog, wall_s: float):
    Path(str(out_weights) + ".log.csv").write_text(tlog.to_csv(), encoding="utf-8")
    timing = tlog.timing_csv() + f"total,wall_s,{wall_s:.3f}\n"
    Path(str(out_weights) + ".timing.csv").write_text(timing, encoding="utf-8")


def _load_process(path, cfg: Config):
    from .models import ProcessNet, read_model

    return read_model(ProcessNet, _require(path, "run 'dispenseforge train-process' first"), cfg.grid)


def _load_quality(flow_path, void_path, cfg: Config, sigma: float | None = None):
    from .models import load_quality_net

    _require(flow_path, "run 'dispenseforge pretrain-flow' first")
    _require(void_path, "run 'dispenseforge pretrain-void' first")
    return load_quality_net(flow_path, void_path, cfg.grid, cfg.sigma if sigma is None else sigma, cfg.weights)


# -- subcommands ---------------------------------------------------------------------


def cmd_datagen(args, cfg: Config) -> int:
    from .datagen import build_pretrain_set, format_stats

    out = Path(args.out)
    _, stats = build_pretrain_set(args.n, args.seed, cfg, out)
    Path(str(out) + ".stats.txt").write_text(format_stats(stats), encoding="utf-8")
    print(format_stats(stats), end="")
    return EXIT_OK


def cmd_pretrain(args, cfg: Config) -> int:
    from .models import write_model
    from .training import pretrain_flow, pretrain_void

    ds = _read_dataset(args.data)
    _check_grid(ds, cfg)
    epochs = cfg.surrogate_epochs if args.epochs is None else args.epochs
    start = time.perf_counter()
    if args.command == "pretrain-flow":
        net, tlog, summary = pretrain_flow(ds, epochs, args.seed, cfg)
        extra = {}
    else:
        net, tlog, summary = pretrain_void(ds, epochs, args.seed, cfg)
        extra = {"void_scale": repr(net.void_scale)}
    wall = time.perf_counter() - start
    out = Path(args.out_weights)
    extra.update({"seed": str(args.seed), "epochs": str(epochs), "best_epoch": str(summary["best_epoch"])})
    write_model(net, out, cfg.grid, extra, cfg)
    _write_log(out, tlog, wall)
    print(",".join(f"{k}={v!r}" for k, v in summary.items()))
    return EXIT_OK


def cmd_train_process(args, cfg: Config) -> int:
    from .models import write_model
    from .training import train_process

    out = Path(args.out_weights)
    flow = args.flow_weights or out.parent / "flow.dfw"
    void = args.void_weights or out.parent / "void.dfw"
    quality = _load_quality(flow, void, cfg)
    ds = _read_dataset(args.data)
    _check_grid(ds, cfg)
    epochs = cfg.process_epochs if args.epochs is None else args.epochs
    start = time.perf_counter()
    net, tlog, summary = train_process(ds, quality, epochs, args.seed, cfg)
    wall = time.perf_counter() - start
    extra = {
        "seed": str(args.seed),
        "epochs": str(epochs),
        "best_epoch": str(summary["best_epoch"]),
        "best_oracle_J": repr(summary["best_oracle_J"]),
        "quality_hash": summary["quality_hash"],
    }
    write_model(net, out, cfg.grid, extra, cfg)
    _write_log(out, tlog, wall)
    history = "epoch,sigma,train_loss,oracle_J,best_oracle_J,coverage,overflow,void_rate,gap\n" + "".join(
        f"{h['epoch']},{h['sigma']!r},{h['train_loss']!r},{h['oracle_J']!r},{h['best_oracle_J']!r},"
        f"{h['coverage']!r},{h['overflow']!r},{h['void_rate']!r},{h['gap']!r}\n"
        for h in summary["history"]
    )
    Path(str(out) + ".validation.csv").write_text(history, encoding="utf-8")
    print(f"best_epoch={summary['best_epoch']},best_oracle_J={summary['best_oracle_J']!r}")
    return EXIT_OK


def _dump_raw(out_path, raw) -> Path:
    dump = Path(str(out_path) + ".raw.txt")
    dump.write_text("\n".join(repr(float(v)) for v in raw) + "\n", encoding="ascii")
    return dump


def cmd_infer(args, cfg: Config) -> int:
    from .io_formats import render_svg
    from .models import timed_infer
    from .quality import simulate_and_score

    net = _load_process(args.weights, cfg)
    area = _read_area(args.area, cfg)
    try:
        path, ms = timed_infer(area, net)
    except ZeroLengthPath as exc:
        dump = _dump_raw(args.out_path, exc.raw)
        print(f"error: {exc}; raw network outputs written to {dump}", file=sys.stderr)
        return EXIT_DEGENERATE
    Path(args.out_path).write_text(format_path(path, cfg.grid), encoding="utf-8")
    report, sim = simulate_and_score(path, area, cfg.weights, FlowParams.from_config(cfg), cfg.penalty_max)
    if args.render:
        fp = None if sim is None else sim.footprint
        Path(args.render).write_text(render_svg(area.mask, path, cfg.grid, fp, f"C = {100 * report.coverage:.1f} %"))
    print("coverage,objective,inference_ms")
    print(f"{report.coverage!r},{report.objective!r},{ms:.3f}")
    return EXIT_OK


def cmd_evaluate(args, cfg: Config) -> int:
    from .io_formats import render_svg, write_pgm
    from .training import evaluate_suite, suite_csv

    net = _load_process(args.weights, cfg)
    ds = _read_dataset(args.testset)
    _check_grid(ds, cfg)
    idx = list(range(len(ds))) if args.split == "all" else ds.split(args.split)
    rows = evaluate_suite(net, ds.areas(idx), cfg, ids=idx)
    out = Path(args.out_dir)
    for sub in ("overlays", "masks", "footprints"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(suite_csv(rows, cfg.timing_in_logs), encoding="utf-8")
    (out / "timing.csv").write_text(
        "area_id,inference_ms\n" + "".join(f"{r.area_id},{r.inference_ms:.3f}\n" for r in rows), encoding="utf-8"
    )
    for i, r in zip(idx, rows):
        mask = ds.samples[i].mask
        write_pgm(out / "masks" / f"{r.area_id}.pgm", mask)
        if r.footprint is not None:
            write_pgm(out / "footprints" / f"{r.area_id}.pgm", r.footprint)
        caption = f"C = {100 * r.report.coverage:.1f} %"
        (out / "overlays" / f"{r.area_id}.svg").write_text(render_svg(mask, r.path, cfg.grid, r.footprint, caption))
    if rows:
        ms = np.array([r.inference_ms for r in rows])
        print(
            f"areas={len(rows)},coverage_mean={np.mean([r.report.coverage for r in rows]):.4f},"
            f"overflow_mean={np.mean([r.report.overflow for r in rows]):.4f},"
            f"void_free={np.mean([r.report.void_count == 0 for r in rows]):.4f},"
            f"objective_mean={np.mean([r.report.objective for r in rows]):.4f},"
            f"inference_ms_max={np.nanmax(ms) if np.isfinite(ms).any() else float('nan'):.3f}"
        )
    else:
        print("areas=0")
    return EXIT_OK


def _read_path(path, cfg: Config):
    text = _require(path, "supply an existing path file").read_text(encoding="utf-8")
    return parse_path(text, cfg.grid)


def cmd_simulate(args, cfg: Config) -> int:
    from .io_formats import render_svg, write_heights_csv, write_pgm

    area = _read_area(args.area, cfg)
    path = _read_path(args.path, cfg)
    sim = simulate(path, area, FlowParams.from_config(cfg))  # NoConvergence propagates (exit 5)
    report = report_for_footprint(sim.footprint, area, cfg.weights)
    if args.out_heights:
        write_heights_csv(args.out_heights, sim.heights)
    if args.out_footprint:
        write_pgm(args.out_footprint, sim.footprint)
    if args.render:
        Path(args.render).write_text(render_svg(area.mask, path, cfg.grid, sim.footprint))
    print(CSV_HEADER)
    print(report.to_csv_row())
    return EXIT_OK


def cmd_refine(args, cfg: Config) -> int:
    from .models import infer_path, refine_path

    area = _read_area(args.area, cfg)
    quality = _load_quality(args.flow_weights, args.void_weights, cfg, sigma=cfg.sigma_min)
    if args.path:
        start = _read_path(args.path, cfg)
    elif args.weights:
        net = _load_process(args.weights, cfg)
        try:
            start = infer_path(area, net, cfg.min_path_length)
        except ZeroLengthPath as exc:
            dump = _dump_raw(args.out_path, exc.raw)
            print(f"error: {exc}; raw network outputs written to {dump}", file=sys.stderr)
            return EXIT_DEGENERATE
    else:
        raise ConfigError("refine needs --path or --weights for the start path")
    steps = cfg.refine_steps if args.steps is None else args.steps
    params = FlowParams.from_config(cfg)
    best = refine_path(area, start, quality, steps, cfg.refine_learning_rate, params=params, penalty=cfg.penalty_max)
    Path(args.out_path).write_text(format_path(best, cfg.grid), encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "datagen": cmd_datagen,
    "pretrain-flow": cmd_pretrain,
    "pretrain-void": cmd_pretrain,
    "train-process": cmd_train_process,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "refine": cmd_refine,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        threads = cfg.threads if args.threads is None else args.threads
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args, cfg)
    except DispenseForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
