"""Command-line entry point: ``dmmmen <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error
(including a failed Geweke check).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_bytes, atomic_write_text, write_json
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetMatrix, guess_format, load_matrix, logit_targets, matrix_bytes
from .errors import DimensionError, DMMError, InvalidConfig, NumericalError, ProtocolError
from .explain import (DEFAULT_INSIGHT_K, DEFAULT_SEGMENTS, DOMINANCE_THRESHOLD, Explanation,
                      InsightMap, emit_heatmap, explain_instance, global_insights,
                      grid_segments, posterior_summary, square_side)
from .harness import (DEFAULT_COUNTS, DEFAULT_FRACTION, DEFAULT_REPLICATES, compare_report,
                      craft_cases_experiment, grid_for, keep_topk_experiment,
                      nullify_experiment, replicates_csv)
from .model import Hyperparameters
from .relabel import pool_chains, relabel
from .sampler import run_chains

log = logging.getLogger("dmmmen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "DMMMEN_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise InvalidConfig(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


def _out(args, path) -> Path:
    path = Path(path)
    if args.out_dir and not path.is_absolute():
        return Path(args.out_dir) / path
    return path


def _matrix(args, path):
    fmt = args.format or guess_format(path)
    return load_matrix(path, fmt, header=args.header)


def _targets(args, n: int):
    """Regression targets: logit of a probability column, or raw values."""
    if args.probs:
        P = _matrix(args, args.probs)
        col = args.class_index
        if not -P.shape[1] <= col < P.shape[1]:
            raise InvalidConfig(f"--class {col} but the file has {P.shape[1]} columns")
        y, tag = logit_targets(P[:, col], args.eps), str(col % P.shape[1])
    elif args.targets:
        y, tag = _matrix(args, args.targets)[:, 0], "targets"
    else:
        raise UsageError("one of --probs or --targets is required")
    if y.shape[0] != n:
        raise DimensionError(f"{n} data rows but {y.shape[0]} target rows")
    return y, tag


def _scaled(X, scale):
    if not scale:
        return X
    lo, span = np.asarray(scale["lo"]), np.asarray(scale["span"])
    return (X - lo) / np.where(span > 0, span, 1.0)


def _load_relabeled(path):
    chains, extra = load_checkpoint(path)
    return relabel(pool_chains(chains)), extra


def _black_box(args):
    from .target import SubprocessModel, load_model
    if args.model:
        return load_model(args.model)
    if args.predict_cmd:
        return SubprocessModel(args.predict_cmd)
    raise UsageError("one of --model or --predict-cmd is required")


def _load_insights(path) -> InsightMap:
    import json
    with open(path) as fh:
        return InsightMap.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    X = _matrix(args, args.data)
    y, tag = _targets(args, X.shape[0])
    scale = None
    if args.scale:
        from .data import minmax_scale
        X, lo, span = minmax_scale(X)
        scale = {"lo": lo, "span": span}
    hp = Hyperparameters.from_json(args.config) if args.config else Hyperparameters()
    # explicit seed, then the environment, then the config file
    seed = resolve_seed(args) if args.seed is not None or os.environ.get(SEED_ENV) else None
    hp = hp.with_overrides(J=args.J, K=args.K, burn_in=args.burn_in, n_samples=args.samples,
                           thin=args.thin, seed=seed, prior=args.prior,
                           intercept=True if args.intercept else None)
    data = DatasetMatrix(X, y, class_tag=tag)
    log.info("fitting %d chain(s): n=%d p=%d J=%d K=%d", args.chains, data.n, data.p, hp.J, hp.K)
    chains = run_chains(data, hp, n_chains=args.chains, workers=args.workers)
    save_checkpoint(chains, _out(args, args.out),
                    extra={"class_tag": tag, "scale": scale, "eps": args.eps})
    return EXIT_OK


def cmd_insights(args) -> int:
    rc, extra = _load_relabeled(args.chain)
    ins = global_insights(rc, k=args.k, threshold=args.threshold, source=Path(args.chain).name,
                          class_tag=str(extra.get("class_tag", "")))
    write_json(_out(args, args.out), ins.to_dict())
    if args.heatmap:
        p = ins.importance.shape[0]
        width, height = args.width, args.height
        if width is None and height is None:
            side = square_side(p)
            if side is None:
                raise InvalidConfig(f"{p} features are not square; pass --width and --height")
            width = height = side
        elif width is None or height is None:
            raise UsageError("--width and --height go together")
        emit_heatmap(ins.importance, width, height, _out(args, args.heatmap))
    return EXIT_OK


def cmd_explain(args) -> int:
    rc, extra = _load_relabeled(args.chain)
    X = _matrix(args, args.data)
    y, _ = _targets(args, X.shape[0])
    Xs = _scaled(X, extra.get("scale"))
    segments = None
    if args.patch:
        p = X.shape[1]
        width, height = args.width, args.height
        if width is None or height is None:
            grid = grid_for(p, args.patch)
            width, height = grid["width"], grid["height"]
        segments = grid_segments(width, height, args.patch)
        if segments.shape[0] != p:
                raise DimensionError(f"{width}x{height} grid does not match {p} features")
    rows = args.instances if args.instances is not None else list(range(X.shape[0]))
    summ = posterior_summary(rc)
    out = []
    for i in rows:
        if not 0 <= i < X.shape[0]:
            raise InvalidConfig(f"instance {i} is outside [0, {X.shape[0]})")
        e = explain_instance(rc, Xs[i], y[i], k=args.k, segments=segments,
                             rank_by=args.rank_by, index=i, summary=summ)
        out.append(e.to_dict())
    write_json(_out(args, args.out), {"explanations": out,
                                      "segmentation": None if segments is None else
                                      {"width": width, "height": height, "patch": args.patch}})
    return EXIT_OK


def _write_reports(args, reports):
    write_json(_out(args, args.out), {"reports": [r.to_dict() for r in reports]})
    if args.table:
        compare_report(reports, _out(args, args.table))
    if args.csv:
        text = "".join(replicates_csv(r, header=(i == 0)) for i, r in enumerate(reports))
        atomic_write_text(_out(args, args.csv), text)


def _run_model(args, fn):
    model = _black_box(args)
    try:
        return fn(model)
    finally:
        close = getattr(model, "close", None)
        if close:
            close()


def cmd_eval_nullify(args) -> int:
    X = _matrix(args, args.data)
    ins = _load_insights(args.insights)
    reports = _run_model(args, lambda m: nullify_experiment(
        X, m, ins, counts=args.counts, replicates=args.replicates, fraction=args.fraction,
        seed=resolve_seed(args), nullify=args.nullify))
    _write_reports(args, list(reports))
    return EXIT_OK


def cmd_eval_craft(args) -> int:
    X = _matrix(args, args.data)
    ins = _load_insights(args.insights)
    report = _run_model(args, lambda m: craft_cases_experiment(
        m, ins, counts=args.counts, n_cases=args.n_cases, positive_fill=args.fill,
        seed=resolve_seed(args), data=X, replicates=args.replicates))
    _write_reports(args, [report])
    return EXIT_OK


def cmd_eval_keep(args) -> int:
    import json
    X = _matrix(args, args.data)
    with open(args.rankings) as fh:
        doc = json.load(fh)
    items = doc["explanations"] if isinstance(doc, dict) else doc
    rankings = [Explanation.from_dict(d) for d in items]
    if args.width is not None and args.height is not None:
        grid = {"width": args.width, "height": args.height, "patch": args.patch}
    else:
        grid = grid_for(X.shape[1], args.patch)
    report = _run_model(args, lambda m: keep_topk_experiment(
        X, m, rankings, k=args.k, segmentation=grid, seed=resolve_seed(args)))
    _write_reports(args, [report])
    return EXIT_OK


def cmd_geweke(args) -> int:
    from .geweke import geweke_joint_test
    rep = geweke_joint_test(n_synth=args.n, iters=args.iters, p=args.p, seed=resolve_seed(args),
                            threshold=args.threshold)
    if args.out:
        write_json(_out(args, args.out), rep.to_dict())
    for name, z in zip(rep.names, rep.z_scores):
        print(f"{name:<14} z = {z:+.3f}")
    print("PASS" if rep.passed else "FAIL")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def cmd_synth(args) -> int:
    from .target import generate_synthetic, image_task, recovery_spec, save_model
    seed = resolve_seed(args)
    fmt = args.format or "csv"
    ext = ".csv" if fmt == "csv" else ".bin"

    def put(name, M):
        atomic_write_bytes(_out(args, name + ext), matrix_bytes(M, fmt))

    if args.preset == "recovery":
        data, z = generate_synthetic(recovery_spec(seed=seed, n=args.n or 2000))
        put("X", data.X)
        put("y", data.y)
        put("z", z.astype(np.float64))
    else:
        task = image_task(side=args.side, n=args.n or 1000, n_key=args.n_key, seed=seed)
        put("X", task.X)
        put("probs", task.model.predict(task.X))
        put("key", task.key_pixels.astype(np.float64))
        save_model(task.model, _out(args, "model.json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p, data=True):
    p.add_argument("--seed", type=int, default=None,
                   help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--out-dir", default=None, help="directory for relative output paths")
    p.add_argument("--format", choices=("csv", "raw-f64"), default=None,
                   help="matrix file format (default: by extension)")
    p.add_argument("--header", action="store_true", help="skip the first CSV line")
    if data:
        p.add_argument("--data", required=True, help="feature matrix, one row per case")


def _targets_flags(p):
    p.add_argument("--probs", help="class probabilities of the target model")
    p.add_argument("--targets", help="real-valued responses used as-is")
    p.add_argument("--class", dest="class_index", type=int, default=-1,
                   help="probability column to explain (default: last)")
    p.add_argument("--eps", type=float, default=1e-6, help="logit clamping")


def _model_flags(p):
    p.add_argument("--model", help="builtin model JSON")
    p.add_argument("--predict-cmd", help="command speaking the JSON-lines protocol")


def _report_flags(p):
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--table", help="comparison JSON (a .txt table is written alongside)")
    p.add_argument("--csv", help="raw replicate values as CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dmmmen", description="Mixture-of-elastic-nets black-box explainer.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit the mixture to (data, black-box outputs)")
    _common(p)
    _targets_flags(p)
    p.add_argument("--out", required=True, help="chain checkpoint")
    p.add_argument("--config", help="hyperparameter JSON")
    p.add_argument("--J", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--prior", choices=("elastic-net", "flat"))
    p.add_argument("--intercept", action="store_true", help="add a constant column")
    p.add_argument("--scale", action="store_true", help="min-max scale features first")
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("insights", help="global importance pattern from a fitted chain")
    _common(p, data=False)
    p.add_argument("--chain", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_INSIGHT_K)
    p.add_argument("--threshold", type=float, default=DOMINANCE_THRESHOLD)
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap", help="PGM image of the importance map")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.set_defaults(func=cmd_insights)

    p = sub.add_parser("explain", help="per-instance explanations")
    _common(p)
    _targets_flags(p)
    p.add_argument("--chain", required=True)
    p.add_argument("--instances", type=_int_list, default=None, help="row indices (default: all)")
    p.add_argument("--k", type=int, default=DEFAULT_SEGMENTS)
    p.add_argument("--patch", type=int, default=None, help="rank square grid patches")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--rank-by", choices=("contribution", "coefficient"), default="contribution")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval-nullify", help="nullify/replace fidelity experiment")
    _common(p)
    _model_flags(p)
    _report_flags(p)
    p.add_argument("--insights", required=True)
    p.add_argument("--counts", type=_int_list, default=list(DEFAULT_COUNTS))
    p.add_argument("--replicates", type=int, default=DEFAULT_REPLICATES)
    p.add_argument("--fraction", type=float, default=DEFAULT_FRACTION)
    p.add_argument("--nullify", choices=("zero", "min"), default="zero")
    p.set_defaults(func=cmd_eval_nullify)

    p = sub.add_parser("eval-craft", help="crafted-case fidelity experiment")
    _common(p)
    _model_flags(p)
    _report_flags(p)
    p.add_argument("--insights", required=True)
    p.add_argument("--counts", type=_int_list, default=list(DEFAULT_COUNTS))
    p.add_argument("--n-cases", type=int, default=500)
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--fill", choices=("positive-mean", "max-value"), default="positive-mean")
    p.set_defaults(func=cmd_eval_craft)

    p = sub.add_parser("eval-keep", help="keep-top-k fidelity experiment")
    _common(p)
    _model_flags(p)
    _report_flags(p)
    p.add_argument("--rankings", required=True, help="explanations JSON")
    p.add_argument("--k", type=int, default=DEFAULT_SEGMENTS)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.set_defaults(func=cmd_eval_keep)

    p = sub.add_parser("geweke", help="joint-distribution check of the sampler")
    _common(p, data=False)
    p.add_argument("--iters", type=int, default=100_000)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--threshold", type=float, default=4.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_geweke)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p, data=False)
    p.add_argument("--preset", choices=("recovery", "image"), default="recovery")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--n-key", type=int, default=40)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dmmmen {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidConfig as exc:
        print(f"dmmmen {args.command}: invalid option: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"dmmmen {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DMMError, ValueError, KeyError, OSError, ProtocolError) as exc:
        print(f"dmmmen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
