"""``qiloss`` command line: audits, losses, paths, training runs and synthetic data.

Exit codes: 0 on success, 1 when a parameter or request is invalid, 2 on
usage, I/O or parse errors. Audits that find violations still exit 0; the
counts are in the report.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path

from . import __version__
from .files import DescriptorFileError, dumps_report, format_descriptors, read_descriptors
from .geodesic import DegeneratePathError, PartitionTooCoarseError, build_path, verify_theorem
from .losses import qi_loss
from .quasi_iso import DescriptorSet, QiParams, find_violating_pairs, pair_matrices
from .synth import SynthConfig, generate
from .trainer import (
    SWEEP_HEADER_EPSILON,
    SWEEP_HEADER_LAMBDA,
    TrainConfig,
    TrainingDiverged,
    fmt_float,
    sweep_epsilon,
    sweep_lambda,
    sweep_to_csv,
    train,
)

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
FIG2_LAMBDAS = "0,1e-5,1e-3,1e-2,1e-1,0.5"


class InvalidRequest(ValueError):
    """A well-formed command asking for something impossible (exit code 1)."""


def _real(text: str) -> float:
    """Float parser for flags; ``inf`` is accepted and NaN is not."""
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if math.isnan(v):
        raise argparse.ArgumentTypeError("NaN is not allowed")
    return v


def _real_list(text: str) -> list[float]:
    return [_real(t) for t in text.split(",") if t.strip()]


def _p_value(p: float) -> int | str:
    return "inf" if math.isinf(p) else int(p)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("corridor and loss")
    g.add_argument("--k", type=_real, default=1.5, help="multiplicative distortion K (default 1.5)")
    g.add_argument("--b", type=_real, default=0.5, help="additive slack B (default 0.5)")
    g.add_argument("--epsilon", type=_real, default=10.0, help="depth neighbourhood radius; 'inf' disables it (default 10)")
    g.add_argument("--tau", type=_real, default=1.0, help="loss temperature (default 1)")
    g.add_argument("--p", default="2", choices=["1", "2", "inf"], help="feature norm order (default 2)")
    g.add_argument("--mode", default="eq6", choices=["eq6", "alg1_literal"], help="loss variant (default eq6)")
    g.add_argument("--seed", type=int, default=0, help="seed for synth/train/sweep (default 0)")
    g.add_argument("--out", type=Path, default=None, help="output file (default: stdout)")

    parser = argparse.ArgumentParser(prog="qiloss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    a = sub.add_parser("audit", parents=[common], help="count corridor violations in a descriptor file")
    a.add_argument("descriptors", type=Path)
    a.add_argument("--theorem", action="store_true", help="also verify the global bounds under the pseudo-geodesic")

    lo = sub.add_parser("loss", parents=[common], help="evaluate the quasi-isometric loss and per-pair margins")
    lo.add_argument("descriptors", type=Path)
    lo.add_argument("--margins", type=Path, default=None,
                    help="per-pair margin CSV (default: next to --out as <stem>_margins.csv)")

    ge = sub.add_parser("geodesic", parents=[common], help="pseudo-geodesic path between two rows")
    ge.add_argument("descriptors", type=Path)
    ge.add_argument("--from", dest="src", type=int, required=True, help="row index of the first object")
    ge.add_argument("--to", dest="dst", type=int, required=True, help="row index of the second object")

    def training_flags(p):
        p.add_argument("--n", type=int, default=512, help="number of synthetic objects (default 512)")
        p.add_argument("--epochs", type=int, default=200)
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--lr", type=_real, default=1e-2)
        p.add_argument("--lambda-obj", type=_real, default=1.0)
        p.add_argument("--experiment", default="descriptor_level", choices=["descriptor_level", "map_level"])

    tr = sub.add_parser("train", parents=[common], help="train the toy model and write per-epoch metrics CSV")
    training_flags(tr)
    tr.add_argument("--lambda-qi", type=_real, default=0.5)

    sw = sub.add_parser("sweep", parents=[common], help="final ratio and E_z over a list of lambda or epsilon values")
    training_flags(sw)
    grp = sw.add_mutually_exclusive_group()
    grp.add_argument("--lambdas", type=_real_list, default=None, help=f"comma list (default {FIG2_LAMBDAS})")
    grp.add_argument("--epsilons", type=_real_list, default=None, help="comma list; sweeps epsilon at --lambda-qi")
    sw.add_argument("--lambda-qi", type=_real, default=0.5, help="lambda for an epsilon sweep (default 0.5)")

    sy = sub.add_parser("synth", parents=[common], help="write a synthetic descriptor file")
    sy.add_argument("--kind", default="noisy_scene", choices=["collinear", "arc", "noisy_scene"])
    sy.add_argument("--n", type=int, default=512)
    sy.add_argument("--dim", type=int, default=None, help="descriptor width (default: 8, or 2 for arc)")
    sy.add_argument("--radius", type=_real, default=10.0)
    sy.add_argument("--depth-range", type=_real_list, default=[1.0, 60.0], metavar="LO,HI")
    return parser


def _params(args) -> QiParams:
    return QiParams(K=args.k, B=args.b, epsilon=args.epsilon, tau=args.tau, p_feat=args.p, mode=args.mode)


def _params_dict(q: QiParams) -> dict:
    return {"k": q.K, "b": q.B, "epsilon": q.epsilon, "tau": q.tau, "p": _p_value(q.p_feat), "mode": q.mode}


def _emit(text: str, out: Path | None, stdout) -> None:
    if out is None:
        stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


def _report(ds: DescriptorSet, q: QiParams, with_theorem: bool) -> dict:
    rep = find_violating_pairs(ds, q)
    worst = [
        {"i": w["i"], "j": w["j"], "id_i": ds.ids[w["i"]], "id_j": ds.ids[w["j"]], "kind": w["kind"], "margin": w["margin"]}
        for w in rep.worst(10)
    ]
    out = {
        "params": _params_dict(q),
        "counts": {
            "objects": len(ds),
            "total_pairs": rep.total_pairs,
            "eligible_pairs": rep.eligible_count,
            "pos": len(rep.pos_pairs),
            "neg": len(rep.neg_pairs),
        },
        "ratio": rep.ratio,
        "loss": qi_loss(ds, q).value,
        "worst_violations": worst,
    }
    if with_theorem:
        th = verify_theorem(ds, q)
        out["theorem"] = {
            "premise_ok": th.premise_ok,
            "b_prime": th.b_prime,
            "global_ok": th.global_ok,
            "worst_margin": None if th.worst_pair is None else th.worst_margin,
            "status": th.status,
            "pairs_checked": th.n_checked,
            "pairs_without_path": th.n_without_path,
            "violations": th.n_violations,
        }
    return out


def margins_csv(ds: DescriptorSet, q: QiParams) -> str:
    """One row per pair ``i < j``: distances, eligibility and both margins."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "id_i", "id_j", "d1", "d2", "eligible", "m_pos", "m_neg", "kind"])
    if len(ds) >= 2:
        pm = pair_matrices(ds, q)
        for k in range(len(pm.i)):
            i, j = int(pm.i[k]), int(pm.j[k])
            kind = "pos" if pm.is_pos[k] else "neg" if pm.is_neg[k] else ""
            w.writerow([i, j, ds.ids[i], ds.ids[j], fmt_float(pm.d1[k]), fmt_float(pm.d2[k]),
                        int(pm.eligible[k]), fmt_float(pm.m_pos[k]), fmt_float(pm.m_neg[k]), kind])
    return buf.getvalue()


def _train_config(args, q: QiParams) -> TrainConfig:
    cfg = TrainConfig(
        synth=SynthConfig(n=args.n),
        qi=q,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        lambda_qi=args.lambda_qi,
        lambda_obj=args.lambda_obj,
        experiment=args.experiment,
    )
    return cfg.with_seed(args.seed)


def _cmd_audit(args, stdout):
    ds, q = read_descriptors(args.descriptors), _params(args)
    _emit(dumps_report(_report(ds, q, args.theorem)), args.out, stdout)


def _cmd_loss(args, stdout):
    ds, q = read_descriptors(args.descriptors), _params(args)
    margins = args.margins
    if margins is None and args.out is not None:
        margins = args.out.with_name(args.out.stem + "_margins.csv")
    _emit(dumps_report(_report(ds, q, False)), args.out, stdout)
    if margins is not None:
        margins.write_text(margins_csv(ds, q), encoding="utf-8")


def _cmd_geodesic(args, stdout):
    ds, q = read_descriptors(args.descriptors), _params(args)
    n = len(ds)
    for k in (args.src, args.dst):
        if not 0 <= k < n:
            raise InvalidRequest(f"row index {k} out of range for {n} objects")
    path = build_path(ds, args.src, args.dst, q)
    body = {
        "params": _params_dict(q),
        "from": args.src,
        "to": args.dst,
        "partition": path.partition,
        "partition_ids": [ds.ids[k] for k in path.partition],
        "depths": [float(ds.depths[k]) for k in path.partition],
        "segment_lengths": [float(v) for v in path.segment_lengths],
        "total": path.total,
        "mesh": path.mesh,
    }
    _emit(dumps_report(body), args.out, stdout)


def _cmd_train(args, stdout):
    log = train(_train_config(args, _params(args)))
    _emit(log.to_csv(), args.out, stdout)


def _cmd_sweep(args, stdout):
    cfg = _train_config(args, _params(args))
    if args.epsilons is not None:
        rows, header = sweep_epsilon(cfg, args.epsilons), SWEEP_HEADER_EPSILON
    else:
        lambdas = args.lambdas if args.lambdas is not None else _real_list(FIG2_LAMBDAS)
        rows, header = sweep_lambda(cfg, lambdas), SWEEP_HEADER_LAMBDA
    _emit(sweep_to_csv(rows, header), args.out, stdout)


def _cmd_synth(args, stdout):
    if len(args.depth_range) != 2:
        raise InvalidRequest("--depth-range takes exactly two values LO,HI")
    dim = args.dim if args.dim is not None else (2 if args.kind == "arc" else 8)
    extra = {"nuisance_dims": dim - 2} if args.kind == "noisy_scene" else {}
    cfg = SynthConfig(kind=args.kind, n=args.n, dim=dim, radius=args.radius,
                      depth_range=tuple(args.depth_range), seed=args.seed, **extra)
    _emit(format_descriptors(generate(cfg)), args.out, stdout)


COMMANDS = {
    "audit": _cmd_audit,
    "loss": _cmd_loss,
    "geodesic": _cmd_geodesic,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "synth": _cmd_synth,
}


def run(argv=None, stdout=None, stderr=None) -> int:
    """Run one command; returns the exit code instead of exiting."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return EXIT_OK if e.code in (0, None) else EXIT_IO
    try:
        COMMANDS[args.command](args, stdout)
    except (DescriptorFileError, OSError) as e:
        print(f"qiloss: error: {e}", file=stderr)
        return EXIT_IO
    except (ValueError, InvalidRequest, DegeneratePathError, PartitionTooCoarseError, IndexError, TrainingDiverged) as e:
        print(f"qiloss: error: {e}", file=stderr)
        return EXIT_INVALID
    return EXIT_OK


def main() -> None:
    sys.exit(run())
