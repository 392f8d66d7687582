"""Command-line pipeline: preprocess, fit, control, report, subsets, simulate.

One plain-text config file drives prior constants, sampler settings and
thresholds; command-line flags override config values.  Every command writes
a manifest (inputs with digests, config snapshot, outputs) and all outputs
are tab-separated text.  Exit codes: 0 success, 1 validation failure,
2 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import config as configmod
from .controls import permute_matrix, simulate_m0
from .dataset import (
    ExperimentSeriesSet,
    MatrixFormatError,
    TimeSeriesMatrix,
    average_replicates,
    filter_sparse,
    load_matrix,
    median_center,
    write_matrix,
)
from .model import Model, PriorConstants
from .sampler import ChainInitError, SamplerConfig, posterior_mode, run_chain
from .stats import (
    build_report,
    calibrate_threshold,
    intersect_claims,
    rank_and_order,
    reproducibility_scan,
    snr_summary,
)
from .traceio import load_state, load_trace, save_state, save_trace


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; bad arguments are validation
    # failures here, which the exit-code contract maps to 1.
    def error(self, message):
        raise ValidationError(message)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(prefix: Path, command: str, inputs: list[Path],
                    outputs: list[Path], settings: dict) -> Path:
    path = prefix.with_name(prefix.name + ".manifest.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"command\t{command}\n")
        fh.write(f"timestamp\t{datetime.now(timezone.utc).isoformat()}\n")
        for key, value in settings.items():
            fh.write(f"config.{key}\t{value}\n")
        for p in inputs:
            fh.write(f"input\t{p}\t{_sha256(p)}\n")
        for p in outputs:
            fh.write(f"output\t{p}\n")
    return path


def _load_config(args) -> dict[str, str]:
    path = getattr(args, "config", None) or configmod.default_config_path()
    if path:
        return configmod.read_config(path)
    return {}


def _sampler_config(cfg: dict[str, str], args, use_seed: bool = True) -> SamplerConfig:
    pairs = [("iterations", "iterations"), ("burn_in", "burn_in"),
             ("thinning", "thinning"), ("threads", "workers")]
    if use_seed:
        pairs.append(("seed", "seed"))
    overrides = {}
    for attr, name in pairs:
        value = getattr(args, attr, None)
        if value is not None:
            overrides[name] = value
    if "iterations" not in cfg and "iterations" not in overrides:
        raise ValidationError("iterations must be set via config or --iterations")
    return SamplerConfig.from_dict(cfg, **overrides)


def _fmt(x) -> str:
    if isinstance(x, float) and np.isnan(x):
        return "NA"
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

_PIPELINE_FLAGS = ("--median-center", "--average-replicates", "--filter-missing")


def _flag_order(argv: list[str]) -> list[str]:
    """Preprocessing steps run in the order their flags appear."""
    seen = []
    for token in argv:
        name = token.split("=", 1)[0]
        if name in _PIPELINE_FLAGS and name not in seen:
            seen.append(name)
    return seen


def cmd_preprocess(args, argv: list[str]) -> int:
    inputs = [Path(p) for p in args.inputs]
    if args.format == "wide":
        matrices = [load_matrix(inputs, "wide")]
    else:
        matrices = [load_matrix(p, "long") for p in inputs]
    if len(matrices) > 1 and not args.average_replicates:
        raise ValidationError(
            "multiple long inputs are replicate groups; pass --average-replicates")
    removal_log = []
    for flag in _flag_order(argv):
        if flag == "--average-replicates":
            matrices = [average_replicates(matrices)]
        elif flag == "--median-center":
            matrices = [median_center(m) for m in matrices]
        elif flag == "--filter-missing":
            if len(matrices) > 1:
                raise ValidationError("--filter-missing must come after --average-replicates")
            matrices[0], removal_log = filter_sparse(matrices[0], args.filter_missing)
    matrix = matrices[0]
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_matrix(matrix, out)
    log_path = out.with_name(out.name + ".removals.tsv")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("action\tgene\texperiment\tmissing_fraction\n")
        for entry in removal_log:
            fh.write(f"{entry.action}\t{entry.gene}\t{entry.experiment or 'NA'}\t"
                     f"{_fmt(entry.missing_fraction) if entry.missing_fraction is not None else 'NA'}\n")
    _write_manifest(out, "preprocess", inputs, [out, log_path],
                    {"pipeline": ",".join(_flag_order(argv)) or "validate-only",
                     "filter_missing": args.filter_missing})
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def cmd_fit(args, argv) -> int:
    matrix = load_matrix(args.matrix, "long")
    cfg = _load_config(args)
    consts = configmod.priors_from_config(cfg)
    sampler_cfg = _sampler_config(cfg, args)
    model = Model(args.model)
    fixed_theta = load_state(args.fix_theta) if args.fix_theta else None
    if fixed_theta is not None and fixed_theta.n_experiments != matrix.n_experiments:
        raise ValidationError("--fix-theta state has a different experiment count")
    trace = run_chain(matrix, consts, sampler_cfg, model, fixed_theta=fixed_theta)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = save_trace(trace, prefix)
    mode_path = prefix.with_name(prefix.name + ".mode.tsv")
    save_state(posterior_mode(trace), mode_path)
    outputs = list(paths.values()) + [mode_path]
    settings = {**consts.to_dict(),
                "iterations": sampler_cfg.iterations, "burn_in": sampler_cfg.burn_in,
                "thinning": sampler_cfg.thinning, "seed": sampler_cfg.seed,
                "model": model.value, "workers": sampler_cfg.workers}
    inputs = [Path(args.matrix)] + ([Path(args.fix_theta)] if args.fix_theta else [])
    _write_manifest(prefix, "fit", inputs, outputs, settings)
    return 0


# ---------------------------------------------------------------------------
# control
# ---------------------------------------------------------------------------

def cmd_control(args, argv) -> int:
    matrix = load_matrix(args.matrix, "long")
    cfg = _load_config(args)
    consts = configmod.priors_from_config(cfg)
    if not args.real_mode:
        raise ValidationError(
            "control fits pin the experiment-level parameters at the real-data "
            "posterior mode; run `cyclefit fit` first and pass --real-mode <prefix>.mode.tsv")
    mode = load_state(args.real_mode)
    if mode.n_experiments != matrix.n_experiments:
        raise ValidationError("--real-mode state has a different experiment count")
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.kind == "permutation":
        control = permute_matrix(matrix, args.seed)
    else:
        control, truth = simulate_m0(matrix, consts, args.seed)
        truth_path = prefix.with_name(prefix.name + ".truth.tsv")
        save_state(truth, truth_path)
        outputs.append(truth_path)
    control_path = prefix.with_name(prefix.name + ".matrix.tsv")
    write_matrix(control, control_path)
    outputs.append(control_path)
    # --seed names the control-generation stream; the sampler seed comes from config.
    sampler_cfg = _sampler_config(cfg, args, use_seed=False)
    trace = run_chain(control, consts, sampler_cfg, Model.M1, fixed_theta=mode)
    outputs.extend(save_trace(trace, prefix).values())
    mode_path = prefix.with_name(prefix.name + ".mode.tsv")
    save_state(posterior_mode(trace), mode_path)
    outputs.append(mode_path)
    _write_manifest(prefix, "control", [Path(args.matrix), Path(args.real_mode)],
                    outputs, {"kind": args.kind, "seed": args.seed,
                              "iterations": sampler_cfg.iterations})
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _write_report_tsv(path, report) -> None:
    claimed = {k: report.claimed.get(k) for k in ("snr", "lpi", "bic")}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene\tsnr_mean\tsnr_q025\tsnr_q975\tlpi\tbic01\tphase\trank\t"
                 "claimed_snr\tclaimed_lpi\tclaimed_bic\n")
        for i, gene in enumerate(report.genes):
            s = report.snr[i]
            flags = ["NA" if claimed[k] is None else str(int(claimed[k][i]))
                     for k in ("snr", "lpi", "bic")]
            fh.write("\t".join([
                gene, _fmt(s.mean), _fmt(s.q025), _fmt(s.q975),
                _fmt(float(report.lpi[i])), _fmt(float(report.bic01[i])),
                _fmt(float(report.relative_phase[i])), str(int(report.rank[i])),
            ] + flags) + "\n")


def cmd_report(args, argv) -> int:
    matrix = load_matrix(args.matrix, "long")
    trace = load_trace(args.trace)
    if not trace.states:
        raise ValidationError("real trace holds no retained states")
    if trace.states[0].n_genes != matrix.n_genes:
        raise ValidationError("trace and matrix cover different gene universes")
    control_trace = None
    control_matrix = None
    if args.control_trace:
        control_trace = load_trace(args.control_trace)
        if not control_trace.states:
            raise ValidationError("control trace holds no retained states")
        if control_trace.states[0].n_genes != matrix.n_genes:
            raise ValidationError("control trace covers a different gene universe")
        if args.control_matrix:
            control_matrix = load_matrix(args.control_matrix, "long")
    mode_m0 = load_state(args.m0_mode) if args.m0_mode else None
    report = build_report(
        trace, matrix, control_trace=control_trace, control_matrix=control_matrix,
        mode_m0=mode_m0, fpr=args.fpr, bic_threshold=args.bic_threshold,
    )
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    report_path = prefix.with_name(prefix.name + ".report.tsv")
    _write_report_tsv(report_path, report)
    outputs = [report_path]

    _, heatmap_rows = rank_and_order(report, matrix)
    heatmap_path = prefix.with_name(prefix.name + ".heatmap.tsv")
    with open(heatmap_path, "w", encoding="utf-8") as fh:
        fh.write("position\tgene\tgroup\texperiment\ttime\tvalue\n")
        for row in heatmap_rows:
            value = "NA" if np.isnan(row.value) else _fmt(row.value)
            fh.write(f"{row.position}\t{row.gene}\t{row.group}\t{row.experiment}\t"
                     f"{_fmt(row.time)}\t{value}\n")
    outputs.append(heatmap_path)

    if report.claimed:
        scores = {"snr": report.snr_mean, "lpi": report.lpi}
        if not np.all(np.isnan(report.bic01)):
            scores["bic"] = np.where(np.isnan(report.bic01), -np.inf, report.bic01)
        inter = intersect_claims(report.claimed, scores)
        inter_path = prefix.with_name(prefix.name + ".intersect.tsv")
        with open(inter_path, "w", encoding="utf-8") as fh:
            fh.write("kind\ta\tb\tvalue\n")
            for name, mask in report.claimed.items():
                fh.write(f"claimed\t{name}\t.\t{int(np.sum(mask))}\n")
            for (x, y), count in inter.pairwise_counts.items():
                fh.write(f"overlap\t{x}\t{y}\t{count}\n")
            for (x, y), rho in inter.correlations.items():
                fh.write(f"spearman\t{x}\t{y}\t{_fmt(rho)}\n")
            fh.write(f"intersection\t.\t.\t{int(inter.intersection.sum())}\n")
        outputs.append(inter_path)

    inputs = [Path(args.matrix)]
    _write_manifest(prefix, "report", inputs, outputs,
                    {"fpr": args.fpr, "bic_threshold": args.bic_threshold})
    return 0


# ---------------------------------------------------------------------------
# subsets
# ---------------------------------------------------------------------------

def _parse_partition(spec: str, matrix: TimeSeriesMatrix) -> dict[str, list[int]]:
    names = [e.name for e in matrix.experiments]
    out: dict[str, list[int]] = {}
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValidationError(f"partition entry {part!r} is not name=exp1,exp2")
        name, members = part.split("=", 1)
        idx = []
        for member in members.split(","):
            member = member.strip()
            if member not in names:
                raise ValidationError(f"partition references unknown experiment {member!r}")
            idx.append(names.index(member))
        out[name.strip()] = idx
    if not out:
        raise ValidationError("empty partition spec")
    return out


def _submatrix(matrix: TimeSeriesMatrix, experiment_idx: list[int]) -> TimeSeriesMatrix:
    exps = [matrix.experiments[i].copy() for i in experiment_idx]
    return TimeSeriesMatrix(list(matrix.genes), exps)


def cmd_subsets(args, argv) -> int:
    matrix = load_matrix(args.matrix, "long")
    cfg = _load_config(args)
    consts = configmod.priors_from_config(cfg)
    sampler_cfg = _sampler_config(cfg, args)
    partition = _parse_partition(args.partition, matrix)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    outputs = []

    snr_vectors: dict[str, np.ndarray] = {}
    claims: dict[str, np.ndarray] = {}
    for name, idx in partition.items():
        sub = _submatrix(matrix, idx)
        trace = run_chain(sub, consts, sampler_cfg, Model.M1)
        mode = posterior_mode(trace)
        control = permute_matrix(sub, args.control_seed)
        control_trace = run_chain(control, consts, sampler_cfg, Model.M1, fixed_theta=mode)
        summaries = snr_summary(trace, sub)
        real_mean = np.array([s.mean for s in summaries])
        control_mean = np.array([s.mean for s in snr_summary(control_trace, control)])
        _, claimed = calibrate_threshold(real_mean, control_mean, args.fpr, "greater")
        snr_vectors[name] = real_mean
        claims[name] = claimed
        sub_path = prefix.with_name(prefix.name + f".{name}.report.tsv")
        with open(sub_path, "w", encoding="utf-8") as fh:
            fh.write("gene\tsnr_mean\tsnr_q025\tsnr_q975\tclaimed_snr\n")
            for g, gene in enumerate(sub.genes):
                s = summaries[g]
                fh.write(f"{gene}\t{_fmt(s.mean)}\t{_fmt(s.q025)}\t{_fmt(s.q975)}\t"
                         f"{int(claimed[g])}\n")
        outputs.append(sub_path)

    names = list(partition)
    pair_path = prefix.with_name(prefix.name + ".pairs.tsv")
    with open(pair_path, "w", encoding="utf-8") as fh:
        fh.write("a\tb\tclaimed_a\tclaimed_b\toverlap\treproducible\tfinal_corr\tfinal_p\n")
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                scan = reproducibility_scan(snr_vectors[a], snr_vectors[b], args.alpha)
                overlap = int((claims[a] & claims[b]).sum())
                fh.write(f"{a}\t{b}\t{int(claims[a].sum())}\t{int(claims[b].sum())}\t"
                         f"{overlap}\t{scan.removed}\t{_fmt(scan.final_correlation)}\t"
                         f"{_fmt(scan.final_pvalue)}\n")
    outputs.append(pair_path)
    _write_manifest(prefix, "subsets", [Path(args.matrix)], outputs,
                    {"partition": args.partition, "fpr": args.fpr, "alpha": args.alpha,
                     "control_seed": args.control_seed})
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args, argv) -> int:
    cfg = _load_config(args)
    consts = configmod.priors_from_config(cfg)
    if args.template:
        template = load_matrix(args.template, "long")
        inputs = [Path(args.template)]
    else:
        if not args.genes or not args.times:
            raise ValidationError("pass --template, or --genes with --times")
        times = np.array([float(t) for t in args.times.split(",")])
        genes = [f"gene{i:04d}" for i in range(args.genes)]
        exps = [ExperimentSeriesSet(f"exp{e + 1}", times.copy(),
                                    np.zeros((args.genes, times.size)))
                for e in range(args.experiments)]
        template = TimeSeriesMatrix(genes, exps)
        inputs = []
    simulated, truth = simulate_m0(template, consts, args.seed)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    matrix_path = prefix.with_name(prefix.name + ".matrix.tsv")
    write_matrix(simulated, matrix_path)
    truth_path = prefix.with_name(prefix.name + ".truth.tsv")
    save_state(truth, truth_path)
    _write_manifest(prefix, "simulate", inputs, [matrix_path, truth_path],
                    {"seed": args.seed, "genes": simulated.n_genes,
                     "experiments": simulated.n_experiments})
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="cyclefit",
                     description="Bayesian periodicity analysis of time-series matrices")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="validate and preprocess input tables")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--format", choices=("long", "wide"), default="long")
    p.add_argument("--median-center", action="store_true")
    p.add_argument("--average-replicates", action="store_true")
    p.add_argument("--filter-missing", type=float, default=None)
    p.add_argument("--output", required=True)

    p = sub.add_parser("fit", help="run the MCMC fit")
    p.add_argument("--matrix", required=True)
    p.add_argument("--config")
    p.add_argument("--model", choices=("m0", "m1"), default="m1")
    p.add_argument("--fix-theta", help="state file whose experiment-level block is pinned")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thinning", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("control", help="generate a background dataset and fit it")
    p.add_argument("--matrix", required=True)
    p.add_argument("--kind", choices=("permutation", "m0"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--real-mode", help="mode state file from the real-data fit")
    p.add_argument("--config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thinning", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("report", help="statistics, claims, ranking, heatmap order")
    p.add_argument("--matrix", required=True)
    p.add_argument("--trace", required=True, help="real-data trace prefix")
    p.add_argument("--control-trace", help="control trace prefix")
    p.add_argument("--control-matrix")
    p.add_argument("--m0-mode", help="mode state of the trend-only fit (for the criterion difference)")
    p.add_argument("--fpr", type=float, default=0.002)
    p.add_argument("--bic-threshold", type=float, default=0.0)
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("subsets", help="per-subset fits plus reproducibility scan")
    p.add_argument("--matrix", required=True)
    p.add_argument("--config")
    p.add_argument("--partition", required=True,
                   help="semicolon-separated name=exp1,exp2 groups")
    p.add_argument("--fpr", type=float, default=0.01)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--control-seed", type=int, default=0)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thinning", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("simulate", help="draw a dataset from the trend-only null")
    p.add_argument("--template", help="matrix whose shape and mask are cloned")
    p.add_argument("--genes", type=int)
    p.add_argument("--experiments", type=int, default=1)
    p.add_argument("--times", help="comma-separated minutes, used with --genes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out-prefix", required=True)

    return parser


_COMMANDS = {
    "preprocess": cmd_preprocess,
    "fit": cmd_fit,
    "control": cmd_control,
    "report": cmd_report,
    "subsets": cmd_subsets,
    "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args, argv)
    except (ValidationError, MatrixFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ChainInitError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
