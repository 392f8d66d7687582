"""Tab-separated persistence for states and traces.

A state file holds one row per parameter block instance: a ``dims`` row, one
``experiment`` row per experiment (mu, psi, lam, zeta), one ``gene`` row per
gene (phi), and one ``cell`` row per series (a, b, c, d, amp, sigma2).  Trace
files add a leading snapshot-index column plus per-iteration log-posterior,
acceptance and config side files.  Floats are written with full round-trip
precision so identical runs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import ChainState, Model, PriorConstants
from .sampler import ChainTrace, SamplerConfig


def _fmt(x: float) -> str:
    return repr(float(x))


def _state_rows(state: ChainState, prefix: tuple[str, ...] = ()) -> list[list[str]]:
    rows = []
    pre = list(prefix)
    rows.append(pre + ["meta", ".", ".", _fmt(state.log_posterior)])
    for e in range(state.n_experiments):
        rows.append(pre + ["experiment", str(e), ".", _fmt(state.mu[e]),
                           _fmt(state.psi[e]), _fmt(state.lam[e]), _fmt(state.zeta[e])])
    for g in range(state.n_genes):
        rows.append(pre + ["gene", str(g), ".", _fmt(state.phi[g])])
    for g in range(state.n_genes):
        for e in range(state.n_experiments):
            rows.append(pre + ["cell", str(g), str(e),
                               _fmt(state.a[g, e]), _fmt(state.b[g, e]),
                               _fmt(state.c[g, e]), _fmt(state.d[g, e]),
                               _fmt(state.amp[g, e]), _fmt(state.sigma2[g, e])])
    return rows


def _parse_state_rows(rows: list[list[str]], g_n: int, e_n: int) -> ChainState:
    state = ChainState.zeros(g_n, e_n, PriorConstants())
    for row in rows:
        kind = row[0]
        if kind == "meta":
            state.log_posterior = float(row[3])
        elif kind == "experiment":
            e = int(row[1])
            state.mu[e], state.psi[e] = float(row[3]), float(row[4])
            state.lam[e], state.zeta[e] = float(row[5]), float(row[6])
        elif kind == "gene":
            state.phi[int(row[1])] = float(row[3])
        elif kind == "cell":
            g, e = int(row[1]), int(row[2])
            vals = [float(v) for v in row[3:9]]
            state.a[g, e], state.b[g, e], state.c[g, e] = vals[0], vals[1], vals[2]
            state.d[g, e], state.amp[g, e], state.sigma2[g, e] = vals[3], vals[4], vals[5]
        else:
            raise ValueError(f"unknown state row kind {kind!r}")
    return state


def save_state(state: ChainState, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dims\t{state.n_genes}\t{state.n_experiments}\n")
        for row in _state_rows(state):
            fh.write("\t".join(row) + "\n")


def load_state(path) -> ChainState:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n").split("\t")
        if first[0] != "dims":
            raise ValueError(f"{path}: not a state file")
        g_n, e_n = int(first[1]), int(first[2])
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    return _parse_state_rows(rows, g_n, e_n)


def save_trace(trace: ChainTrace, prefix) -> dict[str, Path]:
    """Write <prefix>.states.tsv, .logpost.tsv, .accept.tsv and .config.tsv."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {}

    p = prefix.with_name(prefix.name + ".states.tsv")
    with open(p, "w", encoding="utf-8") as fh:
        g_n = trace.states[0].n_genes if trace.states else 0
        e_n = trace.states[0].n_experiments if trace.states else 0
        fh.write(f"dims\t{g_n}\t{e_n}\t{len(trace.states)}\n")
        for k, (state, it) in enumerate(zip(trace.states, trace.kept_iterations)):
            fh.write(f"snapshot\t{k}\t{it}\n")
            for row in _state_rows(state):
                fh.write("\t".join(row) + "\n")
    paths["states"] = p

    p = prefix.with_name(prefix.name + ".logpost.tsv")
    with open(p, "w", encoding="utf-8") as fh:
        fh.write("iteration\tlog_posterior\n")
        for i, lp in enumerate(trace.log_posterior_series, start=1):
            fh.write(f"{i}\t{_fmt(lp)}\n")
    paths["logpost"] = p

    p = prefix.with_name(prefix.name + ".accept.tsv")
    with open(p, "w", encoding="utf-8") as fh:
        fh.write("move\taccepted\tproposed\n")
        for move, (acc, tot) in sorted(trace.acceptance.items()):
            fh.write(f"{move}\t{acc}\t{tot}\n")
    paths["accept"] = p

    p = prefix.with_name(prefix.name + ".config.tsv")
    cfg = trace.config
    with open(p, "w", encoding="utf-8") as fh:
        fh.write(f"model\t{trace.model.value}\n")
        for key, (name, _) in SamplerConfig._KEYS.items():
            value = getattr(cfg, name)
            if value is not None:
                fh.write(f"{key}\t{value}\n")
    paths["config"] = p
    return paths


def load_trace(prefix) -> ChainTrace:
    prefix = Path(prefix)

    with open(prefix.with_name(prefix.name + ".config.tsv"), "r", encoding="utf-8") as fh:
        cfg_rows = dict(line.rstrip("\n").split("\t", 1) for line in fh if line.strip())
    model = Model(cfg_rows.pop("model"))
    config = SamplerConfig.from_dict(cfg_rows)

    states: list[ChainState] = []
    kept: list[int] = []
    with open(prefix.with_name(prefix.name + ".states.tsv"), "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n").split("\t")
        if first[0] != "dims":
            raise ValueError(f"{prefix}: not a trace states file")
        g_n, e_n = int(first[1]), int(first[2])
        current: list[list[str]] = []
        for line in fh:
            row = line.rstrip("\n").split("\t")
            if row[0] == "snapshot":
                if current:
                    states.append(_parse_state_rows(current, g_n, e_n))
                    current = []
                kept.append(int(row[2]))
            else:
                current.append(row)
        if current:
            states.append(_parse_state_rows(current, g_n, e_n))

    with open(prefix.with_name(prefix.name + ".logpost.tsv"), "r", encoding="utf-8") as fh:
        fh.readline()
        lp = np.array([float(line.rstrip("\n").split("\t")[1]) for line in fh if line.strip()])

    acceptance: dict[str, list[int]] = {}
    with open(prefix.with_name(prefix.name + ".accept.tsv"), "r", encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            move, acc, tot = line.rstrip("\n").split("\t")
            acceptance[move] = [int(acc), int(tot)]

    return ChainTrace(states, kept, lp, acceptance, config, model)
