#!/usr/bin/env python3
"""Batch figure renderer for the toolkit's CSV outputs.

Reads the result directory produced by the pipeline's `reproduce` command
and emits static figures (PNG and PDF, fixed size and DPI):

  ErrorBound         mean weighted squared error curves vs the analytic bound
  Containment        per-step containment frequency with the probability line
  ClosedLoopCost     mean stage cost decay with individual realizations
  InputTrace         applied actuation with the input box
  DistanceConstraint second/third mass separation with the compression limit

Usage: render.py --in <results dir> --out <figure dir> [--kind all] [--p 0.95]
Exits nonzero on missing files, empty tables, or a schema mismatch.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SCHEMA_LINE = "# schema=1"
FIGSIZE = (6.0, 3.6)
DPI = 150

KINDS = ["ErrorBound", "Containment", "ClosedLoopCost", "InputTrace",
         "DistanceConstraint"]


class RenderError(RuntimeError):
    pass


def read_csv(path):
    """Parse one schema-1 CSV into {column: list-of-str}."""
    if not os.path.exists(path):
        raise RenderError(f"missing input file: {path}")
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0].strip() != SCHEMA_LINE:
        raise RenderError(f"{path}: unsupported or missing schema marker")
    if len(lines) < 3:
        raise RenderError(f"{path}: no data rows")
    header = lines[1].split(",")
    cols = {h: [] for h in header}
    for ln in lines[2:]:
        if not ln:
            continue
        parts = ln.split(",")
        if len(parts) != len(header):
            raise RenderError(f"{path}: ragged row '{ln[:40]}...'")
        for h, v in zip(header, parts):
            cols[h].append(v)
    return cols


def floats(cols, name):
    if name not in cols:
        raise RenderError(f"missing column '{name}'")
    return [float(v) for v in cols[name]]


def _save(fig, out_dir, name):
    fig.tight_layout()
    for ext in ("png", "pdf"):
        fig.savefig(os.path.join(out_dir, f"{name}.{ext}"), dpi=DPI)
    plt.close(fig)


def _openloop_files(in_dir):
    files = sorted(glob.glob(os.path.join(in_dir, "openloop_*.csv")))
    if not files:
        raise RenderError(f"no openloop_*.csv found in {in_dir}")
    return files


def _trace_files(in_dir):
    files = sorted(glob.glob(os.path.join(in_dir, "trace_rep*.csv")))
    if not files:
        raise RenderError(f"no trace_rep*.csv found in {in_dir}")
    return files


def render_error_bound(in_dir, out_dir):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    bound_drawn = False
    for path in _openloop_files(in_dir):
        cols = read_csv(path)
        k = floats(cols, "k")
        mean = floats(cols, "mean_err_M2")
        bound = floats(cols, "bound")
        label = os.path.basename(path)[len("openloop_"):-len(".csv")]
        style = "-" if "forced" in label else "--"
        ax.plot(k, mean, style, linewidth=1.0, label=label)
        if not bound_drawn:
            ax.plot(k, bound, "b-", linewidth=2.0, label="analytic bound")
            bound_drawn = True
        # the bound must dominate every rendered mean curve
        excess = max(m - b for m, b in zip(mean, bound))
        if excess > 0:
            print(f"warning: {label}: empirical mean exceeds bound by {excess:.3e}",
                  file=sys.stderr)
    ax.set_yscale("log")
    ax.set_xlabel("step k")
    ax.set_ylabel("mean weighted squared error")
    ax.legend(fontsize=6, ncol=2)
    _save(fig, out_dir, "ErrorBound")


def render_containment(in_dir, out_dir, p_level):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for path in _openloop_files(in_dir):
        label = os.path.basename(path)[len("openloop_"):-len(".csv")]
        if "zero" in label:
            continue  # the forced runs are the critical case
        cols = read_csv(path)
        ax.plot(floats(cols, "k"), floats(cols, "containment"),
                linewidth=1.0, label=label)
    ax.axhline(p_level, color="k", linestyle="--", linewidth=1.0,
               label=f"p = {p_level:.0%}")
    ax.set_ylim(min(0.9, p_level - 0.02), 1.005)
    ax.set_xlabel("step k")
    ax.set_ylabel("containment frequency")
    ax.legend(fontsize=6)
    _save(fig, out_dir, "Containment")


def render_closed_loop_cost(in_dir, out_dir):
    stats = read_csv(os.path.join(in_dir, "closedloop_stats.csv"))
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for path in _trace_files(in_dir):
        cols = read_csv(path)
        ax.plot(floats(cols, "k"), floats(cols, "stage_cost"),
                "r:", linewidth=0.6)
    ax.plot(floats(stats, "k"), floats(stats, "mean_stage_cost"),
            "b-", linewidth=1.8, label="mean")
    ax.set_yscale("log")
    ax.set_xlabel("step k")
    ax.set_ylabel("stage cost")
    ax.legend(fontsize=7)
    _save(fig, out_dir, "ClosedLoopCost")


def render_input_trace(in_dir, out_dir, u_max):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for path in _trace_files(in_dir):
        cols = read_csv(path)
        ax.plot(floats(cols, "k"), floats(cols, "u_1"), "r:", linewidth=0.7)
    ax.axhline(u_max, color="k", linestyle="--", linewidth=1.0)
    ax.axhline(-u_max, color="k", linestyle="--", linewidth=1.0)
    ax.set_xlabel("step k")
    ax.set_ylabel("actuation u [N]")
    _save(fig, out_dir, "InputTrace")


def render_distance_constraint(in_dir, out_dir, compression):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for path in _trace_files(in_dir):
        cols = read_csv(path)
        gap = [x3 - x2 for x2, x3 in zip(floats(cols, "x_2"), floats(cols, "x_3"))]
        ax.plot(floats(cols, "k"), gap, "r:", linewidth=0.7)
    ax.axhline(-compression, color="k", linestyle="--", linewidth=1.0,
               label=f"compression limit {-compression} m")
    ax.set_xlabel("step k")
    ax.set_ylabel("separation deviation of masses 2 and 3 [m]")
    ax.legend(fontsize=7)
    _save(fig, out_dir, "DistanceConstraint")


def render(in_dir, out_dir, kind="all", p_level=0.95, u_max=100.0, compression=1.0):
    os.makedirs(out_dir, exist_ok=True)
    todo = KINDS if kind == "all" else [kind]
    for item in todo:
        if item not in KINDS:
            raise RenderError(f"unknown figure kind '{item}'")
    if "ErrorBound" in todo:
        render_error_bound(in_dir, out_dir)
    if "Containment" in todo:
        render_containment(in_dir, out_dir, p_level)
    if "ClosedLoopCost" in todo:
        render_closed_loop_cost(in_dir, out_dir)
    if "InputTrace" in todo:
        render_input_trace(in_dir, out_dir, u_max)
    if "DistanceConstraint" in todo:
        render_distance_constraint(in_dir, out_dir, compression)
    return todo


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--in", dest="in_dir", required=True)
    parser.add_argument("--out", dest="out_dir", required=True)
    parser.add_argument("--kind", default="all", choices=["all"] + KINDS)
    parser.add_argument("--p", type=float, default=0.95)
    parser.add_argument("--u-max", type=float, default=100.0)
    parser.add_argument("--compression", type=float, default=1.0)
    args = parser.parse_args(argv)
    try:
        done = render(args.in_dir, args.out_dir, kind=args.kind, p_level=args.p,
                      u_max=args.u_max, compression=args.compression)
    except RenderError as exc:
        print(f"render error: {exc}", file=sys.stderr)
        return 1
    print(f"rendered {len(done)} figure(s) into {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
