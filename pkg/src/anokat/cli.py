"""Command-line entry point.

Subcommands: ``run`` and ``resume`` drive the staged construction and write
ledger/CSV/plot artifacts; ``verify`` executes a named property suite and
turns its pass flag into the exit code; ``delta-merg`` re-estimates the
equidistribution defect of a checkpointed map on a chosen basepoint grid;
``plotdata`` dumps columnar data (no rendering).

Exit codes: 0 success, 2 configuration/usage errors, 3 stage rejection.
``ANOKAT_THREADS`` caps the thread pools of the numerical backends; it is
applied before the heavy libraries initialize.
"""

from __future__ import annotations

import os


def _apply_thread_cap() -> None:
    """Honor ANOKAT_THREADS before any BLAS/OpenMP pool starts."""
    raw = os.environ.get("ANOKAT_THREADS")
    if not raw:
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        raise SystemExit(f"ANOKAT_THREADS must be an integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


_apply_thread_cap()

import json
from pathlib import Path

import click
import numpy as np

from anokat.config import ConfigError, RunConfig, load_config
from anokat.dynamics import empirical_measure, pushforward
from anokat.scheme import (
    build_references,
    estimate_delta_merg,
    load_checkpoint,
    resume_scheme,
    run_scheme,
)
from anokat.surface import sample_mu_y
from anokat.verify import SUITES

__all__ = ["main"]


@click.group()
def main() -> None:
    """Staged area-preserving constructions with certified transport ledgers."""


def _config_from(config_path: str | None, **overrides) -> RunConfig:
    """Config file plus command-line overrides (flags win)."""
    base = load_config(config_path) if config_path else RunConfig()
    merged = base.to_json_dict()
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_json_dict(merged)


@main.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True,
              dir_okay=False), default=None, help="JSON config file.")
@click.option("--surface", type=click.Choice(["cylinder", "sphere", "disk"]),
              default=None, help="Surface to run on (overrides config).")
@click.option("--stages", type=int, default=None,
              help="Stage count (overrides config).")
@click.option("--seed", type=int, default=None,
              help="Base RNG seed (overrides config).")
@click.option("--outdir", type=click.Path(file_okay=False), default=None,
              help="Output directory (overrides config).")
@click.option("--quiet", is_flag=True, help="Suppress progress lines.")
def cmd_run(config_path, surface, stages, seed, outdir, quiet) -> None:
    """Run the staged construction from scratch."""
    try:
        config = _config_from(config_path, surface=surface, stages=stages,
                              seed=seed, outdir=outdir)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        raise SystemExit(2)
    echo = None if quiet else click.echo
    result = run_scheme(config, config.outdir, echo=echo)
    click.echo(f"ledger: {result.ledger_path}")
    raise SystemExit(result.exit_code)


@main.command("resume")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--outdir", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: the checkpoint's directory).")
@click.option("--quiet", is_flag=True, help="Suppress progress lines.")
def cmd_resume(checkpoint, outdir, quiet) -> None:
    """Continue a checkpointed run to its requested stage count."""
    if outdir is None:
        outdir = str(Path(checkpoint).parent)
    echo = None if quiet else click.echo
    try:
        result = resume_scheme(checkpoint, outdir, echo=echo)
    except (ValueError, KeyError) as exc:
        click.echo(f"checkpoint error: {exc}", err=True)
        raise SystemExit(2)
    click.echo(f"ledger: {result.ledger_path}")
    raise SystemExit(result.exit_code)


@main.command("verify")
@click.argument("suite", type=click.Choice(sorted(SUITES)))
@click.option("--seed", type=int, default=None)
@click.option("--trials", type=int, default=None,
              help="Randomized trials (ot-oracle, appendix-a).")
@click.option("--max-atoms", type=int, default=None,
              help="Largest measure size (ot-oracle).")
@click.option("--q", type=int, default=None,
              help="Rotation denominator (lemma-finerg, jacobians).")
@click.option("--eps", type=float, default=None,
              help="Accuracy the shuffle is built at (lemma-finerg, "
                   "jacobians).")
@click.option("--y-points", type=int, default=None,
              help="Height-grid size (lemma-finerg).")
@click.option("--atoms", type=int, default=None,
              help="Atoms per longitude measure (lemma-finerg).")
@click.option("--points", type=int, default=None,
              help="Stencil count (jacobians).")
@click.option("--fd-step", type=float, default=None,
              help="Finite-difference step (jacobians).")
@click.option("--json", "as_json", is_flag=True,
              help="Emit the report as JSON instead of a table.")
def cmd_verify(suite, as_json, **options) -> None:
    """Run a named verification suite; exit 0 iff every check passes."""
    fn = SUITES[suite]
    accepted = set(fn.__code__.co_varnames[:fn.__code__.co_argcount])
    kwargs = {k: v for k, v in options.items()
              if v is not None and k in accepted}
    ignored = sorted(k for k, v in options.items()
                     if v is not None and k not in accepted)
    if ignored:
        click.echo(f"note: {suite} ignores --{', --'.join(ignored)}",
                   err=True)
    report = fn(**kwargs)
    if as_json:
        click.echo(json.dumps(report.to_json_dict(), indent=2))
    else:
        for line in report.lines():
            click.echo(line)
    raise SystemExit(0 if report.passed else 1)


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        g = (int(a), int(b))
    except ValueError:
        raise click.BadParameter(f"expected WxH, got {text!r}")
    if g[0] < 1 or g[1] < 1:
        raise click.BadParameter("grid sides must be positive")
    return g


@main.command("delta-merg")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", default=None,
              help="Basepoint grid as THETAxY, e.g. 8x7 (default: config).")
def cmd_delta_merg(checkpoint, grid) -> None:
    """Equidistribution defect of a checkpointed map, printed as JSON."""
    try:
        config, state, _ = load_checkpoint(checkpoint)
    except (ValueError, KeyError) as exc:
        click.echo(f"checkpoint error: {exc}", err=True)
        raise SystemExit(2)
    g = _parse_grid(grid) if grid else None
    refs = build_references(state.tag, config)
    rep = estimate_delta_merg(state.conjugacy(), state.alpha, state.q,
                              state.tag, config, refs, grid=g)
    click.echo(json.dumps({
        "delta_merg": rep.value, "slack": rep.slack,
        "argmax": {"theta": rep.argmax_theta, "y": rep.argmax_y},
        "stride": rep.stride, "alpha": {"p": state.alpha.numerator,
                                        "q": state.q},
        "grid": list(g) if g else [config.merg_theta, config.merg_y],
    }, indent=2))
    raise SystemExit(0)


def _write_csv(path: Path, header: str, rows) -> None:
    lines = [header]
    lines += [",".join(repr(v) if isinstance(v, float) else str(v)
                       for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    click.echo(str(path))


@main.command("plotdata")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("what", type=click.Choice(["orbit", "measure", "bicurve",
                                           "ledger"]))
@click.option("--out", type=click.Path(file_okay=False), default="plotdata",
              help="Directory for the data files.")
@click.option("--basepoint", default="0.1,0.0",
              help="orbit/measure: starting point as THETA,Y.")
@click.option("--count", type=int, default=None,
              help="orbit: points to emit (default min(q, 4096)); "
                   "measure: atoms (default 2048).")
@click.option("--stage", type=int, default=None,
              help="bicurve: stage whose curve pair to sample (default "
                   "last); polyline resolution covers every oscillation.")
def cmd_plotdata(checkpoint, what, out, basepoint, count, stage) -> None:
    """Write plot-ready CSV data extracted from a checkpoint."""
    try:
        config, state, _ = load_checkpoint(checkpoint)
    except (ValueError, KeyError) as exc:
        click.echo(f"checkpoint error: {exc}", err=True)
        raise SystemExit(2)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    h = state.conjugacy()

    if what == "orbit":
        try:
            ts, ys = (float(v) for v in basepoint.split(","))
        except ValueError:
            raise click.BadParameter(f"expected THETA,Y, got {basepoint!r}")
        k = count if count is not None else min(state.q, 4096)
        e = empirical_measure(h, state.alpha, (ts, ys), state.q,
                              state.tag, count=min(k, state.q))
        _write_csv(outdir / "orbit.csv", "k,theta,y",
                   [(i, float(t), float(y)) for i, (t, y) in
                    enumerate(zip(e.theta, e.y))])
    elif what == "measure":
        try:
            _, ys = (float(v) for v in basepoint.split(","))
        except ValueError:
            raise click.BadParameter(f"expected THETA,Y, got {basepoint!r}")
        atoms = count if count is not None else 2048
        mu = pushforward(h, sample_mu_y(ys, atoms, state.tag))
        _write_csv(outdir / "measure.csv", "theta,y,weight",
                   [(float(t), float(y), float(w)) for t, y, w in
                    zip(mu.theta, mu.y, mu.weights)])
    elif what == "bicurve":
        idx = stage if stage is not None else len(state.layers)
        if not 1 <= idx <= len(state.layers):
            click.echo(f"checkpoint has stages 1..{len(state.layers)}",
                       err=True)
            raise SystemExit(2)
        bc = state.layers[idx - 1].bicurve
        m = min(64 * bc.N, 1 << 22)
        th = np.arange(m + 1) / m
        _write_csv(outdir / f"bicurve_stage_{idx:03d}.csv",
                   "theta,upper,lower",
                   [(float(t), float(u), float(l)) for t, u, l in
                    zip(th, bc.gamma_plus(th), bc.gamma_minus(th))])
    else:
        _write_csv(outdir / "ledger.csv",
                   "stage,eps,c0_gap,delta_merg,q_n",
                   [(r.stage, r.eps_after, r.c0_gap, r.delta_merg, r.q_n)
                    for r in state.reports])
    raise SystemExit(0)


if __name__ == "__main__":
    main()
