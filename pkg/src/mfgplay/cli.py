"""Command-line entry point: ``mfgplay <verb> <config> [--out DIR] [--threads N] [--no-cache]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 cache corruption.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import platform
import sys
import time
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from mfgplay import __version__
from mfgplay.analysis import deterministic_equilibria, l2_error, potential_scan, terminal_histogram, validation_error
from mfgplay.config import ConfigError, ExperimentConfig, parse_config
from mfgplay.noise import CacheCorruptionError, _atomic_write, cached_noise_bank, sample_noise_bank
from mfgplay.play import PlayConfig, run, vanishing_viscosity
from mfgplay.riccati import continuous_riccati
from mfgplay.reference import config_fingerprint, load_reference, save_reference, solve_reference

OUTPUT_ENV = "MFGPLAY_OUTPUT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CACHE = 0, 2, 3, 4


def format_number(x) -> str:
    """``%.15g``; NaN renders as an empty field."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if np.isnan(x) else "%.15g" % x


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else format_number(v) for v in row])
    return buf.getvalue().encode()


class Session:
    """Output directory, caches and the manifest of one CLI invocation."""

    def __init__(self, config: ExperimentConfig, verb: str, out: Path, use_cache: bool = True):
        self.config = config
        self.verb = verb
        self.out = out
        self.fingerprint = config.fingerprint()
        self.cache_dir = out / "cache" if use_cache else None
        self.outputs = {}
        self.timings = {}
        out.mkdir(parents=True, exist_ok=True)

    def timed(self, label: str):
        session = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                session.timings[label] = session.timings.get(label, 0.0) + time.perf_counter() - self.t0

        return _Timer()

    def write_csv(self, name: str, header, rows) -> None:
        header = list(header) + ["fingerprint"]
        rows = [list(r) + [self.fingerprint] for r in rows]
        payload = csv_bytes(header, rows)
        _atomic_write(self.out / name, payload)
        self.outputs[name] = hashlib.sha256(payload).hexdigest()

    def bank(self, seed: int, M: int, N: int, p: int, d: int):
        with self.timed("noise_bank"):
            if self.cache_dir is None:
                return sample_noise_bank(seed, M, N, p, d)
            try:
                return cached_noise_bank(self.cache_dir, seed, M, N, p, d)
            except OSError as exc:
                raise CacheCorruptionError(f"noise cache unusable: {exc}") from exc

    def reference(self, model, bank, grid, seed: int):
        c = self.config
        D, iters, clamp = c["numerics.D"], c["numerics.picard_iters"], c["numerics.clamp"]
        fp = config_fingerprint(
            g=repr(sorted(vars(model.g).items(), key=lambda kv: kv[0])),
            name=model.g.name,
            d=model.d,
            eps=model.epsilon,
            T=model.T,
            x0=tuple(model.x0),
            D=D,
            picard=iters,
            clamp=clamp,
            bank=bank.fingerprint,
        )
        with self.timed("reference"):
            path = None if self.cache_dir is None else self.cache_dir / f"reference_{fp}.bin"
            if path is not None and path.exists():
                try:
                    eta = continuous_riccati(model.Q, model.R, grid)
                    return load_reference(path, fp, seed, bank.M, bank.N, grid.p, model.d, eta, bank.fingerprint)
                except CacheCorruptionError:
                    pass
            sol = solve_reference(model, bank, grid, D, iters, clamp)
            sol.fingerprint = fp
            if path is not None:
                try:
                    save_reference(sol, path, seed, bank.M)
                except OSError as exc:
                    raise CacheCorruptionError(f"reference cache unusable: {exc}") from exc
            return sol

    def manifest(self, status: str = "ok") -> None:
        import scipy
        import sklearn

        data = {
            "name": self.config.name,
            "verb": self.verb,
            "status": status,
            "fingerprint": self.fingerprint,
            "seed": self.config.seed,
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.config.values.items()},
            "versions": {
                "mfgplay": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "scikit-learn": sklearn.__version__,
            },
            "wall_time_seconds": self.timings,
            "outputs": self.outputs,
        }
        _atomic_write(self.out / "manifest.json", (json.dumps(data, indent=2, sort_keys=True) + "\n").encode())


def _history_rows(history):
    return [(r.n, r.cost_raw, r.cost_renormalized, r.l2_error) for r in history]


HISTORY_HEADER = ("n", "cost_raw", "cost_renormalized", "l2_error")


def _train(session: Session, config: PlayConfig, seed: int):
    """One fictitious-play run with its bank and (optional) reference."""
    c = session.config
    model, grid = c.model(), c.grid()
    bank = session.bank(seed, c["numerics.M"], c["numerics.N"], grid.p, model.d)
    reference = None
    if c["numerics.reference"] and config.scheme != "idio_only":
        reference = session.reference(model, bank, grid, seed)
    with session.timed("play"):
        state = run(model, grid, bank, config, reference=reference)
    return model, grid, bank, reference, state


def cmd_play(session: Session) -> None:
    c = session.config
    _, _, _, reference, state = _train(session, c.play_config(), c.seed)
    session.write_csv("history.csv", HISTORY_HEADER, _history_rows(state.history))
    summary = [("final_cost_renormalized", state.history[-1].cost_renormalized if state.history else float("nan"))]
    if reference is not None:
        summary.append(("reference_cost", reference.equilibrium_cost))
        summary.append(("final_l2_error", l2_error(state, reference)))
    session.write_csv("summary.csv", ("quantity", "value"), summary)


def _dispersion(series) -> float:
    tail = np.asarray(series[-5:], dtype=float)
    return float(np.std(tail))


def cmd_costcompare(session: Session) -> None:
    """Common-noise play against idiosyncratic-noise play on the same model."""
    c = session.config
    grid = c.grid()
    d = c["model.d"]
    common = c.model(sigma=0.0)
    idio = c.model(sigma=c["compare.sigma"], epsilon=0.0)
    particles = c["compare.M"] or c["numerics.N"]
    bank3 = session.bank(c.seed, 1, c["numerics.N"], grid.p, d)
    bank4 = session.bank(c.seed, particles, 1, grid.p, d)
    reference = session.reference(common, bank3, grid, c.seed) if c["numerics.reference"] else None
    with session.timed("common_only"):
        s3 = run(common, grid, bank3, c.play_config(scheme="common_only"), reference=reference)
    with session.timed("idio_only"):
        s4 = run(idio, grid, bank4, c.play_config(scheme="idio_only", D=0))
    rows = [
        (a.n, a.cost_raw, a.cost_renormalized, b.cost_raw, b.cost_renormalized)
        for a, b in zip(s3.history, s4.history)
    ]
    session.write_csv(
        "costcompare.csv",
        ("n", "common_cost_raw", "common_cost_renormalized", "idio_cost_raw", "idio_cost_renormalized"),
        rows,
    )
    session.write_csv("history_common.csv", HISTORY_HEADER, _history_rows(s3.history))
    session.write_csv("history_idio.csv", HISTORY_HEADER, _history_rows(s4.history))
    c3 = [r.cost_renormalized for r in s3.history]
    c4 = [r.cost_renormalized for r in s4.history]
    summary = [
        ("common_last5_std", _dispersion(c3)),
        ("common_last5_mean", float(np.mean(c3[-5:]))),
        ("idio_last5_std", _dispersion(c4)),
        ("idio_last5_mean", float(np.mean(c4[-5:]))),
    ]
    if reference is not None:
        summary.append(("reference_cost", reference.equilibrium_cost))
    session.write_csv("summary.csv", ("quantity", "value"), summary)


def cmd_anneal(session: Session) -> None:
    c = session.config
    model, grid = c.model(), c.grid()
    bank = session.bank(c.seed, c["numerics.M"], c["numerics.N"], grid.p, model.d)
    stages = []
    try:
        with session.timed("anneal"):
            vanishing_viscosity(
                c["annealing.schedule"],
                model,
                grid,
                bank,
                c.play_config(),
                warm_start_policy=c["annealing.warm_start_policy"],
                stages=stages,
            )
    finally:
        _write_stages(session, stages)


def _write_stages(session: Session, stages) -> None:
    bins = session.config["annealing.bins"]
    summary, history = [], []
    for q, stage in enumerate(stages, start=1):
        x = stage.terminal_means
        first = x[:, 0]
        hist = terminal_histogram(first, bins=bins)
        session.write_csv(
            f"histogram_stage{q:02d}.csv",
            ("epsilon", "bin_left", "bin_right", "count"),
            [(stage.epsilon, a, b, n) for a, b, n in zip(hist.edges[:-1], hist.edges[1:], hist.counts)],
        )
        session.write_csv(
            f"terminal_stage{q:02d}.csv",
            ("epsilon", "j") + tuple(f"m{i + 1}" for i in range(x.shape[1])),
            [(stage.epsilon, j, *row) for j, row in enumerate(x)],
        )
        summary.append(
            (q, stage.epsilon, float(np.median(first)), float(np.mean(np.abs(first) < 0.1)), hist.mode)
        )
        history += [(q, stage.epsilon) + row for row in _history_rows(stage.state.history)]
    session.write_csv(
        "anneal_summary.csv", ("stage", "epsilon", "median_terminal", "fraction_abs_below_0.1", "modal_bin"), summary
    )
    session.write_csv("anneal_history.csv", ("stage", "epsilon") + HISTORY_HEADER, history)


def cmd_reference(session: Session) -> None:
    c = session.config
    model, grid = c.model(), c.grid()
    bank = session.bank(c.seed, c["numerics.M"], c["numerics.N"], grid.p, model.d)
    sol = session.reference(model, bank, grid, c.seed)
    session.write_csv("reference_residuals.csv", ("iteration", "residual"), enumerate(sol.residuals, start=1))
    rows = []
    for k in range(grid.p + 1):
        for i in range(model.d):
            m = sol.m_field[:, k, i]
            h = sol.h_field[:, k, i] if k < grid.p else np.full_like(m, np.nan)
            rows.append((k, grid.nodes[k], i + 1, m.mean(), m.std(), h.mean(), h.std()))
    session.write_csv("reference_fields.csv", ("k", "t", "coordinate", "m_mean", "m_std", "h_mean", "h_std"), rows)
    session.write_csv("summary.csv", ("quantity", "value"), [("reference_cost", sol.equilibrium_cost)])


def cmd_equilibria(session: Session) -> None:
    c = session.config
    if c["model.d"] != 1:
        raise ConfigError(["equilibria: model.d must be 1"])
    g = c.coupling()
    bracket = (c["equilibria.lo"], c["equilibria.hi"])
    with session.timed("equilibria"):
        eq = deterministic_equilibria(g, bracket, c.grid())
        curve = potential_scan(g, bracket, c["equilibria.samples"])
    pot = eq.potential if eq.potential is not None else np.full(eq.roots.shape, np.nan)
    session.write_csv("equilibria.csv", ("root", "residual", "potential"), zip(eq.roots, eq.residuals, pot))
    session.write_csv("potential.csv", ("beta", "value", "slope"), zip(curve.beta, curve.value, curve.slope))
    minimizers = set(curve.minimizers.tolist())
    session.write_csv(
        "stationary.csv",
        ("beta", "kind"),
        [(x, "minimizer" if x in minimizers else "other") for x in curve.stationary]
        + [(curve.global_minimizer, "global_minimizer")],
    )


def cmd_validate(session: Session, seed2: int) -> None:
    c = session.config
    if seed2 == c.seed:
        raise ConfigError([f"--seed2 must differ from the training seed {c.seed}"])
    config = c.play_config()
    model, grid, _, reference, state = _train(session, config, c.seed)
    train = l2_error(state, reference) if reference is not None else float("nan")
    with session.timed("validation"):
        valid = validation_error(
            state.history, model, grid, config, seed2, c["numerics.M"], c["numerics.N"],
            c["numerics.picard_iters"], c["numerics.clamp"], train_seed=c.seed,
        )
    session.write_csv(
        "validation.csv", ("seed_train", "seed_validation", "train_error", "validation_error"),
        [(c.seed, seed2, train, valid)],
    )


def _output_dir(args, config: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    if config["output"]:
        return Path(config["output"])
    base = os.environ.get(OUTPUT_ENV)
    return Path(base) / config.name if base else Path("mfgplay-out") / config.name


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfgplay", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mfgplay {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, text in [
        ("run", "run the experiment named by `kind` (play, costcompare or anneal)"),
        ("reference", "solve the reference equilibrium"),
        ("equilibria", "deterministic equilibria and potential table"),
        ("validate", "train on `seed`, evaluate on --seed2"),
        ("anneal", "vanishing-viscosity schedule"),
    ]:
        p = sub.add_parser(verb, help=text)
        p.add_argument("config", help="config file or shipped recipe name")
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV}/<name> or ./mfgplay-out/<name>)")
        p.add_argument("--threads", type=int, help="BLAS/OpenMP thread limit")
        p.add_argument("--no-cache", action="store_true", help="neither read nor write cached banks and references")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if verb == "validate":
            p.add_argument("--seed2", type=int, required=True, help="seed of the validation bank")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config)
        if args.set:
            config = config.with_overrides(args.set)
        if args.threads is not None and args.threads < 1:
            raise ConfigError(["--threads must be at least 1"])
    except ConfigError as exc:
        print(f"mfgplay: configuration error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG

    session = Session(config, args.verb, _output_dir(args, config), use_cache=not args.no_cache)
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    status, code = "ok", EXIT_OK
    try:
        with limiter, session.timed("total"):
            if args.verb == "run":
                {"play": cmd_play, "costcompare": cmd_costcompare, "anneal": cmd_anneal}[config["kind"]](session)
            elif args.verb == "reference":
                cmd_reference(session)
            elif args.verb == "equilibria":
                cmd_equilibria(session)
            elif args.verb == "validate":
                cmd_validate(session, args.seed2)
            else:
                cmd_anneal(session)
    except ConfigError as exc:
        status, code = "config error", EXIT_CONFIG
        print(f"mfgplay: configuration error:\n{exc}", file=sys.stderr)
    except CacheCorruptionError as exc:
        status, code = "cache corruption", EXIT_CACHE
        print(f"mfgplay: cache corruption: {exc}", file=sys.stderr)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        status, code = "numerical failure", EXIT_NUMERIC
        print(f"mfgplay: numerical failure: {exc}", file=sys.stderr)
    session.manifest(status)
    return code


if __name__ == "__main__":
    sys.exit(main())
