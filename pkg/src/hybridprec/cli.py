"""Configuration-driven experiment runner with CSV outputs and run manifests.

Subcommands: gmd-check | ber | se | mse | train | complexity-bench, each
reading a line-oriented ``key = value`` config file and writing CSV files, a
gnuplot script for the curve kinds, and a JSON manifest into the output
directory. Reruns with the same config and seed produce byte-identical CSV;
the manifest carries the wall-clock numbers and is the only file that
differs between reruns.

SNR convention everywhere: snr_db = 10*log10(ns / noise_sigma^2), i.e. total
transmit power (= ns, unit-power streams at full budget) over per-receive-
antenna noise variance. Published BER/SE figures rarely pin this down, so it
is fixed here once and documented in the README.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

import hybridprec
from hybridprec.channel import draw_channel
from hybridprec.decomp import gmd
from hybridprec.dnn import build_dataset, build_precoder_mlp, load_mlp, save_mlp, train
from hybridprec.precoder import FactorizeConfig, SystemDims, factorize_sgd
from hybridprec.simulate import (
    MSE_METHODS,
    SCHEME_IDS,
    ber_curve,
    mse_vs_iterations,
    se_curve,
)

KINDS = ("gmd-check", "ber", "se", "mse", "train", "complexity-bench")

DIMENSION_RULES = "ns <= nt_rf <= nt and ns <= nr_rf <= nr"


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description (file values plus defaults)."""

    kind: str
    nt: int = 16
    nr: int = 8
    nt_rf: int = 4
    nr_rf: int = 4
    ns: int = 2
    p_nlos: int = 3
    spacing_ratio: float = 0.5
    snr_grid_db: tuple = (-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0)
    trials: int = 20000
    seed: int = 0
    schemes: tuple = ("fully_digital_gmd", "fully_digital_svd", "sgd_hybrid", "phase_projection")
    learning_rate: float = 0.001
    momentum: float = 0.9
    max_iters: int = 45000
    tolerance: float = 1e-7
    batch_size: int = 20
    threads: int = 1
    model: str = ""
    train_size: int = 500
    noise_sigma: float = 0.1
    nt_sweep: tuple = (16, 32, 64)
    bench_repeats: int = 5
    bench_iters: int = 50

    def dims(self) -> SystemDims:
        return SystemDims(
            nt=self.nt,
            nr=self.nr,
            nt_rf=self.nt_rf,
            nr_rf=self.nr_rf,
            ns=self.ns,
            p_nlos=self.p_nlos,
            spacing_ratio=self.spacing_ratio,
        )

    def factorize_config(self) -> FactorizeConfig:
        return FactorizeConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            max_iters=self.max_iters,
            tolerance=self.tolerance,
            batch=self.batch_size,
            seed=self.seed,
        )


_INT_KEYS = {
    "nt", "nr", "nt_rf", "nr_rf", "ns", "p_nlos", "trials", "seed", "max_iters",
    "batch_size", "threads", "train_size", "bench_repeats", "bench_iters",
}
_FLOAT_KEYS = {"spacing_ratio", "learning_rate", "momentum", "tolerance", "noise_sigma"}
_FLOAT_LIST_KEYS = {"snr_grid_db"}
_INT_LIST_KEYS = {"nt_sweep"}
_STR_LIST_KEYS = {"schemes"}
_STR_KEYS = {"kind", "model"}

_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _FLOAT_LIST_KEYS | _INT_LIST_KEYS | _STR_LIST_KEYS | _STR_KEYS


def _parse_value(key: str, raw: str, lineno: int):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _FLOAT_LIST_KEYS:
            return tuple(float(x) for x in raw.split(","))
        if key in _INT_LIST_KEYS:
            return tuple(int(x) for x in raw.split(","))
        if key in _STR_LIST_KEYS:
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: cannot parse {key} = {raw!r}: {exc}") from exc


def parse_config(path: str | Path, kind: str | None = None) -> ExperimentConfig:
    """Read a ``key = value`` config file, apply defaults, and validate.

    Unknown keys are rejected with their line number. ``kind`` (usually the
    CLI subcommand) overrides a ``kind`` key in the file; if both are given
    they must agree.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, lineno)
    file_kind = values.pop("kind", None)
    if kind is None:
        kind = file_kind
    elif file_kind is not None and file_kind != kind:
        raise ConfigError(f"config kind {file_kind!r} does not match requested kind {kind!r}")
    if kind is None:
        raise ConfigError("experiment kind missing (no subcommand and no 'kind' key)")
    if kind == "mse" and "schemes" not in values:
        values["schemes"] = MSE_METHODS
    cfg = ExperimentConfig(kind=kind, **values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    """Enforce the dimensional inequalities and per-kind requirements."""
    if cfg.kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {cfg.kind!r}")
    if not cfg.ns <= cfg.nt_rf <= cfg.nt:
        raise ConfigError(
            f"dimension rule violated ({DIMENSION_RULES}): "
            f"ns={cfg.ns}, nt_rf={cfg.nt_rf}, nt={cfg.nt}"
        )
    if not cfg.ns <= cfg.nr_rf <= cfg.nr:
        raise ConfigError(
            f"dimension rule violated ({DIMENSION_RULES}): "
            f"ns={cfg.ns}, nr_rf={cfg.nr_rf}, nr={cfg.nr}"
        )
    if cfg.ns > min(cfg.nt, cfg.nr):
        raise ConfigError(f"ns={cfg.ns} exceeds min(nt, nr)={min(cfg.nt, cfg.nr)}")
    if cfg.trials < 1:
        raise ConfigError(f"trials must be >= 1, got {cfg.trials}")
    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {cfg.batch_size}")
    if cfg.threads < 0:
        raise ConfigError(f"threads must be >= 0 (0 = auto), got {cfg.threads}")
    if cfg.kind in ("ber", "se"):
        if not cfg.schemes:
            raise ConfigError(f"{cfg.kind} requires a non-empty schemes list")
        for s in cfg.schemes:
            if s not in SCHEME_IDS:
                raise ConfigError(f"unknown scheme {s!r}, expected one of {SCHEME_IDS}")
        if not cfg.snr_grid_db:
            raise ConfigError(f"{cfg.kind} requires a non-empty snr_grid_db")
    if cfg.kind == "mse":
        for s in cfg.schemes:
            if s not in MSE_METHODS:
                raise ConfigError(
                    f"mse schemes must be among {MSE_METHODS}, got {s!r}"
                )
    if cfg.kind == "complexity-bench":
        if len(cfg.nt_sweep) < 2:
            raise ConfigError("complexity-bench requires at least two nt_sweep values")
        for nt in cfg.nt_sweep:
            if not cfg.ns <= cfg.nt_rf <= nt:
                raise ConfigError(
                    f"dimension rule violated ({DIMENSION_RULES}) at sweep nt={nt}: "
                    f"ns={cfg.ns}, nt_rf={cfg.nt_rf}"
                )
    try:
        cfg.factorize_config()
        cfg.dims()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _fmt(x) -> str:
    """Shortest round-trip decimal text; deterministic across runs."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(x) for x in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", newline="\n")


def _mse_schemes(cfg: ExperimentConfig) -> tuple:
    return cfg.schemes if all(s in MSE_METHODS for s in cfg.schemes) and cfg.schemes else MSE_METHODS


def _resolve_threads(threads: int) -> int:
    return os.cpu_count() or 1 if threads == 0 else threads


def _model_for(cfg: ExperimentConfig, config_dir: Path, stages: dict):
    """Load the configured model, or train one inline when dnn_hybrid is requested."""
    if "dnn_hybrid" not in cfg.schemes:
        return None
    if cfg.model:
        model_path = Path(cfg.model)
        if not model_path.is_absolute():
            model_path = config_dir / model_path
        return load_mlp(str(model_path))
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    data = build_dataset(cfg.dims(), cfg.train_size, rng)
    net = build_precoder_mlp(cfg.dims(), seed=cfg.seed, noise_sigma=cfg.noise_sigma)
    net, _ = train(net, data, cfg.factorize_config())
    stages["train"] = time.perf_counter() - t0
    return net


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, config_dir: str | Path = ".") -> list[Path]:
    """Dispatch one experiment and write its outputs.

    Returns the list of written files (CSV, plot script, model, manifest).
    On any error the partially written outputs are removed and the exception
    propagates. The manifest is written last, atomically.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages: dict = {}
    outputs: list[Path] = []
    threads = _resolve_threads(cfg.threads)
    try:
        t0 = time.perf_counter()
        if cfg.kind == "ber":
            net = _model_for(cfg, Path(config_dir), stages)
            rows = []
            for scheme in cfg.schemes:
                curve = ber_curve(
                    scheme, cfg.snr_grid_db, cfg.trials, cfg.dims(), cfg.seed,
                    cfg=cfg.factorize_config(), net=net, threads=threads,
                )
                rows.extend(
                    [snr, scheme, ber, ci, cfg.trials]
                    for snr, ber, ci in zip(curve.snr_db, curve.ber, curve.ci_halfwidth)
                )
            csv_path = out_dir / "ber.csv"
            _write_csv(csv_path, ["snr_db", "scheme", "ber", "ci_halfwidth", "trials"], rows)
            outputs.append(csv_path)
            outputs.append(emit_plot_script(csv_path))
        elif cfg.kind == "se":
            net = _model_for(cfg, Path(config_dir), stages)
            rows = []
            for scheme in cfg.schemes:
                curve = se_curve(
                    scheme, cfg.snr_grid_db, cfg.trials, cfg.dims(), cfg.seed,
                    cfg=cfg.factorize_config(), net=net, threads=threads,
                )
                rows.extend(
                    [snr, scheme, se] for snr, se in zip(curve.snr_db, curve.bits_per_s_hz)
                )
            csv_path = out_dir / "se.csv"
            _write_csv(csv_path, ["snr_db", "scheme", "bits_per_s_hz"], rows)
            outputs.append(csv_path)
            outputs.append(emit_plot_script(csv_path))
        elif cfg.kind == "mse":
            rng = np.random.default_rng(cfg.seed)
            channels = [
                draw_channel(rng, cfg.nt, cfg.nr, cfg.p_nlos, cfg.spacing_ratio)
                for _ in range(cfg.trials)
            ]
            rows = []
            for method in _mse_schemes(cfg):
                curve = mse_vs_iterations(method, channels, cfg.dims(), cfg.factorize_config())
                rows.extend([it, method, mse] for it, mse in zip(curve.iteration, curve.mse))
            csv_path = out_dir / "mse.csv"
            _write_csv(csv_path, ["iteration", "scheme", "mse"], rows)
            outputs.append(csv_path)
            outputs.append(emit_plot_script(csv_path))
        elif cfg.kind == "gmd-check":
            csv_path, max_diag, max_recon = _run_gmd_check(cfg, out_dir)
            outputs.append(csv_path)
            if max_diag > 1e-8 or max_recon > 1e-8:
                raise RuntimeError(
                    f"gmd-check failed: max_diag_dev={max_diag:.3e}, max_recon_err={max_recon:.3e}"
                )
        elif cfg.kind == "train":
            outputs.extend(_run_train(cfg, out_dir))
        else:  # complexity-bench
            outputs.append(_run_complexity_bench(cfg, out_dir))
        stages["compute"] = time.perf_counter() - t0 - stages.get("train", 0.0)
        manifest = {
            "config": {f.name: getattr(cfg, f.name) for f in fields(cfg)},
            "code_version": hybridprec.__version__,
            "stages_seconds": {k: round(v, 6) for k, v in stages.items()},
            "outputs": [p.name for p in outputs],
        }
        manifest_path = out_dir / "manifest.json"
        tmp = manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
        os.replace(tmp, manifest_path)
        outputs.append(manifest_path)
        return outputs
    except Exception:
        for p in outputs:
            try:
                p.unlink()
            except OSError:
                pass
        raise


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _run_gmd_check(cfg: ExperimentConfig, out_dir: Path) -> tuple[Path, float, float]:
    """GMD invariants on random complex matrices; prints the worst deviations."""
    rng = np.random.default_rng(cfg.seed)
    rows = []
    max_diag = max_recon = max_orth = 0.0
    for i in range(cfg.trials):
        m = rng.standard_normal((cfg.nr, cfg.nt)) + 1j * rng.standard_normal((cfg.nr, cfg.nt))
        f = gmd(m, cfg.ns)
        diag_dev = float(np.max(np.abs(np.diag(f.q1).real - f.sigma_bar)) / f.sigma_bar)
        u, s, vh = np.linalg.svd(m, full_matrices=False)
        m_ns = (u[:, : cfg.ns] * s[: cfg.ns]) @ vh[: cfg.ns]
        recon = float(np.linalg.norm(f.reconstruct() - m_ns) / np.linalg.norm(m_ns))
        eye = np.eye(cfg.ns)
        orth = float(
            max(
                np.linalg.norm(f.w1.conj().T @ f.w1 - eye),
                np.linalg.norm(f.r1.conj().T @ f.r1 - eye),
            )
        )
        rows.append([i, diag_dev, recon, orth])
        max_diag = max(max_diag, diag_dev)
        max_recon = max(max_recon, recon)
        max_orth = max(max_orth, orth)
    csv_path = out_dir / "gmd_check.csv"
    _write_csv(csv_path, ["index", "diag_dev", "recon_err", "orth_dev"], rows)
    print(f"max_diag_dev={max_diag:.3e} max_recon_err={max_recon:.3e} max_orth_dev={max_orth:.3e}")
    return csv_path, max_diag, max_recon


def _run_train(cfg: ExperimentConfig, out_dir: Path) -> list[Path]:
    rng = np.random.default_rng(cfg.seed)
    data = build_dataset(cfg.dims(), cfg.train_size, rng)
    net = build_precoder_mlp(cfg.dims(), seed=cfg.seed, noise_sigma=cfg.noise_sigma)
    net, history = train(net, data, cfg.factorize_config())
    model_path = out_dir / "model.npz"
    save_mlp(net, str(model_path))
    csv_path = out_dir / "train_history.csv"
    _write_csv(csv_path, ["epoch", "loss"], [[i, v] for i, v in enumerate(history, start=1)])
    print(f"final_train_loss={history[-1]:.6f} epochs={len(history)}")
    return [model_path, csv_path]


def _run_complexity_bench(cfg: ExperimentConfig, out_dir: Path) -> Path:
    """Median factorization wall-clock versus nt at a fixed iteration count."""
    bench_cfg = FactorizeConfig(
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        max_iters=cfg.bench_iters,
        tolerance=0.0,
        seed=cfg.seed,
    )
    rows = []
    medians = []
    for nt in cfg.nt_sweep:
        rng = np.random.default_rng(cfg.seed)
        ch = draw_channel(rng, nt, cfg.nr, cfg.p_nlos, cfg.spacing_ratio)
        r1 = gmd(ch.matrix, cfg.ns).r1
        times = []
        for _ in range(cfg.bench_repeats):
            t0 = time.perf_counter()
            factorize_sgd(r1, cfg.nt_rf, bench_cfg)
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
        medians.append(med)
        rows.append([nt, med, cfg.bench_repeats, cfg.bench_iters])
    csv_path = out_dir / "complexity.csv"
    _write_csv(csv_path, ["nt", "median_seconds", "repeats", "iterations"], rows)
    ratio = medians[-1] / medians[0]
    print(
        f"time_ratio nt={cfg.nt_sweep[-1]} over nt={cfg.nt_sweep[0]}: {ratio:.2f} "
        f"(medians: {', '.join(f'{m:.4f}s' for m in medians)})"
    )
    return csv_path


_GNUPLOT_AXES = {
    "ber": ("snr_db", "ber", "set logscale y"),
    "se": ("snr_db", "bits_per_s_hz", "unset logscale"),
    "mse": ("iteration", "mse", "set logscale y"),
}


def emit_plot_script(csv_path: str | Path) -> Path:
    """Write a standalone gnuplot script next to a results CSV.

    Pure text templating: the script references only columns that exist in
    the CSV header, uses logarithmic y axes for BER (and MSE) data and
    linear axes otherwise. No plotting dependency is needed here; gnuplot
    renders the file later.
    """
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise FileNotFoundError(f"CSV not found: {csv_path}")
    lines = csv_path.read_text().splitlines()
    header = lines[0].split(",")
    kind = csv_path.stem.split("_")[0]
    if kind not in _GNUPLOT_AXES:
        raise ValueError(f"no plot template for {csv_path.name!r}")
    x_col, y_col, scale_cmd = _GNUPLOT_AXES[kind]
    for col in (x_col, y_col, "scheme"):
        if col not in header:
            raise ValueError(f"column {col!r} missing from {csv_path.name} header {header}")
    x_idx = header.index(x_col) + 1
    y_idx = header.index(y_col) + 1
    scheme_idx = header.index("scheme") + 1
    schemes = sorted({line.split(",")[scheme_idx - 1] for line in lines[1:]})
    plots = ", \\\n  ".join(
        f"'{csv_path.name}' using (strcol({scheme_idx}) eq '{s}' ? ${x_idx} : NaN):{y_idx} "
        f"with linespoints title '{s}'"
        for s in schemes
    )
    script = "\n".join(
        [
            "set datafile separator ','",
            "set key outside",
            f"set xlabel '{x_col}'",
            f"set ylabel '{y_col}'",
            scale_cmd,
            "set terminal pngcairo size 900,600",
            f"set output '{csv_path.stem}.png'",
            f"plot {plots}",
            "",
        ]
    )
    out = csv_path.with_suffix(".gp")
    out.write_text(script)
    return out


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="hybridprec",
        description="Hybrid precoding experiments: BER/SE/MSE curves, GMD checks, DNN training.",
    )
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="path to a key = value config file")
        p.add_argument("--out", required=True, help="output directory for CSV and manifest")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="override threads (0 = auto)")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, kind=args.kind)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.threads is not None:
            cfg = replace(cfg, threads=args.threads)
        validate_config(cfg)
        outputs = run_experiment(cfg, args.out, config_dir=Path(args.config).parent)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for p in outputs:
        print(f"wrote {p}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
