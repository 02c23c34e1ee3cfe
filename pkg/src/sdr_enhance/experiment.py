"""Sine-plus-noise enhancement experiment: data generation, training, scoring, sweeps.

Directory layout written by the commands::

    data/seed_<n>/clean.csv, noise_train.csv, noise_test.csv,
                  mixture_train_snr<+g>.csv, mixture_test_snr<+g>.csv
    runs/<loss>_snr<+g>_seed<n>/params.csv, history.csv, summary.json, eval.csv
    results.csv, summary.csv, tables.md, timings.csv, config.json
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli

from . import bss, dsp
from .bss import EvalReport, fixed6
from .objectives import LOSS_KINDS, LossSpec, SdrLossConfig, SpectralConfig, StoiConfig
from .rnn import (
    TrainConfig,
    infer,
    read_params_csv,
    train,
    write_history_csv,
    write_params_csv,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "SweepResult",
    "cmd_curve",
    "cmd_eval",
    "cmd_gen",
    "cmd_sweep",
    "cmd_trace",
    "cmd_train",
    "load_config",
]

log = logging.getLogger(__name__)

LOSS_LABELS = {"l1": "L1 norm", "l2": "L2 norm", "is": "Itakura-Saito", "neg_stoi": "STOI", "neg_sdr": "Proposed"}


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


@dataclass(frozen=True)
class StoiSettings:
    analysis_len: int = 8
    zeta_db: float = -15.0
    frame_size: int = 32
    hop: int = 4
    fs: float = 10000.0
    n_bands: int = 6
    f_min: float = 1250.0

    def build(self) -> StoiConfig:
        bands = dsp.third_octave_edges(self.fs, self.frame_size, self.n_bands, self.f_min)
        return StoiConfig(self.analysis_len, self.zeta_db, bands, self.frame_size, self.hop)


@dataclass(frozen=True)
class ExperimentConfig:
    T: int = 600
    window: int = 100
    shift: int = 1
    snr_list: tuple[float, ...] = (10.0, 0.0, -10.0)
    losses: tuple[str, ...] = ("l1", "l2", "neg_sdr")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    eval_G: int = 32
    deterministic: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    sdr: SdrLossConfig = field(default_factory=SdrLossConfig)
    stoi: StoiSettings = field(default_factory=StoiSettings)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)

    def __post_init__(self):
        if self.window > self.T or self.window < 1:
            raise ConfigError(f"window {self.window} must lie in [1, T={self.T}]")
        if self.shift < 1:
            raise ConfigError("shift must be >= 1")
        if not self.snr_list or not self.losses or not self.seeds:
            raise ConfigError("snr_list, losses and seeds must be non-empty")
        for k in self.losses:
            if k not in LOSS_KINDS:
                raise ConfigError(f"unknown loss {k!r}; expected one of {LOSS_KINDS}")
        if self.eval_G < 1:
            raise ConfigError("eval_G must be >= 1")

    def loss_spec(self, kind: str) -> LossSpec:
        if kind == "neg_sdr":
            return LossSpec(kind, sdr=self.sdr)
        if kind == "neg_stoi":
            return LossSpec(kind, stoi=self.stoi.build())
        if kind == "is":
            return LossSpec(kind, spectral=self.spectral)
        return LossSpec(kind)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("snr_list", "losses", "seeds"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        nested = {
            "train": TrainConfig,
            "sdr": SdrLossConfig,
            "stoi": StoiSettings,
            "spectral": SpectralConfig,
        }
        if "is" in raw:
            raw["spectral"] = raw.pop("is")
        if "loss" in raw:
            loss = raw.pop("loss")
            raw["losses"] = [loss] if isinstance(loss, str) else list(loss)
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in nested:
                sub = nested[key]
                sub_known = {f.name for f in fields(sub)}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
                try:
                    kwargs[key] = sub(**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{key}]: {exc}") from exc
            elif key in ("snr_list", "losses", "seeds"):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        if "snr_list" in kwargs:
            kwargs["snr_list"] = tuple(float(s) for s in kwargs["snr_list"])
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None = None, **overrides) -> ExperimentConfig:
    """Read a TOML config (or defaults) and apply keyword overrides."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = tomli.loads(text) if path.suffix != ".json" else json.loads(text)
        except (tomli.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(raw)


def snr_tag(snr: float) -> str:
    return f"snr{snr:+g}"


def run_name(loss: str, snr: float, seed: int) -> str:
    return f"{loss}_{snr_tag(snr)}_seed{seed}"


def _noise_seeds(seed: int) -> tuple[int, int]:
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    return int(train_ss.generate_state(1)[0]), int(test_ss.generate_state(1)[0])


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- gen ---------------------------------------------------------------------


def cmd_gen(config: ExperimentConfig, out_dir, seed: int | None = None) -> list[Path]:
    """Write the clean signal, train/test noises and mixtures for every SNR.

    Train and test noises come from distinct seeds derived from ``seed``; the
    clean signal is shared.
    """
    seed = config.seeds[0] if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clean = dsp.gen_sine(config.T)
    train_seed, test_seed = _noise_seeds(seed)
    noise_train = dsp.gen_uniform_noise(config.T, train_seed)
    noise_test = dsp.gen_uniform_noise(config.T, test_seed)
    files = {
        "clean.csv": clean,
        "noise_train.csv": noise_train,
        "noise_test.csv": noise_test,
    }
    for snr in config.snr_list:
        files[f"mixture_train_{snr_tag(snr)}.csv"] = dsp.mix_at_snr(clean, noise_train, snr)[0]
        files[f"mixture_test_{snr_tag(snr)}.csv"] = dsp.mix_at_snr(clean, noise_test, snr)[0]
    written = []
    for name, x in files.items():
        dsp.write_signal_csv(out / name, x)
        written.append(out / name)
    write_json(out / "config.json", {**config.to_dict(), "seed": seed})
    return written


def _read(data_dir: Path, name: str) -> np.ndarray:
    path = Path(data_dir) / name
    if not path.exists():
        raise FileNotFoundError(f"missing data file {path}; run `gen` first")
    return dsp.read_signal_csv(path)


# -- train -------------------------------------------------------------------


def cmd_train(config: ExperimentConfig, data_dir, loss: str, snr: float, out_dir, seed: int | None = None):
    """Train on the sliding windows of the training mixture; write model artefacts."""
    seed = config.seeds[0] if seed is None else seed
    data_dir = Path(data_dir)
    clean = _read(data_dir, "clean.csv")
    mixture = _read(data_dir, f"mixture_train_{snr_tag(snr)}.csv")
    X = dsp.sliding_windows(mixture, config.window, config.shift)
    Y = dsp.sliding_windows(clean, config.window, config.shift)
    tcfg = replace(config.train, seed=seed)
    t0 = time.perf_counter()
    result = train(X, Y, config.loss_spec(loss), tcfg)
    elapsed = time.perf_counter() - t0

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_params_csv(out / "params.csv", result.params)
    write_history_csv(out / "history.csv", result.history)
    last = result.history[-1] if result.history else (0, float("nan"), float("nan"))
    summary = {
        "loss": loss,
        "snr_in_db": snr,
        "seed": seed,
        "n_windows": len(X),
        "n_train": result.n_train,
        "n_val": result.n_val,
        "batches_run": result.batches_run,
        "best_epoch": result.best_epoch,
        "stopped_epoch": result.stopped_epoch,
        "final_train_loss": last[1],
        "final_val_loss": last[2],
        "best_val_loss": min((h[2] for h in result.history), default=float("nan")),
        "diagnostics": dict(result.diagnostics),
    }
    write_json(out / "summary.json", summary)
    write_json(out / "config.json", {**config.to_dict(), "seed": seed, "loss": loss, "snr": snr})
    return result, elapsed


# -- eval --------------------------------------------------------------------


def score(clean, noise, est, G: int) -> tuple[float, float]:
    proj = bss.build_projector(clean, G)
    nproj = bss.build_projector(noise, G)
    return bss.sdr(clean, est, projector=proj), bss.sir(clean, noise, est, projector=proj, noise_projector=nproj)


def estimate(config: ExperimentConfig, model_dir, data_dir, snr: float, bypass: str | None = None) -> np.ndarray:
    """Separation step on the test mixture.  ``bypass`` skips the network:
    ``"oracle"`` returns the clean signal, ``"identity"`` the mixture."""
    data_dir = Path(data_dir)
    mixture = _read(data_dir, f"mixture_test_{snr_tag(snr)}.csv")
    if bypass == "oracle":
        return _read(data_dir, "clean.csv")
    if bypass == "identity":
        return mixture
    if bypass is not None:
        raise ConfigError(f"unknown bypass {bypass!r}")
    path = Path(model_dir) / "params.csv"
    if not path.exists():
        raise FileNotFoundError(f"missing model {path}; run `train` first")
    params = read_params_csv(path)
    return infer(params, mixture, config.window, config.shift)


def cmd_eval(
    config: ExperimentConfig,
    model_dir,
    data_dir,
    snr: float,
    eval_G: int | None = None,
    loss: str = "",
    seed: int | None = None,
    bypass: str | None = None,
    runtime_s: float = 0.0,
    out_csv=None,
) -> EvalReport:
    """Score the model's test-mixture estimate with SDR and SIR."""
    seed = config.seeds[0] if seed is None else seed
    G = eval_G or config.eval_G
    data_dir = Path(data_dir)
    est = estimate(config, model_dir, data_dir, snr, bypass)
    clean = _read(data_dir, "clean.csv")
    noise = _read(data_dir, "noise_test.csv")
    sdr_db, sir_db = score(clean, noise, est, G)
    label = loss or bypass or "model"
    report = EvalReport(label, float(snr), int(seed), sdr_db, sir_db, float(runtime_s))
    if out_csv is not None:
        write_results_csv(out_csv, [report])
    return report


def write_results_csv(path, rows: list[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EvalReport.CSV_HEADER)
        for r in rows:
            w.writerow(r.csv_row())


def read_results_csv(path) -> list[EvalReport]:
    with open(path, newline="") as fh:
        return [
            EvalReport(
                row["loss"],
                float(row["snr_in_db"]),
                int(row["seed"]),
                float(row["sdr_db"]),
                float(row["sir_db"]),
                float(row["runtime_s"]),
            )
            for row in csv.DictReader(fh)
        ]


# -- sweep -------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list[EvalReport]
    config_echo: ExperimentConfig
    failures: dict[str, str] = field(default_factory=dict)

    def mean(self, loss: str, snr: float, metric: str = "sdr_db") -> float:
        vals = [getattr(r, metric) for r in self.rows if r.loss == loss and r.snr_in_db == snr and r.status == "ok"]
        return float(np.mean(vals)) if vals else float("nan")

    def std(self, loss: str, snr: float, metric: str = "sdr_db") -> float:
        vals = [getattr(r, metric) for r in self.rows if r.loss == loss and r.snr_in_db == snr and r.status == "ok"]
        return float(np.std(vals)) if vals else float("nan")

    @property
    def ok(self) -> bool:
        return not self.failures


def _run_one(config_dict: dict, data_dir: str, run_dir: str, loss: str, snr: float, seed: int):
    """Train and score one (loss, snr, seed) cell.  Runs in a worker process."""
    config = ExperimentConfig.from_dict(config_dict)
    t0 = time.perf_counter()
    try:
        cmd_train(config, data_dir, loss, snr, run_dir, seed)
        report = cmd_eval(config, run_dir, data_dir, snr, loss=loss, seed=seed)
    except Exception as exc:  # recorded as a failed row
        log.exception("run %s failed", run_name(loss, snr, seed))
        return EvalReport(loss, float(snr), seed, float("nan"), float("nan"), 0.0, status="failed"), repr(exc), time.perf_counter() - t0
    elapsed = time.perf_counter() - t0
    report.runtime_s = 0.0 if config.deterministic else elapsed
    write_results_csv(Path(run_dir) / "eval.csv", [report])
    return report, None, elapsed


def cmd_sweep(config: ExperimentConfig, out_dir, jobs: int = 1) -> SweepResult:
    """Full (loss x snr x seed) cross product; writes results and per-SNR tables.

    Runs are independent and are dispatched to ``jobs`` worker processes.
    With ``config.deterministic`` the ``runtime_s`` column is written as 0 so
    that results.csv is bitwise reproducible; wall times go to timings.csv.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", config.to_dict())
    for seed in config.seeds:
        cmd_gen(config, out / "data" / f"seed_{seed}", seed)

    cells = [(loss, snr, seed) for loss in config.losses for snr in config.snr_list for seed in config.seeds]
    cfg_dict = config.to_dict()
    args = [
        (cfg_dict, str(out / "data" / f"seed_{seed}"), str(out / "runs" / run_name(loss, snr, seed)), loss, snr, seed)
        for loss, snr, seed in cells
    ]
    if jobs > 1:
        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_one, *zip(*args)))
    else:
        outcomes = [_run_one(*a) for a in args]

    rows, failures, timings = [], {}, []
    for (loss, snr, seed), (report, err, elapsed) in zip(cells, outcomes):
        rows.append(report)
        timings.append((run_name(loss, snr, seed), elapsed))
        if err is not None:
            failures[run_name(loss, snr, seed)] = err
    result = SweepResult(rows, config, failures)

    write_results_csv(out / "results.csv", rows)
    _write_summary(out / "summary.csv", result)
    (out / "tables.md").write_text(format_tables(result), encoding="utf-8")
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "wall_s"])
        for name, t in timings:
            w.writerow([name, f"{t:.3f}"])
    if failures:
        write_json(out / "failures.json", failures)
    return result


def _write_summary(path, result: SweepResult) -> None:
    cfg = result.config_echo
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["loss", "snr_in_db", "n", "sdr_mean", "sdr_std", "sir_mean", "sir_std"])
        for snr in cfg.snr_list:
            for loss in cfg.losses:
                n = sum(1 for r in result.rows if r.loss == loss and r.snr_in_db == snr and r.status == "ok")
                w.writerow(
                    [
                        loss,
                        fixed6(snr),
                        n,
                        fixed6(result.mean(loss, snr)),
                        fixed6(result.std(loss, snr)),
                        fixed6(result.mean(loss, snr, "sir_db")),
                        fixed6(result.std(loss, snr, "sir_db")),
                    ]
                )


def format_tables(result: SweepResult) -> str:
    """One markdown table per input SNR: mean +- std of SDR and SIR over seeds."""
    cfg = result.config_echo
    parts = []
    for snr in cfg.snr_list:
        parts.append(f"### SDR [dB] and SIR [dB], input SNR {snr:g} dB ({len(cfg.seeds)} seeds)\n")
        parts.append("| | SDR | SIR |")
        parts.append("|---|---|---|")
        for loss in cfg.losses:
            parts.append(
                f"| {LOSS_LABELS.get(loss, loss)} "
                f"| {result.mean(loss, snr):.1f} ± {result.std(loss, snr):.1f} "
                f"| {result.mean(loss, snr, 'sir_db'):.1f} ± {result.std(loss, snr, 'sir_db'):.1f} |"
            )
        parts.append("")
    return "\n".join(parts)


# -- curve / trace -----------------------------------------------------------


def cmd_curve(gamma_min: float, gamma_max: float, steps: int, out, include=()) -> list[tuple[float, float]]:
    """Write ``gamma,sdr_db`` rows on an even grid (plus any ``include`` points)."""
    if not (0 < gamma_min < gamma_max < 1):
        raise ConfigError("need 0 < gamma_min < gamma_max < 1")
    if steps < 2:
        raise ConfigError("steps must be >= 2")
    gammas = np.linspace(gamma_min, gamma_max, steps)
    if len(include):
        gammas = np.unique(np.concatenate([gammas, np.asarray(include, dtype=np.float64)]))
    rows = bss.sdr_gamma_curve(gammas)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", "sdr_db"])
        for g, v in rows:
            w.writerow([f"{g:.9f}", fixed6(v)])
    return rows


def cmd_trace(config: ExperimentConfig, model_dir, data_dir, snr: float, out, bypass: str | None = None) -> Path:
    """Write aligned ``index,clean,mixture,estimate`` columns for the test signal."""
    data_dir = Path(data_dir)
    clean = _read(data_dir, "clean.csv")
    mixture = _read(data_dir, f"mixture_test_{snr_tag(snr)}.csv")
    est = estimate(config, model_dir, data_dir, snr, bypass)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "clean", "mixture", "estimate"])
        for i, (c, m, e) in enumerate(zip(clean, mixture, est)):
            w.writerow([i, repr(float(c)), repr(float(m)), repr(float(e))])
    return Path(out)
