"""Command-line runner: gen-data, train, eval, ablate and analyze-noise.

Every flag mirrors a RunConfig key in kebab case. A JSON ``--config`` file
fills keys first and explicit flags override it. Relative output directories
are placed under ``$ACTDIFF_OUTPUT_ROOT`` when that variable is set.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from . import planner
from .dataset import DatasetError, ProcedureDataset
from .metrics import evaluate
from .model import CheckpointError, DenoiserConfig, load_denoiser, save_denoiser
from .noise import MaskMode, NoiseStats, estimate_noise_stats, simulate_noised_actions
from .schedule import build_cosine_schedule
from .training import NumericError, TrainingConfig

log = logging.getLogger("actdiff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "ACTDIFF_OUTPUT_ROOT"
COMMANDS = ("gen-data", "train", "eval", "ablate", "analyze-noise")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # problem and diffusion
    horizon: int = 3
    diffusion_steps: int = 200
    tau: float = 0.008
    mask_mode: str = "MultiAdd"
    attention_enabled: bool = True
    use_fitted_mean: bool = False
    # data
    dataset: str = ""
    preset: str = "linear"
    data_seed: int = 0
    num_tasks: int = 0
    num_actions: int = 0
    observation_dim: int = 0
    videos_per_task: int = 0
    train_fraction: float = 0.7
    split_seed: int = 0
    # denoiser training
    batch_size: int = 64
    epochs: int = 60
    steps_per_epoch: int = 50
    warmup_epochs: int = 10
    peak_lr: float = 5e-4
    decay_rate: float = 0.5
    decay_every: int = 5
    decay_last_k_epochs: int = 15
    weight_decay: float = 0.01
    train_seed: int = 0
    channels: list = field(default_factory=lambda: [64, 128, 256])
    time_embed_dim: int = 64
    # task classifier
    classifier_epochs: int = 20
    classifier_steps_per_epoch: int = 30
    classifier_hidden: int = 128
    # inference and analysis
    inference_seed: int = 0
    noise_seed: int = 0
    noise_draws: int = 20
    histogram_bins: int = 50
    horizons: list = field(default_factory=list)
    output_dir: str = "runs/default"

    def __post_init__(self):
        try:
            MaskMode.parse(self.mask_mode)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.horizon < 2:
            raise ConfigError("horizon must be >= 2")
        if self.diffusion_steps < 1 or not self.tau > 0:
            raise ConfigError("diffusion_steps must be >= 1 and tau > 0")
        if self.preset not in ds_mod.PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(ds_mod.PRESETS)}")
        if not self.channels or any(int(c) < 1 for c in self.channels):
            raise ConfigError("channels must be a nonempty list of positive widths")
        if any(int(h) < 2 for h in self.horizons):
            raise ConfigError("every ablation horizon must be >= 2")
        if self.noise_draws < 1 or self.histogram_bins < 1:
            raise ConfigError("noise_draws and histogram_bins must be positive")
        try:
            self.training_config()
            self.classifier_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # -- derived configs ----------------------------------------------------

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            batch_size=self.batch_size, epochs=self.epochs, steps_per_epoch=self.steps_per_epoch,
            warmup_epochs=self.warmup_epochs, peak_lr=self.peak_lr, decay_rate=self.decay_rate,
            decay_every=self.decay_every, decay_last_k_epochs=self.decay_last_k_epochs,
            weight_decay=self.weight_decay, seed=self.train_seed,
        )

    def classifier_config(self) -> TrainingConfig:
        k = self.classifier_epochs
        return replace(planner.CLASSIFIER_DEFAULTS, epochs=k, steps_per_epoch=self.classifier_steps_per_epoch,
                       warmup_epochs=min(planner.CLASSIFIER_DEFAULTS.warmup_epochs, k - 1),
                       decay_last_k_epochs=min(planner.CLASSIFIER_DEFAULTS.decay_last_k_epochs, k),
                       seed=self.train_seed)

    def synthetic_spec(self) -> ds_mod.SyntheticSpec:
        overrides = {k: getattr(self, k) for k in ("num_tasks", "num_actions", "observation_dim", "videos_per_task")
                     if getattr(self, k)}
        try:
            return ds_mod.preset(self.preset, seed=self.data_seed, **overrides)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        base = asdict(cls())
        for k, v in values.items():
            base[k] = _coerce(k, v, base[k])
        return cls(**base)


def _coerce(key, value, default):
    """Convert a file or flag value to the type of the key's default."""
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(default, list):
            items = value.split(",") if isinstance(value, str) else list(value)
            return [int(x) for x in items if str(x).strip() != ""]
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {e}") from None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                loaded = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file {args.config}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")
        values.update(loaded)
    for f in fields(RunConfig):
        if f.name in vars(args):
            values[f.name] = getattr(args, f.name)
    return RunConfig.from_mapping(values)


# --------------------------------------------------------------------------
# output helpers


def _header(cfg: RunConfig) -> dict:
    seeds = {k: getattr(cfg, k) for k in ("data_seed", "split_seed", "train_seed", "inference_seed", "noise_seed")}
    return {"config": cfg.to_dict(), "seeds": seeds}


def write_json(path: Path, payload: dict, cfg: RunConfig) -> None:
    doc = dict(_header(cfg))
    doc.update(payload)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def write_csv(path: Path, header: list[str], rows, cfg: RunConfig) -> None:
    with open(path, "w", newline="") as f:
        f.write("# config: " + json.dumps(cfg.to_dict(), sort_keys=True) + "\n")
        f.write("# seeds: " + json.dumps(_header(cfg)["seeds"], sort_keys=True) + "\n")
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    """Read a CSV written by ``write_csv``, skipping the comment header."""
    with open(path, newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


# --------------------------------------------------------------------------
# pipeline pieces


def load_data(cfg: RunConfig, horizon: int | None = None):
    """Return (train, test) from the configured dataset path or preset."""
    T = horizon or cfg.horizon
    if cfg.dataset:
        data = ds_mod.load(cfg.dataset)
        if data.dims.T != T:
            raise ConfigError(f"dataset {cfg.dataset} has horizon {data.dims.T}, config asks for {T}")
        if np.all(data.splits == ""):
            return ds_mod.split(data, cfg.train_fraction, cfg.split_seed)
        train, test = data.split_part("train"), data.split_part("test")
    else:
        train, test = ds_mod.split(ds_mod.build_dataset(cfg.synthetic_spec(), T), cfg.train_fraction, cfg.split_seed)
    if len(train) == 0 or len(test) == 0:
        raise DatasetError(f"empty split: {len(train)} train / {len(test)} test windows", path=cfg.dataset or None)
    return train, test


def _denoiser_config(cfg: RunConfig, dims, attention: bool) -> DenoiserConfig:
    return DenoiserConfig(input_width=dims.width, horizon=dims.T, channels=list(cfg.channels),
                          attention_enabled=attention, time_embed_dim=cfg.time_embed_dim)


def train_models(cfg: RunConfig, train: ProcedureDataset, mode=None, attention=None):
    """Train classifier and denoiser and fit noise statistics."""
    mode = MaskMode.parse(mode or cfg.mask_mode)
    attention = cfg.attention_enabled if attention is None else attention
    schedule = build_cosine_schedule(cfg.diffusion_steps, cfg.tau)
    classifier, clf_log = planner.train_task_classifier(train, cfg.classifier_config(), hidden=cfg.classifier_hidden)
    log.info("task classifier: train accuracy %.3f", clf_log[-1]["accuracy"])
    stats = estimate_noise_stats(train, schedule, mode, seed=cfg.noise_seed, draws=cfg.noise_draws)
    denoiser, den_log = planner.train_denoiser(train, schedule, mode, cfg.training_config(),
                                               _denoiser_config(cfg, train.dims, attention))
    return classifier, denoiser, stats, schedule, clf_log, den_log


def run_eval(cfg: RunConfig, classifier, denoiser, stats, schedule, test: ProcedureDataset):
    plans, tasks = planner.plan_dataset(denoiser, classifier, test, stats, schedule, seed=cfg.inference_seed,
                                        use_fitted_mean=cfg.use_fitted_mean)
    report = evaluate(plans, test.actions)
    return plans, tasks, report


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig) -> Path:
    data = ds_mod.build_dataset(cfg.synthetic_spec(), cfg.horizon)
    train, test = ds_mod.split(data, cfg.train_fraction, cfg.split_seed)
    merged = ds_mod.merge(train, test)
    merged.manifest = dict(merged.manifest, **_header(cfg))
    path = Path(cfg.dataset) if cfg.dataset else cfg.output_path() / "dataset"
    ds_mod.save(merged, path)
    log.info("wrote %d windows (%d train / %d test) to %s", len(merged), len(train), len(test), path)
    return path


def cmd_train(cfg: RunConfig) -> Path:
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    train, _ = load_data(cfg)
    classifier, denoiser, stats, _, clf_log, den_log = train_models(cfg, train)
    extra = _header(cfg)
    classifier.save(out / "classifier.npz", extra)
    save_denoiser(denoiser, out / "denoiser.npz", extra)
    write_json(out / "noise_stats.json", {"noise_stats": stats.to_dict()}, cfg)
    write_csv(out / "loss_log.csv", ["epoch", "lr", "loss"],
              [(e["epoch"], repr(e["lr"]), repr(e["loss"])) for e in den_log], cfg)
    write_csv(out / "classifier_log.csv", ["epoch", "loss", "accuracy"],
              [(e["epoch"], repr(e["loss"]), repr(e["accuracy"])) for e in clf_log], cfg)
    log.info("final denoiser loss %.5f; artifacts in %s", den_log[-1]["loss"], out)
    return out


def _load_trained(out: Path):
    try:
        stats_doc = json.loads((out / "noise_stats.json").read_text())
        stats = NoiseStats.from_dict(stats_doc["noise_stats"])
    except FileNotFoundError:
        raise DatasetError("noise statistics not found; run train first", path=out / "noise_stats.json") from None
    except (KeyError, ValueError, TypeError) as e:
        raise DatasetError(f"invalid noise statistics ({e})", path=out / "noise_stats.json") from None
    return planner.TaskClassifier.load(out / "classifier.npz"), load_denoiser(out / "denoiser.npz"), stats


def cmd_eval(cfg: RunConfig) -> dict:
    out = cfg.output_path()
    classifier, denoiser, stats = _load_trained(out)
    schedule = build_cosine_schedule(cfg.diffusion_steps, cfg.tau)
    _, test = load_data(cfg)
    plans, tasks, report = run_eval(cfg, classifier, denoiser, stats, schedule, test)
    with open(out / "plans.jsonl", "w") as f:
        f.write(json.dumps(_header(cfg)) + "\n")
        for c, p, g in zip(tasks, plans, test.actions):
            f.write(json.dumps({"predicted_task": int(c), "plan": [int(a) for a in p],
                                "gt_plan": [int(a) for a in g]}) + "\n")
    summary = report.to_dict(include_records=False)
    summary["task_accuracy"] = float(np.mean(tasks == test.tasks))
    write_json(out / "report.json", {"report": summary}, cfg)
    log.info("SR %.4f  mAcc %.4f  mSIoU %.4f  (n=%d)", report.sr, report.macc, report.msiou, report.n_samples)
    return summary


ABLATION_HEADER = ["horizon", "mask_mode", "attention", "sr", "macc", "msiou", "random_sr", "sr_over_random",
                   "final_loss"]


def cmd_ablate(cfg: RunConfig) -> Path:
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    rows, deltas = [], []
    for T in cfg.horizons or [cfg.horizon]:
        train, test = load_data(cfg, T)
        schedule = build_cosine_schedule(cfg.diffusion_steps, cfg.tau)
        classifier, _ = planner.train_task_classifier(train, cfg.classifier_config(), hidden=cfg.classifier_hidden)
        results = {}
        for mode in MaskMode:
            stats = estimate_noise_stats(train, schedule, mode, seed=cfg.noise_seed, draws=cfg.noise_draws)
            for attention in (True, False):
                log.info("ablation T=%d %s attention=%s", T, mode.value, attention)
                denoiser, den_log = planner.train_denoiser(train, schedule, mode, cfg.training_config(),
                                                           _denoiser_config(cfg, train.dims, attention))
                _, _, report = run_eval(cfg, classifier, denoiser, stats, schedule, test)
                random_sr = float(train.dims.A) ** (-T)
                results[mode, attention] = report
                rows.append([T, mode.value, attention, repr(report.sr), repr(report.macc), repr(report.msiou),
                             repr(random_sr), repr(report.sr / random_sr), repr(den_log[-1]["loss"])])
        for attention in (True, False):
            a, b = results[MaskMode.MULTI_ADD, attention], results[MaskMode.NO_MASK, attention]
            deltas.append({"horizon": T, "comparison": "MultiAdd-NoMask", "attention": attention,
                           "d_sr": a.sr - b.sr, "d_macc": a.macc - b.macc, "d_msiou": a.msiou - b.msiou})
        for mode in MaskMode:
            a, b = results[mode, True], results[mode, False]
            deltas.append({"horizon": T, "comparison": "attention on-off", "mask_mode": mode.value,
                           "d_sr": a.sr - b.sr, "d_macc": a.macc - b.macc, "d_msiou": a.msiou - b.msiou})
    write_csv(out / "ablation.csv", ABLATION_HEADER, rows, cfg)
    write_json(out / "ablation_deltas.json", {"deltas": deltas}, cfg)
    return out / "ablation.csv"


def cmd_analyze_noise(cfg: RunConfig) -> Path:
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    train, _ = load_data(cfg)
    schedule = build_cosine_schedule(cfg.diffusion_steps, cfg.tau)
    modes = [MaskMode.NO_MASK]
    if MaskMode.parse(cfg.mask_mode) != MaskMode.NO_MASK:
        modes.append(MaskMode.parse(cfg.mask_mode))
    summary = []
    for mode in modes:
        rng = np.random.default_rng(cfg.noise_seed)
        noised = simulate_noised_actions(train, schedule, mode, rng, cfg.noise_draws)
        for t in range(train.dims.T):
            values = noised[:, t, :].ravel()
            counts, edges = np.histogram(values, bins=cfg.histogram_bins)
            write_csv(out / f"hist_{mode.value}_t{t + 1}.csv", ["bin_left", "bin_right", "count"],
                      [(repr(lo), repr(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)], cfg)
            summary.append([mode.value, t + 1, repr(float(values.mean())), repr(float(values.std())), values.size])
    write_csv(out / "noise_summary.csv", ["mode", "position", "mu", "sigma", "count"], summary, cfg)
    return out / "noise_summary.csv"


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "analyze-noise": cmd_analyze_noise}


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    defaults = RunConfig()
    for name in COMMANDS:
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with RunConfig keys; flags override it")
        for f in fields(RunConfig):
            default = getattr(defaults, f.name)
            shown = ",".join(map(str, default)) if isinstance(default, list) else default
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar=type(default).__name__.upper(),
                           help=f"default: {shown!r}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        start = time.perf_counter()
        HANDLERS[args.command](cfg)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
        return EXIT_OK
    except ConfigError as e:
        print(f"actdiff: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError) as e:
        print(f"actdiff: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"actdiff: data error: missing file {e.filename}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"actdiff: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
