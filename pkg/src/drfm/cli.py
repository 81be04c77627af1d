"""Command-line front end: ``drfm {train,sample,denoise,verify,schedule}``.

Configuration is resolved as defaults < preset < ``--config`` file < flags.
Every command that writes an output directory also writes ``run.cfg``, the
fully resolved configuration, so a run can be repeated from its outputs.

Exit statuses: 0 success, 1 usage or config error, 2 data error,
3 numerical failure (including failed verification gates).
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from drfm import rng
from drfm.data_io import (
    AudioKind,
    Checkpoint,
    Dataset,
    ImageKind,
    kind_from_meta,
    kind_meta,
    load_idx_images,
    load_wav,
    read_checkpoint,
    read_keyvalue,
    read_pgm,
    read_wav_pcm16,
    pcm_to_unit,
    write_checkpoint,
    write_keyvalue,
    write_loss_trace,
    write_pgm,
    write_wav,
)
from drfm.errors import ConfigError, DataFormatError, NumericalError
from drfm.model import ModelMode, RhoSpec
from drfm.sampler import NoiseRule, SamplerVariant, denoise, match_noise_level, sample
from drfm.schedule import VarianceSchedule, linear_schedule
from drfm.training import TrainConfig, train
from drfm.verify import SUITES, run_suites

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

PRESETS: dict[str, dict[str, object]] = {
    "desk": {"features": 4000, "epochs": 3000},
    "paper-mnist": {"features": 80000, "steps": 100, "epochs": 30000},
    "paper-audio": {"features": 15000, "steps": 100, "epochs": 30000},
}


@dataclass
class RunConfig:
    # schedule
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 100
    # model
    features: int = 4000
    mode: str = "drfm"
    rho_sigma: float | None = None  # None means 1/sqrt(d)
    # training
    epochs: int = 3000
    lr: float = 1e-3
    batch: int | None = None
    weighting: str = "unweighted"
    seed: int = 0
    checkpoint_every: int = 0
    # sampling and denoising
    count: int = 15
    variant: str = "standard"
    noise_rule: str | None = None  # None: beta for sample, none for denoise
    noise_sigma: float | None = None
    input_sigma: float | None = None
    format: str | None = None
    # paths and data selection
    data: str | None = None
    labels: str | None = None
    class_id: int | None = None
    limit: int | None = None
    offset: int = 0
    window: int | None = None
    checkpoint: str | None = None
    input: str | None = None
    truth: str | None = None
    out_dir: str = "out"
    preset: str | None = None

    def items(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def schedule(self) -> VarianceSchedule:
        return linear_schedule(self.beta_start, self.beta_end, self.steps)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, n_features=self.features, batch=self.batch,
                           learning_rate=self.lr, weighting=self.weighting, mode=self.mode,
                           seed=self.seed, checkpoint_every=self.checkpoint_every)

    def validate(self) -> None:
        """Run every owning module's precondition before any work starts."""
        try:
            self.schedule()
            self.train_config().validate()
            ModelMode.parse(self.mode)
            SamplerVariant.parse(self.variant)
            if self.noise_rule is not None:
                NoiseRule.parse(self.noise_rule)
            if self.rho_sigma is not None:
                RhoSpec(gaussian_sigma=self.rho_sigma).sigma_for(1)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        for name in ("noise_sigma", "input_sigma"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(f"{name.replace('_', '-')} must be positive, got {value}")
        if self.offset < 0 or (self.limit is not None and self.limit < 1):
            raise ConfigError("offset must be >= 0 and limit >= 1")
        if self.window is not None and self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.format is not None and self.format not in ("pgm", "wav"):
            raise ConfigError(f"format must be pgm or wav, got {self.format!r}")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(name: str, raw: str):
    kind = _FIELDS[name].type
    optional = "None" in kind
    text = str(raw).strip()
    if optional and text.lower() in ("", "none"):
        return None
    base = kind.split("|")[0].strip()
    try:
        if base == "int":
            return int(text)
        if base == "float":
            value = float(text)
            if not math.isfinite(value):
                raise ValueError
            return value
    except ValueError:
        raise ConfigError(f"{name}: expected {base}, got {raw!r}") from None
    return text


def resolve_config(file_path: str | None, overrides: dict[str, str], preset: str | None = None) -> RunConfig:
    values: dict[str, object] = {}
    file_values: dict[str, str] = {}
    if file_path is not None:
        try:
            file_values = read_keyvalue(file_path)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {file_path}") from None
        except DataFormatError as exc:
            raise ConfigError(str(exc)) from None
        unknown = sorted(set(file_values) - set(_FIELDS))
        if unknown:
            raise ConfigError(f"{file_path}: unknown config key(s): {', '.join(unknown)}")
    preset = preset or overrides.get("preset") or file_values.get("preset")
    if preset is not None and preset.strip().lower() in ("", "none"):
        preset = None
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        values.update(PRESETS[preset])
        values["preset"] = preset
    for source in (file_values, overrides):
        for key, raw in source.items():
            values[key] = _convert(key, raw)
    config = RunConfig(**values)
    config.validate()
    return config


# -- parser ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_config_flags(p: argparse.ArgumentParser, names) -> None:
    p.add_argument("--config", help="key=value configuration file")
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, metavar=name.upper())


TRAIN_KEYS = ["preset", "beta_start", "beta_end", "steps", "features", "mode", "rho_sigma", "epochs",
              "lr", "batch", "weighting", "seed", "checkpoint_every", "data", "labels", "class_id",
              "limit", "offset", "window", "out_dir"]
SAMPLE_KEYS = ["checkpoint", "count", "seed", "variant", "noise_rule", "format", "out_dir"]
DENOISE_KEYS = ["checkpoint", "input", "truth", "noise_sigma", "input_sigma", "seed", "variant",
                "noise_rule", "out_dir"]
SCHEDULE_KEYS = ["beta_start", "beta_end", "steps", "checkpoint"]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drfm", description="Diffusion random feature models")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    _add_config_flags(sub.add_parser("train", help="train a model and write a checkpoint"), TRAIN_KEYS)
    _add_config_flags(sub.add_parser("sample", help="generate PGM or WAV samples"), SAMPLE_KEYS)
    _add_config_flags(sub.add_parser("denoise", help="clean a corrupted PGM or WAV"), DENOISE_KEYS)
    _add_config_flags(sub.add_parser("schedule", help="print schedule tables as TSV"), SCHEDULE_KEYS)
    v = sub.add_parser("verify", help="run numerical verification suites")
    v.add_argument("--suite", required=True)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out-dir", dest="out_dir")
    return parser


def _overrides(args) -> dict[str, str]:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _config(args) -> RunConfig:
    return resolve_config(args.config, _overrides(args))


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_cfg(out: Path, config: RunConfig, command: str) -> None:
    items = {"command": command}
    items.update({k: ("none" if v is None else v) for k, v in config.items().items()})
    write_keyvalue(out / "run.cfg", items)


def _threads() -> None:
    raw = os.environ.get("DRFM_THREADS")
    if raw is not None and not (raw.strip().isdigit() and int(raw) > 0):
        raise ConfigError(f"DRFM_THREADS must be a positive integer, got {raw!r}")


# -- commands ----------------------------------------------------------------------


def load_training_data(config: RunConfig) -> Dataset:
    if config.data is None:
        raise ConfigError("train needs --data (IDX images or a WAV file)")
    path = Path(config.data)
    if not path.exists():
        raise DataFormatError(f"--data file not found: {path}")
    if path.suffix.lower() == ".wav":
        return load_wav(path, config.window)
    if config.labels is not None and not Path(config.labels).exists():
        raise DataFormatError(f"--labels file not found: {config.labels}")
    return load_idx_images(path, config.labels, config.class_id, config.limit, config.offset)


def cmd_train(args, out=sys.stdout) -> int:
    config = _config(args)
    data = load_training_data(config)
    schedule = config.schedule()
    rho = RhoSpec(gaussian_sigma=config.rho_sigma)
    outdir = _out_dir(config)
    _write_run_cfg(outdir, config, "train")
    meta = kind_meta(data.kind)
    meta["data"] = data.provenance

    def save(epoch: int, ckpt: Checkpoint) -> None:
        ckpt.meta = dict(meta)
        write_checkpoint(ckpt, outdir / f"model_e{epoch}.drfm")

    every = max(1, config.epochs // 20)

    def progress(epoch: int, loss: float) -> None:
        if epoch % every == 0 or epoch == 1:
            print(f"epoch {epoch} loss {loss:.6g}", file=sys.stderr)

    result = train(data, config.train_config(), schedule, rho=rho, on_checkpoint=save, progress=progress)
    result.checkpoint.meta = meta
    write_checkpoint(result.checkpoint, outdir / "model.drfm")
    write_loss_trace(outdir / "loss.tsv", result.losses)
    print(f"final_loss={result.losses[-1]!r}", file=out)
    print(f"checkpoint={outdir / 'model.drfm'}", file=out)
    return EXIT_OK


def _load_checkpoint(config: RunConfig) -> Checkpoint:
    if config.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    path = Path(config.checkpoint)
    if not path.exists():
        raise DataFormatError(f"checkpoint not found: {path}")
    return read_checkpoint(path)


def _checkpoint_kind(ckpt: Checkpoint, requested: str | None):
    d = ckpt.dims[0]
    kind = kind_from_meta(ckpt.meta)
    if kind is None:
        if requested is None:
            raise ConfigError("checkpoint has no data-kind sidecar; pass --format pgm or wav")
        if requested == "wav":
            return AudioKind(16000)
        side = math.isqrt(d)
        if side * side != d:
            raise ConfigError(f"cannot lay out d={d} as a square image without a sidecar")
        return ImageKind(side, side)
    native = "pgm" if isinstance(kind, ImageKind) else "wav"
    if requested is not None and requested != native:
        raise ConfigError(f"checkpoint holds {kind.describe()} data; cannot emit {requested}")
    return kind


def _write_example(vector, kind, path: Path) -> None:
    if isinstance(kind, ImageKind):
        write_pgm(vector, kind.height, kind.width, path)
    else:
        write_wav(path, vector, kind.sample_rate)


def cmd_sample(args, out=sys.stdout) -> int:
    config = _config(args)
    ckpt = _load_checkpoint(config)
    kind = _checkpoint_kind(ckpt, config.format)
    outdir = _out_dir(config)
    _write_run_cfg(outdir, config, "sample")
    noise = NoiseRule.parse(config.noise_rule or "beta")
    samples = sample(ckpt, config.count, seed=config.seed, variant=config.variant, noise=noise)
    ext = "pgm" if isinstance(kind, ImageKind) else "wav"
    for i, vec in enumerate(samples):
        _write_example(vec, kind, outdir / f"sample_{i:03d}.{ext}")
    write_keyvalue(outdir / "samples.meta", {
        "count": config.count, "seed": config.seed,
        "variant": SamplerVariant.parse(config.variant).value,
        "noise_rule": noise.value,
        "checkpoint": config.checkpoint,
    })
    print(f"wrote {config.count} {ext} files to {outdir}", file=out)
    return EXIT_OK


def _read_signal(path: Path, kind) -> np.ndarray:
    if not path.exists():
        raise DataFormatError(f"file not found: {path}")
    if isinstance(kind, ImageKind):
        values, h, w = read_pgm(path)
        if (h, w) != (kind.height, kind.width):
            raise DataFormatError(f"{path}: image is {h}x{w}, checkpoint expects {kind.height}x{kind.width}")
        return values
    samples, _ = read_wav_pcm16(path)
    return pcm_to_unit(samples.astype(np.float64).mean(axis=1))


def cmd_denoise(args, out=sys.stdout) -> int:
    config = _config(args)
    ckpt = _load_checkpoint(config)
    if config.input is None:
        raise ConfigError("--input is required")
    if (config.noise_sigma is None) == (config.input_sigma is None):
        raise ConfigError("give exactly one of --noise-sigma (corrupt the input) "
                          "or --input-sigma (input is already corrupted)")
    kind = _checkpoint_kind(ckpt, None)
    d = ckpt.dims[0]
    clean = _read_signal(Path(config.input), kind)
    if clean.size != d:
        raise DataFormatError(f"{config.input}: input has dimension {clean.size}, checkpoint expects {d}")
    if config.noise_sigma is not None:
        sigma = config.noise_sigma
        corrupted = clean + sigma * rng.stream(config.seed, rng.DENOISE, 1 << 32).standard_normal(d)
    else:
        sigma = config.input_sigma
        corrupted = clean
    schedule = ckpt.schedule()
    k = match_noise_level(sigma, schedule)
    scaled = np.sqrt(schedule.alpha_bar(k)) * corrupted
    # the deterministic chain estimates the clean signal; added noise only costs MSE
    noise = NoiseRule.parse(config.noise_rule or "none")
    cleaned = denoise(ckpt, scaled, k, seed=config.seed, variant=config.variant, noise=noise)

    outdir = _out_dir(config)
    _write_run_cfg(outdir, config, "denoise")
    ext = "pgm" if isinstance(kind, ImageKind) else "wav"
    _write_example(np.clip(corrupted, -1.0, 1.0), kind, outdir / f"corrupted.{ext}")
    _write_example(cleaned, kind, outdir / f"denoised.{ext}")
    report = {"entry_timestep": k, "sigma": sigma, "noise_rule": noise.value}
    truth_path = config.truth or (config.input if config.noise_sigma is not None else None)
    if truth_path is not None:
        truth = _read_signal(Path(truth_path), kind)
        if truth.size != d:
            raise DataFormatError(f"{truth_path}: ground truth has dimension {truth.size}, expected {d}")
        report["input_mse"] = float(np.mean((corrupted - truth) ** 2))
        report["output_mse"] = float(np.mean((cleaned - truth) ** 2))
    write_keyvalue(outdir / "denoise.txt", {k_: repr(v) if isinstance(v, float) else v
                                            for k_, v in report.items()})
    for key, value in report.items():
        print(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}", file=out)
    return EXIT_OK


def cmd_schedule(args, out=sys.stdout) -> int:
    config = _config(args)
    schedule = _load_checkpoint(config).schedule() if config.checkpoint else config.schedule()
    print("k\tbeta\talpha_bar\tposterior_beta", file=out)
    for k in range(1, schedule.steps + 1):
        row = (schedule.betas[k - 1], schedule.alpha_bars[k - 1], schedule.posterior_betas[k - 1])
        print("\t".join([str(k)] + [repr(float(v)) for v in row]), file=out)
    return EXIT_OK


def cmd_verify(args, out=sys.stdout) -> int:
    if args.suite != "all" and args.suite not in SUITES:
        raise ConfigError(f"unknown suite {args.suite!r}; choose from all, {', '.join(SUITES)}")
    rng.check_seed(args.seed)
    reports = run_suites(args.suite, seed=args.seed)
    lines = [line for r in reports for line in r.lines()]
    passed = all(r.passed for r in reports)
    lines.append(f"check.summary={'pass' if passed else 'fail'}")
    print("\n".join(lines), file=out)
    if args.out_dir:
        outdir = Path(args.out_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "report.txt").write_text("\n".join(lines) + "\n")
        write_keyvalue(outdir / "run.cfg", {"command": "verify", "suite": args.suite, "seed": args.seed})
    return EXIT_OK if passed else EXIT_NUMERICAL


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "denoise": cmd_denoise,
            "schedule": cmd_schedule, "verify": cmd_verify}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        _threads()
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, out=out)
    except ConfigError as exc:
        print(f"drfm: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"drfm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"drfm: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"drfm: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
