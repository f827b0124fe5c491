"""Command-line entry point: ``raunet <command> [flags]``.

Settings resolve as command-line flag > ``--config`` file > built-in default.
The config file is flat ``key = value`` text using the long flag names with
dashes or underscores (``max_folds = 1``); ``#`` starts a comment.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric abort.
Failures print one line to stderr: ``error kind=<Kind> code=<n>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DataError, SegmentationSample, augment_dataset, make_folds, read_dataset, synth_dataset, write_dataset
from .data import write_folds
from .model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import GeometryError, ShapeError, Tensor, no_grad, precision
from .train import NumericAbort, ablation_suite, evaluate, train, write_report

log = logging.getLogger("raunet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# RGB per label in prediction panels.
PALETTE = np.array(
    [
        [211, 211, 211],  # background: light gray
        [0, 170, 0],  # ground-glass opacity: green
        [240, 220, 0],  # consolidation: yellow
        [0, 90, 230],  # pleural effusion: blue
    ],
    dtype=np.uint8,
)

COMMANDS = ("synth", "augment", "train", "eval", "predict", "gradcheck", "ablation")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "full"
    epochs: int = 30
    folds: int = 10
    augment: str = "off"
    data: str | None = None
    out: str | None = None
    workers: int = 1
    n: int = 200
    size: int = 96
    depth: int = 3
    base_channels: int = 16
    cardinality: int = 4
    batch_size: int = 4
    lr: float = 1e-3
    max_folds: int | None = None
    checkpoint: str | None = None
    limit: int | None = None

    def model_config(self, input_size: int) -> ModelConfig:
        return ModelConfig(
            variant=self.variant,
            depth=self.depth,
            base_channels=self.base_channels,
            cardinality=self.cardinality,
            input_size=input_size,
        )


_CHOICES = {"variant": ("full", "ma", "mr", "unet"), "augment": ("on", "off")}
_KINDS = {"seed": int, "epochs": int, "folds": int, "workers": int, "n": int, "size": int, "depth": int,
          "base_channels": int, "cardinality": int, "batch_size": int, "max_folds": int, "limit": int,
          "lr": float}  # fmt: skip


def _coerce(key: str, raw: str):
    kind = _KINDS.get(key, str)
    try:
        value = kind(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    if key in _CHOICES and value not in _CHOICES[key]:
        raise UsageError(f"{key}: {value!r} is not one of {', '.join(_CHOICES[key])}")
    return value


def read_config_file(path) -> dict:
    known = {f.name for f in fields(RunConfig)}
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        if key not in known:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return values


def resolve(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the config file and explicit flags, in rising priority."""
    values = read_config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return RunConfig(**values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raunet", description="Residual attention U-Net toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", choices=_CHOICES["variant"])
    common.add_argument("--epochs", type=int)
    common.add_argument("--folds", type=int, help="k for k-fold cross-validation")
    common.add_argument("--max-folds", type=int, dest="max_folds", help="train only the first folds")
    common.add_argument("--augment", choices=_CHOICES["augment"])
    common.add_argument("--data", help="dataset directory with manifest.tsv")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="folds trained in parallel")
    common.add_argument("--n", type=int, help="synthetic sample count")
    common.add_argument("--size", type=int, help="image extent")
    common.add_argument("--depth", type=int)
    common.add_argument("--base-channels", type=int, dest="base_channels")
    common.add_argument("--cardinality", type=int)
    common.add_argument("--batch-size", type=int, dest="batch_size")
    common.add_argument("--lr", type=float)
    common.add_argument("--checkpoint", help="model checkpoint for eval/predict")
    common.add_argument("--limit", type=int, help="predict: number of samples to render")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    helps = {
        "synth": "write a synthetic CT-like dataset",
        "augment": "write a dataset plus its rotated and rescaled copies",
        "train": "cross-validated training; writes checkpoints and reports",
        "eval": "score a checkpoint on a dataset",
        "predict": "render input | truth | prediction panels",
        "gradcheck": "finite-difference check of the tiny model at 64-bit",
        "ablation": "train all variants with and without augmentation",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


# -- commands --------------------------------------------------------------


def _need(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        if getattr(cfg, key) is None:
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _load(cfg: RunConfig) -> list[SegmentationSample]:
    _need(cfg, "data")
    samples = read_dataset(cfg.data)
    if not samples:
        raise DataError(f"{cfg.data}: manifest lists no samples")
    return samples


def cmd_synth(cfg: RunConfig) -> int:
    _need(cfg, "out")
    write_dataset(synth_dataset(cfg.n, cfg.size, cfg.seed), cfg.out)
    print(f"wrote {cfg.n} samples to {cfg.out}")
    return EXIT_OK


def cmd_augment(cfg: RunConfig) -> int:
    _need(cfg, "out")
    samples = augment_dataset(_load(cfg))
    write_dataset(samples, cfg.out)
    print(f"wrote {len(samples)} samples to {cfg.out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    _need(cfg, "out")
    samples = _load(cfg)
    if cfg.augment == "on":
        samples = augment_dataset(samples)
    plan = make_folds([s.id for s in samples], cfg.folds, cfg.seed)
    model_cfg = cfg.model_config(samples[0].mask.shape[0])
    result = train(model_cfg, samples, plan, cfg.epochs, cfg.seed, cfg.batch_size, cfg.lr, cfg.max_folds, cfg.workers)
    out = Path(cfg.out)
    write_report(result, out)
    write_folds(plan, out / "folds.tsv")
    for i, params in enumerate(result.params):
        save_checkpoint(params, out / f"fold{i}.ckpt")
    print(result.report.summary(), end="")
    return EXIT_OK


def _predict(params, samples: list[SegmentationSample]) -> np.ndarray:
    from .model import predict_mask

    preds = []
    with no_grad():
        for i in range(0, len(samples), 8):
            x = np.stack([s.image for s in samples[i : i + 8]])
            preds.append(predict_mask(Tensor(x), params))
    return np.concatenate(preds)


def cmd_eval(cfg: RunConfig) -> int:
    _need(cfg, "checkpoint", "out")
    samples = _load(cfg)
    params = load_checkpoint(cfg.checkpoint)
    metrics = evaluate(params, samples)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = "".join(f"{k}={v:.6f}\n" for k, v in metrics.as_dict().items()) + f"samples={len(samples)}\n"
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def render_panel(sample: SegmentationSample, pred: np.ndarray, gap: int = 4) -> np.ndarray:
    """RGB strip: grayscale input | ground truth | prediction, separated by white gaps."""
    gray = np.round(np.clip(sample.image[0], 0, 1) * 255).astype(np.uint8)
    h, w = gray.shape
    panel = np.full((h, 3 * w + 2 * gap, 3), 255, dtype=np.uint8)
    panel[:, :w] = gray[..., None]
    panel[:, w + gap : 2 * w + gap] = PALETTE[sample.mask]
    panel[:, 2 * (w + gap) :] = PALETTE[pred]
    return panel


def cmd_predict(cfg: RunConfig) -> int:
    _need(cfg, "checkpoint", "out")
    samples = _load(cfg)
    if cfg.limit is not None:
        samples = samples[: cfg.limit]
    params = load_checkpoint(cfg.checkpoint)
    preds = _predict(params, samples)
    out = Path(cfg.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "panels").mkdir(parents=True, exist_ok=True)
    for s, p in zip(samples, preds):
        Image.fromarray(p.astype(np.uint8)).save(out / "masks" / f"{s.id}.png")
        Image.fromarray(render_panel(s, p)).save(out / "panels" / f"{s.id}.png")
    print(f"wrote {len(samples)} panels to {out / 'panels'}")
    return EXIT_OK


GRADCHECK_TOLERANCE = 1e-3


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .gradcheck import check_gradients
    from .model import forward, parameter_init
    from .train import cross_entropy

    with precision("f64"):
        model_cfg = ModelConfig(variant=cfg.variant, depth=2, base_channels=4, cardinality=2, input_size=16)
        params = parameter_init(model_cfg, cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        # Zero biases put many pre-activations exactly on a ReLU kink, and zero
        # gate gains would leave the attention path untested.
        for name, t in params.named().items():
            if name.endswith("bias"):
                t.data = rng.uniform(-0.1, 0.1, t.shape)
            elif name.endswith("gain"):
                t.data = rng.uniform(0.5, 1.0, t.shape)
        x = Tensor(rng.uniform(0, 1, (2, 1, 16, 16)))
        y = rng.integers(0, 4, (2, 16, 16))
        err = check_gradients(
            lambda: cross_entropy(forward(x, params), y), params.parameters(), per_tensor=2, rng=rng
        )
    ok = err < GRADCHECK_TOLERANCE
    print(f"max_rel_error={err:.3e} tolerance={GRADCHECK_TOLERANCE:.0e} status={'pass' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablation(cfg: RunConfig) -> int:
    _need(cfg, "out")
    samples = _load(cfg)
    base = cfg.model_config(samples[0].mask.shape[0])
    table = ablation_suite(samples, cfg.seed, base, cfg.folds, cfg.epochs, cfg.batch_size, cfg.max_folds, cfg.workers)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.tsv").write_text(table.tsv())
    print(table.tsv(), end="")
    return EXIT_OK


_HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def _fail(exc: BaseException, code: int) -> int:
    message = " ".join(str(exc).split())
    print(f"error kind={type(exc).__name__} code={code}: {message}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        return _HANDLERS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(exc, EXIT_USAGE)
    except NumericAbort as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (DataError, CheckpointError, GeometryError, ShapeError, OSError) as exc:
        return _fail(exc, EXIT_DATA)
    except ValueError as exc:
        return _fail(exc, EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
