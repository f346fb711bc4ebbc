"""Two-stage training protocol, toy-scale training loop and benchmark evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data
from .model import SvanConfig, SvanParams, init_params, save_params, svan_forward
from .tensor import AdamState, Tape, adam_step, backward, l1_loss, l2_loss

__all__ = [
    "StagePlan",
    "TrainLog",
    "TrainingDiverged",
    "TrainConfig",
    "ConfigError",
    "lr_at",
    "default_protocol",
    "train",
    "super_resolve",
    "EvalRecord",
    "EvalReport",
    "evaluate",
    "parse_config",
    "load_config",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StagePlan:
    """One training stage.  ``epochs`` counts per patch-size phase."""

    epochs: int
    loss: str
    lr: float
    schedule: str  # "halve" or "cosine"
    period: int
    patch_sizes: tuple[int, ...] = (64,)
    batch_size: int = 64
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"loss must be 'l1' or 'l2', got {self.loss!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.schedule not in ("halve", "cosine"):
            raise ValueError(f"schedule must be 'halve' or 'cosine', got {self.schedule!r}")
        if self.period < 1 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("period, batch_size and steps_per_epoch must be >= 1")
        if not self.patch_sizes or min(self.patch_sizes) < 1:
            raise ValueError("patch sizes must be positive")

    @property
    def total_epochs(self) -> int:
        return self.epochs * len(self.patch_sizes)


def lr_at(plan: StagePlan, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if plan.schedule == "halve":
        return plan.lr * 2.0 ** -(epoch // plan.period)
    # warm restarts every period
    return plan.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch % plan.period) / plan.period))


def default_protocol(**overrides) -> list[StagePlan]:
    """Pre-train, cosine refinement at two patch sizes, then L2 fine-tuning.

    Keyword overrides (``epochs=500``, ``batch_size=4``...) apply to every stage.
    """
    stages = [
        StagePlan(2000, "l1", 1e-3, "halve", 500, (64,)),
        StagePlan(3000, "l1", 1e-4, "cosine", 20, (64, 128)),
        StagePlan(3000, "l2", 5e-4, "halve", 300, (64,)),
    ]
    return [replace(s, **overrides) for s in stages]


# ---------------------------------------------------------------------------
# logs


@dataclass(frozen=True)
class StepRecord:
    step: int
    stage: int
    epoch: int
    lr: float
    loss: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    # (stage, epoch, mean validation PSNR-Y)
    validation: list[tuple[int, int, float]] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.steps and rec.step <= self.steps[-1].step:
            raise ValueError("steps must be strictly increasing")
        self.steps.append(rec)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.steps]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "stage", "epoch", "lr", "loss"])
        for r in self.steps:
            w.writerow([r.step, r.stage, r.epoch, repr(r.lr), repr(r.loss)])
        return buf.getvalue()

    def validation_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "epoch", "psnr_y"])
        for stage, epoch, psnr in self.validation:
            w.writerow([stage, epoch, repr(psnr)])
        return buf.getvalue()


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# training


def _batch(samples: Sequence[data.Sample], plan: StagePlan, patch: int, scale: int, rng, do_augment: bool, dtype):
    lrs, hrs = [], []
    for _ in range(plan.batch_size):
        s = samples[int(rng.integers(len(samples)))]
        pair = data.sample_patch(s.lr, s.hr, patch, scale, rng)
        if do_augment:
            pair = data.augment(pair, int(rng.integers(8)))
        lrs.append(data.image_to_tensor(pair[0], dtype))
        hrs.append(data.image_to_tensor(pair[1], dtype))
    return np.concatenate(lrs), np.concatenate(hrs)


def train(
    config: SvanConfig,
    dataset: Sequence[data.Sample],
    protocol: Sequence[StagePlan],
    *,
    params: SvanParams | None = None,
    augment: bool = True,
    val_set: Sequence[data.Sample] | None = None,
    val_every: int = 50,
    run_dir: Path | None = None,
    dtype=np.float64,
) -> tuple[SvanParams, TrainLog]:
    """Minibatch Adam over random aligned patches.

    Patch sampling uses a generator seeded from ``config.seed`` so a run is
    reproducible bit for bit.  With ``run_dir`` set, a checkpoint is written
    at every stage boundary plus ``best`` (by validation PSNR) and ``last``.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    smallest = min(min(s.lr.shape[:2]) for s in dataset)
    for plan in protocol:
        if plan.total_epochs and max(plan.patch_sizes) > smallest:
            raise ValueError(f"patch {max(plan.patch_sizes)} larger than smallest LR image ({smallest})")

    params = params if params is not None else init_params(config, dtype)
    rng = np.random.default_rng([config.seed, 1])
    trainlog = TrainLog()
    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = Path(run_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    best_psnr = -math.inf
    step = 0

    for si, plan in enumerate(protocol, start=1):
        state = AdamState()
        loss_fn = l1_loss if plan.loss == "l1" else l2_loss
        epoch = 0
        for patch in plan.patch_sizes:
            for _ in range(plan.epochs):
                lr_now = lr_at(plan, epoch)
                for _ in range(plan.steps_per_epoch):
                    lr_batch, hr_batch = _batch(dataset, plan, patch, config.scale, rng, augment, dtype)
                    tape = Tape()
                    loss = loss_fn(svan_forward(lr_batch, params, tape), hr_batch)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise TrainingDiverged(
                            f"non-finite loss {value} at step {step + 1} (stage {si}, epoch {epoch})"
                        )
                    grads = backward(tape, loss)
                    params = params.with_tensors(adam_step(params.tensors, grads, state, lr_now))
                    step += 1
                    trainlog.append(StepRecord(step, si, epoch, lr_now, value))
                epoch += 1
                if val_set and epoch % val_every == 0:
                    psnr = evaluate(params, val_set, config.scale).mean_psnr
                    trainlog.validation.append((si, epoch, psnr))
                    log.info("stage %d epoch %d: val PSNR-Y %.3f dB", si, epoch, psnr)
                    if ckpt_dir is not None and psnr > best_psnr:
                        best_psnr = psnr
                        save_params(params, ckpt_dir / "best.ckpt")
        if ckpt_dir is not None:
            save_params(params, ckpt_dir / f"stage{si}.ckpt")
    if ckpt_dir is not None:
        save_params(params, ckpt_dir / "last.ckpt")
    return params, trainlog


# ---------------------------------------------------------------------------
# evaluation


def super_resolve(params: SvanParams, lr_image: np.ndarray) -> np.ndarray:
    """Unclamped float ``(s*h, s*w, 3)`` output for one LR image."""
    dtype = next(iter(params.tensors.values())).dtype
    return data.tensor_to_image(svan_forward(data.image_to_tensor(lr_image, dtype), params))


@dataclass(frozen=True)
class EvalRecord:
    image: str
    psnr_y: float
    ssim_y: float
    bicubic_psnr_y: float
    bicubic_ssim_y: float


@dataclass
class EvalReport:
    records: list[EvalRecord]

    def _mean(self, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.records]))

    @property
    def mean_psnr(self) -> float:
        return self._mean("psnr_y")

    @property
    def mean_ssim(self) -> float:
        return self._mean("ssim_y")

    @property
    def mean_bicubic_psnr(self) -> float:
        return self._mean("bicubic_psnr_y")

    @property
    def mean_bicubic_ssim(self) -> float:
        return self._mean("bicubic_ssim_y")

    def to_csv(self) -> str:
        def fmt(v: float) -> str:
            return "inf" if math.isinf(v) else f"{v:.6f}"

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "psnr_y", "ssim_y", "bicubic_psnr_y", "bicubic_ssim_y"])
        for r in self.records:
            w.writerow([r.image, fmt(r.psnr_y), fmt(r.ssim_y), fmt(r.bicubic_psnr_y), fmt(r.bicubic_ssim_y)])
        w.writerow(
            ["mean", fmt(self.mean_psnr), fmt(self.mean_ssim), fmt(self.mean_bicubic_psnr), fmt(self.mean_bicubic_ssim)]
        )
        return buf.getvalue()


def bicubic_model(scale: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda lr: data.bicubic_upscale(lr, scale)


def evaluate(
    model: SvanParams | Callable[[np.ndarray], np.ndarray],
    dataset: Sequence[data.Sample],
    scale: int,
    shave: int | None = None,
) -> EvalReport:
    """Per-image PSNR-Y/SSIM-Y of ``model`` and of the bicubic baseline.

    ``model`` is either network parameters or any callable mapping an LR
    uint8 image to an SR image.  Outputs are clamped and quantised to 8 bits
    before scoring.  ``shave`` defaults to ``scale``.
    """
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    shave = scale if shave is None else shave
    run = (lambda lr: super_resolve(model, lr)) if isinstance(model, SvanParams) else model
    baseline = bicubic_model(scale)
    records = []
    for s in sorted(dataset, key=lambda s: s.name):
        sr = data.to_uint8(np.asarray(run(s.lr)))
        bic = baseline(s.lr)
        records.append(
            EvalRecord(
                s.name,
                data.psnr_y(sr, s.hr, shave),
                data.ssim_y(sr, s.hr, shave),
                data.psnr_y(bic, s.hr, shave),
                data.ssim_y(bic, s.hr, shave),
            )
        )
    return EvalReport(records)


# ---------------------------------------------------------------------------
# key=value training configs


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: SvanConfig
    train_dir: Path | None = None
    val_dir: Path | None = None
    stages: list[StagePlan] = field(default_factory=default_protocol)
    augment: bool = True
    val_every: int = 50


_STAGE_KEYS = {"epochs", "lr", "loss", "schedule", "patch", "batch_size", "steps_per_epoch"}
_GLOBAL_STAGE_KEYS = {"epochs", "batch_size", "steps_per_epoch", "patch"}


def _stage_value(key: str, value: str):
    if key == "lr":
        return "lr", float(value)
    if key == "loss":
        return "loss", value.lower()
    if key == "schedule":
        kind, _, period = value.partition(":")
        if kind not in ("halve", "cosine") or not period:
            raise ValueError("schedule must look like 'halve:500' or 'cosine:20'")
        return "schedule", (kind, int(period))
    if key == "patch":
        return "patch_sizes", tuple(int(p) for p in value.split(","))
    return key, int(value)


def _apply(plan: StagePlan, field_name: str, value) -> StagePlan:
    if field_name == "schedule":
        return replace(plan, schedule=value[0], period=value[1])
    return replace(plan, **{field_name: value})


def parse_config(text: str, base_dir: Path | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Errors name the offending line number.
    """
    base_dir = Path(base_dir) if base_dir else Path.cwd()
    model_kw: dict = {}
    stages = default_protocol()
    n_stages = len(stages)
    cfg_kw: dict = {}
    per_stage: list[tuple[int, int, str, object]] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        try:
            if key == "scale":
                model_kw["scale"] = int(value)
            elif key == "channels":
                model_kw["base_channels"] = int(value)
            elif key == "inner_channels":
                model_kw["inner_channels"] = int(value)
            elif key == "blocks":
                model_kw["num_blocks"] = int(value)
            elif key in ("arrangement", "seed"):
                model_kw[key] = value if key == "arrangement" else int(value)
            elif key in ("train_dir", "val_dir"):
                cfg_kw[key] = (base_dir / value).resolve()
            elif key == "augment":
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"not a boolean: {value!r}")
                cfg_kw["augment"] = value.lower() in ("true", "1", "yes")
            elif key == "val_every":
                cfg_kw["val_every"] = int(value)
            elif key == "stages":
                n_stages = int(value)
                if not 1 <= n_stages <= len(stages):
                    raise ValueError(f"stages must be in 1..{len(stages)}")
            elif key in _GLOBAL_STAGE_KEYS:
                name, v = _stage_value(key, value)
                stages = [_apply(s, name, v) for s in stages]
            elif key.startswith("stage") and "." in key:
                head, sub = key.split(".", 1)
                idx = int(head[5:]) - 1
                if not 0 <= idx < len(stages) or sub not in _STAGE_KEYS:
                    raise ValueError(f"unknown stage key {key!r}")
                per_stage.append((lineno, idx, *_stage_value(sub, value)))
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    # stage-specific keys win over global ones regardless of line order
    for lineno, idx, name, v in per_stage:
        try:
            stages[idx] = _apply(stages[idx], name, v)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    if "base_channels" in model_kw and "inner_channels" not in model_kw:
        model_kw["inner_channels"] = 2 * model_kw["base_channels"]
    try:
        model = SvanConfig(**model_kw)
    except ValueError as exc:
        raise ConfigError(f"invalid model config: {exc}") from None
    return TrainConfig(model=model, stages=stages[:n_stages], **cfg_kw)


def load_config(path) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)
