"""DP-SGD mechanism: per-sample clipping, Gaussian noise on the clipped sum,
Poisson subsampling, and privacy-parameter bookkeeping.

Calibration follows the literal published rule sigma = 1.25 * (1/epsilon)
with delta = 1/n^2; no moments/Renyi accountant is implemented, and
``privacy_report`` prints configuration only (it never claims a composed
multi-step epsilon).

The mechanism functions work on flat gradient vectors so they stay
model-agnostic; ``training.py`` supplies the flattening.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ContractError, NumericError

SIGMA_FACTOR = 1.25  # published calibration constant, used as-is


@dataclass(frozen=True)
class PrivacySpec:
    """Single source of truth for the DP contract of one run."""

    epsilon: float
    delta: float
    clip_norm: float
    noise_multiplier: float
    sampling_rate: float
    max_steps: int
    train_size: int

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ContractError(f"delta must be in (0,1), got {self.delta}")
        if self.clip_norm <= 0:
            raise ContractError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ContractError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if self.noise_multiplier > 0 and not math.isfinite(self.clip_norm):
            raise ContractError("finite clip_norm required when noise is on")
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ContractError(f"sampling_rate must be in (0,1], got {self.sampling_rate}")
        if self.max_steps < 0:
            raise ContractError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.train_size < 2:
            raise ContractError(f"train_size must be >= 2, got {self.train_size}")

    @property
    def noise_std(self) -> float:
        """Per-step Gaussian std on the clipped sum (sigma * C)."""
        if self.noise_multiplier == 0.0:
            return 0.0
        return self.noise_multiplier * self.clip_norm

    @property
    def expected_batch(self) -> float:
        return self.sampling_rate * self.train_size

    def to_dict(self) -> dict:
        return asdict(self)


def calibrate(epsilon: float, train_size: int, clip_norm: float = 1.0,
              sampling_rate: float = 0.05, max_steps: int = 1) -> PrivacySpec:
    """Paper-literal calibration: sigma = 1.25/epsilon, delta = 1/n^2."""
    if epsilon <= 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    if train_size < 2:
        raise ContractError(f"train_size must be >= 2, got {train_size}")
    return PrivacySpec(
        epsilon=float(epsilon),
        delta=1.0 / (train_size * train_size),
        clip_norm=float(clip_norm),
        noise_multiplier=SIGMA_FACTOR * (1.0 / float(epsilon)),
        sampling_rate=float(sampling_rate),
        max_steps=int(max_steps),
        train_size=int(train_size),
    )


def clip_gradient(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """g / max(1, ||g||_2 / C); returns g itself when no scaling is needed."""
    if clip_norm <= 0:
        raise ContractError(f"clip_norm must be positive, got {clip_norm}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite entries in gradient")
    norm = float(np.linalg.norm(g))
    if norm > clip_norm:
        return g * (clip_norm / norm)
    return g


def add_noise(clipped_sum: np.ndarray, realized_batch: int, spec: PrivacySpec,
              rng: np.random.Generator) -> np.ndarray:
    """(sum + N(0, sigma^2 C^2 I)) / B; one draw per step.

    sigma == 0 adds nothing at all, so the zero-noise mode reduces to the
    plain averaged gradient bit-for-bit.
    """
    if realized_batch < 1:
        raise ContractError(f"realized batch must be >= 1, got {realized_batch}")
    if spec.noise_multiplier == 0.0:
        return clipped_sum / realized_batch
    noise = rng.normal(0.0, spec.noise_std, size=clipped_sum.shape)
    return (clipped_sum + noise) / realized_batch


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Each index included independently with probability q (ascending order)."""
    if not 0.0 < q <= 1.0:
        raise ContractError(f"sampling rate must be in (0,1], got {q}")
    return np.nonzero(rng.random(n) < q)[0]


@dataclass
class DPStepReport:
    """Per-step audit record, appended to a line-delimited JSON log."""

    step: int
    realized_batch: int
    preclip_norm_min: float
    preclip_norm_mean: float
    preclip_norm_max: float
    fraction_clipped: float
    noise_std: float
    skipped: bool = False
    mean_loss: float = float("nan")

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "DPStepReport":
        return cls(**json.loads(line))


def noisy_mean_gradient(per_sample_grads: list[np.ndarray], spec: PrivacySpec,
                        rng: np.random.Generator, step: int = 0,
                        mean_loss: float = float("nan")) -> tuple[np.ndarray, DPStepReport]:
    """Core mechanism: clip each sample, sum, add one noise draw, average."""
    if len(per_sample_grads) == 0:
        raise ContractError("empty batch reached the mechanism; skip upstream")
    norms = np.empty(len(per_sample_grads))
    clipped = []
    for i, g in enumerate(per_sample_grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in sample {i} at step {step}")
        norms[i] = np.linalg.norm(g)
        clipped.append(clip_gradient(g, spec.clip_norm))
    total = np.stack(clipped).sum(axis=0)
    b = len(clipped)
    g_out = add_noise(total, b, spec, rng)
    report = DPStepReport(
        step=step,
        realized_batch=b,
        preclip_norm_min=float(norms.min()),
        preclip_norm_mean=float(norms.mean()),
        preclip_norm_max=float(norms.max()),
        fraction_clipped=float(np.mean(norms > spec.clip_norm)),
        noise_std=spec.noise_std,
        mean_loss=mean_loss,
    )
    return g_out, report


def skipped_step_report(step: int, spec: PrivacySpec) -> DPStepReport:
    return DPStepReport(step=step, realized_batch=0, preclip_norm_min=0.0,
                        preclip_norm_mean=0.0, preclip_norm_max=0.0,
                        fraction_clipped=0.0, noise_std=spec.noise_std,
                        skipped=True)


def dp_step(view, batch_grads: list[np.ndarray], spec: PrivacySpec,
            rng: np.random.Generator, learning_rate: float,
            step: int = 0, mean_loss: float = float("nan")) -> DPStepReport:
    """One DP-SGD update of the trainable parameters behind ``view``.

    ``view`` exposes ``apply_update(flat_delta)`` (see training.ParamView);
    ``batch_grads`` are per-sample flat gradients over exactly the trainable
    set. An empty batch is a logged no-op.
    """
    if len(batch_grads) == 0:
        return skipped_step_report(step, spec)
    g_out, report = noisy_mean_gradient(batch_grads, spec, rng, step, mean_loss)
    view.apply_update(-learning_rate * g_out)
    return report


def sgd_step(view, batch_grads: list[np.ndarray], learning_rate: float,
             step: int = 0, mean_loss: float = float("nan")) -> DPStepReport:
    """Vanilla baseline: mean of per-sample gradients, no clipping, no noise."""
    if len(batch_grads) == 0:
        return DPStepReport(step=step, realized_batch=0, preclip_norm_min=0.0,
                            preclip_norm_mean=0.0, preclip_norm_max=0.0,
                            fraction_clipped=0.0, noise_std=0.0, skipped=True)
    g_mean = np.stack(batch_grads).sum(axis=0) / len(batch_grads)
    view.apply_update(-learning_rate * g_mean)
    norms = np.array([np.linalg.norm(g) for g in batch_grads])
    return DPStepReport(step=step, realized_batch=len(batch_grads),
                        preclip_norm_min=float(norms.min()),
                        preclip_norm_mean=float(norms.mean()),
                        preclip_norm_max=float(norms.max()),
                        fraction_clipped=0.0, noise_std=0.0,
                        mean_loss=mean_loss)


# ---------------------------------------------------------------------------
# reporting

_REPORT_FIELDS = ("epsilon", "delta", "clip_norm", "noise_multiplier",
                  "sampling_rate", "max_steps", "train_size")

_CALIBRATION_NOTE = (
    "calibration: sigma = 1.25 * (1/epsilon), delta = 1/n^2 (as published); "
    "configuration only -- no multi-step composed epsilon is computed or claimed, "
    "and whether the configured epsilon is per-step or total is left ambiguous "
    "by that rule")


def privacy_report(spec: PrivacySpec, steps_taken: int) -> str:
    """Structured key: value text block; round-trips via parse_privacy_report."""
    if steps_taken < 0:
        raise ContractError(f"steps_taken must be >= 0, got {steps_taken}")
    lines = ["privacy_report v1"]
    for f in _REPORT_FIELDS:
        lines.append(f"{f}: {getattr(spec, f)!r}")
    lines.append(f"noise_std: {spec.noise_std!r}")
    lines.append(f"expected_batch: {spec.expected_batch!r}")
    lines.append(f"steps_taken: {steps_taken!r}")
    lines.append(f"note: {_CALIBRATION_NOTE}")
    return "\n".join(lines) + "\n"


def parse_privacy_report(text: str) -> tuple[PrivacySpec, int]:
    lines = text.strip().split("\n")
    if not lines or lines[0] != "privacy_report v1":
        raise ContractError("not a privacy report")
    kv = {}
    for line in lines[1:]:
        key, _, value = line.partition(": ")
        kv[key] = value
    spec = PrivacySpec(**{f: (int(kv[f]) if f in ("max_steps", "train_size")
                              else float(kv[f])) for f in _REPORT_FIELDS})
    return spec, int(kv["steps_taken"])
