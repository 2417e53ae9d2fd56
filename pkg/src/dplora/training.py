"""Training loops for the three modes (full fine-tune, adapters, DP adapters).

Gradients are always computed per sample on pad-trimmed sequences through
the fused kernels (tape fallback for layouts the kernels do not cover), then
reduced by ``privacy.sgd_step`` or ``privacy.dp_step``. The RNG tree is
hierarchical -- run seed -> purpose tag -> step -> draw -- so scheduling can
never change a noise or sampling stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import model as M
from . import tensor as tz
from .corpus import (CLS_ID, MASK_ID, ReportRecord, SplitManifest, Vocabulary,
                     encode_records)
from .errors import ConfigurationError
from .metrics import MetricsReport, evaluate_logits
from .privacy import (DPStepReport, PrivacySpec, calibrate, dp_step,
                      poisson_sample, sgd_step)

MODES = ("full-ft", "lora", "dp-lora")

_TAG_ADAPTER = 2
_TAG_STEP_SAMPLE = 3
_TAG_STEP_NOISE = 4
_TAG_MLM = 5

_NO_MLM = np.zeros(0, dtype=np.int64)


def rng_from(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(tuple(key))))


class ParamView:
    """Flat-vector view over the trainable tensors, in canonical order.

    Per-group update scaling: the classification head and the low-rank
    factors see much smaller gradient magnitudes than backbone weights (the
    factors start near zero, so their early gradients carry an extra small
    factor), and a single global rate would leave them far from converged.
    """

    def __init__(self, params: M.ModelParams, head_lr_scale: float = 1.0,
                 adapter_lr_scale: float = 1.0):
        self.entries = params.trainable_entries()
        self.names = [name for name, _ in self.entries]
        self.sizes = [t.data.size for _, t in self.entries]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.total = int(self.offsets[-1])

        def scale_for(name: str) -> float:
            if name.startswith("head."):
                return head_lr_scale
            if ".lora_" in name:
                return adapter_lr_scale
            return 1.0

        self.scales = [scale_for(name) for name in self.names]

    def flatten_named(self, named: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([named[name].ravel() for name in self.names])

    def snapshot(self) -> np.ndarray:
        return np.concatenate([t.data.ravel().copy() for _, t in self.entries])

    def apply_update(self, delta: np.ndarray) -> None:
        for (name, t), start, size, s in zip(self.entries, self.offsets,
                                             self.sizes, self.scales):
            del name
            step = delta[start:start + size].reshape(t.data.shape)
            if s != 1.0:
                step = step * s
            np.add(t.data, step, out=t.data)


def _lora_named_grads(params: M.ModelParams, out: tuple) -> dict[str, np.ndarray]:
    (_, _, da_q, db_q, da_k, db_k, da_v, db_v, da_o, db_o, dwc, dbc) = out
    by_kind = {"wq": (da_q, db_q), "wk": (da_k, db_k),
               "wv": (da_v, db_v), "wo": (da_o, db_o)}
    named: dict[str, np.ndarray] = {}
    for i in range(params.config.n_layers):
        for kind, (da, db) in by_kind.items():
            named[f"layer{i}.{kind}.lora_a"] = da[i]
            named[f"layer{i}.{kind}.lora_b"] = db[i]
    named["head.w"] = dwc
    named["head.b"] = dbc
    return named


def _base_named_grads(params: M.ModelParams, ids_row: np.ndarray,
                      out: tuple) -> dict[str, np.ndarray]:
    (_, _, dx0, dwq, dwk, dwv, dwo, dw1, dw2, dwc, dbc, demb_tied) = out
    demb = np.asarray(demb_tied).copy()  # dense tied-completion-head term
    np.add.at(demb, ids_row, dx0)
    named: dict[str, np.ndarray] = {"emb": demb}
    stacks = {"wq": dwq, "wk": dwk, "wv": dwv, "wo": dwo, "w1": dw1, "w2": dw2}
    for i in range(params.config.n_layers):
        for kind, stack in stacks.items():
            named[f"layer{i}.{kind}"] = stack[i]
    named["head.w"] = dwc
    named["head.b"] = dbc
    return named


class GradFn:
    """Per-sample flat gradients over the trainable set.

    Uses the fused kernels when the layout allows, otherwise replays the
    traced model per sample (slow path; dropout or non-uniform adapters).
    """

    def __init__(self, params: M.ModelParams, view: ParamView):
        self.params = params
        self.view = view
        self.use_kernel = M._kernel_eligible(params)
        self.is_lora = bool(params.adapters)

    def __call__(self, ids_rows: np.ndarray, target_rows: np.ndarray,
                 dropout_rng: np.random.Generator | None = None,
                 mlm: "MlmBatch | None" = None
                 ) -> tuple[list[np.ndarray], float]:
        if self.use_kernel:
            return self._kernel_grads(ids_rows, target_rows, mlm)
        return self._tape_grads(ids_rows, target_rows, dropout_rng, mlm)

    def _kernel_grads(self, ids_rows, target_rows, mlm=None):
        params = self.params
        packed = M.PackedModel(params)
        cfg = params.config
        flats: list[np.ndarray] = []
        losses = 0.0
        for i in range(ids_rows.shape[0]):
            row = M.trim_pad(np.asarray(ids_rows[i], dtype=np.int64))
            y = np.ascontiguousarray(target_rows[i], dtype=np.float64)
            pos, tgt, lam = (_NO_MLM, _NO_MLM, 0.0) if mlm is None else mlm.sample(i)
            if self.is_lora:
                out = kernels.loss_grads_lora(
                    row, y, packed.emb, packed.pos, packed.wq, packed.wk,
                    packed.wv, packed.wo, packed.w1, packed.w2, packed.wc,
                    packed.bc, packed.a_q, packed.b_q, packed.a_k, packed.b_k,
                    packed.a_v, packed.b_v, packed.a_o, packed.b_o,
                    packed.scale, cfg.n_heads, cfg.layer_norm_eps,
                    pos, tgt, lam)
                named = _lora_named_grads(params, out)
            else:
                out = kernels.loss_grads_base(
                    row, y, packed.emb, packed.pos, packed.wq, packed.wk,
                    packed.wv, packed.wo, packed.w1, packed.w2, packed.wc,
                    packed.bc, cfg.n_heads, cfg.layer_norm_eps, pos, tgt, lam)
                named = _base_named_grads(params, row, out)
            losses += float(out[0])
            flats.append(self.view.flatten_named(named))
        return flats, losses / ids_rows.shape[0]

    def _tape_grads(self, ids_rows, target_rows, dropout_rng, mlm=None):
        params = self.params
        tensors = dict(params.trainable_entries())
        flats: list[np.ndarray] = []
        losses = 0.0
        for i in range(ids_rows.shape[0]):
            row = M.trim_pad(np.asarray(ids_rows[i], dtype=np.int64))
            pos, tgt, lam = (_NO_MLM, _NO_MLM, 0.0) if mlm is None else mlm.sample(i)
            loss = M.traced_sample_loss(params, row, target_rows[i], dropout_rng,
                                        mlm_pos=pos, mlm_targets=tgt,
                                        mlm_weight=lam)
            losses += float(loss.data)
            for t in tensors.values():
                t.zero_grad()
            gmap = tz.backward(loss)
            named = {}
            for name, t in tensors.items():
                named[name] = gmap.get(t.tid, np.zeros_like(t.data))
            flats.append(self.view.flatten_named(named))
        return flats, losses / ids_rows.shape[0]


class MlmBatch:
    """Per-sample masked-completion positions/targets for one batch."""

    def __init__(self, positions: list[np.ndarray], targets: list[np.ndarray],
                 weight: float):
        self.positions = positions
        self.targets = targets
        self.weight = weight

    def sample(self, i: int):
        return self.positions[i], self.targets[i], self.weight


def mask_for_completion_training(row: np.ndarray, fraction: float,
                                 rng: np.random.Generator
                                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mask a random subset of content tokens; returns (masked, pos, targets)."""
    content = np.nonzero(row > CLS_ID)[0]
    if content.size == 0:
        return row, _NO_MLM, _NO_MLM
    k = max(1, int(np.ceil(fraction * content.size)))
    pos = np.sort(rng.choice(content, size=k, replace=False)).astype(np.int64)
    targets = row[pos].astype(np.int64)
    masked = row.copy()
    masked[pos] = MASK_ID
    return masked, pos, targets


@dataclass
class TrainSettings:
    mode: str = "dp-lora"
    rank: int = 4
    lora_scale: float = 1.0
    include_ffn_adapters: bool = False
    epsilon: float | None = None
    clip_norm: float = 1.0
    expected_batch: float = 64.0
    epochs: int = 10
    learning_rate: float = 1.0
    head_lr_scale: float = 25.0
    adapter_lr_scale: float = 5.0
    mlm_weight: float = 0.0
    mlm_fraction: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "dp-lora" and (self.epsilon is None or self.epsilon <= 0):
            raise ConfigurationError("dp-lora requires epsilon > 0")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")


@dataclass
class TrainOutcome:
    params: M.ModelParams
    steps: list[DPStepReport] = field(default_factory=list)
    spec: PrivacySpec | None = None
    steps_taken: int = 0


def build_model(settings: TrainSettings, config: M.ModelConfig) -> M.ModelParams:
    settings.validate()
    params = M.init_params(config, settings.seed)
    if settings.mode in ("lora", "dp-lora"):
        targets = M.default_lora_targets(config, settings.include_ffn_adapters)
        M.attach_lora(params, targets, settings.rank, settings.lora_scale,
                      seed=_mix(settings.seed, _TAG_ADAPTER))
    return params


def _mix(seed: int, tag: int) -> int:
    return (seed << 4) ^ tag


def train_run(settings: TrainSettings, config: M.ModelConfig,
              ids_matrix: np.ndarray, targets: np.ndarray,
              step_log=None) -> TrainOutcome:
    """Train one model from scratch on the given encoded split."""
    settings.validate()
    params = build_model(settings, config)
    n = ids_matrix.shape[0]
    if settings.epochs == 0:
        return TrainOutcome(params=params)

    q = min(1.0, settings.expected_batch / n)
    steps_per_epoch = max(1, round(1.0 / q))
    total_steps = settings.epochs * steps_per_epoch

    spec: PrivacySpec | None = None
    if settings.mode == "dp-lora":
        spec = calibrate(settings.epsilon, n, settings.clip_norm, q, total_steps)

    view = ParamView(params, settings.head_lr_scale, settings.adapter_lr_scale)
    grad_fn = GradFn(params, view)
    dropout_rng = (rng_from(settings.seed, 0xD0) if config.dropout_rate > 0 else None)

    reports: list[DPStepReport] = []
    for step in range(total_steps):
        idx = poisson_sample(n, q, rng_from(settings.seed, _TAG_STEP_SAMPLE, step))
        if idx.size == 0:
            if spec is not None:
                from .privacy import skipped_step_report
                report = skipped_step_report(step, spec)
            else:
                report = DPStepReport(step=step, realized_batch=0,
                                      preclip_norm_min=0.0, preclip_norm_mean=0.0,
                                      preclip_norm_max=0.0, fraction_clipped=0.0,
                                      noise_std=0.0, skipped=True)
        else:
            rows = ids_matrix[idx]
            mlm = None
            if settings.mlm_weight != 0.0:
                # masks are keyed by dataset index so (seed, data) fully
                # determine the stream regardless of batch composition
                masked_rows = np.array(rows)
                positions, mlm_targets = [], []
                for j, ds_idx in enumerate(idx):
                    r = rng_from(settings.seed, _TAG_MLM, step, int(ds_idx))
                    trimmed = M.trim_pad(rows[j].astype(np.int64))
                    masked, pos, tgt = mask_for_completion_training(
                        trimmed, settings.mlm_fraction, r)
                    masked_rows[j, :masked.size] = masked
                    positions.append(pos)
                    mlm_targets.append(tgt)
                rows = masked_rows
                mlm = MlmBatch(positions, mlm_targets, settings.mlm_weight)
            grads, mean_loss = grad_fn(rows, targets[idx], dropout_rng, mlm)
            if settings.mode == "dp-lora":
                report = dp_step(view, grads, spec,
                                 rng_from(settings.seed, _TAG_STEP_NOISE, step),
                                 settings.learning_rate, step, mean_loss)
            else:
                report = sgd_step(view, grads, settings.learning_rate, step,
                                  mean_loss)
        reports.append(report)
        if step_log is not None:
            step_log.write(report.to_json() + "\n")
    return TrainOutcome(params=params, steps=reports, spec=spec,
                        steps_taken=total_steps)


def evaluate_model(params: M.ModelParams, ids_matrix: np.ndarray,
                   targets: np.ndarray, decision_threshold: float = 0.5,
                   label_names=None) -> MetricsReport:
    packed = M.PackedModel(params)
    logits = M.forward_classify(params, ids_matrix, packed)
    return evaluate_logits(logits, targets, decision_threshold, label_names)


# ---------------------------------------------------------------------------
# split/array plumbing shared by the CLI and the test harness


def split_arrays(records: list[ReportRecord], manifest: SplitManifest,
                 vocab: Vocabulary, max_seq_len: int, split: str
                 ) -> tuple[np.ndarray, np.ndarray, list[str]]:
    by_id = {r.report_id: r for r in records}
    rids = manifest.splits.get(split, [])
    recs = [by_id[rid] for rid in rids]
    if not recs:
        from .errors import DataError
        raise DataError(f"split {split!r} is empty")
    ids, targets = encode_records(vocab, recs, max_seq_len)
    return ids, targets, list(rids)
