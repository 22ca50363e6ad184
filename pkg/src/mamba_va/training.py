"""CCC loss, AdamW with linear warmup, and the epoch loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngs
from .checkpoint import load_model, save_model
from .data import Video, merge_overlapping_predictions, split_segments
from .errors import ConfigError, DegenerateBatchError, NonFiniteGradientError
from .layers import MambaConfig, MambaVA, TcnConfig
from .metrics import EvalReport, evaluate
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,loss,lr,ccc_v,ccc_a,p_va"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 3e-4
    warmup_epochs: int = 5
    weight_decay: float = 1e-3
    dropout: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    clip_norm: float = 1.0  # <= 0 disables clipping
    window: int = 300
    stride: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("lr and weight_decay must be >= 0 and eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must be in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 1 <= self.stride <= self.window:
            raise ConfigError(f"need 1 <= stride <= window, got stride={self.stride}, window={self.window}")


# ---------------------------------------------------------------------------
# loss


def _ccc_and_grad(x: np.ndarray, y: np.ndarray):
    n = x.size
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = dx @ dx / n, dy @ dy / n
    cov = dx @ dy / n
    denom = vx + vy + (mx - my) ** 2
    value = 2 * cov / denom
    grad = 2 * dy / (n * denom) - 2 * cov / denom**2 * (2 * dx + 2 * (mx - my)) / n
    return value, grad


def ccc_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """``1 - (CCC_valence + CCC_arousal) / 2`` over the masked frames.

    ``pred`` and ``target`` are [..., 2]; ``mask`` has the leading shape.
    Returns ``(loss, dloss/dpred)``. Raises :class:`DegenerateBatchError`
    when fewer than two frames are valid or a target column is constant,
    in which case the batch should be skipped.
    """
    if pred.shape != target.shape or pred.shape[-1] != 2:
        raise ValueError(f"pred {pred.shape} and target {target.shape} must both be [..., 2]")
    if mask is None:
        mask = np.ones(pred.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    p = pred.astype(np.float64)[mask]
    t = target.astype(np.float64)[mask]
    if p.shape[0] < 2:
        raise DegenerateBatchError(f"only {p.shape[0]} valid frames in batch")
    grad = np.zeros(pred.shape, dtype=np.float64)
    total = 0.0
    for col in range(2):
        if np.ptp(t[:, col]) == 0:
            raise DegenerateBatchError(f"target column {col} is constant in this batch")
        value, g = _ccc_and_grad(p[:, col], t[:, col])
        total += value
        grad[..., col][mask] = -0.5 * g
    return 1.0 - total / 2.0, grad.astype(pred.dtype)


# ---------------------------------------------------------------------------
# optimizer


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr/warmup to lr over the first epochs, constant afterwards."""
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    return cfg.lr


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2)) for t in params.values())))
    if max_norm > 0 and total > max_norm:
        scale = np.float32(max_norm / (total + 1e-6))
        for t in params.values():
            t.grad *= scale
    return total


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float):
        """One update; weight decay is decoupled from the adaptive step."""
        for name, t in params.items():
            if t.grad is None or not np.isfinite(t.grad).all():
                raise NonFiniteGradientError(name)
        self.step_count += 1
        k = self.step_count
        bc1 = 1 - self.beta1**k
        bc2 = 1 - self.beta2**k
        for name, t in params.items():
            g = t.grad
            m = self.m.setdefault(name, np.zeros_like(t.data))
            v = self.v.setdefault(name, np.zeros_like(t.data))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.weight_decay:
                t.data *= t.data.dtype.type(1 - lr * self.weight_decay)
            t.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(t.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step_count: int):
        self.step_count = step_count
        self.m = {k[len("adam.m.") :]: v.copy() for k, v in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v.") :]: v.copy() for k, v in tensors.items() if k.startswith("adam.v.")}


# ---------------------------------------------------------------------------
# epoch loop


def _train_segments(videos: list[Video], w: int, s: int):
    feats, targets, masks = [], [], []
    for vid in videos:
        fb = split_segments(vid.features.data, w, s)
        lb = split_segments(vid.labels.as_array(), w, s)
        vb = split_segments(vid.labels.valid, w, s)
        feats.append(fb.features)
        targets.append(lb.features)
        masks.append(fb.pad_mask & vb.features)
    return np.concatenate(feats), np.concatenate(targets).astype(np.float32), np.concatenate(masks)


def predict_video(model: MambaVA, features: np.ndarray, w: int, s: int, batch_size: int = 16) -> np.ndarray:
    """Per-frame [n, 2] predictions: window, run the model, average overlaps."""
    seg = split_segments(np.asarray(features, dtype=np.float32), w, s)
    outs = [model.predict(seg.features[i : i + batch_size]) for i in range(0, len(seg), batch_size)]
    return merge_overlapping_predictions(np.concatenate(outs), seg.ranges, features.shape[0])


def validate(model: MambaVA, videos: list[Video], w: int, s: int) -> EvalReport:
    preds = [predict_video(model, v.features.data, w, s) for v in videos]
    return evaluate(preds, [v.labels for v in videos])


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class FitResult:
    model: MambaVA
    best_model: MambaVA
    best_epoch: int
    best_report: EvalReport | None
    log_rows: list[str]
    optimizer: AdamW

    def log_csv(self) -> str:
        return "\n".join([LOG_HEADER] + self.log_rows) + "\n"


def _save_state(path, model, opt, epoch, best_epoch, best_pva, best_model, log_rows, cfg):
    extra = {
        "train.epochs_done": epoch + 1,
        "train.best_epoch": best_epoch,
        "train.best_p_va": repr(best_pva),
        "train.seed": cfg.seed,
        "optim.step": opt.step_count,
        "train.log": ";".join(log_rows),
        "data.window": cfg.window,
        "data.stride": cfg.stride,
    }
    tensors = opt.state_tensors()
    tensors.update({f"best.{k}": t.data for k, t in best_model.params.items()})
    save_model(path, model, extra, tensors)


def fit(
    train_videos: list[Video],
    val_videos: list[Video],
    tcn: TcnConfig,
    mamba: MambaConfig,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    stop_after: int | None = None,
    meta=None,
) -> FitResult:
    """Train with CCC loss and AdamW, keeping the checkpoint with the best validation P_VA.

    Randomness comes from named streams of ``cfg.seed``: ``init`` for the
    weights, ``shuffle`` per epoch, ``dropout`` per (epoch, batch). When
    ``out_dir`` is set, ``state.ckpt`` (resumable), ``best.ckpt`` and
    ``train_log.csv`` are written there after every epoch. ``resume``
    points at a ``state.ckpt`` to continue from; ``stop_after`` ends the
    run early after that many total epochs. ``meta`` adds config entries
    to ``best.ckpt``.
    """
    if not train_videos:
        raise ConfigError("training set is empty")
    if not val_videos:
        raise ConfigError("validation set is empty")
    if tcn.in_dim != train_videos[0].features.dim:
        raise ConfigError(f"model in_dim {tcn.in_dim} != feature width {train_videos[0].features.dim}")
    x_all, y_all, m_all = _train_segments(train_videos, cfg.window, cfg.stride)

    opt = AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    start_epoch, best_epoch, best_pva, log_rows = 0, -1, -np.inf, []
    if resume is not None:
        model, state, extras = load_model(resume)
        opt.load_state_tensors(extras, int(state["optim.step"]))
        start_epoch = int(state["train.epochs_done"])
        best_epoch = int(state["train.best_epoch"])
        best_pva = float(state["train.best_p_va"])
        log_rows = [r for r in state["train.log"].split(";") if r]
        best_params = {k[len("best.") :]: Tensor(v.copy()) for k, v in extras.items() if k.startswith("best.")}
        best_model = MambaVA(model.tcn, model.mamba, best_params)
    else:
        model = MambaVA.create(tcn, mamba, rngs.stream(cfg.seed, "init"))
        best_model = MambaVA(tcn, mamba, {k: t.copy() for k, t in model.params.items()})

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    best_report = None
    for epoch in range(start_epoch, last):
        lr = lr_schedule(epoch, cfg)
        order = rngs.stream(cfg.seed, "shuffle", epoch).permutation(len(x_all))
        losses = []
        for b, at in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[at : at + cfg.batch_size]
            drop = rngs.stream(cfg.seed, "dropout", epoch, b)
            pred, cache = model.forward(x_all[idx], training=True, rng=drop, dropout=cfg.dropout)
            try:
                loss, dpred = ccc_loss(pred, y_all[idx], m_all[idx])
            except DegenerateBatchError as exc:
                log.debug("epoch %d batch %d skipped: %s", epoch, b, exc)
                continue
            model.zero_grad()
            model.backward(dpred, cache)
            clip_grad_norm(model.params, cfg.clip_norm)
            opt.step(model.params, lr)
            losses.append(loss)
        report = validate(model, val_videos, cfg.window, cfg.stride)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        log_rows.append(",".join([str(epoch), _fmt(mean_loss), _fmt(lr), _fmt(report.ccc_v), _fmt(report.ccc_a), _fmt(report.p_va)]))
        log.info("epoch %d loss %.4f lr %.2e ccc_v %.4f ccc_a %.4f p_va %.4f",
                 epoch, mean_loss, lr, report.ccc_v, report.ccc_a, report.p_va)
        if report.p_va > best_pva:
            best_pva, best_epoch, best_report = report.p_va, epoch, report
            best_model = MambaVA(model.tcn, model.mamba, {k: t.copy() for k, t in model.params.items()})
            if out is not None:
                info = {"train.epoch": epoch, "train.p_va": repr(report.p_va), "data.window": cfg.window, "data.stride": cfg.stride}
                save_model(out / "best.ckpt", best_model, {**info, **(meta or {})})
        if out is not None:
            _save_state(out / "state.ckpt", model, opt, epoch, best_epoch, best_pva, best_model, log_rows, cfg)
            (out / "train_log.csv").write_text("\n".join([LOG_HEADER] + log_rows) + "\n", encoding="utf-8")

    if best_report is None and best_epoch >= 0:
        best_report = validate(best_model, val_videos, cfg.window, cfg.stride)
    return FitResult(model, best_model, best_epoch, best_report, log_rows, opt)
