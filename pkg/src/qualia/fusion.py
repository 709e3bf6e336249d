"""Feature fusion, score regression and training.

The combined objective is alpha * monotonicity loss (pairwise hinge on
order margins) + beta * linearity loss ((1 - Pearson) / 2 over a batch).
Training is AdamW with two parameter groups: the spatial backbone at its
own rate, everything else at the base rate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import TrainingError, ValidationError
from .metrics import srocc
from .semantic import TemporalHead, init_linear, resample_time
from .spatial import ConvHead, backbone_features, build_backbone, flatten_features


def fuse(f_s: torch.Tensor | np.ndarray, f_f: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Concatenate semantic then spatial features; either side may be empty."""
    a = torch.as_tensor(f_s)
    b = torch.as_tensor(f_f)
    if a.numel() == 0:
        return b.clone()
    if b.numel() == 0:
        return a.clone()
    return torch.cat([a, b.to(a.dtype)], dim=-1)


class RegressionHead(nn.Module):
    """Two fully connected layers to a scalar score, GELU between."""

    def __init__(self, in_dim: int, hidden: int = 64, seed: int = 0):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        self.act = nn.GELU()
        init_linear(self.fc1, seed, 3)
        init_linear(self.fc2, seed, 4)

    def forward(self, f_v: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(f_v))).squeeze(-1)


def regress(f_v: torch.Tensor, head: RegressionHead) -> torch.Tensor:
    if f_v.shape[-1] != head.fc1.in_features:
        raise ValidationError(
            f"feature length {f_v.shape[-1]} does not match head input {head.fc1.in_features}")
    return head(f_v)


def _as_pair(pred, gt) -> tuple[torch.Tensor, torch.Tensor]:
    p = torch.as_tensor(pred)
    g = torch.as_tensor(gt)
    if not p.is_floating_point():
        p = p.double()
    if not g.is_floating_point():
        g = g.double()
    if p.shape != g.shape or p.dim() != 1:
        raise ValidationError(f"prediction/target shapes differ: {tuple(p.shape)} vs {tuple(g.shape)}")
    return p, g.to(p.dtype)


def monotonicity_loss(pred, gt) -> torch.Tensor:
    """Mean over all ordered pairs of max(0, |gt gap| - sign * pred margin)."""
    p, g = _as_pair(pred, gt)
    m = p.shape[0]
    if m < 1:
        raise ValidationError("monotonicity loss needs at least one sample")
    g_diff = g.unsqueeze(1) - g.unsqueeze(0)
    p_diff = p.unsqueeze(1) - p.unsqueeze(0)
    sign = torch.where(g_diff >= 0, 1.0, -1.0).to(p.dtype)
    hinge = torch.clamp_min(g_diff.abs() - sign * p_diff, 0.0)
    return hinge.sum() / (m * m)


def linearity_loss(pred, gt) -> torch.Tensor:
    """(1 - Pearson correlation) / 2; 0.5 with a warning when degenerate."""
    p, g = _as_pair(pred, gt)
    if p.shape[0] < 2:
        raise ValidationError("linearity loss needs at least two samples")
    pc = p - p.mean()
    gc = g - g.mean()
    denom_sq = (pc.square().sum()) * (gc.square().sum())
    if denom_sq.item() == 0.0:
        warnings.warn("linearity loss: zero-variance input, correlation undefined; using 0.5",
                      stacklevel=2)
        return torch.tensor(0.5, dtype=p.dtype)
    corr = (pc * gc).sum() / denom_sq.sqrt()
    return (1.0 - corr) / 2.0


def total_loss(pred, gt, alpha: float, beta: float) -> torch.Tensor:
    if alpha < 0 or beta < 0 or alpha + beta <= 0:
        raise ValidationError("loss weights must be >= 0 and not both zero")
    p, _ = _as_pair(pred, gt)
    out = torch.zeros((), dtype=p.dtype)
    if alpha:
        out = out + alpha * monotonicity_loss(pred, gt)
    if beta:
        out = out + beta * linearity_loss(pred, gt)
    return out


class QualityModel(nn.Module):
    """Semantic head + spatial branch + fusion + regression head."""

    def __init__(self, r: int, t_fix: int = 32, temporal_hidden: int = 64,
                 head_hidden: int = 64, use_semantic: bool = True, use_spatial: bool = True,
                 backbone_kind: str = "tiny", backbone_weights: str = "",
                 spatial_frames: int = 16, seed: int = 0):
        super().__init__()
        if not use_semantic and not use_spatial:
            raise ValidationError("at least one branch must be enabled")
        self.r = r
        self.use_semantic = use_semantic
        self.use_spatial = use_spatial
        self.spatial_frames = spatial_frames
        self.temporal = TemporalHead(t_fix=t_fix, hidden=temporal_hidden, seed=seed) \
            if use_semantic else None
        if use_spatial:
            self.backbone = build_backbone(backbone_kind, seed=seed,
                                           weights_path=backbone_weights,
                                           frames_in=spatial_frames)
            self.conv_head = ConvHead(self.backbone.out_channels, seed=seed)
            self.spatial_len = self.backbone.t_out(spatial_frames) * 7 * 7
        else:
            self.backbone = None
            self.conv_head = None
            self.spatial_len = 0
        in_dim = (2 * r if use_semantic else 0) + self.spatial_len
        self.regressor = RegressionHead(in_dim, hidden=head_hidden, seed=seed)

    def backbone_parameters(self) -> list[nn.Parameter]:
        if self.backbone is None:
            return []
        return [p for p in self.backbone.parameters() if p.requires_grad]

    def head_parameters(self) -> list[nn.Parameter]:
        backbone = set(map(id, self.backbone_parameters()))
        return [p for p in self.parameters() if p.requires_grad and id(p) not in backbone]

    def forward(self, m_s: torch.Tensor | None, clip: torch.Tensor | None) -> torch.Tensor:
        parts = []
        if self.use_semantic:
            if m_s is None:
                raise ValidationError("model expects a semantic map input")
            parts.append(self.temporal(m_s))
        if self.use_spatial:
            if clip is None:
                raise ValidationError("model expects a fragment clip input")
            # [B, F, H, W, 3] -> [B, 3, F, H, W]
            x = clip.permute(0, 4, 1, 2, 3).contiguous()
            m_f = backbone_features(x, self.backbone)
            m_final = self.conv_head(m_f)
            parts.append(flatten_features(m_final))
        f_v = parts[0] if len(parts) == 1 else torch.cat(parts, dim=-1)
        return self.regressor(f_v)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lr_backbone: float = 0.000075
    lr_other: float = 0.00075
    batch: int = 12
    epochs: int = 30
    seed: int = 0
    weight_decay: float = 0.05

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValidationError("alpha and beta must be >= 0 with a positive sum")
        if self.lr_backbone < 0 or self.lr_other < 0:
            raise ValidationError("learning rates must be >= 0")
        if self.batch < 1 or self.epochs < 0:
            raise ValidationError("batch must be >= 1 and epochs >= 0")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")


@dataclass
class TrainSample:
    video_id: str
    mos: float
    semantic: np.ndarray | None = None   # [2r, T] float32
    clip: np.ndarray | None = None       # [F, side, side, 3] float32


@dataclass
class EpochStats:
    epoch: int
    total: float
    mon: float
    lin: float
    train_srocc: float


@dataclass
class TrainResult:
    model: QualityModel
    log: list[EpochStats] = field(default_factory=list)
    mos_min: float = 0.0
    mos_max: float = 1.0

    def to_mos(self, normalized: np.ndarray) -> np.ndarray:
        return normalized * (self.mos_max - self.mos_min) + self.mos_min


def _collate(model: QualityModel, samples: Sequence[TrainSample]) -> tuple:
    ms = None
    clips = None
    if model.use_semantic:
        cols = []
        for s in samples:
            if s.semantic is None:
                raise ValidationError(f"{s.video_id}: missing semantic features")
            t = torch.as_tensor(s.semantic, dtype=torch.float32)
            cols.append(resample_time(t, model.temporal.t_fix))
        ms = torch.stack(cols, dim=0)
    if model.use_spatial:
        arrs = []
        for s in samples:
            if s.clip is None:
                raise ValidationError(f"{s.video_id}: missing fragment clip")
            arrs.append(torch.as_tensor(s.clip, dtype=torch.float32))
        clips = torch.stack(arrs, dim=0)
    return ms, clips


def predict_scores(model: QualityModel, samples: Sequence[TrainSample],
                   batch: int = 12) -> np.ndarray:
    model.eval()
    preds = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch):
            ms, clips = _collate(model, samples[lo:lo + batch])
            preds.append(model(ms, clips).numpy())
    return np.concatenate(preds, axis=0).astype(np.float64)


def _batches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[lo:lo + batch] for lo in range(0, n, batch)]
    # the linearity term needs >= 2 samples; fold a trailing singleton in
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def fit(dataset: Sequence[TrainSample], model: QualityModel,
        config: TrainConfig) -> TrainResult:
    """Train in place; deterministic for a fixed seed.

    MOS labels are min-max normalized to [0, 1] over the training set;
    the inverse map is returned so scores can be reported in MOS units.
    """
    if not dataset:
        raise ValidationError("training dataset is empty")
    if config.beta > 0 and config.batch < 2:
        raise ValidationError("batch must be >= 2 when the linearity weight is nonzero")
    mos = np.array([s.mos for s in dataset], dtype=np.float64)
    mos_min, mos_max = float(mos.min()), float(mos.max())
    if mos_max <= mos_min:
        raise ValidationError("training MOS labels are constant; nothing to rank")
    targets = (mos - mos_min) / (mos_max - mos_min)

    groups = []
    backbone_params = model.backbone_parameters()
    if backbone_params:
        groups.append({"params": backbone_params, "lr": config.lr_backbone})
    groups.append({"params": model.head_parameters(), "lr": config.lr_other})
    optimizer = torch.optim.AdamW(groups, lr=config.lr_other,
                                  weight_decay=config.weight_decay)

    result = TrainResult(model=model, mos_min=mos_min, mos_max=mos_max)
    n = len(dataset)
    for epoch in range(config.epochs):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([config.seed & 0x7FFFFFFF, epoch])))
        model.train()
        tot_sum = mon_sum = lin_sum = 0.0
        seen = 0
        for batch_idx in _batches(n, config.batch, rng):
            samples = [dataset[i] for i in batch_idx]
            ms, clips = _collate(model, samples)
            gt = torch.as_tensor(targets[batch_idx], dtype=torch.float32)
            pred = model(ms, clips)
            mon = monotonicity_loss(pred, gt) if config.alpha else torch.zeros((), dtype=pred.dtype)
            lin = linearity_loss(pred, gt) if config.beta else torch.zeros((), dtype=pred.dtype)
            loss = config.alpha * mon + config.beta * lin
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting with "
                    f"{dataset[int(batch_idx[0])].video_id!r}: total={loss.item()!r}, "
                    f"mon={mon.item()!r}, lin={lin.item()!r}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            k = len(batch_idx)
            tot_sum += float(loss.item()) * k
            mon_sum += float(mon.item()) * k
            lin_sum += float(lin.item()) * k
            seen += k
        preds = predict_scores(model, dataset, batch=config.batch)
        try:
            train_corr = srocc(preds, targets)
        except ValidationError:
            train_corr = math.nan
        result.log.append(EpochStats(epoch=epoch, total=tot_sum / seen, mon=mon_sum / seen,
                                     lin=lin_sum / seen, train_srocc=train_corr))
    return result
