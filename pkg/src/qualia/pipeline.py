"""End-to-end orchestration shared by the service and the CLI client.

Feature caches live under <workdir>/cache, named by video id plus a
signature hash of everything that went into them, so a changed prompt
bank or extraction config produces new cache files instead of silently
reusing stale ones. Checkpoints are directories: one cache-format tensor
per parameter plus a JSON manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig
from .data import (DatasetManifest, ManifestEntry, decode_frames, load_manifest, read_cache,
                   read_cache_meta, uniform_indices, write_cache)
from .encoder import EncoderHandle, build_encoder, encoder_signature
from .errors import CheckpointError, RuntimeFailure, ValidationError
from .fusion import (QualityModel, TrainConfig, TrainResult, TrainSample, fit, predict_scores)
from .metrics import EvalReport, SplitSummary, report_from_scores, run_splits
from .probe import ResponseCurve, prompt_comparison, response_curve
from .prompts import (OBJECTIVE, SUBJECTIVE, PromptBank, build_bank, default_bank, load_bank,
                      render_prompts, subset)
from .semantic import semantic_cache_meta, video_semantic_map
from .spatial import FragmentSpec, fragment_cache_meta, sample_fragments, video_seed

_SAFE_ID = re.compile(r"[^A-Za-z0-9._-]")


def active_bank(cfg: RunConfig) -> PromptBank:
    bank = load_bank(cfg.get("prompts.path")) if cfg.get("prompts.path") else default_bank()
    kinds = {k.strip() for k in cfg.get("prompts.kinds").split(",") if k.strip()}
    if kinds and kinds != {OBJECTIVE, SUBJECTIVE}:
        bank = subset(bank, kinds)
    return bank


def _short_hash(text: str) -> str:
    return hashlib.blake2b(text.encode("utf-8"), digest_size=6).hexdigest()


def _safe_id(video_id: str) -> str:
    return f"{_SAFE_ID.sub('_', video_id)[:48]}-{_short_hash(video_id)}"


def semantic_signature(cfg: RunConfig, bank: PromptBank) -> str:
    m, n = cfg.grid_mn()
    return "|".join([bank.digest, encoder_signature(cfg), f"{m}x{n}",
                     str(cfg.frame_mode()), __version__])


def fragment_signature(cfg: RunConfig) -> str:
    return "|".join([str(cfg.get("spatial.grid_f")), str(cfg.get("spatial.patch")),
                     str(cfg.get("spatial.frames")), str(cfg.get("seed")), __version__])


def cache_dir(cfg: RunConfig) -> Path:
    return Path(cfg.get("paths.workdir")) / "cache"


def semantic_cache_path(cfg: RunConfig, bank: PromptBank, video_id: str) -> Path:
    return cache_dir(cfg) / f"{_safe_id(video_id)}.{_short_hash(semantic_signature(cfg, bank))}.sem.clfc"


def fragment_cache_path(cfg: RunConfig, video_id: str) -> Path:
    return cache_dir(cfg) / f"{_safe_id(video_id)}.{_short_hash(fragment_signature(cfg))}.frag.clfc"


def _fragment_spec(cfg: RunConfig, video_id: str) -> FragmentSpec:
    return FragmentSpec(grid_f=cfg.get("spatial.grid_f"), patch=cfg.get("spatial.patch"),
                        frames_out=cfg.get("spatial.frames"),
                        seed=video_seed(cfg.get("seed"), video_id))


@dataclass
class ExtractOutcome:
    video_id: str
    semantic_path: str | None = None
    fragment_path: str | None = None
    recomputed: bool = False
    error: str | None = None


@dataclass
class ExtractSummary:
    videos: int = 0
    extracted: int = 0
    skipped: int = 0
    failures: list[dict] = field(default_factory=list)
    outcomes: list[ExtractOutcome] = field(default_factory=list)


def _cache_fresh(path: Path, expected_meta: dict) -> bool:
    meta = read_cache_meta(path)
    if meta is None:
        return False
    return all(meta.get(k) == v for k, v in expected_meta.items())


def extract_entry(entry: ManifestEntry, cfg: RunConfig, bank: PromptBank,
                  encoder: EncoderHandle,
                  text_embeddings: np.ndarray | None = None) -> ExtractOutcome:
    """Write (or reuse) the semantic/fragment cache pair for one video."""
    out = ExtractOutcome(video_id=entry.video_id)
    directory = cache_dir(cfg)
    directory.mkdir(parents=True, exist_ok=True)
    need_sem = cfg.get("sfe.enabled")
    need_frag = cfg.get("spatial.enabled")
    decoded = None

    if need_sem:
        sem_path = semantic_cache_path(cfg, bank, entry.video_id)
        meta = semantic_cache_meta(bank, cfg.grid_mn(), cfg.frame_mode(),
                                   encoder_signature(cfg), __version__, entry.path)
        if _cache_fresh(sem_path, meta):
            out.semantic_path = str(sem_path)
        else:
            decoded = decode_frames(entry.path, "all")
            frames = decoded.frames
            mode = cfg.frame_mode()
            if mode != "all" and int(mode) < len(frames):
                frames = frames[uniform_indices(len(frames), int(mode))]
            m_s = video_semantic_map(frames, cfg.grid_mn(), encoder, bank,
                                     template=cfg.get("prompts.template"),
                                     text_embeddings=text_embeddings)
            write_cache(m_s.astype(np.float32), sem_path, meta)
            out.semantic_path = str(sem_path)
            out.recomputed = True

    if need_frag:
        frag_path = fragment_cache_path(cfg, entry.video_id)
        spec = _fragment_spec(cfg, entry.video_id)
        meta = fragment_cache_meta(spec, __version__, entry.path)
        if _cache_fresh(frag_path, meta):
            out.fragment_path = str(frag_path)
        else:
            if decoded is None:
                decoded = decode_frames(entry.path, "all")
            clip = sample_fragments(decoded.frames, spec)
            write_cache(clip, frag_path, meta)
            out.fragment_path = str(frag_path)
            out.recomputed = True
    return out


def extract_manifest(manifest: DatasetManifest, cfg: RunConfig,
                     bank: PromptBank | None = None) -> ExtractSummary:
    bank = active_bank(cfg) if bank is None else bank
    encoder = build_encoder(cfg)
    texts = None
    if cfg.get("sfe.enabled"):
        texts = encoder.embed_texts(render_prompts(bank, cfg.get("prompts.template")))
    summary = ExtractSummary(videos=len(manifest))
    jobs = cfg.get("jobs")

    def work(entry: ManifestEntry) -> ExtractOutcome:
        try:
            return extract_entry(entry, cfg, bank, encoder, text_embeddings=texts)
        except Exception as exc:  # collected per-video, reported in bulk
            return ExtractOutcome(video_id=entry.video_id, error=f"{type(exc).__name__}: {exc}")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, manifest.entries))
    else:
        outcomes = [work(e) for e in manifest.entries]

    for out in outcomes:
        summary.outcomes.append(out)
        if out.error is not None:
            summary.failures.append({"video_id": out.video_id, "error": out.error})
        elif out.recomputed:
            summary.extracted += 1
        else:
            summary.skipped += 1
    return summary


def load_samples(entries, cfg: RunConfig, bank: PromptBank) -> list[TrainSample]:
    """Build training samples from caches; extraction must have run."""
    samples = []
    for entry in entries:
        sample = TrainSample(video_id=entry.video_id, mos=entry.mos)
        if cfg.get("sfe.enabled"):
            cache = read_cache(semantic_cache_path(cfg, bank, entry.video_id),
                               expect_prompt_digest=bank.digest)
            sample.semantic = cache.tensor
        if cfg.get("spatial.enabled"):
            cache = read_cache(fragment_cache_path(cfg, entry.video_id))
            sample.clip = cache.tensor
        samples.append(sample)
    return samples


def build_model(cfg: RunConfig, bank: PromptBank, seed: int | None = None) -> QualityModel:
    return QualityModel(
        r=bank.r,
        t_fix=cfg.get("sfe.t_fix"),
        temporal_hidden=cfg.get("sfe.hidden"),
        head_hidden=cfg.get("train.head_hidden"),
        use_semantic=cfg.get("sfe.enabled"),
        use_spatial=cfg.get("spatial.enabled"),
        backbone_kind=cfg.get("spatial.backbone"),
        backbone_weights=cfg.get("spatial.weights_path"),
        spatial_frames=cfg.get("spatial.frames"),
        seed=cfg.get("seed") if seed is None else seed,
    )


def train_config(cfg: RunConfig, seed: int | None = None, epochs: int | None = None) -> TrainConfig:
    return TrainConfig(
        alpha=cfg.get("train.alpha"),
        beta=cfg.get("train.beta"),
        lr_backbone=cfg.get("train.lr_backbone"),
        lr_other=cfg.get("train.lr_other"),
        batch=cfg.get("train.batch"),
        epochs=cfg.get("train.epochs") if epochs is None else epochs,
        seed=cfg.get("seed") if seed is None else seed,
        weight_decay=cfg.get("train.weight_decay"),
    )


def train_entries(entries, cfg: RunConfig, bank: PromptBank,
                  seed: int | None = None, epochs: int | None = None) -> TrainResult:
    samples = load_samples(entries, cfg, bank)
    model = build_model(cfg, bank, seed=seed)
    return fit(samples, model, train_config(cfg, seed=seed, epochs=epochs))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(result: TrainResult, cfg: RunConfig, bank: PromptBank,
                    path: str | Path) -> str:
    """Write parameters + manifest; returns the checkpoint digest."""
    ckpt = Path(path)
    params_dir = ckpt / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    state = result.model.state_dict()
    names = sorted(state.keys())
    shapes = {}
    for name in names:
        tensor = state[name].detach().cpu().numpy().astype(np.float32)
        if tensor.ndim == 0:
            tensor = tensor.reshape(1)
        shapes[name] = list(tensor.shape)
        write_cache(tensor, params_dir / f"{name}.clfc",
                    {"prompt_digest": bank.digest, "extractor_version": __version__,
                     "param": name})
    # environment-only keys are normalized so the checkpoint bytes do not
    # depend on where or how wide the producing run happened to execute
    stored_cfg = RunConfig(cfg.as_dict())
    stored_cfg.set("paths.workdir", RunConfig().get("paths.workdir"))
    stored_cfg.set("jobs", 1)
    manifest = {
        "format": 1,
        "version": __version__,
        "prompt_digest": bank.digest,
        "bank": [[d.kind, d.text] for d in bank.descriptions],
        "r": bank.r,
        "mos_min": result.mos_min,
        "mos_max": result.mos_max,
        "config": stored_cfg.as_dict(),
        "params": shapes,
    }
    (ckpt / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return checkpoint_digest(ckpt)


def checkpoint_digest(path: str | Path) -> str:
    ckpt = Path(path)
    h = hashlib.sha256()
    h.update((ckpt / "manifest.json").read_bytes())
    for param in sorted((ckpt / "params").glob("*.clfc"), key=lambda p: p.name):
        h.update(param.name.encode("utf-8"))
        h.update(param.read_bytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    model: QualityModel
    cfg: RunConfig
    bank: PromptBank
    mos_min: float
    mos_max: float
    path: Path

    def to_mos(self, normalized: np.ndarray) -> np.ndarray:
        return normalized * (self.mos_max - self.mos_min) + self.mos_min


def load_checkpoint(path: str | Path, active_cfg: RunConfig | None = None) -> Checkpoint:
    """Rebuild the model from a checkpoint directory.

    Extraction settings come from the stored config (overlaid with the
    active workdir/jobs); the active prompt bank must match the stored
    digest exactly, otherwise the checkpoint is refused.
    """
    ckpt = Path(path)
    manifest_path = ckpt / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    stored = RunConfig(manifest["config"])
    if active_cfg is not None:
        for key in ("paths.workdir", "jobs"):
            stored.set(key, active_cfg.get(key))
    stored.validate()
    bank = build_bank([(kind, text) for kind, text in manifest["bank"]])
    if bank.digest != manifest["prompt_digest"]:
        raise CheckpointError("checkpoint is corrupt: stored bank does not match its digest")
    if active_cfg is not None:
        current_bank = active_bank(active_cfg)
        if current_bank.digest != manifest["prompt_digest"]:
            raise CheckpointError(
                "prompt digest mismatch: active config selects a different prompt bank "
                f"than the checkpoint ({current_bank.digest[:12]}.. vs "
                f"{manifest['prompt_digest'][:12]}..)")
    model = build_model(stored, bank)
    state = {}
    for name, shape in manifest["params"].items():
        cache = read_cache(ckpt / "params" / f"{name}.clfc")
        if list(cache.shape) != list(shape):
            raise CheckpointError(f"parameter {name}: shape {cache.shape} != manifest {shape}")
        state[name] = torch.from_numpy(cache.tensor.copy())
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not fit the configured model: {exc}") from None
    model.eval()
    return Checkpoint(model=model, cfg=stored, bank=bank,
                      mos_min=float(manifest["mos_min"]), mos_max=float(manifest["mos_max"]),
                      path=ckpt)


# ------------------------------------------------------------------- commands

def write_train_log(log, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "total", "mon", "lin", "train_srocc"])
        for row in log:
            writer.writerow([row.epoch, f"{row.total:.10g}", f"{row.mon:.10g}",
                             f"{row.lin:.10g}", f"{row.train_srocc:.10g}"])


def run_train(manifest_path: str, cfg: RunConfig) -> dict:
    manifest = load_manifest(manifest_path)
    if not manifest.entries:
        raise ValidationError("manifest has no entries")
    summary = extract_manifest(manifest, cfg)
    if summary.failures:
        raise RuntimeFailure(f"extraction failed for {len(summary.failures)} video(s): "
                             f"{summary.failures[:3]}")
    bank = active_bank(cfg)
    result = train_entries(manifest.entries, cfg, bank)
    workdir = Path(cfg.get("paths.workdir"))
    workdir.mkdir(parents=True, exist_ok=True)
    ckpt_path = workdir / "checkpoint"
    digest = save_checkpoint(result, cfg, bank, ckpt_path)
    log_path = workdir / "train_log.csv"
    write_train_log(result.log, log_path)
    last = result.log[-1] if result.log else None
    return {
        "checkpoint": str(ckpt_path),
        "checkpoint_digest": digest,
        "log_path": str(log_path),
        "epochs": len(result.log),
        "final_total": last.total if last else None,
        "final_train_srocc": last.train_srocc if last else None,
    }


def predictions_for_entries(entries, ckpt: Checkpoint) -> np.ndarray:
    cfg = ckpt.cfg
    summary = extract_manifest(DatasetManifest(entries=tuple(entries)), cfg, bank=ckpt.bank)
    if summary.failures:
        raise RuntimeFailure(f"extraction failed for {len(summary.failures)} video(s): "
                             f"{summary.failures[:3]}")
    samples = load_samples(entries, cfg, ckpt.bank)
    normalized = predict_scores(ckpt.model, samples, batch=cfg.get("train.batch"))
    return ckpt.to_mos(normalized)


def run_eval(manifest_path: str, checkpoint_path: str, cfg: RunConfig) -> dict:
    manifest = load_manifest(manifest_path)
    ckpt = load_checkpoint(checkpoint_path, active_cfg=cfg)
    preds = predictions_for_entries(list(manifest.entries), ckpt)
    gt = np.array([e.mos for e in manifest.entries], dtype=np.float64)
    report = report_from_scores(preds, gt, split_id=0)
    workdir = Path(cfg.get("paths.workdir"))
    workdir.mkdir(parents=True, exist_ok=True)
    json_path = workdir / "eval_report.json"
    csv_path = workdir / "eval_report.csv"
    _write_report_files([report], None, json_path, csv_path)
    return {"report": report.row(), "json_path": str(json_path), "csv_path": str(csv_path)}


def run_predict(video_path: str, checkpoint_path: str, cfg: RunConfig) -> float:
    ckpt = load_checkpoint(checkpoint_path, active_cfg=cfg)
    inner = ckpt.cfg
    decoded = decode_frames(video_path, "all")
    sample = TrainSample(video_id=video_path, mos=0.0)
    if inner.get("sfe.enabled"):
        frames = decoded.frames
        mode = inner.frame_mode()
        if mode != "all" and int(mode) < len(frames):
            frames = frames[uniform_indices(len(frames), int(mode))]
        encoder = build_encoder(inner)
        sample.semantic = video_semantic_map(frames, inner.grid_mn(), encoder, ckpt.bank,
                                             template=inner.get("prompts.template")
                                             ).astype(np.float32)
    if inner.get("spatial.enabled"):
        sample.clip = sample_fragments(decoded.frames, _fragment_spec(inner, video_path))
    normalized = predict_scores(ckpt.model, [sample], batch=1)
    return float(ckpt.to_mos(normalized)[0])


def _split_train_fn(cfg: RunConfig, bank: PromptBank):
    def train_fn(train_e, test_e, split_id: int):
        seed = (cfg.get("seed") * 1000 + split_id) & 0x7FFFFFFF
        result = train_entries(train_e, cfg, bank, seed=seed)
        samples = load_samples(test_e, cfg, bank)
        normalized = predict_scores(result.model, samples, batch=cfg.get("train.batch"))
        preds = result.to_mos(normalized)
        gt = np.array([e.mos for e in test_e], dtype=np.float64)
        return preds, gt

    return train_fn


def run_split_protocol(manifest_path: str, cfg: RunConfig) -> dict:
    manifest = load_manifest(manifest_path)
    summary = extract_manifest(manifest, cfg)
    if summary.failures:
        raise RuntimeFailure(f"extraction failed for {len(summary.failures)} video(s): "
                             f"{summary.failures[:3]}")
    bank = active_bank(cfg)
    splits = run_splits(list(manifest.entries), _split_train_fn(cfg, bank),
                        k_splits=cfg.get("eval.splits"), train_frac=cfg.get("eval.train_frac"),
                        seed=cfg.get("seed"))
    workdir = Path(cfg.get("paths.workdir"))
    workdir.mkdir(parents=True, exist_ok=True)
    json_path = workdir / "splits_report.json"
    csv_path = workdir / "splits_report.csv"
    _write_report_files(splits.reports, splits, json_path, csv_path)
    return {
        "reports": [r.row() for r in splits.reports],
        "mean": splits.mean,
        "median": splits.median,
        "json_path": str(json_path),
        "csv_path": str(csv_path),
    }


def _write_report_files(reports: list[EvalReport], summary: SplitSummary | None,
                        json_path: Path, csv_path: Path) -> None:
    payload = {"splits": [r.row() for r in reports]}
    if summary is not None:
        payload["mean"] = summary.mean
        payload["median"] = summary.median
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["split_id", "n", "srocc", "plcc", "krocc"])
        for r in reports:
            writer.writerow([r.split_id, r.n, f"{r.srocc:.10g}", f"{r.plcc:.10g}",
                             f"{r.krocc:.10g}"])
        if summary is not None:
            for label, stats in (("mean", summary.mean), ("median", summary.median)):
                writer.writerow([label, len(reports), f"{stats['srocc']:.10g}",
                                 f"{stats['plcc']:.10g}", f"{stats['krocc']:.10g}"])


# --------------------------------------------------------------------- probes

def run_probe_curves(cfg: RunConfig, kind: str, description: str,
                     video: str | None = None, manifest_path: str | None = None) -> dict:
    if (video is None) == (manifest_path is None):
        raise ValidationError("probe needs exactly one of --video / --manifest")
    bank = active_bank(cfg)
    encoder = build_encoder(cfg)
    levels = cfg.probe_levels()
    targets: list[tuple[str, str]] = []
    if video is not None:
        targets.append((Path(video).stem or "video", video))
    else:
        manifest = load_manifest(manifest_path)
        targets.extend((e.video_id, e.path) for e in manifest.entries)

    workdir = Path(cfg.get("paths.workdir")) / "probe"
    workdir.mkdir(parents=True, exist_ok=True)
    curves = []
    for vid, path in targets:
        frames = decode_frames(path, "all").frames
        curve = response_curve(frames, description, kind, levels, encoder, bank,
                               grid_mn=cfg.grid_mn(), template=cfg.get("prompts.template"),
                               seed=cfg.get("seed"))
        csv_path = workdir / f"curve_{_safe_id(vid)}_{kind}_{_SAFE_ID.sub('_', description)}.csv"
        write_curve_csv(curve, csv_path)
        curves.append({"video_id": vid, "csv_path": str(csv_path), "rows": curve.rows()})
    return {"curves": curves}


def write_curve_csv(curve: ResponseCurve, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["description", "kind", "level", "response"])
        for row in curve.rows():
            writer.writerow([row["description"], row["kind"], f"{row['level']:.10g}",
                             f"{row['response']:.10g}"])


_BANK_LABELS = {
    "objective": {OBJECTIVE},
    "subjective": {SUBJECTIVE},
    "objective+subjective": {OBJECTIVE, SUBJECTIVE},
    "both": {OBJECTIVE, SUBJECTIVE},
}


def run_prompt_comparison(manifest_path: str, cfg: RunConfig, labels: list[str]) -> dict:
    """Fig.-5-style table: the split protocol re-run per candidate bank.

    The spatial branch is disabled so differences are attributable to the
    prompts alone.
    """
    if not labels:
        raise ValidationError("prompt comparison needs at least one bank label")
    base = load_bank(cfg.get("prompts.path")) if cfg.get("prompts.path") else default_bank()
    banks = []
    for label in labels:
        key = label.strip().lower()
        if key not in _BANK_LABELS:
            raise ValidationError(
                f"unknown bank label {label!r}; expected one of {sorted(_BANK_LABELS)}")
        banks.append((label, subset(base, _BANK_LABELS[key])))

    manifest = load_manifest(manifest_path)

    def run_bank(bank: PromptBank) -> dict:
        sub_cfg = RunConfig(cfg.as_dict())
        sub_cfg.set("spatial.enabled", False)
        sub_cfg.set("sfe.enabled", True)
        sub_cfg.validate()
        summary = extract_manifest(manifest, sub_cfg, bank=bank)
        if summary.failures:
            raise RuntimeFailure(f"extraction failed: {summary.failures[:3]}")
        splits = run_splits(list(manifest.entries), _split_train_fn(sub_cfg, bank),
                            k_splits=sub_cfg.get("eval.splits"),
                            train_frac=sub_cfg.get("eval.train_frac"),
                            seed=sub_cfg.get("seed"))
        return dict(splits.mean)

    rows = prompt_comparison(banks, run_bank)
    workdir = Path(cfg.get("paths.workdir"))
    workdir.mkdir(parents=True, exist_ok=True)
    csv_path = workdir / "prompt_comparison.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bank", "r", "srocc", "plcc", "krocc"])
        for row in rows:
            writer.writerow([row["bank"], row["r"], f"{row['srocc']:.10g}",
                             f"{row['plcc']:.10g}", f"{row['krocc']:.10g}"])
    return {"rows": rows, "csv_path": str(csv_path)}


def run_extract(manifest_path: str, cfg: RunConfig) -> dict:
    manifest = load_manifest(manifest_path)
    summary = extract_manifest(manifest, cfg)
    return {
        "videos": summary.videos,
        "extracted": summary.extracted,
        "skipped": summary.skipped,
        "failures": summary.failures,
        "cache_dir": str(cache_dir(cfg)),
    }
