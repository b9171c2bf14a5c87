"""Two-stage weak-supervision workflow: heatmaps, pseudo-labels, segmenter, evaluation.

The functions here work on in-memory samples and models; :mod:`racam.cli`
wraps them with file IO and argument parsing.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .cams import CamRequest, compute_cam
from .data import SampleRecord, stack_images
from .fgbp import PER_CHANNEL, FgbpConfig
from .metrics import MetricsReport, evaluate_set
from .models import ModelState, TrainConfig, classify, segment
from .postprocess import to_mask

log = logging.getLogger(__name__)

DEFECT_SCOPE = "defect"
FULL_SCOPE = "full"
DEFAULT_DELTAS = (0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 95)


@dataclass
class RunConfig:
    """Effective configuration of a run; every field has a default."""

    seed: int = 7
    jobs: int = 1
    out: str = "runs"
    data: str | None = None
    # dataset generation
    count: int = 300
    defect_rate: float = 0.5
    height: int = 96
    width: int = 288
    # heatmaps
    method: str = "ra-cam"
    delta: float = 50.0
    fgbp_scope: str = PER_CHANNEL
    layers: list[str] | None = None
    fusion: str = "max"
    split: str = "test"
    # pseudo-labels and evaluation
    min_area: int = 0
    gate: bool = True
    scope: str = DEFECT_SCOPE
    deltas: list[float] = field(default_factory=lambda: list(DEFAULT_DELTAS))
    # per-stage training
    train_cls: dict = field(default_factory=dict)
    train_seg: dict = field(default_factory=dict)

    @property
    def fgbp(self) -> FgbpConfig:
        return FgbpConfig(self.delta, self.fgbp_scope)

    def train_config(self, stage: str) -> TrainConfig:
        overrides = self.train_cls if stage == "cls" else self.train_seg
        return TrainConfig(**{"seed": self.seed, **overrides})

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_sources(cls, file_values: dict | None = None, flag_values: dict | None = None) -> "RunConfig":
        """Merge with precedence flags > file > defaults; ``None`` flags are unset."""
        known = {f.name for f in fields(cls)}
        merged: dict = {}
        for source in (file_values or {}, {k: v for k, v in (flag_values or {}).items() if v is not None}):
            unknown = set(source) - known
            if unknown:
                raise ValueError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
            for k, v in source.items():
                if k in ("train_cls", "train_seg"):
                    merged[k] = {**merged.get(k, {}), **v}
                else:
                    merged[k] = v
        return cls(**merged)


def load_config_file(path) -> dict:
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}") from None
    if not isinstance(values, dict):
        raise ValueError(f"{path}: top level must be a JSON object")
    return values


def report_envelope(cfg: RunConfig, **payload) -> dict:
    return {"version": __version__, "config": cfg.as_dict(), **payload}


# --------------------------------------------------------------------------
# stage one: heatmaps and pseudo-labels
# --------------------------------------------------------------------------


def heatmaps(model: ModelState, images: Sequence[np.ndarray], method: str, fgbp: FgbpConfig = FgbpConfig(),
             layers: Sequence[str] | None = None, fusion: str = "max", class_index: int = 1,
             jobs: int = 1) -> list[np.ndarray]:
    """Defect-class heatmaps ``[1,H,W]``, returned in input order."""

    def one(image):
        req = CamRequest(model, image, class_index, layers, method, fgbp, fusion)
        return compute_cam(req).values

    if jobs <= 1:
        return [one(im) for im in images]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, images))


def pseudo_labels(maps: Sequence[np.ndarray], predicted: Sequence[int] | None = None,
                  min_area: int = 0) -> list[np.ndarray]:
    """Otsu masks; images with ``predicted == 0`` get an empty mask."""
    masks = []
    for i, m in enumerate(maps):
        if predicted is not None and int(predicted[i]) == 0:
            masks.append(np.zeros(np.shape(m), dtype=np.uint8))
        else:
            masks.append(to_mask(m, min_area))
    return masks


def in_scope(samples: Sequence[SampleRecord], scope: str) -> list[int]:
    if scope == FULL_SCOPE:
        return list(range(len(samples)))
    if scope == DEFECT_SCOPE:
        return [i for i, s in enumerate(samples) if s.label == 1]
    raise ValueError(f"unknown metric scope {scope!r}; valid: {DEFECT_SCOPE}, {FULL_SCOPE}")


def evaluate_masks(preds: Sequence[np.ndarray], samples: Sequence[SampleRecord], scope: str = DEFECT_SCOPE,
                   **meta) -> MetricsReport:
    keep = in_scope(samples, scope)
    if not keep:
        raise ValueError(f"no images in scope {scope!r}")
    missing = [samples[i].id for i in keep if samples[i].mask is None]
    if missing:
        raise ValueError(f"no ground-truth mask for id {missing[0]!r}")
    return evaluate_set([preds[i] for i in keep], [samples[i].mask for i in keep], scope=scope, **meta)


def cam_report(model: ModelState, samples: Sequence[SampleRecord], method: str, fgbp: FgbpConfig = FgbpConfig(),
               layers: Sequence[str] | None = None, scope: str = DEFECT_SCOPE, gate: bool = False,
               min_area: int = 0, jobs: int = 1, fusion: str = "max") -> MetricsReport:
    """Score the Otsu masks of one CAM method against ground truth."""
    keep = in_scope(samples, scope)
    subset = [samples[i] for i in keep]
    images = [s.image for s in subset]
    maps = heatmaps(model, images, method, fgbp, layers, fusion, jobs=jobs)
    predicted = classify(model, stack_images(subset)) if gate else None
    masks = pseudo_labels(maps, predicted, min_area)
    used = list(layers) if layers is not None else list(CamRequest(model, images[0], method=method).layers)
    return evaluate_masks(masks, subset, FULL_SCOPE, method=method, delta=fgbp.delta, layers=used, fusion=fusion)


def sweep_delta(model: ModelState, splits: dict[str, Sequence[SampleRecord]], deltas: Sequence[float],
                method: str = "ra-cam", layers=None, scope: str = DEFECT_SCOPE, fgbp_scope: str = PER_CHANNEL,
                jobs: int = 1, fusion: str = "max") -> list[dict]:
    """One row per delta with the defect IoU on each named split."""
    rows = []
    for d in sorted(deltas):
        row = {"delta": d}
        for name, samples in splits.items():
            rep = cam_report(model, samples, method, FgbpConfig(d, fgbp_scope), layers, scope, jobs=jobs, fusion=fusion)
            row[f"{name}_iou"] = rep.defect.iou
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# stage two: segmentation
# --------------------------------------------------------------------------


def segment_samples(model: ModelState, samples: Sequence[SampleRecord]) -> list[np.ndarray]:
    return list(segment(model, stack_images(samples)))
