"""Shape-bias / texture-bias metrics and accuracy, with report output."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class UndefinedBiasError(ValueError):
    """No prediction matched either cue, so the bias ratio is undefined."""


@dataclass
class BiasReport:
    n_total: int
    n_correct_shape: int
    n_correct_texture: int
    n_other: int
    shape_bias: float
    texture_bias: float
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_correct_shape": self.n_correct_shape,
            "n_correct_texture": self.n_correct_texture,
            "n_other": self.n_other,
            "shape_bias": self.shape_bias,
            "texture_bias": self.texture_bias,
            "per_class": self.per_class,
        }


def classify(model, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Eval-mode argmax predictions; lowest class index wins exact ties."""
    preds = []
    for i in range(0, len(images), batch_size):
        logits, _, _ = model.forward(Tensor(images[i:i + batch_size]), train=False)
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds)


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("accuracy: length mismatch")
    return float((preds == labels).mean())


def bias_scores(preds, shape_labels, texture_labels) -> BiasReport:
    """Counts of shape/texture-matching predictions and the derived ratios.

    Only valid on cue-conflict inputs (shape label != texture label per
    sample); "other" predictions match neither cue and are excluded from
    the bias denominator.
    """
    preds = np.asarray(preds)
    shape_labels = np.asarray(shape_labels)
    texture_labels = np.asarray(texture_labels)
    if not (preds.shape == shape_labels.shape == texture_labels.shape):
        raise ValueError("bias_scores: length mismatch")
    if np.any(shape_labels == texture_labels):
        raise ValueError("bias_scores: cue-conflict inputs must have "
                         "shape_label != texture_label")
    hit_shape = preds == shape_labels
    hit_texture = preds == texture_labels
    n_cs = int(hit_shape.sum())
    n_ct = int(hit_texture.sum())
    n_total = len(preds)
    n_other = n_total - n_cs - n_ct
    if n_cs + n_ct == 0:
        raise UndefinedBiasError("no correct recognitions; bias undefined")
    shape_bias = n_cs / (n_cs + n_ct)
    per_class = {}
    for c in np.unique(shape_labels):
        sel = shape_labels == c
        per_class[int(c)] = {
            "n": int(sel.sum()),
            "shape_correct": int(hit_shape[sel].sum()),
            "texture_correct": int(hit_texture[sel].sum()),
        }
    return BiasReport(n_total, n_cs, n_ct, n_other,
                      shape_bias, 1.0 - shape_bias, per_class)


def write_reports(out_dir, stem: str, payload: dict) -> None:
    """Emit key=value text plus the same content as JSON."""
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flat = _flatten(payload)
    with open(out / f"{stem}.txt", "w", encoding="utf-8") as f:
        for k in sorted(flat):
            f.write(f"{k}={flat[k]}\n")
    with open(out / f"{stem}.json", "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, f"{key}."))
        else:
            out[key] = v
    return out
