"""Heatmap persistence: 16-bit grayscale PNG plus a JSON sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from voice.explainers import ExplanationMap
from voice.uncertainty import VoiceMap

QUANT = 65535


def save_map(path: str | Path, m: ExplanationMap | VoiceMap) -> Path:
    """Write map values as 16-bit PNG with metadata in ``<stem>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(m.values, dtype=np.float64)
    q = np.round(np.clip(values, 0.0, 1.0) * QUANT).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")  # uint16 -> 16-bit grayscale
    meta: dict = {"normalization_bounds": [m.raw_min, m.raw_max]}
    if isinstance(m, VoiceMap):
        meta.update(
            {
                "kind": "voice",
                "method": m.method,
                "p_t": m.p_t,
                "parent": m.parent,
                "R_used": m.R_used,
            }
        )
    else:
        meta.update(
            {
                "kind": "explanation",
                "method": m.method,
                "target": m.target_desc,
                "layer": m.layer_name,
                "degenerate": m.degenerate,
            }
        )
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    return path


def load_map(path: str | Path):
    """Read a PNG+JSON pair back; values quantize to 1/65535 steps."""
    path = Path(path)
    with Image.open(path) as im:
        q = np.asarray(im, dtype=np.uint16)
    values = q.astype(np.float64) / QUANT
    meta = json.loads(path.with_suffix(".json").read_text())
    lo, hi = meta.get("normalization_bounds", [0.0, 0.0])
    if meta.get("kind") == "voice":
        return VoiceMap(
            values=values,
            R_used=meta.get("R_used", 0),
            method=meta.get("method", ""),
            p_t=meta.get("p_t", 0.0),
            parent=meta.get("parent", ""),
            raw_min=lo,
            raw_max=hi,
        )
    return ExplanationMap(
        values=values,
        method=meta.get("method", ""),
        target_desc=meta.get("target", ""),
        layer_name=meta.get("layer", ""),
        raw_min=lo,
        raw_max=hi,
        degenerate=meta.get("degenerate", False),
    )
