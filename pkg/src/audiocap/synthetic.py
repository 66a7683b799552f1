"""Small synthetic corpus that a tiny model can memorize."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .features import save_lmel
from .numcore import make_rng
from .textproc import CAPTION_COLUMNS

CAPTIONS = (
    "a dog barks loudly",
    "birds sing in the trees",
    "rain falls on a metal roof",
    "a car passes by quickly",
    "water flows in a stream",
    "people talk in a busy room",
    "wind blows through the trees",
    "a door closes slowly",
)


def synthetic_clips(seed: int = 0, num_features: int = 4, min_frames: int = 12,
                    max_frames: int = 20) -> dict[str, np.ndarray]:
    """Random feature matrices, one per caption, keyed by a wav-style file name."""
    rng = make_rng(seed, 7)
    clips = {}
    for i in range(len(CAPTIONS)):
        T = int(rng.integers(min_frames, max_frames + 1))
        clips[f"clip_{i:02d}.wav"] = rng.normal(size=(T, num_features))
    return clips


def synthetic_captions() -> dict[str, list[str]]:
    return {f"clip_{i:02d}.wav": [c] for i, c in enumerate(CAPTIONS)}


FIXTURE_CONFIG = {
    "model": {"num_layers": 3, "encoder_size": 16, "decoder_size": 32, "subsample_factor": 2,
              "num_features": 4, "dropout_p": 0.25},
    "train": {"batch_size": 4, "learning_rate": 0.01, "patience_epochs": 100, "max_epochs": 2000},
}


def write_fixture(root) -> Path:
    """Write ``features/*.lmel``, ``captions.csv`` and ``config.json`` under ``root``."""
    root = Path(root)
    feats = root / "features"
    feats.mkdir(parents=True, exist_ok=True)
    for name, X in synthetic_clips().items():
        save_lmel(feats / f"{Path(name).stem}.lmel", X)
    with open(root / "captions.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CAPTION_COLUMNS)
        for name, caps in synthetic_captions().items():
            writer.writerow([name, *caps, "", "", "", ""])
    (root / "config.json").write_text(json.dumps(FIXTURE_CONFIG, indent=2) + "\n")
    return root
