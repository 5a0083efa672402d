"""Synthetic event sequences, label noise, label dilation and MixUp.

A clip is Gaussian background noise plus, for every event, a fixed
class-specific signature vector added with a triangular temporal profile that
peaks on the event frame. Narrow, strong signatures make events visually
distinct; wide, weak ones make the event frame ambiguous.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .matcher import GroundTruthLabel

DATASET_VERSION = 1
SPLITS = ("train", "val", "test")
_SPLIT_SALT = {"train": 1, "val": 2, "test": 3, "signature": 99}


@dataclass(frozen=True)
class SynthConfig:
    length: int = 64
    n_classes: int = 4
    d_feat: int = 8
    events_per_clip: tuple[int, int] = (1, 4)
    signature_width: int = 3
    signature_gain: float = 4.0
    background_noise_std: float = 1.0
    min_event_separation: int = 8
    margin: int = 2
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.events_per_clip
        if min(self.length, self.n_classes, self.d_feat, self.signature_width) < 1:
            raise ValueError("all extents must be positive")
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid events_per_clip range {self.events_per_clip}")
        if self.min_event_separation < 1:
            raise ValueError("min_event_separation must be at least 1")
        if self.signature_gain < 0 or self.background_noise_std < 0:
            raise ValueError("gain and noise std must be non-negative")
        usable = self.length - 2 * self.margin
        if hi > 0 and (usable < 1 or (hi - 1) * self.min_event_separation >= usable):
            raise ValueError(
                f"cannot place {hi} events {self.min_event_separation} frames apart "
                f"in {self.length} frames (margin {self.margin})"
            )

    @classmethod
    def distinct(cls, **kw) -> SynthConfig:
        """Narrow, strong signatures."""
        return cls(**{"signature_width": 3, "signature_gain": 4.0, **kw})

    @classmethod
    def ambiguous(cls, **kw) -> SynthConfig:
        """Wide, weak signatures."""
        return cls(**{"signature_width": 9, "signature_gain": 1.0, **kw})


@dataclass
class Clip:
    features: np.ndarray
    labels: list[GroundTruthLabel]
    clip_id: str = ""
    precise: list[GroundTruthLabel] | None = None

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    config: SynthConfig
    splits: dict[str, list[Clip]] = field(default_factory=dict)
    sigma: float = 0.0
    noise_seed: int | None = None

    def __getitem__(self, split: str) -> list[Clip]:
        return self.splits[split]


def signatures(config: SynthConfig) -> np.ndarray:
    """Unit-norm signature vector per class, ``(N_c, D_f)``."""
    rng = np.random.default_rng([config.seed, _SPLIT_SALT["signature"]])
    sig = rng.normal(size=(config.n_classes, config.d_feat))
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


def profile(offset, width: int) -> np.ndarray:
    """Triangular pulse: 1 at offset 0, falling linearly to 0 at
    ``(width + 1) / 2`` frames."""
    half = (width + 1) / 2.0
    return np.maximum(0.0, 1.0 - np.abs(np.asarray(offset, dtype=np.float64)) / half)


def _place_events(rng: np.random.Generator, n: int, config: SynthConfig, length: int) -> list[int]:
    lo, hi = 1 + config.margin, length - config.margin
    for _ in range(1000):
        frames = np.sort(rng.integers(lo, hi + 1, size=n))
        if n < 2 or np.all(np.diff(frames) >= config.min_event_separation):
            return [int(f) for f in frames]
    # dense fallback: even spacing with a random shift keeps determinism
    span = (n - 1) * config.min_event_separation
    start = int(rng.integers(lo, hi - span + 1))
    return [start + k * config.min_event_separation for k in range(n)]


def make_clip(config: SynthConfig, rng: np.random.Generator, length: int | None = None,
              sig: np.ndarray | None = None, clip_id: str = "") -> Clip:
    length = length or config.length
    sig = signatures(config) if sig is None else sig
    lo, hi = config.events_per_clip
    scale = length / config.length
    n_min, n_max = int(round(lo * scale)), max(int(math.floor(hi * scale)), int(round(lo * scale)))
    if n_max > 0 and (n_max - 1) * config.min_event_separation >= length - 2 * config.margin:
        raise ValueError(f"cannot place {n_max} separated events in {length} frames")
    n = int(rng.integers(n_min, n_max + 1))
    frames = _place_events(rng, n, config, length)
    classes = rng.integers(0, config.n_classes, size=n)
    x = rng.normal(scale=config.background_noise_std, size=(length, config.d_feat))
    idx = np.arange(1, length + 1)
    labels = []
    for f, k in zip(frames, classes):
        x += config.signature_gain * profile(idx - f, config.signature_width)[:, None] * sig[k][None, :]
        labels.append(GroundTruthLabel.one_hot(int(k), config.n_classes, int(f), length))
    return Clip(x, labels, clip_id)


def generate(config: SynthConfig, count: int, split: str = "train",
             length: int | None = None) -> list[Clip]:
    """``count`` clips for ``split``; each clip seeded by (seed, split, index)."""
    sig = signatures(config)
    salt = _SPLIT_SALT[split]
    return [
        make_clip(config, np.random.default_rng([config.seed, salt, i]), length, sig, f"{split}-{i:05d}")
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# label manipulation

def label_noise(count: int, sigma: float, seed: int) -> np.ndarray:
    """Raw Gaussian frame offsets ``N(0, sigma^2)`` used by perturb_labels."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return np.random.default_rng(seed).normal(0.0, sigma, size=count) if sigma > 0 else np.zeros(count)


def perturb_labels(labels: Sequence[GroundTruthLabel], sigma: float, seed: int) -> list[GroundTruthLabel]:
    """Shift every label by an independent Gaussian offset (frames), rounded
    half-up and clamped into the sequence. Classes are untouched."""
    if sigma == 0:
        return list(labels)
    eps = label_noise(len(labels), sigma, seed)
    return [
        g.moved(min(max(int(math.floor(g.frame + e + 0.5)), 1), g.length))
        for g, e in zip(labels, eps)
    ]


def dilate_labels(labels: Sequence[GroundTruthLabel]) -> list[GroundTruthLabel]:
    """Copy every label onto the frames before and after it. Labels that land
    on the same frame merge by elementwise max of their class vectors."""
    by_frame: dict[int, np.ndarray] = {}
    length = {}
    for g in labels:
        by_frame[g.frame] = np.maximum(by_frame.get(g.frame, 0.0), g.classes)
        length[g.frame] = g.length
    for g in labels:
        for f in (g.frame - 1, g.frame + 1):
            if 1 <= f <= g.length:
                by_frame[f] = np.maximum(by_frame.get(f, 0.0), g.classes)
                length[f] = g.length
    return [GroundTruthLabel(by_frame[f], f, length[f]) for f in sorted(by_frame)]


def mixup(clip_a: Clip, clip_b: Clip, alpha: float = 0.2, seed: int = 0,
          lam: float | None = None) -> Clip:
    """Convex combination of two clips; labels become soft.

    ``lam ~ Beta(alpha, alpha)`` unless given. A's class vectors are scaled by
    ``lam``, B's by ``1 - lam``; labels on the same frame are summed (capped
    at 1). Labels whose scaled class vector is all zero are dropped.
    """
    if clip_a.features.shape != clip_b.features.shape:
        raise ValueError(f"clip shapes differ: {clip_a.features.shape} vs {clip_b.features.shape}")
    if lam is None:
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        lam = float(np.random.default_rng(seed).beta(alpha, alpha))
    features = lam * clip_a.features + (1.0 - lam) * clip_b.features
    merged: dict[int, np.ndarray] = {}
    length = clip_a.length
    for weight, labels in ((lam, clip_a.labels), (1.0 - lam, clip_b.labels)):
        for g in labels:
            merged[g.frame] = np.minimum(merged.get(g.frame, 0.0) + weight * g.classes, 1.0)
    labels = [GroundTruthLabel(c, f, length) for f, c in sorted(merged.items()) if np.any(c > 0)]
    return Clip(features, labels, f"{clip_a.clip_id}+{clip_b.clip_id}")


def window_clip(clip: Clip, start: int, length: int) -> Clip:
    """Frames ``start+1 .. start+length`` of a clip, labels re-based (zero
    padded past the end)."""
    feats = clip.features[start:start + length]
    if feats.shape[0] < length:
        feats = np.vstack([feats, np.zeros((length - feats.shape[0], feats.shape[1]))])
    labels = [GroundTruthLabel(g.classes, g.frame - start, length)
              for g in clip.labels if start < g.frame <= start + length]
    return Clip(feats, labels, clip.clip_id)


# ---------------------------------------------------------------------------
# datasets on disk

def build_dataset(config: SynthConfig, counts: dict[str, int], sigma: float = 0.0,
                  noise_seed: int | None = None, eval_length: int | None = None) -> Dataset:
    """Train/val/test splits; training labels optionally perturbed by
    ``sigma`` frames while the precise labels are kept alongside."""
    splits = {}
    for split in SPLITS:
        n = counts.get(split, 0)
        length = config.length if split == "train" else (eval_length or config.length)
        splits[split] = generate(config, n, split, length)
    noise_seed = config.seed if noise_seed is None else noise_seed
    for i, clip in enumerate(splits["train"]):
        clip.precise = clip.labels
        clip.labels = perturb_labels(clip.labels, sigma, seed=hash_seed(noise_seed, i))
    return Dataset(config, splits, sigma, noise_seed)


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _labels_json(labels: Sequence[GroundTruthLabel]) -> list[dict]:
    return [{"frame": g.frame, "classes": g.classes.tolist()} for g in labels]


def _labels_from_json(items, length: int) -> list[GroundTruthLabel]:
    return [GroundTruthLabel(np.array(d["classes"], dtype=np.float64), int(d["frame"]), length)
            for d in items]


def save_dataset(dataset: Dataset, directory) -> Path:
    """One ``<split>.bin`` of row-major float64 features per split plus
    ``dataset.json`` describing clips, labels and the generating config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": DATASET_VERSION,
        "config": asdict(dataset.config),
        "seed": dataset.config.seed,
        "sigma": dataset.sigma,
        "noise_seed": dataset.noise_seed,
        "splits": {},
    }
    for split, clips in dataset.splits.items():
        offset = 0
        entries = []
        with open(directory / f"{split}.bin", "wb") as fh:
            for clip in clips:
                fh.write(np.ascontiguousarray(clip.features, dtype="<f8").tobytes())
                entry = {
                    "clip_id": clip.clip_id,
                    "length": clip.length,
                    "offset": offset,
                    "labels": _labels_json(clip.precise if clip.precise is not None else clip.labels),
                }
                if clip.precise is not None:
                    entry["noisy_labels"] = _labels_json(clip.labels)
                entries.append(entry)
                offset += clip.features.size
        manifest["splits"][split] = {"file": f"{split}.bin", "d_feat": dataset.config.d_feat,
                                     "clips": entries}
    path = directory / "dataset.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "dataset.json").read_text())
    if manifest.get("format_version") != DATASET_VERSION:
        raise ValueError(f"{directory}: unsupported dataset version {manifest.get('format_version')}")
    cfg = dict(manifest["config"])
    cfg["events_per_clip"] = tuple(cfg["events_per_clip"])
    config = SynthConfig(**cfg)
    splits = {}
    for split, info in manifest["splits"].items():
        raw = np.fromfile(directory / info["file"], dtype="<f8")
        d = info["d_feat"]
        clips = []
        for e in info["clips"]:
            n = e["length"] * d
            feats = raw[e["offset"]:e["offset"] + n].reshape(e["length"], d).copy()
            precise = _labels_from_json(e["labels"], e["length"])
            if "noisy_labels" in e:
                clips.append(Clip(feats, _labels_from_json(e["noisy_labels"], e["length"]),
                                  e["clip_id"], precise))
            else:
                clips.append(Clip(feats, precise, e["clip_id"]))
        splits[split] = clips
    return Dataset(config, splits, manifest.get("sigma", 0.0), manifest.get("noise_seed"))


def load_labels(path) -> dict[str, list[GroundTruthLabel]]:
    """Ground truth from a dataset manifest (test split) or a standalone label
    file ``{"videos": [{"video_id", "length", "labels": [{"frame", "classes"}]}]}``."""
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    data = json.loads(path.read_text())
    if "videos" in data:
        return {str(v["video_id"]): _labels_from_json(v["labels"], int(v["length"]))
                for v in data["videos"]}
    split = data["splits"]["test"]
    return {e["clip_id"]: _labels_from_json(e["labels"], e["length"]) for e in split["clips"]}


def write_labels(path, clips: Sequence[Clip]) -> None:
    videos = [{"video_id": c.clip_id, "length": c.length,
               "labels": _labels_json(c.precise if c.precise is not None else c.labels)}
              for c in clips]
    Path(path).write_text(json.dumps({"format_version": DATASET_VERSION, "videos": videos}, indent=2))

