"""Motion-feature corpora: loading, normalization stats, and a synthetic stand-in dataset.

A dataset directory looks like::

    root/
      motions/<id>.mfa     binary arrays, magic "MFA1" + uint32 T + uint32 D + T*D float32
      texts/<id>.txt       one caption per line
      splits/train.txt     one id per line (likewise val.txt / test.txt)

The feature layout inside a frame is opaque to the pipeline; only the width D
has to be consistent across a corpus.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DomainError

MFA_MAGIC = b"MFA1"
STD_FLOOR = 1e-6
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class MotionSequence:
    """A [T x D] float32 motion-feature array plus metadata."""

    frames: np.ndarray
    fps: float = 20.0
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DomainError(f"motion frames must be [T x D] with T >= 1, got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise DataError(f"non-finite values in motion '{self.source_id}'")
        if self.fps <= 0:
            raise DomainError(f"fps must be positive, got {self.fps}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class TextAnnotation:
    text: str
    motion_id: str

    def __post_init__(self):
        if not self.text.strip():
            raise DataError(f"empty caption for motion '{self.motion_id}'")


@dataclass
class MotionStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise DomainError("stats mean/std must be matching 1-D vectors")
        if (self.std <= 0).any():
            raise DomainError("std must be strictly positive (floored)")


@dataclass
class Corpus:
    motions: list[MotionSequence]
    annotations: list[TextAnnotation]
    stats: MotionStats | None = None
    split: str = "all"
    splits: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        ids = {m.source_id for m in self.motions}
        for ann in self.annotations:
            if ann.motion_id not in ids:
                raise DataError(f"annotation references unknown motion '{ann.motion_id}'")
        seen = set()
        for name, members in self.splits.items():
            overlap = seen.intersection(members)
            if overlap:
                raise DataError(f"split '{name}' overlaps another split: {sorted(overlap)}")
            seen.update(members)

    @property
    def feature_dim(self) -> int:
        if not self.motions:
            raise DomainError("empty corpus has no feature dimension")
        return self.motions[0].feature_dim

    def motion_by_id(self, motion_id: str) -> MotionSequence:
        for m in self.motions:
            if m.source_id == motion_id:
                return m
        raise DomainError(f"no motion with id '{motion_id}'")

    def subset(self, split: str) -> "Corpus":
        """View of one split (stats are shared, not recomputed)."""
        if split not in self.splits:
            raise DomainError(f"unknown split '{split}'")
        members = set(self.splits[split])
        return Corpus(
            motions=[m for m in self.motions if m.source_id in members],
            annotations=[a for a in self.annotations if a.motion_id in members],
            stats=self.stats,
            split=split,
            splits={split: list(self.splits[split])},
        )


def write_mfa(path: Path | str, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise DomainError(f"mfa arrays are 2-D, got shape {frames.shape}")
    t, d = frames.shape
    with open(path, "wb") as fh:
        fh.write(MFA_MAGIC)
        fh.write(struct.pack("<II", t, d))
        fh.write(frames.tobytes())


def read_mfa(path: Path | str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MFA_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {MFA_MAGIC!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise DataError(f"{path}: truncated header")
        t, d = struct.unpack("<II", header)
        payload = fh.read(4 * t * d)
        if len(payload) != 4 * t * d:
            raise DataError(f"{path}: truncated payload, expected {t}x{d} float32")
    return np.frombuffer(payload, dtype="<f4").reshape(t, d).copy()


def load_dataset(root_path: Path | str, layout: str = "humanml3d-like", fps: float = 20.0) -> Corpus:
    """Load a dataset directory into a Corpus; stats come from the train split only."""
    if layout != "humanml3d-like":
        raise ConfigError(f"unsupported layout '{layout}'")
    root = Path(root_path)
    splits: dict[str, list[str]] = {}
    for name in SPLIT_NAMES:
        split_file = root / "splits" / f"{name}.txt"
        if not split_file.exists():
            raise ConfigError(f"missing split file: {split_file}")
        splits[name] = [line.strip() for line in split_file.read_text().splitlines() if line.strip()]

    motions: list[MotionSequence] = []
    annotations: list[TextAnnotation] = []
    width: int | None = None
    for name in SPLIT_NAMES:
        for motion_id in splits[name]:
            mfa_path = root / "motions" / f"{motion_id}.mfa"
            try:
                frames = read_mfa(mfa_path)
            except OSError as exc:
                raise DataError(f"cannot read {mfa_path}: {exc}") from exc
            if width is None:
                width = frames.shape[1]
            elif frames.shape[1] != width:
                raise DataError(
                    f"{mfa_path}: feature width {frames.shape[1]} differs from corpus width {width}"
                )
            motions.append(MotionSequence(frames, fps=fps, source_id=motion_id))
            text_path = root / "texts" / f"{motion_id}.txt"
            if text_path.exists():
                for line in text_path.read_text().splitlines():
                    if line.strip():
                        annotations.append(TextAnnotation(line.strip(), motion_id))

    corpus = Corpus(motions=motions, annotations=annotations, splits=splits)
    if splits["train"]:
        corpus.stats = compute_stats(corpus.subset("train"))
    return corpus


def compute_stats(corpus: Corpus) -> MotionStats:
    """Per-dimension mean/std over all frames of all motions; std floored at 1e-6."""
    if not corpus.motions:
        raise DomainError("cannot compute stats of an empty corpus")
    stacked = np.concatenate([m.frames for m in corpus.motions], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.maximum(std, STD_FLOOR)
    return MotionStats(mean=mean, std=std)


def normalize(motion: MotionSequence, stats: MotionStats) -> MotionSequence:
    if stats.mean.shape[0] != motion.feature_dim:
        raise DomainError(
            f"stats dim {stats.mean.shape[0]} does not match motion dim {motion.feature_dim}"
        )
    frames = (motion.frames - stats.mean) / stats.std
    return replace(motion, frames=frames)


def denormalize(motion: MotionSequence, stats: MotionStats) -> MotionSequence:
    if stats.mean.shape[0] != motion.feature_dim:
        raise DomainError(
            f"stats dim {stats.mean.shape[0]} does not match motion dim {motion.feature_dim}"
        )
    frames = motion.frames * stats.std + stats.mean
    return replace(motion, frames=frames)


# Family templates for the synthetic corpus. Each family gets its own offset
# direction in feature space, so families are linearly separable and a
# nearest-centroid classifier recovers them exactly.
SYNTH_FAMILIES = (
    ("wave slow", 0.5, 0.6),
    ("spin fast", 2.0, 0.8),
    ("jump high", 1.0, 1.2),
    ("turn wide", 1.5, 0.4),
)
SYNTH_OFFSET = 4.0
SYNTH_PERIOD = 16 # frames; every clip is an integer shift of its family prototype
SYNTH_NOISE = 0.05
CAPTION_TEMPLATES = (
    "a person performs a {family} motion",
    "someone does the {family} move",
)


def synth_corpus(
    seed: int,
    n_clips: int,
    feature_dim: int,
    length_range: tuple[int, int] = (32, 64),
    fps: float = 20.0,
    val_fraction: float = 0.125,
    test_fraction: float = 0.125,
) -> Corpus:
    """Deterministic synthetic corpus of family-parameterized periodic clips.

    Every clip is an integer time-shift of its family's prototype signal
    (period SYNTH_PERIOD frames) plus small Gaussian noise, so clip windows
    cluster tightly around a finite set of prototypes while families stay
    linearly separable via their offset dimension.
    """
    if n_clips < 1:
        raise DomainError("n_clips must be >= 1")
    if feature_dim < 2:
        raise DomainError("feature_dim must be >= 2")
    lo, hi = length_range
    if lo > hi or lo < 1:
        raise DomainError(f"bad length_range {length_range}")
    n_families = min(len(SYNTH_FAMILIES), feature_dim)

    rng = np.random.default_rng(seed)
    dims = np.arange(feature_dim, dtype=np.float32)
    family_phase = [
        (freq * dims * 0.7 + 0.3 * idx).astype(np.float32)
        for idx, (_, freq, _) in enumerate(SYNTH_FAMILIES[:n_families])
    ]
    motions: list[MotionSequence] = []
    annotations: list[TextAnnotation] = []
    for i in range(n_clips):
        family_idx = i % n_families
        name, _, amp = SYNTH_FAMILIES[family_idx]
        t_len = int(rng.integers(lo, hi + 1))
        shift = int(rng.integers(0, SYNTH_PERIOD))
        t = np.arange(t_len, dtype=np.float32)[:, None] + shift
        frames = amp * np.sin(2 * np.pi * t / SYNTH_PERIOD + family_phase[family_idx][None, :])
        frames = frames + SYNTH_NOISE * rng.standard_normal(frames.shape)
        frames = frames.astype(np.float32)
        frames[:, family_idx] += SYNTH_OFFSET
        motion_id = f"synth_{i:04d}"
        motions.append(MotionSequence(frames, fps=fps, source_id=motion_id))
        template = CAPTION_TEMPLATES[i % len(CAPTION_TEMPLATES)]
        annotations.append(TextAnnotation(template.format(family=name), motion_id))

    ids = [m.source_id for m in motions]
    n_val = max(1, int(round(n_clips * val_fraction))) if n_clips >= 3 else 0
    n_test = max(1, int(round(n_clips * test_fraction))) if n_clips >= 3 else 0
    # interleaved assignment keeps every family present in every split
    val_ids = ids[::max(1, n_clips // n_val)][:n_val] if n_val else []
    remaining = [i for i in ids if i not in val_ids]
    test_ids = remaining[::max(1, len(remaining) // n_test)][:n_test] if n_test else []
    train_ids = [i for i in remaining if i not in test_ids]
    splits = {"train": train_ids, "val": list(val_ids), "test": list(test_ids)}

    corpus = Corpus(motions=motions, annotations=annotations, splits=splits)
    corpus.stats = compute_stats(corpus.subset("train"))
    return corpus


def family_of(motion_id_or_caption: str) -> str:
    """Recover the synthetic family name from a caption (for oracle checks)."""
    for name, _, _ in SYNTH_FAMILIES:
        if name in motion_id_or_caption:
            return name
    raise DomainError(f"no synthetic family found in {motion_id_or_caption!r}")


def export_corpus(corpus: Corpus, root_path: Path | str) -> Path:
    """Write a corpus back out in the standard directory layout."""
    root = Path(root_path)
    (root / "motions").mkdir(parents=True, exist_ok=True)
    (root / "texts").mkdir(parents=True, exist_ok=True)
    (root / "splits").mkdir(parents=True, exist_ok=True)
    for motion in corpus.motions:
        write_mfa(root / "motions" / f"{motion.source_id}.mfa", motion.frames)
    by_id: dict[str, list[str]] = {}
    for ann in corpus.annotations:
        by_id.setdefault(ann.motion_id, []).append(ann.text)
    for motion_id, texts in by_id.items():
        (root / "texts" / f"{motion_id}.txt").write_text("\n".join(texts) + "\n")
    for name in SPLIT_NAMES:
        members = corpus.splits.get(name, [])
        (root / "splits" / f"{name}.txt").write_text("\n".join(members) + ("\n" if members else ""))
    return root
