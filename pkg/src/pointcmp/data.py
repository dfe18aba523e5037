"""Point cloud video data model, synthetic motion dataset, clip sampling and
the on-disk ``PCV1`` container."""

from __future__ import annotations

import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"PCV1"
_MAGIC_PREFIX = b"PCV"

ARCHETYPES = ("translate", "rotate", "oscillate")


class DatasetError(Exception):
    """Base class for dataset file problems."""


class DatasetFormatError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


@dataclass
class PointCloudVideo:
    frames: list[np.ndarray]
    label: int
    video_id: str

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ValueError(f"video {self.video_id!r} has no frames")
        frames = []
        for t, f in enumerate(self.frames):
            f = np.asarray(f, dtype=np.float32)
            if f.ndim != 2 or f.shape[1] != 3 or f.shape[0] < 1:
                raise ValueError(f"frame {t} of {self.video_id!r} must be (P>=1, 3), got {f.shape}")
            if not np.isfinite(f).all():
                raise ValueError(f"frame {t} of {self.video_id!r} has non-finite coordinates")
            frames.append(f)
        self.frames = frames
        if self.label < 0:
            raise ValueError("label must be non-negative")

    @property
    def num_frames(self) -> int:
        return len(self.frames)


@dataclass
class Clip:
    points: np.ndarray  # (T, P, 3)
    timestamps: np.ndarray  # (T,) monotone raw frame indices
    label: int

    @property
    def num_frames(self) -> int:
        return self.points.shape[0]


@dataclass
class SegmentedClip:
    segments: list[np.ndarray]  # L arrays of (T/L, P, 3)
    timestamps: list[np.ndarray]
    label: int

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    def as_array(self) -> np.ndarray:
        """Stack into an ``(L, T/L, P, 3)`` array, the encoder's input layout."""
        return np.stack(self.segments)


@dataclass
class SyntheticSpec:
    num_classes: int = 3
    videos_per_class: int = 30
    frames: int = 24
    points_per_frame: int = 512
    seed: int = 0
    noise: float = 0.01
    yaw_range: float = 0.5  # body heading drawn from [-yaw_range, yaw_range] (subjects roughly face the sensor)
    amplitude: float = 1.0  # scales drift distance, spin angle and arm swing (at most 1)
    jitter: float = 0.0  # std of a per-frame whole-body translation (sensor shake)

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for name in ("videos_per_class", "frames", "points_per_frame"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if min(self.noise, self.yaw_range, self.jitter) < 0 or not 0 <= self.amplitude <= 1:
            raise ValueError("noise, yaw_range and jitter must be non-negative, amplitude in [0, 1]")


@dataclass
class DatasetManifest:
    version: str
    num_videos: int
    num_classes: int
    offsets: list[int]
    class_names: list[str] = field(default_factory=list)
    generator: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"version = {self.version}",
            f"num_videos = {self.num_videos}",
            f"num_classes = {self.num_classes}",
            f"class_names = {','.join(self.class_names)}",
            f"offsets = {','.join(str(o) for o in self.offsets)}",
        ]
        lines += [f"generator.{k} = {v}" for k, v in sorted(self.generator.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        gen = {k[len("generator."):]: v for k, v in kv.items() if k.startswith("generator.")}
        offsets = [int(o) for o in kv.get("offsets", "").split(",") if o]
        names = [n for n in kv.get("class_names", "").split(",") if n]
        m = cls(kv["version"], int(kv["num_videos"]), int(kv["num_classes"]), offsets, names, gen)
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise DatasetFormatError("manifest offsets are not strictly increasing")
        if len(offsets) != m.num_videos:
            raise DatasetFormatError("manifest record count does not match header")
        return m


# --------------------------------------------------------------------------
# synthetic generator


def class_names(num_classes: int) -> list[str]:
    return [f"{ARCHETYPES[k % 3]}{k // 3}" for k in range(num_classes)]


def _sample_body(rng: np.random.Generator, n: int, size: float, arm: np.ndarray) -> np.ndarray:
    """Surface samples of a torso ellipsoid plus a thin arm along unit ``arm``."""
    n_arm = n // 4
    n_torso = n - n_arm
    v = rng.normal(size=(n_torso, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    torso = v * np.array([0.35, 0.25, 0.5]) * size
    # arm: a thin cylinder from the shoulder outwards along ``arm``
    s = rng.uniform(0.0, 1.0, size=n_arm)[:, None]
    ring = rng.normal(size=(n_arm, 3))
    ring -= (ring @ arm)[:, None] * arm
    ring /= np.linalg.norm(ring, axis=1, keepdims=True) + 1e-12
    shoulder = np.array([0.0, 0.0, 0.3]) * size
    arm_pts = shoulder + s * arm * 0.6 * size + ring * 0.06 * size
    return np.concatenate([torso, arm_pts])


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _make_video(spec: SyntheticSpec, label: int, index: int, rng: np.random.Generator) -> PointCloudVideo:
    archetype = label % 3
    regime = label // 3
    size = rng.uniform(0.85, 1.15)
    yaw = rng.uniform(-spec.yaw_range, spec.yaw_range)
    origin = np.r_[rng.uniform(-0.5, 0.5, size=2), 0.0]
    speed = rng.uniform(0.8, 1.2) * (1.0 + 0.5 * regime)
    amp = spec.amplitude
    phase = rng.uniform(0.0, 2.0 * math.pi)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    # rest pose drawn from the swing range so single frames look alike across classes
    rest = rng.uniform(-0.9, 0.9)
    base_arm = np.array([math.cos(rest), 0.0, math.sin(rest)])

    frames = []
    for t in range(spec.frames):
        arm = base_arm
        offset = np.zeros(3)
        spin = 0.0
        if archetype == 0:
            # rigid drift along a random horizontal heading
            offset = amp * 0.04 * speed * t * np.array([math.cos(heading), math.sin(heading), 0.0])
        elif archetype == 1:
            # rigid spin about the vertical body axis
            spin = amp * 0.15 * speed * t
        else:
            # articulated: the arm swings up and down
            swing = rest * (1.0 - amp) + amp * 0.9 * math.sin(0.35 * speed * t + phase)
            arm = np.array([math.cos(swing), 0.0, math.sin(swing)])
        pts = _sample_body(rng, spec.points_per_frame, size, arm)
        pts = pts @ _rot_z(yaw + spin).T + origin + offset
        pts += rng.normal(scale=spec.noise, size=pts.shape)
        if spec.jitter:
            pts += rng.normal(scale=spec.jitter, size=3)
        frames.append(pts.astype(np.float32))
    return PointCloudVideo(frames, label, f"{class_names(spec.num_classes)[label]}_{index:04d}")


def generate_synthetic_dataset(spec: SyntheticSpec) -> list[PointCloudVideo]:
    """Labeled videos whose class is carried by motion, not by per-frame shape.

    Every class shares the same two-part body (torso + arm) with per-video
    size/orientation/position jitter. Class ``k`` uses archetype ``k % 3``
    (drift, spin, arm swing) at speed regime ``k // 3``.
    """
    spec.validate()
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.num_classes * spec.videos_per_class)
    videos = []
    for label in range(spec.num_classes):
        for i in range(spec.videos_per_class):
            rng = np.random.default_rng(seeds[label * spec.videos_per_class + i])
            videos.append(_make_video(spec, label, i, rng))
    return videos


# --------------------------------------------------------------------------
# clips


def sample_clip(video: PointCloudVideo, num_frames: int, stride: int, points_per_frame: int,
                rng: np.random.Generator) -> Clip:
    if num_frames <= 0 or stride <= 0:
        raise ValueError("num_frames and stride must be positive")
    if points_per_frame <= 0:
        raise ValueError("points_per_frame must be positive")
    span = (num_frames - 1) * stride + 1
    t_raw = video.num_frames
    start = int(rng.integers(0, t_raw - span + 1)) if t_raw >= span else 0
    timestamps = start + stride * np.arange(num_frames)
    out = np.empty((num_frames, points_per_frame, 3), dtype=np.float32)
    for i, t in enumerate(timestamps):
        # short videos loop back to the first frame
        frame = video.frames[t % t_raw]
        p = frame.shape[0]
        if p >= points_per_frame:
            idx = rng.choice(p, points_per_frame, replace=False)
        else:
            idx = np.r_[np.arange(p), rng.choice(p, points_per_frame - p, replace=True)]
            rng.shuffle(idx)
        out[i] = frame[idx]
    return Clip(out, timestamps, video.label)


def segment_clip(clip: Clip, num_segments: int) -> SegmentedClip:
    t = clip.num_frames
    if num_segments <= 0 or t % num_segments:
        raise ValueError(f"{num_segments} segments do not evenly divide {t} frames")
    f = t // num_segments
    return SegmentedClip(
        [clip.points[i * f:(i + 1) * f] for i in range(num_segments)],
        [clip.timestamps[i * f:(i + 1) * f] for i in range(num_segments)],
        clip.label,
    )


def random_scale(clip: Clip, lo: float, hi: float, rng: np.random.Generator) -> Clip:
    if lo <= 0 or hi < lo:
        raise ValueError("scale range must satisfy 0 < lo <= hi")
    s = lo if lo == hi else rng.uniform(lo, hi)
    return Clip((clip.points * np.float32(s)).astype(np.float32), clip.timestamps.copy(), clip.label)


def stratified_split(labels: Sequence[int], train_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Per-class shuffled split; returns sorted train and test indices."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        k = int(round(train_fraction * len(idx)))
        train += idx[:k].tolist()
        test += idx[k:].tolist()
    return sorted(train), sorted(test)


# --------------------------------------------------------------------------
# PCV1 container


def _encode_record(v: PointCloudVideo) -> bytes:
    buf = io.BytesIO()
    vid = v.video_id.encode("utf-8")
    buf.write(struct.pack("<I", len(vid)))
    buf.write(vid)
    buf.write(struct.pack("<II", v.label, v.num_frames))
    for f in v.frames:
        buf.write(struct.pack("<I", f.shape[0]))
        buf.write(np.ascontiguousarray(f, dtype="<f4").tobytes())
    return buf.getvalue()


def write_dataset(videos: Iterable[PointCloudVideo], path, num_classes: int | None = None,
                  names: Sequence[str] | None = None, generator: dict | None = None) -> DatasetManifest:
    """Write videos to ``path`` and a ``<path>.manifest`` key-value sidecar."""
    videos = list(videos)
    if num_classes is None:
        num_classes = max(v.label for v in videos) + 1 if videos else 0
    if any(v.label >= num_classes for v in videos):
        raise ValueError("label out of range for num_classes")
    header = struct.pack("<II", len(videos), num_classes)
    body = io.BytesIO()
    offsets = []
    pos = len(MAGIC) + len(header)
    for v in videos:
        rec = _encode_record(v)
        offsets.append(pos + body.tell())
        body.write(rec)
    payload = header + body.getvalue()
    checksum = zlib.crc32(payload) & 0xFFFFFFFF
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum))
    manifest = DatasetManifest(
        MAGIC.decode(), len(videos), num_classes, offsets,
        list(names) if names is not None else class_names(num_classes),
        dict(generator or {}),
    )
    Path(str(path) + ".manifest").write_text(manifest.to_text())
    return manifest


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetTruncatedError(f"unexpected end of data at byte {self.pos} (need {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_dataset(path) -> tuple[list[PointCloudVideo], int]:
    """Read a ``PCV1`` file. Returns ``(videos, num_classes)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetTruncatedError("file shorter than the magic tag")
    magic = raw[:4]
    if magic != MAGIC:
        if magic[:3] == _MAGIC_PREFIX:
            raise DatasetVersionError(f"unsupported container version {magic!r}, expected {MAGIC!r}")
        raise DatasetFormatError(f"bad magic bytes {magic!r}")
    if len(raw) < 4 + 8 + 8:
        raise DatasetTruncatedError("file shorter than header + checksum")
    r = _Reader(raw[4:-8])
    num_videos, num_classes = r.u32(), r.u32()
    videos = []
    # a cut file shifts the checksum into the payload window, so the record
    # walk runs out of bytes and raises DatasetTruncatedError
    for _ in range(num_videos):
        vid = r.take(r.u32()).decode("utf-8")
        label, t_raw = r.u32(), r.u32()
        frames = []
        for _ in range(t_raw):
            p = r.u32()
            frames.append(np.frombuffer(r.take(12 * p), dtype="<f4").reshape(p, 3).astype(np.float32))
        videos.append(PointCloudVideo(frames, label, vid))
    (stored,) = struct.unpack("<Q", raw[-8:])
    if r.pos != len(r.data):
        # leftover bytes: either the file was cut mid-checksum or padded
        if zlib.crc32(raw[4:-8]) & 0xFFFFFFFF != stored:
            raise DatasetTruncatedError("record stream does not end at the checksum")
        raise DatasetFormatError("trailing bytes after last record")
    if zlib.crc32(raw[4:-8]) & 0xFFFFFFFF != stored:
        raise DatasetChecksumError("payload checksum mismatch")
    if any(v.label >= num_classes for v in videos):
        raise DatasetFormatError("label out of range")
    return videos, num_classes


def read_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_text(Path(str(path) + ".manifest").read_text())
