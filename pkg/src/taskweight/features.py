"""Log mel-band energies and frame-level event targets.

Feature cache layout (one ``.twf`` file per clip, little-endian)::

    4 bytes   magic b"TWFC"
    4 x int64 D (mel bins), L (frames), scene index, M (event classes)
    D*L float64  log-mel matrix, row-major (mel bin major)
    ceil(L*M/8) bytes  event roll, row-major L x M, np.packbits (big bit order)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CACHE_MAGIC = b"TWFC"


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


@dataclass(frozen=True)
class FeatureConfig:
    frame_length: float = 0.040
    hop: float = 0.020
    n_mels: int = 64
    fft_size: int | None = None
    floor_epsilon: float = 1e-10
    pad_end: bool = False

    def __post_init__(self):
        if not 0 < self.hop <= self.frame_length:
            raise ValueError("hop must satisfy 0 < hop <= frame_length")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not self.floor_epsilon > 0:
            raise ValueError("floor_epsilon must be positive")

    def frame_samples(self, sample_rate):
        return int(round(self.frame_length * sample_rate))

    def hop_samples(self, sample_rate):
        return int(round(self.hop * sample_rate))

    def fft_for(self, sample_rate):
        n = self.frame_samples(sample_rate)
        if self.fft_size is None:
            return 1 << max(0, (n - 1).bit_length())
        if self.fft_size < n or self.fft_size & (self.fft_size - 1):
            raise ValueError(f"fft_size must be a power of two >= {n}")
        return self.fft_size

    def to_dict(self):
        return asdict(self)


@dataclass
class FeatureMatrix:
    values: np.ndarray  # D x L

    @property
    def d_mels(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]


def mel_center_frequencies(n_mels, sample_rate):
    pts = np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2)
    return mel_to_hz(pts[1:-1])


def mel_filterbank(n_mels, fft_size, sample_rate):
    """Triangular filters on the 2595*log10(1 + f/700) mel scale, 0 Hz to Nyquist.

    Returns an ``n_mels x (fft_size // 2 + 1)`` matrix with unit-height peaks.
    """
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ValueError(f"{n_mels} mel bands too many for fft_size {fft_size}: band {empty[0]} covers no FFT bin")
    return fb


def frame_count(n_samples, frame, hop):
    return (n_samples - frame) // hop + 1


def log_mel_energy(clip, config=FeatureConfig()):
    """``D x L`` natural-log mel energies of a clip (Hann window, power spectrum)."""
    sr = clip.sample_rate
    frame, hop = config.frame_samples(sr), config.hop_samples(sr)
    fft = config.fft_for(sr)
    x = np.asarray(clip.samples, dtype=np.float64)
    if config.pad_end:
        x = np.concatenate([x, np.zeros(frame - hop)])
    if len(x) < frame or len(x) == 0:
        raise ValueError(f"clip has {len(clip.samples)} samples, shorter than one {frame}-sample frame")
    n = frame_count(len(x), frame, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop][:n]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(frame) / frame)
    power = np.abs(np.fft.rfft(frames * window, n=fft, axis=1)) ** 2
    energy = mel_filterbank(config.n_mels, fft, sr) @ power.T
    return FeatureMatrix(np.log(energy + config.floor_epsilon))


def frame_targets(events, hop, n_frames, n_events):
    """Binary ``L x M`` roll: frame l is active for class m when its time
    ``(l + 0.5) * hop`` falls in ``[onset, offset)`` of an annotation of class m."""
    roll = np.zeros((n_frames, n_events), dtype=np.uint8)
    t = (np.arange(n_frames) + 0.5) * hop
    tol = 1e-9
    for e in events:
        if not 0 <= e.event_class < n_events:
            raise ValueError(f"event class {e.event_class} outside [0, {n_events})")
        active = (t >= e.onset - tol) & (t < e.offset - tol)
        roll[active, e.event_class] = 1
    return roll


@dataclass
class FeatureSet:
    """Features and targets of a corpus, stacked. ``features`` is ``(n, D, L)``."""

    features: np.ndarray
    scenes: np.ndarray
    rolls: np.ndarray
    names: list = field(default_factory=list)
    scene_labels: list = field(default_factory=list)
    event_labels: list = field(default_factory=list)

    def __len__(self):
        return len(self.scenes)

    @property
    def n_scenes(self):
        return len(self.scene_labels)

    @property
    def n_events(self):
        return len(self.event_labels)

    def subset(self, index):
        index = np.asarray(index, dtype=int)
        return FeatureSet(self.features[index], self.scenes[index], self.rolls[index],
                          [self.names[i] for i in index], self.scene_labels, self.event_labels)


def extract_features(clips, scene_labels, event_labels, config=FeatureConfig()):
    """Stack features and rolls of ``clips``; longer clips are cropped to the shortest."""
    mats, rolls = [], []
    for c in clips:
        fm = log_mel_energy(c, config).values
        mats.append(fm)
        rolls.append(frame_targets(c.events, config.hop, fm.shape[1], len(event_labels)))
    return stack_features(mats, rolls, [c.scene_class for c in clips], [c.name for c in clips],
                          scene_labels, event_labels)


def stack_features(mats, rolls, scenes, names, scene_labels, event_labels):
    length = min(m.shape[1] for m in mats)
    return FeatureSet(np.stack([m[:, :length] for m in mats]), np.asarray(scenes, dtype=np.int64),
                      np.stack([r[:length] for r in rolls]), list(names), list(scene_labels), list(event_labels))

# ---------------------------------------------------------------------------
# cache files


def write_feature_cache(path, values, scene, roll):
    values = np.ascontiguousarray(values, dtype="<f8")
    roll = np.asarray(roll, dtype=np.uint8)
    d, length = values.shape
    if roll.shape[0] != length:
        raise ValueError("roll and feature matrix disagree on frame count")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(np.array([d, length, scene, roll.shape[1]], dtype="<i8").tobytes())
        fh.write(values.tobytes())
        fh.write(np.packbits(roll.reshape(-1)).tobytes())


def read_feature_cache(path):
    """Returns ``(values D x L, scene index, roll L x M)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    d, length, scene, m = (int(v) for v in np.frombuffer(raw, dtype="<i8", count=4, offset=4))
    off = 36
    values = np.frombuffer(raw, dtype="<f8", count=d * length, offset=off).reshape(d, length).copy()
    off += 8 * d * length
    bits = np.frombuffer(raw, dtype=np.uint8, offset=off)
    roll = np.unpackbits(bits)[:length * m].reshape(length, m)
    return values, scene, roll


def cache_key(corpus_hash, config):
    blob = json.dumps({"corpus": corpus_hash, "features": config.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cached_features(data_dir, config=FeatureConfig()):
    """FeatureSet of a corpus directory, computed once and cached under ``.cache/``.

    The cache directory name is derived from the corpus content hash and the
    feature configuration, so a changed corpus or config never hits a stale entry.
    """
    from .dataset import corpus_fingerprint, load_corpus_dir

    data_dir = Path(data_dir)
    key = cache_key(corpus_fingerprint(data_dir), config)
    cdir = data_dir / ".cache" / f"features-{key}"
    index = cdir / "index.json"
    if index.exists():
        meta = json.loads(index.read_text(encoding="utf-8"))
        mats, rolls, scenes = [], [], []
        for name in meta["names"]:
            v, s, r = read_feature_cache(cdir / f"{name}.twf")
            mats.append(v)
            rolls.append(r)
            scenes.append(s)
        return stack_features(mats, rolls, scenes, meta["names"], meta["scenes"], meta["events"])
    clips, scene_labels, event_labels = load_corpus_dir(data_dir)
    fs = extract_features(clips, scene_labels, event_labels, config)
    cdir.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(fs.names):
        write_feature_cache(cdir / f"{name}.twf", fs.features[i], int(fs.scenes[i]), fs.rolls[i])
    index.write_text(json.dumps({"names": fs.names, "scenes": scene_labels, "events": event_labels}), encoding="utf-8")
    return fs
