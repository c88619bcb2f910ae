"""Labeled clips: deterministic synthesis, TUT-style ingestion, stratified splits."""

from __future__ import annotations

import hashlib
import json
import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

EVENT_AMPLITUDE = 0.3
BACKGROUND_AMPLITUDE = 0.05
MIN_EVENT_DURATION = 0.2
RAMP_SECONDS = 0.01


class ValidationError(ValueError):
    """A configuration value is out of range; ``field`` names it."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class AnnotationParseError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass(frozen=True)
class EventAnnotation:
    onset: float
    offset: float
    event_class: int


@dataclass
class Clip:
    samples: np.ndarray
    sample_rate: int
    scene_class: int
    events: list = field(default_factory=list)
    name: str = ""

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class CorpusSpec:
    n_scenes: int
    n_events: int
    co_occurrence: list
    clips_per_scene: int
    clip_duration: float
    sample_rate: int = 16000
    seed: int = 0
    scene_labels: list | None = None
    event_labels: list | None = None

    def validate(self):
        if int(self.n_scenes) < 2:
            raise ValidationError("n_scenes", "need at least 2 scenes")
        if int(self.n_events) < 1:
            raise ValidationError("n_events", "need at least 1 event class")
        co = np.asarray(self.co_occurrence, dtype=float)
        if co.shape != (self.n_scenes, self.n_events):
            raise ValidationError("co_occurrence", f"expected shape ({self.n_scenes}, {self.n_events}), got {co.shape}")
        if not np.all(np.isfinite(co)) or co.min() < 0 or co.max() > 1:
            raise ValidationError("co_occurrence", "probabilities must lie in [0, 1]")
        if int(self.clips_per_scene) < 1:
            raise ValidationError("clips_per_scene", "must be positive")
        if not self.clip_duration > 2 * MIN_EVENT_DURATION:
            raise ValidationError("clip_duration", f"must exceed {2 * MIN_EVENT_DURATION} s")
        if int(self.sample_rate) <= 0 or int(self.sample_rate) != self.sample_rate:
            raise ValidationError("sample_rate", "must be a positive integer")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValidationError("seed", "must be a 64-bit unsigned integer")
        for name, count in (("scene_labels", self.n_scenes), ("event_labels", self.n_events)):
            labels = getattr(self, name)
            if labels is not None and (len(labels) != count or len(set(labels)) != count):
                raise ValidationError(name, f"need {count} distinct labels")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {"n_scenes", "n_events", "co_occurrence", "clips_per_scene", "clip_duration", "sample_rate", "seed"}
        known |= {"scene_labels", "event_labels"}
        extra = set(d) - known
        if extra:
            raise ValidationError(sorted(extra)[0], "unknown field")
        missing = {"n_scenes", "n_events", "co_occurrence", "clips_per_scene", "clip_duration"} - set(d)
        if missing:
            raise ValidationError(sorted(missing)[0], "missing field")
        return cls(**{k: d[k] for k in known if k in d}).validate()


def event_frequency(event_class):
    return 200.0 + 120.0 * event_class


def scene_band(scene_class, n_scenes, sample_rate):
    """Pass band of a scene's background noise, kept clear of the event tones."""
    nyq = sample_rate / 2
    lo_edge, hi_edge = 1500.0, 0.95 * nyq
    width = (hi_edge - lo_edge) / n_scenes
    lo = lo_edge + scene_class * width
    return lo, lo + width


def _band_noise(rng, n, sample_rate, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    peak = np.max(np.abs(x))
    return x / peak if peak > 0 else x


def _render_event(rng, event_class, n, sample_rate):
    f0 = event_frequency(event_class)
    if event_class % 2 == 0:
        t = np.arange(n) / sample_rate
        x = np.sin(2 * np.pi * f0 * t)
    else:
        x = _band_noise(rng, n, sample_rate, f0 - 40.0, f0 + 40.0)
    ramp = min(int(RAMP_SECONDS * sample_rate), n // 2)
    if ramp > 0:
        env = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        x[:ramp] *= env
        x[n - ramp:] *= env[::-1]
    return EVENT_AMPLITUDE * x


def _synthesize_clip(spec, co, scene, index, seed_seq):
    rng = np.random.default_rng(seed_seq)
    sr = int(spec.sample_rate)
    n = int(round(spec.clip_duration * sr))
    lo, hi = scene_band(scene, spec.n_scenes, sr)
    x = BACKGROUND_AMPLITUDE * _band_noise(rng, n, sr, lo, hi)
    events = []
    include = rng.random(spec.n_events) < co[scene]
    for m in np.flatnonzero(include):
        dur = rng.uniform(MIN_EVENT_DURATION, spec.clip_duration / 2)
        onset = round(rng.uniform(0.0, spec.clip_duration - MIN_EVENT_DURATION), 3)
        offset = round(min(onset + dur, spec.clip_duration), 3)
        a, b = int(round(onset * sr)), int(round(offset * sr))
        x[a:b] += _render_event(rng, int(m), b - a, sr)
        events.append(EventAnnotation(onset, offset, int(m)))
    events.sort(key=lambda e: (e.onset, e.event_class))
    return Clip(np.clip(x, -1.0, 1.0), sr, scene, events, name=f"clip_{index:05d}")


def synthesize_corpus(spec):
    """Deterministic synthetic corpus with ``clips_per_scene`` clips per scene.

    Each clip gets its own child seed, so any subset can be regenerated
    independently and parallel generation equals sequential generation.
    """
    spec.validate()
    co = np.asarray(spec.co_occurrence, dtype=float)
    total = spec.n_scenes * spec.clips_per_scene
    children = np.random.SeedSequence(int(spec.seed)).spawn(total)
    clips = []
    for i in range(total):
        scene = i // spec.clips_per_scene
        clips.append(_synthesize_clip(spec, co, scene, i, children[i]))
    return clips


def split_corpus(clips, dev_fraction, seed=0):
    """Stratified (dev, eval) partition.

    The dev side gets ``round(len(clips) * dev_fraction)`` clips, shared out
    across scenes by largest remainder, with every scene keeping at least one
    clip on each side. Input order is preserved within each side.
    """
    if not 0 < dev_fraction < 1:
        raise ValidationError("dev_fraction", "must lie in (0, 1)")
    by_scene = {}
    for i, c in enumerate(clips):
        by_scene.setdefault(c.scene_class, []).append(i)
    scenes = sorted(by_scene)
    for s in scenes:
        if len(by_scene[s]) < 2:
            raise ValidationError("clips", f"scene {s} has fewer than 2 clips")
    exact = np.array([len(by_scene[s]) * dev_fraction for s in scenes])
    quota = np.floor(exact).astype(int)
    short = int(round(len(clips) * dev_fraction)) - int(quota.sum())
    order = sorted(range(len(scenes)), key=lambda k: (-(exact[k] - quota[k]), k))
    for k in order[:max(short, 0)]:
        quota[k] += 1
    rng = np.random.default_rng(seed)
    dev_set = set()
    for k, s in enumerate(scenes):
        idx = by_scene[s]
        q = min(max(int(quota[k]), 1), len(idx) - 1)
        dev_set.update(rng.permutation(idx)[:q].tolist())
    dev = [c for i, c in enumerate(clips) if i in dev_set]
    ev = [c for i, c in enumerate(clips) if i not in dev_set]
    return dev, ev

# ---------------------------------------------------------------------------
# on-disk corpora


def read_wav(path):
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        sr = w.getframerate()
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr


def write_wav(path, samples, sample_rate):
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def _parse_annotation_file(path, vocab, duration):
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise AnnotationParseError(path, lineno, "expected onset<TAB>offset<TAB>label")
            try:
                onset, offset = float(parts[0]), float(parts[1])
            except ValueError:
                raise AnnotationParseError(path, lineno, "non-numeric onset/offset") from None
            if not (np.isfinite(onset) and np.isfinite(offset)) or onset < 0 or onset >= offset:
                raise AnnotationParseError(path, lineno, f"need 0 <= onset < offset, got {onset}, {offset}")
            label = parts[2].strip()
            if label not in vocab:
                if vocab.frozen:
                    raise AnnotationParseError(path, lineno, f"unknown event label {label!r}")
                vocab.add(label)
            if duration is not None and offset > duration:
                logger.warning("%s:%d: offset %.3f beyond clip end %.3f, clamped", path, lineno, offset, duration)
                offset = duration
                if onset >= offset:
                    continue
            events.append(EventAnnotation(onset, offset, vocab.index(label)))
    return events


class Vocabulary:
    """Label list in first-seen order; ``frozen`` rejects new labels."""

    def __init__(self, labels=(), frozen=False):
        self.labels = list(labels)
        self._index = {lab: i for i, lab in enumerate(self.labels)}
        self.frozen = frozen

    def __contains__(self, label):
        return label in self._index

    def __len__(self):
        return len(self.labels)

    def add(self, label):
        self._index[label] = len(self.labels)
        self.labels.append(label)

    def index(self, label):
        return self._index[label]


def load_tut_annotations(meta_file, annotation_dir, event_vocab=None, scene_vocab=None, load_audio=True):
    """Clips listed in a TUT-style meta file, with their event annotations.

    The meta file has ``audio_path<TAB>scene_label`` lines (paths relative to
    the meta file); each clip's events live in ``<annotation_dir>/<stem>.ann``.
    A missing annotation file means no events. Returns ``(clips, scene_labels,
    event_labels)``.
    """
    meta_file, annotation_dir = Path(meta_file), Path(annotation_dir)
    if not meta_file.is_file():
        raise FileNotFoundError(meta_file)
    events_v = Vocabulary(event_vocab or (), frozen=event_vocab is not None)
    scenes_v = Vocabulary(scene_vocab or (), frozen=scene_vocab is not None)
    clips = []
    with open(meta_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise AnnotationParseError(meta_file, lineno, "expected audio_path<TAB>scene_label")
            audio, scene = parts[0], parts[1].strip()
            if scene not in scenes_v:
                if scenes_v.frozen:
                    raise AnnotationParseError(meta_file, lineno, f"unknown scene label {scene!r}")
                scenes_v.add(scene)
            samples, sr = np.zeros(0), 0
            if load_audio:
                samples, sr = read_wav(meta_file.parent / audio)
            ann = annotation_dir / (Path(audio).stem + ".ann")
            duration = len(samples) / sr if load_audio else None
            events = _parse_annotation_file(ann, events_v, duration) if ann.exists() else []
            clips.append(Clip(samples, sr, scenes_v.index(scene), events, name=Path(audio).stem))
    return clips, scenes_v.labels, events_v.labels


def write_corpus(clips, out_dir, scene_labels, event_labels):
    """Write ``audio/*.wav``, ``annotations/*.ann``, ``meta.txt`` and ``labels.json``."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(exist_ok=True)
    meta_lines = []
    for c in clips:
        write_wav(out / "audio" / f"{c.name}.wav", c.samples, c.sample_rate)
        with open(out / "annotations" / f"{c.name}.ann", "w", encoding="utf-8", newline="\n") as fh:
            for e in c.events:
                fh.write(f"{e.onset:.3f}\t{e.offset:.3f}\t{event_labels[e.event_class]}\n")
        meta_lines.append(f"audio/{c.name}.wav\t{scene_labels[c.scene_class]}\n")
    (out / "meta.txt").write_text("".join(meta_lines), encoding="utf-8")
    (out / "labels.json").write_text(
        json.dumps({"scenes": list(scene_labels), "events": list(event_labels)}, indent=2) + "\n", encoding="utf-8")


def load_corpus_dir(data_dir):
    """Load a corpus directory as written by :func:`write_corpus` (or a TUT layout).

    ``labels.json``, when present, fixes both vocabularies.
    """
    d = Path(data_dir)
    labels = d / "labels.json"
    scene_vocab = event_vocab = None
    if labels.exists():
        lab = json.loads(labels.read_text(encoding="utf-8"))
        scene_vocab, event_vocab = lab["scenes"], lab["events"]
    return load_tut_annotations(d / "meta.txt", d / "annotations", event_vocab, scene_vocab)


def corpus_fingerprint(data_dir):
    """SHA-256 over the meta, label, annotation and audio files of a corpus directory."""
    d = Path(data_dir)
    h = hashlib.sha256()
    files = [p for p in [d / "meta.txt", d / "labels.json"] if p.exists()]
    files += sorted((d / "annotations").glob("*.ann")) + sorted((d / "audio").glob("*.wav"))
    for p in files:
        h.update(str(p.relative_to(d)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def corpus_labels(spec):
    scenes = list(spec.scene_labels or [f"scene{s:02d}" for s in range(spec.n_scenes)])
    events = list(spec.event_labels or [f"event{m:02d}" for m in range(spec.n_events)])
    return scenes, events
