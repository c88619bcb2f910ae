"""Scene classification and frame-based event detection scores.

Per-class F-scores of classes that appear in neither the reference nor the
predictions are reported as 0 and left out of macro averages; a class that is
referenced but never predicted (or vice versa) counts as 0 in the macro mean.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


@dataclass
class SceneReport:
    micro_f: float
    macro_f: float
    recall: np.ndarray
    f: np.ndarray
    confusion: np.ndarray  # rows: reference, columns: prediction


@dataclass
class EventReport:
    micro_f: float
    macro_f: float
    f: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray


@dataclass
class MetricsReport:
    scene: SceneReport
    event: EventReport
    scene_labels: list
    event_labels: list

    def rows(self):
        """``(metric, class, value)`` triples; aggregate metrics use class ``all``."""
        s, e = self.scene, self.event
        out = [("scene.micro_f", "all", s.micro_f), ("scene.macro_f", "all", s.macro_f)]
        for i, lab in enumerate(self.scene_labels):
            out += [("scene.recall", lab, s.recall[i]), ("scene.f", lab, s.f[i])]
        out += [("event.micro_f", "all", e.micro_f), ("event.macro_f", "all", e.macro_f)]
        for i, lab in enumerate(self.event_labels):
            out += [("event.f", lab, e.f[i]), ("event.tp", lab, e.tp[i]),
                    ("event.fp", lab, e.fp[i]), ("event.fn", lab, e.fn[i])]
        return [(m, c, float(v)) for m, c, v in out]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "class", "value"])
        for m, c, v in self.rows():
            w.writerow([m, c, f"{v:.12g}"])
        return buf.getvalue()

    def to_table(self):
        s, e = self.scene, self.event
        lines = ["Scene classification",
                 f"  micro-F {s.micro_f:.6f}   macro-F {s.macro_f:.6f}",
                 f"  {'class':<24}{'recall':>10}{'F':>10}"]
        for i, lab in enumerate(self.scene_labels):
            lines.append(f"  {lab:<24}{s.recall[i]:>10.6f}{s.f[i]:>10.6f}")
        lines += ["Event detection (frame-based)",
                  f"  micro-F {e.micro_f:.6f}   macro-F {e.macro_f:.6f}",
                  f"  {'class':<24}{'F':>10}{'TP':>8}{'FP':>8}{'FN':>8}"]
        for i, lab in enumerate(self.event_labels):
            lines.append(f"  {lab:<24}{e.f[i]:>10.6f}{int(e.tp[i]):>8d}{int(e.fp[i]):>8d}{int(e.fn[i]):>8d}")
        return "\n".join(lines)


def binarize_event_roll(y, threshold=0.5):
    return (np.asarray(y) > threshold).astype(np.uint8)


def scene_metrics(predictions, references, n_classes):
    pred = np.asarray(predictions, dtype=int)
    ref = np.asarray(references, dtype=int)
    if pred.shape != ref.shape:
        raise ValueError("predictions and references differ in length")
    if pred.size == 0:
        raise ValueError("no scene predictions to score")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (ref, pred), 1)
    tp = np.diag(conf).astype(float)
    ref_count, pred_count = conf.sum(axis=1), conf.sum(axis=0)
    recall = np.where(ref_count > 0, tp / np.maximum(ref_count, 1), 0.0)
    f = _f1(tp, pred_count - tp, ref_count - tp)
    seen = (ref_count + pred_count) > 0
    return SceneReport(float(tp.sum() / pred.size), float(f[seen].mean()), recall, f, conf)


def event_counts(pred, ref):
    pred, ref = np.asarray(pred, dtype=bool), np.asarray(ref, dtype=bool)
    if pred.shape != ref.shape:
        raise ValueError(f"prediction roll {pred.shape} and reference roll {ref.shape} differ")
    m = pred.shape[-1]
    pred, ref = pred.reshape(-1, m), ref.reshape(-1, m)
    tp = (pred & ref).sum(axis=0)
    fp = (pred & ~ref).sum(axis=0)
    fn = (~pred & ref).sum(axis=0)
    return tp, fp, fn


def event_metrics(pred, ref):
    tp, fp, fn = event_counts(pred, ref)
    f = _f1(tp, fp, fn)
    seen = (tp + fp + fn) > 0
    micro = float(_f1(tp.sum(), fp.sum(), fn.sum()))
    macro = float(f[seen].mean()) if seen.any() else 0.0
    return EventReport(micro, macro, f, tp, fp, fn)


def predict(model, features, batch_size=16):
    """Scene posteriors ``(n, N)`` and event posteriors ``(n, L, M)`` in inference mode."""
    scenes, events = [], []
    for start in range(0, len(features), batch_size):
        out = model.forward(features[start:start + batch_size], train=False)
        scenes.append(out.scene.data)
        events.append(out.event.data)
    return np.concatenate(scenes), np.concatenate(events)


def evaluate(model, feature_set, threshold=0.5, stats=None):
    """Score ``model`` on a FeatureSet; ``stats`` standardizes inputs when given."""
    if model.arch.n_scenes != feature_set.n_scenes or model.arch.n_events != feature_set.n_events:
        raise ValueError("model and corpus vocabularies differ in size")
    x = feature_set.features
    if stats is not None:
        x = (x - stats.mean[None, :, None]) / stats.std[None, :, None]
    ys, ye = predict(model, x)
    scene = scene_metrics(ys.argmax(axis=1), feature_set.scenes, feature_set.n_scenes)
    event = event_metrics(binarize_event_roll(ye, threshold), feature_set.rolls)
    return MetricsReport(scene, event, list(feature_set.scene_labels), list(feature_set.event_labels))


def read_report_csv(text):
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        out[(row["metric"], row["class"])] = float(row["value"])
    return out
