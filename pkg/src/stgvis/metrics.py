"""Video instance segmentation metrics on mask tubes.

A tube is one identity's per-frame masks. Tube IoU sums intersections and
unions over frames. AP/AR follow the COCO conventions: IoU thresholds
0.50:0.05:0.95, 101-point interpolated precision, greedy matching of
predictions in descending confidence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

IOU_THRESHOLDS = np.round(0.5 + 0.05 * np.arange(10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


# ------------------------------------------------------------------------ RLE

@dataclass(frozen=True)
class MaskRLE:
    height: int
    width: int
    runs: tuple[int, ...]

    def to_string(self) -> str:
        return " ".join(str(v) for v in (self.height, self.width, *self.runs))

    @classmethod
    def from_string(cls, text: str) -> "MaskRLE":
        try:
            vals = [int(v) for v in text.split()]
        except ValueError:
            raise ValueError(f"malformed RLE string {text[:40]!r}") from None
        if len(vals) < 3:
            raise ValueError(f"RLE string needs height, width and runs: {text[:40]!r}")
        return cls(vals[0], vals[1], tuple(vals[2:]))


def rle_encode(mask) -> MaskRLE:
    """Alternating zero/one run lengths over the row-major flattening."""
    m = np.asarray(mask)
    flat = m.astype(bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return MaskRLE(int(m.shape[0]), int(m.shape[1]), tuple(int(r) for r in runs))


def rle_decode(r: MaskRLE) -> np.ndarray:
    total = sum(r.runs)
    if total != r.height * r.width:
        raise ValueError(f"RLE runs sum to {total}, expected {r.height}x{r.width}={r.height * r.width}")
    values = np.arange(len(r.runs)) % 2 == 1
    return np.repeat(values, r.runs).reshape(r.height, r.width)


# ---------------------------------------------------------------------- tubes

@dataclass
class Tube:
    """One identity: per-frame boolean masks, class, and (for predictions) a score."""
    track_id: int
    class_id: int
    masks: dict[int, np.ndarray]
    score: float = 1.0

    @property
    def frames(self) -> list[int]:
        return sorted(self.masks)


def tube_iou(pred: Tube, gt: Tube, frames=None) -> float:
    frames = sorted(set(pred.masks) | set(gt.masks)) if frames is None else frames
    inter = union = 0
    for f in frames:
        p, g = pred.masks.get(f), gt.masks.get(f)
        if p is None and g is None:
            continue
        if p is None:
            union += int(np.count_nonzero(g))
        elif g is None:
            union += int(np.count_nonzero(p))
        else:
            inter += int(np.count_nonzero(p & g))
            union += int(np.count_nonzero(p | g))
    return inter / union if union else 0.0


# -------------------------------------------------------------------- AP / AR

@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ar1: float
    ar10: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75, "AR1": self.ar1,
                "AR10": self.ar10, "per_class": {str(k): v for k, v in sorted(self.per_class.items())}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'metric':<8}{'value':>8}"]
        for key in ("AP", "AP50", "AP75", "AR1", "AR10"):
            lines.append(f"{key:<8}{self.to_dict()[key]:>8.4f}")
        lines.append("")
        lines.append(f"{'class':<8}{'AP':>8}{'AP50':>8}{'AP75':>8}{'AR10':>8}")
        for cls, row in sorted(self.per_class.items()):
            lines.append(f"{cls:<8}{row['AP']:>8.4f}{row['AP50']:>8.4f}{row['AP75']:>8.4f}{row['AR10']:>8.4f}")
        return "\n".join(lines) + "\n"


def _ranked(preds: list[Tube]) -> list[Tube]:
    return sorted(preds, key=lambda t: (-t.score, t.track_id))


def _match_video(preds: list[Tube], gts: list[Tube], thr: float) -> list[tuple[float, bool]]:
    ious = np.array([[tube_iou(p, g) for g in gts] for p in preds]).reshape(len(preds), len(gts))
    used = np.zeros(len(gts), dtype=bool)
    out = []
    for i, p in enumerate(preds):
        best, best_j = thr, -1
        for j in range(len(gts)):
            if not used[j] and ious[i, j] >= best:
                best, best_j = ious[i, j], j
        if best_j >= 0:
            used[best_j] = True
        out.append((p.score, best_j >= 0))
    return out


def _pr_stats(records: list[tuple[float, bool]], num_gt: int) -> tuple[float, float]:
    """(101-point interpolated AP, final recall)."""
    if not records:
        return 0.0, 0.0
    order = np.argsort([-s for s, _ in records], kind="mergesort")
    tp = np.array([records[i][1] for i in order], dtype=float)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean()), float(recall[-1])


def evaluate(preds: dict, gts: dict, thresholds=IOU_THRESHOLDS, max_dets: int = 100) -> EvalReport:
    """``preds``/``gts`` map video id -> list of Tube. Classes absent from GT are skipped."""
    thresholds = np.asarray(thresholds, dtype=float)
    videos = sorted(set(gts) | set(preds))
    classes = sorted({t.class_id for v in videos for t in gts.get(v, [])})
    per_class = {}
    ap = np.zeros((len(classes), len(thresholds)))
    ar = {1: np.zeros_like(ap), 10: np.zeros_like(ap)}
    for ci, cls in enumerate(classes):
        gt_c = {v: [t for t in gts.get(v, []) if t.class_id == cls] for v in videos}
        pr_c = {v: _ranked([t for t in preds.get(v, []) if t.class_id == cls]) for v in videos}
        num_gt = sum(len(g) for g in gt_c.values())
        for ti, thr in enumerate(thresholds):
            recs = []
            for v in videos:
                recs += _match_video(pr_c[v][:max_dets], gt_c[v], thr)
            ap[ci, ti], _ = _pr_stats(recs, num_gt)
            for n in ar:
                recs_n = []
                for v in videos:
                    recs_n += _match_video(pr_c[v][:n], gt_c[v], thr)
                ar[n][ci, ti] = _pr_stats(recs_n, num_gt)[1]
        per_class[cls] = {"AP": float(ap[ci].mean()), "AP50": _at(ap[ci], thresholds, 0.5),
                          "AP75": _at(ap[ci], thresholds, 0.75), "AR10": float(ar[10][ci].mean())}
    if not classes:
        return EvalReport(0.0, 0.0, 0.0, 0.0, 0.0, {})
    return EvalReport(
        ap=float(ap.mean()),
        ap50=float(np.mean([_at(row, thresholds, 0.5) for row in ap])),
        ap75=float(np.mean([_at(row, thresholds, 0.75) for row in ap])),
        ar1=float(ar[1].mean()), ar10=float(ar[10].mean()), per_class=per_class)


def _at(row: np.ndarray, thresholds: np.ndarray, t: float) -> float:
    hit = np.flatnonzero(np.isclose(thresholds, t))
    return float(row[hit[0]]) if len(hit) else float("nan")


# ---------------------------------------------------------------- file format

def predictions_to_json(preds: dict) -> str:
    """JSON list of {video_id, track_id, class, score, frames: [{frame_index, rle}]}."""
    rows = []
    for vid in sorted(preds):
        for t in sorted(preds[vid], key=lambda t: t.track_id):
            rows.append({"video_id": vid, "track_id": int(t.track_id), "class": int(t.class_id),
                         "score": float(t.score),
                         "frames": [{"frame_index": int(f), "rle": rle_encode(t.masks[f]).to_string()}
                                    for f in t.frames]})
    return json.dumps(rows, indent=1)


def predictions_from_json(text: str) -> dict:
    out: dict = {}
    for row in json.loads(text):
        masks = {int(fr["frame_index"]): rle_decode(MaskRLE.from_string(fr["rle"])) for fr in row["frames"]}
        out.setdefault(row["video_id"], []).append(
            Tube(int(row["track_id"]), int(row["class"]), masks, float(row["score"])))
    return out
