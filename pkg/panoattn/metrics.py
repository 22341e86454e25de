"""Center-distance matching, AP, TP errors and the composite detection score.

Conventions follow the public driving-benchmark evaluator: 101-point recall
grid, AP integrated over recall ≥ 0.1 with precision floor 0.1, TP errors at
the 2 m match threshold, cones without orientation error, cones and barriers
without velocity error, barrier yaw compared modulo π.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from panoattn.errors import ArgumentError
from panoattn.queries import CLASS_NAMES, Detection, DetectionSet

logger = logging.getLogger("panoattn.metrics")

RECALL_POINTS = 101
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
TP_METRICS = ("trans_err", "scale_err", "orient_err", "vel_err", "attr_err")
TP_LABELS = {"trans_err": "mATE", "scale_err": "mASE", "orient_err": "mAOE", "vel_err": "mAVE", "attr_err": "mAAE"}
# Metrics that are undefined for a class.
TP_EXCLUDED = {
    "traffic_cone": ("orient_err", "vel_err", "attr_err"),
    "barrier": ("vel_err", "attr_err"),
}


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int, float], ...]  # (pred index, gt index, distance)
    unmatched_preds: tuple[int, ...]
    unmatched_gts: tuple[int, ...]


@dataclass(frozen=True)
class MetricsBundle:
    mean_ap: float
    class_ap: dict[str, float]
    class_ap_by_threshold: dict[str, dict[float, float]]
    tp_errors: dict[str, float | None]           # trans_err .. attr_err
    class_tp_errors: dict[str, dict[str, float]] = field(default_factory=dict)
    nds: float = 0.0
    notes: tuple[str, ...] = ()

    @property
    def mate(self) -> float:
        return self.tp_errors["trans_err"]

    @property
    def mase(self) -> float:
        return self.tp_errors["scale_err"]

    @property
    def maoe(self) -> float:
        return self.tp_errors["orient_err"]

    @property
    def mave(self) -> float:
        return self.tp_errors["vel_err"]

    @property
    def maae(self) -> float | None:
        return self.tp_errors["attr_err"]

    def to_dict(self) -> dict:
        return {
            "mAP": self.mean_ap,
            "NDS": self.nds,
            **{TP_LABELS[k]: v for k, v in self.tp_errors.items()},
            "class_ap": self.class_ap,
            "class_ap_by_threshold": {c: {str(d): ap for d, ap in v.items()} for c, v in self.class_ap_by_threshold.items()},
            "class_tp_errors": self.class_tp_errors,
            "notes": list(self.notes),
        }


# ── Pairwise errors ───────────────────────────────────────────


def center_distance(a: Detection, b: Detection) -> float:
    return float(np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))


def velocity_l2(a: Detection, b: Detection) -> float:
    return float(np.hypot(a.velocity[0] - b.velocity[0], a.velocity[1] - b.velocity[1]))


def angle_diff(x: float, y: float, period: float) -> float:
    """Signed smallest difference from y to x, in (-period/2, period/2]."""
    diff = (x - y + period / 2) % period - period / 2
    if diff > np.pi:
        diff -= 2 * np.pi
    return diff


def yaw_diff(gt: Detection, pred: Detection, period: float = 2 * np.pi) -> float:
    return abs(angle_diff(gt.yaw, pred.yaw, period))


def scale_iou(a: Detection, b: Detection) -> float:
    """3-D IoU of the two boxes after aligning centers and yaw."""
    sa, sb = np.array(a.size), np.array(b.size)
    inter = np.prod(np.minimum(sa, sb))
    return float(inter / (np.prod(sa) + np.prod(sb) - inter))


def cummean(x: np.ndarray) -> np.ndarray:
    """NaN-aware running mean; all-NaN input gives ones."""
    if np.isnan(x).all():
        return np.ones(len(x))
    sums = np.nancumsum(x.astype(float))
    counts = np.cumsum(~np.isnan(x))
    return np.divide(sums, counts, out=np.ones_like(sums), where=counts != 0)


# ── Matching and accumulation ─────────────────────────────────


def confidence_order(preds: DetectionSet) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))


def match_center_distance(preds: DetectionSet, gts: DetectionSet, d: float) -> Matching:
    """Greedy: each prediction, most confident first, claims the nearest unclaimed same-class gt if closer than d."""
    if d <= 0:
        raise ArgumentError(f"match distance must be positive, got {d}")
    taken: set[int] = set()
    pairs = []
    unmatched = []
    for i in confidence_order(preds):
        pred = preds[i]
        best, best_dist = None, np.inf
        for j, gt in enumerate(gts):
            if j in taken or gt.class_id != pred.class_id:
                continue
            dist = center_distance(gt, pred)
            if dist < best_dist:
                best, best_dist = j, dist
        if best is not None and best_dist < d:
            taken.add(best)
            pairs.append((i, best, best_dist))
        else:
            unmatched.append(i)
    return Matching(
        pairs=tuple(pairs),
        unmatched_preds=tuple(unmatched),
        unmatched_gts=tuple(j for j in range(len(gts)) if j not in taken),
    )


@dataclass(frozen=True)
class _Curve:
    precision: np.ndarray    # on the recall grid
    confidence: np.ndarray
    errors: dict[str, np.ndarray]

    @classmethod
    def empty(cls) -> "_Curve":
        return cls(
            precision=np.zeros(RECALL_POINTS),
            confidence=np.zeros(RECALL_POINTS),
            errors={k: np.ones(RECALL_POINTS) for k in TP_METRICS[:4]},
        )

    @property
    def max_recall_index(self) -> int:
        nonzero = np.flatnonzero(self.confidence)
        return int(nonzero[-1]) if len(nonzero) else 0


def _accumulate(preds: DetectionSet, gts: DetectionSet, class_name: str, d: float) -> _Curve:
    """Precision, confidence and TP error curves of one class at one distance threshold."""
    npos = len(gts)
    matching = match_center_distance(preds, gts, d)
    if not matching.pairs:
        return _Curve.empty()

    matched = {i: (j, dist) for i, j, dist in matching.pairs}
    order = confidence_order(preds)
    tp = np.array([1.0 if i in matched else 0.0 for i in order])
    conf = np.array([preds[i].confidence for i in order])
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    prec = tp_cum / (tp_cum + fp_cum)
    rec = tp_cum / npos

    # First detection to reach each recall value.
    rec, first = np.unique(rec, return_index=True)
    grid = np.linspace(0.0, 1.0, RECALL_POINTS)
    precision = np.interp(grid, rec, prec[first], right=0)
    confidence = np.interp(grid, rec, conf[first], right=0)

    period = np.pi if class_name == "barrier" else 2 * np.pi
    tp_conf, raw = [], {k: [] for k in TP_METRICS[:4]}
    for i in order:
        if i not in matched:
            continue
        gt, pred = gts[matched[i][0]], preds[i]
        tp_conf.append(pred.confidence)
        raw["trans_err"].append(matched[i][1])
        raw["scale_err"].append(1.0 - scale_iou(gt, pred))
        raw["orient_err"].append(yaw_diff(gt, pred, period))
        raw["vel_err"].append(velocity_l2(gt, pred))

    tp_conf = np.array(tp_conf)
    errors = {}
    for key, values in raw.items():
        running = cummean(np.array(values))
        errors[key] = np.interp(confidence[::-1], tp_conf[::-1], running[::-1])[::-1]
    return _Curve(precision=precision, confidence=confidence, errors=errors)


def calc_ap(precision: np.ndarray, min_recall: float = MIN_RECALL, min_precision: float = MIN_PRECISION) -> float:
    """Normalized area under the precision curve above min_recall and min_precision."""
    prec = np.copy(precision)[round(100 * min_recall) + 1:]
    prec -= min_precision
    prec[prec < 0] = 0
    return float(min(1.0, np.mean(prec) / (1.0 - min_precision)))


def calc_tp(curve: _Curve, key: str, min_recall: float = MIN_RECALL) -> float:
    first = round(100 * min_recall) + 1
    last = curve.max_recall_index
    if last < first:
        return 1.0
    return float(np.mean(curve.errors[key][first:last + 1]))


def average_precision(preds: DetectionSet, gts: DetectionSet, d: float,
                      class_id: int | None = None) -> float | None:
    """AP of one class (or of every class present, averaged) at distance threshold d.

    Returns None when no ground truth exists for the requested class(es).
    """
    classes = [class_id] if class_id is not None else sorted({g.class_id for g in gts})
    aps = []
    for c in classes:
        class_gts = gts.of_class(c)
        if not len(class_gts):
            continue
        curve = _accumulate(preds.of_class(c), class_gts, CLASS_NAMES[c], d)
        aps.append(calc_ap(curve.precision))
    return float(np.mean(aps)) if aps else None


# ── Composite score ───────────────────────────────────────────


def nds_score(mean_ap: float, tp_errors: dict[str, float | None]) -> float:
    """(5·mAP + Σ (1 - min(1, e))) / 10; absent terms drop out of the denominator."""
    present = [e for e in tp_errors.values() if e is not None]
    tp_scores = [1.0 - min(1.0, e) for e in present]
    total_weight = 5 + len(present)
    return float((5.0 * mean_ap + sum(tp_scores)) / total_weight)


def compute_nds(bundle: MetricsBundle) -> float:
    return nds_score(bundle.mean_ap, bundle.tp_errors)


def evaluate(preds: DetectionSet, gts: DetectionSet, dist_thresholds=DIST_THRESHOLDS,
             tp_threshold: float = TP_THRESHOLD) -> MetricsBundle:
    """Full evaluation of one scene; classes without ground truth are skipped."""
    class_ap: dict[str, float] = {}
    by_threshold: dict[str, dict[float, float]] = {}
    class_tp: dict[str, dict[str, float]] = {}
    notes = ["attributes are not modelled: mAAE is omitted and NDS is renormalised over 9"]

    for c, name in enumerate(CLASS_NAMES):
        class_gts = gts.of_class(c)
        if not len(class_gts):
            continue
        class_preds = preds.of_class(c)
        by_threshold[name] = {}
        for d in dist_thresholds:
            curve = _accumulate(class_preds, class_gts, name, d)
            by_threshold[name][float(d)] = calc_ap(curve.precision)
            if d == tp_threshold:
                tp_curve = curve
        if tp_threshold not in dist_thresholds:
            tp_curve = _accumulate(class_preds, class_gts, name, tp_threshold)
        class_ap[name] = float(np.mean(list(by_threshold[name].values())))
        class_tp[name] = {
            key: calc_tp(tp_curve, key)
            for key in TP_METRICS[:4]
            if key not in TP_EXCLUDED.get(name, ())
        }

    if not class_ap:
        logger.warning("no ground truth in any class; metrics default to the worst case")
        notes.append("no ground truth present")
    skipped = [n for n in CLASS_NAMES if n not in class_ap]
    if skipped and class_ap:
        logger.debug(f"classes without ground truth skipped: {skipped}")

    mean_ap = float(np.mean(list(class_ap.values()))) if class_ap else 0.0
    tp_errors: dict[str, float | None] = {}
    for key in TP_METRICS[:4]:
        values = [errs[key] for errs in class_tp.values() if key in errs]
        tp_errors[key] = float(np.mean(values)) if values else 1.0
    tp_errors["attr_err"] = None

    bundle = MetricsBundle(
        mean_ap=mean_ap,
        class_ap=class_ap,
        class_ap_by_threshold=by_threshold,
        tp_errors=tp_errors,
        class_tp_errors=class_tp,
        notes=tuple(notes),
    )
    return replace(bundle, nds=compute_nds(bundle))


def format_report(bundle: MetricsBundle) -> str:
    """Plain-text report: summary, TP errors, per-class AP table."""
    lines = [f"mAP: {bundle.mean_ap:.4f}", f"NDS: {bundle.nds:.4f}"]
    for key in TP_METRICS:
        value = bundle.tp_errors[key]
        lines.append(f"{TP_LABELS[key]}: {'n/a' if value is None else f'{value:.4f}'}")
    lines.append("")
    header = f"{'class':<22}{'AP':>8}{'ATE':>8}{'ASE':>8}{'AOE':>8}{'AVE':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for name in CLASS_NAMES:
        if name not in bundle.class_ap:
            lines.append(f"{name:<22}{'-':>8}")
            continue
        errs = bundle.class_tp_errors.get(name, {})
        cells = "".join(f"{errs[k]:>8.3f}" if k in errs else f"{'n/a':>8}" for k in TP_METRICS[:4])
        lines.append(f"{name:<22}{bundle.class_ap[name]:>8.3f}{cells}")
    if bundle.notes:
        lines.append("")
        lines.extend(f"note: {n}" for n in bundle.notes)
    return "\n".join(lines) + "\n"
