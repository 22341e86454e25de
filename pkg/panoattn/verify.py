"""Oracle suite run by `panoattn verify`.

Oracles register themselves with a decorator and receive the validated run
config; each returns (passed, detail, metric). Add an oracle with:

    @oracle(name="my_check", description="What it compares")
    def my_check(config: RunConfig) -> tuple[bool, str, float | None]:
        ...
"""

import logging
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy.stats import qmc

from panoattn.attention import (
    MAX_ORACLE_POSITIONS,
    attention_forward,
    full_attention_oracle,
    init_attention_params,
    partition_pair_mask,
    windowed_attention,
)
from panoattn.config import DEFAULTS, PROFILES, RunConfig, _deep_merge
from panoattn.encoder import EncoderOptions, build_encoder
from panoattn.flops import flop_report
from panoattn.geometry import KINDS, FeaturePyramid, build_layout, cyclic_shift, gather_windows, partition_windows, rig_from_dict
from panoattn.gradcheck import check_attention_gradients, check_encoder_gradients
from panoattn.metrics import evaluate, nds_score
from panoattn.nms import bev_corners, box_iou_bev, nms, nms_reference
from panoattn.queries import Detection, DetectionSet, topk_select
from panoattn.seeding import make_rng
from panoattn.synthetic import synth_scene

logger = logging.getLogger("panoattn.verify")

FULL_SIZE_R_MV = (576, 144, 36, 12)
FULL_SIZE_R_ROI = (384, 96, 96, 8)
ORACLE_CHANNELS = 16
ORACLE_HEADS = 2

# Registry for oracles
_oracle_registry: dict[str, dict] = {}


def oracle(name: str, description: str):
    """Decorator to register a function as a named oracle."""
    def decorator(func: Callable):
        _oracle_registry[name] = {"name": name, "description": description, "function": func}
        return func
    return decorator


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    detail: str
    metric: float | None
    seconds: float

    def to_record(self) -> dict:
        return {
            "oracle": self.name,
            "passed": self.passed,
            "detail": self.detail,
            "metric": self.metric,
            "seconds": round(self.seconds, 3),
        }


class OracleSuite:
    """Runs registered oracles against one configuration."""

    def __init__(self, config: RunConfig):
        self.config = config

    @staticmethod
    def available() -> dict[str, str]:
        return {name: entry["description"] for name, entry in _oracle_registry.items()}

    def run(self, only: list[str] | None = None) -> list[OracleResult]:
        names = list(_oracle_registry) if not only else only
        unknown = [n for n in names if n not in _oracle_registry]
        if unknown:
            raise ValueError(f"Oracle not found: {', '.join(unknown)}")

        results = []
        for name in names:
            start = time.perf_counter()
            try:
                passed, detail, metric = _oracle_registry[name]["function"](self.config)
            except Exception as e:
                passed, detail, metric = False, f"raised {type(e).__name__}: {e}", None
            result = OracleResult(name, bool(passed), detail, metric, time.perf_counter() - start)
            if result.passed:
                logger.info(f"oracle {name}: ok ({detail})")
            else:
                logger.error(f"oracle {name}: FAILED ({detail})")
            results.append(result)
        return results


# ── Helpers ───────────────────────────────────────────────────


def full_size_layout():
    return build_layout(rig_from_dict(DEFAULTS))


def oracle_layout(config: RunConfig):
    """The configured layout if every level fits the full oracle, else the desk layout."""
    if all(lv.num_cells <= MAX_ORACLE_POSITIONS for lv in config.layout.levels):
        return config.layout
    return build_layout(rig_from_dict(_deep_merge(DEFAULTS, PROFILES["desk"])))


def random_boxes(rng: np.random.Generator, count: int, spread: float = 6.0, classes: int = 3) -> DetectionSet:
    dets = []
    for i in range(count):
        dets.append(Detection(
            center=(*rng.uniform(-spread, spread, size=2), 0.0),
            size=(*rng.uniform(0.5, 4.0, size=2), 1.5),
            yaw=rng.uniform(-np.pi, np.pi),
            velocity=(0.0, 0.0),
            class_id=int(rng.integers(classes)),
            confidence=float(rng.integers(0, 20)) / 20.0,
            source="bev",
            query_index=i,
        ))
    return DetectionSet(tuple(dets))


def monte_carlo_iou(a, b, rng: np.random.Generator, log2_samples: int = 20) -> float:
    """IoU of two (x, y, w, l, yaw) footprints from scrambled Sobol points over their joint bounding box."""
    corners = np.vstack([bev_corners(*a), bev_corners(*b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    points = qmc.scale(qmc.Sobol(d=2, scramble=True, seed=rng).random_base2(m=log2_samples), lo, hi)

    def inside(box):
        x, y, w, l, yaw = box
        dx, dy = points[:, 0] - x, points[:, 1] - y
        c, s = np.cos(yaw), np.sin(yaw)
        along, across = c * dx + s * dy, -s * dx + c * dy
        return (np.abs(along) <= l / 2) & (np.abs(across) <= w / 2)

    inter = np.mean(inside(a) & inside(b)) * np.prod(hi - lo)
    return float(inter / (a[2] * a[3] + b[2] * b[3] - inter))


# ── Oracles ───────────────────────────────────────────────────


@oracle("partition_bijection", "every partition maps cells to (window, slot) one-to-one")
def partition_bijection(config: RunConfig):
    layout = config.layout
    checked = 0
    for lv in layout.levels:
        for kind in KINDS:
            sizes = set()
            for shifted in (False, True):
                p = partition_windows(layout, lv.index, kind, shifted)
                if not np.array_equal(np.sort(p.order), np.arange(lv.num_cells)):
                    return False, f"L{lv.index} {kind} shifted={shifted}: order is not a permutation", None
                if not np.array_equal(p.order[p.inverse], np.arange(lv.num_cells)):
                    return False, f"L{lv.index} {kind} shifted={shifted}: inverse mismatch", None
                sizes.add((p.num_windows, p.window_size))
                checked += 1
            if len(sizes) != 1 or sizes.pop()[0] != lv.window_count(kind):
                return False, f"L{lv.index} {kind}: shifted and unshifted window counts differ", None
    return True, f"{checked} partitions", float(checked)


@oracle("shift_inverse", "cyclic_shift followed by its inverse is the identity (1000 draws)")
def shift_inverse(config: RunConfig):
    rng = make_rng(config.seed, "verify.shift")
    lv = config.layout.level(0)
    m = rng.standard_normal((1, 2, lv.pano_h, lv.pano_w))
    for _ in range(1000):
        dy = int(rng.integers(-lv.pano_h, lv.pano_h + 1))
        dx = int(rng.integers(-lv.pano_w, lv.pano_w + 1))
        if not np.array_equal(cyclic_shift(cyclic_shift(m, dy, dx), -dy, -dx), m):
            return False, f"shift ({dy}, {dx}) not inverted", None
    return True, "1000 draws", 1000.0


@oracle("full_size_window_counts", "full-size layout yields r_mv = 576/144/36/12 and r_roi = 384/96/96/8")
def full_size_window_counts(config: RunConfig):
    layout = full_size_layout()
    r_mv = tuple(lv.r_mv for lv in layout.levels)
    r_roi = tuple(lv.r_roi for lv in layout.levels)
    ok = r_mv == FULL_SIZE_R_MV and r_roi == FULL_SIZE_R_ROI
    return ok, f"r_mv={r_mv} r_roi={r_roi}", float(r_roi[0])


@oracle("flops_ratios", "analytic windowed/full ratio is exactly 1/r on every full-size level")
def flops_ratios(config: RunConfig):
    report = flop_report(full_size_layout(), batch=1, channels=256)
    for row in report.rows:
        if row.ratio != Fraction(1, row.r) or row.windowed_mac * row.r != row.full_mac:
            return False, f"L{row.level} {row.kind}: ratio {row.ratio} with r={row.r}", None
    level0 = {row.kind: row.ratio for row in report.rows if row.level == 0}
    ok = level0["mv_axis"] == Fraction(1, 576) and level0["roi"] == Fraction(1, 384)
    return ok, f"level 0: mv {level0['mv_axis']}, roi {level0['roi']}", float(level0["roi"])


@oracle("attention_equivalence", "windowed attention equals block-masked full attention within 1e-10")
def attention_equivalence(config: RunConfig):
    layout = oracle_layout(config)
    rng = make_rng(config.seed, "verify.equivalence")
    params = init_attention_params(rng, ORACLE_CHANNELS, ORACLE_HEADS, np.float64)
    worst, checked = 0.0, 0
    for lv in layout.levels:
        tensor = rng.standard_normal((1, ORACLE_CHANNELS, lv.pano_h, lv.pano_w))
        for kind in KINDS:
            for shifted in (False, True):
                p = partition_windows(layout, lv.index, kind, shifted)
                windowed = windowed_attention(tensor, p, params)
                full = full_attention_oracle(tensor, params, partition_pair_mask(p))
                worst = max(worst, float(np.max(np.abs(windowed - full))))
                _, cache = attention_forward(gather_windows(tensor, p), params)
                if np.max(np.abs(cache.weights.sum(axis=-1) - 1.0)) > 1e-12:
                    return False, f"L{lv.index} {kind}: softmax rows do not sum to 1", None
                checked += 1
    return worst <= 1e-10, f"{checked} level/kind/shift cases, max abs diff {worst:.2e}", worst


@oracle("attention_gradcheck", "100 random attention instances match central differences within 1e-4")
def attention_gradcheck(config: RunConfig):
    rng = make_rng(config.seed, "verify.attention_grad")
    worst = 0.0
    for i in range(100):
        heads = int(rng.choice([1, 2]))
        result = check_attention_gradients(
            rng,
            windows=int(rng.integers(1, 3)),
            slots=int(rng.integers(1, 5)),
            channels=4 * heads,
            num_heads=heads,
            masked=bool(i % 2),
        )
        worst = max(worst, result.max_rel_error)
        if not result.passed(1e-4):
            return False, f"instance {i}: {result.worst} rel err {result.max_rel_error:.2e}", result.max_rel_error
    return True, f"100 instances, max rel err {worst:.2e}", worst


@oracle("encoder_gradcheck", "2-block encoder gradients match central differences within 1e-3")
def encoder_gradcheck(config: RunConfig):
    layout = oracle_layout(config)
    stack = build_encoder(layout, ORACLE_CHANNELS, ORACLE_HEADS, config.seed, num_blocks=2,
                          options=EncoderOptions())
    rng = make_rng(config.seed, "verify.encoder_grad")
    pyramid = FeaturePyramid(tuple(
        rng.standard_normal((1, ORACLE_CHANNELS, lv.pano_h, lv.pano_w)) for lv in layout.levels
    ))
    result = check_encoder_gradients(stack, pyramid, rng)
    return result.passed(1e-3), f"{result.checked} entries, max rel err {result.max_rel_error:.2e}", result.max_rel_error


@oracle("iou_monte_carlo", "rotated IoU within 2e-3 of a 2^20-point quasi-Monte Carlo estimate on 50 pairs")
def iou_monte_carlo(config: RunConfig):
    rng = make_rng(config.seed, "verify.iou")
    worst = 0.0
    for _ in range(50):
        a = (0.0, 0.0, *rng.uniform(0.5, 4.0, size=2), rng.uniform(-np.pi, np.pi))
        b = (*rng.uniform(-2.0, 2.0, size=2), *rng.uniform(0.5, 4.0, size=2), rng.uniform(-np.pi, np.pi))
        worst = max(worst, abs(box_iou_bev(a, b) - monte_carlo_iou(a, b, rng)))
    return worst <= 2e-3, f"50 pairs, max abs diff {worst:.2e}", worst


@oracle("nms_bruteforce", "greedy NMS equals the exhaustive reference on 200 random sets")
def nms_bruteforce(config: RunConfig):
    rng = make_rng(config.seed, "verify.nms")
    for i in range(200):
        dets = random_boxes(rng, int(rng.integers(1, 51)))
        tau = float(rng.choice([0.0, 0.1, 0.2, 0.5]))
        if nms(dets, tau).detections != nms_reference(dets, tau).detections:
            return False, f"set {i} (tau={tau}) differs", None
    return True, "200 sets", 200.0


@oracle("nms_idempotence", "nms(nms(S)) = nms(S) and no surviving same-class pair overlaps beyond tau")
def nms_idempotence(config: RunConfig):
    rng = make_rng(config.seed, "verify.nms_idem")
    tau = config.nms_threshold
    for i in range(50):
        once = nms(random_boxes(rng, int(rng.integers(1, 51))), tau)
        if nms(once, tau).detections != once.detections:
            return False, f"set {i} is not a fixed point", None
        for j, a in enumerate(once):
            for b in once.detections[j + 1:]:
                if a.class_id == b.class_id and box_iou_bev(a.bev_box, b.bev_box) > tau:
                    return False, f"set {i}: surviving pair overlaps beyond {tau}", None
    return True, f"50 sets at tau={tau}", 50.0


@oracle("topk_sort", "top-k selection equals a full sort by (confidence desc, index)")
def topk_sort(config: RunConfig):
    rng = make_rng(config.seed, "verify.topk")
    for trial in range(100):
        n = int(rng.integers(1, 300))
        dets = random_boxes(rng, n)
        k = int(rng.integers(0, n + 1))
        picked = topk_select(dets, k)
        expected = sorted(dets, key=lambda d: (-d.confidence, d.query_index))[:k]
        if list(picked) != expected:
            return False, f"trial {trial}: n={n} k={k} mismatch", None
        rejected = sorted(d.confidence for d in dets)[: n - k]
        if k and rejected and min(d.confidence for d in picked) < max(rejected):
            return False, f"trial {trial}: a rejected detection outranks a selected one", None
    return True, "100 trials", 100.0


@oracle("nds_table_row", "NDS formula reproduces the published baseline row (0.401 ± 0.01)")
def nds_table_row(config: RunConfig):
    nds = nds_score(0.314, {
        "trans_err": 0.779,
        "scale_err": 0.270,
        "orient_err": 0.44,
        "vel_err": 0.882,
        "attr_err": 0.191,
    })
    return abs(nds - 0.401) <= 0.01, f"NDS {nds:.4f}", nds


@oracle("perfect_predictions", "predictions identical to ground truth score AP = 1 and NDS = 1")
def perfect_predictions(config: RunConfig):
    scene = synth_scene(config, config.seed, num_boxes=max(config.num_boxes, 1))
    preds = DetectionSet(tuple(
        Detection(d.center, d.size, d.yaw, d.velocity, d.class_id, 1.0, "floating", d.query_index)
        for d in scene.ground_truth
    ))
    bundle = evaluate(preds, scene.ground_truth, config.dist_thresholds, config.tp_threshold)
    ok = abs(bundle.mean_ap - 1.0) <= 1e-12 and abs(bundle.nds - 1.0) <= 1e-12
    return ok, f"mAP {bundle.mean_ap:.12f}, NDS {bundle.nds:.12f}", bundle.nds
