"""Analytic cost of full vs windowed attention per pyramid level.

Counts follow the asymptotic expression B·(M·H·W)²·C for full attention over a
level, i.e. one multiply-accumulate per (query, key, channel). The exact
QKᵀ + attention·V work is twice that; the constant is dropped so windowed and
full counts compare as 1/r. Q/K/V/O projections (4·B·N·C²) are reported in a
separate column because they do not depend on the window split.
"""

import logging
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from panoattn.attention import MAX_ORACLE_POSITIONS, full_attention_oracle, init_attention_params, windowed_attention
from panoattn.geometry import KINDS, PanoramaLayout, partition_windows
from panoattn.seeding import make_rng

logger = logging.getLogger("panoattn.flops")


@dataclass(frozen=True)
class FlopRow:
    level: int
    kind: str
    r: int
    full_mac: int
    windowed_mac: int
    ratio: Fraction
    projection_mac: int
    measured_ratio: float | None = None

    @property
    def ratio_percent(self) -> float:
        return float(self.ratio) * 100.0

    def to_record(self) -> dict:
        return {
            "level": self.level,
            "kind": self.kind,
            "r": self.r,
            "full_mac": self.full_mac,
            "windowed_mac": self.windowed_mac,
            "ratio": f"{self.ratio.numerator}/{self.ratio.denominator}",
            "ratio_percent": self.ratio_percent,
            "projection_mac": self.projection_mac,
            "measured_ratio": self.measured_ratio,
        }


@dataclass(frozen=True)
class FlopReport:
    batch: int
    channels: int
    rows: tuple[FlopRow, ...]

    @property
    def total_full(self) -> int:
        return sum(r.full_mac for r in self.rows)

    @property
    def total_windowed(self) -> int:
        return sum(r.windowed_mac for r in self.rows)

    @property
    def total_ratio(self) -> Fraction:
        return Fraction(self.total_windowed, self.total_full) if self.total_full else Fraction(1)


@dataclass(frozen=True)
class EmpiricalTiming:
    level: int
    kind: str
    trials: int
    analytic_ratio: Fraction
    windowed_seconds: float | None = None
    full_seconds: float | None = None
    note: str = ""

    @property
    def empty(self) -> bool:
        return self.trials == 0

    @property
    def measured_ratio(self) -> float | None:
        if self.empty or not self.full_seconds:
            return None
        return self.windowed_seconds / self.full_seconds


def flops_full(layout: PanoramaLayout, level: int, batch: int, channels: int) -> int:
    lv = layout.level(level)
    return batch * lv.num_cells ** 2 * channels


def flops_windowed(layout: PanoramaLayout, level: int, kind: str, batch: int,
                   channels: int) -> tuple[int, Fraction]:
    """r windows of N/r cells each: r·(N/r)² = N²/r."""
    r = layout.level(level).window_count(kind)
    full = flops_full(layout, level, batch, channels)
    return full // r, Fraction(1, r)


def projection_macs(layout: PanoramaLayout, level: int, batch: int, channels: int) -> int:
    return 4 * batch * layout.level(level).num_cells * channels ** 2


def flop_report(layout: PanoramaLayout, batch: int, channels: int) -> FlopReport:
    rows = []
    for lv in layout.levels:
        for kind in KINDS:
            windowed, ratio = flops_windowed(layout, lv.index, kind, batch, channels)
            rows.append(FlopRow(
                level=lv.index,
                kind=kind,
                r=lv.window_count(kind),
                full_mac=flops_full(layout, lv.index, batch, channels),
                windowed_mac=windowed,
                ratio=ratio,
                projection_mac=projection_macs(layout, lv.index, batch, channels),
            ))
    return FlopReport(batch=batch, channels=channels, rows=tuple(rows))


def measure_empirical(layout: PanoramaLayout, level: int, kind: str, trials: int,
                      channels: int = 16, num_heads: int = 1, seed: int = 0) -> EmpiricalTiming:
    """Best-of-`trials` wall time of windowed attention vs the unmasked full oracle.

    Single-threaded; only the direction of the ratio is meaningful. Levels the
    full oracle refuses come back empty with a note.
    """
    _, analytic = flops_windowed(layout, level, kind, 1, channels)
    if trials <= 0:
        return EmpiricalTiming(level=level, kind=kind, trials=0, analytic_ratio=analytic)
    lv = layout.level(level)
    if lv.num_cells > MAX_ORACLE_POSITIONS:
        logger.info(f"not timing L{level} {kind}: {lv.num_cells} cells exceed the full oracle limit")
        return EmpiricalTiming(
            level=level,
            kind=kind,
            trials=0,
            analytic_ratio=analytic,
            note=f"not timed: {lv.num_cells} cells exceed the full oracle limit of {MAX_ORACLE_POSITIONS}",
        )

    rng = make_rng(seed, "timing")
    params = init_attention_params(rng, channels, num_heads, np.float64)
    tensor = rng.standard_normal((1, channels, lv.pano_h, lv.pano_w))
    partition = partition_windows(layout, level, kind, False)

    def best_of(fn) -> float:
        best = float("inf")
        for _ in range(trials):
            start = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - start)
        return best

    windowed = best_of(lambda: windowed_attention(tensor, partition, params))
    full = best_of(lambda: full_attention_oracle(tensor, params))
    logger.info(f"timing L{level} {kind}: windowed {windowed * 1e3:.2f} ms, full {full * 1e3:.2f} ms")
    return EmpiricalTiming(
        level=level,
        kind=kind,
        trials=trials,
        analytic_ratio=analytic,
        windowed_seconds=windowed,
        full_seconds=full,
        note="desk-scale timing; absolute throughput does not extrapolate",
    )


def format_table(report: FlopReport, timings: dict[tuple[int, str], EmpiricalTiming] | None = None) -> str:
    timings = timings or {}
    header = f"{'level':>5}  {'kind':<8}{'r':>6}{'full MACs':>22}{'windowed MACs':>20}{'ratio %':>10}{'measured':>10}"
    lines = [f"B={report.batch} C={report.channels}", header, "-" * len(header)]
    for row in report.rows:
        timing = timings.get((row.level, row.kind))
        measured = timing.measured_ratio if timing else row.measured_ratio
        measured_cell = f"{measured:>10.4f}" if measured is not None else f"{'-':>10}"
        lines.append(
            f"{row.level:>5}  {row.kind:<8}{row.r:>6}{row.full_mac:>22,}{row.windowed_mac:>20,}"
            f"{row.ratio_percent:>10.4f}{measured_cell}"
        )
    lines.append("-" * len(header))
    lines.append(f"total windowed/full: {float(report.total_ratio) * 100:.4f} %")
    return "\n".join(lines) + "\n"
