"""Forward-only efficiency comparison: two-stage instruct attention versus
flattened cross-attention, swept over channel count, sequence length, and
question length."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import fusion
from .fusion import AttentionWeights, channel_fuse, cross_attention_baseline, time_attend
from .tensor import Tensor


@dataclass
class BenchPoint:
    v: int
    l_p: int
    l_q: int
    n: int
    d: int
    ita_time_ms: float
    cross_time_ms: float
    ita_flops: int
    cross_flops: int
    repetitions: int
    warmup: int

    @property
    def speedup(self):
        return self.cross_time_ms / self.ita_time_ms if self.ita_time_ms else float("inf")


def analytic_ita_score_flops(n, v, l_p, d, heads):
    return heads * n * (d // heads) * (v + l_p)


def analytic_cross_score_flops(n, v, l_p, d, heads):
    return heads * n * (d // heads) * v * l_p


def measure_point(v, l_p, l_q, n, d, heads, reps, warmup, rng):
    if reps < 30:
        raise ValueError(f"need at least 30 repetitions for stable medians, got {reps}")
    params = {}
    channel_w = AttentionWeights(rng, d, heads, "bench.channel", params)
    time_w = AttentionWeights(rng, d, heads, "bench.time", params)
    cross_w = AttentionWeights(rng, d, heads, "bench.cross", params)
    instruct = Tensor(rng.standard_normal((n, d)))
    temporal = Tensor(rng.standard_normal((l_p, v, d)))

    def ita_forward():
        return time_attend(time_w, instruct, channel_fuse(channel_w, instruct, temporal))

    def cross_forward():
        return cross_attention_baseline(cross_w, instruct, temporal)

    fusion.FLOPS.reset()
    ita_forward()
    cross_forward()
    ita_flops = fusion.FLOPS.ita_scores
    cross_flops = fusion.FLOPS.baseline_scores

    def timed(fn):
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - t0) * 1000.0)
        return float(np.median(samples))

    return BenchPoint(
        v=v, l_p=l_p, l_q=l_q, n=n, d=d,
        ita_time_ms=timed(ita_forward),
        cross_time_ms=timed(cross_forward),
        ita_flops=ita_flops,
        cross_flops=cross_flops,
        repetitions=reps,
        warmup=warmup,
    )


def run_grid(v_list, l_list, lq_list, *, n=25, d=64, heads=8, reps=30, warmup=5, seed=0):
    if not (v_list and l_list and lq_list):
        raise ValueError("benchmark grids must be non-empty")
    rng = np.random.default_rng(seed)
    points = []
    for v in v_list:
        for l_p in l_list:
            for l_q in lq_list:
                points.append(measure_point(v, l_p, l_q, n, d, heads, reps, warmup, rng))
    return points


def write_csv(path, points):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["V", "Lp", "Lq", "n", "d", "ita_ms", "cross_ms", "ita_flops",
             "cross_flops", "speedup"]
        )
        for p in points:
            writer.writerow(
                [p.v, p.l_p, p.l_q, p.n, p.d, f"{p.ita_time_ms:.6f}",
                 f"{p.cross_time_ms:.6f}", p.ita_flops, p.cross_flops,
                 f"{p.speedup:.4f}"]
            )


PLOT_SCRIPT = """\
# gnuplot script: three efficiency panels from the benchmark CSV
set datafile separator ','
set terminal pngcairo size 1500,460
set output 'efficiency_panels.png'
set multiplot layout 1,3
set key top left
set ylabel 'median time (ms)'
set xlabel 'channels V'
plot '{csv}' using 1:($2=={mid_l} && $3=={mid_lq} ? $6 : 1/0) with linespoints title 'two-stage', \\
     '{csv}' using 1:($2=={mid_l} && $3=={mid_lq} ? $7 : 1/0) with linespoints title 'flattened cross'
set xlabel 'temporal tokens Lp'
plot '{csv}' using 2:($1=={mid_v} && $3=={mid_lq} ? $6 : 1/0) with linespoints title 'two-stage', \\
     '{csv}' using 2:($1=={mid_v} && $3=={mid_lq} ? $7 : 1/0) with linespoints title 'flattened cross'
set xlabel 'question length Lq'
plot '{csv}' using 3:($1=={mid_v} && $2=={mid_l} ? $6 : 1/0) with linespoints title 'two-stage', \\
     '{csv}' using 3:($1=={mid_v} && $2=={mid_l} ? $7 : 1/0) with linespoints title 'flattened cross'
unset multiplot
"""


def write_plot_script(path, csv_path, v_list, l_list, lq_list):
    script = PLOT_SCRIPT.format(
        csv=csv_path,
        mid_v=v_list[len(v_list) // 2],
        mid_l=l_list[len(l_list) // 2],
        mid_lq=lq_list[len(lq_list) // 2],
    )
    with open(path, "w") as fh:
        fh.write(script)
