"""Timing harness for the scan kernels."""

from __future__ import annotations

import csv
import io
import time

import numpy as np

from . import kernels

CSV_HEADER = ("T", "mean_ms", "p50_ms", "p95_ms", "ratio_vs_prev")


def scan_inputs(S: int, T: int, D: int, N: int, seed: int = 0):
    rng = np.random.default_rng([seed, T])
    u = rng.normal(size=(S, T, D))
    delta = rng.uniform(1e-3, 1e-1, (S, T, D))
    A = -np.tile(np.arange(1, N + 1, dtype=np.float64), (D, 1))
    B = rng.normal(size=(S, T, N))
    C = rng.normal(size=(S, T, N))
    return u, delta, A, B, C


def time_scan(T: int, D: int = 64, S: int = 16, N: int = 16, warmup: int = 5, reps: int = 30,
              backend: str | None = None, direction: str = "forward") -> np.ndarray:
    """Wall-clock milliseconds of ``reps`` kernel calls after ``warmup`` untimed ones."""
    k = kernels.get(backend)
    u, delta, A, B, C = scan_inputs(S, T, D, N)
    if direction == "forward":
        def call():
            k.scan_forward(u, delta, A, B, C, None, 0)
    else:
        gy = np.ones_like(u)

        def call():
            k.scan_backward(u, delta, A, B, C, None, gy, None, 0)
    for _ in range(warmup):
        call()
    out = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        call()
        out[i] = (time.perf_counter() - t0) * 1e3
    return out


def bench_scan(T_values, D: int = 64, S: int = 16, N: int = 16, warmup: int = 5, reps: int = 30,
               backend: str | None = None, direction: str = "forward") -> list[dict]:
    """One row per T; ``ratio_vs_prev`` compares medians with the previous row."""
    rows, prev = [], None
    for T in T_values:
        ms = time_scan(int(T), D, S, N, warmup, reps, backend, direction)
        p50 = float(np.percentile(ms, 50))
        rows.append({
            "T": int(T),
            "mean_ms": float(ms.mean()),
            "p50_ms": p50,
            "p95_ms": float(np.percentile(ms, 95)),
            "ratio_vs_prev": (p50 / prev) if prev else float("nan"),
        })
        prev = p50
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        ratio = "" if np.isnan(r["ratio_vs_prev"]) else f"{r['ratio_vs_prev']:.4f}"
        w.writerow([r["T"], f"{r['mean_ms']:.4f}", f"{r['p50_ms']:.4f}", f"{r['p95_ms']:.4f}", ratio])
    return buf.getvalue()


def compare_backends(T_values, **kw) -> dict[str, list[dict]]:
    """``bench_scan`` for every available backend."""
    return {name: bench_scan(T_values, backend=name, **kw) for name in kernels.available()}
