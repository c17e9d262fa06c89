"""Analytic attention cost across token budgets plus encoder wall-clock."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..grouper import Encoder, attention_cost, dense_attention_cost
from ..numerics.tensor import no_grad

# token budgets at (1/32, 1/16, 1/8) for a 1024x1024 input
BUDGET_TABLE = {
    "#1": (64, 0, 0),
    "#2": (64, 128, 0),
    "#3": (16, 32, 64),
    "#4": (32, 64, 128),
    "#5": (64, 128, 256),
    "#6": (128, 256, 512),
}
REFERENCE = "#5"
REFERENCE_SIZE = 1024
MEMORY_GUARD_BYTES = 2.5e9


@dataclass
class BenchReport:
    width: int
    rows: list[dict] = field(default_factory=list)
    dense: dict = field(default_factory=dict)
    dense_quadratic_ratio: float = 0.0
    timings: dict[int, float | None] = field(default_factory=dict)
    skipped: dict[int, str] = field(default_factory=dict)

    def timing_ratio(self, small: int, large: int) -> float | None:
        a, b = self.timings.get(small), self.timings.get(large)
        return b / a if a and b else None

    def lines(self) -> list[str]:
        out = [f"{'config':<8}{'N':>7}{'quadratic':>16}{'total':>16}{'quad/ref':>10}"]
        for r in self.rows:
            out.append(f"{r['name']:<8}{r['n']:>7}{r['quadratic']:>16}{r['total']:>16}{r['quad_ratio']:>10.4f}")
        d = self.dense
        out.append(f"{'dense':<8}{d['n']:>7}{d['quadratic']:>16}{d['total']:>16}{self.dense_quadratic_ratio:>10.2f}")
        out.append(f"dense/{REFERENCE} quadratic ratio = {self.dense_quadratic_ratio:.2f}")
        for n, t in sorted(self.timings.items()):
            out.append(f"encoder N={n}: {'skipped (' + self.skipped[n] + ')' if t is None else f'{t:.4f} s'}")
        return out

    def to_dict(self) -> dict:
        return {"width": self.width, "rows": self.rows, "dense": self.dense,
                "dense_quadratic_ratio": self.dense_quadratic_ratio,
                "timings": {str(k): v for k, v in self.timings.items()}, "skipped": {str(k): v for k, v in self.skipped.items()}}


def map_sizes(image_size: int) -> list[tuple[int, int]]:
    return [(image_size // d, image_size // d) for d in (32, 16, 8)]


def analytic_table(width: int, image_size: int = REFERENCE_SIZE) -> tuple[list[dict], dict, float]:
    ref = attention_cost(sum(BUDGET_TABLE[REFERENCE]), width)
    rows = []
    for name, budgets in BUDGET_TABLE.items():
        c = attention_cost(sum(budgets), width)
        rows.append({"name": name, "budgets": list(budgets), "n": sum(budgets), **c,
                     "quad_ratio": c["quadratic"] / ref["quadratic"]})
    sizes = map_sizes(image_size)
    dense = dense_attention_cost(sizes, width)
    dense["n"] = sum(h * w for h, w in sizes)
    return rows, dense, dense["quadratic"] / ref["quadratic"]


def attention_bytes(n: int, heads: int) -> float:
    """Rough peak for the (heads, N, N) logits and their softmax."""
    return 3.0 * heads * n * n * 8


def time_encoder(n: int, width: int, layers: int = 1, heads: int = 4, repeats: int = 3, seed: int = 0) -> float:
    """Best-of-``repeats`` forward time of the encoder over ``n`` tokens."""
    rng = np.random.default_rng(seed)
    enc = Encoder(rng, width, layers, heads)
    x = rng.normal(size=(1, n, width))
    best = float("inf")
    with no_grad():
        for _ in range(repeats):
            t = time.perf_counter()
            enc(x)
            best = min(best, time.perf_counter() - t)
    return best


def bench_complexity(width: int = 32, token_counts=(448, 4480, 21504), heads: int = 4, layers: int = 1,
                     memory_guard: float = MEMORY_GUARD_BYTES) -> BenchReport:
    rows, dense, ratio = analytic_table(width)
    rep = BenchReport(width, rows, dense, ratio)
    for n in token_counts:
        need = attention_bytes(n, heads)
        if need > memory_guard:
            rep.timings[n] = None
            rep.skipped[n] = f"needs ~{need / 1e9:.1f} GB"
            continue
        rep.timings[n] = time_encoder(n, width, layers, heads, repeats=3 if n <= 1000 else 1)
    return rep
