"""CSV tables and standalone SVG trade-off charts.

Schemas (one header row, fixed column order):

``run.csv``      one row per simulated run, see ``RUN_COLUMNS``
``sweep.csv``    one row per sweep point, see ``SWEEP_COLUMNS``
``compare.csv``  Table-1 shape: model, cache size "c / N", routing, lifetime, miss %
``ablation.csv`` one row per cache size: LRU, Belady and best cache-prior point
                 per retained-mass threshold

Percent columns are printed with six decimals, other floats with six
significant digits; undefined values (e.g. lifetime without evictions) are
left empty.
"""
from __future__ import annotations

import csv
import io
import os
from typing import Iterable, Optional, Sequence
from xml.sax.saxutils import escape

from .errors import EmptyReport

RUN_COLUMNS = (
    "strategy", "param", "top_j", "cache_size", "num_experts", "policy", "phase", "init_cache",
    "delta_mode", "renormalize", "seed",
    "miss_rate_pct", "hit_rate_pct", "active_hit_rate_pct", "steady_miss_rate_pct",
    "prompt_miss_rate_pct", "gen_miss_rate_pct",
    "total_hits", "total_misses", "total_inactive",
    "lifetime_mean", "lifetime_std", "lifetime_count", "censored_count",
    "retained_mass", "swap_rate", "est_token_latency_s", "config_hash",
)
SWEEP_COLUMNS = (
    "strategy", "param", "miss_rate_pct", "hit_rate_pct", "retained_mass", "swap_rate",
    "lifetime_mean", "lifetime_std", "total_misses", "est_token_latency_s", "pareto",
)
COMPARE_COLUMNS = ("model", "cache_size", "routing", "lifetime_mean", "lifetime_std", "miss_rate_pct")


def fmt(value, column: str = "") -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if column.endswith("_pct"):
            return f"{value:.6f}"
        return f"{value:.6g}"
    return str(value)


def pct(rate: Optional[float]) -> Optional[float]:
    return None if rate is None else 100.0 * rate


def render_csv(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(row.get(c), c) for c in columns])
    return buf.getvalue()


def emit_csv(rows: Iterable[dict], columns: Sequence[str], destination) -> int:
    """Write rows as CSV to a path or text stream; returns the byte count."""
    text = render_csv(rows, columns)
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        try:
            with open(destination, "w", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise OSError(exc.errno, f"cannot write {os.fspath(destination)}: {exc.strerror}") from exc
    return len(text.encode())


def strategy_param(strategy):
    if strategy.kind == "original":
        return None
    if strategy.kind in ("prune", "maxrank", "swap-random"):
        return int(strategy.param)
    return float(strategy.param)


def run_row(config, metrics, model, config_hash: str = "") -> dict:
    s = config.strategy
    return {
        "strategy": s.kind, "param": strategy_param(s), "top_j": s.top_j,
        "cache_size": config.resolved_cache_size(model), "num_experts": model.num_experts,
        "policy": config.policy, "phase": config.phase, "init_cache": config.init_cache,
        "delta_mode": s.delta.kind, "renormalize": config.renormalize, "seed": config.seed,
        "miss_rate_pct": pct(metrics.miss_rate), "hit_rate_pct": pct(metrics.hit_rate),
        "active_hit_rate_pct": pct(metrics.active_hit_rate),
        "steady_miss_rate_pct": pct(metrics.steady_miss_rate),
        "prompt_miss_rate_pct": pct(metrics.prompt_miss_rate),
        "gen_miss_rate_pct": pct(metrics.gen_miss_rate),
        "total_hits": metrics.total_hits, "total_misses": metrics.total_misses,
        "total_inactive": metrics.total_inactive,
        "lifetime_mean": metrics.lifetime_mean, "lifetime_std": metrics.lifetime_std,
        "lifetime_count": metrics.lifetime_count, "censored_count": metrics.censored_count,
        "retained_mass": metrics.retained_mass, "swap_rate": metrics.swap_rate,
        "est_token_latency_s": metrics.est_token_latency, "config_hash": config_hash,
    }


def sweep_rows(result) -> list:
    front = set(result.pareto)
    rows = []
    for i, (param, m) in enumerate(result.points):
        rows.append({
            "strategy": result.kind,
            "param": int(param) if result.kind in ("prune", "maxrank", "swap-random") else float(param),
            "miss_rate_pct": pct(m.miss_rate), "hit_rate_pct": pct(m.hit_rate),
            "retained_mass": m.retained_mass, "swap_rate": m.swap_rate,
            "lifetime_mean": m.lifetime_mean, "lifetime_std": m.lifetime_std,
            "total_misses": m.total_misses, "est_token_latency_s": m.est_token_latency,
            "pareto": i in front,
        })
    return rows


def routing_name(strategy) -> str:
    names = {"original": "Original", "prune": "Pruning", "maxrank": "Max-Rank",
             "cumsum": "Cumsum-Threshold", "prior": "Cache-Prior", "swap-random": "Swap-Random"}
    name = names[strategy.kind]
    p = strategy_param(strategy)
    return name if p is None else f"{name} ({p:g})"


def comparison_rows(model, cache_size: int, results) -> list:
    """Table-1 rows for (strategy, metrics) pairs."""
    return [{
        "model": model.name, "cache_size": f"{cache_size} / {model.num_experts}",
        "routing": routing_name(s), "lifetime_mean": m.lifetime_mean,
        "lifetime_std": m.lifetime_std, "miss_rate_pct": pct(m.miss_rate),
    } for s, m in results]


def ablation_columns(thresholds) -> tuple:
    cols = ["cache_size", "lru_miss_rate_pct", "belady_miss_rate_pct"]
    for th in thresholds:
        cols += [f"prior_lambda_mass{th:g}", f"prior_miss_rate_pct_mass{th:g}",
                 f"prior_retained_mass_mass{th:g}"]
    return tuple(cols)


def ablation_rows(rows, thresholds) -> list:
    out = []
    for row in rows:
        d = {"cache_size": row.cache_size, "lru_miss_rate_pct": pct(row.lru.miss_rate),
             "belady_miss_rate_pct": pct(row.belady.miss_rate)}
        for th in thresholds:
            best = row.prior.get(th)
            if best is not None:
                lam, m = best
                d[f"prior_lambda_mass{th:g}"] = float(lam)
                d[f"prior_miss_rate_pct_mass{th:g}"] = pct(m.miss_rate)
                d[f"prior_retained_mass_mass{th:g}"] = m.retained_mass
        out.append(d)
    return out


# -- SVG ----------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 70, "right": 170, "top": 40, "bottom": 55}


def _span(lo, hi):
    if hi - lo < 1e-12:
        pad = abs(lo) * 0.05 or 0.05
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def emit_svg_tradeoff(sweeps: Sequence, labels: Optional[Sequence[str]] = None,
                      title: str = "Retained probability mass (proxy) vs. cache miss rate") -> str:
    """Pareto curves of several sweeps: miss rate (%) on x, retained mass on y."""
    sweeps = [s for s in sweeps if s.points]
    if not sweeps:
        raise EmptyReport("no sweep points to plot")
    labels = list(labels) if labels else [s.kind for s in sweeps]
    fronts = []
    for s in sweeps:
        pts = sorted(((100.0 * m.miss_rate, m.retained_mass) for _, m in s.pareto_front),
                     key=lambda p: (p[0], -p[1]))
        fronts.append(pts)
    xs = [p[0] for f in fronts for p in f]
    ys = [p[1] for f in fronts for p in f]
    x0, x1 = _span(min(xs), max(xs))
    y0, y1 = _span(min(ys), max(ys))
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
        'fill="none" stroke="#444"/>',
    ]
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        out.append(f'<line x1="{sx(fx):.2f}" y1="{MARGIN["top"] + ph}" x2="{sx(fx):.2f}" '
                   f'y2="{MARGIN["top"] + ph + 5}" stroke="#444"/>')
        out.append(f'<text x="{sx(fx):.2f}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle">{fx:.1f}</text>')
        out.append(f'<line x1="{MARGIN["left"] - 5}" y1="{sy(fy):.2f}" x2="{MARGIN["left"]}" '
                   f'y2="{sy(fy):.2f}" stroke="#444"/>')
        out.append(f'<text x="{MARGIN["left"] - 8}" y="{sy(fy) + 4:.2f}" text-anchor="end">{fy:.3f}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">'
               'Cache miss rate (%)</text>')
    out.append(f'<text x="18" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {MARGIN["top"] + ph / 2:.1f})">Retained mass (proxy)</text>')

    for i, (pts, label) in enumerate(zip(fronts, labels)):
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<g class="series" data-label="{escape(label, {chr(34): "&quot;"})}">')
        if len(pts) > 1:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3.5" fill="{color}"/>')
        out.append("</g>")
        ly = MARGIN["top"] + 10 + 20 * i
        lx = WIDTH - MARGIN["right"] + 15
        out.append(f'<g class="legend-entry"><line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/><circle cx="{lx + 10}" cy="{ly}" r="3.5" '
                   f'fill="{color}"/><text x="{lx + 26}" y="{ly + 4}">{escape(label)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
