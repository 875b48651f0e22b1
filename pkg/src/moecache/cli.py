"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

from . import __version__
from .cache import HIGH_WEIGHT_FIRST, LOW_WEIGHT_FIRST
from .errors import ConfigError, FormatError, InvalidParam, MoECacheError, UnsupportedCombination
from .report import (COMPARE_COLUMNS, RUN_COLUMNS, SWEEP_COLUMNS, ablation_columns, ablation_rows,
                     comparison_rows, emit_csv, emit_svg_tradeoff, render_csv, run_row, sweep_rows)
from .routing import (DELTA_MODES, PRESETS, STRATEGIES, DeltaMode, ModelConfig, Strategy,
                      calibrate_deltas)
from .sim import (DEFAULT_MASS_THRESHOLDS, LatencyModel, RunConfig, SweepResult, cache_size_ablation,
                  compare, run, sweep)
from .trace import (DEFAULT_TOKENS, SynthParams, dumps_jsonl, generate_synthetic,
                    import_jsonl, locality_stats, read_trace, write_trace)

USAGE_ERROR = 1
DATA_ERROR = 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# -- shared helpers -----------------------------------------------------------

def load_trace(path):
    try:
        if str(path).endswith(".jsonl"):
            with open(path) as fh:
                return import_jsonl(fh)
        return read_trace(path)
    except FormatError as exc:
        raise DataError(f"{path}: {exc}") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None


def trace_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:12]


def resolve_model(trace, name=None) -> ModelConfig:
    model = trace.model()
    if name:
        if name not in PRESETS:
            raise UsageError(f"unknown model preset {name!r}; choose from {', '.join(PRESETS)}")
        p = PRESETS[name]
        h = trace.header
        if (p.num_experts, p.top_k) != (h.experts_per_layer, h.top_k):
            raise UsageError(f"trace shape (N={h.experts_per_layer}, K={h.top_k}) does not match "
                             f"preset {name} (N={p.num_experts}, K={p.top_k})")
        model = p.with_layers(h.num_layers)
    return model


def parse_strategy(kind, param, top_j, args, trace, model) -> Strategy:
    if kind not in STRATEGIES:
        raise UsageError(f"unknown strategy {kind!r}; choose from {', '.join(STRATEGIES)}")
    if kind != "original" and param is None:
        raise UsageError(f"--param is required for strategy {kind}")
    if param is None:
        param = 0
    if kind in ("prune", "maxrank", "swap-random"):
        if float(param) != int(float(param)):
            raise UsageError(f"{kind} takes an integer parameter, got {param}")
        param = int(float(param))
    delta = delta_mode(args, trace)
    try:
        s = Strategy(kind, param, model.top_j if top_j is None else top_j, delta)
        s.validate(model)
    except InvalidParam as exc:
        raise UsageError(str(exc)) from None
    return s


def delta_mode(args, trace) -> DeltaMode:
    kind = getattr(args, "delta_mode", "running")
    try:
        if kind == "calibrated":
            calib = load_trace(args.calibration_trace) if args.calibration_trace else trace
            if calib.header.num_layers != trace.header.num_layers:
                raise UsageError("calibration trace has a different number of layers")
            return DeltaMode("calibrated", constants=calibrate_deltas(calib.logits))
        return DeltaMode(kind, decay=args.ema_decay)
    except InvalidParam as exc:
        raise UsageError(str(exc)) from None


def base_config(args, strategy, model) -> RunConfig:
    if args.cache_size is not None and args.cache_size > model.num_experts:
        raise UsageError(f"--cache-size {args.cache_size} exceeds the {model.num_experts} experts per layer")
    try:
        return RunConfig(
            strategy=strategy, policy=args.policy, cache_size=args.cache_size,
            phase=args.phase, init_cache=args.init_cache, seed=args.seed,
            renormalize=not args.no_renormalize, order=args.intra_batch_order,
            warmup=args.warmup, latency=LatencyModel(args.t_compute, args.t_load))
    except UnsupportedCombination as exc:
        raise DataError(str(exc)) from None
    except (ConfigError, InvalidParam) as exc:
        raise UsageError(str(exc)) from None


def repro_line(config_hash, seed) -> str:
    return f"repro: config={config_hash} seed={seed}"


def config_hash(args, extra="") -> str:
    skip = {"func", "out", "svg", "jobs", "quiet"}
    d = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    if getattr(args, "trace", None):
        d["trace_sha"] = trace_digest(args.trace)
    blob = json.dumps(d, sort_keys=True, default=str) + extra
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_text(path, text):
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror or exc}") from None


# -- subcommands --------------------------------------------------------------

def cmd_gen(args):
    if args.model == "custom":
        if not (args.experts and args.top_k and args.layers):
            raise UsageError("--model custom needs --layers, --experts and --top-k")
        try:
            model = ModelConfig("custom", args.layers, args.experts, args.top_k, args.shared or 0,
                                min(1, args.top_k))
        except InvalidParam as exc:
            raise UsageError(str(exc)) from None
    elif args.model in PRESETS:
        model = PRESETS[args.model]
        if args.layers:
            model = model.with_layers(args.layers)
    else:
        raise UsageError(f"unknown model {args.model!r}; presets: {', '.join(PRESETS)} (or custom)")
    if args.prompt_len > args.tokens:
        raise UsageError("--prompt-len exceeds --tokens")
    try:
        params = SynthParams(args.locality, args.hot_fraction, args.logit_scale, args.seed)
    except InvalidParam as exc:
        raise UsageError(str(exc)) from None
    trace = generate_synthetic(model, args.tokens, params, args.prompt_len)
    try:
        if str(args.out).endswith(".jsonl"):
            write_text(args.out, dumps_jsonl(trace))
            size = os.path.getsize(args.out)
        else:
            size = write_trace(trace, args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc.strerror or exc}") from None
    h = trace.header
    print(f"wrote {args.out} ({size} bytes): model={model.name} layers={h.num_layers} "
          f"experts={h.experts_per_layer} top_k={h.top_k} shared={h.shared_experts} "
          f"tokens={h.num_tokens} prompt_len={h.prompt_len}")
    print(repro_line(config_hash(args), args.seed))
    return 0


def _summary(label, metrics):
    life = "n/a" if metrics.lifetime_mean is None else \
        f"{metrics.lifetime_mean:.1f} (+/- {metrics.lifetime_std:.1f}) tokens"
    return (f"{label}: miss rate {100 * metrics.miss_rate:.2f}% | lifetime {life} | "
            f"retained mass (proxy) {metrics.retained_mass:.4f} | swap rate {100 * metrics.swap_rate:.2f}% | "
            f"est. latency {1000 * metrics.est_token_latency:.2f} ms/token")


def cmd_run(args):
    trace = load_trace(args.trace)
    model = resolve_model(trace, args.model)
    strategy = parse_strategy(args.strategy, args.param, args.top_j, args, trace, model)
    config = base_config(args, strategy, model)
    try:
        metrics = run(trace, config, model)
    except UnsupportedCombination as exc:
        raise DataError(str(exc)) from None
    h = config_hash(args)
    print(_summary(strategy.label(), metrics))
    if args.out:
        emit_csv([run_row(config, metrics, model, h)], RUN_COLUMNS, args.out)
    if args.svg:
        result = SweepResult(strategy.kind, [(strategy.param, metrics)], [0])
        write_text(args.svg, emit_svg_tradeoff([result], [strategy.label()]))
    print(repro_line(h, args.seed))
    return 0


def cmd_sweep(args):
    trace = load_trace(args.trace)
    model = resolve_model(trace, args.model)
    kinds = [k.strip() for k in args.strategy.split(",") if k.strip()]
    results = []
    for kind in kinds:
        start = {"original": None, "swap-random": 1}.get(kind, 0)
        strategy = parse_strategy(kind, start, args.top_j, args, trace, model)
        config = base_config(args, strategy, model)
        results.append(sweep(trace, model, kind, config.policy, config.cache_size, config, args.jobs))
    rows = [r for res in results for r in sweep_rows(res)]
    # Keep stdout pure CSV when the table goes there.
    log = sys.stdout if args.out else sys.stderr
    for res in results:
        front = ", ".join(f"{p:g}" for p, _ in res.pareto_front)
        print(f"{res.kind}: {len(res.points)} points, pareto params [{front}]", file=log)
    h = config_hash(args)
    if args.out:
        emit_csv(rows, SWEEP_COLUMNS, args.out)
    else:
        sys.stdout.write(render_csv(rows, SWEEP_COLUMNS))
    if args.svg:
        write_text(args.svg, emit_svg_tradeoff(results, kinds))
    print(repro_line(h, args.seed), file=log)
    return 0


def cmd_ablate(args):
    trace = load_trace(args.trace)
    model = resolve_model(trace, args.model)
    n, k = model.num_experts, model.top_k
    sizes = args.sizes or sorted({1, k, max(1, n // 4), max(1, n // 2), n})
    for s in sizes:
        if not 1 <= s <= n:
            raise UsageError(f"cache size {s} outside [1, {n}]")
    thresholds = tuple(args.thresholds) if args.thresholds else DEFAULT_MASS_THRESHOLDS
    strategy = parse_strategy("prior", 0, args.top_j, args, trace, model)
    args.policy = "lru"
    config = base_config(args, strategy, model)
    rows = cache_size_ablation(trace, model, sizes, config, thresholds, args.jobs)
    table = ablation_rows(rows, thresholds)
    cols = ablation_columns(thresholds)
    for r in rows:
        best = ", ".join(
            f"mass>={th:g}: " + ("n/a" if r.prior[th] is None else
                                 f"{100 * r.prior[th][1].miss_rate:.2f}% (lambda={r.prior[th][0]:.3f})")
            for th in thresholds)
        print(f"c={r.cache_size}/{n}: LRU {100 * r.lru.miss_rate:.2f}% | Belady {100 * r.belady.miss_rate:.2f}% "
              f"| Cache-Prior {best}")
    if args.out:
        emit_csv(table, cols, args.out)
    print(repro_line(config_hash(args), args.seed))
    return 0


def parse_strategy_spec(spec):
    if "@" in spec:
        kind, value = spec.split("@", 1)
        try:
            return kind.strip(), float(value)
        except ValueError:
            raise UsageError(f"bad strategy parameter in {spec!r}") from None
    return spec.strip(), None


def cmd_compare(args):
    trace = load_trace(args.trace)
    model = resolve_model(trace, args.model)
    strategies = []
    for spec in args.strategies.split(","):
        if not spec.strip():
            continue
        kind, param = parse_strategy_spec(spec)
        strategies.append(parse_strategy(kind, param, args.top_j, args, trace, model))
    if not strategies:
        raise UsageError("--strategies is empty")
    config = base_config(args, Strategy(), model)
    if config.policy == "belady" and any(s.cache_aware for s in strategies):
        raise DataError("belady eviction cannot be combined with cache-aware routing")
    results = compare(trace, model, strategies, config, args.jobs)
    c = config.resolved_cache_size(model)
    rows = comparison_rows(model, c, results)
    for row, (s, m) in zip(rows, results):
        life = "n/a" if m.lifetime_mean is None else f"{m.lifetime_mean:.0f} (+/- {m.lifetime_std:.0f})"
        print(f"{row['model']:<18} {row['cache_size']:>9}  {row['routing']:<22} {life:>16}  "
              f"{100 * m.miss_rate:6.2f}%")
    if args.out:
        emit_csv(rows, COMPARE_COLUMNS, args.out)
    print(repro_line(config_hash(args), args.seed))
    return 0


def cmd_stats(args):
    trace = load_trace(args.trace)
    h = trace.header
    st = locality_stats(trace)
    if args.json:
        print(json.dumps({"header": h.to_dict(), **st}, indent=2))
    else:
        model = trace.model()
        print(f"trace {args.trace}: model~{model.name} layers={h.num_layers} experts={h.experts_per_layer} "
              f"top_k={h.top_k} shared={h.shared_experts} tokens={h.num_tokens} prompt_len={h.prompt_len}")
        print("layer  range_mean  range_std  range_min  range_max  top1_agree  top1_chance  topk_jaccard")
        for l in range(h.num_layers):
            print(f"{l:5d}  {st['range_mean'][l]:10.4f} {st['range_std'][l]:10.4f} {st['range_min'][l]:10.4f} "
                  f"{st['range_max'][l]:10.4f} {st['top1_agreement'][l]:11.4f} {st['top1_chance'][l]:12.4f} "
                  f"{st['topk_jaccard'][l]:13.4f}")
    print(repro_line(config_hash(args), 0))
    return 0


# -- parser -------------------------------------------------------------------

def _add_run_flags(p, policy=True):
    p.add_argument("--trace", required=True, help="trace file (.moet or .jsonl)")
    p.add_argument("--model", help="preset name, only to pin the preset's top-J and name")
    p.add_argument("--top-j", type=_non_negative_int, help="experts always kept (default: preset value)")
    p.add_argument("--cache-size", type=_positive_int, help="routed experts cached per layer (default N/2)")
    if policy:
        p.add_argument("--policy", choices=("lru", "belady"), default="lru")
    p.add_argument("--phase", choices=("all", "gen-only"), default="all")
    p.add_argument("--init-cache", choices=("empty", "random"), default="empty")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta-mode", choices=DELTA_MODES, default="running")
    p.add_argument("--ema-decay", type=float, default=0.9)
    p.add_argument("--calibration-trace", help="trace used for --delta-mode calibrated (default: --trace)")
    p.add_argument("--no-renormalize", action="store_true", help="keep raw gate probabilities")
    p.add_argument("--intra-batch-order", choices=(HIGH_WEIGHT_FIRST, LOW_WEIGHT_FIRST),
                   default=HIGH_WEIGHT_FIRST, help="which same-token insertion is evicted first")
    p.add_argument("--warmup", type=_non_negative_int, default=0,
                   help="tokens skipped by the steady-state miss rate")
    p.add_argument("--t-compute", type=float, default=LatencyModel.t_compute, help="seconds per token")
    p.add_argument("--t-load", type=float, default=LatencyModel.t_load, help="seconds per expert load")
    p.add_argument("--jobs", type=_positive_int, help="parallel workers (default $MOE_SIM_JOBS or all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="moecache", description="Cache-aware MoE expert routing simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen", help="generate a synthetic router-logit trace")
    g.add_argument("--model", required=True, help=f"preset ({', '.join(PRESETS)}) or custom")
    g.add_argument("--layers", type=_positive_int, help="override the number of MoE layers")
    g.add_argument("--experts", type=_positive_int, help="experts per layer (custom model)")
    g.add_argument("--top-k", type=_positive_int, help="top-K (custom model)")
    g.add_argument("--shared", type=_non_negative_int, help="shared experts (custom model)")
    g.add_argument("--tokens", type=_positive_int, default=DEFAULT_TOKENS)
    g.add_argument("--prompt-len", type=_non_negative_int, default=0)
    g.add_argument("--locality", type=float, default=SynthParams.locality)
    g.add_argument("--hot-fraction", type=float, default=SynthParams.hot_fraction)
    g.add_argument("--logit-scale", type=float, default=SynthParams.logit_scale)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output path (.moet binary or .jsonl)")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="simulate one routing strategy")
    _add_run_flags(r)
    r.add_argument("--strategy", choices=STRATEGIES, default="original")
    r.add_argument("--param", type=float, help="h | M | p | lambda | swapped rank")
    r.add_argument("--out", help="run.csv destination")
    r.add_argument("--svg", help="optional SVG of the single trade-off point")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="sweep a strategy's parameter and extract the Pareto front")
    _add_run_flags(s)
    s.add_argument("--strategy", required=True, help="comma-separated strategies")
    s.add_argument("--out", help="sweep.csv destination (default stdout)")
    s.add_argument("--svg", help="trade-off chart destination")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate-cache-size", help="LRU vs Belady vs Cache-Prior across cache sizes")
    _add_run_flags(a, policy=False)
    a.add_argument("--sizes", type=_int_list, help="comma-separated cache sizes (default 1,K,N/4,N/2,N)")
    a.add_argument("--thresholds", type=_float_list, help="retained-mass thresholds (default 0.99,0.95,0.9)")
    a.add_argument("--out", help="ablation.csv destination")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("compare", help="Table-1 style comparison of strategies")
    _add_run_flags(c)
    c.add_argument("--strategies", default="original,prior@0.5",
                   help="comma-separated kind[@param] list, e.g. original,prior@0.5")
    c.add_argument("--out", help="compare.csv destination")
    c.set_defaults(func=cmd_compare)

    st = sub.add_parser("stats", help="trace header, logit ranges and temporal locality")
    st.add_argument("--trace", required=True)
    st.add_argument("--json", action="store_true")
    st.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"moecache: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DataError, MoECacheError, OSError) as exc:
        print(f"moecache: error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
