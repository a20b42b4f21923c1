"""``akvq`` command line: quantization round trips, attention analysis, pivot
detection, cache simulation and summary reports.

Every command prints a short plain-text report. ``--summary`` additionally
writes ``key = value`` lines that scripts can parse without reading prose.
Exit status is 0 on success, 1 on a runtime or input error and 2 on a usage
error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AkvqError, InputError
from .kvcache import CacheConfig
from .quantizer import DEFAULT_GROUP_SIZE, QuantParams, effective_bits, fake_quantize
from .saliency import (
    DEFAULT_EXCLUDED_PREFIX,
    DEFAULT_GAMMA,
    DEFAULT_N_PIVOT_MAX,
    DEFAULT_RECENT_WINDOW,
    DEFAULT_TAU,
    Pattern,
    PolicyFile,
    detect_pivot_tokens,
    detect_tsa_layers,
    format_policy_file,
    massive_activation_scores,
    modality_attention_stats,
    parse_policy_file,
    text_mask,
)
from .simulate import METHODS, SimConfig, run_comparison
from .tensor_io import load_tensor, save_tensor

log = logging.getLogger("akvq")

DEFAULT_SIM_METHODS = ("akvq", "fp16", "rtn-int4", "rtn-int2", "akvq-no-wht")

# Reference configuration of the method; each value is also the plain flag default.
PRESETS: dict[str, dict] = {
    "paper-defaults": dict(
        n_layers=32, group_size=128, clip_int2=0.8, clip_int4=1.0,
        recent_window=128, n_pivot_max=15, tsa_layers="0,1",
    ),
    # Tiny configuration for smoke tests.
    "smoke": dict(
        n_layers=4, n_heads=2, n_kv_heads=1, prefill=96, decode=8,
        recent_window=16, tsa_layers="0", vision_start=4,
    ),
}


# ------------------------------------------------------------------ helpers


def write_summary(path: str | Path, values: dict) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_summary(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def read_labels(path: str | Path) -> np.ndarray:
    """Modality labels separated by whitespace or commas (text/vision, t/v, 1/0)."""
    tokens = Path(path).read_text().replace(",", " ").split()
    if not tokens:
        raise InputError(f"{path}: no labels")
    return text_mask(tokens)


def _int_list(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _fmt(x: float) -> str:
    return f"{x:.6g}"


# ----------------------------------------------------------------- commands


def cmd_quantize(args) -> int:
    x = load_tensor(args.input)
    if x.ndim != 2:
        raise InputError(f"quantize expects a 2-D tokens x channels tensor, got shape {x.shape}")
    clip = args.clip if args.clip is not None else (0.8 if args.bits == 2 else 1.0)
    p = QuantParams(args.bits, clip, args.group_size)
    recon = fake_quantize(x, p)
    err = recon.astype(np.float64) - x.astype(np.float64)
    per_token = np.abs(err).max(axis=1) if x.shape[1] else np.zeros(x.shape[0])
    mse = float(np.mean(err ** 2)) if err.size else 0.0
    bits = effective_bits(p.bits, x.shape[1], p.group_size) if x.shape[1] else 0.0

    if args.output:
        save_tensor(recon, args.output)
    print(f"# token max_abs_err  ({x.shape[0]} tokens x {x.shape[1]} channels, "
          f"{p.bits}-bit, clip {_fmt(p.clip_ratio)}, group {p.group_size})")
    for i, e in enumerate(per_token):
        print(f"{i} {e:.6e}")
    print(f"mse = {mse:.6e}")
    print(f"effective_bits = {bits:.6f}")
    if args.summary:
        write_summary(args.summary, {
            "bits": p.bits, "clip_ratio": _fmt(p.clip_ratio), "group_size": p.group_size,
            "tokens": x.shape[0], "channels": x.shape[1],
            "mse": f"{mse:.9e}", "max_abs_err": f"{float(per_token.max(initial=0.0)):.9e}",
            "effective_bits": f"{bits:.6f}",
        })
    return 0


def cmd_analyze_attention(args) -> int:
    attn = load_tensor(args.attn)
    if attn.ndim != 4:
        raise InputError(f"attention dump must be layers x heads x queries x keys, got shape {attn.shape}")
    labels = read_labels(args.labels)
    stats = [modality_attention_stats(attn[i], labels, args.excluded_prefix) for i in range(attn.shape[0])]
    tsa = sorted(detect_tsa_layers(stats, args.gamma))

    print("# layer text_mean vision_mean ratio pattern")
    for i, s in enumerate(stats):
        if not s.complete:
            print(f"{i} - - - PSA (modality missing)")
            continue
        t, v = float(s.text_mean.mean()), float(s.vision_mean.mean())
        ratio = t / v if v > 0 else float("inf")
        print(f"{i} {t:.6e} {v:.6e} {ratio:.4f} {'TSA' if i in tsa else 'PSA'}")
    print(f"tsa_layers = {','.join(map(str, tsa))}")
    print(f"psa_layers = {len(stats) - len(tsa)}")

    if args.policy_out:
        patterns = {i: Pattern.TSA if i in tsa else Pattern.PSA for i in range(len(stats))}
        pf = PolicyFile(n_layers=len(stats), patterns=patterns, pivots=list(args.pivots),
                        recent_window=args.recent_window, n_pivot_max=args.n_pivot_max,
                        gamma=args.gamma)
        Path(args.policy_out).write_text(format_policy_file(pf))
    if args.summary:
        write_summary(args.summary, {
            "layers": len(stats), "tsa_layers": ",".join(map(str, tsa)),
            "gamma": _fmt(args.gamma), "excluded_prefix": args.excluded_prefix,
        })
    return 0


def cmd_detect_pivots(args) -> int:
    residual = load_tensor(args.residual)
    if residual.ndim != 2:
        raise InputError(f"residual dump must be tokens x hidden, got shape {residual.shape}")
    pivots = detect_pivot_tokens(residual, args.tau, args.n_pivot_max)
    scores = massive_activation_scores(residual)
    median = float(np.median(scores))
    print("# token peak_abs ratio_to_median")
    for i in pivots:
        ratio = scores[i] / median if median > 0 else float("inf")
        print(f"{i} {scores[i]:.6e} {ratio:.3f}")
    print(f"pivots = [{', '.join(map(str, pivots))}]")
    if args.summary:
        write_summary(args.summary, {
            "pivots": ",".join(map(str, pivots)), "tau": _fmt(args.tau),
            "n_pivot_max": args.n_pivot_max, "median_peak": f"{median:.9e}",
        })
    return 0


def sim_config_from_args(args) -> SimConfig:
    cache = CacheConfig(
        n_layers=args.n_layers, n_heads=args.n_heads, n_kv_heads=args.n_kv_heads,
        head_dim=args.head_dim, group_size=args.group_size, clip_int2=args.clip_int2,
        clip_int4=args.clip_int4, recent_window=args.recent_window, n_pivot_max=args.n_pivot_max,
    )
    return SimConfig(
        cache=cache, seq_len_prefill=args.prefill, decode_steps=args.decode,
        rope_base=args.rope_base, seed=args.seed, vision_fraction=args.vision_fraction,
        vision_start=args.vision_start, tsa_layers=tuple(args.tsa_layers),
        hot_channels=args.hot_channels, hot_multiplier=args.hot_multiplier,
        n_injected_pivots=args.injected_pivots, tau=args.tau,
    )


def cmd_simulate(args) -> int:
    cfg = sim_config_from_args(args)
    policies = None
    if args.policy:
        pf = parse_policy_file(Path(args.policy).read_text())
        policies = pf.policies()
        tsa = tuple(i for i, p in pf.patterns.items() if p is Pattern.TSA)
        cfg = replace(cfg, tsa_layers=tsa)
    methods = list(dict.fromkeys(args.methods))
    results = run_comparison(cfg, methods, policies)

    c = cfg.cache
    summary: dict[str, object] = {
        "seed": cfg.seed, "n_layers": c.n_layers, "n_heads": c.n_heads, "n_kv_heads": c.n_kv_heads,
        "head_dim": c.head_dim, "group_size": c.group_size, "clip_int2": _fmt(c.clip_int2),
        "clip_int4": _fmt(c.clip_int4), "recent_window": c.recent_window,
        "n_pivot_max": c.n_pivot_max, "prefill": cfg.seq_len_prefill, "decode": cfg.decode_steps,
        "tsa_layers": ",".join(map(str, cfg.tsa_layers)), "methods": ",".join(methods),
    }
    print(f"{'method':14s} {'mean_cos':>10s} {'min_cos':>10s} {'rel_frob':>10s} "
          f"{'key_mse':>10s} {'bits':>7s} {'ratio':>7s}")
    for name, m in results.items():
        mem = m.memory
        print(f"{name:14s} {m.mean_cosine:10.6f} {m.min_cosine:10.6f} {m.mean_rel_frob:10.4e} "
              f"{m.key_mse:10.4e} {mem.effective_bits_per_element:7.3f} {mem.compression_ratio_vs_fp16:7.3f}")
        for key, value in m.summary().items():
            summary[f"{name}.{key}"] = value
    if args.summary:
        write_summary(args.summary, summary)
    if args.records:
        with open(args.records, "w") as fh:
            fh.write("# method layer step cosine max_err rel_frob\n")
            for m in results.values():
                for line in m.records():
                    fh.write(line + "\n")
    return 0


_REPORT_KEYS = ("mean_cosine", "min_cosine", "mean_rel_frob", "key_mse", "effective_bits",
                "compression_ratio")


def cmd_report(args) -> int:
    keys = args.keys or list(_REPORT_KEYS)
    for path in args.summaries:
        summary = read_summary(path)
        methods = [m for m in summary.get("methods", "").split(",") if m]
        if not methods:
            methods = sorted({k.split(".", 1)[0] for k in summary if "." in k})
        print(f"# {path}")
        print(" ".join([f"{'method':14s}"] + [f"{k:>16s}" for k in keys]))
        for m in methods:
            cells = [f"{summary.get(f'{m}.{k}', '-'):>16s}" for k in keys]
            print(" ".join([f"{m:14s}"] + cells))
    if args.records:
        per: dict[tuple[str, int], list[float]] = {}
        for raw in Path(args.records).read_text().splitlines():
            if not raw.strip() or raw.startswith("#"):
                continue
            parts = raw.split()
            if len(parts) != 6:
                raise InputError(f"bad record line: {raw!r}")
            per.setdefault((parts[0], int(parts[1])), []).append(float(parts[3]))
        print("# method layer mean_cosine min_cosine")
        for (method, layer), vals in sorted(per.items()):
            print(f"{method} {layer} {np.mean(vals):.6f} {np.min(vals):.6f}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser(sim_defaults: dict | None = None) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="akvq",
        description="Mixed-precision KV cache quantization toolkit.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    q = sub.add_parser("quantize", formatter_class=fmt,
                       help="quantize-dequantize a tokens x channels tensor and report the error")
    q.add_argument("input", help="AKV1 tensor (tokens x channels)")
    q.add_argument("-o", "--output", help="write the reconstructed tensor here")
    q.add_argument("--bits", type=int, choices=(2, 4), default=2, help="code width")
    q.add_argument("--clip", type=float, default=None,
                   help="clip ratio in (0, 1]; by default 0.8 at 2 bits and 1.0 at 4 bits "
                        "(reference configuration)")
    q.add_argument("--group-size", type=int, default=DEFAULT_GROUP_SIZE,
                   help="elements per quantization group (reference configuration)")
    q.add_argument("--summary", help="write key = value results here")
    q.set_defaults(func=cmd_quantize)

    a = sub.add_parser("analyze-attention", formatter_class=fmt,
                       help="per-layer text vs vision attention and the TSA/PSA split")
    a.add_argument("attn", help="AKV1 attention dump (layers x heads x queries x keys)")
    a.add_argument("labels", help="text file of per-key modality labels (text/vision, t/v or 1/0)")
    a.add_argument("--gamma", type=float, default=DEFAULT_GAMMA,
                   help="a layer is TSA when mean text attention exceeds gamma x mean vision attention "
                        "(desk-scale choice)")
    a.add_argument("--excluded-prefix", type=int, default=DEFAULT_EXCLUDED_PREFIX,
                   help="leading key tokens ignored as attention sinks (desk-scale choice)")
    a.add_argument("--policy-out", help="write a layer policy file built from the detected split")
    a.add_argument("--pivots", type=_int_list, default=[], help="pivot tokens recorded in --policy-out")
    a.add_argument("--recent-window", type=int, default=DEFAULT_RECENT_WINDOW,
                   help="recent window recorded in --policy-out (reference configuration)")
    a.add_argument("--n-pivot-max", type=int, default=DEFAULT_N_PIVOT_MAX,
                   help="pivot cap recorded in --policy-out (reference configuration)")
    a.add_argument("--summary", help="write key = value results here")
    a.set_defaults(func=cmd_analyze_attention)

    d = sub.add_parser("detect-pivots", formatter_class=fmt,
                       help="find pivot tokens from massive residual activations")
    d.add_argument("residual", help="AKV1 residual dump (tokens x hidden)")
    d.add_argument("--tau", type=float, default=DEFAULT_TAU,
                   help="threshold as a multiple of the median per-token peak (desk-scale choice)")
    d.add_argument("--n-pivot-max", type=int, default=DEFAULT_N_PIVOT_MAX,
                   help="maximum pivots kept (reference configuration)")
    d.add_argument("--summary", help="write key = value results here")
    d.set_defaults(func=cmd_detect_pivots)

    s = sub.add_parser("simulate", formatter_class=fmt,
                       help="simulated prefill + decode: exact baseline vs quantized caches")
    s.add_argument("--preset", choices=sorted(PRESETS),
                   help="bundle of defaults; explicit flags still override it")
    s.add_argument("--methods", type=lambda t: [m.strip() for m in t.split(",") if m.strip()],
                   default=list(DEFAULT_SIM_METHODS),
                   help=f"comma-separated methods from: {', '.join(METHODS)}")
    s.add_argument("--policy", help="layer policy file; overrides --tsa-layers and pivot detection")
    s.add_argument("--seed", type=int, default=0, help="synthetic data seed")
    g = s.add_argument_group("cache")
    g.add_argument("--n-layers", type=int, default=32, help="layers (reference configuration)")
    g.add_argument("--n-heads", type=int, default=4, help="query heads per layer (desk-scale choice)")
    g.add_argument("--n-kv-heads", type=int, default=1, help="KV heads per layer (desk-scale choice)")
    g.add_argument("--head-dim", type=int, default=128, help="head dimension (reference configuration)")
    g.add_argument("--group-size", type=int, default=DEFAULT_GROUP_SIZE,
                   help="quantization group size (reference configuration)")
    g.add_argument("--clip-int2", type=float, default=0.8, help="2-bit clip ratio (reference configuration)")
    g.add_argument("--clip-int4", type=float, default=1.0, help="4-bit clip ratio (reference configuration)")
    g.add_argument("--recent-window", type=int, default=DEFAULT_RECENT_WINDOW,
                   help="tokens kept at 16 bits at the end of the sequence (reference configuration)")
    g.add_argument("--n-pivot-max", type=int, default=DEFAULT_N_PIVOT_MAX,
                   help="pivot tokens kept at 16 bits in PSA layers (reference configuration)")
    g.add_argument("--tsa-layers", type=_int_list, default=[0, 1],
                   help="text-salient layers; the rest are pivot-salient (reference configuration)")
    g = s.add_argument_group("synthetic data")
    g.add_argument("--prefill", type=int, default=512, help="prompt tokens")
    g.add_argument("--decode", type=int, default=64, help="decode steps")
    g.add_argument("--rope-base", type=float, default=10000.0, help="RoPE base (standard rotary choice)")
    g.add_argument("--vision-fraction", type=float, default=0.75, help="share of prompt tokens that are vision")
    g.add_argument("--vision-start", type=int, default=8, help="first vision token")
    g.add_argument("--hot-channels", type=int, default=2, help="outlier key channels per head")
    g.add_argument("--hot-multiplier", type=float, default=20.0, help="outlier channel scale")
    g.add_argument("--injected-pivots", type=int, default=3, help="massive-activation tokens besides token 0")
    g.add_argument("--tau", type=float, default=DEFAULT_TAU, help="pivot detection threshold")
    s.add_argument("--summary", help="write key = value results here")
    s.add_argument("--records", help="write one line per (method, layer, step) here")
    s.set_defaults(func=cmd_simulate, **(sim_defaults or {}))

    r = sub.add_parser("report", formatter_class=fmt, help="tabulate simulate summaries and records")
    r.add_argument("summaries", nargs="*", help="summary files written by simulate --summary")
    r.add_argument("--keys", type=lambda t: [k.strip() for k in t.split(",") if k.strip()],
                   help=f"summary keys to show (default: {', '.join(_REPORT_KEYS)})")
    r.add_argument("--records", help="records file from simulate --records; adds per-layer means")
    r.set_defaults(func=cmd_report)
    return parser


def _preset_defaults(name: str) -> dict:
    values = dict(PRESETS[name])
    if "tsa_layers" in values:
        values["tsa_layers"] = _int_list(values["tsa_layers"])
    return values


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if getattr(args, "preset", None):
        # Re-parse with the preset as defaults so explicit flags still win.
        args = build_parser(_preset_defaults(args.preset)).parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AkvqError, OSError) as exc:
        print(f"akvq {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
