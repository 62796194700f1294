"""Command-line surface: ratio profiling, 2D sweeps, single guided passes.

Every command is a pure function of its flags: the same invocation writes
byte-identical artifacts and returns the same exit code. A manifest.json
recording the resolved parameters and artifact names accompanies every run.
Exit codes: 0 on success (and all checks passing), 1 for failed --check
invariants, 2 for usage, configuration, or validation errors.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention import joint_attention, project_qkv
from .contours import contour_text, iso_contour
from .errors import ConfigError, DegenerateInputError, ShapeError
from .guidance import GuidanceConfig, apply_dcag, guided_attention, load_config
from .harness import ToyStack, run_stack, seeded_batch, sweep, sweep_csv
from .metrics import SSIM_WINDOW
from .profiling import heatmap_pgm, pearson, profile_stack, ratios_csv

_METRICS = ("mse", "psnr", "ssim")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"seed must be non-negative, got {value}")
    return value


def _value_range(text: str) -> tuple[float, float, int]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected start:stop:count, got {text!r}")
    try:
        start, stop = float(parts[0]), float(parts[1])
        count = int(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:stop:count, got {text!r}") from None
    if count < 1:
        raise argparse.ArgumentTypeError(f"range count must be at least 1, got {count}")
    if not (math.isfinite(start) and math.isfinite(stop)):
        raise argparse.ArgumentTypeError(f"range endpoints must be finite, got {text!r}")
    return start, stop, count


def _contour_arg(text: str) -> tuple[str, float]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected metric=level, got {text!r}")
    metric, level = text.split("=", 1)
    metric = metric.strip()
    if metric not in _METRICS:
        raise argparse.ArgumentTypeError(f"unknown metric {metric!r}, expected one of {_METRICS}")
    try:
        return metric, float(level)
    except ValueError:
        raise argparse.ArgumentTypeError(f"contour level must be a number, got {level!r}") from None


def _add_dim_flags(parser, *, img_tokens_default: int, with_stack: bool = True):
    if with_stack:
        parser.add_argument("--layers", type=_positive_int, default=8,
                            help="attention layers in the toy stack (default 8)")
        parser.add_argument("--steps", type=_positive_int, default=6,
                            help="denoising steps (default 6)")
    parser.add_argument("--seed", type=_seed, default=42,
                        help="master seed for weights, step embeddings, and inputs (default 42)")
    parser.add_argument("--heads", type=_positive_int, default=4,
                        help="attention heads (default 4)")
    parser.add_argument("--dim", type=_positive_int, default=64,
                        help="hidden dimension (default 64)")
    parser.add_argument("--txt-tokens", type=_positive_int, default=8,
                        help="text tokens (default 8)")
    parser.add_argument("--img-tokens", type=_positive_int, default=img_tokens_default,
                        help=f"image tokens (default {img_tokens_default})")
    parser.add_argument("--out", default=".", help="output directory (default .)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcag",
        description="Dual-channel K/V attention guidance: profiling, sweeps, and guided passes.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    profile = sub.add_parser("profile", help="delta-to-bias ratio heatmaps over layers x steps")
    _add_dim_flags(profile, img_tokens_default=64)
    profile.add_argument("--heatmap", action="store_true",
                         help="also write ratio_k.pgm / ratio_v.pgm graymaps")
    profile.set_defaults(func=_cmd_profile)

    swp = sub.add_parser("sweep", help="fidelity metrics over a (delta_k, delta_v) grid")
    _add_dim_flags(swp, img_tokens_default=144)
    swp.add_argument("--dk", type=_value_range, default=(1.0, 1.2, 5), metavar="START:STOP:COUNT",
                     help="delta_k range (default 1.0:1.2:5)")
    swp.add_argument("--dv", type=_value_range, default=(1.0, 1.2, 5), metavar="START:STOP:COUNT",
                     help="delta_v range (default 1.0:1.2:5)")
    swp.add_argument("--contour", action="append", type=_contour_arg, metavar="METRIC=LEVEL",
                     help="also extract iso-level polylines (repeatable)")
    swp.set_defaults(func=_cmd_sweep)

    attend = sub.add_parser("attend", help="one guided forward pass, dumping blocks and weights")
    _add_dim_flags(attend, img_tokens_default=64, with_stack=False)
    attend.add_argument("--config", required=True, help="guidance config file")
    attend.add_argument("--check", action="store_true",
                        help="run the invariant checks (identity, affinity, logit scaling)")
    attend.set_defaults(func=_cmd_attend)
    return parser


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def _matrix_csv(matrix: np.ndarray) -> str:
    rows = [",".join(_fmt(v) for v in row) for row in np.atleast_2d(matrix)]
    return "\n".join(rows) + "\n"


def _write_artifacts(outdir: Path, artifacts: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    for name, content in artifacts.items():
        with open(outdir / name, "w", encoding="utf-8", newline="") as handle:
            handle.write(content)


def _write_manifest(outdir: Path, command: str, parameters: dict, artifacts,
                    summary=None) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "parameters": parameters,
        "artifacts": sorted(artifacts),
    }
    if summary is not None:
        manifest["summary"] = summary
    with open(outdir / "manifest.json", "w", encoding="utf-8", newline="") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _dim_parameters(args, with_stack: bool = True) -> dict:
    parameters = {
        "seed": args.seed,
        "heads": args.heads,
        "dim": args.dim,
        "txt_tokens": args.txt_tokens,
        "img_tokens": args.img_tokens,
    }
    if with_stack:
        parameters["layers"] = args.layers
        parameters["steps"] = args.steps
    return parameters


def _validate_dims(parser_error, args) -> None:
    if args.dim % args.heads != 0:
        parser_error(f"--dim {args.dim} is not divisible by --heads {args.heads}")


def _cmd_profile(args) -> int:
    stack = ToyStack.seeded(args.seed, layers=args.layers, steps=args.steps,
                            dim=args.dim, heads=args.heads)
    batch = seeded_batch(args.seed, txt_tokens=args.txt_tokens,
                         img_tokens=args.img_tokens, dim=args.dim)
    profile_k, profile_v = profile_stack(stack, batch)
    artifacts = {"ratios.csv": ratios_csv(profile_k, profile_v)}
    if args.heatmap:
        artifacts["ratio_k.pgm"] = heatmap_pgm(profile_k)
        artifacts["ratio_v.pgm"] = heatmap_pgm(profile_v)
    try:
        correlation = pearson(profile_k.ratios, profile_v.ratios)
    except DegenerateInputError:
        correlation = None
    summary = {
        "mean_ratio_k": float(profile_k.ratios.mean()),
        "mean_ratio_v": float(profile_v.ratios.mean()),
        "pearson_r": correlation,
    }
    outdir = Path(args.out)
    _write_artifacts(outdir, artifacts)
    parameters = _dim_parameters(args)
    parameters["heatmap"] = bool(args.heatmap)
    _write_manifest(outdir, "profile", parameters, artifacts, summary)
    print(f"mean K-ratio: {_fmt(summary['mean_ratio_k'])}")
    print(f"mean V-ratio: {_fmt(summary['mean_ratio_v'])}")
    print("pearson r:    " + ("undefined" if correlation is None else _fmt(correlation)))
    return 0


def _cmd_sweep(args) -> int:
    side = math.isqrt(args.img_tokens)
    if side * side != args.img_tokens:
        raise ConfigError(f"--img-tokens {args.img_tokens} is not a perfect square")
    if side < SSIM_WINDOW:
        raise ConfigError(
            f"--img-tokens {args.img_tokens} renders a {side}x{side} image; ssim needs "
            f"at least {SSIM_WINDOW} pixels per side ({SSIM_WINDOW ** 2} tokens)"
        )
    stack = ToyStack.seeded(args.seed, layers=args.layers, steps=args.steps,
                            dim=args.dim, heads=args.heads)
    batch = seeded_batch(args.seed, txt_tokens=args.txt_tokens,
                         img_tokens=args.img_tokens, dim=args.dim)
    dk_values = np.linspace(*args.dk)
    dv_values = np.linspace(*args.dv)
    result = sweep(stack, batch, dk_values, dv_values)
    artifacts = {"sweep.csv": sweep_csv(result)}
    for metric, level in args.contour or []:
        name = f"contour_{metric}_{level:g}.txt"
        artifacts[name] = contour_text(iso_contour(result, metric, level))
    outdir = Path(args.out)
    _write_artifacts(outdir, artifacts)
    parameters = _dim_parameters(args)
    parameters["dk"] = list(args.dk)
    parameters["dv"] = list(args.dv)
    parameters["contour"] = [[metric, level] for metric, level in args.contour or []]
    _write_manifest(outdir, "sweep", parameters, artifacts,
                    summary={"grid_points": len(result.records)})
    print(f"{len(result.records)} grid points written to sweep.csv")
    return 0


def _check_identity(batch, weights, token_range) -> bool:
    plain = guided_attention(batch, weights, None)
    guided = guided_attention(batch, weights, GuidanceConfig.identity(token_range))
    return np.array_equal(plain.txt, guided.txt) and np.array_equal(plain.img, guided.img)


def _check_logit_scaling(qkv, token_range, delta_k: float = 1.1) -> bool:
    i_s, i_e = token_range
    scale = 1.0 / np.sqrt(qkv.q.shape[2])
    logits = (qkv.q.transpose(1, 0, 2) @ qkv.k.transpose(1, 2, 0)) * scale
    guided = apply_dcag(qkv, GuidanceConfig(token_range, delta_k=delta_k, delta_v=1.0))
    glogits = (guided.q.transpose(1, 0, 2) @ guided.k.transpose(1, 2, 0)) * scale
    pre = logits[:, :, i_s:i_e, None] - logits[:, :, None, i_s:i_e]
    post = glogits[:, :, i_s:i_e, None] - glogits[:, :, None, i_s:i_e]
    tolerance = 1e-10 * max(1.0, float(np.max(np.abs(delta_k * pre))))
    return float(np.max(np.abs(post - delta_k * pre))) <= tolerance


def _check_value_affinity(batch, weights, token_range) -> bool:
    def output(delta_v):
        cfg = GuidanceConfig(token_range, delta_k=1.0, delta_v=delta_v)
        out = guided_attention(batch, weights, cfg)
        return np.concatenate([out.txt, out.img], axis=0)

    o0, o1 = output(0.0), output(1.0)
    step = o1 - o0
    scale = max(1.0, float(np.max(np.abs(o1))))
    return all(
        float(np.max(np.abs(output(dv) - (o0 + dv * step)))) <= 1e-10 * scale
        for dv in (0.5, 2.0, 3.0)
    )


def _cmd_attend(args) -> int:
    token_range = (args.txt_tokens, args.txt_tokens + args.img_tokens)
    cfg = load_config(args.config, default_token_range=token_range)
    weights = ToyStack.seeded(args.seed, layers=1, steps=1,
                              dim=args.dim, heads=args.heads).layers[0]
    batch = seeded_batch(args.seed, txt_tokens=args.txt_tokens,
                         img_tokens=args.img_tokens, dim=args.dim)
    qkv = project_qkv(batch, weights)
    guided = apply_dcag(qkv, cfg)
    out, weights_tensor = joint_attention(guided, return_weights=True)
    i_s, i_e = qkv.img_range
    s, h, dh = qkv.q.shape

    def flat(block):
        return block.reshape(block.shape[0], h * dh)

    artifacts = {
        "k_img_pre.csv": _matrix_csv(flat(qkv.k[i_s:i_e])),
        "k_img_post.csv": _matrix_csv(flat(guided.k[i_s:i_e])),
        "v_img_pre.csv": _matrix_csv(flat(qkv.v[i_s:i_e])),
        "v_img_post.csv": _matrix_csv(flat(guided.v[i_s:i_e])),
        "attention.csv": _matrix_csv(weights_tensor.reshape(h * s, s)),
        "output.csv": _matrix_csv(np.concatenate([out.txt, out.img], axis=0)),
    }
    checks = None
    if args.check:
        checks = {
            "identity": _check_identity(batch, weights, token_range),
            "logit_scaling": _check_logit_scaling(qkv, token_range),
            "value_affinity": _check_value_affinity(batch, weights, token_range),
        }
    outdir = Path(args.out)
    _write_artifacts(outdir, artifacts)
    parameters = _dim_parameters(args, with_stack=False)
    parameters["config"] = {
        "delta_k": cfg.delta_k,
        "delta_v": cfg.delta_v,
        "lambda_k": cfg.lambda_k,
        "lambda_v": cfg.lambda_v,
        "token_range": list(cfg.token_range),
        "guided_layers": sorted(cfg.guided_layers),
    }
    parameters["check"] = bool(args.check)
    summary = {"checks": checks} if checks is not None else None
    _write_manifest(outdir, "attend", parameters, artifacts, summary)
    print(f"guided pass complete: {len(artifacts)} artifacts in {outdir}")
    if checks is not None:
        for name, passed in checks.items():
            print(f"check {name}: {'PASS' if passed else 'FAIL'}")
        if not all(checks.values()):
            return 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "dim"):
        _validate_dims(parser.error, args)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, DegenerateInputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
