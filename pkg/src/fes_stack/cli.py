"""Command-line surface: synthetic episode generation, training,
prediction, suite evaluation, ablations, and kernel export.

Exit codes are a stable scripting contract: 0 on success, 1 on runtime
failure, 2 on usage or configuration errors. Human-readable progress goes
to stderr; machine-readable output goes to files or stdout only.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from pathlib import Path

import numpy as np

from .episode import load_episode, save_episode
from .report import MethodSpec, evaluate_suite
from .stacker import (
    ConFesKernel,
    FesKernel,
    Method,
    TrainedStacker,
    export_kernel_csvs,
    omission_rate,
)
from .synthetic import (
    DomainProfile,
    default_profile,
    derive_episode_seed,
    episode_shape_stats,
    sample_episode,
)
from .training import (
    AblationMode,
    LambdaGrid,
    TrainConfig,
    predict_episode,
    train_stacker,
)


class ConfigError(ValueError):
    """Bad flag combination or configuration; maps to exit code 2."""


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("FES_STACK_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"FES_STACK_SEED is not an integer: {env!r}") from exc
    return 0


def _parse_pool(text: str) -> tuple:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"bad --lambda-pool value: {exc}") from exc
    if not values or min(values) < 0:
        raise ConfigError("--lambda-pool needs one or more values >= 0")
    return values


def _train_config(args) -> TrainConfig:
    try:
        grid = LambdaGrid()
        if getattr(args, "lambda_pool", None):
            pool = _parse_pool(args.lambda_pool)
            grid = LambdaGrid(pool1=pool, pool2=pool)
        if args.ridge < 0:
            raise ConfigError("--ridge must be >= 0")
        if not (1 <= args.stride <= args.conv_size):
            raise ConfigError("need --conv-size >= --stride >= 1")
        return TrainConfig(
            ridge_strength=args.ridge,
            conv_size=args.conv_size,
            conv_stride=args.stride,
            lambda_grid=grid,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _check_confes_dims(bundle, config: TrainConfig, ablation: AblationMode) -> None:
    j = bundle.n_snapshots
    if ablation in (
        AblationMode.FIRST_ONLY,
        AblationMode.LAST_ONLY,
        AblationMode.NO_CV_FIRST,
        AblationMode.NO_CV_LAST,
    ):
        j = 1
    try:
        ConFesKernel.constant(
            bundle.n_extractors, j, config.conv_size, config.conv_stride, 1.0
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _expand_episode_args(patterns) -> list:
    paths = set()
    for pattern in patterns:
        for hit in glob.glob(pattern):
            if (Path(hit) / "manifest.json").is_file():
                paths.add(str(Path(hit)))
    return sorted(paths)


def _matrix(values) -> list:
    return [[float(v) for v in row] for row in np.atleast_2d(values)]


def _stacker_to_dict(stacker: TrainedStacker, bundle=None) -> dict:
    if isinstance(stacker.kernel, ConFesKernel):
        raw = {
            "depthwise": _matrix(stacker.kernel.depthwise),
            "global": _matrix(stacker.kernel.global_),
            "stride": stacker.kernel.stride,
        }
    else:
        raw = {"kernel": _matrix(stacker.kernel.raw)}
    out = {
        "schema_version": 1,
        "method": stacker.method.value,
        "ablation": stacker.ablation,
        "snapshot_index": stacker.snapshot_index,
        "raw": raw,
        "effective": _matrix(stacker.effective),
        "diagnostics": {
            "final_loss": stacker.final_loss,
            "grad_inf_norm": stacker.grad_inf_norm,
            "omission_rate": stacker.omission_rate,
            "iterations": stacker.n_iterations,
            "status": stacker.status,
            "lambda1": stacker.lambda1,
            "lambda2": stacker.lambda2,
            "n_grid_fits": stacker.n_grid_fits,
            "used_fallback": stacker.used_fallback,
        },
    }
    if bundle is not None:
        out["domain"] = bundle.domain_name
        out["episode_id"] = bundle.episode_id
    return out


def _stacker_from_dict(spec: dict) -> TrainedStacker:
    method = Method(spec["method"])
    raw = spec["raw"]
    if "depthwise" in raw:
        kernel = ConFesKernel(
            depthwise=np.asarray(raw["depthwise"], dtype=np.float64),
            global_=np.asarray(raw["global"], dtype=np.float64),
            stride=int(raw["stride"]),
        )
    else:
        kernel = FesKernel(np.asarray(raw["kernel"], dtype=np.float64))
    effective = np.asarray(spec["effective"], dtype=np.float64)
    diag = spec.get("diagnostics", {})
    return TrainedStacker(
        method=method,
        kernel=kernel,
        effective=effective,
        final_loss=diag.get("final_loss", 0.0),
        grad_inf_norm=diag.get("grad_inf_norm", 0.0),
        omission_rate=diag.get("omission_rate", omission_rate(effective)),
        n_iterations=diag.get("iterations", 0),
        status=diag.get("status", "loaded"),
        ablation=spec.get("ablation", "full"),
        snapshot_index=spec.get("snapshot_index", -1),
        lambda1=diag.get("lambda1", 0.0),
        lambda2=diag.get("lambda2", 0.0),
        n_grid_fits=diag.get("n_grid_fits", 0),
        used_fallback=diag.get("used_fallback", False),
    )


def cmd_synth(args) -> int:
    seed = _resolve_seed(args)
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    if args.profile:
        profile = DomainProfile.from_json(args.profile, args.extractors, args.snapshots)
    else:
        profile = default_profile(args.extractors, args.snapshots)

    out = Path(args.out)
    bundles = []
    for i in range(args.count):
        episode_seed = derive_episode_seed(seed, i)
        bundle = sample_episode(
            profile, args.extractors, args.snapshots, episode_seed, f"ep{i:05d}"
        )
        save_episode(bundle, out / profile.name / bundle.episode_id)
        bundles.append(bundle)
    print(f"wrote {len(bundles)} episodes to {out / profile.name}", file=sys.stderr)

    stats = episode_shape_stats(bundles)
    fields = ("support_size", "class_count", "mean_shot")
    print(f"{'domain':<14}" + "".join(f"{f + '_' + s:>18}" for f in fields for s in ("min", "mean", "max")))
    row = f"{profile.name:<14}"
    for f in fields:
        for s in ("min", "mean", "max"):
            row += f"{stats[f][s]:>18.2f}"
    print(row)
    return 0


def cmd_train(args) -> int:
    seed = _resolve_seed(args)
    config = _train_config(args)
    method = Method(args.method)
    ablation = AblationMode(args.ablation)
    bundle = load_episode(args.episode)
    if method is Method.CONFES:
        _check_confes_dims(bundle, config, ablation)

    stacker = train_stacker(bundle, method, config, ablation, seed)
    payload = json.dumps(_stacker_to_dict(stacker, bundle), indent=2, sort_keys=True)
    Path(args.out).write_text(payload + "\n", encoding="utf-8")
    print(
        f"trained {method.value} on {bundle.episode_id}: "
        f"loss={stacker.final_loss:.6g} omission={stacker.omission_rate:.3f} "
        f"status={stacker.status}",
        file=sys.stderr,
    )
    return 0


def cmd_predict(args) -> int:
    spec = json.loads(Path(args.kernel).read_text(encoding="utf-8"))
    stacker = _stacker_from_dict(spec)
    bundle = load_episode(args.episode)
    labels, probs = predict_episode(stacker, bundle)

    header = ["instance", "prediction", "predicted_name"] + [
        f"p_{name}" for name in bundle.class_names
    ]
    lines = [",".join(header)]
    for i, (label, row) in enumerate(zip(labels, probs)):
        cells = [str(i), str(int(label)), bundle.class_names[int(label)]]
        cells += [f"{p:.17g}" for p in row]
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _make_specs(args, methods, ablations=None) -> list:
    config = _train_config(args)
    specs = []
    if ablations is None:
        for method in methods:
            specs.append(MethodSpec(label=method.value, method=method, config=config))
    else:
        for mode in ablations:
            specs.append(
                MethodSpec(
                    label=mode.value,
                    method=methods[0],
                    config=config,
                    ablation=mode,
                )
            )
    return specs


def _run_suite(args, specs) -> int:
    paths = _expand_episode_args(args.episodes)
    if not paths:
        raise ConfigError(f"no episode bundles match {args.episodes}")
    seed = _resolve_seed(args)
    jobs = args.jobs if args.jobs else os.cpu_count() or 1
    needs_confes = any(s.method is Method.CONFES for s in specs)
    if needs_confes:
        bundle = load_episode(paths[0])
        for s in specs:
            if s.method is Method.CONFES:
                _check_confes_dims(bundle, s.config, s.ablation)

    report = evaluate_suite(paths, specs, seed=seed, jobs=jobs)
    written = report.write(args.out, figures=not args.no_figures)
    print(
        f"evaluated {sum(len(v) for v in report.episode_ids.values())} episodes "
        f"x {len(specs)} methods; report at {written['report']}",
        file=sys.stderr,
    )
    return 0


def cmd_evaluate(args) -> int:
    try:
        methods = [Method(m.strip()) for m in args.methods.split(",") if m.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not methods:
        raise ConfigError("--methods must name at least one method")
    specs = _make_specs(args, methods)
    if args.ablation != AblationMode.FULL.value:
        mode = AblationMode(args.ablation)
        specs = [
            MethodSpec(s.label, s.method, s.config, mode) for s in specs
        ]
    return _run_suite(args, specs)


def cmd_ablate(args) -> int:
    method = Method(args.method)
    specs = _make_specs(args, [method], ablations=list(AblationMode))
    return _run_suite(args, specs)


def cmd_export_kernel(args) -> int:
    spec = json.loads(Path(args.kernel).read_text(encoding="utf-8"))
    stacker = _stacker_from_dict(spec)
    stem = args.stem or f"{spec.get('method', 'kernel')}"
    written = export_kernel_csvs(stacker, args.out, stem)
    if not args.no_figures:
        from . import figures as fig

        for path in list(written):
            matrix = np.loadtxt(path, delimiter=",", ndmin=2)
            png = path.with_suffix(".png")
            fig.save_kernel_heatmap(matrix, png, title=path.stem)
            written.append(png)
    for path in written:
        print(path)
    return 0


def _add_common_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ridge", type=float, default=1e-2, help="ridge strength")
    p.add_argument("--conv-size", type=int, default=9, help="depthwise kernel size")
    p.add_argument("--stride", type=int, default=4, help="depthwise kernel stride")
    p.add_argument(
        "--lambda-pool",
        default=None,
        help="comma-separated grid-search pool for both fused-lasso strengths "
        "(default: 1,1e-1,...,1e-6,0)",
    )
    p.add_argument("--seed", type=int, default=None, help="seed (env FES_STACK_SEED as fallback)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fes-stack",
        description="Logit-space stacking of fine-tuned feature extractor snapshots.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate synthetic episode bundles")
    p.add_argument("--profile", default=None, help="domain profile JSON")
    p.add_argument("--count", type=int, default=600)
    p.add_argument("--extractors", type=int, default=8)
    p.add_argument("--snapshots", type=int, default=41)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one stacker on one episode")
    p.add_argument("--episode", required=True, help="episode bundle directory")
    p.add_argument("--method", choices=[m.value for m in Method], default="fes")
    p.add_argument(
        "--ablation",
        choices=[m.value for m in AblationMode],
        default=AblationMode.FULL.value,
    )
    _add_common_train_flags(p)
    p.add_argument("--out", required=True, help="kernel JSON output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict query labels with a trained kernel")
    p.add_argument("--kernel", required=True, help="kernel JSON from train")
    p.add_argument("--episode", required=True)
    p.add_argument("--out", default=None, help="CSV output (default stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="evaluate methods on cached episodes")
    p.add_argument("--episodes", nargs="+", required=True, help="bundle dir globs")
    p.add_argument("--methods", default="fes,confes,refes")
    p.add_argument(
        "--ablation",
        choices=[m.value for m in AblationMode],
        default=AblationMode.FULL.value,
    )
    _add_common_train_flags(p)
    p.add_argument("--jobs", type=int, default=None, help="worker processes")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run all six ablation variants")
    p.add_argument("--episodes", nargs="+", required=True)
    p.add_argument("--method", choices=[m.value for m in Method], default="fes")
    _add_common_train_flags(p)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-kernel", help="export kernel CSVs and heatmaps")
    p.add_argument("--kernel", required=True, help="kernel JSON from train")
    p.add_argument("--stem", default=None, help="output filename stem")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_kernel)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures: bad bundles, I/O, optimizer aborts
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
