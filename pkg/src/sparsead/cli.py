"""Command-line interface.

Subcommands:

- ``synth``     write a seeded synthetic benchmark dataset
- ``profile``   variance-profile a support set and export the selection
- ``score``     score every test entry of a manifest
- ``evaluate``  compute metrics for a finished scoring run
- ``ablate``    sweep one axis (shots, k, alpha, neuron-selection) to a CSV

Contractual outputs (``profile.json``, ``results.json``, ``maps/*.npy``,
``report.json``, ``report.csv``, ``ablation.csv``) are deterministic: the
same manifest and flags produce the same bytes, regardless of ``--workers``.
Wall-clock diagnostics go to ``timings.json``, which is the one file exempt
from that guarantee.

Exit codes: 0 on success, 1 on validation errors (bad arguments, malformed
manifests or tensors), 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .crossmodal import load_text_probe
from .errors import (
    ConfigurationError,
    EngineError,
    ParameterError,
    SchemaError,
    VALIDATION_ERRORS,
)
from .gallery import build_gallery
from .metrics import evaluate, write_report
from .scoring import AnomalyResult, PipelineConfig, score_image
from .subspace import (
    SensitiveSubspace,
    VarianceProfile,
    channel_variance,
    random_subspace,
    select_topk,
)
from .synthetic import generate_benchmark
from .tensor_io import (
    DatasetManifest,
    load_manifest,
    read_feature_tensor,
    read_tensor,
    write_tensor,
)


@dataclass
class ScoringRun:
    """Everything produced by one scoring pass over a manifest."""

    results: list[AnomalyResult]
    profile: VarianceProfile
    subspace: SensitiveSubspace
    support_ids: list[str]
    selection: str
    shots: int | None
    seed: int


#: Salt for the shot-subsampling stream; see subspace._SELECTION_STREAM for
#: why seeded components draw from domain-separated streams.
_SHOTS_STREAM = 0x5B07


def _select_support(manifest: DatasetManifest, shots: int | None, seed: int):
    """First ``shots`` entries of a seeded permutation of the support list."""
    entries = list(manifest.support)
    if shots is None:
        return entries
    if shots < 1 or shots > len(entries):
        raise ParameterError(
            f"--shots must be in [1, {len(entries)}] for this manifest, got {shots}"
        )
    perm = np.random.default_rng([seed, _SHOTS_STREAM]).permutation(len(entries))
    return [entries[i] for i in perm[:shots]]


def _load_support(manifest: DatasetManifest, entries):
    return [
        read_feature_tensor(
            manifest.resolve(e.tensor),
            manifest.grid,
            layer_id=manifest.layers[0],
            expected_dim=manifest.dims[0],
        )
        for e in entries
    ]


def run_scoring(
    manifest: DatasetManifest,
    config: PipelineConfig,
    *,
    shots: int | None = None,
    seed: int = 0,
    selection: str = "top",
    workers: int = 1,
) -> ScoringRun:
    """Profile, build the gallery, and score every test entry, in order."""
    if selection not in ("top", "random"):
        raise ParameterError(f"selection must be 'top' or 'random', got {selection!r}")
    if workers < 1:
        raise ParameterError(f"--workers must be >= 1, got {workers}")

    support_entries = _select_support(manifest, shots, seed)
    support = _load_support(manifest, support_entries)
    profile = channel_variance(support)
    if selection == "top":
        subspace = select_topk(profile, config.k)
    else:
        subspace = random_subspace(manifest.dims[0], config.k, seed)
    gallery = build_gallery(
        support,
        subspace,
        source={
            "category": manifest.category,
            "support_ids": [e.id for e in support_entries],
        },
    )
    probe = load_text_probe(
        manifest, temperature=config.temperature, normalize=config.normalize
    )

    def score_one(entry):
        return score_image(entry, manifest, gallery, probe, config)

    if workers == 1:
        results = [score_one(entry) for entry in manifest.test]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score_one, manifest.test))
    return ScoringRun(
        results=results,
        profile=profile,
        subspace=subspace,
        support_ids=[e.id for e in support_entries],
        selection=selection,
        shots=shots,
        seed=seed,
    )


def _config_echo(args, manifest: DatasetManifest, run: ScoringRun) -> dict:
    """The run parameters embedded in deterministic outputs.

    Deliberately excludes the worker count: it never changes results, so it
    must never change output bytes either.
    """
    return {
        "alpha": float(args.alpha),
        "category": manifest.category,
        "k": int(args.k),
        "manifest": str(args.manifest),
        "normalize": not args.raw_dot,
        "seed": int(args.seed),
        "selection": run.selection,
        "shots": run.shots,
        "support_size": len(run.support_ids),
        "temperature": float(args.temperature),
    }


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = _parse_grid(args.grid)
    manifest_path = generate_benchmark(
        out,
        args.seed,
        category=args.category,
        n_support=args.support,
        n_test_normal=args.test_normal,
        n_test_anomalous=args.test_anomalous,
        dim=args.dim,
        joint_dim=args.joint_dim,
        grid=grid,
        n_signal=args.signal,
    )
    print(manifest_path)
    return 0


def cmd_profile(args) -> int:
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    support_entries = _select_support(manifest, args.shots, args.seed)
    support = _load_support(manifest, support_entries)
    profile = channel_variance(support)
    subspace = select_topk(profile, args.k)

    write_tensor(profile.sigma2, out / "sigma2.npy")
    write_tensor(subspace.indices, out / "indices.npy")
    selected = profile.sigma2[subspace.indices]
    _write_json(
        out / "profile.json",
        {
            "category": manifest.category,
            "dim": profile.dim,
            "k": subspace.k,
            "sample_count": profile.sample_count,
            "support_size": len(support),
            "cut_value": float(selected.min()),
            "min_variance": float(profile.sigma2.min()),
            "max_variance": float(profile.sigma2.max()),
            "seed": int(args.seed),
            "shots": args.shots,
        },
    )
    return 0


def cmd_score(args) -> int:
    manifest = load_manifest(args.manifest)
    config = PipelineConfig(
        k=args.k,
        alpha=args.alpha,
        temperature=args.temperature,
        normalize=not args.raw_dot,
    )
    started = time.perf_counter()
    run = run_scoring(
        manifest,
        config,
        shots=args.shots,
        seed=args.seed,
        selection=args.selection,
        workers=args.workers,
    )
    elapsed = time.perf_counter() - started

    out = Path(args.out)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    records = []
    for result in run.results:
        rel = f"maps/{result.image_id}.npy"
        write_tensor(result.pixel_map.astype(np.float32), out / rel)
        records.append(
            {
                "id": result.image_id,
                "label": result.label,
                "s_vis": result.s_vis,
                "s_text": result.s_text,
                "s": result.s,
                "pixel_map": rel,
            }
        )
    _write_json(
        out / "results.json",
        {"config": _config_echo(args, manifest, run), "images": records},
    )
    _write_json(
        out / "timings.json",
        {
            "workers": int(args.workers),
            "total_seconds": elapsed,
            "images": {r.image_id: r.timing for r in run.results},
        },
    )
    return 0


def _load_results_dir(results_dir: Path):
    """Rebuild lightweight results from a cmd_score output directory."""
    results_path = results_dir / "results.json"
    try:
        raw = json.loads(results_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"no results.json under {results_dir}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{results_path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or "images" not in raw or "config" not in raw:
        raise SchemaError(f"{results_path} must hold 'config' and 'images'")

    @dataclass
    class _Stored:
        image_id: str
        s_vis: float
        s_text: float
        s: float
        pixel_map: np.ndarray

    stored = []
    for i, record in enumerate(raw["images"]):
        for key in ("id", "s_vis", "s_text", "s", "pixel_map"):
            if key not in record:
                raise SchemaError(f"results.json images[{i}] is missing '{key}'")
        pixel_map = read_tensor(
            results_dir / record["pixel_map"], expected_dtype=np.float32
        ).astype(np.float64)
        stored.append(
            _Stored(
                image_id=record["id"],
                s_vis=float(record["s_vis"]),
                s_text=float(record["s_text"]),
                s=float(record["s"]),
                pixel_map=pixel_map,
            )
        )
    return stored, raw["config"]


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    results, config = _load_results_dir(Path(args.results))
    report = evaluate(
        results,
        manifest,
        fpr_limit=args.fpr_limit,
        metadata={
            "config": config,
            "fpr_limit": float(args.fpr_limit),
            "connectivity": 8,
            "n_test": len(manifest.test),
            "timings_file": "timings.json",
        },
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.json", out / "report.csv")
    return 0


_ABLATION_COLUMNS = (
    "axis", "value", "k", "alpha", "shots", "seed", "selection",
    "image_auroc", "image_ap", "image_f1_max",
    "pixel_auroc", "pixel_ap", "pixel_f1_max", "pixel_pro",
)


def cmd_ablate(args) -> int:
    manifest = load_manifest(args.manifest)
    axis = args.axis
    raw_values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not raw_values:
        raise ParameterError("--values must list at least one value")

    rows = []
    for raw_value in raw_values:
        k, alpha, shots, selection = args.k, args.alpha, args.shots, "top"
        if axis == "shots":
            shots = _parse_int(raw_value, "--values entry")
        elif axis == "k":
            k = _parse_int(raw_value, "--values entry")
        elif axis == "alpha":
            try:
                alpha = float(raw_value)
            except ValueError:
                raise ParameterError(f"--values entry {raw_value!r} is not a float") from None
        elif axis == "neuron-selection":
            if raw_value not in ("top", "random"):
                raise ParameterError(
                    f"neuron-selection values must be 'top' or 'random', got {raw_value!r}"
                )
            selection = raw_value
        config = PipelineConfig(
            k=k, alpha=alpha, temperature=args.temperature, normalize=not args.raw_dot
        )
        run = run_scoring(
            manifest,
            config,
            shots=shots,
            seed=args.seed,
            selection=selection,
            workers=args.workers,
        )
        report = evaluate(run.results, manifest, fpr_limit=args.fpr_limit)
        cm = report.aggregate
        rows.append(
            [
                axis, raw_value, k, repr(float(alpha)),
                "" if shots is None else shots,
                args.seed, selection,
                repr(cm.image_auroc), repr(cm.image_ap), repr(cm.image_f1_max),
                "" if cm.pixel_auroc is None else repr(cm.pixel_auroc),
                "" if cm.pixel_ap is None else repr(cm.pixel_ap),
                "" if cm.pixel_f1_max is None else repr(cm.pixel_f1_max),
                "" if cm.pixel_pro is None else repr(cm.pixel_pro),
            ]
        )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_ABLATION_COLUMNS)
        writer.writerows(rows)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as validation errors (exit 1)."""

    def error(self, message):
        raise ParameterError(message)


def _parse_int(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParameterError(f"{what} {text!r} is not an integer") from None


def _parse_grid(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ParameterError(f"--grid must look like '12x12', got {text!r}")
    return (_parse_int(parts[0], "--grid height"), _parse_int(parts[1], "--grid width"))


def _add_scoring_flags(sub) -> None:
    sub.add_argument("--k", type=int, default=100, help="subspace size (default 100)")
    sub.add_argument("--alpha", type=float, default=0.3, help="fusion weight (default 0.3)")
    sub.add_argument(
        "--temperature", type=float, default=1.0, help="softmax temperature (default 1.0)"
    )
    sub.add_argument(
        "--raw-dot",
        action="store_true",
        help="probe with raw dot products instead of cosines",
    )
    sub.add_argument(
        "--shots", type=int, default=None, help="subsample the support set to this size"
    )
    sub.add_argument("--seed", type=int, default=0, help="seed for shots/random selection")
    sub.add_argument(
        "--selection",
        choices=("top", "random"),
        default="top",
        help="channel selection strategy (default top)",
    )
    sub.add_argument("--workers", type=int, default=1, help="scoring threads (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsead", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)

    sub = subparsers.add_parser("synth", help="write a synthetic benchmark dataset")
    sub.add_argument("--out", required=True)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--category", default="synthetic")
    sub.add_argument("--support", type=int, default=64)
    sub.add_argument("--test-normal", type=int, default=20)
    sub.add_argument("--test-anomalous", type=int, default=20)
    sub.add_argument("--dim", type=int, default=1024)
    sub.add_argument("--joint-dim", type=int, default=64)
    sub.add_argument("--grid", default="12x12")
    sub.add_argument("--signal", type=int, default=100)
    sub.set_defaults(func=cmd_synth)

    sub = subparsers.add_parser("profile", help="variance-profile a support set")
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--k", type=int, default=100)
    sub.add_argument("--shots", type=int, default=None)
    sub.add_argument("--seed", type=int, default=0)
    sub.set_defaults(func=cmd_profile)

    sub = subparsers.add_parser("score", help="score every test entry of a manifest")
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--out", required=True)
    _add_scoring_flags(sub)
    sub.set_defaults(func=cmd_score)

    sub = subparsers.add_parser("evaluate", help="compute metrics for a scoring run")
    sub.add_argument("--results", required=True, help="directory written by 'score'")
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--fpr-limit", type=float, default=0.3)
    sub.set_defaults(func=cmd_evaluate)

    sub = subparsers.add_parser("ablate", help="sweep one axis into ablation.csv")
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument(
        "--axis", required=True, choices=("shots", "k", "alpha", "neuron-selection")
    )
    sub.add_argument("--values", required=True, help="comma-separated grid values")
    sub.add_argument("--fpr-limit", type=float, default=0.3)
    _add_scoring_flags(sub)
    sub.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, VALIDATION_ERRORS) else 2
    except Exception as exc:  # pragma: no cover - unexpected
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
