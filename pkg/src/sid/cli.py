"""``sid`` command line.

Experiment commands read a JSON config (``--config``); a few flags override
config fields. Every JSON artifact is wrapped in an envelope that records the
tool version and the SHA-256 of the effective config. The worker count is
never part of the config, so artifacts are identical for any ``--workers``.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 config validation
error. Errors are also printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .alterations import (KINDS as ALTERATION_KINDS, AlterationSpec, AugmentationPolicy,
                          apply_alteration, augment, fixed_policy, flip_policy, susy_policy)
from .backends import Backend, BackendDescriptor, ReferenceBackend, load_backend, load_descriptor
from .datasets import (DatasetManifest, ingest_directory, merge_manifests, read_manifest,
                       split_manifest, undersample, validate_manifest, write_manifest)
from .errors import ConfigError, SidError
from .evaluation import (EvalSet, VotingPolicy, cross_matrix, evaluate_dataset, patches_for,
                         resize_vs_crop_report, threshold_sweep)
from .experiments import train_reference
from .imageops import encode_png, read_image
from .refmodel import TrainConfig

log = logging.getLogger("sid")

CONFIG_SCHEMA_VERSION = 1
EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


# --------------------------------------------------------------------------
# carbon estimate

@dataclasses.dataclass(frozen=True)
class EnergyEstimate:
    energy_kwh: float
    intensity_kg_per_kwh: float
    emissions_kg: float


def estimate_co2(energy_kwh: float, intensity_kg_per_kwh: float) -> EnergyEstimate:
    if energy_kwh < 0 or intensity_kg_per_kwh < 0:
        raise ConfigError("energy and carbon intensity must be non-negative")
    return EnergyEstimate(energy_kwh, intensity_kg_per_kwh, energy_kwh * intensity_kg_per_kwh)


# --------------------------------------------------------------------------
# config helpers

def config_hash(cfg: dict[str, Any]) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def envelope(command: str, cfg: dict[str, Any], result: Any) -> dict[str, Any]:
    return {"tool": "sid", "version": __version__, "command": command,
            "config_sha256": config_hash(cfg), "result": result}


def dump(obj: Any, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_config(path) -> tuple[dict[str, Any], Path]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    if cfg.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {CONFIG_SCHEMA_VERSION}")
    return cfg, path.parent


def require(cfg: dict[str, Any], *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"config is missing required fields: {missing}")


def resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_data(ref: dict[str, Any] | str, base: Path) -> DatasetManifest:
    """``{"manifest": path, "split": name?, "labels": [...]?}`` or a bare path."""
    if isinstance(ref, str):
        ref = {"manifest": ref}
    path = resolve(base, ref["manifest"])
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    return read_manifest(path).select(ref.get("split"), ref.get("labels"))


def make_backend(spec: dict[str, Any] | str, base: Path, seed: int, workers: int) -> Backend:
    if isinstance(spec, str):
        path = resolve(base, spec)
        if not path.is_file():
            raise ConfigError(f"backend descriptor not found: {path}")
        return load_backend(load_descriptor(path))
    if "train" in spec:
        model, _ = _train_from_config(spec["train"], base, seed)
        return ReferenceBackend(model, input_side=spec["train"].get("side", 224),
                                backend_id=spec.get("name", "trained"))
    return load_backend(BackendDescriptor.from_dict(spec, base_dir=base))


def make_policy(cfg: dict[str, Any], backend: Backend | None = None) -> VotingPolicy:
    """Voting policy from config; the patch side defaults to the backend's input side."""
    data = dict(cfg.get("policy") or {})
    if backend is not None:
        data.setdefault("side", backend.input_side)
    return VotingPolicy.from_dict(data)


def make_augmentation(spec, seed: int) -> AugmentationPolicy | None:
    if spec is None or spec == "none":
        return None
    if spec == "susy":
        return susy_policy(seed)
    if spec == "flip":
        return flip_policy(seed)
    if isinstance(spec, str):
        if spec not in ALTERATION_KINDS:
            raise ConfigError(f"unknown alteration {spec!r}")
        return fixed_policy(spec, seed)
    return AugmentationPolicy.from_dict({"seed": seed, **spec})


def default_workers() -> int:
    env = os.environ.get("SID_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# commands

def _train_from_config(tcfg: dict[str, Any], base: Path, seed: int):
    manifest = load_data(tcfg["data"], base)
    prep = tcfg.get("prepare") or {}
    caps = prep.get("undersample") or {}
    stage = prep.get("undersample_stage", "after_split")
    if stage not in ("before_split", "after_split"):
        raise ConfigError(f"undersample_stage must be before_split or after_split, got {stage!r}")
    if stage == "before_split":
        for label, cap in sorted(caps.items()):
            manifest = undersample(manifest, label, int(cap), seed)
    if prep.get("split_ratios"):
        manifest = split_manifest(manifest, tuple(prep["split_ratios"]), seed)
    if stage == "after_split":
        for label, cap in sorted(caps.items()):
            manifest = undersample(manifest, label, int(cap), seed)
    opts = dict(tcfg.get("optimizer") or {})
    cfg = TrainConfig(seed=seed, **opts)
    side = tcfg.get("side", 224)
    policy = VotingPolicy(side=side, n_patches=tcfg.get("n_patches", 5),
                          threshold_k=min(3, tcfg.get("n_patches", 5)))
    model, report = train_reference(manifest, cfg, tcfg.get("label_space"), tcfg.get("label_map"),
                                    make_augmentation(tcfg.get("augmentation"), seed),
                                    tcfg.get("patch_mode", "center"), policy)
    return model, report


def cmd_train(args, cfg, base):
    require(cfg, "seed", "data", "output")
    model, report = _train_from_config(cfg, base, cfg["seed"])
    out = resolve(base, cfg["output"])
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    dump(envelope("train", cfg, report.to_dict()), out.with_suffix(".report.json"))
    print(out)


def cmd_eval(args, cfg, base):
    require(cfg, "seed", "backend", "data", "output")
    backend = make_backend(cfg["backend"], base, cfg["seed"], args.workers)
    data = load_data(cfg["data"], base)
    report = evaluate_dataset(backend, data, cfg.get("mode", "center"), make_policy(cfg, backend),
                              cfg.get("dataset_id", "dataset"),
                              make_augmentation(cfg.get("alteration"), cfg["seed"]),
                              workers=args.workers, keep_verdicts=cfg.get("verdicts", True))
    dump(envelope("eval", cfg, report.to_dict(include_timing=args.timing)),
         resolve(base, cfg["output"]))
    print(json.dumps(report.recall, sort_keys=True))


def cmd_cross(args, cfg, base):
    require(cfg, "seed", "runs", "eval_sets", "output")
    runs = [(r["id"], make_backend(r["backend"], base, cfg["seed"], args.workers))
            for r in cfg["runs"]]
    sets = [EvalSet(e["id"], load_data(e["data"], base),
                    make_augmentation(e.get("alteration"), cfg["seed"]))
            for e in cfg["eval_sets"]]
    cm = cross_matrix(runs, sets, cfg.get("protocol", "synthetic_recall"),
                      cfg.get("mode", "center"), make_policy(cfg, runs[0][1] if runs else None),
                      args.workers)
    out = resolve(base, cfg["output"])
    dump(envelope("cross", cfg, cm.to_dict()), out)
    out.with_suffix(".csv").write_text(cm.to_csv(), encoding="utf-8")
    print(cm.to_csv(), end="")


def cmd_sweep(args, cfg, base):
    require(cfg, "seed", "backend", "authentic", "synthetic", "output")
    backend = make_backend(cfg["backend"], base, cfg["seed"], args.workers)
    table = threshold_sweep(backend, load_data(cfg["authentic"], base),
                            load_data(cfg["synthetic"], base), make_policy(cfg, backend),
                            args.workers)
    dump(envelope("sweep", cfg, table), resolve(base, cfg["output"]))
    for row in table:
        print(f"k={row['k']}/{row['n']} authentic={row['authentic_recall']} "
              f"synthetic={row['synthetic_recall']}")


def cmd_resize_study(args, cfg, base):
    require(cfg, "seed", "backend", "datasets", "output")
    backend = make_backend(cfg["backend"], base, cfg["seed"], args.workers)
    policy = make_policy(cfg, backend)
    center, resized = [], []
    for ds in cfg["datasets"]:
        data = load_data(ds["data"], base)
        center.append(evaluate_dataset(backend, data, "center", policy, ds["id"],
                                       workers=args.workers, keep_verdicts=False))
        resized.append(evaluate_dataset(backend, data, "resized", policy, ds["id"],
                                        workers=args.workers, keep_verdicts=False))
    result = resize_vs_crop_report(center, resized)
    dump(envelope("resize-study", cfg, result), resolve(base, cfg["output"]))
    for kind, row in result["averages"].items():
        print(f"{kind}: center={row['center']:.2f} resized={row['resized']:.2f} ({row['delta_str']})")


def cmd_co2(args, cfg, base):
    intensity = args.intensity
    if intensity is None and cfg is not None:
        intensity = cfg.get("co2_intensity_kg_per_kwh")
    if intensity is None and os.environ.get("SID_CO2_INTENSITY"):
        intensity = float(os.environ["SID_CO2_INTENSITY"])
    if intensity is None:
        raise ConfigError("no carbon intensity: pass --intensity, set co2_intensity_kg_per_kwh "
                          "in --config, or export SID_CO2_INTENSITY")
    est = estimate_co2(args.kwh, float(intensity))
    result = dataclasses.asdict(est)
    if args.out:
        dump(envelope("co2", {"kwh": args.kwh, "intensity": intensity}, result), args.out)
    print(f"{est.emissions_kg:g} kg CO2")


def cmd_dataset(args, cfg, base):
    if args.action == "ingest":
        m = ingest_directory(args.root, args.label, args.generator, args.year)
        write_manifest(m, args.out)
        print(f"{len(m)} records -> {args.out}")
    elif args.action == "split":
        ratios = tuple(float(x) for x in args.ratios.split(","))
        m = split_manifest(read_manifest(args.manifest), ratios, args.seed)
        write_manifest(m, args.out)
        print(json.dumps(m.counts(), sort_keys=True))
    elif args.action == "undersample":
        m = undersample(read_manifest(args.manifest), args.label, args.cap, args.seed)
        write_manifest(m, args.out)
        print(json.dumps(m.counts(), sort_keys=True))
    elif args.action == "merge":
        m = merge_manifests([read_manifest(p) for p in args.manifest])
        write_manifest(m, args.out)
        print(f"{len(m)} records -> {args.out}")
    elif args.action == "validate":
        violations = validate_manifest(read_manifest(args.manifest))
        print(json.dumps([v.to_dict() for v in violations], indent=1))
        if violations and args.strict:
            return EXIT_RUNTIME
    return 0


def cmd_patchify(args, cfg, base):
    img = read_image(args.image)
    policy = VotingPolicy(n_patches=args.k, threshold_k=1, side=args.side, stride=args.stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for p in patches_for(img, args.mode, policy, str(args.image)):
        name = f"patch_{p.rank:02d}_{p.origin_x}_{p.origin_y}.png"
        (out / name).write_bytes(encode_png(p.pixels))
        index.append({"file": name, "rank": p.rank, "origin_x": p.origin_x,
                      "origin_y": p.origin_y, "padded": p.padded, "selection": p.selection})
    dump({"source": str(args.image), "mode": args.mode, "patches": index}, out / "index.json")
    print(f"{len(index)} patches -> {out}")


def _parse_param(text: str) -> tuple[str, float]:
    name, _, value = text.partition("=")
    if not value:
        raise argparse.ArgumentTypeError(f"expected name=value, got {text!r}")
    return name, float(value)


def cmd_alter(args, cfg, base):
    img = read_image(args.image)
    if args.kind:
        params = dict(args.param or [])
        spec = AlterationSpec(args.kind, {k: (v, v) for k, v in params.items()})
        out = apply_alteration(img, spec, params)
        applied = [{"kind": args.kind, "params": params}]
    else:
        policy = make_augmentation(args.policy, args.seed)
        out, log_ = augment(img, policy, args.index)
        applied = [a.to_dict() for a in log_]
    Path(args.out).write_bytes(encode_png(out))
    print(json.dumps(applied))


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "cross": cmd_cross, "sweep": cmd_sweep,
            "resize-study": cmd_resize_study}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sid {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--workers", type=int, default=None,
                       help="parallel image workers (default: $SID_WORKERS or CPU count)")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="override config output path")
        if name in ("eval", "cross", "resize-study"):
            p.add_argument("--mode", choices=("center", "voted", "resized"))
        if name in ("eval", "sweep", "cross"):
            p.add_argument("--threshold", type=int, help="override policy threshold_k")
        if name == "eval":
            p.add_argument("--timing", action="store_true", help="include wall-clock timing")

    p = sub.add_parser("co2")
    p.add_argument("--kwh", type=float, required=True)
    p.add_argument("--intensity", type=float, help="kg CO2 per kWh")
    p.add_argument("--config")
    p.add_argument("--out")

    p = sub.add_parser("dataset")
    dsub = p.add_subparsers(dest="action", required=True)
    d = dsub.add_parser("ingest")
    d.add_argument("--root", required=True)
    d.add_argument("--label", required=True)
    d.add_argument("--generator", default="none")
    d.add_argument("--year", type=int)
    d.add_argument("--out", required=True)
    d = dsub.add_parser("split")
    d.add_argument("--manifest", required=True)
    d.add_argument("--ratios", default="0.6,0.2,0.2")
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--out", required=True)
    d = dsub.add_parser("undersample")
    d.add_argument("--manifest", required=True)
    d.add_argument("--label", required=True)
    d.add_argument("--cap", type=int, required=True)
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--out", required=True)
    d = dsub.add_parser("merge")
    d.add_argument("--manifest", nargs="+", required=True)
    d.add_argument("--out", required=True)
    d = dsub.add_parser("validate")
    d.add_argument("--manifest", required=True)
    d.add_argument("--strict", action="store_true", help="exit 1 when violations exist")

    p = sub.add_parser("patchify")
    p.add_argument("--image", required=True)
    p.add_argument("--mode", choices=("voted", "center", "resized"), default="voted")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--side", type=int, default=224)
    p.add_argument("--stride", type=int, default=112)
    p.add_argument("--out", required=True)

    p = sub.add_parser("alter")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--kind", choices=ALTERATION_KINDS)
    g.add_argument("--policy", choices=("susy", "flip"))
    p.add_argument("--param", action="append", type=_parse_param, help="name=value")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--index", type=int, default=0)

    p = sub.add_parser("preset")
    p.add_argument("name", choices=sorted(PRESETS))
    return parser


def _apply_overrides(args, cfg: dict[str, Any]) -> dict[str, Any]:
    cfg = dict(cfg)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["output"] = str(Path(args.out).resolve())
    if getattr(args, "mode", None):
        cfg["mode"] = args.mode
    if getattr(args, "threshold", None) is not None:
        cfg["policy"] = {**(cfg.get("policy") or {}), "threshold_k": args.threshold}
    return cfg


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}),
          file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "preset":
            print(json.dumps(PRESETS[args.name], indent=1))
            return 0
        if args.command in COMMANDS:
            if args.workers is None:
                args.workers = default_workers()
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            cfg, base = load_config(args.config)
            cfg = _apply_overrides(args, cfg)
            return COMMANDS[args.command](args, cfg, base) or 0
        if args.command == "co2":
            cfg, base = load_config(args.config) if args.config else (None, Path("."))
            return cmd_co2(args, cfg, base) or 0
        handler = {"dataset": cmd_dataset, "patchify": cmd_patchify, "alter": cmd_alter}
        return handler[args.command](args, None, Path(".")) or 0
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "validation", exc)
    except (SidError, OSError) as exc:
        return _fail(EXIT_RUNTIME, "runtime", exc)


# --------------------------------------------------------------------------
# config templates; manifest and model paths are placeholders for user data

_SIX = ["authentic", "dalle3", "sd1x", "sdxl", "mj12", "mj56"]

PRESETS: dict[str, dict[str, Any]] = {
    "susy-train": {
        "schema_version": 1, "seed": 0, "output": "models/susy-ref.json",
        "data": {"manifest": "manifests/train6.jsonl"},
        "label_space": _SIX,
        "prepare": {"split_ratios": [0.6, 0.2, 0.2],
                    "undersample": {"authentic": 5435, "sd1x": 5435},
                    "undersample_stage": "after_split"},
        "augmentation": "susy",
        "optimizer": {"max_epochs": 20, "patience": 2, "monitor": "validation_loss",
                      "learning_rate": 0.1, "batch_size": 32},
    },
    "table3": {
        "schema_version": 1, "seed": 0, "output": "results/table3.json",
        "protocol": "synthetic_recall", "mode": "center",
        "runs": [{"id": s, "backend": {"name": f"single-{s}", "train": {
            "data": {"manifest": "manifests/train6.jsonl", "labels": ["authentic", s]},
            "label_space": ["authentic", s], "augmentation": "flip",
            "optimizer": {"max_epochs": 20, "patience": 2, "monitor": "validation_accuracy"}}}}
            for s in _SIX[1:]],
        "eval_sets": [{"id": s, "data": {"manifest": "manifests/train6.jsonl", "split": "test",
                                         "labels": [s]}} for s in _SIX[1:]],
    },
    "table5": {
        "schema_version": 1, "seed": 0, "output": "results/table5.json",
        "protocol": "macro_recall", "mode": "center",
        "runs": [{"id": a, "backend": {"name": f"six-{a}", "train": {
            "data": {"manifest": "manifests/train6.jsonl"}, "label_space": _SIX,
            "augmentation": None if a == "None" else a,
            "optimizer": {"monitor": "validation_accuracy"}}}}
            for a in ["None", "BrightnessContrast", "Gamma", "JpegCompress", "AdvancedBlur",
                      "GaussianBlur"]],
        "eval_sets": [{"id": a, "data": {"manifest": "manifests/train6.jsonl", "split": "test"},
                       "alteration": None if a == "None" else a}
                      for a in ["None", "BrightnessContrast", "Gamma", "JpegCompress",
                                "AdvancedBlur", "GaussianBlur"]],
    },
    "table6": {
        "schema_version": 1, "seed": 0, "output": "results/table6.json",
        "backend": "backends/susy-onnx.json", "mode": "voted",
        "policy": {"n_patches": 5, "threshold_k": 3},
        "dataset_id": "eval-set", "data": {"manifest": "manifests/eval-set.jsonl"},
    },
    "table7": {
        "schema_version": 1, "seed": 0, "output": "results/table7.json",
        "backend": "backends/susy-onnx.json", "policy": {"n_patches": 5, "threshold_k": 3},
        "authentic": {"manifest": "manifests/in-the-wild-authentic.jsonl"},
        "synthetic": {"manifest": "manifests/in-the-wild-synthetic.jsonl"},
    },
    "table8-resize": {
        "schema_version": 1, "seed": 0, "output": "results/table8.json",
        "backend": "backends/detector-onnx.json",
        "datasets": [{"id": "flickr30k", "data": "manifests/flickr30k.jsonl"},
                     {"id": "synthbuster-sdxl", "data": "manifests/synthbuster-sdxl.jsonl"}],
    },
}


if __name__ == "__main__":
    sys.exit(main())
