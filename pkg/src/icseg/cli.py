"""Command-line entry point.

Subcommands:

``run``       cosegment / pairwise / oracle runs described by a JSON config
``phantom``   generate a synthetic population
``eval``      Dice / Hausdorff / contour-mean metrics to CSV
``register``  multi-atlas segmentation of one target (pairwise registration)

Exit codes: 0 success, 1 configuration error, 2 input/output error,
3 numerical failure (field inversion, solver).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import fields

import numpy as np

from .metrics import evaluate, write_csv
from .mrf import ProblemTooLargeError
from .phantom import PhantomSpec, generate_population
from .pipeline import (
    RegistrationConfig,
    backproject_and_fuse,
    ics_run,
    oracle_mode,
    pairwise_baseline,
)
from .transform import ConfigurationError, InversionError, save_field
from .volume import (
    DegenerateInputError,
    LabelMap,
    MetaImageError,
    ProbabilityMap,
    load_metaimage,
    one_hot,
    save_metaimage,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
MODES = ("cosegment", "pairwise", "oracle")
REG_PREFIX = "registration."
RUN_KEYS = {"mode", "images", "priors", "gt", "target", "out", "manifest"}


class InputError(OSError):
    pass


# --------------------------------------------------------------------------
# configuration

def _reg_fields() -> set[str]:
    names = {f.name for f in fields(RegistrationConfig)}
    names.discard("lambda_")
    return names | {"lambda"}


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    base = os.path.dirname(os.path.abspath(path))
    return _resolve_paths(cfg, base)


def _resolve_paths(cfg: dict, base: str) -> dict:
    out = dict(cfg)
    for key in ("images", "priors", "gt"):
        if key in out and isinstance(out[key], list):
            out[key] = [None if p is None else os.path.join(base, p) for p in out[key]]
    for key in ("manifest", "out"):
        if isinstance(out.get(key), str):
            out[key] = os.path.join(base, out[key])
    return out


def registration_config(cfg: dict) -> RegistrationConfig:
    allowed = _reg_fields()
    reg = {}
    for key, value in cfg.items():
        if key.startswith(REG_PREFIX):
            name = key[len(REG_PREFIX):]
            if name not in allowed:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            reg[name] = value
        elif key not in RUN_KEYS:
            raise ConfigurationError(f"unknown configuration key {key!r}")
    if "grid_spacing_finest" in reg and isinstance(reg["grid_spacing_finest"], list):
        reg["grid_spacing_finest"] = tuple(reg["grid_spacing_finest"])
    try:
        return RegistrationConfig.from_dict(reg)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def _from_manifest(cfg: dict) -> dict:
    """Fill images/priors/gt from a phantom manifest unless given explicitly."""
    path = cfg["manifest"]
    try:
        with open(path) as fh:
            man = json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"manifest not found: {path}") from exc
    base = os.path.dirname(os.path.abspath(path))
    subjects = man.get("subjects", [])
    out = dict(cfg)
    for key, field_name in (("images", "image"), ("priors", "prior"), ("gt", "gt")):
        if key not in out:
            out[key] = [os.path.join(base, s[field_name]) for s in subjects]
    return out


class RunManifest:
    """Validated description of a ``run`` invocation."""

    def __init__(self, cfg: dict):
        if "manifest" in cfg:
            cfg = _from_manifest(cfg)
        self.mode = cfg.get("mode", "cosegment")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; choose from {MODES}")
        self.images = list(cfg.get("images") or [])
        self.priors = cfg.get("priors")
        self.gt = cfg.get("gt")
        self.target = cfg.get("target", 0)
        self.out = cfg.get("out")
        self.config = registration_config(cfg)
        if not self.out:
            raise ConfigurationError("no output directory (set 'out' or pass --out)")
        if len(self.images) < 2:
            raise ConfigurationError("at least two images are required")
        n = len(self.images)
        if self.priors is not None and len(self.priors) != n:
            raise ConfigurationError(f"{len(self.priors)} priors for {n} images")
        if self.gt is not None and len(self.gt) != n:
            raise ConfigurationError(f"{len(self.gt)} ground-truth entries for {n} images")
        if not isinstance(self.target, int) or not 0 <= self.target < n:
            raise ConfigurationError(f"target must be an image index in [0, {n})")
        if self.mode == "cosegment" and self.priors is None:
            raise ConfigurationError("cosegment mode needs priors")
        if self.mode in ("pairwise", "oracle"):
            if self.gt is None or any(g is None for i, g in enumerate(self.gt) if i != self.target):
                raise ConfigurationError(f"{self.mode} mode needs ground truth for every non-target image")
        if self.mode == "oracle" and (self.priors is None or self.priors[self.target] is None):
            raise ConfigurationError("oracle mode needs the target's prior")
        for p in self.files():
            if not os.path.isfile(p):
                raise InputError(f"input file not found: {p}")

    def files(self) -> list[str]:
        out = list(self.images)
        for group in (self.priors, self.gt):
            out += [p for p in group or [] if p is not None]
        return out


# --------------------------------------------------------------------------
# loading

def _load(path: str, kind: str):
    try:
        return load_metaimage(path, kind)
    except FileNotFoundError as exc:
        raise InputError(f"input file not found: {path}") from exc


def _load_priors(paths):
    out = []
    for p in paths:
        vol = _load(p, None)
        if isinstance(vol, LabelMap):
            vol = one_hot(vol)
        elif not isinstance(vol, ProbabilityMap):
            raise ConfigurationError(f"{p}: expected a probability map or label map")
        out.append(vol)
    return out


def _pad_classes(priors: list[ProbabilityMap]) -> list[ProbabilityMap]:
    c = max(p.num_classes for p in priors)
    out = []
    for p in priors:
        if p.num_classes < c:
            pad = np.zeros(p.domain.dims + (c - p.num_classes,), dtype=np.float32)
            p = ProbabilityMap(p.domain, np.concatenate([p.data, pad], axis=-1))
        out.append(p)
    return out


# --------------------------------------------------------------------------
# outputs

def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_trace(path: str, report) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "target", "factor", "cycle", "energy", "data_term", "smoothness_term"])
        for s in report.solves:
            w.writerow([s.get("pass", 0), s["target"], s["factor"], s["cycle"],
                        repr(s["final_energy"]), repr(s["data_term"]), repr(s["smoothness_term"])])


def _report_config(config: RegistrationConfig) -> dict:
    # the thread count does not change results, so it is kept out of the report
    d = config.to_dict()
    d.pop("workers", None)
    return d


def _metrics(pred: dict, gt_paths, out_dir: str) -> None:
    reports = {}
    for i, fused in pred.items():
        if gt_paths and gt_paths[i] is not None:
            reports[f"subject{i:02d}"] = evaluate(fused, _load(gt_paths[i], "labels"))
    if reports:
        write_csv(reports, os.path.join(out_dir, "metrics.csv"))


def cmd_run(args) -> int:
    cfg = read_config(args.config)
    if args.out:
        cfg["out"] = os.path.abspath(args.out)
    if args.seed is not None:
        cfg["registration.seed"] = args.seed
    if args.threads is not None:
        cfg["registration.workers"] = args.threads
    elif "registration.workers" not in cfg:
        cfg["registration.workers"] = os.cpu_count() or 1
    run = RunManifest(cfg)
    if args.dry_run:
        print(f"ok: {run.mode} run over {len(run.images)} images -> {run.out}")
        return EXIT_OK

    t0 = time.perf_counter()
    images = [_load(p, "scalar") for p in run.images]
    os.makedirs(run.out, exist_ok=True)
    fused = {}
    report = {"mode": run.mode, "config": _report_config(run.config), "inputs": {
        "images": [os.path.basename(p) for p in run.images],
    }}
    timings = {}
    if run.mode == "cosegment":
        priors = _pad_classes(_load_priors(run.priors))
        result = ics_run(images, priors, run.config)
        for k in range(len(images)):
            fused[k] = backproject_and_fuse(k, result)
        report.update(result.report.to_dict())
        report["config"] = _report_config(run.config)
        timings.update(result.report.timings)
        if args.dump_fields:
            for k, f in enumerate(result.fields):
                save_field(f, os.path.join(run.out, f"field_{k:02d}.mha"))
                save_metaimage(result.images[k], os.path.join(run.out, f"warped_{k:02d}.mha"))
        if args.trace:
            _write_trace(os.path.join(run.out, "energy_trace.csv"), result.report)
    elif run.mode == "oracle":
        gts = [None if i == run.target else _load(p, "labels") for i, p in enumerate(run.gt)]
        target_prior = _load_priors([run.priors[run.target]])[0]
        fused[run.target] = oracle_mode(images, gts, run.target, target_prior, run.config)
        report["target"] = run.target
    else:
        atlases = [(images[i], _load(run.gt[i], "labels")) for i in range(len(images)) if i != run.target]
        fused[run.target] = pairwise_baseline(images[run.target], atlases, run.config)
        report["target"] = run.target

    for k, lab in fused.items():
        save_metaimage(lab, os.path.join(run.out, f"fused_{k:02d}.mha"))
    _metrics(fused, run.gt, run.out)
    _write_json(os.path.join(run.out, "report.json"), report)
    timings["wall"] = time.perf_counter() - t0
    timings["threads"] = run.config.workers
    _write_json(os.path.join(run.out, "timings.json"), timings)
    print(os.path.join(run.out, "report.json"))
    return EXIT_OK


def cmd_phantom(args) -> int:
    kw = read_config(args.config) if args.config else {}
    known = {f.name for f in fields(PhantomSpec)}
    unknown = set(kw) - known
    if unknown:
        raise ConfigurationError(f"unknown phantom keys: {sorted(unknown)}")
    for name in ("seed", "num_subjects", "num_structures", "deform_max_mm"):
        value = getattr(args, name)
        if value is not None:
            kw[name] = value
    if args.dims is not None:
        kw["dims"] = tuple(args.dims)
    if "dims" in kw:
        kw["dims"] = tuple(kw["dims"])
    if "spacing" in kw:
        kw["spacing"] = tuple(kw["spacing"])
    preset = args.preset or kw.pop("preset", None)
    kw.pop("preset", None)
    try:
        spec = PhantomSpec.from_preset(preset, **kw) if preset else PhantomSpec(**kw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    if args.dry_run:
        print(f"ok: {spec.num_subjects} subjects of {spec.dims} -> {args.out}")
        return EXIT_OK
    manifest = generate_population(spec, args.out)
    print(manifest["path"])
    return EXIT_OK


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.gt):
        raise ConfigurationError(f"{len(args.pred)} predictions for {len(args.gt)} ground-truth maps")
    for p in args.pred + args.gt:
        if not os.path.isfile(p):
            raise InputError(f"input file not found: {p}")
    if args.dry_run:
        print(f"ok: {len(args.pred)} pairs -> {args.out}")
        return EXIT_OK
    reports = {}
    for p, g in zip(args.pred, args.gt):
        vid = os.path.splitext(os.path.basename(p))[0]
        reports[vid] = evaluate(_load(p, "labels"), _load(g, "labels"))
    write_csv(reports, args.out)
    print(args.out)
    return EXIT_OK


def cmd_register(args) -> int:
    cfg = read_config(args.config)
    if args.seed is not None:
        cfg["registration.seed"] = args.seed
    if args.threads is not None:
        cfg["registration.workers"] = args.threads
    for key in list(cfg):
        if key in RUN_KEYS:
            cfg.pop(key)
    config = registration_config(cfg)
    paths = [args.target] + [p for pair in args.atlas for p in pair]
    for p in paths:
        if not os.path.isfile(p):
            raise InputError(f"input file not found: {p}")
    if args.dry_run:
        print(f"ok: {len(args.atlas)} atlases -> {args.out}")
        return EXIT_OK
    target = _load(args.target, "scalar")
    atlases = [(_load(i, "scalar"), _load(l, "labels")) for i, l in args.atlas]
    fused = pairwise_baseline(target, atlases, config)
    out = args.out
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    save_metaimage(fused, out)
    print(out)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="icseg", description="Groupwise coregistration and cosegmentation")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--dry-run", action="store_true", help="validate inputs without computing")
        if seed:
            p.add_argument("--seed", type=int, help="overrides registration.seed")
            p.add_argument("--threads", type=int, help="worker threads for unary evaluation")

    p = sub.add_parser("run", help="run a cosegment / pairwise / oracle experiment")
    common(p)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--dump-fields", action="store_true", help="also write accumulated fields and warped images")
    p.add_argument("--trace", action="store_true", help="write the per-solve energy trace as CSV")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("phantom", help="generate a synthetic population")
    p.add_argument("--config", help="JSON file with phantom parameters")
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", choices=["weak", "strong"])
    p.add_argument("--seed", type=int)
    p.add_argument("--num-subjects", type=int)
    p.add_argument("--num-structures", type=int)
    p.add_argument("--deform-max-mm", type=float)
    p.add_argument("--dims", type=int, nargs=3)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("eval", help="segmentation metrics as CSV")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("register", help="multi-atlas segmentation of a target")
    common(p)
    p.add_argument("--target", required=True)
    p.add_argument("--atlas", nargs=2, action="append", required=True, metavar=("IMAGE", "LABELS"))
    p.add_argument("--out", required=True, help="output label map path")
    p.set_defaults(func=cmd_register)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InversionError, ProblemTooLargeError, ArithmeticError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigurationError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, MetaImageError, DegenerateInputError, OSError) as exc:
        print(f"error: input/output: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
