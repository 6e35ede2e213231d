"""Command-line orchestration for datasets, training, evaluation, and
episodes.

Subcommands: ``gen``, ``train-desc``, ``train-aff``, ``finetune-aff``,
``eval``, ``run``, ``sweep``, ``plot``. Each is a thin deterministic wrapper
over the corresponding library operation: it reads one JSON config (with
sections simgen / descriptor / affordance / planner / eval), derives every
working seed from the single top-level seed through named substreams, and
writes a provenance block (config hash, input hashes, seed) into whatever it
produces. Any config field can be overridden on the command line with
dotted paths, e.g. ``--descriptor.sigma 2``.

On success a command prints one JSON line describing its outputs and exits
0; on any failure it prints a machine-readable error JSON on stderr and
exits nonzero (2 for config/usage problems, 1 otherwise).

``GARMENT_LAB_THREADS`` caps worker-pool parallelism; it is also forwarded
to the BLAS thread-count variables for processes spawned from here.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

SCHEMA_VERSION = 1

_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
              "NUMEXPR_NUM_THREADS")


def thread_cap() -> int | None:
    """Parallelism limit from ``GARMENT_LAB_THREADS``, if set."""
    raw = os.environ.get("GARMENT_LAB_THREADS")
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ConfigError("GARMENT_LAB_THREADS must be a positive integer")
    return n


def _apply_thread_cap():
    cap = thread_cap()
    if cap is not None:
        for var in _BLAS_VARS:
            os.environ.setdefault(var, str(cap))


class ConfigError(ValueError):
    """A config document or command line that violates the schema."""


# ---------------------------------------------------------------------------
# configuration


def default_config() -> dict:
    """The full config skeleton with library defaults in every section.

    Section contents mirror the module config dataclasses, minus their seed
    fields: all seeds derive from the single top-level ``seed`` through
    named substreams, so paired ablations stay stream-isolated.
    """
    from .affordance import AffordanceConfig, FinetuneConfig, GripperSpec
    from .descriptor import DescriptorConfig
    from .planner import Thresholds

    desc = DescriptorConfig().to_json()
    aff = AffordanceConfig().to_json()
    ft = FinetuneConfig().to_json()
    for d in (desc, aff, ft):
        d.pop("seed")
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "output_root": "runs",
        "simgen": {
            "n_suspended": 6,
            "n_table": 6,
            "image_size": [96, 128],
            "mesh_density": 700,
        },
        "descriptor": desc,
        "affordance": {
            "model": aff,
            "finetune": ft,
            "gripper": GripperSpec().to_json(),
            "n_scenes": 10,
            "rotations": 12,
            "n_samples": 1000,
            "p_slip": 0.0,
        },
        "planner": {
            **Thresholds().to_json(),
            "perception": "oracle",
            "p_corrupt": 0.3,
            "p_slip": 0.0,
            "tactile_recovery": True,
            "low_mask_fraction": 0.0,
            "kind": "table",
            "image_size": [96, 128],
            "mesh_density": 700,
            "descriptor_model": None,
            "affordance_model": None,
        },
        "eval": {
            "queries_per_scene": 60,
            "region_queries_per_scene": 25,
            "auc_threshold": 10,
            "target_safe_rate": 0.8,
            "sweep": {
                "grid": {"dim": [8, 16]},
                "seeds": [0],
            },
        },
    }


# free-form subtrees: values under these keys are user data, not schema
_OPEN_KEYS = {"grid"}


def _check_unknown(obj, schema, path=""):
    for key, value in obj.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {path + key!r}")
        ref = schema[key]
        if isinstance(ref, dict) and key not in _OPEN_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {path + key!r} "
                                  "must be an object")
            _check_unknown(value, ref, path + key + ".")


def _merge(base: dict, overlay: dict) -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if (isinstance(value, dict) and isinstance(base.get(key), dict)
                and key not in _OPEN_KEYS):
            out[key] = _merge(base[key], value)
        else:
            out[key] = value
    return out


def validate_config(cfg: dict) -> dict:
    _check_unknown(cfg, default_config())
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version "
                          f"{cfg['schema_version']!r}; this build speaks "
                          f"{SCHEMA_VERSION}")
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    if not -2 ** 63 <= seed < 2 ** 63:
        raise ConfigError("seed must fit in 64 bits")
    return cfg


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(cfg: dict, dotted: str, raw: str):
    """Set one dotted-path field, e.g. ``descriptor.sigma`` to ``2``."""
    keys = dotted.split(".")
    node = cfg
    open_subtree = False
    for k in keys[:-1]:
        if not isinstance(node, dict) or (k not in node
                                          and not open_subtree):
            raise ConfigError(f"unknown config path {dotted!r}")
        open_subtree = open_subtree or k in _OPEN_KEYS
        node = node.setdefault(k, {}) if open_subtree else node[k]
    last = keys[-1]
    if not open_subtree and (not isinstance(node, dict) or last not in node):
        raise ConfigError(f"unknown config path {dotted!r}")
    node[last] = _parse_value(raw)


def collect_overrides(tokens) -> list:
    """Turn leftover CLI tokens into (dotted_path, raw_value) pairs."""
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            path, raw = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok!r} is missing a value")
            path, raw = body, tokens[i + 1]
            i += 2
        if "." not in path:
            raise ConfigError(f"unknown option --{path}")
        out.append((path, raw))
    return out


def load_config(config_path, overrides, seed=None) -> dict:
    cfg = default_config()
    if config_path is not None:
        with open(config_path, "r", encoding="utf-8") as f:
            user = json.load(f)
        _check_unknown(user, cfg)
        cfg = _merge(cfg, user)
    for path, raw in overrides:
        apply_override(cfg, path, raw)
    if seed is not None:
        cfg["seed"] = seed
    return validate_config(cfg)


def provenance(cfg: dict, command: str, inputs: dict | None = None) -> dict:
    from .artifacts import config_tag
    return {"schema_version": SCHEMA_VERSION,
            "command": command,
            "config_hash": config_tag(cfg),
            "seed": int(cfg["seed"]),
            "inputs": dict(inputs or {})}


def _emit(payload: dict):
    print(json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict, out) -> int:
    from . import io as glio
    from .artifacts import manifest_hash
    from .rng import derive_seed
    from .simgen import generate_dataset

    s = cfg["simgen"]
    out = Path(out)
    manifest = generate_dataset(out, n_suspended=s["n_suspended"],
                                n_table=s["n_table"],
                                seed=derive_seed(cfg["seed"], "simgen"),
                                image_size=tuple(s["image_size"]),
                                mesh_density=s["mesh_density"])
    manifest["provenance"] = provenance(cfg, "gen")
    glio.write_json(out / "manifest.json", manifest)
    _emit({"path": str(out), "manifest_hash": manifest_hash(out),
           "scenes": len(manifest["scenes"])})
    return 0


def cmd_train_desc(cfg: dict, dataset, out) -> int:
    from .artifacts import manifest_hash
    from .descriptor import DescriptorConfig, train_descriptor
    from .rng import derive_seed

    dcfg = DescriptorConfig.from_json(
        {**cfg["descriptor"], "seed": derive_seed(cfg["seed"], "descriptor")})
    model = train_descriptor(dataset, dcfg)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out, extra={"provenance": provenance(
        cfg, "train-desc", {"dataset": manifest_hash(dataset)})})
    _emit({"model": str(out), "loss": dcfg.loss,
           "iterations": dcfg.iterations})
    return 0


def _gripper(cfg: dict):
    from .affordance import GripperSpec
    return GripperSpec.from_json(cfg["affordance"]["gripper"])


def cmd_train_aff(cfg: dict, out) -> int:
    from .affordance import (AffordanceConfig, build_affordance_set,
                             train_affordance_sim)
    from .rng import derive_seed
    from .simgen import DEFAULT_DOMAIN

    a = cfg["affordance"]
    seed = derive_seed(cfg["seed"], "affordance")
    acfg = AffordanceConfig.from_json({**a["model"], "seed": seed})
    items = build_affordance_set(a["n_scenes"], seed, _gripper(cfg),
                                 domain=DEFAULT_DOMAIN,
                                 image_size=tuple(acfg.image_size),
                                 rotations=a["rotations"])
    model = train_affordance_sim(items, acfg)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out, extra={"provenance": provenance(cfg, "train-aff")})
    _emit({"model": str(out), "items": len(items)})
    return 0


def cmd_finetune_aff(cfg: dict, model_path, out) -> int:
    from . import io as glio
    from .affordance import (AffordanceNet, FinetuneConfig,
                             build_affordance_set, finetune, sample_grasps)
    from .rng import derive_seed, substream
    from .simgen import DEPLOYMENT_DOMAIN

    a = cfg["affordance"]
    sim = AffordanceNet.load(model_path)
    gripper = _gripper(cfg)
    seed = derive_seed(cfg["seed"], "affordance-deploy")
    items = build_affordance_set(a["n_scenes"], seed, gripper,
                                 domain=DEPLOYMENT_DOMAIN,
                                 image_size=tuple(sim.cfg.image_size),
                                 rotations=a["rotations"])
    samples = sample_grasps(items, a["n_samples"], gripper,
                            substream(cfg["seed"], "affordance-grasps"),
                            p_slip=a["p_slip"])
    ftcfg = FinetuneConfig.from_json(
        {**a["finetune"],
         "seed": derive_seed(cfg["seed"], "affordance-finetune")})
    model = finetune(sim, items, samples, ftcfg)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out, extra={"provenance": provenance(
        cfg, "finetune-aff", {"model": glio.sha256_file(model_path)})})
    _emit({"model": str(out), "samples": len(samples)})
    return 0


def _region_map_for(manifest, index: int):
    from .planner import build_region_map
    from .simgen import generate_scene

    entry = manifest["scenes"][index]
    _, template, _ = generate_scene(manifest["seed"], index, entry["kind"],
                                    image_size=tuple(manifest["image_size"]),
                                    mesh_density=manifest["mesh_density"])
    return build_region_map(template)


def cmd_eval(cfg: dict, model_arg, dataset, out) -> int:
    from . import io as glio
    from .artifacts import manifest_hash
    from .descriptor import DescriptorNet, load_packs
    from .evaluation import (OracleMatcher, calibrate_from_records,
                             cumulative_error_curve, region_records,
                             report_at)

    ev = cfg["eval"]
    if model_arg == "oracle":
        model = OracleMatcher()
        inputs = {"dataset": manifest_hash(dataset)}
    else:
        model = DescriptorNet.load(model_arg)
        inputs = {"dataset": manifest_hash(dataset),
                  "model": glio.sha256_file(model_arg)}
    packs = load_packs(dataset)
    qps = ev["queries_per_scene"]
    forward = cumulative_error_curve(model, packs, "forward", qps)
    inverse = cumulative_error_curve(model, packs, "inverse", qps)

    manifest = glio.read_json(Path(dataset) / "manifest.json")
    confs, correct = [], []
    for i, pack in enumerate(packs):
        rm = _region_map_for(manifest, i)
        c, ok = region_records(model, [pack], rm,
                               ev["region_queries_per_scene"])
        confs.extend(c.tolist())
        correct.extend(ok.tolist())
    tau, _, reached = calibrate_from_records(confs, correct,
                                             ev["target_safe_rate"])
    report = report_at(confs, correct, tau)

    payload = {
        "provenance": provenance(cfg, "eval", inputs),
        "forward_curve": forward.to_json(),
        "inverse_curve": inverse.to_json(),
        "auc": forward.auc(ev["auc_threshold"]),
        "auc_threshold": ev["auc_threshold"],
        "region": report.to_json(),
        "calibration": {"target_safe_rate": ev["target_safe_rate"],
                        "tau_corr": float(tau), "reached": bool(reached)},
    }
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    glio.write_json(out, payload)
    _csv_curves(out.with_suffix(".csv"),
                {"forward": forward, "inverse": inverse})
    _emit({"report": str(out), "auc": payload["auc"],
           "correct_rate": report.correct_rate})
    return 0


def _csv_curves(path, curves: dict):
    with open(path, "w", encoding="utf-8") as f:
        f.write("curve,threshold_px,fraction\n")
        for name, curve in curves.items():
            for t, frac in zip(curve.thresholds, curve.fractions):
                f.write(f"{name},{t},{frac}\n")


def cmd_run(cfg: dict, task: str, episodes: int, out) -> int:
    from . import io as glio
    from . import planner as P

    p = cfg["planner"]
    th = P.Thresholds.from_json(
        {k: p[k] for k in P.Thresholds().to_json()})
    mode = p["perception"]
    if mode == "oracle":
        factory = P.oracle_factory()
    elif mode == "noisy":
        factory = P.noisy_oracle_factory(p_corrupt=p["p_corrupt"])
    elif mode == "trained":
        from .affordance import AffordanceNet
        from .descriptor import DescriptorNet
        if not p["descriptor_model"] or not p["affordance_model"]:
            raise ConfigError("trained perception needs planner."
                              "descriptor_model and planner.affordance_model")
        factory = P.trained_factory(DescriptorNet.load(p["descriptor_model"]),
                                    AffordanceNet.load(p["affordance_model"]))
    else:
        raise ConfigError(f"unknown perception mode {mode!r}")

    task_name = {"fold": P.FOLD_TASK, "hang": P.HANG_TASK}[task]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results, summary = P.run_episode_batch(
        task_name, episodes, cfg["seed"], factory, th,
        kind=p["kind"], image_size=tuple(p["image_size"]),
        mesh_density=p["mesh_density"], p_slip=p["p_slip"],
        tactile_recovery=p["tactile_recovery"],
        low_mask_fraction=p["low_mask_fraction"],
        trace_path=out / "traces.jsonl")
    summary["gate_violations"] = sum(
        len(P.validate_trace(r.trace, th, recovery=p["tactile_recovery"]))
        for r in results)
    payload = {"provenance": provenance(cfg, "run"),
               "task": task, "episodes": episodes, "summary": summary}
    glio.write_json(out / "summary.json", payload)
    with open(out / "episodes.jsonl", "w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    _emit({"out": str(out), "successes": summary["successes"],
           "failures": summary["failures"],
           "gate_violations": summary["gate_violations"]})
    return 0


def cmd_sweep(cfg: dict, dataset, testset, out) -> int:
    from . import io as glio
    from .artifacts import manifest_hash
    from .descriptor import DescriptorConfig
    from .evaluation import sweep

    ev = cfg["eval"]
    grid = ev["sweep"]["grid"]
    base = DescriptorConfig.from_json({**cfg["descriptor"], "seed": 0})
    report = sweep(dataset, grid, base_cfg=base, testset=testset,
                   seeds=tuple(ev["sweep"]["seeds"]),
                   queries_per_scene=ev["queries_per_scene"],
                   auc_threshold=ev["auc_threshold"])
    inputs = {"dataset": manifest_hash(dataset)}
    if testset:
        inputs["testset"] = manifest_hash(testset)
    report["provenance"] = provenance(cfg, "sweep", inputs)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    glio.write_json(out, report)
    _emit({"report": str(out), "cells": len(report["cells"]),
           "best": report["cells"][report["ranked"][0]]["params"]})
    return 0


def _plot_curves(ax, named):
    for label, curve in named:
        ax.plot(curve["thresholds"], curve["fractions"], label=label)
    ax.set_xlabel("error threshold (px)")
    ax.set_ylabel("fraction of queries")
    ax.set_ylim(0.0, 1.02)
    ax.legend(fontsize=7)


def cmd_plot(report_path, out) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from . import io as glio

    report = glio.read_json(report_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def save(fig, name):
        path = out / name
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(str(path))

    if "cells" in report:                       # sweep report
        fig, ax = plt.subplots(figsize=(5, 4))
        named = [(json.dumps(c["params"]) + f" s{c['seed']}", c["curve"])
                 for c in report["cells"]]
        _plot_curves(ax, named)
        save(fig, "sweep_curves.png")
        fig, ax = plt.subplots(figsize=(5, 3))
        aucs = [c["auc"] for c in report["cells"]]
        ax.bar(range(len(aucs)), aucs)
        ax.set_xlabel("cell")
        ax.set_ylabel(f"AUC @ {report['auc_threshold']} px")
        save(fig, "sweep_auc.png")
    elif "forward_curve" in report:             # eval report
        fig, ax = plt.subplots(figsize=(5, 4))
        _plot_curves(ax, [("forward", report["forward_curve"]),
                          ("inverse", report["inverse_curve"])])
        save(fig, "error_curves.png")
    elif "summary" in report:                   # episode batch
        failures = report["summary"]["failures"]
        fig, ax = plt.subplots(figsize=(5, 3))
        names = ["Success"] + list(failures)
        counts = [report["summary"]["successes"]] + list(failures.values())
        ax.bar(names, counts)
        ax.set_ylabel("episodes")
        ax.tick_params(axis="x", labelsize=7, rotation=20)
        save(fig, "episode_outcomes.png")
    elif "thresholds" in report:                # bare error curve
        fig, ax = plt.subplots(figsize=(5, 4))
        _plot_curves(ax, [("curve", report)])
        save(fig, "error_curve.png")
    else:
        raise ConfigError(f"{report_path}: no recognizable report sections")
    _emit({"plots": written})
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None,
                        help="JSON config file; defaults are used otherwise")
    common.add_argument("--seed", type=int, default=None,
                        help="override the top-level seed")

    p = _Parser(prog="garmentlab", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common],
                       help="sample a scene dataset")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train-desc", parents=[common],
                       help="train a dense correspondence descriptor")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)

    a = sub.add_parser("train-aff", parents=[common],
                       help="train the grasp affordance network on sim GT")
    a.add_argument("--out", required=True)

    f = sub.add_parser("finetune-aff", parents=[common],
                       help="adapt an affordance net with labeled grasps")
    f.add_argument("--model", required=True)
    f.add_argument("--out", required=True)

    e = sub.add_parser("eval", parents=[common],
                       help="score a descriptor (or 'oracle') on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)

    r = sub.add_parser("run", parents=[common],
                       help="roll out folding or hanging episodes")
    r.add_argument("--task", choices=("fold", "hang"), required=True)
    r.add_argument("--episodes", type=int, required=True)
    r.add_argument("--out", required=True)

    s = sub.add_parser("sweep", parents=[common],
                       help="train and score a descriptor hyperparameter grid")
    s.add_argument("--dataset", required=True)
    s.add_argument("--testset", default=None)
    s.add_argument("--out", required=True)

    pl = sub.add_parser("plot", parents=[common],
                        help="render PNG figures from a report JSON")
    pl.add_argument("--report", required=True)
    pl.add_argument("--out", required=True)
    return p


def _dispatch(argv) -> int:
    parser = build_parser()
    ns, rest = parser.parse_known_args(argv)
    overrides = collect_overrides(rest)
    if ns.command == "plot":
        if overrides:
            raise ConfigError("plot takes no config overrides")
        return cmd_plot(ns.report, ns.out)
    cfg = load_config(ns.config, overrides, seed=ns.seed)
    if ns.command == "gen":
        return cmd_gen(cfg, ns.out)
    if ns.command == "train-desc":
        return cmd_train_desc(cfg, ns.dataset, ns.out)
    if ns.command == "train-aff":
        return cmd_train_aff(cfg, ns.out)
    if ns.command == "finetune-aff":
        return cmd_finetune_aff(cfg, ns.model, ns.out)
    if ns.command == "eval":
        return cmd_eval(cfg, ns.model, ns.dataset, ns.out)
    if ns.command == "run":
        return cmd_run(cfg, ns.task, ns.episodes, ns.out)
    if ns.command == "sweep":
        return cmd_sweep(cfg, ns.dataset, ns.testset, ns.out)
    raise ConfigError(f"unknown command {ns.command!r}")


def main(argv=None) -> int:
    _apply_thread_cap()
    try:
        return _dispatch(argv)
    except ConfigError as err:
        print(json.dumps({"error": "config", "message": str(err)}),
              file=sys.stderr)
        return 2
    except Exception as err:                          # noqa: BLE001
        print(json.dumps({"error": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
