"""Command-line entry point: ``edgetune <subcommand> ...``.

Subcommands: ``profile-synth``, ``plan``, ``simulate``, ``tune-toy``,
``report`` and ``replay``. Every run that writes artifacts also writes a
manifest (``<first output>.manifest.json`` unless ``--manifest`` is given)
listing the resolved parameters, input hashes and output hashes;
``edgetune replay <manifest>`` re-runs it into a scratch directory and
compares hashes.

Exit codes: 0 success, 2 invalid input, 3 no feasible plan, 4 oracle or
replay mismatch, 5 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, adapters_core, model_cost, pipeline_sim, planner, svg
from .cache_store import CacheError, CacheMissError, CacheStore, read_header
from .io_utils import atomic_write_text, sha256_file
from .model_cost import GIB, TECHNIQUES, ModelSpec, load_spec
from .profile import (LinkProfile, ProfileError, ProfileSet, dumps_profiles, load_profiles,
                      synthesize_profiles, tensor_sizes)

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_MISMATCH, EXIT_IO = 0, 2, 3, 4, 5
MANIFEST_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1


class InvalidInput(ValueError):
    pass


class Mismatch(RuntimeError):
    pass


def _dump(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=False) + "\n"


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InvalidInput(f"{what} not found: {path}")
    return p


def _batch_sizes(text: str) -> list[int]:
    if "-" in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v]


def _parse_synth(text: str) -> dict:
    """``"n=8,het=0.2,seed=3"`` -> dict."""
    out = {"n": None, "het": 0.0, "seed": 0}
    for part in text.split(","):
        if not part:
            continue
        key, _, value = part.partition("=")
        if key not in out:
            raise InvalidInput(f"unknown --synth key {key!r} (use n, het, seed)")
        out[key] = float(value) if key == "het" else int(value)
    if not out["n"]:
        raise InvalidInput("--synth needs n=<devices>")
    return out


def _add_synth_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--batch-sizes", default="1-16", help="range 'a-b' or list 'a,b,c'")
    p.add_argument("--device-flops", type=float, default=20e9)
    p.add_argument("--memory-budget-gib", type=float, default=4.0)
    p.add_argument("--bandwidth-mbps", type=float, default=1000.0)
    p.add_argument("--latency-ms", type=float, default=0.5)


def _synth(spec: ModelSpec, n: int, het: float, seed: int, args) -> ProfileSet:
    return synthesize_profiles(
        spec, n, het, seed, seq_len=args.seq_len, batch_sizes=_batch_sizes(args.batch_sizes),
        memory_budget=int(args.memory_budget_gib * GIB), device_flops=args.device_flops,
        link=LinkProfile.from_mbps(args.bandwidth_mbps, args.latency_ms))


def _profiles(args, spec: ModelSpec, inputs: list) -> ProfileSet:
    if getattr(args, "profiles", None):
        inputs.append(_require_file(args.profiles, "profile file"))
        return load_profiles(args.profiles)
    if getattr(args, "synth", None):
        s = _parse_synth(args.synth)
        return _synth(spec, s["n"], s["het"], s["seed"], args)
    raise InvalidInput("give --profiles FILE or --synth n=..,het=..,seed=..")


def _spec(source: str, inputs: list) -> ModelSpec:
    if source not in model_cost.REFERENCE_SPECS:
        inputs.append(_require_file(source, "model spec"))
    return load_spec(source)


# ---------------------------------------------------------------------------
# subcommands; each returns ({flag: output path}, [input paths])

def cmd_profile_synth(args):
    inputs = []
    spec = _spec(args.model, inputs)
    profiles = _synth(spec, args.devices, args.heterogeneity, args.seed, args)
    atomic_write_text(args.out, dumps_profiles(profiles))
    print(f"wrote {len(profiles)} device profiles for {spec.name} to {args.out}")
    return {"--out": args.out}, inputs


def cmd_plan(args):
    inputs = []
    spec = _spec(args.model, inputs)
    profiles = _profiles(args, spec, inputs)
    est = planner.HybridParallelPlanner(spec, args.micro_batch_size, args.num_micro_batches)
    est.fit(profiles)
    plan = est.plan_
    if args.oracle:
        if not planner.oracle_applicable(profiles):
            raise InvalidInput(
                f"--oracle supports at most {planner.ORACLE_MAX_LAYERS} layers and "
                f"{planner.ORACLE_MAX_DEVICES} devices")
        ref = planner.brute_force_oracle(spec, profiles, args.micro_batch_size,
                                         args.num_micro_batches, "phase_total", sizes=est.sizes_)
        if ref is None or ref.objective_us != plan.objective_us:
            raise Mismatch(f"oracle objective {getattr(ref, 'objective_ms', None)} ms != "
                           f"planner objective {plan.objective_ms} ms")
        print(f"oracle agrees: {ref.objective_ms} ms")
    atomic_write_text(args.out, planner.dumps_plan(plan, spec, profiles, est.candidates_))
    groups = " | ".join(f"layers {a}-{b} on {len(g)} dev" for (a, b), g in zip(plan.splits, plan.groups))
    print(f"{plan.num_stages} stage(s): {groups}; predicted {plan.objective_ms:.3f} ms per mini-batch")
    return {"--out": args.out}, inputs


def _cache_for_sim(args, spec: ModelSpec, seq_len: int, num_samples: int, inputs: list):
    if args.cache_dir:
        try:
            header = read_header(args.cache_dir)
        except CacheMissError:
            raise InvalidInput(f"missing activation cache: no populated cache at {args.cache_dir}")
        if header["hidden"] != spec.hidden_size or header["seq_len"] != seq_len:
            raise InvalidInput(f"activation cache at {args.cache_dir} does not match the plan's model")
        store = CacheStore.open(args.cache_dir)
        if len(store) < num_samples:
            raise InvalidInput(f"missing activation cache entries: {args.cache_dir} holds "
                               f"{len(store)} of {num_samples} samples")
        inputs.append(Path(args.cache_dir))
        return store
    if args.modeled_cache:
        return pipeline_sim.ModeledCache(spec, seq_len, num_samples)
    raise InvalidInput("simulate --cached needs a populated activation cache (--cache-dir) "
                       "or --modeled-cache; missing cache")


def cmd_simulate(args):
    inputs = [_require_file(args.plan, "plan file")]
    plan, spec, seq_len = planner.load_plan(args.plan)
    profiles = _profiles(args, spec, inputs)
    if profiles.seq_len != seq_len:
        raise InvalidInput(f"plan was made for seq_len {seq_len}, profiles use {profiles.seq_len}")
    sizes = tensor_sizes(spec, seq_len)
    analytic = planner.phase_latencies(plan, profiles, sizes)
    trace = pipeline_sim.simulate_1f1b(plan, profiles, sizes)
    summary = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "mode": "cached" if args.cached else "1f1b",
        "model": spec.name,
        "num_stages": plan.num_stages,
        "group_sizes": list(plan.group_sizes),
        "makespan_ms": trace.makespan_ms,
        "analytic_ms": analytic.total / 1000,
        "phases_ms": {k: v / 1000 for k, v in trace.phases.items()},
        "peak_memory_bytes": trace.peak_memory,
        "memory_budget_bytes": {d.device_id: d.memory_budget for d in profiles.devices},
    }
    if args.cached:
        n = args.samples or plan.micro_batch_size * plan.num_micro_batches
        cache = _cache_for_sim(args, spec, seq_len, n, inputs)
        phase1 = pipeline_sim.phase1_epoch_us(plan, profiles, sizes, n)
        cached = pipeline_sim.simulate_cached_epoch(
            range(len(profiles)), spec, profiles, sizes, n,
            micro_batch_size=plan.micro_batch_size, num_micro_batches=plan.num_micro_batches,
            cache=cache, disk_rate=args.disk_rate_mbs * 1e6)
        redist = pipeline_sim.simulate_redistribution(plan, sizes, profiles.link, n)
        total = phase1 / 1000 + redist + (args.epochs - 1) * cached.makespan_ms
        summary.update({
            "samples": n,
            "epochs": args.epochs,
            "phase1_epoch_ms": phase1 / 1000,
            "cached_epoch_ms": cached.makespan_ms,
            "per_epoch_reduction": 1 - cached.makespan_us / phase1,
            "redistribution_ms": redist,
            "total_ms": total,
            "redistribution_share": redist / total if args.epochs > 1 else None,
        })
        trace = cached
    outputs = {}
    if args.trace:
        atomic_write_text(args.trace, pipeline_sim.dumps_trace(trace))
        outputs["--trace"] = args.trace
    if args.svg:
        atomic_write_text(args.svg, pipeline_sim.trace_svg(trace, f"{spec.name} schedule"))
        outputs["--svg"] = args.svg
    if args.out:
        atomic_write_text(args.out, _dump(summary))
        outputs["--out"] = args.out
    print(f"makespan {trace.makespan_ms:.3f} ms ({summary['mode']})")
    return outputs, inputs


def cmd_tune_toy(args):
    inputs = []
    spec = _spec(args.spec, inputs)
    data = adapters_core.make_toy_dataset(spec, args.samples, args.seq_len, args.seed)
    backbone = adapters_core.BackboneState.random(spec, args.seed)
    init = adapters_core.AdapterState.init(spec, args.seed + 1)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "spec": spec.to_dict(),
        "samples": args.samples, "seq_len": args.seq_len, "epochs": args.epochs,
        "seed": args.seed, "learning_rate": args.lr, "batch_size": args.batch_size,
        "cache": bool(args.cache),
    }
    plain = adapters_core.train(init, backbone, data, args.epochs, None, args.lr, args.batch_size)
    runs = plain
    if args.cache:
        scratch = None
        cache_dir = args.cache_dir
        if cache_dir is None:
            scratch = tempfile.mkdtemp(prefix="edgetune-cache-")
            cache_dir = Path(scratch) / "cache"
        store = CacheStore(cache_dir, backbone.fingerprint(), spec.num_layers + 1,
                           args.seq_len, spec.hidden_size)
        store.clear()
        runs = adapters_core.train(init, backbone, data, args.epochs, store, args.lr,
                                   args.batch_size)
        first_ids = data[0][0]
        fresh = adapters_core.backbone_forward(backbone, first_ids)
        stored = store.get(adapters_core.sample_id(first_ids))
        loss_gap = max(abs(a - b) for r1, r2 in zip(runs, plain)
                       for a, b in zip(r1.losses, r2.losses))
        params_equal = all(np.array_equal(getattr(runs[-1].adapters, k),
                                          getattr(plain[-1].adapters, k))
                           for k in adapters_core.PARAM_NAMES)
        report["cache_info"] = {
            "header": store.header(),
            "entries_file_bytes": store.file_bytes(),
            "formula_bytes": model_cost.cache_storage_bytes(
                spec, len(store), args.seq_len, cached_layers=spec.num_layers + 1,
                bytes_per_scalar=8),
            "integrity": store.verify()["ok"],
        }
        report["equivalence"] = {
            "max_abs_loss_diff": loss_gap,
            "final_params_bitwise_equal": params_equal,
            "backbone_outputs_bitwise_equal": all(np.array_equal(a, b)
                                                  for a, b in zip(fresh, stored)),
        }
        if not (args.keep_cache and args.cache_dir):
            store.clear()
        if scratch:
            shutil.rmtree(scratch, ignore_errors=True)
    report["epochs_detail"] = [
        {"epoch": i + 1, "mean_loss": float(np.mean(r.losses)), "losses": r.losses,
         "census": r.census.to_dict()}
        for i, r in enumerate(runs)]
    atomic_write_text(args.report, _dump(report))
    means = ", ".join(f"{e['mean_loss']:.4f}" for e in report["epochs_detail"])
    print(f"epoch mean losses: {means}")
    outputs = {"--report": args.report}
    if args.cache and args.keep_cache and args.cache_dir:
        outputs["--cache-dir"] = args.cache_dir
    return outputs, inputs


def _cost_tables(spec: ModelSpec, batch: int, seq_len: int) -> dict:
    out = {}
    for tech in TECHNIQUES:
        s = spec.replace(technique=tech)
        mem = model_cost.memory_breakdown(s, batch, seq_len)
        counts = model_cost.param_count(s)
        out[tech] = {
            "trainable_params": counts["trainable"],
            "trainable_percent": 100 * counts["trainable"] / counts["backbone"],
            "weights_gib": mem.weights_bytes / GIB,
            "gradients_gib": mem.gradients_bytes / GIB,
            "activations_gib": mem.table_activations_bytes / GIB,
            "total_gib": mem.total_bytes / GIB,
            "fwd_gflops": mem.fwd_flops / 1e9,
            "bwd_gflops": mem.bwd_flops / 1e9,
        }
    if spec.technique == "ParallelAdapters":
        cached = model_cost.memory_breakdown(spec, batch, seq_len, cache_mode=True)
        out["ParallelAdapters+cache"] = {
            "weights_gib": cached.weights_bytes / GIB,
            "gradients_gib": cached.gradients_bytes / GIB,
            "activations_gib": cached.table_activations_bytes / GIB,
            "total_gib": cached.total_bytes / GIB,
            "fwd_gflops": cached.fwd_flops / 1e9,
            "bwd_gflops": cached.bwd_flops / 1e9,
        }
    return out


def cmd_report(args):
    inputs = []
    report = {"schema_version": REPORT_SCHEMA_VERSION}
    spec = None
    plan = None
    parts = []
    if args.plan:
        inputs.append(_require_file(args.plan, "plan file"))
        plan, spec, _ = planner.load_plan(args.plan)
        report["plan"] = json.loads(Path(args.plan).read_text())
    if args.model:
        spec = _spec(args.model, inputs)
    if spec is None:
        raise InvalidInput("report needs --model or --plan")
    report["model"] = spec.to_dict()
    report["cost_tables"] = {"batch": args.batch, "seq_len": args.seq_len,
                             "techniques": _cost_tables(spec, args.batch, args.seq_len)}
    if args.profiles:
        profiles = _profiles(args, spec, inputs)
        B = args.micro_batch_size or (plan.micro_batch_size if plan else 4)
        M = args.num_micro_batches or (plan.num_micro_batches if plan else 4)
        rows = []
        for n in range(2, min(args.max_devices, len(profiles)) + 1):
            try:
                best = planner.select_plan(spec, profiles.subset(n), B, M)
                rows.append({"devices": n, "num_stages": best.num_stages,
                             "group_sizes": list(best.group_sizes),
                             "splits": [list(s) for s in best.splits],
                             "objective_ms": best.objective_ms})
            except planner.NoFeasiblePlanError:
                rows.append({"devices": n, "num_stages": None, "group_sizes": None,
                             "splits": None, "objective_ms": None})
        report["groupings"] = {"micro_batch_size": B, "num_micro_batches": M, "rows": rows}
        sweep = []
        for m in (1, 2, 4, 8, 16):
            try:
                best = planner.select_plan(spec, profiles, B, m)
                sweep.append({"num_micro_batches": m, "num_stages": best.num_stages,
                              "group_sizes": list(best.group_sizes),
                              "objective_ms": best.objective_ms,
                              "per_sample_ms": best.objective_ms / (B * m)})
            except planner.NoFeasiblePlanError:
                sweep.append({"num_micro_batches": m, "num_stages": None, "group_sizes": None,
                              "objective_ms": None, "per_sample_ms": None})
        report["micro_batch_sweep"] = {"micro_batch_size": B, "rows": sweep}
    if args.trace:
        inputs.append(_require_file(args.trace, "trace file"))
        trace = pipeline_sim.import_trace(args.trace)
        report["schedule"] = {"makespan_ms": trace.makespan_ms,
                              "events": len(trace.events),
                              "phases_ms": {k: v / 1000 for k, v in trace.phases.items()},
                              "peak_memory_bytes": trace.peak_memory}
        parts.append(pipeline_sim.trace_svg(trace, "schedule"))
    if args.tune_report:
        inputs.append(_require_file(args.tune_report, "tune-toy report"))
        tune = json.loads(Path(args.tune_report).read_text())
        report["census"] = [{"epoch": e["epoch"], "mean_loss": e["mean_loss"], **e["census"]}
                            for e in tune["epochs_detail"]]
        if "equivalence" in tune:
            report["equivalence"] = tune["equivalence"]
    if args.cache_dir:
        store = CacheStore.open(args.cache_dir)
        inputs.append(Path(args.cache_dir))
        report["cache"] = {"header": store.header(), "entries_file_bytes": store.file_bytes(),
                           "integrity": store.verify()}
    techs = list(report["cost_tables"]["techniques"])
    tables = report["cost_tables"]["techniques"]
    parts.append(svg.bar_chart(techs, {"forward": [tables[t]["fwd_gflops"] for t in techs],
                                       "backward": [tables[t]["bwd_gflops"] for t in techs]},
                               title=f"FLOPs per mini-batch ({spec.name})", unit="GFLOP"))
    parts.append(svg.bar_chart(techs, {k: [tables[t][f"{k}_gib"] for t in techs]
                                       for k in ("weights", "gradients", "activations")},
                               title=f"memory footprint ({spec.name})", unit="GiB"))
    atomic_write_text(args.out, _dump(report))
    outputs = {"--out": args.out}
    if args.svg:
        atomic_write_text(args.svg, svg.stack(parts))
        outputs["--svg"] = args.svg
    print(f"wrote report to {args.out}")
    return outputs, inputs


# ---------------------------------------------------------------------------
# manifests

def _fingerprint(path: Path) -> str:
    if path.is_dir():
        import hashlib
        h = hashlib.sha256()
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(sha256_file(f).encode())
        return h.hexdigest()
    return sha256_file(path)


def _write_manifest(args, argv: list[str], outputs: dict, inputs: list) -> None:
    if not outputs or args.no_manifest:
        return
    params = {k: v for k, v in sorted(vars(args).items())
              if k not in ("func", "manifest", "no_manifest")}
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "tool": "edgetune",
        "version": __version__,
        "subcommand": args.command,
        "argv": argv,
        "parameters": params,
        "seed": params.get("seed"),
        "inputs": {str(p): _fingerprint(Path(p)) for p in inputs},
        "outputs": {flag: {"path": str(path), "sha256": _fingerprint(Path(path))}
                    for flag, path in outputs.items()},
    }
    target = args.manifest or f"{next(iter(outputs.values()))}.manifest.json"
    atomic_write_text(target, _dump(manifest))


def _replace_flag(argv: list[str], flag: str, value: str) -> list[str]:
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok == flag and i + 1 < len(argv):
            out.extend([flag, value])
            i += 2
            continue
        if tok.startswith(flag + "="):
            out.append(f"{flag}={value}")
        else:
            out.append(tok)
        i += 1
    return out


def cmd_replay(args):
    manifest_path = _require_file(args.manifest_file, "manifest")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise InvalidInput("unsupported manifest schema_version")
    for path, digest in manifest["inputs"].items():
        p = _require_file(path, "manifest input")
        if _fingerprint(p) != digest:
            raise InvalidInput(f"input {path} changed since the manifest was written")
    argv = list(manifest["argv"])
    mismatches = []
    with tempfile.TemporaryDirectory(prefix="edgetune-replay-") as tmp:
        fresh = {}
        for flag, entry in manifest["outputs"].items():
            fresh[flag] = str(Path(tmp) / Path(entry["path"]).name)
            argv = _replace_flag(argv, flag, fresh[flag])
        code = main(argv + ["--no-manifest"])
        if code != EXIT_OK:
            raise Mismatch(f"replayed command exited with {code}")
        for flag, entry in manifest["outputs"].items():
            digest = _fingerprint(Path(fresh[flag]))
            same = digest == entry["sha256"]
            print(f"{'match' if same else 'MISMATCH'} {flag} {entry['path']}")
            if not same:
                mismatches.append(entry["path"])
    if mismatches:
        raise Mismatch(f"replay differs for {', '.join(mismatches)}")
    return {}, []


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgetune", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"edgetune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--manifest", help="manifest path (default: <first output>.manifest.json)")
        p.add_argument("--no-manifest", action="store_true", help="skip writing a manifest")

    p = sub.add_parser("profile-synth", help="synthesize device runtime profiles")
    p.add_argument("--model", required=True, help="bundled spec name or spec JSON path")
    p.add_argument("--devices", type=int, required=True)
    p.add_argument("--heterogeneity", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_synth_flags(p)
    common(p)
    p.set_defaults(func=cmd_profile_synth)

    p = sub.add_parser("plan", help="choose stages and device groups")
    p.add_argument("--model", required=True)
    p.add_argument("--profiles")
    p.add_argument("--synth", help="synthesize profiles instead, e.g. n=8,het=0.2,seed=3")
    p.add_argument("-B", "--micro-batch-size", type=int, default=4)
    p.add_argument("-M", "--num-micro-batches", type=int, default=4)
    p.add_argument("--oracle", action="store_true", help="cross-check with brute force")
    p.add_argument("--out", required=True)
    _add_synth_flags(p)
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate a plan (1F1B, or cached epochs)")
    p.add_argument("--plan", required=True)
    p.add_argument("--profiles")
    p.add_argument("--synth")
    p.add_argument("--cached", action="store_true")
    p.add_argument("--samples", type=int, default=0, help="epoch size for --cached")
    p.add_argument("--epochs", type=int, default=3, help="epochs in the total-time figure")
    p.add_argument("--cache-dir", help="populated activation cache")
    p.add_argument("--modeled-cache", action="store_true",
                   help="use size-only cache entries derived from the model")
    p.add_argument("--disk-rate-mbs", type=float, default=pipeline_sim.DEFAULT_DISK_RATE / 1e6)
    p.add_argument("--trace")
    p.add_argument("--svg")
    p.add_argument("--out", help="summary JSON")
    _add_synth_flags(p)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tune-toy", help="fine-tune the side network on a toy backbone")
    p.add_argument("--spec", default="toy")
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=8)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--cache", action="store_true")
    p.add_argument("--cache-dir")
    p.add_argument("--keep-cache", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--report", required=True)
    common(p)
    p.set_defaults(func=cmd_tune_toy)

    p = sub.add_parser("report", help="aggregate artifacts into one JSON + SVG bundle")
    p.add_argument("--model")
    p.add_argument("--plan")
    p.add_argument("--profiles")
    p.add_argument("--synth")
    p.add_argument("--trace")
    p.add_argument("--tune-report")
    p.add_argument("--cache-dir")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--max-devices", type=int, default=8)
    p.add_argument("-B", "--micro-batch-size", type=int, default=0)
    p.add_argument("-M", "--num-micro-batches", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--svg")
    _add_synth_flags(p)
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    p.add_argument("manifest_file")
    p.set_defaults(func=cmd_replay, no_manifest=True, manifest=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        outputs, inputs = args.func(args)
        clean = [a for a in argv if a != "--no-manifest"]
        _write_manifest(args, clean, outputs, inputs)
    except planner.NoFeasiblePlanError:
        print("error: no feasible plan", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Mismatch as exc:
        print(f"error: mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (InvalidInput, ProfileError, CacheError, CacheMissError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
