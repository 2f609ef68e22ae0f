"""Command-line harness.

Subcommands:
    gen     write a seeded synthetic blob instance to a tensor file
    run     full pipeline on a tensor file, one JSON line per seed
    sweep   policy x density x seed grid, CSV on stdout or --out
    verify  hard invariants plus the map-error bound, JSON report

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 unreadable/malformed input or unwritable output, 4 instance beyond a
supported capability limit. All output is deterministic given (file bytes,
config, seed); timing is the only exception and --no-timing removes it.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .analysis import (
    POLICIES,
    BlobSpec,
    build_error_table,
    drop_probs,
    make_blob_instance,
    prepare,
    sweep_one_seed,
    verify_bound,
)
from .attention import exact_block_flops, reference_sparse_output, sparse_attend
from .config import ConfigError, RunConfig, apply_preset
from .estimator import estimate_errors_value_aware, estimate_errors_streaming
from .linalg import ShapeError
from .oracle import (
    CapabilityError,
    full_attention,
    knapsack_oracle,
    map_mse,
    sparse_map_direct,
)
from .router import (
    DensityBudget,
    entry_capacity,
    route_error_aware,
    route_random,
    route_score,
    score_top_p,
)
from .tensorio import TensorFormatError, read_tensor_file, write_tensor_file

# Largest N_q * N_k for which `run` materializes the dense reference map.
DENSE_COMPARE_MAX_ENTRIES = 4_194_304

CSV_HEADER = "policy,density,relaxed_objective,map_mse,output_mse,flops,seed,c_q,c_k"
SWEEP_DEFAULT_POLICIES = ("topPDrop", "topPCompensated", "errorAwareCompensated")


def _load_config(args, *, policy_override: bool = True) -> RunConfig:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    config = RunConfig.from_dict(data)
    if getattr(args, "preset", None):
        config = apply_preset(config, args.preset)
    merged = config.to_dict()
    if policy_override and getattr(args, "policy", None):
        merged["policy"] = args.policy
    if getattr(args, "precision", None):
        merged["precision"] = args.precision
    if getattr(args, "seed", None) is not None:
        merged["seeds"] = [args.seed]
    return RunConfig.from_dict(merged)


def _build_mask(config: RunConfig, prep, table, seed: int):
    policy = config.policy
    if config.budget_mode == "globalDensity":
        budget = DensityBudget.global_density(config.rho)
    else:
        budget = DensityBudget.top_p(config.p)
    if policy == "errorAwareCompensated":
        return route_error_aware(
            table,
            budget,
            q_centroids=prep.q_model.centroids,
            k_centroids=prep.k_model.centroids,
        )
    if policy in ("topPDrop", "topPCompensated"):
        if config.budget_mode == "globalDensity":
            return route_score(
                prep.q_model.centroids,
                prep.k_model.centroids,
                prep.q_model.sizes,
                prep.k_model.sizes,
                budget,
            )
        return score_top_p(
            prep.q_model.centroids,
            prep.k_model.centroids,
            prep.q_model.sizes,
            prep.k_model.sizes,
            config.p,
        )
    if policy == "random":
        return route_random(table, budget, seed * 1_000_003)
    return knapsack_oracle(table, entry_capacity(config.rho, table.total_entries))


def _run_single(q, k, v, config: RunConfig, seed: int) -> dict:
    """One seed through cluster -> estimate -> route -> attend -> compare."""
    prep = prepare(q, k, v, config.c_q, config.c_k, seed=seed, restarts=config.kmeans_restarts)
    table = build_error_table(prep, config.estimator_mode)
    mask = _build_mask(config, prep, table, seed)
    dtype = np.float32 if config.precision == "single-executor" else np.float64
    flops = prep.q_model.flops + prep.k_model.flops + table.flops

    if config.policy == "topPDrop":
        probs = drop_probs(prep, mask)
        out = probs @ prep.v
        flops += exact_block_flops(prep.d, mask.density_entries)
    else:
        result = sparse_attend(prep.q, prep.k, prep.v, prep.q_model, prep.k_model, mask, dtype=dtype)
        out = result.output
        flops += result.flops.exact_block + result.flops.compensation

    map_err = out_err = None
    if prep.n_q * prep.n_k <= DENSE_COMPARE_MAX_ENTRIES:
        full_map, full_out = full_attention(prep.q, prep.k, prep.v)
        if config.policy == "topPDrop":
            map_err = map_mse(probs, full_map.probs)
        else:
            amap = sparse_map_direct(prep.q, prep.k, prep.q_model, prep.k_model, mask)
            map_err = map_mse(amap, full_map)
        diff = np.asarray(out, dtype=np.float64) - full_out
        out_err = float(np.mean(diff * diff))

    return {
        "policy": config.policy,
        "density": mask.density,
        "relaxedObjective": float(table.error_sum[~mask.selected].sum()),
        "mapMse": map_err,
        "outputMse": out_err,
        "flopsTotal": int(flops),
        "seed": seed,
        "clusterCounts": [prep.q_model.num_clusters, prep.k_model.num_clusters],
    }


def _cmd_gen(args) -> int:
    config = _load_config(args)
    seed = config.seeds[0]
    spec = BlobSpec(
        n_q=config.n_q,
        n_k=config.n_k,
        d=config.d,
        q_blobs=config.q_blobs,
        k_blobs=config.k_blobs,
        sigma=config.sigma,
        center_scale=config.center_scale,
    )
    q, k, v = make_blob_instance(spec, seed)
    write_tensor_file(args.output, q, k, v)
    return 0


def _emit(text: str, out_path) -> None:
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_run(args) -> int:
    config = _load_config(args)
    q, k, v = read_tensor_file(args.tensor)
    lines = []
    for seed in config.seeds:
        start = time.perf_counter()
        record = _run_single(q, k, v, config, seed)
        record["config"] = config.to_dict()
        if not args.no_timing:
            record["timing"] = {"seconds": time.perf_counter() - start}
        lines.append(json.dumps(record))
    _emit("".join(line + "\n" for line in lines), args.out)
    return 0


def _sweep_seed_worker(packed):
    tensor_path, config_dict, policies, densities, seed = packed
    config = RunConfig.from_dict(config_dict)
    q, k, v = read_tensor_file(tensor_path)
    return sweep_one_seed(
        lambda _s: (q, k, v),
        policies,
        densities,
        seed,
        c_q=config.c_q,
        c_k=config.c_k,
        estimator_mode=config.estimator_mode,
        restarts=config.kmeans_restarts,
    )


def _cmd_sweep(args) -> int:
    # --policy holds a comma-separated list here, not a single config value.
    config = _load_config(args, policy_override=False)
    try:
        densities = [float(x) for x in args.density_grid.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad density grid {args.density_grid!r}: {exc}") from exc
    if not densities:
        raise ConfigError("density grid is empty")
    for rho in densities:
        if not (0.0 <= rho <= 1.0):
            raise ConfigError(f"density {rho} outside [0, 1]")
    if args.policy:
        policies = tuple(p.strip() for p in args.policy.split(","))
        for p in policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r}")
    else:
        policies = SWEEP_DEFAULT_POLICIES

    read_tensor_file(args.tensor)  # validate the container up front
    packed = [
        (args.tensor, config.to_dict(), policies, densities, seed)
        for seed in config.seeds
    ]
    workers = args.workers if args.workers else (os.cpu_count() or 1)
    if workers > 1 and len(packed) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_sweep_seed_worker, packed))
    else:
        per_seed = [_sweep_seed_worker(item) for item in packed]

    by_seed = dict(zip(config.seeds, per_seed))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER.split(","))
    for pi, policy in enumerate(policies):
        for di in range(len(densities)):
            for seed in config.seeds:
                rec = by_seed[seed][di * len(policies) + pi]
                writer.writerow([
                    rec.policy,
                    rec.density,
                    rec.relaxed_objective,
                    rec.map_mse,
                    rec.output_mse,
                    rec.flops_total,
                    rec.seed,
                    rec.cluster_counts[0],
                    rec.cluster_counts[1],
                ])
    _emit(buf.getvalue(), args.out)
    return 0


def _cmd_verify(args) -> int:
    config = _load_config(args)
    q, k, v = read_tensor_file(args.tensor)
    seed = config.seeds[0]
    prep = prepare(q, k, v, config.c_q, config.c_k, seed=seed, restarts=config.kmeans_restarts)

    naive = estimate_errors_value_aware(prep.q_model, prep.k_model, prep.k, prep.v)
    streamed = estimate_errors_streaming(prep.q_model, prep.k_model, prep.k, prep.v)
    denom = max(1.0, float(np.abs(naive.error_sum).max()))
    stream_diff = float(np.abs(streamed.error_sum - naive.error_sum).max()) / denom
    stream_gate = 1e-10

    table = build_error_table(prep, config.estimator_mode)
    mask = _build_mask(config, prep, table, seed)
    dtype = np.float32 if config.precision == "single-executor" else np.float64
    result = sparse_attend(prep.q, prep.k, prep.v, prep.q_model, prep.k_model, mask, dtype=dtype)
    reference = reference_sparse_output(prep.q, prep.k, prep.v, prep.q_model, prep.k_model, mask)
    abs_diff = float(np.abs(np.asarray(result.output, dtype=np.float64) - reference).max())
    if config.precision == "single-executor":
        scale = max(float(np.abs(reference).max()), 1e-30)
        exec_metric = abs_diff / scale
        exec_gate = 1e-4
    else:
        exec_metric = abs_diff
        exec_gate = 1e-9

    bound = verify_bound(prep, mask)
    checks = {
        "executorReference": {
            "metric": exec_metric,
            "gate": exec_gate,
            "relative": config.precision == "single-executor",
            "pass": exec_metric <= exec_gate,
        },
        "streamingNaive": {
            "metric": stream_diff,
            "gate": stream_gate,
            "pass": stream_diff <= stream_gate,
        },
    }
    hard_pass = all(c["pass"] for c in checks.values())
    report = {
        "checks": checks,
        "bound": {
            "lhsMse": bound.lhs_mse,
            "estimatedTerm": bound.estimated_term,
            "residualTerm": bound.residual_term,
            "rhs": bound.rhs,
            "holds": bound.holds,
            "slack": bound.slack,
            "normalizerShift": bound.normalizer_shift,
        },
        "pass": hard_pass,
    }
    _emit(json.dumps(report, indent=2) + "\n", args.out)
    return 0 if hard_pass else 1


def _add_common(parser, *, seed_flag: bool = True):
    parser.add_argument("--config", required=True, help="RunConfig JSON path")
    parser.add_argument("--preset", choices=["paper"], help="apply a named configuration preset")
    if seed_flag:
        parser.add_argument("--seed", type=int, help="override the config seed list with one seed")
    parser.add_argument("--policy", help="override the routing policy")
    parser.add_argument("--precision", choices=["double", "single-executor"],
                        help="override the executor precision")
    parser.add_argument("--no-timing", action="store_true",
                        help="omit timing fields for byte-stable output")
    parser.add_argument("--out", help="write output to this path instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="routedattn",
        description="Routed block-sparse attention harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic tensor file")
    p_gen.add_argument("output", help="tensor file to write")
    _add_common(p_gen)

    p_run = sub.add_parser("run", help="run the pipeline, JSON line per seed")
    p_run.add_argument("tensor", help="tensor file to read")
    _add_common(p_run)

    p_sweep = sub.add_parser("sweep", help="policy x density x seed sweep, CSV output")
    p_sweep.add_argument("tensor", help="tensor file to read")
    p_sweep.add_argument("--density-grid", required=True,
                         help="comma-separated densities, e.g. 0.1,0.25,0.5")
    p_sweep.add_argument("--workers", type=int,
                         help="parallel seed workers (default: available cores)")
    _add_common(p_sweep)

    p_verify = sub.add_parser("verify", help="invariant checks plus bound report")
    p_verify.add_argument("tensor", help="tensor file to read")
    _add_common(p_verify)
    return parser


_DISPATCH = {
    "gen": _cmd_gen,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "verify": _cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TensorFormatError, ShapeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except CapabilityError as exc:
        print(f"capability error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
