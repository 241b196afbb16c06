"""Command-line entry points: train, generate, impute, diagnose, synth."""

import argparse
import glob
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import autoencoder as ae
from .checkpoint import checkpoint_to_result, load_checkpoint, result_to_checkpoint, save_checkpoint
from .config import load_config, parse_config
from .datasets import (Dataset, MovingBallConfig, generate_correlated_gp, generate_moving_ball,
                       generate_rotated_glyphs, load_csv, save_csv)
from .diagnostics import export_traces, format_report, metrics, rhat
from .errors import (ChainCountTooSmall, ConfigError, DataError, MissingCheckpoint, NoMissing,
                     NumericError, SgpbaeError)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def chain_rng(seed, chain):
    return np.random.default_rng([seed, chain])


def max_workers(n_chains):
    cap = os.environ.get("SGPBAE_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n_chains, limit))


def _load_dataset(run, data_path):
    path = data_path or run["data.path"]
    if not path:
        raise DataError("no data path given (--data or data.path)")
    group = run["data.group_column"] or None
    tokens = ("", run["data.missing_token"])
    return load_csv(path, list(run["data.aux_columns"]), tokens, group_column=group)


def _train_chain(args):
    config_text, data, chain, seed = args
    run = parse_config(config_text)
    result = ae.train(data, run.model_config(), run.sghmc_config(), chain_rng(seed, chain),
                      run.adam_config())
    return result_to_checkpoint(result, run)


def cmd_train(config_path, data_path, out_dir, seed=None, chains=None):
    overrides = {}
    if seed is not None:
        overrides["seed"] = str(seed)
    if chains is not None:
        overrides["chains"] = str(chains)
    run = load_config(config_path, overrides)
    data = _load_dataset(run, data_path)
    os.makedirs(out_dir, exist_ok=True)
    n = run["chains"]
    jobs = [(run.to_text(), data, k, run["seed"]) for k in range(n)]
    start = time.perf_counter()
    workers = max_workers(n)
    if workers == 1:
        ckpts = [_train_chain(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            ckpts = list(pool.map(_train_chain, jobs))
    report = {"chains": n}
    for k, ck in enumerate(ckpts):
        save_checkpoint(os.path.join(out_dir, f"chain_{k}.sgpb"), ck)
        energies = ck.arrays["meta.energies"]
        report[f"chain_{k}.final_energy"] = float(energies[-1]) if len(energies) else float("nan")
        report[f"chain_{k}.n_samples"] = sum(1 for a in ck.arrays if a.endswith(".dec.W0"))
    report["wall_time_s"] = round(time.perf_counter() - start, 3)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_report(report))
    return report


def _save_matrix(path, M, prefix="c"):
    save_csv(Dataset(np.zeros((M.shape[0], 0)), M, names=[f"{prefix}{j}" for j in range(M.shape[1])]),
             path)


def cmd_generate(checkpoint, out_dir, inputs, seed=0):
    """Mean frames and epistemic variance maps at new auxiliary inputs."""
    result, _ = checkpoint_to_result(load_checkpoint(checkpoint))
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[0] == 1 and result.model.aux_dim == 1:
        x = x.T
    mean, var = ae.generate(result.model, result.samples, x, np.random.default_rng(seed))
    os.makedirs(out_dir, exist_ok=True)
    _save_matrix(os.path.join(out_dir, "mean.csv"), mean, "p")
    _save_matrix(os.path.join(out_dir, "variance.csv"), var, "p")
    return mean, var


def cmd_impute(checkpoint, data_path, out_dir, truth_path=None, seed=0):
    result, run = checkpoint_to_result(load_checkpoint(checkpoint))
    data = _load_dataset(run, data_path)
    os.makedirs(out_dir, exist_ok=True)
    try:
        imp = ae.impute(result.model, result.samples, data, result.encoder,
                        np.random.default_rng(seed))
    except NoMissing:
        with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_report({"status": "no_missing"}))
        print("no missing entries; nothing to impute")
        return None
    filled = Dataset(data.X, imp.filled(data.Y), names=data.names, groups=data.groups)
    save_csv(filled, os.path.join(out_dir, "filled.csv"))
    _save_matrix(os.path.join(out_dir, "std.csv"), imp.std, "y")
    report = {"n_missing": int(imp.missing.sum())}
    if truth_path:
        truth = _load_dataset(run, truth_path).Y
        report.update(metrics(imp.mean, imp.std**2, truth, imp.missing))
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_report(report))
    return report


def cmd_diagnose(checkpoints, data_path, out_dir, seed=0):
    """Predictive-posterior R-hat across chains plus a trace export."""
    if len(checkpoints) < 2:
        raise ChainCountTooSmall(f"need at least 2 chains, got {len(checkpoints)}")
    results = []
    run = None
    for path in checkpoints:
        res, run = checkpoint_to_result(load_checkpoint(path))
        results.append(res)
    data = _load_dataset(run, data_path)
    from .experiments import median_rhat, predictive_chains
    n_draws = min(len(r.samples) for r in results)
    if n_draws < 2:
        raise ChainCountTooSmall("each chain needs at least 2 posterior samples")
    for r in results:
        r.samples = r.samples[:n_draws]
    chains = predictive_chains(results, data.Y, seed)
    os.makedirs(out_dir, exist_ok=True)
    flat = chains.reshape(chains.shape[0], chains.shape[1], -1)
    keep = flat.std(axis=(0, 1)) > 1e-8
    r_all = rhat(flat[:, :, keep])
    report = {"chains": len(results), "draws": n_draws, "dims": int(keep.sum()),
              "median_rhat": median_rhat(chains), "max_rhat": float(r_all.max())}
    export_traces(flat[:, :, : min(flat.shape[2], 64)], os.path.join(out_dir, "traces.csv"))
    with open(os.path.join(out_dir, "rhat_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_report(report))
    return report


def cmd_synth(kind, out_dir, n, seed):
    os.makedirs(out_dir, exist_ok=True)
    if kind == "moving-ball":
        data, traj = generate_moving_ball(MovingBallConfig(n_videos=n, seed=seed))
        data.names = ["t"] + [f"p{j}" for j in range(data.P)]
        save_csv(data, os.path.join(out_dir, "data.csv"), group_column="video")
        T = traj.shape[1]
        tr = Dataset(np.repeat(np.arange(n), T)[:, None].astype(float), traj.reshape(-1, 2),
                     names=["video", "col", "row"])
        save_csv(tr, os.path.join(out_dir, "trajectories.csv"))
    elif kind == "glyphs":
        save_csv(generate_rotated_glyphs(n, seed), os.path.join(out_dir, "data.csv"))
    elif kind == "correlated-gp":
        data, truth = generate_correlated_gp(n=n, seed=seed)
        save_csv(data, os.path.join(out_dir, "data.csv"))
        save_csv(Dataset(data.X, truth, names=data.names), os.path.join(out_dir, "truth.csv"))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")


def build_parser():
    p = argparse.ArgumentParser(prog="sgpbae", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run amortized SGHMC and write checkpoints")
    t.add_argument("--config", required=True)
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--chains", type=int)

    g = sub.add_parser("generate", help="decode latents drawn at new inputs")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--x", required=True, help="comma-separated auxiliary inputs")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("impute", help="fill missing entries of a dataset")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--truth")
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("diagnose", help="R-hat across checkpointed chains")
    d.add_argument("--checkpoints", nargs="*", default=[])
    d.add_argument("--run-dir", help="directory holding chain_*.sgpb files")
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    s.add_argument("kind", choices=["moving-ball", "glyphs", "correlated-gp"])
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            report = cmd_train(args.config, args.data, args.out, args.seed, args.chains)
            sys.stdout.write(format_report(report))
        elif args.command == "generate":
            cmd_generate(args.checkpoint, args.out, [float(v) for v in args.x.split(",")], args.seed)
        elif args.command == "impute":
            report = cmd_impute(args.checkpoint, args.data, args.out, args.truth, args.seed)
            if report:
                sys.stdout.write(format_report(report))
        elif args.command == "diagnose":
            paths = list(args.checkpoints)
            if args.run_dir:
                paths += sorted(glob.glob(os.path.join(args.run_dir, "chain_*.sgpb")))
            sys.stdout.write(format_report(cmd_diagnose(paths, args.data, args.out, args.seed)))
        elif args.command == "synth":
            cmd_synth(args.kind, args.out, args.n, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MissingCheckpoint, ChainCountTooSmall, OSError, SgpbaeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
