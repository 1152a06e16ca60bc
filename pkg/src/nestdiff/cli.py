"""Command-line entry point: ``nestdiff <subcommand> [flags]``.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.
Every random draw descends from ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

log = logging.getLogger("nestdiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _gamma(text: str) -> float:
    try:
        g = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"gamma must be a number or 'inf', got {text!r}") from None
    if g < 0:
        raise argparse.ArgumentTypeError("gamma must be >= 0")
    return g


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed for every random draw")
    common.add_argument("--threads", type=int, default=1, help="worker threads (1 = deterministic)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="nestdiff", description="Nested diffusion on procedural images.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write a procedural dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=4096)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--split", default="train")

    s = sub.add_parser("fit-encoder", parents=[common], help="fit the patch-PCA encoder")
    s.add_argument("--data", required=True)
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--d", type=int, default=32)
    s.add_argument("--kind", choices=["pca", "random"], default="pca")
    s.add_argument("--shape-schedule", choices=["linear", "dyadic"], default="linear")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="train a nested model")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="JSON config; flags below override it")
    s.add_argument("--levels", type=int)
    s.add_argument("--reuse", help="checkpoint of an (L-1)-level model whose upper levels are kept")
    s.add_argument("--encoder", help="pre-fitted encoder checkpoint")
    s.add_argument("--steps", type=int)
    s.add_argument("--level-steps", type=_floats)
    s.add_argument("--sigma", type=_floats, help="sigma_2..sigma_L")
    s.add_argument("--cfg", type=_floats, help="guidance weights, level 1..L (one value = all levels)")
    s.add_argument("--out", required=True, help="run directory")

    s = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--gamma", type=_gamma)
    s.add_argument("--cfg", type=_floats, help="guidance weights, level 1..L (one value = all levels)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("resample", parents=[common], help="keep upper latents, resample levels k..1")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--source", required=True, help="dataset directory or a traces file")
    s.add_argument("--level", type=int, required=True, help="k: resample levels k..1")
    s.add_argument("--n", type=int, default=8, help="number of sources taken from the front")
    s.add_argument("--gamma", type=_gamma)
    s.add_argument("--cfg", type=_floats)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", parents=[common], help="toy-FD, KNN, resampling distances, flops")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="held-out dataset directory")
    s.add_argument("--n", type=int, default=512)
    s.add_argument("--n-sources", type=int, default=64)
    s.add_argument("--gamma", type=_gamma)
    s.add_argument("--cfg", type=_floats)
    s.add_argument("--runs", default="runs", help="directory holding <run-id>/metrics.json")
    s.add_argument("--run-id")
    s.add_argument("--summary", help="summary CSV (default <runs>/summary.csv)")

    s = sub.add_parser("oracle-check", parents=[common], help="compare a denoiser with the closed-form oracle")
    s.add_argument("--data", required=True)
    s.add_argument("--level", type=int, default=1)
    s.add_argument("--grid", type=int, default=200, help="number of (z_t, t) points")
    s.add_argument("--ckpt", help="trained bundle; without it one is trained on --data")
    s.add_argument("--levels", type=int, default=1, help="levels of the model trained when --ckpt is absent")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--out", required=True)

    s = sub.add_parser("elbo", parents=[common], help="Monte-Carlo per-level bound terms for one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True, help="dataset directory")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--mc", type=int, default=8)
    s.add_argument("--out", help="JSON output (stdout when omitted)")
    return p


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _rng(seed: int, *stream: int):
    return np.random.default_rng([seed, *stream])


def _weights(arg, L: int):
    if arg is None:
        return None
    if len(arg) == 1:
        return arg * L
    if len(arg) != L:
        raise ValueError(f"--cfg needs 1 or {L} values, got {len(arg)}")
    return arg


def _load_data(path):
    from .data import load_dataset

    return load_dataset(path)


def cmd_gen_data(a):
    from .data import DatasetSpec, gen_dataset

    spec = DatasetSpec(n_images=a.n, size=a.size, seed=a.seed, split=a.split)
    data = gen_dataset(spec, a.out)
    print(f"wrote {len(data)} images to {a.out}")


def cmd_fit_encoder(a):
    from .checkpoint import save_encoder
    from .encoder import fit_encoder

    enc = fit_encoder(_load_data(a.data), a.levels, a.d, seed=a.seed, kind=a.kind, shape_schedule=a.shape_schedule)
    save_encoder(enc, a.out, seed=a.seed)
    print(f"encoder with scales {enc.patch_scales} written to {a.out}")


def resolve_train_config(a):
    """Config file first, then flag overrides; returns a validated NestedConfig."""
    from .config import NestedConfig

    raw = json.loads(Path(a.config).read_text()) if a.config else {}
    if a.levels is not None:
        raw["L"] = a.levels
    raw["seed"] = a.seed
    if a.steps is not None:
        raw["steps"] = a.steps
    if a.level_steps is not None:
        raw["level_steps"] = [int(v) for v in a.level_steps]
    L = raw.get("L", NestedConfig.L)
    if a.sigma is not None:
        raw["sigma"] = a.sigma * (L - 1) if len(a.sigma) == 1 else a.sigma
    if a.cfg is not None:
        raw["cfg_weights"] = _weights(a.cfg, L)
    return NestedConfig.from_dict(raw)


def cmd_train(a):
    from .checkpoint import load_encoder, save_bundle
    from .plotting import plot_losses
    from .trainer import train_nested

    cfg = resolve_train_config(a)
    data = _load_data(a.data)
    encoder = load_encoder(a.encoder) if a.encoder else None
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    stamps = []

    def on_step(step, level, loss):
        if step % 100 == 0:
            stamps.append((level, step, time.perf_counter()))

    t0 = time.perf_counter()
    bundle = train_nested(cfg, data, reuse=a.reuse, encoder=encoder, threads=a.threads, on_step=on_step)
    # the donor may have replaced sigma values
    cfg = bundle.config
    (out / "config.json").write_text(cfg.to_json())
    save_bundle(bundle, out / "model.ndm", seed=a.seed)
    with open(out / "metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "level", "loss"])
        wr.writerows((s, l, repr(v)) for s, l, v in bundle.metrics)
    # wall-clock kept apart so metrics.csv stays reproducible
    with open(out / "timing.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["level", "step", "wall_clock"])
        wr.writerows((l, s, f"{t - t0:.3f}") for l, s, t in sorted(stamps))
    if bundle.metrics:
        plot_losses(bundle.metrics, out / "loss.png")
    print(f"trained L={cfg.L} in {time.perf_counter() - t0:.1f}s -> {out / 'model.ndm'}")


def cmd_sample(a):
    from .checkpoint import load_bundle, save_traces
    from .plotting import save_grid
    from .sampler import images_of, sample_hierarchy

    bundle = load_bundle(a.ckpt)
    weights = _weights(a.cfg, bundle.L)
    traces = sample_hierarchy(bundle, a.n, _rng(a.seed, 2), gamma=a.gamma, cfg_weights=weights)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    imgs = images_of(traces)
    save_grid(imgs, out / "grid.png")
    save_traces(traces, out / "traces.ndm")
    (out / "samples.f32").write_bytes(imgs.astype("<f4").tobytes())
    _write_json(out / "run.json", {"command": "sample", "ckpt": str(a.ckpt), "n": a.n, "seed": a.seed,
                                   "gamma": _enc(traces[0].gamma), "cfg_weights": [traces[0].weights[l] for l in
                                                                                   range(1, bundle.L + 1)],
                                   "config": bundle.config.resolved()})
    print(f"{a.n} samples -> {out}")


def _enc(x):
    return "inf" if x is not None and np.isinf(x) else x


def cmd_resample(a):
    from .checkpoint import load_bundle, load_traces, save_traces
    from .plotting import plot_resample_rows, save_grid
    from .sampler import images_of, resample_from_level

    bundle = load_bundle(a.ckpt)
    src = Path(a.source)
    if src.is_dir():
        source = _load_data(src).images[: a.n]
        src_images = source
    else:
        source = load_traces(src)[: a.n]
        src_images = images_of(source)
    traces = resample_from_level(bundle, source, a.level, _rng(a.seed, 3), gamma=a.gamma,
                                 cfg_weights=_weights(a.cfg, bundle.L))
    traces = traces if isinstance(traces, list) else [traces]
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    imgs = images_of(traces)
    save_grid(np.concatenate([src_images, imgs]), out / "grid.png", ncols=len(imgs))
    plot_resample_rows(src_images, {a.level: imgs}, out / "resample.png")
    save_traces(traces, out / "traces.ndm")
    _write_json(out / "run.json", {"command": "resample", "ckpt": str(a.ckpt), "source": str(a.source),
                                   "level": a.level, "n": len(imgs), "seed": a.seed,
                                   "config": bundle.config.resolved()})
    what = f"levels {a.level}..1" if a.level > 0 else "no levels (replay)"
    print(f"resampled {what} of {len(imgs)} sources -> {out}")


def cmd_eval(a):
    from .checkpoint import load_bundle
    from .evaluation import eval_run, write_record
    from .plotting import plot_resample_distance, save_grid

    bundle = load_bundle(a.ckpt)
    data = _load_data(a.data)
    run_id = a.run_id or Path(a.ckpt).resolve().parent.name
    record, art = eval_run(bundle, data, a.n, _rng(a.seed, 4), run_id=run_id, n_sources=a.n_sources,
                           gamma=a.gamma, cfg_weights=_weights(a.cfg, bundle.L))
    summary = Path(a.summary) if a.summary else Path(a.runs) / "summary.csv"
    path = write_record(record, a.runs, summary)
    save_grid(art["samples"][:64], path.parent / "samples.png")
    plot_resample_distance(record.resample_distance, path.parent / "resample_distance.png")
    print(json.dumps(record.summary_row(), sort_keys=True))


def oracle_grid(bundle, data, level: int, n_points: int, rng):
    """Rows of (point, item, t, relative error) comparing net and oracle noise estimates."""
    from .denoiser import predict_noise
    from .hierarchy import build_latents, inject_noise
    from .oracle import OracleIndex, oracle_eps

    cfg, s = bundle.config, bundle.schedule
    if not 1 <= level <= cfg.L:
        raise ValueError(f"level {level} out of range 1..{cfg.L}")
    lat = build_latents(bundle.encoder, data.images, cfg)
    idx = OracleIndex(lat, {m: cfg.sigma_of(m) for m in range(2, cfg.L + 1)}, s)
    ts = np.linspace(1, s.T, n_points).round().astype(int)
    rows = []
    for p, t in enumerate(ts):
        i = int(rng.integers(len(data)))
        zt = s.alpha[t] * lat[level][i] + s.beta[t] * rng.standard_normal(lat[level].shape[1])
        cond = None
        if level < cfg.L:
            cond = np.concatenate([inject_noise(lat[m][i], cfg.sigma_of(m), rng) for m in range(cfg.L, level, -1)])
        ref = oracle_eps(idx, level, zt, int(t), cond)
        est = predict_noise(bundle.nets[level], zt, int(t), cond, s.T)
        rows.append((p, i, int(t), float(np.linalg.norm(est - ref) / np.linalg.norm(ref))))
    return rows


def cmd_oracle_check(a):
    from .checkpoint import load_bundle
    from .config import NestedConfig
    from .plotting import plot_oracle_errors
    from .trainer import train_nested

    data = _load_data(a.data)
    if a.ckpt:
        bundle = load_bundle(a.ckpt)
    else:
        L = a.levels
        cfg = NestedConfig(L=L, d=min(32, len(data)), steps=a.steps, seed=a.seed, image_size=data.size,
                           batch_size=min(128, len(data)))
        bundle = train_nested(cfg, data, threads=a.threads)
    rows = oracle_grid(bundle, data, a.level, a.grid, _rng(a.seed, 5))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "oracle_errors.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["point", "item", "t", "relative_error"])
        wr.writerows((p, i, t, f"{e:.10g}") for p, i, t, e in rows)
    errs = np.array([r[3] for r in rows])
    plot_oracle_errors([r[2] for r in rows], errs, out / "oracle_errors.png")
    _write_json(out / "run.json", {"command": "oracle-check", "data": str(a.data), "level": a.level,
                                   "grid": a.grid, "seed": a.seed, "median_relative_error": float(np.median(errs)),
                                   "config": bundle.config.resolved()})
    print(f"median relative error {np.median(errs):.4f} over {len(rows)} points")


def cmd_elbo(a):
    from .checkpoint import load_bundle
    from .trainer import estimate_elbo

    bundle = load_bundle(a.ckpt)
    data = _load_data(a.image)
    if not 0 <= a.index < len(data):
        raise ValueError(f"--index {a.index} outside 0..{len(data) - 1}")
    est = estimate_elbo(bundle, data.images[a.index], a.mc, _rng(a.seed, 6))
    doc = {
        "index": a.index,
        "n_mc": a.mc,
        "levels": {str(l): v for l, v in est.levels.items()},
        "diffusion": {str(l): v for l, v in est.diffusion.items()},
        "prior": {str(l): v for l, v in est.prior.items()},
        "total_nats": est.total,
        "bits_per_dim": est.total / (np.log(2) * data.images[a.index].size),
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if a.out:
        Path(a.out).parent.mkdir(parents=True, exist_ok=True)
        Path(a.out).write_text(text)
    else:
        sys.stdout.write(text)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit-encoder": cmd_fit_encoder,
    "train": cmd_train,
    "sample": cmd_sample,
    "resample": cmd_resample,
    "eval": cmd_eval,
    "oracle-check": cmd_oracle_check,
    "elbo": cmd_elbo,
}


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if a.threads < 1:
        sys.stderr.write("nestdiff: error: --threads must be >= 1\n")
        return 1
    try:
        with threadpool_limits(limits=a.threads):
            COMMANDS[a.command](a)
    except (ValueError, OSError, KeyError) as exc:
        sys.stderr.write(f"nestdiff {a.command}: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
