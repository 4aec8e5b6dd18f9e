"""Command-line front end.

Exit codes: 0 success, 1 validation error (bad config, arguments or input
files), 2 runtime or numerical failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import imageio, plotting
from . import tensor as T
from .attack import NumericalError, compute_clean_reference, run_attack
from .config import ConfigError, RunConfig, parse_config
from .encoder import VisionEncoder, attention_scores, init_encoder, load_encoder
from .gradcheck import op_checks, pipeline_check
from .guidance import build_artifacts
from .harness import (bench_iteration_time, episode_specs, evaluate_suite, fit_policy,
                      fr_monotonicity, render_scene, training_scenes)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
REFERENCE_ITER_SECONDS = 0.06

TRACE_HEADER = ("iter", "loss", "seconds")


class UsageError(ValueError):
    pass


def _err(msg: str) -> None:
    print(f"advla: {msg}", file=sys.stderr)


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    return parse_config(p)


def _encoder(cfg: RunConfig, weights: str | None = None, dtype=None) -> VisionEncoder:
    dtype = cfg.np_dtype if dtype is None else dtype
    if weights is None:
        return init_encoder(cfg.encoder, dtype=dtype)
    p = Path(weights)
    if not p.is_file():
        raise UsageError(f"weights file not found: {p}")
    return load_encoder(p, dtype=dtype)


def _out_dir(arg: str | None, cfg: RunConfig) -> Path:
    d = Path(arg if arg is not None else cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _demo_scene(cfg: RunConfig, index: int = 0) -> np.ndarray:
    spec = episode_specs(cfg.task, index + 1, cfg.seed)[index]
    return render_scene(spec, cfg.encoder.image_h, cfg.encoder.image_w)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config)
    enc = _encoder(cfg, args.weights, dtype=np.float64)
    results = op_checks(cfg.seed)
    clean = _demo_scene(cfg)
    rng = np.random.default_rng(cfg.seed)
    image = np.clip(clean + rng.uniform(-8 / 255, 8 / 255, clean.shape), 0.01, 0.99)
    results.append(pipeline_check(enc, clean, image, n_pixels=args.pixels, seed=cfg.seed,
                                  loss_eps=cfg.attack.loss_eps))
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        _err(f"gradient check failed: {', '.join(failed)}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _load_config(args.config)
    if args.index < 0:
        raise UsageError("--index must be >= 0")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    imageio.save_image(out, _demo_scene(cfg, args.index))
    print(out)
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _load_config(args.config)
    enc = _encoder(cfg, args.weights)
    img_path = Path(args.image)
    if not img_path.is_file():
        raise UsageError(f"image not found: {img_path}")
    image = imageio.load_image(img_path)
    c = enc.config
    if image.shape != (3, c.image_h, c.image_w):
        raise UsageError(f"image is {image.shape[2]}x{image.shape[1]}, "
                         f"encoder expects {c.image_w}x{c.image_h}")
    out = _out_dir(args.out, cfg)
    acfg = cfg.attack
    res = run_attack(enc, image, acfg)

    # guidance maps from the clean frame are stored for every strategy so
    # `visualize` never needs the encoder
    _, rec = compute_clean_reference(enc, image)
    scores = attention_scores(rec, acfg.attention_block, acfg.aggregation)
    art = build_artifacts(scores, acfg.topk_ratio, c.grid_h, c.grid_w, c.patch_size,
                          with_weight_map=c.grid_h == c.grid_w)

    imageio.save_image(out / "adversarial.ppm", res.adversarial)
    arrays = {
        "perturbation": res.perturbation,
        "clean": image,
        "adversarial": res.adversarial,
        "scores": scores,
        "pixel_mask": art.pixel_mask,
        "epsilon": np.array(acfg.epsilon),
        "alpha": np.array(acfg.alpha),
        "iterations": np.array(float(acfg.iterations)),
        "topk_ratio": np.array(acfg.topk_ratio),
        "patch_size": np.array(float(c.patch_size)),
    }
    if art.weight_map is not None:
        arrays["weight_map"] = art.weight_map
    imageio.write_record(out / "perturbation.bin", arrays)
    secs = [0.0] + list(res.iteration_seconds)
    _write_rows(out / "trace.csv", TRACE_HEADER,
                [(i, repr(l), repr(s)) for i, (l, s) in enumerate(zip(res.loss_trace, secs))])
    print(f"strategy {acfg.strategy.value}  eps {acfg.epsilon * 255:.3g}/255  T {acfg.iterations}")
    print(f"loss {res.initial_loss:.6g} -> {res.final_loss:.6g}  "
          f"max|delta| {res.max_abs_perturbation:.6g}  patch fraction {res.modified_patch_fraction:.4g}")
    print(f"wrote {out}/adversarial.ppm, perturbation.bin, trace.csv")
    return EXIT_OK


def cmd_visualize(args) -> int:
    d = Path(args.result)
    rec_path = d / "perturbation.bin"
    if not rec_path.is_file():
        raise UsageError(f"missing {rec_path}")
    if not args.amp > 0:
        raise UsageError("--amp must be positive")
    try:
        rec = imageio.read_record(rec_path)
    except (ValueError, IndexError) as exc:
        raise UsageError(f"unreadable perturbation record: {exc}") from exc
    for key in ("perturbation", "clean", "adversarial", "pixel_mask"):
        if key not in rec:
            raise UsageError(f"perturbation record lacks {key!r}")
    out = Path(args.out) if args.out else d
    out.mkdir(parents=True, exist_ok=True)
    clean, delta = rec["clean"], rec["perturbation"]
    weight_map, mask = rec.get("weight_map"), rec["pixel_mask"]

    imageio.save_image(out / "perturbation_amp.ppm", plotting.amplify(delta, args.amp))
    imageio.save_image(out / "mask_overlay.ppm", plotting.overlay(clean, mask))
    imageio.write_pbm(out / "mask.pbm", mask)
    written = ["perturbation_amp.ppm", "mask_overlay.ppm", "mask.pbm"]
    if weight_map is not None:
        imageio.save_image(out / "attention_overlay.ppm", plotting.overlay(clean, weight_map))
        imageio.write_pgm(out / "attention.pgm", weight_map)
        written += ["attention_overlay.ppm", "attention.pgm"]
    plotting.attack_panel(clean, rec["adversarial"], delta, weight_map, mask, args.amp,
                          out / "panel.png")
    written.append("panel.png")
    trace = d / "trace.csv"
    if trace.is_file():
        with open(trace, newline="", encoding="utf-8") as fh:
            losses = [float(row["loss"]) for row in csv.DictReader(fh)]
        plotting.loss_trace(losses, out / "loss_trace.png")
        written.append("loss_trace.png")
    print(f"wrote {out}/" + ", ".join(written))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    enc = _encoder(cfg, args.weights)
    out = _out_dir(args.out, cfg)
    suite = cfg.suite
    if args.trials is not None:
        if args.trials < 1:
            raise UsageError("--trials must be >= 1")
        suite = replace(suite, trials=args.trials)
    policy = fit_policy(enc, training_scenes(cfg.task, cfg.seed), cfg.task.ridge)

    def progress(row):
        print(f"{row.condition:<7} eps {row.epsilon * 255:5.2f}/255  T {row.iters:<3} "
              f"SR {row.sr:.3f}  FR {row.fr:.3f}", flush=True)

    table = evaluate_suite(enc, policy, suite.conditions(), suite.trials, cfg.task, cfg.attack,
                           seed=cfg.seed, progress=progress, workers=args.threads)
    table.write_csv(out / "metrics.csv")
    plotting.fr_vs_epsilon(table, out / "fr_vs_epsilon.png")
    if len(suite.iterations) > 1:
        plotting.fr_vs_iterations(table, out / "fr_vs_iterations.png")
    for name in suite.strategies:
        for msg in fr_monotonicity(table, name):
            print(f"note: {msg}", file=sys.stderr)
    clean = [r for r in table.rows if r.condition == "CLEAN"]
    if clean and clean[0].sr < 0.9:
        print(f"note: clean success rate {clean[0].sr:.3f} is below 0.9", file=sys.stderr)
    print(f"wrote {out}/metrics.csv")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    if args.repeats < 10:
        raise UsageError("--repeats must be >= 10")
    enc = _encoder(cfg, args.weights)
    acfg = cfg.attack if args.iterations is None else replace(cfg.attack, iterations=args.iterations)
    if acfg.iterations < 1:
        raise UsageError("bench needs at least one PGD iteration")
    out = _out_dir(args.out, cfg)
    rep = bench_iteration_time(enc, acfg, args.repeats, image=_demo_scene(cfg))
    (out / "bench.csv").write_text(rep.to_csv(), encoding="utf-8", newline="")
    plotting.bench_histogram(rep.iteration_seconds, out / "bench_hist.png", REFERENCE_ITER_SECONDS)
    print(f"{args.repeats} repeats x {acfg.iterations} iterations ({acfg.strategy.value})")
    print(f"per-iteration seconds: mean {rep.mean:.5f}  median {rep.median:.5f}  "
          f"stdev {rep.stdev:.5f}")
    print(f"median attack seconds: {rep.median_total:.5f}")
    print(f"reference: {REFERENCE_ITER_SECONDS} s/iteration reported for the full-size model on a GPU "
          "(context only)")
    print(f"wrote {out}/bench.csv, bench_hist.png")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advla", description="Feature-space PGD attacks on a ViT encoder.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="JSON run configuration")
        sp.add_argument("--weights", help="encoder weight file (default: initialise from config)")

    sp = sub.add_parser("gradcheck", help="finite-difference check of ops and the attack gradient")
    common(sp)
    sp.add_argument("--pixels", type=int, default=100, help="pixels sampled for the pipeline check")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("attack", help="attack one P6 image")
    common(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", help="output directory (default: config output_dir)")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("eval", help="closed-loop evaluation suite")
    common(sp)
    sp.add_argument("--out")
    sp.add_argument("--threads", type=int, default=1, help="worker processes for episodes")
    sp.add_argument("--trials", type=int, help="override harness.trials")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="time PGD iterations")
    common(sp)
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--iterations", type=int, help="override attack.iterations")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("visualize", help="render attack results")
    sp.add_argument("--result", required=True, help="directory written by `attack`")
    sp.add_argument("--amp", type=float, default=8.0, help="display amplification of the perturbation")
    sp.add_argument("--out", help="output directory (default: the result directory)")
    sp.set_defaults(func=cmd_visualize)

    sp = sub.add_parser("render", help="write a task scene as a P6 image")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--index", type=int, default=0, help="episode index of the evaluation scenes")
    sp.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    except NumericalError as exc:
        _err(f"numerical error: {exc}")
        return EXIT_RUNTIME
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
