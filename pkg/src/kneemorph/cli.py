"""Command-line entry point.

Verbs: phantom-gen, pretrain-supervisor, train, synthesize, evaluate, sweep.
Exit codes: 0 success, 1 config or missing prerequisite, 2 I/O failure,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import imageio
from .autodiff import NonFiniteError
from .config import ConfigError, RunConfig, load_config, write_resolved
from .metrics import evaluate_run, write_records, write_summary
from .morphing import write_flow
from .phantom import PairDataset, generate_pair_dataset, severity_class_dataset
from .supervision import ConvergenceError, pretrain_supervisor
from .training import (
    NumericalError, average_flow, fit, infer_flows, load_state, load_supervisor, save_state, save_supervisor,
    synthesize_sequence,
)

log = logging.getLogger("kneemorph")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class MissingPrerequisite(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers

def _require(path: Path, what: str) -> Path:
    if not Path(path).is_file():
        raise MissingPrerequisite(f"missing {what}: {path}")
    return Path(path)


def _manifest_path(cfg: RunConfig) -> Path:
    return _require(cfg.path("manifest", "manifest.tsv"), "pair manifest")


def _load_pairs(cfg: RunConfig) -> tuple[list, PairDataset]:
    pairs = imageio.read_manifest(_manifest_path(cfg))
    size = (cfg.size, cfg.size)
    sources = np.stack([imageio.read_image(s, size) for s, _ in pairs])
    targets = np.stack([imageio.read_image(t, size) for _, t in pairs])
    ds = PairDataset(sources, targets, {}, np.zeros(len(pairs), dtype=np.int64), cfg.phantom_params())
    return pairs, ds


def _supervisor(cfg: RunConfig):
    return load_supervisor(_require(cfg.path("supervisor", "supervisor.dmmc"), "supervisor checkpoint"))


def _model(cfg: RunConfig):
    sup = _supervisor(cfg)
    return load_state(_require(cfg.path("model", "model.dmmc"), "model checkpoint"), sup)


def _eta_tag(eta: float) -> str:
    return f"{eta:.2f}"


def read_truth_manifest(path) -> dict[tuple[str, float], Path]:
    """Lines of ``source<TAB>eta<TAB>truth image`` keyed by (resolved source, eta)."""
    path = Path(path)
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'source<TAB>eta<TAB>truth'")
        src, eta, truth = parts
        resolve = (lambda p: Path(p) if Path(p).is_absolute() else (path.parent / p).resolve())
        out[(str(resolve(src)), round(float(eta), 9))] = resolve(truth)
    return out


# ----------------------------------------------------------------- commands

def cmd_phantom_gen(cfg: RunConfig) -> int:
    out = cfg.out_dir()
    ds = generate_pair_dataset(cfg.n_pairs, (cfg.size, cfg.size), seed=cfg.seed, base=cfg.phantom_params())
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    ext = cfg.image_format
    pairs, truth_lines = [], []
    for i in range(len(ds)):
        src = img_dir / f"pair_{i:03d}_source.{ext}"
        tgt = img_dir / f"pair_{i:03d}_target.{ext}"
        imageio.write_image(src, ds.sources[i])
        imageio.write_image(tgt, ds.targets[i])
        pairs.append((src, tgt))
        for s, stack in sorted(ds.truth.items()):
            tp = img_dir / f"pair_{i:03d}_s{_eta_tag(s)}.{ext}"
            imageio.write_image(tp, stack[i])
            truth_lines.append(f"{src.relative_to(out)}\t{s!r}\t{tp.relative_to(out)}")
    imageio.write_manifest(out / "manifest.tsv", pairs)
    (out / "truth.tsv").write_text("\n".join(truth_lines) + "\n")
    log.info("wrote %d pairs to %s", len(ds), out)
    return EXIT_OK


def cmd_pretrain_supervisor(cfg: RunConfig) -> int:
    base = cfg.phantom_params()
    n = cfg.sup_per_class
    kl2 = severity_class_dataset(n, *cfg.sup_kl2_range, seed=2 * cfg.seed, base=base)
    kl3 = severity_class_dataset(n, *cfg.sup_kl3_range, seed=2 * cfg.seed + 1, base=base)
    net, acc = pretrain_supervisor(kl2, kl3, cfg.supervisor_config())
    path = cfg.path("supervisor", "supervisor.dmmc")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_supervisor(net, path, acc)
    log.info("supervisor validation accuracy %.3f -> %s", acc, path)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    sup = _supervisor(cfg)
    _, ds = _load_pairs(cfg)
    resume = _require(Path(cfg.resume), "resume checkpoint") if cfg.resume else None
    result = fit(ds, cfg.train_config(), sup, out_dir=cfg.out_dir(), resume=resume)
    state = result.state
    save_state(state, cfg.path("model", "model.dmmc"))
    hist = state.flow_history
    if hist:
        write_flow(cfg.out_dir() / "flow_mean.dmmf", average_flow(hist, min(len(hist), state.config.flow_window)))
    log.info("trained %d steps", state.step)
    return EXIT_OK


def _source_list(cfg: RunConfig) -> list[Path]:
    if cfg.sources:
        listing = _require(Path(cfg.sources), "source list")
        lines = [ln.strip() for ln in listing.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
        return [p if p.is_absolute() else (listing.parent / p).resolve() for p in map(Path, lines)]
    return [s for s, _ in imageio.read_manifest(_manifest_path(cfg))]


def cmd_synthesize(cfg: RunConfig) -> int:
    state = _model(cfg)
    size = (cfg.size, cfg.size)
    frame_dir = cfg.out_dir() / ("frames" if cfg.synth_mode == "paired" else "frames_mean_flow")
    frame_dir.mkdir(parents=True, exist_ok=True)
    if cfg.synth_mode == "paired":
        pairs, ds = _load_pairs(cfg)
        paths = [s for s, _ in pairs]
        flows = infer_flows(state, ds.sources, ds.targets)
        sources = ds.sources
        flow_dir = cfg.out_dir() / "flows"
        flow_dir.mkdir(exist_ok=True)
        for i, fl in enumerate(flows):
            write_flow(flow_dir / f"{i:03d}_{paths[i].stem}.dmmf", fl)
    else:
        hist = state.flow_history
        if not hist:
            raise MissingPrerequisite("model checkpoint holds no flow history for source-only synthesis")
        mean = average_flow(hist, min(len(hist), state.config.flow_window))
        paths = _source_list(cfg)
        sources = np.stack([imageio.read_image(p, size) for p in paths])
        flows = [mean] * len(sources)
    for i, (src_path, src, fl) in enumerate(zip(paths, sources, flows)):
        ext = src_path.suffix.lower()
        for eta, frame in zip(cfg.etas, synthesize_sequence(src, fl, cfg.etas)):
            imageio.write_image(frame_dir / f"{i:03d}_{src_path.stem}_eta{_eta_tag(eta)}{ext}", frame)
    log.info("wrote %d frames per source for %d sources", len(cfg.etas), len(sources))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    state = _model(cfg)
    pairs, ds = _load_pairs(cfg)
    truth_map = read_truth_manifest(_require(cfg.path("truth_manifest", "truth.tsv"), "ground-truth manifest"))
    etas = [e for e in cfg.etas if 0.0 < e < 1.0]
    size = (cfg.size, cfg.size)
    truth = {}
    for eta in etas:
        frames = []
        for src, _ in pairs:
            key = (str(Path(src).resolve()), round(float(eta), 9))
            if key not in truth_map:
                raise MissingPrerequisite(f"no ground truth for {src} at eta={eta}")
            frames.append(imageio.read_image(truth_map[key], size))
        truth[eta] = np.stack(frames)
    if cfg.synth_mode == "paired":
        flows = infer_flows(state, ds.sources, ds.targets)
    else:
        flows = average_flow(state.flow_history, min(len(state.flow_history), state.config.flow_window))
    records, summary = evaluate_run(flows, ds.sources, truth, etas=etas, max_i=cfg.max_i)
    write_records(cfg.out_dir() / "eval.csv", records)
    write_summary(cfg.out_dir() / "eval_summary.csv", summary)
    log.info("wrote %d evaluation records", len(records))
    return EXIT_OK


def sweep_cell_dir(out: Path, lambda_mph: float, lambda_sup: float) -> Path:
    return out / "sweep" / f"mph{lambda_mph!r}_sup{lambda_sup!r}"


def cmd_sweep(cfg: RunConfig) -> int:
    sup = _supervisor(cfg)
    _, ds = _load_pairs(cfg)
    rows = []
    for l1 in cfg.sweep_lambda_mph:
        for l2 in cfg.sweep_lambda_sup:
            tc = cfg.train_config(lambda_mph=float(l1), lambda_sup=float(l2), steps=cfg.sweep_steps, epochs=None,
                                  checkpoint_every=0)
            cell = sweep_cell_dir(cfg.out_dir(), l1, l2)
            if (cell / "train_log.csv").exists():
                (cell / "train_log.csv").unlink()
            result = fit(ds, tc, sup, out_dir=cell)
            tail = [r[4] for r in result.log[-cfg.sweep_tail:]]
            final = float(np.mean(tail))
            rows.append((float(l1), float(l2), final, -math.log(final) if final > 0 else math.inf))
            log.info("cell (%g, %g): final l_sup %.5f", l1, l2, final)
    with open(cfg.out_dir() / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda_mph", "lambda_sup", "final_l_sup", "neg_log_l_sup"])
        for r in rows:
            w.writerow([repr(v) for v in r])
    return EXIT_OK


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "pretrain-supervisor": cmd_pretrain_supervisor,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kneemorph", description="Phantom-scale knee X-ray morphing model.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.out is not None:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except FileNotFoundError as exc:
        print(f"error: config file not found: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        write_resolved(cfg, cfg.out_dir())
        return COMMANDS[args.command](cfg)
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, NonFiniteError, ConvergenceError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed manifests, images or checkpoints
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
