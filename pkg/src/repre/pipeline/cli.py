"""Command line: pretrain, probe, dump, gradcheck, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..decoder import Decoder
from ..encoder import Encoder
from .checkpoint import load_checkpoint, load_encoder
from .config import TrainConfig
from .data import load_image_dir, synthetic_shapes
from .train import pretrain, read_metrics

log = logging.getLogger("repre")

ABLATIONS = {
    "fusion-op": [("conv", {"fusion_operator": "conv"}),
                  ("transformer", {"fusion_operator": "transformer"})],
    "fusion-layers": [(f"conv{n}", {"fusion_layers": n}) for n in (1, 2, 4)],
    "taps": [("single", {"taps": 1}), ("multi", {"taps": 4})],
}


def random_encoder(config: TrainConfig) -> Encoder:
    """The encoder a fresh run with ``config`` would start from."""
    enc_seq = np.random.SeedSequence(config.seed).spawn(3)[0]
    return Encoder(config.encoder_config(), np.random.default_rng(enc_seq))


def probe_data(source: str, config: TrainConfig):
    """``(train, test)`` pairs from ``synthetic``, a dir with train/ and test/, or a flat labelled dir."""
    from .probe import split_dataset

    if source == "synthetic":
        images, labels = synthetic_shapes(config.dataset_size, config.dataset_seed, config.image_size,
                                          config.num_classes)
        return split_dataset(images, labels)
    root = Path(source)
    if (root / "train").is_dir() and (root / "test").is_dir():
        train = load_image_dir(root / "train", config.image_size)
        test = load_image_dir(root / "test", config.image_size)
    else:
        train, test = split_dataset(*load_image_dir(root, config.image_size))
    if (train[1] < 0).any() or (test[1] < 0).any():
        raise SystemExit(f"{source}: probe data needs class subdirectories for labels")
    return train, test


def smoothed(values: list[float], window: int) -> list[float]:
    out = []
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out.append(float(np.mean(values[lo:i + 1])))
    return out


def summarize_run(run_dir: Path, decoder_params: int, window: int = 50) -> dict:
    recs = read_metrics(run_dir / "metrics.jsonl")
    summary = {"steps": len(recs), "decoder_params": decoder_params}
    if recs:
        last = recs[-1]
        summary.update(param_ratio=last["param_ratio"], flop_ratio=last["flop_ratio"],
                       final_combined=smoothed([r["combined"] for r in recs], window)[-1],
                       final_l_contrast=smoothed([r["l_contrast"] for r in recs], window)[-1])
        if last["l_reconstruct"] is not None:
            summary["final_l_reconstruct"] = smoothed([r["l_reconstruct"] for r in recs], window)[-1]
            summary["final_psnr"] = smoothed([r["psnr"] for r in recs], window)[-1]
    return summary


def run_ablation(axis: str, base: TrainConfig, out_dir: Path, steps: int | None = None,
                 probe: bool = False) -> dict:
    """One pre-training run per setting on ``axis``; writes ``<out>/<label>/metrics.jsonl`` and ``summary.json``."""
    from .probe import linear_probe

    if axis not in ABLATIONS:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATIONS)}")
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for label, overrides in ABLATIONS[axis]:
        cfg = base.replace(out_dir=str(out_dir / label), reconstruction=True, **overrides)
        if steps is not None:
            cfg = cfg.replace(steps=steps)
        log.info("ablation %s: %s (%s)", axis, label, overrides)
        trainer = pretrain(cfg)
        entry = {"overrides": overrides,
                 **summarize_run(Path(cfg.out_dir), trainer.decoder.num_parameters())}
        if probe:
            entry["probe_accuracy"] = linear_probe(trainer.encoder, *probe_data("synthetic", cfg)).test_accuracy
        results[label] = entry
    summary = {"axis": axis, "runs": results}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def decoder_params(config: TrainConfig) -> int:
    """Decoder parameter count for ``config`` without training anything."""
    enc = Encoder(config.encoder_config(), np.random.default_rng(0))
    return Decoder.for_encoder(enc, config.decoder_config(), np.random.default_rng(0)).num_parameters()


# -- subcommands --------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    if args.out is not None:
        cfg = cfg.replace(out_dir=args.out)
    trainer = pretrain(cfg)
    print(json.dumps({"out_dir": cfg.out_dir, "steps": trainer.step}))
    return 0


def cmd_probe(args) -> int:
    from .probe import linear_probe

    encoder, cfg = load_encoder(args.checkpoint)
    train, test = probe_data(args.data, cfg)
    res = linear_probe(encoder, train, test, cfg.augmentation(), steps=args.steps)
    out = {"train_accuracy": res.train_accuracy, "test_accuracy": res.test_accuracy,
           "num_classes": res.num_classes, "encoder_sha256": res.fingerprint}
    if args.baseline:
        base = linear_probe(random_encoder(cfg), train, test, cfg.augmentation(), steps=args.steps)
        out["random_init_test_accuracy"] = base.test_accuracy
    print(json.dumps(out, indent=2))
    return 0


def cmd_dump(args) -> int:
    from .dump import dump_diagnostics

    trainer = load_checkpoint(args.checkpoint)
    if args.data in (None, "synthetic"):
        images, labels = synthetic_shapes(trainer.config.dataset_size, trainer.config.dataset_seed,
                                          trainer.config.image_size, trainer.config.num_classes)
    else:
        images, labels = load_image_dir(args.data, trainer.config.image_size)
    written = dump_diagnostics(trainer, args.out, images, labels, num_examples=args.examples)
    print(json.dumps({k: len(v) for k, v in written.items()}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(instances=args.instances, eps=args.eps, tol=args.tol, seed=args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:24s} n={r.instances:<3d} max_rel_err={r.max_rel_error:.2e}  {r.seconds:.2f}s")
        for f in r.failures[:3]:
            print(f"      {f}")
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} cases passed")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    base = TrainConfig.load(args.config) if args.config else TrainConfig()
    summary = run_ablation(args.axis, base, Path(args.out), args.steps, probe=args.probe)
    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repre", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="run pre-training from a config file")
    s.add_argument("--config", help="key = value config file (defaults if omitted)")
    s.add_argument("--steps", type=int, help="override the step count")
    s.add_argument("--out", help="override the output directory")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("probe", help="linear probe on a frozen checkpoint encoder")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="'synthetic' or an image directory")
    s.add_argument("--steps", type=int, default=300, help="probe optimisation steps")
    s.add_argument("--baseline", action="store_true", help="also probe a randomly initialised encoder")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("dump", help="attention maps, reconstructions and embeddings")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="image directory (default: the checkpoint's synthetic set)")
    s.add_argument("--examples", type=int, default=8)
    s.set_defaults(func=cmd_dump)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="decoder / tap ablations")
    s.add_argument("--axis", required=True, choices=sorted(ABLATIONS))
    s.add_argument("--config", help="base config file")
    s.add_argument("--steps", type=int, help="steps per run (default: the config's)")
    s.add_argument("--out", default="runs/ablate")
    s.add_argument("--probe", action="store_true", help="add a synthetic linear probe per run")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
