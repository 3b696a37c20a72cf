"""Command-line driver: train / attack / eval / sweep / transfer / export-attn."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .attacks import AttackConfig, attack_batch
from .harness import (Dataset, evaluate_robust, export_attention_maps, load_dataset, make_shapes_dataset,
                      neighborhood_vs_corners, save_dataset, sweep, train_model, transferability_sweep,
                      verify_examples)
from .models import PatchGrid, TinyCNNConfig, TinyViTConfig, load_checkpoint

log = logging.getLogger("patchfool")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

_ATTACK = AttackConfig()
DEFAULTS = {
    "model": "vit", "epochs": 20, "lr": 1e-3, "batch_size": 64,
    "variant": "vanilla", "select": "attention", "patches": 1, "layer": _ATTACK.layer_l,
    "alpha": _ATTACK.alpha, "eta": _ATTACK.eta0, "decay": _ATTACK.decay, "iters": _ATTACK.iters,
    "k": None, "pr": None, "epsilon": None, "step_size": None, "mask_per_pixel": False,
    "limit": 500, "subset_seed": 0, "attack_batch": 100, "workers": 1,
    "source": 28, "index": 0, "query": 0,
}

# sweep axes and the element type of their comma-separated lists
SWEEP_AXES = {"patches": int, "epsilon": float, "pr": float, "k": int, "layer": int, "alpha": float,
              "select": str, "variant": str, "iters": int}
_SWEEP_FIELD = {"select": "selection"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _default(name):
    v = DEFAULTS.get(name)
    return "none" if v is None else v


def _add(p, flag, name, help_, **kw):
    p.add_argument(flag, dest=name, default=None, help=f"{help_} (default: {_default(name)})", **kw)


def _common(p, model_ckpt=True):
    p.add_argument("--config", default=None, help="JSON file with flag values; explicit flags win")
    if model_ckpt:
        p.add_argument("--model-ckpt", dest="model_ckpt", default=None, help="PFML checkpoint (required)")
    p.add_argument("--data", default=None,
                   help="PFDS file, or shapes:COUNT[:SEED] for the synthetic generator (required)")
    p.add_argument("--seed", type=int, default=None, help="run seed (default: $PF_SEED, else 0)")
    p.add_argument("--out", default=None, help="output path (required)")


def _attack_flags(p, sweepable=False):
    lst = (lambda t: str) if sweepable else (lambda t: t)
    _add(p, "--variant", "variant", "vanilla|sparse|mild-l2|mild-linf|pgd", type=lst(str))
    _add(p, "--select", "select", "patch selection: attention|saliency|random", type=lst(str))
    _add(p, "--patches", "patches", "number of perturbed patches", type=lst(int))
    _add(p, "--layer", "layer", "layer l for attention selection and loss (1-based)", type=lst(int))
    _add(p, "--alpha", "alpha", "attention-loss weight", type=lst(float))
    _add(p, "--eta", "eta", "initial Adam step size", type=float)
    _add(p, "--decay", "decay", "step-size decay every 10 iterations", type=float)
    _add(p, "--iters", "iters", "attack iterations", type=lst(int))
    _add(p, "--k", "k", "sparse budget in mask units", type=lst(int))
    _add(p, "--pr", "pr", "sparse budget as a fraction of all elements", type=lst(float))
    _add(p, "--epsilon", "epsilon", "norm bound for mild variants and pgd", type=lst(float))
    _add(p, "--step-size", "step_size", "pgd step size (default: 2.5*epsilon/iters)", type=float)
    p.add_argument("--mask-per-pixel", dest="mask_per_pixel", action="store_const", const=True, default=None,
                   help="sparse mask over pixels instead of elements (default: False)")
    _add(p, "--limit", "limit", "number of test images", type=int)
    _add(p, "--subset-seed", "subset_seed", "seed of the evaluation subset", type=int)
    _add(p, "--attack-batch", "attack_batch", "images attacked together", type=int)
    _add(p, "--workers", "workers", "concurrent attack batches", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchfool", description="Patch-wise adversarial attacks on tiny ViTs and CNNs.")
    parser.add_argument("--version", action="version", version=f"patchfool {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("train", help="train a desk-scale model", description="Train a ViT or CNN with Adam.")
    _common(p, model_ckpt=False)
    _add(p, "--model", "model", "vit|cnn", choices=["vit", "cnn"])
    _add(p, "--epochs", "epochs", "training epochs", type=int)
    _add(p, "--lr", "lr", "Adam learning rate", type=float)
    _add(p, "--batch-size", "batch_size", "minibatch size", type=int)

    p = sub.add_parser("attack", help="attack a test subset and save adversarial images",
                       description="Run one attack; writes manifest.json, report.json and adv/NNNN.pfds.")
    _common(p)
    _attack_flags(p)

    p = sub.add_parser("eval", help="robust accuracy without saving images",
                       description="Run one attack; writes manifest.json and report.json.")
    _common(p)
    _attack_flags(p)

    p = sub.add_parser("sweep", help="grid of robust accuracies",
                       description="Cartesian sweep over comma-separated axis lists "
                                   f"({', '.join(SWEEP_AXES)}); writes grid.csv and report.json.")
    _common(p)
    _attack_flags(p, sweepable=True)

    p = sub.add_parser("transfer", help="patch-wise transferability grid",
                       description="Attack the source patch, paste its perturbation on every patch slot.")
    _common(p)
    _attack_flags(p)
    _add(p, "--source", "source", "source patch index (1-based)", type=int)

    p = sub.add_parser("export-attn", help="export head-averaged attention maps",
                       description="Write per-layer attention of a query token as CSV and PFDS.")
    _common(p)
    _add(p, "--index", "index", "test image index", type=int)
    _add(p, "--query", "query", "query token (0 is the class token)", type=int)
    p.add_argument("--adv-variant", dest="adv_variant", default=None,
                   help="also export an attacked copy made with this variant and default settings (default: none)")
    return parser


# ---------------------------------------------------------------- option resolution

def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over built-in defaults."""
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    from_file = {}
    if args.config:
        from_file = {k.replace("-", "_"): v for k, v in json.loads(Path(args.config).read_text()).items()}
        unknown = sorted(set(from_file) - set(flags))
        if unknown:
            raise UsageError(f"unknown keys in config file: {', '.join(unknown)}")
    out = {}
    for name, value in flags.items():
        if value is not None:
            if name in from_file and from_file[name] != value:
                log.warning("flag --%s=%s overrides config value %r", name.replace("_", "-"), value,
                            from_file[name])
            out[name] = value
        elif name in from_file:
            out[name] = from_file[name]
        else:
            out[name] = DEFAULTS.get(name)
    if out.get("seed") is None:
        env = os.environ.get("PF_SEED")
        try:
            out["seed"] = int(env) if env else 0
        except ValueError:
            raise UsageError(f"PF_SEED must be an integer, got {env!r}") from None
    for req in ("data", "out") + (("model_ckpt",) if "model_ckpt" in flags else ()):
        if out.get(req) is None:
            raise UsageError(f"--{req.replace('_', '-')} is required")
    return out


def attack_config(opts: dict, **override) -> AttackConfig:
    o = {**opts, **override}
    try:
        return _build_attack_config(o)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _build_attack_config(o: dict) -> AttackConfig:
    return AttackConfig(variant=o["variant"], selection=o["select"], num_patches=o["patches"],
                        layer_l=o["layer"], alpha=o["alpha"], eta0=o["eta"], decay=o["decay"],
                        iters=o["iters"], k=o["k"], pr=o["pr"], epsilon=o["epsilon"],
                        step_size=o["step_size"], mask_per_pixel=bool(o["mask_per_pixel"]), seed=o["seed"])


def load_data(spec: str, split: str) -> Dataset:
    if spec.startswith("shapes:"):
        parts = spec.split(":")[1:]
        count = int(parts[0])
        seed = int(parts[1]) if len(parts) > 1 else 0
        return make_shapes_dataset(count, seed=seed, split=split)
    return load_dataset(spec, split=split)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest(out: Path, command: str, opts: dict, data: Dataset, ckpt=None, **extra) -> dict:
    man = {"tool": "patchfool", "version": __version__, "command": command,
           "config": {k: v for k, v in opts.items()},
           "seeds": {"seed": opts["seed"], "subset_seed": opts.get("subset_seed")},
           "dataset_sha256": data.digest(), "dataset_name": data.name,
           "model_sha256": _sha256(ckpt) if ckpt else None,
           "started_at": _now(), **extra}
    _write_json(out / "manifest.json", man)
    return man


def _finish(out: Path, man: dict, **extra) -> None:
    man.update(finished_at=_now(), **extra)
    _write_json(out / "manifest.json", man)


# ---------------------------------------------------------------- subcommands

def cmd_train(opts: dict) -> int:
    data = load_data(opts["data"], "train")
    grid = PatchGrid(*data.images.shape[1:3], data.images.shape[3], 4)
    cfg = (TinyViTConfig(grid=grid, num_classes=data.num_classes, seed=opts["seed"]) if opts["model"] == "vit"
           else TinyCNNConfig(grid=grid, num_classes=data.num_classes, seed=opts["seed"]))
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    train_model(cfg, data, epochs=opts["epochs"], lr=opts["lr"], seed=opts["seed"],
                batch_size=opts["batch_size"], out=out)
    print(_sha256(out))
    return EXIT_OK


def _eval_kw(opts):
    return dict(subset_seed=opts["subset_seed"], batch_size=opts["attack_batch"], workers=opts["workers"])


def cmd_attack(opts: dict, save_images: bool) -> int:
    model = load_checkpoint(opts["model_ckpt"])
    data = load_data(opts["data"], "test")
    cfg = attack_config(opts)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(out, "attack" if save_images else "eval", opts, data, opts["model_ckpt"],
                    attack_config=cfg.to_dict())
    limit = min(opts["limit"], len(data)) if opts["limit"] is not None else None
    rep = evaluate_robust(model, cfg, data, limit, **_eval_kw(opts))
    bad = verify_examples(rep, data, model.grid)
    if bad:
        raise RuntimeError(f"{bad} adversarial examples violate locality or domain")
    doc = {**rep.to_json(), "manifest": "manifest.json"}
    _write_json(out / "report.json", doc)
    if save_images:
        adv = out / "adv"
        adv.mkdir(exist_ok=True)
        for rec, ex in zip(rep.records, rep.examples):
            img = data.images[rec["index"]] if ex is None else ex.image
            save_dataset(Dataset(img[None], [rec["label"]], data.num_classes, "test", "adv"),
                         adv / f"{rec['index']:04d}.pfds")
    _finish(out, man)
    print(f"clean {rep.clean_accuracy:.4f} robust {rep.robust_accuracy:.4f}")
    return EXIT_OK


def _split_axis(name, raw):
    if raw is None:
        return None
    if isinstance(raw, list):
        return [SWEEP_AXES[name](v) for v in raw]
    return [SWEEP_AXES[name](v) for v in str(raw).split(",") if v != ""]


def cmd_sweep(opts: dict) -> int:
    model = load_checkpoint(opts["model_ckpt"])
    data = load_data(opts["data"], "test")
    axes, scalars = {}, {}
    for name in SWEEP_AXES:
        vals = _split_axis(name, opts.get(name))
        if vals is None:
            scalars[name] = DEFAULTS[name]
        elif len(vals) == 1:
            scalars[name] = vals[0]
        else:
            axes[name] = vals
    if not axes:
        raise UsageError("sweep needs at least one axis with two or more comma-separated values")
    base = attack_config({**opts, **scalars, **{k: v[0] for k, v in axes.items()}})
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(out, "sweep", opts, data, opts["model_ckpt"], axes=axes)
    limit = min(opts["limit"], len(data)) if opts["limit"] is not None else None
    field_axes = {_SWEEP_FIELD.get(k, k): v for k, v in axes.items()}
    grid = sweep(model, data, base, field_axes, limit, **_eval_kw(opts))
    (out / "grid.csv").write_text(grid.to_csv())
    cells = [{"coords": c, "report": r.to_json()} for c, r in grid.cells]
    _write_json(out / "report.json", {"axes": field_axes, "cells": cells, "dataset_sha256": grid.dataset_hash,
                                      "manifest": "manifest.json"})
    _finish(out, man)
    for row in grid.rows():
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_transfer(opts: dict) -> int:
    model = load_checkpoint(opts["model_ckpt"])
    data = load_data(opts["data"], "test")
    cfg = attack_config(opts)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(out, "transfer", opts, data, opts["model_ckpt"], attack_config=cfg.to_dict())
    limit = min(opts["limit"], len(data)) if opts["limit"] is not None else None
    tg = transferability_sweep(model, data, opts["source"], cfg, limit, batch_size=opts["attack_batch"])
    near, corners = neighborhood_vs_corners(tg)
    (out / "grid.csv").write_text(tg.to_csv())
    _write_json(out / "report.json", {"config": cfg.to_dict(), "source": tg.source,
                                      "clean_accuracy": tg.clean_accuracy,
                                      "robust_accuracy": tg.accuracy.tolist(),
                                      "neighborhood_mean": near, "corner_mean": corners,
                                      "manifest": "manifest.json"})
    _finish(out, man)
    print(f"neighborhood {near:.4f} corners {corners:.4f}")
    return EXIT_OK


def cmd_export_attn(opts: dict) -> int:
    model = load_checkpoint(opts["model_ckpt"])
    data = load_data(opts["data"], "test")
    i = opts["index"]
    if not 0 <= i < len(data):
        raise UsageError(f"--index {i} outside [0, {len(data)})")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest(out, "export-attn", opts, data, opts["model_ckpt"])
    export_attention_maps(model, data.images[i], opts["query"], out / "clean.csv")
    if opts["adv_variant"]:
        cfg = attack_config({**DEFAULTS, **opts, "variant": opts["adv_variant"]})
        ex = attack_batch(model, data.images[i], [data.labels[i]], cfg, image_ids=[i])[0]
        export_attention_maps(model, ex.image, opts["query"], out / "adv.csv")
    _finish(out, man)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        opts = resolve(args)
        if args.command == "train":
            return cmd_train(opts)
        if args.command in ("attack", "eval"):
            return cmd_attack(opts, save_images=args.command == "attack")
        if args.command == "sweep":
            return cmd_sweep(opts)
        if args.command == "transfer":
            return cmd_transfer(opts)
        return cmd_export_attn(opts)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.error("%s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
