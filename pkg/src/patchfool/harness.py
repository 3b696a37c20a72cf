"""Datasets, toy training, robust-accuracy evaluation, sweeps and exports."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AdversarialExample, AttackConfig, attack_batch, locality_violations
from .models import Model, build_model, forward_with_attention, patchify, save_checkpoint, unpatchify
from .tensor import AdamState, adam_step

log = logging.getLogger(__name__)

PFDS_MAGIC = b"PFDS"
PFDS_VERSION = 1
_PFDS_HEADER = struct.Struct("<4sIIIIII")


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "test"
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x H x W x C, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split, self.name)

    def to_bytes(self) -> bytes:
        n, h, w, c = self.images.shape
        return (_PFDS_HEADER.pack(PFDS_MAGIC, PFDS_VERSION, n, h, w, c, self.num_classes)
                + np.ascontiguousarray(self.images, dtype="<f8").tobytes()
                + np.ascontiguousarray(self.labels, dtype="<u4").tobytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_dataset(ds: Dataset, path) -> str:
    raw = ds.to_bytes()
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def parse_dataset(raw: bytes, split: str = "test", name: str = "dataset") -> Dataset:
    if len(raw) < _PFDS_HEADER.size:
        raise ValueError(f"PFDS truncated: {len(raw)} bytes, header needs {_PFDS_HEADER.size}")
    magic, version, n, h, w, c, classes = _PFDS_HEADER.unpack_from(raw, 0)
    if magic != PFDS_MAGIC:
        raise ValueError(f"PFDS bad magic {magic!r} at offset 0")
    if version != PFDS_VERSION:
        raise ValueError(f"PFDS unsupported version {version} at offset 4")
    if min(h, w, c) == 0 or classes == 0:
        raise ValueError(f"PFDS bad shape header (H={h}, W={w}, C={c}, classes={classes}) at offset 12")
    off = _PFDS_HEADER.size
    need = off + 8 * n * h * w * c + 4 * n
    if len(raw) != need:
        what = "truncated" if len(raw) < need else "has trailing bytes"
        raise ValueError(f"PFDS {what}: expected {need} bytes, got {len(raw)} "
                         f"(payload starts at offset {off})")
    images = np.frombuffer(raw, dtype="<f8", count=n * h * w * c, offset=off).reshape(n, h, w, c)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 8 * n * h * w * c)
    return Dataset(images.astype(np.float64), labels.astype(np.int64), int(classes), split, name)


def load_dataset(path, split: str = "test") -> Dataset:
    path = Path(path)
    return parse_dataset(path.read_bytes(), split=split, name=path.stem)


def _shape_mask(kind: int, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == 0:  # disc
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == 1:  # square
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == 2:  # triangle, apex up
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.55)
    if kind == 3:  # horizontal bar
        return (np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)
    if kind == 4:  # vertical bar
        return (np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r)
    if kind == 5:  # plus
        return ((np.abs(dy) <= r * 0.25) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.25) & (np.abs(dy) <= r))
    if kind == 6:  # ring
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == 7:  # diamond
        return np.abs(dy) + np.abs(dx) <= r
    if kind == 8:  # diagonal cross
        return ((np.abs(dy - dx) <= r * 0.35) | (np.abs(dy + dx) <= r * 0.35)) & (np.maximum(np.abs(dy), np.abs(dx)) <= r)
    # two dots
    return (((dy) ** 2 + (dx - r * 0.6) ** 2) <= (r * 0.4) ** 2) | (((dy) ** 2 + (dx + r * 0.6) ** 2) <= (r * 0.4) ** 2)


def make_shapes_dataset(count: int, seed: int = 0, split: str = "train", size: int = 32,
                        num_classes: int = 10, noise: float = 0.04, jitter: float = 2.0) -> Dataset:
    """Coloured shapes on textured backgrounds; the label is the shape type."""
    if not 1 <= num_classes <= 10:
        raise ValueError("the shape generator supports 1..10 classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0 if split == "train" else 1]))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((count, size, size, 3))
    labels = rng.integers(0, num_classes, size=count)
    for i, lab in enumerate(labels):
        bg = rng.uniform(0.0, 0.45, size=3)
        grad = rng.uniform(-0.15, 0.15, size=3)
        img = bg + grad * (xx[..., None] / size)
        fg = rng.uniform(0.55, 1.0, size=3)
        if rng.random() < 0.5:
            fg = 1.0 - fg * 0.6
        cy = size / 2 + rng.uniform(-jitter, jitter)
        cx = size / 2 + rng.uniform(-jitter, jitter)
        r = rng.uniform(size * 0.22, size * 0.32)
        m = _shape_mask(int(lab), yy, xx, cy, cx, r)
        img[m] = fg
        img += rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, num_classes, split, f"shapes-{split}-{seed}")


# ---------------------------------------------------------------- training

@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)


def train_model(config, dataset: Dataset, epochs: int, lr: float, seed: int,
                batch_size: int = 64, out=None, train_log: TrainLog | None = None) -> Model:
    """Adam training on mean cross-entropy; deterministic given ``seed``."""
    if dataset.split != "train":
        raise ValueError(f"train_model needs a train split, got {dataset.split!r}")
    if dataset.num_classes != config.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model {config.num_classes}")
    model = build_model(config).requires_grad_(True)
    params = model.parameters()
    states = [AdamState.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(seed)
    train_log = train_log if train_log is not None else TrainLog()
    N = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(N)
        total, correct = 0.0, 0
        for s in range(0, N, batch_size):
            idx = order[s:s + batch_size]
            logits = model.forward(dataset.images[idx])
            loss = T.cross_entropy(logits, dataset.labels[idx], reduction="mean")
            if not np.isfinite(loss.data).all():
                raise FloatingPointError(f"training diverged at epoch {epoch}")
            grads = T.grad(loss, params)
            for p, g, st in zip(params, grads, states):
                p.data = adam_step(p.data, g, st, lr)
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == dataset.labels[idx]).sum())
        entry = {"epoch": epoch + 1, "loss": total / N, "accuracy": correct / N}
        train_log.epochs.append(entry)
        log.info("epoch %d loss %.4f acc %.4f", entry["epoch"], entry["loss"], entry["accuracy"])
    model.requires_grad_(False)
    if out is not None:
        save_checkpoint(model, out)
    return model


def accuracy(model: Model, dataset: Dataset) -> float:
    return float(np.mean(model.predict(dataset.images) == dataset.labels))


# ---------------------------------------------------------------- robust evaluation

@dataclass
class RobustnessReport:
    config: dict
    clean_accuracy: float
    robust_accuracy: float
    records: list[dict]
    seed: int
    wall_ms: float = 0.0
    examples: list[AdversarialExample | None] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        """Serialisable form; wall time is kept out so reports stay byte-reproducible."""
        return {"config": self.config, "clean_accuracy": self.clean_accuracy,
                "robust_accuracy": self.robust_accuracy, "records": self.records,
                "seed": self.seed, "wall_ms": None}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def subset_indices(n_total: int, limit: int | None, subset_seed: int = 0) -> np.ndarray:
    if limit is None or limit >= n_total:
        return np.arange(n_total)
    if limit < 0:
        raise ValueError("limit must be non-negative")
    rng = np.random.default_rng(subset_seed)
    return np.sort(rng.permutation(n_total)[:limit])


def _attack_chunk(model, dataset, config, ids, patches):
    images, labels = dataset.images[ids], dataset.labels[ids]
    fixed = None if patches is None else [list(patches)] * len(ids)
    try:
        return attack_batch(model, images, labels, config, image_ids=ids, indices=fixed), [None] * len(ids)
    except Exception as exc:  # noqa: BLE001 - isolate the failing image
        if len(ids) == 1:
            return [None], [f"{type(exc).__name__}: {exc}"]
        out, errs = [], []
        for i in ids:
            ex, err = _attack_chunk(model, dataset, config, np.array([i]), patches)
            out += ex
            errs += err
        return out, errs


def evaluate_robust(model: Model, config: AttackConfig, dataset: Dataset, limit: int | None = 500,
                    subset_seed: int = 0, batch_size: int = 100, workers: int = 1,
                    patches=None) -> RobustnessReport:
    """Attack every image of the evaluation subset and tally clean/robust accuracy.

    ``patches`` pins the perturbed patch indices instead of running selection.
    Batches are fixed by ``batch_size`` so results do not depend on ``workers``.
    """
    if dataset.split != "test":
        raise ValueError(f"evaluate_robust needs a test split, got {dataset.split!r}")
    if limit is not None and limit > len(dataset):
        raise ValueError(f"limit {limit} exceeds dataset size {len(dataset)}")
    start = time.perf_counter()
    ids = subset_indices(len(dataset), limit, subset_seed)
    chunks = [ids[i:i + batch_size] for i in range(0, len(ids), batch_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _attack_chunk(model, dataset, config, c, patches), chunks))
    else:
        results = [_attack_chunk(model, dataset, config, c, patches) for c in chunks]
    examples, errors = [], []
    for ex, err in results:
        examples += ex
        errors += err
    clean_pred = model.predict(dataset.images[ids])
    records = []
    for i, ex, err, cp in zip(ids, examples, errors, clean_pred):
        label = int(dataset.labels[i])
        rec = {"index": int(i), "label": label, "clean_correct": bool(cp == label)}
        if ex is None:
            rec.update(adv_correct=bool(cp == label), patches=[], iterations=0, error=err)
        else:
            rec.update(adv_correct=bool(ex.prediction == label), patches=ex.indices,
                       iterations=ex.iterations, adv_prediction=ex.prediction)
        records.append(rec)
    n = max(len(records), 1)
    return RobustnessReport(
        config=config.to_dict(),
        clean_accuracy=sum(r["clean_correct"] for r in records) / n,
        robust_accuracy=sum(r["adv_correct"] for r in records) / n,
        records=records, seed=config.seed,
        wall_ms=(time.perf_counter() - start) * 1000.0, examples=examples)


def verify_examples(report: RobustnessReport, dataset: Dataset, grid) -> int:
    """Re-check locality and domain for every emitted example; returns violation count."""
    bad = 0
    for rec, ex in zip(report.records, report.examples):
        if ex is None:
            continue
        clean = dataset.images[rec["index"]]
        if not (ex.image.min() >= 0.0 and ex.image.max() <= 1.0):
            bad += 1
        if report.config["variant"] != "pgd":
            bad += locality_violations(clean, ex.image, ex.indices, grid, ex.mask) > 0
    return bad


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepGrid:
    axes: dict[str, list]
    cells: list[tuple[dict, RobustnessReport]]
    dataset_hash: str = ""

    def rows(self) -> list[dict]:
        return [{**coords, "clean_accuracy": rep.clean_accuracy,
                 "robust_accuracy": rep.robust_accuracy} for coords, rep in self.cells]

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = list(self.axes) + ["clean_accuracy", "robust_accuracy"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: row[k] for k in cols})
        return buf.getvalue()

    def robust(self, **coords) -> float:
        for c, rep in self.cells:
            if all(c.get(k) == v for k, v in coords.items()):
                return rep.robust_accuracy
        raise KeyError(coords)


_AXIS_FIELDS = {"patches": "num_patches", "num_patches": "num_patches", "epsilon": "epsilon",
                "pr": "pr", "k": "k", "layer": "layer_l", "layer_l": "layer_l", "alpha": "alpha",
                "selection": "selection", "variant": "variant", "iters": "iters"}


def sweep(model: Model, dataset: Dataset, base: AttackConfig, axes: dict[str, list],
          limit: int | None = 500, order=None, **eval_kw) -> SweepGrid:
    """Cartesian sweep; every cell reuses ``base.seed`` so cells are order-independent."""
    for name in axes:
        if name not in _AXIS_FIELDS:
            raise ValueError(f"unknown sweep axis {name!r}")
    coords = [dict(zip(axes, vals)) for vals in itertools.product(*axes.values())]
    run_order = list(range(len(coords))) if order is None else list(order)
    results = {}
    for i in run_order:
        cfg = AttackConfig(**{**base.to_dict(), **{_AXIS_FIELDS[k]: v for k, v in coords[i].items()}})
        results[i] = evaluate_robust(model, cfg, dataset, limit, **eval_kw)
    return SweepGrid(dict(axes), [(coords[i], results[i]) for i in range(len(coords))], dataset.digest())


def layer_ablation_sweep(model: Model, dataset: Dataset, layers, base: AttackConfig | None = None,
                         limit: int | None = 500, **eval_kw) -> SweepGrid:
    base = base or AttackConfig()
    L = model.config.num_layers
    bad = [l for l in layers if not 1 <= l <= L]
    if bad:
        raise ValueError(f"layers {bad} outside [1, {L}]")
    base = AttackConfig(**{**base.to_dict(), "selection": "attention"})
    return sweep(model, dataset, base, {"layer": list(layers)}, limit, **eval_kw)


def early_late_summary(grid: SweepGrid) -> dict:
    """Mean robust accuracy over the first and second half of the swept layers."""
    layers = sorted(c["layer"] for c, _ in grid.cells)
    half = len(layers) // 2
    early, late = layers[:max(half, 1)], layers[max(half, 1):]
    mean = lambda ls: float(np.mean([grid.robust(layer=l) for l in ls])) if ls else float("nan")
    return {"early_layers": early, "late_layers": late,
            "early_mean_robust": mean(early), "late_mean_robust": mean(late)}


# ---------------------------------------------------------------- transferability

@dataclass
class TransferGrid:
    source: int
    accuracy: np.ndarray  # rows x cols, robust accuracy per target patch location
    clean_accuracy: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "col", "patch", "robust_accuracy"])
        rows, cols = self.accuracy.shape
        for r in range(rows):
            for c in range(cols):
                w.writerow([r, c, r * cols + c + 1, float(self.accuracy[r, c])])
        return buf.getvalue()


def transferability_sweep(model: Model, dataset: Dataset, source: int, config: AttackConfig | None = None,
                          limit: int | None = 128, batch_size: int = 100,
                          zero_perturbation: bool = False) -> TransferGrid:
    """Attack ``source`` per image, then paste that patch's perturbation onto every patch slot."""
    if model.kind != "vit":
        raise TypeError("transferability_sweep needs a vit model")
    grid = model.grid
    if not 1 <= source <= grid.n:
        raise ValueError(f"source patch {source} outside [1, {grid.n}]")
    config = config or AttackConfig()
    ids = subset_indices(len(dataset), limit)
    clean = dataset.images[ids]
    labels = dataset.labels[ids]
    X = patchify(clean, grid)
    if zero_perturbation:
        delta = np.zeros((len(ids), grid.d))
    else:
        adv = []
        for s in range(0, len(ids), batch_size):
            exs = attack_batch(model, clean[s:s + batch_size], labels[s:s + batch_size], config,
                               image_ids=ids[s:s + batch_size],
                               indices=[[source]] * len(ids[s:s + batch_size]))
            adv += [e.image for e in exs]
        delta = patchify(np.stack(adv), grid)[:, source - 1] - X[:, source - 1]
    acc = np.zeros(grid.n)
    for target in range(grid.n):
        moved = X.copy()
        moved[:, target] += delta
        images = np.clip(unpatchify(moved, grid), 0.0, 1.0)
        acc[target] = np.mean(model.predict(images) == labels)
    clean_acc = float(np.mean(model.predict(clean) == labels))
    return TransferGrid(source, acc.reshape(grid.rows, grid.cols), clean_acc)


def neighborhood_vs_corners(tg: TransferGrid) -> tuple[float, float]:
    """Mean robust accuracy over the 8-neighbourhood of the source and over the 4 corners."""
    rows, cols = tg.accuracy.shape
    r0, c0 = divmod(tg.source - 1, cols)
    neigh = [tg.accuracy[r, c] for r in range(r0 - 1, r0 + 2) for c in range(c0 - 1, c0 + 2)
             if (r, c) != (r0, c0) and 0 <= r < rows and 0 <= c < cols]
    corners = [tg.accuracy[0, 0], tg.accuracy[0, -1], tg.accuracy[-1, 0], tg.accuracy[-1, -1]]
    return float(np.mean(neigh)), float(np.mean(corners))


# ---------------------------------------------------------------- attention export

def head_averaged_maps(model: Model, image) -> np.ndarray:
    """``[L, T, T]`` attention averaged over heads."""
    _, stacks = forward_with_attention(model, np.asarray(image)[None])
    return np.stack([a.mean(axis=0) for a in stacks[0].layers])


def attention_gap(model: Model, clean, adv, layer: int = -1) -> float:
    """Mean over query tokens of the L1 distance between head-averaged attention rows."""
    a = head_averaged_maps(model, clean)[layer]
    b = head_averaged_maps(model, adv)[layer]
    return float(np.abs(a - b).sum(axis=-1).mean())


def export_attention_maps(model: Model, image, query: int, out_path) -> tuple[Path, Path]:
    """Write head-averaged attention of ``query`` per layer as CSV and as a PFDS tensor.

    The CSV has columns ``layer,row,col,value,class_token_value``; the PFDS file
    stores one ``rows x cols x 1`` map per layer with the layer index as label.
    """
    if model.kind != "vit":
        raise TypeError("export_attention_maps needs a vit model")
    grid = model.grid
    if not 0 <= query <= grid.n:
        raise ValueError(f"query token {query} outside [0, {grid.n}]")
    maps = head_averaged_maps(model, image)[:, query, :]
    out_path = Path(out_path)
    csv_path = out_path if out_path.suffix == ".csv" else out_path.with_suffix(".csv")
    pfds_path = csv_path.with_suffix(".pfds")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "row", "col", "value", "class_token_value"])
    for l, row in enumerate(maps, start=1):
        patch = row[1:].reshape(grid.rows, grid.cols)
        for r in range(grid.rows):
            for c in range(grid.cols):
                w.writerow([l, r, c, repr(float(patch[r, c])), repr(float(row[0]))])
    csv_path.write_text(buf.getvalue())
    L = len(maps)
    tensor_ds = Dataset(np.clip(maps[:, 1:], 0, 1).reshape(L, grid.rows, grid.cols, 1),
                        np.arange(L), L, "test", "attention")
    save_dataset(tensor_ds, pfds_path)
    return csv_path, pfds_path
