"""Patch-Fool attack family plus the PGD baseline.

All attacks run batched internally: images in a batch never interact (losses
are summed, layer norm is per token), so the gradient of the summed loss with
respect to one image's perturbation is that image's own gradient. Public
single-image functions wrap the batched drivers.

Patch indices are token indices: patch ``j`` (1-based) is token ``j`` of the
ViT and row ``j - 1`` of the ``n x d`` patch matrix. Token 0 is the class token.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .models import (AttentionStack, Model, forward_with_attention, input_gradients,
                     patchify, unpatchify)
from .tensor import AdamState, Tensor, adam_step

log = logging.getLogger(__name__)

VARIANTS = ("vanilla", "sparse", "mild_l2", "mild_linf", "pgd")
SELECTIONS = ("attention", "saliency", "random")


@dataclass(frozen=True)
class AttackConfig:
    variant: str = "vanilla"
    selection: str = "attention"
    num_patches: int = 1
    layer_l: int = 5
    alpha: float = 0.002
    eta0: float = 0.2
    decay: float = 0.95
    decay_every: int = 10
    iters: int = 250
    k: int | None = None
    pr: float | None = None
    epsilon: float | None = None
    step_size: float | None = None
    mask_per_pixel: bool = False
    seed: int = 0

    def __post_init__(self):
        variant = self.variant.replace("-", "_")
        object.__setattr__(self, "variant", variant)
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"unknown selection {self.selection!r}; expected one of {SELECTIONS}")
        if self.num_patches < 1:
            raise ValueError("num_patches must be >= 1")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.alpha < 0 or self.eta0 < 0:
            raise ValueError("alpha and eta0 must be non-negative")
        if variant in ("mild_l2", "mild_linf") and not (self.epsilon and self.epsilon > 0):
            raise ValueError(f"variant {variant} needs epsilon > 0")
        if variant == "pgd" and (self.epsilon is None or self.epsilon < 0):
            raise ValueError("variant pgd needs epsilon >= 0")
        if variant == "sparse":
            if self.k is None and self.pr is None:
                raise ValueError("variant sparse needs k or pr")
            if self.k is not None and self.k < 1:
                raise ValueError("sparse budget k must be >= 1")
            if self.pr is not None and not 0 < self.pr <= 1:
                raise ValueError("perturbation ratio must lie in (0, 1]")

    def step_size_at(self, t: int) -> float:
        return self.eta0 * self.decay ** (t // self.decay_every)

    def budget(self, grid) -> int:
        """Sparse element budget; ``pr`` converts as ``round(pr * total)``."""
        if self.k is not None:
            return int(self.k)
        unit = grid.patch_size ** 2 if self.mask_per_pixel else grid.d
        return max(1, int(round(self.pr * grid.n * unit)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdversarialExample:
    image: np.ndarray
    label: int
    indices: list[int]
    iterations: int
    ce_loss: float
    attn_losses: list[float]
    prediction: int
    clean_prediction: int
    mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def success(self) -> bool:
        return self.prediction != self.label


# ---------------------------------------------------------------- selection

def _top_indices(scores: np.ndarray, count: int) -> list[int]:
    """Largest scores first, ties to the lowest index; returns 1-based patch indices."""
    order = np.argsort(-scores, kind="stable")
    return [int(i) + 1 for i in order[:count]]


def patch_importance(attn: AttentionStack, layer_l: int) -> np.ndarray:
    """``s_j = sum_{h,i} a^{(l,h,i)}_j`` for patch columns ``j = 1..n``."""
    if not 1 <= layer_l <= attn.num_layers:
        raise ValueError(f"layer_l={layer_l} outside [1, {attn.num_layers}]")
    return attn.layer(layer_l).sum(axis=(0, 1))[1:]


def select_patches_attention(attn: AttentionStack, layer_l: int, count: int) -> list[int]:
    scores = patch_importance(attn, layer_l)
    if not 1 <= count <= scores.size:
        raise ValueError(f"count={count} outside [1, {scores.size}]")
    return _top_indices(scores, count)


def saliency_scores(grad_image: np.ndarray, grid) -> np.ndarray:
    """Mean absolute gradient per patch."""
    return np.abs(patchify(grad_image, grid)).mean(axis=-1)


def select_patches_saliency(model: Model, image, label: int, count: int) -> list[int]:
    g = input_gradients(model, np.asarray(image)[None], [label])[0]
    if not 1 <= count <= model.grid.n:
        raise ValueError(f"count={count} outside [1, {model.grid.n}]")
    return _top_indices(saliency_scores(g, model.grid), count)


def select_patches_random(rng: np.random.Generator, n: int, count: int) -> list[int]:
    if count > n:
        raise ValueError(f"cannot draw {count} patches from {n}")
    if count < 1:
        raise ValueError("count must be >= 1")
    return [int(i) + 1 for i in rng.choice(n, size=count, replace=False)]


def _image_rng(seed: int, image_id: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(image_id), stream]))


_SELECT_STREAM, _MASK_STREAM = 0, 1


def _select_batch(model: Model, images: np.ndarray, labels: np.ndarray,
                  config: AttackConfig, image_ids) -> list[list[int]]:
    count = config.num_patches
    n = model.grid.n
    if count > n:
        raise ValueError(f"num_patches={count} exceeds patch count {n}")
    if config.selection == "random":
        return [select_patches_random(_image_rng(config.seed, i, _SELECT_STREAM), n, count)
                for i in image_ids]
    if config.selection == "saliency":
        g = input_gradients(model, images, labels)
        scores = saliency_scores(g, model.grid)
        return [_top_indices(s, count) for s in scores]
    if model.kind != "vit":
        raise TypeError(f"attention selection needs a vit model, got {model.kind}")
    _, stacks = forward_with_attention(model, images)
    return [select_patches_attention(s, config.layer_l, count) for s in stacks]


# ---------------------------------------------------------------- losses

def attention_loss(attn: AttentionStack, indices) -> np.ndarray:
    """Per-layer ``J_ATTN^(l) = sum_{p in indices} sum_{h,i} a^{(l,h,i)}_p``."""
    idx = _validate_indices(indices, attn.layers[0].shape[-1] - 1)
    return np.array([a[:, :, idx].sum() for a in attn.layers])


def _validate_indices(indices, n: int) -> np.ndarray:
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("indices must be non-empty")
    if idx.min() < 1 or idx.max() > n:
        raise ValueError(f"patch indices must lie in [1, {n}], got {idx.tolist()}")
    return idx


def _column_mask(batch_indices, tokens: int) -> np.ndarray:
    mask = np.zeros((len(batch_indices), 1, 1, tokens))
    for b, idx in enumerate(batch_indices):
        mask[b, 0, 0, _validate_indices(idx, tokens - 1)] = 1.0
    return mask


def attention_loss_terms(attns: list[Tensor], batch_indices) -> list[Tensor]:
    """Differentiable per-layer attention losses, summed over the batch."""
    cols = _column_mask(batch_indices, attns[0].shape[-1])
    return [T.sum(T.mul(a, cols)) for a in attns]


def combined_loss(logits: Tensor, labels, attns, indices, alpha: float) -> Tensor:
    """``J_CE + alpha * sum_l J_ATTN^(l)`` (batch-summed).

    ``attns`` is a list of ``[B, H, T, T]`` tensors; ``indices`` holds one index
    list per batch row (a single flat list is accepted for batch size one).
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    labels = np.atleast_1d(labels)
    ce = T.cross_entropy(logits, labels, reduction="sum")
    if alpha == 0 or not attns:
        return ce
    if indices and np.isscalar(list(indices)[0]):
        indices = [indices]
    terms = attention_loss_terms(attns, indices)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.add(ce, T.scale(total, alpha))


def pcgrad_combine(grad_j: np.ndarray, grad_ce: np.ndarray, grad_attn_per_layer,
                   alpha: float) -> np.ndarray:
    """``grad_J - alpha * sum_l beta_l * grad_ce`` with ``beta_l`` from the conflict test.

    ``beta_l`` is zero when ``<grad_ce, grad_attn_l> >= 0`` and the projection
    coefficient ``<grad_ce, grad_attn_l> / |grad_ce|^2`` otherwise. A vanishing
    ``|grad_ce|`` disables every projection.
    """
    g = np.asarray(grad_ce, dtype=np.float64).reshape(-1)
    norm2 = float(g @ g)
    dots = np.array([float(g @ np.asarray(a).reshape(-1)) for a in grad_attn_per_layer])
    betas = _betas(dots, norm2)
    return np.asarray(grad_j, dtype=np.float64) - alpha * betas.sum() * np.asarray(grad_ce)


def _betas(dots: np.ndarray, norm2) -> np.ndarray:
    norm2 = np.asarray(norm2, dtype=np.float64)
    conflict = dots < 0
    zero = norm2 == 0
    if np.any(conflict & zero):
        warnings.warn("pcgrad_combine: |grad_ce| == 0 with a conflicting attention gradient; "
                      "projection disabled", RuntimeWarning, stacklevel=3)
    safe = np.where(zero, 1.0, norm2)
    return np.where(conflict & ~zero, dots / safe, 0.0)


def _pcgrad_batched(g_ce: np.ndarray, g_attn: list[np.ndarray], alpha: float) -> np.ndarray:
    """Per-image :func:`pcgrad_combine` over leading batch axis."""
    B = g_ce.shape[0]
    flat = g_ce.reshape(B, -1)
    norm2 = np.einsum("bi,bi->b", flat, flat)
    total = g_ce.copy()
    beta_sum = np.zeros(B)
    for ga in g_attn:
        dots = np.einsum("bi,bi->b", flat, ga.reshape(B, -1))
        beta_sum += _betas(dots, norm2)
        total += alpha * ga
    return total - (alpha * beta_sum).reshape((B,) + (1,) * (g_ce.ndim - 1)) * g_ce


# ---------------------------------------------------------------- projections / masks

def project_l2(E: np.ndarray, epsilon: float) -> np.ndarray:
    """Rescale onto the L2 ball of radius ``epsilon`` (norm over all entries jointly)."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    norm = float(np.sqrt(np.sum(np.square(E))))
    if norm <= epsilon:
        return E
    return E * (epsilon / norm)


def project_linf(E: np.ndarray, epsilon: float) -> np.ndarray:
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    return np.clip(E, -epsilon, epsilon)


def _project_batch(E: np.ndarray, config: AttackConfig) -> np.ndarray:
    if config.variant == "mild_linf":
        return project_linf(E, config.epsilon)
    if config.variant == "mild_l2":
        norms = np.sqrt(np.einsum("bi,bi->b", E.reshape(len(E), -1), E.reshape(len(E), -1)))
        factor = np.where(norms > config.epsilon, config.epsilon / np.where(norms > 0, norms, 1.0), 1.0)
        return E * factor.reshape((-1,) + (1,) * (E.ndim - 1))
    return E


def top_k_mask(mhat: np.ndarray, k: int, candidates: np.ndarray) -> np.ndarray:
    """Binary mask with ones at the ``min(k, #candidates)`` largest candidate entries.

    Works on the trailing ``mhat.shape[-2:]`` block per leading index; ties go to
    the lowest flat index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    lead = mhat.shape[:-2]
    flat = mhat.reshape((-1, mhat.shape[-2] * mhat.shape[-1]))
    cand = np.broadcast_to(candidates, mhat.shape).reshape(flat.shape).astype(bool)
    out = np.zeros(flat.shape)
    for r in range(flat.shape[0]):
        pool = np.flatnonzero(cand[r])
        if pool.size == 0:
            continue
        take = min(k, pool.size)
        order = np.argsort(-flat[r, pool], kind="stable")[:take]
        out[r, pool[order]] = 1.0
    return out.reshape(lead + mhat.shape[-2:])


def sparse_mask_forward(mhat, k: int, indicator) -> Tensor:
    """Top-k binary mask over indicated patch rows, straight-through on backward.

    ``mhat`` is ``[..., n, e]``; ``indicator`` is a multi-hot over the ``n`` rows
    (shape ``[..., n]`` or ``[..., n, 1]``).
    """
    mh = T.as_tensor(mhat)
    ind = np.asarray(indicator, dtype=np.float64)
    if ind.ndim == mh.data.ndim - 1:
        ind = ind[..., None]
    cand = np.broadcast_to(ind, mh.shape) > 0
    M = top_k_mask(mh.data, k, cand)
    candf = cand.astype(np.float64)
    return T._result(M, "top_k_ste", (mh,), lambda g: (g * candf,))


# ---------------------------------------------------------------- attack drivers

def _as_batch(images, labels):
    images = np.asarray(images, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if images.ndim == 3:
        images = images[None]
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    return images, labels


def _final_eval(model: Model, adv: np.ndarray, labels: np.ndarray, batch_indices):
    if model.kind == "vit":
        logits, attns = model.forward_patches(patchify(adv, model.grid))
        attn_per_image = np.stack([
            (a.data * _column_mask(batch_indices, a.shape[-1])).sum(axis=(1, 2, 3)) for a in attns
        ], axis=1)
    else:
        logits = model.forward(adv)
        attn_per_image = np.zeros((len(adv), 0))
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ce = np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(labels)), labels]
    return logits.data.argmax(axis=1), ce, attn_per_image


def _patch_fool_batch(model: Model, images: np.ndarray, labels: np.ndarray,
                      config: AttackConfig, image_ids, indices=None,
                      callback=None) -> list[AdversarialExample]:
    grid = model.grid
    B, n, d = len(images), grid.n, grid.d
    clean_pred = model.predict(images)
    if indices is None:
        indices = _select_batch(model, images, labels, config, image_ids)
    indicator = np.zeros((B, n, 1))
    for b, idx in enumerate(indices):
        indicator[b, _validate_indices(idx, n) - 1, 0] = 1.0
    X = patchify(images, grid)
    E = np.zeros((B, n, d))
    adam_e = AdamState.zeros_like(E)
    sparse = config.variant == "sparse"
    use_attn = model.kind == "vit" and config.alpha > 0
    pp, C = grid.patch_size ** 2, grid.channels
    if sparse:
        k = config.budget(grid)
        mshape = (B, n, pp) if config.mask_per_pixel else (B, n, d)
        mhat = np.stack([_image_rng(config.seed, i, _MASK_STREAM).random(mshape[1:]) for i in image_ids])
        adam_m = AdamState.zeros_like(mhat)

    def perturbation(E_t, M_t):
        pert = T.mul(E_t, indicator)
        if M_t is None:
            return pert
        if config.mask_per_pixel:
            pert = T.mul(T.reshape(pert, (B, n, pp, C)), T.reshape(M_t, (B, n, pp, 1)))
            return T.reshape(pert, (B, n, d))
        return T.mul(pert, M_t)

    for t in range(config.iters):
        lr = config.step_size_at(t)
        E_t = Tensor(E, requires_grad=True)
        leaves = [E_t]
        M_t = None
        if sparse:
            mh_t = Tensor(mhat, requires_grad=True)
            leaves.append(mh_t)
            M_t = sparse_mask_forward(mh_t, k, indicator[..., 0])
        Xt = T.add(X, perturbation(E_t, M_t))
        if model.kind == "vit":
            logits, attns = model.forward_patches(Xt)
        else:
            logits, attns = model.forward(unpatchify(Xt, grid)), []
        ce = T.cross_entropy(logits, labels, reduction="sum")
        if not np.isfinite(ce.data).all():
            raise FloatingPointError(f"non-finite loss at iteration {t}")
        g_ce = T.grad(ce, leaves)
        g_attn = [T.grad(term, leaves) for term in attention_loss_terms(attns, indices)] if use_attn else []
        deltas = [_pcgrad_batched(g_ce[j], [ga[j] for ga in g_attn], config.alpha)
                  for j in range(len(leaves))]
        # adam_step descends, so feed the negated ascent direction
        E = adam_step(E, -deltas[0], adam_e, lr) * indicator
        E = _project_batch(E, config)
        if sparse:
            mhat = adam_step(mhat, -deltas[1], adam_m, lr)
        if callback is not None:
            M = top_k_mask(mhat, k, np.broadcast_to(indicator, mhat.shape) > 0) if sparse else None
            callback(t, _applied_perturbation(E, indicator, M, grid))

    M = top_k_mask(mhat, k, np.broadcast_to(indicator, mhat.shape) > 0) if sparse else None
    pert = _applied_perturbation(E, indicator, M, grid)
    adv = np.clip(unpatchify(X + pert, grid), 0.0, 1.0)
    pred, ce, attn_vals = _final_eval(model, adv, labels, indices)
    return [AdversarialExample(image=adv[b], label=int(labels[b]), indices=list(indices[b]),
                               iterations=config.iters, ce_loss=float(ce[b]),
                               attn_losses=attn_vals[b].tolist(), prediction=int(pred[b]),
                               clean_prediction=int(clean_pred[b]),
                               mask=None if M is None else M[b])
            for b in range(B)]


def _applied_perturbation(E, indicator, M, grid) -> np.ndarray:
    """``indicator (.) (M o E)`` in patch space, with a per-pixel mask broadcast over channels."""
    pert = E * indicator
    if M is None:
        return pert
    if M.shape[-1] != grid.d:
        B, n = E.shape[:2]
        return (pert.reshape(B, n, -1, grid.channels) * M[..., None]).reshape(E.shape)
    return pert * M


def _pgd_batch(model: Model, images: np.ndarray, labels: np.ndarray, epsilon: float, steps: int,
               step_size: float) -> list[AdversarialExample]:
    clean_pred = model.predict(images)
    lo, hi = np.clip(images - epsilon, 0, 1), np.clip(images + epsilon, 0, 1)
    adv = images.copy()
    for _ in range(steps):
        g = input_gradients(model, adv, labels)
        adv = np.clip(adv + step_size * np.sign(g), lo, hi)
    all_idx = [list(range(1, model.grid.n + 1))] * len(images)
    pred, ce, attn_vals = _final_eval(model, adv, labels, all_idx)
    return [AdversarialExample(image=adv[b], label=int(labels[b]), indices=all_idx[b],
                               iterations=steps, ce_loss=float(ce[b]),
                               attn_losses=attn_vals[b].tolist(), prediction=int(pred[b]),
                               clean_prediction=int(clean_pred[b]))
            for b in range(len(images))]


def pgd_step_size(config: AttackConfig) -> float:
    if config.step_size is not None:
        return config.step_size
    return 2.5 * config.epsilon / max(config.iters, 1)


def attack_batch(model: Model, images, labels, config: AttackConfig, image_ids=None,
                 indices=None, callback=None) -> list[AdversarialExample]:
    """Run ``config`` on a batch; ``image_ids`` key the per-image RNG streams.

    ``indices`` (one list per image) skips patch selection. ``callback(t, pert)``
    sees the applied patch-space perturbation after every Patch-Fool update.
    """
    images, labels = _as_batch(images, labels)
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    image_ids = list(range(len(images))) if image_ids is None else list(image_ids)
    if config.variant == "pgd":
        return _pgd_batch(model, images, labels, config.epsilon, config.iters, pgd_step_size(config))
    return _patch_fool_batch(model, images, labels, config, image_ids, indices, callback)


def patch_fool_attack(model: Model, image, label: int, config: AttackConfig,
                      image_id: int = 0) -> AdversarialExample:
    if config.variant not in ("vanilla", "mild_l2", "mild_linf"):
        raise ValueError(f"patch_fool_attack does not run variant {config.variant!r}")
    return attack_batch(model, image, [label], config, [image_id])[0]


def sparse_patch_fool_attack(model: Model, image, label: int, config: AttackConfig,
                             image_id: int = 0) -> AdversarialExample:
    if config.variant != "sparse":
        raise ValueError("sparse_patch_fool_attack needs variant='sparse'")
    return attack_batch(model, image, [label], config, [image_id])[0]


def pgd_attack(model: Model, image, label: int, epsilon: float, steps: int,
               step_size: float) -> AdversarialExample:
    """L-inf PGD from the clean image (no random start)."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    images, labels = _as_batch(image, [label])
    return _pgd_batch(model, images, labels, epsilon, steps, step_size)[0]


# ---------------------------------------------------------------- invariant checks

def changed_elements(clean: np.ndarray, adv: np.ndarray) -> int:
    return int(np.count_nonzero(adv != clean))


def locality_violations(clean: np.ndarray, adv: np.ndarray, indices, grid, mask=None) -> int:
    """Count changed scalars outside the indicated patches (and outside ``mask``)."""
    diff = patchify(adv, grid) != patchify(clean, grid)
    allowed = np.zeros((grid.n, grid.d), dtype=bool)
    allowed[np.asarray(indices) - 1] = True
    if mask is not None:
        m = np.asarray(mask) > 0
        if m.shape[-1] != grid.d:
            m = np.repeat(m, grid.channels, axis=-1)
        allowed &= m
    return int(np.count_nonzero(diff & ~allowed))


def with_overrides(config: AttackConfig, **kw) -> AttackConfig:
    return replace(config, **kw)
