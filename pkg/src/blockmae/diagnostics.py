"""Depth-resolved representation diagnostics.

Everything here is pure over embeddings/arrays except the two operations that
need the model again: the masked-reconstruction profile (fresh evaluation
masks through the block decoders) and occlusion probing (zero pixels, then
re-extract). Metrics are computed in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .data import Clip, Dataset
from .tokenizer import sample_mask, tubelet_tokenize
from .util import spawn_rng

# --- linear probe -------------------------------------------------------------


@dataclass
class ProbeFit:
    accuracy: float
    grad_norm: float     # max-norm of the objective gradient at the solution
    iterations: int
    converged: bool
    classes: np.ndarray


@dataclass
class ProbeResult:
    target: str
    accuracy: float           # mean over folds
    fold_accuracies: list
    fits: list = field(repr=False, default_factory=list)


def _standardize(X_train, X_test):
    mu = X_train.mean(axis=0)
    sd = X_train.std(axis=0)
    dead = sd == 0.0
    sd_safe = np.where(dead, 1.0, sd)
    out = []
    for X in (X_train, X_test):
        Z = (X - mu) / sd_safe
        Z[:, dead] = 0.0
        out.append(Z)
    return out


def _softmax_objective(wflat, X, Y, reg):
    n, d = X.shape
    c = Y.shape[1]
    W = wflat[: d * c].reshape(d, c)
    b = wflat[d * c:]
    S = X @ W + b
    S = S - S.max(axis=1, keepdims=True)
    expS = np.exp(S)
    Z = expS.sum(axis=1, keepdims=True)
    loss = -(Y * (S - np.log(Z))).sum() / n + reg * (W * W).sum()
    G = (expS / Z - Y) / n
    gW = X.T @ G + 2.0 * reg * W
    gb = G.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


def linear_probe(X_train, y_train, X_test, y_test, C=1.0, max_iter=1000,
                 gtol=1e-5):
    """Standardize on train stats, fit L2-regularized multinomial logistic
    regression (penalty weight 1/(C*n_train) on ||W||^2, bias unpenalized),
    report top-1 accuracy on the test rows.

    The quasi-Newton solver runs to gradient max-norm <= gtol or max_iter
    iterations, whichever comes first; both are reported on the fit.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    X_test = np.asarray(X_test, dtype=np.float64)
    y_train = np.asarray(y_train)
    y_test = np.asarray(y_test)
    classes, y_idx = np.unique(y_train, return_inverse=True)
    if classes.size < 2:
        raise ValueError("training labels contain a single class; probe undefined")

    Xs, Xt = _standardize(X_train, X_test)
    n, d = Xs.shape
    c = classes.size
    Y = np.zeros((n, c))
    Y[np.arange(n), y_idx] = 1.0
    reg = 1.0 / (C * n)

    res = minimize(_softmax_objective, np.zeros(d * c + c), args=(Xs, Y, reg),
                   method="L-BFGS-B", jac=True,
                   options={"maxiter": max_iter, "gtol": gtol, "ftol": 0.0,
                            "maxfun": max(15000, 20 * max_iter)})
    _, g = _softmax_objective(res.x, Xs, Y, reg)
    grad_norm = float(np.max(np.abs(g)))
    W = res.x[: d * c].reshape(d, c)
    b = res.x[d * c:]
    pred = classes[np.argmax(Xt @ W + b, axis=1)]
    return ProbeFit(accuracy=float(np.mean(pred == y_test)),
                    grad_norm=grad_norm, iterations=int(res.nit),
                    converged=grad_norm <= gtol, classes=classes)


def probe_cv(X, y, fold_assignment, target="", C=1.0, max_iter=1000):
    """Cross-validated probe accuracy over a precomputed stratified fold map."""
    y = np.asarray(y)
    folds = np.asarray(fold_assignment)
    if folds.shape[0] != y.shape[0]:
        raise ValueError("fold assignment length does not match labels")
    accs, fits = [], []
    for f in np.unique(folds):
        tr = folds != f
        te = folds == f
        fit = linear_probe(X[tr], y[tr], X[te], y[te], C=C, max_iter=max_iter)
        accs.append(fit.accuracy)
        fits.append(fit)
    return ProbeResult(target=target, accuracy=float(np.mean(accs)),
                       fold_accuracies=accs, fits=fits)


# --- retrieval ----------------------------------------------------------------

def knn_map(X, labels):
    """Retrieval mAP: every row queries all others, ranked by cosine similarity
    (ties broken by original index); relevant = identical label. Queries with
    no relevant gallery item are omitted from the mean.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("retrieval needs at least two rows")
    labels = np.asarray(labels)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    Xn = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    sims = Xn @ Xn.T

    aps = []
    idx = np.arange(n)
    for q in range(n):
        gallery = idx[idx != q]
        order = gallery[np.lexsort((gallery, -sims[q, gallery]))]
        rel = labels[order] == labels[q]
        n_rel = int(rel.sum())
        if n_rel == 0:
            continue
        ranks = np.nonzero(rel)[0] + 1
        hits = np.arange(1, n_rel + 1)
        aps.append(float((hits / ranks).sum()) / n_rel)
    if not aps:
        raise ValueError("no evaluable queries (every label is unique)")
    return float(np.mean(aps))


# --- masked-reconstruction profile ---------------------------------------------

def recon_mse_profile(model, dataset, mask_ratio=0.9, seed=0, blocks=None,
                      batch_size=32):
    """Per-block masked MSE on fresh seed-fixed evaluation masks.

    Masks are drawn per clip (independent of batching), so the profile is
    invariant to batch_size. For a final-only decoder layout the profile has
    the single entry at k=K; asking for earlier blocks raises.
    """
    if blocks is None:
        K = model.config.K
        blocks = [K] if model.decoder_layout == "final_only" else list(range(1, K + 1))
    for k in blocks:
        model.decoder_for(k)  # raises on blocks without a decoder
    grid = model.grid
    clips = dataset.clips
    per_clip = {k: [] for k in blocks}
    for lo in range(0, len(clips), batch_size):
        chunk = clips[lo:lo + batch_size]
        toks = np.stack([tubelet_tokenize(c.frames, grid)[0] for c in chunk])
        masks = [sample_mask(grid, mask_ratio, spawn_rng(seed, "evalmask", lo + j))
                 for j in range(len(chunk))]
        vis_idx = np.stack([m.visible_idx for m in masks])
        msk_idx = np.stack([m.masked_idx for m in masks])
        b = np.arange(len(chunk))[:, None]
        targets = toks[b, msk_idx]
        hs = model.forward_blocks(toks[b, vis_idx], vis_idx, isolate=False,
                                  upto=max(blocks))
        for k in blocks:
            pred = model.decode_block(k, hs[k - 1], vis_idx, msk_idx).data
            err = pred - targets
            per_clip[k].extend(np.mean(np.square(err, dtype=np.float64),
                                       axis=(1, 2)))
    return {k: float(np.mean(per_clip[k])) for k in blocks}


# --- representation similarity --------------------------------------------------

def cka(Xa, Xb):
    """Linear CKA between column-centered feature matrices (same clip rows)."""
    Xa = np.asarray(Xa, dtype=np.float64)
    Xb = np.asarray(Xb, dtype=np.float64)
    if Xa.shape[0] != Xb.shape[0]:
        raise ValueError(f"row counts differ: {Xa.shape[0]} vs {Xb.shape[0]}")
    if Xa.shape[0] < 2:
        raise ValueError("CKA needs at least two rows")
    Xa = Xa - Xa.mean(axis=0)
    Xb = Xb - Xb.mean(axis=0)
    na = np.linalg.norm(Xa.T @ Xa)
    nb = np.linalg.norm(Xb.T @ Xb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("CKA undefined for an all-zero centered matrix")
    return float(np.linalg.norm(Xa.T @ Xb) ** 2 / (na * nb))


@dataclass
class CpsResult:
    value: float
    n_clips: int          # clips actually contributing
    degenerate: list      # indices of all-constant clips that were skipped


def cps(H, max_clips=64, seed=0, eps=1e-6):
    """Cosine patch similarity: per clip, parameter-free LayerNorm each token,
    l2-normalize, average cosine over distinct token pairs; then average over
    a subsample of at most max_clips clips.

    Constant tokens LayerNorm to zero vectors (their normalization is guarded
    by eps, contributing zero cosines); a clip whose tokens are all constant
    is flagged degenerate and skipped.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 3:
        raise ValueError(f"expected (clips, tokens, dim), got shape {H.shape}")
    n, n_tok, _ = H.shape
    if n_tok < 2:
        raise ValueError("CPS needs at least two tokens per clip")
    if n > max_clips:
        pick = np.sort(spawn_rng(seed, "cps", "subsample")
                       .choice(n, size=max_clips, replace=False))
    else:
        pick = np.arange(n)

    vals, degenerate = [], []
    for i in pick:
        t = H[i]
        t = (t - t.mean(axis=1, keepdims=True)) / \
            np.sqrt(t.var(axis=1, keepdims=True) + eps)
        norms = np.linalg.norm(t, axis=1, keepdims=True)
        if np.all(norms < 1e-9):
            degenerate.append(int(i))
            continue
        t = t / np.maximum(norms, eps)
        G = t @ t.T
        vals.append((G.sum() - np.trace(G)) / (n_tok * (n_tok - 1)))
    if not vals:
        raise ValueError("all sampled clips are degenerate (constant tokens)")
    return CpsResult(value=float(np.mean(vals)), n_clips=len(vals),
                     degenerate=degenerate)


# --- occlusion probing -----------------------------------------------------------

@dataclass
class OcclusionResult:
    target: str
    acc_full: dict        # block -> full-view CV accuracy
    acc_occl: dict        # block -> mean occluded accuracy over locations
    occ_drop: dict        # block -> relative drop, or None when acc_full == 0
    per_location: dict    # block -> {location key: occluded accuracy}


def occ_drop(acc_full, acc_occl):
    """(acc_full - acc_occl) / acc_full; undefined (None) when acc_full == 0."""
    if acc_full == 0:
        return None
    return (acc_full - acc_occl) / acc_full


def occlusion_locations(grid, double=False):
    """Patch locations for occlusion: each spatial token cell, all frames kept
    at that cell. Single gratings keep one cell; double gratings keep a
    left-hemifield cell plus its horizontal mirror, one per hemifield."""
    hs, ws = grid.h_tokens, grid.w_tokens
    if not double:
        return [((hi, wi),) for hi in range(hs) for wi in range(ws)]
    if ws % 2:
        raise ValueError("double-grating occlusion needs an even token width")
    return [((hi, wi), (hi, ws - 1 - wi))
            for hi in range(hs) for wi in range(ws // 2)]


def occlude_frames(frames, grid, cells):
    """Zero every pixel outside the kept spatial cells (before tokenization)."""
    th, tw = grid.tubelet[1], grid.tubelet[2]
    out = np.zeros_like(frames)
    for hi, wi in cells:
        sl = (slice(None), slice(hi * th, (hi + 1) * th),
              slice(wi * tw, (wi + 1) * tw))
        out[sl] = frames[sl]
    return out


def occlude_and_probe(model, dataset, target, locations=None, C=1.0,
                      max_iter=1000, batch_size=32):
    """Full-view probe vs probes on re-extracted occluded embeddings.

    The identical stratified-CV probe protocol runs once on full clips and
    once per kept-patch location on occluded clips; OccDrop is averaged over
    locations. Needs the model (not just embeddings) because occlusion
    happens in pixel space prior to tokenization.
    """
    from .embeddings import extract

    if target not in dataset.folds:
        raise ValueError(f"no fold assignment for target {target!r}")
    double = dataset.spec.get("generator") == "double"
    if locations is None:
        locations = occlusion_locations(model.grid, double=double)
    y = np.asarray([c.labels[target] for c in dataset.clips])
    folds = dataset.folds[target]
    K = model.config.K

    full = extract(model, dataset, batch_size=batch_size)
    acc_full = {k + 1: probe_cv(full.X[k], y, folds, target=target, C=C,
                                max_iter=max_iter).accuracy for k in range(K)}

    per_location = {k: {} for k in acc_full}
    for cells in locations:
        occluded = Dataset(
            clips=[Clip(frames=occlude_frames(c.frames, model.grid, cells),
                        labels=c.labels, source_id=c.source_id, meta=c.meta)
                   for c in dataset.clips],
            folds=dataset.folds, spec=dataset.spec)
        emb = extract(model, occluded, batch_size=batch_size)
        key = "+".join(f"{hi},{wi}" for hi, wi in cells)
        for k in range(K):
            per_location[k + 1][key] = probe_cv(
                emb.X[k], y, folds, target=target, C=C,
                max_iter=max_iter).accuracy

    acc_occl = {k: float(np.mean(list(v.values())))
                for k, v in per_location.items()}
    drops = {k: occ_drop(acc_full[k], acc_occl[k]) for k in acc_full}
    return OcclusionResult(target=target, acc_full=acc_full, acc_occl=acc_occl,
                           occ_drop=drops, per_location=per_location)


# --- CKA vs delta-mAP pairing -----------------------------------------------------

def pair_cka_dmap(maps, ckas):
    """One row per block transition k -> k+1: (CKA_k, mAP_{k+1} - mAP_k)."""
    if len(ckas) != len(maps) - 1:
        raise ValueError(
            f"{len(maps)} per-block mAP values need {len(maps) - 1} transition "
            f"CKA values, got {len(ckas)}")
    return [{"transition": (k + 1, k + 2), "cka": float(ckas[k]),
             "delta_map": float(maps[k + 1] - maps[k])}
            for k in range(len(ckas))]
