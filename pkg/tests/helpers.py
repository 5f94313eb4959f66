"""Shared test utilities: finite-difference gradient checking and tiny fixtures."""

from __future__ import annotations

import numpy as np

import fedpull as fp
from fedpull.model import loss_with_params


def fd_gradient_check(model, batch, n_coords, rng, step=1e-3):
    """Compare analytic gradients against central finite differences on a
    float64 forward pass at `n_coords` uniformly sampled coordinates.

    Returns (n_checked, n_failed, worst_relative_error).
    """
    cfg = model.config
    grads = fp.backward(model, batch)
    params = model.arrays64()
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    offsets = np.cumsum(sizes) - sizes
    failed = 0
    worst = 0.0
    coords = rng.choice(int(sizes.sum()), size=n_coords, replace=False)
    for flat in coords:
        ti = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[ti]
        idx = np.unravel_index(int(flat) - int(offsets[ti]), params[name].shape)
        orig = params[name][idx]
        params[name][idx] = orig + step
        lp = loss_with_params(cfg, params, batch)
        params[name][idx] = orig - step
        lm = loss_with_params(cfg, params, batch)
        params[name][idx] = orig
        fd = (lp - lm) / (2.0 * step)
        an = float(grads[name].as_matrix()[idx])
        if abs(fd) < 1e-12 and abs(an) < 1e-12:
            continue
        rel = abs(an - fd) / max(abs(an), abs(fd))
        worst = max(worst, rel)
        if rel > 1e-4:
            failed += 1
    return len(coords), failed, worst


def small_corpus(kind="copy", size=60, seed=5):
    return fp.generate_domain(fp.DomainSpec(kind=kind, size=size, seed=seed))


def models_equal(a, b) -> bool:
    if a.names() != b.names():
        return False
    return all(np.array_equal(a.tensors[n].values, b.tensors[n].values) for n in a.names())
