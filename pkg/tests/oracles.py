"""Brute-force references shared by unit and acceptance tests."""

import itertools

import numpy as np


def grid_project(delta, feasible, half_width, levels=30, m=11, shrink=0.6):
    """argmin ||z - delta||^2 over ``feasible`` by zooming grid search.

    Each level lays an m^d grid around the best feasible point found so far
    and narrows the window; the origin is assumed feasible.
    """
    delta = np.asarray(delta, dtype=np.float64)
    d = delta.shape[0]
    offsets = np.array(list(itertools.product(np.linspace(-1.0, 1.0, m), repeat=d)))
    best = np.zeros(d)
    best_val = float(np.sum(delta**2))
    w = float(half_width)
    for _ in range(levels):
        pts = best + w * offsets
        ok = feasible(pts)
        if ok.any():
            cand = pts[ok]
            vals = np.sum((cand - delta) ** 2, axis=1)
            i = int(np.argmin(vals))
            if vals[i] < best_val:
                best, best_val = cand[i], float(vals[i])
        w *= shrink
    return best, best_val


def l1_feasible(eps, tol=1e-12):
    return lambda pts: np.abs(pts).sum(axis=1) <= eps + tol


def l1_box_feasible(x, eps, tol=1e-12):
    return lambda pts: (np.abs(pts).sum(axis=1) <= eps + tol) & np.all(pts >= -x - tol, axis=1) & np.all(
        pts <= 1.0 - x + tol, axis=1)
