"""Shared test oracles: finite-difference gradients and brute-force triplet mining."""

from __future__ import annotations

import itertools

import numpy as np

from metricemg.tensor import Tensor, grad_of


def numeric_grad(fn, tensors: list[Tensor], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of the scalar ``fn()`` with respect to each tensor's data."""
    out = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-10)
    return float(num / den)


def grad_check(fn, tensors: list[Tensor], h: float = 1e-6) -> float:
    """Largest relative error between analytic and numeric gradients over ``tensors``."""
    analytic = grad_of(fn(), tensors)
    numeric = numeric_grad(fn, tensors, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def brute_force_semihard(d: np.ndarray, labels: np.ndarray, alpha: float) -> set[tuple[int, int, int]]:
    """Every triple satisfying the semi-hard window, by exhaustive B^3 enumeration."""
    b = len(labels)
    return {
        (a, p, n)
        for a, p, n in itertools.product(range(b), repeat=3)
        if a != p
        and labels[a] == labels[p]
        and labels[n] != labels[a]
        and d[a, p] < d[a, n] < d[a, p] + alpha
    }


def brute_force_fallback(d: np.ndarray, labels: np.ndarray, alpha: float) -> set[tuple[int, int, int]]:
    """Fallback triples for anchor-positive pairs that have no semi-hard negative."""
    out = set()
    b = len(labels)
    for a, p in itertools.product(range(b), repeat=2):
        if a == p or labels[a] != labels[p]:
            continue
        negs = [n for n in range(b) if labels[n] != labels[a]]
        if not negs or any(d[a, p] < d[a, n] < d[a, p] + alpha for n in negs):
            continue
        farther = [n for n in negs if d[a, n] > d[a, p]]
        if farther:
            best = min(farther, key=lambda n: (d[a, n], n))
        else:
            best = min(negs, key=lambda n: (-d[a, n], n))
        out.add((a, p, best))
    return out
