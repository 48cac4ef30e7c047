"""Seeded synthetic 3D source clouds for the experiment pipeline."""

from __future__ import annotations

import numpy as np

GENERATORS = ("s_curve", "spiral", "gaussian_mixture")


def s_curve(n: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    t = 3.0 * np.pi * (rng.uniform(size=n) - 0.5)
    pts = np.column_stack([np.sin(t), 2.0 * rng.uniform(size=n),
                           np.sign(t) * (np.cos(t) - 1.0)])
    return pts + noise * rng.normal(size=pts.shape)


def spiral(n: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    t = 4.0 * np.pi * rng.uniform(size=n)
    r = 0.25 + t / (4.0 * np.pi)
    pts = np.column_stack([r * np.cos(t), r * np.sin(t), t / (2.0 * np.pi)])
    return pts + noise * rng.normal(size=pts.shape)


def gaussian_mixture(n: int, noise: float, rng: np.random.Generator,
                     components: int = 3) -> np.ndarray:
    centers = rng.uniform(-1.5, 1.5, size=(components, 3))
    labels = rng.integers(0, components, size=n)
    spread = 0.25 + noise
    return centers[labels] + spread * rng.normal(size=(n, 3))


def make_cloud(shape: str, n: int, noise: float, seed: int) -> np.ndarray:
    """Sample n points from the named 3D generator, deterministically."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    if shape == "s_curve":
        return s_curve(n, noise, rng)
    if shape == "spiral":
        return spiral(n, noise, rng)
    if shape == "gaussian_mixture":
        return gaussian_mixture(n, noise, rng)
    raise ValueError(f"unknown generator {shape!r}; choose from {GENERATORS}")
