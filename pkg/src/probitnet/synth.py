"""Synthetic click streams with known ground truth.

Features are split into equally sized field groups and every instance
activates exactly one feature per group, so the same stream is valid input
for any of the model families. Labels are drawn from a ground-truth
pairwise-interaction model (plain or field-aware) whose intercept is tuned
so the stream hits a requested base click rate. Useful for trying the CLI
without real data and for the learning checks in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import SparseInstance
from .errors import InvalidConfig

__all__ = ["GroundTruth", "make_generator", "sample_stream"]


@dataclass
class GroundTruth:
    """Frozen parameters of a synthetic click model."""

    kind: str  # "fm" or "ffm"
    n_features: int
    n_fields: int
    group_size: int
    latents: np.ndarray  # (n_features, rank) or (n_features, n_fields, rank)
    biases: np.ndarray  # (n_features,)
    intercept: float
    base_ctr: float

    def field_of(self, feature: int) -> int:
        return feature // self.group_size + 1

    def score(self, features: np.ndarray) -> np.ndarray:
        """Raw interaction scores for a (batch, M) array of feature ids."""
        s = self.biases[features].sum(axis=1) + self.intercept
        m = features.shape[1]
        if self.kind == "fm":
            u = self.latents[features]  # (batch, M, rank)
            total = u.sum(axis=1)
            s = s + 0.5 * ((total * total).sum(axis=1) - (u * u).sum(axis=(1, 2)))
        else:
            for i in range(m):
                for j in range(i + 1, m):
                    # One feature per group, in order: feature i sits in field i+1.
                    ui = self.latents[features[:, i], j, :]
                    uj = self.latents[features[:, j], i, :]
                    s = s + (ui * uj).sum(axis=1)
        return s

    def click_probabilities(self, features: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.score(features)))


def _draw_feature_matrix(rng, n_features, n_fields, count):
    group = n_features // n_fields
    cols = []
    for g in range(n_fields):
        cols.append(g * group + rng.integers(0, group, size=count))
    return np.stack(cols, axis=1)


def make_generator(
    kind: str = "fm",
    n_features: int = 30,
    n_fields: int = 5,
    rank: int = 2,
    base_ctr: float = 0.05,
    interaction_scale: float = 0.9,
    bias_scale: float = 0.25,
    seed: int = 0,
) -> GroundTruth:
    """Draw and calibrate a ground-truth click model.

    ``kind="fm"`` gives each feature one rank-``rank`` latent vector;
    ``kind="ffm"`` gives it one per opposing field, so interaction strength
    depends on the field pair and only a field-aware model can represent it
    exactly. The intercept is tuned by bisection on a probe sample until
    the mean click probability matches ``base_ctr``.
    """
    if kind not in ("fm", "ffm"):
        raise InvalidConfig(f"kind must be 'fm' or 'ffm', got {kind!r}")
    if n_features % n_fields != 0:
        raise InvalidConfig("n_features must divide evenly into n_fields groups")
    rng = np.random.default_rng(seed)
    if kind == "fm":
        latents = rng.standard_normal((n_features, rank)) * interaction_scale
    else:
        latents = rng.standard_normal((n_features, n_fields, rank)) * interaction_scale
    biases = rng.standard_normal(n_features) * bias_scale
    truth = GroundTruth(
        kind=kind,
        n_features=n_features,
        n_fields=n_fields,
        group_size=n_features // n_fields,
        latents=latents,
        biases=biases,
        intercept=0.0,
        base_ctr=base_ctr,
    )
    probe = _draw_feature_matrix(rng, n_features, n_fields, 20_000)
    scores = truth.score(probe)
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        mean_p = float(np.mean(1.0 / (1.0 + np.exp(-(scores + mid)))))
        if mean_p < base_ctr:
            lo = mid
        else:
            hi = mid
    truth.intercept = 0.5 * (lo + hi)
    return truth


def sample_stream(
    truth: GroundTruth, n: int, seed: int = 1
) -> tuple[list[SparseInstance], np.ndarray]:
    """Draw n labeled instances; also returns their true click probabilities."""
    rng = np.random.default_rng(seed)
    feats = _draw_feature_matrix(rng, truth.n_features, truth.n_fields, n)
    probs = truth.click_probabilities(feats)
    labels = np.where(rng.random(n) < probs, 1, -1)
    fields = tuple(range(1, truth.n_fields + 1))
    instances = [
        SparseInstance(int(labels[i]), fields, tuple(int(x) for x in feats[i]))
        for i in range(n)
    ]
    return instances, probs
