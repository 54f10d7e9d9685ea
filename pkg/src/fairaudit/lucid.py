"""Gradient-based inverse design baseline.

Uniform random inputs are pushed by projected gradient descent towards the
preferred output of a differentiable classifier whose weights stay fixed.
Numeric coordinates live in the ``[0, 1]`` box of the model's input
encoding; every one-hot block is relaxed to the probability simplex during
descent and decoded by argmax afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .blackbox import MLPClassifier
from .data import DataError, TableSchema
from .lucidgan import CanonicalSet
from .metrics import DistributionSummary, shared_bins, summarize

logger = logging.getLogger(__name__)


@dataclass
class InverseDesignConfig:
    n_samples: int = 1000
    step_size: float = 0.1
    max_iter: int = 1000
    threshold: float = 0.99
    seed: int = 0
    # halve the step per sample until its loss does not increase
    backtracking: bool = True
    max_halvings: int = 20

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.n_samples <= 0 or self.max_iter <= 0 or self.step_size <= 0:
            raise ValueError("n_samples, max_iter and step_size must be positive")


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row onto the probability simplex."""
    v = np.atleast_2d(v)
    n, k = v.shape
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, k + 1)
    cond = u - css / idx > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(n), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


@dataclass
class LucidResult:
    canonical: CanonicalSet
    initial: CanonicalSet
    converged: np.ndarray
    predictions: np.ndarray
    iterations: np.ndarray
    loss_trace: list[np.ndarray] = field(default_factory=list)

    @property
    def n_converged(self) -> int:
        return int(self.converged.sum())


class InverseDesign:
    def __init__(self, model: MLPClassifier, config: InverseDesignConfig | None = None):
        if not hasattr(model, "input_gradient"):
            raise TypeError("inverse design needs a model with input gradients")
        self.model = model
        self.config = config or InverseDesignConfig()
        enc = model.encoder
        self.blocks = [(a, b) for f, (_, a, b) in zip(enc.features, enc.blocks) if f.is_categorical]
        self.scalar_cols = [a for f, (_, a, b) in zip(enc.features, enc.blocks) if not f.is_categorical]

    def initial(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform draws: numerics on ``[0, 1]``, one-hot blocks uniform on the simplex."""
        x = np.zeros((n, self.model.encoder.width))
        for c in self.scalar_cols:
            x[:, c] = rng.random(n)
        for a, b in self.blocks:
            x[:, a:b] = rng.dirichlet(np.ones(b - a), size=n)
        return x

    def project(self, x: np.ndarray) -> np.ndarray:
        x = x.copy()
        if self.scalar_cols:
            x[:, self.scalar_cols] = np.clip(x[:, self.scalar_cols], 0.0, 1.0)
        for a, b in self.blocks:
            x[:, a:b] = project_simplex(x[:, a:b])
        return x

    def run(self, target: str = "positive", trace: bool = False) -> LucidResult:
        if target not in ("positive", "negative"):
            raise ValueError("target must be 'positive' or 'negative'")
        cfg = self.config
        label = 1 if target == "positive" else 0
        rng = np.random.default_rng(cfg.seed)
        x0 = self.initial(cfg.n_samples, rng)
        x = x0.copy()
        model = self.model

        def done(p):
            return p >= cfg.threshold if label == 1 else p <= 1.0 - cfg.threshold

        p = model.predict_encoded(x)
        active = ~done(p)
        iters = np.zeros(cfg.n_samples, dtype=int)
        losses = model.loss(x, label)
        traces = [losses.copy()] if trace else []
        for _ in range(cfg.max_iter):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            xa = x[idx]
            grad = model.input_gradient(xa, label)
            step = np.full(len(idx), cfg.step_size)
            cand = self.project(xa - step[:, None] * grad)
            if cfg.backtracking:
                new_loss = model.loss(cand, label)
                worse = new_loss > losses[idx]
                for _ in range(cfg.max_halvings):
                    if not worse.any():
                        break
                    step[worse] /= 2
                    cand[worse] = self.project(xa[worse] - step[worse, None] * grad[worse])
                    new_loss[worse] = model.loss(cand[worse], label)
                    worse = new_loss > losses[idx]
                # keep the old point where no step helped
                cand[worse] = xa[worse]
                new_loss[worse] = losses[idx][worse]
                losses[idx] = new_loss
            else:
                losses[idx] = model.loss(cand, label)
            x[idx] = cand
            iters[idx] += 1
            p[idx] = model.predict_encoded(cand)
            active[idx] = ~done(p[idx])
            if trace:
                traces.append(losses.copy())
        converged = done(p)
        if not converged.any():
            logger.warning("no sample reached the %s threshold", target)
        prov = {"method": "lucid", "seed": cfg.seed, "target": target, "n_converged": int(converged.sum())}
        enc = model.encoder
        canon = CanonicalSet(enc.inverse_transform(x), float(label), {}, prov)
        init = CanonicalSet(enc.inverse_transform(x0), float("nan"), {}, {**prov, "snapshot": "initial"})
        return LucidResult(canon, init, converged, p, iters, traces)


def lucid_generate(model: MLPClassifier, target: str = "positive", config: InverseDesignConfig | None = None,
                   trace: bool = False) -> LucidResult:
    """Canonical set by inverse design, returned together with its random starting set."""
    return InverseDesign(model, config).run(target, trace)


@dataclass
class LucidComparison:
    categorical: dict[str, pd.Series]
    numeric: dict[str, pd.DataFrame]
    canonical: DistributionSummary
    initial: DistributionSummary


def lucid_compare(canonical: CanonicalSet, initial: CanonicalSet, schema: TableSchema) -> LucidComparison:
    """Canonical-minus-initial category frequencies and paired numeric histograms."""
    if list(canonical.rows.columns) != list(initial.rows.columns):
        raise DataError("canonical and initial sets have different columns")
    feats = list(canonical.rows.columns)
    bins = shared_bins([canonical, initial], schema)
    a = summarize(canonical, schema, bins, feats)
    b = summarize(initial, schema, bins, feats)
    cat = {k: a.frequencies[k] - b.frequencies[k] for k in a.frequencies}
    num = {
        k: pd.DataFrame({"bin_left": e[:-1], "bin_right": e[1:], "canonical": m, "initial": b.histograms[k][1]})
        for k, (e, m) in a.histograms.items()
    }
    return LucidComparison(cat, num, a, b)
