"""Mode-specific normalization and one-hot encoding of tabular rows.

Each numeric feature becomes ``[scalar, mode one-hot]`` where the mode is a
component of a variational Gaussian mixture and the scalar is the distance to
that component's mean in units of four standard deviations, clipped to
``[-1, 1]``. Categorical features become plain one-hot blocks.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import BayesianGaussianMixture

from .data import DataError, RawTable, TableSchema

ENCODER_VERSION = 1

MAX_COMPONENTS = 10
WEIGHT_THRESHOLD = 0.005
STD_FLOOR = 1e-4
SCALE = 4.0


@dataclass(frozen=True)
class VgmEntry:
    """Fitted mixture for one numeric feature, in feature units."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    active: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        for name in ("weights", "means", "stds"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "active", np.asarray(self.active, dtype=bool))
        if not self.active.any():
            raise ValueError("mixture needs at least one active component")
        if np.any(self.stds <= 0):
            raise ValueError("component stddevs must be positive")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-6:
            raise ValueError("component weights must be non-negative and sum to 1")

    @property
    def n_modes(self) -> int:
        return int(self.active.sum())

    @property
    def active_means(self) -> np.ndarray:
        return self.means[self.active]

    @property
    def active_stds(self) -> np.ndarray:
        return self.stds[self.active]

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        """Posterior probability of each active component, shape ``(n, n_modes)``."""
        x = np.asarray(x, dtype=float)[:, None]
        mu, sd = self.active_means, self.active_stds
        w = self.weights[self.active]
        logp = np.log(w) - np.log(sd) - 0.5 * ((x - mu) / sd) ** 2
        return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))

    def to_dict(self) -> dict[str, Any]:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "active": self.active.tolist(),
            "lo": self.lo,
            "hi": self.hi,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "VgmEntry":
        return cls(**d)


def fit_vgm(
    values: Sequence[float],
    max_components: int = MAX_COMPONENTS,
    weight_threshold: float = WEIGHT_THRESHOLD,
    seed: int = 0,
) -> VgmEntry:
    """Fit a Dirichlet-process Gaussian mixture and deactivate light components."""
    x = np.asarray(values, dtype=float)
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise ValueError("values must be a non-empty sequence of finite reals")
    lo, hi = float(x.min()), float(x.max())
    center, spread = float(x.mean()), float(x.std())
    if spread == 0.0:
        return VgmEntry(np.ones(1), np.array([center]), np.array([STD_FLOOR]), np.ones(1, bool), lo, hi)
    z = ((x - center) / spread).reshape(-1, 1)
    n_comp = int(min(max_components, len(np.unique(x))))
    bgm = BayesianGaussianMixture(
        n_components=n_comp,
        weight_concentration_prior_type="dirichlet_process",
        weight_concentration_prior=0.001,
        max_iter=100,
        n_init=1,
        random_state=seed,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        bgm.fit(z)
    weights = bgm.weights_ / bgm.weights_.sum()
    active = weights > weight_threshold
    if not active.any():
        active[np.argmax(weights)] = True
    stds = np.maximum(np.sqrt(bgm.covariances_.reshape(-1)), STD_FLOOR) * spread
    means = bgm.means_.reshape(-1) * spread + center
    return VgmEntry(weights, means, stds, active, lo, hi)


def encode_numeric(
    x: np.ndarray | float,
    entry: VgmEntry,
    mode_selection: str = "argmax",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(scalars, mode_onehots)`` for one numeric feature.

    ``mode_selection="sample"`` draws the mode from the posterior
    responsibilities, ``"argmax"`` takes the most responsible one.
    """
    scalar_input = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    resp = entry.responsibilities(x)
    if mode_selection == "argmax":
        modes = resp.argmax(axis=1)
    elif mode_selection == "sample":
        rng = rng or np.random.default_rng()
        u = rng.random((len(x), 1))
        modes = np.minimum((resp.cumsum(axis=1) < u).sum(axis=1), entry.n_modes - 1)
    else:
        raise ValueError(f"mode_selection must be 'sample' or 'argmax', got {mode_selection!r}")
    mu, sd = entry.active_means[modes], entry.active_stds[modes]
    scalars = np.clip((x - mu) / (SCALE * sd), -1.0, 1.0)
    onehot = np.zeros((len(x), entry.n_modes))
    onehot[np.arange(len(x)), modes] = 1.0
    if scalar_input:
        return scalars[0], onehot[0]
    return scalars, onehot


def decode_numeric(
    scalar: np.ndarray | float,
    mode_onehot: np.ndarray,
    entry: VgmEntry,
    integer: bool = False,
    clamp: bool = False,
) -> np.ndarray | float:
    """Invert :func:`encode_numeric`; a soft mode vector is read by argmax."""
    scalar_input = np.ndim(scalar) == 0
    s = np.atleast_1d(np.asarray(scalar, dtype=float))
    m = np.atleast_2d(np.asarray(mode_onehot, dtype=float))
    if m.shape[1] != entry.n_modes:
        raise ValueError(f"mode vector width {m.shape[1]} != {entry.n_modes} active modes")
    if np.any(m.max(axis=1) <= 0):
        raise ValueError("mode indicator is all zero")
    modes = m.argmax(axis=1)
    x = entry.active_means[modes] + SCALE * entry.active_stds[modes] * np.clip(s, -1.0, 1.0)
    if clamp:
        x = np.clip(x, entry.lo, entry.hi)
    if integer:
        x = np.round(x)
    return float(x[0]) if scalar_input else x


@dataclass(frozen=True)
class Span:
    """A contiguous block of encoded columns."""

    feature: str
    kind: str  # "scalar", "mode" or "category"
    start: int
    end: int

    @property
    def width(self) -> int:
        return self.end - self.start

    @property
    def is_softmax(self) -> bool:
        return self.kind != "scalar"


class Encoder:
    """Fitted row encoder for one schema.

    Instances are never mutated after :meth:`fit` so they can be shared
    between threads.
    """

    def __init__(self, schema: TableSchema, vgm: dict[str, VgmEntry]):
        self.schema = schema
        self.vgm = dict(vgm)
        self.spans: list[Span] = []
        pos = 0
        for f in schema.features:
            if f.is_categorical:
                self.spans.append(Span(f.name, "category", pos, pos + len(f.categories)))
                pos += len(f.categories)
            else:
                k = self.vgm[f.name].n_modes
                self.spans.append(Span(f.name, "scalar", pos, pos + 1))
                self.spans.append(Span(f.name, "mode", pos + 1, pos + 1 + k))
                pos += 1 + k
        self.width = pos
        self._index = {f.name: {c: i for i, c in enumerate(f.categories)} for f in schema.categorical}

    @classmethod
    def fit(
        cls,
        table: RawTable | pd.DataFrame,
        schema: TableSchema | None = None,
        max_components: int = MAX_COMPONENTS,
        weight_threshold: float = WEIGHT_THRESHOLD,
        seed: int = 0,
    ) -> "Encoder":
        if isinstance(table, RawTable):
            schema, rows = table.schema, table.rows
        else:
            rows = table
            if schema is None:
                raise ValueError("schema required when fitting on a DataFrame")
        vgm = {
            f.name: fit_vgm(rows[f.name].to_numpy(float), max_components, weight_threshold, seed)
            for f in schema.numeric
        }
        return cls(schema, vgm)

    # layout helpers

    def category_span(self, feature: str) -> Span:
        for s in self.spans:
            if s.feature == feature and s.kind == "category":
                return s
        raise KeyError(f"{feature!r} is not a categorical feature")

    def category_position(self, feature: str, category: str) -> int:
        """Column of ``feature == category`` inside the concatenated category blocks."""
        offset = 0
        for f in self.schema.categorical:
            if f.name == feature:
                if category not in self._index[f.name]:
                    raise KeyError(f"{category!r} is not a category of {feature!r}")
                return offset + self._index[f.name][category]
            offset += len(f.categories)
        raise KeyError(f"{feature!r} is not a categorical feature")

    @property
    def category_width(self) -> int:
        return sum(len(f.categories) for f in self.schema.categorical)

    @property
    def category_columns(self) -> np.ndarray:
        """Encoded column index of every category position, in mask order."""
        return np.concatenate(
            [np.arange(s.start, s.end) for s in self.spans if s.kind == "category"]
        ) if self.schema.categorical else np.zeros(0, dtype=int)

    # encoding

    def transform(
        self,
        rows: RawTable | pd.DataFrame,
        mode_selection: str = "argmax",
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        if isinstance(rows, RawTable):
            rows = rows.rows
        out = np.zeros((len(rows), self.width), dtype=np.float32)
        if len(rows) == 0:
            return out
        for s in self.spans:
            col = rows[s.feature]
            if s.kind == "scalar":
                scal, onehot = encode_numeric(col.to_numpy(float), self.vgm[s.feature], mode_selection, rng)
                out[:, s.start] = scal
                out[:, s.end:s.end + onehot.shape[1]] = onehot
            elif s.kind == "category":
                idx = col.astype(str).map(self._index[s.feature])
                if idx.isna().any():
                    bad = col[idx.isna()].iloc[0]
                    raise DataError(f"feature {s.feature!r}: unknown category {bad!r}")
                out[np.arange(len(rows)), s.start + idx.to_numpy(int)] = 1.0
        return out

    def encode_row(self, row: dict[str, Any], mode_selection: str = "argmax") -> np.ndarray:
        return self.transform(pd.DataFrame([row]), mode_selection)[0]

    def inverse_transform(self, encoded: np.ndarray, clamp: bool = True) -> pd.DataFrame:
        """Decode hard or soft encoded rows; every softmax block is read by argmax.

        Integer-valued numeric features are rounded and, with ``clamp``,
        every numeric feature is kept within its fitted range.
        """
        encoded = np.atleast_2d(np.asarray(encoded, dtype=float))
        if encoded.shape[1] != self.width:
            raise ValueError(f"encoded width {encoded.shape[1]} != {self.width}")
        cols: dict[str, Any] = {}
        for s in self.spans:
            if s.width == 0:
                raise ValueError(f"zero-width block for {s.feature!r}")
            f = self.schema[s.feature]
            if s.kind == "scalar":
                mode = next(m for m in self.spans if m.feature == s.feature and m.kind == "mode")
                cols[s.feature] = decode_numeric(
                    encoded[:, s.start], encoded[:, mode.start:mode.end], self.vgm[s.feature],
                    integer=f.integer, clamp=clamp,
                ) if len(encoded) else np.zeros(0)
            elif s.kind == "category":
                idx = encoded[:, s.start:s.end].argmax(axis=1)
                cols[s.feature] = np.asarray(f.categories, dtype=object)[idx]
        return pd.DataFrame(cols, columns=self.schema.names)

    def decode_row(self, encoded: np.ndarray) -> dict[str, Any]:
        return self.inverse_transform(encoded[None, :]).iloc[0].to_dict()

    # persistence

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": ENCODER_VERSION,
            "schema": self.schema.to_dict(),
            "vgm": {k: v.to_dict() for k, v in self.vgm.items()},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Encoder":
        if d.get("version") != ENCODER_VERSION:
            raise ValueError(f"unsupported encoder version {d.get('version')!r}")
        schema = TableSchema.from_dict(d["schema"])
        return cls(schema, {k: VgmEntry.from_dict(v) for k, v in d["vgm"].items()})

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Encoder":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
