"""The model under audit.

Anything with ``predict(rows) -> p(positive)`` can be audited. Scored tables
(rows plus recorded predictions) allow audits with no model access at all;
the built-in MLP is the differentiable subject used for the LUCID baseline.
"""

from __future__ import annotations

import io
import itertools
import json
import logging
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import pandas as pd
import torch
from torch import nn

from .data import DataError, RawTable, TableSchema, _coerce_frame, split

logger = logging.getLogger(__name__)

PREDICTION_COLUMN = "__prediction__"
MODEL_VERSION = 1


@runtime_checkable
class ModelUnderAudit(Protocol):
    def predict(self, rows: pd.DataFrame) -> np.ndarray:
        """Probability of the preferred outcome for every row."""
        ...


class ConstantModel:
    """Stub returning the same probability for every row."""

    def __init__(self, p: float):
        self.p = float(p)

    def predict(self, rows: pd.DataFrame) -> np.ndarray:
        return np.full(len(rows), self.p)


class SubprocessModel:
    """Score rows with an external program.

    The command receives the model-input columns as CSV on stdin and must
    print one probability per row on stdout (a bare column, with or without
    a header).
    """

    def __init__(self, command: Sequence[str] | str, columns: Sequence[str] | None = None, timeout: float = 600):
        self.command = command
        self.columns = list(columns) if columns is not None else None
        self.timeout = timeout

    def predict(self, rows: pd.DataFrame) -> np.ndarray:
        if len(rows) == 0:
            return np.zeros(0)
        frame = rows[self.columns] if self.columns else rows
        try:
            res = subprocess.run(
                self.command, input=frame.to_csv(index=False), capture_output=True, text=True,
                shell=isinstance(self.command, str), timeout=self.timeout, check=True,
            )
        except subprocess.CalledProcessError as e:
            raise DataError(f"scorer exited with status {e.returncode}: {e.stderr.strip()[-500:]}") from e
        except subprocess.TimeoutExpired as e:
            raise DataError(f"scorer timed out after {self.timeout}s") from e
        values = [ln.strip() for ln in res.stdout.splitlines() if ln.strip()]
        try:
            float(values[0])
        except (ValueError, IndexError):
            values = values[1:]
        p = np.asarray([float(v) for v in values])
        if len(p) != len(rows):
            raise DataError(f"scorer returned {len(p)} predictions for {len(rows)} rows")
        return p


@dataclass(frozen=True)
class ScoredTable:
    table: RawTable
    predictions: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.predictions, dtype=float).reshape(-1)
        if len(p) != len(self.table):
            raise DataError(f"{len(p)} predictions for {len(self.table)} rows")
        bad = np.flatnonzero(~((p >= 0) & (p <= 1)))
        if bad.size:
            raise DataError(f"prediction {p[bad[0]]!r} at row {bad[0]} is outside [0, 1]")
        object.__setattr__(self, "predictions", p)

    @property
    def schema(self) -> TableSchema:
        return self.table.schema

    def __len__(self) -> int:
        return len(self.table)


def score_table(model: ModelUnderAudit, table: RawTable) -> ScoredTable:
    inputs = table.schema.model_inputs
    missing = [c for c in inputs if c not in table.rows.columns]
    if missing:
        raise DataError(f"missing model-input columns {missing}")
    p = np.asarray(model.predict(table.rows[inputs]), dtype=float) if len(table) else np.zeros(0)
    return ScoredTable(table, p)


def write_scored_csv(scored: ScoredTable, path: str | Path) -> None:
    df = scored.table.rows.copy()
    if scored.table.labels is not None and scored.schema.label_column:
        df[scored.schema.label_column] = scored.table.labels.to_numpy()
    df[PREDICTION_COLUMN] = scored.predictions
    df.to_csv(path, index=False, float_format="%.17g")


def load_scored_csv(path: str | Path, schema: TableSchema, prediction_column: str = PREDICTION_COLUMN) -> ScoredTable:
    df = pd.read_csv(path, keep_default_na=False, na_values=[""], float_precision="round_trip")
    if prediction_column not in df.columns:
        raise DataError(f"{Path(path).name}: no {prediction_column!r} column")
    p = pd.to_numeric(df[prediction_column], errors="coerce").to_numpy(float)
    bad = np.flatnonzero(~((p >= 0) & (p <= 1)))
    if bad.size:
        raise DataError(f"{Path(path).name}: prediction {p[bad[0]]!r} at row {bad[0]} is outside [0, 1]")
    missing = [n for n in schema.names if n not in df.columns]
    if missing:
        raise DataError(f"{Path(path).name}: columns {missing} not found")
    labels = None
    if schema.label_column and schema.label_column in df.columns:
        labels = df[schema.label_column]
        if isinstance(schema.positive_label, str):
            labels = labels.astype(str)
    table = _coerce_frame(df, schema, labels, "error", f"{Path(path).name}: ")
    if table.dropped:
        raise DataError(f"{Path(path).name}: {table.dropped} rows with missing cells")
    return ScoredTable(table, p)


class InputEncoder:
    """Min-max scaled numerics and one-hot categoricals over the model inputs.

    Every encoded coordinate lies in ``[0, 1]`` for values inside the
    training range, which is the box used by inverse design.
    """

    def __init__(self, schema: TableSchema, lo: dict[str, float], hi: dict[str, float]):
        self.schema = schema
        self.features = [schema[n] for n in schema.model_inputs]
        self.lo, self.hi = dict(lo), dict(hi)
        self.blocks: list[tuple[str, int, int]] = []
        pos = 0
        for f in self.features:
            w = len(f.categories) if f.is_categorical else 1
            self.blocks.append((f.name, pos, pos + w))
            pos += w
        self.width = pos

    @classmethod
    def fit(cls, table: RawTable) -> "InputEncoder":
        rows = table.rows
        num = [table.schema[n] for n in table.schema.model_inputs if not table.schema[n].is_categorical]
        return cls(table.schema, {f.name: float(rows[f.name].min()) for f in num},
                   {f.name: float(rows[f.name].max()) for f in num})

    def transform(self, rows: pd.DataFrame) -> np.ndarray:
        out = np.zeros((len(rows), self.width), dtype=np.float32)
        for f, (name, a, b) in zip(self.features, self.blocks):
            if f.is_categorical:
                idx = rows[name].astype(str).map({c: i for i, c in enumerate(f.categories)})
                if idx.isna().any():
                    raise DataError(f"feature {name!r}: unknown category {rows[name][idx.isna()].iloc[0]!r}")
                out[np.arange(len(rows)), a + idx.to_numpy(int)] = 1.0
            else:
                span = self.hi[name] - self.lo[name] or 1.0
                out[:, a] = (rows[name].to_numpy(float) - self.lo[name]) / span
        return out

    def inverse_transform(self, x: np.ndarray) -> pd.DataFrame:
        """Decode by argmax per category block; numerics are clipped to the training range."""
        cols = {}
        for f, (name, a, b) in zip(self.features, self.blocks):
            if f.is_categorical:
                cols[name] = np.asarray(f.categories, dtype=object)[x[:, a:b].argmax(axis=1)]
            else:
                v = self.lo[name] + np.clip(x[:, a], 0, 1) * (self.hi[name] - self.lo[name])
                cols[name] = np.round(v) if f.integer else v
        return pd.DataFrame(cols)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi}


def _mlp(n_in: int, hidden: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for h in hidden:
        layers += [nn.Linear(n_in, h), nn.ReLU()]
        n_in = h
    layers.append(nn.Linear(n_in, 2))
    return nn.Sequential(*layers)


class MLPClassifier:
    """Fully connected ReLU network with a two-node softmax output."""

    def __init__(self, encoder: InputEncoder, hidden: Sequence[int], net: nn.Sequential | None = None):
        self.encoder = encoder
        self.hidden = list(hidden)
        self.net = net if net is not None else _mlp(encoder.width, hidden)
        self.net.eval()
        self.validation_accuracy: float | None = None

    @property
    def schema(self) -> TableSchema:
        return self.encoder.schema

    def predict_encoded(self, x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            logits = self.net(torch.as_tensor(np.asarray(x), dtype=torch.float32))
            return torch.softmax(logits, dim=1)[:, 1].double().numpy()

    def predict(self, rows: pd.DataFrame) -> np.ndarray:
        return self.predict_encoded(self.encoder.transform(rows))

    def loss(self, x: np.ndarray, target: int) -> np.ndarray:
        """Per-row cross-entropy between the prediction and ``target``."""
        with torch.no_grad():
            logits = self.net(torch.as_tensor(x, dtype=torch.float64).to(self._dtype))
            t = torch.full((len(x),), int(target), dtype=torch.long)
            return nn.functional.cross_entropy(logits, t, reduction="none").double().numpy()

    def input_gradient(self, x: np.ndarray, target: int) -> np.ndarray:
        """Gradient of each row's cross-entropy to ``target`` with respect to the encoded input."""
        xt = torch.as_tensor(np.asarray(x), dtype=self._dtype).clone().requires_grad_(True)
        t = torch.full((len(xt),), int(target), dtype=torch.long)
        loss = nn.functional.cross_entropy(self.net(xt), t, reduction="sum")
        (grad,) = torch.autograd.grad(loss, xt)
        return grad.detach().double().numpy()

    @property
    def _dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def save(self, path: str | Path) -> None:
        torch.save({
            "version": MODEL_VERSION,
            "schema": self.schema.to_dict(),
            "schema_fingerprint": self.schema.fingerprint(),
            "encoder": self.encoder.to_dict(),
            "hidden": self.hidden,
            "state": self.net.state_dict(),
            "validation_accuracy": self.validation_accuracy,
        }, path)

    @classmethod
    def load(cls, path: str | Path, schema: TableSchema | None = None) -> "MLPClassifier":
        blob = torch.load(path, weights_only=False)
        stored = TableSchema.from_dict(blob["schema"])
        if schema is not None and schema.fingerprint() != blob["schema_fingerprint"]:
            raise DataError("model was trained on a different schema")
        enc = InputEncoder(stored, blob["encoder"]["lo"], blob["encoder"]["hi"])
        model = cls(enc, blob["hidden"])
        model.net.load_state_dict(blob["state"])
        model.net.eval()
        model.validation_accuracy = blob.get("validation_accuracy")
        return model


SEARCH_SPACE = [list(w) for depth in (1, 2, 3) for w in [(u,) * depth for u in (32, 64, 128, 256)]]


def _fit_net(net, x, y, xv, yv, epochs, batch_size, lr, gen) -> float:
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = len(x)
    for _ in range(epochs):
        net.train()
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch_size):
            b = perm[i:i + batch_size]
            opt.zero_grad()
            nn.functional.cross_entropy(net(x[b]), y[b]).backward()
            opt.step()
    net.eval()
    with torch.no_grad():
        return (net(xv).argmax(1) == yv).float().mean().item()


def train_mlp(
    train: RawTable,
    validation_fraction: float = 0.2,
    search_space: Sequence[Sequence[int]] | None = None,
    seed: int = 0,
    epochs: int = 20,
    batch_size: int = 256,
    lr: float = 1e-3,
) -> MLPClassifier:
    """Pick the hidden layout with the best accuracy on a held-out validation split.

    Every candidate trains for a fixed number of epochs on the remaining
    rows; the validation split is only used to compare layouts. The returned
    model's ``validation_accuracy`` attribute holds the selection score.
    """
    if train.labels is None:
        raise DataError("training data needs labels")
    if train.labels.nunique() != 2:
        raise DataError("labels must be binary")
    fit_part, val_part = split(train, validation_fraction, seed)
    enc = InputEncoder.fit(fit_part)
    x = torch.as_tensor(enc.transform(fit_part.rows))
    y = torch.as_tensor(fit_part.y, dtype=torch.long)
    xv = torch.as_tensor(enc.transform(val_part.rows))
    yv = torch.as_tensor(val_part.y, dtype=torch.long)
    best: MLPClassifier | None = None
    for hidden in search_space or SEARCH_SPACE:
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        model = MLPClassifier(enc, hidden)
        acc = _fit_net(model.net, x, y, xv, yv, epochs, batch_size, lr, gen)
        logger.info("hidden %s: validation accuracy %.4f", hidden, acc)
        if best is None or acc > best.validation_accuracy:
            model.validation_accuracy = acc
            best = model
    return best
