"""Conditional tabular GAN trained on a black box's inputs and predictions.

The generator is conditioned on a prediction value and a masked one-hot
vector that selects one category of one categorical feature. After training,
fixing the prediction at 1 or 0 yields the positive and negative canonical
sets of the model under audit; fixing the mask yields sets for a chosen
subgroup.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.nn import functional as F

from .blackbox import ScoredTable
from .data import DataError, TableSchema
from .transforms import Encoder

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = 1
PREDICTION_TARGET_COLUMN = "__prediction_target__"


class TrainingDivergence(RuntimeError):
    """Raised when a loss becomes non-finite."""


class GenerationError(RuntimeError):
    pass


@dataclass
class GeneratorSpec:
    noise_dim: int = 128
    hidden: tuple[int, ...] = (256, 256)


@dataclass
class CriticSpec:
    hidden: tuple[int, ...] = (256, 256)
    dropout: float = 0.5
    pac: int = 10


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 500
    critic_steps: int = 1
    gp_lambda: float = 10.0
    temperature: float = 0.2
    generator_lr: float = 2e-4
    critic_lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.9)
    weight_decay: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("epochs", "batch_size", "critic_steps", "gp_lambda", "temperature", "generator_lr", "critic_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


# condition sampling


def log_frequency_weights(counts) -> np.ndarray:
    """Sampling probabilities proportional to ``log(1 + count)``."""
    w = np.log1p(np.asarray(counts, dtype=float))
    total = w.sum()
    if total <= 0:
        raise DataError("no category has any support")
    return w / total


NEIGHBOURHOOD = 0.05  # share of rows treated as "near" a target prediction
MIN_NEIGHBOURS = 50


@dataclass
class ConditionBatch:
    predictions: np.ndarray  # (n,)
    mask: np.ndarray  # (n, category_width)
    features: np.ndarray  # index into categorical features
    categories: np.ndarray  # category index within the feature
    rows: np.ndarray  # matched real row, -1 when not drawn from data

    def vectors(self) -> np.ndarray:
        return np.concatenate([self.predictions[:, None], self.mask], axis=1).astype(np.float32)


class ConditionSampler:
    """Training-by-sampling over the categorical features of an encoded table.

    A feature is picked uniformly, a category by log-frequency, then a real
    row with that category whose recorded prediction goes into the condition.
    """

    def __init__(self, encoder: Encoder, rows: pd.DataFrame | None = None, predictions: np.ndarray | None = None,
                 counts: list[np.ndarray] | None = None, codes: np.ndarray | None = None):
        self.encoder = encoder
        self.features = encoder.schema.categorical
        self.offsets = np.cumsum([0] + [len(f.categories) for f in self.features])[:-1]
        self.width = encoder.category_width
        self.predictions = None if predictions is None else np.asarray(predictions, dtype=float)
        self.members: list[list[np.ndarray]] = []
        if rows is not None:
            codes = np.stack([pd.Categorical(rows[f.name], categories=f.categories).codes for f in self.features],
                             axis=1) if self.features else np.zeros((len(rows), 0), dtype=int)
        self.codes = None if codes is None else np.asarray(codes, dtype=np.int16)
        if self.codes is not None:
            counts = []
            for j, f in enumerate(self.features):
                c = self.codes[:, j]
                order = np.argsort(c, kind="stable")
                bounds = np.searchsorted(c[order], np.arange(len(f.categories) + 1))
                self.members.append([order[bounds[i]:bounds[i + 1]] for i in range(len(f.categories))])
                counts.append(np.diff(bounds))
        self.counts = [np.asarray(c, dtype=float) for c in (counts or [])]
        self.probs = [log_frequency_weights(c) for c in self.counts]
        self.n_rows = 0 if self.codes is None else len(self.codes)

    def mask_for(self, feature: str, category: str) -> np.ndarray:
        m = np.zeros(self.width, dtype=np.float32)
        m[self.encoder.category_position(feature, category)] = 1.0
        return m

    def sample_masks(self, n: int, rng: np.random.Generator, target: float | None = None) -> ConditionBatch:
        """Feature and category draws only, without matching rows.

        With ``target`` the draw follows the training distribution of masks
        restricted to the rows whose prediction is closest to ``target``.
        """
        mask = np.zeros((n, self.width), dtype=np.float32)
        if not self.features:
            return ConditionBatch(np.zeros(n), mask, np.full(n, -1), np.full(n, -1), np.full(n, -1))
        if target is None:
            feats = rng.integers(len(self.features), size=n)
            cats = np.empty(n, dtype=int)
            for j in np.unique(feats):
                sel = feats == j
                cats[sel] = rng.choice(len(self.probs[j]), size=int(sel.sum()), p=self.probs[j])
        else:
            joint = self.conditional_probs(target)
            flat = rng.choice(len(joint), size=n, p=joint)
            feats = np.searchsorted(self.offsets, flat, side="right") - 1
            cats = flat - self.offsets[feats]
        mask[np.arange(n), self.offsets[feats] + cats] = 1.0
        return ConditionBatch(np.full(n, np.nan if target is None else target), mask, feats, cats, np.full(n, -1))

    def conditional_probs(self, target: float, neighbourhood: float = NEIGHBOURHOOD) -> np.ndarray:
        """Joint probability of every (feature, category) mask given a prediction near ``target``.

        Under training-by-sampling a mask and row have probability
        ``w_jk / (F * count_jk)``; summing over the rows nearest to ``target``
        gives the returned vector, laid out like the mask.
        """
        if self.predictions is None or self.codes is None:
            raise DataError("sampler was built without data")
        n = len(self.predictions)
        m = min(n, max(int(np.ceil(neighbourhood * n)), MIN_NEIGHBOURS))
        near = np.argsort(np.abs(self.predictions - target), kind="stable")[:m]
        parts = []
        for j, f in enumerate(self.features):
            hits = np.bincount(self.codes[near, j], minlength=len(f.categories)).astype(float)
            with np.errstate(invalid="ignore", divide="ignore"):
                frac = np.where(self.counts[j] > 0, hits / self.counts[j], 0.0)
            parts.append(self.probs[j] * frac)
        joint = np.concatenate(parts)
        return joint / joint.sum()

    def sample(self, n: int, rng: np.random.Generator) -> ConditionBatch:
        """Conditions paired with real rows; each prediction is that row's prediction."""
        if self.predictions is None:
            raise DataError("sampler was built without data")
        batch = self.sample_masks(n, rng)
        if not self.features:
            batch.rows = rng.integers(self.n_rows, size=n)
        else:
            u = rng.random(n)
            for j in np.unique(batch.features):
                for k in np.unique(batch.categories[batch.features == j]):
                    sel = (batch.features == j) & (batch.categories == k)
                    pool = self.members[j][k]
                    if len(pool) == 0:
                        raise DataError(f"category {self.features[j].categories[k]!r} has no support")
                    batch.rows[sel] = pool[(u[sel] * len(pool)).astype(int)]
        batch.predictions = self.predictions[batch.rows]
        return batch


# networks


class Residual(nn.Module):
    def __init__(self, i: int, o: int):
        super().__init__()
        self.fc = nn.Linear(i, o)
        self.bn = nn.BatchNorm1d(o)

    def forward(self, x):
        return torch.cat([F.relu(self.bn(self.fc(x))), x], dim=1)


class Generator(nn.Module):
    def __init__(self, in_dim: int, hidden, out_dim: int):
        super().__init__()
        layers = []
        dim = in_dim
        for h in hidden:
            layers.append(Residual(dim, h))
            dim += h
        layers.append(nn.Linear(dim, out_dim))
        self.seq = nn.Sequential(*layers)

    def forward(self, x):
        return self.seq(x)


class Critic(nn.Module):
    """Scores packs of ``pac`` rows (each concatenated with its condition)."""

    def __init__(self, in_dim: int, hidden, dropout: float = 0.5, pac: int = 10):
        super().__init__()
        self.pac = pac
        self.pac_dim = in_dim * pac
        layers: list[nn.Module] = []
        dim = self.pac_dim
        for h in hidden:
            layers += [nn.Linear(dim, h), nn.LeakyReLU(0.2), nn.Dropout(dropout)]
            dim = h
        layers.append(nn.Linear(dim, 1))
        self.seq = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[0] % self.pac:
            raise ValueError(f"batch of {x.shape[0]} rows is not a multiple of pac={self.pac}")
        return self.seq(x.reshape(-1, self.pac_dim))


def activate(raw: torch.Tensor, encoder: Encoder, temperature: float) -> torch.Tensor:
    """Tanh on scalar columns, Gumbel-Softmax on every mode and category block."""
    parts = []
    for s in encoder.spans:
        chunk = raw[:, s.start:s.end]
        if s.kind == "scalar":
            parts.append(torch.tanh(chunk))
        else:
            parts.append(F.gumbel_softmax(chunk, tau=temperature, hard=False))
    return torch.cat(parts, dim=1)


def generator_forward(generator: Generator, noise: torch.Tensor, cond: torch.Tensor, encoder: Encoder,
                      temperature: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(raw logits, activated row)`` for noise and condition vectors."""
    raw = generator(torch.cat([noise, cond], dim=1))
    return raw, activate(raw, encoder, temperature)


def critic_forward(critic: Critic, rows: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    return critic(torch.cat([rows, cond], dim=1))


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    pac: int,
    coefficient: float = 10.0,
    alpha: torch.Tensor | None = None,
) -> torch.Tensor:
    """WGAN-GP term on packs of interpolated critic inputs.

    One interpolation weight is drawn per pack; the gradient norm is taken
    over the whole pack since the critic scores packs.
    """
    if real.shape != fake.shape:
        raise ValueError("real and fake packs must have the same shape")
    n, d = real.shape
    if alpha is None:
        alpha = torch.rand(n // pac, 1, 1, dtype=real.dtype, device=real.device)
    alpha = alpha.reshape(-1, 1, 1).expand(n // pac, pac, d).reshape(n, d)
    x_hat = alpha * real + (1 - alpha) * fake
    if not x_hat.requires_grad:
        x_hat.requires_grad_(True)
    out = critic(x_hat)
    (grad,) = torch.autograd.grad(out, x_hat, torch.ones_like(out), create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_hat)
    norms = grad.reshape(-1, pac * d).norm(2, dim=1)
    return coefficient * ((norms - 1) ** 2).mean()


def conditional_cross_entropy(raw: torch.Tensor, batch: ConditionBatch, encoder: Encoder) -> torch.Tensor:
    """Cross-entropy on the single conditioned block of every row."""
    if not encoder.schema.categorical:
        return raw.new_zeros(())
    spans = [encoder.category_span(f.name) for f in encoder.schema.categorical]
    total = raw.new_zeros(())
    feats = torch.as_tensor(batch.features)
    cats = torch.as_tensor(batch.categories)
    for j, s in enumerate(spans):
        sel = (feats == j).nonzero().reshape(-1)
        if len(sel):
            total = total + F.cross_entropy(raw[sel, s.start:s.end], cats[sel], reduction="sum")
    return total / raw.shape[0]


def condition_match(activated: np.ndarray, batch: ConditionBatch, encoder: Encoder) -> np.ndarray:
    """Whether the argmax of each row's conditioned block equals its masked category."""
    if not encoder.schema.categorical:
        return np.ones(len(activated), dtype=bool)
    out = np.ones(len(activated), dtype=bool)
    for j, f in enumerate(encoder.schema.categorical):
        sel = batch.features == j
        if sel.any():
            s = encoder.category_span(f.name)
            out[sel] = activated[sel, s.start:s.end].argmax(axis=1) == batch.categories[sel]
    return out


# canonical sets


@dataclass
class CanonicalSet:
    rows: pd.DataFrame
    prediction_target: float
    fixed_categories: dict[str, str] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)
    condition_match_rate: float | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path: str | Path) -> None:
        """Write rows plus bookkeeping columns, and a ``.json`` provenance sidecar."""
        path = Path(path)
        df = self.rows.copy()
        df[PREDICTION_TARGET_COLUMN] = self.prediction_target
        for k, v in self.fixed_categories.items():
            df[f"__fixed:{k}__"] = v
        df.to_csv(path, index=False)
        path.with_suffix(".json").write_text(json.dumps({
            "prediction_target": self.prediction_target,
            "fixed_categories": self.fixed_categories,
            "condition_match_rate": self.condition_match_rate,
            "n_rows": len(self.rows),
            "provenance": self.provenance,
        }, indent=1, default=str))

    @classmethod
    def from_csv(cls, path: str | Path) -> "CanonicalSet":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        df = pd.read_csv(path, keep_default_na=False, float_precision="round_trip")
        df = df[[c for c in df.columns if not c.startswith("__")]]
        return cls(df, meta["prediction_target"], meta["fixed_categories"], meta["provenance"],
                   meta.get("condition_match_rate"))


# training


@dataclass
class EpochLog:
    epoch: int
    generator_loss: float
    critic_loss: float
    penalty: float
    cross_entropy: float
    condition_match: float
    seconds: float


class LucidGAN:
    """A conditional generator for one encoder, trained from a scored table."""

    def __init__(self, encoder: Encoder, generator_spec: GeneratorSpec | None = None,
                 critic_spec: CriticSpec | None = None, config: TrainConfig | None = None):
        self.encoder = encoder
        self.gspec = generator_spec or GeneratorSpec()
        self.cspec = critic_spec or CriticSpec()
        self.config = config or TrainConfig()
        if self.config.batch_size % self.cspec.pac:
            raise ValueError(f"pac={self.cspec.pac} must divide batch_size={self.config.batch_size}")
        self.cond_dim = 1 + encoder.category_width
        # initial weights depend on the seed only
        torch.manual_seed(self.config.seed)
        self.generator = Generator(self.gspec.noise_dim + self.cond_dim, self.gspec.hidden, encoder.width)
        self.critic = Critic(encoder.width + self.cond_dim, self.cspec.hidden, self.cspec.dropout, self.cspec.pac)
        self.sampler: ConditionSampler | None = None
        self.log: list[EpochLog] = []
        self.prediction_quantiles: dict[str, float] = {}
        self.run_id = uuid.uuid4().hex[:12]

    # training

    def fit(self, scored: ScoredTable) -> "LucidGAN":
        cfg = self.config
        if scored.schema.names != self.encoder.schema.names:
            raise DataError("scored table and encoder use different schemas")
        if len(scored) == 0:
            raise DataError("cannot train on an empty table")
        rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)
        rows = scored.table.rows
        data = torch.as_tensor(self.encoder.transform(rows, "sample", rng))
        self.sampler = ConditionSampler(self.encoder, rows, scored.predictions)
        qs = np.quantile(scored.predictions, [0.0, 0.01, 0.05, 0.5, 0.95, 0.99, 1.0])
        self.prediction_quantiles = {f"q{int(q * 100):02d}": float(v) for q, v in zip([0, .01, .05, .5, .95, .99, 1], qs)}

        g_opt = torch.optim.Adam(self.generator.parameters(), lr=cfg.generator_lr, betas=cfg.betas,
                                 weight_decay=cfg.weight_decay)
        d_opt = torch.optim.Adam(self.critic.parameters(), lr=cfg.critic_lr, betas=cfg.betas,
                                 weight_decay=cfg.weight_decay)
        bs, pac = cfg.batch_size, self.cspec.pac
        steps = max(len(scored) // bs, 1)
        self.generator.train()
        self.critic.train()
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            sums = np.zeros(5)
            for _ in range(steps):
                for _ in range(cfg.critic_steps):
                    batch = self.sampler.sample(bs, rng)
                    c1 = torch.as_tensor(batch.vectors())
                    perm = rng.permutation(bs)
                    real = data[batch.rows[perm]]
                    c2 = c1[perm]
                    noise = torch.randn(bs, self.gspec.noise_dim)
                    _, fake = generator_forward(self.generator, noise, c1, self.encoder, cfg.temperature)
                    real_in = torch.cat([real, c2], dim=1)
                    fake_in = torch.cat([fake, c1], dim=1)
                    pen = gradient_penalty(self.critic, real_in, fake_in.detach(), pac, cfg.gp_lambda)
                    loss_d = self.critic(fake_in.detach()).mean() - self.critic(real_in).mean()
                    d_opt.zero_grad(set_to_none=True)
                    (loss_d + pen).backward()
                    d_opt.step()

                batch = self.sampler.sample(bs, rng)
                c1 = torch.as_tensor(batch.vectors())
                noise = torch.randn(bs, self.gspec.noise_dim)
                raw, fake = generator_forward(self.generator, noise, c1, self.encoder, cfg.temperature)
                ce = conditional_cross_entropy(raw, batch, self.encoder)
                loss_g = -self.critic(torch.cat([fake, c1], dim=1)).mean() + ce
                g_opt.zero_grad(set_to_none=True)
                loss_g.backward()
                g_opt.step()

                vals = [loss_g.item(), loss_d.item(), pen.item(), ce.item()]
                if not np.all(np.isfinite(vals)):
                    raise TrainingDivergence(f"non-finite loss at epoch {epoch}: {vals}")
                match = condition_match(fake.detach().numpy(), batch, self.encoder).mean()
                sums += np.array(vals + [match])
            sums /= steps
            entry = EpochLog(epoch, *map(float, sums), seconds=time.perf_counter() - t0)
            self.log.append(entry)
            logger.debug("epoch %d: G %.3f D %.3f GP %.3f CE %.3f match %.3f", epoch, *sums)
        self.generator.eval()
        self.critic.eval()
        return self

    # generation

    def _generate_encoded(self, prediction: float, masks: np.ndarray, rng_seed: int, temperature: float):
        gen = torch.Generator().manual_seed(int(rng_seed))
        n = len(masks)
        cond = np.concatenate([np.full((n, 1), prediction), masks], axis=1).astype(np.float32)
        self.generator.eval()
        with torch.no_grad():
            noise = torch.randn(n, self.gspec.noise_dim, generator=gen)
            raw = self.generator(torch.cat([noise, torch.as_tensor(cond)], dim=1))
            # Gumbel noise from the same stream keeps generation seeded
            parts = []
            for s in self.encoder.spans:
                chunk = raw[:, s.start:s.end]
                if s.kind == "scalar":
                    parts.append(torch.tanh(chunk))
                else:
                    u = torch.rand(chunk.shape, generator=gen).clamp_(1e-10, 1 - 1e-10)
                    parts.append(torch.softmax((chunk - torch.log(-torch.log(u))) / temperature, dim=1))
            return torch.cat(parts, dim=1).numpy()

    def generate_encoded(self, prediction: float, masks: np.ndarray, seed: int = 0,
                         temperature: float | None = None) -> np.ndarray:
        """Activated generator output for explicit mask rows."""
        return self._generate_encoded(prediction, np.asarray(masks, dtype=np.float32), seed,
                                      temperature or self.config.temperature)

    def generate(
        self,
        prediction_target: float,
        n: int,
        fixed: Mapping[str, str] | None = None,
        mask_policy: str = "sample",
        seed: int = 0,
        enforce: bool = True,
        max_rounds: int = 200,
    ) -> CanonicalSet:
        """Decoded canonical set for one prediction value.

        With ``fixed`` categories, the least frequent of them is placed in the
        mask for every draw and the decoded column is set to it; any further
        fixed categories are obtained by keeping only matching draws.
        Without ``fixed``, masks follow ``mask_policy``: ``"sample"`` draws
        them like training conditions whose prediction is near the target,
        ``"marginal"`` ignores the prediction and ``"zero"`` leaves them empty.
        """
        if not 0.0 <= prediction_target <= 1.0:
            raise ValueError("prediction_target must lie in [0, 1]")
        if self.sampler is None:
            raise RuntimeError("model is not trained")
        fixed = dict(fixed or {})
        schema = self.encoder.schema
        for k, v in fixed.items():
            if k not in schema or not schema[k].is_categorical:
                raise DataError(f"{k!r} is not a categorical feature")
            if v not in schema[k].categories:
                raise DataError(f"{v!r} is not a category of {k!r}")
        provenance = {
            "method": "lucidgan",
            "run_id": self.run_id,
            "seed": seed,
            "model_fingerprint": self.fingerprint(),
            "mask_policy": mask_policy if not fixed else "fixed",
            "prediction_quantiles": self.prediction_quantiles,
        }
        if n == 0:
            return CanonicalSet(pd.DataFrame(columns=schema.names), prediction_target, fixed, provenance, None)
        rng = np.random.default_rng(seed)
        temp = self.config.temperature
        if not fixed:
            if mask_policy == "sample" and self.sampler.predictions is not None:
                batch = self.sampler.sample_masks(n, rng, target=prediction_target)
            elif mask_policy in ("sample", "marginal"):
                if mask_policy == "sample":
                    logger.warning("generator was saved without training rows; masks ignore the target")
                batch = self.sampler.sample_masks(n, rng)
            elif mask_policy == "zero":
                batch = ConditionBatch(np.zeros(n), np.zeros((n, self.sampler.width), np.float32),
                                       np.full(n, -1), np.full(n, -1), np.full(n, -1))
            else:
                raise ValueError(f"unknown mask_policy {mask_policy!r}")
            enc = self._generate_encoded(prediction_target, batch.mask, int(rng.integers(2**31)), temp)
            rate = None
            if mask_policy != "zero" and schema.categorical:
                rate = float(condition_match(enc, batch, self.encoder).mean())
            return CanonicalSet(self.encoder.inverse_transform(enc), prediction_target, fixed, provenance, rate)

        feat_names = [f.name for f in schema.categorical]
        pinned = min(fixed, key=lambda k: self.sampler.counts[feat_names.index(k)][
            schema[k].categories.index(fixed[k])])
        j = feat_names.index(pinned)
        k = schema[pinned].categories.index(fixed[pinned])
        mask = self.sampler.mask_for(pinned, fixed[pinned])
        rest = {a: b for a, b in fixed.items() if a != pinned}
        kept, matches, drawn, total = [], 0, 0, 0
        for _ in range(max_rounds):
            m = max(n, 256)
            total += m
            enc = self._generate_encoded(prediction_target, np.tile(mask, (m, 1)), int(rng.integers(2**31)), temp)
            batch = ConditionBatch(np.zeros(m), np.tile(mask, (m, 1)), np.full(m, j), np.full(m, k), np.full(m, -1))
            ok = condition_match(enc, batch, self.encoder)
            df = self.encoder.inverse_transform(enc)
            sel = np.ones(m, dtype=bool)
            for a, b in rest.items():
                sel &= (df[a] == b).to_numpy()
            matches += int(ok[sel].sum())
            drawn += int(sel.sum())
            kept.append(df[sel])
            if sum(len(x) for x in kept) >= n:
                break
        rows = pd.concat(kept, ignore_index=True).iloc[:n].copy()
        if len(rows) < n:
            raise GenerationError(
                f"only {len(rows)} of {n} rows matched {rest} after {max_rounds} rounds")
        rate = matches / drawn if drawn else None
        if enforce:
            rows[pinned] = fixed[pinned]
        provenance["pinned_feature"] = pinned
        provenance["acceptance_rate"] = drawn / total
        return CanonicalSet(rows.reset_index(drop=True), prediction_target, fixed, provenance, rate)

    def canonical_pair(self, n: int, fixed: Mapping[str, str] | None = None, seed: int = 0,
                       mask_policy: str = "sample") -> tuple[CanonicalSet, CanonicalSet]:
        """Positive (prediction 1) and negative (prediction 0) sets, always produced together."""
        return (self.generate(1.0, n, fixed, mask_policy, seed),
                self.generate(0.0, n, fixed, mask_policy, seed + 1))

    # persistence

    def _state(self) -> dict[str, Any]:
        return {
            "version": ARTIFACT_VERSION,
            "run_id": self.run_id,
            "encoder": self.encoder.to_dict(),
            "encoder_fingerprint": self.encoder.fingerprint(),
            "generator_spec": asdict(self.gspec),
            "critic_spec": asdict(self.cspec),
            "config": asdict(self.config),
            "category_counts": [c.tolist() for c in self.sampler.counts] if self.sampler else None,
            "category_codes": None if self.sampler is None or self.sampler.codes is None else self.sampler.codes,
            "predictions": None if self.sampler is None else self.sampler.predictions,
            "prediction_quantiles": self.prediction_quantiles,
            "log": [asdict(e) for e in self.log],
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.encoder.fingerprint().encode())
        for v in self.generator.state_dict().values():
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        state = self._state()
        state["generator"] = self.generator.state_dict()
        state["critic"] = self.critic.state_dict()
        torch.save(state, path)

    @classmethod
    def load(cls, path: str | Path) -> "LucidGAN":
        state = torch.load(path, weights_only=False)
        if state.get("version") != ARTIFACT_VERSION:
            raise ValueError(f"unsupported artifact version {state.get('version')!r}")
        enc = Encoder.from_dict(state["encoder"])
        if enc.fingerprint() != state["encoder_fingerprint"]:
            raise ValueError("encoder fingerprint mismatch")
        gspec = GeneratorSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in state["generator_spec"].items()})
        cspec = CriticSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in state["critic_spec"].items()})
        model = cls(enc, gspec, cspec, TrainConfig(**state["config"]))
        model.generator.load_state_dict(state["generator"])
        model.critic.load_state_dict(state["critic"])
        model.generator.eval()
        model.critic.eval()
        model.run_id = state["run_id"]
        if state.get("category_codes") is not None:
            model.sampler = ConditionSampler(enc, predictions=state["predictions"], codes=state["category_codes"])
        elif state["category_counts"] is not None:
            model.sampler = ConditionSampler(enc, counts=[np.asarray(c) for c in state["category_counts"]])
        model.prediction_quantiles = state["prediction_quantiles"]
        model.log = [EpochLog(**e) for e in state["log"]]
        return model


# audit set-up


@dataclass(frozen=True)
class AuditData:
    """Scored rows over the full feature set plus the features the model never saw."""

    scored: ScoredTable
    withheld: tuple[str, ...]


def proxy_audit_prepare(scored: ScoredTable, schema: TableSchema | None = None) -> AuditData:
    """Check that the withheld features are present so the GAN can generate them.

    Predictions come from a model over ``schema.model_inputs``; the generator
    is trained over every schema feature, withheld ones included.
    """
    schema = schema or scored.schema
    withheld = tuple(schema.withheld)
    absent = [w for w in withheld if w not in scored.table.rows.columns]
    if absent:
        raise DataError(f"withheld features {absent} are absent from the data")
    return AuditData(scored, withheld)


def train_lucidgan(
    scored: ScoredTable,
    config: TrainConfig | None = None,
    generator_spec: GeneratorSpec | None = None,
    critic_spec: CriticSpec | None = None,
    encoder: Encoder | None = None,
) -> LucidGAN:
    """Fit an encoder on ``scored`` (unless given) and train a generator on it."""
    config = config or TrainConfig()
    encoder = encoder or Encoder.fit(scored.table, seed=config.seed)
    return LucidGAN(encoder, generator_spec, critic_spec, config).fit(scored)
