"""Anchored training and inference: the delta-UQ single model and anchor ensembles.

Inputs are mapped to ``[-1, 1]`` per dimension from the dataset bounds
before any anchoring; every public function here takes and returns raw
(unnormalized) coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigurationError, ShapeError


@dataclass
class Dataset:
    """Paired inputs/targets with per-dimension ``(low, high)`` bounds.

    ``targets`` is always stored 2-D ``(n, m)``; ``bounds`` is ``(d, 2)``.
    When bounds are omitted they are taken from the input range (padded
    for constant columns).
    """

    inputs: np.ndarray
    targets: np.ndarray
    bounds: np.ndarray = None

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.targets, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if x.shape[0] < 1 or x.shape[0] != y.shape[0]:
            raise ShapeError(f"inputs {x.shape} and targets {y.shape} must have the same n >= 1 rows")
        if not np.all(np.isfinite(x)):
            raise ValueError("inputs contain non-finite values")
        if self.bounds is None:
            lo, hi = x.min(axis=0), x.max(axis=0)
            pad = np.where(hi > lo, 0.0, 1.0)
            b = np.stack([lo - pad, hi + pad], axis=1)
        else:
            b = np.asarray(self.bounds, dtype=np.float64).reshape(x.shape[1], 2)
        if np.any(b[:, 0] >= b[:, 1]):
            raise ConfigurationError("bounds need low < high in every dimension")
        self.inputs, self.targets, self.bounds = x, y, b

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def to_unit(self, x):
        return to_unit(x, self.bounds)


def to_unit(x, bounds):
    """Affine map of raw coordinates onto ``[-1, 1]`` per dimension."""
    bounds = np.asarray(bounds, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    lo, hi = bounds[:, 0], bounds[:, 1]
    return 2.0 * (x - lo) / (hi - lo) - 1.0


@dataclass
class UncertaintyEstimate:
    """Per-query mean and unbiased standard deviation across ``count`` predictions.

    ``mean`` and ``std`` are ``(q, m)``.  ``std`` is ``None`` when fewer
    than two predictions were available.
    """

    mean: np.ndarray
    std: np.ndarray | None
    count: int

    @property
    def sigma_available(self) -> bool:
        return self.std is not None

    @classmethod
    def from_samples(cls, samples):
        """Build from stacked predictions of shape ``(K, q, m)``."""
        samples = np.asarray(samples, dtype=np.float64)
        k = samples.shape[0]
        mean = samples.mean(axis=0)
        std = None
        if k >= 2:
            # deviations from the first sample: identical samples give exactly 0
            d = samples - samples[0]
            d -= d.mean(axis=0)
            std = np.sqrt(np.sum(d * d, axis=0) / (k - 1))
        return cls(mean=mean, std=std, count=k)


def anchored_batch(inputs, rng, anchor_noise: float = 0.0):
    """Pair each row with an anchor drawn by shuffling the batch; returns ``[c, x - c]`` rows.

    Anchors are a seeded permutation of the batch rows.  ``anchor_noise``
    adds Gaussian noise to the anchor half only (optional corruption hook,
    off by default); the residual always uses the clean anchor.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError("anchored_batch needs a non-empty 2-D batch")
    anchors = x[rng.permutation(x.shape[0])]
    resid = x - anchors
    if anchor_noise > 0:
        anchors = anchors + anchor_noise * rng.standard_normal(anchors.shape)
    return np.concatenate([anchors, resid], axis=1)


def _anchor_rows(x_unit, c_unit):
    """All ``(anchor, query)`` pairs as ``[c, x - c]`` rows, anchor-major: ``(K*q, 2d)``."""
    k, q = c_unit.shape[0], x_unit.shape[0]
    c_rep = np.repeat(c_unit, q, axis=0)
    x_rep = np.tile(x_unit, (k, 1))
    return np.concatenate([c_rep, x_rep - c_rep], axis=1)


@dataclass
class AnchoredModel:
    """Single network trained on ``[c, x - c]`` tuples."""

    base: nn.MlpSurrogate
    bounds: np.ndarray
    train_seed: int
    train_inputs: np.ndarray
    loss_history: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]


def train_delta_uq(dataset: Dataset, mlp_config: nn.MlpConfig, train_config: nn.TrainConfig,
                   seed: int | None = None, anchor_noise: float = 0.0) -> AnchoredModel:
    """Train one network on anchored inputs.

    Every mini-batch gets a fresh anchor assignment (a shuffle of the batch
    itself), so a sample meets many anchors over training; the loss is
    always on single-anchor predictions.  ``seed`` drives batch order and
    anchor shuffles (defaults to ``mlp_config.seed``).
    """
    if mlp_config.input_dim != 2 * dataset.dim:
        raise ConfigurationError(
            f"anchored model needs input_dim = 2*d = {2 * dataset.dim}, got {mlp_config.input_dim}"
        )
    seed = mlp_config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    model = nn.init_mlp(mlp_config)
    x_unit = dataset.to_unit(dataset.inputs)

    def transform(xb, r):
        return anchored_batch(xb, r, anchor_noise)

    history = nn.train(model, x_unit, dataset.targets, train_config, rng, batch_transform=transform)
    return AnchoredModel(model, dataset.bounds.copy(), seed, dataset.inputs.copy(), history)


def sample_anchors(pool, k: int, rng):
    """``k`` rows drawn uniformly without replacement from ``pool`` (``k`` capped at the pool size)."""
    pool = np.asarray(pool, dtype=np.float64)
    k = min(int(k), pool.shape[0])
    idx = rng.choice(pool.shape[0], size=k, replace=False)
    return pool[np.sort(idx)]


def _canonical_order(anchors):
    # lexicographic row order makes the result independent of how anchors were listed
    order = np.lexsort(anchors.T[::-1])
    return anchors[order]


def anchored_predictions(model: AnchoredModel, x_t, anchors, dtype=np.float64):
    """Raw per-anchor predictions, shape ``(K, q, m)``; ``dtype`` sets the forward-pass precision."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    if x_t.shape[1] != model.dim or anchors.shape[1] != model.dim:
        raise ShapeError("query and anchor widths must match the model's feature width")
    anchors = _canonical_order(anchors)
    rows = _anchor_rows(to_unit(x_t, model.bounds), to_unit(anchors, model.bounds))
    out = nn.forward(model.base, rows, mode="eval", dtype=dtype)
    return out.reshape(anchors.shape[0], x_t.shape[0], -1)


def predict_delta_uq(model: AnchoredModel, x_t, anchors, dtype=np.float64) -> UncertaintyEstimate:
    """Mean and unbiased std of the prediction across the given anchors.

    With a single anchor the estimate carries the mean only.
    """
    return UncertaintyEstimate.from_samples(anchored_predictions(model, x_t, anchors, dtype))


@dataclass
class AnchorEnsemble:
    """Members sharing one initialization, each trained on data shifted by its own anchor."""

    anchors: np.ndarray
    members: list
    bounds: np.ndarray
    init_seed: int

    def __len__(self):
        return len(self.members)


def train_anchor_ensemble(dataset: Dataset, mlp_config: nn.MlpConfig, train_config: nn.TrainConfig,
                          anchors, seed: int | None = None) -> AnchorEnsemble:
    """Train one member per anchor on ``{(x - c_k, y)}``, all from the same initial weights.

    Members also share the batch-order stream, so two identical anchors give
    identical members.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    if anchors.size == 0 or anchors.shape[0] == 0:
        raise ConfigurationError("anchor ensemble needs at least one anchor")
    if anchors.shape[1] != dataset.dim or mlp_config.input_dim != dataset.dim:
        raise ConfigurationError("anchor ensemble members take raw-width inputs (input_dim = d)")
    seed = mlp_config.seed if seed is None else seed
    theta0 = nn.init_mlp(mlp_config)
    x_unit = dataset.to_unit(dataset.inputs)
    members = []
    for c in anchors:
        member = theta0.clone()
        shifted = x_unit - to_unit(c[None, :], dataset.bounds)
        nn.train(member, shifted, dataset.targets, train_config, np.random.default_rng(seed))
        members.append(member)
    return AnchorEnsemble(anchors.copy(), members, dataset.bounds.copy(), seed)


def predict_anchor_ensemble(ensemble: AnchorEnsemble, x_t) -> UncertaintyEstimate:
    """Member ``k`` predicts ``f_k(x - c_k)``; mean and unbiased std across members."""
    x_unit = to_unit(np.atleast_2d(np.asarray(x_t, dtype=np.float64)), ensemble.bounds)
    c_unit = to_unit(ensemble.anchors, ensemble.bounds)
    preds = [nn.forward(m, x_unit - c, mode="eval") for m, c in zip(ensemble.members, c_unit)]
    return UncertaintyEstimate.from_samples(np.stack(preds))
