"""Comparator estimators: deep ensembles, MC dropout and an exact RBF Gaussian process."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky

from . import _accel, nn
from .anchoring import Dataset, UncertaintyEstimate, to_unit
from .errors import ConfigurationError, DegenerateEstimatorError, FitError

DEFAULT_MC_PASSES = 50


def member_seed(base_seed: int, index: int) -> int:
    """Deterministic, well-separated seed for ensemble member ``index``."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# deep ensemble
# ---------------------------------------------------------------------------


@dataclass
class DeepEnsemble:
    members: list
    seeds: list
    bounds: np.ndarray

    def __len__(self):
        return len(self.members)


def train_deep_ensemble(dataset: Dataset, mlp_config: nn.MlpConfig, train_config: nn.TrainConfig,
                        n_members: int = 5, seeds=None) -> DeepEnsemble:
    """Members trained independently on the unshifted data, one init seed each.

    Seeds default to ``member_seed(mlp_config.seed, i)``; pass ``seeds`` to
    override (all-equal seeds collapse the ensemble, which tests use).
    """
    if seeds is None:
        if n_members < 2:
            raise ConfigurationError("deep ensemble needs n_members >= 2")
        seeds = [member_seed(mlp_config.seed, i) for i in range(n_members)]
    x_unit = dataset.to_unit(dataset.inputs)
    members = []
    for s in seeds:
        model, _ = nn.fit_mlp(x_unit, dataset.targets, mlp_config.replace(seed=int(s)), train_config)
        members.append(model)
    return DeepEnsemble(members, [int(s) for s in seeds], dataset.bounds.copy())


def predict_deep_ensemble(ensemble: DeepEnsemble, x_t, dtype=np.float64) -> UncertaintyEstimate:
    x_unit = to_unit(np.atleast_2d(np.asarray(x_t, dtype=np.float64)), ensemble.bounds)
    # fixed seed order keeps the reduction independent of member ordering
    order = np.argsort(ensemble.seeds, kind="stable")
    preds = [nn.forward(ensemble.members[i], x_unit, mode="eval", dtype=dtype) for i in order]
    return UncertaintyEstimate.from_samples(np.stack(preds))


# ---------------------------------------------------------------------------
# MC dropout
# ---------------------------------------------------------------------------


@dataclass
class DropoutModel:
    """A network trained with dropout, plus the input bounds used for normalization."""

    model: nn.MlpSurrogate
    bounds: np.ndarray


def train_mc_dropout(dataset: Dataset, mlp_config: nn.MlpConfig, train_config: nn.TrainConfig) -> DropoutModel:
    if mlp_config.dropout_rate <= 0:
        raise DegenerateEstimatorError("MC dropout needs dropout_rate > 0")
    model, _ = nn.fit_mlp(dataset.to_unit(dataset.inputs), dataset.targets, mlp_config, train_config)
    return DropoutModel(model, dataset.bounds.copy())


def predict_mc_dropout(model, x_t, passes: int = DEFAULT_MC_PASSES, rng=None,
                       share_masks: bool = False, bounds=None, mask_scope: str = "network",
                       dtype=np.float64) -> UncertaintyEstimate:
    """Mean and std over ``passes`` stochastic forward passes with dropout active.

    ``model`` is a ``DropoutModel`` or a bare ``MlpSurrogate`` (then ``x_t``
    is used as-is unless ``bounds`` is given).  With ``mask_scope="network"``
    each pass draws one mask vector per layer and applies it to every query
    row, so a pass is one thinned network evaluated everywhere; with
    ``"row"`` every query row gets its own masks.  ``share_masks`` reuses
    the first pass's masks for all passes, which collapses the spread to
    zero.  ``dtype`` sets the forward-pass precision of the network scope.
    """
    if isinstance(model, DropoutModel):
        net, bounds = model.model, model.bounds
    else:
        net = model
    if net.config.dropout_rate <= 0:
        raise DegenerateEstimatorError("MC dropout with dropout_rate = 0 has no spread")
    if passes < 2:
        raise ConfigurationError("MC dropout needs passes >= 2")
    if mask_scope not in ("network", "row"):
        raise ConfigurationError(f"mask_scope must be 'network' or 'row', got {mask_scope!r}")
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    if bounds is not None:
        x = to_unit(x, bounds)
    if rng is None:
        rng = np.random.default_rng(0)
    if mask_scope == "network":
        # pass p uses the p-th draw, so this matches a loop of one-row-mask forwards
        draws = [nn.draw_dropout_masks(net.config, 1, rng) for _ in range(1 if share_masks else passes)]
        stacked = [np.concatenate([d[i] for d in draws]) for i in range(len(draws[0]))]
        out = nn.forward_thinned(net, x, stacked, dtype)
        if share_masks:
            # one thinned network repeated; evaluating it once keeps the passes bit-identical
            out = np.repeat(out, passes, axis=0)
        return UncertaintyEstimate.from_samples(out)
    preds = []
    fixed = nn.draw_dropout_masks(net.config, x.shape[0], rng) if share_masks else None
    for _ in range(passes):
        masks = fixed if share_masks else nn.draw_dropout_masks(net.config, x.shape[0], rng)
        preds.append(nn.forward(net, x, mode="train", masks=masks))
    return UncertaintyEstimate.from_samples(np.stack(preds))


# ---------------------------------------------------------------------------
# Gaussian process
# ---------------------------------------------------------------------------

DEFAULT_GP_GRID = {
    "lengthscale": np.logspace(-2, 1, 10),
    "signal_variance": np.logspace(-2, 1, 7),
    "noise": np.logspace(-6, -1, 6),
}

JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass
class GpSurrogate:
    """Exact GP with isotropic RBF kernel ``s2 * exp(-|x-x'|^2 / (2 l^2))`` on unit-scaled inputs.

    With ``normalize_y`` the targets are standardized before fitting and
    predictions are mapped back, so ``signal_variance`` is in standardized
    units.
    """

    lengthscale: float
    signal_variance: float
    noise: float
    jitter: float
    x_train: np.ndarray
    y_train: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    bounds: np.ndarray | None
    y_mean: float = 0.0
    y_scale: float = 1.0
    log_marginal_likelihood: float = field(default=float("nan"))

    def kernel(self, a, b):
        return _accel.rbf_gram(a, b, self.lengthscale, self.signal_variance)


def _chol_with_jitter(k):
    n = k.shape[0]
    for jit in JITTERS:
        try:
            return cholesky(k + jit * np.eye(n), lower=True, check_finite=False), jit
        except np.linalg.LinAlgError:
            continue
    raise FitError("kernel matrix not positive definite after maximum jitter 1e-4")


def log_marginal_likelihood(x, y, lengthscale, signal_variance, noise):
    """Exact log p(y | X) for the RBF GP (zero mean), via Cholesky with jitter fallback."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    k = _accel.rbf_gram(x, x, lengthscale, signal_variance) + noise * np.eye(len(y))
    chol, _ = _chol_with_jitter(k)
    alpha = cho_solve((chol, True), y, check_finite=False)
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * len(y) * math.log(2 * math.pi))


def gp_fit(dataset: Dataset, hyper_grid=None, normalize_y: bool = True, scale_inputs: bool = True) -> GpSurrogate:
    """Pick (lengthscale, signal variance, noise) on a grid by exact log marginal likelihood.

    Ties keep the first grid point in (lengthscale, variance, noise)
    iteration order.  The Cholesky factor of the winner is cached.
    """
    if dataset.n < 1:
        raise FitError("GP needs at least one training point")
    grid = dict(DEFAULT_GP_GRID)
    if hyper_grid:
        grid.update({k: np.atleast_1d(np.asarray(v, dtype=np.float64)) for k, v in hyper_grid.items()})
    x = dataset.to_unit(dataset.inputs) if scale_inputs else dataset.inputs.copy()
    y_raw = dataset.targets[:, 0]
    if normalize_y:
        y_mean = float(y_raw.mean())
        y_scale = float(y_raw.std())
        if not y_scale > 0:
            y_scale = 1.0
    else:
        y_mean, y_scale = 0.0, 1.0
    y = (y_raw - y_mean) / y_scale
    n = len(y)
    eye = np.eye(n)
    diff = x[:, None, :] - x[None, :, :]
    sqdist = np.einsum("ijk,ijk->ij", diff, diff)

    best = None
    for ls in grid["lengthscale"]:
        base = np.exp(-0.5 * sqdist / (ls * ls))
        for s2 in grid["signal_variance"]:
            for noise in grid["noise"]:
                try:
                    chol, jit = _chol_with_jitter(s2 * base + noise * eye)
                except FitError:
                    continue
                alpha = cho_solve((chol, True), y, check_finite=False)
                lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * n * math.log(2 * math.pi)
                if best is None or lml > best[0]:
                    best = (lml, ls, s2, noise, jit, chol, alpha)
    if best is None:
        raise FitError("no hyperparameter setting gave a positive-definite kernel")
    lml, ls, s2, noise, jit, chol, alpha = best
    return GpSurrogate(
        lengthscale=float(ls), signal_variance=float(s2), noise=float(noise), jitter=float(jit),
        x_train=x, y_train=y, chol=chol, alpha=alpha,
        bounds=dataset.bounds.copy() if scale_inputs else None,
        y_mean=y_mean, y_scale=y_scale, log_marginal_likelihood=float(lml),
    )


def gp_predict(gp: GpSurrogate, x_t, include_noise: bool = False) -> UncertaintyEstimate:
    """Posterior mean and standard deviation of the latent function (optionally plus noise)."""
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    if gp.bounds is not None:
        x = to_unit(x, gp.bounds)
    k_star = gp.kernel(x, gp.x_train)
    mean = k_star @ gp.alpha
    v = cho_solve((gp.chol, True), k_star.T, check_finite=False)
    var = gp.signal_variance - np.einsum("ij,ji->i", k_star, v)
    if include_noise:
        var = var + gp.noise
    np.maximum(var, 0.0, out=var)
    mean = mean * gp.y_scale + gp.y_mean
    std = np.sqrt(var) * gp.y_scale
    return UncertaintyEstimate(mean=mean[:, None], std=std[:, None], count=0)
