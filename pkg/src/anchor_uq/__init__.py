"""Anchored uncertainty estimation for neural surrogates.

Single-model uncertainty by anchoring (``anchoring``), the kernel analysis
behind it (``ntk``), comparator estimators (``baselines``), a Bayesian
optimization harness (``seqopt``) over standard test functions
(``benchmarks``), and evaluation metrics (``metrics``).
"""

__version__ = "0.1.0"

from .anchoring import (  # noqa: E402
    AnchorEnsemble, AnchoredModel, Dataset, UncertaintyEstimate, anchored_batch, predict_anchor_ensemble,
    predict_delta_uq, sample_anchors, train_anchor_ensemble, train_delta_uq,
)
from .nn import MlpConfig, MlpSurrogate, TrainConfig, fit_mlp  # noqa: E402

__all__ = [
    "AnchorEnsemble", "AnchoredModel", "Dataset", "MlpConfig", "MlpSurrogate", "TrainConfig",
    "UncertaintyEstimate", "anchored_batch", "fit_mlp", "predict_anchor_ensemble", "predict_delta_uq",
    "sample_anchors", "train_anchor_ensemble", "train_delta_uq", "__version__",
]
