"""Spatial attention over a K*K grid of feature vectors.

Three mechanisms share the same scoring head (one weight row per grid
location, scored against the previous first-layer hidden state):

* soft: convex mixture under a location softmax, fully differentiable;
* gumbel-hard: one-hot sample via Gumbel-softmax + straight-through,
  with a constant or state-adaptive temperature;
* reinforce-hard: categorical sample whose score-function surrogate
  carries the learning signal, with a moving-average baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import stochastic as st
from .autodiff import Tensor

BASELINE_DECAY = 0.9
LOG_FLOOR = 1e-12


@dataclass
class AttentionParams:
    """Location-score rows, plus the adaptive-temperature map when used."""

    w_loc: Tensor                 # (K*K, d): one score row per location
    w_temp: Tensor | None = None  # (d, 1)
    b_temp: Tensor | None = None  # (1, 1)


@dataclass
class AttentionResult:
    """Weights over locations, the attended feature, and sampling metadata.

    ``weights`` rows sum to 1 (exactly one-hot for the hard variants);
    ``attended`` is always the weights-mixed feature, which for one-hot
    weights is a selection.  ``tau`` records the temperature actually
    used, for logging.
    """

    weights: Tensor                      # (B, K*K)
    attended: Tensor                     # (B, D)
    selected_index: np.ndarray | None = None  # (B,) int
    log_prob: Tensor | None = None       # (B, 1)
    tau: np.ndarray | float | None = None


def location_scores(h1_prev: Tensor, params: AttentionParams) -> Tensor:
    return h1_prev @ ad.transpose(params.w_loc)


def soft_attend(h1_prev: Tensor, features: Tensor, params: AttentionParams) -> AttentionResult:
    """Location softmax of the previous layer-1 hidden state, then expectation.

    ``h1_prev`` is (B, d), ``features`` is (B, K*K, D).
    """
    weights = ad.softmax(location_scores(h1_prev, params), axis=-1)
    attended = ad.attend_mix(weights, features)
    return AttentionResult(weights=weights, attended=attended)


def gumbel_hard_attend(h1_prev: Tensor, features: Tensor, params: AttentionParams,
                       tau, rng: np.random.Generator | None = None,
                       noise: st.GumbelNoise | None = None,
                       deterministic: bool = False,
                       soft_sample: bool = False) -> AttentionResult:
    """One-hot location sample through Gumbel-softmax with straight-through.

    ``tau`` is a constant or an adaptive :class:`~hman.stochastic.Temperature`.
    ``deterministic`` selects the argmax location noise-free (evaluation);
    ``soft_sample`` keeps the relaxed sample as the weights (gradient
    verification only).
    """
    scores = location_scores(h1_prev, params)
    if deterministic:
        idx = np.argmax(scores.data, axis=-1)
        weights = Tensor(_onehot(idx, scores.shape[-1]))
        attended = ad.attend_mix(weights, features)
        return AttentionResult(weights=weights, attended=attended, selected_index=idx)
    if noise is None:
        if rng is None:
            raise ad.ContractError("gumbel_hard_attend needs noise or an rng")
        noise = st.sample_gumbel(scores.shape, rng, "attention")
    soft = st.gumbel_softmax(scores, noise, tau)
    idx = np.argmax(soft.data, axis=-1)
    weights = soft if soft_sample else st.hard_onehot(soft)
    attended = ad.attend_mix(weights, features)
    tau_value = tau.value.data.copy() if isinstance(tau, st.Temperature) and isinstance(tau.value, Tensor) \
        else float(tau.value if isinstance(tau, st.Temperature) else tau)
    return AttentionResult(weights=weights, attended=attended, selected_index=idx, tau=tau_value)


def reinforce_hard_attend(h1_prev: Tensor, features: Tensor, params: AttentionParams,
                          rng: np.random.Generator | None = None,
                          training: bool = True) -> AttentionResult:
    """Sample a single location from the location softmax (argmax when evaluating).

    The selection itself carries no gradient; learning flows through the
    recorded ``log_prob`` via the score-function surrogate.
    """
    alpha = ad.softmax(location_scores(h1_prev, params), axis=-1)
    if training:
        if rng is None:
            raise ad.ContractError("reinforce_hard_attend needs an rng in training mode")
        idx = _sample_rows(alpha.data, rng)
    else:
        idx = np.argmax(alpha.data, axis=-1)
    weights = Tensor(_onehot(idx, alpha.shape[-1]))
    attended = ad.attend_mix(weights, features)
    log_prob = ad.clipped_log(ad.take_rows(alpha, idx), LOG_FLOOR)
    return AttentionResult(weights=weights, attended=attended,
                           selected_index=idx, log_prob=log_prob)


def _onehot(idx: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((idx.shape[0], width))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a probability matrix."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])
    idx = (u[:, None] > cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def reinforce_surrogate(log_probs: list[Tensor], log_likelihood: Tensor,
                        baseline: float, lam: float) -> Tensor:
    """Scalar loss whose gradient is the score-function learning rule.

    Minimizing -(log_likelihood + lam * stopgrad(log_likelihood - b) *
    sum_t log_probs_t) reproduces the single-sample estimator: the
    likelihood term trains the classifier path and the reward-weighted
    score term trains the selection distribution.  The reward factor is
    a constant (no gradient flows through it).  Batched inputs (B, 1)
    yield the batch-mean surrogate.
    """
    reward = Tensor(log_likelihood.data - baseline)
    total_log_prob = log_probs[0]
    for lp in log_probs[1:]:
        total_log_prob = total_log_prob + lp
    per_episode = -(log_likelihood + lam * reward * total_log_prob)
    return ad.mean(per_episode)


def baseline_update(b_prev: float, log_likelihood: float) -> float:
    """Exponentially decayed running mean: 0.9 * b + 0.1 * log-likelihood."""
    return BASELINE_DECAY * b_prev + (1.0 - BASELINE_DECAY) * float(log_likelihood)


@dataclass
class Baseline:
    """Moving-average reward baseline; one writer updates it per mini-batch."""

    value: float = 0.0
    updates: int = field(default=0)

    def update(self, log_likelihood: float) -> float:
        self.value = baseline_update(self.value, log_likelihood)
        self.updates += 1
        return self.value
