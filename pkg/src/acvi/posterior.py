"""Stochastic context vectors with a Gaussian-mixture posterior.

At each decoding step the context vector is a latent variable.  Its
approximate posterior is a mixture with one diagonal Gaussian per source
position: component ``i`` is centred on the encoding ``h_i``, its
log-variance comes from a ReLU layer applied to ``h_i``, and its mixing
weight is the attention probability ``a_t^i``.  The prior is ``N(0, I)``.

Training draws context samples by reparameterisation.  Two routes exist:
a weighted average of per-component samples (cheap, used for most of
training) and a Gumbel-Softmax relaxed component choice (used at the end).
Deterministic soft attention is the limit where every component collapses
onto its mean, which is what ``mode="mean"`` computes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionWeights, sa_context
from .errors import ConfigError
from .rnn import EncoderOutput
from .tensor import DimensionError, Tensor

MODES = ("mean", "heuristic", "gumbel", "hard")
VARIANCE_HEADS = ("relu", "softplus", "linear")
GUMBEL_WEIGHT_FLOOR = 1e-20
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class VarianceHeadParams:
    W_var: Tensor  # [2d, 2d]
    b_var: Tensor  # [2d]

    def __post_init__(self):
        n = self.W_var.shape[0]
        if self.W_var.shape != (n, n) or self.b_var.shape != (n,):
            raise DimensionError(f"variance head must be square: W {self.W_var.shape}, b {self.b_var.shape}")


@dataclass
class MixturePosterior:
    means: Tensor  # [B, N, 2d]
    log_vars: Tensor  # [B, N, 2d]
    weights: Tensor  # [B, N]
    mask: np.ndarray  # [B, N]

    @property
    def components(self) -> int:
        return self.means.shape[1]


@dataclass
class ContextSample:
    value: Tensor  # [B, 2d]
    mode: str
    assignment: Optional[Tensor] = None  # [B, N]


class NoiseSource:
    """Counter-based random draws addressed by a tuple of non-negative ints.

    The same seed and address always give the same block, regardless of what
    else has been drawn, so replicas and resumed runs see identical noise.
    """

    _GAUSS, _UNIFORM, _GUMBEL = 1, 2, 3

    def __init__(self, seed: int):
        self.seed = int(seed)

    def _rng(self, kind: int, address: Sequence[int]) -> np.random.Generator:
        key = [self.seed, kind, *(int(a) for a in address)]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))

    def gaussian(self, address: Sequence[int], shape, dtype=None) -> np.ndarray:
        dtype = dtype or T.default_dtype()
        return self._rng(self._GAUSS, address).standard_normal(shape).astype(dtype)

    def uniform(self, address: Sequence[int], shape, dtype=np.float64) -> np.ndarray:
        # open interval (0, 1): Generator.random is [0, 1)
        u = self._rng(self._UNIFORM, address).random(shape)
        return np.where(u == 0.0, np.finfo(np.float64).tiny, u).astype(dtype)

    def gumbel(self, address: Sequence[int], shape, dtype=None) -> np.ndarray:
        dtype = dtype or T.default_dtype()
        u = self._rng(self._GUMBEL, address).random(shape)
        u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).eps)
        return (-np.log(-np.log(u))).astype(dtype)


def variance_head(enc: EncoderOutput, params: VarianceHeadParams, kind: str = "relu") -> Tensor:
    """Per-position log-variances, [B, N, 2d].

    ``relu`` keeps log-variances non-negative (so every variance is at least
    one); ``softplus`` is a smooth version of the same; ``linear`` is
    unconstrained.
    """
    if enc.encodings.shape[-1] != params.W_var.shape[1]:
        raise DimensionError(f"encodings {enc.encodings.shape} incompatible with W_var {params.W_var.shape}")
    pre = T.linear(enc.encodings, params.W_var, params.b_var)
    if kind == "relu":
        return T.relu(pre)
    if kind == "softplus":
        return T.softplus(pre)
    if kind == "linear":
        return pre
    raise ConfigError(f"unknown variance head {kind!r}; expected one of {VARIANCE_HEADS}")


def build_posterior(enc: EncoderOutput, a_t: AttentionWeights, log_vars: Tensor) -> MixturePosterior:
    """Bundle component means, log-variances and mixing weights for one step.

    ``log_vars`` is the :func:`variance_head` output; it does not depend on
    the step, so callers compute it once per sequence.
    """
    if a_t.weights.shape != enc.mask.shape or log_vars.shape != enc.encodings.shape:
        raise DimensionError("posterior pieces disagree on batch or length")
    return MixturePosterior(enc.encodings, log_vars, a_t.weights, enc.mask)


def gaussian_reparam_sample(mean: Tensor, log_var: Tensor, epsilon) -> Tensor:
    """``mean + exp(log_var / 2) * epsilon``."""
    eps = epsilon if isinstance(epsilon, Tensor) else Tensor(epsilon, dtype=mean.dtype)
    if eps.shape != mean.shape or log_var.shape != mean.shape:
        raise DimensionError(f"reparam shapes differ: {mean.shape}, {log_var.shape}, {eps.shape}")
    return mean + T.exp(T.scale(log_var, 0.5)) * eps


def gumbel_softmax_sample(weights: Tensor, temperature: float, gumbels, mask: np.ndarray) -> Tensor:
    """Relaxed one-hot draw: ``softmax((log w + g) / temperature)`` over unmasked positions."""
    if not temperature > 0:
        raise ConfigError(f"Gumbel-Softmax temperature must be positive, got {temperature}")
    g = gumbels if isinstance(gumbels, Tensor) else Tensor(gumbels, dtype=weights.dtype)
    mask = np.asarray(mask, dtype=bool)
    # masked entries are zeroed by the softmax; lift them to the floor so log stays finite
    floored = T.log_floor(weights, GUMBEL_WEIGHT_FLOOR)
    return T.softmax(T.scale(floored + g, 1.0 / temperature), mask)


def _components(post: MixturePosterior, eps: np.ndarray) -> Tensor:
    return gaussian_reparam_sample(post.means, post.log_vars, eps)


def _mix(weights: Tensor, comps: Tensor) -> Tensor:
    B, N, D = comps.shape
    return T.reshape(T.bmm(T.reshape(weights, (B, 1, N)), comps), (B, D))


def sample_context(post: MixturePosterior, mode: str, noise: Optional[NoiseSource] = None,
                   temperature: float = 0.5, address: Sequence[int] = (0,),
                   epsilon: Optional[np.ndarray] = None,
                   gumbels: Optional[np.ndarray] = None) -> ContextSample:
    """Draw one context vector per batch row.

    ``epsilon`` ([B, N, 2d]) and ``gumbels`` ([B, N]) override the draws from
    ``noise`` at ``address`` when given.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown context mode {mode!r}; expected one of {MODES}")
    B, N, D = post.means.shape
    dtype = post.means.dtype
    if mode == "mean":
        a = AttentionWeights(post.weights, post.weights, post.mask)
        return ContextSample(sa_context(a, EncoderOutput(post.means, post.mask, None, None)), mode)

    if epsilon is None:
        if noise is None:
            raise ValueError(f"mode {mode!r} needs a NoiseSource or explicit epsilon")
        epsilon = noise.gaussian((*address, 0), (B, N, D), dtype)
    comps = _components(post, epsilon)

    if mode == "heuristic":
        return ContextSample(_mix(post.weights, comps), mode)

    if mode == "gumbel":
        if gumbels is None:
            if noise is None:
                raise ValueError("gumbel mode needs a NoiseSource or explicit gumbels")
            gumbels = noise.gumbel((*address, 1), (B, N), dtype)
        z = gumbel_softmax_sample(post.weights, temperature, gumbels, post.mask)
        return ContextSample(_mix(z, comps), mode, z)

    # hard: exact categorical component choice, evaluation only
    if noise is None:
        raise ValueError("hard mode needs a NoiseSource")
    u = noise.uniform((*address, 2), (B,))
    picks = categorical_from_uniform(post.weights.data, u)
    one_hot = np.zeros((B, N), dtype=dtype)
    one_hot[np.arange(B), picks] = 1.0
    value = T.getitem(comps, (np.arange(B), picks))
    return ContextSample(value, mode, Tensor(one_hot, dtype=dtype))


def categorical_from_uniform(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical draw per row of ``weights`` given uniforms ``u``."""
    cdf = np.cumsum(np.asarray(weights, dtype=np.float64), axis=1)
    cdf /= cdf[:, -1:]
    picks = (u[:, None] >= cdf).sum(axis=1)
    # never land on a zero-weight position because of rounding at the top of the cdf
    picks = np.minimum(picks, weights.shape[1] - 1)
    for b in range(len(picks)):
        while weights[b, picks[b]] <= 0 and picks[b] > 0:
            picks[b] -= 1
    return picks


def gaussian_kl_to_standard(mean: Tensor, log_var: Tensor) -> Tensor:
    """Closed-form ``KL(N(mean, diag exp(log_var)) || N(0, I))`` summed over the last axis."""
    terms = T.exp(log_var) + T.square(mean) - log_var
    return T.scale(T.sum(terms, axis=-1) - float(mean.shape[-1]), 0.5)


def mixture_log_density(post: MixturePosterior, c: Tensor) -> Tensor:
    """``log sum_i a_i N(c | h_i, diag sigma_i^2)`` for c [B, 2d] -> [B]."""
    B, N, D = post.means.shape
    cc = T.broadcast_to(T.reshape(c, (B, 1, D)), (B, N, D))
    diff = cc - post.means
    quad = T.sum(T.square(diff) * T.exp(T.neg(post.log_vars)), axis=2)
    log_norm = T.scale(T.sum(post.log_vars, axis=2) + quad, -0.5) - 0.5 * D * _LOG_2PI
    logits = T.log_floor(post.weights, 1e-300) + log_norm
    logits = T.where(post.mask, logits, Tensor(np.full((B, N), -1e30, dtype=logits.dtype)))
    # log-sum-exp with a constant shift: exact gradient, no overflow
    shift = logits.data.max(axis=1)
    shifted = logits - T.broadcast_to(T.reshape(Tensor(shift, dtype=logits.dtype), (B, 1)), (B, N))
    return T.log(T.sum(T.exp(shifted), axis=1)) + Tensor(shift, dtype=logits.dtype)


def standard_normal_log_density(c: Tensor) -> Tensor:
    D = c.shape[-1]
    return T.scale(T.sum(T.square(c), axis=-1), -0.5) - 0.5 * D * _LOG_2PI


def kl_term(post: MixturePosterior, estimator: str = "bound", noise: Optional[NoiseSource] = None,
            address: Sequence[int] = (0,)) -> Tensor:
    """KL from the mixture posterior to ``N(0, I)``, per batch row -> [B].

    ``bound`` is ``sum_i a_i KL(N_i || N(0, I))``, an upper bound by convexity.
    ``mc`` is a one-sample estimate ``log q(c) - log p(c)`` at an exact draw.
    """
    if estimator == "bound":
        per_component = gaussian_kl_to_standard(post.means, post.log_vars)
        return T.sum(post.weights * per_component, axis=1)
    if estimator == "mc":
        if noise is None:
            raise ValueError("the Monte Carlo KL estimator needs a NoiseSource")
        c = sample_context(post, "hard", noise, address=address).value
        return mixture_log_density(post, c) - standard_normal_log_density(c)
    raise ConfigError(f"unknown KL estimator {estimator!r}; expected 'bound' or 'mc'")


def elbo_step_loss(log_likelihood_t: Tensor, kl_t: Tensor, kl_weight: float = 1.0) -> Tensor:
    """Negative ELBO contribution of one step: ``-log_lik + kl_weight * KL``."""
    if kl_weight < 0:
        raise ConfigError(f"kl_weight must be non-negative, got {kl_weight}")
    if kl_weight == 0:
        return T.neg(log_likelihood_t)
    return T.neg(log_likelihood_t) + T.scale(kl_t, kl_weight)
