"""Sequence-to-sequence model with soft or stochastic (mixture posterior) attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as T
from .attention import (AttentionParams, CoverageState, attention_scores, attention_weights,
                        coverage_loss, project_encodings, sa_context, update_coverage)
from .config import TrainConfig
from .data import BOS, UNK, Batch, SequencePair, make_batch
from .errors import ConfigError
from .pointer import OutputParams, final_distribution, target_log_prob, vocab_distribution, generation_prob
from .posterior import (NoiseSource, VarianceHeadParams, build_posterior, elbo_step_loss, kl_term,
                        sample_context, variance_head)
from .rnn import EncoderOutput, LSTMState, bridge_state, decoder_step, encode_bilstm
from .tensor import ParamStore, Tensor

# leading element of every noise address, one per consumer
STREAM_CONTEXT, STREAM_DROPOUT, STREAM_KL, STREAM_DECODE = 0, 1, 2, 3


def init_params(config: TrainConfig, vocab_size: int, feature_dim: Optional[int] = None,
                seed: Optional[int] = None, dtype=None) -> ParamStore:
    """Uniform(-init_scale, init_scale) weights, zero biases, forget-gate bias 1."""
    dtype = dtype or T.default_dtype()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d, e, d_a, h = config.hidden, config.embed, config.attn, config.out_hidden
    V = vocab_size
    store = ParamStore()

    def weight(name, *shape, scale=config.init_scale):
        store.add(name, T.Tensor(rng.uniform(-scale, scale, size=shape), dtype=dtype))

    def zeros(name, *shape):
        store.add(name, T.Tensor(np.zeros(shape), dtype=dtype))

    def lstm(prefix, inp):
        weight(f"{prefix}.W", 4 * d, inp + d)
        b = np.zeros(4 * d)
        b[d:2 * d] = 1.0
        store.add(f"{prefix}.b", T.Tensor(b, dtype=dtype))

    if feature_dim is None:
        weight("src_embed", V, e, scale=config.embed_init)
    else:
        weight("feat.W", e, feature_dim)
        zeros("feat.b", e)
    weight("tgt_embed", V, e, scale=config.embed_init)
    lstm("enc.fwd", e)
    lstm("enc.bwd", e)
    weight("bridge.W_h", d, 2 * d)
    zeros("bridge.b_h", d)
    weight("bridge.W_c", d, 2 * d)
    zeros("bridge.b_c", d)
    lstm("dec", e)
    weight("attn.W_h", d_a, 2 * d)
    weight("attn.W_s", d_a, d)
    zeros("attn.b", d_a)
    weight("attn.v", d_a)
    zeros("attn.w_k", d_a)
    weight("out.V", h, 3 * d)
    zeros("out.b", h)
    weight("out.V_out", V, h)
    zeros("out.b_out", V)
    if config.pointer:
        weight("ptr.w_c", 2 * d)
        weight("ptr.w_s", d)
        weight("ptr.w_x", e)
        zeros("ptr.b", 1)
    if config.model == "acvi":
        weight("var.W", 2 * d, 2 * d)
        zeros("var.b", 2 * d)
    for name in ("src_embed", "tgt_embed"):
        if name in store:
            store[name].data[0] = 0.0  # PAD row
    return store


@dataclass
class ForwardResult:
    loss: Tensor  # scalar: summed step losses / number of target tokens
    step_log_lik: np.ndarray  # [T, B], zero on padded steps
    step_kl: np.ndarray  # [T, B]
    step_coverage: np.ndarray  # [T, B]
    predictions: np.ndarray  # [B, T] argmax over the (extended) output distribution
    attention: np.ndarray  # [B, T, N]
    n_tokens: int
    correct: int


class Seq2Seq:
    """BiLSTM encoder, LSTM decoder, additive attention and an optional copy head.

    ``config.model`` selects the context vector: ``sa`` uses the attention
    weighted average, ``acvi`` samples it from the mixture posterior.
    """

    def __init__(self, config: TrainConfig, vocab_size: int, feature_dim: Optional[int] = None,
                 params: Optional[ParamStore] = None):
        if feature_dim is not None and config.pointer:
            raise ConfigError("the copy head needs token sources; disable pointer for feature inputs")
        self.config = config
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.params = params if params is not None else init_params(config, vocab_size, feature_dim)

    # parameter views -----------------------------------------------------
    def attention_params(self) -> AttentionParams:
        p = self.params
        return AttentionParams(p["attn.W_h"], p["attn.W_s"], p["attn.b"], p["attn.v"], p["attn.w_k"])

    def output_params(self) -> OutputParams:
        p = self.params
        ptr = [p[n] for n in ("ptr.w_c", "ptr.w_s", "ptr.w_x", "ptr.b")] if self.config.pointer else [None] * 4
        return OutputParams(p["out.V"], p["out.b"], p["out.V_out"], p["out.b_out"], *ptr)

    def variance_params(self) -> VarianceHeadParams:
        return VarianceHeadParams(self.params["var.W"], self.params["var.b"])

    # building blocks -----------------------------------------------------
    def _dropout(self, x: Tensor, noise: Optional[NoiseSource], address) -> Tensor:
        rate = self.config.dropout
        if rate <= 0 or noise is None:
            return x
        keep = noise.uniform((STREAM_DROPOUT, *address), x.shape) >= rate
        return x * Tensor(keep / (1.0 - rate), dtype=x.dtype)

    def encode(self, batch: Batch, noise: Optional[NoiseSource] = None, iteration: int = 0) -> EncoderOutput:
        p = self.params
        if self.feature_dim is not None:
            if batch.features is None:
                raise ConfigError("model expects feature-sequence inputs")
            x = T.linear(Tensor(batch.features, dtype=p["feat.W"].dtype), p["feat.W"], p["feat.b"])
        else:
            x = T.embedding(p["src_embed"], batch.src_ids)
        x = self._dropout(x, noise, (iteration, 0))
        return encode_bilstm(x, batch.src_mask, (p["enc.fwd.W"], p["enc.fwd.b"]),
                             (p["enc.bwd.W"], p["enc.bwd.b"]))

    def initial_state(self, enc: EncoderOutput) -> LSTMState:
        p = self.params
        return bridge_state(enc, p["bridge.W_h"], p["bridge.b_h"], p["bridge.W_c"], p["bridge.b_c"])

    def output_probs(self, s_t: Tensor, c_t: Tensor, x_t: Tensor, a_t: Tensor,
                     src_ext: np.ndarray, n_oov: int) -> Tensor:
        op = self.output_params()
        p_vocab = vocab_distribution(s_t, c_t, op)
        if not self.config.pointer:
            return p_vocab
        p_gen = generation_prob(c_t, s_t, x_t, op)
        return final_distribution(p_vocab, p_gen, a_t, src_ext, n_oov).probs

    def contexts(self, enc: EncoderOutput, weights, log_vars: Optional[Tensor], mode: str,
                 noise: Optional[NoiseSource], address) -> List[Tensor]:
        if self.config.model == "sa":
            return [sa_context(weights, enc)]
        post = build_posterior(enc, weights, log_vars)
        if mode == "mean":
            return [sample_context(post, "mean").value]
        return [sample_context(post, mode, noise, self.config.gumbel_temperature,
                               address=(STREAM_CONTEXT, *address, k)).value
                for k in range(self.config.mc_samples)]

    # teacher-forced pass -------------------------------------------------
    def forward(self, batch: Batch, iteration: int = 0, mode: str = "mean",
                noise: Optional[NoiseSource] = None, use_coverage: Optional[bool] = None,
                kl_weight: Optional[float] = None, training: bool = False) -> ForwardResult:
        """Teacher-forced loss over a batch.

        ``mode`` is the context sampling route for ACVI models.  The loss is the
        sum over real target tokens of the per-step loss, divided by the token
        count: cross-entropy for SA, negative ELBO for ACVI, plus the coverage
        penalty when ``use_coverage`` is on.
        """
        cfg = self.config
        p = self.params
        if use_coverage is None:
            use_coverage = cfg.coverage
        if kl_weight is None:
            kl_weight = cfg.kl_weight
        drop_noise = noise if training else None
        enc = self.encode(batch, drop_noise, iteration)
        state = self.initial_state(enc)
        ap = self.attention_params()
        proj = project_encodings(enc, ap)
        log_vars = variance_head(enc, self.variance_params(), cfg.variance_head) if cfg.model == "acvi" else None
        B, N = batch.src_mask.shape
        steps = batch.dec_in.shape[1]
        x_all = self._dropout(T.embedding(p["tgt_embed"], batch.dec_in), drop_noise, (iteration, 1))
        cov = CoverageState.zeros(B, N, p["attn.v"].dtype) if use_coverage else None

        step_losses, lls, kls, covs, preds, attn = [], [], [], [], [], []
        for t in range(steps):
            x_t = x_all[:, t, :]
            state = decoder_step(x_t, state, p["dec.W"], p["dec.b"])
            a = attention_weights(attention_scores(enc, state, ap, cov, proj), enc.mask)
            ctxs = self.contexts(enc, a, log_vars, mode, noise, (iteration, t))
            target = batch.dec_target[:, t]
            step_ll = []
            for c in ctxs:
                probs = self.output_probs(state.hidden, c, x_t, a.weights, batch.src_ext, batch.n_oov)
                step_ll.append(target_log_prob(probs, target))
            if len(step_ll) == 1:
                ll = step_ll[0]
            else:
                ll = T.scale(T.sum(T.stack(step_ll, axis=0), axis=0), 1.0 / len(step_ll))
            if cfg.model == "acvi":
                kl = kl_term(build_posterior(enc, a, log_vars), cfg.kl_estimator, noise,
                             address=(STREAM_KL, iteration, t))
                loss_t = elbo_step_loss(ll, kl, kl_weight)
                kls.append(kl.data)
            else:
                loss_t = T.neg(ll)
                kls.append(np.zeros(B))
            if cov is not None:
                cl = coverage_loss(a, cov, cfg.coverage_lambda)
                loss_t = loss_t + cl
                covs.append(cl.data)
                cov = update_coverage(cov, a)
            else:
                covs.append(np.zeros(B))
            step_losses.append(loss_t)
            lls.append(ll.data)
            preds.append(np.argmax(probs.data, axis=1))
            attn.append(a.weights.data)

        mask = batch.dec_mask
        n_tokens = int(mask.sum())
        stacked = T.stack(step_losses, axis=1)  # [B, T]
        masked = stacked * Tensor(mask.astype(stacked.dtype), dtype=stacked.dtype)
        loss = T.scale(T.sum(masked), 1.0 / max(n_tokens, 1))
        predictions = np.stack(preds, axis=1)
        correct = int(((predictions == batch.dec_target) & mask).sum())
        m = mask.T
        return ForwardResult(loss, np.where(m, np.stack(lls), 0.0), np.where(m, np.stack(kls), 0.0),
                             np.where(m, np.stack(covs), 0.0), predictions,
                             np.stack(attn, axis=1), n_tokens, correct)

    def session(self, pair: SequencePair, context: Optional[str] = None,
                noise: Optional[NoiseSource] = None) -> "DecoderSession":
        return DecoderSession(self, pair, context or self.config.decode_context, noise)


@dataclass
class DecodeState:
    lstm: LSTMState
    coverage: Optional[CoverageState]
    t: int
    attention: Optional[np.ndarray] = None


class DecoderSession:
    """Step-wise access to a trained model for one source sequence.

    Implements the ``initial_state()`` / ``step(state, token)`` protocol used by
    the decoders in :mod:`acvi.decoding`.
    """

    def __init__(self, model: Seq2Seq, pair: SequencePair, context: str = "mean",
                 noise: Optional[NoiseSource] = None):
        self.model = model
        self.pair = pair
        self.context = context
        self.noise = noise
        cfg = model.config
        self.batch = make_batch([pair], pointer=cfg.pointer)
        self.enc = model.encode(self.batch)
        self.ap = model.attention_params()
        self.proj = project_encodings(self.enc, self.ap)
        self.log_vars = (variance_head(self.enc, model.variance_params(), cfg.variance_head)
                         if cfg.model == "acvi" else None)
        self.extended_size = model.vocab_size + self.batch.n_oov

    @property
    def oov_tokens(self) -> List[str]:
        return self.pair.oov_tokens

    def initial_state(self) -> DecodeState:
        cov = CoverageState.zeros(1, self.enc.length, self.proj.dtype) if self.model.config.coverage else None
        return DecodeState(self.model.initial_state(self.enc), cov, 0)

    def step(self, state: DecodeState, token: int):
        """Feed ``token`` and return (log-probs over the extended vocabulary, next state)."""
        m = self.model
        p = m.params
        tok = token if token < m.vocab_size else UNK
        x_t = T.embedding(p["tgt_embed"], np.array([tok]))
        lstm = decoder_step(x_t, state.lstm, p["dec.W"], p["dec.b"])
        a = attention_weights(attention_scores(self.enc, lstm, self.ap, state.coverage, self.proj),
                              self.enc.mask)
        if self.context == "mean" or m.config.model == "sa":
            c = m.contexts(self.enc, a, self.log_vars, "mean", None, ())[0]
        else:
            post = build_posterior(self.enc, a, self.log_vars)
            c = sample_context(post, "heuristic", self.noise, address=(STREAM_DECODE, state.t)).value
        probs = m.output_probs(lstm.hidden, c, x_t, a.weights, self.batch.src_ext, self.batch.n_oov)
        cov = update_coverage(state.coverage, a) if state.coverage is not None else None
        with np.errstate(divide="ignore"):
            logp = np.log(np.maximum(probs.data[0].astype(np.float64), 1e-300))
        return logp, DecodeState(lstm, cov, state.t + 1, a.weights.data[0])

    @staticmethod
    def start_token() -> int:
        return BOS
