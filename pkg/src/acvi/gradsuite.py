"""Registered finite-difference gradient checks.

Every differentiable tensor op, the layer functions built on them, and the
full SA / ACVI training losses (with frozen noise) are checked in float64
against central differences.  Each case reduces its output to a scalar with a
fixed random readout so that no gradient cancels by symmetry (a plain sum of
a softmax, for instance, has zero gradient everywhere).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .attention import (AttentionParams, CoverageState, attention_scores, attention_weights, coverage_loss,
                        project_encodings, sa_context)
from .config import TrainConfig
from .data import build_vocab, encode_pair, make_batch, pair_corpus, synth_task
from .model import Seq2Seq, init_params
from .pointer import OutputParams, final_distribution, generation_prob, target_log_prob, vocab_distribution
from .posterior import (MixturePosterior, NoiseSource, VarianceHeadParams, gaussian_kl_to_standard,
                        gaussian_reparam_sample, gumbel_softmax_sample, kl_term, mixture_log_density,
                        variance_head)
from .rnn import EncoderOutput, LSTMState, encode_bilstm
from .tensor import GradCheckReport, ParamStore, Tensor

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
SUITES = ("ops", "layers", "model")

Builder = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], ParamStore]]


@dataclass
class GradCase:
    name: str
    suite: str
    build: Builder
    tolerance: float


@dataclass
class CaseResult:
    name: str
    suite: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


REGISTRY: Dict[str, GradCase] = {}


def register(name: str, suite: str, tolerance: float = OP_TOLERANCE):
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}")

    def deco(fn: Builder) -> Builder:
        if name in REGISTRY:
            raise KeyError(f"gradient case {name!r} registered twice")
        REGISTRY[name] = GradCase(name, suite, fn, tolerance)
        return fn

    return deco


class _Readout:
    """``sum(w * y)`` with ``w`` drawn once, on first use, from the case's generator."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.w: Optional[np.ndarray] = None

    def __call__(self, y: Tensor) -> Tensor:
        if self.w is None:
            self.w = self.rng.standard_normal(y.shape)
        return T.sum(y * Tensor(self.w, dtype=np.float64))


def _store(rng: np.random.Generator, **shapes) -> ParamStore:
    store = ParamStore()
    for name, shape in shapes.items():
        store.add(name, Tensor(rng.standard_normal(shape), dtype=np.float64))
    return store


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.2) -> np.ndarray:
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def _unary(name: str, fn, sample=None):
    @register(name, "ops")
    def build(rng):
        s = _store(rng, x=(3, 4))
        if sample is not None:
            s.set_data("x", sample(rng, (3, 4)))
        out = _Readout(rng)
        return (lambda: out(fn(s["x"]))), s
    return build


_unary("tanh", T.tanh)
_unary("sigmoid", T.sigmoid)
_unary("relu", T.relu, _away_from_zero)
_unary("softplus", T.softplus)
_unary("exp", T.exp)
_unary("log", T.log, lambda rng, shape: rng.uniform(0.3, 2.0, size=shape))
_unary("square", T.square)
_unary("neg", T.neg)
_unary("scale", lambda x: T.scale(x, -1.7))
_unary("mean", lambda x: T.mean(x, axis=1))
_unary("sum_all", lambda x: T.scale(T.sum(x), 1.0) * T.sum(x))
_unary("sum_axis", lambda x: T.sum(x, axis=0))
_unary("reshape", lambda x: T.reshape(x, (2, 6)))
_unary("transpose", lambda x: T.transpose(x))
_unary("broadcast_to", lambda x: T.broadcast_to(T.reshape(x, (3, 1, 4)), (2, 3, 5, 4)))
_unary("getitem_slice", lambda x: x[1:, ::2])
_unary("getitem_advanced", lambda x: T.getitem(x, (np.array([0, 2, 0]), np.array([1, 1, 1]))))
_unary("softmax", T.softmax)
_unary("softmax_masked", lambda x: T.softmax(x, np.array([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], bool)))
_unary("log_floor", lambda x: T.log_floor(x, 0.25),
       lambda rng, shape: np.where(rng.random(shape) < 0.3, rng.uniform(0.0, 0.2, shape),
                                   rng.uniform(0.3, 2.0, shape)))


def _binary(name: str, fn, shape_b=(3, 4), sample=None):
    @register(name, "ops")
    def build(rng):
        s = _store(rng, a=(3, 4), b=shape_b)
        if sample is not None:
            a, b = sample(rng)
            s.set_data("a", a)
            s.set_data("b", b)
        out = _Readout(rng)
        return (lambda: out(fn(s["a"], s["b"]))), s
    return build


def _separated(rng):
    a = rng.standard_normal((3, 4))
    return a, a + _away_from_zero(rng, (3, 4))


_binary("add", T.add)
_binary("sub", T.sub)
_binary("mul", T.mul)
_binary("mul_scalar_operand", T.mul, shape_b=(1,))
_binary("matmul", T.matmul, shape_b=(4, 2))
_binary("add_bias", T.add_bias, shape_b=(4,))
_binary("minimum", T.minimum, sample=_separated)
_binary("where", lambda a, b: T.where(np.array([[1, 0, 1, 0]] * 3, bool), a, b))
_binary("concat", lambda a, b: T.concat([a, b], axis=1), shape_b=(3, 2))
_binary("stack", lambda a, b: T.stack([a, b], axis=1))


@register("elementwise", "ops")
def _elementwise(rng):
    s = _store(rng, a=(2, 3), b=(2, 3))
    out = _Readout(rng)
    return (lambda: out(T.elementwise("mul", T.elementwise("tanh", s["a"]), s["b"]))), s


@register("bmm", "ops")
def _bmm(rng):
    s = _store(rng, a=(2, 3, 4), b=(2, 4, 5))
    out = _Readout(rng)
    return (lambda: out(T.bmm(s["a"], s["b"]))), s


@register("linear", "ops")
def _linear(rng):
    s = _store(rng, x=(2, 3, 4), w=(5, 4), b=(5,))
    out = _Readout(rng)
    return (lambda: out(T.linear(s["x"], s["w"], s["b"]))), s


@register("embedding", "ops")
def _embedding(rng):
    s = _store(rng, table=(6, 3))
    ids = np.array([[1, 4, 4], [5, 2, 1]])  # no padding id: its row gets no gradient by design
    out = _Readout(rng)
    return (lambda: out(T.embedding(s["table"], ids))), s


@register("scatter_add", "ops")
def _scatter_add(rng):
    s = _store(rng, src=(2, 4))
    index = np.array([[0, 3, 3, 1], [2, 2, 2, 5]])
    out = _Readout(rng)
    return (lambda: out(T.scatter_add(s["src"], index, 6))), s


@register("gather_last", "ops")
def _gather_last(rng):
    s = _store(rng, x=(3, 5))
    out = _Readout(rng)
    return (lambda: out(T.gather_last(s["x"], np.array([4, 0, 4])))), s


@register("lstm_cell", "ops")
def _lstm_cell(rng):
    d, e = 3, 2
    s = _store(rng, x=(3, e), h=(3, d), c=(3, d), w=(4 * d, e + d), b=(4 * d,))
    mask = np.array([True, False, True])
    out = _Readout(rng)
    return (lambda: out(T.lstm_cell(s["x"], s["h"], s["c"], s["w"], s["b"], mask))), s


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

_SRC_MASK = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)


def _encoder_store(rng, d=3, e=2):
    return _store(rng, emb=(2, 4, e), fW=(4 * d, e + d), fb=(4 * d,), bW=(4 * d, e + d), bb=(4 * d,))


def _encode(s) -> EncoderOutput:
    return encode_bilstm(s["emb"], _SRC_MASK, (s["fW"], s["fb"]), (s["bW"], s["bb"]))


@register("encode_bilstm", "layers")
def _bilstm(rng):
    s = _encoder_store(rng)
    out, fin = _Readout(rng), _Readout(rng)

    def fn():
        enc = _encode(s)
        return out(enc.encodings) + fin(T.concat([enc.forward_final.cell, enc.backward_final.hidden]))

    return fn, s


def _attention_store(rng, d=3, d_a=4):
    s = _store(rng, enc=(2, 4, 2 * d), s_t=(2, d), W_h=(d_a, 2 * d), W_s=(d_a, d), b=(d_a,), v=(d_a,),
               w_k=(d_a,), cov=(2, 4))
    s.set_data("cov", rng.uniform(0, 2, (2, 4)))
    return s


def _attention(s):
    enc = EncoderOutput(s["enc"], _SRC_MASK, None, None)
    params = AttentionParams(s["W_h"], s["W_s"], s["b"], s["v"], s["w_k"])
    state = LSTMState(s["s_t"], s["s_t"])
    cov = CoverageState(s["cov"])
    return enc, attention_weights(attention_scores(enc, state, params, cov, project_encodings(enc, params)),
                                  enc.mask), cov


@register("attention_context", "layers")
def _attention_context(rng):
    s = _attention_store(rng)
    out = _Readout(rng)

    def fn():
        enc, a, _ = _attention(s)
        return out(T.concat([sa_context(a, enc), a.weights], axis=1))

    return fn, s


@register("coverage_loss", "layers")
def _coverage(rng):
    s = _attention_store(rng)
    # keep attention and coverage apart so the min never sits at a tie
    s.set_data("cov", np.array([[0.02, 1.5, 0.01, 1.8], [1.2, 0.03, 0.5, 0.5]]))

    def fn():
        _, a, cov = _attention(s)
        return T.sum(coverage_loss(a, cov, 0.7) * Tensor([1.0, -2.0], dtype=np.float64))

    return fn, s


@register("variance_head", "layers")
def _variance(rng):
    s = _store(rng, enc=(2, 4, 6), W=(6, 6), b=(6,))
    out = _Readout(rng)

    def fn():
        enc = EncoderOutput(s["enc"], _SRC_MASK, None, None)
        p = VarianceHeadParams(s["W"], s["b"])
        pieces = [variance_head(enc, p, k) for k in ("softplus", "linear")]
        return out(T.concat(pieces, axis=2))

    return fn, s


@register("reparam_and_kl", "layers")
def _reparam(rng):
    s = _store(rng, mean=(3, 4), log_var=(3, 4))
    eps = rng.standard_normal((3, 4))
    out = _Readout(rng)
    return (lambda: out(T.concat([gaussian_reparam_sample(s["mean"], s["log_var"], eps),
                                  T.reshape(gaussian_kl_to_standard(s["mean"], s["log_var"]), (3, 1))],
                                 axis=1))), s


@register("gumbel_softmax", "layers")
def _gumbel(rng):
    s = _store(rng, logits=(2, 4))
    g = -np.log(-np.log(rng.uniform(0.05, 0.95, (2, 4))))
    out = _Readout(rng)
    return (lambda: out(gumbel_softmax_sample(T.softmax(s["logits"], _SRC_MASK), 0.7, g, _SRC_MASK))), s


@register("mixture_log_density", "layers")
def _mixture(rng):
    s = _store(rng, means=(2, 4, 3), log_vars=(2, 4, 3), logits=(2, 4), c=(2, 3))
    out = _Readout(rng)

    def fn():
        post = MixturePosterior(s["means"], s["log_vars"], T.softmax(s["logits"], _SRC_MASK), _SRC_MASK)
        return out(T.concat([T.reshape(mixture_log_density(post, s["c"]), (2, 1)),
                             T.reshape(kl_term(post, "bound"), (2, 1))], axis=1))

    return fn, s


@register("pointer_distribution", "layers")
def _pointer(rng):
    d, e, h, V = 3, 2, 4, 5
    s = _store(rng, s_t=(2, d), c_t=(2, 2 * d), x_t=(2, e), logits=(2, 4), V=(h, 3 * d), b=(h,),
               V_out=(V, h), b_out=(V,), w_c=(2 * d,), w_s=(d,), w_x=(e,), b_ptr=(1,))
    ext = np.array([[4, 5, 2, 6], [1, 6, 0, 0]])
    targets = np.array([6, 4])

    def fn():
        p = OutputParams(s["V"], s["b"], s["V_out"], s["b_out"], s["w_c"], s["w_s"], s["w_x"], s["b_ptr"])
        pv = vocab_distribution(s["s_t"], s["c_t"], p)
        pg = generation_prob(s["c_t"], s["s_t"], s["x_t"], p)
        final = final_distribution(pv, pg, T.softmax(s["logits"], _SRC_MASK), ext, 2).probs
        return T.sum(target_log_prob(final, targets) * Tensor([1.0, 0.6], dtype=np.float64))

    return fn, s


# ---------------------------------------------------------------------------
# End-to-end step losses
# ---------------------------------------------------------------------------

def micro_instance(rng: np.random.Generator, model: str, pointer: bool = True, coverage: bool = True,
                   **overrides):
    """A tiny model, batch and config with random wide-precision parameters.

    Parameters are drawn larger than the training initialisation so that every
    gradient is comfortably above the finite-difference noise floor.
    """
    cfg = TrainConfig(model=model, pointer=pointer, coverage=coverage, hidden=3, embed=2, attn=3,
                      out_hidden=4, vocab_max_size=9, seed=int(rng.integers(1 << 30)), **overrides)
    pairs = synth_task("pointer", int(rng.integers(1 << 30)), 2, 5, 2, 4, rare_size=3)
    vocab = build_vocab(pair_corpus(pairs), cfg.vocab_max_size)
    encoded = [encode_pair(s, t, vocab) for s, t in pairs]
    batch = make_batch(encoded, pointer)
    with T.wide():
        params = init_params(cfg, len(vocab), seed=int(rng.integers(1 << 30)), dtype=np.float64)
    for name, t in params.items():
        scale = 0.6 if name.endswith(".W") or name.startswith("attn") else 0.4
        data = rng.uniform(-scale, scale, size=t.shape)
        if name in ("src_embed", "tgt_embed"):
            data[0] = 0.0
        params.set_data(name, data)
    if model == "acvi":
        # ReLU pre-activations land away from the kink: push half clearly positive
        params.set_data("var.b", np.where(np.arange(6) % 2 == 0, 0.8, -0.8))
    return Seq2Seq(cfg, len(vocab), params=params), batch


def _model_case(name: str, model: str, mode: str = "mean", estimator: str = "bound"):
    @register(name, "model", MODEL_TOLERANCE)
    def build(rng):
        seq, batch = micro_instance(rng, model, kl_estimator=estimator, mc_samples=2 if mode != "mean" else 1)
        noise = NoiseSource(7)

        def fn():
            return seq.forward(batch, iteration=3, mode=mode, noise=noise, use_coverage=True).loss

        return fn, seq.params
    return build


_model_case("sa_step_loss", "sa")
_model_case("acvi_mean_step_loss", "acvi", "mean")
_model_case("acvi_heuristic_step_loss", "acvi", "heuristic")
_model_case("acvi_gumbel_step_loss", "acvi", "gumbel")
_model_case("acvi_gumbel_mc_kl_step_loss", "acvi", "gumbel", "mc")


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def cases(suites: Sequence[str] = SUITES) -> List[GradCase]:
    unknown = set(suites) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown gradient suite(s) {sorted(unknown)}; expected {SUITES}")
    return [c for c in REGISTRY.values() if c.suite in suites]


def run_case(case: GradCase, seed: int = 0, epsilon: float = 1e-5) -> CaseResult:
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    start = time.perf_counter()
    with T.wide():
        fn, params = case.build(rng)
        report = T.grad_check(fn, params, epsilon=epsilon, tolerance=case.tolerance)
    return CaseResult(case.name, case.suite, report, time.perf_counter() - start)


def run(suites: Sequence[str] = SUITES, seed: int = 0) -> List[CaseResult]:
    return [run_case(c, seed) for c in cases(suites)]
