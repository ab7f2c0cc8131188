"""Black-box variational inference over the tied-weight model.

The variational family is fully factorized gamma over every latent and
every free weight parameter, optimized in unconstrained (log-shape,
log-rate) coordinates by score-function gradients Rao-Blackwellized to
Markov blankets. One set of joint Monte Carlo draws per iteration serves
every coordinate (common random numbers).

Two sampling paths exist on purpose. The training loop draws through the
boost transform (fast, correct for soft-gamma shapes); the ELBO estimator
draws by inverse CDF from explicit uniforms, which makes the estimate a
smooth function of the variational parameters so common-random-number
finite differences of :func:`elbo_estimate` are meaningful.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _backend
from .data import CountMatrix
from .expfam import (
    PARAM_FLOOR,
    gamma_draw,
    gamma_logpdf,
    gamma_score_arrays,
)
from .model import ModelSpec

__all__ = [
    "NumericalError",
    "EstimatorConfig",
    "OptimizerConfig",
    "VariationalState",
    "WeightParams",
    "OptimizerState",
    "TrainReport",
    "QSamples",
    "draw_samples",
    "draw_uniforms",
    "samples_from_uniforms",
    "elbo_values",
    "elbo_estimate",
    "grad_z",
    "grad_w",
    "gradient_estimates",
    "Gradients",
    "train",
    "fit_test",
    "heldout_loglik",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
]

_CKPT_MAGIC = b"CDEFCKP\x00"
_CKPT_VERSION = 1

_TINY = np.finfo(np.float64).tiny


class NumericalError(RuntimeError):
    """Non-finite estimate or diverged optimization, with context."""

    def __init__(self, message, *, iteration=None, block=None, sample_index=None):
        super().__init__(message)
        self.iteration = iteration
        self.block = block
        self.sample_index = sample_index


@dataclass(frozen=True)
class EstimatorConfig:
    """Monte Carlo settings for gradient and ELBO estimation."""

    mc_samples: int = 8
    seed: int = 0
    clip_norm: float | None = 10.0

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")


@dataclass(frozen=True)
class OptimizerConfig:
    """Per-coordinate adaptive gradient ascent (RMSProp-style).

    The step size anneals as ``step_size * (anneal_delay / (anneal_delay +
    t)) ** anneal_power`` and the returned state averages the unconstrained
    parameters over the final ``average_tail`` fraction of iterations
    (Polyak-style). Both exist for the same reason: a fixed step leaves the
    iterate hovering in a noise ball around the optimum instead of settling
    into it. Set ``anneal_power=0`` and ``average_tail=0`` for plain
    fixed-step updates.
    """

    step_size: float = 0.1
    decay: float = 0.9
    floor: float = 1e-16
    anneal_power: float = 0.7
    anneal_delay: int = 500
    average_tail: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.anneal_power < 0 or self.anneal_delay < 1:
            raise ValueError("anneal_power must be >= 0 and anneal_delay >= 1")
        if not 0.0 <= self.average_tail < 1.0:
            raise ValueError("average_tail must lie in [0, 1)")

    def step_at(self, iteration: int) -> float:
        if self.anneal_power == 0:
            return self.step_size
        frac = self.anneal_delay / (self.anneal_delay + iteration)
        return self.step_size * frac**self.anneal_power


@dataclass
class WeightParams:
    """The weight part of a variational state, in unconstrained form."""

    log_shape: list[np.ndarray]
    log_rate: list[np.ndarray]

    def copy(self) -> "WeightParams":
        return WeightParams(
            [a.copy() for a in self.log_shape], [a.copy() for a in self.log_rate]
        )


def _constrain(u: np.ndarray) -> np.ndarray:
    return np.maximum(np.exp(u), PARAM_FLOOR)


class VariationalState:
    """Mean-field gamma parameters for all latents and weights.

    Stored unconstrained as log-shape and log-rate; constrained values are
    ``max(exp(u), 1e-10)`` so they stay positive through any optimizer step.
    """

    def __init__(self, z_log_shape, z_log_rate, w_log_shape, w_log_rate):
        self.z_log_shape = [np.asarray(a, dtype=np.float64) for a in z_log_shape]
        self.z_log_rate = [np.asarray(a, dtype=np.float64) for a in z_log_rate]
        self.w_log_shape = [np.asarray(a, dtype=np.float64) for a in w_log_shape]
        self.w_log_rate = [np.asarray(a, dtype=np.float64) for a in w_log_rate]

    @classmethod
    def initial(cls, spec: ModelSpec, n_samples: int) -> "VariationalState":
        """Neutral start: q(z) = Gamma(1, 1), q(W) = Gamma(1, 1 / prior mean).

        q(W) keeps the prior mean but starts at shape 1 rather than the
        prior's soft shape: draws from a shape-0.1 gamma span tens of log
        orders, which floors the downstream rates and hands the score
        estimator unbounded variance on the first iteration.
        """
        z_ls = [np.zeros((n_samples, layer.size)) for layer in spec.layers]
        z_lr = [np.zeros((n_samples, layer.size)) for layer in spec.layers]
        w_mean = spec.weight_prior.shape / spec.weight_prior.rate
        w_ls = [np.zeros(t.n_params) for t in spec.weight_tyings]
        w_lr = [np.full(t.n_params, -np.log(w_mean)) for t in spec.weight_tyings]
        return cls(z_ls, z_lr, w_ls, w_lr)

    @property
    def n_samples(self) -> int:
        return self.z_log_shape[0].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.z_log_shape)

    def z_shapes(self, l: int) -> np.ndarray:
        return _constrain(self.z_log_shape[l])

    def z_rates(self, l: int) -> np.ndarray:
        return _constrain(self.z_log_rate[l])

    def w_shapes(self, l: int) -> np.ndarray:
        return _constrain(self.w_log_shape[l])

    def w_rates(self, l: int) -> np.ndarray:
        return _constrain(self.w_log_rate[l])

    def z_params(self, n: int, l: int, k: int):
        from .expfam import GammaParams

        return GammaParams(
            shape=float(self.z_shapes(l)[n, k]), rate=float(self.z_rates(l)[n, k])
        )

    def w_params(self, l: int, t: int):
        from .expfam import GammaParams

        return GammaParams(
            shape=float(self.w_shapes(l)[t]), rate=float(self.w_rates(l)[t])
        )

    def weight_params(self) -> WeightParams:
        return WeightParams(
            [a.copy() for a in self.w_log_shape], [a.copy() for a in self.w_log_rate]
        )

    def set_weight_params(self, wp: WeightParams):
        if len(wp.log_shape) != len(self.w_log_shape):
            raise ValueError("weight parameter layer count mismatch")
        self.w_log_shape = [a.copy() for a in wp.log_shape]
        self.w_log_rate = [a.copy() for a in wp.log_rate]

    def copy(self) -> "VariationalState":
        return VariationalState(
            [a.copy() for a in self.z_log_shape],
            [a.copy() for a in self.z_log_rate],
            [a.copy() for a in self.w_log_shape],
            [a.copy() for a in self.w_log_rate],
        )


@dataclass
class OptimizerState:
    """Accumulated squared-gradient statistics, one entry per coordinate."""

    z_acc_shape: list[np.ndarray]
    z_acc_rate: list[np.ndarray]
    w_acc_shape: list[np.ndarray]
    w_acc_rate: list[np.ndarray]

    @classmethod
    def zeros_like(cls, vstate: VariationalState) -> "OptimizerState":
        return cls(
            [np.zeros_like(a) for a in vstate.z_log_shape],
            [np.zeros_like(a) for a in vstate.z_log_rate],
            [np.zeros_like(a) for a in vstate.w_log_shape],
            [np.zeros_like(a) for a in vstate.w_log_rate],
        )


@dataclass
class TrainReport:
    """Per-iteration ELBO trace plus run metadata."""

    elbo_trace: np.ndarray
    iterations: int
    seed: int
    wall_time: float = 0.0

    @property
    def final_elbo(self) -> float:
        return float(self.elbo_trace[-1]) if len(self.elbo_trace) else float("nan")


@dataclass
class QSamples:
    """One batch of joint draws from q: z[l] is (B, N, K_l), w[l] is (B, F_l)."""

    z: list[np.ndarray]
    w: list[np.ndarray] | None

    @property
    def n_draws(self) -> int:
        return self.z[0].shape[0]


# ---------------------------------------------------------------------------
# Sampling.
# ---------------------------------------------------------------------------


def draw_samples(
    vstate: VariationalState, n_draws: int, rng, *, with_weights: bool = True
) -> QSamples:
    """Joint draws via the boost-transform sampler.

    Draw order is fixed (z layers bottom-up, then weight layers) so a given
    generator state always yields the same batch.
    """
    z = []
    for l in range(vstate.n_layers):
        a = vstate.z_shapes(l)
        r = vstate.z_rates(l)
        z.append(gamma_draw(a[None], r[None], rng, size=(n_draws,) + a.shape))
    w = None
    if with_weights:
        w = []
        for l in range(len(vstate.w_log_shape)):
            a = vstate.w_shapes(l)
            r = vstate.w_rates(l)
            w.append(gamma_draw(a[None], r[None], rng, size=(n_draws,) + a.shape))
    return QSamples(z=z, w=w)


def draw_uniforms(
    spec: ModelSpec, n_samples: int, n_draws: int, rng, *, with_weights: bool = True
):
    """Uniform variates shaped for :func:`samples_from_uniforms`."""
    z = [
        rng.random((n_draws, n_samples, layer.size)) for layer in spec.layers
    ]
    w = None
    if with_weights:
        w = [rng.random((n_draws, t.n_params)) for t in spec.weight_tyings]
    return {"z": z, "w": w}


def samples_from_uniforms(vstate: VariationalState, uniforms) -> QSamples:
    """Inverse-CDF gamma draws, a smooth function of the q parameters."""
    z = []
    for l, u in enumerate(uniforms["z"]):
        a = vstate.z_shapes(l)[None]
        r = vstate.z_rates(l)[None]
        u = np.clip(u, _TINY, 1.0 - 1e-16)
        z.append(np.maximum(special.gammaincinv(a, u) / r, _TINY))
    w = None
    if uniforms["w"] is not None:
        w = []
        for l, u in enumerate(uniforms["w"]):
            a = vstate.w_shapes(l)[None]
            r = vstate.w_rates(l)[None]
            u = np.clip(u, _TINY, 1.0 - 1e-16)
            w.append(np.maximum(special.gammaincinv(a, u) / r, _TINY))
    return QSamples(z=z, w=w)


# ---------------------------------------------------------------------------
# Joint evaluation of blankets, log joint and log q over a sample batch.
# ---------------------------------------------------------------------------


@dataclass
class _Bundle:
    blanket_z: list[np.ndarray]  # (B, N, K_l)
    blanket_w: list[np.ndarray] | None  # (B, F_l)
    logq_z: list[np.ndarray]
    logq_w: list[np.ndarray] | None
    logp_total: np.ndarray  # (B,)
    logq_total: np.ndarray  # (B,)


def _prep_data(data: CountMatrix):
    counts = np.ascontiguousarray(data.counts, dtype=np.float64)
    mask = np.ascontiguousarray(data.mask, dtype=np.float64)
    lgx = special.gammaln(counts + 1.0)
    return counts, mask, lgx


def _weight_draws(samples: QSamples, fixed_weights, spec: ModelSpec, n_draws: int):
    if fixed_weights is None:
        return samples.w
    out = []
    for l, fw in enumerate(fixed_weights):
        fw = np.asarray(fw, dtype=np.float64)
        if fw.shape != (spec.weight_tyings[l].n_params,):
            raise ValueError(
                f"fixed weights for layer {l} need shape "
                f"({spec.weight_tyings[l].n_params},), got {fw.shape}"
            )
        out.append(np.ascontiguousarray(np.broadcast_to(fw, (n_draws, fw.size))))
    return out


def _evaluate(
    spec: ModelSpec,
    vstate: VariationalState,
    counts,
    mask,
    lgx,
    samples: QSamples,
    *,
    fixed_weights=None,
    full_joint: bool = False,
) -> _Bundle:
    L = spec.n_layers
    B = samples.n_draws
    z = [np.ascontiguousarray(a) for a in samples.z]
    w = _weight_draws(samples, fixed_weights, spec, B)
    w = [np.ascontiguousarray(a) for a in w]

    t0 = spec.weight_tyings[0]
    col0, par0, tot0 = _backend.obs_layer_stats(
        counts, mask, lgx, z[0], w[0], t0.filter_size, t0.stride, t0.tied
    )

    self_logp = {}
    col_sums = {0: col0}
    par_sums = {0: par0}
    totals = [tot0]
    for wl in range(1, L):
        t = spec.weight_tyings[wl]
        alpha = spec.layers[wl - 1].fixed_shape
        s_lp, c_s, p_s, tot = _backend.latent_layer_stats(
            z[wl - 1], alpha, z[wl], w[wl], t.filter_size, t.stride, t.tied
        )
        self_logp[wl] = s_lp
        col_sums[wl] = c_s
        par_sums[wl] = p_s
        totals.append(tot)

    top = gamma_logpdf(z[L - 1], spec.top_prior.shape, spec.top_prior.rate)

    logp_total = sum(t.sum(axis=1) for t in totals) + top.sum(axis=(1, 2))
    if fixed_weights is None:
        wprior = [
            gamma_logpdf(w[l], spec.weight_prior.shape, spec.weight_prior.rate)
            for l in range(L)
        ]
        logp_total = logp_total + sum(p.sum(axis=1) for p in wprior)

    blanket_z = []
    for l in range(L):
        own = self_logp[l + 1] if l < L - 1 else top
        blanket_z.append(own + col_sums[l])

    blanket_w = None
    if fixed_weights is None:
        blanket_w = [wprior[l] + par_sums[l] for l in range(L)]

    logq_z = [
        gamma_logpdf(z[l], vstate.z_shapes(l)[None], vstate.z_rates(l)[None])
        for l in range(L)
    ]
    logq_total = sum(q.sum(axis=(1, 2)) for q in logq_z)
    logq_w = None
    if fixed_weights is None:
        logq_w = [
            gamma_logpdf(w[l], vstate.w_shapes(l)[None], vstate.w_rates(l)[None])
            for l in range(L)
        ]
        logq_total = logq_total + sum(q.sum(axis=1) for q in logq_w)

    if full_joint:
        blanket_z = [np.broadcast_to(logp_total[:, None, None], b.shape) for b in blanket_z]
        if blanket_w is not None:
            blanket_w = [np.broadcast_to(logp_total[:, None], b.shape) for b in blanket_w]

    return _Bundle(
        blanket_z=blanket_z,
        blanket_w=blanket_w,
        logq_z=logq_z,
        logq_w=logq_w,
        logp_total=np.asarray(logp_total),
        logq_total=np.asarray(logq_total),
    )


@dataclass
class Gradients:
    """Gradient estimates in unconstrained coordinates.

    ``z[l]`` is a pair of (N, K_l) arrays for (log-shape, log-rate);
    ``w[l]`` a pair of (F_l,) arrays. ``z_draws``/``w_draws`` hold the
    per-draw contributions when requested.
    """

    z: list[tuple[np.ndarray, np.ndarray]]
    w: list[tuple[np.ndarray, np.ndarray]] | None
    z_draws: list[tuple[np.ndarray, np.ndarray]] | None = None
    w_draws: list[tuple[np.ndarray, np.ndarray]] | None = None


def _score_pairs(values, shapes, rates):
    """Score of log q chain-ruled into (log-shape, log-rate) coordinates."""
    d_shape, d_rate = gamma_score_arrays(values, shapes, rates)
    return d_shape * shapes, d_rate * rates


def _gradients(
    spec: ModelSpec,
    vstate: VariationalState,
    samples: QSamples,
    bundle: _Bundle,
    *,
    return_draws: bool = False,
) -> Gradients:
    gz = []
    gz_draws = [] if return_draws else None
    for l in range(spec.n_layers):
        a = vstate.z_shapes(l)[None]
        r = vstate.z_rates(l)[None]
        s_shape, s_rate = _score_pairs(samples.z[l], a, r)
        diff = bundle.blanket_z[l] - bundle.logq_z[l]
        ga = s_shape * diff
        gr = s_rate * diff
        gz.append((ga.mean(axis=0), gr.mean(axis=0)))
        if return_draws:
            gz_draws.append((ga, gr))

    gw = None
    gw_draws = None
    if bundle.blanket_w is not None:
        gw = []
        gw_draws = [] if return_draws else None
        for l in range(spec.n_layers):
            a = vstate.w_shapes(l)[None]
            r = vstate.w_rates(l)[None]
            s_shape, s_rate = _score_pairs(samples.w[l], a, r)
            diff = bundle.blanket_w[l] - bundle.logq_w[l]
            ga = s_shape * diff
            gr = s_rate * diff
            gw.append((ga.mean(axis=0), gr.mean(axis=0)))
            if return_draws:
                gw_draws.append((ga, gr))

    return Gradients(z=gz, w=gw, z_draws=gz_draws, w_draws=gw_draws)


# ---------------------------------------------------------------------------
# Public estimators.
# ---------------------------------------------------------------------------


def elbo_values(
    spec: ModelSpec,
    vstate: VariationalState,
    data: CountMatrix,
    samples: QSamples,
    *,
    fixed_weights=None,
) -> np.ndarray:
    """Per-draw ELBO integrands ``log p - log q`` for a given sample batch."""
    counts, mask, lgx = _prep_data(data)
    bundle = _evaluate(
        spec, vstate, counts, mask, lgx, samples, fixed_weights=fixed_weights
    )
    return bundle.logp_total - bundle.logq_total


def elbo_estimate(
    spec: ModelSpec,
    vstate: VariationalState,
    data: CountMatrix,
    config: EstimatorConfig,
    *,
    fixed_weights=None,
) -> float:
    """Unbiased Monte Carlo ELBO from ``config.mc_samples`` joint draws.

    Deterministic given the seed; raises :class:`NumericalError` carrying
    the first offending draw index if any integrand is non-finite.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    uniforms = draw_uniforms(
        spec,
        data.n_samples,
        config.mc_samples,
        rng,
        with_weights=fixed_weights is None,
    )
    samples = samples_from_uniforms(vstate, uniforms)
    values = elbo_values(spec, vstate, data, samples, fixed_weights=fixed_weights)
    finite = np.isfinite(values)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        raise NumericalError(
            f"non-finite ELBO integrand at draw {idx}", sample_index=idx
        )
    return float(values.mean())


def gradient_estimates(
    spec: ModelSpec,
    vstate: VariationalState,
    data: CountMatrix,
    config: EstimatorConfig,
    *,
    fixed_weights=None,
    full_joint: bool = False,
    return_draws: bool = False,
    samples: QSamples | None = None,
) -> Gradients:
    """Score-function gradient estimates for every coordinate at once.

    All coordinates share the same ``config.mc_samples`` joint draws. The
    returned gradients are unclipped; clipping is an optimizer concern.
    """
    if samples is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
        samples = draw_samples(
            vstate, config.mc_samples, rng, with_weights=fixed_weights is None
        )
    counts, mask, lgx = _prep_data(data)
    bundle = _evaluate(
        spec,
        vstate,
        counts,
        mask,
        lgx,
        samples,
        fixed_weights=fixed_weights,
        full_joint=full_joint,
    )
    return _gradients(spec, vstate, samples, bundle, return_draws=return_draws)


def grad_z(
    spec: ModelSpec,
    vstate: VariationalState,
    data: CountMatrix,
    n: int,
    layer: int,
    k: int,
    config: EstimatorConfig,
    **kwargs,
) -> tuple[float, float]:
    """Gradient estimate for one latent coordinate, (log-shape, log-rate)."""
    grads = gradient_estimates(spec, vstate, data, config, **kwargs)
    ga, gr = grads.z[layer]
    val = (float(ga[n, k]), float(gr[n, k]))
    _require_finite(val, block=f"z[{layer}]")
    return val


def grad_w(
    spec: ModelSpec,
    vstate: VariationalState,
    data: CountMatrix,
    layer: int,
    t: int,
    config: EstimatorConfig,
    **kwargs,
) -> tuple[float, float]:
    """Gradient estimate for one free weight parameter."""
    grads = gradient_estimates(spec, vstate, data, config, **kwargs)
    if grads.w is None:
        raise ValueError("weight gradients are unavailable with fixed weights")
    ga, gr = grads.w[layer]
    val = (float(ga[t]), float(gr[t]))
    _require_finite(val, block=f"w[{layer}]")
    return val


def _require_finite(val, *, block, iteration=None):
    if not all(np.isfinite(v) for v in val):
        raise NumericalError(
            f"non-finite gradient in block {block}", iteration=iteration, block=block
        )


# ---------------------------------------------------------------------------
# Optimization.
# ---------------------------------------------------------------------------


def _clip_pairs(ga, gr, clip_norm):
    """Per-factor clipping: each gamma's (shape, rate) pair to norm <= clip."""
    if clip_norm is None:
        return ga, gr
    norm = np.hypot(ga, gr)
    scale = np.where(norm > clip_norm, clip_norm / np.where(norm > 0, norm, 1.0), 1.0)
    return ga * scale, gr * scale


def _rms_step(param, acc, grad, opt: OptimizerConfig, step: float):
    acc *= opt.decay
    acc += (1.0 - opt.decay) * grad * grad
    param += step * grad / (np.sqrt(acc) + opt.floor)


def train(
    spec: ModelSpec,
    data: CountMatrix,
    config: EstimatorConfig,
    opt: OptimizerConfig | None = None,
    iterations: int = 3000,
    *,
    update_weights: bool = True,
    fixed_weights=None,
    init_state: VariationalState | None = None,
    resume: "Checkpoint | None" = None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
) -> tuple[VariationalState, TrainReport]:
    """Adaptive gradient ascent on the ELBO.

    Every latent and weight coordinate is updated each iteration from the
    shared draw batch; the report carries the per-iteration ELBO estimate
    computed from the same draws. A NaN trace aborts with the iteration and
    coordinate block in the raised :class:`NumericalError`.
    """
    if opt is None:
        opt = OptimizerConfig()
    t_start = time.perf_counter()

    if resume is not None:
        vstate = resume.vstate.copy()
        opt_state = resume.opt_state
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start_iter = resume.iteration
        trace = list(resume.elbo_trace)
        avg_sums = resume.avg_state.copy() if resume.avg_state is not None else None
        avg_count = resume.avg_count
    else:
        vstate = (
            init_state.copy()
            if init_state is not None
            else VariationalState.initial(spec, data.n_samples)
        )
        opt_state = OptimizerState.zeros_like(vstate)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
        start_iter = 0
        trace = []
        avg_sums = None
        avg_count = 0

    # Polyak window: average the unconstrained parameters over the tail.
    avg_start = iterations - int(round(opt.average_tail * iterations))
    if opt.average_tail == 0:
        avg_start = iterations

    counts, mask, lgx = _prep_data(data)
    sample_weights = fixed_weights is None

    for it in range(start_iter, iterations):
        samples = draw_samples(
            vstate, config.mc_samples, rng, with_weights=sample_weights
        )
        bundle = _evaluate(
            spec, vstate, counts, mask, lgx, samples, fixed_weights=fixed_weights
        )
        values = bundle.logp_total - bundle.logq_total
        elbo_it = float(values.mean())
        if not np.isfinite(elbo_it):
            bad = np.flatnonzero(~np.isfinite(values))
            idx = int(bad[0]) if len(bad) else None
            raise NumericalError(
                f"ELBO diverged at iteration {it}",
                iteration=it,
                block="elbo",
                sample_index=idx,
            )
        trace.append(elbo_it)

        grads = _gradients(spec, vstate, samples, bundle)
        step = opt.step_at(it)
        for l in range(spec.n_layers):
            ga, gr = _clip_pairs(*grads.z[l], config.clip_norm)
            if not (np.isfinite(ga).all() and np.isfinite(gr).all()):
                raise NumericalError(
                    f"non-finite gradient at iteration {it}",
                    iteration=it,
                    block=f"z[{l}]",
                )
            _rms_step(vstate.z_log_shape[l], opt_state.z_acc_shape[l], ga, opt, step)
            _rms_step(vstate.z_log_rate[l], opt_state.z_acc_rate[l], gr, opt, step)
        if update_weights and grads.w is not None:
            for l in range(spec.n_layers):
                ga, gr = _clip_pairs(*grads.w[l], config.clip_norm)
                if not (np.isfinite(ga).all() and np.isfinite(gr).all()):
                    raise NumericalError(
                        f"non-finite gradient at iteration {it}",
                        iteration=it,
                        block=f"w[{l}]",
                    )
                _rms_step(vstate.w_log_shape[l], opt_state.w_acc_shape[l], ga, opt, step)
                _rms_step(vstate.w_log_rate[l], opt_state.w_acc_rate[l], gr, opt, step)

        if it >= avg_start:
            if avg_sums is None:
                avg_sums = VariationalState(
                    [np.zeros_like(a) for a in vstate.z_log_shape],
                    [np.zeros_like(a) for a in vstate.z_log_rate],
                    [np.zeros_like(a) for a in vstate.w_log_shape],
                    [np.zeros_like(a) for a in vstate.w_log_rate],
                )
            for dst, src in (
                (avg_sums.z_log_shape, vstate.z_log_shape),
                (avg_sums.z_log_rate, vstate.z_log_rate),
                (avg_sums.w_log_shape, vstate.w_log_shape),
                (avg_sums.w_log_rate, vstate.w_log_rate),
            ):
                for d, s in zip(dst, src):
                    d += s
            avg_count += 1

        if checkpoint_path and checkpoint_every and (it + 1) % checkpoint_every == 0:
            save_checkpoint(
                checkpoint_path,
                vstate,
                opt_state,
                it + 1,
                config.seed,
                rng.bit_generator.state,
                trace,
                avg_state=avg_sums,
                avg_count=avg_count,
            )

    report = TrainReport(
        elbo_trace=np.asarray(trace),
        iterations=iterations,
        seed=config.seed,
        wall_time=time.perf_counter() - t_start,
    )
    if checkpoint_path:
        save_checkpoint(
            checkpoint_path,
            vstate,
            opt_state,
            iterations,
            config.seed,
            rng.bit_generator.state,
            trace,
            avg_state=avg_sums,
            avg_count=avg_count,
        )
    if avg_count > 0:
        vstate = VariationalState(
            [a / avg_count for a in avg_sums.z_log_shape],
            [a / avg_count for a in avg_sums.z_log_rate],
            [a / avg_count for a in avg_sums.w_log_shape],
            [a / avg_count for a in avg_sums.w_log_rate],
        )
    return vstate, report


def fit_test(
    spec: ModelSpec,
    trained_w_params: WeightParams,
    data_test: CountMatrix,
    config: EstimatorConfig,
    opt: OptimizerConfig | None = None,
    iterations: int = 1000,
    *,
    fixed_weights=None,
) -> VariationalState:
    """Fit q(z) for held-out samples with the weights frozen.

    The weight posterior is carried over untouched and sampled per draw;
    only the latent coordinates move, conditioning on visible cells only.
    """
    vstate = VariationalState.initial(spec, data_test.n_samples)
    vstate.set_weight_params(trained_w_params)
    fitted, _ = train(
        spec,
        data_test,
        config,
        opt,
        iterations,
        update_weights=False,
        fixed_weights=fixed_weights,
        init_state=vstate,
    )
    return fitted


def heldout_loglik(
    spec: ModelSpec,
    trained_w_params: WeightParams,
    fitted: VariationalState,
    data_test: CountMatrix,
    eval_samples: int = 512,
    seed: int = 0,
    *,
    fixed_weights=None,
) -> float:
    """Monte Carlo average of the hidden-cell log likelihood.

    Draws (z, W) from the fitted/trained q and averages the summed Poisson
    log pmf of the hidden cells over draws. Averaging the log likelihood,
    not the likelihood, makes this a conservative lower-bound-style score.
    """
    hidden = ~data_test.mask
    if not hidden.any():
        raise ValueError("nothing to evaluate: the test mask hides no cells")

    state = fitted.copy()
    state.set_weight_params(trained_w_params)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))

    t0 = spec.weight_tyings[0]
    a1, r1 = state.z_shapes(0), state.z_rates(0)
    z1 = gamma_draw(a1[None], r1[None], rng, size=(eval_samples,) + a1.shape)
    if fixed_weights is not None:
        w0 = np.ascontiguousarray(
            np.broadcast_to(
                np.asarray(fixed_weights[0], dtype=np.float64),
                (eval_samples, t0.n_params),
            )
        )
    else:
        aw, rw = state.w_shapes(0), state.w_rates(0)
        w0 = gamma_draw(aw[None], rw[None], rng, size=(eval_samples,) + aw.shape)

    counts = np.ascontiguousarray(data_test.counts, dtype=np.float64)
    hidden_f = np.ascontiguousarray(hidden, dtype=np.float64)
    lgx = special.gammaln(counts + 1.0)
    _, _, totals = _backend.obs_layer_stats(
        counts,
        hidden_f,
        lgx,
        np.ascontiguousarray(z1),
        np.ascontiguousarray(w0),
        t0.filter_size,
        t0.stride,
        t0.tied,
    )
    return float(totals.sum(axis=1).mean())


# ---------------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    vstate: VariationalState
    opt_state: OptimizerState
    iteration: int
    seed: int
    rng_state: dict
    elbo_trace: list[float]
    avg_state: VariationalState | None = None
    avg_count: int = 0


def _state_arrays(*states):
    ordered = []
    for state in states:
        for group in (
            state.z_log_shape if hasattr(state, "z_log_shape") else state.z_acc_shape,
            state.z_log_rate if hasattr(state, "z_log_rate") else state.z_acc_rate,
            state.w_log_shape if hasattr(state, "w_log_shape") else state.w_acc_shape,
            state.w_log_rate if hasattr(state, "w_log_rate") else state.w_acc_rate,
        ):
            ordered.extend(group)
    return ordered


def save_checkpoint(
    path, vstate, opt_state, iteration, seed, rng_state, elbo_trace,
    *, avg_state=None, avg_count=0,
):
    """Versioned binary checkpoint: magic, JSON header, raw float64 arrays.

    Loading and resuming in single-threaded mode reproduces the
    uninterrupted run bit for bit, because the generator state is stored.
    """
    states = [vstate, opt_state]
    if avg_state is not None:
        states.append(avg_state)
    arrays = _state_arrays(*states)
    header = {
        "iteration": int(iteration),
        "seed": int(seed),
        "rng_state": rng_state,
        "elbo_trace": [float(v) for v in elbo_trace],
        "n_layers": vstate.n_layers,
        "has_avg": avg_state is not None,
        "avg_count": int(avg_count),
        "shapes": [list(a.shape) for a in arrays],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(blob_len).decode())
        arrays = []
        for shape in header["shapes"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())

    L = header["n_layers"]
    n_groups = len(arrays) // L
    groups = [arrays[i * L : (i + 1) * L] for i in range(n_groups)]
    vstate = VariationalState(groups[0], groups[1], groups[2], groups[3])
    opt_state = OptimizerState(groups[4], groups[5], groups[6], groups[7])
    avg_state = None
    if header.get("has_avg"):
        avg_state = VariationalState(groups[8], groups[9], groups[10], groups[11])
    return Checkpoint(
        vstate=vstate,
        opt_state=opt_state,
        iteration=header["iteration"],
        seed=header["seed"],
        rng_state=header["rng_state"],
        elbo_trace=header["elbo_trace"],
        avg_state=avg_state,
        avg_count=header.get("avg_count", 0),
    )
