"""Model structure: tied weights, link functions and Markov-blanket terms.

A model is a stack of gamma layers over Poisson observations. Weight matrix
``l`` sits between lower layer ``l`` and upper layer ``l + 1`` (layer 0 is
the observation row), has shape ``(K_lower, K_upper)``, and every column is
a shifted copy of one filter, so the free parameters of a tied matrix number
``filter_size`` rather than ``rows * cols``.

The blanket functions here are dense reference implementations used for
testing and reporting. The training loop evaluates the same quantities
through the batched kernels in :mod:`convdef._backend`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .expfam import (
    GammaParams,
    PoissonParams,
    gamma_logpdf,
    poisson_logpmf,
)

__all__ = [
    "ConfigurationError",
    "RATE_FLOOR",
    "TyingMap",
    "TiedWeightMatrix",
    "LayerSpec",
    "ModelSpec",
    "LatentState",
    "build_tying",
    "linked_params",
    "obs_rate",
    "blanket_logp_z",
    "blanket_logp_w",
    "log_joint",
    "log_joint_all",
    "model_spec_from_dict",
]

# Floor for the inner product feeding a gamma or Poisson rate. The generative
# story never produces zero, but disjoint support or an all-zero draw can.
RATE_FLOOR = 1e-8

logger = logging.getLogger(__name__)
_floor_logged = False


class ConfigurationError(ValueError):
    """Inconsistent layer, filter or stride configuration."""


def _log_floor_once():
    global _floor_logged
    if not _floor_logged:
        logger.warning("inner product hit the %g rate floor", RATE_FLOOR)
        _floor_logged = True


def reset_floor_log():
    """Re-arm the once-per-run rate floor warning (used by the CLI and tests)."""
    global _floor_logged
    _floor_logged = False


@dataclass(frozen=True)
class TyingMap:
    """Index structure of one convolutionally tied weight matrix.

    Cell ``(i, j)`` is nonzero iff ``j * stride <= i < j * stride +
    filter_size``. In tied mode its free-parameter index is ``i - j *
    stride`` and the matrix owns ``filter_size`` parameters. In untied mode
    every column gets its own bank, ``j * filter_size + (i - j * stride)``,
    which is the fully-connected variant on one-column maps.
    """

    rows: int
    filter_size: int
    stride: int
    tied: bool = True

    def __post_init__(self):
        if self.rows < 1 or self.filter_size < 1 or self.stride < 1:
            raise ConfigurationError(
                f"rows, filter_size and stride must be positive, got "
                f"({self.rows}, {self.filter_size}, {self.stride})"
            )
        if self.filter_size > self.rows:
            raise ConfigurationError(
                f"filter_size {self.filter_size} exceeds rows {self.rows}"
            )
        if (self.rows - self.filter_size) % self.stride != 0:
            raise ConfigurationError(
                f"(rows - filter_size) = {self.rows - self.filter_size} is not "
                f"divisible by stride {self.stride}; zero padding is not supported"
            )

    @property
    def cols(self) -> int:
        return (self.rows - self.filter_size) // self.stride + 1

    @property
    def n_params(self) -> int:
        return self.filter_size if self.tied else self.cols * self.filter_size

    def param_index(self, i: int, j: int) -> int:
        """Free-parameter index of nonzero cell ``(i, j)``."""
        offset = i - j * self.stride
        if not (0 <= j < self.cols and 0 <= offset < self.filter_size):
            raise IndexError(f"cell ({i}, {j}) is structurally zero")
        return offset if self.tied else j * self.filter_size + offset

    def column_rows(self, j: int) -> np.ndarray:
        """Row indices with a nonzero cell in column ``j``."""
        if not 0 <= j < self.cols:
            raise IndexError(f"column {j} out of range for {self.cols} columns")
        return np.arange(j * self.stride, j * self.stride + self.filter_size)

    def tie_rows(self) -> np.ndarray:
        """Row index of every cell tied to each parameter, shape (n_params, group).

        Tied maps have group size ``cols`` (parameter t owns cells
        ``(j * stride + t, j)`` for every column j); untied maps have group
        size 1.
        """
        if self.tied:
            return (
                np.arange(self.filter_size)[:, None]
                + np.arange(self.cols)[None, :] * self.stride
            )
        p = np.arange(self.n_params)
        return ((p // self.filter_size) * self.stride + p % self.filter_size)[:, None]

    def tie_cols(self) -> np.ndarray:
        """Column index of every tied cell, aligned with :meth:`tie_rows`."""
        if self.tied:
            return np.broadcast_to(
                np.arange(self.cols)[None, :], (self.filter_size, self.cols)
            )
        return (np.arange(self.n_params) // self.filter_size)[:, None]


def build_tying(
    rows: int, filter_size: int, stride: int, *, tied: bool = True, name: str = ""
) -> TyingMap:
    """Construct a :class:`TyingMap`, naming the offending layer on error."""
    try:
        return TyingMap(rows=rows, filter_size=filter_size, stride=stride, tied=tied)
    except ConfigurationError as exc:
        label = f" for {name}" if name else ""
        raise ConfigurationError(f"invalid tying{label}: {exc}") from None


@dataclass
class TiedWeightMatrix:
    """A tying map together with its free-parameter values."""

    tying: TyingMap
    free_params: np.ndarray

    def __post_init__(self):
        self.free_params = np.asarray(self.free_params, dtype=np.float64)
        if self.free_params.shape != (self.tying.n_params,):
            raise ConfigurationError(
                f"expected {self.tying.n_params} free parameters, "
                f"got shape {self.free_params.shape}"
            )
        if not np.all(self.free_params > 0):
            raise ConfigurationError("weight parameters must be strictly positive")

    def materialize(self) -> np.ndarray:
        """Dense (rows, cols) matrix; structurally zero cells are exactly 0."""
        t = self.tying
        out = np.zeros((t.rows, t.cols))
        for j in range(t.cols):
            for i in t.column_rows(j):
                out[i, j] = self.free_params[t.param_index(i, j)]
        return out

    def row(self, i: int) -> np.ndarray:
        """Dense row ``i``, the incoming weight vector of lower unit ``i``."""
        t = self.tying
        out = np.zeros(t.cols)
        j_lo = max(0, -(-(i - t.filter_size + 1) // t.stride))
        j_hi = min(t.cols - 1, i // t.stride)
        for j in range(j_lo, j_hi + 1):
            out[j] = self.free_params[t.param_index(i, j)]
        return out

    def column_values(self, j: int) -> np.ndarray:
        """Values of the nonzero cells of column ``j``, aligned with column_rows."""
        t = self.tying
        if t.tied:
            return self.free_params
        return self.free_params[j * t.filter_size : (j + 1) * t.filter_size]


@dataclass(frozen=True)
class LayerSpec:
    """One gamma latent layer: its width and the fixed link shape."""

    size: int
    fixed_shape: float
    family: str = "gamma"

    def __post_init__(self):
        if self.size < 1:
            raise ConfigurationError(f"layer size must be positive, got {self.size}")
        if not (np.isfinite(self.fixed_shape) and self.fixed_shape > 0):
            raise ConfigurationError(
                f"fixed_shape must be positive, got {self.fixed_shape}"
            )
        if self.family != "gamma":
            raise ConfigurationError(f"unsupported layer family {self.family!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture: layer sizes, weight tyings and priors.

    ``layers[0]`` is the bottom latent layer (directly above the
    observations), ``layers[-1]`` the top. ``weight_tyings[0]`` is the
    observation matrix of shape ``(obs_dim, layers[0].size)`` and
    ``weight_tyings[l]`` has shape ``(layers[l-1].size, layers[l].size)``.
    """

    obs_dim: int
    layers: tuple[LayerSpec, ...]
    weight_tyings: tuple[TyingMap, ...]
    top_prior: GammaParams
    weight_prior: GammaParams

    def __post_init__(self):
        if self.obs_dim < 1:
            raise ConfigurationError(f"obs_dim must be positive, got {self.obs_dim}")
        if len(self.layers) < 1:
            raise ConfigurationError("at least one latent layer is required")
        if len(self.weight_tyings) != len(self.layers):
            raise ConfigurationError(
                f"need one weight tying per layer, got {len(self.weight_tyings)} "
                f"for {len(self.layers)} layers"
            )
        expect_rows = self.obs_dim
        for l, (layer, tying) in enumerate(zip(self.layers, self.weight_tyings)):
            if tying.rows != expect_rows:
                raise ConfigurationError(
                    f"weight layer {l}: expected {expect_rows} rows, got {tying.rows}"
                )
            if tying.cols != layer.size:
                raise ConfigurationError(
                    f"weight layer {l}: tying implies {tying.cols} upper nodes "
                    f"but layer size is {layer.size}"
                )
            expect_rows = layer.size

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(layer.size for layer in self.layers)

    def describe_chain(self) -> str:
        sizes = " -> ".join(f"K{l + 1}={s}" for l, s in enumerate(self.layer_sizes))
        return f"V={self.obs_dim} -> {sizes}"

    @classmethod
    def from_filters(
        cls,
        obs_dim: int,
        layer_cfgs: list[tuple[int, int, float]],
        top_prior: GammaParams,
        weight_prior: GammaParams,
        *,
        tied: bool = True,
    ) -> "ModelSpec":
        """Build a spec from (filter_size, stride, fixed_shape) per layer.

        Layer sizes follow from the shape law, bottom-up.
        """
        layers = []
        tyings = []
        rows = obs_dim
        for l, (filt, stride, fixed_shape) in enumerate(layer_cfgs):
            tying = build_tying(rows, filt, stride, tied=tied, name=f"weight layer {l}")
            tyings.append(tying)
            layers.append(LayerSpec(size=tying.cols, fixed_shape=fixed_shape))
            rows = tying.cols
        return cls(
            obs_dim=obs_dim,
            layers=tuple(layers),
            weight_tyings=tuple(tyings),
            top_prior=top_prior,
            weight_prior=weight_prior,
        )


@dataclass
class LatentState:
    """Per-layer latent values for one sample, all strictly positive."""

    z: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.z = [np.asarray(v, dtype=np.float64) for v in self.z]
        for l, v in enumerate(self.z):
            if not np.all(v > 0):
                raise ValueError(f"layer {l} latent values must be strictly positive")

    def conforms(self, spec: ModelSpec) -> bool:
        return len(self.z) == spec.n_layers and all(
            v.shape == (layer.size,) for v, layer in zip(self.z, spec.layers)
        )


# ---------------------------------------------------------------------------
# Link functions.
# ---------------------------------------------------------------------------


def linked_params(z_upper, weights, fixed_shape: float) -> GammaParams:
    """Gamma parameters of a lower node given the upper layer.

    The shape is the layer's fixed shape, the rate is ``fixed_shape /
    max(z . w, RATE_FLOOR)``, so the conditional mean equals the inner
    product up to the floor. ``weights`` is the node's incoming weight
    vector aligned with ``z_upper``.
    """
    inner = float(np.dot(np.asarray(z_upper, dtype=np.float64), weights))
    if inner < RATE_FLOOR:
        _log_floor_once()
        inner = RATE_FLOOR
    return GammaParams(shape=fixed_shape, rate=fixed_shape / inner)


def obs_rate(z1, weights) -> PoissonParams:
    """Poisson rate of one observation, ``max(z1 . w, RATE_FLOOR)``."""
    inner = float(np.dot(np.asarray(z1, dtype=np.float64), weights))
    if inner < RATE_FLOOR:
        _log_floor_once()
        inner = RATE_FLOOR
    return PoissonParams(rate=inner)


# ---------------------------------------------------------------------------
# Dense reference evaluation of blankets and the joint.
# ---------------------------------------------------------------------------


def _check_state(spec: ModelSpec, state: LatentState):
    if not state.conforms(spec):
        raise IndexError("latent state does not conform to the model spec")


def _conditional_mean(w: TiedWeightMatrix, z_upper: np.ndarray) -> np.ndarray:
    """Rates/means of the lower layer, ``W @ z_upper`` floored elementwise."""
    return np.maximum(w.materialize() @ z_upper, RATE_FLOOR)


def blanket_logp_z(
    spec: ModelSpec,
    state: LatentState,
    weights: list[TiedWeightMatrix],
    x_n: np.ndarray,
    mask_n: np.ndarray,
    layer: int,
    k: int,
) -> float:
    """Markov-blanket log probability of latent ``(layer, k)`` for one sample.

    ``layer`` is 0-based from the bottom. The value is the node's own
    conditional log density (top prior at the top layer) plus the log
    densities of its children, the rows of the weight matrix below whose
    column ``k`` is nonzero. Hidden observations contribute nothing.
    """
    _check_state(spec, state)
    L = spec.n_layers
    if not 0 <= layer < L:
        raise IndexError(f"layer {layer} out of range for {L} layers")
    if not 0 <= k < spec.layers[layer].size:
        raise IndexError(f"node {k} out of range for layer of size {spec.layers[layer].size}")

    if layer == L - 1:
        own = gamma_logpdf(state.z[layer][k], spec.top_prior.shape, spec.top_prior.rate)
    else:
        w_up = weights[layer + 1]
        mean = max(float(w_up.row(k) @ state.z[layer + 1]), RATE_FLOOR)
        alpha = spec.layers[layer].fixed_shape
        own = gamma_logpdf(state.z[layer][k], alpha, alpha / mean)

    w_below = weights[layer]
    child_rows = w_below.tying.column_rows(k)
    children = 0.0
    if layer == 0:
        rates = _conditional_mean(w_below, state.z[0])
        for i in child_rows:
            if mask_n[i]:
                children += poisson_logpmf(float(x_n[i]), rates[i])
    else:
        means = _conditional_mean(w_below, state.z[layer])
        alpha_lo = spec.layers[layer - 1].fixed_shape
        for i in child_rows:
            children += gamma_logpdf(state.z[layer - 1][i], alpha_lo, alpha_lo / means[i])
    return float(own + children)


def blanket_logp_w(
    spec: ModelSpec,
    states: list[LatentState],
    weights: list[TiedWeightMatrix],
    counts: np.ndarray,
    mask: np.ndarray,
    weight_layer: int,
    t: int,
) -> float:
    """Markov-blanket log probability of free weight parameter ``t``.

    One prior term for the shared parameter plus, over every cell tied to
    it and every sample, the log density of the child row whose rate
    involves that cell (Poisson for the observation matrix, gamma above).
    """
    if not 0 <= weight_layer < len(weights):
        raise IndexError(f"weight layer {weight_layer} out of range")
    w = weights[weight_layer]
    if not 0 <= t < w.tying.n_params:
        raise IndexError(f"parameter {t} out of range for {w.tying.n_params} params")
    counts = np.atleast_2d(counts)
    mask = np.atleast_2d(mask)

    total = gamma_logpdf(w.free_params[t], spec.weight_prior.shape, spec.weight_prior.rate)
    rows = w.tying.tie_rows()[t]
    for state in states:
        _check_state(spec, state)
    if weight_layer == 0:
        for n, state in enumerate(states):
            rates = _conditional_mean(w, state.z[0])
            for i in rows:
                if mask[n, i]:
                    total += poisson_logpmf(float(counts[n, i]), rates[i])
    else:
        alpha_lo = spec.layers[weight_layer - 1].fixed_shape
        for state in states:
            means = _conditional_mean(w, state.z[weight_layer])
            for i in rows:
                total += gamma_logpdf(
                    state.z[weight_layer - 1][i], alpha_lo, alpha_lo / means[i]
                )
    return float(total)


def log_joint(
    spec: ModelSpec,
    state: LatentState,
    weights: list[TiedWeightMatrix],
    x_n: np.ndarray,
    mask_n: np.ndarray,
) -> float:
    """Dense log joint for one sample: priors, layer conditionals and the
    unmasked observation terms. Weight priors are counted once."""
    _check_state(spec, state)
    L = spec.n_layers
    total = float(
        np.sum(gamma_logpdf(state.z[L - 1], spec.top_prior.shape, spec.top_prior.rate))
    )
    for layer in range(L - 1):
        means = _conditional_mean(weights[layer + 1], state.z[layer + 1])
        alpha = spec.layers[layer].fixed_shape
        total += float(np.sum(gamma_logpdf(state.z[layer], alpha, alpha / means)))
    for w in weights:
        total += float(
            np.sum(gamma_logpdf(w.free_params, spec.weight_prior.shape, spec.weight_prior.rate))
        )
    rates = _conditional_mean(weights[0], state.z[0])
    visible = np.asarray(mask_n, dtype=bool)
    if visible.any():
        total += float(
            np.sum(poisson_logpmf(np.asarray(x_n, dtype=np.float64)[visible], rates[visible]))
        )
    return total


def log_joint_all(
    spec: ModelSpec,
    states: list[LatentState],
    weights: list[TiedWeightMatrix],
    counts: np.ndarray,
    mask: np.ndarray,
) -> float:
    """Log joint over all samples, counting the weight priors once."""
    counts = np.atleast_2d(counts)
    mask = np.atleast_2d(mask)
    prior_w = sum(
        float(np.sum(gamma_logpdf(w.free_params, spec.weight_prior.shape, spec.weight_prior.rate)))
        for w in weights
    )
    per_sample = sum(
        log_joint(spec, state, weights, counts[n], mask[n]) - prior_w
        for n, state in enumerate(states)
    )
    return per_sample + prior_w


# ---------------------------------------------------------------------------
# Model configuration files.
# ---------------------------------------------------------------------------

_MODEL_KEYS = {"obs_dim", "layers", "top_prior", "weight_prior", "tied"}
_LAYER_KEYS = {"filter", "stride", "fixed_shape"}
_PRIOR_KEYS = {"shape", "rate"}


def _check_keys(d: dict, allowed: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")


def _prior_from_dict(d: dict, where: str) -> GammaParams:
    _check_keys(d, _PRIOR_KEYS, where)
    try:
        return GammaParams(shape=float(d["shape"]), rate=float(d["rate"]))
    except KeyError as exc:
        raise ConfigurationError(f"{where} needs 'shape' and 'rate'") from exc


def model_spec_from_dict(cfg: dict) -> ModelSpec:
    """Parse the model configuration mapping. Unknown keys are errors."""
    _check_keys(cfg, _MODEL_KEYS, "model config")
    for key in ("obs_dim", "layers", "top_prior", "weight_prior"):
        if key not in cfg:
            raise ConfigurationError(f"model config is missing {key!r}")
    layer_cfgs = []
    for l, entry in enumerate(cfg["layers"]):
        _check_keys(entry, _LAYER_KEYS, f"layer {l}")
        try:
            layer_cfgs.append(
                (int(entry["filter"]), int(entry["stride"]), float(entry["fixed_shape"]))
            )
        except KeyError as exc:
            raise ConfigurationError(
                f"layer {l} needs 'filter', 'stride' and 'fixed_shape'"
            ) from exc
    return ModelSpec.from_filters(
        int(cfg["obs_dim"]),
        layer_cfgs,
        top_prior=_prior_from_dict(cfg["top_prior"], "top_prior"),
        weight_prior=_prior_from_dict(cfg["weight_prior"], "weight_prior"),
        tied=bool(cfg.get("tied", True)),
    )
