"""NumPy implementation of the batched layer-stat kernels.

This is the fallback backend and the semantic reference for the compiled
extension. Both backends expose the same two functions; see
:func:`obs_layer_stats` for the shared calling convention.

Batch axis ``B`` indexes Monte Carlo draws, ``N`` data samples. All inputs
are float64 and C-contiguous.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

RATE_FLOOR = 1e-8


def _conv_rates(z_upper, w_free, filter_size, stride, tied, out_len):
    """Lower-layer inner products: rate[b, n, i] = sum_j W[i, j] z[b, n, j]."""
    B, N, K = z_upper.shape
    rates = np.zeros((B, N, out_len))
    for j in range(K):
        if tied:
            w_j = w_free
        else:
            w_j = w_free[:, j * filter_size : (j + 1) * filter_size]
        lo = j * stride
        rates[:, :, lo : lo + filter_size] += z_upper[:, :, j, None] * w_j[:, None, :]
    return rates


def _window_sums(c, filter_size, stride, n_cols):
    """Per-column sums of child terms: out[..., j] = sum(c[..., j*s : j*s+f])."""
    cs = np.concatenate(
        [np.zeros(c.shape[:-1] + (1,)), np.cumsum(c, axis=-1)], axis=-1
    )
    starts = np.arange(n_cols) * stride
    return cs[..., starts + filter_size] - cs[..., starts]


def _param_sums(c, filter_size, stride, tied, n_cols):
    """Per-free-parameter sums over tied cells and data samples, shape (B, F)."""
    if tied:
        rows = (
            np.arange(filter_size)[:, None] + np.arange(n_cols)[None, :] * stride
        )
        gathered = c[:, :, rows]  # (B, N, filter, cols)
        return gathered.sum(axis=(1, 3))
    p = np.arange(n_cols * filter_size)
    rows = (p // filter_size) * stride + p % filter_size
    return c[:, :, rows].sum(axis=1)


def obs_layer_stats(counts, mask, lgx, z_bottom, w_free, filter_size, stride, tied):
    """Poisson observation terms reduced three ways.

    Parameters
    ----------
    counts, mask, lgx : (N, V) float64
        Counts, visibility indicator (1.0 visible) and precomputed
        ``log G(x + 1)``.
    z_bottom : (B, N, K) float64
        Bottom-layer draws.
    w_free : (B, F) float64
        Observation-matrix free parameters per draw.

    Returns
    -------
    col_sums : (B, N, K)
        Child log-pmf sums per upper node (the observation part of each
        bottom latent's blanket).
    par_sums : (B, F)
        Child log-pmf sums over the cells tied to each free parameter and
        over data samples (the likelihood part of each weight blanket).
    totals : (B, N)
        Masked log-pmf sums per sample (the observation part of the joint).
    """
    V = counts.shape[1]
    K = z_bottom.shape[2]
    rates = np.maximum(
        _conv_rates(z_bottom, w_free, filter_size, stride, tied, V), RATE_FLOOR
    )
    c = (counts[None] * np.log(rates) - rates - lgx[None]) * mask[None]
    return (
        _window_sums(c, filter_size, stride, K),
        _param_sums(c, filter_size, stride, tied, K),
        c.sum(axis=2),
    )


def latent_layer_stats(z_lower, alpha, z_upper, w_free, filter_size, stride, tied):
    """Gamma conditional terms of one latent layer, reduced four ways.

    Same conventions as :func:`obs_layer_stats`; additionally returns
    ``self_logp`` (B, N, K_lower), the conditional log density of each lower
    node, which is the parent term of that node's blanket.
    """
    K_lower = z_lower.shape[2]
    K_upper = z_upper.shape[2]
    means = np.maximum(
        _conv_rates(z_upper, w_free, filter_size, stride, tied, K_lower), RATE_FLOOR
    )
    beta = alpha / means
    c = (alpha - 1.0) * np.log(z_lower) - beta * z_lower - gammaln(alpha) + alpha * np.log(beta)
    return (
        c,
        _window_sums(c, filter_size, stride, K_upper),
        _param_sums(c, filter_size, stride, tied, K_upper),
        c.sum(axis=2),
    )
