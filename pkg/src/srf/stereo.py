"""Pairwise stereo module: neuron bank, aggregation convolution and pooling.

For ``N`` views every ordered pair ``(i, j)``, ``i != j``, is a row of the
stereo feature matrix ``X [S, K]`` with ``S = N*N - N``. Rows are in
lexicographic order of ``(i, j)``. The bank neuron ``k`` evaluates
``relu(w_k . [f_i; f_j] + b_k)``; splitting ``w_k`` into the halves acting on
``f_i`` and ``f_j`` lets all pairs be formed from two ``[N, K]`` products.

The aggregation layer is a convolution over ``X`` seen as a one-channel
``S x K`` image with a ``window x K`` kernel and ``K`` output channels,
followed by ReLU and a max over the pair axis.
"""

from __future__ import annotations

import functools

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor


def init_stereo(cfg: ModelConfig, descriptor_dim: int, rng: np.random.Generator) -> dict:
    K = cfg.bank_size
    params = {
        "stereo.bank.weight": rng.normal(0.0, np.sqrt(2.0 / (2 * descriptor_dim)), (K, 2 * descriptor_dim)),
        "stereo.bank.bias": np.zeros(K),
    }
    for layer in range(cfg.agg_depth):
        fan_in = cfg.agg_window * K
        params[f"stereo.agg{layer}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (K, 1, cfg.agg_window, K))
        params[f"stereo.agg{layer}.bias"] = np.zeros(K)
    return params


@functools.lru_cache(maxsize=64)
def pair_index(n: int) -> tuple:
    """Row ``s`` of the stereo matrix holds pair ``(first[s], second[s])``."""
    first, second = np.divmod(np.arange(n * n), n)
    keep = first != second
    flat = np.flatnonzero(keep)
    return first[keep], second[keep], flat


def pairwise_bank(descriptors, params: dict) -> Tensor:
    """Stereo feature matrix ``[..., S, K]`` from descriptors ``[..., N, D]``."""
    f = descriptors if isinstance(descriptors, Tensor) else T.concat(
        [d.reshape((1,) + d.shape) for d in descriptors], axis=0
    )
    W = params["stereo.bank.weight"]
    b = params["stereo.bank.bias"]
    if f.ndim < 2:
        raise ValueError(f"descriptors must be [..., N, D], got {f.shape}")
    n, D = f.shape[-2], f.shape[-1]
    if n < 2:
        raise ValueError(f"stereo module needs at least 2 views, got {n}")
    if W.shape[1] != 2 * D:
        raise ValueError(f"descriptor dimension {D} does not match bank input width {W.shape[1]} (= 2D)")
    lead = f.shape[:-2]
    K = W.shape[0]
    a = T.linear(f, W[:, :D], b)  # contribution of the first view in a pair
    c = T.linear(f, W[:, D:])  # contribution of the second view
    grid = a.reshape(lead + (n, 1, K)) + c.reshape(lead + (1, n, K))
    _, _, flat = pair_index(n)
    rows = T.take(grid.reshape(lead + (n * n, K)), flat, axis=len(lead))
    return T.relu(rows)


def _pad_rows(X: Tensor, need: int) -> Tensor:
    S = X.shape[-2]
    if S >= need:
        return X
    zeros = Tensor(np.zeros(X.shape[:-2] + (need - S, X.shape[-1]), dtype=X.dtype))
    return T.concat([X, zeros], axis=-2)


def aggregate(X: Tensor, params: dict, depth: int = None) -> Tensor:
    """Multi-view aggregation and max pooling: ``[..., S, K] -> [..., K]``."""
    if depth is None:
        depth = sum(1 for k in params if k.startswith("stereo.agg") and k.endswith(".weight"))
    lead = X.shape[:-2]
    h = X.reshape((-1,) + X.shape[-2:])
    for layer in range(depth):
        kernel = params[f"stereo.agg{layer}.weight"]
        window, K = kernel.shape[2], kernel.shape[3]
        if h.shape[-1] != K:
            raise ValueError(f"stereo matrix width {h.shape[-1]} does not match kernel width {K}")
        h = _pad_rows(h, window)
        B, S = h.shape[0], h.shape[1]
        out = T.conv2d(h.reshape(B, 1, S, K), kernel, params[f"stereo.agg{layer}.bias"], padding="valid")
        # [B, K_out, S - window + 1, 1] -> [B, rows, K_out]
        h = T.relu(out.reshape(B, kernel.shape[0], S - window + 1)).transpose(0, 2, 1)
    y = T.max_pool_rows(h)
    return y.reshape(lead + (y.shape[-1],))


def multiview_features(X: Tensor, params: dict) -> Tensor:
    """Aggregated rows before pooling (single layer), for inspection and tests."""
    kernel = params["stereo.agg0.weight"]
    h = _pad_rows(X.reshape((-1,) + X.shape[-2:]), kernel.shape[2])
    B, S, K = h.shape
    out = T.conv2d(h.reshape(B, 1, S, K), kernel, params["stereo.agg0.bias"], padding="valid")
    return T.relu(out.reshape(B, kernel.shape[0], S - kernel.shape[2] + 1)).transpose(0, 2, 1)


def g_stereo(descriptors, params: dict) -> Tensor:
    """Stereo code ``y [..., K]`` for descriptors of ``N`` views."""
    return aggregate(pairwise_bank(descriptors, params), params)
