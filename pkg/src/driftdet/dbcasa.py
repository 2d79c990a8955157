"""Dual-branch attention block: spatial and channel gates over Q/K/V projections.

The block projects its input through three pointwise convolutions (query,
key, value), gates the query with a spatial attention map and the key with
a channel attention map, fuses the two gated streams additively, applies a
pointwise output transform, and multiplies by the value stream.

Spatial map: depthwise conv -> batchnorm -> relu -> pointwise conv to one
channel -> sigmoid, giving [N,1,H,W]. Channel map: global average pool ->
pointwise conv (full channel count, no bottleneck) -> sigmoid, giving
[N,C,1,1]. Both maps lie strictly inside (0,1), so each gated stream is
elementwise smaller in magnitude than its input.

Two experiment flags exist because the prose being implemented is genuinely
ambiguous: `maps_from_input` computes the maps from the block input and
applies them to the projections (default computes them from the projections
themselves), and `swap_pairing` exchanges which projection gets which map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import ParamStore, Tensor, uniform_init


@dataclass(frozen=True)
class DbcasaConfig:
    channels: int
    dw_kernel: int = 3
    maps_from_input: bool = False
    swap_pairing: bool = False

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigurationError(f"channels must be >= 1, got {self.channels}")
        if self.dw_kernel < 1 or self.dw_kernel % 2 == 0:
            raise ConfigurationError(f"dw_kernel must be odd positive, got {self.dw_kernel}")

    @property
    def dw_pad(self) -> int:
        return self.dw_kernel // 2


def param_count(cfg: DbcasaConfig) -> int:
    """Closed-form learnable count; the store tally must match it exactly.

    depthwise kernel C*k*k, batchnorm 2C, spatial map conv C+1,
    channel map conv C^2+C, three unbiased projections 3C^2,
    output transform C^2+C.
    """
    c, k = cfg.channels, cfg.dw_kernel
    return c * k * k + 2 * c + (c + 1) + (c * c + c) + 3 * c * c + (c * c + c)


@dataclass
class DbcasaParams:
    dw_w: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    conv_s_w: Tensor
    conv_s_b: Tensor
    conv_c_w: Tensor
    conv_c_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    l_w: Tensor
    l_b: Tensor
    bn_mean: Tensor
    bn_var: Tensor
    bn_count: Tensor
    bn_name: str

    def learnables(self) -> list[Tensor]:
        return [self.dw_w, self.bn_gamma, self.bn_beta, self.conv_s_w, self.conv_s_b,
                self.conv_c_w, self.conv_c_b, self.wq, self.wk, self.wv,
                self.l_w, self.l_b]


def init_params(
    cfg: DbcasaConfig,
    store: ParamStore,
    prefix: str,
    rng: np.random.Generator,
    dtype=np.float32,
) -> DbcasaParams:
    c, k = cfg.channels, cfg.dw_kernel

    def w(name, shape, fan_in):
        return store.add(prefix + name,
                         Tensor(uniform_init(rng, shape, fan_in, dtype,
                                             gain=np.sqrt(3.0))))

    def zero(name, shape):
        return store.add(prefix + name, Tensor(np.zeros(shape, dtype=dtype)))

    dw_w = w("dw_w", (c, 1, k, k), k * k)
    bn_gamma = store.add(prefix + "bn_gamma", Tensor(np.ones((1, c, 1, 1), dtype=dtype)))
    bn_beta = zero("bn_beta", (1, c, 1, 1))
    conv_s_w = w("conv_s_w", (1, c, 1, 1), c)
    conv_s_b = zero("conv_s_b", (1, 1, 1, 1))
    conv_c_w = w("conv_c_w", (c, c, 1, 1), c)
    conv_c_b = zero("conv_c_b", (1, c, 1, 1))
    wq = w("wq", (c, c, 1, 1), c)
    wk = w("wk", (c, c, 1, 1), c)
    wv = w("wv", (c, c, 1, 1), c)
    l_w = w("l_w", (c, c, 1, 1), c)
    l_b = zero("l_b", (1, c, 1, 1))
    bn_mean = store.add(prefix + "bn_mean",
                        Tensor(np.zeros((1, c, 1, 1), dtype=dtype)), learnable=False)
    bn_var = store.add(prefix + "bn_var",
                       Tensor(np.ones((1, c, 1, 1), dtype=dtype)), learnable=False)
    bn_count = store.add(prefix + "bn_count",
                         Tensor(np.zeros((1, 1, 1, 1), dtype=dtype)), learnable=False)
    return DbcasaParams(dw_w, bn_gamma, bn_beta, conv_s_w, conv_s_b, conv_c_w, conv_c_b,
                        wq, wk, wv, l_w, l_b, bn_mean, bn_var, bn_count,
                        bn_name=prefix + "bn")


def _check_channels(x: Tensor, cfg: DbcasaConfig) -> None:
    from .errors import DimensionError

    if x.shape[1] != cfg.channels:
        raise DimensionError(
            f"block expects {cfg.channels} channels, input has {x.shape[1]}")


def _bn(x: Tensor, p: DbcasaParams, train: bool, stats_sink: list | None) -> Tensor:
    if train:
        if stats_sink is not None:
            mu, var = T.batch_stats(x)
            pop = x.shape[0] * x.shape[2] * x.shape[3]
            stats_sink.append((p.bn_name, mu, var, pop))
        return T.batchnorm2d(x, p.bn_gamma, p.bn_beta)
    return T.batchnorm2d(x, p.bn_gamma, p.bn_beta,
                         mean=p.bn_mean.data.ravel(), var=p.bn_var.data.ravel())


def spatial_map(
    x: Tensor,
    p: DbcasaParams,
    cfg: DbcasaConfig,
    train: bool = False,
    stats_sink: list | None = None,
) -> Tensor:
    """[N,1,H,W] gate in (0,1) from the depthwise->norm->relu->pointwise stack."""
    _check_channels(x, cfg)
    t = T.conv2d(x, p.dw_w, None, stride=1, pad=cfg.dw_pad, groups=cfg.channels)
    t = _bn(t, p, train, stats_sink)
    t = T.relu(t)
    t = T.conv2d(t, p.conv_s_w, p.conv_s_b)
    return T.sigmoid(t)


def channel_map(x: Tensor, p: DbcasaParams) -> Tensor:
    """[N,C,1,1] gate in (0,1) from pooled per-channel summaries."""
    t = T.global_avg_pool(x)
    t = T.conv2d(t, p.conv_c_w, p.conv_c_b)
    return T.sigmoid(t)


def spatial_branch(
    x: Tensor,
    p: DbcasaParams,
    cfg: DbcasaConfig,
    train: bool = False,
    stats_sink: list | None = None,
) -> Tensor:
    return T.mul(spatial_map(x, p, cfg, train, stats_sink), x)


def channel_branch(x: Tensor, p: DbcasaParams) -> Tensor:
    return T.mul(channel_map(x, p), x)


def dbcasa_forward(
    x: Tensor,
    p: DbcasaParams,
    cfg: DbcasaConfig,
    train: bool = False,
    stats_sink: list | None = None,
) -> Tensor:
    """Full block: output = L(gated_q + gated_k) * v, same shape as x."""
    _check_channels(x, cfg)
    q = T.conv2d(x, p.wq)
    k = T.conv2d(x, p.wk)
    v = T.conv2d(x, p.wv)
    spatial_target, channel_target = (k, q) if cfg.swap_pairing else (q, k)
    if cfg.maps_from_input:
        gated_s = T.mul(spatial_map(x, p, cfg, train, stats_sink), spatial_target)
        gated_c = T.mul(channel_map(x, p), channel_target)
    else:
        gated_s = spatial_branch(spatial_target, p, cfg, train, stats_sink)
        gated_c = channel_branch(channel_target, p)
    fused = T.add(gated_s, gated_c)
    return T.mul(T.conv2d(fused, p.l_w, p.l_b), v)


def fold_bn_stats(store: ParamStore, stats: list[tuple[str, np.ndarray, np.ndarray, int]]) -> None:
    """Merge per-batch normalization statistics into the stored running buffers.

    Running values are the sample-weighted mean over every batch folded so
    far; the count buffer holds the total population, making the fold
    order-independent up to floating-point association.
    """
    for name, mu, var, pop in stats:
        mean_t = store[name + "_mean"]
        var_t = store[name + "_var"]
        count_t = store[name + "_count"]
        n_old = float(count_t.data.reshape(()))
        n_new = n_old + pop
        w_new = pop / n_new
        dtype = mean_t.data.dtype
        mean_t.set_data(((1 - w_new) * mean_t.data.ravel() + w_new * mu)
                        .reshape(mean_t.shape).astype(dtype))
        var_t.set_data(((1 - w_new) * var_t.data.ravel() + w_new * var)
                       .reshape(var_t.shape).astype(dtype))
        count_t.set_data(np.full((1, 1, 1, 1), n_new, dtype=dtype))


def reset_bn_stats(store: ParamStore) -> None:
    """Forget folded normalization statistics.

    Called at the start of each training epoch so the stored running
    stats used at inference describe the most recent pass over the data
    (a whole-history average lags the converged activations badly).
    Zeroing the count makes the next fold overwrite mean and variance.
    """
    for name in store.names():
        if name.endswith("_count"):
            t = store[name]
            t.set_data(np.zeros(t.shape, dtype=t.data.dtype))


def gradcheck_cases():
    from .gradcheck import Case

    def full_block(channels, n, h, w, **flags):
        def factory(rng):
            cfg = DbcasaConfig(channels=channels, **flags)
            store = ParamStore()
            p = init_params(cfg, store, "b.", rng, dtype=np.float64)
            x = Tensor(rng.uniform(-1, 1, size=(n, channels, h, w)),
                       requires_grad=True, dtype=np.float64)
            r = None

            def build():
                nonlocal r
                y = dbcasa_forward(x, p, cfg, train=True)
                if r is None:
                    r = Tensor(rng.uniform(-1, 1, size=y.shape), dtype=np.float64)
                return T.sum_all(T.mul(y, r))

            return build, [x] + p.learnables()

        return factory

    def one_branch(which):
        def factory(rng):
            cfg = DbcasaConfig(channels=3)
            store = ParamStore()
            p = init_params(cfg, store, "b.", rng, dtype=np.float64)
            x = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 4)),
                       requires_grad=True, dtype=np.float64)
            r = None

            def build():
                nonlocal r
                if which == "spatial":
                    y = spatial_branch(x, p, cfg, train=True)
                else:
                    y = channel_branch(x, p)
                if r is None:
                    r = Tensor(rng.uniform(-1, 1, size=y.shape), dtype=np.float64)
                return T.sum_all(T.mul(y, r))

            return build, [x] + p.learnables()

        return factory

    return [
        Case("attn-dbcasa", "spatial_branch", one_branch("spatial")),
        Case("attn-dbcasa", "channel_branch", one_branch("channel")),
        Case("attn-dbcasa", "full_block_c2", full_block(2, 2, 4, 4)),
        Case("attn-dbcasa", "full_block_c4", full_block(4, 1, 4, 4)),
        Case("attn-dbcasa", "full_block_c8", full_block(8, 2, 4, 4)),
        Case("attn-dbcasa", "full_block_maps_from_input", full_block(2, 1, 4, 4, maps_from_input=True)),
        Case("attn-dbcasa", "full_block_swapped", full_block(2, 1, 4, 4, swap_pairing=True)),
    ]
