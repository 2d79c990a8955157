"""Parameter-free four-direction feature shifting inside a residual conv block.

The fuse stage splits channels into four equal groups and translates each
group one way (+w, -w, +h, -h order, step s), zero-filling vacated borders
and discarding values pushed outside. It is linear, shape-preserving, and
owns no learnable entries; mixing spatially displaced features costs only
the surrounding convolutions.

The wrapper block is the smallest residual structure around the fuse:
entry 1x1 conv -> [fuse -> 3x3 conv] + entry output -> exit 1x1 conv.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import ParamStore, Tensor, record_op, uniform_init

# group-to-direction assignment, fixed order
DIRECTIONS = (("w", +1), ("w", -1), ("h", +1), ("h", -1))


@dataclass(frozen=True)
class ShiftConfig:
    step: int = 1

    def __post_init__(self):
        if self.step < 1:
            raise ConfigurationError(f"step must be >= 1, got {self.step}")


def shift2d(x: Tensor, axis: str, sign: int, s: int) -> Tensor:
    """Translate along one spatial axis; zero-fill, discard at the border.

    axis "w" moves along width, "h" along height; sign +1 moves toward
    larger indices. Backward is exactly the opposite-direction shift.
    """
    if axis not in ("w", "h"):
        raise ConfigurationError(f"axis must be 'w' or 'h', got {axis!r}")
    if sign not in (+1, -1):
        raise ConfigurationError(f"sign must be +1 or -1, got {sign}")
    extent = x.shape[3] if axis == "w" else x.shape[2]
    if s < 1 or s >= extent:
        raise ConfigurationError(f"step {s} must be in [1, {extent - 1}] for this axis")

    def apply(arr: np.ndarray, direction: int) -> np.ndarray:
        out = np.zeros_like(arr)
        if axis == "w":
            if direction > 0:
                out[:, :, :, s:] = arr[:, :, :, :-s]
            else:
                out[:, :, :, :-s] = arr[:, :, :, s:]
        else:
            if direction > 0:
                out[:, :, s:, :] = arr[:, :, :-s, :]
            else:
                out[:, :, :-s, :] = arr[:, :, s:, :]
        return out

    out = Tensor(apply(x.data, sign))

    def bwd(g):
        return (apply(g, -sign),)

    return record_op(f"shift2d_{axis}{'+' if sign > 0 else '-'}{s}", (x,), out, bwd,
                     lambda: apply(x.data, sign))


def split4(x: Tensor) -> list[Tensor]:
    """Four equal channel groups, in channel order."""
    c = x.shape[1]
    if c % 4 != 0:
        raise ConfigurationError(f"channel count {c} not divisible by 4")
    return T.split_channels(x, [c // 4] * 4)


def fsfm_fuse(x: Tensor, cfg: ShiftConfig) -> Tensor:
    """Shift each of the four channel groups its own way and reassemble."""
    groups = split4(x)
    shifted = [shift2d(g, axis, sign, cfg.step)
               for g, (axis, sign) in zip(groups, DIRECTIONS)]
    return T.concat_channels(shifted)


@dataclass
class FsfmBlockParams:
    entry_w: Tensor
    entry_b: Tensor
    inner_w: Tensor
    inner_b: Tensor
    exit_w: Tensor
    exit_b: Tensor

    def learnables(self) -> list[Tensor]:
        return [self.entry_w, self.entry_b, self.inner_w, self.inner_b,
                self.exit_w, self.exit_b]


def init_block_params(
    channels: int,
    store: ParamStore,
    prefix: str,
    rng: np.random.Generator,
    dtype=np.float32,
) -> FsfmBlockParams:
    if channels % 4 != 0:
        raise ConfigurationError(f"block channels {channels} not divisible by 4")
    c = channels

    def conv(name, k, fan_in):
        w = store.add(prefix + name + "_w",
                      Tensor(uniform_init(rng, (c, c, k, k), fan_in, dtype,
                                          gain=np.sqrt(3.0))))
        b = store.add(prefix + name + "_b", Tensor(np.zeros((1, c, 1, 1), dtype=dtype)))
        return w, b

    entry_w, entry_b = conv("entry", 1, c)
    inner_w, inner_b = conv("inner", 3, c * 9)
    exit_w, exit_b = conv("exit", 1, c)
    return FsfmBlockParams(entry_w, entry_b, inner_w, inner_b, exit_w, exit_b)


def block_param_count(channels: int) -> int:
    """Three biased convs; the shift stage contributes exactly zero."""
    c = channels
    return (c * c + c) + (9 * c * c + c) + (c * c + c)


def fsfm_c3k2_block(
    x: Tensor,
    p: FsfmBlockParams,
    cfg: ShiftConfig,
    use_fuse: bool = True,
) -> Tensor:
    """Residual wrapper; `use_fuse=False` skips the shift stage only,
    leaving the parameter count untouched (the ablation toggle)."""
    t = T.conv2d(x, p.entry_w, p.entry_b)
    u = fsfm_fuse(t, cfg) if use_fuse else t
    u = T.conv2d(u, p.inner_w, p.inner_b, pad=1)
    v = T.add(t, u)
    return T.conv2d(v, p.exit_w, p.exit_b)


def gradcheck_cases():
    from .gradcheck import Case

    def single_shift(axis, sign):
        def factory(rng):
            x = Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 4)),
                       requires_grad=True, dtype=np.float64)
            r = None

            def build():
                nonlocal r
                y = shift2d(x, axis, sign, 1)
                if r is None:
                    r = Tensor(rng.uniform(-1, 1, size=y.shape), dtype=np.float64)
                return T.sum_all(T.mul(y, r))

            return build, [x]

        return factory

    def fuse_case(step):
        def factory(rng):
            x = Tensor(rng.uniform(-1, 1, size=(2, 8, 5, 5)),
                       requires_grad=True, dtype=np.float64)
            r = None

            def build():
                nonlocal r
                y = fsfm_fuse(x, ShiftConfig(step=step))
                if r is None:
                    r = Tensor(rng.uniform(-1, 1, size=y.shape), dtype=np.float64)
                return T.sum_all(T.mul(y, r))

            return build, [x]

        return factory

    def block_case(channels, use_fuse):
        def factory(rng):
            store = ParamStore()
            p = init_block_params(channels, store, "f.", rng, dtype=np.float64)
            x = Tensor(rng.uniform(-1, 1, size=(2, channels, 4, 4)),
                       requires_grad=True, dtype=np.float64)
            r = None

            def build():
                nonlocal r
                y = fsfm_c3k2_block(x, p, ShiftConfig(), use_fuse=use_fuse)
                if r is None:
                    r = Tensor(rng.uniform(-1, 1, size=y.shape), dtype=np.float64)
                return T.sum_all(T.mul(y, r))

            return build, [x] + p.learnables()

        return factory

    return [
        Case("shift-fsfm", "shift_w_pos", single_shift("w", +1)),
        Case("shift-fsfm", "shift_w_neg", single_shift("w", -1)),
        Case("shift-fsfm", "shift_h_pos", single_shift("h", +1)),
        Case("shift-fsfm", "shift_h_neg", single_shift("h", -1)),
        Case("shift-fsfm", "fuse_s1", fuse_case(1)),
        Case("shift-fsfm", "fuse_s2", fuse_case(2)),
        Case("shift-fsfm", "block_c4", block_case(4, True)),
        Case("shift-fsfm", "block_c8", block_case(8, True)),
        Case("shift-fsfm", "block_c4_nofuse", block_case(4, False)),
    ]
