"""Invertible shape transforms: layout changes that carry no constraint.

A transform rearranges, replicates, selects, pads, or windows the scalars of
a tensor without changing any of them.  Projections at neighbouring
constraint nodes read and write *through* these maps, so every kind supplies
both a forward map and an inverse:

* bijective layout changes (reshape, transpose, concat, pad, conv windows)
  invert exactly;
* ``Repeat`` replicates, and its inverse is the mean over the replica axis
  (the least-squares pseudo-inverse), computed so identical replicas return
  the original bitwise;
* ``Index`` gathers rows and needs a base tensor to scatter back into; rows
  never gathered keep the base value, duplicated rows average.

Inverting a transform that cannot reconstruct its input (an ``Index`` with
no base) raises :class:`TransformContractError`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Tensor = np.ndarray


class TransformContractError(RuntimeError):
    """A read or write through a transform chain cannot be honoured."""


def _shifted_mean_axis(y: Tensor, axis: int) -> Tensor:
    first = np.take(y, 0, axis=axis)
    if y.shape[axis] == 1:
        return first.copy()
    return first + (y - np.expand_dims(first, axis)).mean(axis=axis)


@dataclass(frozen=True)
class Reshape:
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]

    def __post_init__(self):
        if int(np.prod(self.in_shape)) != int(np.prod(self.out_shape)):
            raise ValueError(f"reshape {self.in_shape} -> {self.out_shape} changes size")

    def forward(self, x: Tensor) -> Tensor:
        return x.reshape(self.out_shape)

    def inverse(self, y: Tensor, base: Tensor | None = None) -> Tensor:
        return y.reshape(self.in_shape)


@dataclass(frozen=True)
class Transpose:
    axes: tuple[int, ...]

    def forward(self, x: Tensor) -> Tensor:
        return np.transpose(x, self.axes)

    def inverse(self, y: Tensor, base: Tensor | None = None) -> Tensor:
        return np.transpose(y, np.argsort(self.axes))

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(in_shape[a] for a in self.axes)


@dataclass(frozen=True)
class Repeat:
    """Insert a new axis at ``axis`` and replicate the tensor ``reps`` times."""

    axis: int
    reps: int

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("repeat count must be >= 1")

    def forward(self, x: Tensor) -> Tensor:
        expanded = np.expand_dims(x, self.axis)
        tiled = np.broadcast_to(
            expanded, expanded.shape[: self.axis] + (self.reps,) + expanded.shape[self.axis + 1 :]
        )
        return np.ascontiguousarray(tiled)

    def inverse(self, y: Tensor, base: Tensor | None = None) -> Tensor:
        return _shifted_mean_axis(y, self.axis)

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape[: self.axis] + (self.reps,) + in_shape[self.axis :]


@dataclass(frozen=True)
class Index:
    """Gather ``indices`` along axis 0 of the input."""

    indices: tuple[int, ...]
    in_size: int

    def forward(self, x: Tensor) -> Tensor:
        return x[np.array(self.indices)]

    def inverse(self, y: Tensor, base: Tensor | None = None) -> Tensor:
        idx = np.array(self.indices)
        covered = np.zeros(self.in_size, dtype=bool)
        covered[idx] = True
        if base is None and not covered.all():
            raise TransformContractError(
                "inverting an index that drops rows requires a base tensor"
            )
        out_shape = (self.in_size,) + y.shape[1:]
        if base is None:
            out = np.zeros(out_shape, dtype=y.dtype)
        else:
            if base.shape != out_shape:
                raise TransformContractError(
                    f"index base shape {base.shape} != expected {out_shape}"
                )
            out = base.astype(np.float64).copy()
        sums = np.zeros(out_shape, dtype=np.float64)
        counts = np.zeros(self.in_size, dtype=np.int64)
        np.add.at(sums, idx, y)
        np.add.at(counts, idx, 1)
        sel = counts > 0
        out[sel] = sums[sel] / counts[sel].reshape((-1,) + (1,) * (y.ndim - 1))
        # Rows gathered exactly once keep their edge value bitwise.
        once = counts == 1
        if once.any():
            pos = np.flatnonzero(once)
            lookup = {int(i): j for j, i in enumerate(idx)}
            for i in pos:
                out[i] = y[lookup[int(i)]]
        return out

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if in_shape[0] != self.in_size:
            raise ValueError("index in_size mismatch")
        return (len(self.indices),) + in_shape[1:]


@dataclass(frozen=True)
class Pad:
    """Zero-pad the two spatial axes of a (batch, H, W, C) tensor."""

    width: int

    def forward(self, x: Tensor) -> Tensor:
        w = self.width
        return np.pad(x, ((0, 0), (w, w), (w, w), (0, 0)))

    def inverse(self, y: Tensor, base: Tensor | None = None) -> Tensor:
        w = self.width
        return y[:, w:-w, w:-w, :].copy()

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        b, h, w, c = in_shape
        return (b, h + 2 * self.width, w + 2 * self.width, c)


@dataclass(frozen=True)
class ConvPatch:
    """Materialize k x k sliding windows of a (batch, H, W, C) tensor.

    Output is (batch, H-k+1, W-k+1, k, k, C).  The inverse averages each
    input position over every window slot it occupies, which is exact when
    the windows agree (in particular right after a forward).
    """

    ksize: int

    def forward(self, x: Tensor) -> Tensor:
        k = self.ksize
        windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
        # sliding_window_view yields (B, H', W', C, k, k); move C after the window axes.
        return np.ascontiguousarray(np.moveaxis(windows, 3, 5))

    def inverse(self, y: Tensor, base: Tensor | None = None) -> Tensor:
        k = self.ksize
        b, ho, wo, _, _, c = y.shape
        h, w = ho + k - 1, wo + k - 1
        sums = np.zeros((b, h, w, c), dtype=np.float64)
        counts = np.zeros((h, w), dtype=np.float64)
        for di in range(k):
            for dj in range(k):
                sums[:, di : di + ho, dj : dj + wo, :] += y[:, :, :, di, dj, :]
                counts[di : di + ho, dj : dj + wo] += 1.0
        return sums / counts[None, :, :, None]

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        b, h, w, c = in_shape
        k = self.ksize
        return (b, h - k + 1, w - k + 1, k, k, c)


Transform = Reshape | Transpose | Repeat | Index | Pad | ConvPatch


@dataclass(frozen=True)
class Concat:
    """Join tensors along ``axis``; the inverse splits back into the parts."""

    axis: int
    sizes: tuple[int, ...]

    def forward(self, parts: list[Tensor]) -> Tensor:
        if len(parts) != len(self.sizes):
            raise ValueError("concat arity mismatch")
        return np.concatenate(parts, axis=self.axis)

    def inverse(self, y: Tensor) -> list[Tensor]:
        splits = np.cumsum(self.sizes)[:-1]
        return [np.ascontiguousarray(p) for p in np.split(y, splits, axis=self.axis)]

    def out_shape(self, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
        first = list(in_shapes[0])
        ax = self.axis if self.axis >= 0 else len(first) + self.axis
        for s, declared in zip(in_shapes, self.sizes):
            if s[ax] != declared:
                raise ValueError("concat declared sizes mismatch inputs")
        first[ax] = sum(self.sizes)
        return tuple(first)


def chain_forward(pipe: list[Transform], x: Tensor) -> Tensor:
    for t in pipe:
        x = t.forward(x)
    return x


def chain_inverse(pipe: list[Transform], y: Tensor, bases: list[Tensor | None] | None = None) -> Tensor:
    """Invert a pipeline last-to-first; ``bases[i]`` feeds pipe[i]'s inverse."""
    for i in range(len(pipe) - 1, -1, -1):
        base = bases[i] if bases is not None else None
        y = pipe[i].inverse(y, base=base)
    return y


def chain_out_shape(pipe: list[Transform], in_shape: tuple[int, ...]) -> tuple[int, ...]:
    shape = in_shape
    for t in pipe:
        if isinstance(t, Reshape):
            if tuple(shape) != t.in_shape:
                raise ValueError(f"reshape expects {t.in_shape}, got {shape}")
            shape = t.out_shape
        else:
            shape = t.out_shape(tuple(shape))
    return tuple(shape)
