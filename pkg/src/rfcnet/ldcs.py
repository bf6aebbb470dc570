"""
Strong (SDCS) and loose (LDCS) dense connection layers and their parameter counts.

An LDCS layer splits its input channels into ``n_l`` groups and produces
``n_next`` output groups. Output group ``i`` is built from

* a strong k x k convolution of its parent input group,
* a loose 1x1 convolution over the concatenation of every other input group,
* a fuse 1x1 convolution over the merged (concatenated or summed) pair.

With ``merge="add"`` the bias-free weight count equals :func:`param_count_ldcs`
exactly; ``merge="concat"`` doubles the fuse input and adds ``d_next**2 / n_next``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .autodiff import ConvKernel, Tensor, add, concat_channels, init_conv_kernel, relu
from .errors import ArgumentError, DimensionError

MERGE_MODES = ("concat", "add")


def param_count_sdcs(d_l: int, d_next: int, k: int) -> int:
    """Weights of a strong layer: k x k conv d_l -> d_next, then 1x1 d_next -> d_next."""
    return d_next * (k * k * d_l + d_next)


@dataclass(frozen=True)
class LdcsLayerSpec:
    d_l: int
    n_l: int
    d_next: int
    n_next: int
    kernels: Union[int, Sequence[int]]
    merge: str = "concat"
    include_bias: bool = True

    def __post_init__(self):
        for name in ("d_l", "n_l", "d_next", "n_next"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ArgumentError(f"{name} must be a positive integer, got {value!r}")
        if self.d_l % self.n_l:
            raise ArgumentError(f"n_l={self.n_l} does not divide d_l={self.d_l}")
        if self.d_next % self.n_next:
            raise ArgumentError(f"n_next={self.n_next} does not divide d_next={self.d_next}")
        kernels = self.kernels
        if isinstance(kernels, (int, np.integer)):
            kernels = (int(kernels),) * self.n_next
        kernels = tuple(int(k) for k in kernels)
        if len(kernels) != self.n_next:
            raise ArgumentError(f"need one kernel size per output group ({self.n_next}), got {len(kernels)}")
        bad = [k for k in kernels if k < 3 or k % 2 == 0]
        if bad:
            raise ArgumentError(f"strong kernels must be odd and >= 3, got {bad}")
        if self.merge not in MERGE_MODES:
            raise ArgumentError(f"merge must be one of {MERGE_MODES}, got {self.merge!r}")
        object.__setattr__(self, "kernels", kernels)

    @property
    def in_group(self) -> int:
        return self.d_l // self.n_l

    @property
    def out_group(self) -> int:
        return self.d_next // self.n_next

    @property
    def has_loose(self) -> bool:
        return self.n_l > 1

    @property
    def fuse_in(self) -> int:
        if self.merge == "concat" and self.has_loose:
            return 2 * self.out_group
        return self.out_group


def param_count_ldcs(spec: LdcsLayerSpec) -> int:
    """Closed-form weight count of an LDCS layer (no biases), exact integers.

    Per-group kernel sizes are summed group by group in the strong term; for a
    uniform k this is ``d_next * ((k^2 + n_l - 1) / n_l * d_l + d_next / n_next)``.
    """
    c = spec.out_group
    strong = sum(c * (k * k * spec.d_l // spec.n_l) for k in spec.kernels)
    loose = spec.d_next * ((spec.n_l - 1) * spec.d_l // spec.n_l)
    fuse = spec.d_next * (spec.d_next // spec.n_next)
    return strong + loose + fuse


def concat_correction(spec: LdcsLayerSpec) -> int:
    """Extra fuse weights that concat merging costs over the closed form."""
    if spec.merge == "concat" and spec.has_loose:
        return spec.d_next * spec.d_next // spec.n_next
    return 0


def default_parents(n_l: int, n_next: int) -> tuple:
    """0-based parent of every output group: ``ceil(i / m) - 1`` for 1-based i, m = n_next / n_l.

    For non-multiples this falls back to ``floor(i * n_l / n_next)``, which agrees
    with the tree rule whenever n_l divides n_next.
    """
    return tuple(i * n_l // n_next for i in range(n_next))


@dataclass
class OutputGroup:
    strong: ConvKernel
    fuse: ConvKernel
    loose: Optional[ConvKernel] = None


@dataclass
class LdcsLayer:
    spec: LdcsLayerSpec
    groups: list
    parents: tuple = field(default=())

    def named_kernels(self, prefix: str = "") -> Iterator[tuple]:
        for i, g in enumerate(self.groups):
            yield f"{prefix}g{i}.strong", g.strong
            if g.loose is not None:
                yield f"{prefix}g{i}.loose", g.loose
            yield f"{prefix}g{i}.fuse", g.fuse

    def parameters(self) -> list:
        return [p for _, k in self.named_kernels() for p in k.parameters()]

    def __call__(self, groups: Sequence[Tensor]) -> list:
        return ldcs_forward(self, groups)


def build_ldcs_layer(spec: LdcsLayerSpec, rng: Optional[np.random.Generator] = None,
                     parents: Optional[Sequence[int]] = None, dtype=np.float32,
                     init: str = "he") -> LdcsLayer:
    if rng is None:
        rng = np.random.default_rng(0)
    if parents is None:
        parents = default_parents(spec.n_l, spec.n_next)
    parents = tuple(int(p) for p in parents)
    if len(parents) != spec.n_next or any(not 0 <= p < spec.n_l for p in parents):
        raise ArgumentError(f"parent map must give one input group in [0, {spec.n_l}) per output group")
    c, b = spec.out_group, spec.include_bias
    groups = []
    for k in spec.kernels:
        strong = init_conv_kernel(spec.in_group, c, k, rng, bias=b, dtype=dtype, init=init)
        loose = None
        if spec.has_loose:
            loose = init_conv_kernel(spec.d_l - spec.in_group, c, 1, rng, bias=b, dtype=dtype, init=init)
        fuse = init_conv_kernel(spec.fuse_in, c, 1, rng, bias=b, dtype=dtype, init=init)
        groups.append(OutputGroup(strong=strong, fuse=fuse, loose=loose))
    return LdcsLayer(spec=spec, groups=groups, parents=parents)


def ldcs_forward(layer: LdcsLayer, groups: Sequence[Tensor]) -> list:
    """Run one LDCS layer on ``n_l`` input groups, returning ``n_next`` output groups."""
    spec = layer.spec
    if len(groups) != spec.n_l:
        raise DimensionError(f"expected {spec.n_l} input groups, got {len(groups)}")
    for j, g in enumerate(groups):
        if g.ndim != 4 or g.shape[1] != spec.in_group:
            raise DimensionError(f"input group {j} must have {spec.in_group} channels, got shape {g.shape}")
        if g.shape[2:] != groups[0].shape[2:] or g.shape[0] != groups[0].shape[0]:
            raise DimensionError(f"input group {j} spatial/batch dims {g.shape} differ from group 0")

    complements = {}
    out = []
    for og, parent in zip(layer.groups, layer.parents):
        strong = relu(og.strong(groups[parent]))
        if og.loose is None:
            merged = strong
        else:
            if parent not in complements:
                complements[parent] = concat_channels([g for j, g in enumerate(groups) if j != parent])
            loose = relu(og.loose(complements[parent]))
            merged = add(strong, loose) if spec.merge == "add" else concat_channels([strong, loose])
        out.append(relu(og.fuse(merged)))
    return out


@dataclass
class SdcsLayer:
    """k x k conv d_l -> d_next followed by a 1x1 conv d_next -> d_next."""

    spatial: ConvKernel
    pointwise: ConvKernel

    def named_kernels(self, prefix: str = "") -> Iterator[tuple]:
        yield f"{prefix}spatial", self.spatial
        yield f"{prefix}pointwise", self.pointwise

    def parameters(self) -> list:
        return self.spatial.parameters() + self.pointwise.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.pointwise(relu(self.spatial(x))))


def build_sdcs_layer(d_l: int, d_next: int, k: int, rng: Optional[np.random.Generator] = None,
                     include_bias: bool = True, dtype=np.float32, init: str = "he") -> SdcsLayer:
    if min(d_l, d_next, k) < 1:
        raise ArgumentError("SDCS dimensions must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    return SdcsLayer(init_conv_kernel(d_l, d_next, k, rng, bias=include_bias, dtype=dtype, init=init),
                     init_conv_kernel(d_next, d_next, 1, rng, bias=include_bias, dtype=dtype, init=init))


def iter_kernels(obj) -> Iterator[tuple]:
    """(name, ConvKernel) pairs of a layer, a model, a bare kernel or a list of those."""
    if isinstance(obj, ConvKernel):
        yield "conv", obj
    elif hasattr(obj, "named_kernels"):
        yield from obj.named_kernels()
    else:
        for i, item in enumerate(obj):
            for name, k in iter_kernels(item):
                yield f"{i}.{name}", k


def enumerate_params(layer, include_bias: bool = False) -> int:
    """Count scalar weights (and biases if asked) by walking the layer's kernels."""
    total = 0
    for _, kernel in iter_kernels(layer):
        total += kernel.weight.size
        if include_bias and kernel.bias is not None:
            total += kernel.bias.size
    return total
