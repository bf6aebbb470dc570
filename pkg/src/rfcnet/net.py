"""
RFC-Net assembly: a two-downsample stem, an m-way LDCS tree and a 1x1 head.

Tree level ``l`` holds ``m**l`` groups of ``width`` channels. Child ``i``
(1-based) of level ``l + 1`` reads its strong input from parent ``ceil(i / m)``
and uses kernel ``kernels[(i - 1) % m]``, so leaf ``j`` follows the chain of
kernels spelled by the base-m digits of ``j``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from typing import Iterator, Optional, Sequence

import numpy as np

from .autodiff import (
    INIT_SCHEMES,
    ConvKernel,
    Tensor,
    bilinear_upsample,
    concat_channels,
    gather_flat,
    init_conv_kernel,
    maxpool2,
    relu,
    tensor_sum,
)
from .errors import ArgumentError, ConfigError, DimensionError
from .ldcs import MERGE_MODES, LdcsLayer, LdcsLayerSpec, build_ldcs_layer

PRESETS = {
    "a": (3, (3, 5, 7)),
    "b": (3, (3, 3, 3)),
    "c": (2, (3, 5)),
    "d": (2, (3, 3)),
}

# (kernel, stride) of conv3 -> pool2 -> conv3 -> pool2
STEM_LAYERS = ((3, 1), (2, 2), (3, 1), (2, 2))
DOWNSAMPLE = 4


@dataclass(frozen=True)
class RfcConfig:
    m: int
    kernels: tuple
    depth: int = 3
    width: int = 16
    stem_widths: Optional[tuple] = None
    num_classes: int = 2
    merge: str = "concat"
    seed: int = 0
    include_bias: bool = True
    init: str = "he"

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if self.stem_widths is None:
            object.__setattr__(self, "stem_widths", (self.width, self.width))
        object.__setattr__(self, "stem_widths", tuple(int(c) for c in self.stem_widths))
        failed = self.invariant_failures()
        if failed:
            raise ConfigError("invalid RfcConfig: " + "; ".join(failed))

    def invariant_failures(self) -> list:
        failed = []
        if self.m < 2:
            failed.append(f"m >= 2 (got {self.m})")
        if len(self.kernels) != self.m:
            failed.append(f"len(kernels) == m (got {len(self.kernels)} kernels for m={self.m})")
        if any(k < 3 or k % 2 == 0 for k in self.kernels):
            failed.append(f"kernels odd and >= 3 (got {list(self.kernels)})")
        if self.depth < 1:
            failed.append(f"depth >= 1 (got {self.depth})")
        if self.width < 1:
            failed.append(f"width >= 1 (got {self.width})")
        if len(self.stem_widths) != 2 or min(self.stem_widths) < 1:
            failed.append(f"stem_widths is two positive ints (got {self.stem_widths})")
        elif self.stem_widths[1] != self.width:
            failed.append(f"stem output width == group width (got {self.stem_widths[1]} vs {self.width})")
        if self.num_classes < 2:
            failed.append(f"num_classes >= 2 (got {self.num_classes})")
        if self.merge not in MERGE_MODES:
            failed.append(f"merge in {MERGE_MODES} (got {self.merge!r})")
        if self.init not in INIT_SCHEMES:
            failed.append(f"init in {INIT_SCHEMES} (got {self.init!r})")
        return failed

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "RfcConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        m, kernels = PRESETS[name]
        return cls(m=m, kernels=kernels, **overrides)

    def level_channels(self, level: int) -> int:
        return self.width * self.m ** level

    def to_items(self) -> list:
        """(key, text) pairs; the inverse of :meth:`from_items`."""
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "1" if v else "0"
            out.append((f.name, str(v)))
        return out

    @classmethod
    def from_items(cls, items: dict) -> "RfcConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(items) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            kw = dict(
                m=int(items["m"]),
                kernels=tuple(int(x) for x in items["kernels"].split(",")),
                depth=int(items["depth"]),
                width=int(items["width"]),
                stem_widths=tuple(int(x) for x in items["stem_widths"].split(",")),
                num_classes=int(items["num_classes"]),
                merge=items["merge"],
                seed=int(items["seed"]),
                include_bias=items["include_bias"] == "1",
                init=items["init"],
            )
        except KeyError as e:
            raise ConfigError(f"config key {e.args[0]!r} missing") from None
        except ValueError as e:
            raise ConfigError(f"malformed config value: {e}") from None
        return cls(**kw)


@dataclass(frozen=True)
class ChainDescriptor:
    leaf_index: int
    kernel_sequence: tuple


class RfcModel:
    """Stem -> LDCS tree -> 1x1 head -> bilinear x4."""

    def __init__(self, config: RfcConfig, stem: list, tree: list, head: ConvKernel):
        self.config = config
        self.stem = stem
        self.tree = tree
        self.head = head

    def named_kernels(self) -> Iterator[tuple]:
        yield "stem.conv1", self.stem[0]
        yield "stem.conv2", self.stem[1]
        for level, layer in enumerate(self.tree):
            yield from layer.named_kernels(prefix=f"tree.{level}.")
        yield "head", self.head

    def named_parameters(self) -> Iterator[tuple]:
        for name, k in self.named_kernels():
            yield f"{name}.weight", k.weight
            if k.bias is not None:
                yield f"{name}.bias", k.bias

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ArgumentError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "RfcModel":
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone

    @property
    def dtype(self):
        return self.head.weight.dtype

    def group_counts(self) -> list:
        """Number of groups at each tree level 0..L."""
        return [1] + [layer.spec.n_next for layer in self.tree]

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected input (n, 3, h, w), got {x.shape}")
        h, w = x.shape[2:]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise DimensionError(f"input height/width ({h}, {w}) must be divisible by {DOWNSAMPLE}")

    def leaf_groups(self, x: Tensor) -> list:
        self._check_input(x)
        h = maxpool2(relu(self.stem[0](x)))
        h = maxpool2(relu(self.stem[1](h)))
        groups = [h]
        for layer in self.tree:
            groups = layer(groups)
        return groups

    def forward(self, x: Tensor) -> Tensor:
        logits = self.head(concat_channels(self.leaf_groups(x)))
        return bilinear_upsample(logits, DOWNSAMPLE)

    __call__ = forward


def tree_spec(config: RfcConfig, level: int) -> LdcsLayerSpec:
    m = config.m
    n_next = m ** (level + 1)
    return LdcsLayerSpec(
        d_l=config.level_channels(level),
        n_l=m ** level,
        d_next=config.level_channels(level + 1),
        n_next=n_next,
        kernels=tuple(config.kernels[i % m] for i in range(n_next)),
        merge=config.merge,
        include_bias=config.include_bias,
    )


def build_rfc_net(config: RfcConfig, dtype=np.float32) -> RfcModel:
    rng = np.random.default_rng(config.seed)
    c1, c2 = config.stem_widths
    bias, init = config.include_bias, config.init
    stem = [
        init_conv_kernel(3, c1, 3, rng, bias=bias, dtype=dtype, init=init),
        init_conv_kernel(c1, c2, 3, rng, bias=bias, dtype=dtype, init=init),
    ]
    tree = []
    for level in range(config.depth):
        spec = tree_spec(config, level)
        parents = tuple(i // config.m for i in range(spec.n_next))
        tree.append(build_ldcs_layer(spec, rng, parents=parents, dtype=dtype, init=init))
    head = init_conv_kernel(config.level_channels(config.depth), config.num_classes, 1, rng,
                            bias=bias, dtype=dtype, init=init)
    return RfcModel(config, stem, tree, head)


def isolate_strong_paths(model: RfcModel) -> RfcModel:
    """Copy of ``model`` with every cross-group term zeroed.

    Loose kernels get zero weights and biases; in concat mode the fuse columns
    that read the loose half are zeroed too. Each leaf then sees only its own
    strong chain.
    """
    clone = copy.deepcopy(model)
    for layer in clone.tree:
        c = layer.spec.out_group
        for g in layer.groups:
            if g.loose is None:
                continue
            g.loose.weight.data[...] = 0
            if g.loose.bias is not None:
                g.loose.bias.data[...] = 0
            if layer.spec.merge == "concat":
                g.fuse.weight.data[:, c:] = 0
    return clone


def enumerate_chains(config: RfcConfig) -> list:
    m, depth = config.m, config.depth
    chains = []
    for leaf in range(m ** depth):
        digits, rest = [], leaf
        for _ in range(depth):
            digits.append(rest % m)
            rest //= m
        chains.append(ChainDescriptor(leaf, tuple(config.kernels[d] for d in reversed(digits))))
    return chains


def receptive_field(chain, config: Optional[RfcConfig] = None) -> int:
    """Theoretical receptive field of a leaf's strong path (stem + chain convs).

    ``chain`` is a ChainDescriptor or a plain kernel sequence; 1x1 loose/fuse
    convs do not widen it. ``config`` is accepted for symmetry and for
    validating the chain length.
    """
    seq = chain.kernel_sequence if isinstance(chain, ChainDescriptor) else tuple(chain)
    if config is not None and len(seq) != config.depth:
        raise ArgumentError(f"chain of length {len(seq)} does not match depth {config.depth}")
    rf, jump = 1, 1
    for k, s in STEM_LAYERS + tuple((k, 1) for k in seq):
        rf += (k - 1) * jump
        jump *= s
    return rf


def empirical_rf_probe(model: RfcModel, leaf_index: int, size: int = 128,
                       trials: int = 4, seed: int = 0) -> int:
    """Side of the bounding box of input pixels that influence one leaf's centre output.

    The gradient of the leaf group's centre activations (summed over channels) is
    taken with respect to random inputs; supports from ``trials`` inputs are
    united so that ReLU and max-pool routing do not hide any tap.
    """
    n_leaves = model.group_counts()[-1]
    if not 0 <= leaf_index < n_leaves:
        raise ArgumentError(f"leaf index {leaf_index} outside [0, {n_leaves})")
    rng = np.random.default_rng(seed)
    support = np.zeros((size, size), dtype=bool)
    for _ in range(trials):
        x = Tensor(rng.standard_normal((1, 3, size, size)).astype(model.dtype), requires_grad=True)
        leaf = model.leaf_groups(x)[leaf_index]
        _, c, h, w = leaf.shape
        idx = np.ravel_multi_index((np.zeros(c, int), np.arange(c), np.full(c, h // 2), np.full(c, w // 2)),
                                   leaf.shape)
        tensor_sum(gather_flat(leaf, idx)).backward()
        support |= np.abs(x.grad[0]).sum(axis=0) != 0
    model.zero_grad()
    if not support.any():
        return 0
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    return int(max(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1))
