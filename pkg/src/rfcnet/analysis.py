"""
Parameter and FLOP accounting for RFC-Net models and bare layers.

Conventions: one multiply-accumulate is 2 FLOPs; a conv costs
``2 * k^2 * C_in * C_out * H_out * W_out`` plus ``C_out * H_out * W_out`` for
its bias; ReLU, pooling, upsampling and additive merges cost 1 FLOP per output
element; concatenation is free. All arithmetic is integer.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .autodiff import ConvKernel
from .errors import ArgumentError
from .ldcs import LdcsLayer, SdcsLayer, concat_correction, param_count_ldcs, param_count_sdcs
from .net import DOWNSAMPLE, RfcConfig, RfcModel, build_rfc_net, tree_spec

CONVENTIONS = (
    "1 MAC = 2 FLOPs; conv bias adds 1 FLOP per output element; ReLU/pool/upsample/add-merge "
    "count 1 FLOP per output element; concatenation is free. 'analytic' is the closed-form "
    "weight count (biases excluded) and is filled only for SDCS/LDCS rows."
)

# Published computation and mIoU figures for the four RFC-Net variants.
PUBLISHED = {
    "a": {"params": 5.76e6, "gflops": 18.13, "kvasir": 81.31, "glas": 77.88, "cvc": 85.90},
    "b": {"params": 4.49e6, "gflops": 14.03, "kvasir": 79.15, "glas": 75.34, "cvc": 83.34},
    "c": {"params": 0.39e6, "gflops": 1.27, "kvasir": 76.41, "glas": 75.49, "cvc": 79.51},
    "d": {"params": 0.28e6, "gflops": 0.91, "kvasir": 73.24, "glas": 66.17, "cvc": 77.68},
}
PUBLISHED_INPUT = (224, 224)


@dataclass
class CostRow:
    name: str
    kind: str
    weights: int = 0
    biases: int = 0
    analytic: Optional[int] = None
    correction: int = 0
    macs: int = 0
    conv_flops: int = 0
    other_flops: int = 0

    @property
    def params(self) -> int:
        return self.weights + self.biases

    @property
    def flops(self) -> int:
        return self.conv_flops + self.other_flops


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    input_hw: Optional[tuple] = None
    conventions: str = CONVENTIONS

    def total(self, attr: str) -> int:
        return sum(getattr(r, attr) for r in self.rows)

    @property
    def totals(self) -> dict:
        keys = ("weights", "biases", "params", "macs", "conv_flops", "other_flops", "flops")
        return {k: self.total(k) for k in keys}

    def reconciliation(self) -> list:
        """(row name, analytic, concat correction, enumerated weights, matches)."""
        return [(r.name, r.analytic, r.correction, r.weights, r.analytic + r.correction == r.weights)
                for r in self.rows if r.analytic is not None]

    def to_text(self) -> str:
        head = f"{'layer':<18}{'kind':<10}{'weights':>12}{'biases':>9}{'analytic':>12}{'MACs':>16}{'FLOPs':>16}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            analytic = "-" if r.analytic is None else str(r.analytic)
            lines.append(f"{r.name:<18}{r.kind:<10}{r.weights:>12}{r.biases:>9}{analytic:>12}"
                         f"{r.macs:>16}{r.flops:>16}")
        t = self.totals
        lines.append("-" * len(head))
        lines.append(f"{'total':<28}{t['weights']:>12}{t['biases']:>9}{'':>12}{t['macs']:>16}{t['flops']:>16}")
        lines.append(f"params: {t['params']} ({t['params'] / 1e6:.4f}M)")
        if self.input_hw is not None:
            h, w = self.input_hw
            lines.append(f"input: 3x{h}x{w}  conv FLOPs: {t['conv_flops']}  "
                         f"GFLOPs: {t['flops'] / 1e9:.4f}  GMACs: {t['macs'] / 1e9:.4f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "kind", "weights", "biases", "params", "analytic", "concat_correction",
                         "macs", "conv_flops", "other_flops", "flops"])
        for r in self.rows:
            writer.writerow([r.name, r.kind, r.weights, r.biases, r.params,
                             "" if r.analytic is None else r.analytic, r.correction,
                             r.macs, r.conv_flops, r.other_flops, r.flops])
        return buf.getvalue()


def conv_cost(kernel: ConvKernel, h: int, w: int) -> tuple:
    """(MACs, FLOPs, output h, output w) of one conv on an h x w input."""
    s, p, k = kernel.stride, kernel.padding, kernel.k
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    macs = k * k * kernel.in_ch * kernel.out_ch * ho * wo
    flops = 2 * macs + (kernel.out_ch * ho * wo if kernel.bias is not None else 0)
    return macs, flops, ho, wo


def _kernel_params(kernels: Iterable[ConvKernel]) -> tuple:
    weights = biases = 0
    for k in kernels:
        weights += k.weight.size
        biases += k.bias.size if k.bias is not None else 0
    return weights, biases


def _conv_row(name: str, kernel: ConvKernel, hw: Optional[tuple], relu: bool) -> tuple:
    weights, biases = _kernel_params([kernel])
    row = CostRow(name, "conv", weights, biases)
    if hw is None:
        return row, None
    macs, flops, ho, wo = conv_cost(kernel, *hw)
    row.macs, row.conv_flops = macs, flops
    if relu:
        row.other_flops = kernel.out_ch * ho * wo
    return row, (ho, wo)


def _ldcs_row(name: str, layer: LdcsLayer, hw: Optional[tuple]) -> CostRow:
    spec = layer.spec
    kernels = [k for _, k in layer.named_kernels()]
    weights, biases = _kernel_params(kernels)
    row = CostRow(name, "ldcs", weights, biases, analytic=param_count_ldcs(spec),
                  correction=concat_correction(spec))
    if hw is not None:
        h, w = hw
        c = spec.out_group
        for g in layer.groups:
            for k in (g.strong, g.loose, g.fuse):
                if k is None:
                    continue
                macs, flops, ho, wo = conv_cost(k, h, w)
                row.macs += macs
                row.conv_flops += flops
                row.other_flops += k.out_ch * ho * wo  # relu
            if g.loose is not None and spec.merge == "add":
                row.other_flops += c * h * w
    return row


def _sdcs_row(name: str, layer: SdcsLayer, hw: Optional[tuple]) -> CostRow:
    weights, biases = _kernel_params([layer.spatial, layer.pointwise])
    analytic = param_count_sdcs(layer.spatial.in_ch, layer.spatial.out_ch, layer.spatial.k)
    row = CostRow(name, "sdcs", weights, biases, analytic=analytic)
    if hw is not None:
        for k in (layer.spatial, layer.pointwise):
            macs, flops, ho, wo = conv_cost(k, *hw)
            row.macs += macs
            row.conv_flops += flops
            row.other_flops += k.out_ch * ho * wo
            hw = (ho, wo)
    return row


def _model_rows(model: RfcModel, hw: Optional[tuple]) -> list:
    rows = []
    for i, conv in enumerate(model.stem, start=1):
        row, out = _conv_row(f"stem.conv{i}", conv, hw, relu=True)
        rows.append(row)
        pool = CostRow(f"stem.pool{i}", "maxpool")
        if hw is not None:
            hw = (out[0] // 2, out[1] // 2)
            pool.other_flops = conv.out_ch * hw[0] * hw[1]
        rows.append(pool)
    for level, layer in enumerate(model.tree):
        rows.append(_ldcs_row(f"tree.{level}", layer, hw))
    head, out = _conv_row("head", model.head, hw, relu=False)
    rows.append(head)
    up = CostRow("head.upsample", "upsample")
    if hw is not None:
        up.other_flops = model.head.out_ch * out[0] * DOWNSAMPLE * out[1] * DOWNSAMPLE
    rows.append(up)
    return rows


def _rows(obj, hw: Optional[tuple]) -> list:
    if isinstance(obj, RfcModel):
        return _model_rows(obj, hw)
    if isinstance(obj, LdcsLayer):
        return [_ldcs_row("ldcs", obj, hw)]
    if isinstance(obj, SdcsLayer):
        return [_sdcs_row("sdcs", obj, hw)]
    if isinstance(obj, ConvKernel):
        return [_conv_row("conv", obj, hw, relu=False)[0]]
    rows = []
    for i, item in enumerate(obj):
        for r in _rows(item, hw):
            r.name = f"{i}.{r.name}"
            rows.append(r)
    return rows


def count_params(model) -> CostReport:
    """Per-layer parameter report (no FLOPs) for a model, layer, kernel or list of them."""
    return CostReport(rows=_rows(model, None))


def count_flops(model, h: int, w: int) -> CostReport:
    """Per-layer parameters and FLOPs for an ``h x w`` input.

    Lists of layers are costed independently at the same input size, which
    is how single layers are benchmarked; a full model threads shapes through.
    """
    if isinstance(model, RfcModel) and (h % DOWNSAMPLE or w % DOWNSAMPLE):
        raise ArgumentError(f"input ({h}, {w}) must be divisible by {DOWNSAMPLE}")
    return CostReport(rows=_rows(model, (h, w)), input_hw=(h, w))


def sdcs_tree_params(config: RfcConfig) -> int:
    """Weights a strongly-connected tree with the same channel sequence would need."""
    total = 0
    for level in range(config.depth):
        spec = tree_spec(config, level)
        c = spec.out_group
        total += sum(c * (k * k * spec.d_l + spec.d_next) for k in spec.kernels)
    return total


def ldcs_tree_params(config: RfcConfig) -> int:
    return sum(param_count_ldcs(tree_spec(config, level)) + concat_correction(tree_spec(config, level))
               for level in range(config.depth))


@dataclass
class PresetRow:
    preset: str
    config: RfcConfig
    params: int
    macs: int
    flops: int

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


def compare_presets(presets: Sequence[str] = ("a", "b", "c", "d"), h: int = 224, w: int = 224,
                    **overrides) -> list:
    rows = []
    for name in presets:
        config = RfcConfig.from_preset(name, **overrides)
        report = count_flops(build_rfc_net(config), h, w)
        t = report.totals
        rows.append(PresetRow(name, config, t["params"], t["macs"], t["flops"]))
    return rows


def format_presets(rows: Sequence[PresetRow]) -> str:
    lines = [f"{'preset':<8}{'m':>3}  {'kernels':<10}{'depth':>6}{'width':>6}{'params':>12}{'GFLOPs':>10}"
             f"{'GMACs':>9}"]
    for r in rows:
        ks = ",".join(map(str, r.config.kernels))
        lines.append(f"{r.preset:<8}{r.config.m:>3}  {ks:<10}{r.config.depth:>6}{r.config.width:>6}"
                     f"{r.params:>12}{r.gflops:>10.4f}{r.macs / 1e9:>9.4f}")
    return "\n".join(lines)


def published_reference(preset: Optional[str] = None) -> str:
    """Labelled block of the published RFC-Net figures, printed next to ours."""
    names = [preset] if preset in PUBLISHED else sorted(PUBLISHED)
    lines = [
        "PUBLISHED REFERENCE (not reproduced here; shown for comparison only)",
        f"  computation measured on a {PUBLISHED_INPUT[0]}x{PUBLISHED_INPUT[1]} RGB image;"
        " mIoU % after full GPU training",
        f"  {'variant':<10}{'params':>9}{'GFLOPs':>9}{'Kvasir':>9}{'GlaS':>8}{'CVC-DB':>9}",
    ]
    for n in names:
        p = PUBLISHED[n]
        lines.append(f"  RFC-Net^{n:<2}{p['params'] / 1e6:>8.2f}M{p['gflops']:>8.2f}B"
                     f"{p['kvasir']:>9.2f}{p['glas']:>8.2f}{p['cvc']:>9.2f}")
    lines += [
        "  These figures are NOT reproducible on a desk machine: the mIoU columns need",
        "  GPU-scale training on Kvasir/GlaS/CVC-ClinicDB, and the exact params/GFLOPs",
        "  depend on channel widths, tree depth, stem and head that were never published.",
        "  The report above gives this implementation's figures for its own defaults.",
    ]
    return "\n".join(lines)
