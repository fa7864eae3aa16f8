"""Declarative construction of the 1BN-DenseUNet and the Tiramisu baseline.

A network is described by a :class:`NetworkConfig`, expanded by
:func:`build_network` into an ordered list of :class:`LayerSpec` entries and
executed by a small graph interpreter backed by PyTorch.  Every layer
receives the channel-wise concatenation of its declared inputs, so dense
connectivity is explicit in the layer table rather than hidden in module
code.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

HEAD_CHANNELS = {"binary_2class": 2, "multiclass_4": 4}
VARIANTS = ("one_bn_denseunet", "tiramisu_baseline")
LAYER_KINDS = (
    "input",
    "conv3x3_elu",
    "feature_reduction",
    "downsample",
    "upsample",
    "concat",
    "input_inject",
    "head",
)

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3
ELU_ALPHA = 1.0


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    """Raised when an input cannot flow through the graph; names the layer."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"layer {layer!r}: {message}")
        self.layer = layer


def round_half_up(x: Fraction | float) -> int:
    return math.floor(Fraction(x) + Fraction(1, 2))


def _as_fraction(x: Any) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, str):
        return Fraction(x)
    # str() first so 0.5 -> 1/2 rather than the binary expansion
    return Fraction(str(x))


@dataclass(frozen=True)
class NetworkConfig:
    growth_rate: int = 6
    encoder_blocks: tuple[int, ...] = (3, 6, 9, 12, 15)
    decoder_blocks: tuple[int, ...] | None = None
    compression: Fraction = Fraction(1, 2)
    reduction_width_multiplier: int = 4
    input_channels: int = 6
    head: str = "binary_2class"
    variant: str = "one_bn_denseunet"
    patch_side: int = 768

    def __post_init__(self):
        object.__setattr__(self, "encoder_blocks", tuple(int(b) for b in self.encoder_blocks))
        if self.decoder_blocks is None:
            object.__setattr__(self, "decoder_blocks", tuple(reversed(self.encoder_blocks[:-1])))
        else:
            object.__setattr__(self, "decoder_blocks", tuple(int(b) for b in self.decoder_blocks))
        object.__setattr__(self, "compression", _as_fraction(self.compression))
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.encoder_blocks)

    @property
    def downsampling_factor(self) -> int:
        return 2 ** (self.levels - 1)

    @property
    def head_channels(self) -> int:
        return HEAD_CHANNELS[self.head]

    def validate(self) -> None:
        errors = []
        if not self.encoder_blocks:
            errors.append("encoder_blocks: must not be empty")
        elif len(self.encoder_blocks) < 2:
            errors.append("encoder_blocks: need at least 2 dense blocks")
        if any(b < 1 for b in self.encoder_blocks):
            errors.append("encoder_blocks: entries must be positive")
        if self.encoder_blocks and len(self.decoder_blocks) != len(self.encoder_blocks) - 1:
            errors.append(
                f"decoder_blocks: expected {len(self.encoder_blocks) - 1} entries, "
                f"got {len(self.decoder_blocks)}"
            )
        if any(b < 1 for b in self.decoder_blocks):
            errors.append("decoder_blocks: entries must be positive")
        if self.growth_rate < 1:
            errors.append("growth_rate: must be >= 1")
        if not (0 < self.compression <= 1):
            errors.append("compression: must lie in (0, 1]")
        if self.reduction_width_multiplier < 1:
            errors.append("reduction_width_multiplier: must be >= 1")
        if self.input_channels < 1:
            errors.append("input_channels: must be >= 1")
        if self.head not in HEAD_CHANNELS:
            errors.append(f"head: expected one of {sorted(HEAD_CHANNELS)}, got {self.head!r}")
        if self.variant not in VARIANTS:
            errors.append(f"variant: expected one of {list(VARIANTS)}, got {self.variant!r}")
        if self.encoder_blocks and len(self.encoder_blocks) >= 2:
            if self.patch_side < 1 or self.patch_side % self.downsampling_factor:
                errors.append(
                    f"patch_side: {self.patch_side} not divisible by {self.downsampling_factor}"
                )
        if errors:
            raise ConfigError("; ".join(errors))

    def compressed_width(self, n_blocks: int) -> int:
        return max(1, round_half_up(self.compression * self.growth_rate * n_blocks))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_blocks"] = list(self.encoder_blocks)
        d["decoder_blocks"] = list(self.decoder_blocks)
        c = self.compression
        d["compression"] = float(c) if Fraction(float(c)) == c else str(c)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        return cls(**d)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "NetworkConfig":
        return cls.from_dict(yaml.safe_load(text) or {})


REFERENCE_CONFIG = NetworkConfig()
MICRO_CONFIG = NetworkConfig(
    growth_rate=2, encoder_blocks=(1, 1), head="multiclass_4", patch_side=16
)


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list[str]
    out_channels: int
    batchnorm: bool = False
    factor: int = 1
    kernel: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")


@dataclass
class DenseBlockInfo:
    """Bookkeeping used by invariant checks and the architecture report."""

    name: str
    input_channels: int
    n_conv_blocks: int
    concat_names: list[str] = field(default_factory=list)
    transition: str | None = None


class _GraphBuilder:
    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        self.layers: list[LayerSpec] = []
        self.channels: dict[str, int] = {}
        self.blocks: list[DenseBlockInfo] = []

    def add(self, name, kind, inputs, out_channels=None, **kw) -> str:
        in_ch = sum(self.channels[i] for i in inputs)
        if out_channels is None:
            out_channels = in_ch
        self.layers.append(LayerSpec(name, kind, list(inputs), out_channels, **kw))
        self.channels[name] = out_channels
        return name

    def dense_block(self, prefix, inputs, n, bottleneck, batchnorm=False):
        """Return (concat name, names of the new feature maps)."""
        gr = self.cfg.growth_rate
        width = self.cfg.reduction_width_multiplier * gr
        info = DenseBlockInfo(prefix, sum(self.channels[i] for i in inputs), n)
        feats = list(inputs)
        new = []
        for k in range(1, n + 1):
            src = feats
            if bottleneck:
                src = [self.add(f"{prefix}.b{k}.reduce", "feature_reduction", feats, width,
                                batchnorm=True)]
            conv = self.add(f"{prefix}.b{k}.conv", "conv3x3_elu", src, gr, batchnorm=batchnorm)
            feats = feats + [conv]
            new.append(conv)
            info.concat_names.append(self.add(f"{prefix}.b{k}.cat", "concat", feats))
        self.blocks.append(info)
        return info.concat_names[-1], new


def _build_one_bn(cfg: NetworkConfig) -> _GraphBuilder:
    g = _GraphBuilder(cfg)
    g.add("input", "input", [], cfg.input_channels)

    skips = []
    x, _ = g.dense_block("enc1", ["input"], cfg.encoder_blocks[0], bottleneck=False)
    skips.append(x)
    # first transition is pooling only
    x = g.add("down1", "downsample", [x], factor=2)
    for lvl in range(2, cfg.levels + 1):
        inj = g.add(f"enc{lvl}.inject", "input_inject", ["input"], factor=2 ** (lvl - 1))
        n = cfg.encoder_blocks[lvl - 1]
        x, _ = g.dense_block(f"enc{lvl}", [x, inj], n, bottleneck=True)
        if lvl < cfg.levels:
            skips.append(x)
            red = g.add(f"down{lvl}.reduce", "feature_reduction", [x],
                        cfg.compressed_width(n), batchnorm=True)
            g.blocks[-1].transition = red
            x = g.add(f"down{lvl}", "downsample", [red], factor=2)

    prev_n = cfg.encoder_blocks[-1]
    for i, n in enumerate(cfg.decoder_blocks):
        lvl = cfg.levels - 1 - i
        red = g.add(f"up{lvl}.reduce", "feature_reduction", [x], cfg.compressed_width(prev_n),
                    batchnorm=True)
        g.blocks[-1].transition = red
        up = g.add(f"up{lvl}", "upsample", [red], factor=2, kernel=2)
        x, _ = g.dense_block(f"dec{lvl}", [up, skips[lvl - 1]], n, bottleneck=True)
        prev_n = n
    g.add("head", "head", [x], cfg.head_channels)
    return g


def _build_tiramisu(cfg: NetworkConfig) -> _GraphBuilder:
    # Same skeleton and transition widths as the 1BN variant; differs in
    # pre-activation batchnorm on every 3x3 conv, no feature reduction inside
    # conv blocks, no input injection, and upsampling of the last conv
    # layer's maps only (3x3 transposed conv).
    g = _GraphBuilder(cfg)
    g.add("input", "input", [], cfg.input_channels)

    skips = []
    x = "input"
    new: list[str] = []
    for lvl in range(1, cfg.levels + 1):
        n = cfg.encoder_blocks[lvl - 1]
        x, new = g.dense_block(f"enc{lvl}", [x], n, bottleneck=False, batchnorm=True)
        if lvl == cfg.levels:
            break
        skips.append(x)
        if lvl == 1:
            x = g.add("down1", "downsample", [x], factor=2)
            continue
        red = g.add(f"down{lvl}.reduce", "feature_reduction", [x], cfg.compressed_width(n),
                    batchnorm=True)
        g.blocks[-1].transition = red
        x = g.add(f"down{lvl}", "downsample", [red], factor=2)

    for i, n in enumerate(cfg.decoder_blocks):
        lvl = cfg.levels - 1 - i
        up = g.add(f"up{lvl}", "upsample", new[-1:], factor=2, kernel=3)
        x, new = g.dense_block(f"dec{lvl}", [up, skips[lvl - 1]], n, bottleneck=False,
                               batchnorm=True)
    g.add("head", "head", [x], cfg.head_channels)
    return g


class _BatchNorm(nn.BatchNorm2d):
    def __init__(self, c):
        # torch momentum weights the new batch statistic
        super().__init__(c, eps=BN_EPSILON, momentum=1.0 - BN_MOMENTUM)


def _make_module(spec: LayerSpec, in_ch: int) -> nn.Module | None:
    k = spec.kind
    if k == "conv3x3_elu":
        mods = [_BatchNorm(in_ch), nn.ELU(ELU_ALPHA)] if spec.batchnorm else []
        mods.append(nn.Conv2d(in_ch, spec.out_channels, 3, padding=1))
        if not spec.batchnorm:
            mods.append(nn.ELU(ELU_ALPHA))
        return nn.Sequential(*mods)
    if k == "feature_reduction":
        return nn.Sequential(_BatchNorm(in_ch), nn.Conv2d(in_ch, spec.out_channels, 1),
                             nn.ELU(ELU_ALPHA))
    if k == "upsample":
        if spec.kernel == 2:
            return nn.ConvTranspose2d(in_ch, spec.out_channels, 2, stride=2)
        return nn.ConvTranspose2d(in_ch, spec.out_channels, 3, stride=2, padding=1,
                                  output_padding=1)
    if k == "head":
        return nn.Conv2d(in_ch, spec.out_channels, 1)
    return None


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        # variance scaling, fan-in
        fan_in = m.weight[0].numel() if isinstance(m, nn.Conv2d) else \
            m.weight.shape[0] * m.weight[0, 0].numel()
        nn.init.trunc_normal_(m.weight, std=math.sqrt(1.0 / fan_in), a=-2 * math.sqrt(1.0 / fan_in),
                              b=2 * math.sqrt(1.0 / fan_in))
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.BatchNorm2d):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class Network(nn.Module):
    """Executable layer graph.

    ``layers`` and ``shape_table`` are fixed at build time; only the
    parameters (``parameter_store``) change during training.
    """

    def __init__(self, config: NetworkConfig, builder: _GraphBuilder):
        super().__init__()
        self.config = config
        self.layers: list[LayerSpec] = builder.layers
        self.dense_blocks: list[DenseBlockInfo] = builder.blocks
        self.channels: dict[str, int] = dict(builder.channels)
        self.parameter_store = nn.ModuleDict()
        for spec in self.layers:
            in_ch = sum(self.channels[i] for i in spec.inputs)
            mod = _make_module(spec, in_ch)
            if mod is not None:
                self.parameter_store[_key(spec.name)] = mod
        self.apply(_init_weights)
        self.shape_table = self.resolve_shapes(config.patch_side, config.patch_side)

    @property
    def layer_map(self) -> dict[str, LayerSpec]:
        return {s.name: s for s in self.layers}

    def resolve_shapes(self, height: int, width: int) -> dict[str, tuple[int, int, int]]:
        shapes: dict[str, tuple[int, int, int]] = {}
        for spec in self.layers:
            if spec.kind == "input":
                shapes[spec.name] = (height, width, spec.out_channels)
                continue
            h, w, _ = shapes[spec.inputs[0]]
            for i in spec.inputs[1:]:
                if shapes[i][:2] != (h, w):
                    raise ShapeError(spec.name, f"inputs disagree spatially: {shapes[i][:2]} vs {(h, w)}")
            if spec.kind in ("downsample", "input_inject"):
                f = spec.factor
                if h % f or w % f:
                    raise ShapeError(spec.name, f"{h}x{w} not divisible by {f}")
                h, w = h // f, w // f
            elif spec.kind == "upsample":
                h, w = h * spec.factor, w * spec.factor
            shapes[spec.name] = (h, w, spec.out_channels)
        return shapes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Run the graph on an NCHW tensor, returning per-pixel class probabilities."""
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError("input", f"expected N x {self.config.input_channels} x H x W, "
                                      f"got {tuple(x.shape)}")
        self.resolve_shapes(x.shape[2], x.shape[3])
        # kernels choose their algorithm from the memory layout; fix it for reproducibility
        return F.softmax(self.logits(x.contiguous()), dim=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        outs: dict[str, torch.Tensor] = {}
        for spec in self.layers:
            if spec.kind == "input":
                outs[spec.name] = x
                continue
            srcs = [outs[i] for i in spec.inputs]
            z = srcs[0] if len(srcs) == 1 else torch.cat(srcs, dim=1)
            if spec.kind in ("downsample", "input_inject"):
                z = F.avg_pool2d(z, spec.factor)
            elif spec.kind != "concat":
                z = self.parameter_store[_key(spec.name)](z)
            outs[spec.name] = z
        return outs[self.layers[-1].name]


def _key(name: str) -> str:
    return name.replace(".", "__")


def build_network(config: NetworkConfig, seed: int | None = None) -> Network:
    config.validate()
    if seed is not None:
        torch.manual_seed(seed)
    if config.variant == "one_bn_denseunet":
        builder = _build_one_bn(config)
    else:
        builder = _build_tiramisu(config)
    return Network(config, builder)


def forward(net: Network, image_batch) -> np.ndarray:
    """Channels-last convenience wrapper: (B, H, W, C) in, (B, H, W, K) out."""
    x = torch.as_tensor(np.asarray(image_batch))
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError("input", f"expected a 4-d batch, got shape {tuple(x.shape)}")
    dtype = next(net.parameters()).dtype
    x = x.permute(0, 3, 1, 2).to(dtype)
    with torch.no_grad():
        y = net(x)
    return y.permute(0, 2, 3, 1).cpu().numpy()


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def layer_parameter_counts(net: Network) -> dict[str, int]:
    counts = {}
    for spec in net.layers:
        key = _key(spec.name)
        counts[spec.name] = (
            count_parameters(net.parameter_store[key]) if key in net.parameter_store else 0
        )
    return counts


def architecture_report(net: Network) -> str:
    cfg = net.config
    lines = [
        f"variant: {cfg.variant}",
        f"growth_rate: {cfg.growth_rate}  encoder_blocks: {list(cfg.encoder_blocks)}  "
        f"decoder_blocks: {list(cfg.decoder_blocks)}  compression: {cfg.compression}",
        f"total parameters: {count_parameters(net)}",
        "",
        f"{'layer':<24}{'kind':<20}{'output (HxWxC)':>18}{'params':>10}",
    ]
    counts = layer_parameter_counts(net)
    for spec in net.layers:
        h, w, c = net.shape_table[spec.name]
        lines.append(f"{spec.name:<24}{spec.kind:<20}{f'{h}x{w}x{c}':>18}{counts[spec.name]:>10}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# gradient verification


@dataclass
class ProbeResult:
    parameter: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    error: float


def _relative_error(a: float, n: float, floor: float = 1e-7) -> float:
    scale = max(abs(a), abs(n))
    if scale < floor:
        return abs(a - n)
    return abs(a - n) / scale


def _ce_loss(net: Network, x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = net(x).clamp(1e-7, 1.0)
    return -(target * torch.log(p)).sum(dim=1).mean()


def gradient_probes(
    net: Network,
    x: torch.Tensor,
    target: torch.Tensor,
    probe_count: int = 50,
    step: float = 1e-5,
    seed: int = 0,
    parameters: Sequence[str] | None = None,
) -> list[ProbeResult]:
    """Compare autograd gradients with central differences at random scalars.

    ``parameters`` restricts probing to the named entries of
    ``net.named_parameters()``.
    """
    named = dict(net.named_parameters())
    names = list(parameters) if parameters is not None else list(named)
    sizes = np.array([named[n].numel() for n in names])
    rng = np.random.default_rng(seed)

    net.zero_grad()
    loss = _ce_loss(net, x, target)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss at the unperturbed parameters")
    loss.backward()

    flat_choice = rng.choice(sizes.sum(), size=min(probe_count, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    results = []
    with torch.no_grad():
        for flat in flat_choice:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            name = names[which]
            p = named[name]
            idx = np.unravel_index(int(flat - offsets[which]), tuple(p.shape))
            analytic = float(p.grad[idx]) if p.grad is not None else 0.0
            orig = p[idx].item()
            p[idx] = orig + step
            lp = _ce_loss(net, x, target).item()
            p[idx] = orig - step
            lm = _ce_loss(net, x, target).item()
            p[idx] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise FloatingPointError(f"non-finite loss probing {name}{list(idx)}")
            numeric = (lp - lm) / (2 * step)
            results.append(ProbeResult(name, tuple(int(i) for i in idx), analytic, numeric,
                                       _relative_error(analytic, numeric)))
    return results


def gradient_check(
    config: NetworkConfig,
    probe_count: int = 50,
    step: float = 1e-5,
    seed: int = 0,
    batch: int = 2,
) -> float:
    """Max relative gradient error over random parameter probes, in float64."""
    n_params = count_parameters(build_network(config, seed=seed))
    if n_params >= 10_000:
        raise ConfigError(f"gradient_check expects a micro config (< 10,000 parameters), got {n_params}")
    net = build_network(config, seed=seed).double()
    net.train()
    gen = torch.Generator().manual_seed(seed)
    side = config.patch_side
    x = torch.rand(batch, config.input_channels, side, side, generator=gen, dtype=torch.float64)
    labels = torch.randint(0, config.head_channels, (batch, side, side), generator=gen)
    target = F.one_hot(labels, config.head_channels).permute(0, 3, 1, 2).double()
    results = gradient_probes(net, x, target, probe_count, step, seed)
    return max(r.error for r in results)
