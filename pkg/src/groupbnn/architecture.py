"""MobileNet-13 style binary network family with searchable group counts.

A network is a full-precision 3x3 stem, 13 blocks, global average pooling
and a full-precision classifier. Every block starts with a binary 3x3 group
conv (the searched slot) followed by binary 1x1 conv(s):

* ``M1``: binary 3x3 group conv, binary 1x1 full conv, plus a real 1x1 conv
  shortcut on blocks that reduce the spatial size.
* ``M2``: as M1, but the real 1x1 shortcut is itself a searched group conv.
* ``M3``: binary 3x3 group conv, then two binary 1x1 convs producing half
  the output channels each, concatenated. No real conv.

Each binary conv is preceded by batch norm and sign. Identity skips wrap a
binary conv whenever its input and output shapes agree.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from groupbnn.binary_ops import ConvGeometry
from groupbnn.layers import (
    BatchNorm,
    Conv,
    FixedWeight,
    GlobalAvgPool,
    Linear,
    SharedWeight,
    Sign,
    crop_indices,
)
from groupbnn.tensor_core import DTYPE
from groupbnn.training_engine import Parameter

MODULE_KINDS = ("M1", "M2", "M3")

# (output channels, stride) of the 13 MobileNet blocks, stem has 32 channels
MOBILENET_BLOCKS = (
    (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
    (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1),
)
MOBILENET_STEM = 32
BINARY_FLOP_DIVISOR = 64


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    index: int
    in_channels: int
    out_channels: int
    stride: int
    module_kind: str

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError(f"layer {self.index}: channels must be positive")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"layer {self.index}: stride must be 1 or 2")
        if self.module_kind not in MODULE_KINDS:
            raise ConfigurationError(f"layer {self.index}: unknown module {self.module_kind!r}")
        if self.module_kind == "M3" and self.out_channels % 2:
            raise ConfigurationError(f"layer {self.index}: M3 needs an even channel count")

    @property
    def has_projection(self) -> bool:
        return self.module_kind in ("M1", "M2") and self.stride != 1

    @property
    def searchable_slots(self) -> int:
        return 2 if self.module_kind == "M2" and self.has_projection else 1


@dataclass(frozen=True)
class Slot:
    """One searchable group choice: a block's 3x3 conv or its M2 real 1x1 shortcut."""

    layer: int
    role: str  # "conv3x3" or "proj1x1"
    in_channels: int
    out_channels: int

    @property
    def name(self) -> str:
        return f"blocks.{self.layer}.{'conv3' if self.role == 'conv3x3' else 'proj'}"


@dataclass
class NetworkConfig:
    layers: list[LayerSpec]
    in_channels: int = 3
    input_size: tuple[int, int] = (224, 224)
    stem_channels: int = MOBILENET_STEM
    stem_stride: int = 2
    num_classes: int = 1000
    width_multiplier: float = 1.0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if not self.layers:
            raise ConfigurationError("network needs at least one layer")
        prev = self.stem_channels
        for spec in self.layers:
            if spec.in_channels != prev:
                raise ConfigurationError(
                    f"layer {spec.index}: expects {spec.in_channels} input channels, "
                    f"previous layer gives {prev}"
                )
            prev = spec.out_channels

    @property
    def module_kind(self) -> str:
        kinds = {spec.module_kind for spec in self.layers}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    def slots(self) -> list[Slot]:
        out = []
        for spec in self.layers:
            out.append(Slot(spec.index, "conv3x3", spec.in_channels, spec.in_channels))
            if spec.searchable_slots == 2:
                out.append(Slot(spec.index, "proj1x1", spec.in_channels, spec.out_channels))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["layers"] = [LayerSpec(**spec) for spec in d["layers"]]
        return cls(**d)


def _scaled(channels: int, multiplier: float, divisor: int = 8) -> int:
    return max(divisor, int(round(channels * multiplier / divisor)) * divisor)


def mobilenet_config(module_kind: str = "M1", width_multiplier: float = 1.0,
                     input_size=(224, 224), in_channels: int = 3, num_classes: int = 1000,
                     stem_stride: int = 2) -> NetworkConfig:
    """The 13-block family, channel counts scaled by ``width_multiplier``."""
    stem = _scaled(MOBILENET_STEM, width_multiplier)
    layers, prev = [], stem
    for i, (out, stride) in enumerate(MOBILENET_BLOCKS):
        out = _scaled(out, width_multiplier)
        layers.append(LayerSpec(i, prev, out, stride, module_kind))
        prev = out
    return NetworkConfig(layers, in_channels, tuple(input_size), stem, stem_stride,
                         num_classes, width_multiplier)


def imagenet_config(module_kind: str = "M1") -> NetworkConfig:
    return mobilenet_config(module_kind)


def desk_config(module_kind: str = "M1", width_multiplier: float = 0.25,
                input_size=(28, 28), in_channels: int = 1, num_classes: int = 10,
                stem_stride: int = 2) -> NetworkConfig:
    return mobilenet_config(module_kind, width_multiplier, input_size, in_channels,
                            num_classes, stem_stride)


# --- search space -----------------------------------------------------------------------


def candidate_groups(slot) -> list[int]:
    """Group counts dividing both the input and output channels, ascending."""
    cin, cout = slot.in_channels, slot.out_channels
    common = math.gcd(cin, cout)
    return [g for g in range(1, common + 1) if common % g == 0]


def slot_choices(config: NetworkConfig) -> list[list[int]]:
    return [candidate_groups(slot) for slot in config.slots()]


def validate_groups(config: NetworkConfig, groups) -> tuple[int, ...]:
    groups = tuple(int(g) for g in groups)
    slots = config.slots()
    if len(groups) != len(slots):
        raise ConfigurationError(
            f"group vector has {len(groups)} entries, network has {len(slots)} searchable slots"
        )
    for slot, g in zip(slots, groups):
        if g < 1 or slot.in_channels % g or slot.out_channels % g:
            raise ConfigurationError(
                f"layer {slot.layer} ({slot.role}): groups={g} must divide "
                f"{slot.in_channels} and {slot.out_channels}"
            )
    return groups


def uniform_groups(config: NetworkConfig, g: int | str) -> tuple[int, ...]:
    """Same group count everywhere; ``"max"`` picks each slot's largest candidate."""
    if g == "max":
        return tuple(c[-1] for c in slot_choices(config))
    return validate_groups(config, [g] * len(config.slots()))


# --- FLOP accounting ----------------------------------------------------------------------


@dataclass(frozen=True)
class FlopEntry:
    name: str
    binary: bool
    macs: int

    @property
    def flops(self) -> float:
        return self.macs / BINARY_FLOP_DIVISOR if self.binary else float(self.macs)


def _conv_macs(h, w, cin, cout, k, groups):
    return h * w * cout * (cin // groups) * k * k


def _down(size, stride):
    return (size - 1) // stride + 1


def flop_breakdown(config: NetworkConfig, groups) -> list[FlopEntry]:
    """Multiply-accumulates of every conv/linear layer; binary ones cost 1/64."""
    groups = validate_groups(config, groups)
    per_slot = dict(zip(((s.layer, s.role) for s in config.slots()), groups))
    h, w = config.input_size
    h, w = _down(h, config.stem_stride), _down(w, config.stem_stride)
    rows = [FlopEntry("stem", False,
                      _conv_macs(h, w, config.in_channels, config.stem_channels, 3, 1))]
    for spec in config.layers:
        i, cin, cout = spec.index, spec.in_channels, spec.out_channels
        h, w = _down(h, spec.stride), _down(w, spec.stride)
        rows.append(FlopEntry(f"blocks.{i}.conv3", True,
                              _conv_macs(h, w, cin, cin, 3, per_slot[(i, "conv3x3")])))
        if spec.module_kind == "M3":
            half = cout // 2
            rows.append(FlopEntry(f"blocks.{i}.conv1a", True, _conv_macs(h, w, cin, half, 1, 1)))
            rows.append(FlopEntry(f"blocks.{i}.conv1b", True, _conv_macs(h, w, cin, half, 1, 1)))
        else:
            rows.append(FlopEntry(f"blocks.{i}.conv1", True, _conv_macs(h, w, cin, cout, 1, 1)))
        if spec.has_projection:
            g = per_slot.get((i, "proj1x1"), 1)
            rows.append(FlopEntry(f"blocks.{i}.proj", False, _conv_macs(h, w, cin, cout, 1, g)))
    last = config.layers[-1].out_channels
    rows.append(FlopEntry("fc", False, last * config.num_classes))
    return rows


def flops(config: NetworkConfig, groups) -> float:
    return sum(entry.flops for entry in flop_breakdown(config, groups))


# --- parameters -------------------------------------------------------------------------------


@dataclass
class ParameterStore:
    """Named Parameters and buffers (batch-norm running statistics).

    In shared mode every searchable slot holds one full (groups=1) master
    weight from which each group choice reads a block-diagonal crop.
    """

    params: dict[str, Parameter] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    shared: bool = False

    def add(self, name: str, value, sparse: bool = False) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        p = Parameter(np.asarray(value, dtype=DTYPE), sparse=sparse)
        self.params[name] = p
        return p

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# The shared store is a ParameterStore in shared mode.
SharedWeightStore = ParameterStore


def _kaiming(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(DTYPE)


def init_store(config: NetworkConfig, rng: np.random.Generator, groups=None,
               shared: bool = False) -> ParameterStore:
    """Fresh parameters. Shared mode ignores ``groups`` and allocates full masters."""
    if not shared:
        groups = validate_groups(config, groups if groups is not None else uniform_groups(config, 1))
        per_slot = dict(zip(((s.layer, s.role) for s in config.slots()), groups))
    store = ParameterStore(shared=shared)

    def bn(name, c):
        store.add(f"{name}.gamma", np.ones(c))
        store.add(f"{name}.beta", np.zeros(c))
        store.buffers[f"{name}.mean"] = np.zeros(c, dtype=DTYPE)
        store.buffers[f"{name}.var"] = np.ones(c, dtype=DTYPE)

    def searched(name, cout, cin, k, key):
        g = 1 if shared else per_slot[key]
        store.add(name, _kaiming(rng, (cout, cin // g, k, k), cin * k * k), sparse=shared)

    c0 = config.stem_channels
    store.add("stem.w", _kaiming(rng, (c0, config.in_channels, 3, 3), config.in_channels * 9))
    bn("stem.bn", c0)
    for spec in config.layers:
        p, cin, cout = f"blocks.{spec.index}", spec.in_channels, spec.out_channels
        bn(f"{p}.bn3", cin)
        searched(f"{p}.conv3.w", cin, cin, 3, (spec.index, "conv3x3"))
        bn(f"{p}.bn1", cin)
        if spec.module_kind == "M3":
            for part in ("conv1a", "conv1b"):
                store.add(f"{p}.{part}.w", _kaiming(rng, (cout // 2, cin, 1, 1), cin))
        else:
            store.add(f"{p}.conv1.w", _kaiming(rng, (cout, cin, 1, 1), cin))
        if spec.has_projection:
            if spec.searchable_slots == 2:
                searched(f"{p}.proj.w", cout, cin, 1, (spec.index, "proj1x1"))
            else:
                store.add(f"{p}.proj.w", _kaiming(rng, (cout, cin, 1, 1), cin))
            bn(f"{p}.proj.bn", cout)
    last = config.layers[-1].out_channels
    bn("head.bn", last)
    bound = 1.0 / math.sqrt(last)
    store.add("fc.w", rng.uniform(-bound, bound, size=(config.num_classes, last)))
    store.add("fc.b", np.zeros(config.num_classes))
    return store


def shared_weight_view(store: ParameterStore, slot: Slot, g: int) -> np.ndarray:
    """Block-diagonal crop (out, in/g, kh, kw) of a slot's master weight."""
    if g not in candidate_groups(slot):
        raise ConfigurationError(f"groups={g} is not a candidate for {slot.name}")
    master = store.params[f"{slot.name}.w"]
    if master.shape[:2] != (slot.out_channels, slot.in_channels):
        raise ConfigurationError(f"{slot.name} is not a full master weight")
    rows, cols = crop_indices(slot.out_channels, slot.in_channels, g)
    return master.value[rows, cols]


# --- executable network -----------------------------------------------------------------------


class Block:
    def __init__(self, spec: LayerSpec, bn3, conv3, bn1, convs1, proj=None, proj_bn=None):
        self.spec = spec
        self.bn3, self.sign3, self.conv3 = bn3, Sign(), conv3
        self.bn1, self.sign1, self.convs1 = bn1, Sign(), list(convs1)
        self.proj, self.proj_bn = proj, proj_bn
        self.skip3 = spec.stride == 1
        self.skip1 = spec.in_channels == spec.out_channels

    def forward(self, x, training: bool):
        a = self.sign3.forward(self.bn3.forward(x, training), training)
        u = self.conv3.forward(a, training)
        if self.skip3:
            u = u + x
        b = self.sign1.forward(self.bn1.forward(u, training), training)
        outs = [conv.forward(b, training) for conv in self.convs1]
        v = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)
        if self.skip1:
            v = v + u
        if self.proj is not None:
            v = v + self.proj_bn.forward(self.proj.forward(x, training), training)
        return v

    def backward(self, dv):
        dx = None
        if self.proj is not None:
            dx = self.proj.backward(self.proj_bn.backward(dv))
        if len(self.convs1) == 1:
            db = self.convs1[0].backward(dv)
        else:
            parts = np.split(dv, len(self.convs1), axis=1)
            db = sum(conv.backward(np.ascontiguousarray(part))
                     for conv, part in zip(self.convs1, parts))
        du = self.bn1.backward(self.sign1.backward(db))
        if self.skip1:
            du = du + dv
        da = self.conv3.backward(du)
        dx_main = self.bn3.backward(self.sign3.backward(da))
        if self.skip3:
            dx_main = dx_main + du
        return dx_main if dx is None else dx_main + dx

    def binary_convs(self):
        return [self.conv3, *self.convs1]


class Network:
    """Executable network over a ParameterStore.

    In shared (supernet) mode the group vector can be changed between steps
    with :meth:`set_groups`; all searched convs read crops of the masters.
    """

    def __init__(self, config: NetworkConfig, store: ParameterStore, groups,
                 buffers: dict | None = None):
        self.config = config
        self.store = store
        self.buffers = store.buffers if buffers is None else buffers
        self.groups = validate_groups(config, groups)
        P, B = store.params, self.buffers

        def bn(name):
            return BatchNorm(P[f"{name}.gamma"], P[f"{name}.beta"], B[f"{name}.mean"], B[f"{name}.var"])

        def weight(name, g):
            if store.shared and P[name].sparse:
                return SharedWeight(P[name])
            return FixedWeight(P[name], g)

        per_slot = dict(zip(((s.layer, s.role) for s in config.slots()), self.groups))
        self._slot_convs = []
        c0 = config.stem_channels
        self.stem = Conv(FixedWeight(P["stem.w"], 1),
                         ConvGeometry(config.in_channels, c0, 3, config.stem_stride, 1), 1, False)
        self.stem_bn = bn("stem.bn")
        self.blocks = []
        for spec in config.layers:
            p, cin, cout = f"blocks.{spec.index}", spec.in_channels, spec.out_channels
            g3 = per_slot[(spec.index, "conv3x3")]
            conv3 = Conv(weight(f"{p}.conv3.w", g3),
                         ConvGeometry(cin, cin, 3, spec.stride, 1), g3, True)
            self._slot_convs.append(conv3)
            if spec.module_kind == "M3":
                convs1 = [Conv(FixedWeight(P[f"{p}.{part}.w"], 1),
                               ConvGeometry(cin, cout // 2, 1), 1, True)
                          for part in ("conv1a", "conv1b")]
            else:
                convs1 = [Conv(FixedWeight(P[f"{p}.conv1.w"], 1), ConvGeometry(cin, cout, 1), 1, True)]
            proj = proj_bn = None
            if spec.has_projection:
                gp = per_slot.get((spec.index, "proj1x1"), 1)
                proj = Conv(weight(f"{p}.proj.w", gp),
                            ConvGeometry(cin, cout, 1, spec.stride, 0), gp, False)
                if spec.searchable_slots == 2:
                    self._slot_convs.append(proj)
                proj_bn = bn(f"{p}.proj.bn")
            self.blocks.append(Block(spec, bn(f"{p}.bn3"), conv3, bn(f"{p}.bn1"), convs1, proj, proj_bn))
        self.head_bn = bn("head.bn")
        self.pool = GlobalAvgPool()
        self.fc = Linear(P["fc.w"], P["fc.b"])
        for conv in self._slot_convs:
            shape = conv.source.weight(conv.groups).shape
            if shape != conv.geometry.weight_shape:
                raise ConfigurationError(
                    f"weight of shape {shape} cannot serve {conv.geometry}"
                )

    def set_groups(self, groups):
        groups = validate_groups(self.config, groups)
        if not self.store.shared and groups != self.groups:
            raise ConfigurationError("fixed-weight networks cannot change their groups")
        for conv, g in zip(self._slot_convs, groups):
            conv.groups = g
        self.groups = groups

    def set_xnor(self, enabled: bool = True):
        """Evaluate binary convs with the XNOR-popcount kernel in eval mode."""
        for block in self.blocks:
            for conv in block.binary_convs():
                conv.use_xnor = enabled

    def batchnorms(self) -> list[BatchNorm]:
        out = [self.stem_bn]
        for block in self.blocks:
            out += [block.bn3, block.bn1]
            if block.proj_bn is not None:
                out.append(block.proj_bn)
        out.append(self.head_bn)
        return out

    def detach_buffers(self) -> "Network":
        """Give this network private copies of the batch-norm running statistics."""
        own = {k: v.copy() for k, v in self.buffers.items()}
        return Network(self.config, self.store, self.groups, own)

    def forward(self, x, training: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        h = self.stem_bn.forward(self.stem.forward(x, training), training)
        for block in self.blocks:
            h = block.forward(h, training)
        h = self.head_bn.forward(h, training)
        return self.fc.forward(self.pool.forward(h, training), training)

    def backward(self, dlogits):
        d = self.pool.backward(self.fc.backward(np.asarray(dlogits, dtype=DTYPE)))
        d = self.head_bn.backward(d)
        for block in reversed(self.blocks):
            d = block.backward(d)
        self.stem.backward(self.stem_bn.backward(d), need_input_grad=False)

    def zero_grad(self):
        self.store.zero_grad()

    def parameters(self) -> dict[str, Parameter]:
        return self.store.params


def build_block(spec: LayerSpec, groups, rng: np.random.Generator | None = None) -> Block:
    """A stand-alone block with fresh parameters; ``groups`` has one entry per slot."""
    rng = rng or np.random.default_rng(0)
    config = NetworkConfig([spec], in_channels=spec.in_channels, input_size=(8, 8),
                           stem_channels=spec.in_channels, stem_stride=1, num_classes=2)
    net = build_network(config, groups, rng=rng)
    return net.blocks[0]


def build_network(config: NetworkConfig, groups, store: ParameterStore | None = None,
                  rng: np.random.Generator | None = None) -> Network:
    """Network for ``groups``; views into ``store`` if given, else fresh parameters."""
    groups = validate_groups(config, groups)
    if store is None:
        store = init_store(config, rng or np.random.default_rng(), groups)
    return Network(config, store, groups)
