"""Layer-graph descriptions with exact weight-parameter accounting.

A :class:`ModelSpec` lists every weight-bearing layer.  ``listed`` layers
are the ones that appear in a per-layer bit-width vector; shortcut
(downsample) convolutions are unlisted and ``tie`` to the layer that reads
the same input, inheriting its width.  Only purely sequential specs can be
executed by :class:`bmpq.network.Network`; the ResNet18 spec exists for
storage accounting.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ContractError

FIXED_BITS = 16

VGG16_CONVS = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
               512, 512, 512, "M", 512, 512, 512, "M"]


@dataclass
class LayerSpec:
    name: str
    kind: str  # "conv" | "dense"
    in_features: int
    out_features: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = False
    batchnorm: bool = False
    activation: str = "pact"  # "pact" | "relu" | "none", applied to this layer's output
    pool: Optional[List] = None  # ["max" | "avg", size] after the activation
    fixed: bool = False
    tie: Optional[str] = None
    listed: bool = True

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "conv":
            return (self.out_features, self.in_features, self.kernel, self.kernel)
        return (self.out_features, self.in_features)

    @property
    def param_count(self) -> int:
        return int(np.prod(self.weight_shape))


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple  # (C, H, W)
    classes: int
    layers: List[LayerSpec]
    variant: str = ""
    sequential: bool = True
    notes: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self._check()

    def _check(self) -> None:
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ContractError("layer names must be unique")
        listed = self.listed_layers
        if listed and not (listed[0].fixed and listed[-1].fixed):
            raise ContractError("first and last listed layers must be fixed at 16 bits")
        for layer in self.layers:
            if layer.param_count <= 0:
                raise ContractError(f"layer {layer.name} has no weights")
            if layer.tie is not None and layer.tie not in names:
                raise ContractError(f"layer {layer.name} ties to unknown layer {layer.tie}")

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def listed_layers(self) -> List[LayerSpec]:
        return [l for l in self.layers if l.listed]

    @property
    def flexible_layers(self) -> List[LayerSpec]:
        return [l for l in self.layers if not self.is_fixed(l.name)]

    def leader(self, name: str) -> str:
        layer = self.layer(name)
        while layer.tie is not None:
            layer = self.layer(layer.tie)
        return layer.name

    def is_fixed(self, name: str) -> bool:
        return self.layer(self.leader(name)).fixed

    def tie_groups(self) -> Dict[str, List[str]]:
        """Leader name -> members (leader first) for groups with >1 member."""
        groups: Dict[str, List[str]] = {}
        for l in self.layers:
            groups.setdefault(self.leader(l.name), []).append(l.name)
        return {k: sorted(v, key=lambda n: n != k) for k, v in groups.items() if len(v) > 1}

    # -- serialization

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "variant": self.variant,
            "sequential": self.sequential,
            "notes": dict(self.notes),
            "layers": [asdict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            classes=d["classes"],
            layers=[LayerSpec(**l) for l in d["layers"]],
            variant=d.get("variant", ""),
            sequential=d.get("sequential", True),
            notes=d.get("notes", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


def param_counts(spec: ModelSpec) -> Dict[str, int]:
    """Weight elements per layer (biases and batchnorm excluded)."""
    return {l.name: l.param_count for l in spec.layers}


def instantiate_weights(spec: ModelSpec) -> Dict[str, np.ndarray]:
    return {l.name: np.zeros(l.weight_shape) for l in spec.layers}


def assignment_from_vector(spec: ModelSpec, bits: Sequence[int]) -> Dict[str, int]:
    """Expand a per-listed-layer width vector to every layer (ties inherit)."""
    listed = spec.listed_layers
    if len(bits) != len(listed):
        raise ContractError(f"{spec.name} lists {len(listed)} layers, vector has {len(bits)}")
    out = {l.name: int(b) for l, b in zip(listed, bits)}
    for l, b in zip(listed, bits):
        if l.fixed and b != FIXED_BITS:
            raise ContractError(f"fixed layer {l.name} must be {FIXED_BITS} bits, got {b}")
    for l in spec.layers:
        if l.name not in out:
            out[l.name] = out[spec.leader(l.name)]
    return out


def assignment_vector(spec: ModelSpec, assignment: Dict[str, int]) -> List[int]:
    return [int(assignment[l.name]) for l in spec.listed_layers]


# ---------------------------------------------------------------- builders


def build_vgg16(input_hw: int = 32, classes: int = 10, head: str = "full",
                in_channels: int = 3) -> ModelSpec:
    """VGG16: 13 conv (3x3, batchnorm) + 3 dense layers.

    ``head="full"`` uses ``512*h*w -> 4096 -> 4096 -> classes``;
    ``head="compact"`` uses ``512*h*w -> 512 -> 512 -> classes``.
    """
    if head not in ("full", "compact"):
        raise ContractError(f"unknown VGG16 head {head!r}")
    layers, c, hw = [], in_channels, input_hw
    for v in VGG16_CONVS:
        if v == "M":
            layers[-1].pool = ["max", 2]
            hw //= 2
            continue
        idx = len(layers)
        layers.append(LayerSpec(f"conv{idx + 1}", "conv", c, v, kernel=3, padding=1,
                                batchnorm=True, fixed=(idx == 0)))
        c = v
    width = 4096 if head == "full" else 512
    feat = c * hw * hw
    layers.append(LayerSpec("fc1", "dense", feat, width, bias=True))
    layers.append(LayerSpec("fc2", "dense", width, width, bias=True, activation="relu"))
    layers.append(LayerSpec("fc3", "dense", width, classes, bias=True, activation="none", fixed=True))
    return ModelSpec(f"vgg16-{input_hw}px-{classes}c", (in_channels, input_hw, input_hw), classes,
                     layers, variant=f"head={head}",
                     notes={"head": f"512x{hw}x{hw} -> {width} -> {width} -> {classes}"})


def build_resnet18(input_hw: int = 32, classes: int = 10, in_channels: int = 3) -> ModelSpec:
    """ResNet18 with a 3x3 stem (no stem pooling) and global average pooling.

    18 listed layers: stem, 16 block convs, classifier.  Each stage
    transition adds an unlisted 1x1 downsample conv tied to the block's
    first conv, which reads the same input.
    """
    layers = [LayerSpec("conv1", "conv", in_channels, 64, kernel=3, padding=1,
                        batchnorm=True, fixed=True)]
    c = 64
    for stage, width in enumerate([64, 128, 256, 512], start=1):
        for block in range(2):
            stride = 2 if (stage > 1 and block == 0) else 1
            first = f"layer{stage}.{block}.conv1"
            layers.append(LayerSpec(first, "conv", c, width, kernel=3, stride=stride,
                                    padding=1, batchnorm=True))
            layers.append(LayerSpec(f"layer{stage}.{block}.conv2", "conv", width, width,
                                    kernel=3, padding=1, batchnorm=True))
            if stride != 1 or c != width:
                layers.append(LayerSpec(f"layer{stage}.{block}.downsample", "conv", c, width,
                                        kernel=1, stride=stride, batchnorm=True,
                                        tie=first, listed=False))
            c = width
    layers[-1].activation = "relu"
    layers.append(LayerSpec("fc", "dense", 512, classes, bias=True, activation="none", fixed=True))
    return ModelSpec(f"resnet18-{input_hw}px-{classes}c", (in_channels, input_hw, input_hw),
                     classes, layers, variant="stem=3x3,pool=global-avg", sequential=False)


DESK_DEFAULTS = {
    "input_shape": [1, 28, 28],
    "classes": 10,
    "convs": [[8, True], [16, False], [16, True], [32, False], [32, True]],
    "hidden": [64],
}


def build_desk_cnn(config: Optional[dict] = None) -> ModelSpec:
    """Small sequential CNN for desk-scale runs.

    ``convs`` lists ``[out_channels, pool_after]`` for 3x3 same-padded convs
    with batchnorm; ``hidden`` lists dense widths before the classifier.
    The defaults give 5 conv + 2 dense = 7 quantizable layers for 28x28
    single-channel input.
    """
    cfg = dict(DESK_DEFAULTS)
    cfg.update(config or {})
    c, h, w = cfg["input_shape"]
    layers = []
    for out, pool in cfg["convs"]:
        layers.append(LayerSpec(f"conv{len(layers) + 1}", "conv", c, out, kernel=3, padding=1,
                                batchnorm=True, pool=["max", 2] if pool else None))
        c = out
        if pool:
            h, w = h // 2, w // 2
    feat = c * h * w
    for width in cfg["hidden"]:
        layers.append(LayerSpec(f"fc{len(layers) + 1}", "dense", feat, width, bias=True))
        feat = width
    layers.append(LayerSpec(f"fc{len(layers) + 1}", "dense", feat, cfg["classes"], bias=True,
                            activation="none"))
    if len(layers) < 3:
        raise ContractError("desk CNN needs at least one flexible layer")
    layers[0].fixed = layers[-1].fixed = True
    layers[-2].activation = "relu"
    return ModelSpec("desk-cnn", tuple(cfg["input_shape"]), cfg["classes"], layers, variant="desk")


def build_model(model_id: str, **kwargs) -> ModelSpec:
    builders = {"vgg16": build_vgg16, "resnet18": build_resnet18, "desk_cnn": build_desk_cnn}
    try:
        return builders[model_id](**kwargs)
    except KeyError:
        raise ContractError(f"unknown model id {model_id!r}; known: {sorted(builders)}") from None
