"""Architecture descriptors.

A descriptor is a YAML (or JSON) document::

    name: micronet
    input: [3, 32, 32]          # channels, height, width
    layers:
      - {type: conv, in_channels: 3, out_channels: 16, kernel: 3, stride: 1, padding: 1, masked: true}
      - {type: bn}
      - {type: relu}
      - {type: maxpool, kernel: 2}
      - {type: add, source: 6}   # add the output of layer 6 to the running tensor
      - {type: gap}              # global average pool, must be last

Layer types: ``conv``, ``bn``, ``relu``, ``maxpool``, ``add``, ``gap``.
``bn``/``relu``/``maxpool`` inherit the running channel count, which they
may also state explicitly as ``in_channels``.  Pruned descriptors carry a
``keep`` list on conv layers: the input-channel indices the compact kernel
still reads.  A conv whose unused output filters were removed as well
carries ``out_keep``: the original output-channel indices it still
produces (its ``out_channels`` is then ``len(out_keep)``).  The per-domain
classifier head is implicit and reads the channels left after ``gap``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .autograd.tensor import ShapeError, conv_output_size

LAYER_TYPES = ("conv", "bn", "relu", "maxpool", "add", "gap")


class DescriptorError(ValueError):
    pass


@dataclass
class LayerSpec:
    type: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: int | None = None
    masked: bool = False
    source: int | None = None
    keep: list[int] | None = None
    out_keep: list[int] | None = None

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if self.type != "conv":
            d.pop("masked", None)
        return d

    @property
    def n_read(self) -> int:
        """Input channels the kernel actually reads."""
        return len(self.keep) if self.keep is not None else self.in_channels


@dataclass
class Architecture:
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    name: str = "net"
    shapes: list[tuple[int, int, int]] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.shapes = self.validate()

    # -- construction -----------------------------------------------------
    @classmethod
    def from_dict(cls, doc: dict) -> "Architecture":
        if not isinstance(doc, dict) or "layers" not in doc or "input" not in doc:
            raise DescriptorError("descriptor needs 'input' and 'layers' entries")
        layers = []
        for i, entry in enumerate(doc["layers"]):
            if not isinstance(entry, dict):
                raise DescriptorError(f"layer {i}: expected a mapping, got {entry!r}")
            unknown = set(entry) - set(LayerSpec.__dataclass_fields__)
            if unknown:
                raise DescriptorError(f"layer {i}: unknown fields {sorted(unknown)}")
            layers.append(LayerSpec(**entry))
        if len(doc["input"]) != 3:
            raise DescriptorError(f"input must be [channels, height, width], got {doc['input']}")
        return cls(tuple(doc["input"]), layers, name=str(doc.get("name", "net")))

    @classmethod
    def load(cls, path) -> "Architecture":
        text = Path(path).read_text()
        return cls.from_dict(yaml.safe_load(text))

    def to_dict(self) -> dict:
        return {"name": self.name, "input": list(self.input_shape),
                "layers": [layer.to_dict() for layer in self.layers]}

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def copy(self) -> "Architecture":
        return Architecture(self.input_shape, copy.deepcopy(self.layers), name=self.name)

    def __eq__(self, other) -> bool:
        return isinstance(other, Architecture) and self.to_dict() == other.to_dict()

    # -- queries ------------------------------------------------------------
    @property
    def masked_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.type == "conv" and l.masked]

    @property
    def conv_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.type == "conv"]

    @property
    def bn_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.type == "bn"]

    @property
    def switch_count(self) -> int:
        return sum(self.layers[i].n_read for i in self.masked_layers)

    @property
    def feature_dim(self) -> int:
        return self.shapes[-1][0]

    def input_of(self, index: int) -> tuple[int, int, int]:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    # -- validation -----------------------------------------------------------
    def validate(self) -> list[tuple[int, int, int]]:
        """Check channel chaining and residual shapes; return per-layer output shapes."""
        c, h, w = self.input_shape
        if min(c, h, w) < 1:
            raise DescriptorError(f"input shape must be positive, got {self.input_shape}")
        shapes: list[tuple[int, int, int]] = []
        if not self.layers:
            raise DescriptorError("descriptor has no layers")
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer.type})"
            if layer.type not in LAYER_TYPES:
                raise DescriptorError(f"{where}: unknown layer type, expected one of {LAYER_TYPES}")
            if layer.type == "conv":
                for fname in ("in_channels", "out_channels", "kernel"):
                    if getattr(layer, fname) is None:
                        raise DescriptorError(f"{where}: missing {fname}")
                if layer.in_channels != c:
                    raise DescriptorError(f"{where}: in_channels={layer.in_channels} but incoming tensor has {c}")
                layer.stride = 1 if layer.stride is None else layer.stride
                layer.padding = 0 if layer.padding is None else layer.padding
                if layer.out_channels < 1 or layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
                    raise DescriptorError(f"{where}: channel, kernel, stride and padding must be valid sizes")
                if layer.keep is not None:
                    keep = list(layer.keep)
                    if not keep:
                        raise DescriptorError(f"{where}: empty keep list")
                    if sorted(set(keep)) != keep or keep[0] < 0 or keep[-1] >= c:
                        raise DescriptorError(f"{where}: keep must be sorted unique indices in [0, {c})")
                try:
                    h = conv_output_size(h, layer.kernel, layer.stride, layer.padding)
                    w = conv_output_size(w, layer.kernel, layer.stride, layer.padding)
                except ShapeError as exc:
                    raise DescriptorError(f"{where}: {exc}") from None
                if layer.out_keep is not None:
                    ok = list(layer.out_keep)
                    if len(ok) != layer.out_channels or sorted(set(ok)) != ok or ok[0] < 0:
                        raise DescriptorError(f"{where}: out_keep must list out_channels sorted unique indices")
                c = layer.out_channels
            elif layer.type in ("bn", "relu", "maxpool", "gap"):
                if layer.in_channels is not None and layer.in_channels != c:
                    raise DescriptorError(f"{where}: in_channels={layer.in_channels} but incoming tensor has {c}")
                if layer.type == "maxpool":
                    layer.kernel = layer.kernel or 2
                    layer.stride = layer.stride or layer.kernel
                    try:
                        h = conv_output_size(h, layer.kernel, layer.stride, 0)
                        w = conv_output_size(w, layer.kernel, layer.stride, 0)
                    except ShapeError as exc:
                        raise DescriptorError(f"{where}: {exc}") from None
                elif layer.type == "gap":
                    if i != len(self.layers) - 1:
                        raise DescriptorError(f"{where}: global average pool must be the last layer")
                    h = w = 1
            elif layer.type == "add":
                if layer.source is None or not 0 <= layer.source < i:
                    raise DescriptorError(f"{where}: source must index an earlier layer, got {layer.source}")
                src = shapes[layer.source]
                if src != (c, h, w):
                    raise DescriptorError(
                        f"{where}: residual source layer {layer.source} has shape {src}, running tensor {(c, h, w)}")
            shapes.append((c, h, w))
        if self.layers[-1].type != "gap":
            raise DescriptorError(f"layer {len(self.layers) - 1}: descriptor must end with a gap layer")
        return shapes

    def producer_chain(self, index: int) -> list[int] | None:
        """Layers between the conv producing the input of ``index`` and ``index``.

        Returns ``[P, P+1, ..., index-1]`` when the input of layer ``index``
        comes from conv ``P`` through bn/relu/maxpool layers only, else None.
        """
        j = index - 1
        chain = []
        while j >= 0 and self.layers[j].type in ("bn", "relu", "maxpool"):
            chain.append(j)
            j -= 1
        if j < 0 or self.layers[j].type != "conv":
            return None
        chain.append(j)
        return chain[::-1]

    def origin_input_channels(self, index: int) -> list[int]:
        """Original channel ids of the inputs the kernel of conv ``index`` reads."""
        layer = self.layers[index]
        chain = self.producer_chain(index)
        base = list(range(layer.in_channels))
        if chain is not None and self.layers[chain[0]].out_keep is not None:
            base = list(self.layers[chain[0]].out_keep)
        slots = layer.keep if layer.keep is not None else range(layer.in_channels)
        return [base[i] for i in slots]

    def consumers(self, index: int) -> list[int]:
        """Layers reading the output of ``index``."""
        out = [index + 1] if index + 1 < len(self.layers) else []
        out += [j for j, l in enumerate(self.layers) if l.type == "add" and l.source == index]
        return out


def micronet(mask_first: bool = True) -> Architecture:
    """The desk-scale reference network (3x32x32 input, three masked convs, one residual)."""
    layers = [
        LayerSpec("conv", 3, 16, 3, 1, 1, masked=mask_first),
        LayerSpec("bn"),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=2, stride=2),
        LayerSpec("conv", 16, 32, 3, 1, 1, masked=True),
        LayerSpec("bn"),
        LayerSpec("relu"),
        LayerSpec("conv", 32, 32, 3, 1, 1, masked=True),
        LayerSpec("bn"),
        LayerSpec("add", source=6),
        LayerSpec("relu"),
        LayerSpec("gap"),
    ]
    return Architecture((3, 32, 32), layers, name="micronet")
