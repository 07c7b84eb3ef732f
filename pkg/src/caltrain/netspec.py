"""Network architecture descriptions and the line-oriented parser.

Grammar (one directive per line, ``#`` starts a comment):

    input <C> <H> <W>
    classes <N>
    conv <filters> <size>x<size>/<stride>
    max <size>x<size>/<stride>
    avg
    dropout <p>
    softmax
    cost

A valid network ends with exactly one softmax followed by one cost layer.
Convolutions pad with (size-1)//2 so odd kernels at stride 1 preserve H and W.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import ShapeError, SpecSyntaxError

CONV, MAXPOOL, AVGPOOL, DROPOUT, SOFTMAX, COST = (
    "conv",
    "max",
    "avg",
    "dropout",
    "softmax",
    "cost",
)

LAYER_KINDS = (CONV, MAXPOOL, AVGPOOL, DROPOUT, SOFTMAX, COST)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    size: int = 0
    stride: int = 0
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecSyntaxError(f"unknown layer kind {self.kind!r}")
        if self.kind in (CONV, MAXPOOL) and (self.size < 1 or self.stride < 1):
            raise SpecSyntaxError(f"{self.kind} requires size >= 1 and stride >= 1")
        if self.kind == CONV and self.filters < 1:
            raise SpecSyntaxError("conv requires at least one filter")
        if self.kind == DROPOUT and not 0.0 <= self.dropout_p <= 1.0:
            raise SpecSyntaxError("dropout probability must be in [0,1]")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_dims: tuple[int, int, int]  # C, H, W
    num_classes: int
    partition_index: int = 0  # layers 1..L run inside the enclave
    # inferred (C, H, W) after each layer; flattened vectors are (C, 1, 1)
    shapes: tuple[tuple[int, int, int], ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(infer_shapes(self)))
        n = len(self.layers)
        if n == 0:
            # degenerate empty network: no layers, no tail to validate
            if self.partition_index != 0:
                raise ShapeError("empty network cannot be partitioned")
            return
        if n < 2 or self.layers[-1].kind != COST or self.layers[-2].kind != SOFTMAX:
            raise ShapeError("network must end with softmax followed by cost")
        if sum(1 for l in self.layers if l.kind == SOFTMAX) != 1:
            raise ShapeError("exactly one softmax layer allowed")
        if sum(1 for l in self.layers if l.kind == COST) != 1:
            raise ShapeError("exactly one cost layer allowed")
        if not 0 <= self.partition_index <= n:
            raise ShapeError(f"partition index {self.partition_index} outside [0,{n}]")
        if self.partition_index == n - 1:
            raise ShapeError("partition may not split softmax from cost")
        out = self.shapes[-1]
        if out != (self.num_classes, 1, 1):
            raise ShapeError(
                f"network output {out} does not match {self.num_classes} classes"
            )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def shape_after(self, index: int) -> tuple[int, int, int]:
        """(C,H,W) after layer ``index`` (1-based); index 0 is the input."""
        if index == 0:
            return self.input_dims
        return self.shapes[index - 1]

    def with_partition(self, partition_index: int) -> "NetworkSpec":
        return replace(self, partition_index=partition_index)

    def conv_prefix_partition(self, num_convs: int) -> int:
        """Partition index that encloses the first ``num_convs`` conv layers."""
        seen = 0
        for i, layer in enumerate(self.layers, start=1):
            if layer.kind == CONV:
                seen += 1
                if seen == num_convs:
                    return i
        raise ShapeError(f"network has fewer than {num_convs} conv layers")


def conv_padding(size: int) -> int:
    return (size - 1) // 2


def infer_shapes(spec: NetworkSpec) -> list[tuple[int, int, int]]:
    """Propagate (C,H,W) through every layer, validating as we go."""
    shapes = []
    c, h, w = spec.input_dims
    if min(c, h, w) < 1:
        raise ShapeError(f"bad input dims {spec.input_dims}")
    flattened = False
    for i, layer in enumerate(spec.layers, start=1):
        if layer.kind == CONV:
            if flattened:
                raise ShapeError(f"layer {i}: conv after global pooling")
            p = conv_padding(layer.size)
            oh = (h + 2 * p - layer.size) // layer.stride + 1
            ow = (w + 2 * p - layer.size) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"layer {i}: conv output collapses to {oh}x{ow}")
            c, h, w = layer.filters, oh, ow
        elif layer.kind == MAXPOOL:
            if flattened:
                raise ShapeError(f"layer {i}: pooling after global pooling")
            oh = (h - layer.size) // layer.stride + 1
            ow = (w - layer.size) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeError(f"layer {i}: pool output collapses to {oh}x{ow}")
            h, w = oh, ow
        elif layer.kind == AVGPOOL:
            if flattened:
                raise ShapeError(f"layer {i}: repeated global pooling")
            h, w = 1, 1
            flattened = True
        elif layer.kind == DROPOUT:
            pass
        elif layer.kind in (SOFTMAX, COST):
            if h != 1 or w != 1:
                raise ShapeError(f"layer {i}: {layer.kind} expects a flat vector")
        shapes.append((c, h, w))
    return shapes


def parse_network_spec(text: str) -> NetworkSpec:
    """Parse an architecture description into a NetworkSpec (partition 0)."""
    input_dims = None
    num_classes = None
    layers: list[LayerSpec] = []

    def fail(lineno, msg):
        raise SpecSyntaxError(msg, line=lineno)

    def parse_geometry(lineno, token):
        # "<size>x<size>/<stride>"
        try:
            dims, stride = token.split("/")
            kw, kh = dims.lower().split("x")
            size_w, size_h, s = int(kw), int(kh), int(stride)
        except ValueError:
            fail(lineno, f"expected <size>x<size>/<stride>, got {token!r}")
        if size_w != size_h:
            fail(lineno, "only square kernels are supported")
        return size_w, s

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head, args = tokens[0].lower(), tokens[1:]
        if head == "input":
            if len(args) != 3:
                fail(lineno, "input takes C H W")
            try:
                input_dims = tuple(int(a) for a in args)
            except ValueError:
                fail(lineno, "input dims must be integers")
        elif head == "classes":
            if len(args) != 1:
                fail(lineno, "classes takes N")
            try:
                num_classes = int(args[0])
            except ValueError:
                fail(lineno, "class count must be an integer")
        elif head == "conv":
            if len(args) != 2:
                fail(lineno, "conv takes <filters> <size>x<size>/<stride>")
            try:
                filters = int(args[0])
            except ValueError:
                fail(lineno, "filter count must be an integer")
            size, stride = parse_geometry(lineno, args[1])
            try:
                layers.append(LayerSpec(CONV, filters=filters, size=size, stride=stride))
            except SpecSyntaxError as e:
                fail(lineno, str(e))
        elif head == "max":
            if len(args) != 1:
                fail(lineno, "max takes <size>x<size>/<stride>")
            size, stride = parse_geometry(lineno, args[0])
            try:
                layers.append(LayerSpec(MAXPOOL, size=size, stride=stride))
            except SpecSyntaxError as e:
                fail(lineno, str(e))
        elif head == "avg":
            if args:
                fail(lineno, "avg takes no arguments")
            layers.append(LayerSpec(AVGPOOL))
        elif head == "dropout":
            if len(args) != 1:
                fail(lineno, "dropout takes <p>")
            try:
                p = float(args[0])
            except ValueError:
                fail(lineno, "dropout probability must be a float")
            try:
                layers.append(LayerSpec(DROPOUT, dropout_p=p))
            except SpecSyntaxError as e:
                fail(lineno, str(e))
        elif head == "softmax":
            layers.append(LayerSpec(SOFTMAX))
        elif head == "cost":
            layers.append(LayerSpec(COST))
        else:
            fail(lineno, f"unknown directive {head!r}")

    if input_dims is None:
        raise SpecSyntaxError("missing 'input C H W' header")
    if num_classes is None:
        raise SpecSyntaxError("missing 'classes N' header")
    return NetworkSpec(tuple(layers), input_dims, num_classes)


# The two reference CIFAR-10 architectures used throughout the experiments.
NET10_TEXT = """\
# 10-layer CIFAR-10 network
input 3 28 28
classes 10
conv 128 3x3/1
conv 128 3x3/1
max 2x2/2
conv 64 3x3/1
max 2x2/2
conv 128 3x3/1
conv 10 1x1/1
avg
softmax
cost
"""

NET18_TEXT = """\
# 18-layer CIFAR-10 network
input 3 28 28
classes 10
conv 128 3x3/1
conv 128 3x3/1
conv 128 3x3/1
max 2x2/2
dropout 0.5
conv 256 3x3/1
conv 256 3x3/1
conv 256 3x3/1
max 2x2/2
dropout 0.5
conv 512 3x3/1
conv 512 3x3/1
conv 512 3x3/1
dropout 0.5
conv 10 1x1/1
avg
softmax
cost
"""

BUILTIN_NETWORKS = {"net10": NET10_TEXT, "net18": NET18_TEXT}


def load_network_text(name_or_path: str) -> str:
    """Resolve a builtin network name or read an architecture file."""
    if name_or_path in BUILTIN_NETWORKS:
        return BUILTIN_NETWORKS[name_or_path]
    with open(name_or_path, "r", encoding="utf-8") as fh:
        return fh.read()
