"""Twin-branch joint networks built from declarative layer tables.

Both the AlexNet-style recognizer and the DarkNet19-style detector are an
ordered list of layer specs walked by one generic :class:`JointNetwork`.
Two streams flow through the list: the *main* stream (target image) and the
*secondary* stream (query image).  Ordinary conv/pool layers are applied to
both streams with the same :class:`~jnn.numerics.Parameter` objects.  An
enabled joint layer consumes ``concat(main, secondary)`` and its output
replaces the main stream; the secondary stream keeps going through the shared
stack.  After the last enabled joint layer only the main stream (the trunk)
continues.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Parameter, Tensor


class ConstructionError(ValueError):
    """Raised when a layer table cannot be turned into a network."""


@dataclass(frozen=True)
class Conv:
    name: str
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int | None = None  # None -> kernel // 2

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class Pool:
    name: str
    kernel: int
    stride: int
    target_only: bool = False


@dataclass(frozen=True)
class Joint:
    name: str
    index: int  # 1-based joint-layer number (JL1, JL2, ...)
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int | None = None

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class Linear:
    name: str
    out_features: int


LayerSpec = Conv | Pool | Joint | Linear
_KINDS = {"conv": Conv, "pool": Pool, "joint": Joint, "linear": Linear}


@dataclass(frozen=True)
class NetworkSpec:
    """Everything needed to rebuild a joint network.

    ``joint_mask[i]`` switches joint layer ``i + 1`` on or off.  ``kind`` is
    ``"recognizer"`` (single sigmoid neuron) or ``"detector"`` (raw anchor grid).
    """

    kind: str
    layers: tuple[LayerSpec, ...]
    query_size: int
    target_size: int
    joint_mask: tuple[bool, ...]
    in_channels: int = 3
    slope: float = 0.1
    anchors: int = 0

    def __post_init__(self):
        n_joint = sum(isinstance(l, Joint) for l in self.layers)
        if len(self.joint_mask) != n_joint:
            raise ConstructionError(f"joint mask has {len(self.joint_mask)} entries for {n_joint} joint layers")
        if not any(self.joint_mask):
            raise ConstructionError("joint placement mask enables no joint layer; branches would never interact")

    @property
    def enabled_joints(self) -> tuple[int, ...]:
        return tuple(i + 1 for i, on in enumerate(self.joint_mask) if on)

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            kind = next(k for k, cls in _KINDS.items() if isinstance(layer, cls))
            layers.append({"kind": kind, **asdict(layer)})
        d = asdict(self)
        d["layers"] = layers
        d["joint_mask"] = list(self.joint_mask)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = tuple(_KINDS[l["kind"]](**{k: v for k, v in l.items() if k != "kind"}) for l in d["layers"])
        return cls(**{**d, "layers": layers, "joint_mask": tuple(bool(b) for b in d["joint_mask"])})


# --------------------------------------------------------------------------
# layer tables
# --------------------------------------------------------------------------

def _ch(n: int, divisor: int) -> int:
    return max(1, n // divisor)


def alexnet_layers(divisor: int = 1, hidden: int = 4096) -> tuple[LayerSpec, ...]:
    d = divisor
    return (
        Conv("conv1", _ch(64, d), 11, 4, padding=2),
        Pool("pool1", 3, 2),
        Joint("joint1", 1, _ch(64, d), 3, 1),
        Conv("conv2", _ch(192, d), 5, 1, padding=2),
        Pool("pool2", 3, 2),
        Joint("joint2", 2, _ch(192, d), 5, 1),
        Conv("conv3", _ch(384, d), 3, 1),
        Joint("joint3", 3, _ch(384, d), 3, 1),
        Conv("conv4", _ch(256, d), 3, 1),
        Conv("conv5", _ch(256, d), 3, 1),
        Pool("pool3", 3, 2),
        Linear("fc1", _ch(hidden, d)),
        Linear("fc2", _ch(hidden, d)),
        Linear("fc3", 1),
    )


def darknet19_layers(divisor: int = 1, anchors: int = 5, first_stride: int = 2) -> tuple[LayerSpec, ...]:
    d = divisor
    c = lambda i, n, k: Conv(f"conv{i}", _ch(n, d), k)
    j = lambda i, n, k: Joint(f"joint{i}", i, _ch(n, d), k)
    return (
        Conv("conv1", _ch(32, d), 3, first_stride),
        Pool("pool1", 2, 2, target_only=True),
        c(2, 64, 3),
        j(1, 64, 3),
        c(3, 128, 3), c(4, 64, 1), c(5, 128, 3),
        Pool("pool2", 2, 2),
        j(2, 128, 3),
        c(6, 256, 3), c(7, 128, 1), c(8, 256, 3),
        Pool("pool3", 2, 2),
        j(3, 256, 3),
        c(9, 512, 3), c(10, 256, 1), c(11, 512, 3), c(12, 256, 1), c(13, 512, 3),
        j(4, 512, 1),
        c(14, 64, 1),
        Pool("pool4", 2, 2),
        c(15, 1024, 3), c(16, 512, 1), c(17, 1024, 3), c(18, 512, 1), c(19, 1024, 3),
        c(20, 1024, 3), c(21, 1024, 3),
        j(5, 1024, 3),
        c(22, 1024, 3),
        Conv("conv23", anchors * 5, 1),
    )


DEFAULT_DETECTOR_MASK = (True, True, False, True, False)

# rows of the joint-layer ablation, JL1..JL5
ABLATION_MASKS: tuple[tuple[bool, ...], ...] = tuple(
    tuple(i in row for i in range(1, 6))
    for row in [(1,), (1, 2), (1, 2, 3), (1, 2, 3, 4), (1, 2, 3, 4, 5),
                (1, 4), (2, 4), (3, 4), (1, 2, 4), (1, 3, 4)]
)


def parse_mask(text: str, n: int = 5) -> tuple[bool, ...]:
    """``"1,2,4"`` -> (True, True, False, True, False)."""
    picked = {int(tok) for tok in text.replace(" ", "").split(",") if tok}
    if not picked or min(picked) < 1 or max(picked) > n:
        raise ConstructionError(f"bad joint mask {text!r}: expected indices in 1..{n}")
    return tuple(i in picked for i in range(1, n + 1))


def format_mask(mask: Sequence[bool]) -> str:
    return ",".join(str(i + 1) for i, on in enumerate(mask) if on)


def recognizer_spec(preset: str = "paper", slope: float = 0.1) -> NetworkSpec:
    if preset == "paper":
        layers, size = alexnet_layers(1), 224
    elif preset == "desk":
        layers, size = alexnet_layers(4), 96
    else:
        raise ConstructionError(f"unknown preset {preset!r}")
    return NetworkSpec("recognizer", layers, size, size, (True, True, True), slope=slope)


def detector_spec(preset: str = "paper", mask: Sequence[bool] = DEFAULT_DETECTOR_MASK,
                  anchors: int = 5, slope: float = 0.1) -> NetworkSpec:
    if preset == "paper":
        layers = darknet19_layers(1, anchors, first_stride=2)
        query, target = 224, 448
    elif preset == "desk":
        layers = darknet19_layers(4, anchors, first_stride=1)
        query, target = 56, 112
    else:
        raise ConstructionError(f"unknown preset {preset!r}")
    return NetworkSpec("detector", layers, query, target, tuple(bool(m) for m in mask),
                       slope=slope, anchors=anchors)


# --------------------------------------------------------------------------
# shape oracle
# --------------------------------------------------------------------------

def infer_shapes(spec: NetworkSpec) -> list[tuple[str, tuple | None, tuple | None]]:
    """Symbolic shape propagation.

    Returns ``(layer name, main shape, secondary shape)`` per executed layer,
    batch dimension omitted; the secondary shape is None once the streams
    have merged.  Raises :class:`ConstructionError` naming the layer on any
    channel or spatial mismatch.
    """
    c = spec.in_channels
    main: tuple | None = (c, spec.target_size, spec.target_size)
    sec: tuple | None = (c, spec.query_size, spec.query_size)
    last = max(spec.enabled_joints)
    trace = []
    for layer in spec.layers:
        if isinstance(layer, Joint):
            if not spec.joint_mask[layer.index - 1]:
                continue
            if sec is None:
                raise ConstructionError(f"{layer.name}: no secondary stream left to join")
            if main[1:] != sec[1:]:
                raise ConstructionError(f"{layer.name}: branch spatial sizes differ {main[1:]} vs {sec[1:]}")
            if main[0] != sec[0]:
                raise ConstructionError(f"{layer.name}: branches emit {main[0]} and {sec[0]} channels")
            h = nx.conv_output_size(main[1], layer.kernel, layer.stride, layer.pad)
            w = nx.conv_output_size(main[2], layer.kernel, layer.stride, layer.pad)
            main = (layer.out_channels, h, w)
            if layer.index == last:
                sec = None
        elif isinstance(layer, Conv):
            if sec is not None and sec[0] != main[0]:
                raise ConstructionError(
                    f"{layer.name}: shared weights need equal input channels, got {main[0]} and {sec[0]}")
            main = _conv_shape(layer, main)
            if sec is not None:
                sec = _conv_shape(layer, sec)
        elif isinstance(layer, Pool):
            main = _pool_shape(layer, main)
            if sec is not None and not layer.target_only:
                sec = _pool_shape(layer, sec)
        elif isinstance(layer, Linear):
            if sec is not None:
                raise ConstructionError(f"{layer.name}: linear layers must follow the last joint layer")
            main = (layer.out_features,)
        trace.append((layer.name, main, sec))
    return trace


def _conv_shape(layer: Conv, shape: tuple) -> tuple:
    if len(shape) != 3:
        raise ConstructionError(f"{layer.name}: convolution after flatten")
    h = nx.conv_output_size(shape[1], layer.kernel, layer.stride, layer.pad)
    w = nx.conv_output_size(shape[2], layer.kernel, layer.stride, layer.pad)
    if h < 1 or w < 1:
        raise ConstructionError(f"{layer.name}: input {shape[1:]} too small for kernel {layer.kernel}")
    return (layer.out_channels, h, w)


def _pool_shape(layer: Pool, shape: tuple) -> tuple:
    if shape[1] < layer.kernel or shape[2] < layer.kernel:
        raise ConstructionError(f"{layer.name}: input {shape[1:]} smaller than pool kernel {layer.kernel}")
    return (shape[0], (shape[1] - layer.kernel) // layer.stride + 1, (shape[2] - layer.kernel) // layer.stride + 1)


# --------------------------------------------------------------------------
# runtime network
# --------------------------------------------------------------------------

class JointNetwork:
    """Executable twin-branch network for a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.shapes = infer_shapes(spec)
        rng = np.random.default_rng(seed)
        self.params: dict[str, tuple[Parameter, Parameter]] = {}
        main_c = sec_c = spec.in_channels
        last = max(spec.enabled_joints)
        merged = False
        for layer in self._active_layers():
            if isinstance(layer, (Conv, Joint)):
                cin = main_c + sec_c if isinstance(layer, Joint) else main_c
                fan_in = cin * layer.kernel * layer.kernel
                w = Parameter(nx.kaiming((layer.out_channels, cin, layer.kernel, layer.kernel), fan_in, rng, dtype),
                              name=f"{layer.name}.weight")
                b = Parameter(np.zeros(layer.out_channels, dtype=dtype), name=f"{layer.name}.bias")
                self.params[layer.name] = (w, b)
                main_c = layer.out_channels
                if isinstance(layer, Joint):
                    merged = merged or layer.index == last
                elif not merged:
                    sec_c = main_c
            elif isinstance(layer, Linear):
                fan_in = self._flat_features(layer)
                w = Parameter(nx.kaiming((layer.out_features, fan_in), fan_in, rng, dtype), name=f"{layer.name}.weight")
                b = Parameter(np.zeros(layer.out_features, dtype=dtype), name=f"{layer.name}.bias")
                self.params[layer.name] = (w, b)

    def _active_layers(self) -> list[LayerSpec]:
        return [l for l in self.spec.layers
                if not (isinstance(l, Joint) and not self.spec.joint_mask[l.index - 1])]

    def _flat_features(self, layer: Linear) -> int:
        prev = None
        for l, (name, mshape, _) in zip(self._active_layers(), self.shapes):
            if l is layer:
                return int(np.prod(prev))
            prev = mshape
        raise ConstructionError(f"{layer.name}: not in network")

    def parameters(self) -> list[Parameter]:
        """Every trainable parameter exactly once, in layer order."""
        out: list[Parameter] = []
        seen: set[int] = set()
        for w, b in self.params.values():
            for p in (w, b):
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def astype(self, dtype) -> None:
        for p in self.parameters():
            p.astype(dtype)

    @property
    def dtype(self):
        return self.parameters()[0].data.dtype

    def _check_input(self, x: Tensor, size: int, which: str) -> None:
        if x.data.ndim != 4 or x.shape[1] != self.spec.in_channels or x.shape[2:] != (size, size):
            raise DimensionError(
                f"{which} image must be (B,{self.spec.in_channels},{size},{size}), got {x.shape}")

    def forward(self, query, target, trace: list | None = None, calibrate: bool = False) -> Tensor:
        """Run both branches; returns P (B,1) for recognizers, raw grid for detectors.

        If ``trace`` is a list, ``(layer name, main shape, secondary shape)``
        is appended per executed layer (batch dimension dropped).  With
        ``calibrate`` every hidden layer's weights are rescaled in place so
        that its pre-activations on this batch are zero-mean, unit-variance
        per channel (see :meth:`calibrate`).
        """
        query, target = nx.as_tensor(query), nx.as_tensor(target)
        if query.data.ndim == 3:
            query = Tensor(query.data[None], query.requires_grad)
        if target.data.ndim == 3:
            target = Tensor(target.data[None], target.requires_grad)
        self._check_input(query, self.spec.query_size, "query")
        self._check_input(target, self.spec.target_size, "target")
        if query.shape[0] != target.shape[0]:
            raise DimensionError("query and target batch sizes differ")
        dt = self.dtype
        if query.data.dtype != dt:
            query = Tensor(query.data.astype(dt), query.requires_grad)
        if target.data.dtype != dt:
            target = Tensor(target.data.astype(dt), target.requires_grad)

        slope = self.spec.slope
        last = max(self.spec.enabled_joints)
        # a batch built around one query runs the secondary branch once and
        # broadcasts it into the joint layers
        batch = query.shape[0]
        shared = batch > 1 and not calibrate and bool(np.all(query.data == query.data[:1]))
        main, sec = target, (Tensor(query.data[:1], query.requires_grad) if shared else query)
        layers = self._active_layers()
        for n, layer in enumerate(layers):
            is_head = n == len(layers) - 1
            if isinstance(layer, Joint):
                w, b = self.params[layer.name]
                side = nx.repeat_batch(sec, batch) if shared else sec
                main = nx.conv2d(nx.concat_channels(main, side), w, b, layer.stride, layer.pad)
                if calibrate:
                    main, _ = self._standardize(layer.name, main, None)
                main = nx.leaky_relu(main, slope)
                if layer.index == last:
                    sec = None
            elif isinstance(layer, Conv):
                w, b = self.params[layer.name]
                main = nx.conv2d(main, w, b, layer.stride, layer.pad)
                if sec is not None:
                    sec = nx.conv2d(sec, w, b, layer.stride, layer.pad)
                if calibrate and not is_head:
                    main, sec = self._standardize(layer.name, main, sec)
                if not is_head:
                    main = nx.leaky_relu(main, slope)
                if sec is not None:
                    sec = nx.leaky_relu(sec, slope)
            elif isinstance(layer, Pool):
                main = nx.maxpool2d(main, layer.kernel, layer.stride)
                if sec is not None and not layer.target_only:
                    sec = nx.maxpool2d(sec, layer.kernel, layer.stride)
            elif isinstance(layer, Linear):
                if main.data.ndim != 2:
                    main = nx.flatten(main)
                w, b = self.params[layer.name]
                main = nx.linear(main, w, b)
                if calibrate and not is_head:
                    main, _ = self._standardize(layer.name, main, None)
                if not is_head:
                    main = nx.leaky_relu(main, slope)
            if trace is not None:
                trace.append((layer.name, main.shape[1:], None if sec is None else sec.shape[1:]))
        if self.spec.kind == "recognizer":
            main = nx.sigmoid(main)
        return main

    def _standardize(self, name: str, main: Tensor, sec: Tensor | None, eps: float = 1e-8):
        """Rescale layer ``name`` so ``main`` (and ``sec``, which shares its
        weights) become zero-mean, unit-variance per output channel.

        The layer is affine, so new weights ``w/s`` and bias ``(b-m)/s``
        reproduce ``(pre - m)/s`` exactly; the transformed activations are
        returned instead of recomputing the layer.
        """
        data = [main.data] if sec is None else [main.data, sec.data]
        moved = np.concatenate([np.moveaxis(d, 1, -1).reshape(-1, d.shape[1]) for d in data])
        m = moved.mean(axis=0)
        s = np.sqrt(moved.var(axis=0) + eps)
        w, b = self.params[name]
        w.data = (w.data / s.reshape((-1,) + (1,) * (w.data.ndim - 1))).astype(w.data.dtype)
        b.data = ((b.data - m) / s).astype(b.data.dtype)
        shape = [1] * main.data.ndim
        shape[1] = -1
        m, s = m.reshape(shape), s.reshape(shape)
        fix = lambda t: None if t is None else Tensor(((t.data - m) / s).astype(t.data.dtype))
        return fix(main), fix(sec)

    def calibrate(self, query, target) -> None:
        """Data-dependent initialisation from one batch of inputs.

        Deep stacks of leaky-ReLU layers without normalisation drift toward
        input-independent outputs at random init; standardising each hidden
        layer's pre-activations on real data keeps the head sensitive to
        its inputs.  The head layer keeps its random init.
        """
        self.forward(query, target, calibrate=True)

    __call__ = forward


def build_recognizer(spec: NetworkSpec | None = None, seed: int = 0, dtype=np.float64) -> JointNetwork:
    spec = spec or recognizer_spec("paper")
    if spec.kind != "recognizer":
        raise ConstructionError(f"expected a recognizer spec, got {spec.kind!r}")
    last = spec.layers[-1]
    if not isinstance(last, Linear) or last.out_features != 1:
        raise ConstructionError("recognizer head must be a single-neuron linear layer")
    return JointNetwork(spec, seed, dtype)


def build_detector(spec: NetworkSpec | None = None, seed: int = 0, dtype=np.float64) -> JointNetwork:
    spec = spec or detector_spec("paper")
    if spec.kind != "detector":
        raise ConstructionError(f"expected a detector spec, got {spec.kind!r}")
    head = spec.layers[-1]
    if not isinstance(head, Conv) or head.out_channels != spec.anchors * 5:
        raise ConstructionError(f"detector head must be a conv with {spec.anchors * 5} filters")
    return JointNetwork(spec, seed, dtype)


def forward_recognizer(model: JointNetwork, query, target) -> Tensor:
    return model.forward(query, target)


def forward_detector(model: JointNetwork, query, target) -> Tensor:
    return model.forward(query, target)


def shared_parameters(model: JointNetwork) -> list[Parameter]:
    return model.parameters()
