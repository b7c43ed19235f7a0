"""Rotation-invariant patch classifier built from SE(2,N) layers.

Layer stack (default widths give a 77x77 -> 1x1 classifier)::

    lift*  -> pool -> gconv1* -> pool -> gconv2* -> pool -> gconv3* -> gconv4*
           -> orientation max -> fc1* -> fc2 + sigmoid

``*`` marks batch normalization followed by a leaky ReLU.  The fully
connected layers are applied per spatial site, so the same parameters score
a whole image densely: an output cell ``(i, j)`` is the classifier applied to
the patch centred at pixel ``(x, y) = (offset + stride*j, offset + stride*i)``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Tuple, Union

import numpy as np

from .equivariant import group_conv, lifting_conv, orientation_max_project
from .tensor import (ShapeError, Tensor, batch_norm, channel_linear, leaky_relu, max_pool2,
                     reshape, sigmoid)

MAGIC = b"SE2W"
FORMAT_VERSION = 1
INPUT_SCALE = 1.0 / 255.0

GROUP_LAYERS = ("lift", "gconv1", "gconv2", "gconv3", "gconv4")
POOLED = ("lift", "gconv1", "gconv2")
BN_LAYERS = GROUP_LAYERS + ("fc1",)


@dataclass(frozen=True)
class ModelConfig:
    orientations: int = 8
    patch_size: int = 77
    in_channels: int = 3
    kernel_size: int = 4
    widths: Tuple[int, ...] = (16, 16, 16, 16, 32)
    hidden: int = 64
    leaky: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != len(GROUP_LAYERS):
            raise ValueError(f"need {len(GROUP_LAYERS)} widths, got {self.widths}")
        if self.orientations < 1 or self.kernel_size < 1 or self.hidden < 1:
            raise ValueError(f"invalid model config {self}")
        if self.bn_eps <= 0:
            raise ValueError("bn_eps must be positive")
        if output_extent(self.patch_size, self) != 1:
            raise ValueError(
                f"patch_size {self.patch_size} does not reduce to a 1x1 output "
                f"with kernel size {self.kernel_size}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


def output_extent(size: int, config: "ModelConfig") -> int:
    """Spatial extent after the full stack for an input of ``size`` pixels."""
    k = config.kernel_size
    for name in GROUP_LAYERS:
        size = size - k + 1
        if size < 1:
            return 0
        if name in POOLED:
            size //= 2
    return size


def receptive_field(config: ModelConfig) -> Tuple[int, int]:
    """``(stride, offset)`` of the dense output grid in input pixels."""
    stride = 2 ** len(POOLED)
    return stride, (config.patch_size - 1) // 2


@dataclass
class ProbabilityMap:
    values: np.ndarray
    stride: int = 8
    offset: int = 38
    image_id: Optional[str] = None

    def centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Pixel ``(x, y)`` grids of every cell centre."""
        hm, wm = self.values.shape
        ys = self.offset + self.stride * np.arange(hm)
        xs = self.offset + self.stride * np.arange(wm)
        return np.meshgrid(xs, ys)


def map_to_image_coords(i: int, j: int, stride: int = 8, offset: int = 38) -> Tuple[int, int]:
    """Map cell ``(row i, col j)`` -> pixel ``(x, y)``."""
    return offset + stride * j, offset + stride * i


def image_to_map_index(x: float, y: float, shape: Tuple[int, int], stride: int = 8,
                       offset: int = 38) -> Tuple[int, int]:
    """Nearest map cell ``(i, j)`` to pixel ``(x, y)``, clipped to the map."""
    i = int(np.clip(np.floor((y - offset) / stride + 0.5), 0, shape[0] - 1))
    j = int(np.clip(np.floor((x - offset) / stride + 0.5), 0, shape[1] - 1))
    return i, j


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    n, k = config.orientations, config.kernel_size
    shapes: Dict[str, tuple] = {}
    c_in = config.in_channels
    for idx, (name, width) in enumerate(zip(GROUP_LAYERS, config.widths)):
        shapes[f"{name}.weight"] = (width, c_in, k, k) if idx == 0 else (width, c_in, n, k, k)
        shapes[f"{name}.bias"] = (width,)
        c_in = width
    shapes["fc1.weight"] = (config.hidden, c_in)
    shapes["fc1.bias"] = (config.hidden,)
    shapes["fc2.weight"] = (1, config.hidden)
    shapes["fc2.bias"] = (1,)
    for name in BN_LAYERS:
        width = shapes[f"{name}.bias"][0]
        for stat in ("gamma", "beta", "mean", "var"):
            shapes[f"{name}.bn.{stat}"] = (width,)
    return shapes


def is_buffer(name: str) -> bool:
    """Running statistics are state, not trainable parameters."""
    return name.endswith(".bn.mean") or name.endswith(".bn.var")


def init_model(config: ModelConfig = ModelConfig(), seed: int = 0) -> Dict[str, np.ndarray]:
    """Fan-in scaled normal weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith(".bn.gamma") or name.endswith(".bn.var"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(np.float32)
    return params


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def normalize_input(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """8-bit RGB -> [0, 1]."""
    return np.asarray(pixels, dtype=dtype) * dtype(INPUT_SCALE)


def _bn_act(h: Tensor, p, buffers, name: str, config: ModelConfig, training: bool,
            channel_axis: int) -> Tensor:
    h = batch_norm(h, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
                   buffers[f"{name}.bn.mean"], buffers[f"{name}.bn.var"],
                   training=training, momentum=config.bn_momentum, eps=config.bn_eps,
                   channel_axis=channel_axis)
    return leaky_relu(h, config.leaky)


def forward(params: dict, x, config: ModelConfig, training: bool = False,
            trace: Optional[list] = None) -> Tensor:
    """Logits for a batch of normalized images ``B x C x H x W``.

    ``params`` maps names to arrays or :class:`Tensor` objects (tensors with
    ``requires_grad`` receive gradients).  Running statistics are read from
    / written to the arrays stored under the ``*.bn.mean``/``*.bn.var`` keys.
    Returns a ``B x H_m x W_m`` logit tensor.
    """
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    buffers = {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items() if is_buffer(k)}
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ShapeError(f"expected B x {config.in_channels} x H x W input, got {x.shape}")
    if min(x.shape[-2:]) < config.patch_size:
        raise ShapeError(f"input {x.shape[-2:]} smaller than the {config.patch_size}px receptive field")

    def log(name, t):
        if trace is not None:
            trace.append((name, t.shape[1:]))

    n = config.orientations
    h = lifting_conv(x, p["lift.weight"], p["lift.bias"], n)
    h = _bn_act(h, p, buffers, "lift", config, training, channel_axis=2)
    log("lift", h)
    for name in GROUP_LAYERS:
        if name != "lift":
            h = group_conv(h, p[f"{name}.weight"], p[f"{name}.bias"])
            h = _bn_act(h, p, buffers, name, config, training, channel_axis=2)
            log(name, h)
        if name in POOLED:
            h = max_pool2(h)
            log(f"{name}.pool", h)
    h = orientation_max_project(h)
    log("maxproj", h)
    h = channel_linear(h, p["fc1.weight"], p["fc1.bias"])
    h = _bn_act(h, p, buffers, "fc1", config, training, channel_axis=1)
    log("fc1", h)
    h = channel_linear(h, p["fc2.weight"], p["fc2.bias"])
    log("fc2", h)
    return reshape(h, (h.shape[0], *h.shape[2:]))


def forward_patch(params: dict, patch: np.ndarray, config: ModelConfig = ModelConfig(),
                  training: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Probability and logit for one ``C x P x P`` patch or a ``B x C x P x P`` batch."""
    arr = patch.data if isinstance(patch, Tensor) else np.asarray(patch)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.shape[-2:] != (config.patch_size, config.patch_size):
        raise ShapeError(f"patch must be {config.patch_size}x{config.patch_size}, got {arr.shape[-2:]}")
    logit = forward(params, arr, config, training=training).data.reshape(arr.shape[0])
    prob = sigmoid(logit)
    if single:
        return prob[0], logit[0]
    return prob, logit


def forward_dense(params: dict, image: np.ndarray, config: ModelConfig = ModelConfig(),
                  image_id: Optional[str] = None) -> ProbabilityMap:
    """Dense probability map of a normalized ``C x H x W`` image (inference mode)."""
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise ShapeError(f"expected C x H x W image, got {arr.shape}")
    logits = forward(params, arr[None], config, training=False).data[0]
    stride, offset = receptive_field(config)
    return ProbabilityMap(sigmoid(logits), stride=stride, offset=offset, image_id=image_id)


def layer_shapes(config: ModelConfig = ModelConfig(), size: Optional[int] = None) -> List[tuple]:
    """Symbolic walk of the stack: ``(layer, operator shape, output shape)`` rows.

    Operator shapes follow the ``(Orientations x) Out x In x kH x kW``
    display convention; output shapes the ``(Orientations x) C (x H x W)`` one,
    with spatial axes dropped once they reach 1x1.
    """
    s = config.patch_size if size is None else size
    n, k = config.orientations, config.kernel_size
    rows = [("Input", None, (config.in_channels, s, s))]
    c_in = config.in_channels
    for idx, (name, width) in enumerate(zip(GROUP_LAYERS, config.widths)):
        s = s - k + 1
        op = (width, c_in, k, k) if idx == 0 else (n, width, c_in, k, k)
        rows.append(("Lifting Convolution" if idx == 0 else f"SE(2,{n})-Convolution", op, (n, width, s, s)))
        if name in POOLED:
            s //= 2
            rows.append(("Max Pooling", (2, 2), (n, width, s, s)))
        c_in = width
    squeeze = s == 1
    rows.append(("Maximum Projection", None, (c_in,) if squeeze else (c_in, s, s)))
    rows.append(("Fully Connected", (config.hidden, c_in), (config.hidden,) if squeeze else (config.hidden, s, s)))
    rows.append(("Fully Connected + Sigmoid", (1, config.hidden), (1,) if squeeze else (1, s, s)))
    return rows


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def _header(config: ModelConfig, extra: Optional[dict]) -> dict:
    head = {
        "config": asdict(config),
        "normalization": {"input": "uint8 RGB", "scale": INPUT_SCALE, "offset": 0.0},
        "init": "fan-in scaled normal (std sqrt(2/fan_in)), zero bias",
    }
    if extra:
        head["train"] = extra
    return head


def write_checkpoint(fh: BinaryIO, params: Dict[str, np.ndarray], config: ModelConfig,
                     header: Optional[dict] = None) -> None:
    """Serialize to the ``SE2W`` binary format.

    Layout: magic, u16 version, u32 header length + UTF-8 JSON header, then
    one record per tensor: u16 name length + UTF-8 name, u8 dtype code
    (0 = float32), u8 rank, rank x u32 dims, raw little-endian data.
    """
    head = header if header is not None and "config" in header else _header(config, header)
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
    fh.write(blob)
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BB", 0, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(fh: BinaryIO) -> Tuple[Dict[str, np.ndarray], ModelConfig, dict]:
    if fh.read(4) != MAGIC:
        raise ValueError("not an SE2W checkpoint (bad magic)")
    version, hlen = struct.unpack("<HI", fh.read(6))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(fh.read(hlen).decode("utf-8"))
    params: Dict[str, np.ndarray] = {}
    while True:
        lenbytes = fh.read(2)
        if not lenbytes:
            break
        (nlen,) = struct.unpack("<H", lenbytes)
        name = fh.read(nlen).decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", fh.read(2))
        if dtype_code != 0:
            raise ValueError(f"tensor {name!r}: unsupported dtype code {dtype_code}")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(fh.read(4 * count), dtype="<f4").astype(np.float32)
        params[name] = data.reshape(dims)
    return params, ModelConfig.from_dict(header["config"]), header


def save_checkpoint(path: Union[str, Path], params, config: ModelConfig, header: Optional[dict] = None):
    buf = io.BytesIO()
    write_checkpoint(buf, params, config, header)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Union[str, Path]):
    with open(path, "rb") as fh:
        return read_checkpoint(fh)
