"""Compact U-Net producing per-pixel class distributions, plus checkpoints.

The encoder is a plain convolutional pyramid behind a small interface;
swapping in a heavier pretrained encoder means providing a checkpoint
whose encoder parameters are loaded by name (``pretrained_encoder``).

Normalization is batch-independent (group/instance) because training mixes
labeled, weakly- and strongly-augmented streams in separate forwards;
batch statistics would couple them.

Checkpoints use a deterministic binary container (JSON header + raw array
bytes) so that load -> save -> load is a byte-for-byte identity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import Image, ProbMap

_NORM_KINDS = ("group", "instance", "none")


@dataclass(frozen=True)
class ModelSpec:
    num_classes: int
    input_channels: int = 1
    depth: int = 4
    base_channels: int = 16
    normalization: str = "group"
    pretrained_encoder: str | None = None

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.normalization not in _NORM_KINDS:
            raise ValueError(
                f"normalization must be one of {_NORM_KINDS}, got {self.normalization!r}")


def model_spec_from_dict(d: dict) -> ModelSpec:
    allowed = {f for f in ModelSpec.__dataclass_fields__}
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown model spec keys: {sorted(unknown)}")
    return ModelSpec(**d)


def check_input_size(spec: ModelSpec, hw: tuple[int, int]) -> None:
    """The spatial size must survive `depth` halvings exactly."""
    factor = 2 ** spec.depth
    h, w = hw
    if h % factor or w % factor:
        raise ValueError(
            f"input {h}x{w} not divisible by 2^depth = {factor}; "
            f"choose a compatible resize or a shallower model")


def _norm_groups(kind: str, channels: int) -> int:
    if kind == "instance":
        return channels
    for g in (4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class Model:
    """U-Net with shared parameters across all forwards (weak and strong
    branches run through the same network)."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor],
                 dtype=np.float32):
        self.spec = spec
        self.params = params
        self.dtype = dtype

    # -- parameter bookkeeping ----------------------------------------

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in arrays:
                raise ValueError(f"missing parameter {k!r} in checkpoint")
            arr = np.asarray(arrays[k], dtype=self.dtype)
            if arr.shape != t.value.shape:
                raise ValueError(
                    f"parameter {k!r} shape {arr.shape} != {t.value.shape}")
            t.value = arr.copy()

    def num_params(self) -> int:
        return sum(t.value.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward graph -------------------------------------------------

    def _norm(self, x: Tensor, name: str) -> Tensor:
        if self.spec.normalization == "none":
            return x
        gamma, beta = self.params[f"{name}.gamma"], self.params[f"{name}.beta"]
        n, c, h, w = x.shape
        groups = _norm_groups(self.spec.normalization, c)
        g = x.reshape((n, groups, (c // groups) * h * w))
        mean = g.mean(axis=2, keepdims=True)
        centered = g - mean
        var = (centered * centered).mean(axis=2, keepdims=True)
        normed = (centered / ad.sqrt(var + 1e-5)).reshape((n, c, h, w))
        return normed * gamma.reshape((1, c, 1, 1)) + beta.reshape((1, c, 1, 1))

    def _conv_norm_relu(self, x: Tensor, name: str) -> Tensor:
        h = ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])
        return ad.relu(self._norm(h, name))

    def _block(self, x: Tensor, name: str) -> Tensor:
        h = self._conv_norm_relu(x, f"{name}.conv1")
        return self._conv_norm_relu(h, f"{name}.conv2")

    def forward(self, x: Tensor) -> Tensor:
        """(N, C, H, W) pixels -> (N, L, H, W) per-pixel class distribution."""
        check_input_size(self.spec, (x.shape[2], x.shape[3]))
        skips = []
        h = x
        for i in range(self.spec.depth):
            h = self._block(h, f"enc{i}")
            skips.append(h)
            h = ad.maxpool2d(h, kernel=2, stride=2)
        h = self._block(h, "bottleneck")
        for i in reversed(range(self.spec.depth)):
            h = ad.upsample_nearest2x(h)
            h = self._conv_norm_relu(h, f"dec{i}.reduce")
            h = ad.concat([skips[i], h], axis=1)
            h = self._block(h, f"dec{i}")
        logits = ad.conv2d(h, self.params["head.w"], self.params["head.b"],
                           padding=0)
        return ad.softmax(logits, axis=1)

    # -- inference convenience ------------------------------------------

    def stack_images(self, images) -> np.ndarray:
        batch = np.stack([np.asarray(img.pixels, dtype=self.dtype)
                          for img in images])
        if batch.shape[3] != self.spec.input_channels:
            raise ValueError(
                f"images have {batch.shape[3]} channels, "
                f"model expects {self.spec.input_channels}")
        return batch.transpose(0, 3, 1, 2)

    def predict(self, images, chunk_size: int = 8) -> list[ProbMap]:
        """Run inference; deterministic (the network has no stochastic layers)."""
        images = list(images)
        out: list[ProbMap] = []
        for lo in range(0, len(images), chunk_size):
            batch = self.stack_images(images[lo:lo + chunk_size])
            with ad.no_grad():
                probs = self.forward(Tensor(batch)).value
            out.extend(ProbMap(p.transpose(1, 2, 0)) for p in probs)
        return out


def _stage_channels(spec: ModelSpec) -> list[int]:
    return [spec.base_channels * (2 ** i) for i in range(spec.depth + 1)]


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """Deterministically initialize a U-Net: same spec and seed give
    bit-identical parameters."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def add_conv(name: str, c_in: int, c_out: int, k: int = 3, normed: bool = True):
        fan_in = c_in * k * k
        w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)
        params[f"{name}.w"] = Tensor(w.astype(dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        if normed and spec.normalization != "none":
            params[f"{name}.gamma"] = Tensor(np.ones(c_out, dtype=dtype),
                                             requires_grad=True)
            params[f"{name}.beta"] = Tensor(np.zeros(c_out, dtype=dtype),
                                            requires_grad=True)

    def add_block(name: str, c_in: int, c_out: int):
        add_conv(f"{name}.conv1", c_in, c_out)
        add_conv(f"{name}.conv2", c_out, c_out)

    chans = _stage_channels(spec)
    c_prev = spec.input_channels
    for i in range(spec.depth):
        add_block(f"enc{i}", c_prev, chans[i])
        c_prev = chans[i]
    add_block("bottleneck", c_prev, chans[-1])
    c_prev = chans[-1]
    for i in reversed(range(spec.depth)):
        add_conv(f"dec{i}.reduce", c_prev, chans[i])
        add_block(f"dec{i}", 2 * chans[i], chans[i])
        c_prev = chans[i]
    add_conv("head", c_prev, spec.num_classes, k=1, normed=False)

    model = Model(spec, params, dtype=dtype)
    if spec.pretrained_encoder:
        _load_pretrained_encoder(model, spec.pretrained_encoder)
    return model


def _load_pretrained_encoder(model: Model, path: str) -> None:
    """Copy encoder-side parameters (enc*/bottleneck*) from a checkpoint."""
    ckpt = load_checkpoint(path)
    loaded = 0
    for name, tensor in model.params.items():
        if not (name.startswith("enc") or name.startswith("bottleneck")):
            continue
        src = ckpt.params.get(name)
        if src is not None and src.shape == tensor.value.shape:
            tensor.value = np.asarray(src, dtype=model.dtype).copy()
            loaded += 1
    if loaded == 0:
        raise ValueError(
            f"pretrained encoder {path!r} shares no encoder parameters "
            f"with this model spec")


# -- checkpoint container ----------------------------------------------------

_MAGIC = b"SSEGCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    model_spec: ModelSpec
    params: dict[str, np.ndarray]
    optimizer_state: dict
    counters: dict
    best: dict


def save_checkpoint(path, model_spec: ModelSpec, params: dict[str, np.ndarray],
                    optimizer_state: dict | None = None,
                    counters: dict | None = None,
                    best: dict | None = None) -> None:
    optimizer_state = optimizer_state or {}
    counters = counters or {}
    best = best or {}
    arrays: dict[str, np.ndarray] = {}
    for k, v in params.items():
        arrays[f"param/{k}"] = np.ascontiguousarray(
            v.value if isinstance(v, Tensor) else v)
    for slot in ("m", "v"):
        for k, arr in optimizer_state.get(slot, {}).items():
            arrays[f"adam_{slot}/{k}"] = np.ascontiguousarray(arr)

    index = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        index.append({"name": name, "dtype": arr.dtype.str,
                      "shape": list(arr.shape), "offset": offset,
                      "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "format": "semiseg-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_spec": asdict(model_spec),
        "optimizer_t": int(optimizer_state.get("t", 0)),
        "counters": counters,
        "best": best,
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for name in sorted(arrays):
            fh.write(arrays[name].tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + hlen].decode())
    data = raw[16 + hlen:]
    params: dict[str, np.ndarray] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        arr = np.frombuffer(
            data, dtype=np.dtype(entry["dtype"]),
            count=int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1,
            offset=entry["offset"]).reshape(entry["shape"]).copy()
        name = entry["name"]
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        elif name.startswith("adam_m/"):
            adam_m[name[len("adam_m/"):]] = arr
        elif name.startswith("adam_v/"):
            adam_v[name[len("adam_v/"):]] = arr
    optimizer_state = {"m": adam_m, "v": adam_v, "t": header.get("optimizer_t", 0)}
    return Checkpoint(
        version=header["version"],
        model_spec=ModelSpec(**header["model_spec"]),
        params=params,
        optimizer_state=optimizer_state,
        counters=header.get("counters", {}),
        best=header.get("best", {}),
    )
