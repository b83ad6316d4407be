"""Convolutional encoder mapping an image to latent Gaussian parameters.

The network ends in a single dense layer whose output is split by index:

* probabilistic: ``[0, K)`` latent mean, ``[K, 2K)`` latent log-variance,
  ``[2K, 2K+2)`` global shift in pixels;
* ``direct-vertex``: ``2V`` vertex coordinates;
* ``det-pca``: ``K`` PCA weights followed by the shift.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from ._io import read_json, sha256_bytes, write_json
from .autodiff import Tensor

__all__ = [
    "MODES",
    "PROBABILISTIC",
    "DIRECT_VERTEX",
    "DET_PCA",
    "NetworkSpec",
    "Network",
    "EncoderOutput",
    "ArchitectureError",
    "NonFiniteActivationError",
    "cl9p3dl1",
    "build",
    "forward",
    "forward_baseline",
    "save_checkpoint",
    "load_checkpoint",
]

PROBABILISTIC = "probabilistic"
DIRECT_VERTEX = "direct-vertex"
DET_PCA = "det-pca"
MODES = (PROBABILISTIC, DIRECT_VERTEX, DET_PCA)

LOGVAR_MIN, LOGVAR_MAX = -20.0, 10.0
FINAL_LAYER_SCALE = 0.01


class ArchitectureError(ValueError):
    pass


class NonFiniteActivationError(FloatingPointError):
    def __init__(self, layer: int, kind: str):
        self.layer = layer
        super().__init__(f"non-finite activation after layer {layer} ({kind})")


def head_dim(mode: str, n_components: int, vertex_count: int) -> int:
    if mode == PROBABILISTIC:
        return 2 * n_components + 2
    if mode == DIRECT_VERTEX:
        return 2 * vertex_count
    if mode == DET_PCA:
        return n_components + 2
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


@dataclass(frozen=True)
class NetworkSpec:
    """Layer list plus head configuration.

    ``layers`` entries are ``["conv", out_channels, kernel]``, ``["relu"]``,
    ``["pool"]`` or ``["dense"]``; the single dense layer's width is the head
    dimension implied by ``mode``.
    """

    input_shape: tuple[int, int]
    layers: tuple[tuple, ...]
    mode: str = PROBABILISTIC
    n_components: int = 8
    vertex_count: int = 50

    @property
    def output_dim(self) -> int:
        return head_dim(self.mode, self.n_components, self.vertex_count)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["layers"] = [list(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=tuple(tuple(l) for l in d["layers"]),
            mode=d["mode"],
            n_components=int(d["n_components"]),
            vertex_count=int(d["vertex_count"]),
        )


def cl9p3dl1(
    input_shape=(60, 60),
    mode: str = PROBABILISTIC,
    n_components: int = 8,
    vertex_count: int = 50,
    widths=(16, 32, 64),
    kernel: int = 3,
) -> NetworkSpec:
    """Three blocks of three conv+ReLU and a 2x2 max-pool, then one dense layer."""
    layers = []
    for w in widths:
        for _ in range(3):
            layers += [("conv", int(w), int(kernel)), ("relu",)]
        layers.append(("pool",))
    layers.append(("dense",))
    return NetworkSpec(tuple(input_shape), tuple(layers), mode, n_components, vertex_count)


class EncoderOutput(NamedTuple):
    """Batched encoder heads; each field is a Tensor with leading batch axis."""

    latent_mean: Tensor
    latent_logvar: Tensor
    shift: Tensor

    @property
    def latent_var(self) -> np.ndarray:
        return np.exp(self.latent_logvar.data)


@dataclass
class Network:
    spec: NetworkSpec
    seed: int
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_parameters:
            raise ValueError(f"expected {self.n_parameters} parameters, got {flat.size}")
        i = 0
        for p in self.params.values():
            p.data = flat[i : i + p.size].reshape(p.shape).copy()
            i += p.size

    def copy(self) -> "Network":
        net = Network(self.spec, self.seed)
        net.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return net


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build(spec: NetworkSpec, seed: int = 0) -> Network:
    """Allocate and initialize parameters; validates spatial sizes layer by layer."""
    if spec.mode not in MODES:
        raise ValueError(f"unknown mode {spec.mode!r}; expected one of {MODES}")
    dense = [i for i, l in enumerate(spec.layers) if l[0] == "dense"]
    if dense != [len(spec.layers) - 1]:
        raise ArchitectureError("exactly one dense layer is required and it must come last")
    rng = np.random.default_rng(seed)
    net = Network(spec, int(seed))
    c, (h, w) = 1, spec.input_shape
    for i, layer in enumerate(spec.layers):
        kind = layer[0]
        if kind == "conv":
            out, k = int(layer[1]), int(layer[2])
            wt = _glorot(rng, (k, k, c, out), c * k * k, out * k * k)
            net.params[f"conv{i}.weight"] = Tensor(wt, requires_grad=True, name=f"conv{i}.weight")
            net.params[f"conv{i}.bias"] = Tensor(np.zeros(out), requires_grad=True, name=f"conv{i}.bias")
            c = out
        elif kind == "pool":
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ArchitectureError(f"layer {i} (pool) collapses the spatial size to {h}x{w}")
        elif kind == "dense":
            fan_in, out = c * h * w, spec.output_dim
            wt = FINAL_LAYER_SCALE * _glorot(rng, (fan_in, out), fan_in, out)
            net.params[f"dense{i}.weight"] = Tensor(wt, requires_grad=True, name=f"dense{i}.weight")
            net.params[f"dense{i}.bias"] = Tensor(np.zeros(out), requires_grad=True, name=f"dense{i}.bias")
        elif kind != "relu":
            raise ArchitectureError(f"layer {i}: unknown layer kind {kind!r}")
    return net


def _raw_forward(net: Network, images, check_finite: bool = True) -> Tensor:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != tuple(net.spec.input_shape):
        raise ArchitectureError(f"image shape {x.shape[1:]} does not match network input {net.spec.input_shape}")
    h = Tensor(x[..., None])
    for i, layer in enumerate(net.spec.layers):
        kind = layer[0]
        if kind == "conv":
            k = int(layer[2])
            h = ad.conv2d(h, net.params[f"conv{i}.weight"], padding=k // 2)
            h = ad.bias_add(h, net.params[f"conv{i}.bias"])
        elif kind == "relu":
            h = ad.relu(h)
        elif kind == "pool":
            h = ad.maxpool2x2(h)
        else:
            h = ad.reshape(h, (h.shape[0], -1))
            h = ad.matmul(h, net.params[f"dense{i}.weight"])
            h = ad.bias_add(h, net.params[f"dense{i}.bias"])
        if check_finite and not np.all(np.isfinite(h.data)):
            raise NonFiniteActivationError(i, kind)
    return h


def forward(net: Network, images) -> EncoderOutput:
    """Latent mean, clamped log-variance and shift for a batch of images.

    ``images`` is (N, H, W) or a single (H, W) array, already standardized.
    """
    if net.spec.mode != PROBABILISTIC:
        raise ValueError(f"forward needs a probabilistic head; network mode is {net.spec.mode!r}")
    k = net.spec.n_components
    out = _raw_forward(net, images)
    mean = ad.getitem(out, (slice(None), slice(0, k)))
    logvar = ad.clip(ad.getitem(out, (slice(None), slice(k, 2 * k))), LOGVAR_MIN, LOGVAR_MAX)
    shift = ad.getitem(out, (slice(None), slice(2 * k, 2 * k + 2)))
    return EncoderOutput(mean, logvar, shift)


def forward_baseline(net: Network, images, mode: str):
    """Baseline heads.

    Returns the (N, 2V) coordinates for ``direct-vertex``, or a
    ``(weights, shift)`` pair of Tensors for ``det-pca``.
    """
    if mode != net.spec.mode or mode == PROBABILISTIC:
        raise ValueError(f"baseline mode {mode!r} does not match network head {net.spec.mode!r}")
    out = _raw_forward(net, images)
    if mode == DIRECT_VERTEX:
        return out
    k = net.spec.n_components
    return ad.getitem(out, (slice(None), slice(0, k))), ad.getitem(out, (slice(None), slice(k, k + 2)))


# -- checkpoints --------------------------------------------------------------

MANIFEST = "manifest.json"
BLOB = "params.bin"


def _pack(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def save_checkpoint(net: Network, directory, extra: dict | None = None, blobs: dict[str, np.ndarray] | None = None) -> Path:
    """Write ``manifest.json`` and the little-endian float64 parameter blob.

    ``blobs`` stores additional named float arrays (e.g. optimizer state)
    alongside, each listed with its byte length and checksum.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = _pack(net.flat_parameters())
    (directory / BLOB).write_bytes(data)
    manifest = {
        "format": "probcontour-checkpoint/1",
        "spec": net.spec.to_dict(),
        "seed": net.seed,
        "mode": net.spec.mode,
        "n_components": net.spec.n_components,
        "vertex_count": net.spec.vertex_count,
        "head_dim": net.spec.output_dim,
        "parameters": [[name, list(p.shape)] for name, p in net.params.items()],
        "blob": {"file": BLOB, "bytes": len(data), "sha256": sha256_bytes(data)},
    }
    extra_blobs = {}
    for name, arr in (blobs or {}).items():
        raw = _pack(arr)
        fname = f"{name}.bin"
        (directory / fname).write_bytes(raw)
        extra_blobs[name] = {"file": fname, "bytes": len(raw), "sha256": sha256_bytes(raw), "count": int(np.size(arr))}
    if extra_blobs:
        manifest["extra_blobs"] = extra_blobs
    if extra:
        manifest.update(extra)
    write_json(directory / MANIFEST, manifest)
    return directory


def _read_blob(directory: Path, entry: dict) -> np.ndarray:
    raw = (directory / entry["file"]).read_bytes()
    if len(raw) != entry["bytes"]:
        raise ValueError(f"{entry['file']}: expected {entry['bytes']} bytes, found {len(raw)}")
    if sha256_bytes(raw) != entry["sha256"]:
        raise ValueError(f"{entry['file']}: checksum mismatch")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def load_checkpoint(directory) -> tuple[Network, dict]:
    """Rebuild a network from a checkpoint directory; returns (network, manifest)."""
    directory = Path(directory)
    manifest = read_json(directory / MANIFEST)
    spec = NetworkSpec.from_dict(manifest["spec"])
    net = build(spec, manifest["seed"])
    names = [n for n, _ in manifest["parameters"]]
    if names != list(net.params):
        raise ValueError("checkpoint parameter list does not match the network spec")
    net.set_flat_parameters(_read_blob(directory, manifest["blob"]))
    return net, manifest


def load_extra_blob(directory, manifest: dict, name: str) -> np.ndarray:
    return _read_blob(Path(directory), manifest["extra_blobs"][name])
