"""VGG-style volumetric encoder: conv blocks -> penultimate h -> projected z.

Parameters are a name->tensor dict in a canonical order derived purely from
``EncoderConfig``. Checkpoints are a bit-exact binary container: the magic
line, one JSON config line, then length-prefixed named float64 tensors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc

MAGIC = b"DCKPT1\n"


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass(frozen=True)
class EncoderConfig:
    patch_side: int = 16
    channels: tuple[int, ...] = (8, 16, 32)
    convs_per_block: int = 2
    h_dim: int = 64
    z_dim: int = 32
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        n_blocks = len(self.channels)
        if n_blocks < 1:
            raise ValueError("need at least one conv block")
        if self.patch_side % (2 ** n_blocks) != 0 or self.patch_side < 2 ** n_blocks:
            raise ValueError(
                f"patch_side {self.patch_side} must be divisible by 2^{n_blocks} (one pooling per block)"
            )
        if any(b >= a for b, a in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must be strictly increasing, got {self.channels}")
        if self.h_dim < 2 or self.z_dim < 2:
            raise ValueError("h_dim and z_dim must be >= 2")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")

    @property
    def flat_dim(self) -> int:
        side = self.patch_side // (2 ** len(self.channels))
        return self.channels[-1] * side ** 3


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter name -> shape map; a pure function of the config."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for bi, c_out in enumerate(cfg.channels):
        for ci in range(cfg.convs_per_block):
            shapes[f"block{bi}.conv{ci}.w"] = (c_out, c_in, 3, 3, 3)
            shapes[f"block{bi}.conv{ci}.b"] = (c_out,)
            c_in = c_out
    shapes["head_h.w"] = (cfg.h_dim, cfg.flat_dim)
    shapes["head_h.b"] = (cfg.h_dim,)
    shapes["head_z.w"] = (cfg.z_dim, cfg.h_dim)
    shapes["head_z.b"] = (cfg.z_dim,)
    return shapes


def param_count(cfg: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init(cfg: EncoderConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases; deterministic in seed."""
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def forward(params: dict[str, np.ndarray], patch: np.ndarray, cfg: EncoderConfig):
    """Run the encoder on one (1,s,s,s) patch.

    Returns (h, z, cache): penultimate h, unit-norm projection z, and the
    activation cache consumed by :func:`backward`.
    """
    s = cfg.patch_side
    if patch.shape != (1, s, s, s):
        raise nc.ShapeError(f"patch shape {patch.shape} != (1,{s},{s},{s})")
    x = np.asarray(patch, dtype=np.float64)
    conv_inputs = []  # x fed to each conv, in order
    conv_pre = []  # conv outputs before relu
    pool_inputs = []
    for bi in range(len(cfg.channels)):
        for ci in range(cfg.convs_per_block):
            w = params[f"block{bi}.conv{ci}.w"]
            b = params[f"block{bi}.conv{ci}.b"]
            conv_inputs.append(x)
            pre = nc.conv3d_forward(x, w, b)
            conv_pre.append(pre)
            x = nc.relu_forward(pre)
        pool_inputs.append(x)
        x = nc.maxpool3d_forward(x)
    flat = x.reshape(-1)
    h_pre = nc.dense_forward(flat, params["head_h.w"], params["head_h.b"])
    h = nc.relu_forward(h_pre)
    z_pre = nc.dense_forward(h, params["head_z.w"], params["head_z.b"])
    z = nc.l2_normalize_forward(z_pre)
    cache = {
        "conv_inputs": conv_inputs,
        "conv_pre": conv_pre,
        "pool_inputs": pool_inputs,
        "pooled_shape": x.shape,
        "flat": flat,
        "h_pre": h_pre,
        "h": h,
        "z_pre": z_pre,
    }
    return h, z, cache


def backward(
    params: dict[str, np.ndarray],
    cache: dict,
    d_z: np.ndarray,
    d_h: np.ndarray | None = None,
    cfg: EncoderConfig | None = None,
) -> dict[str, np.ndarray]:
    """Exact parameter gradients; d_h is added at the penultimate junction."""
    h = cache["h"]
    grads = {}
    d_zpre = nc.l2_normalize_backward(cache["z_pre"], np.asarray(d_z, dtype=np.float64)).d_input
    gz = nc.dense_backward(h, params["head_z.w"], d_zpre)
    grads["head_z.w"], grads["head_z.b"] = gz.d_params
    d_h_total = gz.d_input if d_h is None else gz.d_input + d_h
    d_hpre = nc.relu_backward(cache["h_pre"], d_h_total).d_input
    gh = nc.dense_backward(cache["flat"], params["head_h.w"], d_hpre)
    grads["head_h.w"], grads["head_h.b"] = gh.d_params
    d_x = gh.d_input.reshape(cache["pooled_shape"])

    n_blocks = len(cache["pool_inputs"])
    convs_per_block = len(cache["conv_inputs"]) // n_blocks
    li = len(cache["conv_inputs"])  # walks conv layers from the end
    for bi in reversed(range(n_blocks)):
        d_x = nc.maxpool3d_backward(cache["pool_inputs"][bi], d_x).d_input
        for ci in reversed(range(convs_per_block)):
            li -= 1
            d_pre = nc.relu_backward(cache["conv_pre"][li], d_x).d_input
            g = nc.conv3d_backward(cache["conv_inputs"][li], params[f"block{bi}.conv{ci}.w"], d_pre)
            grads[f"block{bi}.conv{ci}.w"], grads[f"block{bi}.conv{ci}.b"] = g.d_params
            d_x = g.d_input
    return grads


# ---------------------------------------------------------------------------
# checkpoint container


def write_container(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    from .volume_io import _atomic_write

    def body(f):
        f.write(MAGIC)
        f.write(json.dumps(config, separators=(",", ":"), sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype("<f8", copy=False).tobytes())

    _atomic_write(path, body)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: magic mismatch: got {magic!r}, want {MAGIC!r}")
        line = f.readline()
        if not line.endswith(b"\n"):
            raise CheckpointError(f"{path}: truncated config line")
        try:
            config = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: bad config line: {e}") from e
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) < 4:
                raise CheckpointError(f"{path}: truncated tensor record header")
            (name_len,) = struct.unpack("<I", head)
            nb = f.read(name_len)
            if len(nb) < name_len:
                raise CheckpointError(f"{path}: truncated tensor name")
            name = nb.decode("utf-8")
            rb = f.read(4)
            if len(rb) < 4:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            (rank,) = struct.unpack("<I", rb)
            eb = f.read(8 * rank)
            if len(eb) < 8 * rank:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            shape = struct.unpack(f"<{rank}Q", eb)
            count = int(np.prod(shape)) if rank else 1
            data = f.read(8 * count)
            if len(data) < 8 * count:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    return config, tensors


def _config_from_json(obj: dict) -> EncoderConfig:
    known = {f: obj[f] for f in ("patch_side", "channels", "convs_per_block", "h_dim", "z_dim", "init_seed") if f in obj}
    missing = {"patch_side", "channels", "h_dim", "z_dim"} - set(known)
    if missing:
        raise CheckpointError(f"checkpoint config missing fields {sorted(missing)}")
    known["channels"] = tuple(known["channels"])
    return EncoderConfig(**known)


def save(params: dict[str, np.ndarray], cfg: EncoderConfig, path) -> None:
    write_container(path, asdict(cfg), params)


def load(path) -> tuple[dict[str, np.ndarray], EncoderConfig]:
    config, tensors = read_container(path)
    try:
        cfg = _config_from_json(config)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: bad encoder config: {e}") from e
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name not in tensors:
            raise CheckpointError(f"{path}: config/shape disagreement: tensor {name!r} missing")
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"{path}: config/shape disagreement: tensor {name!r} has shape "
                f"{tensors[name].shape}, config implies {shape}"
            )
        params[name] = tensors[name]
    return params, cfg
