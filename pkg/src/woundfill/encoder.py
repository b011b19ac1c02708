"""Image encoder: conv backbone, projection head and identity mapping network.

Everything is plain numpy in float64 with hand-written backward passes.
Parameters live in an ordered ``dict[str, ndarray]`` so the optimizer and the
checkpoint writer can treat them uniformly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ENCP_MAGIC = b"ENCP"
ENCP_VERSION = 1
PROT_TAG = b"PROT"


class ShapeError(ValueError):
    pass


class DegenerateFeature(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 64
    channels: tuple[int, ...] = (8, 16, 32)
    feature_dim: int = 64
    proj_dim: int = 32
    mapping_hidden: tuple[int, int] = (256, 256)
    latent_dim: int = 16

    def __post_init__(self):
        if self.input_size < 8 or self.input_size % 2 ** len(self.channels):
            raise ValueError(
                f"input_size must be >= 8 and divisible by {2 ** len(self.channels)}"
            )

    @property
    def conv_out_size(self) -> int:
        size = self.input_size
        for _ in self.channels:
            size = (size + 1) // 2
        return size

    @property
    def flat_dim(self) -> int:
        return self.channels[-1] * self.conv_out_size**2


BACKBONE_PREFIXES = ("conv", "fc.")
HEAD_PREFIXES = ("proj.",)
MAPPING_PREFIXES = ("map",)


@dataclass
class EncoderParams:
    config: EncoderConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.params.items()})

    def subset(self, prefixes) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith(tuple(prefixes))}


def init_encoder(config: EncoderConfig, seed: int) -> EncoderParams:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    cin = 1
    for i, cout in enumerate(config.channels):
        p[f"conv{i}.w"] = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
        p[f"conv{i}.b"] = np.zeros(cout)
        cin = cout
    p["fc.w"] = rng.standard_normal((config.flat_dim, config.feature_dim)) * np.sqrt(
        2.0 / config.flat_dim
    )
    p["fc.b"] = np.zeros(config.feature_dim)
    p["proj.w"] = rng.standard_normal((config.feature_dim, config.proj_dim)) * np.sqrt(
        1.0 / config.feature_dim
    )
    p["proj.b"] = np.zeros(config.proj_dim)
    widths = (config.feature_dim, *config.mapping_hidden, config.latent_dim)
    for i in range(3):
        gain = 2.0 if i < 2 else 1.0
        p[f"map{i}.w"] = rng.standard_normal((widths[i], widths[i + 1])) * np.sqrt(
            gain / widths[i]
        )
        p[f"map{i}.b"] = np.zeros(widths[i + 1])
    return EncoderParams(config, p)


# --- layers -----------------------------------------------------------------


def conv2d_forward(x, w, b, stride=2):
    """3x3 convolution, zero padding 1. x: (B, C, H, W) -> (B, Cout, Ho, Wo)."""
    bsz, cin, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(bsz, ho, wo, -1).transpose(0, 3, 1, 2), (x.shape, cols, stride)


def conv2d_backward(dout, w, cache):
    xshape, cols, stride = cache
    bsz, cin, h, wd = xshape
    cout = w.shape[0]
    ho, wo = dout.shape[2], dout.shape[3]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(cout, -1)).reshape(bsz, ho, wo, cin, 3, 3)
    dxp = np.zeros((bsz, cin, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw, db


def _as_batch(images, size: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (size, size):
        raise ShapeError(f"expected images of shape ({size}, {size}), got {x.shape[-2:]}")
    return x, single


def backbone_forward(enc: EncoderParams, images):
    """Batch forward through the backbone. Returns (features (B, F), cache)."""
    cfg, p = enc.config, enc.params
    x, _ = _as_batch(images, cfg.input_size)
    h = x[:, None, :, :] - 0.5
    caches = []
    for i in range(len(cfg.channels)):
        pre, c = conv2d_forward(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
        h = np.maximum(pre, 0.0)
        caches.append((c, pre))
    flat = h.reshape(len(x), -1)
    feat = flat @ p["fc.w"] + p["fc.b"]
    return feat, (caches, flat, h.shape)


def backbone_backward(enc: EncoderParams, cache, dfeat) -> dict[str, np.ndarray]:
    p = enc.params
    caches, flat, hshape = cache
    grads = {"fc.w": flat.T @ dfeat, "fc.b": dfeat.sum(axis=0)}
    dh = (dfeat @ p["fc.w"].T).reshape(hshape)
    for i in reversed(range(len(caches))):
        c, pre = caches[i]
        dpre = dh * (pre > 0)
        dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv2d_backward(dpre, p[f"conv{i}.w"], c)
    return grads


def forward_backbone(enc: EncoderParams, image) -> np.ndarray:
    """Feature vector of one image (or a batch of images)."""
    x, single = _as_batch(image, enc.config.input_size)
    feat, _ = backbone_forward(enc, x)
    return feat[0] if single else feat


def project_unit(feature) -> np.ndarray:
    """Scale onto the unit sphere. Works row-wise on batches."""
    f = np.asarray(feature, dtype=np.float64)
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateFeature("cannot normalize a zero feature vector")
    return f / norm


def project_unit_backward(unit, norm, dunit):
    """Gradient of x / |x| given the output, the input norm and the upstream gradient."""
    return (dunit - unit * np.sum(unit * dunit, axis=-1, keepdims=True)) / norm


def head_forward(enc: EncoderParams, feat):
    """Projection head and unit normalization: backbone feature -> SwAV feature."""
    p = enc.params
    proj = feat @ p["proj.w"] + p["proj.b"]
    norm = np.linalg.norm(proj, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateFeature("projection head produced a zero vector")
    unit = proj / norm
    return unit, (feat, unit, norm)


def head_backward(enc: EncoderParams, cache, dunit):
    feat, unit, norm = cache
    dproj = project_unit_backward(unit, norm, dunit)
    grads = {"proj.w": feat.T @ dproj, "proj.b": dproj.sum(axis=0)}
    return dproj @ enc.params["proj.w"].T, grads


def mapping_forward(enc: EncoderParams, feat):
    """Three affine layers, ReLU after the first two. Returns (codes, cache)."""
    p = enc.params
    f = np.asarray(feat, dtype=np.float64)
    if f.shape[-1] != p["map0.w"].shape[0]:
        raise ShapeError(f"mapping network expects {p['map0.w'].shape[0]} inputs, got {f.shape[-1]}")
    acts = [f]
    h = f
    for i in range(3):
        h = h @ p[f"map{i}.w"] + p[f"map{i}.b"]
        if i < 2:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def mapping_backward(enc: EncoderParams, acts, dcode):
    p = enc.params
    grads = {}
    d = dcode
    for i in reversed(range(3)):
        if i < 2:
            d = d * (acts[i + 1] > 0)
        grads[f"map{i}.w"] = acts[i].T @ d
        grads[f"map{i}.b"] = d.sum(axis=0)
        d = d @ p[f"map{i}.w"].T
    return d, grads


def map_identity(enc: EncoderParams, feature) -> np.ndarray:
    f = np.asarray(feature, dtype=np.float64)
    single = f.ndim == 1
    code, _ = mapping_forward(enc, f[None] if single else f)
    return code[0] if single else code


def encode(enc: EncoderParams, images) -> np.ndarray:
    """Identity codes for a batch of images."""
    return map_identity(enc, forward_backbone(enc, images))


# --- checkpoint file --------------------------------------------------------


def _write_array(buf: list, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    buf.append(struct.pack("<I", len(raw)) + raw)
    buf.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.append(np.ascontiguousarray(arr).astype("<f8").tobytes())


def checkpoint_bytes(enc: EncoderParams, prototypes: np.ndarray | None = None) -> bytes:
    """"ENCP", version, layer count, then per layer: name, shape header, f64 data.

    An optional "PROT" section follows with K, F and the prototype matrix
    stored column by column.
    """
    buf = [ENCP_MAGIC, struct.pack("<II", ENCP_VERSION, len(enc.params))]
    for name, arr in enc.params.items():
        _write_array(buf, name, arr)
    if prototypes is not None:
        f, k = prototypes.shape
        buf.append(PROT_TAG + struct.pack("<II", k, f))
        buf.append(np.asarray(prototypes, dtype="<f8").tobytes(order="F"))
    return b"".join(buf)


def config_from_params(params: dict[str, np.ndarray]) -> EncoderConfig:
    n_conv = sum(1 for k in params if k.startswith("conv") and k.endswith(".w"))
    channels = tuple(params[f"conv{i}.w"].shape[0] for i in range(n_conv))
    flat, feature_dim = params["fc.w"].shape
    side = int(round(np.sqrt(flat / channels[-1])))
    input_size = side * 2**n_conv
    return EncoderConfig(
        input_size=input_size,
        channels=channels,
        feature_dim=feature_dim,
        proj_dim=params["proj.w"].shape[1],
        mapping_hidden=(params["map0.w"].shape[1], params["map1.w"].shape[1]),
        latent_dim=params["map2.w"].shape[1],
    )


def parse_checkpoint(data: bytes) -> tuple[EncoderParams, np.ndarray | None]:
    if data[:4] != ENCP_MAGIC:
        raise ValueError("not an encoder checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != ENCP_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        name = data[off + 4 : off + 4 + n].decode()
        off += 4 + n
        (ndim,) = struct.unpack_from("<I", data, off)
        shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
        off += 4 + 4 * ndim
        size = int(np.prod(shape))
        params[name] = np.frombuffer(data, "<f8", size, off).reshape(shape).astype(np.float64)
        off += 8 * size
    protos = None
    if off < len(data):
        if data[off : off + 4] != PROT_TAG:
            raise ValueError("unexpected trailing section in checkpoint")
        k, f = struct.unpack_from("<II", data, off + 4)
        off += 12
        protos = np.frombuffer(data, "<f8", k * f, off).reshape((f, k), order="F").astype(np.float64)
        off += 8 * k * f
    if off != len(data):
        raise ValueError("checkpoint has trailing bytes")
    return EncoderParams(config_from_params(params), params), protos


def save_checkpoint(path, enc: EncoderParams, prototypes: np.ndarray | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(enc, prototypes))


def load_checkpoint(path) -> tuple[EncoderParams, np.ndarray | None]:
    return parse_checkpoint(Path(path).read_bytes())
