"""A small trainable 3D convolutional detector with hand-written gradients.

The network is a two-stage residual backbone with a two-level feature
pyramid and shared prediction heads:

    input 1 x D^3
      stem    conv3 s1 -> C0           (stride 1)
      down1   conv3 s2 -> C1, residual block   (stride 2 features)
      down2   conv3 s2 -> C2, residual block   (stride 4 features)
      pyramid lateral 1x1x1 convs to F channels; the stride-2 map adds a
              nearest-neighbor 2x upsample of the stride-4 map
      heads   two shared conv3 layers, then 1x1x1 classification (1 ch,
              sigmoid) and regression (4 ch) convolutions per level

    level 0 = stride 2, level 1 = stride 4; per-anchor outputs follow the
    anchor-grid linear index (level-major, z-major within a level).

Everything is plain numpy: convolution is im2col + matrix multiply, the
backward pass is written out layer by layer, and the optimizer is Adam
with a cosine learning-rate schedule.  No batch normalization (batches
are tiny); He fan-in init, classification bias initialized to the logit
of 0.01 so an untrained detector predicts background everywhere.

Training runs in float32; gradient-check builds may use float64 via the
``dtype`` argument of init_model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .anchors import AnchorGrid, LevelSpec, build_anchor_grid
from .exceptions import ConfigurationError, DataError, DivergenceError
from .rng import INIT_STREAM, make_rng

__all__ = [
    "DetectorConfig",
    "ModelState",
    "ForwardResult",
    "init_model",
    "forward",
    "backward",
    "adam_step",
    "cosine_lr",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
    "conv3d_forward",
    "conv3d_backward",
    "relu_forward",
    "relu_backward",
    "upsample2_forward",
    "upsample2_backward",
    "sigmoid_forward",
    "sigmoid_backward",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

BACKGROUND_PRIOR = 0.01  # untrained classification probability


@dataclass(frozen=True)
class DetectorConfig:
    """Shapes and seeds fixing the network; strides are (2, 4) by design."""

    input_patch: tuple[int, int, int] = (32, 32, 32)
    stage_channels: tuple[int, int, int] = (8, 12, 16)
    fpn_channels: int = 12
    levels: tuple[LevelSpec, ...] = (LevelSpec(2, 4.0), LevelSpec(4, 8.0))
    weight_init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_patch", tuple(int(d) for d in self.input_patch))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        levels = tuple(
            lv if isinstance(lv, LevelSpec) else LevelSpec(lv[0], lv[1]) for lv in self.levels
        )
        object.__setattr__(self, "levels", levels)
        if len(self.stage_channels) != 3 or any(c < 1 for c in self.stage_channels):
            raise ConfigurationError(f"need 3 positive stage channels, got {self.stage_channels}")
        if self.fpn_channels < 1:
            raise ConfigurationError(f"fpn_channels must be >= 1, got {self.fpn_channels}")
        if tuple(lv.stride for lv in levels) != (2, 4):
            raise ConfigurationError(
                "this architecture produces feature strides (2, 4); "
                f"levels declare {tuple(lv.stride for lv in levels)}"
            )
        for d in self.input_patch:
            if d < 8 or d % 4 != 0:
                raise ConfigurationError(
                    f"input_patch dims must be multiples of 4 and >= 8, got {self.input_patch}"
                )

    def anchor_grid(self) -> AnchorGrid:
        return build_anchor_grid(self.input_patch, self.levels)

    def to_json_dict(self) -> dict:
        return {
            "input_patch": list(self.input_patch),
            "stage_channels": list(self.stage_channels),
            "fpn_channels": self.fpn_channels,
            "levels": [[lv.stride, lv.base_edge] for lv in self.levels],
            "weight_init_seed": self.weight_init_seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DetectorConfig":
        kwargs = dict(d)
        if "input_patch" in kwargs:
            kwargs["input_patch"] = tuple(kwargs["input_patch"])
        if "stage_channels" in kwargs:
            kwargs["stage_channels"] = tuple(kwargs["stage_channels"])
        if "levels" in kwargs:
            kwargs["levels"] = tuple(LevelSpec(s, e) for s, e in kwargs["levels"])
        return cls(**kwargs)


def _parameter_shapes(cfg: DetectorConfig) -> list[tuple[str, tuple[int, ...]]]:
    c0, c1, c2 = cfg.stage_channels
    f = cfg.fpn_channels
    k3 = (3, 3, 3)
    k1 = (1, 1, 1)
    shapes = [
        ("stem.w", (c0, 1, *k3)),
        ("stem.b", (c0,)),
        ("down1.w", (c1, c0, *k3)),
        ("down1.b", (c1,)),
        ("res1a.w", (c1, c1, *k3)),
        ("res1a.b", (c1,)),
        ("res1b.w", (c1, c1, *k3)),
        ("res1b.b", (c1,)),
        ("down2.w", (c2, c1, *k3)),
        ("down2.b", (c2,)),
        ("res2a.w", (c2, c2, *k3)),
        ("res2a.b", (c2,)),
        ("res2b.w", (c2, c2, *k3)),
        ("res2b.b", (c2,)),
        ("lat1.w", (f, c1, *k1)),
        ("lat1.b", (f,)),
        ("lat2.w", (f, c2, *k1)),
        ("lat2.b", (f,)),
        ("head1.w", (f, f, *k3)),
        ("head1.b", (f,)),
        ("head2.w", (f, f, *k3)),
        ("head2.b", (f,)),
        ("cls.w", (1, f, *k1)),
        ("cls.b", (1,)),
        ("reg.w", (4, f, *k1)),
        ("reg.b", (4,)),
    ]
    return shapes


@dataclass
class ModelState:
    """Learnable parameters plus Adam moments and the step counter."""

    config: DetectorConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @property
    def dtype(self) -> np.dtype:
        return self.params["stem.w"].dtype


def init_model(cfg: DetectorConfig, dtype=np.float32) -> ModelState:
    """He fan-in init; classification bias set to the background prior."""
    rng = make_rng(cfg.weight_init_seed, INIT_STREAM)
    params: dict[str, np.ndarray] = {}
    for name, shape in _parameter_shapes(cfg):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            scale = math.sqrt(2.0 / fan_in)
            params[name] = (rng.standard_normal(shape) * scale).astype(dtype)
    params["cls.b"][:] = math.log(BACKGROUND_PRIOR / (1.0 - BACKGROUND_PRIOR))
    zeros = {n: np.zeros_like(p) for n, p in params.items()}
    return ModelState(
        config=cfg,
        params=params,
        adam_m=zeros,
        adam_v={n: np.zeros_like(p) for n, p in params.items()},
        step=0,
    )


def parameter_count(state: ModelState) -> int:
    return sum(p.size for p in state.params.values())


# --- primitive layers ---------------------------------------------------


def conv3d_forward(x, w, b, stride=1, pad=0):
    """im2col 3D convolution.  x: (Cin, D, H, W), w: (Cout, Cin, k, k, k)."""
    cout, cin, k, _, _ = w.shape
    if x.shape[0] != cin:
        raise ValueError(f"input has {x.shape[0]} channels, kernel expects {cin}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    out_spatial = win.shape[1:4]
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(
        cin * k * k * k, -1
    )
    out = (w.reshape(cout, -1) @ cols).reshape(cout, *out_spatial)
    out += b.reshape(-1, 1, 1, 1)
    cache = (cols, x.shape, stride, pad, out_spatial)
    return out, cache


def conv3d_backward(dout, w, cache):
    """Returns (dx, dw, db) for conv3d_forward."""
    cols, x_shape, stride, pad, out_spatial = cache
    cout, cin, k, _, _ = w.shape
    dout2 = dout.reshape(cout, -1)
    dw = (dout2 @ cols.T).reshape(w.shape)
    db = dout2.sum(axis=1)
    dcols = w.reshape(cout, -1).T @ dout2
    do, ho, wo = out_spatial
    dwin = dcols.reshape(cin, k, k, k, do, ho, wo)
    padded = tuple(x_shape[1 + i] + 2 * pad for i in range(3))
    dxp = np.zeros((cin, *padded), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                dxp[
                    :,
                    i : i + stride * do : stride,
                    j : j + stride * ho : stride,
                    l : l + stride * wo : stride,
                ] += dwin[:, i, j, l]
    if pad:
        dx = dxp[:, pad:-pad, pad:-pad, pad:-pad]
    else:
        dx = dxp
    return np.ascontiguousarray(dx), dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def upsample2_forward(x):
    """Nearest-neighbor doubling of the three spatial axes."""
    c, d, h, w = x.shape
    out = np.broadcast_to(
        x[:, :, None, :, None, :, None], (c, d, 2, h, 2, w, 2)
    ).reshape(c, 2 * d, 2 * h, 2 * w)
    return np.ascontiguousarray(out), x.shape


def upsample2_backward(dout, x_shape):
    c, d, h, w = x_shape
    return dout.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6))


def sigmoid_forward(logits):
    p = expit(logits)
    return p, p


def sigmoid_backward(dp, p):
    return dp * p * (1.0 - p)


# --- full network -------------------------------------------------------


@dataclass
class ForwardResult:
    """Per-anchor predictions plus the activation cache for backward."""

    probs: np.ndarray  # (N,) in the anchor-grid linear order
    reg: np.ndarray  # (N, 4)
    cache: dict


def _conv(state, cache, name, x, stride=1, pad=0):
    out, c = conv3d_forward(
        x, state.params[name + ".w"], state.params[name + ".b"], stride=stride, pad=pad
    )
    cache[name] = c
    return out


def _residual(state, cache, prefix, x):
    a, ca = conv3d_forward(
        x, state.params[prefix + "a.w"], state.params[prefix + "a.b"], stride=1, pad=1
    )
    a_act, ma = relu_forward(a)
    b, cb = conv3d_forward(
        a_act, state.params[prefix + "b.w"], state.params[prefix + "b.b"], stride=1, pad=1
    )
    y, my = relu_forward(b + x)
    cache[prefix] = (ca, ma, cb, my)
    return y


def _residual_backward(state, cache, grads, prefix, dy):
    ca, ma, cb, my = cache[prefix]
    dsum = relu_backward(dy, my)
    da_act, dwb, dbb = conv3d_backward(dsum, state.params[prefix + "b.w"], cb)
    _accumulate(grads, prefix + "b.w", dwb)
    _accumulate(grads, prefix + "b.b", dbb)
    da = relu_backward(da_act, ma)
    dx, dwa, dba = conv3d_backward(da, state.params[prefix + "a.w"], ca)
    _accumulate(grads, prefix + "a.w", dwa)
    _accumulate(grads, prefix + "a.b", dba)
    return dx + dsum


def _accumulate(grads, name, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


def _head_forward(state, cache, suffix, p):
    h1, c1 = conv3d_forward(p, state.params["head1.w"], state.params["head1.b"], 1, 1)
    h1a, m1 = relu_forward(h1)
    h2, c2 = conv3d_forward(h1a, state.params["head2.w"], state.params["head2.b"], 1, 1)
    h2a, m2 = relu_forward(h2)
    logits, ccls = conv3d_forward(h2a, state.params["cls.w"], state.params["cls.b"], 1, 0)
    probs, pcache = sigmoid_forward(logits)
    regmap, creg = conv3d_forward(h2a, state.params["reg.w"], state.params["reg.b"], 1, 0)
    cache["head" + suffix] = (c1, m1, c2, m2, ccls, pcache, creg)
    return probs, regmap


def _head_backward(state, cache, grads, suffix, dprobs_map, dreg_map):
    c1, m1, c2, m2, ccls, pcache, creg = cache["head" + suffix]
    dlogits = sigmoid_backward(dprobs_map, pcache)
    dh2a_cls, dwc, dbc = conv3d_backward(dlogits, state.params["cls.w"], ccls)
    _accumulate(grads, "cls.w", dwc)
    _accumulate(grads, "cls.b", dbc)
    dh2a_reg, dwr, dbr = conv3d_backward(dreg_map, state.params["reg.w"], creg)
    _accumulate(grads, "reg.w", dwr)
    _accumulate(grads, "reg.b", dbr)
    dh2 = relu_backward(dh2a_cls + dh2a_reg, m2)
    dh1a, dw2, db2 = conv3d_backward(dh2, state.params["head2.w"], c2)
    _accumulate(grads, "head2.w", dw2)
    _accumulate(grads, "head2.b", db2)
    dh1 = relu_backward(dh1a, m1)
    dp, dw1, db1 = conv3d_backward(dh1, state.params["head1.w"], c1)
    _accumulate(grads, "head1.w", dw1)
    _accumulate(grads, "head1.b", db1)
    return dp


def forward(state: ModelState, patch) -> ForwardResult:
    """Run the detector on one patch (Volume3D or bare 3D array)."""
    vox = patch.voxels if hasattr(patch, "voxels") else np.asarray(patch)
    if vox.shape != state.config.input_patch:
        raise ValueError(
            f"patch shape {vox.shape} does not match config {state.config.input_patch}"
        )
    x = vox.astype(state.dtype, copy=False)[None]
    cache: dict = {}

    s = _conv(state, cache, "stem", x, stride=1, pad=1)
    s_act, cache["stem_mask"] = relu_forward(s)
    c1 = _conv(state, cache, "down1", s_act, stride=2, pad=1)
    c1_act, cache["down1_mask"] = relu_forward(c1)
    r1 = _residual(state, cache, "res1", c1_act)
    c2 = _conv(state, cache, "down2", r1, stride=2, pad=1)
    c2_act, cache["down2_mask"] = relu_forward(c2)
    r2 = _residual(state, cache, "res2", c2_act)

    p2 = _conv(state, cache, "lat2", r2, stride=1, pad=0)
    lat1 = _conv(state, cache, "lat1", r1, stride=1, pad=0)
    up, cache["up_shape"] = upsample2_forward(p2)
    p1 = lat1 + up

    probs1, reg1 = _head_forward(state, cache, "_l0", p1)
    probs2, reg2 = _head_forward(state, cache, "_l1", p2)
    cache["level_shapes"] = (probs1.shape[1:], probs2.shape[1:])

    probs = np.concatenate([probs1.ravel(), probs2.ravel()])
    reg = np.concatenate(
        [
            reg1.transpose(1, 2, 3, 0).reshape(-1, 4),
            reg2.transpose(1, 2, 3, 0).reshape(-1, 4),
        ]
    )
    return ForwardResult(probs=probs, reg=reg, cache=cache)


def backward(state: ModelState, result: ForwardResult, dprobs, dreg) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of sum(dprobs * probs + dreg * reg)."""
    cache = result.cache
    if "level_shapes" not in cache:
        raise ValueError("forward cache missing; run forward first")
    dt = state.dtype
    shape1, shape2 = cache["level_shapes"]
    n1 = int(np.prod(shape1))
    dprobs = np.asarray(dprobs, dtype=dt)
    dreg = np.asarray(dreg, dtype=dt)

    dp1 = dprobs[:n1].reshape(1, *shape1)
    dp2 = dprobs[n1:].reshape(1, *shape2)
    dr1 = dreg[:n1].reshape(*shape1, 4).transpose(3, 0, 1, 2)
    dr2 = dreg[n1:].reshape(*shape2, 4).transpose(3, 0, 1, 2)
    dr1 = np.ascontiguousarray(dr1)
    dr2 = np.ascontiguousarray(dr2)

    grads: dict[str, np.ndarray] = {}
    dp1_map = _head_backward(state, cache, grads, "_l0", dp1, dr1)
    dp2_map = _head_backward(state, cache, grads, "_l1", dp2, dr2)

    # pyramid merge: p1 = lat1(r1) + upsample(p2); p2 = lat2(r2)
    dup = upsample2_backward(dp1_map, cache["up_shape"])
    dr1_feat, dwl1, dbl1 = conv3d_backward(dp1_map, state.params["lat1.w"], cache["lat1"])
    _accumulate(grads, "lat1.w", dwl1)
    _accumulate(grads, "lat1.b", dbl1)
    dp2_total = dp2_map + dup
    dr2_feat, dwl2, dbl2 = conv3d_backward(dp2_total, state.params["lat2.w"], cache["lat2"])
    _accumulate(grads, "lat2.w", dwl2)
    _accumulate(grads, "lat2.b", dbl2)

    dc2_act = _residual_backward(state, cache, grads, "res2", dr2_feat)
    dc2 = relu_backward(dc2_act, cache["down2_mask"])
    dr1_total, dw, db = conv3d_backward(dc2, state.params["down2.w"], cache["down2"])
    _accumulate(grads, "down2.w", dw)
    _accumulate(grads, "down2.b", db)
    dr1_total = dr1_total + dr1_feat

    dc1_act = _residual_backward(state, cache, grads, "res1", dr1_total)
    dc1 = relu_backward(dc1_act, cache["down1_mask"])
    ds_act, dw, db = conv3d_backward(dc1, state.params["down1.w"], cache["down1"])
    _accumulate(grads, "down1.w", dw)
    _accumulate(grads, "down1.b", db)
    ds = relu_backward(ds_act, cache["stem_mask"])
    _, dw, db = conv3d_backward(ds, state.params["stem.w"], cache["stem"])
    _accumulate(grads, "stem.w", dw)
    _accumulate(grads, "stem.b", db)
    return grads


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def adam_step(state: ModelState, grads: dict[str, np.ndarray], lr: float) -> ModelState:
    """One Adam update in place; raises on non-finite parameters."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=p.dtype)
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= (lr / bias1) * m / (np.sqrt(v / bias2) + ADAM_EPS)
        if not np.isfinite(p).all():
            raise DivergenceError(f"non-finite values in parameter {name} after step {t}")
    return state


# --- checkpoints --------------------------------------------------------

CHECKPOINT_FORMAT = "focalmix-checkpoint-v1"


def save_checkpoint(state: ModelState, path: str) -> None:
    """One JSON header line, then raw little-endian tensor payloads.

    Payload order: every parameter in header order, then the Adam first
    moments, then the second moments, in the same order.
    """
    names = [name for name, _ in _parameter_shapes(state.config)]
    dtype_code = "<f8" if state.dtype == np.float64 else "<f4"
    header = {
        "format": CHECKPOINT_FORMAT,
        "dtype": dtype_code,
        "step": state.step,
        "config": state.config.to_json_dict(),
        "tensors": [{"name": n, "shape": list(state.params[n].shape)} for n in names],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode())
        f.write(b"\n")
        for group in (state.params, state.adam_m, state.adam_v):
            for n in names:
                f.write(np.ascontiguousarray(group[n], dtype=dtype_code).tobytes())


def load_checkpoint(path: str) -> ModelState:
    """Inverse of save_checkpoint; validates sizes and finiteness."""
    try:
        with open(path, "rb") as f:
            header_line = f.readline()
            payload = f.read()
        header = json.loads(header_line)
    except (OSError, ValueError) as e:
        raise DataError(f"unreadable checkpoint {path}: {e}") from e
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    cfg = DetectorConfig.from_json_dict(header["config"])
    expected = [(name, shape) for name, shape in _parameter_shapes(cfg)]
    declared = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    if declared != [(n, s) for n, s in expected]:
        raise DataError(f"{path}: tensor table does not match the config architecture")
    dtype = np.dtype(header["dtype"])
    itemsize = dtype.itemsize
    sizes = [int(np.prod(s)) for _, s in expected]
    total = 3 * sum(sizes) * itemsize
    if len(payload) != total:
        raise DataError(f"{path}: expected {total} payload bytes, got {len(payload)}")

    groups: list[dict[str, np.ndarray]] = []
    offset = 0
    for _ in range(3):
        group = {}
        for (name, shape), size in zip(expected, sizes):
            arr = np.frombuffer(payload, dtype=dtype, count=size, offset=offset)
            offset += size * itemsize
            group[name] = arr.reshape(shape).copy()
        groups.append(group)
    params, adam_m, adam_v = groups
    for name, arr in params.items():
        if not np.isfinite(arr).all():
            raise DataError(f"{path}: non-finite values in {name}")
    return ModelState(
        config=cfg, params=params, adam_m=adam_m, adam_v=adam_v, step=int(header["step"])
    )
