"""Base learners: parameterized backbones and standardized losses.

Backbones are immutable after construction and evaluated functionally: the
caller supplies the parameter collection, which is what lets adapted copies
of the weights be evaluated without touching the originals.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import ShapeError, Tensor, apply, as_tensor, constant

CHECKPOINT_MAGIC = b"MFW1"

REJECTED_BACKBONES = {"vgg16", "resnet", "resnet18", "resnet50", "resnet101", "vit"}


class BackboneError(Exception):
    pass


class LossError(Exception):
    pass


@dataclass(frozen=True)
class ConvPlan:
    """Static gather geometry of one conv block on a given input grid."""
    kernel: int
    in_chw: tuple[int, int, int]
    conv_hw: tuple[int, int]
    pooled: bool
    out_hw: tuple[int, int]
    gather_idx: np.ndarray        # (npatch, C*k*k) im2col rows, per image
    perm_idx: np.ndarray          # (ch*npatch,) reorder (patch, ch) -> (ch, patch)
    pool_idx: np.ndarray | None   # (nwin, 4) 2x2 windows, per feature map


@dataclass
class Backbone:
    kind: str
    in_dim: int
    out_dim: int
    activation: str
    param_shapes: dict[str, tuple[int, ...]]
    init_params: dict[str, np.ndarray]
    higher_order_safe: bool = True
    # conv-only geometry
    in_shape: tuple[int, int, int] | None = None
    channels: int = 0
    plans: list[ConvPlan] = field(default_factory=list)

    def param_names(self) -> list[str]:
        return list(self.param_shapes)

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: np.array(v) for k, v in self.init_params.items()}

    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes.values())

    def forward(self, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        return forward(self, x, params)


def _init_matrix(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def backbone_build(kind: str, *, widths: list[int] | None = None,
                   blocks: int = 4, channels: int = 8,
                   in_dim: int | None = None,
                   in_shape: tuple[int, int, int] | None = None,
                   out_dim: int = 1, activation: str = "tanh",
                   seed: int = 0) -> Backbone:
    """Construct an MLP or Conv-N backbone with seeded Uniform(+-1/sqrt(fan_in)) weights.

    Backbone names the registry lists but this artifact does not execute
    (VGG16 / ResNet-N / ViT) are rejected here by name.
    """
    kind_l = kind.lower().replace("-", "").replace("_", "")
    if kind_l in REJECTED_BACKBONES:
        raise BackboneError(f"unsupported backbone '{kind}': registered, not executable")
    if activation not in ("tanh", "relu"):
        raise BackboneError(f"unknown activation '{activation}'")
    rng = np.random.default_rng(seed)

    if kind_l == "mlp":
        if not widths:
            raise BackboneError("mlp backbone needs a nonempty widths list")
        if in_dim is None or in_dim <= 0 or out_dim <= 0:
            raise BackboneError("mlp backbone needs positive in_dim and out_dim")
        dims = [int(in_dim)] + [int(w) for w in widths] + [int(out_dim)]
        shapes: dict[str, tuple[int, ...]] = {}
        params: dict[str, np.ndarray] = {}
        for i in range(len(dims) - 1):
            shapes[f"layer{i}.weight"] = (dims[i], dims[i + 1])
            shapes[f"layer{i}.bias"] = (dims[i + 1],)
            params[f"layer{i}.weight"] = _init_matrix(rng, dims[i], shapes[f"layer{i}.weight"])
            params[f"layer{i}.bias"] = np.zeros(dims[i + 1])
        return Backbone("mlp", in_dim, out_dim, activation, shapes, params)

    if kind_l.startswith("conv"):
        n_blocks = blocks
        if len(kind_l) > 4 and kind_l[4:].isdigit():
            n_blocks = int(kind_l[4:])
        if n_blocks < 1:
            raise BackboneError(f"conv backbone needs >=1 block, got {n_blocks}")
        if in_shape is None:
            raise BackboneError("conv backbone needs in_shape=(C, H, W)")
        c, h, w = (int(v) for v in in_shape)
        if min(c, h, w) < 1 or out_dim <= 0 or channels < 1:
            raise BackboneError("conv backbone needs positive extents, channels, out_dim")
        plans: list[ConvPlan] = []
        shapes = {}
        params = {}
        cur_c, cur_h, cur_w = c, h, w
        for b in range(n_blocks):
            k = min(3, cur_h, cur_w)
            plan = _conv_plan(cur_c, cur_h, cur_w, k, channels)
            plans.append(plan)
            shapes[f"block{b}.kernel"] = (cur_c * k * k, channels)
            shapes[f"block{b}.bias"] = (channels,)
            params[f"block{b}.kernel"] = _init_matrix(rng, cur_c * k * k,
                                                      shapes[f"block{b}.kernel"])
            params[f"block{b}.bias"] = np.zeros(channels)
            cur_c = channels
            cur_h, cur_w = plan.out_hw
        feat = cur_c * cur_h * cur_w
        shapes["head.weight"] = (feat, out_dim)
        shapes["head.bias"] = (out_dim,)
        params["head.weight"] = _init_matrix(rng, feat, shapes["head.weight"])
        params["head.bias"] = np.zeros(out_dim)
        return Backbone(f"conv{n_blocks}", c * h * w, out_dim, activation,
                        shapes, params, in_shape=(c, h, w), channels=channels,
                        plans=plans)

    raise BackboneError(f"unknown backbone kind '{kind}'")


def _conv_plan(c: int, h: int, w: int, k: int, out_ch: int) -> ConvPlan:
    """Gather plan: valid kxk conv as im2col + matmul, then 2x2 average pooling.

    Pooling is skipped when the convolved map is smaller than 2x2, and the
    kernel degenerates below 3x3 on maps smaller than the kernel, so any
    positive grid stays usable through arbitrarily many blocks.
    """
    oh, ow = h - k + 1, w - k + 1
    npatch = oh * ow
    gather = np.empty((npatch, c * k * k), dtype=np.int64)
    pos = 0
    for i in range(oh):
        for j in range(ow):
            cols = []
            for ch in range(c):
                for di in range(k):
                    base = ch * h * w + (i + di) * w + j
                    cols.extend(range(base, base + k))
            gather[pos] = cols
            pos += 1
    # conv output rows are (patch, out_ch); the stream wants (out_ch, patch)
    perm = (np.arange(npatch)[None, :] * out_ch
            + np.arange(out_ch)[:, None]).reshape(-1)
    pooled = oh >= 2 and ow >= 2
    if pooled:
        ph, pw = oh // 2, ow // 2
        pool = np.empty((ph * pw, 4), dtype=np.int64)
        pos = 0
        for i in range(ph):
            for j in range(pw):
                r0 = (2 * i) * ow + 2 * j
                r1 = (2 * i + 1) * ow + 2 * j
                pool[pos] = [r0, r0 + 1, r1, r1 + 1]
                pos += 1
        return ConvPlan(k, (c, h, w), (oh, ow), True, (ph, pw), gather, perm, pool)
    return ConvPlan(k, (c, h, w), (oh, ow), False, (oh, ow), gather, perm, None)


def forward(b: Backbone, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
    """Pure forward pass; `params` overrides the backbone's own weights."""
    x = as_tensor(x)
    if params is None:
        params = {k: constant(v) for k, v in b.init_params.items()}
    missing = [k for k in b.param_shapes if k not in params]
    if missing:
        raise BackboneError(f"forward: missing parameters {missing}")
    if x.data.ndim != 2 or x.data.shape[1] != b.in_dim:
        raise ShapeError(
            f"forward: input shape {x.data.shape} does not match (batch, {b.in_dim})")
    if b.kind == "mlp":
        return _forward_mlp(b, x, params)
    return _forward_conv(b, x, params)


def _affine(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    out = apply("matmul", x, w)
    return apply("add", out, apply("broadcast", bias, n=out.data.shape[0]))


def _forward_mlp(b: Backbone, x: Tensor, params) -> Tensor:
    n_layers = len(b.param_shapes) // 2
    h = x
    for i in range(n_layers):
        h = _affine(h, params[f"layer{i}.weight"], params[f"layer{i}.bias"])
        if i < n_layers - 1:
            h = apply(b.activation, h)
    return h


def _forward_conv(b: Backbone, x: Tensor, params) -> Tensor:
    batch = x.data.shape[0]
    ch = b.channels
    # flat column stream in (image, channel, row, col) order
    per_image = b.in_dim
    flat = apply("reshape", x, shape=(batch * per_image, 1))
    for bi, plan in enumerate(b.plans):
        npatch = plan.gather_idx.shape[0]
        kk = plan.gather_idx.shape[1]
        idx = (plan.gather_idx[None, :, :]
               + (np.arange(batch) * per_image)[:, None, None]).reshape(-1)
        patches = apply("reshape", apply("index_rows", flat, indices=idx),
                        shape=(batch * npatch, kk))
        conv = apply(b.activation,
                     _affine(patches, params[f"block{bi}.kernel"],
                             params[f"block{bi}.bias"]))
        stream = apply("reshape", conv, shape=(batch * npatch * ch, 1))
        perm = (plan.perm_idx[None, :]
                + (np.arange(batch) * npatch * ch)[:, None]).reshape(-1)
        stream = apply("index_rows", stream, indices=perm)
        if plan.pooled:
            nwin = plan.pool_idx.shape[0]
            pidx = (plan.pool_idx[None, :, :]
                    + (np.arange(batch * ch) * npatch)[:, None, None]).reshape(-1)
            wins = apply("reshape", apply("index_rows", stream, indices=pidx),
                         shape=(batch * ch * nwin, 4))
            pooled = apply("mean", wins, axis=1)
            flat = apply("reshape", pooled, shape=(batch * ch * nwin, 1))
            per_image = ch * nwin
        else:
            flat = stream
            per_image = ch * npatch
    feats = apply("reshape", flat, shape=(batch, per_image))
    return _affine(feats, params["head.weight"], params["head.bias"])


# ---------------------------------------------------------------------------
# losses

@dataclass(frozen=True)
class LossSpec:
    kind: str                     # cross_entropy | mse | contrastive
    margin: float = 1.0           # contrastive only

    def __post_init__(self):
        if self.kind not in ("cross_entropy", "mse", "contrastive"):
            raise LossError(f"unknown loss kind '{self.kind}'")


def loss(spec: LossSpec, pred: Tensor, target) -> Tensor:
    """Scalar loss, differentiable through the autograd core."""
    pred = as_tensor(pred)
    if spec.kind == "mse":
        target = as_tensor(target)
        if pred.data.shape != target.data.shape:
            raise LossError(
                f"mse: shapes {pred.data.shape} and {target.data.shape} differ")
        return apply("mean", apply("square", apply("sub", pred, target)))
    if spec.kind == "cross_entropy":
        return cross_entropy(pred, target)
    return contrastive(pred, target, margin=spec.margin)


def _labels_array(target, n_classes: int, what: str) -> np.ndarray:
    arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    labels = np.asarray(arr, dtype=np.int64).reshape(-1)
    if not np.allclose(np.asarray(arr, dtype=np.float64).reshape(-1), labels):
        raise LossError(f"{what}: labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LossError(
            f"{what}: label out of range 0..{n_classes - 1}: {labels.min()}..{labels.max()}")
    return labels


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood over rows, stable under constant row shifts."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise LossError(f"cross_entropy: logits must be 2-d, got {logits.data.shape}")
    batch, n = logits.data.shape
    labels = _labels_array(target, n, "cross_entropy")
    if labels.size != batch:
        raise LossError(f"cross_entropy: {batch} rows but {labels.size} labels")
    row_max = logits.data.max(axis=1)
    shifted = apply("sub", logits, constant(np.repeat(row_max[:, None], n, axis=1)))
    lse = apply("log", apply("sum", apply("exp", shifted), axis=1))
    onehot = np.zeros((batch, n))
    onehot[np.arange(batch), labels] = 1.0
    picked = apply("sum", apply("mul", logits, constant(onehot)), axis=1)
    per_row = apply("sub", apply("add", lse, constant(row_max)), picked)
    return apply("mean", per_row)


def contrastive(emb: Tensor, target, margin: float = 1.0) -> Tensor:
    """Pairwise contrastive loss over a batch of embeddings.

    Same-label pairs contribute their squared distance; different-label pairs
    contribute relu(margin - distance)^2.  Mean over all unordered pairs.
    """
    emb = as_tensor(emb)
    if emb.data.ndim != 2 or emb.data.shape[0] < 2:
        raise LossError(f"contrastive: needs >=2 embeddings, got {emb.data.shape}")
    batch = emb.data.shape[0]
    arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    labels = np.asarray(arr, dtype=np.int64).reshape(-1)
    if labels.size != batch:
        raise LossError(f"contrastive: {batch} embeddings but {labels.size} labels")
    ii, jj = np.triu_indices(batch, k=1)
    same = (labels[ii] == labels[jj]).astype(np.float64)
    left = apply("index_rows", emb, indices=ii)
    right = apply("index_rows", emb, indices=jj)
    sq = apply("sum", apply("square", apply("sub", left, right)), axis=1)
    # 1e-12 keeps sqrt differentiable when a negative pair collapses to zero
    dist = apply("sqrt", apply("add", sq, constant(np.full(ii.shape, 1e-12))))
    hinge = apply("relu", apply("sub", constant(np.full(ii.shape, margin)), dist))
    per_pair = apply("add",
                     apply("mul", constant(same), sq),
                     apply("mul", constant(1.0 - same), apply("square", hinge)))
    return apply("mean", per_pair)


# ---------------------------------------------------------------------------
# checkpoint format: magic "MFW1", ordered (name, shape, f64 data) records

def save_params(path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            raw = name.encode("utf-8")
            arr = np.asarray(value, dtype=np.float64)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = np.array(data)
        return out
