"""Network blocks of the two-stage lifter / mesh regressor.

Blocks are plain functions over a parameter mapping (name -> Tensor) so the
same code runs on the tape during training and off it for inference and
finite-difference checks. ``init_*`` helpers return fresh numpy parameters.

Token layouts: joint tokens are (B, T, J, D), frame tokens (B, T, D).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .kinematics import ScanOrder
from .ssm import selective_scan

LN_EPS = 1e-5
OFFSET_SCALE = 0.1
DT_MIN, DT_MAX = 1e-2, 1e-1


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(rng, fan_in: int, fan_out: int, prefix: str, bias: bool = True) -> dict[str, np.ndarray]:
    p = {f"{prefix}.w": _uniform(rng, fan_in, (fan_in, fan_out))}
    if bias:
        p[f"{prefix}.b"] = _uniform(rng, fan_in, (fan_out,))
    return p


def linear(x, p, prefix: str) -> Tensor:
    y = ad.matmul(x, p[f"{prefix}.w"])
    b = p.get(f"{prefix}.b")
    return y if b is None else ad.add(y, b)


def layer_norm(x, gain) -> Tensor:
    D = x.shape[-1]
    mu = ad.expand(ad.reduce_mean(x, axis=-1), -1, D)
    xc = ad.sub(x, mu)
    var = ad.expand(ad.reduce_mean(ad.square(xc), axis=-1), -1, D)
    return ad.mul(ad.div(xc, ad.sqrt(ad.add(var, LN_EPS))), gain)


# ----------------------------------------------------------------------------
# dual-scan Mamba block


@dataclass
class DualScanConfig:
    dim: int
    n_state: int = 8
    conv_kernel: int = 3
    scan_order: ScanOrder | None = None
    residual: bool = True
    bidirectional: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.n_state < 1:
            raise ValueError("DualScanConfig: dim and n_state must be >= 1")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError(f"DualScanConfig: conv_kernel must be odd, got {self.conv_kernel}")


def init_scan_branch(rng, dim: int, n_state: int, conv_kernel: int, prefix: str) -> dict[str, np.ndarray]:
    p = {}
    p.update(init_linear(rng, dim, dim, f"{prefix}.in"))
    p[f"{prefix}.conv_w"] = _uniform(rng, conv_kernel, (conv_kernel, dim))
    p[f"{prefix}.conv_b"] = _uniform(rng, conv_kernel, (dim,))
    p[f"{prefix}.dt.w"] = _uniform(rng, dim, (dim, dim))
    # step-size bias starts log-uniform in [DT_MIN, DT_MAX] after softplus
    dt = np.exp(rng.uniform(np.log(DT_MIN), np.log(DT_MAX), size=dim))
    p[f"{prefix}.dt.b"] = dt + np.log(-np.expm1(-dt))
    p.update(init_linear(rng, dim, n_state, f"{prefix}.B", bias=False))
    p.update(init_linear(rng, dim, n_state, f"{prefix}.C", bias=False))
    p[f"{prefix}.A_log"] = np.log(np.tile(np.arange(1, n_state + 1, dtype=np.float64), (dim, 1)))
    p.update(init_linear(rng, dim, dim, f"{prefix}.out", bias=False))
    return p


def init_dual_scan(rng, cfg: DualScanConfig, prefix: str) -> dict[str, np.ndarray]:
    p = {f"{prefix}.ln_g": np.ones(cfg.dim)}
    p.update(init_scan_branch(rng, cfg.dim, cfg.n_state, cfg.conv_kernel, f"{prefix}.global"))
    p.update(init_scan_branch(rng, cfg.dim, cfg.n_state, cfg.conv_kernel, f"{prefix}.local"))
    p[f"{prefix}.gate_conv_w"] = _uniform(rng, cfg.conv_kernel, (cfg.conv_kernel, cfg.dim))
    return p


def _scan_once(x, p, prefix: str, segments) -> Tensor:
    u = linear(x, p, f"{prefix}.in")
    u = ad.silu(ad.add(ad.conv1d_depthwise(u, p[f"{prefix}.conv_w"], segments), p[f"{prefix}.conv_b"]))
    delta = ad.softplus(linear(u, p, f"{prefix}.dt"))
    A = ad.neg(ad.exp(p[f"{prefix}.A_log"]))
    resets = None
    if segments is not None:
        resets = np.zeros(len(segments), dtype=bool)
        resets[1:] = segments[1:] != segments[:-1]
    y = selective_scan(u, delta, A, linear(u, p, f"{prefix}.B"), linear(u, p, f"{prefix}.C"), resets)
    return linear(y, p, f"{prefix}.out")


def scan_branch(x, p, prefix: str, segments=None, bidirectional: bool = False) -> Tensor:
    """in-proj -> causal depthwise conv -> SiLU -> selective scan -> out-proj over axis 1."""
    y = _scan_once(x, p, prefix, segments)
    if bidirectional:
        L = x.shape[1]
        rev = np.arange(L - 1, -1, -1)
        seg_r = None if segments is None else np.asarray(segments)[rev]
        yr = _scan_once(ad.gather_rows(x, rev, axis=1), p, prefix, seg_r)
        y = ad.add(y, ad.gather_rows(yr, rev, axis=1))
    return y


def dual_scan_block(x, cfg: DualScanConfig, p, prefix: str) -> Tensor:
    """Global scan in token order, local scan in ``cfg.scan_order``, gated fusion.

    ``out = x + SiLU(Conv1D(O_global)) * O_local`` (residual optional). The
    local branch gathers tokens by the scan permutation, runs the same branch
    machinery with its own weights, and scatters the result back.
    """
    if x.ndim != 3:
        raise ContractError(f"dual_scan_block expects (batch, tokens, dim), got {x.shape}")
    L = x.shape[1]
    order = cfg.scan_order or ScanOrder.identity(L)
    if len(order) != L:
        raise ContractError(f"dual_scan_block: scan order covers {len(order)} tokens, input has {L}")
    xn = layer_norm(x, p[f"{prefix}.ln_g"])
    o_global = scan_branch(xn, p, f"{prefix}.global", None, cfg.bidirectional)
    xl = ad.gather_rows(xn, order.perm, axis=1)
    ol = scan_branch(xl, p, f"{prefix}.local", order.segments, cfg.bidirectional)
    o_local = ad.scatter_rows(ol, order.perm, L, axis=1)
    gate = ad.silu(ad.conv1d_depthwise(o_global, p[f"{prefix}.gate_conv_w"]))
    fused = ad.mul(gate, o_local)
    return ad.add(x, fused) if cfg.residual else fused


# ----------------------------------------------------------------------------
# stage 1: lifting


def init_encoder(rng, n_joints: int, img_dim: int, dim: int) -> dict[str, np.ndarray]:
    p = {}
    p.update(init_linear(rng, 2, dim, "enc.pose"))
    p.update(init_linear(rng, img_dim, dim, "enc.img"))
    p["enc.joint_emb"] = _uniform(rng, dim, (n_joints, dim))
    p.update(init_linear(rng, dim, dim, "enc.out"))
    return p


def encoder(p2d, f_img, p) -> Tensor:
    """Fuse 2D joints (B, T, J, 2) with frame features (B, T, D_img) into joint tokens."""
    if p2d.shape[:2] != f_img.shape[:2]:
        raise ContractError(f"encoder: frame counts differ, p2d {p2d.shape} vs f_img {f_img.shape}")
    J = p2d.shape[2]
    pose = linear(p2d, p, "enc.pose")
    img = ad.expand(linear(f_img, p, "enc.img"), 2, J)
    h = ad.add(ad.add(pose, img), p["enc.joint_emb"])
    return linear(ad.silu(h), p, "enc.out")


def spatial_mamba(f, blocks: list[DualScanConfig], p, prefix: str = "spatial") -> Tensor:
    """Dual-scan blocks over the J joints of each frame independently."""
    B, T, J, D = f.shape
    x = ad.reshape(f, (B * T, J, D))
    for i, cfg in enumerate(blocks):
        x = dual_scan_block(x, cfg, p, f"{prefix}.{i}")
    return ad.reshape(x, (B, T, J, D))


def temporal_mamba(f, blocks: list[DualScanConfig], p, prefix: str = "temporal") -> Tensor:
    """Dual-scan blocks over all T*J tokens, frame-major in the global branch."""
    B, T, J, D = f.shape
    x = ad.reshape(f, (B, T * J, D))
    for i, cfg in enumerate(blocks):
        x = dual_scan_block(x, cfg, p, f"{prefix}.{i}")
    return ad.reshape(x, (B, T, J, D))


def init_deformable(rng, dim: int, grid_channels: int, heads: int, points: int,
                    head_dim: int) -> dict[str, np.ndarray]:
    p = {}
    p.update(init_linear(rng, dim, heads * points * 2, "da.offset"))
    p.update(init_linear(rng, dim, heads * points, "da.attn"))
    p["da.value_w"] = _uniform(rng, grid_channels, (heads, grid_channels, head_dim))
    p["da.out_w"] = _uniform(rng, head_dim, (heads, head_dim, dim))
    return p


def deformable_attention(f_spatial, grid, p2d, p, heads: int, points: int) -> Tensor:
    """Sample each frame's feature grid around every joint's 2D location.

    Offsets and per-head point weights come from the joint query. Returns the
    aggregate ``sum_m W_m sum_k A_mk W'_m v(p + dp_mk)`` with shape (B, T, J, D);
    callers add it to the query features.
    """
    if heads < 1 or points < 1:
        raise ValueError("deformable_attention: heads and points must be >= 1")
    B, T, J, D = f_spatial.shape
    H, W, C = grid.shape[2:]
    N, MK = B * T, heads * points
    q = ad.reshape(f_spatial, (N, J, D))
    off = ad.mul(linear(q, p, "da.offset"), OFFSET_SCALE)                  # (N, J, MK*2)
    ref = ad.expand(ad.reshape(p2d, (N, J, 2)), 2, MK)                     # (N, J, MK, 2)
    coords = ad.add(ref, ad.reshape(off, (N, J, MK, 2)))
    attn = ad.softmax_lastdim(ad.reshape(linear(q, p, "da.attn"), (N, J, heads, points)))
    sampled = ad.bilinear_sample_2d(ad.reshape(grid, (N, H, W, C)), ad.reshape(coords, (N, J * MK, 2)))
    sampled = ad.reshape(sampled, (N * J * heads, points, C))
    pooled = ad.matmul(ad.reshape(attn, (N * J * heads, 1, points)), sampled)   # (NJM, 1, C)
    per_head = ad.transpose(ad.reshape(pooled, (N * J, heads, C)), (1, 0, 2))   # (M, NJ, C)
    out = ad.matmul(ad.matmul(per_head, p["da.value_w"]), p["da.out_w"])        # (M, NJ, D)
    return ad.reshape(ad.reduce_sum(out, axis=0), (B, T, J, D))


def init_lifting_head(rng, dim: int) -> dict[str, np.ndarray]:
    p = {}
    p.update(init_linear(rng, dim, dim, "lift.h"))
    p.update(init_linear(rng, dim, 3, "lift.out"))
    return p


def lifting_head(f_temporal, p) -> Tensor:
    return linear(ad.silu(linear(f_temporal, p, "lift.h")), p, "lift.out")


# ----------------------------------------------------------------------------
# stage 2: motion-guided reconstruction


def explicit_motion(p3d) -> Tensor:
    """Frame-to-frame joint displacement; the first frame is zero."""
    p3d = ad.as_tensor(p3d)
    B, T = p3d.shape[:2]
    zero = Tensor(np.zeros((B, 1) + p3d.shape[2:]))
    if T == 1:
        return ad.add(zero, ad.mul(p3d, 0.0))
    vel = ad.sub(ad.slice(p3d, 1, 1, T), ad.slice(p3d, 1, 0, T - 1))
    return ad.concat([zero, vel], axis=1)


def init_implicit_motion(rng, n_joints: int, img_dim: int) -> dict[str, np.ndarray]:
    p = {}
    p.update(init_linear(rng, 3 * n_joints, img_dim, "im.gate"))
    p.update(init_linear(rng, 3 * n_joints, img_dim, "im.corr"))
    return p


def implicit_motion(p3d, f_img, p) -> Tensor:
    """Pose-gated correction of frame features: ``sigmoid(g1) * f_img + g2``."""
    B, T, J, _ = p3d.shape
    if f_img.shape[:2] != (B, T):
        raise ContractError(f"implicit_motion: frame counts differ, {p3d.shape} vs {f_img.shape}")
    flat = ad.reshape(p3d, (B, T, J * 3))
    gate = ad.sigmoid(linear(flat, p, "im.gate"))
    return ad.add(ad.mul(gate, f_img), linear(flat, p, "im.corr"))


def init_motion_attention(rng, feat_dim: int, n_joints: int, img_dim: int, d_k: int,
                          prefix: str) -> dict[str, np.ndarray]:
    if d_k < 1:
        raise ValueError("motion attention needs d_k >= 1")
    kv_in = 3 * n_joints + img_dim
    p = {}
    p.update(init_linear(rng, feat_dim, d_k, f"{prefix}.q", bias=False))
    p.update(init_linear(rng, kv_in, d_k, f"{prefix}.k"))
    p.update(init_linear(rng, kv_in, d_k, f"{prefix}.v"))
    p.update(init_linear(rng, d_k, feat_dim, f"{prefix}.o", bias=False))
    return p


@dataclass
class MotionRep:
    explicit: Tensor     # (B, T, J, 3)
    implicit: Tensor     # (B, T, D_img)
    use_explicit: bool = True
    use_implicit: bool = True


def motion_attention_weights(f, m: MotionRep, p, prefix: str) -> tuple[Tensor, Tensor]:
    """Return (attention matrix (B, T, T), values (B, T, d_k))."""
    d_k = p[f"{prefix}.q.w"].shape[1]
    if d_k == 0:
        raise ContractError("motion_aware_attention: d_k must be positive")
    B, T, J, _ = m.explicit.shape
    e = ad.reshape(m.explicit, (B, T, J * 3))
    i = m.implicit
    if not m.use_explicit:
        e = Tensor(np.zeros(e.shape))
    if not m.use_implicit:
        i = Tensor(np.zeros(i.shape))
    kv = ad.concat([e, i], axis=-1)
    q = linear(f, p, f"{prefix}.q")
    k = linear(kv, p, f"{prefix}.k")
    v = linear(kv, p, f"{prefix}.v")
    scores = ad.div(ad.matmul(q, ad.transpose(k, (0, 2, 1))), float(np.sqrt(d_k)))
    return ad.softmax_lastdim(scores), v


def motion_aware_attention(f, m: MotionRep, p, prefix: str = "maa.0") -> Tensor:
    """Frame queries attend over motion tokens; output keeps the query width."""
    attn, v = motion_attention_weights(f, m, p, prefix)
    return linear(ad.matmul(attn, v), p, f"{prefix}.o")


def init_mesh_head(rng, feat_dim: int, n_joints: int, hidden: int, n_vertices: int) -> dict[str, np.ndarray]:
    p = {}
    p.update(init_linear(rng, feat_dim + 3 * n_joints, hidden, "mesh.h"))
    p.update(init_linear(rng, hidden, 3 * n_vertices, "mesh.out"))
    # start exactly at the rest template; a random read-out adds offsets the L1 loss is slow to undo
    p["mesh.out.w"][:] = 0.0
    p["mesh.out.b"][:] = 0.0
    return p


def mesh_head(f, p3d, template, p) -> Tensor:
    """Per-frame MLP on (features || flattened pose) -> vertex offsets from the template."""
    B, T, J, _ = p3d.shape
    Nv = template.shape[0]
    x = ad.concat([f, ad.reshape(p3d, (B, T, J * 3))], axis=-1)
    off = linear(ad.silu(linear(x, p, "mesh.h")), p, "mesh.out")
    return ad.add(ad.reshape(off, (B, T, Nv, 3)), template)
