import numpy as np
import pytest

from deskhmr import autodiff as ad
from deskhmr import blocks as bk
from deskhmr.autodiff import ContractError
from deskhmr.kinematics import ScanOrder
from deskhmr.model import Ablation, Model, ModelConfig, pipeline_forward
from deskhmr.verify import block_gradient_cases

BLOCKS = ["dual_scan", "deformable_attention", "motion_aware_attention", "lifting_head", "mesh_head",
          "loss_pose", "loss_mesh"]


@pytest.mark.parametrize("name", BLOCKS)
def test_block_gradients_on_20_instances(name):
    rng = np.random.default_rng(BLOCKS.index(name))
    for inst in range(20):
        c = block_gradient_cases(rng)[name]
        rep = ad.grad_check(c.f, c.x, step=c.step, tol=c.tol, coords=c.coords, rng=rng, max_coords=6)
        assert rep.passed, (inst, rep)


def tiny_block(rng, L=6, D=4, segments=None, perm=None):
    cfg = bk.DualScanConfig(D, 3, 3, ScanOrder(rng.permutation(L) if perm is None else perm, segments))
    return cfg, bk.init_dual_scan(rng, cfg, "b")


def test_zero_gate_reduces_block_to_identity(rng):
    cfg, p = tiny_block(rng)
    p["b.gate_conv_w"] = np.zeros_like(p["b.gate_conv_w"])
    x = rng.normal(size=(2, 6, 4))
    assert np.array_equal(bk.dual_scan_block(x, cfg, p, "b").data, x)


def test_block_matches_hand_composition(rng):
    segments = np.array([0, 0, 0, 1, 1, 2])
    cfg, p = tiny_block(rng, segments=segments)
    x = rng.normal(size=(2, 6, 4))
    xn = bk.layer_norm(x, p["b.ln_g"]).data
    og = bk.scan_branch(xn, p, "b.global").data
    perm = cfg.scan_order.perm
    ol = np.empty_like(og)
    ol[:, perm] = bk.scan_branch(xn[:, perm], p, "b.local", segments).data
    gate = ad.silu(ad.conv1d_depthwise(og, p["b.gate_conv_w"])).data
    np.testing.assert_allclose(bk.dual_scan_block(x, cfg, p, "b").data, x + gate * ol, atol=1e-14)


def test_segments_isolate_the_local_scan(rng):
    _, p = tiny_block(rng)
    segments = np.array([0, 0, 0, 1, 1, 1])
    x = rng.normal(size=(1, 6, 4))
    y0 = bk.scan_branch(x, p, "b.local", segments).data
    x[0, 1] += 1.0
    y1 = bk.scan_branch(x, p, "b.local", segments).data
    assert np.array_equal(y0[0, 3:], y1[0, 3:])
    assert not np.allclose(y0[0, 1:3], y1[0, 1:3])


def test_identity_order_block_is_causal(rng):
    cfg, p = tiny_block(rng, perm=np.arange(6))
    x = rng.normal(size=(1, 6, 4))
    y0 = bk.dual_scan_block(x, cfg, p, "b").data
    x[0, 4] += 1.0
    y1 = bk.dual_scan_block(x, cfg, p, "b").data
    assert np.array_equal(y0[0, :4], y1[0, :4])


def test_block_rejects_bad_inputs(rng):
    cfg, p = tiny_block(rng)
    with pytest.raises(ContractError):
        bk.dual_scan_block(rng.normal(size=(6, 4)), cfg, p, "b")
    with pytest.raises(ContractError, match="scan order"):
        bk.dual_scan_block(rng.normal(size=(1, 5, 4)), cfg, p, "b")
    with pytest.raises(ValueError):
        bk.DualScanConfig(4, conv_kernel=2)


def test_deformable_attention_on_a_constant_grid(rng):
    """Bilinear samples of a spatially constant grid are that constant, whatever the offsets."""
    D, C, heads, points = 4, 3, 2, 3
    p = bk.init_deformable(rng, D, C, heads, points, 5)
    c = rng.normal(size=C)
    grid = np.broadcast_to(c, (1, 2, 4, 4, C))
    out = bk.deformable_attention(rng.normal(size=(1, 2, 3, D)), grid, rng.uniform(-1, 1, size=(1, 2, 3, 2)),
                                  p, heads, points).data
    expected = sum(c @ p["da.value_w"][m] @ p["da.out_w"][m] for m in range(heads))
    np.testing.assert_allclose(out, np.broadcast_to(expected, out.shape), atol=1e-12)


def test_mesh_head_with_zero_output_layer_returns_template(rng):
    template = rng.normal(size=(7, 3))
    p = bk.init_mesh_head(rng, 4, 3, 5, 7)
    p["mesh.out.w"][:] = 0.0
    p["mesh.out.b"][:] = 0.0
    v = bk.mesh_head(rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 3, 3)), template, p).data
    assert np.array_equal(v, np.broadcast_to(template, (2, 3, 7, 3)))


def test_explicit_motion_is_first_difference(rng):
    p = rng.normal(size=(2, 5, 3, 3))
    m = bk.explicit_motion(p).data
    assert np.array_equal(m[:, 0], np.zeros((2, 3, 3)))
    assert np.array_equal(m[:, 1:], p[:, 1:] - p[:, :-1])


@pytest.mark.parametrize("which", ["explicit", "implicit"])
def test_disabled_motion_stream_is_ignored(rng, which):
    p = bk.init_motion_attention(rng, 4, 3, 5, 3, "maa.0")
    f = rng.normal(size=(1, 4, 4))
    e, i = rng.normal(size=(1, 4, 3, 3)), rng.normal(size=(1, 4, 5))

    def run(e, i):
        m = bk.MotionRep(ad.tensor(e), ad.tensor(i), which != "explicit", which != "implicit")
        return bk.motion_aware_attention(f, m, p).data

    y0 = run(e, i)
    if which == "explicit":
        assert np.array_equal(y0, run(e + 1.0, i))
        assert not np.allclose(y0, run(e, i + 1.0))
    else:
        assert np.array_equal(y0, run(e, i + 1.0))
        assert not np.allclose(y0, run(e + 1.0, i))


@pytest.fixture(scope="module")
def tiny_model(body):
    cfg = ModelConfig(lift_dim=8, lift_layers=1, n_state=3, img_dim=6, grid_channels=3, heads=2, points=2,
                      recon_dim=8, recon_layers=1, mesh_hidden=8)
    return Model(cfg, body, seed=3)


@pytest.fixture(scope="module")
def tiny_inputs():
    rng = np.random.default_rng(11)
    return (rng.uniform(-0.8, 0.8, size=(1, 3, 17, 2)), rng.normal(size=(1, 3, 4, 4, 3)),
            rng.normal(size=(1, 3, 6)))


def test_ga_on_is_bit_identical_to_unflagged_pipeline(tiny_model, tiny_inputs):
    p3d, mesh = pipeline_forward(tiny_model, *tiny_inputs)
    q3d, qmesh = pipeline_forward(tiny_model, *tiny_inputs, Ablation(ga=True, em=True, im=True))
    assert np.array_equal(p3d.data, q3d.data) and np.array_equal(mesh.data, qmesh.data)


def test_lift_matches_block_composition(tiny_model, tiny_inputs):
    p2d, grid, f_img = tiny_inputs
    p, c = tiny_model.params, tiny_model.cfg
    spatial, temporal = tiny_model.block_configs(3)
    f = bk.spatial_mamba(bk.encoder(p2d, f_img, p), spatial, p)
    f = ad.add(f, bk.deformable_attention(f, grid, p2d, p, c.heads, c.points))
    ref = bk.lifting_head(bk.temporal_mamba(f, temporal, p), p)
    assert np.array_equal(tiny_model.lift(p2d, grid, f_img).data, ref.data)


def test_ga_off_skips_the_grid(tiny_model, tiny_inputs):
    p2d, grid, f_img = tiny_inputs
    off = Ablation(ga=False)
    a = tiny_model.lift(p2d, grid, f_img, off).data
    b = tiny_model.lift(p2d, grid + 5.0, f_img, off).data
    assert np.array_equal(a, b)
    assert not np.allclose(tiny_model.lift(p2d, grid, f_img).data, a)
