"""Model pipeline: embedding, blocks, traversals, merging, config contracts."""

import numpy as np
import pytest

import voxscan.model as M
import voxscan.ssm as S
import voxscan.tensor as T
from voxscan.errors import ShapeError, ValidationError


def t(arr, grad=False):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


@pytest.fixture(scope="module")
def tiny_model():
    return M.Model(M.tiny_config(), np.float64)


# -- config ------------------------------------------------------------------

def test_config_round_trip():
    cfg = M.tiny_config(state_dim=4, seed=9)
    again = M.ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg


@pytest.mark.parametrize("overrides", [
    dict(embed_dim=16),                 # embed_dim != stage_dims[0]
    dict(stage_dims=(8, 24)),           # widths must double
    dict(stage_dims=(7, 14)),           # odd width
    dict(stage_depths=(0, 1)),          # empty stage
    dict(num_directions=4),
    dict(input_dims=(30, 32, 16)),      # not divisible by patch size
    dict(input_dims=(4, 32, 16)),       # grid too small to merge
    dict(seed=-1),
])
def test_config_validation_rejects(overrides):
    with pytest.raises(ValidationError):
        M.tiny_config(**overrides).validate()


def test_config_version_gate():
    doc = M.tiny_config().to_dict()
    doc["version"] = 99
    with pytest.raises(ValidationError, match="version"):
        M.ModelConfig.from_dict(doc)


# -- patch embedding ---------------------------------------------------------

def test_patch_embed_shape_and_patch_isolation():
    # With identity-ish weights, each token must depend only on its own patch.
    rng = np.random.default_rng(0)
    vol = rng.random((1, 8, 8, 4))
    w = t(rng.standard_normal((8, 3)))
    b = t(np.zeros(3))
    grid = M.patch_embed(t(vol), 2, w, b)
    assert grid.tokens.shape == (1, 4, 4, 2, 3)
    vol2 = vol.copy()
    vol2[0, :2, :2, :2] += 1.0  # perturb exactly one patch
    grid2 = M.patch_embed(t(vol2), 2, w, b)
    diff = np.abs(grid2.tokens.data - grid.tokens.data) > 1e-12
    assert diff[0, 0, 0, 0].any()
    assert not diff[0, 1:, :, :].any() and not diff[0, 0, 1:, :].any()


def test_patch_embed_flattens_patch_in_voxel_order():
    # One-hot projection reads voxel j of each patch: layout must be C-order
    # within the patch (d-major, then h, then w).
    vol = np.arange(8.0).reshape(1, 2, 2, 2)
    w = np.zeros((8, 1))
    w[3, 0] = 1.0  # voxel (d=0, h=1, w=1) of the patch
    grid = M.patch_embed(t(vol), 2, t(w), t(np.zeros(1)))
    assert grid.tokens.data[0, 0, 0, 0, 0] == vol[0, 0, 1, 1]


def test_patch_embed_rejects_indivisible():
    with pytest.raises(ShapeError, match="resize"):
        M.patch_embed(t(np.zeros((1, 7, 8, 4))), 2, t(np.zeros((8, 3))), t(np.zeros(3)))


# -- traversal orders --------------------------------------------------------

def test_traversal_orders_are_inverse_permutation_pairs():
    orders = M.traversal_orders((3, 4, 5))
    assert len(orders) == 6
    n = 3 * 4 * 5
    for perm, inv in orders:
        assert sorted(perm) == list(range(n))
        assert np.array_equal(perm[inv], np.arange(n))


def test_traversal_pairs_are_reverses():
    orders = M.traversal_orders((2, 3, 4))
    for k in range(3):
        fwd, _ = orders[2 * k]
        rev, _ = orders[2 * k + 1]
        assert np.array_equal(rev, fwd[::-1])


def test_traversal_rotations_differ():
    orders = M.traversal_orders((2, 3, 4))
    perms = [tuple(p) for p, _ in orders]
    assert len(set(perms)) == 6


def test_first_traversal_is_row_major():
    orders = M.traversal_orders((2, 2, 2))
    assert np.array_equal(orders[0][0], np.arange(8))


# -- ss3d --------------------------------------------------------------------

def test_ss3d_point_reflection_closure_with_shared_pairs():
    """Flipping all three axes at once mirrors the output exactly when each
    forward/reverse traversal pair shares one parameter set."""
    rng = np.random.default_rng(5)
    g = rng.standard_normal((2, 4, 6, 2, 4))
    base = [S.SsmParams(4, 8, np.random.default_rng(i), prefix=f"p{i}.")
            for i in range(3)]
    dirs = [base[0], base[0], base[1], base[1], base[2], base[2]]
    with T.no_grad():
        out = M.ss3d(M.PatchGrid(t(g)), dirs).tokens.data
        refl = np.flip(g, axis=(1, 2, 3)).copy()
        out_r = M.ss3d(M.PatchGrid(t(refl)), dirs).tokens.data
    assert np.abs(np.flip(out, axis=(1, 2, 3)) - out_r).max() <= 1e-10


def test_ss3d_reflection_equivariance_with_swapped_pairs():
    # With six independent parameter sets the same symmetry appears once the
    # forward/reverse roles are swapped to follow the reflection.
    rng = np.random.default_rng(6)
    g = rng.standard_normal((1, 2, 4, 2, 3))
    dirs = [S.SsmParams(3, 4, np.random.default_rng(10 + i), prefix=f"q{i}.")
            for i in range(6)]
    swapped = [dirs[1], dirs[0], dirs[3], dirs[2], dirs[5], dirs[4]]
    refl = np.flip(g, axis=(1, 2, 3)).copy()
    with T.no_grad():
        a = M.ss3d(M.PatchGrid(t(g)), dirs).tokens.data
        b = M.ss3d(M.PatchGrid(t(refl)), swapped).tokens.data
    assert np.abs(np.flip(a, axis=(1, 2, 3)) - b).max() <= 1e-10


def test_ss3d_two_direction_variant():
    rng = np.random.default_rng(7)
    g = rng.standard_normal((1, 2, 2, 2, 3))
    dirs = [S.SsmParams(3, 4, np.random.default_rng(i), prefix=f"r{i}.")
            for i in range(2)]
    with T.no_grad():
        out = M.ss3d(M.PatchGrid(t(g)), dirs)
    assert out.tokens.shape == g.shape


def test_ss3d_direction_count_validated():
    g = M.PatchGrid(t(np.zeros((1, 2, 2, 2, 3))))
    dirs = [S.SsmParams(3, 4, np.random.default_rng(i), prefix=f"s{i}.")
            for i in range(3)]
    with pytest.raises(ValidationError, match="direction"):
        M.ss3d(g, dirs)


def test_ss3d_mean_of_direction_outputs():
    # ss3d output equals the average over per-direction scan-and-restore runs.
    rng = np.random.default_rng(8)
    g = rng.standard_normal((1, 2, 2, 2, 3))
    dirs = [S.SsmParams(3, 4, np.random.default_rng(20 + i), prefix=f"m{i}.")
            for i in range(6)]
    grid = M.PatchGrid(t(g))
    with T.no_grad():
        out = M.ss3d(grid, dirs).tokens.data
        flat = g.reshape(1, 8, 3).transpose(1, 0, 2)
        acc = np.zeros_like(flat)
        for (perm, inv), p in zip(M.traversal_orders((2, 2, 2)), dirs):
            y = S.selective_scan(T.Tensor(flat[perm]), p).data
            acc += y[inv]
    want = (acc / 6).transpose(1, 0, 2).reshape(1, 2, 2, 2, 3)
    assert np.allclose(out, want, atol=1e-12)


# -- blocks ------------------------------------------------------------------

def test_block_preserves_shape_and_mixes_channels(tiny_model):
    rng = np.random.default_rng(3)
    g = rng.standard_normal((2, 4, 4, 2, 8))
    blk = tiny_model.stages[0][0]
    with T.no_grad():
        out = M.block_forward(M.PatchGrid(t(g)), blk, train=False)
    assert out.tokens.shape == g.shape
    assert not np.allclose(out.tokens.data, g)


def test_block_channel_mismatch_rejected(tiny_model):
    blk = tiny_model.stages[0][0]
    with pytest.raises(ShapeError, match="channels"):
        M.block_forward(M.PatchGrid(t(np.zeros((1, 2, 2, 2, 6)))), blk)


def test_shuffle_interleaves_halves():
    assert np.array_equal(M._shuffle_indices(8), [0, 4, 1, 5, 2, 6, 3, 7])


def test_block_residual_dominates_at_zero_weights(tiny_model):
    # Zeroing both branch output projections leaves ~the residual path:
    # conv kernel zero and ssm out-projection zero => block output == input.
    cfg = M.tiny_config(seed=1)
    model = M.Model(cfg, np.float64)
    blk = model.stages[0][0]
    blk.conv_kernel.value.data[:] = 0
    blk.conv_bias.value.data[:] = 0
    blk.w_out.value.data[:] = 0
    blk.b_out.value.data[:] = 0
    rng = np.random.default_rng(4)
    g = rng.standard_normal((1, 4, 4, 2, 8))
    with T.no_grad():
        out = M.block_forward(M.PatchGrid(t(g)), blk, train=False)
    assert np.allclose(out.tokens.data, g)


# -- merging and head --------------------------------------------------------

def test_patch_merging_halves_grid_and_doubles_channels():
    rng = np.random.default_rng(5)
    g = rng.standard_normal((2, 4, 6, 2, 3))
    w = t(rng.standard_normal((24, 6)))
    b = t(np.zeros(6))
    out = M.patch_merging(M.PatchGrid(t(g)), w, b)
    assert out.tokens.shape == (2, 2, 3, 1, 6)


def test_patch_merging_gathers_the_right_neighborhood():
    # Identity-extract weight: output feature 0 reads corner (0,0,0) channel 0.
    g = np.arange(2 * 2 * 2 * 1, dtype=np.float64).reshape(1, 2, 2, 2, 1)
    w = np.zeros((8, 2))
    w[0, 0] = 1.0  # first of the 8 stacked corner features
    out = M.patch_merging(M.PatchGrid(t(g)), t(w), t(np.zeros(2)))
    assert out.tokens.data[0, 0, 0, 0, 0] == g[0, 0, 0, 0, 0]


def test_patch_merging_rejects_odd_dims():
    with pytest.raises(ShapeError, match="even"):
        M.patch_merging(M.PatchGrid(t(np.zeros((1, 3, 4, 2, 2)))),
                        t(np.zeros((16, 4))), t(np.zeros(4)))


def test_classify_returns_distribution():
    rng = np.random.default_rng(6)
    g = rng.standard_normal((4, 2, 2, 2, 5))
    w = t(rng.standard_normal((5, 3)))
    b = t(np.zeros(3))
    p = M.classify(M.PatchGrid(t(g)), w, b)
    assert p.shape == (4, 3)
    assert np.allclose(p.data.sum(axis=-1), 1.0)


# -- whole model -------------------------------------------------------------

def test_tiny_forward_probability_contract(tiny_model):
    rng = np.random.default_rng(0)
    vol = rng.random((32, 32, 16))
    with T.no_grad():
        p = tiny_model.probs(vol)
    assert p.shape == (3,)
    assert np.all(np.isfinite(p.data))
    assert p.data.sum() == pytest.approx(1.0)


def test_batch_forward_matches_single(tiny_model):
    rng = np.random.default_rng(1)
    vols = rng.random((3, 32, 32, 16))
    with T.no_grad():
        batch = tiny_model.logits_batch(vols, train=False).data
        singles = np.stack([tiny_model.logits(v, train=False).data for v in vols])
    assert np.allclose(batch, singles, atol=1e-12)


def test_model_rejects_wrong_input_dims(tiny_model):
    with pytest.raises(ShapeError, match="dims"):
        tiny_model.logits(np.zeros((16, 32, 16)))
    with pytest.raises(ShapeError):
        tiny_model.logits_batch(np.zeros((2, 16, 32, 16)))


def test_model_init_is_seed_deterministic():
    a = M.Model(M.tiny_config(seed=7), np.float64)
    b = M.Model(M.tiny_config(seed=7), np.float64)
    c = M.Model(M.tiny_config(seed=8), np.float64)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.name == pb.name and np.array_equal(pa.data, pb.data)
    assert any(not np.array_equal(pa.data, pc.data)
               for pa, pc in zip(a.parameters(), c.parameters()))


def test_state_dict_round_trip(tiny_model):
    state = {k: v.copy() for k, v in tiny_model.state_arrays().items()}
    other = M.Model(M.tiny_config(seed=99), np.float64)
    other.load_state(state)
    for k, v in other.state_arrays().items():
        assert np.array_equal(v, state[k])
    state.pop("head.bias")
    with pytest.raises(ValidationError, match="missing"):
        other.load_state(state)


def test_two_stage_grid_flow(tiny_model):
    # 32/4 = 8 grid, one merge halves it; head pools whatever remains.
    rng = np.random.default_rng(2)
    vol = rng.random((1, 32, 32, 16))
    grid = M.patch_embed(t(vol), 4, tiny_model.embed_w.value, tiny_model.embed_b.value)
    assert grid.grid_dims == (8, 8, 4)
    w, b = tiny_model.merges[0]
    with T.no_grad():
        merged = M.patch_merging(grid, w.value, b.value)
    assert merged.grid_dims == (4, 4, 2)
    assert merged.channels == 16
