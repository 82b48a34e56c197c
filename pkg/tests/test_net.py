import struct

import numpy as np
import pytest

from spenet.geom import PointCloud, random_rotation_so3, random_rotation_z, rotate
from spenet.net import (
    MAGIC,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    NetworkConfig,
    UnknownTensorError,
    build_geometry,
    embed_points,
    forward,
    init_parameters,
    load_checkpoint,
    logits_many,
    save_checkpoint,
)

SMALL = dict(stage_channels=(6, 12, 18, 24, 30), num_points=64, k=8, base_radius=0.3,
             num_classes=4)


def small(variant="sel", **kw):
    return NetworkConfig(**(SMALL | {"variant": variant} | kw))


def unit_cloud(rng, n=64):
    p = rng.standard_normal((n, 3))
    return PointCloud(p / np.linalg.norm(p, axis=1, keepdims=True).max() * 0.9)


@pytest.mark.parametrize("variant", ["cd", "zri", "ari", "fused", "sel"])
def test_logits_width_and_finiteness(rng, variant):
    state = init_parameters(small(variant), 0)
    out = forward(unit_cloud(rng), state)
    assert out.shape == (4,) and np.all(np.isfinite(out))


def test_same_seed_same_state_and_logits(rng):
    a, b = init_parameters(small(), 7), init_parameters(small(), 7)
    assert a.params.keys() == b.params.keys()
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    c = unit_cloud(rng)
    assert np.array_equal(forward(c, a), forward(c, b))


def test_different_seeds_differ():
    a, b = init_parameters(small(), 1), init_parameters(small(), 2)
    assert not np.array_equal(a.params["head.out.weight"].data, b.params["head.out.weight"].data)


def test_init_conventions():
    state = init_parameters(small(), 0)
    for name, t in state.params.items():
        if name.endswith("gamma"):
            assert np.all(t.data == 1)
        if name.endswith(("beta", "bias")):
            assert np.all(t.data == 0)
        if name.endswith("weight"):
            bound = 1 / np.sqrt(t.shape[1])
            assert np.all(np.abs(t.data) <= bound)


@pytest.mark.parametrize("bad", [
    dict(stage_channels=(6, 6, 12, 18, 24)),
    dict(stage_channels=(6, 12, 18, 24, 31)),
    dict(stage_points=(64, 32, 64, 8, 4)),
    dict(num_classes=1),
    dict(variant="xyz"),
])
def test_config_validation_names_the_problem(bad):
    with pytest.raises(ValueError, match="invalid NetworkConfig"):
        small(**bad)


def test_spe_net_s_parameter_count_is_stable():
    cfg = dict(stage_channels=(36, 72, 144, 288, 576), num_points=1024, num_classes=40)
    counts = {init_parameters(NetworkConfig(**cfg), s).n_parameters() for s in (0, 1)}
    assert len(counts) == 1
    # same order of magnitude as the reported model size
    assert 0.5e6 < counts.pop() < 3e6


def test_embedding_shape(rng):
    state = init_parameters(NetworkConfig(stage_channels=(36, 72, 144, 288, 576)), 0)
    assert embed_points(unit_cloud(rng, 512), state).shape == (512, 36)


def test_duplicate_points_get_identical_embeddings(rng):
    pts = unit_cloud(rng).positions.copy()
    pts[10] = pts[3]
    out = embed_points(PointCloud(pts), init_parameters(small(), 0)).data
    assert np.array_equal(out[3], out[10])


def test_masked_embedding_is_rotation_invariant(rng):
    state = init_parameters(small(maskout_epochs=10**6), 0)
    c = unit_cloud(rng)
    a = embed_points(c, state, epoch=0).data
    b = embed_points(rotate(c, random_rotation_so3(3)), state, epoch=0).data
    np.testing.assert_allclose(a, b, atol=1e-4)


@pytest.mark.parametrize("seed", range(5))
def test_permanently_masked_network_is_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    state = init_parameters(small(maskout_epochs=10**6), seed)
    c = unit_cloud(rng)
    a = forward(c, state)
    b = forward(rotate(c, random_rotation_so3(seed)), state)
    np.testing.assert_allclose(a, b, atol=1e-3)


def test_cd_network_is_not_rotation_invariant(rng):
    state = init_parameters(small("cd"), 0)
    c = unit_cloud(rng)
    assert np.abs(forward(c, state) - forward(rotate(c, random_rotation_so3(1)), state)).max() > 1e-4


def test_point_order_does_not_change_logits_much(rng):
    # farthest point sampling starts at index 0, so a permutation that keeps
    # the first point fixed reaches the same sampled set
    c = unit_cloud(rng)
    perm = np.r_[0, 1 + rng.permutation(63)]
    state = init_parameters(small(), 0)
    a = forward(c, state)
    b = forward(PointCloud(c.positions[perm]), state)
    np.testing.assert_allclose(a, b, atol=1e-4)


def test_batched_logits_match_single(rng):
    state = init_parameters(small(), 0)
    clouds = [unit_cloud(rng) for _ in range(3)]
    many = logits_many(state, clouds)
    for c, row in zip(clouds, many):
        np.testing.assert_allclose(forward(c, state), row, atol=1e-5)


def test_untrained_network_is_at_chance():
    rng = np.random.default_rng(0)
    state = init_parameters(small(num_points=32, stage_points=(32, 16, 8, 4, 2)), 0)
    clouds = [unit_cloud(rng, 32) for _ in range(500)]
    pred = logits_many(state, clouds, batch_size=100).argmax(axis=1)
    labels = rng.integers(0, 4, 500)
    assert abs((pred == labels).mean() - 0.25) <= 0.05


def test_single_cloud_train_mode_is_rejected(rng):
    with pytest.raises(ValueError):
        forward(unit_cloud(rng), init_parameters(small(), 0), mode="train")


def test_empty_cloud_is_rejected():
    with pytest.raises(ValueError):
        build_geometry(np.zeros((0, 3)), small())


def test_fewer_points_than_k_is_allowed(rng):
    state = init_parameters(small(num_points=5, stage_points=(5, 4, 3, 2, 1), k=8), 0)
    assert forward(unit_cloud(rng, 5), state).shape == (4,)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bitwise(rng, tmp_path):
    state = init_parameters(small(maskout_epochs=3), 5)
    state.epoch = 9
    for name in state.buffers:
        buf = rng.standard_normal(state.buffers[name].shape)
        state.buffers[name] = (np.abs(buf) + 0.5 if name.endswith("var") else buf).astype(np.float32)
    save_checkpoint(state, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.epoch == 9 and back.seed == 5 and back.config == state.config
    for k in state.params:
        assert np.array_equal(state.params[k].data, back.params[k].data)
    for k in state.buffers:
        assert np.array_equal(state.buffers[k], back.buffers[k])
    c = unit_cloud(rng)
    assert np.array_equal(forward(c, state), forward(c, back))


def test_bad_magic_is_a_version_error(tmp_path):
    save_checkpoint(init_parameters(small(), 0), tmp_path / "m.ckpt")
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError) as info:
        load_checkpoint(tmp_path / "bad.ckpt")
    assert info.value.code == "version_mismatch"


def test_future_version_is_rejected(tmp_path):
    save_checkpoint(init_parameters(small(), 0), tmp_path / "m.ckpt")
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    raw[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 99)
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(tmp_path / "v.ckpt")


def test_truncated_file(tmp_path):
    save_checkpoint(init_parameters(small(), 0), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointTruncatedError) as info:
        load_checkpoint(tmp_path / "t.ckpt")
    assert info.value.code == "truncated"


def test_unknown_tensor_name(tmp_path):
    state = init_parameters(small(), 0)
    state.add("mystery.weight", np.ones((2, 2), np.float32))
    save_checkpoint(state, tmp_path / "m.ckpt")
    with pytest.raises(UnknownTensorError, match="mystery.weight") as info:
        load_checkpoint(tmp_path / "m.ckpt")
    assert info.value.code == "unknown_tensor"


def test_mismatched_channels_name_the_tensor(tmp_path):
    save_checkpoint(init_parameters(small(), 0), tmp_path / "m.ckpt")
    other = small(stage_channels=(9, 12, 18, 24, 30))
    with pytest.raises(CheckpointShapeError, match=r"embed\.") as info:
        load_checkpoint(tmp_path / "m.ckpt", config=other)
    assert info.value.code == "shape_mismatch"


@pytest.mark.parametrize("kind", ["z", "so3"])
def test_cached_rotated_encodings_match_direct_encoding(rng, kind):
    from spenet.net import batch_geometry, canonical_encodings, encode_geometry, rotated_groupings
    cfg = small()
    clouds = [unit_cloud(rng).positions for _ in range(3)]
    geoms = [build_geometry(p, cfg) for p in clouds]
    cached = [canonical_encodings(g, p, ("cd", "zri", "ari")) for g, p in zip(geoms, clouds)]
    rots = np.stack([(random_rotation_so3(i) if kind == "so3" else
                      random_rotation_z(i)) for i in range(3)])
    pos = np.einsum("bij,bnj->bni", rots, np.stack(clouds))
    geom = batch_geometry(geoms, 64)
    fast = rotated_groupings(geom, cached, rots, pos, z_only=kind == "z")
    slow = encode_geometry(geom, pos, ("cd", "zri", "ari"))
    for a, b in zip(fast, slow):
        for k in ("cd", "zri", "ari"):
            np.testing.assert_allclose(a.encodings[k], b.encodings[k], atol=1e-5)
