import numpy as np
import pytest
import torch

from bayesseg.network import (
    CheckpointError,
    DenseBlock,
    NetworkConfig,
    build,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    weights_checksum,
)
from bayesseg.tensor import RngStream, ShapeError


def small_config(**kw):
    base = dict(num_classes=3, growth_rate=4, layers_per_dense_block=2, num_pool_levels=1, initial_channels=6)
    base.update(kw)
    return NetworkConfig(**base)


def test_build_deterministic():
    a, b = build(NetworkConfig(), seed=3), build(NetworkConfig(), seed=3)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    assert weights_checksum(a) != weights_checksum(build(NetworkConfig(), seed=4))


def test_parameter_count_hand_census():
    # num_classes=3, growth=4, 2 layers/block, 1 pool level, 6 initial channels, 3x3 kernels:
    # stem 1->6: 6*1*9+6 = 60
    # down block: 6->4: 6*4*9+4 = 220; 10->4: 10*4*9+4 = 364; channels 14
    # transition 14->14 1x1: 14*14+14 = 210
    # bottleneck: 14->4: 508; 18->4: 652; new features 8
    # up block on 8+14=22: 22->4: 796; 26->4: 940; output 30 channels
    # heads: 30*3+3 = 93, 30*1+1 = 31
    hand = 60 + 220 + 364 + 210 + 508 + 652 + 796 + 940 + 93 + 31
    model = build(small_config())
    actual = sum(p.numel() for p in model.parameters())
    assert hand == 3874
    assert parameter_count(small_config()) == actual == hand


@pytest.mark.parametrize("cfg", [NetworkConfig(), small_config(num_pool_levels=0), small_config(num_pool_levels=3)])
def test_parameter_count_matches_module(cfg):
    assert parameter_count(cfg) == sum(p.numel() for p in build(cfg).parameters())


def test_no_pooling_is_local_and_size_preserving():
    model = build(small_config(num_pool_levels=0))
    z, v = model(torch.rand(1, 1, 7, 9))
    assert z.shape == (1, 3, 7, 9) and v.shape == (1, 1, 7, 9)


def test_forward_shapes_and_positive_variance():
    model = build(NetworkConfig(), seed=0)
    x = torch.rand(2, 1, 16, 24)
    z, v = model(x)
    assert z.shape == (2, 5, 16, 24)
    assert v.shape == (2, 1, 16, 24)
    assert (v > 0).all()


def test_forward_deterministic_without_dropout():
    model = build(NetworkConfig(), seed=1)
    x = torch.rand(1, 1, 16, 16)
    z1, v1 = model(x)
    z2, v2 = model(x)
    assert torch.equal(z1, z2) and torch.equal(v1, v2)


def test_forward_stochastic_with_dropout():
    model = build(NetworkConfig(), seed=1)
    x = torch.rand(1, 1, 16, 16)
    z1, _ = model(x, dropout_enabled=True, rng=RngStream(0, "a"))
    z2, _ = model(x, dropout_enabled=True, rng=RngStream(0, "b"))
    z3, _ = model(x, dropout_enabled=True, rng=RngStream(0, "a"))
    assert not torch.equal(z1, z2)
    assert torch.equal(z1, z3)


def test_input_dropout_site():
    x = torch.rand(1, 1, 16, 16)
    seen = []

    def run(model):
        orig = model.stem.forward
        model.stem.forward = lambda t, drop: (seen.append(drop(t)), orig(t, drop))[1]
        model(x, dropout_enabled=True, rng=RngStream(0))
        return seen.pop()

    assert torch.equal(run(build(NetworkConfig())), x)
    dropped = run(build(NetworkConfig(input_dropout_rate=0.4)))
    assert (dropped == 0).any() and not torch.equal(dropped, x)


def test_variance_positive_across_seeds():
    worst = np.inf
    for seed in range(100):
        model = build(NetworkConfig(), seed=seed)
        x = torch.randn(1, 1, 8, 8, generator=torch.Generator().manual_seed(seed)) * 3
        with torch.no_grad():
            _, v = model(x)
        worst = min(worst, v.min().item())
    assert worst > 0


def test_bad_spatial_size_rejected():
    with pytest.raises(ShapeError, match="divisible by 4"):
        build(NetworkConfig())(torch.zeros(1, 1, 18, 16))


def test_bad_channel_count_rejected():
    with pytest.raises(ShapeError):
        build(NetworkConfig())(torch.zeros(1, 3, 16, 16))


@pytest.mark.parametrize("kw", [dict(num_classes=1), dict(kernel_size=4), dict(dropout_rate=1.0), dict(growth_rate=0),
                                dict(input_dropout_rate=-0.1)])
def test_invalid_config_rejected(kw):
    with pytest.raises(ValueError):
        build(NetworkConfig(**kw))


def identity_drop(x):
    return x


class TestDenseBlock:
    def test_single_layer(self):
        block = DenseBlock(5, 1, 7, 3)
        assert block(torch.zeros(1, 5, 4, 4), identity_drop).shape[1] == 12

    def test_arithmetic(self):
        block = DenseBlock(8, 3, 4, 3)
        out = block(torch.randn(2, 8, 6, 6), identity_drop)
        assert out.shape == (2, 20, 6, 6)

    def test_keeps_input_and_sees_all_previous(self):
        block = DenseBlock(2, 3, 1, 3)
        x = torch.randn(1, 2, 5, 5)
        out = block(x, identity_drop)
        assert torch.equal(out[:, :2], x)
        assert [layer.weight.shape[1] for layer in block.layers] == [2, 3, 4]

    def test_decoder_variant_returns_new_features(self):
        block = DenseBlock(8, 3, 4, 3)
        assert block(torch.randn(1, 8, 4, 4), identity_drop, keep_input=False).shape[1] == 12

    def test_zero_block_appends_zeros(self):
        block = DenseBlock(3, 2, 2, 3)
        out = block(torch.zeros(1, 3, 4, 4), identity_drop)
        assert out.shape[1] == 7 and torch.all(out == 0)


def test_encoder_decoder_skip_shapes_match():
    cfg = NetworkConfig(num_pool_levels=3)
    model = build(cfg)
    shapes = []
    orig = torch.cat

    def spy(tensors, dim=0):
        if dim == 1 and len(tensors) == 2 and tensors[0].shape[1] == cfg.layers_per_dense_block * cfg.growth_rate:
            shapes.append((tuple(tensors[0].shape[2:]), tuple(tensors[1].shape[2:])))
        return orig(tensors, dim=dim)

    torch.cat = spy
    try:
        model(torch.rand(1, 1, 32, 32))
    finally:
        torch.cat = orig
    assert all(a == b for a, b in shapes)
    assert len(shapes) >= cfg.num_pool_levels


def test_heads_have_distinct_widths():
    model = build(NetworkConfig(num_classes=4))
    assert model.logit_head.weight.shape[0] == 4
    assert model.variance_head.weight.shape[0] == 1


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = build(small_config(), seed=9)
        path = tmp_path / "m.bfcdn"
        save_checkpoint(path, model, {"train.bayesian": False})
        loaded, items = load_checkpoint(path)
        assert loaded.config == model.config
        assert weights_checksum(loaded) == weights_checksum(model)
        assert items["train.bayesian"] == "false"

    def test_byte_layout(self, tmp_path):
        model = build(small_config(), seed=0)
        path = tmp_path / "m.bfcdn"
        save_checkpoint(path, model)
        data = path.read_bytes()
        assert data.startswith(b"BFCDN1\n")
        name = b"stem.weight"
        assert int.from_bytes(data[7:11], "little") == len(name)
        assert data[11:11 + len(name)] == name
        pos = 11 + len(name)
        assert int.from_bytes(data[pos:pos + 4], "little") == 4
        dims = [int.from_bytes(data[pos + 4 + 4 * i:pos + 8 + 4 * i], "little") for i in range(4)]
        assert dims == [6, 1, 3, 3]
        first = np.frombuffer(data, dtype="<f4", count=1, offset=pos + 20)[0]
        assert first == model.stem.weight.view(-1)[0].item()
        config_text = data.split(b"CONFIG\n", 1)[1].decode()
        assert "network.num_classes=3\n" in config_text

    def test_bytes_reproducible(self, tmp_path):
        save_checkpoint(tmp_path / "a", build(small_config(), seed=2))
        save_checkpoint(tmp_path / "b", build(small_config(), seed=2))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_bad_header(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE")
        with pytest.raises(CheckpointError, match="header"):
            load_checkpoint(tmp_path / "x")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "m", build(small_config()))
        data = (tmp_path / "m").read_bytes()
        (tmp_path / "t").write_bytes(data[:40])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t")

    def test_config_shape_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "m", build(small_config()))
        data = (tmp_path / "m").read_bytes().replace(b"network.growth_rate=4", b"network.growth_rate=5")
        (tmp_path / "bad").write_bytes(data)
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(tmp_path / "bad")
