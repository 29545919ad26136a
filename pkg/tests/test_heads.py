import pytest
import torch

from tacrep.encoder import TokenEmbeddings, ViTEncoder, feature_taps
from tacrep.errors import ConfigError
from tacrep.heads import (
    AttentivePooler,
    AttentiveProbeConfig,
    DPTConfig,
    DPTDecoder,
    MLPHead,
    dpt_decode,
    tokens_to_map,
)


@pytest.fixture
def probe_cfg():
    return AttentiveProbeConfig(embed_dim=16, n_heads=4)


def test_attentive_pool_is_permutation_invariant(probe_cfg):
    torch.manual_seed(0)
    pooler = AttentivePooler(probe_cfg).eval()
    tokens = torch.randn(2, 5, 16)
    perm = torch.tensor([3, 0, 4, 1, 2])
    torch.testing.assert_close(pooler(tokens), pooler(tokens[:, perm]), atol=1e-5, rtol=1e-5)
    assert tuple(pooler(tokens).shape) == (2, 16)


def test_attentive_pool_multiple_queries_and_empty_input():
    pooler = AttentivePooler(AttentiveProbeConfig(embed_dim=16, n_heads=4, n_queries=3, depth=2))
    assert tuple(pooler(torch.randn(2, 5, 16)).shape) == (2, 3, 16)
    with pytest.raises(ConfigError):
        pooler(torch.randn(2, 0, 16))


def test_probe_config_validation():
    with pytest.raises(ConfigError):
        AttentiveProbeConfig(embed_dim=10, n_heads=4)
    with pytest.raises(ConfigError):
        AttentiveProbeConfig(embed_dim=16, n_heads=4, depth=0)


def test_pooler_then_mlp_head_shapes(probe_cfg):
    pooler, head = AttentivePooler(probe_cfg), MLPHead(16, 3)
    emb = TokenEmbeddings(tokens=torch.randn(4, 6, 16), grid_shape=(2, 3), registers=torch.zeros(4, 0, 16))
    assert tuple(head(pooler(emb)).shape) == (4, 3)
    assert MLPHead(16, 2).net[0].out_features == 4


def test_tokens_to_map_averages_time():
    tokens = torch.arange(2 * 2 * 3, dtype=torch.float32).reshape(1, 4, 3)
    fmap = tokens_to_map(tokens, (2, 2))
    assert tuple(fmap.shape) == (1, 3, 2, 2)
    torch.testing.assert_close(fmap[0, :, 0, 1], tokens[0, 1])
    clip = torch.cat([torch.zeros(1, 4, 3), torch.ones(1, 4, 3)], dim=1)
    torch.testing.assert_close(tokens_to_map(clip, (2, 2, 2)), torch.full((1, 3, 2, 2), 0.5))


def test_dpt_decoder_full_resolution(tiny_cfg):
    torch.manual_seed(0)
    encoder = ViTEncoder(tiny_cfg)
    emb = encoder(torch.rand(2, 6, 28, 28), return_layers=feature_taps(tiny_cfg.depth))
    assert len(emb.layers) == 4
    decoder = DPTDecoder(DPTConfig(embed_dim=64, features=8, layer_channels=(4, 8, 8, 8), out_channels=2))
    out = dpt_decode(emb, decoder, (28, 28))
    assert tuple(out.shape) == (2, 2, 28, 28)
    out.mean().backward()
    assert encoder.patch_embed.weight.grad is not None


def test_dpt_decoder_validation():
    decoder = DPTDecoder(DPTConfig(embed_dim=8, features=4, layer_channels=(4, 4, 4, 4), activation="identity"))
    levels = [torch.randn(1, 4, 8) for _ in range(3)]
    with pytest.raises(ConfigError):
        dpt_decode(levels, decoder, (8, 8), grid=(2, 2))
    with pytest.raises(ConfigError):
        dpt_decode(levels + [levels[0]], decoder, (8, 8))
    assert tuple(dpt_decode(levels + [levels[0]], decoder, (8, 8), grid=(2, 2)).shape) == (1, 2, 8, 8)
    with pytest.raises(ConfigError):
        DPTConfig(embed_dim=8, activation="tanh")
    with pytest.raises(ConfigError):
        DPTConfig(embed_dim=8, layer_channels=(4, 4, 4))
