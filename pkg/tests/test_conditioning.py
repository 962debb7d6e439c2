import numpy as np
import pytest
import torch

from slotflow import conditioning as cond
from slotflow.tensorio import read_tensor, write_tensor

GOLDEN = __file__.rsplit("/", 1)[0] + "/golden"


def rand(shape, seed=0, dtype=torch.float64):
    return torch.tensor(np.random.default_rng(seed).normal(size=shape), dtype=dtype)


class TestGateSchedule:
    def test_linear_endpoints_and_interior(self):
        assert cond.gate_schedule(torch.tensor(1.0)).item() == 1.0
        assert cond.gate_schedule(torch.tensor(0.0)).item() == 0.0
        assert cond.gate_schedule(torch.tensor(0.3)).item() == pytest.approx(0.3)

    def test_constant_kind(self):
        w = cond.gate_schedule(torch.tensor([0.1, 0.9]), kind="constant:0.4")
        assert torch.all(w == 0.4)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            cond.gate_schedule(torch.tensor(1.5))
        with pytest.raises(ValueError):
            cond.gate_schedule(torch.tensor(0.5), kind="bogus")


class TestGateTokens:
    def test_extremes(self):
        c_id, c_img = rand((1, 3, 4), 1), rand((1, 2, 4), 2)
        gid, gim = cond.gate_tokens(c_id, c_img, torch.tensor(1.0))
        assert torch.all(gid == 0) and torch.equal(gim, c_img)
        gid, gim = cond.gate_tokens(c_id, c_img, torch.tensor(0.0))
        assert torch.equal(gid, c_id) and torch.all(gim == 0)

    def test_norm_scaling(self):
        c_id, c_img = rand((1, 3, 4), 3), rand((1, 2, 4), 4)
        gid, gim = cond.gate_tokens(c_id, c_img, torch.tensor(0.25))
        assert gid.norm().item() == pytest.approx(0.75 * c_id.norm().item())
        assert gim.norm().item() == pytest.approx(0.25 * c_img.norm().item())

    def test_complementarity(self):
        c_id, c_img = rand((2, 3, 4), 5), rand((2, 2, 4), 6)
        w = torch.tensor([0.2, 0.7], dtype=torch.float64)
        gid, gim = cond.gate_tokens(c_id, c_img, w)
        assert (gid / (1 - w)[:, None, None] - c_id).abs().max() <= 1e-12
        assert (gim / w[:, None, None] - c_img).abs().max() <= 1e-12

    def test_invalid_gate_rejected(self):
        with pytest.raises(ValueError):
            cond.gate_tokens(rand((1, 1, 2)), rand((1, 1, 2)), torch.tensor(-0.1))


class TestFuseGlobal:
    def test_extremes_and_cancellation(self):
        g_vid, g_img = rand((2, 4), 7), rand((2, 4), 8)
        assert torch.equal(cond.fuse_global(g_vid, g_img, torch.tensor(0.0)), g_vid)
        assert torch.equal(cond.fuse_global(g_vid, g_img, torch.tensor(1.0)), g_img)
        out = cond.fuse_global(g_vid, -g_vid, torch.tensor(0.5))
        assert out.abs().max() <= 1e-12


class TestPrefixDropout:
    def test_p_zero_and_eval_identity(self):
        x = rand((2, 5, 4), 9)
        assert cond.prefix_dropout(x, 0.0) is x
        assert cond.prefix_dropout(x, 0.5, training=False) is x

    def test_whole_tokens_zeroed(self):
        x = torch.ones(4, 8, 3)
        gen = torch.Generator().manual_seed(0)
        out = cond.prefix_dropout(x, 0.5, generator=gen)
        per_token = out.sum(dim=2)
        assert set(per_token.flatten().tolist()) <= {0.0, 3.0}

    def test_survival_rate_monte_carlo(self):
        p, n, tokens = 0.05, 10_000, 8
        gen = torch.Generator().manual_seed(1)
        x = torch.ones(n, tokens, 1)
        out = cond.prefix_dropout(x, p, generator=gen)
        survived = out.sum().item()
        mean = (1 - p) * n * tokens
        sigma = (n * tokens * p * (1 - p)) ** 0.5
        assert abs(survived - mean) <= 3 * sigma

    def test_seeded_reproducible(self):
        x = rand((3, 6, 2), 10)
        a = cond.prefix_dropout(x, 0.3, generator=torch.Generator().manual_seed(7))
        b = cond.prefix_dropout(x, 0.3, generator=torch.Generator().manual_seed(7))
        assert torch.equal(a, b)

    def test_invalid_p_rejected(self):
        with pytest.raises(ValueError):
            cond.prefix_dropout(rand((1, 2, 2)), 1.0)


class TestFilm:
    def test_zero_init_identity(self):
        film = cond.Film(6).double()
        x, g = rand((2, 5, 6), 11), rand((2, 6), 12)
        assert torch.equal(film(x, g), x)

    def test_matches_affine_oracle(self):
        film = cond.Film(6).double()
        with torch.no_grad():
            for p in film.parameters():
                p.copy_(rand(p.shape, 13))
        x, g = rand((2, 5, 6), 14), rand((2, 6), 15)
        out = film(x, g)
        gamma = g @ film.gamma.weight.T + film.gamma.bias
        beta = g @ film.beta.weight.T + film.beta.bias
        ref = x * (1 + gamma[:, None]) + beta[:, None]
        assert (out - ref).abs().max() <= 1e-12


class TestLoraLinear:
    def test_zero_b_matches_frozen(self):
        layer = cond.LoraLinear(6, 4).double()
        x = rand((3, 6), 16)
        assert torch.equal(layer(x), layer.base(x))

    def test_full_rank_algebra(self):
        D = 4
        layer = cond.LoraLinear(D, D, rank=D, alpha=16.0).double()
        w_prime = rand((D, D), 17)
        with torch.no_grad():
            layer.lora_a.copy_(torch.eye(D))
            layer.lora_b.copy_(w_prime)
        x = rand((2, D), 18)
        ref = layer.base(x) + (16.0 / D) * x @ w_prime
        assert (layer(x) - ref).abs().max() <= 1e-12

    def test_matches_two_matmul_oracle(self):
        layer = cond.LoraLinear(5, 3, rank=2, alpha=8.0).double()
        with torch.no_grad():
            layer.lora_b.copy_(rand((2, 3), 19))
        x = rand((4, 5), 20)
        ref = layer.base(x) + 4.0 * (x @ layer.lora_a) @ layer.lora_b
        assert (layer(x) - ref).abs().max() <= 1e-12

    def test_disabled_has_no_adapters(self):
        layer = cond.LoraLinear(4, 4, enabled=False)
        assert not hasattr(layer, "lora_a")
        assert [n for n, p in layer.named_parameters() if p.requires_grad] == []

    def test_bad_rank_rejected(self):
        with pytest.raises(ValueError):
            cond.LoraLinear(4, 4, rank=0)


class TestAnchorEncoder:
    def test_zero_latent_zero_tokens(self):
        torch.manual_seed(0)
        enc = cond.AnchorEncoder(4, 8).double()
        with torch.no_grad():
            enc.embed.proj.bias.zero_()
            enc.proj.bias.zero_()
        c_img, _ = enc(torch.zeros(1, 4, 1, 4, 4, dtype=torch.float64))
        assert c_img.abs().max() <= 1e-12

    def test_duplicate_batch(self):
        torch.manual_seed(1)
        enc = cond.AnchorEncoder(4, 8).double()
        z = rand((1, 4, 1, 4, 4), 21)
        c, g = enc(torch.cat([z, z], dim=0))
        assert torch.equal(c[0], c[1]) and torch.equal(g[0], g[1])

    def test_matches_attention_pool_oracle(self):
        torch.manual_seed(2)
        enc = cond.AnchorEncoder(4, 8, n_tokens=2).double()
        z = rand((1, 4, 1, 4, 4), 22)
        c_img, g = enc(z)
        tokens = enc.embed(z).data[0]
        scores = enc.pool_queries.double() @ tokens.T / 8 ** 0.5
        pooled = torch.softmax(scores, dim=-1) @ tokens
        ref = enc.proj(pooled)
        assert (c_img[0] - ref).abs().max() <= 1e-10
        assert (g[0] - enc.summary(ref.mean(dim=0))).abs().max() <= 1e-10

    def test_multi_frame_rejected(self):
        enc = cond.AnchorEncoder(4, 8)
        with pytest.raises(ValueError):
            enc(torch.zeros(1, 4, 2, 4, 4))


def tiny_backbone(seed=0, **kw):
    torch.manual_seed(seed)
    args = dict(in_channels=2, dim=24, n_blocks=4, heads=4)
    args.update(kw)
    return cond.ToyBackbone(**args).double()


def backbone_inputs(seed=0, B=1, dim=24):
    rng = seed
    z = rand((B, 2, 4, 8, 8), rng)
    t = torch.full((B,), 0.3, dtype=torch.float64)
    prefix = rand((B, 8, dim), rng + 1)
    text = rand((B, 4, dim), rng + 2)
    g = rand((B, dim), rng + 3)
    return z, t, prefix, text, g


class TestToyBackbone:
    def test_output_shape(self):
        bb = tiny_backbone()
        z, t, prefix, text, g = backbone_inputs()
        assert bb(z, t, prefix, text, g).shape == z.shape

    def test_zero_init_independent_of_g_and_adapters(self):
        bb = tiny_backbone(1)
        z, t, prefix, text, g = backbone_inputs(10)
        out1 = bb(z, t, prefix, text, g)
        out2 = bb(z, t, prefix, text, torch.zeros_like(g))
        assert torch.equal(out1, out2)
        with torch.no_grad():
            for name, p in bb.named_parameters():
                if "lora_a" in name:
                    p.copy_(rand(p.shape, 99))
        out3 = bb(z, t, prefix, text, g)
        assert torch.equal(out1, out3)

    def test_duplicate_batch(self):
        bb = tiny_backbone(2)
        z, t, prefix, text, g = backbone_inputs(20, B=1)
        two = bb(torch.cat([z, z]), torch.cat([t, t]), torch.cat([prefix, prefix]),
                 torch.cat([text, text]), torch.cat([g, g]))
        assert (two[0] - two[1]).abs().max() <= 1e-12

    def test_film_on_last_half_only(self):
        bb = tiny_backbone(n_blocks=5)
        has_film = [blk.film is not None for blk in bb.blocks]
        assert has_film == [False, False, True, True, True]

    def test_frozen_trainable_split(self):
        bb = tiny_backbone(3)
        for name, p in bb.named_parameters():
            expected = any(m in name for m in ("lora_a", "lora_b", "film", "prefix_norm"))
            assert p.requires_grad == expected, name

    def test_pathway_exclusivity(self):
        # zero prefix + zero g: output independent of the reference inputs
        bb = tiny_backbone(4)
        z, t, _, text, _ = backbone_inputs(30)
        zeros_p = torch.zeros(1, 8, 24, dtype=torch.float64)
        g0 = torch.zeros(1, 24, dtype=torch.float64)
        out_a = bb(z, t, zeros_p, text, g0)
        out_b = bb(z, t, zeros_p.clone(), text, g0.clone())
        assert torch.equal(out_a, out_b)

    def test_golden_forward_stable(self):
        bb = tiny_backbone(42)
        z, t, prefix, text, g = backbone_inputs(40)
        out = bb(z, t, prefix, text, g).detach().numpy()
        path = GOLDEN + "/backbone_forward.slid"
        try:
            golden = read_tensor(path)
        except FileNotFoundError:
            write_tensor(path, out)
            golden = read_tensor(path)
        assert np.allclose(out, golden, atol=1e-12)


class TestEmbeddings:
    def test_time_embedding_shape_and_range(self):
        emb = cond.sincos_time_embedding(torch.tensor([0.0, 0.5, 1.0]), 16)
        assert emb.shape == (3, 16)
        assert emb.abs().max() <= 1.0

    def test_position_embedding_shape(self):
        coords = torch.tensor([[0, 0, 0], [1, 2, 3]])
        emb = cond.sincos_position_embedding(coords, 24)
        assert emb.shape == (2, 24)
        assert torch.isfinite(emb).all()

    def test_distinct_positions_distinct_embeddings(self):
        coords = torch.tensor([[0, 0, 0], [0, 0, 1], [0, 1, 0], [1, 0, 0]])
        emb = cond.sincos_position_embedding(coords, 24)
        for i in range(4):
            for j in range(i + 1, 4):
                assert not torch.equal(emb[i], emb[j])
