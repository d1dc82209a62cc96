import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gradcheck import autograd_grad, directional_fd, finite_difference_grad, relative_error
from vibra_sr.model import (ABLATIONS, ConfigError, HybridUNet, ModelConfig, SaFilm,
                            block_modulate, build_ablation, count_parameters, effective_blocks,
                            parameter_breakdown, pixelshuffle_1d, pixelunshuffle_1d,
                            selective_scan, shape_ledger, trace_shapes, zero_parameters)
from vibra_sr.objectives import StftResolution, training_loss

MICRO = dict(down_filters=(2, 2, 4), up_filters=(8, 8, 4), down_kernels=(3, 3, 3),
             up_kernels=(3, 3, 3), attn_heads=1, attn_ff_mult=1, ssm_state_dim=2)


def randomize(module, seed=0, scale=0.5):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


@pytest.fixture(scope="module")
def full_model():
    torch.manual_seed(0)
    return HybridUNet(ModelConfig()).eval()


# --- config -----------------------------------------------------------------

def test_default_config_matches_architecture_description():
    cfg = ModelConfig()
    assert cfg.down_filters == tuple(2 ** (5 + b) for b in (1, 2, 3))
    assert cfg.down_kernels == (65, 17, 7)
    assert cfg.up_filters == (512, 256, 4)
    assert cfg.up_kernels == (7, 17, 65)
    assert cfg.stride == 4 and cfg.depth == 3


def test_config_rejects_mismatched_lengths():
    with pytest.raises(ConfigError):
        ModelConfig(down_filters=(64, 128))
    with pytest.raises(ConfigError):
        ModelConfig(up_filters=(256, 256, 4))


def test_config_dict_roundtrip():
    cfg = ModelConfig.tiny()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


# --- blocks -----------------------------------------------------------------

def test_down_block_shapes(full_model):
    with torch.no_grad():
        h1 = full_model.down[0](torch.randn(1, 1, 8192))
        assert tuple(h1.shape[1:]) == (64, 2048)
        h2 = full_model.down[1](h1)
        assert tuple(h2.shape[1:]) == (128, 512)


def test_down_block_zero_input_zero_output(full_model):
    with torch.no_grad():
        out = full_model.down[0](torch.zeros(1, 1, 8192))
    assert torch.count_nonzero(out) == 0


def test_down_block_rejects_bad_length(full_model):
    with pytest.raises(ValueError):
        full_model.down[0](torch.zeros(1, 1, 8191))


def test_up_block_shapes(full_model):
    with torch.no_grad():
        assert tuple(full_model.up[0](torch.randn(1, 256, 128)).shape[1:]) == (128, 512)
        assert tuple(full_model.up[2](torch.randn(1, 64, 2048)).shape[1:]) == (1, 8192)


def test_up_block_deterministic_without_dropout():
    torch.manual_seed(1)
    model = HybridUNet(ModelConfig.tiny(dropout_p=0.0)).train()
    x = torch.randn(1, 16, 8)
    np.testing.assert_array_equal(model.up[0](x).detach(), model.up[0](x).detach())


# --- pixelshuffle -----------------------------------------------------------

def test_pixelshuffle_example():
    x = torch.tensor([[[1, 2], [3, 4], [5, 6], [7, 8]]], dtype=torch.float64)
    out = pixelshuffle_1d(x, 4)
    np.testing.assert_array_equal(out[0, 0], [1, 3, 5, 7, 2, 4, 6, 8])


def test_pixelshuffle_index_formula():
    x = torch.randn(2, 12, 5)
    r = 3
    out = pixelshuffle_1d(x, r)
    for c in range(4):
        for t in range(5):
            for j in range(r):
                assert out[0, c, t * r + j] == x[0, c * r + j, t]


def test_pixelshuffle_identity_and_errors():
    x = torch.randn(1, 3, 7)
    assert torch.equal(pixelshuffle_1d(x, 1), x)
    with pytest.raises(ValueError):
        pixelshuffle_1d(x, 2)


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 6), t=st.integers(1, 9), r=st.sampled_from([1, 2, 4]), seed=st.integers(0, 999))
def test_pixelshuffle_is_permutation(c, t, r, seed):
    x = torch.randn(1, c * r, t, generator=torch.Generator().manual_seed(seed))
    y = pixelshuffle_1d(x, r)
    assert torch.equal(pixelunshuffle_1d(y, r), x)
    assert torch.equal(torch.sort(y.flatten()).values, torch.sort(x.flatten()).values)


# --- SAFiLM -----------------------------------------------------------------

def test_safilm_unit_gamma_is_identity():
    film = SaFilm(4, 4)
    x = torch.randn(2, 4, 16)
    out = film(x, gamma=torch.ones(2, 4, 4))
    assert torch.equal(out, x)


def test_safilm_initial_gamma_is_one():
    film = SaFilm(8, 4)
    x = torch.randn(1, 8, 32)
    assert torch.allclose(film(x), x)


def test_safilm_first_block_doubled():
    x = torch.randn(1, 3, 10)
    gamma = torch.ones(1, 2, 3)
    gamma[0, 0] = 2.0
    out = block_modulate(x, gamma)
    assert torch.equal(out[..., :5], 2 * x[..., :5])
    assert torch.equal(out[..., 5:], x[..., 5:])


def test_safilm_padding_for_indivisible_length():
    film = SaFilm(2, 4)
    pooled = film.pool(torch.arange(2 * 18, dtype=torch.float32).reshape(1, 2, 18))
    assert pooled.shape == (1, 4, 2)
    # blocks of ceil(18/4)=5 frames; last block holds frames 15..17 plus zero padding
    assert pooled[0, 3, 0] == 17


def test_effective_blocks_halves_for_short_sequences():
    assert effective_blocks(2048, 8) == 8
    assert effective_blocks(16, 8) == 4
    assert effective_blocks(4, 8) == 1


def test_safilm_rejects_nonfinite_gamma():
    film = SaFilm(2, 2)
    with torch.no_grad():
        film.to_gamma.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError):
        film(torch.randn(1, 2, 8))


def test_safilm_gradient_matches_finite_differences():
    torch.manual_seed(0)
    film = randomize(SaFilm(4, 4, layers=1, heads=2).double(), seed=3)
    x = torch.randn(1, 4, 16, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 16, dtype=torch.float64)
    params = [x] + list(film.parameters())
    assert sum(p.numel() for p in film.parameters()) <= 1000
    fn = lambda: (film(x) * w).sum()
    fd = finite_difference_grad(fn, params)
    ad = autograd_grad(fn, params)
    assert relative_error(ad, fd) < 1e-4


# --- selective scan ---------------------------------------------------------

def test_scan_zero_state_matrix_passthrough():
    d, s, l = 3, 2, 6
    u = torch.randn(d, l, dtype=torch.float64)
    y = selective_scan(u, torch.full((d, l), 0.1, dtype=torch.float64), torch.zeros(d, s, dtype=torch.float64),
                       torch.randn(s, l, dtype=torch.float64), torch.zeros(s, l, dtype=torch.float64),
                       torch.ones(d, dtype=torch.float64))
    assert torch.allclose(y, u)


def test_scan_scalar_recurrence():
    a = math.log(0.5)                       # exp(delta * A) = 0.5 with delta = 1
    b_bar_scale = (0.5 - 1.0) / a           # zero-order-hold input gain
    L = 8
    u = torch.ones(1, L, dtype=torch.float64)
    y = selective_scan(u, torch.ones(1, L, dtype=torch.float64), torch.tensor([[a]], dtype=torch.float64),
                       torch.full((1, L), 1.0 / b_bar_scale, dtype=torch.float64),
                       torch.ones(1, L, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
    # oracle: h_l = 0.5 h_{l-1} + 1
    h, expected = 0.0, []
    for _ in range(L):
        h = 0.5 * h + 1.0
        expected.append(h)
    np.testing.assert_allclose(y[0].numpy(), expected, rtol=1e-12)
    assert expected[:4] == [1, 1.5, 1.75, 1.875]


def test_scan_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        selective_scan(torch.ones(1, 2), torch.zeros(1, 2), -torch.ones(1, 1), torch.ones(1, 2), torch.ones(1, 2))


def test_scan_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    D, N, L = 2, 2, 5
    u = torch.randn(D, L, generator=g, dtype=torch.float64, requires_grad=True)
    delta = (0.2 + torch.rand(D, L, generator=g, dtype=torch.float64)).requires_grad_()
    A = (-0.5 - torch.rand(D, N, generator=g, dtype=torch.float64)).requires_grad_()
    B = torch.randn(N, L, generator=g, dtype=torch.float64, requires_grad=True)
    C = torch.randn(N, L, generator=g, dtype=torch.float64, requires_grad=True)
    Dk = torch.randn(D, generator=g, dtype=torch.float64, requires_grad=True)
    w = torch.randn(D, L, generator=g, dtype=torch.float64)
    params = [u, delta, A, B, C, Dk]
    fn = lambda: (selective_scan(u, delta, A, B, C, Dk) * w).sum()
    assert relative_error(autograd_grad(fn, params), finite_difference_grad(fn, params)) < 1e-4


def test_scan_long_sequence_stays_bounded():
    g = torch.Generator().manual_seed(1)
    D, N, L = 2, 4, 10_000
    u = torch.rand(1, D, L, generator=g) * 2 - 1
    delta = torch.full((1, D, L), 1e-2)
    A = -torch.rand(D, N, generator=g) - 0.1
    B = torch.rand(1, N, L, generator=g) * 2 - 1
    C = torch.rand(1, N, L, generator=g) * 2 - 1
    y = selective_scan(u, delta, A, B, C, torch.ones(D))
    assert torch.isfinite(y).all()
    # |h| <= max|B_bar u| / (1 - max|A_bar|) per state, summed over N states through |C| <= 1
    a_bar = torch.exp(delta[0, 0, 0] * A)
    bound = N * (delta[0, 0, 0] / (1 - a_bar.max())).item() + 1.0
    assert y.abs().max().item() <= bound


# --- full network -----------------------------------------------------------

def test_forward_preserves_length_and_shape_ledger(full_model):
    taps = trace_shapes(full_model, 8192)
    assert taps == shape_ledger(full_model.cfg, 8192)
    assert taps == [("down1", (64, 2048)), ("down2", (128, 512)), ("down3", (256, 128)),
                    ("bottleneck", (256, 128)), ("up1", (128, 512)), ("up2", (64, 2048)),
                    ("up3", (1, 8192))]
    with torch.no_grad():
        assert full_model(torch.randn(2, 8192)).shape == (2, 8192)


@settings(max_examples=10, deadline=None)
@given(k=st.integers(1, 24))
def test_shape_ledger_any_length(k):
    model = HybridUNet(ModelConfig.tiny())
    assert trace_shapes(model, 64 * k) == shape_ledger(model.cfg, 64 * k)


def test_forward_rejects_indivisible_length():
    with pytest.raises(ValueError):
        HybridUNet(ModelConfig.tiny())(torch.zeros(1, 100))


@pytest.mark.parametrize("kind", ["mamba", "performer_like_attention", "none"])
def test_zero_weights_give_identity(kind):
    model = zero_parameters(HybridUNet(ModelConfig.tiny(bottleneck_kind=kind))).eval()
    x = torch.randn(3, 512)
    with torch.no_grad():
        assert torch.equal(model(x), x)


def test_seeded_models_are_identical():
    outs = []
    for _ in range(2):
        torch.manual_seed(42)
        m = HybridUNet(ModelConfig.tiny()).eval()
        with torch.no_grad():
            outs.append(m(torch.ones(1, 256)))
    assert torch.equal(outs[0], outs[1])


def test_micro_model_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = randomize(HybridUNet(ModelConfig.tiny(**MICRO)).double(), seed=5, scale=0.3).eval()
    params = list(model.parameters())
    assert sum(p.numel() for p in params) <= 1000
    g = torch.Generator().manual_seed(2)
    x = torch.randn(1, 512, generator=g, dtype=torch.float64)
    y = torch.randn(1, 512, generator=g, dtype=torch.float64)
    res = (StftResolution(128, 32, 128),)
    fn = lambda: training_loss(model(x), y, res)[0]
    assert relative_error(autograd_grad(fn, params), finite_difference_grad(fn, params)) < 1e-4


def test_tiny_model_gradient_per_parameter_group():
    torch.manual_seed(0)
    model = randomize(HybridUNet(ModelConfig.tiny()).double(), seed=7, scale=0.3).eval()
    g = torch.Generator().manual_seed(3)
    x = torch.randn(1, 512, generator=g, dtype=torch.float64)
    y = torch.randn(1, 512, generator=g, dtype=torch.float64)
    res = (StftResolution(128, 32, 128),)
    fn = lambda: training_loss(model(x), y, res)[0]
    groups = {}
    for name, p in model.named_parameters():
        groups.setdefault(name.split(".")[0] + "." + name.split(".")[1], []).append(p)
    for name, params in groups.items():
        dirs = [torch.randn(p.shape, generator=g, dtype=torch.float64) for p in params]
        grads = autograd_grad(fn, params)
        analytic = sum((gr * d).sum().item() for gr, d in zip(grads, dirs))
        numeric = directional_fd(fn, params, dirs)
        assert abs(analytic - numeric) <= 1e-4 * max(abs(numeric), abs(analytic), 1e-8), name


# --- parameter counting -----------------------------------------------------

def test_single_conv_parameter_count(full_model):
    conv = full_model.down[0].conv
    assert sum(p.numel() for p in conv.parameters()) == 64 * 65 + 64 == 4224


def test_remove_safilm_subtracts_exactly_safilm_totals():
    cfg = ModelConfig()
    breakdown = parameter_breakdown(cfg)
    assert count_parameters(cfg) - count_parameters(build_ablation(cfg, "remove_safilm")) == breakdown["safilm"]


def test_count_is_sum_of_blocks():
    cfg = ModelConfig()
    b = parameter_breakdown(cfg)
    total = sum(v for k, v in b.items() if k != "safilm")
    assert total == count_parameters(cfg)


def test_ablation_ordering():
    cfg = ModelConfig()
    full = count_parameters(build_ablation(cfg, "full"))
    no_film = count_parameters(build_ablation(cfg, "remove_safilm"))
    attn = count_parameters(build_ablation(cfg, "replace_mamba_with_attention"))
    assert no_film < full < attn


def test_build_ablation_variants():
    cfg = ModelConfig.tiny()
    assert build_ablation(cfg, "full") == cfg
    assert build_ablation(cfg, "remove_safilm").safilm_enabled is False
    assert build_ablation(cfg, "replace_mamba_with_attention").bottleneck_kind == "performer_like_attention"
    with pytest.raises(ConfigError):
        build_ablation(cfg, "bogus")
    assert set(ABLATIONS) == {"full", "replace_mamba_with_attention", "remove_safilm"}


def test_performer_bottleneck_runs_and_is_deterministic():
    torch.manual_seed(0)
    cfg = ModelConfig.tiny(bottleneck_kind="performer_like_attention")
    m = HybridUNet(cfg).eval()
    x = torch.randn(1, 1024)
    with torch.no_grad():
        assert torch.equal(m(x), m(x))
