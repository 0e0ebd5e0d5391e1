"""Tests for the U-Net/Res-Net generator."""

import pytest
import torch
from torch.autograd import gradcheck

from irsr.config import GeneratorConfig, NetworkMode
from irsr.errors import ConfigurationError, DimensionError, InputError
from irsr.generator import build_generator, count_parameters, to_signed, to_unit

from tests.conftest import toy_generator_config, toy_masks


class TestForward:
    """Shapes, ranges and input checks."""

    @pytest.mark.parametrize("mode", list(NetworkMode))
    def test_shape_and_range(self, make_generator, mode):
        gen = make_generator(mode)
        out = gen(torch.rand(2, 1, 16, 16) * 2 - 1, toy_masks(size=16))
        assert out.shape == (2, 1, 16, 16)
        assert out.abs().max() <= 1.0

    def test_non_square(self, make_generator):
        gen = make_generator()
        index = torch.randint(3, (1, 8, 12), generator=torch.Generator().manual_seed(0))
        masks = torch.nn.functional.one_hot(index, 3).permute(0, 3, 1, 2).float()
        assert gen(torch.zeros(1, 1, 8, 12), masks).shape == (1, 1, 8, 12)

    def test_default_architecture(self):
        gen = build_generator(GeneratorConfig())
        out = gen.eval()(torch.zeros(1, 1, 24, 24), toy_masks(batch=1, size=24))
        assert out.shape == (1, 1, 24, 24)
        assert len(gen.downs) == 3

    def test_not_divisible(self):
        gen = build_generator(GeneratorConfig(channel_schedule=(4, 4, 4, 4)))
        with pytest.raises(DimensionError):
            gen(torch.zeros(1, 1, 12, 12), toy_masks(batch=1, size=12))

    def test_cgan_requires_masks(self, make_generator):
        with pytest.raises(InputError):
            make_generator()(torch.zeros(1, 1, 16, 16))

    def test_misaligned_masks(self, make_generator):
        with pytest.raises(DimensionError):
            make_generator()(torch.zeros(1, 1, 16, 16), toy_masks(batch=1, size=8))

    def test_wrong_class_count(self, make_generator):
        with pytest.raises(DimensionError):
            make_generator()(torch.zeros(1, 1, 16, 16), toy_masks(batch=1, size=16)[:, :2])

    def test_wrong_channels(self, make_generator):
        with pytest.raises(DimensionError):
            make_generator()(torch.zeros(1, 3, 16, 16), toy_masks(batch=1, size=16))

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            build_generator({"channel_schedule": [8]})


class TestConstruction:
    """Seeding and parameter accounting."""

    def test_same_seed_same_weights(self, make_generator):
        a, b = make_generator(seed=3), make_generator(seed=3)
        for pa, pb in zip(a.parameters(), b.parameters(), strict=True):
            assert torch.equal(pa, pb)

    def test_seed_does_not_leak(self):
        torch.manual_seed(42)
        before = torch.rand(1)
        torch.manual_seed(42)
        build_generator(toy_generator_config(), seed=7)
        assert torch.equal(torch.rand(1), before)

    def test_parameter_count_depends_on_config_only(self):
        cfg = toy_generator_config()
        assert count_parameters(build_generator(cfg, seed=0)) == count_parameters(build_generator(cfg, seed=9))

    @pytest.mark.parametrize(
        "mode, expected", [(NetworkMode.UGAN, 540), (NetworkMode.CGAN, 3292)]
    )
    def test_one_level_parameter_count(self, mode, expected):
        a, b, k, hidden = 2, 3, 3, 4

        def conv(i, o):
            return 9 * i * o + o

        def norm(c):
            if mode is NetworkMode.UGAN:
                return 2 * c
            return 2 * c + 2 * (conv(k, hidden) + conv(hidden, c))

        def residual(c):
            return 2 * conv(c, c) + 2 * norm(c)

        down = conv(1, a) + residual(a)
        bridge = conv(a, b) + residual(b)
        up = conv(a + b, a) + norm(a) + residual(a)
        head = conv(a, 1)
        assert down + bridge + up + head == expected
        gen = build_generator(GeneratorConfig(mode=mode, channel_schedule=(a, b), cond_hidden=hidden))
        assert count_parameters(gen) == expected

    def test_conditioning_adds_parameters(self, make_generator):
        assert count_parameters(make_generator(NetworkMode.CGAN)) > count_parameters(
            make_generator(NetworkMode.UGAN)
        )

    def test_ugan_keys_subset_of_cgan(self, make_generator):
        cgan = set(make_generator(NetworkMode.CGAN).state_dict())
        ugan = set(make_generator(NetworkMode.UGAN).state_dict())
        assert ugan < cgan


class TestConditioning:
    """C-GAN vs U-GAN behaviour."""

    def test_ugan_ignores_masks(self, make_generator):
        gen = make_generator(NetworkMode.UGAN).eval()
        x = torch.rand(2, 1, 16, 16) * 2 - 1
        assert torch.equal(gen(x, toy_masks(seed=1)), gen(x, toy_masks(seed=2)))
        assert torch.equal(gen(x, toy_masks(seed=1)), gen(x))

    def test_cgan_uses_masks(self, make_generator):
        gen = make_generator(NetworkMode.CGAN).eval()
        x = torch.rand(2, 1, 16, 16) * 2 - 1
        assert (gen(x, toy_masks(seed=1)) - gen(x, toy_masks(seed=2))).abs().max() > 0

    @pytest.mark.parametrize("train_mode", [False, True])
    def test_neutral_cgan_equals_ugan(self, make_generator, train_mode):
        cgan = make_generator(NetworkMode.CGAN, seed=5)
        cgan.neutralize_conditioning()
        ugan = make_generator(NetworkMode.UGAN, seed=11)
        missing, _ = ugan.load_state_dict(cgan.state_dict(), strict=False)
        assert not missing
        cgan.train(train_mode)
        ugan.train(train_mode)

        x = torch.rand(2, 1, 16, 16) * 2 - 1
        diff = (cgan(x, toy_masks(seed=3)) - ugan(x)).abs().max()
        assert diff <= 1e-6


class TestGradients:
    """Finite-difference checks on a float64 toy generator."""

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck_input(self, seed):
        cfg = GeneratorConfig(channel_schedule=(2, 3), cond_hidden=2)
        gen = build_generator(cfg, seed=seed).double().eval()
        torch.manual_seed(seed)
        x = torch.randn(1, 1, 4, 4, dtype=torch.float64, requires_grad=True)
        masks = toy_masks(batch=1, size=4, seed=seed).double()
        assert gradcheck(lambda t: gen(t, masks), (x,), eps=1e-6, atol=1e-5, rtol=1e-3)

    @pytest.mark.parametrize(
        "name",
        [
            "downs.0.conv.weight",
            "ups.0.concat.conv.weight",
            "ups.0.res.norm1.scale_branch.0.weight",
            "downs.0.res.norm2.shift_branch.2.weight",
            "head.weight",
        ],
    )
    @pytest.mark.parametrize("seed", range(3))
    def test_gradcheck_parameter(self, name, seed):
        cfg = GeneratorConfig(channel_schedule=(2, 3), cond_hidden=2)
        gen = build_generator(cfg, seed=seed).double().eval()
        torch.manual_seed(seed)
        x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
        masks = toy_masks(batch=1, size=4, seed=seed).double()
        weight = gen.get_parameter(name).detach().clone().requires_grad_(True)

        def fn(w):
            return torch.func.functional_call(gen, {name: w}, (x, masks))

        assert gradcheck(fn, (weight,), eps=1e-6, atol=1e-5, rtol=1e-3)


class TestRangeHelpers:
    def test_round_trip(self):
        t = torch.tensor([0.0, 0.25, 1.0])
        assert torch.equal(to_signed(t), torch.tensor([-1.0, -0.5, 1.0]))
        assert torch.equal(to_unit(to_signed(t)), t)
