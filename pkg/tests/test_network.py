import numpy as np
import pytest
import torch

from aortaseg import network
from aortaseg.network import (AttentionGate3D, UNetSpec, attention_gate,
                              build_unet, load_checkpoint, normalize_input,
                              save_checkpoint, unet_forward)
from aortaseg.volume import Volume3D


def conv_params(k, cin, cout, bias=True):
    return k ** 3 * cin * cout + (cout if bias else 0)


def block_params(cin, cout):
    # two 3x3x3 convs with bias + two affine instance norms
    return conv_params(3, cin, cout) + 2 * cout + conv_params(3, cout, cout) + 2 * cout


class TestBuildUnet:
    def test_parameter_count_closed_form(self):
        spec = UNetSpec(num_classes=3, depth=2, base_channels=8, attention=False)
        model = build_unet(spec, 0)
        expected = (block_params(1, 8) + block_params(8, 16)   # encoder
                    + block_params(16 + 8, 8)                  # decoder
                    + conv_params(1, 8, 3))                    # head
        assert sum(p.numel() for p in model.parameters()) == expected

    def test_attention_adds_gate_parameters(self):
        spec = UNetSpec(num_classes=3, depth=2, base_channels=8, attention=True)
        model = build_unet(spec, 0)
        gate = (conv_params(1, 8, 4, bias=False)   # W_x
                + conv_params(1, 16, 4)            # W_g + b_g
                + conv_params(1, 4, 3))            # psi + b_psi
        plain = sum(p.numel() for p in build_unet(
            UNetSpec(num_classes=3, depth=2, base_channels=8,
                     attention=False), 0).parameters())
        assert sum(p.numel() for p in model.parameters()) == plain + gate

    def test_same_seed_identical(self):
        spec = UNetSpec(depth=2, base_channels=4)
        a, b = build_unet(spec, 11), build_unet(spec, 11)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_no_gates_when_attention_false(self):
        model = build_unet(UNetSpec(depth=2, base_channels=4, attention=False), 0)
        assert not any("gates" in name for name, _ in model.named_parameters())

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            UNetSpec(depth=1)
        with pytest.raises(ValueError):
            UNetSpec(num_classes=1)


class TestAttentionGate:
    def test_saturated_bias_passthrough(self):
        gate = AttentionGate3D(1, 1, 1, 1)
        with torch.no_grad():
            gate.psi.weight.zero_()
            gate.psi.bias.fill_(20.0)
        x = torch.rand(1, 1, 4, 4, 4)
        g = torch.rand(1, 1, 4, 4, 4)
        gated, alpha = attention_gate(x, g, gate)
        assert torch.all((alpha - 1.0).abs() <= 1e-8)
        assert torch.allclose(gated, x, atol=1e-7)

    def test_saturated_bias_zero_out(self):
        gate = AttentionGate3D(1, 1, 1, 1)
        with torch.no_grad():
            gate.psi.weight.zero_()
            gate.psi.bias.fill_(-20.0)
        x = torch.rand(1, 1, 4, 4, 4)
        gated, alpha = attention_gate(x, torch.rand(1, 1, 4, 4, 4), gate)
        assert torch.all(alpha.abs() <= 1e-8)
        assert torch.all(gated.abs() <= 1e-7)

    def test_scalar_oracle_2x2x2(self):
        gate = AttentionGate3D(1, 1, 1, 1).double()
        wx, wg, bg, wpsi, bpsi = 0.7, -0.3, 0.2, 1.4, -0.5
        with torch.no_grad():
            gate.w_x.weight.fill_(wx)
            gate.w_g.weight.fill_(wg)
            gate.w_g.bias.fill_(bg)
            gate.psi.weight.fill_(wpsi)
            gate.psi.bias.fill_(bpsi)
        torch.manual_seed(0)
        x = torch.rand(1, 1, 2, 2, 2, dtype=torch.float64)
        g = torch.rand(1, 1, 2, 2, 2, dtype=torch.float64)
        gated, alpha = gate(x, g)
        for idx in np.ndindex(2, 2, 2):
            xi = x[0, 0][idx].item()
            gi = g[0, 0][idx].item()
            q = wpsi * max(wx * xi + wg * gi + bg, 0.0) + bpsi
            a = 1.0 / (1.0 + np.exp(-q))
            assert alpha[0, 0][idx].item() == pytest.approx(a, abs=1e-12)
            assert gated[0, 0][idx].item() == pytest.approx(a * xi, abs=1e-12)

    def test_alpha_in_unit_interval_random(self):
        torch.manual_seed(1)
        for _ in range(50):
            gate = AttentionGate3D(2, 4, 2, 3)
            with torch.no_grad():
                for p in gate.parameters():
                    p.copy_(torch.randn_like(p) * 10)
            x, g = torch.randn(1, 2, 4, 4, 4), torch.randn(1, 4, 2, 2, 2)
            _, alpha = gate(x, g)
            assert torch.all(alpha >= 0) and torch.all(alpha <= 1)

    def test_coarser_gating_signal_resampled(self):
        gate = AttentionGate3D(4, 8, 2, 3)
        x = torch.randn(1, 4, 8, 8, 8)
        g = torch.randn(1, 8, 4, 4, 4)
        gated, alpha = gate(x, g)
        assert gated.shape == x.shape
        assert alpha.shape[2:] == x.shape[2:]


class TestForward:
    def test_softmax_sums_to_one(self):
        model = build_unet(UNetSpec(num_classes=3, depth=2, base_channels=4), 0)
        out = unet_forward(model, np.random.default_rng(0)
                           .random((8, 8, 8), dtype=np.float32))
        assert out.shape == (3, 8, 8, 8)
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-6)

    def test_shape_contract_32cubed(self):
        model = build_unet(UNetSpec(num_classes=3, depth=3, base_channels=2), 0)
        out = unet_forward(model, np.zeros((32, 32, 32), np.float32))
        assert out.shape == (3, 32, 32, 32)

    def test_indivisible_dims_padded_and_restored(self):
        model = build_unet(UNetSpec(num_classes=2, depth=3, base_channels=2), 0)
        out = unet_forward(model, np.zeros((10, 9, 7), np.float32))
        assert out.shape == (2, 10, 9, 7)

    def test_head_permutation_equivariance(self):
        spec = UNetSpec(num_classes=3, depth=2, base_channels=4, attention=True)
        model = build_unet(spec, 3)
        x = np.random.default_rng(1).random((8, 8, 8), dtype=np.float32)
        base = unet_forward(model, x)
        perm = [2, 0, 1]
        with torch.no_grad():
            model.head.weight.copy_(model.head.weight[perm])
            model.head.bias.copy_(model.head.bias[perm])
        permuted = unet_forward(model, x)
        np.testing.assert_allclose(permuted, base[perm], atol=1e-6)

    def test_deterministic_eval(self):
        model = build_unet(UNetSpec(depth=2, base_channels=4), 0)
        x = np.random.default_rng(2).random((8, 8, 8), dtype=np.float32)
        np.testing.assert_array_equal(unet_forward(model, x),
                                      unet_forward(model, x))


class TestEquivalence:
    def test_forced_alpha_matches_plain(self):
        attn_spec = UNetSpec(num_classes=3, depth=2, base_channels=8,
                             attention=True)
        plain_spec = UNetSpec(num_classes=3, depth=2, base_channels=8,
                              attention=False)
        attn = build_unet(attn_spec, 5)
        plain = network.UNet3D(plain_spec)
        shared = {k: v for k, v in attn.state_dict().items()
                  if not k.startswith("gates.")}
        plain.load_state_dict(shared)
        attn.force_alpha = 1.0
        x = np.random.default_rng(3).random((16, 16, 16), dtype=np.float32)
        diff = np.abs(unet_forward(attn, x) - unet_forward(plain, x)).max()
        assert diff < 1e-6


class TestNormalize:
    def test_window_endpoints(self):
        v = Volume3D(np.array([[[-200.0, 500.0]]], np.float32), (1, 1, 1))
        out = normalize_input(v, (-200, 500))
        assert out[0, 0, 0] == 0.0 and out[0, 0, 1] == 1.0

    def test_midpoint(self):
        v = Volume3D(np.full((1, 1, 1), 150.0, np.float32), (1, 1, 1))
        assert normalize_input(v, (-200, 500))[0, 0, 0] == pytest.approx(0.5)

    def test_clamping(self):
        v = Volume3D(np.array([[[-1024.0, 3000.0]]], np.float32), (1, 1, 1))
        out = normalize_input(v)
        assert out[0, 0, 0] == 0.0 and out[0, 0, 1] == 1.0

    def test_invalid_window(self):
        v = Volume3D(np.zeros((1, 1, 1), np.float32), (1, 1, 1))
        with pytest.raises(ValueError):
            normalize_input(v, (5, 5))


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = build_unet(UNetSpec(depth=2, base_channels=4), 9)
        save_checkpoint(tmp_path / "m.pt", model, epoch=17)
        loaded, epoch = load_checkpoint(tmp_path / "m.pt")
        assert epoch == 17
        assert loaded.spec == model.spec
        for pa, pb in zip(model.parameters(), loaded.parameters()):
            assert torch.equal(pa, pb)
