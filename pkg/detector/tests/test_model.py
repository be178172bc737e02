import pytest
import torch

from latticewave_detector.model import CrackDetector


class TestConstruction:
    def test_too_few_time_steps(self):
        with pytest.raises(ValueError):
            CrackDetector(time_steps=32)

    def test_wrong_receiver_count(self):
        with pytest.raises(ValueError):
            CrackDetector(n_receivers=64)

    def test_bad_fusion_width(self):
        with pytest.raises(ValueError):
            CrackDetector(fusion_channels=(128, 250))


class TestForward:
    def test_full_scale_intermediates(self):
        shapes = CrackDetector(time_steps=2000).intermediate_shapes(batch=2)
        assert shapes["extractor"] == (2, 64, 81, 31)
        assert shapes["fusion1"] == (2, 128, 81, 1)
        assert shapes["receiver_grid"] == (2, 128, 9, 9)
        assert shapes["fusion2"] == (2, 256, 1, 1)
        assert shapes["pre_predictor"] == (2, 16, 4, 4)
        assert shapes["pre_output"] == (2, 4, 16, 16)
        assert shapes["output"] == (2, 16, 16)

    def test_output_in_unit_interval(self):
        model = CrackDetector(time_steps=64).eval()
        with torch.no_grad():
            y = model(torch.randn(3, 2, 81, 64))
        assert y.shape == (3, 16, 16)
        assert float(y.min()) > 0.0
        assert float(y.max()) < 1.0

    def test_zero_input_deterministic(self):
        model = CrackDetector(time_steps=64).eval()
        x = torch.zeros(1, 2, 81, 64)
        with torch.no_grad():
            a = model(x)
            b = model(x)
        assert torch.equal(a, b)

    def test_rejects_wrong_input_shape(self):
        model = CrackDetector(time_steps=64)
        with pytest.raises(ValueError):
            model(torch.zeros(1, 2, 81, 128))

    def test_time_conv_equals_genuine_1d(self):
        # a (1, k) 2D kernel over (B, C, R, T) must equal Conv1d per receiver row
        torch.manual_seed(0)
        conv2d = torch.nn.Conv2d(2, 5, (1, 7), padding=(0, 3))
        conv1d = torch.nn.Conv1d(2, 5, 7, padding=3)
        with torch.no_grad():
            conv1d.weight.copy_(conv2d.weight.squeeze(2))
            conv1d.bias.copy_(conv2d.bias)
        x = torch.randn(3, 2, 81, 50)
        with torch.no_grad():
            out2d = conv2d(x)
            rows = [conv1d(x[:, :, r, :]) for r in range(81)]
            out1d = torch.stack(rows, dim=2)
        assert torch.allclose(out2d, out1d, atol=1e-6)
