import numpy as np
import pytest
import torch

from vmfcomp.errors import ShapeMismatch
from vmfcomp.networks import (ArchitectureConfig, Encoder, Reconstructor, SegmentationHead,
                              UNetAutoencoder, WeakClassifier, count_parameters)


def conv(ci, co, k):
    return ci * co * k * k + co


def double_conv(ci, co):
    return conv(ci, co, 3) + 2 * co + conv(co, co, 3) + 2 * co


@pytest.fixture(scope="module")
def cfg():
    return ArchitectureConfig()


def finite_grads(module, out):
    module.zero_grad()
    out.square().mean().backward()
    grads = [p.grad for p in module.parameters()]
    return all(g is not None and torch.isfinite(g).all() for g in grads)


class TestEncoder:
    def test_shape(self, cfg):
        z = Encoder(cfg)(torch.rand(2, 1, 64, 64))
        assert z.shape == (2, 64, 32, 32)

    def test_deterministic_in_eval(self, cfg):
        enc = Encoder(cfg).eval()
        x = torch.rand(1, 1, 64, 64)
        assert torch.equal(enc(x), enc(x))

    def test_bad_input_size(self):
        with pytest.raises(ShapeMismatch):
            ArchitectureConfig(input_size=(63, 63))

    def test_wrong_runtime_shape(self, cfg):
        with pytest.raises(ShapeMismatch):
            Encoder(cfg)(torch.rand(1, 1, 32, 32))

    def test_features_are_signed(self, cfg):
        z = Encoder(cfg).eval()(torch.rand(1, 1, 64, 64)).detach()
        assert float(z.min()) < 0 < float(z.max())

    @pytest.mark.parametrize("stride,size", [(1, (32, 32)), (2, (64, 32)), (4, (64, 64))])
    def test_other_strides(self, stride, size):
        c = ArchitectureConfig(input_size=size, feature_stride=stride, feature_channels=16,
                               num_kernels=4, unet_widths=(8, 16, 32), head_width=8)
        z = Encoder(c)(torch.rand(1, 1, *size))
        assert z.shape == (1, 16, size[0] // stride, size[1] // stride)
        x = torch.rand(1, 1, *size)
        assert UNetAutoencoder(c)(x).shape == x.shape

    def test_grads_finite(self, cfg):
        enc = Encoder(cfg)
        assert finite_grads(enc, enc(torch.rand(2, 1, 64, 64)))


class TestReconstructor:
    def test_shape(self, cfg):
        assert Reconstructor(cfg)(torch.randn(2, 64, 32, 32)).shape == (2, 1, 64, 64)

    def test_zero_parameters_give_zero_image(self, cfg):
        rec = Reconstructor(cfg).eval()
        with torch.no_grad():
            for p in rec.parameters():
                p.zero_()
        assert torch.equal(rec(torch.randn(1, 64, 32, 32)), torch.zeros(1, 1, 64, 64))

    def test_linear_output_unbounded(self, cfg):
        rec = Reconstructor(cfg).eval()
        with torch.no_grad():
            rec.body[-1].bias.fill_(-3.0)
        assert float(rec(torch.randn(1, 64, 32, 32)).min()) < 0

    def test_parameter_count(self, cfg):
        expected = double_conv(64, 64) + 64 * 64 * 4 + 64 + double_conv(64, 64) + conv(64, 1, 1)
        assert count_parameters(Reconstructor(cfg)) == expected

    def test_grads_finite(self, cfg):
        rec = Reconstructor(cfg)
        assert finite_grads(rec, rec(torch.randn(2, 64, 32, 32)))


class TestSegmentationHead:
    def test_shape_and_range(self, cfg):
        torch.manual_seed(0)
        y = SegmentationHead(cfg)(torch.rand(2, 12, 32, 32) * 10)
        assert y.shape == (2, 3, 64, 64)
        assert float(y.min()) >= 0 and float(y.max()) <= 1

    def test_deterministic(self, cfg):
        head = SegmentationHead(cfg).eval()
        a = torch.rand(1, 12, 32, 32)
        assert torch.equal(head(a), head(a))

    def test_rejects_wrong_channels(self, cfg):
        with pytest.raises(ShapeMismatch):
            SegmentationHead(cfg)(torch.rand(1, 11, 32, 32))

    def test_parameter_count(self, cfg):
        expected = double_conv(12, 64) + 64 * 64 * 4 + 64 + double_conv(64, 64) + conv(64, 3, 1)
        assert count_parameters(SegmentationHead(cfg)) == expected

    def test_grads_finite(self, cfg):
        head = SegmentationHead(cfg)
        assert finite_grads(head, head(torch.rand(2, 12, 32, 32)))


class TestWeakClassifier:
    def test_from_segmentation(self, cfg):
        c = WeakClassifier(3, cfg.input_size, 3, cfg)(torch.rand(2, 3, 64, 64))
        assert c.shape == (2, 3)
        assert float(c.min()) >= 0 and float(c.max()) <= 1

    def test_from_activations(self, cfg):
        c = WeakClassifier(12, cfg.feature_size, 1, cfg)(torch.rand(2, 12, 32, 32))
        assert c.shape == (2, 1)

    def test_deterministic(self, cfg):
        clf = WeakClassifier(3, cfg.input_size, 3, cfg).eval()
        x = torch.rand(1, 3, 64, 64)
        assert torch.equal(clf(x), clf(x))

    def test_hidden_width(self, cfg):
        clf = WeakClassifier(3, cfg.input_size, 3, cfg)
        assert clf.fc[1].out_features == 16

    def test_parameter_count(self, cfg):
        widths = (3,) + cfg.classifier_channels
        expected = sum(conv(a, b, 4) + 2 * b for a, b in zip(widths, widths[1:]))
        expected += (64 * 2 * 2) * 16 + 16 + 16 * 3 + 3
        assert count_parameters(WeakClassifier(3, cfg.input_size, 3, cfg)) == expected

    def test_too_small(self, cfg):
        with pytest.raises(ShapeMismatch):
            WeakClassifier(3, (16, 16), 3, cfg)

    def test_grads_finite(self, cfg):
        clf = WeakClassifier(3, cfg.input_size, 3, cfg)
        assert finite_grads(clf, clf(torch.rand(2, 3, 64, 64)))


def test_config_round_trip(cfg):
    assert ArchitectureConfig.from_dict(cfg.to_dict()) == cfg


def test_parameter_counts_depend_only_on_config(cfg):
    torch.manual_seed(0)
    a = count_parameters(Encoder(cfg))
    torch.manual_seed(1)
    assert count_parameters(Encoder(ArchitectureConfig())) == a


def test_warns_when_fewer_channels_than_kernels():
    with pytest.warns(UserWarning):
        ArchitectureConfig(feature_channels=8, num_kernels=12)


def test_encoder_state_feeds_autoencoder(cfg):
    ae = UNetAutoencoder(cfg)
    enc = Encoder(cfg)
    enc.load_state_dict(ae.encoder.state_dict())
    ae.eval(), enc.eval()
    x = torch.rand(1, 1, 64, 64)
    np.testing.assert_array_equal(enc(x).detach(), ae.encoder(x).detach())
