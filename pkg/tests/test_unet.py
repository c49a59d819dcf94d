import numpy as np
import pytest

from retina_ssl.tensor import RngStream, ShapeError, Tensor
from retina_ssl.train import load_into
from retina_ssl.unet import UNetConfig, build_unet


@pytest.fixture(scope="module")
def model():
    return build_unet(UNetConfig(), RngStream(0))


def _x(shape, seed=0):
    return np.random.default_rng(seed).random(shape).astype(np.float32)


def test_default_widths():
    cfg = UNetConfig()
    assert cfg.encoder_widths == [16, 32, 64, 128]
    assert cfg.feature_channels == 128
    assert UNetConfig(decoder_widths=(16, 8, 4)).resolved_decoder_widths == [16, 8, 4]


def test_bad_decoder_widths_rejected():
    with pytest.raises(ValueError):
        UNetConfig(decoder_widths=(16, 8))


def test_forward_shape_and_range(model):
    x = _x((1, 3, 128, 128))
    y = model.forward(x)
    assert y.shape == (1, 1, 128, 128)
    assert y.data.min() >= 0 and y.data.max() <= 1
    # batch statistics keep logits moderate so f32 does not round to 0 or 1
    t = model.clone().forward(x, train=True).data
    assert t.min() > 0 and t.max() < 1


def test_bottleneck_shapes(model):
    assert model.encoder_features(_x((1, 3, 64, 64))).shape == (1, 128, 8, 8)
    assert model.encoder_features(_x((1, 3, 128, 128))).shape == (1, 128, 16, 16)


def test_indivisible_height_rejected(model):
    with pytest.raises(ShapeError, match="divisible by 8"):
        model.forward(_x((1, 3, 100, 96)))


def test_wrong_channel_count_rejected(model):
    with pytest.raises(ShapeError):
        model.forward(_x((1, 1, 16, 16)))


def _level_count(cin, cout):
    conv = lambda i, o, k: i * o * k * k + o  # noqa: E731
    bn = 2 * cout
    return conv(cin, cout, 3) + bn + conv(cout, cout, 3) + bn + conv(cin, cout, 1) + bn


def _expected_count(enc, dec, skip_convs=False):
    total, cin = 0, 3
    for w in enc:
        total += _level_count(cin, w)
        cin = w
    for d, w in enumerate(dec):
        skip = enc[-2 - d]
        total += cin * w * 4 + w
        if skip_convs:
            total += skip * skip * 9 + skip + 2 * skip
        total += _level_count(skip + w, w)
        cin = w
    return total + cin + 1


def test_parameter_count_regression():
    m = build_unet(UNetConfig(), RngStream(1))
    assert m.parameter_count() == _expected_count([16, 32, 64, 128], [64, 32, 16]) == 506049


def test_parameter_count_other_configs():
    cfg = UNetConfig(decoder_widths=(16, 8, 4), conv_skip_connections=True)
    m = build_unet(cfg, RngStream(1))
    assert m.parameter_count() == _expected_count([16, 32, 64, 128], [16, 8, 4], skip_convs=True)


def test_eval_is_deterministic(model):
    x = _x((2, 3, 32, 32), 3)
    a = model.encoder_features(x).data
    b = model.encoder_features(x).data
    assert a.tobytes() == b.tobytes()


def test_train_and_eval_differ_on_shifted_input():
    m = build_unet(UNetConfig(), RngStream(2))
    x = _x((2, 3, 16, 16)) * 5 + 3
    ev = m.forward(Tensor(x), train=False).data
    tr = m.clone().forward(Tensor(x), train=True).data
    assert not np.allclose(ev, tr)


def test_residual_branch_is_live():
    m = build_unet(UNetConfig(), RngStream(4))
    x = _x((1, 3, 16, 16), 5)
    before = m.predict(x)
    for name in [n for n in m.params.tensors if n.endswith(".res.w")]:
        m.params[name].data[...] = 0
    assert not np.allclose(before, m.predict(x))


def test_loading_encoder_leaves_decoder_untouched():
    src = build_unet(UNetConfig(), RngStream(10))
    dst = build_unet(UNetConfig(), RngStream(11))
    decoder_before = {k: v.copy() for k, v in dst.params.state_dict("").items() if not k.startswith("encoder.")}
    state = src.encoder_params().state_dict("")
    load_into(dst, state, prefix="encoder.")
    after = dst.params.state_dict("")
    for k, v in state.items():
        assert after[k].tobytes() == v.tobytes()
    for k, v in decoder_before.items():
        assert after[k].tobytes() == v.tobytes()


def test_same_rng_gives_same_weights():
    a = build_unet(UNetConfig(), RngStream(7)).params.state_dict("")
    b = build_unet(UNetConfig(), RngStream(7)).params.state_dict("")
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
