import numpy as np
import pytest
from hypothesis import given, strategies as st

from vidistill import model as M
from vidistill import tensor as T
from vidistill.errors import ConfigError, DimensionError

TINY = M.ArchConfig(height=8, width=8, widths=(3, 4, 4, 4, 4, 3), teacher_hidden=(8, 8, 8, 8))


def zeroed(params):
    out = {}
    for k, v in params.items():
        if k.endswith("bn_var") or k.endswith("bn_gamma"):
            out[k] = T.Tensor(np.ones(v.shape), requires_grad=v.requires_grad, dtype=v.dtype)
        else:
            out[k] = T.Tensor(np.zeros(v.shape), requires_grad=v.requires_grad, dtype=v.dtype)
    return out


@pytest.fixture(scope="module")
def model32():
    return M.AVDModel.create(0)


def test_encode_shape_and_range(model32):
    clip = np.random.default_rng(0).random((3, 32, 32, 32)).astype(np.float32)
    image = M.encode(model32.encoder, clip).data
    assert image.shape == (3, 32, 32)
    assert np.all(image > 0) and np.all(image < 1)


def test_decode_shape(model32):
    out = M.decode(model32.decoder, np.full((3, 32, 32), 0.5, np.float32)).data
    assert out.shape == (3, 32, 32, 32)
    assert np.all(out >= 0) and np.all(out <= 1)


@pytest.mark.parametrize("h,w", [(16, 16), (16, 32), (32, 16), (32, 32)])
def test_shape_round_trip(h, w):
    model = M.AVDModel.create(1, M.ArchConfig(height=h, width=w))
    clip = np.random.default_rng(h * w).random((3, 32, h, w)).astype(np.float32)
    assert M.decode(model.decoder, M.encode(model.encoder, clip)).shape == clip.shape


def test_batched_round_trip_in_training_mode():
    model = M.AVDModel.create(2, TINY)
    clips = np.random.default_rng(0).random((2, 3, 32, 8, 8)).astype(np.float32)
    image = M.encode(model.encoder, clips, training=True)
    assert image.shape == (2, 3, 8, 8)
    assert M.decode(model.decoder, image, training=True).shape == clips.shape
    assert M.discriminate(model.teacher, image).shape == (2,)


def test_zero_parameters_give_half():
    model = M.AVDModel.create(0, TINY)
    clip = np.random.default_rng(0).random((3, 32, 8, 8))
    np.testing.assert_array_equal(M.encode(zeroed(model.encoder), clip).data, 0.5)
    np.testing.assert_array_equal(M.decode(zeroed(model.decoder), np.zeros((3, 8, 8))).data, 0.5)
    assert M.discriminate(zeroed(model.teacher), np.zeros((3, 8, 8))).item() == 0.5


@given(st.floats(-1e4, 1e4))
def test_teacher_output_in_open_unit_interval(v):
    model = M.AVDModel.create(3, TINY)
    score = M.discriminate(model.teacher, np.full((3, 8, 8), v, np.float32)).item()
    assert 0.0 < score < 1.0


def test_encoder_rejects_bad_clips(model32):
    with pytest.raises(DimensionError):
        M.encode(model32.encoder, np.zeros((3, 16, 32, 32)))
    with pytest.raises(DimensionError):
        M.encode(model32.encoder, np.zeros((1, 32, 32, 32)))
    with pytest.raises(DimensionError):
        M.encode(model32.encoder, np.zeros((3, 32, 4, 4)))


def test_decoder_and_teacher_reject_bad_images(model32):
    with pytest.raises(DimensionError):
        M.decode(model32.decoder, np.zeros((2, 32, 32)))
    with pytest.raises(DimensionError):
        M.discriminate(model32.teacher, np.zeros((3, 16, 16)))


def test_layer_counts(model32):
    assert len([k for k in model32.encoder if k.endswith("kernel")]) == 5
    assert len([k for k in model32.decoder if k.endswith("kernel")]) == 5
    assert len([k for k in model32.teacher if k.endswith("weight")]) == 5
    assert model32.encoder["encoder.0.kernel"].shape == (16, 3, 3, 5, 5)


def test_init_deterministic_and_seed_dependent():
    a, b, c = (M.AVDModel.create(s, TINY).all_params() for s in (5, 5, 6))
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a if a[k].requires_grad and "kernel" in k)


def test_init_batchnorm_defaults(model32):
    for k, v in model32.encoder.items():
        if k.endswith("bn_gamma"):
            np.testing.assert_array_equal(v.data, 1.0)
        if k.endswith("bn_beta"):
            np.testing.assert_array_equal(v.data, 0.0)


def test_he_variance_on_large_layers(model32):
    w = model32.teacher["teacher.0.weight"].data
    assert abs(w.var() / (2.0 / w.shape[0]) - 1.0) < 0.2
    k = model32.encoder["encoder.1.kernel"].data
    fan_in = int(np.prod(k.shape[1:]))
    assert abs(k.var() / (2.0 / fan_in) - 1.0) < 0.2


def test_eval_mode_is_pure(model32):
    clip = np.random.default_rng(9).random((3, 32, 32, 32)).astype(np.float32)
    before = {k: v.data.copy() for k, v in model32.encoder.items()}
    a = M.encode(model32.encoder, clip).data
    b = M.encode(model32.encoder, clip).data
    assert a.tobytes() == b.tobytes()
    assert all(np.array_equal(before[k], v.data) for k, v in model32.encoder.items())


def test_from_params_groups_by_prefix():
    model = M.AVDModel.create(0, TINY)
    again = M.AVDModel.from_params(model.all_params())
    assert list(again.encoder) == list(model.encoder)
    assert list(again.teacher) == list(model.teacher)
    with pytest.raises(ConfigError):
        M.AVDModel.from_params({"mystery.0.w": T.Tensor([1.0])})


def test_arch_validation():
    with pytest.raises(ConfigError):
        M.ArchConfig(widths=(3, 8, 3)).validate()
    with pytest.raises(ConfigError):
        M.ArchConfig(kernel_hw=4).validate()
