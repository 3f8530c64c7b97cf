import numpy as np
import pytest

from mwae import arch
from mwae import tensor as T
from mwae.tensor import Rng, Tensor

# recorded at first build; parameter count is a pure function of the ModelSpec
GOLDEN_PARAMS = {"S3": 7576, "S5": 19864, "M3": 6510, "M5": 16942, "B3": 1843396}


def test_clu_compression_ratio_512():
    spec = arch.clu_spec(5, 512)
    assert spec.bottleneck_shape == (64, 64, 64)
    z = int(np.prod(spec.bottleneck_shape))
    x = 5 * 512 * 512
    assert (z, x) == (262144, 1310720)
    assert z * 5 == x  # ratio exactly 0.20


def test_clu_small_bottleneck_and_output_range():
    st = arch.build_clu_ae(5, 64, seed=1)
    assert st.spec.bottleneck_shape == (64, 8, 8)
    x = np.random.default_rng(0).random((2, 5, 64, 64)).astype(np.float32)
    z = arch.encode(st, x)
    assert z.shape == (2, 64, 8, 8)
    out = arch.forward(st, x)
    assert out.shape == x.shape
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_clu_param_count_by_hand():
    c = 5
    def conv(i, o, k): return o * i * k * k + o
    def bn(o): return 2 * o
    enc = [(c, 8), (8, 16), (16, 32), (32, 64)]
    dec = [(64, 32), (32, 16), (16, 8)]
    total = sum(conv(i, o, 3) + bn(o) for i, o in enc + dec) + conv(8, c, 1)
    assert arch.allocate(arch.clu_spec(c, 64)).n_parameters() == total == 49317


def test_clu_indivisible_size():
    with pytest.raises(arch.SpecError):
        arch.build_clu_ae(5, 60)


def test_b3_filters():
    spec = arch.ano_spec("B3", 4, 64)
    assert list(spec.encoder_filters) == [32, 64, 128, 256]
    assert list(spec.decoder_filters) == [128, 64, 32]


def test_s5_kernels_all_5x5():
    st = arch.allocate(arch.ano_spec("S5", 4, 32))
    for name, p in st.params.items():
        if name.endswith(".weight") and ".skip" not in name and not name.startswith("head"):
            assert p.shape[2:] == (5, 5), name


@pytest.mark.parametrize("variant", sorted(GOLDEN_PARAMS))
def test_param_count_golden(variant):
    assert arch.allocate(arch.ano_spec(variant, 4, 64)).n_parameters() == GOLDEN_PARAMS[variant]


def test_unknown_variant():
    with pytest.raises(arch.SpecError):
        arch.build_ano_ae("XL7", 4, 32)


def test_residual_zero_branch_is_relu():
    spec = arch.ModelSpec("residual", (3, 3, 3, 3), (3, 3, 3), 3, 3, (8, 8))
    st = arch.allocate(spec)
    assert "enc1.skip.weight" not in st.params  # identity skip when channels match
    for name in ("enc1.conv1", "enc1.conv2"):
        st.params[f"{name}.weight"].data[...] = 0
        st.params[f"{name}.bias"].data[...] = 0
    for name in ("enc1.bn1", "enc1.bn2"):
        st.params[f"{name}.beta"].data[...] = 0
    x = Tensor(np.random.default_rng(2).standard_normal((2, 3, 8, 8)).astype(np.float32))
    for mode in ("train", "eval"):
        out = arch.residual_block(st, "enc1", x, mode)
        np.testing.assert_array_equal(out.data, np.maximum(x.data, 0))


def test_he_init_constants_and_determinism():
    a = arch.build_ano_ae("M3", 4, 32, seed=5)
    b = arch.build_ano_ae("M3", 4, 32, seed=5)
    for name, p in a.params.items():
        assert p.data.tobytes() == b.params[name].data.tobytes()
        if name.endswith(".gamma"):
            assert np.all(p.data == 1)
        if name.endswith(".beta") or name.endswith(".bias"):
            assert np.all(p.data == 0)
    c = arch.build_ano_ae("M3", 4, 32, seed=6)
    assert a.params["enc0.conv1.weight"].data.tobytes() != c.params["enc0.conv1.weight"].data.tobytes()


def test_he_init_variance_b3_deep_kernel():
    st = arch.build_ano_ae("B3", 4, 64, seed=3)
    w = st.params["dec0.conv1.weight"].data  # 128 x 256 x 3 x 3
    fan_in = w.shape[1] * 9
    assert w.size >= 10_000
    assert abs(w.var() / (2.0 / fan_in) - 1) < 0.1
    w64 = st.params["enc2.conv1.weight"].data  # 128 x 64 x 3 x 3, fan_in 576
    assert w64.shape[1] * 9 == 576
    assert abs(w64.var() / (2.0 / 576) - 1) < 0.1


def test_forward_equals_decode_encode():
    st = arch.build_ano_ae("S3", 4, 32, seed=0)
    x = np.random.default_rng(4).random((3, 4, 32, 32)).astype(np.float32)
    a = arch.forward(st, x, "eval").data
    b = arch.decode(st, arch.encode(st, x, "eval"), "eval").data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, arch.forward(st, x, "eval").data)


def test_encode_shape_and_mismatch():
    st = arch.build_ano_ae("M5", 4, 32)
    assert arch.encode(st, np.zeros((1, 4, 32, 32))).shape == (1, 10, 4, 4)
    with pytest.raises(T.ShapeError):
        arch.encode(st, np.zeros((1, 5, 32, 32)))
    with pytest.raises(T.ShapeError):
        arch.decode(st, np.zeros((1, 10, 3, 3)))


@pytest.mark.parametrize("variant", ["clu", "S3", "M5"])
def test_train_forward_grads_finite(variant):
    st = arch.build_clu_ae(5, 32) if variant == "clu" else arch.build_ano_ae(variant, 4, 32)
    c = st.spec.input_channels
    x = Tensor(np.random.default_rng(5).random((2, c, 32, 32)).astype(np.float32))
    loss = T.mse_loss(x, arch.forward(st, x, "train", Rng(0)))
    loss.backward()
    for name, p in st.params.items():
        assert p.grad is not None, name
        assert p.grad.shape == p.shape
        assert np.all(np.isfinite(p.grad)), name


def test_checkpoint_roundtrip_bitexact(tmp_path):
    st = arch.build_ano_ae("S5", 4, 32, seed=9)
    x = Tensor(np.random.default_rng(6).random((2, 4, 32, 32)).astype(np.float32))
    arch.forward(st, x, "train", Rng(1))  # move running stats away from defaults
    arch.save_checkpoint(st, tmp_path / "m.mwck")
    back = arch.load_checkpoint(tmp_path / "m.mwck")
    assert back.spec == st.spec and back.rng_seed == 9
    for name in st.params:
        assert back.params[name].data.tobytes() == st.params[name].data.tobytes()
    for name in st.norm:
        assert back.norm[name].mean.tobytes() == st.norm[name].mean.tobytes()
        assert back.norm[name].var.tobytes() == st.norm[name].var.tobytes()
    raw = (tmp_path / "m.mwck").read_bytes()
    assert raw[:4] == b"MWCK"


def test_width_scale_spec():
    spec = arch.ano_spec("B3", 4, 64, width_scale=0.25)
    assert spec.encoder_filters == (8, 16, 32, 64)
    assert spec.decoder_filters == (32, 16, 8)
