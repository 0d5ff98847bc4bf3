"""Generator stack: forward evaluation, reverse-mode gradients, PRGW files."""

import numpy as np
import pytest

from genphase import generator as gen
from genphase.errors import DimensionError, FormatError, ModelValidationError


def linear_model(w, dtype=np.float64):
    """Single dense layer, weights given as the (in, out) matrix ``w``."""
    w = np.asarray(w, dtype=dtype)
    layers = (gen.dense(w.shape[1]),)
    weights = ({"w": w, "b": np.zeros(w.shape[1], dtype=dtype)},)
    return gen.GeneratorModel(layers=layers, weights=weights, input_dim=w.shape[0])


# ---------------------------------------------------------------------------
# straight-line reference evaluation (no shared code with the layer kernels)
# ---------------------------------------------------------------------------

def reference_forward(model, z):
    x = np.array(z, dtype=np.float64)
    for layer, wts in zip(model.layers, model.weights):
        if layer.kind == "dense":
            w = np.asarray(wts["w"], dtype=np.float64)
            b = np.asarray(wts["b"], dtype=np.float64)
            out = np.zeros(w.shape[1])
            for j in range(w.shape[1]):
                acc = b[j]
                for i in range(w.shape[0]):
                    acc += x[i] * w[i, j]
                out[j] = acc
            x = out
        elif layer.kind == "reshape":
            x = x.reshape(layer.shape)
        elif layer.kind == "upsample2x_nearest":
            h, w_, c = x.shape
            out = np.zeros((2 * h, 2 * w_, c))
            for i in range(2 * h):
                for j in range(2 * w_):
                    out[i, j] = x[i // 2, j // 2]
            x = out
        elif layer.kind == "conv2d":
            x = reference_conv2d(x, np.asarray(wts["k"], dtype=np.float64),
                                 np.asarray(wts["b"], dtype=np.float64), layer.stride)
        elif layer.kind == "batchnorm_inference":
            g = np.asarray(wts["gamma"], dtype=np.float64)
            be = np.asarray(wts["beta"], dtype=np.float64)
            mu = np.asarray(wts["mean"], dtype=np.float64)
            var = np.asarray(wts["var"], dtype=np.float64)
            x = g * (x - mu) / np.sqrt(var + wts["eps"]) + be
        elif layer.kind == "activation":
            if layer.activation == "relu":
                x = np.where(x > 0, x, 0.0)
            elif layer.activation == "tanh":
                x = np.tanh(x)
            elif layer.activation == "sigmoid":
                x = 1.0 / (1.0 + np.exp(-x))
            elif layer.activation == "elu":
                x = np.where(x > 0, x, np.exp(np.minimum(x, 0.0)) - 1.0)
    return x


def reference_conv2d(x, kern, bias, stride):
    h, w, cin = x.shape
    kh, kw, _, cout = kern.shape
    oh = int(np.ceil(h / stride))
    ow = int(np.ceil(w / stride))
    pad_top = max((oh - 1) * stride + kh - h, 0) // 2
    pad_left = max((ow - 1) * stride + kw - w, 0) // 2
    out = np.zeros((oh, ow, cout))
    for oi in range(oh):
        for oj in range(ow):
            for co in range(cout):
                acc = bias[co]
                for ki in range(kh):
                    for kj in range(kw):
                        ii = oi * stride + ki - pad_top
                        jj = oj * stride + kj - pad_left
                        if 0 <= ii < h and 0 <= jj < w:
                            for ci in range(cin):
                                acc += x[ii, jj, ci] * kern[ki, kj, ci, co]
                out[oi, oj, co] = acc
    return out


def fd_vjp(model, z, v, step=1e-5):
    """Central differences of <v, forward(z)> coordinate by coordinate."""
    g = np.zeros_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        fp = float(np.vdot(v, gen.forward(model, zp)))
        fm = float(np.vdot(v, gen.forward(model, zm)))
        g[i] = (fp - fm) / (2 * step)
    return g


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_identity_dense():
    model = linear_model(np.eye(2))
    out = gen.forward(model, np.array([0.3, -0.7]))
    np.testing.assert_allclose(out, [0.3, -0.7])


def test_forward_zero_weights_returns_bias():
    b = np.array([1.5, -2.0, 0.25], dtype=np.float64)
    layers = (gen.dense(3),)
    weights = ({"w": np.zeros((2, 3)), "b": b},)
    model = gen.GeneratorModel(layers=layers, weights=weights, input_dim=2)
    out = gen.forward(model, np.array([4.2, -9.9]))
    np.testing.assert_array_equal(out, b)


def test_forward_matches_straight_line_reference():
    model = gen.make_synthetic_generator(10, (16, 16, 1), seed=7, arch="conv",
                                         dtype=np.float64)
    z = np.random.default_rng(11).standard_normal(10)
    got = gen.forward(model, z)
    want = reference_forward(model, z)
    assert got.shape == (16, 16, 1)
    rel = np.linalg.norm(got - want) / np.linalg.norm(want)
    assert rel < 1e-12


def test_forward_rejects_wrong_latent_length():
    model = gen.make_synthetic_generator(6, (4, 4, 1), seed=0)
    with pytest.raises(DimensionError):
        gen.forward(model, np.zeros(7))


def test_forward_deterministic_bitwise():
    model = gen.make_synthetic_generator(8, (8, 8, 1), seed=3, arch="conv")
    z = np.random.default_rng(5).standard_normal(8)
    a = gen.forward(model, z)
    b = gen.forward(model, z)
    assert a.tobytes() == b.tobytes()


def test_batchnorm_inference_formula():
    rng = np.random.default_rng(17)
    x = rng.standard_normal(6)
    gamma, beta = rng.standard_normal(6), rng.standard_normal(6)
    mean, var = rng.standard_normal(6), rng.uniform(0.1, 2.0, 6)
    eps = 1e-5
    layers = (gen.batchnorm(6),)
    weights = ({"gamma": gamma, "beta": beta, "mean": mean, "var": var, "eps": eps},)
    model = gen.GeneratorModel(layers=layers, weights=weights, input_dim=6)
    out = gen.forward(model, x)
    np.testing.assert_allclose(out, gamma * (x - mean) / np.sqrt(var + eps) + beta,
                               rtol=1e-12)


def test_upsample_replicates_2x2_blocks():
    x = np.arange(8, dtype=np.float64).reshape(2, 2, 2)
    layers = (gen.reshape(2, 2, 2), gen.upsample2x())
    model = gen.GeneratorModel(layers=layers, weights=(None, None), input_dim=8)
    out = gen.forward(model, x.ravel())
    assert out.shape == (4, 4, 2)
    for i in range(4):
        for j in range(4):
            np.testing.assert_array_equal(out[i, j], x[i // 2, j // 2])


def test_conv2d_transpose_doubles_spatial_size():
    layers = (gen.reshape(3, 5, 2), gen.conv2d_transpose(4, 4, 2))
    weights = gen.init_weights(layers, 30, seed=1)
    model = gen.GeneratorModel(layers=layers, weights=weights, input_dim=30)
    out = gen.forward(model, np.ones(30))
    assert out.shape == (6, 10, 4)


def test_conv2d_stride2_halves_spatial_size():
    layers = (gen.reshape(6, 6, 1), gen.conv2d(3, 5, 2))
    model = gen.GeneratorModel(layers=layers,
                               weights=gen.init_weights(layers, 36, seed=2),
                               input_dim=36)
    assert gen.forward(model, np.zeros(36)).shape == (3, 3, 3)


# ---------------------------------------------------------------------------
# vjp
# ---------------------------------------------------------------------------

def test_vjp_linear_model_is_matrix_transpose():
    rng = np.random.default_rng(23)
    w = rng.standard_normal((4, 6))
    model = linear_model(w)
    z = rng.standard_normal(4)
    v = rng.standard_normal(6)
    np.testing.assert_allclose(gen.vjp(model, z, v), w @ v, rtol=1e-12)


def test_vjp_zero_cotangent():
    model = gen.make_synthetic_generator(5, (4, 4, 1), seed=9)
    out = gen.vjp(model, np.random.default_rng(2).standard_normal(5),
                  np.zeros((4, 4, 1)))
    np.testing.assert_array_equal(out, np.zeros(5))


def test_vjp_rejects_bad_cotangent_shape():
    model = gen.make_synthetic_generator(5, (4, 4, 1), seed=9)
    with pytest.raises(DimensionError):
        gen.vjp(model, np.zeros(5), np.zeros((4, 4, 2)))


@pytest.mark.parametrize("arch", ["mlp", "mlp_tanh", "conv", "dcgan"])
def test_vjp_matches_finite_differences(arch):
    model = gen.make_synthetic_generator(6, (8, 8, 1), seed=31, arch=arch,
                                         dtype=np.float64)
    rng = np.random.default_rng(37)
    z = rng.standard_normal(6)
    v = rng.standard_normal(model.output_shape)
    got = gen.vjp(model, z, v)
    want = fd_vjp(model, z, v)
    assert np.linalg.norm(got - want) / np.linalg.norm(want) < 1e-6


SINGLE_LAYER_CASES = [
    ("dense", (gen.dense(7),), 5),
    ("reshape", (gen.reshape(2, 3, 2),), 12),
    ("upsample", (gen.reshape(3, 3, 2), gen.upsample2x()), 18),
    ("conv_s1", (gen.reshape(5, 5, 2), gen.conv2d(3, 3, 1)), 50),
    ("conv_s2", (gen.reshape(6, 6, 2), gen.conv2d(3, 5, 2)), 72),
    ("convT_s2", (gen.reshape(3, 3, 2), gen.conv2d_transpose(3, 4, 2)), 18),
    ("convT_s1", (gen.reshape(3, 3, 2), gen.conv2d_transpose(3, 3, 1)), 18),
    ("batchnorm", (gen.batchnorm(9),), 9),
    ("relu", (gen.activation("relu"),), 9),
    ("tanh", (gen.activation("tanh"),), 9),
    ("sigmoid", (gen.activation("sigmoid"),), 9),
    ("elu", (gen.activation("elu"),), 9),
]


@pytest.mark.parametrize("name,layers,k", SINGLE_LAYER_CASES,
                         ids=[c[0] for c in SINGLE_LAYER_CASES])
def test_each_layer_kind_matches_finite_differences(name, layers, k):
    weights = gen.init_weights(layers, k, seed=41, dtype=np.float64)
    model = gen.GeneratorModel(layers=layers, weights=weights, input_dim=k)
    rng = np.random.default_rng(43)
    z = rng.standard_normal(k)
    v = rng.standard_normal(model.output_shape)
    got = gen.vjp(model, z, v)
    want = fd_vjp(model, z, v)
    assert np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12) < 1e-6


def test_vjp_linear_in_cotangent():
    model = gen.make_synthetic_generator(6, (8, 8, 1), seed=31, arch="conv",
                                         dtype=np.float64)
    rng = np.random.default_rng(47)
    z = rng.standard_normal(6)
    v1 = rng.standard_normal(model.output_shape)
    v2 = rng.standard_normal(model.output_shape)
    a, b = 0.37, -2.25
    lhs = gen.vjp(model, z, a * v1 + b * v2)
    rhs = a * gen.vjp(model, z, v1) + b * gen.vjp(model, z, v2)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_vjp_deterministic_bitwise():
    model = gen.make_synthetic_generator(6, (8, 8, 1), seed=31, arch="conv")
    rng = np.random.default_rng(53)
    z = rng.standard_normal(6)
    v = rng.standard_normal(model.output_shape)
    assert gen.vjp(model, z, v).tobytes() == gen.vjp(model, z, v).tobytes()


def test_relu_subgradient_zero_at_zero():
    layers = (gen.activation("relu"),)
    model = gen.GeneratorModel(layers=layers, weights=(None,), input_dim=3)
    g = gen.vjp(model, np.array([-1.0, 0.0, 2.0]), np.ones(3))
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_padded_generator_border_is_zero():
    model = gen.make_padded_generator(6, (4, 4, 1), (8, 8), seed=13)
    img = gen.forward(model, np.random.default_rng(1).standard_normal(6))
    assert img.shape == (8, 8, 1)
    interior = img[2:6, 2:6]
    assert np.all(interior > 0)
    border = img.copy()
    border[2:6, 2:6] = 0
    np.testing.assert_array_equal(border, np.zeros_like(border))


def test_orthogonal_init_singular_values_equal_gain():
    # every dense weight of the tanh stack is a scaled isometry: W W^T (tall
    # direction) equals gain^2 I, so all singular values are exactly the gain
    model = gen.make_synthetic_generator(10, (16, 16, 1), seed=3,
                                         arch="mlp_tanh")
    dense_weights = [w for w in model.weights if w is not None and "w" in w]
    assert len(dense_weights) == 2
    for wd in dense_weights:
        W = np.asarray(wd["w"], dtype=np.float64)
        fi, fo = W.shape
        gram = W @ W.T if fi <= fo else W.T @ W
        np.testing.assert_allclose(gram, 4.0 * np.eye(min(fi, fo)), atol=1e-5)


def test_mlp_tanh_output_range_and_roundtrip(tmp_path):
    model = gen.make_synthetic_generator(7, (8, 8, 1), seed=11,
                                         arch="mlp_tanh", hidden=24)
    img = gen.forward(model, np.random.default_rng(2).standard_normal(7))
    assert img.shape == (8, 8, 1)
    assert np.all(np.abs(img) <= 1.0)
    path = tmp_path / "tanh.prgw"
    gen.save_generator(model, path)
    loaded = gen.load_generator(path)
    z = np.random.default_rng(3).standard_normal(7)
    np.testing.assert_array_equal(gen.forward(loaded, z), gen.forward(model, z))


def test_init_weights_rejects_unknown_scheme():
    with pytest.raises(gen.ModelValidationError):
        gen.init_weights((gen.dense(4),), 2, seed=0, scheme="xavier")


# ---------------------------------------------------------------------------
# model validation and PRGW files
# ---------------------------------------------------------------------------

def test_load_trivial_chain(tmp_path):
    layers = (gen.dense(4), gen.activation("tanh"), gen.reshape(2, 2, 1))
    weights = gen.init_weights(layers, 2, seed=1)
    model = gen.GeneratorModel(layers=layers, weights=weights, input_dim=2)
    path = tmp_path / "tiny.prgw"
    gen.save_generator(model, path)
    loaded = gen.load_generator(path)
    assert loaded.input_dim == 2
    assert loaded.output_shape == (2, 2, 1)


def test_table_style_mnist_stack_roundtrip(tmp_path):
    # classic grayscale stack: MLP 1024 -> MLP 6272 -> reshape 7x7x128
    # -> upsample + conv 64 -> upsample + conv 1 -> tanh
    model = gen.make_synthetic_generator(40, (28, 28, 1), seed=5, arch="mnist")
    assert model.output_shape == (28, 28, 1)
    assert model.layers[0].units == 1024
    assert model.layers[3].units == 6272
    assert model.layers[6].shape == (7, 7, 128)
    path = tmp_path / "mnist.prgw"
    gen.save_generator(model, path)
    loaded = gen.load_generator(path)
    assert loaded.input_dim == 40
    assert loaded.output_shape == (28, 28, 1)
    z = np.random.default_rng(0).standard_normal(40)
    np.testing.assert_array_equal(gen.forward(loaded, z), gen.forward(model, z))


def test_prgw_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.prgw"
    path.write_bytes(b"NOPE\x01\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        gen.load_generator(path)


def test_prgw_rejects_bad_version(tmp_path):
    path = tmp_path / "bad.prgw"
    path.write_bytes(b"PRGW\x07\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        gen.load_generator(path)


def test_prgw_rejects_truncated_arrays(tmp_path):
    layers = (gen.dense(4),)
    model = gen.GeneratorModel(layers=layers,
                               weights=gen.init_weights(layers, 3, seed=1),
                               input_dim=3)
    path = tmp_path / "trunc.prgw"
    gen.save_generator(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-6])  # cut into the conv/dense weight payload
    with pytest.raises(ModelValidationError):
        gen.load_generator(path)


def test_shape_mismatch_in_chain_rejected():
    layers = (gen.dense(5), gen.reshape(2, 2, 1))  # 5 values cannot fill 2x2x1
    with pytest.raises(ModelValidationError):
        gen.GeneratorModel(layers=layers,
                           weights=gen.init_weights((gen.dense(5),), 3, seed=1) + (None,),
                           input_dim=3)


def test_wrong_kernel_array_shape_rejected():
    layers = (gen.reshape(4, 4, 1), gen.conv2d(2, 3, 1))
    bad = (None, {"k": np.zeros((3, 3, 1, 7), dtype=np.float32),
                  "b": np.zeros(2, dtype=np.float32)})
    with pytest.raises(ModelValidationError):
        gen.GeneratorModel(layers=layers, weights=bad, input_dim=16)


def test_nonfinite_weight_rejected():
    w = np.zeros((2, 2))
    w[0, 0] = np.nan
    with pytest.raises(ModelValidationError):
        linear_model(w)


def test_negative_running_variance_rejected():
    layers = (gen.batchnorm(3),)
    bad = ({"gamma": np.ones(3), "beta": np.zeros(3), "mean": np.zeros(3),
            "var": np.array([1.0, -0.5, 1.0]), "eps": 1e-5},)
    with pytest.raises(ModelValidationError):
        gen.GeneratorModel(layers=layers, weights=bad, input_dim=3)


def test_describe_lists_every_layer():
    model = gen.make_synthetic_generator(8, (8, 8, 1), seed=1, arch="conv")
    text = gen.describe(model)
    for word in ("dense", "reshape", "upsample2x_nearest", "conv2d", "sigmoid"):
        assert word in text
    assert f"({model.input_dim},)" in text
