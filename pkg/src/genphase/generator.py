"""Small feed-forward image generators: loading, evaluation, reverse-mode gradients.

A generator is a fixed sequential stack of layers mapping a flat latent vector of
length ``k`` to an image array. Supported layer kinds:

    dense                 y = z @ W + b          (W stored with shape (in, out))
    reshape               flat / 3-d  ->  (h, w, c)
    upsample2x_nearest    each pixel replicated into a 2x2 block
    conv2d                "same" zero padding, stride >= 1, kernels (kh, kw, cin, cout)
    conv2d_transpose      "same" semantics, output spatial size = input * stride
    batchnorm_inference   y = gamma * (x - mean) / sqrt(var + eps) + beta, last axis
    activation            relu | tanh | sigmoid | elu

Models are immutable after construction; ``forward`` and ``vjp`` are pure, so
concurrent read-only use from several workers is safe. Batch norm always uses the
stored running statistics -- batch statistics are undefined for a single sample.

Weights are stored in float32 by default; :meth:`GeneratorModel.astype` produces a
float64 copy when gradient-check precision is needed.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, FormatError, ModelValidationError

ACTIVATIONS = ("relu", "tanh", "sigmoid", "elu")

LAYER_KINDS = (
    "dense",
    "reshape",
    "upsample2x_nearest",
    "conv2d",
    "conv2d_transpose",
    "batchnorm_inference",
    "activation",
)


@dataclass(frozen=True)
class LayerSpec:
    """Declaration of one layer; weight arrays live on the model, not here.

    Only the fields relevant to ``kind`` are set:
      dense:              units (output width)
      reshape:            shape (h, w, c)
      conv2d(_transpose): filters, kernel_size, stride
      batchnorm_inference: features (parameter vector length)
      activation:         activation name
    """

    kind: str
    units: int | None = None
    shape: tuple[int, int, int] | None = None
    filters: int | None = None
    kernel_size: int | None = None
    stride: int | None = None
    features: int | None = None
    activation: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ModelValidationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "activation" and self.activation not in ACTIVATIONS:
            raise ModelValidationError(f"unknown activation {self.activation!r}")
        if self.kind in ("conv2d", "conv2d_transpose"):
            if not self.kernel_size or self.kernel_size < 1:
                raise ModelValidationError("conv kernel size must be >= 1")
            if not self.stride or self.stride < 1:
                raise ModelValidationError("conv stride must be >= 1")


def dense(units):
    return LayerSpec("dense", units=units)


def reshape(h, w, c):
    return LayerSpec("reshape", shape=(h, w, c))


def upsample2x():
    return LayerSpec("upsample2x_nearest")


def conv2d(filters, kernel_size, stride=1):
    return LayerSpec("conv2d", filters=filters, kernel_size=kernel_size, stride=stride)


def conv2d_transpose(filters, kernel_size, stride=2):
    return LayerSpec("conv2d_transpose", filters=filters, kernel_size=kernel_size, stride=stride)


def batchnorm(features):
    return LayerSpec("batchnorm_inference", features=features)


def activation(name):
    return LayerSpec("activation", activation=name)


def infer_shapes(layers, input_dim):
    """Walk the layer chain and return the list of output shapes (one per layer).

    Shapes are tuples; a flat vector is ``(n,)``, an image ``(h, w, c)``.
    Raises ModelValidationError on any incompatibility.
    """
    shapes = []
    cur = (int(input_dim),)
    for i, layer in enumerate(layers):
        k = layer.kind
        if k == "dense":
            if len(cur) != 1:
                raise ModelValidationError(f"layer {i}: dense needs a flat input, got {cur}")
            cur = (int(layer.units),)
        elif k == "reshape":
            h, w, c = layer.shape
            if int(np.prod(cur)) != h * w * c:
                raise ModelValidationError(
                    f"layer {i}: cannot reshape {cur} ({int(np.prod(cur))} values) to {layer.shape}"
                )
            cur = (h, w, c)
        elif k == "upsample2x_nearest":
            if len(cur) != 3:
                raise ModelValidationError(f"layer {i}: upsample needs (h, w, c) input, got {cur}")
            cur = (2 * cur[0], 2 * cur[1], cur[2])
        elif k in ("conv2d", "conv2d_transpose"):
            if len(cur) != 3:
                raise ModelValidationError(f"layer {i}: {k} needs (h, w, c) input, got {cur}")
            h, w, _ = cur
            s = layer.stride
            if k == "conv2d":
                cur = (-(-h // s), -(-w // s), layer.filters)  # ceil(h / s)
            else:
                cur = (h * s, w * s, layer.filters)
        elif k == "batchnorm_inference":
            if layer.features != cur[-1]:
                raise ModelValidationError(
                    f"layer {i}: batchnorm over {layer.features} features "
                    f"but incoming last axis is {cur[-1]}"
                )
        elif k == "activation":
            pass
        shapes.append(cur)
    return shapes


def _expected_weight_shapes(layer, in_shape):
    """Weight-array shapes a layer must carry, keyed by array name."""
    k = layer.kind
    if k == "dense":
        return {"w": (in_shape[0], layer.units), "b": (layer.units,)}
    if k in ("conv2d", "conv2d_transpose"):
        ks = layer.kernel_size
        return {"k": (ks, ks, in_shape[2], layer.filters), "b": (layer.filters,)}
    if k == "batchnorm_inference":
        n = layer.features
        return {"gamma": (n,), "beta": (n,), "mean": (n,), "var": (n,)}
    return {}


@dataclass(frozen=True)
class GeneratorModel:
    """Immutable sequential generator: layer specs plus per-layer weight dicts.

    ``weights[i]`` is ``None`` for parameter-free layers; batch-norm entries
    additionally carry a scalar ``eps`` under the ``"eps"`` key.
    """

    layers: tuple[LayerSpec, ...]
    weights: tuple
    input_dim: int
    output_shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        shapes = infer_shapes(self.layers, self.input_dim)
        out = shapes[-1] if shapes else (self.input_dim,)
        object.__setattr__(self, "output_shape", out)
        self._validate(shapes)

    def _validate(self, shapes):
        if len(self.weights) != len(self.layers):
            raise ModelValidationError("weights list does not match layer list")
        prev = (self.input_dim,)
        for i, (layer, wts) in enumerate(zip(self.layers, self.weights)):
            expected = _expected_weight_shapes(layer, prev)
            if expected:
                if wts is None:
                    raise ModelValidationError(f"layer {i} ({layer.kind}): missing weights")
                for name, shp in expected.items():
                    arr = np.asarray(wts[name])
                    if arr.shape != shp:
                        raise ModelValidationError(
                            f"layer {i} ({layer.kind}): array {name!r} has shape "
                            f"{arr.shape}, expected {shp}"
                        )
                    if not np.all(np.isfinite(arr)):
                        raise ModelValidationError(
                            f"layer {i} ({layer.kind}): non-finite value in {name!r}"
                        )
                if layer.kind == "batchnorm_inference":
                    if np.any(np.asarray(wts["var"]) < 0):
                        raise ModelValidationError(f"layer {i}: negative running variance")
                    if not np.isfinite(wts["eps"]) or wts["eps"] < 0:
                        raise ModelValidationError(f"layer {i}: bad batch-norm epsilon")
            prev = shapes[i]

    @property
    def dtype(self):
        for wts in self.weights:
            if wts:
                for name, arr in wts.items():
                    if name != "eps":
                        return np.asarray(arr).dtype
        # weight-free chains carry no storage dtype of their own
        return np.dtype(np.float64)

    def astype(self, dtype):
        """Copy of the model with all weight arrays cast to ``dtype``."""
        new = []
        for wts in self.weights:
            if wts is None:
                new.append(None)
            else:
                new.append(
                    {k: (v if k == "eps" else np.asarray(v, dtype=dtype)) for k, v in wts.items()}
                )
        return replace(self, weights=tuple(new))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _same_pads(size, kernel, stride, out):
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total  # TF "same": extra padding goes bottom/right


def _conv2d_fwd(x, kern, stride):
    """Strided cross-correlation with "same" zero padding.

    x (h, w, cin), kern (kh, kw, cin, cout) -> (ceil(h/s), ceil(w/s), cout).
    """
    h, w, cin = x.shape
    kh, kw, _, cout = kern.shape
    oh, ow = -(-h // stride), -(-w // stride)
    pt, ph = _same_pads(h, kh, stride, oh)
    pl, pw = _same_pads(w, kw, stride, ow)
    xp = np.zeros((h + ph, w + pw, cin), dtype=x.dtype)
    xp[pt:pt + h, pl:pl + w] = x
    out = np.zeros((oh, ow, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[i:i + (oh - 1) * stride + 1:stride,
                       j:j + (ow - 1) * stride + 1:stride]
            out += patch @ kern[i, j]
    return out


def _conv2d_adj(g, kern, stride, in_shape):
    """Exact adjoint of :func:`_conv2d_fwd` with the same geometry."""
    h, w, cin = in_shape
    kh, kw, _, cout = kern.shape
    oh, ow = g.shape[0], g.shape[1]
    pt, ph = _same_pads(h, kh, stride, oh)
    pl, pw = _same_pads(w, kw, stride, ow)
    xp = np.zeros((h + ph, w + pw, cin), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[i:i + (oh - 1) * stride + 1:stride,
               j:j + (ow - 1) * stride + 1:stride] += g @ kern[i, j].T
    return xp[pt:pt + h, pl:pl + w]


def _act_fwd(name, x):
    if name == "relu":
        return np.maximum(x, 0)
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if name == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
    raise ModelValidationError(f"unknown activation {name!r}")


def _act_vjp(name, g, x, y):
    # derivatives of tanh/sigmoid use the forward output (stable algebraic form);
    # relu and elu take subgradient 0 at exactly 0
    if name == "relu":
        return g * (x > 0)
    if name == "tanh":
        return g * (1.0 - y * y)
    if name == "sigmoid":
        return g * y * (1.0 - y)
    if name == "elu":
        return g * np.where(x > 0, np.asarray(1, dtype=y.dtype), np.where(x < 0, y + 1.0, 0.0))
    raise ModelValidationError(f"unknown activation {name!r}")


def forward_with_tape(model, z):
    """Run the generator, keeping per-layer values needed for the backward pass.

    Returns ``(output, tape)``; feed the tape to :func:`backprop`.
    """
    z = np.asarray(z)
    if z.shape != (model.input_dim,):
        raise DimensionError(f"latent has shape {z.shape}, model expects ({model.input_dim},)")
    if not np.all(np.isfinite(z)):
        raise DimensionError("latent vector contains non-finite entries")
    x = z.astype(model.dtype, copy=False)
    tape = []
    for layer, wts in zip(model.layers, model.weights):
        k = layer.kind
        if k == "dense":
            tape.append(None)
            x = x @ wts["w"] + wts["b"]
        elif k == "reshape":
            tape.append(x.shape)
            x = x.reshape(layer.shape)
        elif k == "upsample2x_nearest":
            tape.append(x.shape)
            x = np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)
        elif k == "conv2d":
            tape.append(x.shape)
            x = _conv2d_fwd(x, wts["k"], layer.stride) + wts["b"]
        elif k == "conv2d_transpose":
            tape.append(x.shape)
            # transpose conv == adjoint of a strided conv; swap kernel channel axes
            h, w, _ = x.shape
            s = layer.stride
            out_shape = (h * s, w * s, layer.filters)
            x = _conv2d_adj(x, np.swapaxes(wts["k"], 2, 3), s, out_shape) + wts["b"]
        elif k == "batchnorm_inference":
            tape.append(None)
            scale = wts["gamma"] / np.sqrt(wts["var"] + wts["eps"])
            x = scale.astype(x.dtype) * (x - wts["mean"]) + wts["beta"]
        elif k == "activation":
            y = _act_fwd(layer.activation, x)
            tape.append((x, y))
            x = y
    return x, tape


def forward(model, z):
    """Deterministic generator evaluation: latent vector -> image array."""
    out, _ = forward_with_tape(model, z)
    return out


def backprop(model, tape, cotangent):
    """Pull an output-space cotangent back to latent space (transposed Jacobian)."""
    g = np.asarray(cotangent, dtype=model.dtype)
    for layer, wts, saved in zip(reversed(model.layers), reversed(model.weights),
                                 reversed(tape)):
        k = layer.kind
        if k == "dense":
            g = wts["w"] @ g
        elif k == "reshape":
            g = g.reshape(saved)
        elif k == "upsample2x_nearest":
            h, w, c = saved
            g = g.reshape(h, 2, w, 2, c).sum(axis=(1, 3))
        elif k == "conv2d":
            g = _conv2d_adj(g, wts["k"], layer.stride, saved)
        elif k == "conv2d_transpose":
            g = _conv2d_fwd(g, np.swapaxes(wts["k"], 2, 3), layer.stride)
        elif k == "batchnorm_inference":
            scale = wts["gamma"] / np.sqrt(wts["var"] + wts["eps"])
            g = g * scale.astype(g.dtype)
        elif k == "activation":
            x, y = saved
            g = _act_vjp(layer.activation, g, x, y)
    return g


def vjp(model, z, cotangent):
    """Jacobian-transpose product of ``forward`` at ``z`` applied to ``cotangent``."""
    cotangent = np.asarray(cotangent)
    if cotangent.shape != model.output_shape:
        raise DimensionError(
            f"cotangent has shape {cotangent.shape}, model output is {model.output_shape}"
        )
    _, tape = forward_with_tape(model, z)
    return backprop(model, tape, cotangent)


# ---------------------------------------------------------------------------
# synthetic models
# ---------------------------------------------------------------------------

def _orthogonal(rng, fan_in, fan_out, gain):
    # QR of a tall seeded Gaussian; the thin factor gives exactly orthonormal
    # rows (fan_in <= fan_out) or columns (fan_in > fan_out), scaled by gain.
    a = rng.normal(0.0, 1.0, (max(fan_in, fan_out), min(fan_in, fan_out)))
    q, _ = np.linalg.qr(a)
    w = q.T if fan_in <= fan_out else q
    # C layout so a PRGW round trip reproduces forward bitwise
    return np.ascontiguousarray(gain * w)


def init_weights(layers, input_dim, seed, dtype=np.float32, scheme="glorot",
                 gain=1.0):
    """Seeded pseudo-random weights for an arbitrary layer chain.

    scheme "glorot" draws dense and conv weights at Glorot scale times
    ``gain``.  scheme "orthogonal" gives dense layers exactly orthonormal
    rows or columns scaled by ``gain`` (so every singular value equals
    ``gain``); conv kernels keep the scaled Glorot draw.
    """
    if scheme not in ("glorot", "orthogonal"):
        raise ModelValidationError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(layers, input_dim)
    weights = []
    prev = (input_dim,)
    for layer, out_shape in zip(layers, shapes):
        k = layer.kind
        if k == "dense":
            fan_in, fan_out = prev[0], layer.units
            if scheme == "orthogonal":
                w = _orthogonal(rng, fan_in, fan_out, gain)
            else:
                sd = gain * np.sqrt(2.0 / (fan_in + fan_out))
                w = rng.normal(0.0, sd, (fan_in, fan_out))
            weights.append({
                "w": w.astype(dtype),
                "b": rng.normal(0.0, 0.05, fan_out).astype(dtype),
            })
        elif k in ("conv2d", "conv2d_transpose"):
            ks, cin, cout = layer.kernel_size, prev[2], layer.filters
            sd = gain * np.sqrt(2.0 / (ks * ks * (cin + cout)))
            weights.append({
                "k": rng.normal(0.0, sd, (ks, ks, cin, cout)).astype(dtype),
                "b": rng.normal(0.0, 0.05, cout).astype(dtype),
            })
        elif k == "batchnorm_inference":
            n = layer.features
            weights.append({
                "gamma": (1.0 + 0.1 * rng.standard_normal(n)).astype(dtype),
                "beta": (0.1 * rng.standard_normal(n)).astype(dtype),
                "mean": (0.1 * rng.standard_normal(n)).astype(dtype),
                "var": rng.uniform(0.5, 1.5, n).astype(dtype),
                "eps": 1e-5,
            })
        else:
            weights.append(None)
        prev = out_shape
    return tuple(weights)


def make_synthetic_generator(input_dim, output_shape, seed, arch="mlp",
                             hidden=64, dtype=np.float32):
    """Deterministic pseudo-random generator for tests and demos.

    arch "mlp":      dense -> batchnorm -> relu -> dense -> reshape -> sigmoid
    arch "mlp_tanh": dense -> relu -> dense -> reshape -> tanh, dense weights
                     orthogonal at gain 2 so the chain's Jacobian has
                     unit-order singular values; the solver's default step
                     size makes steady progress on models built this way
    arch "conv":     dense head, then upsample / conv2d blocks (requires h, w
                     divisible by 4)
    arch "dcgan":    dense head, then strided conv2d_transpose blocks (same
                     divisibility requirement)
    arch "mnist":    the classic grayscale stack (two wide dense blocks, two
                     upsample+conv blocks, tanh output); requires 28x28x1-style
                     shapes divisible by 4
    """
    h, w, c = output_shape
    n = h * w * c
    if arch == "mlp":
        layers = (
            dense(hidden),
            batchnorm(hidden),
            activation("relu"),
            dense(n),
            reshape(h, w, c),
            activation("sigmoid"),
        )
    elif arch == "mlp_tanh":
        layers = (
            dense(hidden),
            activation("relu"),
            dense(n),
            reshape(h, w, c),
            activation("tanh"),
        )
        weights = init_weights(layers, input_dim, seed, dtype=dtype,
                               scheme="orthogonal", gain=2.0)
        return GeneratorModel(layers=layers, weights=weights,
                              input_dim=input_dim)
    elif arch in ("conv", "dcgan"):
        if h % 4 or w % 4:
            raise ModelValidationError(f"arch {arch!r} needs h, w divisible by 4, got {h}x{w}")
        h4, w4 = h // 4, w // 4
        base = 8
        head = (
            dense(hidden),
            activation("relu"),
            dense(h4 * w4 * base),
            batchnorm(h4 * w4 * base),
            activation("relu"),
            reshape(h4, w4, base),
        )
        if arch == "conv":
            tail = (
                upsample2x(),
                conv2d(4, 3, 1),
                batchnorm(4),
                activation("relu"),
                upsample2x(),
                conv2d(c, 3, 1),
                activation("sigmoid"),
            )
        else:
            tail = (
                conv2d_transpose(4, 4, 2),
                batchnorm(4),
                activation("relu"),
                conv2d_transpose(c, 4, 2),
                activation("sigmoid"),
            )
        layers = head + tail
    elif arch == "mnist":
        if h % 4 or w % 4:
            raise ModelValidationError(f"arch 'mnist' needs h, w divisible by 4, got {h}x{w}")
        h4, w4 = h // 4, w // 4
        layers = (
            dense(1024),
            batchnorm(1024),
            activation("relu"),
            dense(h4 * w4 * 128),
            batchnorm(h4 * w4 * 128),
            activation("relu"),
            reshape(h4, w4, 128),
            upsample2x(),
            conv2d(64, 5, 1),
            batchnorm(64),
            activation("relu"),
            upsample2x(),
            conv2d(c, 5, 1),
            batchnorm(c),
            activation("tanh"),
        )
    else:
        raise ModelValidationError(f"unknown synthetic arch {arch!r}")
    weights = init_weights(layers, input_dim, seed, dtype=dtype)
    return GeneratorModel(layers=layers, weights=weights, input_dim=input_dim)


def make_padded_generator(input_dim, inner_shape, pad_to, seed, hidden=64,
                          dtype=np.float32):
    """MLP generator whose output is an ``inner_shape`` image centred on a
    zero border, produced through an exact 0/1 placement matrix. Output shape
    is ``(pad_to[0], pad_to[1], c)``; the border is identically zero, so the
    model's range consists of zero-padded images.
    """
    ih, iw, c = inner_shape
    oh, ow = pad_to
    if oh < ih or ow < iw:
        raise ModelValidationError("pad_to must be at least inner_shape")
    layers = (
        dense(hidden),
        activation("relu"),
        dense(ih * iw * c),
        activation("sigmoid"),
        dense(oh * ow * c),
        reshape(oh, ow, c),
    )
    weights = list(init_weights(layers[:4], input_dim, seed, dtype=dtype))
    place = np.zeros((ih * iw * c, oh * ow * c), dtype=dtype)
    top, left = (oh - ih) // 2, (ow - iw) // 2
    src = np.arange(ih * iw * c).reshape(ih, iw, c)
    dst = np.arange(oh * ow * c).reshape(oh, ow, c)
    place[src.ravel(), dst[top:top + ih, left:left + iw].ravel()] = 1.0
    weights.append({"w": place, "b": np.zeros(oh * ow * c, dtype=dtype)})
    weights.append(None)
    return GeneratorModel(layers=layers, weights=tuple(weights), input_dim=input_dim)


# ---------------------------------------------------------------------------
# PRGW weights file
# ---------------------------------------------------------------------------
#
# Binary, little-endian:
#   magic "PRGW", u8 version (0x01), u32 layer_count, then per layer:
#     u8 kind code   0 dense | 1 reshape | 2 upsample2x | 3 conv2d
#                    4 conv2d_transpose | 5 batchnorm | 6 activation
#     u8 param code  activation layers: 0 relu | 1 tanh | 2 sigmoid | 3 elu;
#                    0 otherwise
#     7 x u32        in, out, kernel, stride, h, w, c -- unused fields are 0:
#                      dense:      in, out
#                      conv*:      in (cin), out (cout), kernel, stride
#                      reshape:    h, w, c
#                      batchnorm:  c (parameter length)
#     f32 arrays, row-major, in declaration order:
#                      dense:      W (in*out), b (out)
#                      conv*:      kernels (k*k*cin*cout), b (cout)
#                      batchnorm:  gamma, beta, mean, var (c each), then f32 eps
#
# The first layer must be dense or reshape so the latent dimension can be
# inferred from the header alone.

_MAGIC = b"PRGW"
_VERSION = 1
_KIND_CODES = {
    "dense": 0, "reshape": 1, "upsample2x_nearest": 2, "conv2d": 3,
    "conv2d_transpose": 4, "batchnorm_inference": 5, "activation": 6,
}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_ACT_CODES = {"relu": 0, "tanh": 1, "sigmoid": 2, "elu": 3}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def save_generator(model, path):
    """Write the model to a PRGW weights file."""
    shapes = infer_shapes(model.layers, model.input_dim)
    prev = (model.input_dim,)
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<B", _VERSION))
    buf.write(struct.pack("<I", len(model.layers)))
    for layer, wts, out_shape in zip(model.layers, model.weights, shapes):
        k = layer.kind
        code = _ACT_CODES[layer.activation] if k == "activation" else 0
        f_in = f_out = kern = stride = h = w = c = 0
        arrays = []
        if k == "dense":
            f_in, f_out = prev[0], layer.units
            arrays = [wts["w"], wts["b"]]
        elif k == "reshape":
            h, w, c = layer.shape
        elif k in ("conv2d", "conv2d_transpose"):
            f_in, f_out = prev[2], layer.filters
            kern, stride = layer.kernel_size, layer.stride
            arrays = [wts["k"], wts["b"]]
        elif k == "batchnorm_inference":
            c = layer.features
            arrays = [wts["gamma"], wts["beta"], wts["mean"], wts["var"]]
        buf.write(struct.pack("<BB7I", _KIND_CODES[k], code,
                              f_in, f_out, kern, stride, h, w, c))
        for arr in arrays:
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if k == "batchnorm_inference":
            buf.write(struct.pack("<f", float(wts["eps"])))
        prev = out_shape
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise ModelValidationError(f"weights file truncated while reading {what}")
    return data


def _read_f32(fh, count, what):
    return np.frombuffer(_read_exact(fh, 4 * count, what), dtype="<f4").copy()


def load_generator(path):
    """Read and validate a PRGW weights file; see the module docstring for the layout."""
    with open(path, "rb") as fh:
        head = fh.read(5)
        if len(head) < 5 or head[:4] != _MAGIC:
            raise FormatError(f"{path}: not a PRGW weights file")
        if head[4] != _VERSION:
            raise FormatError(f"{path}: unsupported PRGW version {head[4]}")
        raw = fh.read(4)
        if len(raw) < 4:
            raise FormatError(f"{path}: truncated header")
        (count,) = struct.unpack("<I", raw)
        layers, weights = [], []
        for i in range(count):
            raw = fh.read(30)
            if len(raw) < 30:
                raise FormatError(f"{path}: truncated layer {i} header")
            kcode, pcode, f_in, f_out, kern, stride, h, w, c = struct.unpack("<BB7I", raw)
            if kcode not in _KIND_NAMES:
                raise FormatError(f"{path}: unknown layer kind code {kcode} (layer {i})")
            kind = _KIND_NAMES[kcode]
            if kind == "dense":
                wmat = _read_f32(fh, f_in * f_out, f"layer {i} dense W")
                bias = _read_f32(fh, f_out, f"layer {i} dense b")
                layers.append(dense(f_out))
                weights.append({"w": wmat.reshape(f_in, f_out), "b": bias})
            elif kind == "reshape":
                layers.append(reshape(h, w, c))
                weights.append(None)
            elif kind == "upsample2x_nearest":
                layers.append(upsample2x())
                weights.append(None)
            elif kind in ("conv2d", "conv2d_transpose"):
                karr = _read_f32(fh, kern * kern * f_in * f_out, f"layer {i} conv kernels")
                bias = _read_f32(fh, f_out, f"layer {i} conv b")
                spec = conv2d(f_out, kern, stride) if kind == "conv2d" \
                    else conv2d_transpose(f_out, kern, stride)
                layers.append(spec)
                weights.append({"k": karr.reshape(kern, kern, f_in, f_out), "b": bias})
            elif kind == "batchnorm_inference":
                gamma = _read_f32(fh, c, f"layer {i} batchnorm gamma")
                beta = _read_f32(fh, c, f"layer {i} batchnorm beta")
                mean = _read_f32(fh, c, f"layer {i} batchnorm mean")
                var = _read_f32(fh, c, f"layer {i} batchnorm var")
                (eps,) = struct.unpack("<f", _read_exact(fh, 4, f"layer {i} batchnorm eps"))
                layers.append(batchnorm(c))
                weights.append({"gamma": gamma, "beta": beta, "mean": mean,
                                "var": var, "eps": float(eps)})
            else:
                if pcode not in _ACT_NAMES:
                    raise FormatError(f"{path}: unknown activation code {pcode} (layer {i})")
                layers.append(activation(_ACT_NAMES[pcode]))
                weights.append(None)
        trailing = fh.read(1)
        if trailing:
            raise ModelValidationError(f"{path}: trailing bytes after last layer")
    if not layers:
        raise ModelValidationError(f"{path}: model has no layers")
    first = layers[0]
    if first.kind == "dense":
        input_dim = weights[0]["w"].shape[0]
    elif first.kind == "reshape":
        input_dim = int(np.prod(first.shape))
    else:
        raise ModelValidationError(
            f"{path}: first layer must be dense or reshape to fix the latent size"
        )
    return GeneratorModel(layers=tuple(layers), weights=tuple(weights), input_dim=input_dim)


def describe(model):
    """Plain-text manifest of the layer chain (the `gen-info` dump)."""
    shapes = infer_shapes(model.layers, model.input_dim)
    lines = [f"input: latent vector ({model.input_dim},)"]
    prev = (model.input_dim,)
    for i, (layer, wts, shape) in enumerate(zip(model.layers, model.weights, shapes)):
        k = layer.kind
        if k == "dense":
            detail = f"{prev[0]} -> {layer.units}"
        elif k == "reshape":
            detail = "x".join(map(str, layer.shape))
        elif k in ("conv2d", "conv2d_transpose"):
            detail = (f"filters {layer.filters}, kernel {layer.kernel_size}, "
                      f"stride {layer.stride}")
        elif k == "batchnorm_inference":
            detail = f"{layer.features} features, eps {wts['eps']:g}"
        elif k == "activation":
            detail = layer.activation
        else:
            detail = ""
        nparams = sum(np.asarray(a).size for n, a in (wts or {}).items() if n != "eps")
        lines.append(f"{i:3d}  {k:<20s} {detail:<32s} out {str(shape):<16s} "
                     f"params {nparams}")
        prev = shape
    lines.append(f"output: {model.output_shape}, dtype {model.dtype}")
    return "\n".join(lines)
