"""Siamese similarity model (shared twin CNN + learned weighted-L1 metric) and
the softmax classifier built on the same twin."""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeMismatch
from .nn import BatchNorm, Conv, Dense, Flatten, LeakyReLU, MaxPool, Network
from .nn.network import infer_shapes

__all__ = [
    "default_twin_specs",
    "SiameseModel",
    "ClassifierModel",
    "embed",
    "similarity",
    "bce_loss",
    "bce_with_logits",
    "classifier_forward",
    "softmax",
    "save_model",
    "load_model",
    "model_bytes",
    "snapshot_id",
]


def default_twin_specs(filters=(32, 32, 16, 16, 8, 8), kernels=(9, 9, 7, 7, 5, 5),
                       slope=0.01, padding="same", pool=(2, 2)):
    """Conv -> BatchNorm -> LeakyReLU -> MaxPool blocks followed by Flatten.

    With the defaults a length-1024 input gives 8 channels x 16 = 128 features.
    """
    specs = []
    for m, n in zip(filters, kernels):
        specs += [Conv(m, n, padding=padding), BatchNorm(), LeakyReLU(slope), MaxPool(*pool)]
    specs.append(Flatten())
    return specs


def feature_dim(specs, length, channels=1):
    shape = infer_shapes(specs, (channels, length))[-1]
    if len(shape) != 1:
        raise ShapeMismatch(f"twin must end in a flat feature vector, got shape {shape}")
    return shape[0]


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_OPEN_UNIT = (np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def _open_sigmoid(z):
    """Logistic function clipped to the open interval (0, 1); in float64 it
    would otherwise round to exactly 1 for logits above about 37."""
    return np.clip(_sigmoid(z), *_OPEN_UNIT)


def bce_with_logits(z, y):
    """Binary cross-entropy of ``sigmoid(z)`` against labels ``y``."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))


def bce_loss(s, y):
    """``-[y ln s + (1 - y) ln(1 - s)]`` evaluated through the logit of ``s``."""
    s = np.asarray(s, dtype=float)
    return bce_with_logits(np.log(s) - np.log1p(-s), y)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(x):
    if hasattr(x, "intensities"):
        x = x.intensities
    x = np.asarray(x)
    return x[None, :] if x.ndim == 1 else x


class SiameseModel:
    """Twin network plus metric weights.

    ``similarity = sigmoid(metric_w . |f(a) - f(b)| + metric_b)``. With
    ``use_bias=False`` the bias is pinned to zero and excluded from training.
    There is exactly one twin network; both branches run through it.
    """

    kind = 0

    def __init__(self, specs=None, length=1024, seed=None, use_bias=True, dtype=np.float32):
        specs = list(default_twin_specs() if specs is None else specs)
        self.length = int(length)
        self.twin = Network(specs, (1, self.length), seed=seed, dtype=dtype)
        if len(self.twin.output_shape) != 1:
            raise ShapeMismatch("twin specs must end with Flatten")
        self.dim = self.twin.output_shape[0]
        self.metric_w = np.zeros(self.dim, dtype)
        self.metric_b = np.zeros(1, dtype)
        self.use_bias = bool(use_bias)
        self.stamp = {}

    @property
    def specs(self):
        return self.twin.specs

    @property
    def dtype(self):
        return self.twin.dtype

    # inference -------------------------------------------------------------

    def embed_batch(self, x, train=False):
        x = _as_batch(x)
        if x.shape[-1] != self.length:
            raise ShapeMismatch(f"model expects length {self.length}, got {x.shape[-1]}")
        return self.twin.forward(x, train=train)

    def logits(self, fa, fb):
        """Pre-sigmoid score for feature rows ``fa`` against ``fb``,
        accumulated in float64 so that rankings do not hinge on float32
        rounding."""
        d = np.abs(np.asarray(fa, dtype=float) - np.asarray(fb, dtype=float))
        z = d @ self.metric_w.astype(float)
        return z + float(self.metric_b[0]) if self.use_bias else z

    def score(self, fa, fb):
        return _open_sigmoid(self.logits(fa, fb).astype(float))

    # training --------------------------------------------------------------

    def parameters(self):
        extra = [self.metric_w, self.metric_b] if self.use_bias else [self.metric_w]
        return self.twin.parameters() + extra

    def pair_loss_and_grads(self, xa, xb, labels):
        """Mean BCE over a batch of pairs and its gradient for every entry of
        :meth:`parameters`.

        Both branches are concatenated into one train-mode forward pass so
        they share batch-norm statistics.
        """
        xa, xb = _as_batch(xa), _as_batch(xb)
        n = xa.shape[0]
        y = np.asarray(labels, dtype=float)
        feats = self.embed_batch(np.concatenate([xa, xb]), train=True)
        d = feats[:n] - feats[n:]
        ad = np.abs(d)
        z = ad @ self.metric_w
        if self.use_bias:
            z = z + self.metric_b[0]
        loss = float(np.mean(bce_with_logits(z, y)))
        dz = ((_sigmoid(z.astype(float)) - y) / n).astype(self.dtype)
        gw = ad.T @ dz
        gb = np.array([dz.sum()], dtype=self.dtype)
        dd = (dz[:, None] * self.metric_w[None, :]) * np.sign(d)
        self.twin.backward(np.concatenate([dd, -dd]))
        grads = self.twin.gradients() + ([gw, gb] if self.use_bias else [gw])
        return loss, grads

    # state -----------------------------------------------------------------

    def get_state(self):
        return self.twin.get_state() + [self.metric_w.copy(), self.metric_b.copy()]

    def set_state(self, arrays):
        self.twin.set_state(arrays[:-2])
        self.metric_w[...] = arrays[-2]
        self.metric_b[...] = arrays[-1]

    def state_arrays(self):
        return self.twin.state_arrays() + [self.metric_w, self.metric_b]

    def astype(self, dtype):
        m = SiameseModel(self.specs, self.length, use_bias=self.use_bias, dtype=dtype)
        m.set_state([a.astype(dtype) for a in self.state_arrays()])
        m.stamp = dict(self.stamp)
        return m


class ClassifierModel:
    """Twin architecture with a dense softmax head over ``class_ids``."""

    kind = 1

    def __init__(self, class_ids, specs=None, length=1024, seed=None, dtype=np.float32):
        specs = list(default_twin_specs() if specs is None else specs)
        self.class_ids = [int(c) for c in class_ids]
        self.length = int(length)
        self.net = Network(specs + [Dense(len(self.class_ids))], (1, self.length), seed=seed, dtype=dtype)
        self.stamp = {}

    @property
    def n_classes(self):
        return len(self.class_ids)

    @property
    def specs(self):
        return self.net.specs[:-1]

    @property
    def dtype(self):
        return self.net.dtype

    @property
    def use_bias(self):
        return True

    def logits(self, x, train=False):
        x = _as_batch(x)
        if x.shape[-1] != self.length:
            raise ShapeMismatch(f"model expects length {self.length}, got {x.shape[-1]}")
        return self.net.forward(x, train=train)

    def predict(self, x):
        idx = np.argmax(self.logits(x), axis=1)
        return np.array(self.class_ids)[idx]

    def parameters(self):
        return self.net.parameters()

    def loss_and_grads(self, x, labels):
        """Mean softmax cross-entropy; ``labels`` are positions in ``class_ids``."""
        logits = self.logits(x, train=True).astype(float)
        n = logits.shape[0]
        p = softmax(logits)
        loss = float(-np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300))))
        g = p
        g[np.arange(n), labels] -= 1.0
        self.net.backward((g / n).astype(self.dtype))
        return loss, self.net.gradients()

    def get_state(self):
        return self.net.get_state()

    def set_state(self, arrays):
        self.net.set_state(arrays)

    def state_arrays(self):
        return self.net.state_arrays()


def embed(model: SiameseModel, s, train=False):
    """Feature vector of one spectrum."""
    return model.embed_batch(s, train=train)[0]


def similarity(model: SiameseModel, s1, s2, train=False):
    """Similarity in (0, 1) between two spectra."""
    if train:
        f = model.embed_batch(np.concatenate([_as_batch(s1), _as_batch(s2)]), train=True)
        fa, fb = f[:1], f[1:]
    else:
        fa, fb = model.embed_batch(s1), model.embed_batch(s2)
    return float(model.score(fa, fb)[0])


def classifier_forward(cmodel: ClassifierModel, s):
    """Class probabilities (ordered like ``cmodel.class_ids``)."""
    return softmax(cmodel.logits(s).astype(float))[0]


# --------------------------------------------------------------------------
# "SSNM" model files

MODEL_MAGIC = b"SSNM"
MODEL_VERSION = 1
_PADDING = {"valid": 0, "same": 1}


def _pack_spec(spec):
    if isinstance(spec, Conv):
        return struct.pack("<BIIIB", 1, spec.filters, spec.kernel, spec.stride, _PADDING[spec.padding])
    if isinstance(spec, BatchNorm):
        return struct.pack("<Bdd", 2, spec.eps, spec.momentum)
    if isinstance(spec, LeakyReLU):
        return struct.pack("<Bd", 3, spec.slope)
    if isinstance(spec, MaxPool):
        return struct.pack("<BII", 4, spec.kernel, spec.stride)
    if isinstance(spec, Dense):
        return struct.pack("<BI", 5, spec.units)
    if isinstance(spec, Flatten):
        return struct.pack("<B", 6)
    raise TypeError(f"cannot serialize {spec!r}")


def _unpack_spec(data, pos):
    tag = data[pos]
    pos += 1
    if tag == 1:
        f, k, s, p = struct.unpack_from("<IIIB", data, pos)
        return Conv(f, k, s, "same" if p else "valid"), pos + 13
    if tag == 2:
        eps, mom = struct.unpack_from("<dd", data, pos)
        return BatchNorm(eps, mom), pos + 16
    if tag == 3:
        (slope,) = struct.unpack_from("<d", data, pos)
        return LeakyReLU(slope), pos + 8
    if tag == 4:
        k, s = struct.unpack_from("<II", data, pos)
        return MaxPool(k, s), pos + 8
    if tag == 5:
        (u,) = struct.unpack_from("<I", data, pos)
        return Dense(u), pos + 4
    if tag == 6:
        return Flatten(), pos
    raise FormatError(f"unknown layer tag {tag}")


def model_bytes(model) -> bytes:
    """Serialize to the "SSNM" layout.

    magic, uint32 version, uint32 kind (0 Siamese, 1 classifier), uint32
    input channels, uint32 input length, uint32 layer count, tagged layer
    records, uint8 bias flag, uint32 class count + int32 class ids,
    uint32-length-prefixed JSON stamp, float32 parameter blobs in
    declaration order (batch-norm running statistics included, then
    metric_w and metric_b for Siamese models), CRC-32 of everything before.
    """
    specs = list(model.specs) if model.kind == 0 else list(model.net.specs)
    class_ids = [] if model.kind == 0 else model.class_ids
    stamp = json.dumps(model.stamp, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<IIIII", MODEL_VERSION, model.kind, 1, model.length, len(specs)))
    for spec in specs:
        buf.write(_pack_spec(spec))
    buf.write(struct.pack("<B", int(model.use_bias)))
    buf.write(struct.pack("<I", len(class_ids)))
    buf.write(np.asarray(class_ids, dtype="<i4").tobytes())
    buf.write(struct.pack("<I", len(stamp)))
    buf.write(stamp)
    for a in model.state_arrays():
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    payload = buf.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def snapshot_id(model) -> int:
    """CRC-32 of the serialized model payload; identifies a parameter snapshot."""
    return struct.unpack("<I", model_bytes(model)[-4:])[0]


def save_model(model, path) -> int:
    data = model_bytes(model)
    Path(path).write_bytes(data)
    return struct.unpack("<I", data[-4:])[0]


def load_model(path_or_bytes):
    data = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise FormatError("not an SSNM model file")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError("model checksum mismatch")
    version, kind, channels, length, n_specs = struct.unpack_from("<IIIII", data, 4)
    if version != MODEL_VERSION or channels != 1:
        raise FormatError(f"unsupported model version {version}")
    pos = 24
    specs = []
    for _ in range(n_specs):
        spec, pos = _unpack_spec(data, pos)
        specs.append(spec)
    use_bias = bool(data[pos])
    (n_cls,) = struct.unpack_from("<I", data, pos + 1)
    pos += 5
    class_ids = np.frombuffer(data, "<i4", n_cls, pos).tolist()
    pos += 4 * n_cls
    (stamp_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    stamp = json.loads(data[pos : pos + stamp_len].decode("utf-8"))
    pos += stamp_len
    if kind == 0:
        model = SiameseModel(specs, length, use_bias=use_bias)
    elif kind == 1:
        model = ClassifierModel(class_ids, specs[:-1], length)
    else:
        raise FormatError(f"unknown model kind {kind}")
    arrays = []
    for a in model.state_arrays():
        arrays.append(np.frombuffer(data, "<f4", a.size, pos).reshape(a.shape))
        pos += 4 * a.size
    if pos != len(payload):
        raise FormatError("model file length does not match its layer list")
    model.set_state(arrays)
    model.stamp = stamp
    return model
