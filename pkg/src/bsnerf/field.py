"""Spectral radiance field: a coordinate MLP mapping (position, direction) to
(per-bin spectrum, density), with hand-written reverse-mode gradients.

Layout of the network (``W`` are ``(fan_in, fan_out)``)::

    enc(x) -> trunk0 -> relu -> ... -> trunk[depth-1] -> relu = h
                        (trunk[skip] also receives enc(x))
    h -> sigma head -> softplus                          = density
    h -> feature (linear) ++ enc(dir) -> view -> relu -> spectrum head -> sigmoid

Density never sees the direction.  All parameters live in one flat vector
``theta`` in the order of :meth:`FieldArch.layers`, each layer as the
row-major weight matrix followed by its bias.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

FIELD_MAGIC = b"BSNFIELD"
FIELD_VERSION = 1


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class FieldArch:
    depth: int = 4
    width: int = 128
    skip: int | None = 2
    pos_freqs: int = 10
    dir_freqs: int = 4
    bins: int = 24
    view_width: int = 64

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.bins < 1 or self.view_width < 1:
            raise FieldError(f"invalid architecture {self}")
        if self.skip is not None and not 0 < self.skip < self.depth:
            raise FieldError("skip layer must lie strictly inside the trunk")

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.pos_freqs

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.dir_freqs

    def layers(self) -> list[tuple[str, int, int]]:
        out = []
        for i in range(self.depth):
            fan_in = self.pos_dim if i == 0 else self.width
            if i == self.skip:
                fan_in += self.pos_dim
            out.append((f"trunk{i}", fan_in, self.width))
        out += [
            ("sigma", self.width, 1),
            ("feature", self.width, self.width),
            ("view", self.width + self.dir_dim, self.view_width),
            ("spectrum", self.view_width, self.bins),
        ]
        return out

    @property
    def param_count(self) -> int:
        return sum(i * o + o for _, i, o in self.layers())


def positional_encode(v, freqs: int) -> np.ndarray:
    """``(v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(...))``.

    Works on a single 3-vector or a ``(P, 3)`` batch.
    """
    v = np.asarray(v)
    parts = [v]
    for j in range(freqs):
        arg = (2.0**j * np.pi) * v
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def positional_encode_backward(v, freqs: int, upstream) -> np.ndarray:
    v = np.asarray(v)
    grad = upstream[..., :3].copy()
    for j in range(freqs):
        scale = 2.0**j * np.pi
        arg = scale * v
        base = 3 + 6 * j
        grad += scale * (upstream[..., base : base + 3] * np.cos(arg))
        grad -= scale * (upstream[..., base + 3 : base + 6] * np.sin(arg))
    return grad


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _relu(z):
    return np.maximum(z, 0, out=z)


class SpectralField:
    """MLP parameters plus the forward/backward passes.

    ``theta`` is held by reference; optimisers replace it between steps but
    never mutate it during an evaluation.
    """

    def __init__(self, arch: FieldArch, theta):
        theta = np.asarray(theta)
        if theta.ndim != 1 or theta.size != arch.param_count:
            raise FieldError(
                f"theta has {theta.size} entries, architecture needs {arch.param_count}"
            )
        if not np.all(np.isfinite(theta)):
            raise FieldError("field parameters contain non-finite values")
        self.arch = arch
        self.theta = theta
        self._slices = []
        off = 0
        for name, i, o in arch.layers():
            self._slices.append((name, (off, off + i * o), (off + i * o, off + i * o + o), (i, o)))
            off += i * o + o

    @classmethod
    def initialize(cls, arch: FieldArch = FieldArch(), seed: int = 0, dtype=np.float64):
        """He-uniform hidden layers, smaller fan-in scaling on the output heads, zero biases."""
        rng = np.random.default_rng(seed)
        chunks = []
        for name, i, o in arch.layers():
            gain = 1.0 if name in ("sigma", "spectrum", "feature") else np.sqrt(6.0)
            bound = gain / np.sqrt(i)
            chunks.append(rng.uniform(-bound, bound, size=i * o))
            chunks.append(np.zeros(o))
        return cls(arch, np.concatenate(chunks).astype(dtype))

    @property
    def dtype(self):
        return self.theta.dtype

    def with_theta(self, theta) -> "SpectralField":
        return SpectralField(self.arch, theta)

    def params(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Named ``(W, b)`` views into ``theta``."""
        out = {}
        for name, (w0, w1), (b0, b1), shape in self._slices:
            out[name] = (self.theta[w0:w1].reshape(shape), self.theta[b0:b1])
        return out

    def forward(self, x, dirs):
        """Evaluate ``(P, 3)`` positions and unit directions.

        Returns ``(sigma (P,), spectrum (P, B), cache)``.
        """
        a = self.arch
        p = self.params()
        dt = self.theta.dtype
        x = np.asarray(x, dtype=dt).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=dt).reshape(-1, 3)
        enc_x = positional_encode(x, a.pos_freqs)
        acts = []
        h = enc_x
        for i in range(a.depth):
            W, b = p[f"trunk{i}"]
            if i == a.skip:
                # concat(h, enc_x) @ W without materialising the concatenation
                z = h @ W[: a.width] + enc_x @ W[a.width :] + b
            else:
                z = h @ W + b
            h = _relu(z)
            acts.append(h)
        W, b = p["sigma"]
        sigma_pre = (h @ W + b)[:, 0]
        sigma = np.logaddexp(0.0, sigma_pre).astype(dt, copy=False)
        W, b = p["feature"]
        feat = h @ W + b
        enc_d = positional_encode(dirs, a.dir_freqs)
        W, b = p["view"]
        hv = _relu(feat @ W[: a.width] + enc_d @ W[a.width :] + b)
        W, b = p["spectrum"]
        spec = _sigmoid(hv @ W + b)
        cache = dict(
            x=x, dirs=dirs, enc_x=enc_x, enc_d=enc_d, acts=acts,
            sigma_pre=sigma_pre, feat=feat, hv=hv, spec=spec,
        )
        return sigma, spec, cache

    def backward(self, cache, d_sigma, d_spec, input_grads: bool = True):
        """Reverse pass for a cached :meth:`forward` call.

        ``d_sigma`` is ``(P,)`` and ``d_spec`` is ``(P, B)``.  Returns the flat
        parameter gradient (summed over the batch) and, when ``input_grads``
        is set, per-point gradients w.r.t. positions and directions (else
        ``None`` for both).
        """
        a = self.arch
        p = self.params()
        spec = cache["spec"]
        d_sigma = np.asarray(d_sigma, dtype=self.dtype).reshape(-1)
        d_spec = np.asarray(d_spec, dtype=self.dtype)
        if d_sigma.shape[0] != spec.shape[0] or d_spec.shape != spec.shape:
            raise FieldError(
                f"upstream shapes {d_sigma.shape}, {d_spec.shape} do not match cache {spec.shape}"
            )
        g_theta = np.empty_like(self.theta)
        gW, gb = self._grad_views(g_theta)
        enc_x, enc_d = cache["enc_x"], cache["enc_d"]

        d_pre = d_spec * spec * (1.0 - spec)
        hv = cache["hv"]
        np.matmul(hv.T, d_pre, out=gW["spectrum"])
        gb["spectrum"][:] = d_pre.sum(axis=0)
        d_hv = d_pre @ p["spectrum"][0].T
        d_hv *= hv > 0
        Wv = p["view"][0]
        np.matmul(cache["feat"].T, d_hv, out=gW["view"][: a.width])
        np.matmul(enc_d.T, d_hv, out=gW["view"][a.width :])
        gb["view"][:] = d_hv.sum(axis=0)
        d_feat = d_hv @ Wv[: a.width].T
        h = cache["acts"][-1]
        np.matmul(h.T, d_feat, out=gW["feature"])
        gb["feature"][:] = d_feat.sum(axis=0)
        d_h = d_feat @ p["feature"][0].T
        d_sp = d_sigma * _sigmoid(cache["sigma_pre"])
        gW["sigma"][:, 0] = h.T @ d_sp
        gb["sigma"][:] = d_sp.sum()
        d_h += np.outer(d_sp, p["sigma"][0][:, 0])
        d_enc_x = None
        for i in reversed(range(a.depth)):
            d_h *= cache["acts"][i] > 0
            W = p[f"trunk{i}"][0]
            inp = cache["acts"][i - 1] if i > 0 else enc_x
            gb[f"trunk{i}"][:] = d_h.sum(axis=0)
            if i == a.skip:
                np.matmul(inp.T, d_h, out=gW[f"trunk{i}"][: a.width])
                np.matmul(enc_x.T, d_h, out=gW[f"trunk{i}"][a.width :])
                if input_grads:
                    d_enc_x = d_h @ W[a.width :].T
                d_h = d_h @ W[: a.width].T
                continue
            np.matmul(inp.T, d_h, out=gW[f"trunk{i}"])
            if i > 0:
                d_h = d_h @ W.T
            elif input_grads:
                d_in = d_h @ W.T
                d_enc_x = d_in if d_enc_x is None else d_enc_x + d_in
        if not input_grads:
            return g_theta, None, None
        g_x = positional_encode_backward(cache["x"], a.pos_freqs, d_enc_x)
        g_dir = positional_encode_backward(cache["dirs"], a.dir_freqs, d_hv @ Wv[a.width :].T)
        return g_theta, g_x, g_dir

    def _grad_views(self, g_theta):
        gW, gb = {}, {}
        for name, (w0, w1), (b0, b1), shape in self._slices:
            gW[name] = g_theta[w0:w1].reshape(shape)
            gb[name] = g_theta[b0:b1]
        return gW, gb

    # The renderer talks to fields through query/query_backward so that
    # analytic scenes can stand in for the network.
    def query(self, x, dirs):
        return self.forward(x, dirs)

    def query_backward(self, cache, d_sigma, d_spec, input_grads=True):
        return self.backward(cache, d_sigma, d_spec, input_grads)


def field_forward(field: SpectralField, x, dirs):
    return field.forward(x, dirs)


def field_backward(field: SpectralField, cache, d_sigma, d_spec):
    return field.backward(cache, d_sigma, d_spec)


# --- checkpoint I/O -------------------------------------------------------------


def write_field(fh, field: SpectralField) -> None:
    desc = json.dumps(asdict(field.arch), sort_keys=True).encode("utf-8")
    fh.write(FIELD_MAGIC)
    fh.write(struct.pack("<II", FIELD_VERSION, len(desc)))
    fh.write(desc)
    fh.write(struct.pack("<Q", field.theta.size))
    fh.write(field.theta.astype("<f8").tobytes())


def read_field(fh, name="<stream>", dtype=np.float64) -> SpectralField:
    magic = fh.read(len(FIELD_MAGIC))
    if magic != FIELD_MAGIC:
        raise FieldError(f"{name}: not a field checkpoint (bad magic {magic!r})")
    version, n = struct.unpack("<II", fh.read(8))
    if version != FIELD_VERSION:
        raise FieldError(f"{name}: unsupported field checkpoint version {version}")
    arch = FieldArch(**json.loads(fh.read(n).decode("utf-8")))
    (count,) = struct.unpack("<Q", fh.read(8))
    if count != arch.param_count:
        raise FieldError(f"{name}: {count} parameters stored, architecture needs {arch.param_count}")
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise FieldError(f"{name}: truncated parameter block")
    theta = np.frombuffer(raw, dtype="<f8").astype(dtype)
    return SpectralField(arch, theta)


def save_field(path, field: SpectralField) -> None:
    with open(path, "wb") as fh:
        write_field(fh, field)


def load_field(path, dtype=np.float64) -> SpectralField:
    path = Path(path)
    with open(path, "rb") as fh:
        return read_field(fh, str(path), dtype)
