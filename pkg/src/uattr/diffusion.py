"""Toy conditional DDPM: schedule, denoiser, losses, gradients and sampler.

The denoiser is a small MLP over (noisy image, sinusoidal timestep embedding)
whose only access to the class label is a single-query cross-attention over two
condition tokens (the learned class embedding and a learned null token).  The
key and value projections of that attention are the ``cond_key`` and
``cond_value`` parameter segments.

All forward/backward arithmetic runs in float64; parameters are stored as
float32 by convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import keyed_normal, tag

__all__ = [
    "DiffusionConfig",
    "DenoiserSpec",
    "Example",
    "ParamVector",
    "NumericError",
    "init_params",
    "predict_noise",
    "q_sample",
    "ddpm_loss",
    "strided_timesteps",
    "strided_loss",
    "strided_losses",
    "loss_gradient",
    "per_example_gradients",
    "row_gradients",
    "timestep_noise",
    "sample",
]

KV_SEGMENTS = ("cond_key", "cond_value")


class NumericError(ArithmeticError):
    """Non-finite values appeared; ``segment`` names where, when known."""

    def __init__(self, message: str, segment: str | None = None):
        super().__init__(message if segment is None else f"{message} (segment {segment!r})")
        self.segment = segment


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    image_shape: tuple[int, int, int] = (1, 8, 8)
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ValueError("image_shape must be (channels, height, width)")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)

    @property
    def alpha_bars(self) -> np.ndarray:
        """ᾱ_t for t = 1..T (index t-1)."""
        return np.cumprod(1.0 - self.betas)

    @property
    def image_dim(self) -> int:
        c, h, w = self.image_shape
        return c * h * w

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise IndexError(f"timestep out of range [1, {self.T}]")

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "image_shape": list(self.image_shape),
            "num_classes": self.num_classes,
        }


@dataclass(frozen=True)
class Example:
    """A training point or synthesized query: image ``x`` with label ``c``."""

    x: np.ndarray
    c: int
    id: int
    flipped: bool = False

    def __post_init__(self):
        if not np.all(np.isfinite(self.x)):
            raise ValueError(f"example {self.id} has non-finite pixels")
        if self.c < 0:
            raise ValueError("condition label must be >= 0")


class ParamVector:
    """Flat parameter array with named contiguous segments."""

    def __init__(self, values: np.ndarray, layout):
        values = np.asarray(values)
        layout = [(str(n), int(o), int(l)) for n, o, l in layout]
        pos = 0
        for name, offset, length in layout:
            if offset != pos or length < 0:
                raise ValueError(f"segment {name!r} is not contiguous")
            pos += length
        if values.ndim != 1 or pos != values.size:
            raise ValueError(f"layout covers {pos} values, array has {values.size}")
        if len({n for n, _, _ in layout}) != len(layout):
            raise ValueError("duplicate segment names")
        self.values = values
        self.layout = layout

    @property
    def names(self) -> list[str]:
        return [n for n, _, _ in self.layout]

    def slice(self, name: str) -> slice:
        for n, o, l in self.layout:
            if n == name:
                return slice(o, o + l)
        raise KeyError(f"no segment named {name!r}")

    def segment(self, name: str) -> np.ndarray:
        return self.values[self.slice(name)]

    def mask(self, names) -> np.ndarray:
        """Boolean mask selecting the given segments."""
        m = np.zeros(self.values.size, dtype=bool)
        for name in names:
            m[self.slice(name)] = True
        return m

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"ParamVector({self.values.size} values, {len(self.layout)} segments)"


@dataclass(frozen=True)
class DenoiserSpec:
    image_dim: int
    num_classes: int
    temb_dim: int = 32
    cond_dim: int = 16
    attn_dim: int = 32
    hidden: int = 128
    shapes: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        d, h = self.image_dim, self.hidden
        shapes = {
            "in_w": (d + self.temb_dim, h),
            "in_b": (h,),
            "query": (h, self.attn_dim),
            "class_embed": (self.num_classes, self.cond_dim),
            "cond_null": (self.cond_dim,),
            "cond_key": (self.cond_dim, self.attn_dim),
            "cond_value": (self.cond_dim, h),
            "hid_w": (h, h),
            "hid_b": (h,),
            "out_w": (h, d),
            "out_b": (d,),
        }
        object.__setattr__(self, "shapes", shapes)

    @classmethod
    def for_config(cls, cfg: DiffusionConfig) -> "DenoiserSpec":
        return cls(image_dim=cfg.image_dim, num_classes=cfg.num_classes)

    def layout(self):
        out, pos = [], 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            out.append((name, pos, n))
            pos += n
        return out

    def unpack(self, theta: ParamVector) -> dict:
        if [n for n, _, _ in theta.layout] != list(self.shapes):
            raise ValueError("parameter layout does not match the denoiser")
        v = theta.values.astype(np.float64, copy=False)
        return {n: v[o : o + l].reshape(self.shapes[n]) for n, o, l in theta.layout}


def init_params(cfg: DiffusionConfig, seed: int) -> ParamVector:
    """Seeded initialization; weights scaled by 1/sqrt(fan_in), biases zero."""
    spec = DenoiserSpec.for_config(cfg)
    parts = []
    for i, (name, shape) in enumerate(spec.shapes.items()):
        n = int(np.prod(shape))
        if name.endswith("_b"):
            parts.append(np.zeros(n))
            continue
        z = keyed_normal(seed, tag("init"), i, size=n)
        if name in ("class_embed", "cond_null"):
            scale = 1.0
        elif name == "out_w":
            scale = 0.1 / np.sqrt(shape[0])
        else:
            scale = 1.0 / np.sqrt(shape[0])
        parts.append(z * scale)
    return ParamVector(np.concatenate(parts).astype(np.float32), spec.layout())


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _silu(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a))  # overflow-free sigmoid
    return a * s, s * (1.0 + a * (1.0 - s))


def _forward(p: dict, spec: DenoiserSpec, xt: np.ndarray, t: np.ndarray, c: np.ndarray):
    """Batched forward; ``xt`` is (B, D).  Returns (eps_hat, cache)."""
    u = np.concatenate([xt, timestep_embedding(t, spec.temb_dim)], axis=1)
    a1 = u @ p["in_w"] + p["in_b"]
    h1, ds1 = _silu(a1)
    q = h1 @ p["query"]
    tok = np.stack([p["class_embed"][c], np.broadcast_to(p["cond_null"], (len(c), spec.cond_dim))], axis=1)
    k = tok @ p["cond_key"]
    v = tok @ p["cond_value"]
    scale = 1.0 / np.sqrt(spec.attn_dim)
    s = np.einsum("ba,bja->bj", q, k) * scale
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    att = e / e.sum(axis=1, keepdims=True)
    ctx = np.einsum("bj,bjh->bh", att, v)
    h1c = h1 + ctx
    a2 = h1c @ p["hid_w"] + p["hid_b"]
    h2, ds2 = _silu(a2)
    out = h2 @ p["out_w"] + p["out_b"]
    cache = (u, ds1, h1, q, tok, k, v, att, h1c, ds2, h2, c, scale)
    return out, cache


def _backward(p: dict, spec: DenoiserSpec, cache, dout: np.ndarray, per_example: bool) -> dict:
    """Reverse pass.  With ``per_example`` every gradient gains a leading batch axis."""
    u, ds1, h1, q, tok, k, v, att, h1c, ds2, h2, c, scale = cache
    outer = (lambda a, b: np.einsum("bi,bj->bij", a, b)) if per_example else (lambda a, b: a.T @ b)
    bsum = (lambda a: a) if per_example else (lambda a: a.sum(axis=0))
    g = {}
    g["out_w"] = outer(h2, dout)
    g["out_b"] = bsum(dout)
    da2 = (dout @ p["out_w"].T) * ds2
    g["hid_w"] = outer(h1c, da2)
    g["hid_b"] = bsum(da2)
    dh1c = da2 @ p["hid_w"].T
    # attention: ctx = sum_j att_j v_j, att = softmax(q.k_j * scale)
    datt = np.einsum("bh,bjh->bj", dh1c, v)
    dv = att[:, :, None] * dh1c[:, None, :]
    dsc = att * (datt - (att * datt).sum(axis=1, keepdims=True)) * scale
    dq = np.einsum("bj,bja->ba", dsc, k)
    dk = dsc[:, :, None] * q[:, None, :]
    if per_example:
        g["cond_key"] = np.einsum("bjc,bja->bca", tok, dk)
        g["cond_value"] = np.einsum("bjc,bjh->bch", tok, dv)
    else:
        g["cond_key"] = np.einsum("bjc,bja->ca", tok, dk)
        g["cond_value"] = np.einsum("bjc,bjh->ch", tok, dv)
    dtok = dk @ p["cond_key"].T + dv @ p["cond_value"].T
    B = len(c)
    if per_example:
        ce = np.zeros((B,) + spec.shapes["class_embed"])
        ce[np.arange(B), c] = dtok[:, 0]
        g["class_embed"] = ce
    else:
        ce = np.zeros(spec.shapes["class_embed"])
        np.add.at(ce, c, dtok[:, 0])
        g["class_embed"] = ce
    g["cond_null"] = bsum(dtok[:, 1])
    g["query"] = outer(h1, dq)
    dh1 = dh1c + dq @ p["query"].T
    da1 = dh1 * ds1
    g["in_w"] = outer(u, da1)
    g["in_b"] = bsum(da1)
    return g


def _flatten(g: dict, spec: DenoiserSpec, per_example: bool) -> np.ndarray:
    if per_example:
        B = next(iter(g.values())).shape[0]
        return np.concatenate([g[n].reshape(B, -1) for n in spec.shapes], axis=1)
    return np.concatenate([g[n].reshape(-1) for n in spec.shapes])


def predict_noise(theta: ParamVector, xt: np.ndarray, t, c, cfg: DiffusionConfig) -> np.ndarray:
    """ε̂ for a batch: ``xt`` of shape (B, *image_shape) or (B, D)."""
    spec = DenoiserSpec.for_config(cfg)
    xt = np.asarray(xt, dtype=np.float64)
    B = xt.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (B,))
    cfg.check_t(t)
    out, _ = _forward(spec.unpack(theta), spec, xt.reshape(B, -1), t, c)
    return out.reshape(xt.shape)


def q_sample_from_alpha_bar(x, alpha_bar, eps):
    ab = np.asarray(alpha_bar, dtype=np.float64)
    return np.sqrt(ab) * np.asarray(x, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def q_sample(x: np.ndarray, t, eps: np.ndarray, cfg: DiffusionConfig) -> np.ndarray:
    """Forward noising x_t = sqrt(ᾱ_t) x + sqrt(1-ᾱ_t) eps (t is 1-based)."""
    x = np.asarray(x)
    eps = np.asarray(eps)
    if eps.shape != x.shape:
        raise ValueError("eps must have the same shape as x")
    t = np.asarray(t)
    cfg.check_t(t)
    ab = cfg.alpha_bars[t - 1]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x.ndim - ab.ndim))
    return q_sample_from_alpha_bar(x, ab, eps)


def _region_weights(region, D: int) -> np.ndarray:
    """Per-pixel weights that average over active pixels only."""
    if region is None:
        return np.full(D, 1.0 / D)
    m = np.asarray(region, dtype=np.float64).reshape(-1)
    if m.size != D:
        raise ValueError("region mask does not match the image shape")
    if m.sum() <= 0:
        raise ValueError("region mask has no active pixel")
    return m / m.sum()


def _batch_losses(p, spec, cfg, x, c, t, eps, weights, want_grad=False, per_example=False, row_weights=None):
    """Per-row losses for flattened batches; optionally the gradient of sum(row_weights * loss)."""
    ab = cfg.alpha_bars[t - 1][:, None]
    xt = np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps
    out, cache = _forward(p, spec, xt, t, c)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite denoiser output", _first_bad_segment(p))
    r = out - eps
    losses = (r * r) @ weights
    if not want_grad:
        return losses, None
    rw = np.ones(len(losses)) if row_weights is None else row_weights
    dout = 2.0 * r * weights[None, :] * rw[:, None]
    return losses, _backward(p, spec, cache, dout, per_example)


def _first_bad_segment(p: dict) -> str | None:
    for name, arr in p.items():
        if not np.all(np.isfinite(arr)):
            return name
    return "activations"


def ddpm_loss(z: Example, theta: ParamVector, t: int, eps: np.ndarray, cfg: DiffusionConfig, region=None) -> float:
    """ε-prediction squared error for one example at one timestep."""
    cfg.check_t(t)
    spec = DenoiserSpec.for_config(cfg)
    eps = np.asarray(eps, dtype=np.float64).reshape(1, -1)
    x = np.asarray(z.x, dtype=np.float64).reshape(1, -1)
    if eps.shape != x.shape:
        raise ValueError("eps must have the image shape")
    w = _region_weights(region, cfg.image_dim)
    losses, _ = _batch_losses(spec.unpack(theta), spec, cfg, x, np.array([z.c]), np.array([t]), eps, w)
    return float(losses[0])


def strided_timesteps(stride: int, cfg: DiffusionConfig) -> np.ndarray:
    if not 1 <= stride <= cfg.T:
        raise IndexError(f"stride must lie in [1, {cfg.T}]")
    return np.arange(1, cfg.T + 1, stride)


def timestep_noise(noise_seed: int, ids, ts, cfg: DiffusionConfig) -> np.ndarray:
    """Loss noise keyed by (seed, timestep) only, shape (len(ids), len(ts), D).

    Every example sees the same draw at a given timestep (common random
    numbers), so score differences between examples are not Monte-Carlo noise.
    """
    ids = np.asarray(ids)
    eps = keyed_normal(noise_seed, tag("loss-noise"), np.asarray(ts), size=cfg.image_dim)
    return np.broadcast_to(eps, ids.shape + eps.shape)


def _rows(x, c, ids, ts, noise_seed, cfg):
    """Expand examples x timesteps into flat rows."""
    n, S = len(ids), len(ts)
    X = np.repeat(x.reshape(n, -1).astype(np.float64), S, axis=0)
    C = np.repeat(c, S)
    Tt = np.tile(ts, n)
    E = timestep_noise(noise_seed, ids, ts, cfg).reshape(n * S, -1)
    return X, C, Tt, E


def strided_losses(x, c, ids, theta: ParamVector, stride: int, noise_seed: int, cfg: DiffusionConfig,
                   region=None, chunk: int = 256) -> np.ndarray:
    """Vectorized strided loss for many examples given as arrays."""
    ts = strided_timesteps(stride, cfg)
    spec = DenoiserSpec.for_config(cfg)
    p = spec.unpack(theta)
    w = _region_weights(region, cfg.image_dim)
    x = np.asarray(x)
    c = np.asarray(c, dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    out = np.empty(len(ids))
    step = max(1, chunk // len(ts)) if len(ts) < chunk else 1
    for s in range(0, len(ids), step):
        sl = slice(s, s + step)
        X, C, Tt, E = _rows(x[sl], c[sl], ids[sl], ts, noise_seed, cfg)
        losses, _ = _batch_losses(p, spec, cfg, X, C, Tt, E, w)
        out[sl] = losses.reshape(-1, len(ts)).mean(axis=1)
    return out


def strided_loss(z: Example, theta: ParamVector, stride: int, noise_seed: int, cfg: DiffusionConfig, region=None) -> float:
    """Mean loss over t in {1, 1+stride, ...} with keyed noise; bit-reproducible."""
    return float(strided_losses(z.x[None], [z.c], [z.id], theta, stride, noise_seed, cfg, region)[0])


def loss_gradient(z: Example, theta: ParamVector, stride: int, noise_seed: int, cfg: DiffusionConfig,
                  region=None) -> ParamVector:
    """Exact gradient of :func:`strided_loss` with respect to theta."""
    ts = strided_timesteps(stride, cfg)
    spec = DenoiserSpec.for_config(cfg)
    X, C, Tt, E = _rows(np.asarray(z.x)[None], np.array([z.c]), np.array([z.id]), ts, noise_seed, cfg)
    w = _region_weights(region, cfg.image_dim)
    _, g = _batch_losses(spec.unpack(theta), spec, cfg, X, C, Tt, E, w, want_grad=True,
                         row_weights=np.full(len(ts), 1.0 / len(ts)))
    flat = _flatten(g, spec, per_example=False)
    if not np.all(np.isfinite(flat)):
        raise NumericError("non-finite gradient", _first_bad_segment(g))
    return theta.with_values(flat)


def row_gradients(theta: ParamVector, x, c, t, eps, cfg: DiffusionConfig) -> np.ndarray:
    """(n, P) gradients of single-timestep losses, one row per (x, c, t, eps)."""
    spec = DenoiserSpec.for_config(cfg)
    t = np.asarray(t, dtype=np.int64)
    cfg.check_t(t)
    w = _region_weights(None, cfg.image_dim)
    x = np.asarray(x, dtype=np.float64).reshape(len(t), -1)
    eps = np.asarray(eps, dtype=np.float64).reshape(len(t), -1)
    _, g = _batch_losses(spec.unpack(theta), spec, cfg, x, np.asarray(c, dtype=np.int64), t, eps, w,
                         want_grad=True, per_example=True)
    return _flatten(g, spec, True)


def per_example_gradients(x, c, ids, theta: ParamVector, ts, noise_seed: int, cfg: DiffusionConfig) -> np.ndarray:
    """(n, P) gradients of each example's keyed-noise loss averaged over timesteps ``ts``."""
    ids = np.asarray(ids, dtype=np.int64)
    ts = np.atleast_1d(np.asarray(ts, dtype=np.int64))
    X, C, Tt, E = _rows(np.asarray(x), np.asarray(c, dtype=np.int64), ids, ts, noise_seed, cfg)
    flat = row_gradients(theta, X, C, Tt, E, cfg)
    return flat.reshape(len(ids), len(ts), -1).mean(axis=1)


def sample(theta: ParamVector, c, eps_seed, cfg: DiffusionConfig, init=None, t_start: int | None = None) -> np.ndarray:
    """Ancestral DDPM sampling with every noise draw keyed by ``eps_seed``.

    ``c`` and ``eps_seed`` may be scalars or equal-length sequences; returns
    (B, *image_shape) for sequences and a single image for scalars.  With
    ``init`` the chain starts from ``init`` noised to ``t_start`` (keyed by
    the same seed) instead of pure noise.
    """
    scalar = np.ndim(c) == 0 and np.ndim(eps_seed) == 0 and (init is None or np.ndim(init) == len(cfg.image_shape))
    c = np.atleast_1d(np.asarray(c, dtype=np.int64))
    seeds = np.atleast_1d(np.asarray(eps_seed, dtype=np.int64))
    c, seeds = np.broadcast_arrays(c, seeds)
    if c.min() < 0 or c.max() >= cfg.num_classes:
        raise ValueError("condition label out of range")
    spec = DenoiserSpec.for_config(cfg)
    p = spec.unpack(theta)
    D = cfg.image_dim
    betas, abar = cfg.betas, cfg.alpha_bars
    x = keyed_normal(seeds, tag("sample-init"), size=D)
    start = cfg.T
    if init is not None:
        start = cfg.T if t_start is None else int(t_start)
        cfg.check_t(start)
        x0 = np.broadcast_to(np.asarray(init, dtype=np.float64).reshape(-1, D), (len(c), D))
        x = q_sample_from_alpha_bar(x0, abar[start - 1], x)
    for t in range(start, 0, -1):
        eps_hat, _ = _forward(p, spec, x, np.full(len(c), t), c)
        beta, ab = betas[t - 1], abar[t - 1]
        x = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
        if t > 1:
            x = x + np.sqrt(beta) * keyed_normal(seeds, tag("sample-step"), t, size=D)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite sample")
    x = np.clip(x, -1.0, 1.0).reshape((len(c),) + cfg.image_shape)
    return x[0] if scalar else x
