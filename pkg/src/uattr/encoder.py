"""Two-layer convolutional classifier whose pooled features measure image deviation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .rng import keyed_normal, keyed_uniform, tag

ENCODER_MAGIC = b"UATTRENC"


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, H, W, C*9) patches for a 3x3 'same' convolution."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
    B, C, H, W = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B, H, W, C * 9)


def _col2im(dcols: np.ndarray, C: int) -> np.ndarray:
    B, H, W, _ = dcols.shape
    d = dcols.reshape(B, H, W, C, 3, 3)
    out = np.zeros((B, C, H + 2, W + 2))
    for i in range(3):
        for j in range(3):
            out[:, :, i : i + H, j : j + W] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out[:, :, 1:-1, 1:-1]


@dataclass
class ConvEncoder:
    w1: np.ndarray  # (C*9, F1)
    b1: np.ndarray
    w2: np.ndarray  # (F1*9, F2)
    b2: np.ndarray
    wc: np.ndarray  # (F2*(H/2)*(W/2), K)
    bc: np.ndarray

    @classmethod
    def init(cls, image_shape, num_classes: int, seed: int, f1: int = 8, f2: int = 16) -> "ConvEncoder":
        C, H, W = image_shape
        feat = f2 * (H // 2) * (W // 2)
        shapes = [(C * 9, f1), (f1 * 9, f2), (feat, num_classes)]
        ws = [keyed_normal(seed, tag("encoder-init"), i, size=a * b).reshape(a, b) / np.sqrt(a) for i, (a, b) in enumerate(shapes)]
        return cls(ws[0], np.zeros(f1), ws[1], np.zeros(f2), ws[2], np.zeros(num_classes))

    def _forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        B, C, H, W = x.shape
        c1 = _im2col(x)
        h1 = np.tanh(c1 @ self.w1 + self.b1)  # B,H,W,F1
        c2 = _im2col(h1.transpose(0, 3, 1, 2))
        h2 = np.tanh(c2 @ self.w2 + self.b2)  # B,H,W,F2
        F2 = h2.shape[-1]
        pooled = h2.reshape(B, H // 2, 2, W // 2, 2, F2).mean(axis=(2, 4))
        emb = pooled.reshape(B, -1)
        return emb, (x, c1, h1, c2, h2)

    def embed(self, x) -> np.ndarray:
        return self._forward(x)[0]

    def logits(self, x) -> np.ndarray:
        return self.embed(x) @ self.wc + self.bc

    def _grads(self, x, y):
        emb, (x, c1, h1, c2, h2) = self._forward(x)
        B, C, H, W = x.shape
        z = emb @ self.wc + self.bc
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.log(p[np.arange(B), y] + 1e-300).mean()
        dz = p.copy()
        dz[np.arange(B), y] -= 1.0
        dz /= B
        g = {"wc": emb.T @ dz, "bc": dz.sum(0)}
        demb = dz @ self.wc.T
        F2 = h2.shape[-1]
        dpool = demb.reshape(B, H // 2, 1, W // 2, 1, F2) / 4.0
        dh2 = np.broadcast_to(dpool, (B, H // 2, 2, W // 2, 2, F2)).reshape(B, H, W, F2)
        da2 = dh2 * (1 - h2**2)
        g["w2"] = c2.reshape(-1, c2.shape[-1]).T @ da2.reshape(-1, F2)
        g["b2"] = da2.sum(axis=(0, 1, 2))
        dh1 = _col2im(da2 @ self.w2.T, h1.shape[-1]).transpose(0, 2, 3, 1)
        da1 = dh1 * (1 - h1**2)
        g["w1"] = c1.reshape(-1, c1.shape[-1]).T @ da1.reshape(-1, da1.shape[-1])
        g["b1"] = da1.sum(axis=(0, 1, 2))
        return loss, g

    _names = ("w1", "b1", "w2", "b2", "wc", "bc")

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).reshape(-1) for n in self._names])

    def save(self, path, header: dict | None = None) -> str:
        shapes = {n: list(getattr(self, n).shape) for n in self._names}
        return write_container(path, ENCODER_MAGIC, dict(header or {}, kind="encoder", shapes=shapes), self.flat())

    @classmethod
    def load(cls, path) -> "ConvEncoder":
        header, payload = read_container(path, ENCODER_MAGIC)
        parts, pos = {}, 0
        for n in cls._names:
            shape = tuple(header["shapes"][n])
            size = int(np.prod(shape))
            parts[n] = payload[pos : pos + size].astype(np.float64).reshape(shape)
            pos += size
        return cls(**parts)


def train_encoder(images: np.ndarray, labels: np.ndarray, num_classes: int, seed: int = 0, epochs: int = 8,
                  batch_size: int = 64, lr: float = 0.1, momentum: float = 0.9) -> ConvEncoder:
    """Deterministic SGD-momentum classifier training."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    enc = ConvEncoder.init(images.shape[1:], num_classes, seed)
    vel = {n: np.zeros_like(getattr(enc, n)) for n in enc._names}
    n = len(images)
    for epoch in range(epochs):
        order = np.argsort(keyed_uniform(seed, tag("encoder-shuffle"), epoch, np.arange(n), size=1)[:, 0], kind="stable")
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            _, g = enc._grads(images[idx], labels[idx])
            for name in enc._names:
                vel[name] = momentum * vel[name] + g[name]
                setattr(enc, name, getattr(enc, name) - lr * vel[name])
    return enc


def feature_distance(enc: ConvEncoder, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1 − cosine similarity of encoder features, per image pair."""
    ea, eb = enc.embed(a), enc.embed(b)
    na = np.linalg.norm(ea, axis=1, keepdims=True)
    nb = np.linalg.norm(eb, axis=1, keepdims=True)
    live = (na[:, 0] > 0) & (nb[:, 0] > 0)
    # half squared distance of unit vectors equals 1 - cos, and is exactly 0 for equal inputs
    ua = np.divide(ea, na, out=np.zeros_like(ea), where=na > 0)
    ub = np.divide(eb, nb, out=np.zeros_like(eb), where=nb > 0)
    d = 0.5 * ((ua - ub) ** 2).sum(axis=1)
    return np.clip(np.where(live, d, 0.0), 0.0, 2.0)
