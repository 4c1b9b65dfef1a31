"""Two-head miniature encoder-decoder (segmentation + uv regression).

Three resolution levels joined by skip connections; the decoder's final
feature map feeds a segmentation head (sigmoid, one channel per structure)
and a uv head (tanh, two channels per structure). ``mode="heatmap"`` swaps
both heads for one linear head with a channel per landmark.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StaleTapeError
from .nn import AvgPool2, Conv2d, Param, ReLU, Sequential, Upsample2, conv_block


@dataclass(frozen=True)
class NetConfig:
    n_structures: int = 1
    channels: tuple[int, int, int] = (8, 16, 32)
    head_channels: int = 8
    in_channels: int = 1
    mode: str = "denseseg"
    n_landmarks: int = 0
    seed: int = 0
    zero_heads: bool = True

    def __post_init__(self):
        if self.mode not in ("denseseg", "heatmap"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "heatmap" and self.n_landmarks < 1:
            raise ValueError("heatmap mode needs n_landmarks >= 1")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class ToyNet:
    def __init__(self, config: NetConfig = NetConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c1, c2, c3 = config.channels
        hc = config.head_channels
        s = config.n_structures
        self.enc1 = conv_block("enc1", config.in_channels, c1, rng)
        self.pool1 = AvgPool2()
        self.enc2 = conv_block("enc2", c1, c2, rng)
        self.pool2 = AvgPool2()
        self.bottom = conv_block("bottom", c2, c3, rng)
        self.up2 = Upsample2()
        self.dec2 = Sequential(Conv2d("dec2", c3 + c2, c2, 3, rng), ReLU())
        self.up1 = Upsample2()
        self.dec1 = Sequential(Conv2d("dec1", c2 + c1, c1, 3, rng), ReLU())
        z = config.zero_heads
        if config.mode == "denseseg":
            # both heads' 3x3 convs read the same features; run them as one
            # conv with 2*hc outputs (first hc channels: segmentation)
            self.head_in = Sequential(Conv2d("heads.0", c1, 2 * hc, 3, rng), ReLU())
            self.seg_out = Conv2d("seg.1", hc, s, 1, rng, zero=z)
            self.uv_out = Conv2d("uv.1", hc, 2 * s, 1, rng, zero=z)
            self.heads = [self.head_in, self.seg_out, self.uv_out]
        else:
            self.hm_head = Sequential(Conv2d("hm.0", c1, hc, 3, rng), ReLU(),
                                      Conv2d("hm.1", hc, config.n_landmarks, 1, rng, zero=z))
            self.heads = [self.hm_head]
        self._tape = None

    @property
    def blocks(self):
        return [self.enc1, self.enc2, self.bottom, self.dec2, self.dec1, *self.heads]

    def params(self) -> list[Param]:
        return [p for b in self.blocks for p in b.params()]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def _trunk(self, x):
        e1 = self.enc1.forward(x)
        e2 = self.enc2.forward(self.pool1.forward(e1))
        b = self.bottom.forward(self.pool2.forward(e2))
        d2 = self.dec2.forward(np.concatenate([self.up2.forward(b), e2], axis=0))
        d1 = self.dec1.forward(np.concatenate([self.up1.forward(d2), e1], axis=0))
        return d1, (e2.shape[0], e1.shape[0])

    def forward(self, images: np.ndarray):
        """Run the network on ``images`` of shape (N, C, H, W).

        Returns ``(seg_probs, uv)`` with shapes (N, S, H, W) and
        (N, S, 2, H, W) in denseseg mode, or the heatmaps (N, L, H, W) in
        heatmap mode.
        """
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4:
            raise ValueError(f"expected N x C x H x W input, got shape {images.shape}")
        n, c, h, w = images.shape
        if h % 4 or w % 4:
            raise ValueError(f"spatial size {h}x{w} must be divisible by 4")
        if c != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {c}")
        feat, skips = self._trunk(images.transpose(1, 0, 2, 3))
        if self.config.mode == "heatmap":
            hm = self.hm_head.forward(feat)
            self._tape = ("heatmap", skips)
            return hm.transpose(1, 0, 2, 3)
        s = self.config.n_structures
        hc = self.config.head_channels
        hf = self.head_in.forward(feat)
        seg = _sigmoid(self.seg_out.forward(hf[:hc]))
        uv = np.tanh(self.uv_out.forward(hf[hc:]))
        self._tape = ("denseseg", skips, seg, uv)
        seg_out = seg.transpose(1, 0, 2, 3)
        uv_out = uv.transpose(1, 0, 2, 3).reshape(n, s, 2, h, w)
        return seg_out, uv_out

    __call__ = forward

    def backward(self, d_seg=None, d_uv=None, d_heatmap=None):
        """Accumulate parameter gradients given gradients w.r.t. the outputs.

        ``None`` upstream gradients are treated as zero. Returns the gradient
        with respect to the input images.
        """
        if self._tape is None:
            raise StaleTapeError("backward called without a matching forward")
        tape, self._tape = self._tape, None
        if tape[0] == "heatmap":
            _, skips = tape
            g = np.asarray(d_heatmap, dtype=np.float64).transpose(1, 0, 2, 3)
            g_feat = self.hm_head.backward(g)
        else:
            _, skips, seg, uv = tape
            s, n, h, w = seg.shape
            gs = np.zeros_like(seg) if d_seg is None else np.asarray(d_seg).transpose(1, 0, 2, 3)
            if d_uv is None:
                gu = np.zeros_like(uv)
            else:
                gu = np.asarray(d_uv).reshape(n, 2 * s, h, w).transpose(1, 0, 2, 3)
            g_hf = np.concatenate([self.seg_out.backward(gs * seg * (1.0 - seg)),
                                   self.uv_out.backward(gu * (1.0 - uv ** 2))], axis=0)
            g_feat = self.head_in.backward(g_hf)
        return self._trunk_backward(g_feat, skips).transpose(1, 0, 2, 3)

    def _trunk_backward(self, g, skips):
        c2, c1 = skips
        g = self.dec1.backward(g)
        g_up1, g_e1 = g[:-c1], g[-c1:]
        g = self.dec2.backward(self.up1.backward(g_up1))
        g_up2, g_e2 = g[:-c2], g[-c2:]
        g = self.bottom.backward(self.up2.backward(g_up2))
        g = self.pool2.backward(g) + g_e2
        g = self.enc2.backward(g)
        g = self.pool1.backward(g) + g_e1
        return self.enc1.backward(g)

    def infer(self, images: np.ndarray, threshold: float = 0.5):
        """Forward pass for inference: uv outputs masked by the thresholded segmentation.

        Returns ``(seg_probs, uv, masks)``; uv is NaN outside each structure's mask.
        """
        seg, uv = self.forward(images)
        self._tape = None
        masks = seg > threshold
        uv = np.where(masks[:, :, None], uv, np.nan)
        return seg, uv, masks

    # flat parameter vector, used by checkpoints
    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        i = 0
        for p in self.params():
            p.data[...] = flat[i:i + p.size].reshape(p.data.shape)
            i += p.size
