"""Visual encoder, location encoder, generator and discriminator.

The ranking network is not a separate set of weights: it *is* the visual
encoder applied to object patches, so :attr:`GanNetworks.ranking` returns the
encoder object itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .geometry import HeatMap, resize_bilinear
from .nn import Conv2d, ConvTranspose2d, Linear, Module
from .tensor import DimensionError, Tensor, as_tensor, concat, no_grad


@dataclass(frozen=True)
class NetConfig:
    n_categories: int = 5
    channels: int = 1
    scene_size: int = 32
    patch_size: int = 16
    d_vis: int = 128
    d_loc: int = 16
    heat_res: int = 8
    enc_channels: tuple[int, int, int] = (8, 16, 32)
    gen_channels: tuple[int, int, int] = (64, 32, 16)
    disc_channels: tuple[int, int, int] = (8, 16, 32)
    disc_hidden: int = 32
    loc_channels: int = 8
    dropout: float = 0.5
    conditional_disc: bool = False

    @property
    def d_latent(self) -> int:
        return self.d_vis + self.d_loc


class Encoder(Module):
    """Conv stack with a GAP classification head and a spatial feature head.

    Works on scenes and on patches: the conv map is average-pooled to a fixed
    4x4 grid before the fully connected feature layer.
    """

    grid = 4

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        c1, c2, c3 = cfg.enc_channels
        self.cfg = cfg
        self.conv1 = Conv2d(cfg.channels, c1, 3, rng, pad=1)
        self.conv2 = Conv2d(c1, c2, 3, rng, pad=1)
        self.conv3 = Conv2d(c2, c3, 3, rng, pad=1)
        self.cls = Linear(c3, cfg.n_categories, rng)
        self.fc = Linear(c3 * self.grid * self.grid, cfg.d_vis, rng)

    def _check(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != self.cfg.channels or x.shape[2] != x.shape[3] \
                or x.shape[2] not in (self.cfg.scene_size, self.cfg.patch_size):
            raise DimensionError(
                f"encoder expects [N,{self.cfg.channels},S,S] with S in "
                f"{{{self.cfg.scene_size},{self.cfg.patch_size}}}, got {x.shape}")
        return x

    def conv_map(self, x: Tensor) -> Tensor:
        x = self._check(x)
        h = F.max_pool2d(F.relu(self.conv1(x)), 2)
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        return F.relu(self.conv3(h))

    def features(self, x: Tensor) -> Tensor:
        """[N, d_vis] visual feature vectors."""
        return self.head(self.conv_map(x))

    def head(self, fmap: Tensor) -> Tensor:
        """Feature vectors from a conv map produced by :meth:`conv_map`."""
        pooled = F.adaptive_avg_pool2d(fmap, self.grid)
        return self.fc(pooled.reshape(pooled.shape[0], -1))

    def logits(self, x: Tensor) -> Tensor:
        return self.cls(F.global_avg_pool(self.conv_map(x)))

    def cam_maps(self, images: np.ndarray) -> np.ndarray:
        """Raw class activation maps [N, n_categories, h, w] at conv resolution (no graph)."""
        with no_grad():
            fmap = self.conv_map(Tensor(images)).data
        return np.einsum("nkhw,kc->nchw", fmap, self.cls.weight.data)


class LocEncoder(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.conv = Conv2d(1, cfg.loc_channels, 3, rng, pad=1)
        self.fc = Linear(cfg.loc_channels * (cfg.heat_res // 2) ** 2, cfg.d_loc, rng)

    def __call__(self, heat: Tensor) -> Tensor:
        heat = as_tensor(heat)
        r = self.cfg.heat_res
        if heat.ndim == 2:
            heat = heat.reshape(1, 1, *heat.shape)
        elif heat.ndim == 3:
            heat = heat.reshape(heat.shape[0], 1, *heat.shape[1:])
        if heat.shape[-2:] != (r, r):
            raise DimensionError(f"location encoder expects {r}x{r} heat maps, got {heat.shape[-2:]}")
        h = F.max_pool2d(F.relu(self.conv(heat)), 2)
        return self.fc(h.reshape(h.shape[0], -1))


class Generator(Module):
    """Two fully connected layers, then three stride-2 up-convolutions with convs between."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        g1, g2, g3 = cfg.gen_channels
        self.cfg = cfg
        self.base = cfg.patch_size // 8
        self.fc1 = Linear(cfg.d_latent, 256, rng)
        self.fc2 = Linear(256, g1 * self.base * self.base, rng)
        self.up1 = ConvTranspose2d(g1, g2, 4, rng, stride=2, pad=1)
        self.conv1 = Conv2d(g2, g2, 3, rng, pad=1)
        self.up2 = ConvTranspose2d(g2, g3, 4, rng, stride=2, pad=1)
        self.conv2 = Conv2d(g3, g3, 3, rng, pad=1)
        self.up3 = ConvTranspose2d(g3, cfg.channels, 4, rng, stride=2, pad=1)

    def __call__(self, latent: Tensor) -> Tensor:
        z = as_tensor(latent)
        if z.ndim == 1:
            z = z.reshape(1, -1)
        if z.shape[-1] != self.cfg.d_latent:
            raise DimensionError(f"generator expects latent length {self.cfg.d_latent}, got {z.shape[-1]}")
        h = F.relu(self.fc1(z))
        h = F.relu(self.fc2(h)).reshape(z.shape[0], self.cfg.gen_channels[0], self.base, self.base)
        h = F.relu(self.up1(h))
        h = F.relu(self.conv1(h))
        h = F.relu(self.up2(h))
        h = F.relu(self.conv2(h))
        return F.sigmoid(self.up3(h))


class Discriminator(Module):
    """Conv stack, global average pooling, two dropout+fc layers, softmax over (fake, real)."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        d1, d2, d3 = cfg.disc_channels
        self.cfg = cfg
        self.conv1 = Conv2d(cfg.channels, d1, 3, rng, stride=2, pad=1)
        self.conv2 = Conv2d(d1, d2, 3, rng, stride=2, pad=1)
        self.conv3 = Conv2d(d2, d3, 3, rng, pad=1)
        extra = cfg.d_latent if cfg.conditional_disc else 0
        self.fc1 = Linear(d3 + extra, cfg.disc_hidden, rng)
        self.fc2 = Linear(cfg.disc_hidden, 2, rng)

    def probs_logits(self, x: Tensor, rng: np.random.Generator | None = None,
                     condition: Tensor | None = None) -> Tensor:
        """[N, 2] pre-softmax scores; column 1 is the real class."""
        x = as_tensor(x)
        p = self.cfg.patch_size
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.shape[1:] != (self.cfg.channels, p, p):
            raise DimensionError(f"discriminator expects [N,{self.cfg.channels},{p},{p}], got {x.shape}")
        h = F.leaky_relu(self.conv1(x))
        h = F.leaky_relu(self.conv2(h))
        h = F.leaky_relu(self.conv3(h))
        h = F.global_avg_pool(h)
        if self.cfg.conditional_disc:
            if condition is None:
                raise DimensionError("conditional discriminator needs the latent condition")
            h = concat([h, as_tensor(condition)], axis=1)
        h = F.dropout(h, self.cfg.dropout, rng, self.training)
        h = F.leaky_relu(self.fc1(h))
        h = F.dropout(h, self.cfg.dropout, rng, self.training)
        return self.fc2(h)

    def probs(self, x: Tensor, rng: np.random.Generator | None = None, condition: Tensor | None = None) -> Tensor:
        """[N, 2] softmax probabilities over (fake, real)."""
        return F.softmax(self.probs_logits(x, rng, condition), axis=-1)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None, condition: Tensor | None = None) -> Tensor:
        """[N] probability that each image is real."""
        return self.probs(x, rng, condition)[:, 1]


class GanNetworks:
    """The full network set; ``ranking`` aliases ``encoder``."""

    names = ("encoder", "loc_encoder", "generator", "discriminator")

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 1])
        self.encoder = Encoder(cfg, rng)
        self.loc_encoder = LocEncoder(cfg, rng)
        self.generator = Generator(cfg, rng)
        self.discriminator = Discriminator(cfg, rng)

    @property
    def ranking(self) -> Encoder:
        return self.encoder

    def modules(self) -> dict[str, Module]:
        return {n: getattr(self, n) for n in self.names}

    def train(self, mode: bool = True) -> "GanNetworks":
        for m in self.modules().values():
            m.train(mode)
        return self

    def eval(self) -> "GanNetworks":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for n, m in self.modules().items():
            out.update({f"{n}.{k}": v for k, v in m.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, m in self.modules().items():
            prefix = n + "."
            m.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})


# -- functional wrappers over the network set ---------------------------------

def encode_image(enc: Encoder, image: np.ndarray | Tensor) -> Tensor:
    """Visual feature vector of one image (or a batch)."""
    t = as_tensor(image)
    f = enc.features(t)
    return f.reshape(f.shape[1:]) if t.ndim == 3 else f


def class_activation_map(enc: Encoder, image: np.ndarray, category: int) -> HeatMap:
    """Rectified, bilinearly upsampled CAM of one category, scaled to peak 1."""
    if category not in range(enc.cfg.n_categories):
        raise KeyError(f"category {category} unknown to the encoder")
    img = np.asarray(image, dtype=float)
    cam = enc.cam_maps(img[None] if img.ndim == 3 else img)[0, category]
    up = np.maximum(resize_bilinear(cam, img.shape[-2], img.shape[-1]), 0.0)
    return HeatMap(up, "cam").normalized()


def encode_location(loc: LocEncoder, heatmap: HeatMap | np.ndarray) -> Tensor:
    scores = heatmap.scores if isinstance(heatmap, HeatMap) else np.asarray(heatmap)
    r = loc.cfg.heat_res
    if scores.shape[-2:] != (r, r):
        raise DimensionError(f"location encoder expects {r}x{r} heat maps, got {scores.shape[-2:]}")
    out = loc(Tensor(scores))
    return out.reshape(out.shape[1:]) if scores.ndim == 2 else out


def build_latent(visual: Tensor, loc: Tensor, d_vis: int | None = None, d_loc: int | None = None) -> Tensor:
    visual, loc = as_tensor(visual), as_tensor(loc)
    if d_vis is not None and visual.shape[-1] != d_vis:
        raise DimensionError(f"visual feature length {visual.shape[-1]} != {d_vis}")
    if d_loc is not None and loc.shape[-1] != d_loc:
        raise DimensionError(f"location feature length {loc.shape[-1]} != {d_loc}")
    return concat([visual, loc], axis=-1)


def generate(gen: Generator, latent: Tensor) -> Tensor:
    t = as_tensor(latent)
    out = gen(t)
    return out.reshape(out.shape[1:]) if t.ndim == 1 else out


def discriminate(disc: Discriminator, image: np.ndarray | Tensor) -> float:
    """P(real) for one image in eval mode."""
    was = disc.training
    disc.eval()
    try:
        return float(disc(as_tensor(image)).data[0])
    finally:
        disc.train(was)


# -- synthesis helpers shared by training and discovery ----------------------------

def cam_from_maps(raw: np.ndarray, size: int) -> np.ndarray:
    """Rectified, upsampled, peak-normalised CAM from one raw [h, w] map."""
    up = np.maximum(resize_bilinear(raw, size, size), 0.0)
    peak = up.max()
    return up / peak if peak > 0 else up


def condition_map(cam: np.ndarray, region: np.ndarray, res: int) -> np.ndarray:
    """CAM restricted to one instance region, renormalised, block-averaged to ``res``."""
    return HeatMap(cam * region).normalized().downsample(res)


def synthesize(nets: GanNetworks, images: np.ndarray, cond: np.ndarray,
               fmap: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Generator output and latent for scenes [N,C,S,S] and condition maps [N,r,r].

    ``fmap`` may carry an already computed encoder conv map of ``images``.
    """
    enc = nets.encoder
    vis = enc.features(as_tensor(images)) if fmap is None else enc.head(fmap)
    loc = nets.loc_encoder(as_tensor(cond))
    z = concat([vis, loc], axis=1)
    return nets.generator(z), z
