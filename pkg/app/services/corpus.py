"""
Procedural moving-sprites corpus.

Generates frame pairs and short videos of translating sprites over a static
(or drifting) background, together with exact dense flow, occlusion and
point-track ground truth. Every function is a pure function of its config.
"""

from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch.utils.data import Dataset

from app.core.logging_config import logger
from app.core.seeding import derive_seed
from app.schemas.corpus import (
    DenseMotionTruth,
    Frame,
    FramePair,
    PixelLocation,
    SpriteSceneConfig,
    TrackAnnotation,
)

QueryStrategy = Literal["uniform_random", "grid", "foreground_biased"]

SUBPIXEL_TOLERANCE_PX = 0.5


@dataclass
class _Layer:
    """One sprite (or the static occluder) with its appearance and motion."""

    layer_id: int
    mask: np.ndarray
    content: np.ndarray
    top: float
    left: float
    velocity: Tuple[float, float]

    def position(self, t: float) -> Tuple[float, float]:
        return self.top + self.velocity[0] * t, self.left + self.velocity[1] * t


class _SpriteScene:
    """A sampled scene: background plate plus layers ordered far to near."""

    def __init__(self, config: SpriteSceneConfig, rng: np.random.Generator, max_time: int):
        self.config = config
        self.height = config.height
        self.width = config.width
        self.drift = config.background_drift
        self.margin = max(abs(d) for d in self.drift) * max_time
        self.background = self._sample_background(rng)
        self.layers = self._sample_layers(rng)
        self.num_sprites = config.num_sprites

    # ---------------------------------------------------------
    # Sampling
    # ---------------------------------------------------------

    def _sample_background(self, rng: np.random.Generator) -> np.ndarray:
        h = self.height + 2 * self.margin
        w = self.width + 2 * self.margin
        mode = self.config.background
        if mode == "solid":
            color = rng.uniform(0.0, 1.0, size=3)
            return np.broadcast_to(color, (h, w, 3)).astype(np.float32).copy()
        if mode == "noise":
            return rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)

        # Smooth texture: a few random plane waves per channel
        rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
        plate = np.zeros((h, w, 3))
        for ch in range(3):
            for _ in range(3):
                freq = rng.uniform(0.05, 0.4, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                plate[..., ch] += np.sin(freq[0] * rows + freq[1] * cols + phase)
        plate -= plate.min(axis=(0, 1), keepdims=True)
        plate /= np.maximum(plate.max(axis=(0, 1), keepdims=True), 1e-8)
        return (0.05 + 0.9 * plate).astype(np.float32)

    def _sample_layers(self, rng: np.random.Generator) -> List[_Layer]:
        cfg = self.config
        c_lo, c_hi = cfg.color_range
        sprites: List[_Layer] = []
        for idx in range(cfg.num_sprites):
            shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
            h = int(rng.integers(cfg.sprite_size[0], cfg.sprite_size[1] + 1))
            w = int(rng.integers(cfg.sprite_size[0], cfg.sprite_size[1] + 1))
            if shape == "disk":
                rr, cc = np.mgrid[0:h, 0:w]
                mask = ((rr - (h - 1) / 2) / (h / 2)) ** 2 + ((cc - (w - 1) / 2) / (w / 2)) ** 2 <= 1.0
            else:
                mask = np.ones((h, w), dtype=bool)
            color = rng.uniform(c_lo, c_hi, size=3)
            content = np.broadcast_to(color, (h, w, 3)).copy()
            if shape == "texture":
                blocks = rng.uniform(c_lo, c_hi, size=((h + 1) // 2, (w + 1) // 2, 3))
                content = np.repeat(np.repeat(blocks, 2, axis=0), 2, axis=1)[:h, :w]
            top = float(rng.integers(0, self.height - h + 1))
            left = float(rng.integers(0, self.width - w + 1))
            if cfg.subpixel:
                velocity = tuple(float(v) for v in rng.uniform(-cfg.max_velocity, cfg.max_velocity, size=2))
            else:
                velocity = tuple(float(v) for v in rng.integers(-cfg.max_velocity, cfg.max_velocity + 1, size=2))
            sprites.append(_Layer(idx, mask, content.astype(np.float32), top, left, velocity))

        order = cfg.depth_order if cfg.depth_order is not None else [int(i) for i in rng.permutation(cfg.num_sprites)]
        layers = [sprites[i] for i in order]

        if cfg.occluder:
            bar_w = max(2, cfg.patch_size)
            left = float(rng.integers(0, self.width - bar_w + 1))
            color = rng.uniform(c_lo, c_hi, size=3)
            content = np.broadcast_to(color, (self.height, bar_w, 3)).astype(np.float32).copy()
            mask = np.ones((self.height, bar_w), dtype=bool)
            layers.append(_Layer(cfg.num_sprites, mask, content, 0.0, left, (0.0, 0.0)))
        return layers

    # ---------------------------------------------------------
    # Rendering
    # ---------------------------------------------------------

    def background_at(self, t: int) -> np.ndarray:
        m = self.margin
        r0 = m - self.drift[0] * t
        c0 = m - self.drift[1] * t
        return self.background[r0:r0 + self.height, c0:c0 + self.width].copy()

    def _place(self, layer: _Layer, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """Canvas-sized (content, coverage) for a layer at time t."""
        top, left = layer.position(t)
        it, il = int(np.floor(top)), int(np.floor(left))
        ft, fl = top - it, left - il
        pad = 1
        H, W = self.height + 2 * pad, self.width + 2 * pad
        content = np.zeros((H, W, 3), dtype=np.float32)
        cover = np.zeros((H, W), dtype=np.float32)
        h, w = layer.mask.shape
        r0, c0 = it + pad, il + pad
        rs, cs = max(r0, 0), max(c0, 0)
        re, ce = min(r0 + h, H), min(c0 + w, W)
        if rs < re and cs < ce:
            sub = (slice(rs - r0, re - r0), slice(cs - c0, ce - c0))
            cover[rs:re, cs:ce] = layer.mask[sub]
            content[rs:re, cs:ce] = layer.content[sub] * layer.mask[sub][..., None]
        if ft or fl:
            cover = ndimage.shift(cover, (ft, fl), order=1, mode="constant")
            content = ndimage.shift(content, (ft, fl, 0), order=1, mode="constant")
        return content[pad:-pad, pad:-pad], cover[pad:-pad, pad:-pad]

    def render(self, t: int) -> Tuple[np.ndarray, np.ndarray]:
        """Painter's algorithm, far to near. Returns (image [H,W,3], owner [H,W])."""
        image = self.background_at(t).astype(np.float32)
        owner = np.full((self.height, self.width), -1, dtype=np.int64)
        for layer in self.layers:
            content, cover = self._place(layer, t)
            if self.config.subpixel:
                alpha = cover[..., None]
                shown = cover > 1e-6
                colour = np.where(shown[..., None], content / np.maximum(alpha, 1e-6), 0.0)
                image = image * (1 - alpha) + colour * alpha
                owner[cover >= 0.5] = layer.layer_id
            else:
                covered = cover > 0.5
                image[covered] = content[covered]
                owner[covered] = layer.layer_id
        return np.clip(image, 0.0, 1.0), owner

    def displacement_table(self, steps: int) -> Dict[int, Tuple[float, float]]:
        table = {-1: (float(self.drift[0] * steps), float(self.drift[1] * steps))}
        for layer in self.layers:
            table[layer.layer_id] = (layer.velocity[0] * steps, layer.velocity[1] * steps)
        return table

    def truth(self, owner_a: np.ndarray, owner_b: np.ndarray, steps: int) -> DenseMotionTruth:
        """Forward truth between two rendered times `steps` apart."""
        table = self.displacement_table(steps)
        ids = np.array(sorted(table))
        lookup = np.array([table[i] for i in ids], dtype=np.float64)
        flow = lookup[np.searchsorted(ids, owner_a)]
        rows, cols = np.indices(owner_a.shape)
        dest_r = np.rint(rows + flow[..., 0]).astype(np.int64)
        dest_c = np.rint(cols + flow[..., 1]).astype(np.int64)
        inside = (dest_r >= 0) & (dest_r < self.height) & (dest_c >= 0) & (dest_c < self.width)
        landed = owner_b[np.clip(dest_r, 0, self.height - 1), np.clip(dest_c, 0, self.width - 1)]
        occluded = ~inside | (landed != owner_a)
        approximate = self.config.subpixel
        return DenseMotionTruth(
            flow=flow.astype(np.float32),
            occluded_next=occluded,
            owner=owner_a,
            approximate=approximate,
            tolerance_px=SUBPIXEL_TOLERANCE_PX if approximate else 0.0,
        )


def _to_frame(image: np.ndarray) -> Frame:
    return Frame(torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)))


def generate_sprite_pair(config: SpriteSceneConfig) -> Tuple[FramePair, DenseMotionTruth]:
    """
    Render one frame pair with exact forward motion truth.

    The frame gap is sampled from `config.gap_frames`; each sprite moves by
    its velocity times the gap. Deterministic for a fixed config.

    Args:
        config: Scene configuration (validated on construction)

    Returns:
        (FramePair, DenseMotionTruth)
    """
    rng = np.random.default_rng(config.seed)
    scene = _SpriteScene(config, rng, max_time=config.gap_frames[1])
    gap = int(rng.integers(config.gap_frames[0], config.gap_frames[1] + 1))
    image_a, owner_a = scene.render(0)
    image_b, owner_b = scene.render(gap)
    pair = FramePair(
        first=_to_frame(image_a),
        second=_to_frame(image_b),
        gap_ms=gap * config.frame_interval_ms,
        gap_frames=gap,
    )
    return pair, scene.truth(owner_a, owner_b, gap)


def _track_point(owner: np.ndarray, layer: _Layer, rng: np.random.Generator, first: bool) -> Tuple[float, float]:
    """Pick a frame-0 pixel of a layer: nearest its centroid first, then random visible pixels."""
    rows, cols = np.nonzero(owner == layer.layer_id)
    if rows.size == 0:
        h, w = layer.mask.shape
        return layer.top + (h - 1) // 2, layer.left + (w - 1) // 2
    if first:
        cr, cc = rows.mean(), cols.mean()
        k = int(np.argmin((rows - cr) ** 2 + (cols - cc) ** 2))
    else:
        k = int(rng.integers(rows.size))
    return float(rows[k]), float(cols[k])


def generate_sprite_video(
    config: SpriteSceneConfig,
    num_frames: int,
    points_per_sprite: int = 1,
) -> Tuple[List[Frame], TrackAnnotation, List[DenseMotionTruth]]:
    """
    Render a video of consecutive frames with point tracks and per-step truth.

    Args:
        config: Scene configuration
        num_frames: Video length (>= 2)
        points_per_sprite: Annotated points sampled on each moving sprite

    Returns:
        (frames, TrackAnnotation, truths) where truths[t] describes t -> t+1
    """
    if num_frames < 2:
        raise ValueError(f"num_frames must be >= 2, got {num_frames}")
    if points_per_sprite < 1:
        raise ValueError("points_per_sprite must be >= 1")

    rng = np.random.default_rng(config.seed)
    scene = _SpriteScene(config, rng, max_time=num_frames - 1)
    rendered = [scene.render(t) for t in range(num_frames)]
    frames = [_to_frame(image) for image, _ in rendered]
    owners = [owner for _, owner in rendered]
    truths = [scene.truth(owners[t], owners[t + 1], 1) for t in range(num_frames - 1)]

    point_rng = np.random.default_rng(derive_seed(config.seed, "tracks"))
    sprites = sorted((l for l in scene.layers if l.layer_id < config.num_sprites), key=lambda l: l.layer_id)
    locations, visible = [], []
    for layer in sprites:
        for k in range(points_per_sprite):
            r0, c0 = _track_point(owners[0], layer, point_rng, first=(k == 0))
            track = np.array([[r0 + layer.velocity[0] * t, c0 + layer.velocity[1] * t] for t in range(num_frames)])
            shown = np.zeros(num_frames, dtype=bool)
            for t in range(num_frames):
                r, c = np.rint(track[t]).astype(int)
                inside = 0 <= track[t, 0] <= config.height - 1 and 0 <= track[t, 1] <= config.width - 1
                shown[t] = inside and owners[t][r, c] == layer.layer_id
            locations.append(track)
            visible.append(shown)

    annotation = TrackAnnotation(
        locations=np.stack(locations),
        visible=np.stack(visible),
        height=config.height,
        width=config.width,
    )
    return frames, annotation, truths


def sample_query_pixels(
    frame: Frame,
    n: int,
    strategy: QueryStrategy = "uniform_random",
    seed: int = 0,
    foreground: Optional[np.ndarray] = None,
) -> List[PixelLocation]:
    """
    Sample n distinct query locations inside the canvas.

    Args:
        frame: Frame the queries live on
        n: Number of locations (1 <= n <= H*W)
        strategy: "uniform_random", "grid" (cell centroids, row-major) or
            "foreground_biased" (weights favour foreground pixels)
        seed: RNG seed
        foreground: Optional bool mask [H, W]; estimated from colour
            deviation against the frame's median colour when omitted

    Returns:
        List of PixelLocation
    """
    H, W = frame.size
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n > H * W:
        raise ValueError(f"Cannot sample {n} distinct pixels from a {H}x{W} canvas")

    if strategy == "grid":
        rows = int(np.clip(round(np.sqrt(n * H / W)), 1, H))
        cols = int(np.ceil(n / rows))
        if cols > W:
            cols = W
            rows = int(np.ceil(n / W))
        cell_h, cell_w = H / rows, W / cols
        points = [
            PixelLocation((i + 0.5) * cell_h - 0.5, (j + 0.5) * cell_w - 0.5)
            for i in range(rows) for j in range(cols)
        ]
        return points[:n]

    rng = np.random.default_rng(seed)
    if strategy == "uniform_random":
        flat = rng.choice(H * W, size=n, replace=False)
    elif strategy == "foreground_biased":
        if foreground is None:
            pixels = frame.pixels.numpy()
            median = np.median(pixels.reshape(-1, 3), axis=0)
            deviation = np.abs(pixels - median).sum(axis=-1)
            weight = deviation / max(float(deviation.max()), 1e-8)
        else:
            weight = np.asarray(foreground, dtype=np.float64)
        weight = weight.reshape(-1) + 0.01
        flat = rng.choice(H * W, size=n, replace=False, p=weight / weight.sum())
    else:
        raise ValueError(f"Unknown query strategy: {strategy}")
    return [PixelLocation(float(i // W), float(i % W)) for i in flat]


class SpritePairDataset(Dataset):
    """
    Map-style dataset of sprite pairs; item i is generated from seed (seed, i),
    so a DataLoader with any number of workers yields a fixed order.
    """

    def __init__(
        self,
        config: SpriteSceneConfig,
        length: int,
        seed: int,
        static: bool = False,
        random_resized_crop: bool = False,
    ):
        self.config = config.model_copy(update={"max_velocity": 0, "background_drift": (0, 0)}) if static else config
        self.length = length
        self.seed = seed
        self.random_resized_crop = random_resized_crop
        logger.debug(f"SpritePairDataset(length={length}, seed={seed}, static={static})")

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        item_seed = derive_seed(self.seed, "pair", index)
        pair, truth = generate_sprite_pair(self.config.model_copy(update={"seed": item_seed}))
        first = pair.first.to_chw()[0]
        second = pair.second.to_chw()[0]
        item = {
            "first": first,
            "second": second,
            "flow": torch.from_numpy(truth.flow),
            "occluded": torch.from_numpy(truth.occluded_next),
            "foreground": torch.from_numpy(truth.sprite_mask),
            "seed": torch.tensor(item_seed, dtype=torch.int64),
        }
        if self.random_resized_crop:
            item = self._crop(item, np.random.default_rng(derive_seed(item_seed, "crop")))
        return item

    def _crop(self, item: Dict[str, torch.Tensor], rng: np.random.Generator) -> Dict[str, torch.Tensor]:
        """Same random crop on both frames, resized back; truth fields no longer apply."""
        _, H, W = item["first"].shape
        scale = rng.uniform(0.6, 1.0)
        h, w = max(2, int(H * scale)), max(2, int(W * scale))
        top, left = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
        out = {}
        for key in ("first", "second"):
            crop = item[key][:, top:top + h, left:left + w].unsqueeze(0)
            out[key] = F.interpolate(crop, size=(H, W), mode="bilinear", align_corners=False)[0].clamp(0, 1)
        out["flow"] = torch.full_like(item["flow"], float("nan"))
        out["occluded"] = torch.zeros_like(item["occluded"])
        out["foreground"] = torch.zeros_like(item["foreground"])
        out["seed"] = item["seed"]
        return out
