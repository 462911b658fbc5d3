"""Procedural street scenes: a labelled "simulator" domain and shifted "real" domains.

Geometry (labels, inverse depth) is drawn from one RNG stream per scene and
appearance from another, so appearance presets never perturb labels or depth.
Images are quantised to 8 bits and inverse depth to 16 bits at render time,
which makes the on-disk PPM/PGM round trip exact.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

CLASS_NAMES = ("sky", "road", "building", "vegetation", "vehicle")
SKY, ROAD, BUILDING, VEGETATION, VEHICLE = range(5)

# world-units camera constant: ground distance at row offset k below the horizon is CAM_K / (k + 0.5)
CAM_K = 40.0


@dataclass
class DomainConfig:
    name: str = "source"
    domain: str = "source"  # source | target
    n_classes: int = 5
    height: int = 32
    width: int = 64
    palette_rotation: float = 0.0  # degrees, about the grey axis
    gamma: float = 1.0
    texture_noise: float = 0.04
    sensor_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ValueError("image height and width must be divisible by 4")
        if self.n_classes != len(CLASS_NAMES):
            raise ValueError(f"the toy ontology has exactly {len(CLASS_NAMES)} classes")
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")

    @property
    def d_scale(self) -> float:
        """Distance at which inverse depth is 1/2: bottom image row maps to ~0.9."""
        bottom = self.height - horizon_bounds(self.height)[0] - 1
        return 9.0 * CAM_K / (bottom + 0.5)


PRESETS = {
    "source": dict(domain="source"),
    "mild": dict(domain="target", palette_rotation=35.0, gamma=1.25, texture_noise=0.06, sensor_noise=0.02),
    "severe": dict(domain="target", palette_rotation=140.0, gamma=1.6, texture_noise=0.10, sensor_noise=0.05),
}


def preset(name: str, **overrides) -> DomainConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return DomainConfig(name=name, **{**PRESETS[name], **overrides})


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [-1, 1]
    label: np.ndarray | None  # (H, W) uint8
    inv_depth: np.ndarray | None  # (1, H, W) in [0, 1]
    domain: str
    scene_id: int
    eval_only: bool = False


@dataclass
class Dataset:
    cfg: DomainConfig
    seed: int
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        return np.stack([s.label for s in self.samples])

    @property
    def inv_depths(self) -> np.ndarray:
        return np.stack([s.inv_depth for s in self.samples])

    @property
    def has_labels(self) -> bool:
        return all(s.label is not None for s in self.samples)

    @property
    def has_depth(self) -> bool:
        return all(s.inv_depth is not None for s in self.samples)


# ---------------------------------------------------------------------------
# rendering


def horizon_bounds(height: int) -> tuple[int, int]:
    return int(round(0.3 * height)), int(round(0.4 * height))


def scene_id_for(seed: int, index: int) -> int:
    state = np.random.SeedSequence([seed, index]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 32) | int(state[1])


def _geometry(cfg: DomainConfig, rng: np.random.Generator):
    h, w = cfg.height, cfg.width
    sx = w / 64.0
    lo, hi = horizon_bounds(h)
    hz = int(rng.integers(lo, hi + 1))
    vx = w // 2 + int(rng.integers(-6, 7) * sx)
    road_slope = float(rng.uniform(0.9, 1.4)) * sx

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    k = np.broadcast_to(rows - hz, (h, w))  # row offset below the horizon
    ground = k >= 1
    ground_dist = CAM_K / (np.maximum(k, 0) + 0.5)

    label = np.full((h, w), SKY, dtype=np.uint8)
    dist = np.full((h, w), np.inf)
    half = road_slope * (k + 0.5)
    road = ground & (np.abs(cols - vx + 0.5) <= half)
    label[ground] = VEGETATION
    label[road] = ROAD
    dist = np.where(ground, ground_dist, dist)

    objects = []  # (base_row, kind, x0, x1, top)
    for _ in range(int(rng.integers(1, 5))):
        side = -1 if rng.random() < 0.5 else 1
        base = hz + int(rng.integers(1, max(2, (h - hz) // 3)))
        edge = vx + side * road_slope * (base - hz + 0.5)
        bw = int(rng.integers(int(6 * sx), int(18 * sx) + 1))
        gap = int(rng.integers(0, int(4 * sx) + 1))
        if side < 0:
            x1 = int(np.floor(edge)) - gap
            x0 = x1 - bw
        else:
            x0 = int(np.ceil(edge)) + gap
            x1 = x0 + bw
        top = base - int(rng.integers(int(0.25 * h), int(0.6 * h) + 1))
        objects.append((base, BUILDING, x0, x1, top))
    for _ in range(int(rng.integers(0, 3))):
        side = -1 if rng.random() < 0.5 else 1
        base = hz + int(rng.integers(2, max(3, (h - hz) // 2)))
        edge = vx + side * road_slope * (base - hz + 0.5)
        tw = int(rng.integers(int(3 * sx), int(8 * sx) + 1))
        x0 = int(edge) + (1 if side > 0 else -tw - 1)
        top = base - int(rng.integers(int(0.15 * h), int(0.35 * h) + 1))
        objects.append((base, VEGETATION, x0, x0 + tw, top))
    for _ in range(int(rng.integers(0, 4))):
        base = hz + int(rng.integers(3, h - hz))
        kb = base - hz + 0.5
        half_road = road_slope * kb
        vw = max(3, int(round(0.9 * kb * sx)))
        cx = vx + float(rng.uniform(-0.7, 0.7)) * half_road
        x0 = int(round(cx - vw / 2))
        vh = max(2, int(round(0.65 * vw)))
        objects.append((base, VEHICLE, x0, x0 + vw, base - vh))

    # painter's order: far (small base row) first; vehicles win ties
    objects.sort(key=lambda o: (o[0], o[1] == VEHICLE))
    for base, kind, x0, x1, top in objects:
        r0, r1 = max(top, 0), min(base + 1, h)
        c0, c1 = max(x0, 0), min(x1, w)
        if r0 >= r1 or c0 >= c1:
            continue
        d = CAM_K / (base - hz + 0.5)
        mask = np.zeros((h, w), dtype=bool)
        mask[r0:r1, c0:c1] = True
        if kind == VEGETATION:  # rounded crown
            rr = (rows - (r0 + r1 - 1) / 2) / max((r1 - r0) / 2, 1)
            cc = (cols - (c0 + c1 - 1) / 2) / max((c1 - c0) / 2, 1)
            mask &= (rr * rr + cc * cc) <= 1.15
        mask &= dist >= d  # only occlude things behind
        label[mask] = kind
        dist = np.where(mask, d, dist)
    return label, dist, hz, vx


def _base_colors(rng: np.random.Generator, label: np.ndarray, hz: int, h: int, w: int) -> np.ndarray:
    img = np.zeros((3, h, w))
    rows = np.arange(h)[:, None] * np.ones((1, w))
    sky_t = np.clip(rows / max(hz, 1), 0, 1)
    sky = np.array([0.45, 0.62, 0.92]) + float(rng.uniform(-0.05, 0.05))
    haze = np.array([0.78, 0.82, 0.88])
    road = np.array([0.36, 0.36, 0.39]) * float(rng.uniform(0.9, 1.1))
    veg = np.array([0.22, 0.52, 0.18]) * float(rng.uniform(0.85, 1.15))
    building_pal = np.array([[0.62, 0.42, 0.30], [0.55, 0.52, 0.50], [0.70, 0.62, 0.45]])
    vehicle_pal = np.array([[0.85, 0.12, 0.10], [0.10, 0.20, 0.80], [0.92, 0.82, 0.10], [0.90, 0.90, 0.92]])

    for c in range(3):
        img[c] = np.where(label == SKY, sky[c] * (1 - sky_t) + haze[c] * sky_t, img[c])
        img[c] = np.where(label == ROAD, road[c], img[c])
        img[c] = np.where(label == VEGETATION, veg[c], img[c])
    bcol = building_pal[int(rng.integers(len(building_pal)))] * float(rng.uniform(0.85, 1.1))
    vcol = vehicle_pal[int(rng.integers(len(vehicle_pal)))]
    for c in range(3):
        img[c] = np.where(label == BUILDING, bcol[c], img[c])
        img[c] = np.where(label == VEHICLE, vcol[c], img[c])
    # window grid on buildings, lane dashes on the road
    cols = np.arange(w)[None, :]
    win = ((rows.astype(int) % 4) == 1) & ((cols % 4) >= 2) & (label == BUILDING)
    img[:, win] *= 0.55
    return img


def render_scene(cfg: DomainConfig, scene_id: int) -> Sample:
    """Render one scene; a pure function of (cfg, scene_id)."""
    h, w = cfg.height, cfg.width
    geo = np.random.default_rng([scene_id, 0])
    app = np.random.default_rng([scene_id, 1])
    shift = np.random.default_rng([scene_id, 2])

    label, dist, hz, vx = _geometry(cfg, geo)
    inv = np.where(np.isinf(dist), 0.0, 1.0 / (1.0 + dist / cfg.d_scale))

    img = _base_colors(app, label, hz, h, w)
    # lane dashes
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    lane = (label == ROAD) & (np.abs(cols - vx + 0.5) < 0.6 + 0.04 * (rows - hz)) & ((rows % 3) != 0)
    img[:, lane] = 0.9
    # distance haze ties appearance to depth
    haze_col = np.array([0.78, 0.82, 0.88])[:, None, None]
    fog = np.where(label == SKY, 0.0, 0.55 * (1.0 - inv))[None]
    img = img * (1 - fog) + haze_col * fog
    img = img * float(app.uniform(0.85, 1.15))
    img = img + cfg.texture_noise * app.standard_normal((1, h, w)) * np.array([1.0, 0.9, 1.1])[:, None, None]
    img = np.clip(img, 0.0, 1.0)

    if cfg.domain == "target":
        img = _appearance_shift(img, cfg, shift)

    q = np.round(np.clip(img, 0.0, 1.0) * 255.0)
    image = q / 255.0 * 2.0 - 1.0
    inv_q = np.round(inv * 65535.0) / 65535.0
    return Sample(image=image, label=label, inv_depth=inv_q[None], domain=cfg.domain, scene_id=scene_id)


def _hue_rotation(degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(t) * kx + (1 - np.cos(t)) * (kx @ kx)


def _appearance_shift(img: np.ndarray, cfg: DomainConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.palette_rotation:
        rot = _hue_rotation(cfg.palette_rotation)
        img = np.einsum("ij,jhw->ihw", rot, img - 0.5) + 0.5
    img = np.clip(img, 0.0, 1.0) ** cfg.gamma
    if cfg.sensor_noise:
        img = img + cfg.sensor_noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def make_dataset(cfg: DomainConfig, n: int, seed: int, eval_only: bool = False, map_fn=map) -> Dataset:
    """``n`` scenes from per-index seed streams.

    Target datasets keep labels only when ``eval_only`` is set and never
    carry inverse depth. ``map_fn`` may be an executor's ordered map; each
    scene depends only on its own index so the result is unchanged.
    """
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    samples = []
    for s in map_fn(partial(render_scene, cfg), [scene_id_for(seed, i) for i in range(n)]):
        if cfg.domain == "target":
            s = replace(s, inv_depth=None, label=s.label if eval_only else None, eval_only=eval_only)
        samples.append(s)
    return Dataset(cfg=cfg, seed=seed, samples=samples)


def augment(s: Sample, rng: np.random.Generator, crop_h: int, crop_w: int,
            force_flip: bool | None = None) -> Sample:
    """Joint random horizontal flip (p=0.5) and fixed-size random crop."""
    _, h, w = s.image.shape
    if crop_h > h or crop_w > w:
        raise ValueError(f"crop {crop_h}x{crop_w} larger than image {h}x{w}")
    if crop_h % 4 or crop_w % 4:
        raise ValueError("crop dims must be divisible by 4")
    flip = (rng.random() < 0.5) if force_flip is None else force_flip
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))

    def tx(a, lead):
        if a is None:
            return None
        if flip:
            a = a[..., ::-1]
        sl = (slice(None),) * lead + (slice(top, top + crop_h), slice(left, left + crop_w))
        return np.ascontiguousarray(a[sl])

    return replace(s, image=tx(s.image, 1), label=tx(s.label, 0), inv_depth=tx(s.inv_depth, 1))


# ---------------------------------------------------------------------------
# Netpbm persistence


def _write_pnm(path: Path, magic: bytes, width: int, height: int, maxval: int, payload: bytes) -> None:
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n%d\n" % (width, height, maxval) + payload)


def _read_pnm(path: Path) -> tuple[bytes, int, int, int, bytes]:
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    pos += 1  # single whitespace before raster
    return tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3]), buf[pos:]


def image_to_u8(image: np.ndarray) -> np.ndarray:
    return np.round((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """(3, H, W) in [-1, 1] -> binary P6."""
    q = image_to_u8(image)
    _, h, w = q.shape
    _write_pnm(path, b"P6", w, h, 255, q.transpose(1, 2, 0).tobytes())


def write_ppm_rgb(path, rgb: np.ndarray) -> None:
    """(H, W, 3) uint8 -> binary P6."""
    h, w, _ = rgb.shape
    _write_pnm(path, b"P6", w, h, 255, np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    magic, w, h, maxval, raster = _read_pnm(path)
    if magic != b"P6" or maxval != 255:
        raise ValueError(f"{path}: expected 8-bit P6")
    q = np.frombuffer(raster, dtype=np.uint8, count=3 * w * h).reshape(h, w, 3).transpose(2, 0, 1)
    return q / 255.0 * 2.0 - 1.0


def write_pgm8(path, label: np.ndarray) -> None:
    h, w = label.shape
    _write_pnm(path, b"P5", w, h, 255, np.ascontiguousarray(label, dtype=np.uint8).tobytes())


def read_pgm8(path) -> np.ndarray:
    magic, w, h, maxval, raster = _read_pnm(path)
    if magic != b"P5" or maxval != 255:
        raise ValueError(f"{path}: expected 8-bit P5")
    return np.frombuffer(raster, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def write_pgm16(path, depth: np.ndarray) -> None:
    d = depth.reshape(depth.shape[-2:])
    q = np.round(np.clip(d, 0.0, 1.0) * 65535.0).astype(">u2")
    _write_pnm(path, b"P5", d.shape[1], d.shape[0], 65535, q.tobytes())


def read_pgm16(path) -> np.ndarray:
    magic, w, h, maxval, raster = _read_pnm(path)
    if magic != b"P5" or maxval != 65535:
        raise ValueError(f"{path}: expected 16-bit P5")
    q = np.frombuffer(raster, dtype=">u2", count=w * h).reshape(1, h, w)
    return q.astype(np.float64) / 65535.0


def save_dataset(ds: Dataset, out_dir) -> str:
    """Write a dataset directory and return its content hash."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if ds.has_labels:
        (out / "labels").mkdir(exist_ok=True)
    if ds.has_depth:
        (out / "depth").mkdir(exist_ok=True)
    for i, s in enumerate(ds.samples):
        write_ppm(out / "images" / f"{i:06d}.ppm", s.image)
        if s.label is not None:
            write_pgm8(out / "labels" / f"{i:06d}.pgm", s.label)
        if s.inv_depth is not None:
            write_pgm16(out / "depth" / f"{i:06d}.pgm", s.inv_depth)
    manifest = {
        "cfg": asdict(ds.cfg),
        "seed": ds.seed,
        "count": len(ds),
        "scene_ids": [str(s.scene_id) for s in ds.samples],
        "eval_only": bool(ds.samples[0].eval_only),
        "has_labels": ds.has_labels,
        "has_depth": ds.has_depth,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return content_hash(out)


def load_dataset(in_dir) -> Dataset:
    d = Path(in_dir)
    man = json.loads((d / "manifest.json").read_text())
    cfg = DomainConfig(**man["cfg"])
    samples = []
    for i, sid in enumerate(man["scene_ids"]):
        label = read_pgm8(d / "labels" / f"{i:06d}.pgm") if man["has_labels"] else None
        depth = read_pgm16(d / "depth" / f"{i:06d}.pgm") if man["has_depth"] else None
        samples.append(Sample(image=read_ppm(d / "images" / f"{i:06d}.ppm"), label=label, inv_depth=depth,
                              domain=cfg.domain, scene_id=int(sid), eval_only=man["eval_only"]))
    return Dataset(cfg=cfg, seed=man["seed"], samples=samples)


def content_hash(path) -> str:
    """sha256 over relative paths and bytes of every file below ``path``."""
    root = Path(path)
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fn in sorted(filenames):
            p = Path(dirpath) / fn
            h.update(p.relative_to(root).as_posix().encode())
            h.update(b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()
