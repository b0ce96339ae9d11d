"""Sample directories, manifests, preprocessing and the synthetic scene generator.

A sample directory holds ``image.png`` (8-bit RGB), ``radar.csv`` and
``lidar.csv`` (header ``x,y,z[,...]``, ego frame, meters), ``calib.json``
(``{"intrinsics": {fx, fy, cx, cy}, "cam_from_ego": [16 row-major floats]}``)
and ``meta.json`` (``{"tag": "day" | "night" | "rain"}``). The ego frame has
z = height above the ground plane.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
from PIL import Image

from .discretization import SidBins, encode_depth
from .evaluation import TAGS, low_height_mask, valid_mask
from .geometry import GeometryError, Intrinsics, PointCloud, Pose, adjust_intrinsics, lidar_depth
from .radar_input import MER_CHANNELS, MerSpec, PillarSpec, build_mer, extend_height, load_mer
from .training import TrainItem

SPLITS = ("train", "val", "test")
SAMPLE_FILES = ("image.png", "radar.csv", "lidar.csv", "calib.json", "meta.json")
MER_FILE = "mer.rvrd"


class DataError(ValueError):
    pass


@dataclass
class Sample:
    rgb: np.ndarray  # H x W x 3 uint8
    radar: PointCloud
    lidar: PointCloud
    intrinsics: Intrinsics
    cam_from_ego: Pose
    tag: str
    key: str = ""
    path: Path = None

    @property
    def height(self):
        return self.rgb.shape[0]

    @property
    def width(self):
        return self.rgb.shape[1]


# ------------------------------------------------------------------ loading

def read_points(path):
    """Parse a point CSV; columns beyond x, y, z are kept as-is."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}:1: empty file, expected header 'x,y,z[,...]'") from None
        header = [h.strip() for h in header]
        if header[:3] != ["x", "y", "z"]:
            raise DataError(f"{path}:1: header must start with x,y,z, got {','.join(header)}")
        ncol = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != ncol:
                raise DataError(f"{path}:{lineno}: expected {ncol} columns, got {len(row)}")
            try:
                vals = [float(x) for x in row]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value in {row}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(-1, ncol)
    return PointCloud(arr, "ego")


def write_points(path, points, header=("x", "y", "z")):
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in pts:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_calib(path):
    try:
        with open(path) as fh:
            calib = json.load(fh)
        k = calib["intrinsics"]
        intr = Intrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]))
        pose = Pose(calib["cam_from_ego"])
    except GeometryError as exc:
        raise DataError(f"{path}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed calibration ({exc!r})") from None
    return intr, pose


def load_sample(directory):
    d = Path(directory)
    for name in SAMPLE_FILES:
        if not (d / name).is_file():
            raise DataError(f"{d}: missing {name}")
    with Image.open(d / "image.png") as im:
        if im.mode != "RGB":
            raise DataError(f"{d / 'image.png'}: expected 8-bit RGB, got mode {im.mode}")
        rgb = np.asarray(im, dtype=np.uint8).copy()
    intr, pose = read_calib(d / "calib.json")
    with open(d / "meta.json") as fh:
        meta = json.load(fh)
    tag = meta.get("tag")
    if tag not in TAGS:
        raise DataError(f"{d / 'meta.json'}: tag must be one of {TAGS}, got {tag!r}")
    return Sample(rgb, read_points(d / "radar.csv"), read_points(d / "lidar.csv"), intr, pose, tag, d.name, d)


# ----------------------------------------------------------------- manifest

@dataclass
class Manifest:
    entries: list  # of (Path, split)
    root: Path = None

    def split(self, name):
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}; valid splits: {', '.join(SPLITS)}")
        return [p for p, s in self.entries if s == name]

    def save(self, path):
        path = Path(path)
        rows = [{"dir": os.path.relpath(p, path.parent), "split": s} for p, s in self.entries]
        path.write_text(json.dumps(rows, indent=1) + "\n")


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        rows = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    entries, seen = [], set()
    for i, row in enumerate(rows):
        p = (path.parent / row["dir"]).resolve()
        split = row.get("split")
        if split not in SPLITS:
            raise DataError(f"{path}: entry {i} has split {split!r}; valid splits: {', '.join(SPLITS)}")
        if p in seen:
            raise DataError(f"{path}: duplicate sample directory {row['dir']}")
        if not p.is_dir():
            raise DataError(f"{path}: sample directory {row['dir']} does not exist")
        seen.add(p)
        entries.append((p, split))
    return Manifest(entries, path.parent)


# ------------------------------------------------------------- preprocess

@dataclass
class PreprocessConfig:
    resize_hw: tuple = None  # (h, w) after resize; None keeps the native size
    crop_top: int = 0
    pad_multiple: int = 0  # pad bottom/right up to a multiple of this; 0 = off
    radar_mode: str = "height"  # height | mer | mer-file | none
    radar_in_channels: int = 1  # channel count used for "none"
    pillar: PillarSpec = field(default_factory=PillarSpec)
    mer: MerSpec = field(default_factory=MerSpec)
    bins: SidBins = field(default_factory=SidBins)
    out_of_range: str = "clamp"
    max_depth: float = None  # evaluation cap; defaults to bins.beta
    low_height: tuple = (0.3, 2.0)
    rgb_mean: tuple = (0.5, 0.5, 0.5)
    rgb_std: tuple = (0.25, 0.25, 0.25)

    def radar_channels(self):
        if self.radar_mode == "height":
            return 1
        if self.radar_mode in ("mer", "mer-file"):
            return MER_CHANNELS
        if self.radar_mode == "none":
            return self.radar_in_channels
        raise DataError(f"unknown radar mode {self.radar_mode!r}")


@dataclass
class Prepared:
    key: str
    tag: str
    rgb: np.ndarray  # 3 x H x W float32, normalized
    radar: np.ndarray  # C x H x W float32
    labels: np.ndarray  # H x W int64
    label_mask: np.ndarray  # H x W bool
    gt_depth: np.ndarray  # H x W float64
    eval_masks: dict  # name -> H x W bool
    intrinsics: Intrinsics

    def train_item(self):
        return TrainItem(self.key, torch.from_numpy(self.rgb), torch.from_numpy(self.radar),
                         torch.from_numpy(self.labels), torch.from_numpy(self.label_mask))


def _pad(arr, h, w):
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, h - arr.shape[-2]), (0, w - arr.shape[-1])]
    return np.pad(arr, pad)


def preprocess(sample, cfg):
    """Resize, crop and normalize one sample and render its radar input and labels.

    The intrinsics are adjusted once and that single camera model is used for
    radar rendering, lidar ground truth and the low-height mask.
    """
    h0, w0 = sample.height, sample.width
    rh, rw = cfg.resize_hw or (h0, w0)
    img = sample.rgb
    if (rh, rw) != (h0, w0):
        img = cv2.resize(img, (rw, rh), interpolation=cv2.INTER_LINEAR)
    if not 0 <= cfg.crop_top < rh:
        raise DataError(f"crop_top {cfg.crop_top} outside image height {rh}")
    img = img[cfg.crop_top:]
    h, w = img.shape[:2]
    k = adjust_intrinsics(sample.intrinsics, rw / w0, rh / h0, cfg.crop_top)

    ph, pw = h, w
    if cfg.pad_multiple:
        m = cfg.pad_multiple
        ph, pw = -(-h // m) * m, -(-w // m) * m
    if ph % 32 or pw % 32:
        raise DataError(f"working size {ph}x{pw} is not divisible by 32; set pad_multiple=32 in the data config")

    rgb = img.astype(np.float32) / 255.0
    rgb = (rgb - np.array(cfg.rgb_mean, np.float32)) / np.array(cfg.rgb_std, np.float32)
    rgb = _pad(np.ascontiguousarray(rgb.transpose(2, 0, 1)), ph, pw)

    pose = sample.cam_from_ego
    if cfg.radar_mode == "height":
        radar = extend_height(sample.radar, cfg.pillar, pose, k, w, h)
    elif cfg.radar_mode == "mer":
        radar = build_mer(sample.radar, pose, k, w, h, cfg.mer)
    elif cfg.radar_mode == "mer-file":
        if sample.path is None:
            raise DataError("mer-file mode needs a sample loaded from disk")
        radar = load_mer(sample.path / MER_FILE, expected_hw=(h, w))
    elif cfg.radar_mode == "none":
        radar = np.zeros((cfg.radar_in_channels, h, w))
    else:
        raise DataError(f"unknown radar mode {cfg.radar_mode!r}")

    gt, _ = lidar_depth(sample.lidar, pose, k, w, h)
    max_depth = cfg.max_depth or cfg.bins.beta
    low = low_height_mask(sample.lidar, pose, k, w, h, cfg.low_height, max_depth)
    enc = encode_depth(gt, cfg.bins, cfg.out_of_range)
    return Prepared(
        key=sample.key,
        tag=sample.tag,
        rgb=rgb.astype(np.float32),
        radar=_pad(radar, ph, pw).astype(np.float32),
        labels=_pad(enc.labels, ph, pw),
        label_mask=_pad(enc.mask, ph, pw),
        gt_depth=_pad(gt, ph, pw),
        eval_masks={"valid": _pad(valid_mask(gt, max_depth), ph, pw), "low_height": _pad(low, ph, pw)},
        intrinsics=k,
    )


# -------------------------------------------------------------- synthetic

@dataclass
class SynthConfig:
    width: int = 128
    height: int = 64
    fx: float = 128.0
    fy: float = 128.0
    cx: float = 64.0
    cy: float = 16.0
    cam_height: float = 1.5
    depth_range: tuple = (2.0, 40.0)
    objects: tuple = (2, 4)  # inclusive count range
    box_width: tuple = (1.0, 3.0)
    box_height: tuple = (1.0, 3.0)
    box_length: tuple = (2.0, 5.0)
    radar_noise: float = 0.0  # depth noise sigma, m
    radar_dropout: float = 0.0
    lidar_block: int = 2  # one lidar return per block x block pixels
    lidar_range: float = 80.0
    stripes: int = 4  # texture periods per box face, independent of box size
    split_fractions: tuple = (1.0, 0.0, 0.0)
    seed: int = 0

    def validate(self):
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise DataError(f"depth range must satisfy 0 < lo < hi, got {self.depth_range}")
        if not 0 <= self.radar_dropout <= 1:
            raise DataError(f"radar_dropout must be in [0, 1], got {self.radar_dropout}")
        if self.radar_noise < 0:
            raise DataError(f"radar_noise must be >= 0, got {self.radar_noise}")
        if self.objects[0] < 0 or self.objects[1] < self.objects[0]:
            raise DataError(f"bad object count range {self.objects}")
        if self.lidar_range <= 0:
            raise DataError("lidar_range must be positive")
        if self.lidar_block < 1:
            raise DataError("lidar_block must be >= 1")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise DataError(f"split_fractions must be three values summing to 1, got {self.split_fractions}")
        return self

    def intrinsics(self):
        return Intrinsics(self.fx, self.fy, self.cx, self.cy)

    def cam_from_ego(self):
        # camera x = -ego y, camera y = -(ego z - h), camera z = ego x
        rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        return Pose.from_rt(rot, [0.0, self.cam_height, 0.0])


@dataclass
class Box:
    x0: float  # front face distance along ego x
    x1: float
    y0: float
    y1: float
    z1: float  # top; boxes stand on the ground
    color: tuple


@dataclass
class Render:
    depth: np.ndarray  # H x W camera depth, 0 where the ray hits nothing
    surface: np.ndarray  # H x W: -1 sky, 0 ground, 1 + 3 * box + face (face 0 front, 1 side, 2 top)
    points: np.ndarray  # H x W x 3 ego-frame hit points (nan where sky)
    u: np.ndarray  # H x W face-relative texture coordinate in [0, 1]


def render_scene(cfg, boxes):
    """Ray-cast the ground plane and boxes through every pixel centre."""
    k, pose = cfg.intrinsics(), cfg.cam_from_ego()
    h, w = cfg.height, cfg.width
    cols, rows = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    # camera-frame rays with unit z, so the ray parameter equals camera depth
    ray_cam = np.stack([(cols - k.cx) / k.fx, (rows - k.cy) / k.fy, np.ones_like(cols)], -1)
    inv = pose.inverse()
    dirs = ray_cam @ inv.rotation.T
    origin = inv.translation

    depth = np.full((h, w), np.inf)
    surface = np.full((h, w), -1, dtype=np.int64)
    tex = np.zeros((h, w))

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[..., 2] < 0, -origin[2] / dirs[..., 2], np.inf)
    ground = np.isfinite(t_ground)
    depth[ground] = t_ground[ground]
    surface[ground] = 0

    for b, box in enumerate(boxes):
        lo = np.array([box.x0, box.y0, 0.0])
        hi = np.array([box.x1, box.y1, box.z1])
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - origin) / dirs
            tb = (hi - origin) / dirs
        tmin = np.minimum(ta, tb)
        tmax = np.maximum(ta, tb)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        t_near = tmin.max(-1)
        axis = tmin.argmax(-1)
        t_far = tmax.min(-1)
        hit = (t_near <= t_far) & (t_near > 0) & (t_near < depth)
        face = np.select([axis == 0, axis == 1], [0, 1], 2)
        p = origin + t_near[..., None] * dirs
        u_front = (p[..., 1] - box.y0) / (box.y1 - box.y0)
        u_side = (p[..., 0] - box.x0) / (box.x1 - box.x0)
        depth[hit] = t_near[hit]
        surface[hit] = 1 + 3 * b + face[hit]
        tex[hit] = np.where(face == 0, u_front, u_side)[hit]

    points = origin + np.where(np.isfinite(depth), depth, np.nan)[..., None] * dirs
    depth[~np.isfinite(depth)] = 0.0
    return Render(depth, surface, points, tex)


def _sample_boxes(cfg, rng):
    lo, hi = cfg.depth_range
    margin = 0.1 * (hi - lo)
    boxes = []
    for _ in range(int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))):
        x0 = math.exp(rng.uniform(math.log(lo + margin), math.log(hi - margin)))
        half_fov = x0 * (cfg.cx / cfg.fx) * 0.8
        yc = rng.uniform(-half_fov, half_fov)
        width = rng.uniform(*cfg.box_width)
        length = min(rng.uniform(*cfg.box_length), hi - x0)
        boxes.append(Box(x0, x0 + length, yc - width / 2, yc + width / 2, rng.uniform(*cfg.box_height),
                         tuple(rng.uniform(0.2, 0.9, 3))))
    return boxes


def _shade(cfg, render, boxes, tag, rng):
    h, w = cfg.height, cfg.width
    img = np.zeros((h, w, 3))
    rows = (np.arange(h)[:, None] + 0.5) / h
    sky = render.surface < 0
    img[sky] = (np.array([0.45, 0.6, 0.85]) * (1.0 - 0.3 * rows))[np.nonzero(sky)[0]]
    ground = render.surface == 0
    gx, gy = render.points[..., 0], render.points[..., 1]
    with np.errstate(invalid="ignore"):
        checker = (np.floor(gx / 2.0) + np.floor(gy / 2.0)) % 2
    img[ground] = (0.35 + 0.08 * checker[ground])[:, None] * np.ones(3)
    for b, box in enumerate(boxes):
        for face, light in ((0, 1.0), (1, 0.7), (2, 1.2)):
            m = render.surface == 1 + 3 * b + face
            if not m.any():
                continue
            stripe = (np.floor(render.u[m] * cfg.stripes * 2) % 2)[:, None]
            img[m] = np.clip(np.array(box.color) * light * (0.75 + 0.25 * stripe), 0, 1)
    if tag == "night":
        img = img * 0.3 + rng.normal(0, 0.02, img.shape)
    elif tag == "rain":
        img = 0.5 + (img - 0.5) * 0.6 + rng.normal(0, 0.03, img.shape)
        streaks = rng.random((1, w)) < 0.05
        img = img + 0.1 * streaks[..., None]
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def _lidar_from_render(cfg, render, rng):
    b = cfg.lidar_block
    h, w = render.depth.shape
    pts = []
    for r0 in range(0, h, b):
        for c0 in range(0, w, b):
            r = r0 + int(rng.integers(0, min(b, h - r0)))
            c = c0 + int(rng.integers(0, min(b, w - c0)))
            if render.surface[r, c] >= 0 and render.depth[r, c] <= cfg.lidar_range:
                pts.append(render.points[r, c])
    return np.array(pts).reshape(-1, 3)


def _radar_from_boxes(cfg, boxes, rng):
    pts = []
    for box in boxes:
        y = rng.uniform(box.y0 + 0.1 * (box.y1 - box.y0), box.y1 - 0.1 * (box.y1 - box.y0))
        z = rng.uniform(0.5, min(1.0, box.z1))
        x = box.x0 + (rng.normal(0.0, cfg.radar_noise) if cfg.radar_noise > 0 else 0.0)
        keep = rng.random() >= cfg.radar_dropout
        rcs = rng.uniform(0.0, 20.0)
        if keep:
            pts.append([x, y, z, 0.0, 0.0, rcs])
    return np.array(pts).reshape(-1, 6)


def synth_scene(cfg, index):
    """Boxes, render, lidar and radar for scene ``index``; fully determined by (seed, index)."""
    rng = np.random.default_rng([int(cfg.seed), int(index)])
    tag = TAGS[index % len(TAGS)]
    boxes = _sample_boxes(cfg, rng)
    render = render_scene(cfg, boxes)
    rgb = _shade(cfg, render, boxes, tag, rng)
    lidar = _lidar_from_render(cfg, render, rng)
    radar = _radar_from_boxes(cfg, boxes, rng)
    return {"boxes": boxes, "render": render, "rgb": rgb, "lidar": lidar, "radar": radar, "tag": tag}


def _assign_splits(n, fractions):
    counts = [int(math.floor(f * n)) for f in fractions]
    counts[0] += n - sum(counts)
    return [s for s, c in zip(SPLITS, counts) for _ in range(c)]


def synth_generate(cfg, out_dir, num):
    """Write ``num`` synthetic samples plus ``manifest.json`` under ``out_dir``."""
    cfg.validate()
    if num < 1:
        raise DataError("empty dataset: --num must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"{out}: not writable ({exc.strerror})") from None
    k, pose = cfg.intrinsics(), cfg.cam_from_ego()
    calib = {"intrinsics": k.to_dict(), "cam_from_ego": pose.matrix.reshape(-1).tolist()}
    entries = []
    for i, split in enumerate(_assign_splits(num, cfg.split_fractions)):
        scene = synth_scene(cfg, i)
        d = out / f"sample_{i:05d}"
        d.mkdir(exist_ok=True)
        Image.fromarray(scene["rgb"], "RGB").save(d / "image.png", optimize=False)
        write_points(d / "lidar.csv", scene["lidar"])
        write_points(d / "radar.csv", scene["radar"], ("x", "y", "z", "vx", "vy", "rcs"))
        (d / "calib.json").write_text(json.dumps(calib, indent=1) + "\n")
        (d / "meta.json").write_text(json.dumps({"tag": scene["tag"]}) + "\n")
        entries.append((d.resolve(), split))
    manifest = Manifest(entries, out)
    manifest.save(out / "manifest.json")
    return manifest
