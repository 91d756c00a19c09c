"""Multi-camera vehicle corpora: VeRi-style loading, a procedural toy corpus, pairing.

File names follow the VeRi-776 convention ``<id>_c<cam>_<frame>_<n>.<ext>``
inside ``image_train/``, ``image_query/`` and ``image_test/`` (gallery).
"""

from __future__ import annotations

import colorsys
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .errors import ConfigError, ParseError

SPLIT_DIRS = {"train": "image_train", "query": "image_query", "gallery": "image_test"}
NAME_RE = re.compile(r"^(\d+)_c(\d+)_([^_]+)_(\d+)\.(jpg|jpeg|png)$", re.IGNORECASE)
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}
PROFILE_SIZES = {"toy": (32, 32), "full": (256, 128)}


@dataclass
class ImageSet:
    """Images of one split with identity labels and camera ids.

    Either ``images`` (K, C, H, W float32 in [0, 1]) is held in memory or
    images are read lazily from ``paths``.
    """

    labels: np.ndarray
    cams: np.ndarray
    images: np.ndarray | None = None
    paths: list | None = None
    size: tuple[int, int] = (32, 32)

    def __len__(self):
        return len(self.labels)

    def load(self, i: int) -> np.ndarray:
        if self.images is not None:
            return self.images[i]
        return read_image(self.paths[i], self.size)

    def array(self, indices=None) -> np.ndarray:
        idx = range(len(self)) if indices is None else indices
        if self.images is not None:
            return self.images[np.asarray(list(idx), dtype=int)]
        return np.stack([self.load(i) for i in idx])

    @property
    def identities(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass
class DatasetSplit:
    train: ImageSet
    query: ImageSet
    gallery: ImageSet
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3, np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(3, np.float32))

    def label_map(self) -> dict:
        """Raw training identity -> contiguous class index."""
        return {int(v): i for i, v in enumerate(self.train.identities)}

    @property
    def n_train_identities(self) -> int:
        return len(self.train.identities)

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return (images - self.mean[:, None, None]) / self.std[:, None, None]

    def manifest(self) -> dict:
        out = {}
        for name in ("train", "query", "gallery"):
            s = getattr(self, name)
            out[name] = {"images": len(s), "identities": int(len(s.identities)),
                         "cameras": sorted(int(c) for c in np.unique(s.cams))}
        out["normalization"] = {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}
        return out


def read_image(path, size) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size[1], size[0]):
            im = _resize_center_crop(im, size)
        return np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0


def _resize_center_crop(im: Image.Image, size) -> Image.Image:
    h, w = size
    scale = max(h / im.height, w / im.width)
    im = im.resize((max(w, round(im.width * scale)), max(h, round(im.height * scale))), Image.BILINEAR)
    left, top = (im.width - w) // 2, (im.height - h) // 2
    return im.crop((left, top, left + w, top + h))


def parse_name(path: Path) -> tuple[int, int]:
    m = NAME_RE.match(path.name)
    if not m:
        raise ParseError("file name does not match <id>_c<cam>_<frame>_<n>", path)
    return int(m.group(1)), int(m.group(2))


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def load_retrieval_dataset(root, profile: str = "full", validate: bool = True,
                           stats_sample: int = 2000) -> DatasetSplit:
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} does not exist", "dataset.root")
    if profile not in PROFILE_SIZES:
        raise ConfigError(f"unknown profile {profile!r}", "profile")
    size = PROFILE_SIZES[profile]
    sets = {}
    for name, sub in SPLIT_DIRS.items():
        d = root / sub
        paths = sorted(p for p in d.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) if d.is_dir() else []
        if not paths:
            raise ConfigError(f"split {name!r} has no images under {d}", f"dataset.{name}")
        parsed = [parse_name(p) for p in paths]
        if validate:
            for p in paths:
                try:
                    with Image.open(p) as im:
                        im.verify()
                except Exception as exc:
                    raise ParseError(f"image cannot be decoded ({exc})", p) from exc
        labels = np.array([a for a, _ in parsed])
        cams = np.array([c for _, c in parsed])
        sets[name] = ImageSet(labels, cams, paths=paths, size=size)
    if profile == "toy":
        for s in sets.values():
            s.images = s.array()
    train = sets["train"]
    step = max(1, len(train) // stats_sample)
    mean, std = channel_stats(train.array(range(0, len(train), step)))
    return DatasetSplit(sets["train"], sets["query"], sets["gallery"], mean, std)


# --- toy corpus --------------------------------------------------------------

@dataclass
class ToyConfig:
    n_train_ids: int = 20
    n_test_ids: int = 20
    n_cams: int = 2
    train_per_cam: int = 30
    query_per_cam: int = 5
    gallery_per_cam: int = 5
    size: int = 32
    noise_std: float = 0.03


SHAPES = {
    # body height, cabin width fraction, cabin height, cabin offset fraction
    "sedan": (7, 0.55, 5, 0.5),
    "van": (9, 0.85, 6, 0.5),
    "truck": (8, 0.38, 7, 0.22),
}


def _rgb(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float32)


def _identity_signatures(n: int, rng: np.random.Generator) -> list[dict]:
    sigs = []
    names = list(SHAPES)
    for _ in range(n):
        body = _rgb(rng.uniform(), rng.uniform(0.55, 1.0), rng.uniform(0.55, 1.0))
        # view-specific details are tinted from the body colour: an unrelated
        # random colour per view would make cross-view matching of unseen
        # identities depend on attributes no other view reveals
        accent = _rgb(rng.uniform(), 1.0, rng.uniform(0.7, 1.0))
        sigs.append({
            "body": body,
            "shape": names[rng.integers(len(names))],
            "length": int(rng.integers(18, 25)),
            "stripe": 0.65 * body + 0.35 * accent,
            "trunk": body * rng.uniform(0.55, 0.85),
            "wheel": int(rng.integers(2, 4)),
        })
    return sigs


def render_vehicle(sig: dict, view: int, rng: np.random.Generator, size: int = 32,
                   noise_std: float = 0.03) -> np.ndarray:
    """Render one (3, size, size) view: view 0 is a front analog, view 1 a back analog.

    Body colour and silhouette are shared by both views; the hood stripe is
    visible only from the front and the trunk panel only from the back.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    scale = rng.uniform(0.9, 1.1)
    dx, dy = rng.uniform(-2, 2, size=2)
    c = (size - 1) / 2
    u = (xx - c - dx) / scale + c
    v = (yy - c - dy) / scale + c

    # background: low-saturation gradient plus clutter blocks
    bg0 = _rgb(rng.uniform(), rng.uniform(0, 0.3), rng.uniform(0.3, 0.8))
    bg1 = _rgb(rng.uniform(), rng.uniform(0, 0.3), rng.uniform(0.3, 0.8))
    t = (yy / (size - 1))[None]
    img = bg0[:, None, None] * (1 - t) + bg1[:, None, None] * t
    for _ in range(3):
        x0, y0 = rng.integers(0, size - 4, size=2)
        w, h = rng.integers(2, 8, size=2)
        col = _rgb(rng.uniform(), rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9))
        img[:, y0:y0 + h, x0:x0 + w] = col[:, None, None]

    body_h, cab_frac, cab_h, cab_off = SHAPES[sig["shape"]]
    length = sig["length"]
    left = c - length / 2
    right = c + length / 2
    bottom = c + 7
    top = bottom - body_h
    if view == 1:
        cab_off = 1 - cab_off
    cab_w = length * cab_frac
    cab_center = left + length * cab_off
    cab_l, cab_r = cab_center - cab_w / 2, cab_center + cab_w / 2

    def paint(mask, colour):
        img[:, mask] = colour[:, None]

    body = (u >= left) & (u <= right) & (v >= top) & (v <= bottom)
    cabin = (u >= cab_l) & (u <= cab_r) & (v >= top - cab_h) & (v < top)
    paint(body | cabin, sig["body"])
    window = (u >= cab_l + 1.5) & (u <= cab_r - 1.5) & (v >= top - cab_h + 1.5) & (v < top - 0.5)
    paint(window, np.array([0.15, 0.2, 0.3], np.float32) if view == 0 else np.array([0.05, 0.05, 0.08], np.float32))
    if view == 0:
        stripe = body & (v >= top + 2) & (v <= top + 3.5)
        paint(stripe, sig["stripe"])
        lamp_col = np.array([1.0, 0.95, 0.7], np.float32)
    else:
        trunk = body & (v >= top + 1) & (v <= top + body_h / 2 + 0.5) & (np.abs(u - c) <= length / 3)
        paint(trunk, sig["trunk"])
        lamp_col = np.array([0.9, 0.05, 0.05], np.float32)
    ends = ((u >= left) & (u <= left + 2)) | ((u >= right - 2) & (u <= right))
    lamps = (v >= bottom - 3) & (v <= bottom - 1.5) & ends
    paint(lamps, lamp_col)
    r = sig["wheel"]
    for wx in (left + length * 0.22, right - length * 0.22):
        wheel = (u - wx) ** 2 + (v - bottom) ** 2 <= r * r
        paint(wheel, np.array([0.08, 0.08, 0.08], np.float32))

    img = img * rng.uniform(0.9, 1.1) + rng.normal(0, noise_std, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def generate_toy_dataset(config: ToyConfig | None = None, rng=0) -> DatasetSplit:
    """Procedural corpus; test identities are disjoint from training identities."""
    cfg = config or ToyConfig()
    if cfg.n_train_ids < 2 or cfg.n_cams < 2:
        raise ConfigError("toy corpus needs >= 2 identities and >= 2 cameras")
    rng = np.random.default_rng(rng)
    sigs = _identity_signatures(cfg.n_train_ids + cfg.n_test_ids, rng)

    def build(ids, per_cam):
        imgs, labels, cams = [], [], []
        for pid in ids:
            for cam in range(cfg.n_cams):
                for _ in range(per_cam):
                    imgs.append(render_vehicle(sigs[pid], cam % 2, rng, cfg.size, cfg.noise_std))
                    labels.append(pid + 1)
                    cams.append(cam + 1)
        return ImageSet(np.array(labels), np.array(cams), np.stack(imgs), size=(cfg.size, cfg.size))

    train_ids = range(cfg.n_train_ids)
    test_ids = range(cfg.n_train_ids, cfg.n_train_ids + cfg.n_test_ids)
    train = build(train_ids, cfg.train_per_cam)
    query = build(test_ids, cfg.query_per_cam)
    gallery = build(test_ids, cfg.gallery_per_cam)
    mean, std = channel_stats(train.images)
    return DatasetSplit(train, query, gallery, mean, std)


def write_dataset(split: DatasetSplit, out_dir) -> Path:
    """Write an in-memory split as PNG files in VeRi layout plus ``manifest.yaml``."""
    out = Path(out_dir)
    for name, sub in SPLIT_DIRS.items():
        s = getattr(split, name)
        d = out / sub
        d.mkdir(parents=True, exist_ok=True)
        for i in range(len(s)):
            arr = (np.clip(s.images[i], 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(arr).save(d / f"{int(s.labels[i]):04d}_c{int(s.cams[i]):03d}_{i:06d}_0.png")
    (out / "manifest.yaml").write_text(yaml.safe_dump(split.manifest(), sort_keys=True))
    return out


# --- multi-view pairing --------------------------------------------------------

@dataclass
class MultiViewSample:
    indices: tuple[int, ...]
    identities: tuple[int, ...]
    camera_ids: tuple[int, ...]
    correlated: bool

    def __post_init__(self):
        if len(set(self.camera_ids)) != len(self.camera_ids):
            raise ValueError("camera ids must be distinct within a sample")
        if self.correlated and len(set(self.identities)) != 1:
            raise ValueError("correlated sample with mixed identities")
        if not self.correlated and len(set(self.identities)) == 1:
            raise ValueError("uncorrelated sample with a single identity")

    @property
    def identity(self):
        return self.identities[0] if self.correlated else None


@dataclass
class PairingReport:
    samples: list
    skipped: int = 0

    def labels(self) -> np.ndarray:
        return np.array([int(s.correlated) for s in self.samples])


def build_pairs(images: ImageSet, n_samples: int, correlated_fraction: float, rng=0,
                n_users: int = 2, max_tries: int = 100) -> PairingReport:
    """Draw multi-view samples; user order follows ascending camera id."""
    if not 0.0 <= correlated_fraction <= 1.0:
        raise ValueError("correlated_fraction must lie in [0, 1]")
    rng = np.random.default_rng(rng)
    by_id_cam: dict = {}
    for i, (pid, cam) in enumerate(zip(images.labels, images.cams)):
        by_id_cam.setdefault(int(pid), {}).setdefault(int(cam), []).append(i)
    ids = sorted(by_id_cam)
    if len(ids) < n_users:
        raise ConfigError(f"need at least {n_users} identities to build uncorrelated samples")
    samples, skipped = [], 0
    flags = rng.random(n_samples) < correlated_fraction
    for corr in flags:
        if corr:
            pid = ids[rng.integers(len(ids))]
            cams = sorted(by_id_cam[pid])
            if len(cams) < n_users:
                skipped += 1
                continue
            chosen = sorted(rng.choice(cams, n_users, replace=False).tolist())
            idx = tuple(int(rng.choice(by_id_cam[pid][c])) for c in chosen)
            samples.append(MultiViewSample(idx, (pid,) * n_users, tuple(chosen), True))
            continue
        for _ in range(max_tries):
            pids = rng.choice(ids, n_users, replace=False).tolist()
            cams = [int(rng.choice(sorted(by_id_cam[p]))) for p in pids]
            if len(set(cams)) == n_users:
                break
        else:
            skipped += 1
            continue
        order = np.argsort(cams)
        pids = [pids[o] for o in order]
        cams = [cams[o] for o in order]
        idx = tuple(int(rng.choice(by_id_cam[p][c])) for p, c in zip(pids, cams))
        samples.append(MultiViewSample(idx, tuple(int(p) for p in pids), tuple(cams), False))
    return PairingReport(samples, skipped)


def toy_config_dict(cfg: ToyConfig) -> dict:
    return asdict(cfg)
