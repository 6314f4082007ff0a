"""Multi-view object datasets: synthesis, compositing, perturbations and storage.

Silhouettes live only in :class:`ObjectRecord` (synthesis and evaluation).
Training code consumes :class:`TrainingSet`, which is built from composited
images and camera poses alone.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import geometry
from .geometry import Mesh
from .renderer import CameraBatch, ViewSpec, render_batch

NUM_VIEWS = 24
ELEVATION = 30.0
SHAPES = ("cube", "sphere", "pyramid", "torus")
BACKGROUND_MODES = ("uniform", "checker", "noise", "stripes", "procedural", "directory")
SYNTH_SMOOTHING = 1e-6
SYNTH_GAMMA = 1e-5


def view_azimuths(num_views: int = NUM_VIEWS) -> np.ndarray:
    return np.arange(num_views) * (360.0 / num_views)


# -- image operations -----------------------------------------------------------------------


def composite(object_img, sil, background):
    """``sil * object + (1 - sil) * background`` for ``(H, W, 3)`` images and ``(H, W)`` sil."""
    object_img, sil, background = (np.asarray(a, dtype=np.float64) for a in (object_img, sil, background))
    if object_img.shape != background.shape or object_img.shape[:2] != sil.shape:
        raise ValueError("image, silhouette and background must share spatial size")
    s = sil[..., None]
    return s * object_img + (1.0 - s) * background


def perturb_brightness(img, sil, sigma: float, rng: np.random.Generator):
    """``img * (1 + sil * n1) + |(1 - sil) * n2|`` with n1, n2 ~ N(0, sigma^2) drawn once per image.

    The result is deliberately not clipped to [0, 1].
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    img = np.asarray(img, dtype=np.float64)
    s = np.asarray(sil, dtype=np.float64)[..., None]
    n1, n2 = rng.normal(0.0, sigma, size=2)
    return img * (1.0 + s * n1) + np.abs((1.0 - s) * n2)


def perturb_azimuth(view: ViewSpec, sigma: float, rng: np.random.Generator) -> ViewSpec:
    """Add N(0, sigma^2) degrees to the azimuth, wrapped into [0, 360)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    az = float(np.mod(view.azimuth + rng.normal(0.0, sigma), 360.0))
    if az >= 360.0:  # np.mod can round up to the modulus for tiny negatives
        az = 0.0
    return view.with_azimuth(az)


def pad_alpha(img: np.ndarray) -> np.ndarray:
    """Append a constant-one alpha channel to an ``(..., H, W, 3)`` image."""
    return np.concatenate([img, np.ones(img.shape[:-1] + (1,), dtype=img.dtype)], axis=-1)


# -- backgrounds ----------------------------------------------------------------------------


def _smooth_noise(rng, shape, scale):
    coarse = rng.random((max(2, shape[0] // scale + 2), max(2, shape[1] // scale + 2), 3))
    ys = np.linspace(0, coarse.shape[0] - 1.001, shape[0])
    xs = np.linspace(0, coarse.shape[1] - 1.001, shape[1])
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    c = coarse
    return ((1 - fy) * (1 - fx) * c[y0][:, x0] + fy * (1 - fx) * c[y0 + 1][:, x0]
            + (1 - fy) * fx * c[y0][:, x0 + 1] + fy * fx * c[y0 + 1][:, x0 + 1])


def procedural_panorama(kind: str, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """A ``(height, width, 3)`` texture wrapping horizontally, in [0, 1]."""
    if kind == "procedural":
        kind = ("checker", "noise", "stripes")[rng.integers(3)]
    c0, c1 = rng.random(3), rng.random(3)
    if kind == "uniform":
        return np.broadcast_to(c0, (height, width, 3)).copy()
    yy, xx = np.mgrid[0:height, 0:width]
    if kind == "checker":
        cells = int(rng.integers(2, 9))
        cell = max(1, width // (cells * 4))
        mask = ((yy // cell + xx // cell) % 2).astype(bool)
        return np.where(mask[..., None], c0, c1)
    if kind == "stripes":
        period = width / int(rng.integers(4, 16))
        tilt = rng.uniform(-1, 1)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + tilt * yy) / period)
        return t[..., None] * c0 + (1 - t[..., None]) * c1
    if kind == "noise":
        base = _smooth_noise(rng, (height, width), scale=int(rng.integers(3, 10)))
        return 0.5 * base + 0.5 * (c0 * base.mean(-1, keepdims=True))
    raise ValueError(f"unknown background kind {kind!r}; expected one of {BACKGROUND_MODES}")


def panorama_views(pano: np.ndarray, image_size: int, num_views: int = NUM_VIEWS) -> np.ndarray:
    """Crop ``num_views`` horizontally shifted windows so adjacent azimuths overlap."""
    h, w, _ = pano.shape
    out = np.empty((num_views, image_size, image_size, 3))
    rows = np.linspace(0, h - 1, image_size).round().astype(int)
    window = 4.0 * w / num_views
    for k in range(num_views):
        cols = (k * w / num_views + np.arange(image_size) * window / image_size).astype(int) % w
        out[k] = pano[rows][:, cols]
    return out


def load_background_library(directory, image_size: int, num_views: int = NUM_VIEWS):
    """Background view sets from a directory.

    Each subdirectory holding ``bg_00.png`` ... is one view-consistent scene;
    any other image file is treated as a wrapping panorama.
    """
    from PIL import Image

    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"background directory {directory} does not exist")
    scenes = []
    for entry in sorted(directory.iterdir()):
        if entry.is_dir():
            files = [entry / f"bg_{k:02d}.png" for k in range(num_views)]
            if all(f.exists() for f in files):
                views = [np.asarray(Image.open(f).convert("RGB").resize((image_size, image_size)),
                                    dtype=np.float64) / 255.0 for f in files]
                scenes.append(np.stack(views))
        elif entry.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"):
            img = Image.open(entry).convert("RGB").resize((image_size * num_views // 4, image_size))
            scenes.append(panorama_views(np.asarray(img, dtype=np.float64) / 255.0, image_size, num_views))
    if not scenes:
        raise ValueError(f"no background images found in {directory}")
    return scenes


# -- records --------------------------------------------------------------------------------


@dataclass
class ObjectRecord:
    """All 24 views of one object scene. ``silhouettes`` never reach training."""

    object_id: str
    class_id: str
    images: np.ndarray          # (24, H, W, 3) composited RGB
    silhouettes: np.ndarray     # (24, H, W) in [0, 1]
    views: list
    mesh: Mesh | None = None

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError(f"object {self.object_id} has fewer than two views")
        if len(self.images) != len(self.views) or len(self.silhouettes) != len(self.views):
            raise ValueError(f"object {self.object_id}: image / view count mismatch")


@dataclass(frozen=True)
class PerturbSpec:
    azimuth_sigma: float = 0.0
    brightness_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.azimuth_sigma < 0 or self.brightness_sigma < 0:
            raise ValueError("perturbation sigmas must be non-negative")


@dataclass(frozen=True)
class ToySpec:
    num_objects: int = 30
    shapes: tuple = ("cube", "sphere", "pyramid")
    image_size: int = 32
    background: str = "procedural"
    background_dir: str | None = None
    per_view_backgrounds: bool = False
    object_color: str = "random"
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.background not in BACKGROUND_MODES:
            raise ValueError(f"unknown background mode {self.background!r}; "
                             f"expected one of {BACKGROUND_MODES}")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")
        if self.background == "directory" and not self.background_dir:
            raise ValueError("background mode 'directory' needs background_dir")
        if self.object_color not in ("grey", "random"):
            raise ValueError("object_color must be 'grey' or 'random'")


def random_shape(kind: str, rng: np.random.Generator) -> Mesh:
    if kind == "cube":
        return geometry.make_cube(rng.uniform(0.4, 0.85, size=3))
    if kind == "sphere":
        return geometry.make_sphere(rng.uniform(0.45, 0.85), subdivisions=2)
    if kind == "pyramid":
        return geometry.make_pyramid(rng.uniform(0.45, 0.85), rng.uniform(0.9, 1.7))
    if kind == "torus":
        return geometry.make_torus(rng.uniform(0.5, 0.7), rng.uniform(0.15, 0.25))
    raise ValueError(f"unknown shape {kind!r}")


def render_object_views(mesh: Mesh, image_size: int, azimuths=None):
    """Near-hard renderings ``(N, H, W, 3)`` shading and ``(N, H, W)`` alpha of ``mesh``."""
    az = view_azimuths() if azimuths is None else np.asarray(azimuths, dtype=np.float64)
    cams = CameraBatch(torch.as_tensor(az), torch.full((len(az),), ELEVATION, dtype=torch.float64),
                       torch.full((len(az),), 2.732, dtype=torch.float64), image_size)
    verts = torch.as_tensor(mesh.vertices)[None].expand(len(az), -1, -1)
    with torch.no_grad():
        img = render_batch(verts, mesh.faces, cams, smoothing=SYNTH_SMOOTHING, depth_gamma=SYNTH_GAMMA)
    img = img.permute(0, 2, 3, 1).numpy()
    return img[..., :3], img[..., 3]


def make_toy_dataset(spec: ToySpec = ToySpec()) -> list[ObjectRecord]:
    """Primitive shapes rendered from 24 azimuths and composited onto backgrounds."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    library = None
    if spec.background == "directory":
        library = load_background_library(spec.background_dir, size)
    views = [ViewSpec(float(a), ELEVATION, 2.732, size) for a in view_azimuths()]
    records = []
    for i in range(spec.num_objects):
        kind = spec.shapes[i % len(spec.shapes)]
        mesh = random_shape(kind, rng)
        shading, alpha = render_object_views(mesh, size)
        if spec.object_color == "random":
            albedo = rng.uniform(0.2, 1.0, size=3)
            shading = shading / 0.7 * albedo
        if library is not None:
            bgs = library[rng.integers(len(library))]
            if spec.per_view_backgrounds:
                bgs = np.stack([library[rng.integers(len(library))][k] for k in range(NUM_VIEWS)])
        elif spec.per_view_backgrounds:
            bgs = np.stack([panorama_views(procedural_panorama(spec.background, size, size * 6, rng), size)[k]
                            for k in range(NUM_VIEWS)])
        else:
            bgs = panorama_views(procedural_panorama(spec.background, size, size * 6, rng), size)
        images = np.stack([composite(shading[k], alpha[k], bgs[k]) for k in range(NUM_VIEWS)])
        records.append(ObjectRecord(f"{kind}_{i:04d}", kind, images, alpha, list(views), mesh))
    return records


def split_records(records, test_fraction: float, seed: int):
    """Deterministic per-class train/test split; returns (train_ids, test_ids)."""
    rng = np.random.default_rng(seed + 7919)
    by_class: dict[str, list[str]] = {}
    for r in records:
        by_class.setdefault(r.class_id, []).append(r.object_id)
    train, test = [], []
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        order = rng.permutation(len(ids))
        n_test = int(round(test_fraction * len(ids)))
        test += [ids[j] for j in order[:n_test]]
        train += [ids[j] for j in order[n_test:]]
    return sorted(train), sorted(test)


def select_records(records, ids):
    """Records whose ``object_id`` is in ``ids``, in ``ids`` order."""
    by_id = {r.object_id: r for r in records}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise KeyError(f"unknown object ids {missing[:5]}")
    return [by_id[i] for i in ids]


# -- training / evaluation views ------------------------------------------------------------


@dataclass
class TrainingSet:
    """Composited RGBA inputs and camera poses; carries no silhouettes or meshes."""

    object_ids: list
    class_ids: list
    images: torch.Tensor        # (N, V, 4, H, W) float32, alpha channel = 1
    azimuth: torch.Tensor       # (N, V) degrees, possibly perturbed
    elevation: torch.Tensor
    distance: torch.Tensor
    image_size: int = field(default=32)

    @property
    def num_objects(self) -> int:
        return self.images.shape[0]

    @property
    def num_views(self) -> int:
        return self.images.shape[1]

    def cameras(self, obj: np.ndarray, view: np.ndarray) -> CameraBatch:
        o, v = torch.as_tensor(obj), torch.as_tensor(view)
        return CameraBatch(self.azimuth[o, v], self.elevation[o, v], self.distance[o, v], self.image_size)

    def sample_images(self, rng: np.random.Generator, batch: int):
        """Random (object, view) images for the domain-adaptation phase."""
        obj = rng.integers(self.num_objects, size=batch)
        view = rng.integers(self.num_views, size=batch)
        return self.images[obj, view], self.cameras(obj, view)

    def sample_pairs(self, rng: np.random.Generator, batch: int):
        """Two distinct views of uniformly drawn objects: ``(x, y, cams_x, cams_y, obj)``."""
        obj = rng.integers(self.num_objects, size=batch)
        vx = rng.integers(self.num_views, size=batch)
        vy = (vx + rng.integers(1, self.num_views, size=batch)) % self.num_views
        return (self.images[obj, vx], self.images[obj, vy], self.cameras(obj, vx),
                self.cameras(obj, vy), obj)


def sample_pair(dataset: TrainingSet, rng: np.random.Generator):
    """One pair ``(x, y, view_x, view_y, object_id)`` with ``x``, ``y`` as ``(4, H, W)``."""
    x, y, cx, cy, obj = dataset.sample_pairs(rng, 1)
    to_view = lambda c: ViewSpec(float(c.azimuth[0]), float(c.elevation[0]),  # noqa: E731
                                 float(c.distance[0]), c.image_size)
    return x[0], y[0], to_view(cx), to_view(cy), dataset.object_ids[int(obj[0])]


def _perturbed_views(records, perturb: PerturbSpec):
    """Per-record image arrays and views after brightness / azimuth perturbation."""
    rng_b = np.random.default_rng([perturb.seed, 1])
    rng_a = np.random.default_rng([perturb.seed, 2])
    out = []
    for r in records:
        imgs = np.stack([perturb_brightness(r.images[k], r.silhouettes[k], perturb.brightness_sigma, rng_b)
                         for k in range(len(r.views))])
        views = [perturb_azimuth(v, perturb.azimuth_sigma, rng_a) for v in r.views]
        out.append((imgs, views))
    return out


def build_training_set(records, perturb: PerturbSpec = PerturbSpec()) -> TrainingSet:
    """Strip silhouettes and meshes; apply perturbations; pad inputs to RGBA."""
    if not records:
        raise ValueError("empty dataset")
    items = _perturbed_views(records, perturb)
    images = np.stack([pad_alpha(imgs) for imgs, _ in items])              # (N, V, H, W, 4)
    images = torch.as_tensor(images, dtype=torch.float32).permute(0, 1, 4, 2, 3).contiguous()
    az = torch.tensor([[v.azimuth for v in views] for _, views in items], dtype=torch.float64)
    el = torch.tensor([[v.elevation for v in views] for _, views in items], dtype=torch.float64)
    dist = torch.tensor([[v.distance for v in views] for _, views in items], dtype=torch.float64)
    return TrainingSet([r.object_id for r in records], [r.class_id for r in records], images, az, el,
                       dist, image_size=records[0].views[0].image_size)


@dataclass
class EvalItem:
    object_id: str
    class_id: str
    view: int
    image: torch.Tensor     # (4, H, W)
    mesh: Mesh | None


def build_eval_items(records, perturb: PerturbSpec = PerturbSpec(), views=None) -> list[EvalItem]:
    """Test inputs with ground-truth meshes. Only brightness perturbation applies here."""
    items = []
    perturb = replace(perturb, azimuth_sigma=0.0)
    for r, (imgs, _) in zip(records, _perturbed_views(records, perturb)):
        ks = range(len(r.views)) if views is None else views
        for k in ks:
            img = torch.as_tensor(pad_alpha(imgs[k]), dtype=torch.float32).permute(2, 0, 1)
            items.append(EvalItem(r.object_id, r.class_id, int(k), img, r.mesh))
    return items


# -- disk format ----------------------------------------------------------------------------


def _write_png(arr, path):
    from PIL import Image

    arr = np.clip(np.round(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _read_png(path):
    from PIL import Image

    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_dataset(records, root, train_ids=None, test_ids=None, extra: dict | None = None) -> Path:
    """One directory per object plus ``manifest.json`` listing the split."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for r in records:
        d = root / r.object_id
        d.mkdir(exist_ok=True)
        for k in range(len(r.views)):
            _write_png(r.images[k], d / f"view_{k:02d}.png")
            _write_png(r.silhouettes[k], d / f"sil_{k:02d}.png")
        meta = {"object_id": r.object_id, "class": r.class_id,
                "views": [{"azimuth": v.azimuth, "elevation": v.elevation, "distance": v.distance,
                           "image_size": v.image_size, "viewing_angle": v.viewing_angle}
                          for v in r.views]}
        (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        if r.mesh is not None:
            geometry.save_obj(r.mesh, d / "mesh.obj")
    ids = [r.object_id for r in records]
    manifest = {"format": "stylerecon-dataset", "version": 1,
                "objects": [{"id": r.object_id, "class": r.class_id, "path": r.object_id} for r in records],
                "split": {"train": sorted(train_ids if train_ids is not None else ids),
                          "test": sorted(test_ids if test_ids is not None else [])}}
    if extra:
        manifest["generator"] = extra
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_dataset(root, split: str | None = None, with_silhouettes: bool = True) -> list[ObjectRecord]:
    """Load records; ``split`` in {None, "train", "test"} filters via the manifest."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    wanted = None if split is None else set(manifest["split"][split])
    records = []
    for entry in manifest["objects"]:
        if wanted is not None and entry["id"] not in wanted:
            continue
        d = root / entry["path"]
        meta = json.loads((d / "meta.json").read_text())
        views = [ViewSpec(v["azimuth"], v["elevation"], v["distance"], v["image_size"], v["viewing_angle"])
                 for v in meta["views"]]
        n = len(views)
        images = np.stack([_read_png(d / f"view_{k:02d}.png")[..., :3] for k in range(n)])
        if with_silhouettes:
            sils = np.stack([_read_png(d / f"sil_{k:02d}.png") for k in range(n)])
        else:
            sils = np.zeros(images.shape[:3])
        mesh = geometry.load_obj(d / "mesh.obj") if (d / "mesh.obj").exists() else None
        records.append(ObjectRecord(meta["object_id"], meta["class"], images, sils, views, mesh))
    return records


def toy_spec_dict(spec: ToySpec) -> dict:
    return asdict(spec)


def environment_output_root() -> Path:
    return Path(os.environ.get("STYLERECON_OUTPUT", "runs"))
