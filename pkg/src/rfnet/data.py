"""Image decoding, preprocessing, HPatches-layout sequences and synthetic pairs."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence as Seq

import numpy as np

from .engine import Tensor, no_grad
from .geometry import format_homography, normalize_homography, parse_homography, warp_map

IMAGE_EXTENSIONS = (".ppm", ".pgm", ".png", ".jpg", ".jpeg")
STD_FLOOR = 1e-6


class ImageDecodeError(ValueError):
    pass


class SequenceError(ValueError):
    pass


# -- PNM ---------------------------------------------------------------------------------
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_pnm(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode binary PGM (P5) or PPM (P6) into floats in [0, 1].

    Returns H x W for P5 and H x W x 3 for P6.  Maxval above 255 uses
    big-endian 16-bit samples.
    """
    magic = payload[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageDecodeError(f"{source}: bad magic {magic!r}, expected P5 or P6")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(payload, pos)
        if m is None:
            raise ImageDecodeError(f"{source}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise ImageDecodeError(f"{source}: malformed header fields {fields!r}") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ImageDecodeError(f"{source}: invalid header width={width} height={height} maxval={maxval}")
    if pos >= len(payload) or not payload[pos : pos + 1].isspace():
        raise ImageDecodeError(f"{source}: missing whitespace after header")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    sample_bytes = 1 if maxval < 256 else 2
    expected = width * height * channels * sample_bytes
    actual = len(payload) - pos
    if actual < expected:
        raise ImageDecodeError(f"{source}: truncated payload, expected {expected} bytes, got {actual}")
    dtype = np.uint8 if sample_bytes == 1 else np.dtype(">u2")
    data = np.frombuffer(payload, dtype=dtype, count=width * height * channels, offset=pos)
    img = data.astype(np.float64) / maxval
    return img.reshape(height, width) if channels == 1 else img.reshape(height, width, 3)


def encode_pgm(img: np.ndarray) -> bytes:
    """8-bit binary PGM from an H x W array with values in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"encode_pgm expects a 2-d array, got shape {img.shape}")
    q = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + q.tobytes()


def decode_image(path) -> np.ndarray:
    """Read a PGM/PPM natively; other formats go through Pillow when it is installed."""
    path = Path(path)
    payload = path.read_bytes()
    if payload[:2] in (b"P5", b"P6") or path.suffix.lower() in (".pgm", ".ppm"):
        return decode_pnm(payload, str(path))
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover - depends on the environment
        raise ImageDecodeError(f"{path}: unsupported format and Pillow is not installed") from None
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    except Exception as exc:
        raise ImageDecodeError(f"{path}: {exc}") from None
    return arr.astype(np.float64) / 255.0


# -- preprocessing -----------------------------------------------------------------------
@dataclass
class ImageBuffer:
    width: int
    height: int
    pixels: np.ndarray
    bit_depth: int = 8

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


def to_gray(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 3:
        return raw[..., 0] * 0.299 + raw[..., 1] * 0.587 + raw[..., 2] * 0.114
    return raw


def resize_transform(src_size: tuple[int, int], dst_size: tuple[int, int]) -> np.ndarray:
    """Affine map from source to destination pixel coordinates (pixel-center aligned)."""
    (sw, sh), (dw, dh) = src_size, dst_size
    ax, ay = dw / sw, dh / sh
    return np.array([[ax, 0.0, 0.5 * ax - 0.5], [0.0, ay, 0.5 * ay - 0.5], [0.0, 0.0, 1.0]])


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize an H x W array to (width, height) by bilinear interpolation."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    dw, dh = size
    if (dw, dh) == (w, h):
        return img.copy()
    xs = np.clip((np.arange(dw) + 0.5) * (w / dw) - 0.5, 0, w - 1)
    ys = np.clip((np.arange(dh) + 0.5) * (h / dh) - 0.5, 0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(int), max(h - 2, 0))
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = (xs - x0)[None, :], (ys - y0)[:, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def standardize(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.size and img.min() == img.max():  # flat image: the mean carries only roundoff
        return np.zeros(img.shape, dtype=np.float32)
    return ((img - img.mean()) / max(img.std(), STD_FLOOR)).astype(np.float32)


def preprocess(raw: np.ndarray, size: Optional[tuple[int, int]] = (320, 240), bit_depth: int = 8) -> ImageBuffer:
    """Gray conversion, bilinear resize to ``size`` (width, height), per-image standardization."""
    raw = np.asarray(raw)
    if raw.size == 0:
        raise ValueError("cannot preprocess an image with zero pixels")
    gray = to_gray(raw)
    if size is not None:
        gray = resize_bilinear(gray, size)
    pixels = standardize(gray)
    return ImageBuffer(pixels.shape[1], pixels.shape[0], pixels, bit_depth)


def resize_homography(h, ref_size, target_size, new_ref_size, new_target_size=None) -> np.ndarray:
    """Carry a reference->target homography into resized frames: A_t H A_r^-1."""
    new_target_size = new_target_size or new_ref_size
    a_ref = resize_transform(ref_size, new_ref_size)
    a_tgt = resize_transform(target_size, new_target_size)
    return normalize_homography(a_tgt @ normalize_homography(h) @ np.linalg.inv(a_ref))


# -- sequences ---------------------------------------------------------------------------
@dataclass
class Sequence:
    name: str
    images: list
    homographies: list
    tag: str = "viewpoint"

    def pairs(self):
        """(reference, target, H_ref->target) for targets 2..6."""
        for k, h in enumerate(self.homographies, start=1):
            yield self.images[0], self.images[k], h


def _find_image(directory: Path, index: int) -> Path:
    for ext in IMAGE_EXTENSIONS:
        p = directory / f"{index}{ext}"
        if p.exists():
            return p
    raise SequenceError(f"{directory}: missing image {index} (tried {', '.join(IMAGE_EXTENSIONS)})")


def sequence_tag(name: str) -> str:
    return "illumination" if name.startswith("i_") else "viewpoint"


def load_sequence(directory, size: Optional[tuple[int, int]] = (320, 240), count: int = 6) -> Sequence:
    """Load images 1..count and H_1_2..H_1_count from an HPatches-style directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise SequenceError(f"{directory}: not a directory")
    raws = []
    for i in range(1, count + 1):
        path = _find_image(directory, i)
        try:
            raws.append(decode_image(path))
        except ImageDecodeError as exc:
            raise SequenceError(f"{path}: {exc}") from None
    homs = []
    for k in range(2, count + 1):
        hpath = directory / f"H_1_{k}"
        if not hpath.exists():
            raise SequenceError(f"{directory}: missing homography file H_1_{k}")
        try:
            homs.append(parse_homography(hpath.read_text(), str(hpath)))
        except ValueError as exc:
            raise SequenceError(str(exc)) from None
    images = [preprocess(r, size) for r in raws]
    if size is not None:
        ref = (raws[0].shape[1], raws[0].shape[0])
        homs = [
            resize_homography(h, ref, (raw.shape[1], raw.shape[0]), size) for h, raw in zip(homs, raws[1:])
        ]
    return Sequence(directory.name, images, homs, sequence_tag(directory.name))


def list_sequences(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise SequenceError(f"{root}: dataset directory does not exist")
    return sorted(p for p in root.iterdir() if p.is_dir())


def split_sequences(names: Seq[str], train_ratio: float = 0.9, seed: int = 0) -> dict[str, str]:
    """Deterministic shuffled train/test split of sequence names."""
    names = sorted(names)
    order = np.random.default_rng(seed).permutation(len(names))
    n_train = int(round(train_ratio * len(names)))
    return {names[i]: ("train" if rank < n_train else "test") for rank, i in enumerate(order)}


def write_manifest(path, split: dict[str, str]) -> None:
    Path(path).write_text("".join(f"{name} {tag}\n" for name, tag in sorted(split.items())), encoding="utf-8")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise SequenceError(f"{path}:{lineno}: expected '<name> train|test', got {line!r}")
        out[parts[0]] = parts[1]
    return out


# -- synthetic data ----------------------------------------------------------------------
@dataclass
class SynthParams:
    max_rotation: float = 0.3
    max_scale: float = 0.15
    max_translation: float = 4.0
    max_perspective: float = 5e-4
    gain_jitter: float = 0.0
    bias_jitter: float = 0.0

    @classmethod
    def zero(cls) -> "SynthParams":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def random_homography(rng: np.random.Generator, shape: tuple[int, int], params: SynthParams) -> np.ndarray:
    """Rotation, isotropic scale and perspective about the image center, then translation."""
    height, width = shape
    cx, cy = (width - 1) / 2, (height - 1) / 2
    angle = rng.uniform(-params.max_rotation, params.max_rotation)
    scale = math.exp(rng.uniform(-params.max_scale, params.max_scale))
    tx, ty = rng.uniform(-params.max_translation, params.max_translation, size=2)
    px, py = rng.uniform(-params.max_perspective, params.max_perspective, size=2)
    c, s = math.cos(angle), math.sin(angle)
    a = np.array([[scale * c, -scale * s, 0.0], [scale * s, scale * c, 0.0], [px, py, 1.0]])
    center = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    uncenter = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    shift = np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    return shift @ (center @ a @ uncenter)


def synth_pair(base, rng: np.random.Generator, params: Optional[SynthParams] = None, max_tries: int = 100):
    """(I_i, I_j, H) with I_j = warp(H, I_i) plus optional gain/bias jitter."""
    params = params or SynthParams()
    img = np.asarray(getattr(base, "pixels", base), dtype=np.float32)
    for _ in range(max_tries):
        h = random_homography(rng, img.shape, params)
        det = abs(np.linalg.det(h / h[2, 2]))
        if 0.25 <= det <= 4.0:
            break
    else:
        raise ValueError(f"no well-conditioned homography after {max_tries} samples")
    with no_grad():
        warped = warp_map(h, Tensor(img)).data
    gain = 1.0 + rng.uniform(-params.gain_jitter, params.gain_jitter)
    bias = rng.uniform(-params.bias_jitter, params.bias_jitter)
    if gain != 1.0 or bias != 0.0:
        warped = (warped * gain + bias).astype(np.float32)
    return img, warped, h


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1)
    k = np.exp(-(t**2) / (2 * sigma * sigma))
    k /= k.sum()
    padded = np.pad(img, radius, mode="reflect")
    rows = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, padded)
    return np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, rows)


def make_texture(rng: np.random.Generator, shape: tuple[int, int] = (96, 96), n_shapes: int = 40, blur: float = 1.0):
    """Random rectangles and ellipses over smooth noise, values in [0, 1]."""
    height, width = shape
    img = _blur(rng.standard_normal(shape), 4.0)
    img = (img - img.min()) / max(np.ptp(img), 1e-9) * 0.4
    ys, xs = np.mgrid[0:height, 0:width]
    for _ in range(n_shapes):
        value = rng.uniform(0, 1)
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        rx, ry = rng.uniform(2, width / 6), rng.uniform(2, height / 6)
        if rng.random() < 0.5:
            mask = (np.abs(xs - cx) < rx) & (np.abs(ys - cy) < ry)
        else:
            mask = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 < 1
        img[mask] = value
    img = _blur(img, blur)
    return (img - img.min()) / max(np.ptp(img), 1e-9)


def write_sequence(directory, images: Seq[np.ndarray], homographies: Seq[np.ndarray]) -> Path:
    """Write an HPatches-layout directory (1.pgm.., H_1_k) from [0,1] gray images."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images, start=1):
        (directory / f"{i}.pgm").write_bytes(encode_pgm(img))
    for k, h in enumerate(homographies, start=2):
        (directory / f"H_1_{k}").write_text(format_homography(normalize_homography(h)))
    return directory


def to_unit_range(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return (img - img.min()) / max(np.ptp(img), 1e-9)


def synth_sequence(base: np.ndarray, rng: np.random.Generator, params: SynthParams, targets: int = 5):
    """Reference image plus ``targets`` warped copies of ``base`` ([0, 1] values)."""
    base = np.asarray(base, dtype=np.float32)
    images, homs = [base], []
    for _ in range(targets):
        _, warped, h = synth_pair(base, rng, params)
        images.append(np.clip(warped, 0, 1))
        homs.append(h)
    return images, homs
