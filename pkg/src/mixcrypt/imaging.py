"""Images, bounded geometric augmentation, and on-disk formats.

An image is a float64 array of shape (3, H, W) with values in [-1, 1].
Augmentations are parameterised point maps of the frame; the augmentation
level of a transform is the smallest eps such that every surviving pixel
moves by at most (eps/2)*W horizontally and (eps/2)*H vertically.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, DimensionError, FormatError, ParameterError

KINDS = ("identity", "rotation", "translation", "crop_resize", "composite")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}

DATASET_MAGIC = b"MXD1"


def check_image(img, lo=-1.0, hi=1.0):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"image must be (3, H, W), got {img.shape}")
    if img.shape[1] < 8 or img.shape[2] < 8:
        raise DimensionError(f"image sides must be >= 8, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DataError("image contains non-finite values")
    if img.min() < lo - 1e-9 or img.max() > hi + 1e-9:
        raise DataError(f"image values outside [{lo}, {hi}]")
    return img


@dataclass
class AugmentParams:
    """One geometric transform of a W x H frame.

    ``composite`` applies rotation, then translation, then crop_resize.
    Crop boxes are (x0, y0, w, h) in source pixels and are resized back to
    the full frame.
    """

    kind: str = "identity"
    rotation_degrees: float = 0.0
    dx: float = 0.0
    dy: float = 0.0
    crop: tuple = (0.0, 0.0, 0.0, 0.0)
    epsilon_bound: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown augmentation kind '{self.kind}'")


def identity_params():
    return AugmentParams()


@dataclass
class AugmentedImage:
    """An augmented copy of a private image; ``image`` is None for disk refs."""

    image: object
    params: AugmentParams
    source_id: int = -1
    copy_index: int = 1
    class_id: int = -1

    def __post_init__(self):
        if self.copy_index == 0 and self.params.kind != "identity":
            raise DataError("copy index 0 must carry the identity transform")


@dataclass
class OracleBlock:
    """Ground-truth provenance of one encryption (experimenter-only)."""

    target: AugmentedImage
    partner: AugmentedImage
    lambdas: np.ndarray
    sign_seed: int
    public_ids: tuple = ()
    sign_free: bool = False


@dataclass
class DatasetRecord:
    image: np.ndarray
    label: np.ndarray
    oracle: OracleBlock | None = None


# ---------------------------------------------------------------------------
# point maps


def point_map(params, xs, ys, W, H):
    """Forward map of source pixel coordinates, extended to the whole plane."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    k = params.kind
    if k == "identity":
        return xs, ys
    if k == "translation":
        return xs + params.dx, ys + params.dy
    if k == "rotation":
        return _rotate_points(xs, ys, params.rotation_degrees, W, H)
    if k == "crop_resize":
        return _crop_points(xs, ys, params.crop, W, H)
    # composite: rotation, then translation, then crop_resize
    xs, ys = _rotate_points(xs, ys, params.rotation_degrees, W, H)
    xs, ys = xs + params.dx, ys + params.dy
    return _crop_points(xs, ys, params.crop, W, H)


def _rotate_points(xs, ys, degrees, W, H):
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    rx, ry = xs - cx, ys - cy
    return c * rx - s * ry + cx, s * rx + c * ry + cy


def _crop_points(xs, ys, crop, W, H):
    x0, y0, w, h = crop
    if w <= 0 or h <= 0:
        return xs, ys
    return (xs - x0) * (W / w), (ys - y0) * (H / h)


def _inverse_map(params, xs, ys, W, H):
    k = params.kind
    if k == "identity":
        return xs, ys
    if k == "translation":
        return xs - params.dx, ys - params.dy
    if k == "rotation":
        return _rotate_points(xs, ys, -params.rotation_degrees, W, H)
    if k == "crop_resize":
        return _crop_inverse(xs, ys, params.crop, W, H)
    xs, ys = _crop_inverse(xs, ys, params.crop, W, H)
    xs, ys = xs - params.dx, ys - params.dy
    return _rotate_points(xs, ys, -params.rotation_degrees, W, H)


def _crop_inverse(xs, ys, crop, W, H):
    x0, y0, w, h = crop
    if w <= 0 or h <= 0:
        return xs, ys
    return x0 + xs * (w / W), y0 + ys * (h / H)


def _frame_grid(W, H):
    ys, xs = np.mgrid[0:H, 0:W]
    return xs.astype(np.float64), ys.astype(np.float64)


def definition1_epsilon(params, W, H):
    """Smallest eps for which ``params`` is an eps-augmentation of the frame.

    Only surviving pixel pairs count: sources inside the crop box whose
    images land inside the frame.
    """
    xs, ys = _frame_grid(W, H)
    tx, ty = point_map(params, xs, ys, W, H)
    alive = (tx >= -1e-9) & (tx <= W - 1 + 1e-9) & (ty >= -1e-9) & (ty <= H - 1 + 1e-9)
    if params.kind in ("crop_resize", "composite") and params.crop[2] > 0:
        x0, y0, w, h = params.crop
        # crop selection happens in the coordinates fed to the crop stage
        if params.kind == "composite":
            cx, cy = point_map(
                replace(params, kind="composite", crop=(0.0, 0.0, 0.0, 0.0)), xs, ys, W, H
            )
        else:
            cx, cy = xs, ys
        alive &= (cx >= x0 - 1e-9) & (cx <= x0 + w + 1e-9) & (cy >= y0 - 1e-9) & (cy <= y0 + h + 1e-9)
    if not alive.any():
        return 2.0
    dx = np.abs(tx - xs)[alive].max()
    dy = np.abs(ty - ys)[alive].max()
    return max(2.0 * dx / W, 2.0 * dy / H)


def epsilon_distance(a, b, W, H):
    """Smallest eps bounding the displacement between the two pixel maps.

    Evaluated on the dense grid of all frame pixels using the transforms'
    whole-plane extensions, which makes the distance symmetric and gives it
    the triangle inequality (so filtered sets obey the 2*t_eps bound).
    """
    xs, ys = _frame_grid(W, H)
    ax, ay = point_map(a, xs, ys, W, H)
    bx, by = point_map(b, xs, ys, W, H)
    dx = np.abs(bx - ax).max()
    dy = np.abs(by - ay).max()
    return max(2.0 * dx / W, 2.0 * dy / H)


# ---------------------------------------------------------------------------
# augmentation sampling and application


def max_rotation_degrees(epsilon, W, H):
    """Largest angle whose worst-case corner displacement fits the bound."""
    if epsilon <= 0:
        return 0.0
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0

    def excess(deg):
        th = math.radians(deg)
        c, s = math.cos(th), math.sin(th)
        # affine displacement is maximal at a frame corner
        ddx = abs(c - 1) * cx + abs(s) * cy
        ddy = abs(s) * cx + abs(c - 1) * cy
        return max(2 * ddx / W, 2 * ddy / H) - epsilon

    lo, hi = 0.0, 180.0
    if excess(hi) <= 0:
        return hi
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if excess(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return lo


def sample_augment_params(epsilon, W, H, rng):
    """Draw a transform whose Definition-1 level is at most ``epsilon``."""
    if epsilon < 0 or epsilon > 1:
        raise ParameterError(f"epsilon {epsilon} outside [0, 1]")
    if epsilon == 0:
        return identity_params()
    kind = ("translation", "rotation", "crop_resize")[rng.integers(0, 3)]
    if kind == "translation":
        return AugmentParams(
            kind="translation",
            dx=rng.uniform(-epsilon * W / 2, epsilon * W / 2),
            dy=rng.uniform(-epsilon * H / 2, epsilon * H / 2),
            epsilon_bound=epsilon,
        )
    if kind == "rotation":
        lim = max_rotation_degrees(epsilon, W, H)
        return AugmentParams(
            kind="rotation", rotation_degrees=rng.uniform(-lim, lim), epsilon_bound=epsilon
        )
    w = W * (1.0 - (epsilon / 2) * rng.uniform(0.0, 1.0))
    h = H * (1.0 - (epsilon / 2) * rng.uniform(0.0, 1.0))
    x0 = rng.uniform(0.0, W - w)
    y0 = rng.uniform(0.0, H - h)
    return AugmentParams(kind="crop_resize", crop=(x0, y0, w, h), epsilon_bound=epsilon)


def apply_augment(image, params):
    """Resample ``image`` under ``params`` (bilinear, constant 0 fill)."""
    image = np.asarray(image, dtype=np.float64)
    _, H, W = image.shape
    xs, ys = _frame_grid(W, H)
    sx, sy = _inverse_map(params, xs, ys, W, H)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    out = np.zeros_like(image)
    for ox, oy, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        px, py = x0 + ox, y0 + oy
        ok = (px >= 0) & (px < W) & (py >= 0) & (py < H)
        pxc, pyc = np.clip(px, 0, W - 1), np.clip(py, 0, H - 1)
        out += wgt * ok * image[:, pyc, pxc]
    return np.clip(out, -1.0, 1.0)


def augment(image, epsilon, rng, source_id=-1, copy_index=1, class_id=-1):
    """Random eps-bounded augmentation of ``image``."""
    image = np.asarray(image, dtype=np.float64)
    _, H, W = image.shape
    params = sample_augment_params(epsilon, W, H, rng)
    return AugmentedImage(
        image=apply_augment(image, params),
        params=params,
        source_id=source_id,
        copy_index=copy_index,
        class_id=class_id,
    )


def materialize(aug, private_images):
    """Pixels of an augmented ref, rebuilding them from the source if needed."""
    if aug.image is not None:
        return aug.image
    return apply_augment(private_images[aug.source_id], aug.params)


# ---------------------------------------------------------------------------
# plain image operations


def abs_image(m):
    return np.abs(np.asarray(m, dtype=np.float64))


def image_variance(m):
    """Population variance over all pixels of all channels."""
    return float(np.var(np.asarray(m, dtype=np.float64)))


def central_crop16(m):
    m = np.asarray(m)
    _, H, W = m.shape
    if H < 16 or W < 16:
        raise DimensionError(f"central_crop16 needs >= 16x16, got {H}x{W}")
    r, c = (H - 16) // 2, (W - 16) // 2
    return m[:, r : r + 16, c : c + 16]


def downsample2(m):
    """Average disjoint 2x2 blocks; odd edges average the partial block."""
    m = np.asarray(m, dtype=np.float64)
    _, H, W = m.shape
    ri = np.arange(0, H, 2)
    ci = np.arange(0, W, 2)
    sums = np.add.reduceat(np.add.reduceat(m, ri, axis=1), ci, axis=2)
    counts = np.outer(np.minimum(ri + 2, H) - ri, np.minimum(ci + 2, W) - ci)
    return sums / counts[None, :, :]


def pad_or_crop_center(m, size):
    """Center-crop or zero-pad the spatial dims to ``size`` x ``size``."""
    m = np.asarray(m)
    c, H, W = m.shape
    out = np.zeros((c, size, size), dtype=np.float64)
    r0, c0 = max(0, (H - size) // 2), max(0, (W - size) // 2)
    r1, c1 = max(0, (size - H) // 2), max(0, (size - W) // 2)
    hh, ww = min(size, H), min(size, W)
    out[:, r1 : r1 + hh, c1 : c1 + ww] = m[:, r0 : r0 + hh, c0 : c0 + ww]
    return out


# ---------------------------------------------------------------------------
# PPM export: P6, maxval 255, byte = round((v + 1) * 127.5) clamped


def save_image_ppm(m, path):
    m = np.asarray(m, dtype=np.float64)
    _, H, W = m.shape
    bytes_ = np.clip(np.round((m + 1.0) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(bytes_.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# binary dataset ("MXD1")
#
# magic, u32 count; per record: u32 H, u32 W, u32 num_classes,
# 3*H*W float64 pixels in (C, H, W) row-major order, num_classes float64
# label entries, u8 oracle flag, then the optional oracle block:
#   aug ref (target), aug ref (partner), u32 k, k float64 lambdas,
#   u64 sign seed, u8 sign-free flag, (k - 2) u64 public ids
# aug ref: i64 source id, i64 class id, u32 copy index,
#   u8 kind, 8 float64 (rotation, dx, dy, x0, y0, w, h, epsilon bound)
# All integers and reals little-endian.


def _write_params(fh, p):
    fh.write(struct.pack("<B", _KIND_CODE[p.kind]))
    fh.write(
        struct.pack(
            "<8d", p.rotation_degrees, p.dx, p.dy, p.crop[0], p.crop[1], p.crop[2], p.crop[3], p.epsilon_bound
        )
    )


def _read_params(fh):
    (code,) = struct.unpack("<B", fh.read(1))
    vals = struct.unpack("<8d", fh.read(64))
    if code >= len(KINDS):
        raise FormatError(f"unknown augmentation kind code {code}")
    return AugmentParams(
        kind=KINDS[code],
        rotation_degrees=vals[0],
        dx=vals[1],
        dy=vals[2],
        crop=tuple(vals[3:7]),
        epsilon_bound=vals[7],
    )


def _write_aug_ref(fh, aug):
    fh.write(struct.pack("<qqI", aug.source_id, aug.class_id, aug.copy_index))
    _write_params(fh, aug.params)


def _read_aug_ref(fh):
    source_id, class_id, copy_index = struct.unpack("<qqI", fh.read(20))
    params = _read_params(fh)
    return AugmentedImage(
        image=None, params=params, source_id=source_id, copy_index=copy_index, class_id=class_id
    )


def save_dataset_bin(records, path):
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for rec in records:
            img = np.ascontiguousarray(rec.image, dtype="<f8")
            _, H, W = img.shape
            label = np.ascontiguousarray(rec.label, dtype="<f8")
            fh.write(struct.pack("<III", H, W, label.size))
            fh.write(img.tobytes())
            fh.write(label.tobytes())
            orc = rec.oracle
            fh.write(struct.pack("<B", 0 if orc is None else 1))
            if orc is None:
                continue
            _write_aug_ref(fh, orc.target)
            _write_aug_ref(fh, orc.partner)
            lam = np.ascontiguousarray(orc.lambdas, dtype="<f8")
            fh.write(struct.pack("<I", lam.size))
            fh.write(lam.tobytes())
            fh.write(struct.pack("<QB", orc.sign_seed, 1 if orc.sign_free else 0))
            if len(orc.public_ids) != max(0, lam.size - 2):
                raise DataError("oracle block: public id count must be k - 2")
            for pid in orc.public_ids:
                fh.write(struct.pack("<Q", pid))


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated dataset: {what}")
    return buf


def load_dataset_bin(path):
    records = []
    with open(path, "rb") as fh:
        if fh.read(4) != DATASET_MAGIC:
            raise FormatError(f"{path}: bad dataset magic")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "count"))
        for i in range(count):
            H, W, nc = struct.unpack("<III", _read_exact(fh, 12, f"record {i} header"))
            img = np.frombuffer(_read_exact(fh, 8 * 3 * H * W, f"record {i} pixels"), dtype="<f8")
            img = img.reshape(3, H, W).astype(np.float64)
            label = np.frombuffer(_read_exact(fh, 8 * nc, f"record {i} label"), dtype="<f8").astype(
                np.float64
            )
            (flag,) = struct.unpack("<B", _read_exact(fh, 1, f"record {i} flag"))
            oracle = None
            if flag:
                target = _read_aug_ref(fh)
                partner = _read_aug_ref(fh)
                (k,) = struct.unpack("<I", _read_exact(fh, 4, "lambda count"))
                lam = np.frombuffer(_read_exact(fh, 8 * k, "lambdas"), dtype="<f8").astype(np.float64)
                seed, free = struct.unpack("<QB", _read_exact(fh, 9, "sign seed"))
                pids = struct.unpack(f"<{k - 2}Q", _read_exact(fh, 8 * (k - 2), "public ids"))
                oracle = OracleBlock(
                    target=target,
                    partner=partner,
                    lambdas=lam,
                    sign_seed=int(seed),
                    public_ids=tuple(int(p) for p in pids),
                    sign_free=bool(free),
                )
            records.append(DatasetRecord(image=img, label=label, oracle=oracle))
    return records
