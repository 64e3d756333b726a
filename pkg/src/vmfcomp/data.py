"""Synthetic multi-domain cardiac-like slices, domain splits and sample files.

Each sample is a 2D image of a body ellipse with two lungs and, with
probability ``p_heart``, a heart made of an LV disk inside a MYO ring and an
RV crescent next to it. Domains differ by a monotone intensity curve, blur,
noise and a fixed smooth bias field, so shape is shared and style is not.
"""

import hashlib
import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CorruptFile, FactorOutOfBounds, InvalidFraction, MissingField

FACTORS = ("LV", "MYO", "RV", "lungs", "body")
HEART_FACTORS = ("LV", "MYO", "RV")
LABELS = {"LV": 1, "MYO": 2, "RV": 3}

# tissue intensities before the domain curve is applied
TISSUE = {"background": 0.0, "body": 0.45, "lungs": 0.12, "MYO": 0.62, "LV": 0.92, "RV": 0.8}

MAGIC = b"VMFCSMP1"
FORMAT_VERSION = 1


@dataclass
class DomainSpec:
    domain_id: str
    intensity_x: tuple = (0.0, 1.0)
    intensity_y: tuple = (0.0, 1.0)
    noise_std: float = 0.02
    blur_radius: float = 0.0
    texture_seed: int = 0
    bias_strength: float = 0.1

    def __post_init__(self):
        self.intensity_x = tuple(float(v) for v in self.intensity_x)
        self.intensity_y = tuple(float(v) for v in self.intensity_y)
        if len(self.intensity_x) != len(self.intensity_y) or len(self.intensity_x) < 2:
            raise ValueError("intensity map needs matching knots (at least 2)")
        if np.any(np.diff(self.intensity_x) <= 0):
            raise ValueError("intensity knots must be strictly increasing")
        if np.any(np.diff(self.intensity_y) < 0):
            raise ValueError("intensity map must be monotone non-decreasing")
        if self.noise_std < 0 or self.blur_radius < 0:
            raise ValueError("noise_std and blur_radius must be >= 0")

    def intensity_map(self, values):
        return np.interp(values, self.intensity_x, self.intensity_y)

    def to_dict(self):
        return {
            "domain_id": self.domain_id,
            "intensity_x": list(self.intensity_x),
            "intensity_y": list(self.intensity_y),
            "noise_std": self.noise_std,
            "blur_radius": self.blur_radius,
            "texture_seed": self.texture_seed,
            "bias_strength": self.bias_strength,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _curve(fn, knots=9):
    xs = np.linspace(0.0, 1.0, knots)
    return tuple(float(v) for v in xs), tuple(round(float(fn(v)), 6) for v in xs)


def default_domains():
    """Four shipped domains: gamma / contrast curves with their own blur and noise."""
    gamma_b = _curve(lambda v: v ** 0.6)
    gamma_c = _curve(lambda v: 0.9 * v ** 1.6)
    s_curve = _curve(lambda v: 0.5 + 0.5 * np.tanh(3.0 * (v - 0.45)) / np.tanh(3.0 * 0.55)
                     if v > 0 else 0.0)
    return [
        DomainSpec("A", (0, 1), (0, 1), noise_std=0.02, blur_radius=0.5, texture_seed=11),
        DomainSpec("B", *gamma_b, noise_std=0.04, blur_radius=1.0, texture_seed=22),
        DomainSpec("C", *gamma_c, noise_std=0.03, blur_radius=0.0, texture_seed=33),
        DomainSpec("D", *s_curve, noise_std=0.05, blur_radius=0.7, texture_seed=44),
    ]


@dataclass(eq=False)
class Sample:
    """One 2D slice. ``image`` is ``(H, W)`` float32 in [0, 1]."""

    image: np.ndarray
    domain_id: str
    mask: np.ndarray = None
    weak: np.ndarray = None
    factor_masks: dict = field(default_factory=dict)
    factor_params: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            self.domain_id == other.domain_id
            and same(self.image, other.image)
            and same(self.mask, other.mask)
            and same(self.weak, other.weak)
            and self.factor_masks.keys() == other.factor_masks.keys()
            and all(same(v, other.factor_masks[k]) for k, v in self.factor_masks.items())
            and self.factor_params == other.factor_params
        )

    def without_labels(self, keep_weak=True):
        """Copy with the segmentation mask removed (and the weak label unless kept)."""
        weak = self.weak if keep_weak else None
        return Sample(self.image, self.domain_id, None, weak, self.factor_masks, self.factor_params)


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _bias_field(spec, size):
    rng = np.random.default_rng(spec.texture_seed)
    coarse = rng.normal(size=(4, 4))
    field_ = ndimage.zoom(coarse, (size[0] / 4, size[1] / 4), order=3)
    field_ = field_ / (np.abs(field_).max() + 1e-12)
    return 1.0 + spec.bias_strength * field_


def _draw_geometry(rng, size):
    h, w = size
    sy, sx = h / 64.0, w / 64.0
    g = {
        "body": {"cy": h / 2 + rng.uniform(-2, 2) * sy, "cx": w / 2 + rng.uniform(-2, 2) * sx,
                 "ry": rng.uniform(23, 27) * sy, "rx": rng.uniform(27, 30) * sx,
                 "angle": rng.uniform(-0.15, 0.15)},
    }
    lungs = []
    for side in (-1, 1):
        lungs.append({"cy": h / 2 + rng.uniform(-3, 1) * sy,
                      "cx": w / 2 + side * rng.uniform(12, 15) * sx,
                      "ry": rng.uniform(11, 14) * sy, "rx": rng.uniform(6, 8) * sx,
                      "angle": side * rng.uniform(0.0, 0.3)})
    g["lungs"] = lungs
    lv_r = rng.uniform(4.0, 6.0) * sy
    g["heart"] = {
        "cy": h / 2 + rng.uniform(-2, 6) * sy,
        "cx": w / 2 + rng.uniform(-1, 5) * sx,
        "lv_r": lv_r,
        "myo_t": rng.uniform(2.5, 3.5) * sy,
        "rv_r": rng.uniform(6.0, 8.0) * sy,
        "rv_angle": math.pi + rng.uniform(-0.5, 0.5),
    }
    return g


def _render_heart(yy, xx, hp):
    outer = hp["lv_r"] + hp["myo_t"]
    lv = _disk(yy, xx, hp["cy"], hp["cx"], hp["lv_r"])
    myo = _disk(yy, xx, hp["cy"], hp["cx"], outer) & ~lv
    off = outer + 0.35 * hp["rv_r"]
    rcy = hp["cy"] + off * math.sin(hp["rv_angle"])
    rcx = hp["cx"] + off * math.cos(hp["rv_angle"])
    rv = _disk(yy, xx, rcy, rcx, hp["rv_r"]) & ~_disk(yy, xx, hp["cy"], hp["cx"], outer + 0.5)
    return lv, myo, rv


def generate_sample(spec, rng_seed, p_heart=0.85, size=(64, 64), heart_shift=(0, 0),
                    heart_present=None):
    """Render one sample of ``spec``'s domain.

    ``heart_shift`` translates only the heart by whole pixels (rows, cols);
    every other random draw is unaffected, so a shifted render differs from
    the unshifted one in the heart factor alone. ``heart_present`` overrides
    the ``p_heart`` draw.
    """
    size = tuple(size)
    rng = np.random.default_rng(rng_seed)
    geo = _draw_geometry(rng, size)
    has_heart = bool(rng.uniform() < p_heart)
    if heart_present is not None:
        has_heart = bool(heart_present)
    texture = ndimage.gaussian_filter(rng.normal(size=size), 2.0)
    noise = rng.normal(size=size)

    hp = dict(geo["heart"])
    hp["cy"] += heart_shift[0]
    hp["cx"] += heart_shift[1]

    yy, xx = np.mgrid[0:size[0], 0:size[1]].astype(np.float64)
    body = _ellipse(yy, xx, **geo["body"])
    lungs = np.zeros(size, dtype=bool)
    for lp in geo["lungs"]:
        lungs |= _ellipse(yy, xx, **lp)
    lungs &= body
    if has_heart:
        lv, myo, rv = _render_heart(yy, xx, hp)
        heart = lv | myo | rv
        ys, xs = np.nonzero(heart)
        if (len(ys) == 0 or ys.min() < 1 or xs.min() < 1
                or ys.max() > size[0] - 2 or xs.max() > size[1] - 2):
            raise FactorOutOfBounds(f"heart leaves the image with shift {tuple(heart_shift)}")
        lv, myo, rv = lv & body, myo & body, rv & body
    else:
        lv = myo = rv = np.zeros(size, dtype=bool)
    heart = lv | myo | rv
    lungs &= ~heart
    body_only = body & ~lungs & ~heart

    base = np.full(size, TISSUE["background"])
    base[body_only] = TISSUE["body"]
    base[lungs] = TISSUE["lungs"]
    base[myo] = TISSUE["MYO"]
    base[rv] = TISSUE["RV"]
    base[lv] = TISSUE["LV"]
    base = base + 0.04 * texture * body
    img = spec.intensity_map(np.clip(base, 0, 1)) * _bias_field(spec, size)
    if spec.blur_radius > 0:
        img = ndimage.gaussian_filter(img, spec.blur_radius)
    img = np.clip(img + spec.noise_std * noise, 0.0, 1.0).astype(np.float32)

    mask = np.zeros(size, dtype=np.uint8)
    mask[lv] = LABELS["LV"]
    mask[myo] = LABELS["MYO"]
    mask[rv] = LABELS["RV"]
    factor_masks = {"LV": lv, "MYO": myo, "RV": rv, "lungs": lungs, "body": body_only}
    weak = np.array([factor_masks[k].any() for k in HEART_FACTORS], dtype=np.uint8)
    params = {"body": geo["body"], "lungs": geo["lungs"], "heart_present": has_heart,
              "heart": hp if has_heart else None,
              "heart_shift": [int(heart_shift[0]), int(heart_shift[1])],
              "seed": int(rng_seed)}
    return Sample(img, spec.domain_id, mask, weak, factor_masks, _jsonable(params))


def _jsonable(obj):
    return json.loads(json.dumps(obj))


def sample_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _gen_one(args):
    spec, seed, i, p_heart, size = args
    return generate_sample(spec, sample_seed(seed, i), p_heart=p_heart, size=size)


def num_workers():
    try:
        return max(1, int(os.environ.get("VMFCOMP_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def generate_domain(spec, n, seed, p_heart=0.85, size=(64, 64), workers=None):
    if n < 1:
        raise ValueError("n must be >= 1")
    jobs = [(spec, seed, i, p_heart, tuple(size)) for i in range(n)]
    workers = num_workers() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_gen_one, jobs, chunksize=16))
    return [_gen_one(j) for j in jobs]


def generate_benchmark(specs=None, n=200, seed=0, p_heart=0.85, size=(64, 64), workers=None):
    """``{domain_id: [Sample, ...]}`` for every spec; domains get distinct seeds."""
    specs = specs or default_domains()
    return {s.domain_id: generate_domain(s, n, sample_seed(seed, 10_000 + k), p_heart, size,
                                         workers)
            for k, s in enumerate(specs)}


@dataclass
class SplitPlan:
    source_domains: tuple
    target_domain: str
    label_fraction: float
    seed: int
    labeled: dict
    unlabeled: dict
    target: list

    def training_samples(self, domains):
        """Source samples, with labels stripped from the unlabeled part."""
        out = []
        for d in self.source_domains:
            out += [domains[d][i] for i in self.labeled[d]]
            out += [domains[d][i].without_labels() for i in self.unlabeled[d]]
        return out

    def labeled_samples(self, domains):
        return [domains[d][i] for d in self.source_domains for i in self.labeled[d]]

    def target_samples(self, domains):
        return [domains[self.target_domain][i] for i in self.target]

    def to_dict(self):
        return {"source_domains": list(self.source_domains), "target_domain": self.target_domain,
                "label_fraction": self.label_fraction, "seed": self.seed,
                "labeled": self.labeled, "unlabeled": self.unlabeled, "target": self.target}


def make_split(domains, target, label_fraction, seed):
    """Leave ``target`` out; label ``round(fraction * n)`` samples per source domain.

    ``domains`` maps domain id to its sample list (or to its size).
    """
    if not (0 < label_fraction <= 1):
        raise InvalidFraction(f"label_fraction must be in (0, 1], got {label_fraction}")
    sizes = {d: (v if isinstance(v, int) else len(v)) for d, v in domains.items()}
    if target not in sizes:
        raise KeyError(f"unknown target domain {target!r}")
    sources = tuple(d for d in sizes if d != target)
    labeled, unlabeled = {}, {}
    for k, d in enumerate(sources):
        n = sizes[d]
        n_lab = int(math.floor(label_fraction * n + 0.5))
        perm = np.random.default_rng([int(seed), k, 7]).permutation(n)
        labeled[d] = sorted(int(i) for i in perm[:n_lab])
        unlabeled[d] = sorted(int(i) for i in perm[n_lab:])
    return SplitPlan(sources, target, float(label_fraction), int(seed), labeled, unlabeled,
                     list(range(sizes[target])))


# -- sample files ------------------------------------------------------------

def sample_bytes(sample):
    """The on-disk encoding of ``sample``."""
    fields = []
    payloads = []

    def add(name, arr, dtype):
        arr = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
        fields.append({"name": name, "dtype": np.dtype(dtype).str.lstrip("<>|="),
                       "shape": list(arr.shape), "nbytes": arr.nbytes})
        payloads.append(arr.tobytes())

    add("image", sample.image, "float32")
    if sample.mask is not None:
        add("mask", sample.mask, "uint8")
    if sample.weak is not None:
        add("weak", sample.weak, "uint8")
    for name, m in sample.factor_masks.items():
        add("factor:" + name, m, "uint8")
    header = {
        "version": FORMAT_VERSION,
        "domain_id": sample.domain_id,
        "has_mask": sample.mask is not None,
        "has_weak": sample.weak is not None,
        "factor_names": list(sample.factor_masks),
        "factor_params": sample.factor_params,
        "fields": fields,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    return b"".join([MAGIC, struct.pack("<I", len(hbytes)), hbytes, *payloads])


def save_sample(sample, path):
    with open(path, "wb") as f:
        f.write(sample_bytes(sample))


def domain_hashes(domains):
    """sha256 per domain over the encoded samples, in index order."""
    out = {}
    for d, samples in domains.items():
        h = hashlib.sha256()
        for s in samples:
            h.update(sample_bytes(s))
        out[d] = h.hexdigest()
    return out


def load_sample(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise CorruptFile(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    for key in ("version", "domain_id", "fields", "has_mask", "has_weak", "factor_names"):
        if key not in header:
            raise MissingField(f"{path}: header lacks {key!r}")
    if header["version"] != FORMAT_VERSION:
        raise CorruptFile(f"{path}: unsupported version {header['version']}")
    arrays = {}
    off = 12 + hlen
    for fd in header["fields"]:
        dt = np.dtype(fd["dtype"]).newbyteorder("<")
        expected = int(np.prod(fd["shape"])) * dt.itemsize
        if fd["nbytes"] != expected or off + expected > len(raw):
            raise CorruptFile(f"{path}: payload for {fd['name']} truncated or inconsistent")
        arrays[fd["name"]] = np.frombuffer(raw, dtype=dt, count=int(np.prod(fd["shape"])),
                                           offset=off).reshape(fd["shape"]).astype(dt.newbyteorder("="))
        off += expected
    if off != len(raw):
        raise CorruptFile(f"{path}: {len(raw) - off} trailing bytes")
    if "image" not in arrays:
        raise MissingField(f"{path}: no image payload")
    if header["has_mask"] and "mask" not in arrays:
        raise MissingField(f"{path}: mask declared but missing")
    if header["has_weak"] and "weak" not in arrays:
        raise MissingField(f"{path}: weak label declared but missing")
    factor_masks = {}
    for name in header["factor_names"]:
        if "factor:" + name not in arrays:
            raise MissingField(f"{path}: factor mask {name!r} missing")
        factor_masks[name] = arrays["factor:" + name].astype(bool)
    return Sample(arrays["image"], header["domain_id"], arrays.get("mask"), arrays.get("weak"),
                  factor_masks, header.get("factor_params", {}))


# -- dataset directories -----------------------------------------------------

def write_dataset(root, domains, specs, seed, extra=None):
    """Write ``<root>/<domain>/<index>.vmfc`` files and ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for d, samples in domains.items():
        (root / d).mkdir(exist_ok=True)
        h = hashlib.sha256()
        for i, s in enumerate(samples):
            p = root / d / f"{i}.vmfc"
            save_sample(s, p)
            h.update(p.read_bytes())
        hashes[d] = h.hexdigest()
    manifest = {
        "seed": int(seed),
        "counts": {d: len(v) for d, v in domains.items()},
        "specs": [s.to_dict() for s in specs],
        "hashes": hashes,
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def dataset_hashes(root):
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    hashes = {}
    for d, n in manifest["counts"].items():
        h = hashlib.sha256()
        for i in range(n):
            h.update((root / d / f"{i}.vmfc").read_bytes())
        hashes[d] = h.hexdigest()
    return hashes


def load_dataset(root):
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    domains = {d: [load_sample(root / d / f"{i}.vmfc") for i in range(n)]
               for d, n in manifest["counts"].items()}
    return domains, manifest
