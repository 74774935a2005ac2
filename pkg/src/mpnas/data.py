"""Synthetic multi-domain image families and the on-disk dataset layout.

Every domain draws examples from class prototypes: smooth random patterns,
jittered by a small circular shift and amplitude change, plus pixel noise,
then mapped into [0, 1]. Two domains with correlation ``c > 0`` share a
``c`` fraction of class prototypes (same label slots); ``c < 0`` turns a
``|c|`` fraction of the partner's prototypes into label-independent
distractors; ``c == 0`` shares nothing.

Directory layout::

    <root>/<domain>/manifest.yaml
    <root>/<domain>/<split>/<label>/<index>.f32   raw little-endian float32, C*H*W values
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import yaml
from scipy.ndimage import gaussian_filter

SPLITS = ("train", "validation", "test")


class DataError(ValueError):
    pass


@dataclass
class DomainDataset:
    name: str
    class_count: int
    resolution: int
    channels: int
    splits: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.splits:
            raise DataError(f"{self.name}: unknown split {name!r}")
        return self.splits[name]

    def size(self, name: str) -> int:
        return len(self.split(name)[1])


@dataclass(frozen=True)
class DomainFamilySpec:
    class_counts: tuple[int, ...] = (4, 10, 4, 6)
    # "i-j" -> correlation coefficient in [-1, 1]; unlisted pairs are 0
    correlations: Mapping[str, float] = field(default_factory=lambda: {"0-1": 0.9, "0-3": 0.5})
    resolution: int = 16
    channels: int = 1
    noise: float | tuple[float, ...] = 1.5
    max_shift: int = 1
    smoothness: float = 1.5
    distractor_gain: float = 1.0
    # per-domain anisotropic smoothing: log-sigma offsets drawn from U(-spread, spread)
    style_spread: float = 0.6
    split_sizes: Mapping[str, int] = field(
        default_factory=lambda: {"train": 384, "validation": 128, "test": 128})
    names: tuple[str, ...] | None = None
    seed: int = 0

    @property
    def domain_count(self) -> int:
        return len(self.class_counts)

    def domain_names(self) -> list[str]:
        return list(self.names) if self.names else [f"d{i}" for i in range(self.domain_count)]

    def noise_of(self, i: int) -> float:
        if isinstance(self.noise, (int, float)):
            return float(self.noise)
        return float(self.noise[i])

    def pair_correlations(self) -> dict[tuple[int, int], float]:
        out = {}
        for key, c in self.correlations.items():
            try:
                a, b = (int(v) for v in str(key).split("-"))
            except ValueError:
                raise DataError(f"correlations: bad pair key {key!r}, expected 'i-j'") from None
            out[(min(a, b), max(a, b))] = float(c)
        return out

    def validate(self) -> "DomainFamilySpec":
        if not self.class_counts:
            raise DataError("class_counts: at least one domain is required")
        if any(k < 2 for k in self.class_counts):
            raise DataError("class_counts: every domain needs at least 2 classes")
        n = self.domain_count
        for (a, b), c in self.pair_correlations().items():
            if not -1.0 <= c <= 1.0:
                raise DataError(f"correlations[{a}-{b}]: {c} is outside [-1, 1]")
            if a == b or b >= n:
                raise DataError(f"correlations[{a}-{b}]: invalid domain pair")
        if self.style_spread < 0:
            raise DataError("style_spread must be non-negative")
        if self.resolution < 4 or self.channels < 1:
            raise DataError("resolution must be >= 4 and channels >= 1")
        if not isinstance(self.noise, (int, float)) and len(self.noise) != n:
            raise DataError("noise: one value per domain or a single scalar")
        for s, v in self.split_sizes.items():
            if s not in SPLITS or v < 0:
                raise DataError(f"split_sizes: invalid entry {s}={v}")
        if self.names is not None and len(self.names) != n:
            raise DataError("names: one name per domain")
        return self

    @classmethod
    def from_dict(cls, d: Mapping) -> "DomainFamilySpec":
        d = dict(d)
        for key in ("class_counts", "names"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if isinstance(d.get("noise"), list):
            d["noise"] = tuple(float(v) for v in d["noise"])
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise DataError(f"unknown data keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        noise = self.noise if isinstance(self.noise, (int, float)) else list(self.noise)
        return {
            "class_counts": list(self.class_counts),
            "correlations": dict(self.correlations),
            "resolution": self.resolution,
            "channels": self.channels,
            "noise": noise,
            "max_shift": self.max_shift,
            "smoothness": self.smoothness,
            "distractor_gain": self.distractor_gain,
            "style_spread": self.style_spread,
            "split_sizes": dict(self.split_sizes),
            "names": list(self.names) if self.names else None,
            "seed": self.seed,
        }


def _rng(seed: int, *parts) -> np.random.Generator:
    digest = hashlib.sha256("/".join(str(p) for p in (seed, *parts)).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _own_style(spec: DomainFamilySpec, j: int) -> np.ndarray:
    """Log row/column smoothing widths a domain would have on its own."""
    u = _rng(spec.seed, "style", j).uniform(-1.0, 1.0, size=2)
    return np.log(spec.smoothness) + spec.style_spread * u


def _pattern(rng: np.random.Generator, spec: DomainFamilySpec, style: tuple[float, float]) -> np.ndarray:
    shape = (spec.channels, spec.resolution, spec.resolution)
    raw = rng.standard_normal(shape)
    smooth = gaussian_filter(raw, sigma=(0, *style), mode="wrap")
    smooth -= smooth.mean()
    return smooth / (smooth.std() + 1e-12)


def generator_patterns(spec: DomainFamilySpec) -> list[dict]:
    """Per-domain prototypes, distractors and smoothing style, with provenance ids.

    A positively correlated domain also moves its own prototypes' style a
    ``c`` fraction of the way (in log space) towards its partner's.
    """
    spec.validate()
    corr = spec.pair_correlations()
    domains: list[dict] = []
    for j, k_j in enumerate(spec.class_counts):
        rng = _rng(spec.seed, "patterns", j)
        log_style = _own_style(spec, j)
        donors = [(abs(corr.get((i, j), 0.0)), -i, i) for i in range(j) if corr.get((i, j), 0.0) != 0.0]
        donor, c = None, 0.0
        if donors:
            _, _, i = max(donors)
            donor, c = domains[i], corr[(i, j)]
            if c > 0:
                log_style = c * donor["log_style"] + (1 - c) * log_style
        style = tuple(float(v) for v in np.exp(log_style))
        protos = [_pattern(rng, spec, style) for _ in range(k_j)]
        ids = [f"{j}:{k}" for k in range(k_j)]
        distractors: list[np.ndarray] = []
        if donor is not None:
            n_shared = int(round(abs(c) * min(k_j, len(donor["prototypes"]))))
            if c > 0:
                for k in range(n_shared):
                    protos[k] = donor["prototypes"][k]
                    ids[k] = donor["ids"][k]
            else:
                distractors = donor["prototypes"][:n_shared]
        domains.append({"prototypes": protos, "ids": ids, "distractors": distractors,
                        "log_style": log_style, "style": style})
    return domains


def _draw(rng, protos, distractors, n, spec, noise) -> tuple[np.ndarray, np.ndarray]:
    k = len(protos)
    labels = np.arange(n) % k
    rng.shuffle(labels)
    x = np.empty((n, spec.channels, spec.resolution, spec.resolution), dtype=np.float64)
    s = spec.max_shift
    for t, y in enumerate(labels):
        img = protos[y] * rng.uniform(0.8, 1.2)
        if s:
            img = np.roll(img, tuple(rng.integers(-s, s + 1, size=2)), axis=(1, 2))
        if distractors:
            d = distractors[int(rng.integers(len(distractors)))]
            img = img + spec.distractor_gain * rng.uniform(0.5, 1.5) * d
        x[t] = img + noise * rng.standard_normal(img.shape)
    x = np.clip(0.5 + 0.2 * x, 0.0, 1.0).astype(np.float32)
    return x, labels.astype(np.int64)


def generate(spec: DomainFamilySpec) -> list[DomainDataset]:
    spec.validate()
    gens = generator_patterns(spec)
    out = []
    for j, (name, gen) in enumerate(zip(spec.domain_names(), gens)):
        ds = DomainDataset(name, spec.class_counts[j], spec.resolution, spec.channels)
        for split in SPLITS:
            n = int(spec.split_sizes.get(split, 0))
            rng = _rng(spec.seed, "samples", j, split)
            ds.splits[split] = _draw(rng, gen["prototypes"], gen["distractors"], n, spec, spec.noise_of(j))
        out.append(ds)
    return out


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_directory(datasets: list[DomainDataset], root: str | Path) -> None:
    root = Path(root)
    for ds in datasets:
        base = root / ds.name
        base.mkdir(parents=True, exist_ok=True)
        manifest = {
            "name": ds.name,
            "resolution": ds.resolution,
            "channels": ds.channels,
            "class_count": ds.class_count,
            "splits": {s: int(len(y)) for s, (x, y) in ds.splits.items()},
        }
        (base / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))
        for split, (x, y) in ds.splits.items():
            (base / split).mkdir(exist_ok=True)
            for label in range(ds.class_count):
                (base / split / str(label)).mkdir(exist_ok=True)
            for i, (img, label) in enumerate(zip(x, y)):
                (base / split / str(int(label)) / f"{i:06d}.f32").write_bytes(
                    np.ascontiguousarray(img, dtype="<f4").tobytes())


def load_directory(path: str | Path, seed: int | None = None) -> DomainDataset:
    """Load one domain directory; ``seed`` shuffles each split, ``None`` keeps file order."""
    path = Path(path)
    mpath = path / "manifest.yaml"
    if not mpath.exists():
        raise DataError(f"{path}: missing manifest.yaml")
    manifest = yaml.safe_load(mpath.read_text()) or {}
    try:
        res, ch, k = int(manifest["resolution"]), int(manifest["channels"]), int(manifest["class_count"])
    except KeyError as exc:
        raise DataError(f"{mpath}: missing key {exc}") from None
    lo, hi = manifest.get("value_range", (0.0, 1.0))
    splits = manifest.get("splits", {s: None for s in SPLITS})
    expected = ch * res * res
    ds = DomainDataset(manifest.get("name", path.name), k, res, ch)
    for split in splits:
        sdir = path / split
        items = []
        if sdir.exists():
            for ldir in sorted(sdir.iterdir(), key=lambda p: p.name):
                if not ldir.is_dir():
                    continue
                if not ldir.name.isdigit() or int(ldir.name) >= k:
                    raise DataError(f"{ldir}: unknown label directory")
                for f in sorted(ldir.glob("*.f32")):
                    items.append((f.name, int(ldir.name), f))
        # file order is the global index order written by write_directory
        items.sort(key=lambda t: t[0])
        x = np.empty((len(items), ch, res, res), dtype=np.float32)
        y = np.empty(len(items), dtype=np.int64)
        for i, (_, label, f) in enumerate(items):
            arr = np.frombuffer(f.read_bytes(), dtype="<f4")
            if arr.size != expected:
                raise DataError(f"{f}: has {arr.size} values, manifest implies {expected}")
            x[i] = arr.reshape(ch, res, res)
            y[i] = label
        if (lo, hi) != (0.0, 1.0):
            x = ((x - lo) / (hi - lo)).astype(np.float32)
        if seed is not None:
            perm = _rng(seed, "load", ds.name, split).permutation(len(y))
            x, y = x[perm], y[perm]
        ds.splits[split] = (x, y)
    return ds


def load_family(root: str | Path, seed: int | None = None) -> list[DomainDataset]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.yaml").exists())
    if not dirs:
        raise DataError(f"{root}: no domain directories with manifests")
    return [load_directory(d, seed) for d in dirs]


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def batches(dataset: DomainDataset, split: str, batch_size: int,
            rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One shuffled epoch; the trailing partial batch is dropped."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    x, y = dataset.split(split)
    perm = rng.permutation(len(y))
    for start in range(0, len(y) - batch_size + 1, batch_size):
        idx = perm[start:start + batch_size]
        yield x[idx], y[idx]


class BatchStream:
    """Endless batches from one split, reshuffling at every epoch boundary."""

    def __init__(self, dataset: DomainDataset, split: str, batch_size: int, rng: np.random.Generator):
        if dataset.size(split) < batch_size:
            raise DataError(f"{dataset.name}/{split}: {dataset.size(split)} examples < batch size {batch_size}")
        self.dataset, self.split, self.batch_size, self.rng = dataset, split, batch_size, rng
        self.epochs = 0
        self._it = batches(dataset, split, batch_size, rng)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        try:
            return next(self._it)
        except StopIteration:
            self.epochs += 1
            self._it = batches(self.dataset, self.split, self.batch_size, self.rng)
            return next(self._it)
