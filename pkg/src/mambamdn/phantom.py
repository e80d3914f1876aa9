"""Synthetic paired-contrast ellipse phantoms and on-disk datasets.

A phantom is a label map built from overlapping ellipses.  Two contrasts are
rendered from the same label map through separately drawn intensity lookups,
so both images share anatomy but differ in tissue brightness.  An optional
"leak" ellipse is painted into the reference only, which gives an
unambiguous footprint for measuring how much reference-specific structure a
reconstruction lets through.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ConfigError
from .kspace import ComplexImage, read_complex, write_complex

__all__ = [
    "Ellipse",
    "Phantom",
    "DatasetManifest",
    "generate_phantom",
    "render",
    "generate_pairs",
    "build_dataset",
    "read_manifest",
    "load_split",
    "split_counts",
]

# per-label intensity centres; label 0 is background and always 0
_REFERENCE_PROFILE = np.array([0.0, 0.55, 0.65, 0.80, 0.85, 0.50])
_TARGET_PROFILE = np.array([0.0, 0.45, 0.45, 0.60, 0.95, 0.85])
_JITTER = 0.08
_LEAK_INTENSITY = (0.9, 1.0)


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    theta: float

    def footprint(self, h: int, w: int) -> np.ndarray:
        yy, xx = np.mgrid[0:h, 0:w]
        y = (yy + 0.5) / h * 2 - 1 - self.cy
        x = (xx + 0.5) / w * 2 - 1 - self.cx
        c, s = np.cos(self.theta), np.sin(self.theta)
        u = c * x + s * y
        v = -s * x + c * y
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0


@dataclass
class Phantom:
    labels: np.ndarray
    lookup: dict[str, np.ndarray]
    exclusive: list[tuple[Ellipse, str, float]] = field(default_factory=list)
    phase: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def exclusive_footprint(self, contrast: str = "reference") -> np.ndarray:
        """Pixels painted only into ``contrast`` (clipped to the head)."""
        h, w = self.shape
        mask = np.zeros((h, w), dtype=bool)
        for ellipse, owner, _ in self.exclusive:
            if owner == contrast:
                mask |= ellipse.footprint(h, w)
        return mask & (self.labels > 0)


def _random_ellipse(rng: np.random.Generator, scale: float) -> Ellipse:
    return Ellipse(
        cy=rng.uniform(-0.45, 0.45) * scale,
        cx=rng.uniform(-0.45, 0.45) * scale,
        ry=rng.uniform(0.08, 0.35) * scale,
        rx=rng.uniform(0.08, 0.35) * scale,
        theta=rng.uniform(0, np.pi),
    )


def generate_phantom(
    h: int,
    w: int,
    n_ellipses: int = 6,
    seed: int = 0,
    leak_structure: bool = False,
    phase: bool = False,
) -> Phantom:
    """Draw a random head-like phantom.

    An outer ellipse with label 1 frames the anatomy; ``n_ellipses`` inner
    ellipses take labels 2..5 and overwrite each other in draw order.
    """
    if h < 16 or w < 16:
        raise ConfigError(f"phantom extents must be at least 16, got {h}x{w}")
    if n_ellipses < 1:
        raise ConfigError("n_ellipses must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.zeros((h, w), dtype=np.int8)
    head = Ellipse(0.0, 0.0, rng.uniform(0.8, 0.92), rng.uniform(0.7, 0.88), rng.uniform(-0.2, 0.2))
    labels[head.footprint(h, w)] = 1
    inside = labels > 0
    for _ in range(n_ellipses):
        e = _random_ellipse(rng, 1.0)
        labels[e.footprint(h, w) & inside] = rng.integers(2, len(_TARGET_PROFILE))

    lookup = {}
    for name, profile in (("reference", _REFERENCE_PROFILE), ("target", _TARGET_PROFILE)):
        values = np.clip(profile + rng.uniform(-_JITTER, _JITTER, profile.shape), 0.0, 1.0)
        values[0] = 0.0
        lookup[name] = values

    exclusive = []
    if leak_structure:
        e = Ellipse(
            cy=rng.uniform(-0.35, 0.35),
            cx=rng.uniform(-0.35, 0.35),
            ry=rng.uniform(0.1, 0.18),
            rx=rng.uniform(0.1, 0.18),
            theta=rng.uniform(0, np.pi),
        )
        exclusive.append((e, "reference", float(rng.uniform(*_LEAK_INTENSITY))))

    phase_map = None
    if phase:
        yy, xx = np.mgrid[0:h, 0:w]
        a, b, c = rng.uniform(-np.pi, np.pi, 3)
        phase_map = a * (yy / h - 0.5) + b * (xx / w - 0.5) + c
    return Phantom(labels, lookup, exclusive, phase_map)


def render(ph: Phantom, contrast: str, with_phase: bool | None = None) -> ComplexImage:
    """Render one contrast; the imaginary plane is zero unless a phase field is applied."""
    if contrast not in ph.lookup:
        raise ConfigError(f"unknown contrast {contrast!r}")
    img = ph.lookup[contrast][ph.labels]
    h, w = ph.shape
    for ellipse, owner, intensity in ph.exclusive:
        if owner == contrast:
            img = np.where(ellipse.footprint(h, w) & (ph.labels > 0), intensity, img)
    if with_phase is None:
        with_phase = ph.phase is not None
    if with_phase and ph.phase is not None:
        return ComplexImage(img * np.exp(1j * ph.phase))
    return ComplexImage.from_planes(img)


def _sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_pairs(
    n: int, h: int, w: int, seed: int, leak_structure: bool = False, n_ellipses: int = 6
) -> list[tuple[ComplexImage, ComplexImage, Phantom]]:
    """In-memory ``(target, reference, phantom)`` triples, deterministic per seed."""
    out = []
    for i in range(n):
        ph = generate_phantom(h, w, n_ellipses, _sample_seed(seed, i), leak_structure)
        out.append((render(ph, "target"), render(ph, "reference"), ph))
    return out


def split_counts(n: int, ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    n_train = int(round(n * ratios[0]))
    n_valid = int(round(n * ratios[1]))
    return n_train, n_valid, n - n_train - n_valid


@dataclass
class DatasetManifest:
    seed: int
    ratios: tuple[float, float, float]
    entries: list[tuple[str, str, str]]
    root: Path = Path(".")

    @property
    def n(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> list[tuple[str, str]]:
        return [(t, r) for s, t, r in self.entries if s == name]

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in ("train", "valid", "test")}


def build_dataset(
    n: int,
    h: int,
    w: int,
    seed: int,
    out_dir: str | Path,
    leak_structure: bool = False,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
) -> DatasetManifest:
    """Write ``n`` target/reference pairs as CPLX files plus ``manifest.tsv``."""
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = split_counts(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    split_of = np.empty(n, dtype=object)
    split_of[order[: counts[0]]] = "train"
    split_of[order[counts[0] : counts[0] + counts[1]]] = "valid"
    split_of[order[counts[0] + counts[1] :]] = "test"

    entries = []
    for i, (tar, ref, _) in enumerate(generate_pairs(n, h, w, seed, leak_structure)):
        tname, rname = f"sample_{i:04d}_target.cplx", f"sample_{i:04d}_reference.cplx"
        write_complex(tar.data, out / tname)
        write_complex(ref.data, out / rname)
        entries.append((str(split_of[i]), tname, rname))
    lines = [f"# seed={seed} ratios={ratios[0]}:{ratios[1]}:{ratios[2]}"]
    lines += ["\t".join(e) for e in entries]
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n")
    return DatasetManifest(seed, ratios, entries, out)


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    seed, ratios, entries = 0, (0.7, 0.1, 0.2), []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key == "seed":
                    seed = int(val)
                elif key == "ratios":
                    ratios = tuple(float(v) for v in val.split(":"))
            continue
        if line.strip():
            split, tar, ref = line.split("\t")
            entries.append((split, tar, ref))
    return DatasetManifest(seed, ratios, entries, path.parent)


def load_split(manifest: DatasetManifest, split: str) -> list[tuple[ComplexImage, ComplexImage]]:
    return [
        (ComplexImage(read_complex(manifest.root / t)), ComplexImage(read_complex(manifest.root / r)))
        for t, r in manifest.split(split)
    ]


def file_checksum(paths) -> str:
    digest = hashlib.sha256()
    for p in sorted(Path(q) for q in paths):
        digest.update(p.read_bytes())
    return digest.hexdigest()
