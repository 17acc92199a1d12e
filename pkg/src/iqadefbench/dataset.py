"""Source-image ingestion, cluster-stratified sampling and adversarial dataset generation."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.cluster import KMeans

from .attacks import StrengthPresets, run_attack, train_uap
from .core import Image, MetricModel, load_png, save_png
from .errors import BenchmarkError, ConfigurationError
from .measures import colorfulness, spatial_information

log = logging.getLogger(__name__)

MANIFEST_VERSION = "iqadefbench-manifest v1"
GENERATOR_VERSION = "0.1.0"
IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"}


@dataclass
class DatasetRecord:
    image_id: str
    path: str
    mos: float
    si: float
    cf: float
    cluster: int = -1

    def load(self) -> Image:
        return load_png(self.path)


def read_mos_table(path) -> dict:
    """Delimited ``image_id,mos`` table (header row optional)."""
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            try:
                out[row[0].strip()] = float(row[1])
            except (IndexError, ValueError):
                if row[0].strip().lower() in ("image_id", "id", "image"):
                    continue
                raise ConfigurationError(f"bad MOS row {row!r}", fields=["mos_table"])
    return out


def ingest(directory, mos_table, exceptions: Optional[list] = None) -> list:
    """Records for every decodable image that has a MOS entry.

    Images without MOS are skipped and their ids appended to ``exceptions``.
    """
    mos = read_mos_table(mos_table) if not isinstance(mos_table, dict) else mos_table
    records = []
    for p in sorted(Path(directory).iterdir()) if Path(directory).exists() else []:
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        image_id = p.stem
        if image_id not in mos:
            if exceptions is not None:
                exceptions.append({"image_id": image_id, "reason": "missing MOS"})
            log.warning("no MOS for %s; excluded", image_id)
            continue
        img = load_png(p)
        records.append(DatasetRecord(image_id, str(p), float(mos[image_id]),
                                     spatial_information(img), colorfulness(img)))
    return records


def feature_matrix(records: Sequence[DatasetRecord]) -> np.ndarray:
    return np.array([[r.si, r.cf, r.mos] for r in records], dtype=np.float64)


def zscore(features: np.ndarray) -> np.ndarray:
    sd = features.std(axis=0)
    sd[sd == 0] = 1.0
    return (features - features.mean(axis=0)) / sd


def cluster_records(records: Sequence[DatasetRecord], k: int = 10, seed: int = 0):
    """K-Means (k-means++, 100 iterations max) on z-scored (SI, CF, MOS).

    Returns (labels, centers) with centers in original feature units.
    """
    if len(records) < k:
        raise ConfigurationError(f"need at least k={k} records, got {len(records)}", fields=["k"])
    feats = feature_matrix(records)
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100, random_state=seed)
    labels = km.fit_predict(zscore(feats))
    centers = np.array([feats[labels == c].mean(axis=0) for c in range(k)])
    return labels, centers


def cluster_and_sample(records: Sequence[DatasetRecord], k: int = 10, per_cluster: int = 100,
                       seed: int = 0) -> list:
    if per_cluster < 1:
        raise ConfigurationError("per_cluster must be >= 1", fields=["per_cluster"])
    labels, _ = cluster_records(records, k, seed)
    rng = np.random.default_rng(seed)
    selected = []
    for c in range(k):
        idx = np.flatnonzero(labels == c)
        take = idx if idx.size <= per_cluster else np.sort(rng.choice(idx, size=per_cluster, replace=False))
        for i in take:
            r = records[int(i)]
            selected.append(DatasetRecord(r.image_id, r.path, r.mos, r.si, r.cf, int(c)))
    return selected


def write_dataset_records(path, records: Sequence[DatasetRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([asdict(r) for r in records], indent=1) + "\n")
    return path


def read_dataset_records(path) -> list:
    return [DatasetRecord(**d) for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------------------
# adversarial dataset

def entry_seed(base_seed: int, *parts) -> int:
    """Stable 32-bit seed from the base seed and an entry's identity."""
    h = hashlib.sha256(("|".join(map(str, (base_seed,) + parts))).encode()).digest()
    return int.from_bytes(h[:4], "little")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class ManifestEntry:
    image_id: str
    attack_id: str
    metric_id: str
    strength: str
    seed: int
    path: str
    score_before: float
    score_after: float
    checksum: str = ""
    status: str = "ok"
    error: str = ""

    @property
    def key(self) -> tuple:
        return (self.image_id, self.attack_id, self.metric_id, self.strength)


@dataclass
class AdversarialManifest:
    entries: list = field(default_factory=list)
    generator_version: str = GENERATOR_VERSION
    schema: str = MANIFEST_VERSION

    def to_json(self) -> str:
        entries = sorted(self.entries, key=lambda e: e.key)
        return json.dumps({"schema": self.schema, "generator_version": self.generator_version,
                           "entries": [asdict(e) for e in entries]}, indent=1, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path, verify: bool = True) -> "AdversarialManifest":
        d = json.loads(Path(path).read_text())
        if d.get("schema") != MANIFEST_VERSION:
            raise BenchmarkError(f"unsupported manifest schema {d.get('schema')!r}")
        m = cls([ManifestEntry(**e) for e in d["entries"]], d["generator_version"], d["schema"])
        if verify:
            for e in m.entries:
                if e.status == "ok" and not entry_valid(e, Path(path).parent):
                    raise BenchmarkError(f"manifest entry {e.key} failed checksum verification")
        return m

    def ok_entries(self) -> list:
        return [e for e in self.entries if e.status == "ok"]


def _resolve(root: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else root / q


def entry_valid(e: ManifestEntry, root: Path) -> bool:
    p = _resolve(root, e.path)
    return p.exists() and bool(e.checksum) and sha256_file(p) == e.checksum


def generate_adversarial_dataset(selected: Sequence[DatasetRecord], metrics: Sequence[MetricModel],
                                 presets: Sequence[StrengthPresets], out_dir,
                                 strengths: Sequence[str] = ("weak", "medium", "strong"),
                                 seed: int = 0, uap_images: Optional[Sequence[Image]] = None,
                                 uap_epochs: int = 20) -> AdversarialManifest:
    """Run every image x attack x metric x strength and store PNGs plus ``manifest.json``.

    Entries already present with a matching checksum are reused. Capability
    mismatches (white-box attack on a score-only metric) are recorded as failed.
    """
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    previous = {}
    if manifest_path.exists():
        for e in AdversarialManifest.load(manifest_path, verify=False).entries:
            previous[e.key] = e
    images = {r.image_id: r.load() for r in selected}
    uap_cache = {}
    entries = []
    for r in sorted(selected, key=lambda r: r.image_id):
        for preset in presets:
            for m in metrics:
                for strength in strengths:
                    key = (r.image_id, preset.attack, m.identifier, strength)
                    old = previous.get(key)
                    if old is not None and old.status == "ok" and entry_valid(old, out_dir):
                        entries.append(old)
                        continue
                    s = entry_seed(seed, *key)
                    spec = preset.get(strength)
                    spec = type(spec)(**{**asdict(spec), "seed": s})
                    rel = f"{preset.attack}/{m.identifier}/{strength}/{r.image_id}.png"
                    try:
                        pert = None
                        if spec.name == "uap":
                            ck = (m.identifier, strength)
                            if ck not in uap_cache:
                                train = list(uap_images) if uap_images else list(images.values())
                                uap_cache[ck] = train_uap(m, train, spec.varied_param_value, uap_epochs,
                                                          entry_seed(seed, "uap", *ck))
                            pert = uap_cache[ck]
                        res = run_attack(spec, m, images[r.image_id], pert)
                    except BenchmarkError as exc:
                        log.warning("entry %s failed: %s", key, exc)
                        entries.append(ManifestEntry(*key[:2], m.identifier, strength, s, rel,
                                                     float("nan"), float("nan"), "", "failed", str(exc)))
                        continue
                    path = save_png(res.adversarial, out_dir / rel)
                    stored = load_png(path)
                    entries.append(ManifestEntry(r.image_id, preset.attack, m.identifier, strength, s, rel,
                                                 float(res.score_before), float(m.score(stored)),
                                                 sha256_file(path)))
    manifest = AdversarialManifest(entries)
    manifest.save(manifest_path)
    return manifest


# ---------------------------------------------------------------------------
# synthetic corpus

def synthetic_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth colour field plus a few rectangles and stripes."""
    import torch
    import torch.nn.functional as F

    coarse = torch.as_tensor(rng.random((1, 3, 4, 4)))
    img = F.interpolate(coarse, size=(size, size), mode="bicubic", align_corners=False)[0]
    img = img.permute(1, 2, 0).numpy().copy()
    for _ in range(int(rng.integers(2, 6))):
        r0, c0 = rng.integers(0, size - 4, size=2)
        h, w = rng.integers(3, size // 2, size=2)
        img[r0:r0 + h, c0:c0 + w] = rng.random(3)
    period = int(rng.integers(3, 9))
    stripes = (np.arange(size) // period) % 2
    img += 0.15 * rng.random() * (stripes[None, :, None] - 0.5)
    return np.clip(img, 0.0, 1.0)


def make_synthetic_corpus(directory, n: int = 20, size: int = 64, seed: int = 0) -> Path:
    """Write ``n`` PNGs with a ``mos.csv``; MOS falls with the applied blur and noise.

    Stands in for a subjective dataset at desk scale; the MOS here is a
    deterministic function of the degradation, not human opinion.
    """
    from scipy.ndimage import gaussian_filter

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        img = synthetic_image(rng, size)
        blur = float(rng.uniform(0.0, 2.0))
        noise = float(rng.uniform(0.0, 0.12))
        if blur > 0.05:
            img = gaussian_filter(img, sigma=(blur, blur, 0))
        img = np.clip(img + noise * rng.standard_normal(img.shape), 0.0, 1.0)
        mos = 5.0 - 1.2 * blur - 18.0 * noise + 0.1 * rng.standard_normal()
        image_id = f"img{i:04d}"
        save_png(Image(img), directory / f"{image_id}.png")
        rows.append((image_id, round(float(np.clip(mos, 1.0, 5.0)), 4)))
    with (directory / "mos.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "mos"])
        w.writerows(rows)
    return directory / "mos.csv"
