"""Domain types and bit-exact file formats.

Datasets live in a directory of conventionally named files:

* ``circles.jsonl``, ``pois.jsonl``, ``labels.jsonl`` -- UTF-8 JSON lines,
  one record per line, field names matching the dataclasses below.
* ``images.cgf``, ``circle_texts.cgf``, ``poi_reviews.cgf``,
  ``poi_categories.cgf`` -- binary feature matrices (magic ``CGF1``,
  uint32-LE rows, uint32-LE dim, then rows*dim float32-LE, row-major).
* ``categories.json`` -- POI category vocabulary, one name per row of the
  category feature matrix.
* ``streets.jsonl`` -- optional circle -> street assignment.
* ``latents.json`` -- optional generator sidecar with the planted factors.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, IntegrityError

MAGIC_FEATURES = b"CGF1"
MAGIC_MODEL = b"CGM1"

FEATURE_KINDS = ("image", "circle_text", "poi_review", "poi_category")
DISEASES = ("mci", "hypertension", "diabetes", "mdd")

# The ten major POI categories used for real runs; synthetic datasets may
# carry their own vocabulary in categories.json.
DEFAULT_CATEGORIES = (
    "food",
    "shopping",
    "sports and fitness",
    "tourist attractions",
    "leisure and entertainment",
    "life services",
    "education and training",
    "culture and media",
    "transportation facilities",
    "stores",
)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class LivingCircle:
    """One residential area and the feature rows attached to it."""

    id: str
    lat: float
    lon: float
    households: int
    elderly_pop: int
    image_row_ids: list
    text_row_id: int
    poi_ids: list

    def validate(self):
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise IntegrityError(f"circle '{self.id}': coordinates out of range")
        if len(self.image_row_ids) < 1:
            raise IntegrityError(f"circle '{self.id}': needs at least one image row")
        if self.elderly_pop < 0:
            raise IntegrityError(f"circle '{self.id}': negative elderly_pop")


@dataclass
class Poi:
    """A categorized venue with rated check-in reviews."""

    id: str
    circle_id: str
    category: str
    review_row_ids: list
    rating_labels: list

    def validate(self, vocabulary):
        if self.category not in vocabulary:
            raise IntegrityError(f"poi '{self.id}': unknown category '{self.category}'")
        if len(self.rating_labels) != len(self.review_row_ids):
            raise IntegrityError(f"poi '{self.id}': ratings and review rows differ in length")
        for r in self.rating_labels:
            if r not in (1, 2, 3, 4, 5):
                raise IntegrityError(f"poi '{self.id}': rating {r} outside 1..5")

    def drop_zero_ratings(self) -> "Poi":
        """Remove rating-0 reviews (excluded at ingest)."""
        kept = [(row, r) for row, r in zip(self.review_row_ids, self.rating_labels) if r != 0]
        return replace(self,
                       review_row_ids=[row for row, _ in kept],
                       rating_labels=[r for _, r in kept])


@dataclass
class RawFeatureMatrix:
    """Row-major float32 matrix of backbone-emitted feature vectors."""

    rows: int
    dim: int
    data: np.ndarray  # (rows, dim) float32
    kind: str

    def validate(self):
        if self.kind not in FEATURE_KINDS:
            raise ArgumentError(f"unknown feature kind '{self.kind}'")
        if self.data.shape != (self.rows, self.dim):
            raise IntegrityError(f"{self.kind} matrix shape {self.data.shape} "
                                 f"does not match header ({self.rows}, {self.dim})")
        if not np.all(np.isfinite(self.data)):
            raise IntegrityError(f"{self.kind} matrix contains non-finite values")


@dataclass
class DiseaseLabels:
    """Real-valued counts of affected elderly in one circle."""

    circle_id: str
    mci: float
    hypertension: float
    diabetes: float
    mdd: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mci, self.hypertension, self.diabetes, self.mdd])


@dataclass
class Dataset:
    """A fully cross-referenced dataset in memory."""

    circles: list
    pois: list
    features: dict  # kind -> RawFeatureMatrix
    labels: dict    # circle_id -> DiseaseLabels
    vocabulary: list
    streets: dict = field(default_factory=dict)   # circle_id -> street_id

    @property
    def n(self) -> int:
        return len(self.circles)

    def poi_by_id(self) -> dict:
        return {p.id: p for p in self.pois}

    def circle_index(self) -> dict:
        return {c.id: i for i, c in enumerate(self.circles)}


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """All tunables, with defaults pinned to the reference settings."""

    tau_visual: float = 0.05
    tau_text: float = 1.0
    tau_poi: float = 0.005
    margin: float = 1.0
    alpha: float = 0.2
    eta: float = 0.5
    lam: float = 0.1
    gcn_layers: int = 3
    top_k: int = 20
    dropout: float = 0.3
    aug_dropout: float = 0.1
    embed_dim: int = 128
    batch_size: int = 32
    epochs: int = 60
    lr_visual: float = 5e-3
    lr_text: float = 1e-5
    lr_poi: float = 1e-5
    lr_gcn: float = 5e-4
    weight_decay: float = 3e-3
    rng_seed: int = 7
    cv_folds: int = 5
    regressor: str = "mlp"

    # dataclass attribute "lam" maps to the file key "lambda"
    _KEY_ALIASES = {"lambda": "lam"}

    def validate(self):
        if min(self.tau_visual, self.tau_text, self.tau_poi) <= 0:
            raise ArgumentError("temperatures must be positive")
        if self.margin <= 0:
            raise ArgumentError("margin must be positive")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.aug_dropout < 1.0:
            raise ArgumentError("dropout rates must lie in [0, 1)")
        if self.gcn_layers < 1 or self.top_k < 1 or self.embed_dim < 1:
            raise ArgumentError("gcn_layers, top_k and embed_dim must be >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.cv_folds < 2:
            raise ArgumentError("bad batch_size/epochs/cv_folds")
        if self.regressor not in ("mlp", "ridge"):
            raise ArgumentError(f"unknown regressor '{self.regressor}'")
        return self

    def file_key(self, attr: str) -> str:
        for k, v in self._KEY_ALIASES.items():
            if v == attr:
                return k
        return attr

    def to_items(self):
        return [(self.file_key(f.name), getattr(self, f.name))
                for f in fields(self) if not f.name.startswith("_")]

    def hash(self) -> str:
        """Stable hash over every effective parameter."""
        canon = "\n".join(f"{k}={v!r}" for k, v in sorted(self.to_items()))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save_config(cfg: RunConfig, path):
    lines = [f"{k} = {v}" for k, v in cfg.to_items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_config(path) -> RunConfig:
    """Parse a flat key-value config file; unknown keys are rejected."""
    attr_types = {f.name: f.type for f in fields(RunConfig) if not f.name.startswith("_")}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line is not 'key = value': {raw!r}", offset=lineno)
        key, val = (part.strip() for part in line.split("=", 1))
        attr = RunConfig._KEY_ALIASES.get(key, key)
        if attr not in attr_types:
            raise FormatError(f"unknown config key '{key}'", offset=lineno)
        kind = attr_types[attr]
        try:
            if kind in ("int", int):
                values[attr] = int(val)
            elif kind in ("float", float):
                values[attr] = float(val)
            else:
                values[attr] = val
        except ValueError as exc:
            raise FormatError(f"bad value for '{key}': {val!r}", offset=lineno) from exc
    return RunConfig(**values).validate()


def stage_rng(root_seed: int, stage: str) -> np.random.Generator:
    """Per-stage generator: the root seed is split by a stable stage index,
    so any stage can be rerun independently with identical randomness."""
    stages = ("gen", "encode", "spatial", "graph", "train", "eval",
              "ablate", "cluster", "similar", "pca", "streets")
    if stage not in stages:
        raise ArgumentError(f"unknown stage '{stage}'")
    return np.random.default_rng(np.random.SeedSequence([root_seed, stages.index(stage)]))


# ---------------------------------------------------------------------------
# binary matrix format
# ---------------------------------------------------------------------------

def write_matrix(path, data: np.ndarray):
    """Write a 2-D array in the CGF1 feature-matrix format."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ArgumentError("feature matrices must be 2-D")
    with open(path, "wb") as fh:
        fh.write(MAGIC_FEATURES)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_matrix(path, kind: str = "image") -> RawFeatureMatrix:
    """Read a CGF1 file, validating magic, header and payload size."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC_FEATURES:
        raise FormatError(f"{path}: bad magic bytes {blob[:4]!r}", offset=0)
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header", offset=4)
    rows, dim = struct.unpack_from("<II", blob, 4)
    expected = 12 + 4 * rows * dim
    if len(blob) != expected:
        raise FormatError(f"{path}: payload is {len(blob) - 12} bytes, "
                          f"expected {4 * rows * dim}", offset=12)
    data = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=12).reshape(rows, dim).copy()
    mat = RawFeatureMatrix(rows=rows, dim=dim, data=data, kind=kind)
    mat.validate()
    return mat


# ---------------------------------------------------------------------------
# model checkpoint format (versioned named-tensor container)
# ---------------------------------------------------------------------------

def write_checkpoint(path, arrays: dict):
    """Write named float64 arrays under the CGM1 magic."""
    with open(path, "wb") as fh:
        fh.write(MAGIC_MODEL)
        fh.write(struct.pack("<II", 1, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes(order="C"))


def read_checkpoint(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC_MODEL:
        raise FormatError(f"{path}: bad magic bytes {blob[:4]!r}", offset=0)
    version, count = struct.unpack_from("<II", blob, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos); pos += 2
        name = blob[pos:pos + nlen].decode("utf-8"); pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos); pos += 1
        shape = []
        for _ in range(ndim):
            (d,) = struct.unpack_from("<I", blob, pos); pos += 4
            shape.append(d)
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
        out[name] = arr
    return out


# ---------------------------------------------------------------------------
# JSON-lines records
# ---------------------------------------------------------------------------

def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _read_jsonl(path):
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON", offset=lineno) from exc


def _require(rec, key, path, lineno):
    if key not in rec:
        raise FormatError(f"{path}: missing field '{key}'", offset=lineno)
    return rec[key]


def write_circles(path, circles):
    _write_jsonl(path, [{
        "id": c.id, "lat": c.lat, "lon": c.lon,
        "households": c.households, "elderly_pop": c.elderly_pop,
        "image_row_ids": list(c.image_row_ids),
        "text_row_id": c.text_row_id,
        "poi_ids": list(c.poi_ids),
    } for c in circles])


def write_pois(path, pois):
    _write_jsonl(path, [{
        "id": p.id, "circle_id": p.circle_id, "category": p.category,
        "review_row_ids": list(p.review_row_ids),
        "rating_labels": list(p.rating_labels),
    } for p in pois])


def write_labels(path, labels):
    _write_jsonl(path, [{
        "circle_id": lb.circle_id, "mci": lb.mci, "hypertension": lb.hypertension,
        "diabetes": lb.diabetes, "mdd": lb.mdd,
    } for lb in labels])


def write_streets(path, assignment: dict):
    _write_jsonl(path, [{"circle_id": cid, "street_id": sid}
                        for cid, sid in assignment.items()])


def read_streets(path) -> dict:
    out = {}
    for lineno, rec in _read_jsonl(path):
        out[_require(rec, "circle_id", path, lineno)] = _require(rec, "street_id", path, lineno)
    return out


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------

DATASET_FILES = {
    "circles": "circles.jsonl",
    "pois": "pois.jsonl",
    "labels": "labels.jsonl",
    "image": "images.cgf",
    "circle_text": "circle_texts.cgf",
    "poi_review": "poi_reviews.cgf",
    "poi_category": "poi_categories.cgf",
    "categories": "categories.json",
    "streets": "streets.jsonl",
}


def load_dataset(root) -> Dataset:
    """Load and cross-validate a dataset directory.

    Rating-0 reviews are dropped here; any dangling row id or circle id
    raises :class:`IntegrityError` naming the offender.
    """
    root = Path(root)
    for key in ("circles", "pois", "labels", "image", "circle_text",
                "poi_review", "poi_category"):
        if not (root / DATASET_FILES[key]).exists():
            raise FormatError(f"missing dataset file {DATASET_FILES[key]} in {root}")

    cat_path = root / DATASET_FILES["categories"]
    vocabulary = (json.loads(cat_path.read_text(encoding="utf-8"))
                  if cat_path.exists() else list(DEFAULT_CATEGORIES))

    features = {kind: read_matrix(root / DATASET_FILES[kind], kind=kind)
                for kind in FEATURE_KINDS}
    dims = {m.dim for m in features.values()}
    if len(dims) != 1:
        raise IntegrityError(f"feature matrices disagree on dim: {sorted(dims)}")

    circles = []
    path = root / DATASET_FILES["circles"]
    for lineno, rec in _read_jsonl(path):
        c = LivingCircle(
            id=str(_require(rec, "id", path, lineno)),
            lat=float(_require(rec, "lat", path, lineno)),
            lon=float(_require(rec, "lon", path, lineno)),
            households=int(_require(rec, "households", path, lineno)),
            elderly_pop=int(_require(rec, "elderly_pop", path, lineno)),
            image_row_ids=list(_require(rec, "image_row_ids", path, lineno)),
            text_row_id=int(_require(rec, "text_row_id", path, lineno)),
            poi_ids=list(_require(rec, "poi_ids", path, lineno)),
        )
        c.validate()
        circles.append(c)

    pois = []
    path = root / DATASET_FILES["pois"]
    for lineno, rec in _read_jsonl(path):
        p = Poi(
            id=str(_require(rec, "id", path, lineno)),
            circle_id=str(_require(rec, "circle_id", path, lineno)),
            category=str(_require(rec, "category", path, lineno)),
            review_row_ids=list(_require(rec, "review_row_ids", path, lineno)),
            rating_labels=list(_require(rec, "rating_labels", path, lineno)),
        )
        p = p.drop_zero_ratings()
        p.validate(set(vocabulary))
        pois.append(p)

    labels = {}
    path = root / DATASET_FILES["labels"]
    for lineno, rec in _read_jsonl(path):
        lb = DiseaseLabels(
            circle_id=str(_require(rec, "circle_id", path, lineno)),
            mci=float(_require(rec, "mci", path, lineno)),
            hypertension=float(_require(rec, "hypertension", path, lineno)),
            diabetes=float(_require(rec, "diabetes", path, lineno)),
            mdd=float(_require(rec, "mdd", path, lineno)),
        )
        labels[lb.circle_id] = lb

    streets = {}
    if (root / DATASET_FILES["streets"]).exists():
        streets = read_streets(root / DATASET_FILES["streets"])

    ds = Dataset(circles=circles, pois=pois, features=features,
                 labels=labels, vocabulary=vocabulary, streets=streets)
    _check_integrity(ds)
    return ds


def _check_integrity(ds: Dataset):
    circle_ids = {c.id for c in ds.circles}
    poi_ids = set()
    for p in ds.pois:
        if p.id in poi_ids:
            raise IntegrityError(f"duplicate poi id '{p.id}'")
        poi_ids.add(p.id)
        if p.circle_id not in circle_ids:
            raise IntegrityError(f"poi '{p.id}' references unknown circle '{p.circle_id}'")
        for row in p.review_row_ids:
            if not 0 <= row < ds.features["poi_review"].rows:
                raise IntegrityError(f"poi '{p.id}' references dangling review row {row}")
    vocab_index = {name: i for i, name in enumerate(ds.vocabulary)}
    if ds.features["poi_category"].rows < len(ds.vocabulary):
        raise IntegrityError("category matrix has fewer rows than the vocabulary")
    for p in ds.pois:
        if vocab_index[p.category] >= ds.features["poi_category"].rows:
            raise IntegrityError(f"poi '{p.id}' category row out of range")
    for c in ds.circles:
        for row in c.image_row_ids:
            if not 0 <= row < ds.features["image"].rows:
                raise IntegrityError(f"circle '{c.id}' references dangling image row {row}")
        if not 0 <= c.text_row_id < ds.features["circle_text"].rows:
            raise IntegrityError(f"circle '{c.id}' references dangling text row {c.text_row_id}")
        for pid in c.poi_ids:
            if pid not in poi_ids:
                raise IntegrityError(f"circle '{c.id}' references unknown poi '{pid}'")
    for cid, lb in ds.labels.items():
        if cid not in circle_ids:
            raise IntegrityError(f"labels reference unknown circle '{cid}'")
        elderly = next(c.elderly_pop for c in ds.circles if c.id == cid)
        for d in DISEASES:
            v = getattr(lb, d)
            if v < 0 or v > elderly:
                raise IntegrityError(f"label {d} for circle '{cid}' outside [0, elderly_pop]")
    for cid in ds.streets:
        if cid not in circle_ids:
            raise IntegrityError(f"street assignment references unknown circle '{cid}'")


# ---------------------------------------------------------------------------
# K-fold protocol
# ---------------------------------------------------------------------------

def kfold_split(n: int, k: int, seed: int):
    """Split ``range(n)`` into ``k`` disjoint shuffled folds.

    Fold sizes differ by at most one; deterministic under ``seed``.
    """
    if k < 2:
        raise ArgumentError("k must be >= 2")
    if n < k:
        raise ArgumentError(f"cannot split {n} items into {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    base, extra = divmod(n, k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(np.sort(perm[start:start + size]))
        start += size
    return folds
