"""Synthetic multimodal datasets with controllable cross-modal
complementarity and within-modality redundancy, plus the on-disk token
format (raw little-endian float32 files + JSON manifest) used for both
generated and externally extracted features.

Label information is factored into components (small cardinalities whose
joint value identifies the class). Each component is assigned to one or
more modalities and rendered there as an orthonormal direction vector in a
reserved coordinate block, written into ``copies`` windows of ``window``
consecutive tokens at seeded random offsets. Everything else is noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class ModalitySpec:
    name: str
    n_tokens: int
    dim_in: int
    window: int = 1
    copies: int = 1

    def __post_init__(self):
        if self.window < 1 or self.window > self.n_tokens:
            raise DatasetError(f"{self.name}: window {self.window} not in [1, {self.n_tokens}]")
        if self.copies < 1 or self.copies * self.window > self.n_tokens:
            raise DatasetError(f"{self.name}: {self.copies} windows of {self.window} "
                               f"tokens do not fit in {self.n_tokens}")


@dataclass
class SyntheticSpec:
    modalities: list[ModalitySpec]
    num_classes: int
    samples_per_class: int
    components: list[int]
    assignment: list[list[int]]
    noise: float = 0.5
    signal_scale: float = 1.0
    # soft complementarity: per modality, the classes it carries at full
    # strength; other classes get weak_amplitude * signal_scale
    emphasis: list[list[int]] | None = None
    weak_amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        m = len(self.modalities)
        if len(self.assignment) != len(self.components):
            raise DatasetError("one assignment entry per component required")
        for j, mods in enumerate(self.assignment):
            if not mods:
                raise DatasetError(f"component {j} assigned to no modality")
            if any(not 0 <= i < m for i in mods):
                raise DatasetError(f"component {j} assigned to unknown modality")
        if any(c < 2 for c in self.components):
            raise DatasetError("component cardinalities must be >= 2")
        tuples = {self.class_values(c) for c in range(self.num_classes)}
        if len(tuples) != self.num_classes:
            raise DatasetError("component values do not identify every class; "
                               "increase component cardinalities")
        if self.emphasis is not None:
            if len(self.emphasis) != m:
                raise DatasetError("one emphasis list per modality required")
            for classes in self.emphasis:
                if any(not 0 <= c < self.num_classes for c in classes):
                    raise DatasetError("emphasis references an unknown class")
            covered = set().union(*map(set, self.emphasis))
            if covered != set(range(self.num_classes)):
                raise DatasetError("every class needs full-strength signal in "
                                   "at least one modality")
        if self.weak_amplitude < 0:
            raise DatasetError("weak_amplitude must be >= 0")

    def class_values(self, label: int) -> tuple[int, ...]:
        """Component values carried by a class: value_j = label mod card_j."""
        return tuple(label % card for card in self.components)

    def to_dict(self) -> dict:
        return {
            "modalities": [{"name": m.name, "n_tokens": m.n_tokens,
                            "dim_in": m.dim_in, "window": m.window,
                            "copies": m.copies} for m in self.modalities],
            "num_classes": self.num_classes,
            "samples_per_class": self.samples_per_class,
            "components": list(self.components),
            "assignment": [list(a) for a in self.assignment],
            "noise": self.noise, "signal_scale": self.signal_scale,
            "emphasis": None if self.emphasis is None
                        else [list(e) for e in self.emphasis],
            "weak_amplitude": self.weak_amplitude,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        mods = [ModalitySpec(**m) for m in d["modalities"]]
        rest = {k: v for k, v in d.items() if k != "modalities"}
        return cls(modalities=mods, **rest)


@dataclass
class SampleRecord:
    sample_id: str
    label: int
    data: dict[str, np.ndarray]


@dataclass
class ModalityInfo:
    name: str
    n_tokens: int
    dim_in: int


@dataclass
class Dataset:
    modalities: list[ModalityInfo]
    num_classes: int
    samples: list[SampleRecord]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self._index = {s.sample_id: s for s in self.samples}

    def by_id(self, sample_id: str) -> SampleRecord:
        return self._index[sample_id]

    def split(self, name: str) -> list[SampleRecord]:
        return [self._index[i] for i in self.splits.get(name, [])]

    def inputs(self, sample: SampleRecord) -> list[np.ndarray]:
        return [sample.data[m.name].astype(np.float64) for m in self.modalities]


@dataclass
class GeneratorInfo:
    """Ground truth the generator knows: per-modality class signal vectors
    and every sample's window offsets (for oracle classifiers in tests)."""

    signal_vectors: dict[str, np.ndarray]       # modality -> [C, dim_in]
    offsets: dict[str, dict[str, np.ndarray]]   # sample id -> modality -> starts


def _component_blocks(spec: SyntheticSpec, mod_index: int) -> dict[int, slice]:
    """Contiguous coordinate block per component carried by this modality."""
    carried = [j for j, mods in enumerate(spec.assignment) if mod_index in mods]
    if not carried:
        return {}
    width = spec.modalities[mod_index].dim_in // len(carried)
    blocks = {}
    for pos, j in enumerate(carried):
        if width < (spec.components[j] + 1) // 2:
            raise DatasetError(
                f"{spec.modalities[mod_index].name}: block width {width} cannot "
                f"hold {(spec.components[j] + 1) // 2} orthogonal directions")
        blocks[j] = slice(pos * width, (pos + 1) * width)
    return blocks


def _signed_directions(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    """Value v maps to (-1)^v * q_{v//2} over orthonormal columns q: paired
    values share a direction with opposite sign, so the encoding carries
    sign information rather than a pure per-class mean shift."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, (count + 1) // 2)))
    dirs = q.T[np.arange(count) // 2]
    signs = np.where(np.arange(count) % 2 == 0, 1.0, -1.0)
    return dirs * signs[:, None]


def generate_synthetic(spec: SyntheticSpec, seed: int | None = None
                       ) -> tuple[Dataset, GeneratorInfo]:
    """Deterministic dataset: bytes are a pure function of (spec, seed)."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)

    signal_vectors: dict[str, np.ndarray] = {}
    for mi, mod in enumerate(spec.modalities):
        blocks = _component_blocks(spec, mi)
        patterns = {j: _signed_directions(rng, blk.stop - blk.start,
                                          spec.components[j])
                    for j, blk in blocks.items()}
        vectors = np.zeros((spec.num_classes, mod.dim_in))
        for c in range(spec.num_classes):
            values = spec.class_values(c)
            amp = spec.signal_scale
            if spec.emphasis is not None and c not in spec.emphasis[mi]:
                amp *= spec.weak_amplitude
            for j, blk in blocks.items():
                vectors[c, blk] += amp * patterns[j][values[j]]
        signal_vectors[mod.name] = vectors

    samples: list[SampleRecord] = []
    offsets: dict[str, dict[str, np.ndarray]] = {}
    idx = 0
    for c in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            sid = f"s{idx:05d}"
            idx += 1
            data = {}
            offs = {}
            for mod in spec.modalities:
                tokens = spec.noise * rng.standard_normal((mod.n_tokens, mod.dim_in))
                slots = mod.n_tokens // mod.window
                starts = np.sort(rng.choice(slots, size=mod.copies,
                                            replace=False)) * mod.window
                for s in starts:
                    tokens[s:s + mod.window] += signal_vectors[mod.name][c]
                data[mod.name] = tokens.astype("<f4")
                offs[mod.name] = starts
            samples.append(SampleRecord(sid, c, data))
            offsets[sid] = offs

    ds = Dataset(
        modalities=[ModalityInfo(m.name, m.n_tokens, m.dim_in)
                    for m in spec.modalities],
        num_classes=spec.num_classes, samples=samples)
    return ds, GeneratorInfo(signal_vectors=signal_vectors, offsets=offsets)


# ---------------------------------------------------------------------------
# on-disk format


def _token_filename(sample_id: str, modality: str) -> str:
    return f"{sample_id}.{modality}.f32"


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": MANIFEST_VERSION,
        "modalities": [{"name": m.name, "n_tokens": m.n_tokens,
                        "dim_in": m.dim_in} for m in ds.modalities],
        "num_classes": ds.num_classes,
        "samples": [],
        "splits": {k: list(v) for k, v in ds.splits.items()},
    }
    for s in ds.samples:
        files = {}
        for m in ds.modalities:
            fname = _token_filename(s.sample_id, m.name)
            arr = np.ascontiguousarray(s.data[m.name], dtype="<f4")
            (out / fname).write_bytes(arr.tobytes())
            files[m.name] = fname
        manifest["samples"].append({"id": s.sample_id, "label": s.label,
                                    "files": files})
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise DatasetError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest {mpath}: {e}") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')}")

    modalities = [ModalityInfo(**m) for m in manifest["modalities"]]
    known = {m.name: m for m in modalities}
    samples = []
    for rec in manifest["samples"]:
        data = {}
        for mod_name, fname in rec["files"].items():
            if mod_name not in known:
                raise DatasetError(f"sample {rec['id']}: unknown modality "
                                   f"{mod_name!r} in manifest")
            m = known[mod_name]
            fpath = root / fname
            if not fpath.exists():
                raise DatasetError(f"missing token file {fpath}")
            expected = m.n_tokens * m.dim_in * 4
            blob = fpath.read_bytes()
            if len(blob) != expected:
                raise DatasetError(f"{fpath}: expected {expected} bytes "
                                   f"({m.n_tokens}x{m.dim_in} float32), got {len(blob)}")
            data[mod_name] = np.frombuffer(blob, dtype="<f4").reshape(
                m.n_tokens, m.dim_in)
        missing = set(known) - set(rec["files"])
        if missing:
            raise DatasetError(f"sample {rec['id']}: no data for {sorted(missing)}")
        samples.append(SampleRecord(rec["id"], int(rec["label"]), data))

    ds = Dataset(modalities=modalities, num_classes=int(manifest["num_classes"]),
                 samples=samples, splits={k: list(v) for k, v in
                                          manifest.get("splits", {}).items()})
    for name, ids in ds.splits.items():
        for sid in ids:
            if sid not in ds._index:
                raise DatasetError(f"split {name!r} references unknown sample {sid}")
    return ds


def split_dataset(ds: Dataset, fractions: tuple[float, float, float],
                  seed: int) -> dict[str, list[str]]:
    """Seeded class-stratified shuffle-and-partition into train/val/test."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise DatasetError(f"fractions must be nonnegative and sum to 1: {fractions}")
    rng = np.random.default_rng(seed)
    splits: dict[str, list[str]] = {name: [] for name in SPLIT_NAMES}
    by_class: dict[int, list[str]] = {}
    for s in ds.samples:
        by_class.setdefault(s.label, []).append(s.sample_id)
    for label in sorted(by_class):
        ids = by_class[label]
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        n = len(ids)
        cuts = [round(sum(fractions[:i + 1]) * n) for i in range(3)]
        start = 0
        for name, stop in zip(SPLIT_NAMES, cuts):
            splits[name].extend(shuffled[start:stop])
            start = stop
    for name, frac in zip(SPLIT_NAMES, fractions):
        if frac > 0 and not splits[name]:
            raise DatasetError(f"split {name!r} is empty at fraction {frac}")
    ds.splits = splits
    return splits


def apply_label_noise(ds: Dataset, rate: float, seed: int,
                      split: str = "train") -> list[str]:
    """Reassign a seeded ``rate`` fraction of a split's labels to a uniformly
    chosen different class. Returns the corrupted sample ids."""
    if not 0.0 <= rate < 1.0:
        raise DatasetError("noise rate must be in [0, 1)")
    ids = ds.splits.get(split)
    if not ids:
        raise DatasetError(f"split {split!r} is empty or missing")
    rng = np.random.default_rng(seed)
    count = round(rate * len(ids))
    chosen = rng.choice(len(ids), size=count, replace=False)
    flipped = []
    for i in sorted(chosen):
        rec = ds.by_id(ids[i])
        offset = int(rng.integers(1, ds.num_classes))
        rec.label = (rec.label + offset) % ds.num_classes
        flipped.append(rec.sample_id)
    return flipped
