"""Image-caption records, JSON Lines manifests and distilled-set persistence.

A manifest is a UTF-8 file with one JSON object per line::

    {"image_id": "toy_00000", "image_path": "images/toy_00000.png",
     "captions": ["a red circle in the top left", ...], "split": "train"}

Images are stored as 8-bit PNG so that a write/load cycle is bit-exact.
Provenance files use the same line format with the fields ``image_id``,
``seed_caption``, ``sampler_seed`` and ``captioner_id``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (
    CapacityError,
    ManifestLoadError,
    ValidationError,
    WriteError,
)
from .toy import N_VARIATIONS, ShapeAttributes, ToyCorpusSpec, caption_for, render

SPLITS = ("train", "validation")
MANIFEST_NAME = "manifest.jsonl"
PROVENANCE_NAME = "provenance.jsonl"


def _check_captions(image_id: str, captions: Sequence[str]) -> tuple[str, ...]:
    if isinstance(captions, str) or len(captions) == 0:
        raise ValidationError(f"{image_id}: captions must be a non-empty list")
    for c in captions:
        if not isinstance(c, str) or not c.strip():
            raise ValidationError(f"{image_id}: empty caption")
    return tuple(captions)


@dataclass(frozen=True, eq=False)
class ImageTextPair:
    """One image with one or more captions.  ``image`` is float32 (C, H, W) in [0, 1]."""

    image_id: str
    image: np.ndarray
    captions: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "captions", _check_captions(self.image_id, self.captions))
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 3:
            raise ValidationError(f"{self.image_id}: image must be (C, H, W), got {img.shape}")
        if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
            raise ValidationError(f"{self.image_id}: pixel values must lie in [0, 1]")
        img.setflags(write=False)
        object.__setattr__(self, "image", img)


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    image_path: str
    captions: tuple[str, ...]
    attributes: dict | None = None

    def to_json(self, split: str) -> dict:
        out = {"image_id": self.image_id, "image_path": self.image_path,
               "captions": list(self.captions), "split": split}
        if self.attributes is not None:
            out["attributes"] = self.attributes
        return out


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    """Validated, immutable list of records rooted at ``root_path``.

    Generated corpora keep their pixels in memory (``images``) until
    :func:`write_manifest` materializes them.
    """

    root_path: Path | None
    records: tuple[ManifestRecord, ...]
    split: str = "train"
    images: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {self.split!r}")
        seen: set[str] = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise ValidationError(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            _check_captions(rec.image_id, rec.captions)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def pair_count(self) -> int:
        return sum(len(r.captions) for r in self.records)

    def load_image(self, rec: ManifestRecord) -> np.ndarray:
        if self.images is not None and rec.image_id in self.images:
            return self.images[rec.image_id]
        if self.root_path is None:
            raise ManifestLoadError(f"no pixels for {rec.image_id!r} and no root path")
        return read_image(self.root_path / rec.image_path)

    def pairs(self) -> list[ImageTextPair]:
        return [ImageTextPair(r.image_id, self.load_image(r), r.captions) for r in self.records]

    def all_captions(self) -> list[str]:
        return [c for r in self.records for c in r.captions]


@dataclass(frozen=True)
class Provenance:
    image_id: str
    seed_caption: str
    sampler_seed: int | None
    captioner_id: str
    source: str = "edge"


@dataclass(frozen=True, eq=False)
class DistilledDataset:
    """Synthesized images with ``cpi`` captions each; ``pair_count = images * cpi``."""

    pairs: tuple[ImageTextPair, ...]
    cpi: int
    provenance: tuple[Provenance, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        object.__setattr__(self, "provenance", tuple(self.provenance))
        if self.cpi < 1:
            raise ValidationError("cpi must be positive")
        for p in self.pairs:
            if len(p.captions) != self.cpi:
                raise ValidationError(
                    f"{p.image_id} has {len(p.captions)} captions, expected cpi={self.cpi}"
                )
        ids = [p.image_id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate image_id in distilled dataset")
        if self.provenance and [p.image_id for p in self.provenance] != ids:
            raise ValidationError("provenance must list the images in dataset order")

    @property
    def pair_count(self) -> int:
        return len(self.pairs) * self.cpi

    @property
    def n_images(self) -> int:
        return len(self.pairs)

    def flat_pairs(self) -> list[tuple[int, str]]:
        """Every (image index, caption) combination; each is a training pair."""
        return [(i, c) for i, p in enumerate(self.pairs) for c in p.captions]

    def with_pairs(self, pairs: Iterable[ImageTextPair], cpi: int, provenance=None):
        return replace(
            self, pairs=tuple(pairs), cpi=cpi,
            provenance=self.provenance if provenance is None else tuple(provenance),
        )


# ---------------------------------------------------------------------------
# pixels

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / np.float32(255.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap a float image onto the 8-bit grid so it survives PNG storage exactly."""
    return from_uint8(to_uint8(image))


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ManifestLoadError(f"cannot read image {path}: {exc}") from exc
    return from_uint8(arr.transpose(2, 0, 1))


def write_image(image: np.ndarray, path: Path) -> None:
    Image.fromarray(to_uint8(image).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# manifests

def _read_jsonl(path: Path) -> list[dict]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestLoadError(f"cannot read {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ManifestLoadError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return rows


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    lines = [json.dumps(r, ensure_ascii=False, sort_keys=True) for r in rows]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Parse and validate a manifest; image paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestLoadError(f"manifest not found: {path}")
    rows = _read_jsonl(path)
    root = path.parent
    records = []
    splits = set()
    for i, row in enumerate(rows, 1):
        try:
            image_id, image_path, captions = row["image_id"], row["image_path"], row["captions"]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: record {i} lacks field {exc}") from exc
        if not isinstance(captions, list):
            raise ValidationError(f"{path}: record {i} captions must be an array")
        if not (root / image_path).is_file():
            raise ValidationError(f"{path}: image file for {image_id!r} missing: {image_path}")
        splits.add(row.get("split", "train"))
        records.append(ManifestRecord(image_id, image_path, tuple(captions), row.get("attributes")))
    if len(splits) > 1:
        raise ValidationError(f"{path}: mixed splits {sorted(splits)}")
    split = splits.pop() if splits else "train"
    return DatasetManifest(root, tuple(records), split)


def write_manifest(manifest: DatasetManifest, out_dir: str | os.PathLike) -> Path:
    """Materialize a (possibly in-memory) manifest and its images under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        records = []
        for rec in manifest.records:
            rel = f"images/{rec.image_id}.png"
            write_image(manifest.load_image(rec), out / rel)
            records.append(replace(rec, image_path=rel))
        _write_jsonl(out / MANIFEST_NAME, (r.to_json(manifest.split) for r in records))
    except OSError as exc:
        raise WriteError(f"cannot write manifest to {out}: {exc}") from exc
    return out / MANIFEST_NAME


def manifest_from_pairs(
    pairs: Sequence[ImageTextPair], split: str = "train"
) -> DatasetManifest:
    records = tuple(ManifestRecord(p.image_id, f"images/{p.image_id}.png", p.captions) for p in pairs)
    return DatasetManifest(None, records, split, images={p.image_id: p.image for p in pairs})


# ---------------------------------------------------------------------------
# toy corpus

def generate_toy_corpus(
    spec: ToyCorpusSpec, seed: int, split: str = "train", prefix: str = "toy"
) -> DatasetManifest:
    """Render ``spec.n_images`` unique attribute combinations with grammar captions."""
    if spec.n_images > spec.capacity:
        raise CapacityError(
            f"requested {spec.n_images} unique images but the vocabulary has "
            f"{spec.capacity} attribute combinations"
        )
    rng = np.random.default_rng(seed)
    combos = spec.combinations()
    order = rng.permutation(len(combos))[: spec.n_images]
    records, images = [], {}
    for k, idx in enumerate(order):
        attrs = ShapeAttributes(*combos[idx])
        offset = tuple(int(v) for v in rng.integers(-spec.jitter, spec.jitter + 1, size=2))
        image_id = f"{prefix}_{k:05d}"
        images[image_id] = from_uint8(render(attrs, spec, offset))
        if spec.captions_per_image <= N_VARIATIONS:
            variations = rng.permutation(N_VARIATIONS)[: spec.captions_per_image]
        else:
            variations = np.arange(spec.captions_per_image)
        captions = tuple(caption_for(attrs, int(v)) for v in variations)
        records.append(
            ManifestRecord(image_id, f"images/{image_id}.png", captions, attrs.as_dict())
        )
    return DatasetManifest(None, tuple(records), split, images=images)


# ---------------------------------------------------------------------------
# distilled datasets

def write_distilled(dataset: DistilledDataset, out_dir: str | os.PathLike) -> Path:
    """Write images, ``manifest.jsonl`` and ``provenance.jsonl``; return the manifest path."""
    manifest = manifest_from_pairs(dataset.pairs)
    path = write_manifest(manifest, out_dir)
    rows = [
        {"image_id": p.image_id, "seed_caption": p.seed_caption, "sampler_seed": p.sampler_seed,
         "captioner_id": p.captioner_id, "source": p.source}
        for p in dataset.provenance
    ]
    try:
        _write_jsonl(Path(out_dir) / PROVENANCE_NAME, rows)
    except OSError as exc:
        raise WriteError(f"cannot write provenance to {out_dir}: {exc}") from exc
    return path


def load_distilled(directory: str | os.PathLike) -> DistilledDataset:
    directory = Path(directory)
    manifest = load_manifest(directory / MANIFEST_NAME)
    pairs = manifest.pairs()
    counts = {len(p.captions) for p in pairs}
    if len(counts) > 1:
        raise ValidationError(f"{directory}: images carry differing caption counts {sorted(counts)}")
    cpi = counts.pop() if counts else 1
    prov = []
    prov_path = directory / PROVENANCE_NAME
    if prov_path.is_file():
        prov = [
            Provenance(r["image_id"], r["seed_caption"], r.get("sampler_seed"),
                       r["captioner_id"], r.get("source", "edge"))
            for r in _read_jsonl(prov_path)
        ]
    return DistilledDataset(tuple(pairs), cpi, tuple(prov))
