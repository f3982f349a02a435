"""Synthetic concept images and captions, dataset files, and the mixed replay stream.

Images are grids of patch vectors. A concept occupies a 2x2 block whose patches
are its signature plus Gaussian noise; filler objects occupy further blocks and
everything else is pure noise. The first-named object carries an extra
highlight vector so captions can order the two objects. Three caption styles:

* pretrain (web-caption style): ``a photo of the <concept> <object>``
* generic (COCO-style):         ``a <object> next to a <object>``
* concept (entity-caption test): ``a <concept> <object> next to a <object>``

Generic images never contain a concept and generic captions never name one, so
fine-tuning on them erodes the pretrained concept vocabulary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .seeds import derive_seed
from .text import Keyword, Vocabulary, build_vocab, encode, tokenize_keyword

OBJECTS = ("car", "dog", "table", "tree", "boat", "cup", "chair", "bird", "lamp", "bag")
TEMPLATE_WORDS = ("a", "photo", "of", "the", "next", "to")

CAPTION_SPLITS = ("pretrain", "generic_train", "generic_val", "generic_test", "concept_val", "concept_test")
SPLITS = CAPTION_SPLITS[:4] + ("replay",) + CAPTION_SPLITS[4:]

_ONSETS = "bdfgklmnprstvz"
_NUCLEI = "aeiou"
_CODAS = ("", "", "n", "r", "x", "l", "s")

MAX_SIMILARITY = 0.5


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass(frozen=True)
class ConceptSpec:
    index: int
    name: str
    signature: np.ndarray = field(repr=False, compare=False)
    replay_eligible: bool = True


@dataclass(frozen=True)
class SyntheticImage:
    patches: np.ndarray = field(repr=False, compare=False)
    concept_ids: tuple[int, ...] = ()
    image_id: int = 0


@dataclass(frozen=True)
class CaptionSample:
    image: SyntheticImage
    caption: str
    split: str
    tokens: tuple[int, ...] = ()


@dataclass(frozen=True)
class ReplaySample:
    image: SyntheticImage
    keyword: Keyword


@dataclass
class CorpusSizes:
    pretrain: int = 600
    generic_train: int = 600
    generic_val: int = 64
    generic_test: int = 128
    replay: int = 120
    concept_val: int = 48
    concept_test: int = 96

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"corpus size {name} must be positive")


@dataclass
class DatasetManifest:
    counts: dict[str, int]
    files: dict[str, dict[str, str]]
    seed: int
    concept_bank: str
    vocab: str
    grid: tuple[int, int]
    dim: int
    noise: float

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        try:
            raw = json.loads(Path(path).read_text())
            raw["grid"] = tuple(raw["grid"])
            return cls(**raw)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: invalid manifest ({exc})") from exc


# -- concept bank ---------------------------------------------------------


def _unit_f32(v: np.ndarray) -> np.ndarray:
    # float32-representable so patches survive the on-disk format bit-exactly
    return (v / np.linalg.norm(v)).astype(np.float32).astype(np.float64)


def _sample_separated(rng, count, dim, existing=(), retries=2000):
    accepted = list(existing)
    fresh = []
    for _ in range(count):
        for _ in range(retries):
            v = _unit_f32(rng.standard_normal(dim))
            if all(abs(float(v @ u)) < MAX_SIMILARITY for u in accepted):
                break
        else:
            raise ValueError("concept bank infeasible")
        accepted.append(v)
        fresh.append(v)
    return fresh


def _concept_names(rng, count, reserved):
    names, used = [], set(reserved)

    def word():
        while True:
            syl = [rng.choice(list(_ONSETS)) + rng.choice(list(_NUCLEI)) for _ in range(2)]
            w = "".join(syl) + _CODAS[rng.integers(len(_CODAS))]
            if w not in used:
                used.add(w)
                return w

    for i in range(count):
        # every third concept is a two-word name so keywords with N > 1 occur
        names.append(f"{word()} {word()}" if i % 3 == 2 else word())
    return names


def generate_concept_bank(num_concepts: int, num_unseen: int, dim: int, seed: int) -> list[ConceptSpec]:
    if not 0 <= num_unseen < num_concepts:
        raise ValueError("need 0 <= num_unseen < num_concepts")
    if dim < 4:
        raise ValueError("dim must be >= 4")
    rng = np.random.default_rng(derive_seed(seed, "concept-bank"))
    vectors = _sample_separated(rng, num_concepts, dim)
    names = _concept_names(rng, num_concepts, OBJECTS + TEMPLATE_WORDS)
    unseen = set(rng.permutation(num_concepts)[:num_unseen].tolist())
    return [
        ConceptSpec(i, names[i], vectors[i], i not in unseen) for i in range(num_concepts)
    ]


def save_concept_bank(bank: list[ConceptSpec], path: str | Path) -> None:
    rows = [
        {"name": c.name, "vector": c.signature.tolist(), "replay_eligible": c.replay_eligible}
        for c in bank
    ]
    Path(path).write_text(json.dumps({"concepts": rows}) + "\n")


def load_concept_bank(path: str | Path) -> list[ConceptSpec]:
    try:
        rows = json.loads(Path(path).read_text())["concepts"]
        return [
            ConceptSpec(i, r["name"], np.asarray(r["vector"], dtype=np.float64), bool(r["replay_eligible"]))
            for i, r in enumerate(rows)
        ]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: invalid concept bank ({exc})") from exc


# -- rendering ------------------------------------------------------------


def _place_blocks(rng, shapes, grid):
    """Non-overlapping top-left corners for each block, searched by backtracking."""
    h, w = grid
    occupied = np.zeros(grid, dtype=bool)
    corners = []

    def place(k):
        if k == len(shapes):
            return True
        bh, bw = shapes[k]
        options = [(r, c) for r in range(h - bh + 1) for c in range(w - bw + 1)]
        for j in rng.permutation(len(options)) if options else []:
            r, c = options[j]
            if not occupied[r : r + bh, c : c + bw].any():
                occupied[r : r + bh, c : c + bw] = True
                corners.append((r, c))
                if place(k + 1):
                    return True
                corners.pop()
                occupied[r : r + bh, c : c + bw] = False
        return False

    if not place(0):
        raise ValueError("grid too small")
    return corners


def render_image(
    concepts,
    grid: tuple[int, int] = (4, 4),
    noise: float = 0.1,
    seed: int = 0,
    *,
    block: tuple[int, int] = (2, 2),
    fillers=(),
    image_id: int = 0,
    dim: int | None = None,
) -> SyntheticImage:
    """Render concept blocks (and optional filler vectors) onto a noisy grid."""
    vectors = [c.signature for c in concepts] + [np.asarray(f, dtype=np.float64) for f in fillers]
    if dim is None:
        if not vectors:
            raise ValueError("dim required for an image without blocks")
        dim = len(vectors[0])
    rng = np.random.default_rng(seed)
    corners = _place_blocks(rng, [block] * len(vectors), grid)
    patches = rng.standard_normal((*grid, dim)) * noise
    bh, bw = block
    for (r, c), v in zip(corners, vectors):
        patches[r : r + bh, c : c + bw] += v
    patches = patches.astype(np.float32).astype(np.float64)
    return SyntheticImage(patches, tuple(c.index for c in concepts), image_id)


# -- corpora --------------------------------------------------------------


@dataclass
class _Scene:
    image: SyntheticImage
    caption: str
    concept: ConceptSpec | None


def _fillers(bank, seed):
    """Object signatures plus the highlight vector, all separated from the concepts."""
    rng = np.random.default_rng(derive_seed(seed, "fillers"))
    dim = len(bank[0].signature)
    vecs = _sample_separated(rng, len(OBJECTS) + 1, dim, [c.signature for c in bank])
    return dict(zip(OBJECTS, vecs[: len(OBJECTS)])), vecs[-1]


def _scene(kind, concept, image_id, rng, objects, highlight, grid, noise):
    obj1, obj2 = rng.choice(len(OBJECTS), size=2, replace=False)
    obj1, obj2 = OBJECTS[obj1], OBJECTS[obj2]
    fillers = [objects[obj1] + highlight, objects[obj2]]
    concepts = [] if concept is None else [concept]
    image = render_image(
        concepts, grid, noise, int(rng.integers(2**63)), fillers=fillers, image_id=image_id,
        dim=len(objects[obj1]),
    )
    if kind == "pretrain":
        caption = f"a photo of the {concept.name} {obj1}"
    elif kind == "generic":
        caption = f"a {obj1} next to a {obj2}"
    else:
        caption = f"a {concept.name} {obj1} next to a {obj2}"
    return _Scene(image, caption, concept)


def _cycle(pool, n, rng):
    order = [pool[i % len(pool)] for i in range(n)]
    return [order[i] for i in rng.permutation(n)]


def build_splits(bank, sizes: CorpusSizes, seed: int, grid=(4, 4), noise=0.1):
    """All splits in memory: ``{split: [_Scene]}``."""
    if not bank:
        raise ValueError("empty concept bank")
    objects, highlight = _fillers(bank, seed)
    seen = [c for c in bank if c.replay_eligible]
    unseen = [c for c in bank if not c.replay_eligible]
    if not seen:
        raise ValueError("replay requested but no replay-eligible concepts")
    splits = {}
    for split in SPLITS:
        n = getattr(sizes, split)
        rng = np.random.default_rng(derive_seed(seed, "split", split))
        if split == "pretrain":
            kind, concepts = "pretrain", _cycle(bank, n, rng)
        elif split.startswith("generic"):
            kind, concepts = "generic", [None] * n
        elif split == "replay":
            kind, concepts = "concept", _cycle(seen, n, rng)
        else:
            # alternate seen/unseen so both groups are reported
            n_unseen = n // 2 if unseen else 0
            concepts = _cycle(seen, n - n_unseen, rng) + (_cycle(unseen, n_unseen, rng) if n_unseen else [])
            kind = "concept"
        splits[split] = [
            _scene(kind, c, i, rng, objects, highlight, grid, noise) for i, c in enumerate(concepts)
        ]
    return splits


def generate_corpora(
    bank: list[ConceptSpec],
    sizes: CorpusSizes,
    seed: int,
    out_dir: str | Path,
    grid: tuple[int, int] = (4, 4),
    noise: float = 0.1,
) -> DatasetManifest:
    """Generate every split and write it, the vocabulary and the bank under ``out_dir``."""
    splits = build_splits(bank, sizes, seed, grid, noise)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    texts = [s.caption for scenes in splits.values() for s in scenes] + [c.name for c in bank]
    vocab = build_vocab(texts, min_count=1)
    vocab.save(out / "vocab.txt")
    save_concept_bank(bank, out / "concepts.json")
    files = {}
    for split, scenes in splits.items():
        patch_file = f"{split}_patches.bin"
        save_patches(out / patch_file, np.stack([s.image.patches for s in scenes]))
        if split == "replay":
            ann_file = "replay.json"
            save_replay(out / ann_file, [(s.image.image_id, s.concept.name) for s in scenes])
        else:
            ann_file = f"{split}_captions.json"
            images = []
            for s in scenes:
                entry = {"id": s.image.image_id, "concepts": list(s.image.concept_ids)}
                if s.concept is not None and split.startswith("concept"):
                    entry["keywords"] = [s.concept.name]
                    entry["group"] = "seen" if s.concept.replay_eligible else "unseen"
                images.append(entry)
            annotations = [
                {"image_id": s.image.image_id, "id": i, "caption": s.caption}
                for i, s in enumerate(scenes)
            ]
            save_captions(out / ann_file, images, annotations)
        files[split] = {"annotations": ann_file, "patches": patch_file}
    manifest = DatasetManifest(
        counts={k: len(v) for k, v in splits.items()},
        files=files,
        seed=seed,
        concept_bank="concepts.json",
        vocab="vocab.txt",
        grid=tuple(grid),
        dim=len(bank[0].signature),
        noise=noise,
    )
    manifest.save(out / "manifest.json")
    return manifest


# -- file formats ---------------------------------------------------------


def save_patches(path: str | Path, patches: np.ndarray) -> None:
    count, h, w, d = patches.shape
    Path(path).write_bytes(struct.pack("<IIII", count, h, w, d) + patches.astype("<f4").tobytes())


def load_patches(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise DataError(f"{path}: truncated patch header")
    count, h, w, d = struct.unpack_from("<IIII", data)
    expected = 16 + 4 * count * h * w * d
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(count, h, w, d).astype(np.float64)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def save_captions(path: str | Path, images: list[dict], annotations: list[dict]) -> None:
    Path(path).write_text(json.dumps({"images": images, "annotations": annotations}) + "\n")


def load_captions(path: str | Path) -> tuple[list[dict], list[dict]]:
    raw = _read_json(path)
    if not isinstance(raw, dict):
        raise DataError(f"{path}: top level must be an object")
    for key in ("images", "annotations"):
        if key not in raw:
            raise DataError(f"{path}: missing {key!r} key")
    ids = set()
    for i, img in enumerate(raw["images"]):
        if not isinstance(img, dict) or not isinstance(img.get("id"), int):
            raise DataError(f"{path}: images[{i}] needs an integer 'id'")
        ids.add(img["id"])
    for i, ann in enumerate(raw["annotations"]):
        if not isinstance(ann, dict) or not isinstance(ann.get("caption"), str):
            raise DataError(f"{path}: annotations[{i}] needs a string 'caption'")
        if ann.get("image_id") not in ids:
            raise DataError(f"{path}: annotations[{i}] references unknown image_id {ann.get('image_id')!r}")
    return raw["images"], raw["annotations"]


def save_replay(path: str | Path, pairs: list[tuple[int, str]]) -> None:
    rows = [{"image_id": i, "keyword": k} for i, k in pairs]
    Path(path).write_text(json.dumps({"replay": rows}) + "\n")


def load_replay(path: str | Path) -> list[tuple[int, str]]:
    raw = _read_json(path)
    if not isinstance(raw, dict) or "replay" not in raw:
        raise DataError(f"{path}: missing 'replay' key")
    pairs = []
    for i, row in enumerate(raw["replay"]):
        try:
            pairs.append((int(row["image_id"]), str(row["keyword"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: replay[{i}] malformed") from exc
    return pairs


# -- loading --------------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest
    vocab: Vocabulary
    bank: list[ConceptSpec]
    captions: dict[str, list[CaptionSample]]
    replay: list[ReplaySample]
    keywords: dict[str, dict[int, list[str]]]
    groups: dict[str, dict[int, str]]

    def images(self, split: str) -> list[SyntheticImage]:
        if split == "replay":
            return [s.image for s in self.replay]
        seen, out = set(), []
        for s in self.captions[split]:
            if s.image.image_id not in seen:
                seen.add(s.image.image_id)
                out.append(s.image)
        return out

    def references(self, split: str) -> dict[int, list[str]]:
        refs: dict[int, list[str]] = {}
        for s in self.captions[split]:
            refs.setdefault(s.image.image_id, []).append(s.caption)
        return refs


def load_dataset(manifest_path: str | Path) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(manifest_path)
    root = manifest_path.parent
    manifest = DatasetManifest.load(manifest_path)
    vocab = Vocabulary.load(root / manifest.vocab)
    bank = load_concept_bank(root / manifest.concept_bank)
    captions, keywords, groups, replay = {}, {}, {}, []
    for split, files in manifest.files.items():
        patches = load_patches(root / files["patches"])
        if split == "replay":
            pairs = load_replay(root / files["annotations"])
            by_name = {c.name: c.index for c in bank}
            for image_id, kw in pairs:
                if not 0 <= image_id < len(patches):
                    raise DataError(f"replay: image_id {image_id} out of range")
                concept = by_name.get(kw)
                img = SyntheticImage(patches[image_id], () if concept is None else (concept,), image_id)
                replay.append(ReplaySample(img, tokenize_keyword(kw, vocab)))
            count = len(pairs)
        else:
            images, annotations = load_captions(root / files["annotations"])
            meta = {img["id"]: img for img in images}
            for image_id in meta:
                if not 0 <= image_id < len(patches):
                    raise DataError(f"{split}: image_id {image_id} has no patch record")
            samples = []
            for ann in annotations:
                m = meta[ann["image_id"]]
                img = SyntheticImage(patches[ann["image_id"]], tuple(m.get("concepts", ())), ann["image_id"])
                samples.append(CaptionSample(img, ann["caption"], split, tuple(encode(ann["caption"], vocab))))
            captions[split] = samples
            keywords[split] = {i: list(m["keywords"]) for i, m in meta.items() if "keywords" in m}
            groups[split] = {i: m["group"] for i, m in meta.items() if "group" in m}
            count = len(images)
        if count != manifest.counts.get(split):
            raise DataError(f"{split}: manifest count {manifest.counts.get(split)} != file count {count}")
    return Dataset(root, manifest, vocab, bank, captions, replay, keywords, groups)


# -- batching -------------------------------------------------------------


def mix_batches(caption_samples, replay_samples, batch_size: int, seed: int) -> list[list]:
    """One epoch: the pooled samples shuffled once, cut into consecutive batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pool = list(caption_samples) + list(replay_samples)
    if not pool:
        raise ValueError("no samples to batch")
    order = np.random.default_rng(seed).permutation(len(pool))
    return [[pool[j] for j in order[i : i + batch_size]] for i in range(0, len(pool), batch_size)]
