"""Caption metrics (BLEU-1..4, ROUGE-L, CIDEr-D), recognition accuracy, reports.

Candidates and references are keyed by image id: ``{image_id: caption}`` and
``{image_id: [ref, ...]}``. Text is normalized the same way as for training.
Conventions follow the usual COCO caption toolkit: corpus-level BLEU with the
closest reference length and no smoothing, ROUGE-L with beta = 1.2, CIDEr-D with
sigma = 6, clipped counts and a x10 scale.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .decode import BeamConfig, beam_decode_batch, greedy_decode_batch
from .text import decode_tokens, normalize

METRICS = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "rec")


def _ngrams(words, n):
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def _check(candidates, refs):
    if not candidates:
        raise ValueError("no candidates to score")
    for image_id in candidates:
        if not refs.get(image_id):
            raise ValueError(f"candidate {image_id!r} has no references")


def bleu(candidates: dict, refs: dict, n: int = 4) -> float:
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    _check(candidates, refs)
    matched = [0] * n
    guessed = [0] * n
    cand_len = ref_len = 0
    for image_id, cand in candidates.items():
        words = normalize(cand)
        ref_words = [normalize(r) for r in refs[image_id]]
        cand_len += len(words)
        ref_len += min((abs(len(r) - len(words)), len(r)) for r in ref_words)[1]
        for k in range(1, n + 1):
            counts = _ngrams(words, k)
            max_ref = Counter()
            for r in ref_words:
                max_ref |= _ngrams(r, k)
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            guessed[k - 1] += sum(counts.values())
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / g) for m, g in zip(matched, guessed)) / n
    return math.exp(log_p + min(0.0, 1 - ref_len / cand_len))


def _lcs(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_single(cand: str, references: list[str], beta: float = 1.2) -> float:
    words = normalize(cand)
    best = 0.0
    for ref in references:
        r = normalize(ref)
        lcs = _lcs(words, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(words), lcs / len(r)
        best = max(best, (1 + beta**2) * p * rec / (rec + beta**2 * p))
    return best


def rouge_l(candidates: dict, refs: dict) -> float:
    _check(candidates, refs)
    return sum(rouge_l_single(c, refs[i]) for i, c in candidates.items()) / len(candidates)


class CiderD:
    """CIDEr-D with document frequencies taken from a reference corpus."""

    def __init__(self, refs: dict, n: int = 4, sigma: float = 6.0):
        if len(refs) < 2:
            raise ValueError("degenerate document frequency: CIDEr needs at least 2 images")
        self.n, self.sigma = n, sigma
        self.refs = {i: [normalize(r) for r in rs] for i, rs in refs.items()}
        self.df = Counter()
        for rs in self.refs.values():
            self.df.update({g for r in rs for k in range(1, n + 1) for g in _ngrams(r, k)})
        self.log_n = math.log(len(refs))

    def _vec(self, words):
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {
                g: c * (self.log_n - math.log(max(1.0, self.df[g])))
                for g, c in _ngrams(words, k).items()
            }
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def pair(self, cand_words, ref_words, sigma: float | None = None) -> list[float]:
        """Per-order similarity of one candidate/reference pair, with length penalty."""
        sigma = self.sigma if sigma is None else sigma
        vh, nh = self._vec(cand_words)
        vr, nr = self._vec(ref_words)
        penalty = math.exp(-((len(cand_words) - len(ref_words)) ** 2) / (2 * sigma**2))
        out = []
        for k in range(self.n):
            val = sum(min(x, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, x in vh[k].items())
            if nh[k] and nr[k]:
                val /= nh[k] * nr[k]
            out.append(val * penalty)
        return out

    def score_one(self, image_id, cand: str) -> float:
        words = normalize(cand)
        total = [0.0] * self.n
        for ref in self.refs[image_id]:
            for k, v in enumerate(self.pair(words, ref)):
                total[k] += v
        return 10.0 * sum(total) / self.n / len(self.refs[image_id])

    def score(self, candidates: dict) -> float:
        _check(candidates, self.refs)
        return sum(self.score_one(i, c) for i, c in candidates.items()) / len(candidates)


def cider(candidates: dict, refs: dict, sigma: float = 6.0) -> float:
    return CiderD(refs, sigma=sigma).score(candidates)


def contains_phrase(caption: str, keyword: str) -> bool:
    words, phrase = normalize(caption), normalize(keyword)
    if not phrase:
        raise ValueError(f"keyword {keyword!r} is empty after normalization")
    k = len(phrase)
    return any(words[i : i + k] == phrase for i in range(len(words) - k + 1))


def recognition_accuracy(candidates: dict, keywords: dict) -> float:
    if not candidates:
        raise ValueError("no candidates to score")
    hits = 0
    for image_id, cand in candidates.items():
        if image_id not in keywords:
            raise ValueError(f"image {image_id!r} has no keyword list")
        hits += any(contains_phrase(cand, kw) for kw in keywords[image_id])
    return hits / len(candidates)


# -- reports --------------------------------------------------------------


@dataclass
class SplitScores:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float
    rec: float | None
    count: int

    def as_dict(self):
        return {m: getattr(self, m) for m in (*METRICS, "count")}


@dataclass
class EvalReport:
    splits: dict[str, SplitScores] = field(default_factory=dict)

    def as_dict(self):
        return {name: s.as_dict() for name, s in self.splits.items()}

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["split", *METRICS, "count"])
            for name, s in self.splits.items():
                row = s.as_dict()
                writer.writerow([name, *("" if row[m] is None else repr(row[m]) for m in METRICS), row["count"]])


def score_split(candidates: dict, refs: dict, keywords: dict | None = None) -> SplitScores:
    _check(candidates, refs)
    corpus_refs = {i: refs[i] for i in candidates}
    rec = None
    if keywords:
        rec = recognition_accuracy(candidates, keywords)
    return SplitScores(
        *(bleu(candidates, corpus_refs, k) for k in range(1, 5)),
        rouge_l(candidates, corpus_refs),
        cider(candidates, corpus_refs) if len(candidates) > 1 else 0.0,
        rec,
        len(candidates),
    )


def caption_split(model, dataset, split: str, method: str = "beam", width: int = 5) -> dict[int, str]:
    """Decode every image of ``split``; returns ``{image_id: caption}``."""
    images = dataset.images(split)
    if not images:
        raise ValueError(f"split {split!r} is empty")
    if method == "beam":
        hyps = [r.best for r in beam_decode_batch(model, images, BeamConfig(width, model.max_len))]
    elif method == "greedy":
        hyps = greedy_decode_batch(model, images, model.max_len)
    else:
        raise ValueError(f"unknown decoding method {method!r}")
    return {img.image_id: decode_tokens(h.tokens, dataset.vocab) for img, h in zip(images, hyps)}


def evaluate_run(model, dataset, generic_split: str = "generic_test", concept_split: str = "concept_test",
                 method: str = "beam", width: int = 5) -> tuple[EvalReport, dict]:
    """Report blocks ``generic``, ``concept``, ``seen`` and ``unseen`` plus the raw captions.

    The seen and unseen blocks are scored only on their own images; CIDEr's
    document frequencies therefore come from each block's own references.
    """
    report = EvalReport()
    generic = caption_split(model, dataset, generic_split, method, width)
    report.splits["generic"] = score_split(generic, dataset.references(generic_split))
    concept = caption_split(model, dataset, concept_split, method, width)
    refs = dataset.references(concept_split)
    keywords = dataset.keywords[concept_split]
    report.splits["concept"] = score_split(concept, refs, keywords)
    groups = dataset.groups[concept_split]
    for group in ("seen", "unseen"):
        subset = {i: c for i, c in concept.items() if groups.get(i) == group}
        if subset:
            report.splits[group] = score_split(subset, refs, keywords)
    return report, {"generic": generic, "concept": concept}
