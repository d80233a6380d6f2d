"""Visit records, ICD-10 code handling, label spaces and synthetic data.

The real corpora behind this kind of pipeline are private, so a deterministic
generator produces clinical-style records with disjoint per-class keyword
pools (a bag-of-keywords rule classifies them perfectly, which later serves
as a learnability oracle) and a Zipf-skewed class distribution.
"""

from __future__ import annotations

import datetime
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError, ParameterError

ICD_PATTERN = re.compile(r"^([A-Z][0-9]{2})(?:\.([0-9A-Za-z]{1,4}))?$")


@dataclass
class VisitRecord:
    """One patient visit: free-text fields plus the assigned ICD code."""

    patient_id: str
    visit_id: str
    date: str
    symptoms_text: str
    anamnesis_text: str
    icd_code: str


def assemble_text(record: VisitRecord) -> str:
    """Concatenate symptoms and anamnesis, skipping empty fields.

    No further preprocessing: downstream consumers see the raw text."""
    parts = [t for t in (record.symptoms_text, record.anamnesis_text) if t]
    return " ".join(parts)


def parse_icd(code: str) -> tuple[str, str | None]:
    """Split an ICD-10 code into (root, specifier-after-the-dot-or-None)."""
    m = ICD_PATTERN.match(code)
    if m is None:
        raise DataError(f"malformed ICD code: {code!r}")
    return m.group(1), m.group(2)


def format_icd(root: str, specifier: str | None) -> str:
    return root if specifier is None else f"{root}.{specifier}"


# ---------------------------------------------------------------------------
# label spaces
# ---------------------------------------------------------------------------


@dataclass
class LabelSpace:
    """Ordered code list defining the classification target set."""

    codes: list[str]
    mode: str  # "root" or "extended"
    coverage: float
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {c: i for i, c in enumerate(self.codes)}
        if len(self.index) != len(self.codes):
            raise DataError("label space contains duplicate codes")
        if self.mode == "root" and any("." in c for c in self.codes):
            raise DataError("root-mode label space cannot contain dotted codes")

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code: str) -> bool:
        return code in self.index

    def index_of(self, code: str) -> int:
        return self.index[code]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for code in self.codes:
                fh.write(code + "\n")

    @classmethod
    def load(cls, path, mode: str | None = None,
             coverage: float = 0.0) -> "LabelSpace":
        with open(path, encoding="utf-8") as fh:
            codes = [line.strip() for line in fh if line.strip()]
        if mode is None:
            mode = "extended" if any("." in c for c in codes) else "root"
        return cls(codes=codes, mode=mode, coverage=coverage)


def _select_by_frequency(
    counts: dict[str, int], total: int, k: int | None, coverage: float | None
) -> tuple[list[str], float]:
    """Top-k or smallest coverage-reaching prefix of a frequency table.

    Ordering is frequency descending with lexicographic tie-breaking, so the
    result does not depend on input iteration order."""
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if k is not None:
        chosen = ranked[: min(k, len(ranked))]
        covered = sum(c for _, c in chosen)
        return [code for code, _ in chosen], covered / total
    assert coverage is not None
    running = 0
    chosen = []
    for code, count in ranked:
        chosen.append(code)
        running += count
        if running / total >= coverage:
            return chosen, running / total
    raise DataError(
        f"coverage target {coverage} unreachable; attainable maximum is "
        f"{running / total:.4f}"
    )


def build_label_space(
    train_records: Sequence[VisitRecord],
    mode: str = "root",
    k: int | None = None,
    coverage: float | None = None,
    root_k: int | None = None,
    root_coverage: float = 0.95,
) -> LabelSpace:
    """Select the classification codes from training-set frequencies.

    Root mode counts codes by their part before the dot and takes either the
    top ``k`` or the smallest prefix reaching ``coverage``.  Extended mode
    first selects root codes (``root_k``/``root_coverage``), then ranks every
    observed dotted variant of those roots plus the bare roots and takes the
    top ``k`` (1,000 by default).
    """
    if not train_records:
        raise DataError("cannot build a label space from zero records")
    if mode not in ("root", "extended"):
        raise ParameterError(f"unknown label-space mode {mode!r}")
    total = len(train_records)

    root_counts: dict[str, int] = {}
    for rec in train_records:
        root, _ = parse_icd(rec.icd_code)
        root_counts[root] = root_counts.get(root, 0) + 1

    if mode == "root":
        if k is None and coverage is None:
            raise ParameterError("root mode needs k or coverage")
        codes, covered = _select_by_frequency(root_counts, total, k, coverage)
        return LabelSpace(codes=codes, mode="root", coverage=covered)

    roots, _ = _select_by_frequency(
        root_counts, total, root_k, None if root_k is not None else root_coverage
    )
    root_set = set(roots)
    full_counts: dict[str, int] = {}
    for rec in train_records:
        root, spec = parse_icd(rec.icd_code)
        if root in root_set:
            code = format_icd(root, spec)
            full_counts[code] = full_counts.get(code, 0) + 1
    codes, covered = _select_by_frequency(
        full_counts, total, k if k is not None else 1000, None
    )
    return LabelSpace(codes=codes, mode="extended", coverage=covered)


def partition_by_space(
    records: Iterable[VisitRecord], space: LabelSpace
) -> tuple[list[VisitRecord], list[VisitRecord]]:
    """Split records into (inside-label-space, excluded)."""
    label_of = record_label_fn(space)
    inside, excluded = [], []
    for rec in records:
        (inside if label_of(rec) is not None else excluded).append(rec)
    return inside, excluded


def record_label_fn(space: LabelSpace):
    """Map a record to its label index in ``space`` (root-aware), or None.

    Root spaces match on the code root; extended spaces try the full code
    first and fall back to the bare root."""

    def label_of(rec: VisitRecord) -> int | None:
        root, spec = parse_icd(rec.icd_code)
        if space.mode == "root":
            return space.index.get(root)
        full = format_icd(root, spec)
        if full in space.index:
            return space.index[full]
        return space.index.get(root)

    return label_of


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split_train_val(
    records: Sequence[VisitRecord], ratio: float, seed: int
) -> tuple[list[VisitRecord], list[VisitRecord]]:
    """Random 80/20-style partition by visit; deterministic per seed."""
    if not 0.0 < ratio < 1.0:
        raise ParameterError("split ratio must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(records))
    n_train = int(round(ratio * len(records)))
    train = [records[i] for i in perm[:n_train]]
    val = [records[i] for i in perm[n_train:]]
    return train, val


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

_SYLLABLES = (
    "ba be bi bo bu da de di do du fa fe fi fo fu ga ge gi go gu "
    "ka ke ki ko ku la le li lo lu ma me mi mo mu na ne ni no nu "
    "pa pe pi po pu ra re ri ro ru sa se si so su ta te ti to tu "
    "va ve vi vo vu za ze zi zo zu"
).split()


@dataclass
class SyntheticSpec:
    """Knobs for the deterministic clinical-style record generator."""

    num_classes: int = 8
    train_size: int = 2000
    test_size: int = 500
    skew: float = 1.0
    seed: int = 42
    keywords_per_class: int = 6
    noise_vocab_size: int = 60
    min_keywords: int = 2
    max_keywords: int = 6
    symptom_noise_range: tuple[int, int] = (1, 4)
    anamnesis_len_range: tuple[int, int] = (3, 10)
    test_noise_shift: bool = False
    class_keywords: list[list[str]] | None = None
    noise_vocab: list[str] | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ParameterError("need at least 2 classes")
        if self.num_classes > 100:
            raise ParameterError("synthetic codes S00..S99 cap classes at 100")
        if not 0 < self.min_keywords <= self.max_keywords <= self.keywords_per_class:
            raise ParameterError("invalid keyword count range")
        if self.skew < 0:
            raise ParameterError("skew exponent must be non-negative")

    def class_probs(self) -> np.ndarray:
        """Zipf-style distribution over classes: p(c) proportional to
        (c+1)^-skew; skew 0 is uniform."""
        p = (np.arange(1, self.num_classes + 1, dtype=np.float64)) ** (-self.skew)
        return p / p.sum()

    def code_for_class(self, cls: int) -> str:
        return f"S{cls:02d}"


@dataclass
class SyntheticDataset:
    train: list[VisitRecord]
    test: list[VisitRecord]
    class_probs: list[float]
    class_keywords: list[list[str]]
    noise_vocab: list[str]


def _make_word(rng: np.random.Generator) -> str:
    n = int(rng.integers(2, 5))
    return "".join(rng.choice(_SYLLABLES) for _ in range(n))


def _unique_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        w = _make_word(rng)
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Emit train/test visit records with learnable disjoint keyword pools.

    Every symptoms field contains 2-6 keywords of the record's own class and
    none of any other class; anamnesis is pure noise.  Byte-identical output
    for a fixed spec."""
    rng = np.random.default_rng(spec.seed)
    taken: set[str] = set()
    pools = spec.class_keywords
    if pools is None:
        pools = [
            _unique_words(rng, spec.keywords_per_class, taken)
            for _ in range(spec.num_classes)
        ]
    else:
        for pool in pools:
            taken.update(pool)
    flat = [w for pool in pools for w in pool]
    if len(set(flat)) != len(flat):
        raise ParameterError("class keyword pools must be pairwise disjoint")
    noise = spec.noise_vocab or _unique_words(rng, spec.noise_vocab_size, taken)
    if set(noise) & set(flat):
        raise ParameterError("noise vocabulary overlaps a class keyword pool")
    shifted_noise = (
        _unique_words(rng, spec.noise_vocab_size, taken)
        if spec.test_noise_shift
        else noise
    )

    probs = spec.class_probs()
    base_date = datetime.date(2018, 1, 1)

    def make_record(split: str, i: int, noise_vocab: list[str]) -> VisitRecord:
        cls = int(rng.choice(spec.num_classes, p=probs))
        n_kw = int(rng.integers(spec.min_keywords, spec.max_keywords + 1))
        kws = list(rng.choice(pools[cls], size=n_kw, replace=False))
        lo, hi = spec.symptom_noise_range
        n_noise = int(rng.integers(lo, hi + 1))
        words = kws + list(rng.choice(noise_vocab, size=n_noise))
        order = rng.permutation(len(words))
        symptoms = " ".join(words[j] for j in order)
        alo, ahi = spec.anamnesis_len_range
        anamnesis = " ".join(
            rng.choice(noise_vocab, size=int(rng.integers(alo, ahi + 1)))
        )
        date = base_date + datetime.timedelta(days=int(rng.integers(0, 730)))
        return VisitRecord(
            patient_id=f"p{split}{i:06d}",
            visit_id=f"{split}-{i:06d}",
            date=date.isoformat(),
            symptoms_text=symptoms,
            anamnesis_text=anamnesis,
            icd_code=spec.code_for_class(cls),
        )

    train = [make_record("train", i, noise) for i in range(spec.train_size)]
    test = [make_record("test", i, shifted_noise) for i in range(spec.test_size)]
    return SyntheticDataset(
        train=train,
        test=test,
        class_probs=[float(p) for p in probs],
        class_keywords=pools,
        noise_vocab=noise,
    )


def keyword_class(text: str, pools: Sequence[Sequence[str]]) -> int | None:
    """Bag-of-keywords rule: the class whose pool intersects the text."""
    words = set(text.split())
    for cls, pool in enumerate(pools):
        if words & set(pool):
            return cls
    return None


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

_FIELDS = (
    "patient_id",
    "visit_id",
    "date",
    "symptoms_text",
    "anamnesis_text",
    "icd_code",
)


def write_records(records: Iterable[VisitRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps({f: getattr(rec, f) for f in _FIELDS},
                           ensure_ascii=False)
                + "\n"
            )


def read_records(path) -> list[VisitRecord]:
    """Load a JSONL dataset, enforcing visit-id uniqueness and code shape."""
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = VisitRecord(**{f: obj[f] for f in _FIELDS})
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad record: {exc}") from exc
            parse_icd(rec.icd_code)
            if rec.visit_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate visit_id "
                                f"{rec.visit_id!r}")
            seen.add(rec.visit_id)
            records.append(rec)
    return records
