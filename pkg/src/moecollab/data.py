"""JSONL ingestion, synthetic multi-domain corpora and stratified splits."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ValidationError


@dataclass(frozen=True)
class Example:
    text: str
    label: int
    domain: int


@dataclass(frozen=True)
class SynthSpec:
    num_domains: int = 4
    classes_per_domain: tuple[int, ...] = (3, 3, 3, 3)
    vocab_words_per_class: int = 8
    samples_per_class: int = 40
    noise_rate: float = 0.15
    doc_length: int = 12
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes_per_domain", tuple(int(c) for c in self.classes_per_domain))
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValidationError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")
        counts = (self.num_domains, self.vocab_words_per_class, self.samples_per_class, self.doc_length)
        if min(counts) < 1 or not self.classes_per_domain or min(self.classes_per_domain) < 1:
            raise ValidationError("all SynthSpec counts must be >= 1")
        if len(self.classes_per_domain) != self.num_domains:
            raise ValidationError(
                f"classes_per_domain has {len(self.classes_per_domain)} entries for "
                f"{self.num_domains} domains")

    @property
    def domain_names(self) -> list[str]:
        return [f"domain{d}" for d in range(self.num_domains)]

    @property
    def label_names(self) -> list[str]:
        return [f"class{c}" for c in range(max(self.classes_per_domain))]


@dataclass
class Corpus:
    """Examples together with the name vocabularies their ids index into."""

    examples: list[Example]
    label_names: list[str]
    domain_names: list[str]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def subset(self, examples) -> "Corpus":
        return Corpus(list(examples), self.label_names, self.domain_names, dict(self.meta))

    def by_domain(self, domain: int) -> "Corpus":
        return self.subset(e for e in self.examples if e.domain == domain)

    @property
    def texts(self) -> list[str]:
        return [e.text for e in self.examples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)

    @property
    def domains(self) -> np.ndarray:
        return np.array([e.domain for e in self.examples], dtype=np.int64)


def word_pool(domain: int, label: int, size: int) -> list[str]:
    return [f"d{domain}c{label}w{j}" for j in range(size)]


def synth_generate(spec: SynthSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    pools = {(d, c): word_pool(d, c, spec.vocab_words_per_class)
             for d in range(spec.num_domains) for c in range(spec.classes_per_domain[d])}
    keys = list(pools)
    examples = []
    for d in range(spec.num_domains):
        for c in range(spec.classes_per_domain[d]):
            own = pools[(d, c)]
            others = [w for k in keys if k != (d, c) for w in pools[k]]
            for _ in range(spec.samples_per_class):
                words = [own[i] for i in rng.integers(0, len(own), spec.doc_length)]
                if others:
                    flips = rng.random(spec.doc_length) < spec.noise_rate
                    for i in np.flatnonzero(flips):
                        words[i] = others[rng.integers(0, len(others))]
                examples.append(Example(" ".join(words), c, d))
    order = rng.permutation(len(examples))
    return Corpus([examples[i] for i in order], spec.label_names, spec.domain_names,
                  {"synth": {**spec.__dict__, "classes_per_domain": list(spec.classes_per_domain)}})


def split(corpus: Corpus, train_fraction: float, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Stratified split by (domain, label)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, e in enumerate(corpus.examples):
        groups[(e.domain, e.label)].append(i)
    rng = np.random.default_rng(seed)
    train_idx, eval_idx = [], []
    for key in sorted(groups):
        idx = groups[key]
        if len(idx) < 2:
            raise ValidationError(f"stratum domain={key[0]} label={key[1]} has fewer than 2 examples")
        idx = [idx[i] for i in rng.permutation(len(idx))]
        n_train = min(max(1, int(round(train_fraction * len(idx)))), len(idx) - 1)
        train_idx += idx[:n_train]
        eval_idx += idx[n_train:]
    train_idx.sort()
    eval_idx.sort()
    return (corpus.subset(corpus.examples[i] for i in train_idx),
            corpus.subset(corpus.examples[i] for i in eval_idx))


def _resolve(value, mapping: dict[str, int] | None, size: int | None, what: str, lineno: int) -> int:
    if isinstance(value, bool):
        raise ValidationError(f"line {lineno}: {what} must be a name or integer id")
    if isinstance(value, int):
        if value < 0 or (size is not None and value >= size):
            raise ValidationError(f"line {lineno}: {what} id {value} out of range")
        return value
    if isinstance(value, str) and mapping is not None:
        if value not in mapping:
            raise ValidationError(f"line {lineno}: unknown {what} {value!r}")
        return mapping[value]
    raise ValidationError(f"line {lineno}: cannot resolve {what} {value!r}")


def load_jsonl(path, label_map: dict[str, int] | None = None,
               domain_map: dict[str, int] | None = None) -> list[Example]:
    """Read ``{"text", "label", "domain"}`` objects, one per line.

    Labels and domains may be integer ids or names resolved through the maps.
    Errors name the offending 1-based line number.
    """
    out = []
    n_labels = len(label_map) if label_map is not None else None
    n_domains = len(domain_map) if domain_map is not None else None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ValidationError(f"line {lineno}: expected a JSON object")
            for key in ("text", "label", "domain"):
                if key not in obj:
                    raise ValidationError(f"line {lineno}: missing field {key!r}")
            if not isinstance(obj["text"], str):
                raise ValidationError(f"line {lineno}: text must be a string")
            out.append(Example(obj["text"],
                               _resolve(obj["label"], label_map, n_labels, "label", lineno),
                               _resolve(obj["domain"], domain_map, n_domains, "domain", lineno)))
    return out


def write_jsonl(examples, path, label_names: list[str] | None = None,
                domain_names: list[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            row = {"text": e.text,
                   "label": label_names[e.label] if label_names else e.label,
                   "domain": domain_names[e.domain] if domain_names else e.domain}
            fh.write(json.dumps(row) + "\n")


def meta_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".meta.json")


def save_corpus(corpus: Corpus, path) -> None:
    """Write JSONL with names plus a sidecar ``<file>.meta.json`` fixing the id order."""
    write_jsonl(corpus.examples, path, corpus.label_names, corpus.domain_names)
    meta = {"label_names": corpus.label_names, "domain_names": corpus.domain_names, **corpus.meta}
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_corpus(path, label_names: list[str] | None = None,
                domain_names: list[str] | None = None) -> Corpus:
    """Load a JSONL corpus, taking name vocabularies from the sidecar when not given.

    Without a sidecar, names are taken in order of first appearance.
    """
    mp = meta_path(path)
    meta = json.loads(mp.read_text()) if mp.exists() else {}
    label_names = label_names or meta.get("label_names")
    domain_names = domain_names or meta.get("domain_names")
    if label_names is None or domain_names is None:
        seen_l, seen_d = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    continue
                if not isinstance(obj, dict):
                    continue
                for key, seen in (("label", seen_l), ("domain", seen_d)):
                    v = obj.get(key)
                    if isinstance(v, str) and v not in seen:
                        seen.append(v)
        label_names = label_names or seen_l
        domain_names = domain_names or seen_d
    examples = load_jsonl(path,
                          {n: i for i, n in enumerate(label_names)} if label_names else None,
                          {n: i for i, n in enumerate(domain_names)} if domain_names else None)
    if not label_names:
        label_names = [str(i) for i in range(max((e.label for e in examples), default=-1) + 1)]
    if not domain_names:
        domain_names = [str(i) for i in range(max((e.domain for e in examples), default=-1) + 1)]
    extra = {k: v for k, v in meta.items() if k not in ("label_names", "domain_names")}
    return Corpus(examples, list(label_names), list(domain_names), extra)
