"""Desk-scale classification tasks with planted, learnable label rules.

A suite shares a global pool of latent *motifs* (token bigrams built
from disjoint token pairs).  Each single-text task labels a sequence by
thresholding a weighted count of its own motif subset; each pair task
labels by whether any of its motifs occurs in both segments.  Motif
subsets are sliding windows over the pool, so adjacent tasks share half
their motifs -- the cross-task structure that lets a multi-task encoder
transfer to held-out tasks.

Sequences are assembled from shuffled units (filler tokens, intact
motif bigrams, and broken-motif decoys).  Fillers never belong to any
motif and bigrams never straddle unit boundaries, so motif counts are
exactly the planted counts, labels are exact functions of the token
stream, and a linear model over motif counts separates every task with
margin.  Decoy units plant motif tokens without the bigram, which keeps
bag-of-tokens statistics from leaking the label.

Real data comes in through :func:`load_dataset` (tab-separated
``label<TAB>text`` or ``label<TAB>text_a<TAB>text_b``) with a
whitespace tokenizer and a per-dataset vocabulary map.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import rng
from .encoder import CLS_ID, PAD_ID, SEP_ID
from .errors import IngestionError, InputError, ParameterError

FIRST_CONTENT_ID = 3

FAMILY_SINGLE = "motif-presence"
FAMILY_PAIR = "pair-overlap"

MOTIF_POOL_SIZE = 12
MOTIFS_PER_TASK = 4

_SINGLE_BODY = (11, 15)    # token count before CLS
_PAIR_SEGMENT = (5, 8)     # per-segment token count


@dataclass(frozen=True)
class Example:
    segments: Tuple[Tuple[int, ...], ...]
    label: int


@dataclass
class TaskDataset:
    name: str
    kind: str                  # "single" | "pair"
    family: str
    num_classes: int
    train: List[Example]
    dev: List[Example]
    motifs: Tuple[Tuple[int, int], ...] = ()
    label_rule: dict = field(default_factory=dict)
    vocab: Optional[Dict[str, int]] = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ParameterError(
                f"task {self.name!r} needs >= 2 classes, got {self.num_classes}")
        if not self.train or not self.dev:
            raise ParameterError(f"task {self.name!r} has an empty split")
        for ex in self.train + self.dev:
            if not 0 <= ex.label < self.num_classes:
                raise ParameterError(
                    f"task {self.name!r} has label {ex.label} out of range")
            want = 2 if self.kind == "pair" else 1
            if len(ex.segments) != want:
                raise ParameterError(
                    f"task {self.name!r} ({self.kind}) has an example with "
                    f"{len(ex.segments)} segments")


def count_motif(ids: Sequence[int], motif: Tuple[int, int]) -> int:
    a, b = motif
    return sum(1 for i in range(len(ids) - 1)
               if ids[i] == a and ids[i + 1] == b)


def _single_label(segments, motifs, weights, threshold) -> int:
    score = sum(w * count_motif(segments[0], m)
                for m, w in zip(motifs, weights))
    return 1 if score >= threshold else 0


def _pair_label(segments, motifs) -> int:
    a, b = segments
    for m in motifs:
        if count_motif(a, m) > 0 and count_motif(b, m) > 0:
            return 1
    return 0


class _SequenceBuilder:
    """Assembles token streams from filler/motif/decoy units."""

    def __init__(self, gen, pool, filler_ids):
        self.gen = gen
        self.pool = pool
        self.fillers = filler_ids

    def filler(self) -> int:
        return int(self.fillers[self.gen.integers(len(self.fillers))])

    def build(self, length: int, planted: Sequence[int]) -> Tuple[int, ...]:
        """A sequence of ~``length`` tokens containing exactly the
        planted motif occurrences (by pool index) plus decoys."""
        units = [list(self.pool[j]) for j in planted]
        # one or two broken-motif decoys so unigrams alone can't label
        for _ in range(int(self.gen.integers(1, 3))):
            a, b = self.pool[int(self.gen.integers(len(self.pool)))]
            if self.gen.integers(2) == 0:
                units.append([a, self.filler()])
            else:
                units.append([self.filler(), b])
        used = sum(len(u) for u in units)
        for _ in range(max(length - used, 1)):
            units.append([self.filler()])
        order = self.gen.permutation(len(units))
        ids = []
        for idx in order:
            ids.extend(units[idx])
        return tuple(ids)


def _plant_single(gen, task_motifs, pool_indices, builder, weights,
                  threshold, target, length):
    """Sample a planted multiset matching the target label, then build."""
    for _ in range(500):
        k = int(gen.integers(0, 4))
        planted = []
        for _ in range(k):
            if gen.random() < 0.7:
                planted.append(int(task_motifs[gen.integers(len(task_motifs))]))
            else:
                planted.append(int(pool_indices[gen.integers(len(pool_indices))]))
        score = sum(weights[task_motifs.index(j)]
                    for j in planted if j in task_motifs)
        if (1 if score >= threshold else 0) == target:
            return builder.build(length, planted)
    raise ParameterError("could not satisfy planted label rule; "
                         "regenerate the task with a different seed")


def _plant_pair(gen, task_motifs, pool_indices, builder, target, seg_len):
    for _ in range(500):
        sides = []
        for _ in range(2):
            k = int(gen.integers(0, 3))
            planted = [int(pool_indices[gen.integers(len(pool_indices))])
                       for _ in range(k)]
            sides.append(planted)
        if target == 1:
            shared = int(task_motifs[gen.integers(len(task_motifs))])
            sides[0].append(shared)
            sides[1].append(shared)
        overlap = any(j in sides[0] and j in sides[1] for j in task_motifs)
        if (1 if overlap else 0) == target:
            return tuple(builder.build(seg_len(), planted)
                         for planted in sides)
    raise ParameterError("could not satisfy pair-overlap rule; "
                         "regenerate the task with a different seed")


def _motif_pool(seed: int, vocab_size: int, pool_size: int):
    tokens_needed = 2 * pool_size
    content = vocab_size - FIRST_CONTENT_ID
    if content < tokens_needed + 8:
        raise ParameterError(
            f"vocab_size {vocab_size} too small for {pool_size} motifs")
    gen = rng.generator(rng.subseed(seed, "motifs"))
    chosen = gen.permutation(content)[:tokens_needed] + FIRST_CONTENT_ID
    pool = tuple((int(chosen[2 * i]), int(chosen[2 * i + 1]))
                 for i in range(pool_size))
    fillers = tuple(t for t in range(FIRST_CONTENT_ID, vocab_size)
                    if t not in set(chosen.tolist()))
    return pool, fillers


def _generate_split(gen, kind, size, task_motif_idx, pool, pool_indices,
                    builder, weights, threshold):
    examples = []
    for i in range(size):
        target = i % 2
        if kind == "single":
            length = int(gen.integers(_SINGLE_BODY[0], _SINGLE_BODY[1] + 1))
            ids = _plant_single(gen, task_motif_idx, pool_indices, builder,
                                weights, threshold, target, length)
            segments = (ids,)
            label = _single_label(segments, [pool[j] for j in task_motif_idx],
                                  weights, threshold)
        else:
            def seg_len():
                return int(gen.integers(_PAIR_SEGMENT[0], _PAIR_SEGMENT[1] + 1))
            segments = _plant_pair(gen, task_motif_idx, pool_indices, builder,
                                   target, seg_len)
            label = _pair_label(segments, [pool[j] for j in task_motif_idx])
        if label != target:
            raise ParameterError("planted label does not match recount; "
                                 "generator invariant violated")
        examples.append(Example(segments=segments, label=label))
    return examples


def majority_fraction(examples: Sequence[Example]) -> float:
    counts: Dict[int, int] = {}
    for ex in examples:
        counts[ex.label] = counts.get(ex.label, 0) + 1
    return max(counts.values()) / len(examples)


def generate_task_suite(num_tasks: int, seed: int, sizes: Sequence[int], *,
                        dev_size: int = 200, vocab_size: int = 64,
                        pool_size: int = MOTIF_POOL_SIZE) -> List[TaskDataset]:
    """Deterministically generate a planted-rule task suite.

    ``sizes`` gives per-task training-set sizes.  Every third task is a
    pair task; the rest are single-text tasks.  Labels alternate by
    construction, so the majority-class baseline is ~50%, and adjacent
    tasks share half of their motifs.
    """
    if num_tasks < 2:
        raise ParameterError(f"need >= 2 tasks, got {num_tasks}")
    if len(sizes) != num_tasks:
        raise ParameterError(
            f"sizes has {len(sizes)} entries for {num_tasks} tasks")
    if any(s < 2 for s in sizes):
        raise ParameterError("every task needs a train size >= 2")
    if dev_size < 2:
        raise ParameterError("dev_size must be >= 2")

    pool, fillers = _motif_pool(seed, vocab_size, pool_size)
    pool_indices = tuple(range(pool_size))
    suite = []
    for i in range(num_tasks):
        kind = "pair" if i % 3 == 2 else "single"
        family = FAMILY_PAIR if kind == "pair" else FAMILY_SINGLE
        task_motif_idx = [(2 * i + j) % pool_size
                          for j in range(MOTIFS_PER_TASK)]
        gen = rng.generator(rng.subseed(seed, "task", i))
        builder = _SequenceBuilder(gen, pool, fillers)
        weights = [int(gen.integers(1, 4)) for _ in task_motif_idx]
        threshold = float(min(weights)) + 0.5 if kind == "single" else None

        train = _generate_split(gen, kind, int(sizes[i]), task_motif_idx,
                                pool, pool_indices, builder, weights, threshold)
        dev = _generate_split(gen, kind, dev_size, task_motif_idx,
                              pool, pool_indices, builder, weights, threshold)
        for split in (train, dev):
            if majority_fraction(split) > 0.65:
                raise ParameterError(
                    f"task {i} is too unbalanced; generator invariant violated")
        task = TaskDataset(
            name=f"task{i:02d}-{family}", kind=kind, family=family,
            num_classes=2, train=train, dev=dev,
            motifs=tuple(pool[j] for j in task_motif_idx),
            label_rule=(dict(weights=weights, threshold=threshold)
                        if kind == "single" else dict(rule="overlap>=1")))
        suite.append(task)

    # adjacent windows overlap by construction; verify the transfer invariant
    for i, task in enumerate(suite):
        best = 0.0
        for j, other in enumerate(suite):
            if i == j:
                continue
            shared = len(set(task.motifs) & set(other.motifs))
            best = max(best, shared / len(task.motifs))
        if best < 0.5:
            raise ParameterError(
                f"task {i} shares only {best:.0%} of its motifs; "
                "suite invariant violated")
    return suite


# ---------------------------------------------------------------------------
# encoding


def _tokenize(text: str, vocab: Optional[Dict[str, int]]):
    tokens = text.split()
    if not tokens:
        raise InputError("empty text")
    if vocab is None:
        raise InputError("text segments require a vocabulary map")
    ids = []
    for tok in tokens:
        if tok not in vocab:
            raise InputError(f"token {tok!r} not in vocabulary")
        ids.append(vocab[tok])
    return ids


def encode_example(example, vocab: Optional[Dict[str, int]] = None,
                   max_positions: int = 64) -> List[int]:
    """Token-id sequence ``[CLS] a`` or ``[CLS] a [SEP] b`` for one example.

    ``example`` may be an :class:`Example`, a string, a pair of strings,
    or pre-tokenized id sequences.  Overlong inputs are truncated by
    repeatedly dropping the last token of the currently longest segment.
    """
    if isinstance(example, Example):
        raw = example.segments
    elif isinstance(example, str):
        raw = (example,)
    else:
        raw = tuple(example)
        if len(raw) not in (1, 2):
            raise InputError(
                f"expected one or two segments, got {len(raw)}")
    segments = []
    for seg in raw:
        if isinstance(seg, str):
            segments.append(list(_tokenize(seg, vocab)))
        else:
            ids = [int(t) for t in seg]
            if not ids:
                raise InputError("empty token segment")
            segments.append(ids)

    overhead = 1 + (len(segments) - 1)      # CLS plus one SEP for pairs
    while sum(len(s) for s in segments) + overhead > max_positions:
        longest = max(range(len(segments)), key=lambda i: len(segments[i]))
        if not segments[longest]:
            raise InputError(
                f"cannot fit example into {max_positions} positions")
        segments[longest].pop()

    out = [CLS_ID] + segments[0]
    if len(segments) == 2:
        out += [SEP_ID] + segments[1]
    return out


# ---------------------------------------------------------------------------
# ingestion


def _read_tsv(path: str):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            rows.append((lineno, line.split("\t")))
    return rows


def load_dataset(path: str, schema: Optional[dict] = None) -> TaskDataset:
    """Ingest a directory containing ``train.tsv`` and ``dev.tsv``.

    Rows are ``label<TAB>text`` (single) or ``label<TAB>text_a<TAB>
    text_b`` (pair); the kind is inferred from the column count.  Class
    indices follow sorted train-set label order, and the vocabulary
    maps whitespace tokens to ids 3.. in frequency order.
    """
    schema = schema or {}
    train_rows = _read_tsv(os.path.join(path, "train.tsv"))
    dev_rows = _read_tsv(os.path.join(path, "dev.tsv"))
    if not train_rows or not dev_rows:
        raise IngestionError(f"{path}: empty train or dev split")

    ncols = len(train_rows[0][1])
    if ncols not in (2, 3):
        raise IngestionError("expected 2 or 3 tab-separated columns",
                             line=train_rows[0][0])
    kind = "single" if ncols == 2 else "pair"

    def parse(rows, known_labels=None):
        parsed = []
        for lineno, cols in rows:
            if len(cols) != ncols:
                raise IngestionError(
                    f"expected {ncols} columns, got {len(cols)}", line=lineno)
            label, texts = cols[0], cols[1:]
            if any(not t.strip() for t in texts):
                raise IngestionError("empty text field", line=lineno)
            if known_labels is not None and label not in known_labels:
                raise IngestionError(
                    f"label {label!r} appears in dev but not train",
                    line=lineno)
            parsed.append((label, texts))
        return parsed

    train_parsed = parse(train_rows)
    labels = sorted({label for label, _ in train_parsed})
    if len(labels) < 2:
        raise IngestionError(
            f"dataset has a single class {labels[0]!r}; need >= 2",
            line=train_rows[0][0])
    label_index = {lab: i for i, lab in enumerate(labels)}
    dev_parsed = parse(dev_rows, known_labels=label_index)

    freq: Dict[str, int] = {}
    for _, texts in train_parsed + dev_parsed:
        for text in texts:
            for tok in text.split():
                freq[tok] = freq.get(tok, 0) + 1
    vocab = {tok: FIRST_CONTENT_ID + i
             for i, tok in enumerate(sorted(freq, key=lambda t: (-freq[t], t)))}

    def to_examples(parsed):
        return [Example(segments=tuple(tuple(_tokenize(t, vocab))
                                       for t in texts),
                        label=label_index[label])
                for label, texts in parsed]

    name = schema.get("name", os.path.basename(os.path.normpath(path)))
    return TaskDataset(
        name=name, kind=kind, family=schema.get("family", "ingested"),
        num_classes=len(labels), train=to_examples(train_parsed),
        dev=to_examples(dev_parsed), vocab=vocab)


# ---------------------------------------------------------------------------
# suite persistence (JSON-lines)


def save_suite(directory: str, suite: List[TaskDataset], seed: int) -> None:
    os.makedirs(os.path.join(directory, "tasks"), exist_ok=True)
    with open(os.path.join(directory, "suite.jsonl"), "w") as fh:
        for task in suite:
            fh.write(json.dumps(dict(
                name=task.name, kind=task.kind, family=task.family,
                num_classes=task.num_classes, train_size=len(task.train),
                dev_size=len(task.dev), seed=seed,
                motifs=[list(m) for m in task.motifs],
                label_rule=task.label_rule)) + "\n")
    for task in suite:
        path = os.path.join(directory, "tasks", f"{task.name}.jsonl")
        with open(path, "w") as fh:
            for split, examples in (("train", task.train), ("dev", task.dev)):
                for ex in examples:
                    fh.write(json.dumps(dict(
                        split=split, label=ex.label,
                        segments=[list(s) for s in ex.segments])) + "\n")


def load_suite(directory: str) -> List[TaskDataset]:
    manifest_path = os.path.join(directory, "suite.jsonl")
    if not os.path.exists(manifest_path):
        raise IngestionError(f"no suite.jsonl under {directory}")
    suite = []
    with open(manifest_path) as fh:
        for line in fh:
            meta = json.loads(line)
            path = os.path.join(directory, "tasks", f"{meta['name']}.jsonl")
            train, dev = [], []
            with open(path) as tfh:
                for row in tfh:
                    rec = json.loads(row)
                    ex = Example(segments=tuple(tuple(s)
                                                for s in rec["segments"]),
                                 label=rec["label"])
                    (train if rec["split"] == "train" else dev).append(ex)
            suite.append(TaskDataset(
                name=meta["name"], kind=meta["kind"], family=meta["family"],
                num_classes=meta["num_classes"], train=train, dev=dev,
                motifs=tuple(tuple(m) for m in meta.get("motifs", [])),
                label_rule=meta.get("label_rule", {})))
    return suite
