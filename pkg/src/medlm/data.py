"""Corpus construction: KG linearization, dialogue flattening, instruction
standardization, exact-substring dedup, block packing and JSONL loading.

All stages are pure functions of their inputs and deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import model as M
from .errors import DataError

# Relation labels rendered in this order; unknown labels sort after, lexicographic.
KG_LABEL_ORDER = ("病因", "症状", "推荐用药")
KG_LABEL_TEXT = {"病因": "的病因", "症状": "的症状", "推荐用药": "的推荐用药"}

PROMPT_Q = "Q:"
PROMPT_A = "A:"

MIN_RESIDUAL_TOKENS = 10  # docs shorter than this after span removal are dropped


@dataclass(frozen=True)
class QaRecord:
    question: str
    answer: str

    def __post_init__(self):
        if not self.question.strip() or not self.answer.strip():
            raise DataError("QaRecord: question and answer must be nonempty")


@dataclass(frozen=True)
class KgEntity:
    name: str
    relations: tuple  # of (label, value)

    def __post_init__(self):
        if not self.name:
            raise DataError("KgEntity: empty name")


@dataclass(frozen=True)
class DialogueRecord:
    turns: tuple  # of (speaker, utterance), speakers alternate starting "patient"

    def __post_init__(self):
        if len(self.turns) < 2:
            raise DataError("DialogueRecord: needs at least 2 turns")
        for i, (speaker, _) in enumerate(self.turns):
            want = "patient" if i % 2 == 0 else "doctor"
            if speaker != want:
                raise DataError(f"DialogueRecord: turn {i} speaker {speaker!r}, expected {want!r}")


@dataclass(frozen=True)
class SftExample:
    instruction: str
    output: str
    input: str = ""
    history: tuple = ()

    def __post_init__(self):
        if not self.instruction or not self.output:
            raise DataError("SftExample: instruction and output must be nonempty")


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    preferred: str
    rejected: str

    def __post_init__(self):
        if not (self.prompt and self.preferred and self.rejected):
            raise DataError("PreferencePair: all fields must be nonempty")
        if self.preferred == self.rejected:
            raise DataError("PreferencePair: preferred == rejected")


@dataclass
class PipelineStats:
    count: int = 0
    token_count: int = 0
    warnings: int = 0
    rejected: list = field(default_factory=list)


def _canonical_relations(relations):
    def key(rel):
        label, value = rel
        try:
            rank = KG_LABEL_ORDER.index(label)
        except ValueError:
            rank = len(KG_LABEL_ORDER)
        return (rank, label, value)

    return sorted(relations, key=key)


def linearize_kg(entity, template="default", stats=None):
    """One deterministic text per entity: name once, one sentence per label."""
    if template != "default":
        raise DataError(f"linearize_kg: unknown template {template!r}")
    if not entity.relations:
        if stats is not None:
            stats.warnings += 1
        return f"{entity.name}。"
    by_label = {}
    for label, value in _canonical_relations(entity.relations):
        by_label.setdefault(label, []).append(value)
    parts = []
    for label, values in by_label.items():
        label_text = KG_LABEL_TEXT.get(label, "的" + label)
        parts.append(f"{entity.name}{label_text}：{'、'.join(values)}。")
    return "".join(parts)


def flatten_dialogue(dialogue, mode):
    """pretrain_text -> speaker-tagged transcript; sft_multi_turn -> SftExamples."""
    if mode == "pretrain_text":
        lines = []
        for speaker, utterance in dialogue.turns:
            tag = PROMPT_Q if speaker == "patient" else PROMPT_A
            lines.append(tag + utterance)
        return "\n".join(lines)
    if mode == "sft_multi_turn":
        examples = []
        history = []
        for i in range(1, len(dialogue.turns), 2):
            prompt = dialogue.turns[i - 1][1]
            response = dialogue.turns[i][1]
            examples.append(
                SftExample(instruction=prompt, output=response, history=tuple(history))
            )
            history.append((prompt, response))
        return examples
    raise DataError(f"flatten_dialogue: unknown mode {mode!r}")


def standardize_instruction(raw, stats=None):
    """Map a source-tagged record into the uniform SFT schema.

    Accepted kinds: qa, exam, dialogue, instruction, sft (already uniform).
    Returns None (and logs a rejection) on unknown kinds.
    """
    kind = raw.get("kind")
    try:
        if kind == "qa":
            return SftExample(instruction=raw["question"], output=raw["answer"])
        if kind == "exam":
            question = raw["question"]
            options = raw.get("options") or {}
            if options:
                rendered = " ".join(f"{k}.{v}" for k, v in sorted(options.items()))
                question = f"{question} {rendered}"
            output = raw["answer"]
            if raw.get("explanation"):
                output = f"{output} {raw['explanation']}"
            return SftExample(instruction=question, output=output)
        if kind == "dialogue":
            record = DialogueRecord(turns=tuple((s, u) for s, u in raw["turns"]))
            return flatten_dialogue(record, "sft_multi_turn")[-1]
        if kind == "instruction":
            return SftExample(
                instruction=raw["instruction"],
                input=raw.get("input", ""),
                output=raw["output"],
            )
        if kind == "sft":
            return SftExample(
                instruction=raw["instruction"],
                input=raw.get("input", ""),
                history=tuple((p, r) for p, r in raw.get("history", ())),
                output=raw["output"],
            )
    except (KeyError, DataError) as exc:
        if stats is not None:
            stats.rejected.append(f"{kind}: {exc}")
        return None
    if stats is not None:
        stats.rejected.append(f"unknown kind {kind!r}")
    return None


def render_prompt(ex):
    """Rendered prompt text for an SftExample; response is appended by the trainer."""
    parts = []
    for prompt, response in ex.history:
        parts.append(f"{PROMPT_Q}{prompt}\n{PROMPT_A}{response}\n")
    question = ex.instruction if not ex.input else f"{ex.instruction}\n{ex.input}"
    parts.append(f"{PROMPT_Q}{question}\n{PROMPT_A}")
    return "".join(parts)


def render_bare_prompt(prompt):
    """Prompt rendering for preference pairs (same surface form as SFT)."""
    return f"{PROMPT_Q}{prompt}\n{PROMPT_A}"


# -- exact-substring dedup --------------------------------------------


def _mark_duplicate_windows(docs_tokens, min_span):
    """Mark every window of min_span tokens whose content appeared at an
    earlier (doc, offset) position. Windows never cross document bounds."""
    seen = {}
    marks = []
    found = False
    for tokens in docs_tokens:
        mark = [False] * len(tokens)
        for i in range(len(tokens) - min_span + 1):
            key = tuple(tokens[i : i + min_span])
            if key in seen:
                for j in range(i, i + min_span):
                    mark[j] = True
                found = True
            else:
                seen[key] = True
        marks.append(mark)
    return marks, found


def dedup_corpus(docs, min_span=50):
    """Remove later occurrences of any repeated token span of length >= min_span.

    Tokens are Unicode characters. Spans are compared within documents
    (position order: document order, then offset); the earliest
    occurrence is kept. Documents left with fewer than
    MIN_RESIDUAL_TOKENS tokens are dropped. Runs to a fixpoint, so the
    result is idempotent and contains no duplicate span of min_span or
    longer. Returns (kept_docs, report) where report lists
    (doc_index, start, end) of every removed span.
    """
    if min_span < 2:
        raise DataError("dedup_corpus: min_span must be >= 2")
    docs_tokens = [list(doc) for doc in docs]
    alive = list(range(len(docs)))
    report = []
    while True:
        marks, found = _mark_duplicate_windows(docs_tokens, min_span)
        if not found:
            break
        next_tokens = []
        next_alive = []
        for doc_i, tokens, mark in zip(alive, docs_tokens, marks):
            kept = [t for t, m in zip(tokens, mark) if not m]
            start = None
            for j, m in enumerate(mark + [False]):
                if m and start is None:
                    start = j
                elif not m and start is not None:
                    report.append((doc_i, start, j))
                    start = None
            if len(kept) >= MIN_RESIDUAL_TOKENS:
                next_tokens.append(kept)
                next_alive.append(doc_i)
            elif len(kept) < len(tokens):
                report.append((doc_i, -1, -1))  # whole doc dropped
        docs_tokens = next_tokens
        alive = next_alive
    return ["".join(t) for t in docs_tokens], report


# -- block packing and loading ----------------------------------------


def token_stream(docs, vocab):
    """Encoded docs joined with EOS between consecutive documents."""
    stream = []
    for i, doc in enumerate(docs):
        if i > 0:
            stream.append(M.EOS)
        try:
            stream.extend(M.encode(vocab, doc))
        except Exception as exc:
            raise DataError(f"doc {i}: {exc}") from exc
    return stream


def pack_blocks(docs, vocab, block_size):
    """Chunk the EOS-joined stream into exact block_size windows; drop the tail."""
    if block_size < 2:
        raise DataError("pack_blocks: block_size must be >= 2")
    stream = token_stream(docs, vocab)
    n_blocks = len(stream) // block_size
    return [stream[i * block_size : (i + 1) * block_size] for i in range(n_blocks)]


def _parse_cpt(obj):
    text = obj["text"]
    if not isinstance(text, str) or not text.strip():
        raise DataError("cpt record: empty text")
    return text


def _parse_sft(obj):
    return SftExample(
        instruction=obj["instruction"],
        input=obj.get("input", ""),
        history=tuple((p, r) for p, r in obj.get("history", ())),
        output=obj["output"],
    )


def _parse_dpo(obj):
    return PreferencePair(
        prompt=obj["prompt"], preferred=obj["chosen"], rejected=obj["rejected"]
    )


_PARSERS = {"cpt": _parse_cpt, "sft": _parse_sft, "dpo": _parse_dpo}


def record_text(record):
    """All text carried by a record, for token accounting."""
    if isinstance(record, str):
        return record
    if isinstance(record, SftExample):
        return render_prompt(record) + record.output
    if isinstance(record, PreferencePair):
        return record.prompt + record.preferred + record.rejected
    raise DataError(f"record_text: unsupported record {type(record)}")


def load_dataset(path, schema, vocab=None):
    """Read one-JSON-record-per-line; returns (records, PipelineStats).

    A malformed line raises DataError naming the line number; a record
    that fails its invariants is logged to stats.rejected and skipped.
    """
    if schema not in _PARSERS:
        raise DataError(f"load_dataset: unknown schema {schema!r}")
    parse = _PARSERS[schema]
    records = []
    stats = PipelineStats()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            try:
                records.append(parse(obj))
            except (KeyError, TypeError, DataError) as exc:
                stats.rejected.append(f"line {lineno}: {exc}")
    stats.count = len(records)
    if vocab is not None:
        stats.token_count = sum(len(M.encode(vocab, record_text(r))) for r in records)
    return records, stats


def save_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def stats_table(rows):
    """Plain-text table: (dataset, samples, tokens, size-bytes) rows."""
    header = f"{'Dataset':<12} {'# of samples':>12} {'# of tokens':>12} {'Size':>10}"
    lines = [header, "-" * len(header)]
    for name, samples, tokens, size in rows:
        lines.append(f"{name:<12} {samples:>12} {tokens:>12} {size:>9}B")
    return "\n".join(lines)
