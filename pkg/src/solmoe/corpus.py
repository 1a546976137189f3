"""Function-level corpus handling for Solidity sources.

Extraction is lexical: a comment/string-aware scanner matches braces and
slices out every function body found at the top level of a contract or
library block. Sources do not need to compile; they only need balanced
braces outside comments and strings.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from random import Random
from typing import Iterable

__all__ = [
    "VulnType",
    "Split",
    "FunctionRecord",
    "Corpus",
    "UnbalancedBraces",
    "MalformedRecord",
    "DuplicateId",
    "MissingLabel",
    "AlreadySplit",
    "extract_functions",
    "load_corpus",
    "save_corpus",
    "split_corpus",
    "load_label_manifest",
]


class VulnType(str, enum.Enum):
    REENTRANCY = "reentrancy"
    TIMESTAMP = "timestamp"
    OVERFLOW_UNDERFLOW = "overflow_underflow"
    DELEGATECALL = "delegatecall"

    @property
    def display_name(self) -> str:
        return {
            VulnType.REENTRANCY: "reentrancy",
            VulnType.TIMESTAMP: "timestamp dependence",
            VulnType.OVERFLOW_UNDERFLOW: "integer overflow/underflow",
            VulnType.DELEGATECALL: "delegatecall",
        }[self]


class Split(str, enum.Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"
    UNASSIGNED = "unassigned"


class UnbalancedBraces(ValueError):
    def __init__(self, message: str, offset: int, line: int):
        super().__init__(f"{message} (offset {offset}, line {line})")
        self.offset = offset
        self.line = line


class MalformedRecord(ValueError):
    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DuplicateId(ValueError):
    def __init__(self, record_id: str, line_number: int):
        super().__init__(f"duplicate id {record_id!r} at line {line_number}")
        self.record_id = record_id
        self.line_number = line_number


class MissingLabel(ValueError):
    pass


class AlreadySplit(ValueError):
    pass


@dataclass
class FunctionRecord:
    """One labeled smart-contract function."""

    id: str
    contract_name: str
    function_name: str
    source: str
    vuln_type: VulnType
    label: int
    split: Split = Split.UNASSIGNED

    def __post_init__(self):
        if not self.source:
            raise ValueError(f"record {self.id!r} has empty source")
        if self.label not in (0, 1):
            raise ValueError(f"record {self.id!r} has non-binary label {self.label!r}")
        self.vuln_type = VulnType(self.vuln_type)
        self.split = Split(self.split)

    def to_json_obj(self) -> dict:
        return {
            "id": self.id,
            "contract": self.contract_name,
            "function": self.function_name,
            "source": self.source,
            "vuln_type": self.vuln_type.value,
            "label": self.label,
            "split": self.split.value,
        }


@dataclass
class Corpus:
    """An ordered set of function records targeting one vulnerability type."""

    records: list[FunctionRecord]
    vuln_type: VulnType

    def __post_init__(self):
        self.vuln_type = VulnType(self.vuln_type)
        seen: set[str] = set()
        for r in self.records:
            if r.vuln_type != self.vuln_type:
                raise ValueError(
                    f"record {r.id!r} has vuln_type {r.vuln_type.value}, corpus targets {self.vuln_type.value}"
                )
            if r.id in seen:
                raise ValueError(f"duplicate record id {r.id!r}")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.records)

    def by_split(self, split: Split) -> list[FunctionRecord]:
        return [r for r in self.records if r.split == split]

    def class_counts(self) -> dict[int, int]:
        counts = {0: 0, 1: 0}
        for r in self.records:
            counts[r.label] += 1
        return counts


# ---------------------------------------------------------------------------
# Lexical scanner
# ---------------------------------------------------------------------------

_CONTAINER_KEYWORDS = {"contract", "library"}
_UNNAMED_FUNCTIONS = {"constructor", "fallback", "receive"}
_IDENT_START = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_$")
_IDENT_CONT = _IDENT_START | set("0123456789")


def _lex(text: str) -> list[tuple[str, str, int]]:
    """Tokenize into (kind, text, offset) triples, skipping comments and strings.

    Kinds: 'ident', 'lbrace', 'rbrace', 'semi', 'lparen'. Everything else is
    dropped; we only need enough structure to find blocks and declarations.
    """
    tokens: list[tuple[str, str, int]] = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c == "/" and i + 1 < n:
            if text[i + 1] == "/":
                j = text.find("\n", i)
                i = n if j == -1 else j + 1
                continue
            if text[i + 1] == "*":
                j = text.find("*/", i + 2)
                i = n if j == -1 else j + 2
                continue
        if c in "\"'":
            quote = c
            j = i + 1
            while j < n:
                if text[j] == "\\":
                    j += 2
                    continue
                if text[j] == quote:
                    break
                j += 1
            i = j + 1
            continue
        if c == "{":
            tokens.append(("lbrace", c, i))
        elif c == "}":
            tokens.append(("rbrace", c, i))
        elif c == ";":
            tokens.append(("semi", c, i))
        elif c == "(":
            tokens.append(("lparen", c, i))
        elif c in _IDENT_START:
            j = i + 1
            while j < n and text[j] in _IDENT_CONT:
                j += 1
            tokens.append(("ident", text[i:j], i))
            i = j
            continue
        i += 1
    return tokens


def _line_of(text: str, offset: int) -> int:
    return text.count("\n", 0, offset) + 1


def _check_braces(text: str, tokens: list[tuple[str, str, int]]) -> None:
    stack: list[int] = []
    for kind, _, off in tokens:
        if kind == "lbrace":
            stack.append(off)
        elif kind == "rbrace":
            if not stack:
                raise UnbalancedBraces("unmatched closing brace", off, _line_of(text, off))
            stack.pop()
    if stack:
        off = stack[-1]
        raise UnbalancedBraces("unclosed opening brace", off, _line_of(text, off))


def extract_functions(solidity_source: str) -> list[tuple[str, str, str]]:
    """Extract every function defined at the top level of a contract or library.

    Returns (contract_name, function_name, source) triples in file order.
    The source slice runs from the introducing keyword through the matching
    closing brace, so signatures and modifier invocations stay inline.
    Constructors and fallback/receive functions get synthesized names.
    Bodiless declarations (ending in ';') are skipped, as are modifier
    definitions. Braces inside comments and string literals never count.
    """
    text = solidity_source
    tokens = _lex(text)
    _check_braces(text, tokens)

    results: list[tuple[str, str, str]] = []
    n = len(tokens)
    i = 0
    depth = 0
    while i < n:
        kind, tok, off = tokens[i]
        if kind == "lbrace":
            depth += 1
        elif kind == "rbrace":
            depth -= 1
        elif kind == "ident" and tok in _CONTAINER_KEYWORDS and depth == 0:
            # contract/library NAME ... { ... }
            j = i + 1
            name = ""
            if j < n and tokens[j][0] == "ident":
                name = tokens[j][1]
                j += 1
            while j < n and tokens[j][0] != "lbrace":
                j += 1
            if j == n:
                break
            i, depth = _scan_container(text, tokens, j, name, results)
            continue
        i += 1
    return results


def _scan_container(
    text: str,
    tokens: list[tuple[str, str, int]],
    open_index: int,
    container_name: str,
    results: list[tuple[str, str, str]],
) -> tuple[int, int]:
    """Walk one contract/library block collecting its top-level functions.

    ``open_index`` points at the container's opening brace. Returns the
    token index just past the container's closing brace and the depth
    there (always 0 for a well-formed top-level container).
    """
    n = len(tokens)
    i = open_index + 1
    depth = 1
    while i < n and depth > 0:
        kind, tok, off = tokens[i]
        if kind == "lbrace":
            depth += 1
            i += 1
            continue
        if kind == "rbrace":
            depth -= 1
            i += 1
            continue
        if kind == "ident" and depth == 1 and (tok == "function" or tok in _UNNAMED_FUNCTIONS):
            start = off
            if tok == "function":
                # old-style unnamed fallback: "function () ..."
                if i + 1 < n and tokens[i + 1][0] == "ident":
                    func_name = tokens[i + 1][1]
                    i += 2
                else:
                    func_name = "fallback"
                    i += 1
            else:
                func_name = tok
                i += 1
            # scan to the body's opening brace, or a ';' for bodiless decls
            body_found = False
            while i < n:
                k2, _, off2 = tokens[i]
                if k2 == "semi":
                    i += 1
                    break
                if k2 == "lbrace":
                    body_found = True
                    break
                i += 1
            if not body_found:
                continue
            inner = 0
            end = None
            while i < n:
                k2, _, off2 = tokens[i]
                if k2 == "lbrace":
                    inner += 1
                elif k2 == "rbrace":
                    inner -= 1
                    if inner == 0:
                        end = off2 + 1
                        i += 1
                        break
                i += 1
            if end is None:
                break
            results.append((container_name, func_name, text[start:end]))
            continue
        i += 1
    return i, 0


# ---------------------------------------------------------------------------
# Corpus file I/O
# ---------------------------------------------------------------------------

_RECORD_FIELDS = ("id", "contract", "function", "source", "vuln_type", "label")


def _record_from_obj(obj: dict, line_number: int) -> FunctionRecord:
    if not isinstance(obj, dict):
        raise MalformedRecord(line_number, "record is not a JSON object")
    for f in _RECORD_FIELDS:
        if f == "label":
            continue
        if f not in obj:
            raise MalformedRecord(line_number, f"missing field {f!r}")
    if obj.get("label") is None:
        raise MissingLabel(f"line {line_number}: record {obj.get('id')!r} has no label")
    label = obj["label"]
    if label not in (0, 1):
        raise MalformedRecord(line_number, f"label must be 0 or 1, got {label!r}")
    try:
        return FunctionRecord(
            id=obj["id"],
            contract_name=obj["contract"],
            function_name=obj["function"],
            source=obj["source"],
            vuln_type=VulnType(obj["vuln_type"]),
            label=label,
            split=Split(obj.get("split", "unassigned")),
        )
    except (ValueError, KeyError) as exc:
        raise MalformedRecord(line_number, str(exc)) from exc


def load_label_manifest(path: str | Path) -> dict[str, int]:
    """Read a JSON-lines manifest of {"id", "label"} pairs."""
    path = Path(path)
    if not path.is_file():
        raise MissingLabel(f"label manifest not found: {path}")
    labels: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"bad manifest JSON: {exc}") from exc
            if "id" not in obj or obj.get("label") not in (0, 1):
                raise MissingLabel(f"line {lineno}: manifest entry needs id and binary label")
            labels[obj["id"]] = obj["label"]
    return labels


def records_from_sources(
    src_dir: str | Path, labels: dict[str, int], vuln_type: VulnType
) -> list[FunctionRecord]:
    """Extract functions from every .sol file under ``src_dir`` and join labels.

    Record ids are "<file stem>:<contract>.<function>", with "#2", "#3", ...
    appended to later overloads. Functions without a manifest entry are
    skipped; only labeled functions become records.
    """
    src_dir = Path(src_dir)
    records: list[FunctionRecord] = []
    seen_ids: dict[str, int] = {}
    for sol_path in sorted(src_dir.glob("*.sol")):
        text = sol_path.read_text(encoding="utf-8")
        for contract, function, source in extract_functions(text):
            base = f"{sol_path.stem}:{contract}.{function}"
            count = seen_ids.get(base, 0) + 1
            seen_ids[base] = count
            rec_id = base if count == 1 else f"{base}#{count}"
            if rec_id not in labels:
                continue
            records.append(
                FunctionRecord(
                    id=rec_id,
                    contract_name=contract,
                    function_name=function,
                    source=source,
                    vuln_type=vuln_type,
                    label=labels[rec_id],
                )
            )
    return records


def load_corpus(
    path: str | Path,
    vuln_type: VulnType | str | None = None,
    labels: str | Path | dict[str, int] | None = None,
) -> Corpus:
    """Load a corpus from a JSON-lines record file or a directory of .sol files.

    For the directory form a label manifest is required. ``vuln_type`` may be
    omitted for record files, in which case it is taken from the first record.
    """
    path = Path(path)
    if path.is_dir():
        if vuln_type is None:
            raise ValueError("vuln_type is required when ingesting a source directory")
        if labels is None:
            raise MissingLabel(f"no label manifest supplied for source directory {path}")
        if not isinstance(labels, dict):
            labels = load_label_manifest(labels)
        records = records_from_sources(path, labels, VulnType(vuln_type))
        return Corpus(records=records, vuln_type=VulnType(vuln_type))

    records: list[FunctionRecord] = []
    ids: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"invalid JSON: {exc}") from exc
            rec = _record_from_obj(obj, lineno)
            if rec.id in ids:
                raise DuplicateId(rec.id, lineno)
            ids[rec.id] = lineno
            records.append(rec)
    if vuln_type is None:
        if not records:
            raise ValueError("cannot infer vuln_type from an empty corpus file")
        vuln_type = records[0].vuln_type
    return Corpus(records=records, vuln_type=VulnType(vuln_type))


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in corpus.records:
            fh.write(json.dumps(r.to_json_obj(), sort_keys=True) + "\n")


def split_corpus(corpus: Corpus, seed: int) -> Corpus:
    """Assign train/valid/test splits, stratified by label, 3:1:1.

    Within each label class: round(n/5) records go to valid, round(n/5) to
    test, the remainder to train. Deterministic in ``seed``; record order
    is preserved. Every record must be unassigned.
    """
    for r in corpus.records:
        if r.split != Split.UNASSIGNED:
            raise AlreadySplit(f"record {r.id!r} already assigned to {r.split.value}")

    rng = Random(seed)
    assignment: dict[int, Split] = {}
    for label in (1, 0):
        indices = [i for i, r in enumerate(corpus.records) if r.label == label]
        rng.shuffle(indices)
        n = len(indices)
        n_eval = (n + 2) // 5  # round(n/5); fractions are never exactly .5
        for idx in indices[:n_eval]:
            assignment[idx] = Split.VALID
        for idx in indices[n_eval : 2 * n_eval]:
            assignment[idx] = Split.TEST
        for idx in indices[2 * n_eval :]:
            assignment[idx] = Split.TRAIN

    new_records = [
        replace(r, split=assignment[i]) for i, r in enumerate(corpus.records)
    ]
    return Corpus(records=new_records, vuln_type=corpus.vuln_type)
