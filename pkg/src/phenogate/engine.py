"""Sequential rule-cascade evaluation over per-nucleus gate vectors.

Steps run in program order.  The first matching exclude step ends the
walk with an Excluded outcome; annotate matches are collected along the
way, and a nucleus that survives every exclude is Assigned when exactly
one class matched, Unassigned when none did.  Two or more matches mean
the program itself is unsound and raise a multi-assignment error.

Two evaluators are provided on purpose.  ``evaluate_naive`` walks the
expression trees directly and exists as an oracle; the fast path tabulates
the compiled program's outcome for every combination of the referenced
markers once, then answers batch queries by table lookup.  The two are
compared exhaustively by ``enumerate_rule_space``.
"""

from __future__ import annotations

import csv
import io
import threading
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Union

import numpy as np

from .errors import (
    CapacityError,
    MissingChannelError,
    MissingThresholdError,
    MultiAssignmentError,
)
from .rulelang import (
    And,
    CompiledProgram,
    CompiledStep,
    GateExpr,
    GroupRef,
    Marker,
    Not,
    Or,
    RuleProgram,
    StepKind,
    compile_program,
)

if TYPE_CHECKING:
    from .slideio import NucleusRecord, NucleusTable, ThresholdSet

# Outcome codes used by the packed arrays (MULTI only ever appears inside
# lookup tables; it is converted to an exception before reaching callers).
CODE_EXCLUDED = 0
CODE_ASSIGNED = 1
CODE_UNASSIGNED = 2
CODE_MULTI = 3

MAX_MEMO_BITS = 16  # outcome tables above 2^16 entries are built transiently
MAX_ENUM_BITS = 24


class OutcomeKind(Enum):
    EXCLUDED = "excluded"
    ASSIGNED = "assigned"
    UNASSIGNED = "unassigned"


@dataclass(frozen=True)
class PhenotypeOutcome:
    kind: OutcomeKind
    class_name: str | None = None
    step: int | None = None

    @staticmethod
    def excluded(step: int) -> "PhenotypeOutcome":
        return PhenotypeOutcome(OutcomeKind.EXCLUDED, None, step)

    @staticmethod
    def assigned(class_name: str, step: int) -> "PhenotypeOutcome":
        return PhenotypeOutcome(OutcomeKind.ASSIGNED, class_name, step)

    @staticmethod
    def unassigned() -> "PhenotypeOutcome":
        return _UNASSIGNED_SINGLETON


_UNASSIGNED_SINGLETON = PhenotypeOutcome(OutcomeKind.UNASSIGNED)


@dataclass(frozen=True)
class GateVector:
    """One nucleus's positive/negative calls packed into a 64-bit word."""

    bits: int
    panel: tuple[str, ...]

    def __post_init__(self):
        if self.panel and self.bits >> len(self.panel):
            raise ValueError("gate bits set beyond the panel size")

    @classmethod
    def from_markers(cls, positive: Iterable[str], panel: Sequence[str]) -> "GateVector":
        bits = 0
        for name in positive:
            bits |= 1 << list(panel).index(name)
        return cls(bits, tuple(panel))

    def positive_markers(self) -> tuple[str, ...]:
        return tuple(n for i, n in enumerate(self.panel) if self.bits >> i & 1)

    def __int__(self) -> int:
        return self.bits


GateLike = Union[GateVector, int]


def _as_word(gates: GateLike) -> int:
    return gates.bits if isinstance(gates, GateVector) else int(gates)


# --- naive tree-walk oracle -------------------------------------------------

def _eval_expr_scalar(expr: GateExpr, bit_of: dict[str, int], groups: dict[str, bool],
                      bits: int) -> bool:
    if isinstance(expr, Marker):
        return bool(bits >> bit_of[expr.name] & 1)
    if isinstance(expr, GroupRef):
        return groups[expr.name]
    if isinstance(expr, Not):
        return not _eval_expr_scalar(expr.operand, bit_of, groups, bits)
    if isinstance(expr, And):
        return (_eval_expr_scalar(expr.left, bit_of, groups, bits)
                and _eval_expr_scalar(expr.right, bit_of, groups, bits))
    return (_eval_expr_scalar(expr.left, bit_of, groups, bits)
            or _eval_expr_scalar(expr.right, bit_of, groups, bits))


def evaluate_naive(program: RuleProgram, gates: GateLike) -> PhenotypeOutcome:
    """Direct sequential interpretation of the uncompiled program."""
    bits = _as_word(gates)
    bit_of = {m.name: m.index for m in program.panel}
    groups: dict[str, bool] = {}
    matches: list[tuple[str, int]] = []
    for step in program.steps:
        value = _eval_expr_scalar(step.expr, bit_of, groups, bits)
        if step.kind is StepKind.DEFINE:
            groups[step.name] = value
        elif step.kind is StepKind.EXCLUDE:
            if value:
                return PhenotypeOutcome.excluded(step.index)
        elif value:
            matches.append((step.name, step.index))
    if not matches:
        return PhenotypeOutcome.unassigned()
    if len(matches) > 1:
        raise MultiAssignmentError([name for name, _ in matches], bits)
    return PhenotypeOutcome.assigned(*matches[0])


def _eval_expr_vector(expr: GateExpr, columns: dict[str, np.ndarray],
                      groups: dict[str, np.ndarray]) -> np.ndarray:
    if isinstance(expr, Marker):
        return columns[expr.name]
    if isinstance(expr, GroupRef):
        return groups[expr.name]
    if isinstance(expr, Not):
        return ~_eval_expr_vector(expr.operand, columns, groups)
    if isinstance(expr, And):
        return (_eval_expr_vector(expr.left, columns, groups)
                & _eval_expr_vector(expr.right, columns, groups))
    return (_eval_expr_vector(expr.left, columns, groups)
            | _eval_expr_vector(expr.right, columns, groups))


def _naive_outcome_arrays(program: RuleProgram, words: np.ndarray):
    """Tree-walk the program over a word array; same math as evaluate_naive."""
    columns = {
        m.name: (words >> np.uint64(m.index) & np.uint64(1)).astype(bool)
        for m in program.panel
    }
    groups: dict[str, np.ndarray] = {}
    class_names = program.classes
    class_pos = {name: i for i, name in enumerate(class_names)}
    n = len(words)
    codes = np.full(n, CODE_UNASSIGNED, np.int8)
    class_idx = np.full(n, -1, np.int16)
    step_no = np.zeros(n, np.int16)
    match_count = np.zeros(n, np.uint8)
    alive = np.ones(n, bool)
    for step in program.steps:
        value = _eval_expr_vector(step.expr, columns, groups)
        if step.kind is StepKind.DEFINE:
            groups[step.name] = value
        elif step.kind is StepKind.EXCLUDE:
            newly = value & alive
            codes[newly] = CODE_EXCLUDED
            step_no[newly] = step.index
            alive &= ~newly
        else:
            m = value & alive
            first = m & (match_count == 0)
            class_idx[first] = class_pos[step.name]
            step_no[first] = step.index
            match_count[m] += 1
    survivors = alive
    codes[survivors & (match_count == 1)] = CODE_ASSIGNED
    codes[survivors & (match_count > 1)] = CODE_MULTI
    blank = survivors & (match_count != 1)
    class_idx[blank] = -1
    step_no[blank] = 0
    return codes, class_idx, step_no


# --- compiled evaluation ----------------------------------------------------

def _run_ops_vector(ops, words: np.ndarray) -> np.ndarray:
    stack: list[np.ndarray] = []
    for op in ops:
        tag = op[0]
        if tag == "any":
            stack.append((words & np.uint64(op[1])) != 0)
        elif tag == "all":
            mask = np.uint64(op[1])
            stack.append((words & mask) == mask)
        elif tag == "not":
            stack[-1] = ~stack[-1]
        elif tag == "and":
            right = stack.pop()
            stack[-1] = stack[-1] & right
        else:
            right = stack.pop()
            stack[-1] = stack[-1] | right
    return stack[-1]


def _run_ops_scalar(ops, word: int) -> bool:
    stack: list[bool] = []
    for op in ops:
        tag = op[0]
        if tag == "any":
            stack.append(word & op[1] != 0)
        elif tag == "all":
            stack.append(word & op[1] == op[1])
        elif tag == "not":
            stack[-1] = not stack[-1]
        elif tag == "and":
            right = stack.pop()
            stack[-1] = stack[-1] and right
        else:
            right = stack.pop()
            stack[-1] = stack[-1] or right
    return stack[-1]


def _walk_compiled_scalar(compiled: CompiledProgram, word: int) -> PhenotypeOutcome:
    matches: list[tuple[str, int]] = []
    for step in compiled.steps:
        if _run_ops_scalar(step.ops, word):
            if step.kind is StepKind.EXCLUDE:
                return PhenotypeOutcome.excluded(step.index)
            matches.append((step.name, step.index))
    if not matches:
        return PhenotypeOutcome.unassigned()
    if len(matches) > 1:
        raise MultiAssignmentError([name for name, _ in matches], word)
    return PhenotypeOutcome.assigned(*matches[0])


def _matched_classes(compiled: CompiledProgram, word: int) -> list[str]:
    """Annotate classes a surviving word matches; used for error reporting."""
    out = []
    for step in compiled.steps:
        if step.kind is StepKind.ANNOTATE and _run_ops_scalar(step.ops, word):
            out.append(step.name)
    return out


@dataclass
class _OutcomeTable:
    referenced: tuple[int, ...]  # panel bit positions, ascending
    full_words: np.ndarray  # uint64[2^r], referenced bits scattered to panel positions
    codes: np.ndarray  # int8[2^r]
    class_idx: np.ndarray  # int16[2^r], -1 unless assigned
    step_no: np.ndarray  # int16[2^r], 0 unless excluded or assigned


_table_lock = threading.Lock()


def _expand_compact(compact: np.ndarray, referenced: tuple[int, ...]) -> np.ndarray:
    full = np.zeros(len(compact), np.uint64)
    for j, idx in enumerate(referenced):
        full |= (compact >> np.uint64(j) & np.uint64(1)) << np.uint64(idx)
    return full


def _compress_words(words: np.ndarray, referenced: tuple[int, ...]) -> np.ndarray:
    key = np.zeros(len(words), np.uint64)
    for j, idx in enumerate(referenced):
        key |= (words >> np.uint64(idx) & np.uint64(1)) << np.uint64(j)
    return key


def _tabulate(compiled: CompiledProgram) -> _OutcomeTable:
    referenced = compiled.referenced_indices
    r = len(referenced)
    compact = np.arange(1 << r, dtype=np.uint64)
    full = _expand_compact(compact, referenced)
    n = len(full)
    codes = np.full(n, CODE_UNASSIGNED, np.int8)
    class_idx = np.full(n, -1, np.int16)
    step_no = np.zeros(n, np.int16)
    match_count = np.zeros(n, np.uint8)
    alive = np.ones(n, bool)
    class_pos = {name: i for i, name in enumerate(compiled.class_names)}
    for step in compiled.steps:
        value = _run_ops_vector(step.ops, full)
        if step.kind is StepKind.EXCLUDE:
            newly = value & alive
            codes[newly] = CODE_EXCLUDED
            step_no[newly] = step.index
            alive &= ~newly
        else:
            m = value & alive
            first = m & (match_count == 0)
            class_idx[first] = class_pos[step.name]
            step_no[first] = step.index
            match_count[m] += 1
    codes[alive & (match_count == 1)] = CODE_ASSIGNED
    codes[alive & (match_count > 1)] = CODE_MULTI
    blank = alive & (match_count != 1)
    class_idx[blank] = -1
    step_no[blank] = 0
    return _OutcomeTable(referenced, full, codes, class_idx, step_no)


def _get_table(compiled: CompiledProgram) -> _OutcomeTable | None:
    """Memoized outcome table, or None when the program is too wide."""
    if len(compiled.referenced_indices) > MAX_MEMO_BITS:
        return None
    table = compiled._outcome_table
    if table is None:
        with _table_lock:
            table = compiled._outcome_table
            if table is None:
                table = _tabulate(compiled)
                compiled._outcome_table = table
    return table


class OutcomeArray(Sequence):
    """Packed sequence of PhenotypeOutcome values."""

    def __init__(self, codes: np.ndarray, class_idx: np.ndarray, step_no: np.ndarray,
                 class_names: tuple[str, ...]):
        self.codes = codes
        self.class_idx = class_idx
        self.step_no = step_no
        self.class_names = class_names

    def __len__(self) -> int:
        return len(self.codes)

    def outcome_at(self, i: int) -> PhenotypeOutcome:
        code = self.codes[i]
        if code == CODE_EXCLUDED:
            return PhenotypeOutcome.excluded(int(self.step_no[i]))
        if code == CODE_ASSIGNED:
            return PhenotypeOutcome.assigned(self.class_names[self.class_idx[i]],
                                             int(self.step_no[i]))
        return PhenotypeOutcome.unassigned()

    def __getitem__(self, i):
        if isinstance(i, slice):
            return OutcomeArray(self.codes[i], self.class_idx[i], self.step_no[i],
                                self.class_names)
        if i < 0:
            i += len(self.codes)
        if not 0 <= i < len(self.codes):
            raise IndexError(i)
        return self.outcome_at(i)

    def __eq__(self, other) -> bool:
        if isinstance(other, OutcomeArray):
            return (self.class_names == other.class_names
                    and np.array_equal(self.codes, other.codes)
                    and np.array_equal(self.class_idx, other.class_idx)
                    and np.array_equal(self.step_no, other.step_no))
        if isinstance(other, Sequence):
            return len(self) == len(other) and all(a == b for a, b in zip(self, other))
        return NotImplemented


def _raise_multi(compiled: CompiledProgram, word: int, index: int | None) -> None:
    raise MultiAssignmentError(_matched_classes(compiled, word), word, index)


def evaluate(program: RuleProgram | CompiledProgram,
             gates: GateLike) -> PhenotypeOutcome:
    """Outcome of one gate vector under the compiled cascade."""
    if not isinstance(program, CompiledProgram):
        program = compile_program(program)
    word = _as_word(gates)
    table = _get_table(program)
    if table is None:
        return _walk_compiled_scalar(program, word)
    key = 0
    for j, idx in enumerate(table.referenced):
        key |= (word >> idx & 1) << j
    code = table.codes[key]
    if code == CODE_MULTI:
        _raise_multi(program, word, None)
    if code == CODE_EXCLUDED:
        return PhenotypeOutcome.excluded(int(table.step_no[key]))
    if code == CODE_ASSIGNED:
        return PhenotypeOutcome.assigned(program.class_names[table.class_idx[key]],
                                         int(table.step_no[key]))
    return PhenotypeOutcome.unassigned()


def _coerce_words(gates) -> np.ndarray:
    if isinstance(gates, np.ndarray):
        return gates.astype(np.uint64, copy=False)
    return np.fromiter((_as_word(g) for g in gates), dtype=np.uint64,
                       count=len(gates) if hasattr(gates, "__len__") else -1)


def evaluate_batch(program: RuleProgram | CompiledProgram, gates,
                   threads: int = 1) -> OutcomeArray:
    """Vectorized evaluate; elementwise identical to the scalar form."""
    if not isinstance(program, CompiledProgram):
        program = compile_program(program)
    words = _coerce_words(gates)
    table = _get_table(program)
    if table is None:
        outcomes = [_walk_compiled_scalar(program, int(w)) for w in words]
        codes = np.fromiter((CODE_EXCLUDED if o.kind is OutcomeKind.EXCLUDED
                             else CODE_ASSIGNED if o.kind is OutcomeKind.ASSIGNED
                             else CODE_UNASSIGNED for o in outcomes), np.int8,
                            count=len(outcomes))
        class_pos = {n: i for i, n in enumerate(program.class_names)}
        class_idx = np.fromiter((class_pos.get(o.class_name, -1) for o in outcomes),
                                np.int16, count=len(outcomes))
        step_no = np.fromiter((o.step or 0 for o in outcomes), np.int16,
                              count=len(outcomes))
        return OutcomeArray(codes, class_idx, step_no, program.class_names)

    def lookup(chunk: np.ndarray) -> np.ndarray:
        return _compress_words(chunk, table.referenced)

    if threads > 1 and len(words) >= 1 << 16:
        splits = np.array_split(words, threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            keys = np.concatenate(list(pool.map(lookup, splits)))
    else:
        keys = lookup(words)
    codes = table.codes[keys]
    multi = np.flatnonzero(codes == CODE_MULTI)
    if multi.size:
        i = int(multi[0])
        _raise_multi(program, int(words[i]), i)
    return OutcomeArray(codes, table.class_idx[keys], table.step_no[keys],
                        program.class_names)


# --- exhaustive enumeration -------------------------------------------------

@dataclass
class RuleSpaceReport:
    """Exhaustive comparison of naive and compiled evaluation."""

    total_vectors: int
    referenced_markers: tuple[str, ...]
    outcome_counts: dict[str, int]  # excluded / assigned / unassigned
    class_counts: dict[str, int]
    excluded_by_step: dict[int, int]
    multi_assignments: int
    disagreements: int
    witnesses: dict[str, np.ndarray] = field(repr=False)
    outcome_codes: np.ndarray = field(repr=False)
    class_indices: np.ndarray = field(repr=False)
    step_indices: np.ndarray = field(repr=False)

    @property
    def violations(self) -> int:
        return self.multi_assignments + self.disagreements

    def summary(self) -> str:
        lines = [
            f"vectors evaluated   {self.total_vectors}",
            f"referenced markers  {len(self.referenced_markers)} "
            f"({', '.join(self.referenced_markers)})",
            f"excluded            {self.outcome_counts['excluded']}",
            f"assigned            {self.outcome_counts['assigned']}",
            f"unassigned          {self.outcome_counts['unassigned']}",
            f"multi-assignments   {self.multi_assignments}",
            f"naive/compiled disagreements  {self.disagreements}",
            "per-class vector counts:",
        ]
        for name, count in self.class_counts.items():
            lines.append(f"  {name:<16} {count}")
        lines.append("excluded by step:")
        for step, count in sorted(self.excluded_by_step.items()):
            lines.append(f"  step {step:<2} {count}")
        return "\n".join(lines)


def enumerate_rule_space(program: RuleProgram | CompiledProgram) -> RuleSpaceReport:
    """Evaluate both engines on every combination of the referenced markers."""
    compiled = program if isinstance(program, CompiledProgram) else compile_program(program)
    referenced = compiled.referenced_indices
    r = len(referenced)
    if r > MAX_ENUM_BITS:
        raise CapacityError(
            f"program references {r} markers; enumeration is capped at {MAX_ENUM_BITS}")
    if len(referenced) > MAX_MEMO_BITS:
        table = _tabulate(compiled)
    else:
        table = _get_table(compiled)
    full = table.full_words

    naive_codes, naive_class, naive_step = _naive_outcome_arrays(compiled.program, full)

    disagreements = int(np.count_nonzero(
        (naive_codes != table.codes)
        | (naive_class != table.class_idx)
        | (naive_step != table.step_no)))
    multi = int(np.count_nonzero(naive_codes == CODE_MULTI))

    class_names = compiled.class_names
    counts = {
        "excluded": int(np.count_nonzero(naive_codes == CODE_EXCLUDED)),
        "assigned": int(np.count_nonzero(naive_codes == CODE_ASSIGNED)),
        "unassigned": int(np.count_nonzero(naive_codes == CODE_UNASSIGNED)),
    }
    assigned = naive_codes == CODE_ASSIGNED
    class_counts = {
        name: int(np.count_nonzero(assigned & (naive_class == i)))
        for i, name in enumerate(class_names)
    }
    witnesses = {
        name: full[assigned & (naive_class == i)]
        for i, name in enumerate(class_names)
    }
    excl_steps, excl_counts = np.unique(
        naive_step[naive_codes == CODE_EXCLUDED], return_counts=True)
    return RuleSpaceReport(
        total_vectors=len(full),
        referenced_markers=tuple(compiled.panel_names[i] for i in referenced),
        outcome_counts=counts,
        class_counts=class_counts,
        excluded_by_step={int(s): int(c) for s, c in zip(excl_steps, excl_counts)},
        multi_assignments=multi,
        disagreements=disagreements,
        witnesses=witnesses,
        outcome_codes=naive_codes,
        class_indices=naive_class,
        step_indices=naive_step,
    )


# --- gating + label table ---------------------------------------------------

class LabelTable:
    """Per-nucleus gate vectors and outcomes, in feature-record order."""

    CSV_HEADER = ("nucleus_id", "gate_bits_hex", "outcome", "class", "step")

    def __init__(self, nucleus_ids: np.ndarray, gate_bits: np.ndarray,
                 outcomes: OutcomeArray, panel: tuple[str, ...]):
        if not (len(nucleus_ids) == len(gate_bits) == len(outcomes)):
            raise ValueError("label table arrays disagree in length")
        self.nucleus_ids = np.asarray(nucleus_ids, np.int64)
        self.gate_bits = np.asarray(gate_bits, np.uint64)
        self.outcomes = outcomes
        self.panel = tuple(panel)
        self._pos: dict[int, int] | None = None

    def __len__(self) -> int:
        return len(self.nucleus_ids)

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.outcomes.class_names

    def _position(self, nucleus_id: int) -> int:
        if self._pos is None:
            self._pos = {int(n): i for i, n in enumerate(self.nucleus_ids)}
        return self._pos[int(nucleus_id)]

    def __contains__(self, nucleus_id: int) -> bool:
        if self._pos is None:
            self._pos = {int(n): i for i, n in enumerate(self.nucleus_ids)}
        return int(nucleus_id) in self._pos

    def lookup(self, nucleus_id: int) -> tuple[GateVector, PhenotypeOutcome]:
        i = self._position(nucleus_id)
        return GateVector(int(self.gate_bits[i]), self.panel), self.outcomes[i]

    def class_counts(self) -> dict[str, int]:
        """Count per class plus 'excluded' and 'unassigned' buckets."""
        out = {}
        assigned = self.outcomes.codes == CODE_ASSIGNED
        for i, name in enumerate(self.class_names):
            out[name] = int(np.count_nonzero(assigned & (self.outcomes.class_idx == i)))
        out["excluded"] = int(np.count_nonzero(self.outcomes.codes == CODE_EXCLUDED))
        out["unassigned"] = int(np.count_nonzero(self.outcomes.codes == CODE_UNASSIGNED))
        return out

    def rows(self):
        """Yield CSV-shaped tuples (id, hex bits, outcome, class, step)."""
        codes = self.outcomes.codes
        class_idx = self.outcomes.class_idx
        steps = self.outcomes.step_no
        names = self.class_names
        for i in range(len(self)):
            code = codes[i]
            if code == CODE_ASSIGNED:
                outcome, cls, step = "assigned", names[class_idx[i]], str(int(steps[i]))
            elif code == CODE_EXCLUDED:
                outcome, cls, step = "excluded", "", str(int(steps[i]))
            else:
                outcome, cls, step = "unassigned", "", ""
            yield (str(int(self.nucleus_ids[i])), format(int(self.gate_bits[i]), "x"),
                   outcome, cls, step)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_HEADER)
        writer.writerows(self.rows())
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def from_csv(cls, path, panel: Sequence[str] = (),
                 class_names: Sequence[str] | None = None) -> "LabelTable":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != cls.CSV_HEADER:
                raise ValueError(f"unexpected label table header {header!r}")
            rows = list(reader)
        if class_names is None:
            seen: list[str] = []
            for row in rows:
                if row[2] == "assigned" and row[3] not in seen:
                    seen.append(row[3])
            class_names = seen
        names = tuple(class_names)
        pos = {n: i for i, n in enumerate(names)}
        n = len(rows)
        ids = np.empty(n, np.int64)
        bits = np.empty(n, np.uint64)
        codes = np.empty(n, np.int8)
        class_idx = np.full(n, -1, np.int16)
        step_no = np.zeros(n, np.int16)
        for i, (nid, hexbits, outcome, cls_name, step) in enumerate(rows):
            ids[i] = int(nid)
            bits[i] = int(hexbits, 16)
            if outcome == "assigned":
                codes[i] = CODE_ASSIGNED
                class_idx[i] = pos[cls_name]
                step_no[i] = int(step)
            elif outcome == "excluded":
                codes[i] = CODE_EXCLUDED
                step_no[i] = int(step)
            elif outcome == "unassigned":
                codes[i] = CODE_UNASSIGNED
            else:
                raise ValueError(f"unknown outcome {outcome!r} in {path}")
        return cls(ids, bits, OutcomeArray(codes, class_idx, step_no, names),
                   tuple(panel))

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelTable):
            return NotImplemented
        return (np.array_equal(self.nucleus_ids, other.nucleus_ids)
                and np.array_equal(self.gate_bits, other.gate_bits)
                and self.outcomes == other.outcomes)


def gate_bits_from_means(means: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Pack strict mean-greater-than-threshold calls into uint64 words.

    ``means`` is (n, panel-size) in panel order; bit i of word j is set
    iff means[j, i] > thresholds[i].
    """
    n, k = means.shape
    bits = np.zeros(n, np.uint64)
    for i in range(k):
        bits |= (means[:, i] > thresholds[i]).astype(np.uint64) << np.uint64(i)
    return bits


def label_nuclei(records, thresholds: "ThresholdSet",
                 program: RuleProgram | CompiledProgram,
                 threads: int = 1) -> LabelTable:
    """Gate per-nucleus means against thresholds and run the cascade.

    ``records`` is a NucleusTable or an iterable of NucleusRecord; the
    output preserves record order.  A bit is positive only when the mean
    is strictly greater than the marker's threshold.
    """
    compiled = program if isinstance(program, CompiledProgram) else compile_program(program)
    panel = compiled.panel_names
    thr = np.empty(len(panel))
    for i, name in enumerate(panel):
        if name not in thresholds.thresholds:
            raise MissingThresholdError(name)
        thr[i] = thresholds.thresholds[name]

    if hasattr(records, "mean_matrix"):
        for name in panel:
            if name not in records.marker_names:
                raise MissingChannelError(name)
        ids, means = records.mean_matrix(panel)
    else:
        records = list(records)
        ids = np.fromiter((r.nucleus_id for r in records), np.int64,
                          count=len(records))
        means = np.empty((len(records), len(panel)))
        for j, rec in enumerate(records):
            for i, name in enumerate(panel):
                if name not in rec.means:
                    raise MissingChannelError(name)
                means[j, i] = rec.means[name]
    bits = gate_bits_from_means(means, thr)
    outcomes = evaluate_batch(compiled, bits, threads=threads)
    return LabelTable(ids, bits, outcomes, panel)
