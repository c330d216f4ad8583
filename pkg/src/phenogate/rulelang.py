"""Parser and compiler for the nucleus gating rule language.

A rule program is a line-oriented text of sequential gating steps over a
marker panel.  Each nucleus carries one positive/negative bit per marker;
the steps define named marker groups, exclude nuclei, or annotate the
survivors with a final class:

    panel CD4 CD8 ...                 # optional: fixes marker order
    group Immune := CD4 | CD8         # named membership, usable below
    exclude CD4 & CD8                 # first matching exclude wins
    annotate "helper T" := Immune & CD4

Grammar (one rule per line, '#' starts a comment; a trailing comment on a
rule line is kept as that step's purpose text):

    line   := "panel" IDENT+ | "group" IDENT ":=" expr
            | "exclude" expr | "annotate" IDENT ":=" expr
    expr   := term ("|" term)*
    term   := factor ("&" factor)*
    factor := "!" factor | "(" expr ")" | IDENT
    IDENT  := [A-Za-z][A-Za-z0-9_]* or a double-quoted form that may
              also contain spaces ("helper T")

Group names resolve to *earlier* group definitions only; every other
identifier is a marker.  Compilation inlines the groups and lowers each
expression to a small predicate program over a 64-bit gate word, so that
evaluation needs no group state and vectorizes over arrays of words.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Iterable, Union

from .errors import CapacityError, RuleSemanticError, RuleSyntaxError

MAX_PANEL_MARKERS = 64

#: Marker order of the canonical 17-stain panel (DAPI is carried for
#: completeness; no rule references it).
CANONICAL_PANEL = (
    "NaKATPase", "PanCK", "Muc2", "CgA", "Vimentin", "DAPI", "SMA", "Sox9",
    "OLFM4", "Lysozyme", "CD45", "CD20", "CD68", "CD11B", "CD3d", "CD8", "CD4",
)

RULES_ASSET = "table1.gate"


@dataclass(frozen=True)
class MarkerId:
    name: str
    index: int


# --- expression tree --------------------------------------------------------

@dataclass(frozen=True)
class Marker:
    name: str


@dataclass(frozen=True)
class GroupRef:
    name: str


@dataclass(frozen=True)
class Not:
    operand: "GateExpr"


@dataclass(frozen=True)
class And:
    left: "GateExpr"
    right: "GateExpr"


@dataclass(frozen=True)
class Or:
    left: "GateExpr"
    right: "GateExpr"


GateExpr = Union[Marker, GroupRef, Not, And, Or]


class StepKind(Enum):
    DEFINE = "group"
    EXCLUDE = "exclude"
    ANNOTATE = "annotate"


@dataclass(frozen=True)
class RuleStep:
    index: int  # 1-based position in the program
    kind: StepKind
    name: str | None  # group or class name; None for exclude
    expr: GateExpr
    purpose: str = ""


@dataclass(frozen=True)
class RuleProgram:
    panel: tuple[MarkerId, ...]
    steps: tuple[RuleStep, ...]

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.steps if s.kind is StepKind.ANNOTATE)

    @property
    def marker_names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.panel)

    def marker_index(self, name: str) -> int:
        for m in self.panel:
            if m.name == name:
                return m.index
        raise KeyError(name)

    def referenced_markers(self) -> tuple[str, ...]:
        """Markers actually used by some expression, in panel order."""
        used: set[str] = set()
        groups: dict[str, GateExpr] = {}
        for step in self.steps:
            _collect_markers(step.expr, groups, used)
            if step.kind is StepKind.DEFINE:
                groups[step.name] = step.expr
        return tuple(m.name for m in self.panel if m.name in used)

    def validate(self) -> None:
        """Raise on any structural invariant violation."""
        names = [m.name for m in self.panel]
        if len(set(names)) != len(names):
            raise RuleSemanticError("duplicate marker name in panel")
        if len(names) > MAX_PANEL_MARKERS:
            raise CapacityError(f"panel has {len(names)} markers (limit {MAX_PANEL_MARKERS})")
        for i, m in enumerate(self.panel):
            if m.index != i:
                raise RuleSemanticError(f"marker {m.name!r} has index {m.index}, expected {i}")
        marker_set = set(names)
        defined: set[str] = set()
        classes: set[str] = set()
        for i, step in enumerate(self.steps, start=1):
            if step.index != i:
                raise RuleSemanticError(f"step indices not contiguous at step {step.index}")
            _check_expr(step.expr, marker_set, defined)
            if step.kind is StepKind.DEFINE:
                if step.name in defined or step.name in marker_set:
                    raise RuleSemanticError(f"group name {step.name!r} already in use")
                defined.add(step.name)
            elif step.kind is StepKind.ANNOTATE:
                if step.name in classes:
                    raise RuleSemanticError(f"duplicate class name {step.name!r}")
                classes.add(step.name)


def _collect_markers(expr: GateExpr, groups: dict[str, GateExpr], out: set[str]) -> None:
    if isinstance(expr, Marker):
        out.add(expr.name)
    elif isinstance(expr, GroupRef):
        _collect_markers(groups[expr.name], groups, out)
    elif isinstance(expr, Not):
        _collect_markers(expr.operand, groups, out)
    elif isinstance(expr, (And, Or)):
        _collect_markers(expr.left, groups, out)
        _collect_markers(expr.right, groups, out)


def _check_expr(expr: GateExpr, markers: set[str], defined: set[str]) -> None:
    if isinstance(expr, Marker):
        if expr.name not in markers:
            raise RuleSemanticError(f"undefined marker {expr.name!r}")
    elif isinstance(expr, GroupRef):
        if expr.name not in defined:
            raise RuleSemanticError(f"group {expr.name!r} referenced before definition")
    elif isinstance(expr, Not):
        _check_expr(expr.operand, markers, defined)
    elif isinstance(expr, (And, Or)):
        _check_expr(expr.left, markers, defined)
        _check_expr(expr.right, markers, defined)


# --- tokenizer --------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
      (?P<quoted>"[^"\n]*")
    | (?P<ident>[A-Za-z][A-Za-z0-9_]*)
    | (?P<assign>:=)
    | (?P<op>[|&!()])
    """,
    re.VERBOSE,
)

_QUOTED_BODY_RE = re.compile(r"[A-Za-z][A-Za-z0-9_ ]*\Z")


@dataclass(frozen=True)
class _Token:
    kind: str  # 'ident' | 'assign' | 'op' | 'end'
    text: str
    column: int  # 1-based


def _split_comment(raw: str) -> tuple[str, str]:
    """Return (code, comment-text); '#' cannot occur inside a quoted name."""
    in_quote = False
    for i, ch in enumerate(raw):
        if ch == '"':
            in_quote = not in_quote
        elif ch == "#" and not in_quote:
            return raw[:i], raw[i + 1:].strip()
    return raw, ""


def _tokenize(code: str, line_no: int) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(code):
        if code[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(code, pos)
        if m is None:
            raise RuleSyntaxError(line_no, pos + 1, f"unexpected character {code[pos]!r}")
        if m.lastgroup == "quoted":
            body = m.group()[1:-1]
            if not _QUOTED_BODY_RE.match(body):
                raise RuleSyntaxError(line_no, pos + 1, f"invalid quoted identifier {m.group()}")
            tokens.append(_Token("ident", body, pos + 1))
        else:
            tokens.append(_Token(m.lastgroup, m.group(), pos + 1))
        pos = m.end()
    tokens.append(_Token("end", "", len(code) + 1))
    return tokens


# --- parser -----------------------------------------------------------------

# Parse-time placeholder: becomes Marker or GroupRef during resolution.
@dataclass(frozen=True)
class _Ident:
    name: str


class _LineParser:
    def __init__(self, tokens: list[_Token], line_no: int):
        self.tokens = tokens
        self.line = line_no
        self.i = 0

    @property
    def cur(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        if tok.kind != "end":
            self.i += 1
        return tok

    def expect(self, kind: str, what: str) -> _Token:
        if self.cur.kind != kind:
            raise RuleSyntaxError(self.line, self.cur.column,
                                  f"expected {what}, found {self.cur.text or 'end of line'!r}")
        return self.advance()

    def parse_expr(self):
        node = self.parse_term()
        while self.cur.kind == "op" and self.cur.text == "|":
            self.advance()
            node = Or(node, self.parse_term())
        return node

    def parse_term(self):
        node = self.parse_factor()
        while self.cur.kind == "op" and self.cur.text == "&":
            self.advance()
            node = And(node, self.parse_factor())
        return node

    def parse_factor(self):
        tok = self.cur
        if tok.kind == "op" and tok.text == "!":
            self.advance()
            return Not(self.parse_factor())
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            node = self.parse_expr()
            if not (self.cur.kind == "op" and self.cur.text == ")"):
                raise RuleSyntaxError(self.line, self.cur.column, "expected ')'")
            self.advance()
            return node
        if tok.kind == "ident":
            self.advance()
            return _Ident(tok.text)
        raise RuleSyntaxError(self.line, tok.column,
                              f"expected '!', '(' or identifier, found {tok.text or 'end of line'!r}")

    def finish(self) -> None:
        if self.cur.kind != "end":
            raise RuleSyntaxError(self.line, self.cur.column,
                                  f"unexpected trailing {self.cur.text!r}")


def parse_rule_program(source: str, panel: Iterable[str] | None = None) -> RuleProgram:
    """Parse rule source into a validated program.

    With an explicit ``panel`` (or a leading ``panel`` line in the source)
    every identifier must be a panel marker or a previously defined group.
    Without one, unknown identifiers become panel markers in order of
    first use.
    """
    explicit_panel = list(panel) if panel is not None else None
    declared_panel: list[str] | None = None

    # (line_no, kind, name, raw_expr, purpose)
    raw_steps: list[tuple[int, StepKind, str | None, object, str]] = []

    for line_no, raw in enumerate(source.splitlines(), start=1):
        code, comment = _split_comment(raw)
        if not code.strip():
            continue
        tokens = _tokenize(code, line_no)
        p = _LineParser(tokens, line_no)
        head = p.expect("ident", "'panel', 'group', 'exclude' or 'annotate'")
        if head.text == "panel":
            if raw_steps or declared_panel is not None:
                raise RuleSemanticError("panel line must be the first rule line and appear once")
            names = []
            while p.cur.kind == "ident":
                names.append(p.advance().text)
            p.finish()
            if not names:
                raise RuleSyntaxError(line_no, p.cur.column, "panel line lists no markers")
            declared_panel = names
            continue
        if head.text == "group" or head.text == "annotate":
            name_tok = p.expect("ident", "a name")
            p.expect("assign", "':='")
            expr = p.parse_expr()
            p.finish()
            kind = StepKind.DEFINE if head.text == "group" else StepKind.ANNOTATE
            raw_steps.append((line_no, kind, name_tok.text, expr, comment))
        elif head.text == "exclude":
            expr = p.parse_expr()
            p.finish()
            raw_steps.append((line_no, StepKind.EXCLUDE, None, expr, comment))
        else:
            raise RuleSyntaxError(line_no, head.column,
                                  f"expected 'panel', 'group', 'exclude' or 'annotate', found {head.text!r}")

    if declared_panel is not None:
        if explicit_panel is not None and explicit_panel != declared_panel:
            raise RuleSemanticError("panel argument disagrees with the source's panel line")
        explicit_panel = declared_panel
    if explicit_panel is not None:
        if len(set(explicit_panel)) != len(explicit_panel):
            raise RuleSemanticError("duplicate marker name in panel")
        if len(explicit_panel) > MAX_PANEL_MARKERS:
            raise RuleSemanticError(
                f"panel has {len(explicit_panel)} markers (limit {MAX_PANEL_MARKERS})")

    group_lines = {}  # name -> first defining line, for error messages
    for line_no, kind, name, _, _ in raw_steps:
        if kind is StepKind.DEFINE and name not in group_lines:
            group_lines[name] = line_no

    panel_set = set(explicit_panel) if explicit_panel is not None else None
    inferred: dict[str, int] = {}
    defined: set[str] = set()
    classes: set[str] = set()
    steps: list[RuleStep] = []

    def resolve(node, line_no: int):
        if isinstance(node, _Ident):
            name = node.name
            if name in defined:
                return GroupRef(name)
            if name in group_lines:
                raise RuleSemanticError(
                    f"line {line_no}: group {name!r} referenced before its definition "
                    f"on line {group_lines[name]}")
            if panel_set is not None:
                if name in panel_set:
                    return Marker(name)
                raise RuleSemanticError(f"line {line_no}: undefined marker or group {name!r}")
            inferred.setdefault(name, len(inferred))
            return Marker(name)
        if isinstance(node, Not):
            return Not(resolve(node.operand, line_no))
        if isinstance(node, And):
            return And(resolve(node.left, line_no), resolve(node.right, line_no))
        if isinstance(node, Or):
            return Or(resolve(node.left, line_no), resolve(node.right, line_no))
        raise AssertionError(node)

    for idx, (line_no, kind, name, raw_expr, purpose) in enumerate(raw_steps, start=1):
        expr = resolve(raw_expr, line_no)
        if kind is StepKind.DEFINE:
            if name in defined:
                raise RuleSemanticError(f"line {line_no}: group {name!r} defined twice")
            if (panel_set is not None and name in panel_set) or name in inferred:
                raise RuleSemanticError(f"line {line_no}: group name {name!r} shadows a marker")
            defined.add(name)
        elif kind is StepKind.ANNOTATE:
            if name in classes:
                raise RuleSemanticError(f"line {line_no}: duplicate class name {name!r}")
            classes.add(name)
        steps.append(RuleStep(index=idx, kind=kind, name=name, expr=expr, purpose=purpose))

    if explicit_panel is not None:
        marker_names = explicit_panel
    else:
        marker_names = [n for n, _ in sorted(inferred.items(), key=lambda kv: kv[1])]
    if len(marker_names) > MAX_PANEL_MARKERS:
        raise RuleSemanticError(
            f"program references {len(marker_names)} markers (limit {MAX_PANEL_MARKERS})")

    program = RuleProgram(
        panel=tuple(MarkerId(n, i) for i, n in enumerate(marker_names)),
        steps=tuple(steps),
    )
    program.validate()
    return program


# --- pretty printer ---------------------------------------------------------

_BARE_IDENT_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*\Z")

_PREC_OR, _PREC_AND, _PREC_NOT = 1, 2, 3


def _fmt_ident(name: str) -> str:
    return name if _BARE_IDENT_RE.match(name) else f'"{name}"'


def _fmt_expr(expr: GateExpr, parent_prec: int = 0) -> str:
    if isinstance(expr, (Marker, GroupRef)):
        return _fmt_ident(expr.name)
    if isinstance(expr, Not):
        return "!" + _fmt_expr(expr.operand, _PREC_NOT)
    if isinstance(expr, And):
        op, prec = " & ", _PREC_AND
    else:
        op, prec = " | ", _PREC_OR
    # left child may share the parent precedence (left associativity);
    # the right child needs parens at equal precedence to round-trip.
    s = _fmt_expr(expr.left, prec) + op + _fmt_expr(expr.right, prec + 1)
    return f"({s})" if prec < parent_prec else s


def format_rule_program(program: RuleProgram) -> str:
    """Render a program as parseable source (panel line first)."""
    lines = ["panel " + " ".join(_fmt_ident(m.name) for m in program.panel), ""]
    for step in program.steps:
        if step.kind is StepKind.EXCLUDE:
            line = f"exclude {_fmt_expr(step.expr)}"
        else:
            line = f"{step.kind.value} {_fmt_ident(step.name)} := {_fmt_expr(step.expr)}"
        if step.purpose:
            line += f"  # {step.purpose}"
        lines.append(line)
    return "\n".join(lines) + "\n"


# --- compiler ---------------------------------------------------------------

# Predicate ops over a 64-bit gate word, in reverse Polish order:
#   ("any", mask)  push (word & mask) != 0
#   ("all", mask)  push (word & mask) == mask
#   ("not",)       negate top of stack
#   ("and",) ("or",)  combine top two
PredOp = tuple


@dataclass(frozen=True)
class CompiledStep:
    index: int
    kind: StepKind
    name: str | None
    ops: tuple[PredOp, ...]


class CompiledProgram:
    """Group-free, bit-level form of a rule program.

    Immutable after construction; the lazily built outcome table used by
    the batch evaluator is memoized by the engine (idempotent, so safe to
    share across threads).
    """

    def __init__(self, program: RuleProgram, steps: tuple[CompiledStep, ...],
                 referenced_indices: tuple[int, ...]):
        self.program = program
        self.steps = steps
        self.class_names = program.classes
        self.referenced_indices = referenced_indices
        self.panel_names = program.marker_names
        self._outcome_table = None  # filled by phenogate.engine on demand

    def __repr__(self) -> str:
        return (f"CompiledProgram({len(self.steps)} steps, "
                f"{len(self.class_names)} classes, "
                f"{len(self.referenced_indices)} referenced markers)")


def _is_marker_or_tree(expr: GateExpr) -> list[str] | None:
    """Marker names if expr is a pure Or-tree of markers, else None."""
    if isinstance(expr, Marker):
        return [expr.name]
    if isinstance(expr, Or):
        left = _is_marker_or_tree(expr.left)
        right = _is_marker_or_tree(expr.right)
        if left is not None and right is not None:
            return left + right
    return None


def _is_marker_and_tree(expr: GateExpr) -> list[str] | None:
    if isinstance(expr, Marker):
        return [expr.name]
    if isinstance(expr, And):
        left = _is_marker_and_tree(expr.left)
        right = _is_marker_and_tree(expr.right)
        if left is not None and right is not None:
            return left + right
    return None


def _lower(expr: GateExpr, bit_of: dict[str, int], out: list[PredOp]) -> None:
    names = _is_marker_or_tree(expr)
    if names is not None:
        mask = 0
        for n in names:
            mask |= 1 << bit_of[n]
        out.append(("any", mask))
        return
    names = _is_marker_and_tree(expr)
    if names is not None:
        mask = 0
        for n in names:
            mask |= 1 << bit_of[n]
        out.append(("all", mask))
        return
    if isinstance(expr, Not):
        _lower(expr.operand, bit_of, out)
        out.append(("not",))
    elif isinstance(expr, And):
        _lower(expr.left, bit_of, out)
        _lower(expr.right, bit_of, out)
        out.append(("and",))
    elif isinstance(expr, Or):
        _lower(expr.left, bit_of, out)
        _lower(expr.right, bit_of, out)
        out.append(("or",))
    else:
        raise AssertionError(f"group reference survived inlining: {expr}")


def _inline_groups(expr: GateExpr, groups: dict[str, GateExpr]) -> GateExpr:
    if isinstance(expr, Marker):
        return expr
    if isinstance(expr, GroupRef):
        return groups[expr.name]
    if isinstance(expr, Not):
        return Not(_inline_groups(expr.operand, groups))
    if isinstance(expr, And):
        return And(_inline_groups(expr.left, groups), _inline_groups(expr.right, groups))
    return Or(_inline_groups(expr.left, groups), _inline_groups(expr.right, groups))


@lru_cache(maxsize=64)
def compile_program(program: RuleProgram) -> CompiledProgram:
    """Inline group definitions and lower every step to bit-word predicates."""
    program.validate()
    if len(program.panel) > MAX_PANEL_MARKERS:
        raise CapacityError(
            f"panel has {len(program.panel)} markers (limit {MAX_PANEL_MARKERS})")
    bit_of = {m.name: m.index for m in program.panel}
    groups: dict[str, GateExpr] = {}
    steps: list[CompiledStep] = []
    referenced = 0
    for step in program.steps:
        inlined = _inline_groups(step.expr, groups)
        if step.kind is StepKind.DEFINE:
            groups[step.name] = inlined
            continue
        ops: list[PredOp] = []
        _lower(inlined, bit_of, ops)
        for op in ops:
            if len(op) > 1:
                referenced |= op[1]
        steps.append(CompiledStep(step.index, step.kind, step.name, tuple(ops)))
    ref_indices = tuple(i for i in range(len(program.panel)) if referenced >> i & 1)
    return CompiledProgram(program, tuple(steps), ref_indices)


# --- canonical program ------------------------------------------------------

def canonical_rules_source() -> str:
    """Text of the built-in 31-step gating cascade asset."""
    return resources.files(__package__).joinpath(RULES_ASSET).read_text(encoding="utf-8")


def canonical_table1_program(merge_step_10_15: bool = False) -> RuleProgram:
    """The built-in 31-step cascade over the 17-marker panel.

    ``merge_step_10_15`` swaps step 10's literal condition (outside both
    the epithelial and stromal groups) for the broader step-15 condition
    (negative for all four groups), letting group-negative immune and
    progenitor nuclei reach the annotation steps.
    """
    program = parse_rule_program(canonical_rules_source())
    if not merge_step_10_15:
        return program
    merged = And(
        And(Not(GroupRef("Epi")), Not(GroupRef("Stroma"))),
        And(Not(GroupRef("Progenitor")), Not(GroupRef("Immune"))),
    )
    steps = list(program.steps)
    step10 = steps[9]
    assert step10.kind is StepKind.EXCLUDE and step10.index == 10
    steps[9] = RuleStep(index=10, kind=StepKind.EXCLUDE, name=None, expr=merged,
                        purpose=step10.purpose + " (merged with step 15)")
    out = RuleProgram(panel=program.panel, steps=tuple(steps))
    out.validate()
    return out
