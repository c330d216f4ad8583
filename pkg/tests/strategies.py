"""Hypothesis generators shared by the parser and engine property tests."""

from hypothesis import strategies as st

from phenogate.rulelang import (
    And,
    GroupRef,
    Marker,
    MarkerId,
    Not,
    Or,
    RuleProgram,
    RuleStep,
    StepKind,
)

_NAMES = [f"M{i}" for i in range(6)]


def exprs(markers, groups):
    leaves = [Marker(n) for n in markers] + [GroupRef(g) for g in groups]
    return st.recursive(
        st.sampled_from(leaves),
        lambda ch: st.one_of(st.builds(Not, ch), st.builds(And, ch, ch),
                             st.builds(Or, ch, ch)),
        max_leaves=6)


@st.composite
def rule_programs(draw):
    marker_count = draw(st.integers(2, 6))
    markers = _NAMES[:marker_count]
    step_count = draw(st.integers(1, 7))
    steps = []
    groups: list[str] = []
    classes = 0
    for i in range(1, step_count + 1):
        kind = draw(st.sampled_from([StepKind.DEFINE, StepKind.EXCLUDE,
                                     StepKind.ANNOTATE]))
        expr = draw(exprs(markers, groups))
        if kind is StepKind.DEFINE:
            name = f"G{len(groups)}"
            groups.append(name)
        elif kind is StepKind.ANNOTATE:
            name = f"class {classes}"  # space exercises quoting
            classes += 1
        else:
            name = None
        steps.append(RuleStep(index=i, kind=kind, name=name, expr=expr))
    panel = tuple(MarkerId(n, i) for i, n in enumerate(markers))
    return RuleProgram(panel=panel, steps=tuple(steps))
