"""Parser, formatter, and compiler for the gating rule language."""

import pytest
from hypothesis import given, settings

from phenogate.errors import CapacityError, RuleSemanticError, RuleSyntaxError
from phenogate.rulelang import (
    CANONICAL_PANEL,
    MAX_PANEL_MARKERS,
    And,
    GroupRef,
    Marker,
    Not,
    Or,
    StepKind,
    canonical_rules_source,
    canonical_table1_program,
    compile_program,
    format_rule_program,
    parse_rule_program,
)
from strategies import rule_programs


def parse(text, panel=None):
    return parse_rule_program(text, panel=panel)


class TestParsing:
    def test_single_annotate(self):
        program = parse("annotate hit := CD4\n")
        assert program.marker_names == ("CD4",)
        (step,) = program.steps
        assert step.kind is StepKind.ANNOTATE
        assert step.name == "hit"
        assert step.expr == Marker("CD4")

    def test_panel_line_fixes_marker_order(self):
        program = parse("panel A B C\nannotate x := C\n")
        assert program.marker_names == ("A", "B", "C")
        assert program.marker_index("C") == 2

    def test_inferred_panel_uses_first_reference_order(self):
        program = parse("annotate x := B | A\nannotate y := C & A\n")
        assert program.marker_names == ("B", "A", "C")

    def test_group_definition_and_reference(self):
        program = parse(
            "group Epi := PanCK | NaKATPase\n"
            "group Prog := Sox9\n"
            "annotate goblet := Epi & Muc2 & !Prog\n",
            panel=("PanCK", "NaKATPase", "Muc2", "Sox9"),
        )
        assert program.steps[0].kind is StepKind.DEFINE
        assert program.steps[2].expr == And(
            And(GroupRef("Epi"), Marker("Muc2")), Not(GroupRef("Prog")))

    def test_reference_before_definition_rejected(self):
        with pytest.raises(RuleSemanticError) as err:
            parse("annotate x := Late\ngroup Late := CD4\n")
        assert "Late" in str(err.value)
        assert "line 1" in str(err.value)

    def test_and_is_left_associative(self):
        program = parse(
            "group Epi := A | B\n"
            "group Prog := S\n"
            "annotate goblet := Epi & M & !Prog\n",
            panel=("A", "B", "S", "M"),
        )
        goblet = program.steps[2].expr
        assert goblet == And(And(GroupRef("Epi"), Marker("M")),
                             Not(GroupRef("Prog")))

    def test_four_way_or_chain(self):
        program = parse("group G := A | B | C | D\nexclude !G\n",
                        panel=("A", "B", "C", "D"))
        expr = program.steps[0].expr
        assert expr == Or(Or(Or(Marker("A"), Marker("B")), Marker("C")),
                          Marker("D"))

    def test_and_binds_tighter_than_or(self):
        program = parse("annotate x := A | B & C\n", panel=("A", "B", "C"))
        assert program.steps[0].expr == Or(Marker("A"),
                                           And(Marker("B"), Marker("C")))

    def test_parentheses_override_precedence(self):
        program = parse("annotate x := (A | B) & C\n", panel=("A", "B", "C"))
        assert program.steps[0].expr == And(Or(Marker("A"), Marker("B")),
                                            Marker("C"))

    def test_not_binds_tightest(self):
        program = parse("annotate x := !A & B\n", panel=("A", "B"))
        assert program.steps[0].expr == And(Not(Marker("A")), Marker("B"))

    def test_double_negation_parses(self):
        program = parse("annotate x := !!A\n", panel=("A",))
        assert program.steps[0].expr == Not(Not(Marker("A")))

    def test_quoted_class_name_with_space(self):
        program = parse('annotate "helper T" := CD4 & CD3d\n',
                        panel=("CD4", "CD3d"))
        assert program.classes == ("helper T",)

    def test_quoted_marker_name(self):
        program = parse('panel "Na K ATPase" CD4\nannotate x := "Na K ATPase"\n')
        assert program.marker_names == ("Na K ATPase", "CD4")

    def test_comment_becomes_step_purpose(self):
        program = parse("annotate x := A  # lone marker class\n", panel=("A",))
        assert program.steps[0].purpose == "lone marker class"

    def test_blank_and_comment_lines_skipped(self):
        program = parse("# header\n\nannotate x := A\n\n# trailer\n",
                        panel=("A",))
        assert len(program.steps) == 1

    def test_exclude_has_no_name(self):
        program = parse("exclude A & B\n", panel=("A", "B"))
        assert program.steps[0].kind is StepKind.EXCLUDE
        assert program.steps[0].name is None


class TestParseErrors:
    def test_syntax_error_carries_line_and_column(self):
        with pytest.raises(RuleSyntaxError) as err:
            parse("annotate x := A\nannotate y := &B\n", panel=("A", "B"))
        assert err.value.line == 2
        assert err.value.column >= 15

    def test_missing_assign_operator(self):
        with pytest.raises(RuleSyntaxError):
            parse("group G A | B\n", panel=("A", "B"))

    def test_unbalanced_parenthesis(self):
        with pytest.raises(RuleSyntaxError):
            parse("annotate x := (A | B\n", panel=("A", "B"))

    def test_trailing_operator(self):
        with pytest.raises(RuleSyntaxError):
            parse("annotate x := A |\n", panel=("A",))

    def test_unknown_line_head(self):
        with pytest.raises(RuleSyntaxError):
            parse("label x := A\n", panel=("A",))

    def test_unknown_identifier_named_in_error(self):
        with pytest.raises(RuleSemanticError) as err:
            parse("annotate x := Y\n", panel=("A",))
        assert "'Y'" in str(err.value)

    def test_duplicate_class_name(self):
        with pytest.raises(RuleSemanticError):
            parse("annotate x := A\nannotate x := B\n", panel=("A", "B"))

    def test_duplicate_group_name(self):
        with pytest.raises(RuleSemanticError):
            parse("group G := A\ngroup G := B\n", panel=("A", "B"))

    def test_group_name_shadowing_marker(self):
        with pytest.raises(RuleSemanticError):
            parse("group A := B\n", panel=("A", "B"))

    def test_panel_argument_conflict(self):
        with pytest.raises(RuleSemanticError):
            parse("panel A B\nannotate x := A\n", panel=("B", "A"))

    def test_panel_line_not_first(self):
        with pytest.raises(RuleSemanticError):
            parse("annotate x := A\npanel A B\n")

    def test_oversized_panel_rejected(self):
        names = tuple(f"M{i}" for i in range(MAX_PANEL_MARKERS + 1))
        with pytest.raises((RuleSemanticError, CapacityError)):
            parse("annotate x := M0\n", panel=names)


class TestCanonicalProgram:
    def test_panel_is_the_17_marker_set(self, program):
        assert program.marker_names == CANONICAL_PANEL
        assert len(program.marker_names) == 17

    def test_step_count_and_kinds(self, program):
        assert len(program.steps) == 31
        kinds = [s.kind for s in program.steps]
        assert kinds.count(StepKind.DEFINE) == 5
        assert kinds.count(StepKind.EXCLUDE) == 12
        assert kinds.count(StepKind.ANNOTATE) == 14

    def test_fourteen_classes_in_annotate_order(self, program):
        assert program.classes == (
            "goblet", "endocrine", "epithelial", "fibroblast", "stromal",
            "myeloid", "helper T", "cytotoxic T", "T cell receptor",
            "monocyte", "macrophage", "B", "leukocyte", "progenitor")

    def test_every_step_has_a_purpose(self, program):
        assert all(s.purpose for s in program.steps)

    def test_dapi_is_in_the_panel_but_never_referenced(self, program, compiled):
        dapi = program.marker_index("DAPI")
        assert dapi == 5
        assert dapi not in compiled.referenced_indices
        assert len(compiled.referenced_indices) == 16

    def test_round_trip_preserves_the_program(self, program):
        text = format_rule_program(program)
        assert parse_rule_program(text) == program
        assert format_rule_program(parse_rule_program(text)) == text

    def test_source_asset_parses_to_the_program(self, program):
        assert parse_rule_program(canonical_rules_source()) == program

    def test_merged_variant_changes_only_step_10(self, program):
        merged = canonical_table1_program(merge_step_10_15=True)
        assert merged.classes == program.classes
        for a, b in zip(program.steps, merged.steps):
            if a.index == 10:
                assert a.expr != b.expr
                assert b.expr == And(
                    And(Not(GroupRef("Epi")), Not(GroupRef("Stroma"))),
                    And(Not(GroupRef("Progenitor")), Not(GroupRef("Immune"))))
            else:
                assert a == b


class TestCompiler:
    def test_or_chain_folds_to_one_any_op(self):
        program = parse("exclude A | C | D\n", panel=("A", "B", "C", "D"))
        compiled = compile_program(program)
        assert compiled.steps[0].ops == (("any", 0b1101),)

    def test_and_chain_folds_to_one_all_op(self):
        program = parse("annotate x := A & B & D\n", panel=("A", "B", "C", "D"))
        compiled = compile_program(program)
        assert compiled.steps[0].ops == (("all", 0b1011),)

    def test_groups_are_inlined(self):
        program = parse("group G := A | B\nannotate x := G & !C\n",
                        panel=("A", "B", "C"))
        compiled = compile_program(program)
        # the define step disappears; the annotate runs on raw marker bits
        assert len(compiled.steps) == 1
        assert compiled.steps[0].ops == (
            ("any", 0b011), ("any", 0b100), ("not",), ("and",))

    def test_referenced_indices_sorted_unique(self):
        program = parse("annotate x := D | A\nannotate y := D & B\n",
                        panel=("A", "B", "C", "D"))
        compiled = compile_program(program)
        assert compiled.referenced_indices == (0, 1, 3)

    def test_class_names_follow_annotate_order(self):
        program = parse("annotate b := A\nannotate a := B\n", panel=("A", "B"))
        assert compile_program(program).class_names == ("b", "a")


# --- property tests ---------------------------------------------------------


@settings(max_examples=150, deadline=None)
@given(rule_programs())
def test_format_parse_round_trip(program):
    program.validate()
    text = format_rule_program(program)
    assert parse_rule_program(text) == program


@settings(max_examples=60, deadline=None)
@given(rule_programs())
def test_formatting_is_idempotent(program):
    once = format_rule_program(program)
    assert format_rule_program(parse_rule_program(once)) == once
