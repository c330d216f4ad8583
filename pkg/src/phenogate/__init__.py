"""Nucleus phenotyping for multiplexed immunofluorescence slides.

Threshold gating over per-nucleus mean intensities, a sequential boolean
rule cascade assigning one of 14 classes, pseudo-H&E rendering, patch
dataset construction with patient-stratified folds, a reference trainable
classifier, and an HTTP service for interactive threshold tuning.
"""

from .engine import (
    GateVector,
    LabelTable,
    OutcomeKind,
    PhenotypeOutcome,
    RuleSpaceReport,
    enumerate_rule_space,
    evaluate,
    evaluate_batch,
    evaluate_naive,
    label_nuclei,
)
from .errors import PhenogateError
from .rulelang import (
    CompiledProgram,
    RuleProgram,
    canonical_table1_program,
    compile_program,
    format_rule_program,
    parse_rule_program,
)

__version__ = "0.1.0"

__all__ = [
    "CompiledProgram",
    "GateVector",
    "LabelTable",
    "OutcomeKind",
    "PhenogateError",
    "PhenotypeOutcome",
    "RuleProgram",
    "RuleSpaceReport",
    "canonical_table1_program",
    "compile_program",
    "enumerate_rule_space",
    "evaluate",
    "evaluate_batch",
    "evaluate_naive",
    "format_rule_program",
    "label_nuclei",
    "parse_rule_program",
    "__version__",
]
