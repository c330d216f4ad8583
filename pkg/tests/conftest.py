import numpy as np
import pytest

from phenogate.rulelang import canonical_table1_program, compile_program
from phenogate.synth import (
    CohortSpec,
    SynthSpec,
    generate_synthetic_cohort,
    generate_synthetic_slide,
)


@pytest.fixture(scope="session")
def program():
    return canonical_table1_program()


@pytest.fixture(scope="session")
def compiled(program):
    return compile_program(program)


@pytest.fixture(scope="session")
def tiny_slide(program):
    """60-nucleus noisy synthetic slide, generated once per session."""
    spec = SynthSpec(width=200, height=200, nucleus_count=60,
                     positive_std=8.0, negative_std=8.0, seed=13)
    return spec, generate_synthetic_slide(spec, program)


@pytest.fixture(scope="session")
def cohort_dir(tmp_path_factory, program):
    """20-patient cohort on disk (small slides, shared across tests)."""
    root = tmp_path_factory.mktemp("cohort")
    spec = CohortSpec(
        patient_count=20, slides_per_patient=1, microns_per_pixel=0.32,
        slide=SynthSpec(width=140, height=140, nucleus_count=25,
                        positive_std=6.0, negative_std=6.0, seed=0),
        seed=29)
    generate_synthetic_cohort(root, spec)
    return root


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
