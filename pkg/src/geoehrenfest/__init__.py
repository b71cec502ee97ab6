"""Geometric Ehrenfest dynamics with canonical statistics."""

from .dynamics import (
    EhrenfestModel,
    Trajectory,
    ehrenfest_rhs,
    hamiltonian_function,
    linear_coupling_model,
    propagate,
    spin_oscillator,
    step_rk4,
    step_strang,
    total_energy,
)
from .geometry import (
    ClassicalState,
    EhrenfestState,
    HermitianOperator,
    NonHermitianError,
    ObservableFn,
    QuantumStateReal,
    expectation_value,
    hamiltonian_vector_field,
    identity_observable,
    phase_generator,
    poisson_classical,
    poisson_combined,
    poisson_quantum,
    quadratic_observable,
    symmetric_bracket,
)
from .statmech import (
    Ensemble,
    SamplerConfig,
    classical_volume_preservation_test,
    ensemble_average,
    liouville_stationarity_test,
    metropolis_canonical,
    sample_sphere_uniform,
)
from .toymodel import (
    ToyParams,
    ToyState,
    fill_fraction,
    poincare_section,
    propagate_toy,
    quantum_form_hamiltonian,
    toy_hamiltonian,
    toy_model,
)

__version__ = "0.1.0"
