from .core import (
    Bathymetry, CascadeTopology, ContractError, DamParams, DefectError, DryCellError,
    Reach, ReachState, StepResult, advance_cascade, advance_cascade_detailed,
    cascade_cfl_dt, cfl_dt, free_surface, friction_semi_implicit, gate_discharge,
    hll_interface_flux, hydrostatic_reconstruct, lake_state, physical_flux,
    power_output, run_explicit, total_volume,
)
