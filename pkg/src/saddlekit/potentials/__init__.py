"""Mean potentials, covariance fields, geometry and the stochastic force oracle."""

from .analytic import AnalyticDoubleWell, QuadraticDemo, analytic_energy_grad, analytic_mep_reference
from .eam import BACKEND, EamFs, PairList, eam_energy_forces, energy_forces_batch
from .fields import ConstantField, CoreField3D, TubeField2D
from .lattice import HopPair, Supercell, build_vacancy_supercell, minimum_image
from .oracle import StochasticForceOracle, sample_force
from .setfl import EamTables, parse_setfl, read_setfl, write_setfl

__all__ = [
    "AnalyticDoubleWell",
    "QuadraticDemo",
    "analytic_energy_grad",
    "analytic_mep_reference",
    "BACKEND",
    "EamFs",
    "PairList",
    "eam_energy_forces",
    "energy_forces_batch",
    "ConstantField",
    "CoreField3D",
    "TubeField2D",
    "HopPair",
    "Supercell",
    "build_vacancy_supercell",
    "minimum_image",
    "StochasticForceOracle",
    "sample_force",
    "EamTables",
    "parse_setfl",
    "read_setfl",
    "write_setfl",
]
