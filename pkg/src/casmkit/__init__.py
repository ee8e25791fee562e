"""Toolchain for control-state ASM programs: parsing, execution, symbolic
analysis, and hardware binding of control flow to a simulated PUF."""

__version__ = "0.1.0"

FORMULA_DIALECT = 1
