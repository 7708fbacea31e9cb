"""Off-core dynamic information flow tracking, simulated end to end.

A toy processor runs programs and emits a compressed program-flow trace,
instrumentation values and kernel messages; a coprocessor model decodes the
trace, looks up per-block annotations and maintains tags for registers,
memory and files.  ``diftsim.toyisa.oracle`` is an independent reference.
"""

__version__ = "0.1.0"
