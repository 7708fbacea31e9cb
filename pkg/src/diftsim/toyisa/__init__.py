"""Toy RISC stand-in for the application core and its toolchain."""
