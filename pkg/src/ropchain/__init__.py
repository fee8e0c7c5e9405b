"""ROP chain compiler for x86-64 ELF binaries."""

__version__ = "0.1.0"
