"""Desk-scale laboratory for associative-memory learning rules, optimizers as
gradient memories, multi-frequency MLP chains, and self-modifying sequence
models, with an oracle-verification suite tying each recurrence to the
optimization step it implements."""

__version__ = "0.1.0"
