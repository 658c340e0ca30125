"""Deterministic two-server simulator for DP materialized-view maintenance.

Modules:
    sharing    XOR secret sharing over the 32-bit ring
    dpnoise    joint Laplace noise from server-contributed words
    obliv      padded secure cache and the data-independent sorting network
    transform  truncated view transformation with contribution budgets
    shrink     the timer and above-noisy-threshold sync protocols, flush,
               and the closed-form utility bounds
    leakage    transcripts, reference DP mechanisms, empirical privacy loss,
               transcript audit
    harness    experiment driver, baselines, synthetic workloads, metrics
    cli        command-line front end
"""

from .sharing import SharePair, recover, share, share_in_protocol, share_k

__all__ = ["SharePair", "share", "recover", "share_in_protocol", "share_k"]
__version__ = "0.1.0"
