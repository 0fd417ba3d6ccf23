"""Backward matrix Riccati solvers with indefinite coefficients, and the
trading applications built on top of them: exponential-utility linear
feedback control, multi-asset RFQ market making with signals and hedging,
and optimal execution with online drift estimation.
"""

__version__ = "0.1.0"
