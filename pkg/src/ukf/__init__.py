"""Micro-kernel factory: schedulable loop IR, rewrites, C emission and a GEMM driver."""

from __future__ import annotations

__version__ = "0.1.0"
