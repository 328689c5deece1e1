"""Distributed key-retrieval cluster.

A master keeps a two-level hash index of which worker holds each key,
workers store values as fixed-size blocks on disk, and a front balancer
spreads client requests over the workers by load factor.
"""

from keycluster.errors import ClusterError
from keycluster.hashing import fnv1a_64
from keycluster.index import MultiLevelIndex, Placement, validate_key

__all__ = [
    "ClusterError",
    "MultiLevelIndex",
    "Placement",
    "fnv1a_64",
    "validate_key",
]

__version__ = "0.1.0"
