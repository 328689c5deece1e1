"""Exception hierarchy shared by all nodes."""


class ClusterError(Exception):
    """Base class for every error raised by this package."""


class BadKey(ClusterError, ValueError):
    """Key violates the key rules (empty, too long, '/' or control chars)."""


class BadPath(ClusterError, ValueError):
    """Request path is not of the form /file/<key>."""


class SchemaError(ClusterError, ValueError):
    """A control message or config document does not match its schema."""


class IndexFull(ClusterError):
    """A level-2 sub-bucket has no room left for another key."""


class BlockNotFound(ClusterError, KeyError):
    pass


class MissingBlock(ClusterError):
    """A block sequence has a gap or is empty."""


class PayloadTooLarge(ClusterError, ValueError):
    pass


class NotEnoughWorkers(ClusterError):
    pass


class NoBackends(ClusterError):
    """The balancer has no Up worker to route to."""


class PortUnavailable(ClusterError):
    pass


class StartupTimeout(ClusterError):
    pass
