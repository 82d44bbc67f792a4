"""Registration-based point-cloud anomaly detection with a desk-scale benchmark harness."""

__version__ = "0.1.0"

from .cloud import AABB, PointCloud, RigidTransform  # noqa: E402
from .spatial import SpatialIndex  # noqa: E402

__all__ = ["AABB", "PointCloud", "RigidTransform", "SpatialIndex", "__version__"]
