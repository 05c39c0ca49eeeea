"""Per-step estimation path: pre-processors, Multi-Aligner, Multi-Tracker."""

from .aligner import (
    AlignerSlice,
    AlignStats,
    DegenerateAlignment,
    IterativeSolver,
    Lidar2DAlignerSlice,
    MultiAligner,
    OdometryAlignerSlice,
    align,
)
from .preprocess import (
    LaserScanPreprocessor,
    OdometryPreprocessor,
    Preprocessor,
    preprocess_odometry,
    preprocess_scan,
)
from .tracker import (
    Lidar2DTrackerSlice,
    LocalMapSplitter,
    MapClipper,
    MultiTracker,
    TrackerEvent,
    TrackerSlice,
    clip,
    merge,
    should_split,
    track,
)
from .types import LaserScan, LocalMap, MeasurementPacket, OdometryReading, SensorExtrinsics
