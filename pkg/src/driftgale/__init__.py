"""Online distribution-shift detection with a guaranteed false-alarm rate."""

__version__ = "0.1.0"

from .core import DetectorConfig, Episode, EpisodeStream, Rng, load_stream, split_rng  # noqa: E402
from .martingale import AlertState, ExponentialMartingale, MartingaleParams  # noqa: E402
from .recency import RecencyClassifier, RecencyConfig  # noqa: E402
from .detector import DetectionReport, ShiftDetector, fit, observe, run_deployment  # noqa: E402

__all__ = [
    "AlertState", "DetectionReport", "DetectorConfig", "Episode", "EpisodeStream",
    "ExponentialMartingale", "MartingaleParams", "RecencyClassifier", "RecencyConfig", "Rng",
    "ShiftDetector", "fit", "load_stream", "observe", "run_deployment", "split_rng",
]
