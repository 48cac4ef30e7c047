"""Static figure rendering for transport-map experiment runs."""

from .manifest import RunManifest, ManifestError, read_points_csv, read_train_log
from .figures import plot_tripod, plot_comparison

__all__ = ["RunManifest", "ManifestError", "read_points_csv", "read_train_log",
           "plot_tripod", "plot_comparison"]
__version__ = "0.1.0"
