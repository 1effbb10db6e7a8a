"""tactforce: 3D force estimation from uncalibrated tactile arrays.

The package covers the full desk-scale workflow: synthetic sensor/finger
rig, signal preprocessing, the M1-M5 estimator family, offline and
streaming evaluation, and a closed-loop task-space force controller.
"""

__version__ = "0.1.0"

from . import control, evaluation, geometry, models, pipeline, synth  # noqa: F401
