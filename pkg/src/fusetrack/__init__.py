"""Multi-sensor RGB-D body-tracking fusion pipeline.

Calibrates multiple depth cameras into a common frame, merges per-sensor
skeletons into tracked persons, derives screen-space pointing and gaze
targets, and dispatches body-part crops to recognizer services.
"""

__version__ = "0.1.0"
