"""gazemap: map wearable eye-tracker gaze onto annotated reference images and
compute dwell and visual-search metrics.

Modules
-------
geometry   homographies (normalized DLT, RANSAC) and boxes
features   corner detection, binary descriptors, matching
registry   reference images, AOI annotation and propagation, persistence
session    gaze ingestion, frame localization, dwells and fixations
metrics    search metrics, correlation with p-values, validation accuracy
synth      synthetic scenes and scripted sessions with ground truth
"""

__version__ = "0.1.0"
