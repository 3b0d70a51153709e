"""Two-stage knee osteoarthritis grading at desk scale.

Modules: ``tensor`` (autodiff), ``layers`` (networks, SGD, checkpoints),
``synthgen`` (synthetic radiographs), ``ingest`` (DICOM-lite / PGM),
``locator`` (stage 1), ``grader`` (stage 2), ``metrics``, ``pipeline``,
and ``cli``.
"""

__version__ = "0.1.0"
