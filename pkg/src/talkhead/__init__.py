"""Speech-driven 3D talking-head animation with a frozen talking stage and a
residual expression stage, on a FLAME-compatible head model."""

__version__ = "0.1.0"
