"""Bridge between a live diffusion pipeline and the binary trace format.

The exporter knows nothing about any particular pipeline: the caller
drives its own denoising loop and reports each step through a callback.
The resulting file is readable by the analysis toolkit's trace reader.
"""

from .exporter import (
    ExportError,
    ExportSession,
    StepCountMismatch,
    export_run,
)

__version__ = "0.1.0"
