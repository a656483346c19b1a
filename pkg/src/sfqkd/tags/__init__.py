"""Time-tag simulation, clock synchronization and coincidence processing."""
from .codec import TagFormatError, decode, encode, from_csv, read_tags, to_csv, write_tags
from .coincidence import CoincidenceResult, estimate_accidentals, extract_coincidences
from .pipeline import derived_seeds, run_pipeline, scan_pipeline
from .simulate import SimConfig, simulate_tags
from .stream import Site, TagStream, empty_stream
from .sync import NoPeakError, SyncResult, apply_clock_model, synchronize

__all__ = [
    "CoincidenceResult",
    "NoPeakError",
    "SimConfig",
    "Site",
    "SyncResult",
    "TagFormatError",
    "TagStream",
    "apply_clock_model",
    "decode",
    "derived_seeds",
    "empty_stream",
    "encode",
    "estimate_accidentals",
    "extract_coincidences",
    "from_csv",
    "read_tags",
    "run_pipeline",
    "scan_pipeline",
    "simulate_tags",
    "synchronize",
    "to_csv",
    "write_tags",
]
