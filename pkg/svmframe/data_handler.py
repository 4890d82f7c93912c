import hashlib
import os
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .ensemble import EnsemblePaths
from .errors import OutputError
from .grid import Grid2D, write_snapshot
from .logger import logger

FLOAT_FORMAT = "%.17g"


def content_hash(text: str) -> str:
    """SHA-256 hex digest of a text."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@contextmanager
def _writing(path: str) -> Iterator[None]:
    try:
        yield
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e


class OutputWriter:
    """Write run artifacts into one directory, each behind the provenance header."""

    def __init__(self, directory: str, config_sha256: str):
        self.directory = directory
        self.config_sha256 = config_sha256
        self.written: List[str] = []
        with _writing(directory):
            os.makedirs(self.directory, exist_ok=True)

    @property
    def header(self) -> str:
        return f"# svmframe {__version__} config_sha256={self.config_sha256}"

    def path(self, name: str) -> str:
        return os.path.join(self.directory, name)

    def _record(self, path: str) -> str:
        if path not in self.written:
            self.written.append(path)
        logger.debug(f"Wrote {path}")
        return path

    def write_table(self, name: str, frame: pd.DataFrame, sep: str = ",",
                    columns: Optional[Sequence[str]] = None) -> str:
        """Header line, then the table with round-trip float precision; NaN becomes an empty field."""
        path = self.path(name)
        with _writing(path), open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.header + "\n")
            frame.to_csv(f, sep=sep, index=False, columns=columns, float_format=FLOAT_FORMAT, na_rep="",
                         lineterminator="\n")
        return self._record(path)

    def write_snapshot(self, name: str, values: np.ndarray, grid: Grid2D, t: float, kind: str) -> str:
        path = self.path(name)
        with _writing(path):
            write_snapshot(path, values, grid, t, kind, preamble=[self.header])
        return self._record(path)

    def write_paths(self, name: str, paths: EnsemblePaths) -> str:
        """Columnar ``t traj x y`` dump of recorded trajectories."""
        return self.write_table(name, paths.to_frame(), sep=" ")

    def write_report(self, name: str, checks: List[Dict[str, object]]) -> str:
        frame = pd.DataFrame.from_records(checks, columns=["check", "value", "tolerance", "passed"])
        return self.write_table(name, frame)

    def write_text(self, name: str, text: str) -> str:
        path = self.path(name)
        with _writing(path), open(path, "w", encoding="utf-8") as f:
            f.write(self.header + "\n")
            f.write(text if text.endswith("\n") else text + "\n")
        return self._record(path)
