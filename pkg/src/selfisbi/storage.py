"""On-disk artifacts: matrix files, checksummed stage manifests, atomic writes.

A matrix file is one ASCII line ``"<rows> <cols>\\n"`` followed by
``rows * cols`` little-endian float64 values in row-major order.

Each stage directory holds its files plus ``manifest.json``. The manifest is
removed when a stage starts and written last, after every file it lists has
been renamed into place, so an interrupted stage never leaves a manifest that
verifies.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from pathlib import Path

import numpy as np

from .errors import ArtifactError

MANIFEST = "manifest.json"


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def matrix_bytes(M) -> bytes:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[None, :]
    if M.ndim != 2:
        raise ValueError("only vectors and matrices can be stored")
    header = f"{M.shape[0]} {M.shape[1]}\n".encode("ascii")
    return header + np.ascontiguousarray(M, dtype="<f8").tobytes()


def parse_matrix(data: bytes) -> np.ndarray:
    head, sep, body = data.partition(b"\n")
    try:
        rows, cols = (int(v) for v in head.decode("ascii").split())
    except ValueError:
        raise ArtifactError(f"bad matrix header {head[:40]!r}") from None
    if not sep or len(body) != 8 * rows * cols:
        raise ArtifactError(f"matrix body holds {len(body)} bytes, header says {rows}x{cols}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)


def write_matrix(path, M):
    _atomic_write(Path(path), matrix_bytes(M))


def read_matrix(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read matrix {path}: {exc}") from exc
    return parse_matrix(data)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StageWriter:
    """Collects the files of one stage and seals them with a manifest.

    Usage::

        w = StageWriter(out / "selfi-A", "selfi", config_dict)
        w.matrix("C0", C0)
        w.text("band.csv", csv_text)
        w.finish(simulator_calls=10150)
    """

    def __init__(self, directory, stage: str, config: dict):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        manifest = self.dir / MANIFEST
        if manifest.exists():
            manifest.unlink()
        self.stage = stage
        self.config = config
        self.files: dict[str, dict] = {}
        self.started = time.time()

    def _record(self, name: str, kind: str, shape=None):
        path = self.dir / name
        entry = {"sha256": sha256_file(path), "bytes": path.stat().st_size, "kind": kind}
        if shape is not None:
            entry["shape"] = list(shape)
        self.files[name] = entry

    def matrix(self, name: str, M):
        M = np.asarray(M, dtype=float)
        fname = name if name.endswith(".bin") else f"{name}.bin"
        write_matrix(self.dir / fname, M)
        self._record(fname, "matrix", M.shape if M.ndim == 2 else (1, M.size))

    def text(self, name: str, content: str):
        _atomic_write(self.dir / name, content.encode("utf-8"))
        self._record(name, "text")

    def file(self, name: str):
        """Register a file already written (atomically) into the stage directory."""
        self._record(name, "text")

    def finish(self, status: str = "complete", **extra) -> dict:
        manifest = {
            "stage": self.stage,
            "status": status,
            "config": self.config,
            "files": self.files,
            "wall_seconds": round(time.time() - self.started, 3),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            **extra,
        }
        _atomic_write(
            self.dir / MANIFEST, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()
        )
        return manifest


class Stage:
    """A verified stage directory; every listed file's checksum passed on load."""

    def __init__(self, directory, stage: str | None = None, require_complete: bool = True):
        self.dir = Path(directory)
        path = self.dir / MANIFEST
        if not path.exists():
            raise ArtifactError(f"no manifest in {self.dir}; run the producing stage first")
        try:
            self.manifest = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"corrupt manifest {path}: {exc}") from exc
        if stage is not None and self.manifest.get("stage") != stage:
            raise ArtifactError(f"{self.dir} holds stage {self.manifest.get('stage')!r}, not {stage!r}")
        if require_complete and self.manifest.get("status") != "complete":
            raise ArtifactError(f"stage in {self.dir} is {self.manifest.get('status')!r}")
        for name, entry in self.manifest["files"].items():
            f = self.dir / name
            if not f.exists():
                raise ArtifactError(f"{f} is listed in the manifest but missing")
            if sha256_file(f) != entry["sha256"]:
                raise ArtifactError(f"checksum mismatch for {f}")

    def matrix(self, name: str) -> np.ndarray:
        fname = name if name.endswith(".bin") else f"{name}.bin"
        if fname not in self.manifest["files"]:
            raise ArtifactError(f"{fname} not recorded in {self.dir / MANIFEST}")
        return read_matrix(self.dir / fname)

    def vector(self, name: str) -> np.ndarray:
        return self.matrix(name).ravel()

    def text(self, name: str) -> str:
        if name not in self.manifest["files"]:
            raise ArtifactError(f"{name} not recorded in {self.dir / MANIFEST}")
        return (self.dir / name).read_text()

    def __getitem__(self, key):
        return self.manifest[key]

    def get(self, key, default=None):
        return self.manifest.get(key, default)


def stage_exists(directory) -> bool:
    return (Path(directory) / MANIFEST).exists()
