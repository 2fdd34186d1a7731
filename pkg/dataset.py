"""
Paired datasets on disk: RVOL volumes plus a manifest.

Manifest lines read ``id,class,input_path,target_path`` with paths relative to
the manifest. Lines starting with ``#`` are ignored.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DataError
from volume_io import Volume, load_volume, save_volume

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
COVERAGE_SUFFIX = "_coverage"


@dataclass
class Subject:
    subject_id: str
    label: int
    input: Volume
    target: Volume


@dataclass
class PairedDataset:
    subjects: List[Subject] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.subjects)

    def ids(self) -> List[str]:
        return [s.subject_id for s in self.subjects]

    def labels(self) -> List[int]:
        return [s.label for s in self.subjects]

    def pairs(self, indices: Optional[Sequence[int]] = None) -> List[Tuple[Volume, Volume]]:
        chosen = range(len(self.subjects)) if indices is None else indices
        return [(self.subjects[i].input, self.subjects[i].target) for i in chosen]

    def index_of(self, subject_id: str) -> int:
        for index, subject in enumerate(self.subjects):
            if subject.subject_id == subject_id:
                return index
        raise DataError(f"subject {subject_id!r} is not in the dataset")


def write_dataset(dataset: PairedDataset, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for subject in dataset.subjects:
        input_name = f"{subject.subject_id}_input.rvol"
        target_name = f"{subject.subject_id}_target.rvol"
        save_volume(subject.input, directory / input_name)
        save_volume(subject.target, directory / target_name)
        lines.append(f"{subject.subject_id},{subject.label},{input_name},{target_name}")
    manifest = directory / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("wrote %d subjects to %s", len(dataset), directory)
    return manifest


def _manifest_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def load_dataset(path: Union[str, Path]) -> PairedDataset:
    """Load a dataset from its directory or its manifest file."""
    manifest = _manifest_path(path)
    if not manifest.is_file():
        raise DataError(f"no manifest at {manifest}")
    subjects = []
    for number, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise DataError(f"{manifest}:{number}: expected id,class,input,target")
        subject_id, label, input_name, target_name = parts
        if label not in ("0", "1"):
            raise DataError(f"{manifest}:{number}: class must be 0 or 1, got {label!r}")
        input_path = manifest.parent / input_name
        target_path = manifest.parent / target_name
        for p in (input_path, target_path):
            if not p.is_file():
                raise DataError(f"{manifest}:{number}: missing volume {p}")
        subjects.append(Subject(subject_id, int(label), load_volume(input_path), load_volume(target_path)))
    if not subjects:
        raise DataError(f"{manifest} lists no subjects")
    ids = [s.subject_id for s in subjects]
    if len(set(ids)) != len(ids):
        raise DataError(f"{manifest} lists duplicate subject ids")
    return PairedDataset(subjects)


def load_volume_dir(directory: Union[str, Path]) -> Dict[str, Volume]:
    """Volumes named ``<id>.rvol`` in a directory, coverage sidecars excluded."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    return {
        p.stem: load_volume(p)
        for p in sorted(directory.glob("*.rvol"))
        if not p.stem.endswith(COVERAGE_SUFFIX)
    }


def load_mask_dir(directory: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Coverage masks ``<id>_coverage.rvol`` as boolean arrays keyed by subject id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    return {
        p.stem[:-len(COVERAGE_SUFFIX)]: load_volume(p).data > 0.5
        for p in sorted(directory.glob(f"*{COVERAGE_SUFFIX}.rvol"))
    }


def select(volumes: Dict[str, Volume], ids: Sequence[str], what: str) -> List[Volume]:
    """Volumes for ``ids`` in order; every id must be present."""
    missing = [i for i in ids if i not in volumes]
    if missing:
        raise DataError(f"{what} is missing {len(missing)} subject(s): {', '.join(missing[:5])}")
    return [volumes[i] for i in ids]
