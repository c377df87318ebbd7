import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

from fuzzywuzzy import fuzz


class SlimDistillError(Exception):
    pass


class ConfigError(SlimDistillError):
    pass


class MissingArtifactError(SlimDistillError):
    pass


class GraphStructureError(SlimDistillError):
    pass


class CouplingError(GraphStructureError):
    pass


class DegenerateLayerError(GraphStructureError):
    pass


class ShapeError(SlimDistillError):
    pass


class ScheduleDomainError(SlimDistillError, ValueError):
    pass


class NumericError(SlimDistillError):
    pass


class ReportError(SlimDistillError):
    pass


def make_error(error_text: str, kind: type[SlimDistillError] = SlimDistillError):
    raise kind(error_text)


def is_file_writeable(path: Path) -> bool:
    if path.exists():
        return os.access(path, os.W_OK)
    parent_dir = path.parent
    while not parent_dir.exists() and parent_dir != parent_dir.parent:
        parent_dir = parent_dir.parent
    return os.access(parent_dir, os.W_OK)


def make_output_path(output_directory: str | None, base_path: str | None = None) -> Path:
    """Resolve the run directory.

    ``SLIM_DISTILL_OUTPUT_DIR`` wins over the configured directory; relative
    directories are taken relative to ``base_path`` when one is given.
    """
    env_override = os.getenv("SLIM_DISTILL_OUTPUT_DIR")
    if env_override:
        output_directory = env_override
    if output_directory is None:
        output_path = Path.cwd() / "runs"
    elif not os.path.isabs(output_directory) and base_path:
        output_path = Path(os.path.expanduser(base_path)) / Path(output_directory)
    else:
        output_path = Path(os.path.expanduser(output_directory))
    if not is_file_writeable(output_path):
        make_error(f"Directory ({output_path}) is not writeable", ConfigError)
    output_path.mkdir(parents=True, exist_ok=True)
    return output_path


def similar_artifacts(name: str, directory: Path, take_n: int = 5, min_score: int = 70) -> list[Path]:
    """Artifacts in ``directory`` whose names fuzzily match ``name``, best first."""
    scored = [
        (fuzz.token_sort_ratio(name, path.name), path)
        for path in sorted(directory.iterdir())
        if path.is_file() and path.name != name and check_artifact_file(path)
    ]
    ranked = sorted((item for item in scored if item[0] >= min_score), key=lambda item: -item[0])
    return [path for _, path in ranked[:take_n]]


def check_artifact_file(path: Path) -> bool:
    return path.suffix.lower() in {".json", ".bin"}


def handle_input_file(file_path: str | Path, artifact_check: bool = True) -> Path:
    """Resolve an upstream artifact or raise MissingArtifactError with suggestions."""
    path = Path(file_path)
    if not path.exists() and path.parent.exists():
        similar_files = similar_artifacts(path.name, path.parent)
        if similar_files:
            similar_files_formatted = ",".join(str(file) for file in similar_files)
            make_error(
                f"File ({path}) does not exist. Did you mean any of these files: {similar_files_formatted}?",
                MissingArtifactError,
            )
        make_error(f"File ({path}) does not exist", MissingArtifactError)
    elif not path.exists():
        make_error(f"File ({path}) does not exist", MissingArtifactError)
    elif not path.is_file():
        make_error(f"File ({path}) is not a file", MissingArtifactError)

    if artifact_check and not check_artifact_file(path):
        make_error(f"File ({path}) is not a pipeline artifact (.json/.bin)", MissingArtifactError)
    return path


@contextmanager
def output_lock(output_path: Path) -> Iterator[Path]:
    """Hold ``<output>/.lock`` for the lifetime of one subcommand."""
    lock_path = output_path / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        make_error(
            f"Output directory ({output_path}) is locked by another run; remove {lock_path} if stale",
            ConfigError,
        )
    try:
        os.write(fd, str(os.getpid()).encode("utf-8"))
        os.close(fd)
        yield lock_path
    finally:
        lock_path.unlink(missing_ok=True)
