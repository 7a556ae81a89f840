import abc
import enum
from pathlib import Path

from loguru import logger
from pydantic import BaseModel, Field

from phagesde.writer.exception import UnwritablePathException


class Artifact(BaseModel):
    path: Path
    comments: list[str] = Field(default_factory=list)


class WriteStatus(enum.StrEnum):
    SUCCESS = "SUCCESS"
    FAILED = "FAILED"


class WrittenResult(BaseModel):
    status: WriteStatus
    path: Path | None = None
    error_message: str | None = None


class ArtifactWriterOptions(BaseModel):
    create_parents: bool = True


class BaseArtifactWriter(abc.ABC):
    artifact_class: type[Artifact] = Artifact
    suffix: str = ""

    def __init__(self, **kwargs):
        self._options = ArtifactWriterOptions.model_validate(kwargs.get("options") or {})

    @abc.abstractmethod
    def render(self, artifact: Artifact) -> bytes:
        raise NotImplementedError

    def write(self, artifact: Artifact) -> WrittenResult:
        payload = self.render(artifact)
        path = artifact.path
        try:
            if self._options.create_parents:
                path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(payload)
        except OSError as e:
            logger.error(f"[{self.__class__.__name__}] Failed to write {path}: {e}")
            raise UnwritablePathException(f"cannot write {path}: {e}") from e
        logger.debug(f"[{self.__class__.__name__}] Wrote {len(payload)} bytes to {path}")
        return WrittenResult(status=WriteStatus.SUCCESS, path=path)

    @classmethod
    def initialize(cls, **kwargs) -> "BaseArtifactWriter":
        return cls(**kwargs)

    @classmethod
    def to_artifact(cls, **kwargs) -> Artifact:
        artifact = cls.artifact_class(**kwargs)
        if cls.suffix and artifact.path.suffix != cls.suffix:
            artifact = artifact.model_copy(
                update={"path": artifact.path.with_name(artifact.path.name + cls.suffix)}
            )
        return artifact
