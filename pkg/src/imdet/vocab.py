"""Class vocabulary: contiguous integer ids with unique names."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ArgumentError, ConfigurationError


@dataclass(frozen=True)
class ClassVocab:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) == 0:
            raise ConfigurationError("class vocab must not be empty")
        if any(not n for n in self.names):
            raise ConfigurationError("class names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError("class names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def name_of(self, class_id: int) -> str:
        if not (0 <= class_id < len(self.names)):
            raise ArgumentError(f"class id {class_id} outside 0..{len(self.names) - 1}")
        return self.names[class_id]

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ArgumentError(f"unknown class name {name!r}") from None

    def ids(self) -> range:
        return range(len(self.names))

    def to_list(self) -> list[str]:
        return list(self.names)

    @classmethod
    def from_list(cls, names) -> "ClassVocab":
        return cls(tuple(str(n) for n in names))


# Default desk-scale vocabulary: shape x color compounds, so that class
# identity is learnable from small encoders (color tells the pair apart,
# shape tells the quadruple apart).
DEFAULT_SHAPE_CLASSES = (
    "red circle",
    "blue circle",
    "red square",
    "blue square",
    "red triangle",
    "blue triangle",
    "red cross",
    "blue cross",
)


def default_vocab() -> ClassVocab:
    return ClassVocab(DEFAULT_SHAPE_CLASSES)
