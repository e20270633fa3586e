"""Attribute taxonomy: groups, their classes and channel routing."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import DataFormatError


class Channel(enum.Enum):
    MOTION_POSE = "mp"
    ID_RELEVANT = "id"


@dataclass(frozen=True)
class AttributeGroup:
    name: str
    classes: tuple[str, ...]
    channel: Channel

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError(f"group {self.name!r} needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"group {self.name!r} has duplicate class names")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def index(self, class_name: str) -> int:
        return self.classes.index(class_name)


@dataclass(frozen=True)
class AttributeSchema:
    groups: tuple[AttributeGroup, ...]

    def __post_init__(self):
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ValueError("duplicate group names in schema")

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    @property
    def names(self) -> list[str]:
        return [g.name for g in self.groups]

    @property
    def total_classes(self) -> int:
        return sum(g.num_classes for g in self.groups)

    def group(self, name: str) -> AttributeGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def digest(self) -> bytes:
        """SHA-256 of the canonical text form; used to pair checkpoints with schemas."""
        return hashlib.sha256(serialize_schema(self).encode("utf-8")).digest()


def serialize_schema(schema: AttributeSchema) -> str:
    return "".join(
        f"{g.name}|{g.channel.value}|{','.join(g.classes)}\n" for g in schema.groups
    )


def parse_schema_text(text: str, source="<string>") -> AttributeSchema:
    groups: list[AttributeGroup] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("|")
        if len(parts) != 3:
            raise DataFormatError(
                "expected 'group_name|channel_tag|class1,class2,...'", source, lineno
            )
        name, tag, class_field = (p.strip() for p in parts)
        if not name:
            raise DataFormatError("empty group name", source, lineno)
        if name in seen:
            raise DataFormatError(f"duplicate group name {name!r}", source, lineno)
        try:
            channel = Channel(tag)
        except ValueError:
            raise DataFormatError(
                f"unknown channel tag {tag!r} (expected 'mp' or 'id')", source, lineno
            ) from None
        classes = tuple(c.strip() for c in class_field.split(","))
        if any(not c for c in classes):
            raise DataFormatError(f"empty class name in group {name!r}", source, lineno)
        if len(classes) < 2:
            raise DataFormatError(f"group {name!r} needs at least 2 classes", source, lineno)
        if len(set(classes)) != len(classes):
            raise DataFormatError(f"duplicate class name in group {name!r}", source, lineno)
        seen.add(name)
        groups.append(AttributeGroup(name, classes, channel))
    if not groups:
        raise DataFormatError("schema defines no attribute groups", source)
    return AttributeSchema(tuple(groups))


def parse_schema(path) -> AttributeSchema:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataFormatError("schema file not found", path) from None
    return parse_schema_text(text, source=path)


def write_schema(schema: AttributeSchema, path) -> None:
    Path(path).write_text(serialize_schema(schema), encoding="utf-8")


def bundled_schema(name: str) -> AttributeSchema:
    """Load a schema shipped with the package: ``"mars"`` or ``"duke"``."""
    res = resources.files("vidattr.schemas").joinpath(f"{name}.txt")
    return parse_schema_text(res.read_text(encoding="utf-8"), source=f"bundled:{name}")


def bundled_schema_path(name: str) -> Path:
    return Path(str(resources.files("vidattr.schemas").joinpath(f"{name}.txt")))
