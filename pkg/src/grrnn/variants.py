"""Model variants: which head computes the final feature."""

import enum
from dataclasses import dataclass

from .errors import ConfigurationError


class Kind(str, enum.Enum):
    BASELINE = "baseline"
    F = "f"
    FR = "fr"
    FRR = "frr"
    FGR = "fgr"
    FGRR = "fgrr"

    @property
    def uses_global(self):
        return self in (Kind.BASELINE, Kind.FGR, Kind.FGRR)

    @property
    def uses_fragments(self):
        return self is not Kind.BASELINE

    @property
    def uses_gru(self):
        return self in (Kind.FR, Kind.FRR, Kind.FGR, Kind.FGRR)

    @property
    def residual(self):
        return self in (Kind.FRR, Kind.FGRR)


class Axis(str, enum.Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"


@dataclass(frozen=True)
class ModelVariant:
    kind: Kind = Kind.FGRR
    axis: Axis = Axis.HORIZONTAL

    @classmethod
    def parse(cls, kind, axis="horizontal"):
        try:
            return cls(Kind(str(kind).lower()), Axis(str(axis).lower()))
        except ValueError as exc:
            raise ConfigurationError(f"unknown variant {kind!r}/{axis!r}") from exc

    @property
    def uses_global(self):
        return self.kind.uses_global

    def __str__(self):
        if self.kind is Kind.BASELINE:
            return "baseline"
        return f"{self.kind.value}-{self.axis.value}"


ALL_KINDS = tuple(Kind)
