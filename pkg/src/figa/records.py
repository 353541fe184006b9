"""Plain data records shared by the pipeline, weighting and stats code."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any


class RevisionReason(str, enum.Enum):
    INACCURACY = "A"
    LACK_OF_DETAIL = "B"
    STRUCTURE = "C"
    OTHER = "D"


@dataclass(frozen=True)
class Instance:
    id: str
    query: str
    reference: str
    source: str = ""

    def __post_init__(self) -> None:
        if not self.query:
            raise ValueError("query must be nonempty")
        if not self.reference:
            raise ValueError("reference must be nonempty")

    def to_dict(self) -> dict[str, str]:
        return {"id": self.id, "query": self.query, "reference": self.reference, "source": self.source}


@dataclass(frozen=True)
class RewardTriple:
    r_initial: float
    r_reference: float
    r_revised: float | None = None

    def __post_init__(self) -> None:
        for value in (self.r_initial, self.r_reference, self.r_revised):
            if value is not None and not math.isfinite(value):
                raise ValueError(f"reward scores must be finite, got {value!r}")


@dataclass(frozen=True)
class RolloutRecord:
    instance: Instance
    initial_response: str
    rewards: RewardTriple | None = None


@dataclass(frozen=True)
class SpaRecord:
    instance: Instance
    initial_response: str
    revised_response: str
    rewards: RewardTriple
    reason: RevisionReason
    edit_ops: int
    flags: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.instance.id,
            "query": self.instance.query,
            "reference": self.instance.reference,
            "source": self.instance.source,
            "initial_response": self.initial_response,
            "revised_response": self.revised_response,
            "r_initial": self.rewards.r_initial,
            "r_reference": self.rewards.r_reference,
            "r_revised": self.rewards.r_revised,
            "reason": self.reason.value,
            "edit_ops": self.edit_ops,
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, row: dict[str, Any]) -> "SpaRecord":
        instance = Instance(
            id=str(row["id"]),
            query=row["query"],
            reference=row["reference"],
            source=row.get("source", ""),
        )
        r_revised = row.get("r_revised")
        return cls(
            instance=instance,
            initial_response=row["initial_response"],
            revised_response=row["revised_response"],
            rewards=RewardTriple(
                float(row["r_initial"]),
                float(row["r_reference"]),
                None if r_revised is None else float(r_revised),
            ),
            reason=RevisionReason(row["reason"]),
            edit_ops=int(row["edit_ops"]),
            flags=tuple(row.get("flags", ())),
        )
