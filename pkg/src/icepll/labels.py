"""Egg-code parsing and the three label encodings used for training.

Class order is fixed everywhere in the package: [NI, N, YI, FYI, OI, W].
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class IceClass(enum.IntEnum):
    NewIce = 0
    Nilas = 1
    YoungIce = 2
    FirstYearIce = 3
    OldIce = 4
    Water = 5


N_CLASSES = len(IceClass)
CLASS_ABBREV = ("NI", "N", "YI", "FYI", "OI", "W")

SOD_CODES = {
    81: IceClass.NewIce,
    82: IceClass.Nilas,
    83: IceClass.YoungIce,
    86: IceClass.FirstYearIce,
    95: IceClass.OldIce,
}
CLASS_TO_SOD = {cls: code for code, cls in SOD_CODES.items()}


class LabelError(ValueError):
    pass


class UnknownSodCode(LabelError):
    pass


class InvalidConcentrationCode(LabelError):
    pass


class MissingSod(LabelError):
    pass


class MissingConcentration(LabelError):
    pass


class InvalidEggCode(LabelError):
    pass


class LabelKind(str, enum.Enum):
    OneHot = "one_hot"
    BinaryPartial = "binary_partial"
    ConfidencePartial = "confidence_partial"


@dataclass(frozen=True)
class ConcentrationRange:
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 <= self.lo <= self.hi <= 1.0):
            raise InvalidConcentrationCode(f"bad range [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class EggCode:
    """Chart attributes for a single polygon.

    Absent fields are ``None``. ``fa``/``fb`` (floe form) are carried
    through untouched; no encoding reads them.
    """

    sa: Optional[int] = None
    sb: Optional[int] = None
    ca: Optional[int] = None
    cb: Optional[int] = None
    ct: Optional[int] = None
    fa: Optional[int] = None
    fb: Optional[int] = None
    ice_free: bool = False

    def __post_init__(self):
        if self.sb is not None and self.sa is None:
            raise InvalidEggCode("SB present without SA")
        if self.cb is not None and self.ca is None:
            raise InvalidEggCode("CB present without CA")
        has_sod = self.sa is not None or self.sb is not None
        if self.ice_free and has_sod:
            raise InvalidEggCode("ice_free polygon carries SoD codes")

    @classmethod
    def from_record(cls, record: dict) -> "EggCode":
        def opt(key):
            v = record.get(key)
            return None if v is None else int(v)

        return cls(
            sa=opt("SA"),
            sb=opt("SB"),
            ca=opt("CA"),
            cb=opt("CB"),
            ct=opt("CT"),
            fa=opt("FA"),
            fb=opt("FB"),
            ice_free=bool(record.get("ice_free", False)),
        )

    def to_record(self) -> dict:
        out = {}
        for key in ("ct", "ca", "sa", "fa", "cb", "sb", "fb"):
            v = getattr(self, key)
            if v is not None:
                out[key.upper()] = v
        if self.ice_free:
            out["ice_free"] = True
        return out


@dataclass(frozen=True)
class LabelVector:
    values: np.ndarray = field(repr=False)
    kind: LabelKind

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (N_CLASSES,):
            raise LabelError(f"label vector must have {N_CLASSES} entries, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __repr__(self):
        return f"LabelVector({self.kind.value}, {self.values.tolist()})"

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.values))

    @property
    def support(self) -> frozenset:
        return frozenset(int(i) for i in np.flatnonzero(self.values > 0))


def sod_code_to_class(code: int) -> IceClass:
    try:
        return SOD_CODES[int(code)]
    except KeyError:
        raise UnknownSodCode(f"unrecognized SoD code {code!r}") from None


def parse_concentration_code(code: int) -> ConcentrationRange:
    """Two-digit partial concentration code -> fractional range.

    The digits are tenths: ``79`` means 70-90 %, ``24`` means 20-40 %.
    Descending digits are rejected rather than guessed at.
    """
    code = int(code)
    if not 0 <= code <= 99:
        raise InvalidConcentrationCode(f"concentration code {code} out of range")
    d1, d2 = divmod(code, 10)
    if d1 > d2:
        raise InvalidConcentrationCode(f"concentration code {code:02d} has descending digits")
    return ConcentrationRange(d1 / 10.0, d2 / 10.0)


def midpoint(rng: ConcentrationRange) -> float:
    return (rng.lo + rng.hi) / 2.0


def _candidates(egg: EggCode) -> list[IceClass]:
    if egg.ice_free:
        return [IceClass.Water]
    if egg.sa is None:
        raise MissingSod("polygon has neither SA nor the ice_free flag")
    out = [sod_code_to_class(egg.sa)]
    if egg.sb is not None:
        out.append(sod_code_to_class(egg.sb))
    return out


def encode_one_hot(egg: EggCode) -> LabelVector:
    v = np.zeros(N_CLASSES)
    v[_candidates(egg)[0]] = 1.0
    return LabelVector(v, LabelKind.OneHot)


def encode_binary_partial(egg: EggCode) -> LabelVector:
    v = np.zeros(N_CLASSES)
    for cls in _candidates(egg):
        v[cls] = 1.0
    return LabelVector(v, LabelKind.BinaryPartial)


def raw_confidence(egg: EggCode) -> np.ndarray:
    """Midpoint concentrations at the candidate positions, before surplus removal."""
    v = np.zeros(N_CLASSES)
    if egg.ice_free:
        v[IceClass.Water] = 1.0
        return v
    cands = _candidates(egg)
    codes = [egg.ca, egg.cb][: len(cands)]
    for cls, code in zip(cands, codes):
        if code is None:
            raise MissingConcentration(f"no concentration code for {cls.name}")
        # same class listed twice accumulates
        v[cls] += midpoint(parse_concentration_code(code))
    return v


def normalize_surplus(vector) -> LabelVector:
    """Spread any excess over 1 evenly across the k nonzero candidates.

    Entries pushed below zero are clamped to 0 and the remaining excess is
    spread again over the surviving candidates, so the result always sums
    to at most 1. With two candidates this is "subtract half the surplus".
    """
    v = np.array(vector.values if isinstance(vector, LabelVector) else vector, dtype=np.float64)
    # each pass removes at least one candidate or finishes
    for _ in range(N_CLASSES):
        total = v.sum()
        if total <= 1.0:
            break
        mask = v > 0
        v[mask] -= (total - 1.0) / mask.sum()
        np.clip(v, 0.0, None, out=v)
    return LabelVector(v, LabelKind.ConfidencePartial)


def encode_confidence_partial(egg: EggCode) -> LabelVector:
    return normalize_surplus(raw_confidence(egg))


def encode_all(egg: EggCode) -> dict[LabelKind, LabelVector]:
    return {
        LabelKind.OneHot: encode_one_hot(egg),
        LabelKind.BinaryPartial: encode_binary_partial(egg),
        LabelKind.ConfidencePartial: encode_confidence_partial(egg),
    }


# -- polygon label files -----------------------------------------------------


def read_polygon_file(path) -> dict[int, EggCode]:
    """Read a polygon label JSON array keyed by ``polygon_id``."""
    records = json.loads(Path(path).read_text())
    if not isinstance(records, list):
        raise InvalidEggCode("polygon file must hold a JSON array")
    out = {}
    for rec in records:
        pid = int(rec["polygon_id"])
        if pid in out:
            raise InvalidEggCode(f"duplicate polygon_id {pid}")
        out[pid] = EggCode.from_record(rec)
    return out


def write_polygon_file(path, polygons: dict[int, EggCode]) -> None:
    records = [{"polygon_id": pid, **egg.to_record()} for pid, egg in sorted(polygons.items())]
    Path(path).write_text(json.dumps(records, indent=1))


def encoding_header() -> list[str]:
    cols = ["polygon_id"]
    for prefix in ("onehot", "binary", "confidence"):
        cols += [f"{prefix}_{a}" for a in CLASS_ABBREV]
    return cols


def write_encoding_csv(path, polygons: dict[int, EggCode]) -> int:
    """Write the three encodings of every polygon; returns rows written."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(encoding_header())
        for pid, egg in sorted(polygons.items()):
            enc = encode_all(egg)
            row = [pid]
            for kind in (LabelKind.OneHot, LabelKind.BinaryPartial, LabelKind.ConfidencePartial):
                row += [f"{x:.12g}" for x in enc[kind].values]
            w.writerow(row)
    return len(polygons)


def stack(vectors: Iterable[LabelVector]) -> np.ndarray:
    rows = [v.values for v in vectors]
    return np.stack(rows) if rows else np.zeros((0, N_CLASSES))


def class_names(abbrev: bool = True) -> Sequence[str]:
    return CLASS_ABBREV if abbrev else tuple(c.name for c in IceClass)
