"""Class vocabularies and the mapping/compatibility tables.

Three tables drive label harmonization, all replaceable via a JSON override:

* M1 maps legacy 30 m land-cover codes onto the 8 leaf classes.
* C1 lists, per leaf class, the 20 m scene-classification codes that count
  as agreement (legacy labels are kept only where their class agrees).
* U1 is the set of scene-classification codes considered usable for
  prediction (broader than the training-validity set: predict everywhere
  plausible, train only on clean pixels).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, MappingError

UNCLASSIFIED = 255

CLASS_NAMES = {
    0: "Water",
    1: "SnowIce",
    2: "Wetland",
    3: "SemiNaturalVegetation",
    4: "WoodyVegetation",
    5: "CultivatedVegetation",
    6: "NaturalBareGround",
    7: "ArtificialBareGround",
}
TRAINABLE_CLASSES = tuple(sorted(CLASS_NAMES))
N_CLASSES = len(TRAINABLE_CLASSES)

GL30_NAMES = {
    10: "cultivated land",
    20: "forest",
    30: "grassland",
    40: "shrubland",
    50: "wetland",
    60: "water",
    70: "tundra",
    80: "artificial surfaces",
    90: "bareland",
    100: "permanent snow/ice",
}

SCL_NAMES = {
    0: "no-data",
    1: "saturated/defective",
    2: "dark-area",
    3: "cloud-shadow",
    4: "vegetation",
    5: "not-vegetated",
    6: "water",
    7: "unclassified",
    8: "cloud-medium",
    9: "cloud-high",
    10: "thin-cirrus",
    11: "snow",
}

# M1: legacy code -> leaf class.  Forest and shrubland collapse to woody
# vegetation, grassland and tundra to (semi) natural vegetation.
DEFAULT_GL30_TO_CLASS = {
    10: 5,
    20: 4,
    30: 3,
    40: 4,
    50: 2,
    60: 0,
    70: 3,
    80: 7,
    90: 6,
    100: 1,
}

# C1: per class, the SCL codes that count as agreement.  Wetland may present
# as either water or vegetation; both bare classes ride on "not-vegetated".
DEFAULT_COMPAT = {
    0: frozenset({6}),
    1: frozenset({11}),
    2: frozenset({4, 6}),
    3: frozenset({4}),
    4: frozenset({4}),
    5: frozenset({4}),
    6: frozenset({5}),
    7: frozenset({5}),
}

# U1: codes predictions run on.  Includes dark-area, cloud-shadow, and
# unclassified; excludes no-data, defective, and all cloud codes.
DEFAULT_USABLE_SCL = frozenset({2, 3, 4, 5, 6, 7, 11})


@dataclass(frozen=True)
class TaxonomyTables:
    """Bundle of M1 / C1 / U1 with array views for raster-scale application."""

    gl30_to_class: dict[int, int] = field(
        default_factory=lambda: dict(DEFAULT_GL30_TO_CLASS)
    )
    compat: dict[int, frozenset[int]] = field(
        default_factory=lambda: dict(DEFAULT_COMPAT)
    )
    usable: frozenset[int] = DEFAULT_USABLE_SCL

    def map_gl30(self, code: int) -> int:
        try:
            return self.gl30_to_class[code]
        except KeyError:
            raise MappingError(f"unknown legacy land-cover code {code}") from None

    def scl_compatible(self, lc_class: int, scl: int) -> bool:
        if lc_class == UNCLASSIFIED:
            raise ValueError("compatibility is undefined for the unclassified code")
        if lc_class not in CLASS_NAMES:
            raise MappingError(f"unknown class code {lc_class}")
        if scl not in SCL_NAMES:
            raise MappingError(f"unknown scene-classification code {scl}")
        return scl in self.compat.get(lc_class, frozenset())

    def usable_scl(self, scl: int) -> bool:
        if scl not in SCL_NAMES:
            raise MappingError(f"unknown scene-classification code {scl}")
        return scl in self.usable

    def compat_lut(self) -> np.ndarray:
        """(256, 12) boolean lookup: lut[class, scl] == scl_compatible."""
        lut = np.zeros((256, len(SCL_NAMES)), dtype=bool)
        for cls, scls in self.compat.items():
            for scl in scls:
                lut[cls, scl] = True
        return lut

    def usable_lut(self) -> np.ndarray:
        """(12,) boolean lookup over SCL codes."""
        lut = np.zeros(len(SCL_NAMES), dtype=bool)
        lut[list(self.usable)] = True
        return lut

    def gl30_lut(self) -> np.ndarray:
        """(256,) lookup from legacy code to class; invalid slots hold 255."""
        lut = np.full(256, UNCLASSIFIED, dtype=np.uint8)
        for code, cls in self.gl30_to_class.items():
            lut[code] = cls
        return lut

    def gl30_preimage(self) -> dict[int, int]:
        """Lowest legacy code per class (canonical inverse of M1)."""
        inv: dict[int, int] = {}
        for code in sorted(self.gl30_to_class):
            cls = self.gl30_to_class[code]
            inv.setdefault(cls, code)
        return inv


DEFAULT_TABLES = TaxonomyTables()


def map_gl30(code: int) -> int:
    """Legacy 30 m code -> leaf class, per the default M1 table."""
    return DEFAULT_TABLES.map_gl30(code)


def scl_compatible(lc_class: int, scl: int) -> bool:
    """True when the scene classification endorses the class (default C1)."""
    return DEFAULT_TABLES.scl_compatible(lc_class, scl)


def usable_scl(scl: int) -> bool:
    """True for codes predictions should cover (default U1)."""
    return DEFAULT_TABLES.usable_scl(scl)


def load_tables(path) -> TaxonomyTables:
    """Read an override JSON carrying m1 / c1 / u1; absent keys keep defaults.

    Expected shape::

        {"m1": {"10": 5, ...}, "c1": {"0": [6], ...}, "u1": [2, 3, ...]}
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read taxonomy override {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("taxonomy override must be a JSON object")

    gl30 = dict(DEFAULT_GL30_TO_CLASS)
    compat = dict(DEFAULT_COMPAT)
    usable = DEFAULT_USABLE_SCL
    try:
        if "m1" in doc:
            gl30 = {int(k): int(v) for k, v in doc["m1"].items()}
        if "c1" in doc:
            compat = {int(k): frozenset(int(s) for s in v) for k, v in doc["c1"].items()}
        if "u1" in doc:
            usable = frozenset(int(s) for s in doc["u1"])
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"malformed taxonomy override: {exc}") from exc

    for code in gl30:
        if code not in GL30_NAMES:
            raise ConfigError(f"override m1 has unknown legacy code {code}")
    for cls, scls in compat.items():
        if cls not in CLASS_NAMES:
            raise ConfigError(f"override c1 has unknown class {cls}")
        bad = [s for s in scls if s not in SCL_NAMES]
        if bad:
            raise ConfigError(f"override c1 class {cls} has unknown SCL codes {bad}")
    bad = [s for s in usable if s not in SCL_NAMES]
    if bad:
        raise ConfigError(f"override u1 has unknown SCL codes {bad}")
    return TaxonomyTables(gl30_to_class=gl30, compat=compat, usable=usable)
