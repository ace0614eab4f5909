"""FDI two-digit tooth numbering, channel layout, and radiograph categories.

Permanent teeth carry a two-digit FDI code ``10*quadrant + position`` with
quadrant 1..4 (upper right, upper left, lower left, lower right) and position
1..8 (central incisor out to third molar).  Mask stacks and box maps use one
channel per code, ordered by ``channel_of_fdi``.
"""

from __future__ import annotations

from dataclasses import dataclass

QUADRANTS = (1, 2, 3, 4)
POSITIONS = (1, 2, 3, 4, 5, 6, 7, 8)
NUM_TEETH = 32

#: All 32 permanent-tooth codes in channel order.
ALL_FDI_CODES = tuple(10 * q + p for q in QUADRANTS for p in POSITIONS)

#: Tooth types in the order reports use for per-category tables.
TOOTH_TYPES = ("incisor", "canine", "premolar", "molar")

_POSITION_TYPE = {
    1: "incisor",
    2: "incisor",
    3: "canine",
    4: "premolar",
    5: "premolar",
    6: "molar",
    7: "molar",
    8: "molar",
}

HORIZONTAL = "horizontal"
VERTICAL = "vertical"

_H_FLIP = {1: 2, 2: 1, 3: 4, 4: 3}
_V_FLIP = {1: 4, 4: 1, 2: 3, 3: 2}


def is_valid_fdi(code: int) -> bool:
    """True if ``code`` is one of the 32 permanent-tooth FDI codes."""
    return isinstance(code, int) and code // 10 in QUADRANTS and code % 10 in POSITIONS


def _require_valid(code: int) -> None:
    if not is_valid_fdi(code):
        raise ValueError(f"not a permanent-tooth FDI code: {code!r}")


def channel_of_fdi(code: int) -> int:
    """Map an FDI code to its channel index in 0..31.

    The layout is ``(quadrant - 1) * 8 + (position - 1)``, so 11 -> 0,
    18 -> 7, 21 -> 8, ..., 48 -> 31.
    """
    _require_valid(code)
    quadrant, position = code // 10, code % 10
    return (quadrant - 1) * 8 + (position - 1)


def fdi_of_channel(channel: int) -> int:
    """Inverse of :func:`channel_of_fdi`."""
    if not 0 <= channel < NUM_TEETH:
        raise ValueError(f"channel index out of range: {channel!r}")
    return 10 * (channel // 8 + 1) + channel % 8 + 1


def flip_fdi(code: int, axis: str) -> int:
    """Remap an FDI code under a horizontal or vertical image flip.

    A horizontal flip swaps left and right quadrants (1<->2, 3<->4); a
    vertical flip swaps upper and lower (1<->4, 2<->3).  Position within the
    quadrant is unchanged.  Both remaps are involutions.
    """
    _require_valid(code)
    quadrant, position = code // 10, code % 10
    if axis == HORIZONTAL:
        quadrant = _H_FLIP[quadrant]
    elif axis == VERTICAL:
        quadrant = _V_FLIP[quadrant]
    else:
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    return 10 * quadrant + position


def tooth_type(code: int) -> str:
    """Anatomical type of a tooth: incisor, canine, premolar, or molar."""
    _require_valid(code)
    return _POSITION_TYPE[code % 10]


#: channel indices grouped by tooth type, in TOOTH_TYPES order
CHANNELS_BY_TYPE = {
    t: tuple(c for c in range(NUM_TEETH) if tooth_type(fdi_of_channel(c)) == t)
    for t in TOOTH_TYPES
}


@dataclass(frozen=True)
class RadiographCategory:
    """One of the ten panoramic radiograph categories.

    Categories 1-4 show all 32 teeth with varying restoration/appliance
    status, 5 contains dental implants, 6 contains supernumerary teeth
    (more than 32), and 7-10 have missing teeth.
    """

    id: int
    has_32_teeth: bool
    has_restoration: bool
    has_appliance: bool
    has_implant: bool = False
    supernumerary: bool = False

    def __post_init__(self):
        if not 1 <= self.id <= 10:
            raise ValueError(f"category id must be in 1..10, got {self.id}")
        if self.has_implant and self.id != 5:
            raise ValueError("only category 5 contains implants")
        if self.supernumerary and self.id != 6:
            raise ValueError("only category 6 is supernumerary")


CATEGORIES = {
    1: RadiographCategory(1, True, True, True),
    2: RadiographCategory(2, True, True, False),
    3: RadiographCategory(3, True, False, True),
    4: RadiographCategory(4, True, False, False),
    5: RadiographCategory(5, False, False, False, has_implant=True),
    6: RadiographCategory(6, False, False, False, supernumerary=True),
    7: RadiographCategory(7, False, True, True),
    8: RadiographCategory(8, False, True, False),
    9: RadiographCategory(9, False, False, True),
    10: RadiographCategory(10, False, False, False),
}

#: Annotated image counts per category in the reference corpus; used as the
#: default category mix for synthetic dataset generation.
CATEGORY_USED_COUNTS = {
    1: 24,
    2: 72,
    3: 15,
    4: 32,
    5: 37,
    6: 30,
    7: 33,
    8: 140,
    9: 7,
    10: 35,
}

#: Categories excluded from the second test split (implants, supernumerary).
CRITICAL_CATEGORIES = (5, 6)
