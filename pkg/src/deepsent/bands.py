"""Sentinel-2 band bookkeeping: the 12 bands (B10 excluded) and their resolution groups."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ResolutionGroup:
    gsd_m: int
    downscale_vs_10m: int

    @property
    def upscale_to_output(self) -> int:
        # network output sits on a 3x finer grid than the 10 m bands
        return 3 * self.downscale_vs_10m

    @property
    def name(self) -> str:
        return f"{self.gsd_m}m"


G10 = ResolutionGroup(10, 1)
G20 = ResolutionGroup(20, 2)
G60 = ResolutionGroup(60, 6)
GROUPS = (G10, G20, G60)
GROUP_BY_GSD = {g.gsd_m: g for g in GROUPS}

# ascending wavelength inside each group; this order is used for spectral stacking
GROUP_BANDS = {
    10: ("B02", "B03", "B04", "B08"),
    20: ("B05", "B06", "B07", "B08a", "B11", "B12"),
    60: ("B01", "B09"),
}

# all bands in ascending wavelength
BANDS = ("B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B08a", "B09", "B11", "B12")

_ALIASES = {"B8A": "B08a", "B08A": "B08a", "B1": "B01", "B2": "B02", "B3": "B03", "B4": "B04",
            "B5": "B05", "B6": "B06", "B7": "B07", "B8": "B08", "B9": "B09"}

_GROUP_OF = {code: GROUP_BY_GSD[gsd] for gsd, codes in GROUP_BANDS.items() for code in codes}


def canonical(code: str) -> str:
    """Normalize a band code (accepts ``B8A`` and unpadded forms) or raise ``KeyError``."""
    code = code.strip()
    code = _ALIASES.get(code.upper(), code)
    if code not in _GROUP_OF:
        raise KeyError(f"unknown band code {code!r}")
    return code


def group_of(code: str) -> ResolutionGroup:
    return _GROUP_OF[canonical(code)]


def sort_bands(codes) -> list[str]:
    """Sort band codes into ascending-wavelength order."""
    return sorted((canonical(c) for c in codes), key=BANDS.index)


def bands_in_group(codes, gsd_m: int) -> list[str]:
    """Present bands of one group, in canonical spectral order."""
    present = {canonical(c) for c in codes}
    return [c for c in GROUP_BANDS[gsd_m] if c in present]


def parse_band_list(text: str) -> list[str]:
    """Parse ``"B02,B03"`` or group shorthands like ``"10m,60m"`` into band codes."""
    out: list[str] = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if tok.lower() in ("10m", "20m", "60m"):
            out.extend(GROUP_BANDS[int(tok[:-1])])
        elif tok.lower() == "all":
            out.extend(BANDS)
        else:
            out.append(canonical(tok))
    return sort_bands(set(out))
