"""Scene palette for map previews.

All preview colors go through these tokens; never pass raw RGB tuples in
rendering code. Obstacles sit on paper, planning output is drawn in ink and
accent so the corridor stays readable under the trajectory.
"""

PALETTE = {
    "paper": "#F6F0E3",
    "obstacle": "#2B241C",
    "muted": "#7A6F5D",
    "accent": "#802F3D",
    "ok": "#50694E",
    "err": "#8C3B2E",
    "warn": "#8A6A2F",
}

# Layers, bottom to top.
OCCUPIED = PALETTE["obstacle"]
CORRIDOR = PALETTE["ok"]
CORRIDOR_FALLBACK = PALETTE["warn"]
REFERENCE = PALETTE["muted"]
TRAJECTORY = PALETTE["accent"]
START = PALETTE["ok"]
GOAL = PALETTE["err"]


def rgb(token: str) -> tuple[int, int, int]:
    value = token.lstrip("#")
    return int(value[0:2], 16), int(value[2:4], 16), int(value[4:6], 16)
