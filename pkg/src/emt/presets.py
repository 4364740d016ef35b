"""Per-dataset constants bundled under short names."""

PRESETS = {
    "seed62": {"c": 62, "k_order": 4, "l_sub": 2.0, "s_sub": 0.5, "alpha": 0.25},
    "thuep32": {"c": 32, "k_order": 3, "l_sub": 2.0, "s_sub": 0.5, "alpha": 0.1},
    "faced32": {"c": 32, "k_order": 3, "l_sub": 4.0, "s_sub": 1.0, "alpha": 0.4},
}

# STA dropout scaling used when no preset is given.
DEFAULT_ALPHA = 0.25


def get_preset(name: str | None) -> dict:
    if name is None:
        return {}
    try:
        return dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
