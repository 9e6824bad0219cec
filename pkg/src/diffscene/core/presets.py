"""Built-in model and training presets.

Each preset names a transformer size together with the training budget it was
tuned for, from the miniature configuration used by the smoke pipeline up to
the desk-scale recipe used for the ablation runs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from diffscene.core.errors import ConfigurationError


@dataclass(frozen=True)
class Preset:
    """A named model + training preset."""

    name: str
    d: int
    n_layers: int
    n_heads: int
    batch_size: int
    steps: int
    dataset_size: int
    description: str

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Built-in presets
# ---------------------------------------------------------------------------

PRESETS: list[Preset] = [
    Preset(
        name="tiny",
        d=32,
        n_layers=1,
        n_heads=2,
        batch_size=16,
        steps=100,
        dataset_size=200,
        description="Miniature model for the end-to-end smoke pipeline",
    ),
    Preset(
        name="small",
        d=64,
        n_layers=2,
        n_heads=4,
        batch_size=32,
        steps=2000,
        dataset_size=2000,
        description="Quick experiments; minutes on a laptop",
    ),
    Preset(
        name="desk",
        d=128,
        n_layers=4,
        n_heads=4,
        batch_size=32,
        steps=10000,
        dataset_size=10000,
        description="Default desk-scale recipe used for the ablation tables",
    ),
]


def list_presets() -> list[Preset]:
    """Return all built-in presets."""
    return list(PRESETS)


def get_preset(name: str) -> Preset:
    """Lookup a preset by name.

    Raises:
        diffscene.core.errors.ConfigurationError: If the name is unknown.
    """
    for p in PRESETS:
        if p.name == name:
            return p
    raise ConfigurationError(
        f"Unknown preset '{name}'",
        hint=f"Available presets: {', '.join(p.name for p in PRESETS)}",
    )
