"""Parametric additive-synthesis timbres.

Three strongly contrasting timbres for the chord dataset and thirteen
partial-profile timbres for the chorale dataset, partitioned into per-part
pools. All profiles are deterministic and separable by a small classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ConfigError


@dataclass(frozen=True)
class Envelope:
    attack: float = 0.02
    decay: float = 0.05
    sustain: float = 0.8
    release: float = 0.05

    def __post_init__(self):
        if min(self.attack, self.decay, self.release) < 0:
            raise ConfigError("envelope durations must be >= 0")
        if not 0.0 <= self.sustain <= 1.0:
            raise ConfigError("sustain level must lie in [0, 1]")


@dataclass(frozen=True)
class InstrumentSpec:
    id: int
    name: str
    partial_amplitudes: tuple[float, ...]
    # per-partial frequency multiplier offsets: partial k sounds at
    # f0 * (k + 1 + offset_k); zeros give a plain harmonic series
    inharmonicity: tuple[float, ...] = ()
    envelope: Envelope = field(default_factory=Envelope)

    def __post_init__(self):
        if not self.partial_amplitudes:
            raise ConfigError(f"instrument {self.name}: no partials")
        if any(a < 0 for a in self.partial_amplitudes):
            raise ConfigError(f"instrument {self.name}: negative partial amplitude")
        peak = max(self.partial_amplitudes)
        if peak <= 0:
            raise ConfigError(f"instrument {self.name}: all partials zero")
        object.__setattr__(
            self, "partial_amplitudes", tuple(a / peak for a in self.partial_amplitudes)
        )
        if self.inharmonicity and len(self.inharmonicity) != len(self.partial_amplitudes):
            raise ConfigError(f"instrument {self.name}: inharmonicity length mismatch")


def _harmonic(n: int, rolloff: float, odd_only: bool = False) -> tuple[float, ...]:
    amps = []
    for k in range(1, n + 1):
        if odd_only and k % 2 == 0:
            amps.append(0.0)
        else:
            amps.append(1.0 / k**rolloff)
    return tuple(amps)


# Chord-lab bank: bright sawtooth-like, hollow odd-harmonic, inharmonic bell.
CHORD_INSTRUMENTS: tuple[InstrumentSpec, ...] = (
    InstrumentSpec(0, "bright", _harmonic(10, 1.0)),
    InstrumentSpec(1, "hollow", _harmonic(9, 2.0, odd_only=True)),
    InstrumentSpec(
        2,
        "bell",
        (1.0, 0.6, 0.45, 0.3),
        inharmonicity=(0.0, 0.76, 2.4, 4.93),
        envelope=Envelope(attack=0.005, decay=0.1, sustain=0.6, release=0.08),
    ),
)


def _spec(i, name, n, rolloff, odd=False, inharm=0.0, env=None):
    inh = tuple(inharm * k * k for k in range(n)) if inharm else ()
    return InstrumentSpec(
        i, name, _harmonic(n, rolloff, odd_only=odd), inharmonicity=inh, envelope=env or Envelope()
    )


# Chorale bank: 13 distinct partial profiles grouped into SATB pools.
CHORALE_INSTRUMENTS: tuple[InstrumentSpec, ...] = (
    _spec(0, "sine", 1, 1.0),
    _spec(1, "reed", 8, 0.5, odd=True),
    _spec(2, "bright8", 8, 1.0),
    _spec(3, "mellow", 6, 2.5),
    _spec(4, "nasal", 10, 0.8, odd=True),
    _spec(5, "full10", 10, 1.5),
    _spec(6, "buzz", 12, 0.7),
    _spec(7, "clarinet", 9, 1.8, odd=True),
    _spec(8, "detuned", 8, 1.2, inharm=0.004),
    _spec(9, "soft4", 4, 2.0),
    _spec(10, "deep", 12, 1.0, inharm=0.002),
    _spec(11, "woody", 7, 2.2, odd=True),
    _spec(12, "organ", 10, 1.3),
)

DEFAULT_PART_POOLS: dict[str, tuple[int, ...]] = {
    "S": (0, 1, 2),
    "A": (3, 4, 5),
    "T": (6, 7, 8, 9),
    "B": (10, 11, 12),
}


def instrument_table(specs: tuple[InstrumentSpec, ...]) -> list[dict]:
    """JSON-able summary for dataset manifests."""
    return [
        {
            "id": s.id,
            "name": s.name,
            "partials": list(s.partial_amplitudes),
            "inharmonicity": list(s.inharmonicity),
            "envelope": [s.envelope.attack, s.envelope.decay, s.envelope.sustain, s.envelope.release],
        }
        for s in specs
    ]
