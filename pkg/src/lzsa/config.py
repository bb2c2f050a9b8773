"""Scenario configuration files.

Flat ``key = value`` text; ``#`` starts a comment. Every physical value
carries a unit suffix::

    sweep.carrier   = 603.5 khz
    sweep.duration  = 300 ms
    tone.1.field    = 3.272 nt
    tone.1.phase    = 3.93 rad
    noise.shot_rms  = 0.42 rel

Frequencies (``hz khz mhz rad/s``) are stored as angular frequencies in
rad/s. Integers (seeds, counts) and booleans are written bare; any other
bare number is an error. Unknown keys are rejected. All problems in a file
are reported together, one ``file:line: message`` per line.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .errors import ConfigurationError
from .estimator import GAMMA, field_to_amplitude
from .model import TWO_PI, SweepConfig, Tone
from .synth import DIGITIZER_RATE, HARDWARE_PHASE_DEG, DecayModel, GainDistortion, NoiseModel

UNITS = {
    "frequency": {"hz": TWO_PI, "khz": TWO_PI * 1e3, "mhz": TWO_PI * 1e6, "rad/s": 1.0},
    "time": {"s": 1.0, "ms": 1e-3, "us": 1e-6},
    "field": {"t": 1.0, "nt": 1e-9, "pt": 1e-12},
    "angle": {"rad": 1.0, "deg": math.pi / 180.0},
    "rate": {"sps": 1.0, "ksps": 1e3, "msps": 1e6},
    "ratio": {"rel": 1.0},
    "gamma": {"hz/nt": TWO_PI * 1e9, "rad/s/t": 1.0},
}

INIT_STATES = {
    "eigenstate_up": (0.0, 0.0, 1.0),
    "eigenstate_down": (0.0, 0.0, -1.0),
    "superposition": (1.0, 0.0, 0.0),
}

# key -> kind; kinds are unit families, or int / bool / str / enum
SCHEMA = {
    "name": "str",
    "sweep.carrier": "frequency",
    "sweep.rabi_start": "frequency",
    "sweep.rabi_stop": "frequency",
    "sweep.duration": "time",
    "sweep.larmor": "frequency",
    "init_state": "init",
    "seed": "int",
    "noise.shot_rms": "ratio",
    "noise.electronic_rms": "ratio",
    "decay.lifetime": "time",
    "digitizer.rate": "rate",
    "digitizer.hw_phase": "angle",
    "digitizer.quantize": "bool",
    "digitizer.full_scale": "ratio",
    "calibration.gamma": "gamma",
    "output.record": "str",
    "output.truth": "str",
    "process.rabi_correction": "bool",
    "process.smoothness": "ratio",
    "process.mask_widths": "ratio",
    "estimate.tones": "int",
    "estimate.phase": "bool",
    "estimate.auto_bounds": "bool",
    "estimate.amplitude_min": "frequency",
    "estimate.amplitude_max": "frequency",
    "estimate.population": "int",
    "estimate.window": "int",
    "estimate.max_steps": "int",
    "estimate.seed": "int",
    "estimate.workers": "int",
    "estimate.correction_iterations": "int",
}
TONE_KEYS = {"amplitude": "frequency", "field": "field", "frequency": "frequency", "phase": "angle"}
DISTORTION_KEY = re.compile(r"^distortion\.c(\d+)$")
TONE_KEY = re.compile(r"^tone\.(\d+)\.(\w+)$")
NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?inf"
VALUE = re.compile(rf"^({NUMBER})\s*([a-z/]+)$", re.IGNORECASE)
REQUIRED = ("sweep.carrier", "sweep.rabi_start", "sweep.rabi_stop", "sweep.duration")


@dataclass(frozen=True)
class EstimateSettings:
    tones: int | None = None
    phase: bool = True
    auto_bounds: bool = False
    amplitude_min: float = TWO_PI * 5.0
    amplitude_max: float = TWO_PI * 300.0
    population: int | None = None
    window: int = 150
    max_steps: int = 10_000
    seed: int = 0
    workers: int = 1
    correction_iterations: int = 2


@dataclass(frozen=True)
class ProcessSettings:
    rabi_correction: bool = True
    smoothness: float = 200.0
    mask_widths: float = 5.0


@dataclass(frozen=True)
class ScenarioConfig:
    """Ground truth and acquisition settings of one simulated experiment."""

    sweep: SweepConfig
    tones: tuple[Tone, ...] = ()
    init_state: str = "eigenstate_up"
    noise: NoiseModel = NoiseModel.off()
    decay: DecayModel = DecayModel.none()
    distortion: GainDistortion | None = None
    seed: int = 0
    rate: float = DIGITIZER_RATE
    hw_phase_deg: float = HARDWARE_PHASE_DEG
    quantize: bool = False
    full_scale: float = 2.0
    gamma: float = GAMMA
    name: str = ""
    record: str = "raw.lzr"
    truth: str = "truth.json"
    process: ProcessSettings = field(default_factory=ProcessSettings)
    estimate: EstimateSettings = field(default_factory=EstimateSettings)

    @property
    def init(self) -> tuple[float, float, float]:
        return INIT_STATES[self.init_state]

    def without_noise(self) -> "ScenarioConfig":
        return replace(self, noise=NoiseModel.off())

    def truth_dict(self) -> dict:
        return {
            "name": self.name,
            "sweep": {
                "carrier_rad_s": self.sweep.carrier,
                "rabi_start_rad_s": self.sweep.rabi_start,
                "rabi_stop_rad_s": self.sweep.rabi_stop,
                "duration_s": self.sweep.duration,
            },
            "tones": [
                {"amplitude_rad_s": t.amplitude, "frequency_rad_s": t.frequency, "phase_rad": t.phase,
                 "field_nt": t.amplitude / self.gamma * 1e9}
                for t in self.tones
            ],
            "init_state": self.init_state,
            "fz0": self.init[2],
            "noise": {"shot_rms": self.noise.shot_rms, "electronic_rms": self.noise.electronic_rms,
                      "seed": self.noise.seed},
            "decay_lifetime_s": self.decay.lifetime,
            "distortion": list(self.distortion.coefficients) if self.distortion else [],
            "gamma_rad_s_per_t": self.gamma,
        }


def parse_value(kind: str, text: str):
    """Parse one value of the given kind; raises ValueError with a reason."""
    text = text.strip()
    if kind == "str":
        if not text:
            raise ValueError("empty string")
        return text
    if kind == "int":
        if not re.fullmatch(r"[-+]?\d+", text):
            raise ValueError(f"expected an integer, got {text!r}")
        return int(text)
    if kind == "bool":
        low = text.lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if kind == "init":
        if text not in INIT_STATES:
            raise ValueError(f"init_state must be one of {', '.join(INIT_STATES)}")
        return text
    units = UNITS[kind]
    if re.fullmatch(NUMBER, text):
        raise ValueError(f"bare number {text!r}; a unit is required ({' '.join(units)})")
    m = VALUE.match(text)
    if not m:
        raise ValueError(f"cannot parse {text!r} as <number> <unit>")
    unit = m.group(2).lower()
    if unit not in units:
        raise ValueError(f"unit {m.group(2)!r} is not a {kind} unit ({' '.join(units)})")
    return float(m.group(1)) * units[unit]


def parse_config(text: str, source: str = "<string>") -> ScenarioConfig:
    """Parse configuration text into a :class:`ScenarioConfig`."""
    errors = []
    values: dict[str, tuple[object, int]] = {}
    tones: dict[int, dict[str, tuple[float, int]]] = {}
    distortion: dict[int, float] = {}

    def err(line, msg):
        errors.append(f"{source}:{line}: {msg}")

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            err(lineno, f"expected 'key = value', got {line!r}")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        tm = TONE_KEY.match(key)
        dm = DISTORTION_KEY.match(key)
        if tm:
            idx, sub = int(tm.group(1)), tm.group(2)
            if sub not in TONE_KEYS:
                err(lineno, f"unknown key {key!r} (tone keys: {', '.join(TONE_KEYS)})")
                continue
            kind = TONE_KEYS[sub]
            slot = tones.setdefault(idx, {})
        elif dm:
            kind = "ratio"
        elif key in SCHEMA:
            kind = SCHEMA[key]
        else:
            err(lineno, f"unknown key {key!r}")
            continue
        try:
            v = parse_value(kind, value)
        except ValueError as e:
            err(lineno, f"{key}: {e}")
            continue
        if tm:
            if sub in slot:
                err(lineno, f"duplicate key {key!r} (first on line {slot[sub][1]})")
            slot[sub] = (v, lineno)
        elif dm:
            k = int(dm.group(1))
            if k < 2:
                err(lineno, "distortion coefficients start at c2")
            elif k in distortion:
                err(lineno, f"duplicate key {key!r}")
            else:
                distortion[k] = v
        else:
            if key in values:
                err(lineno, f"duplicate key {key!r} (first on line {values[key][1]})")
            values[key] = (v, lineno)

    for key in REQUIRED:
        if key not in values:
            errors.append(f"{source}: missing required key {key!r}")

    def get(key, default=None):
        return values[key][0] if key in values else default

    gamma = get("calibration.gamma", GAMMA)
    tone_list = []
    for idx in sorted(tones):
        slot = tones[idx]
        line = min(l for _, l in slot.values())
        if ("amplitude" in slot) == ("field" in slot):
            err(line, f"tone.{idx}: give exactly one of amplitude or field")
            continue
        if "frequency" not in slot:
            err(line, f"tone.{idx}: missing frequency")
            continue
        amp = slot["amplitude"][0] if "amplitude" in slot else field_to_amplitude(slot["field"][0], gamma)
        try:
            tone_list.append(Tone(amp, slot["frequency"][0], slot.get("phase", (0.0, 0))[0]))
        except Exception as e:  # domain errors from Tone
            err(line, f"tone.{idx}: {e}")

    if distortion and sorted(distortion) != list(range(2, max(distortion) + 1)):
        errors.append(f"{source}: distortion coefficients must be contiguous from c2")

    sweep = None
    if not any(k not in values for k in REQUIRED):
        try:
            sweep = SweepConfig(
                get("sweep.carrier"), get("sweep.rabi_start"), get("sweep.rabi_stop"),
                get("sweep.duration"), get("sweep.larmor"),
            )
        except ConfigurationError as e:
            errors.append(f"{source}:{values['sweep.carrier'][1]}: sweep: {e}")

    noise = decay = None
    try:
        shot = get("noise.shot_rms", 0.0)
        noise = NoiseModel(shot, get("noise.electronic_rms"), get("seed", 0))
    except Exception as e:
        errors.append(f"{source}: noise: {e}")
    try:
        decay = DecayModel(get("decay.lifetime", math.inf))
    except Exception as e:
        errors.append(f"{source}: decay: {e}")

    if errors:
        raise ConfigurationError("\n".join(errors))

    est = EstimateSettings(**{k.split(".", 1)[1]: v for k, (v, _) in values.items() if k.startswith("estimate.")})
    proc = ProcessSettings(**{k.split(".", 1)[1]: v for k, (v, _) in values.items() if k.startswith("process.")})
    return ScenarioConfig(
        sweep=sweep,
        tones=tuple(tone_list),
        init_state=get("init_state", "eigenstate_up"),
        noise=noise,
        decay=decay,
        distortion=GainDistortion([distortion[k] for k in sorted(distortion)]) if distortion else None,
        seed=get("seed", 0),
        rate=get("digitizer.rate", DIGITIZER_RATE),
        hw_phase_deg=math.degrees(get("digitizer.hw_phase", math.radians(HARDWARE_PHASE_DEG))),
        quantize=get("digitizer.quantize", False),
        full_scale=get("digitizer.full_scale", 2.0),
        gamma=gamma,
        name=get("name", ""),
        record=get("output.record", "raw.lzr"),
        truth=get("output.truth", "truth.json"),
        process=proc,
        estimate=est,
    )


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigurationError(f"{path}: {e.strerror}") from e
    return parse_config(text, str(path))


PRESETS = ("paper_single_tone", "paper_multi_tone")


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r} (available: {', '.join(PRESETS)})")
    return resources.files("lzsa.presets").joinpath(f"{name}.cfg").read_text()


def load_preset(name: str) -> ScenarioConfig:
    return parse_config(preset_text(name), f"preset:{name}")


def resolve(spec: str) -> ScenarioConfig:
    """A preset name or a config file path."""
    if spec in PRESETS:
        return load_preset(spec)
    return load_config(spec)
