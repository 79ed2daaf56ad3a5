"""Apparatus description and its INI-style config file.

Every numeric default reproduces the measurement setup of the
indistinguishability experiment (1.25 GHz clock, 400 ps time bins, 51.2 ns
thinning, 0.5 photons/pulse, 200 ps coincidence window, ...). A config file
only needs the ``[laser]`` section's ``pulse_duration_ps``; everything else
falls back to these defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .transmitter import Bb84State, LaserModel

REFERENCE_DELAYS_PS = (-26.0, -16.0, -6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0, 16.0, 26.0)
REFERENCE_STATE_PAIRS = (
    (Bb84State.UNMODULATED, Bb84State.UNMODULATED),
    (Bb84State.X1, Bb84State.X0),
    (Bb84State.Y0, Bb84State.X0),
    (Bb84State.Y1, Bb84State.X0),
)


class ConfigError(ValueError):
    """Invalid experiment configuration; ``line`` points into the source file if known."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 0.63
    dark_rate_hz: float = 20.0
    recovery_time_ns: float = 10.0
    jitter_ps: float = 24.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("detector efficiency must lie in [0, 1]")
        if min(self.dark_rate_hz, self.recovery_time_ns, self.jitter_ps) < 0:
            raise ValueError("detector rates and times must be non-negative")


@dataclass(frozen=True)
class TiaModel:
    resolution_ps: float = 100.0
    jitter_ps: float = 28.0
    coincidence_window_ps: float = 200.0

    def __post_init__(self):
        if self.coincidence_window_ps <= 0:
            raise ValueError("coincidence window must be positive")
        if self.resolution_ps < 0 or self.jitter_ps < 0:
            raise ValueError("TIA resolution and jitter must be non-negative")


@dataclass(frozen=True)
class DriftModel:
    """Slow apparatus drift, redrawn for every (delay, repeat) measurement.

    ``overlap_rel``: relative std of a mean-one lognormal factor on cos^2(Theta)
    (polarization and spectral drift). ``delay_ps``: std of the interferometer
    time-origin shift. ``intensity_rel``: relative std of the mean photon number.
    """

    overlap_rel: float = 0.3
    delay_ps: float = 0.8
    intensity_rel: float = 0.002

    def __post_init__(self):
        if min(self.overlap_rel, self.delay_ps, self.intensity_rel) < 0:
            raise ValueError("drift magnitudes must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    rep_period_ps: float = 800.0
    bin_separation_ps: float = 400.0
    thinning_interval_ns: float = 51.2
    mean_photons_per_pulse: float = 0.5
    delay_offsets_ps: tuple[float, ...] = REFERENCE_DELAYS_PS
    duration_per_point_s: float = 30.0
    repeats: int = 5
    state_pairs: tuple[tuple[Bb84State, Bb84State], ...] = REFERENCE_STATE_PAIRS
    laser: LaserModel = field(default_factory=LaserModel)
    detectors: tuple[DetectorModel, DetectorModel] = (DetectorModel(jitter_ps=24.0), DetectorModel(jitter_ps=14.0))
    tia: TiaModel = field(default_factory=TiaModel)
    z_bin: int = 0
    filter_bandwidth_ghz: float = 100.0
    interferometer_transmission: float = 0.5
    drift: DriftModel = field(default_factory=DriftModel)
    # per-state multiplicative penalty on cos^2(Theta): x -> x * (1 - penalty)
    overlap_penalty: tuple[tuple[Bb84State, float], ...] = ()
    reference_delay_ps: float = -26.0
    # nominal delay at which the two pulses overlap (interferometer time origin)
    delay_origin_ps: float = 1.0

    def __post_init__(self):
        if not self.delay_offsets_ps:
            raise ValueError("delay list is empty")
        if self.duration_per_point_s <= 0:
            raise ValueError("duration per point must be positive")
        if self.repeats < 2:
            raise ValueError("at least two repeats are needed for standard deviations")
        if self.thinning_interval_ns <= 0:
            raise ValueError("thinning interval must be positive")
        if self.mean_photons_per_pulse < 0:
            raise ValueError("mean photon number must be non-negative")
        if self.z_bin not in (0, 1):
            raise ValueError("z_bin selects bin 0 or 1")
        if not 0 < self.interferometer_transmission <= 1:
            raise ValueError("interferometer transmission must lie in (0, 1]")
        if self.reference_delay_ps not in self.delay_offsets_ps:
            raise ValueError("reference delay must be one of the delay offsets")
        if not self.state_pairs:
            raise ValueError("no state pairs configured")
        for _, pen in self.overlap_penalty:
            if not 0 <= pen <= 1:
                raise ValueError("overlap penalty must lie in [0, 1]")

    @property
    def trials_per_point(self) -> int:
        return int(round(self.duration_per_point_s / (self.thinning_interval_ns * 1e-9)))

    def penalty(self, state: Bb84State) -> float:
        for s, pen in self.overlap_penalty:
            if s is state:
                return pen
        return 0.0


def group_label(pair: tuple[Bb84State, Bb84State]) -> str:
    a, b = pair
    if a is b is Bb84State.UNMODULATED:
        return "unmodulated"
    return f"{a.value}-{b.value}"


# ---------------------------------------------------------------------------
# INI serialization

_SECTIONS = {
    "experiment": {
        "rep_period_ps": float, "bin_separation_ps": float, "thinning_interval_ns": float,
        "mean_photons_per_pulse": float, "delay_offsets_ps": "floats", "duration_per_point_s": float,
        "repeats": int, "state_pairs": "pairs", "z_bin": int, "filter_bandwidth_ghz": float,
        "interferometer_transmission": float, "reference_delay_ps": float, "delay_origin_ps": float,
    },
    "laser": {
        "pulse_duration_ps": float, "chirp": float, "timing_jitter_ps": float,
        "intensity_variance": float, "center_frequency_thz": float, "frequency_scatter_ghz": float,
    },
    "detector_c": {"efficiency": float, "dark_rate_hz": float, "recovery_time_ns": float, "jitter_ps": float},
    "detector_d": {"efficiency": float, "dark_rate_hz": float, "recovery_time_ns": float, "jitter_ps": float},
    "tia": {"resolution_ps": float, "jitter_ps": float, "coincidence_window_ps": float},
    "drift": {"overlap_rel": float, "delay_ps": float, "intensity_rel": float},
    "defects": "penalties",
}
_REQUIRED = {("laser", "pulse_duration_ps")}


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    where: dict[tuple[str, str | None], int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            where[(section, None)] = lineno
            continue
        if section is not None and ("=" in line or ":" in line):
            key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
            where[(section, key)] = lineno
    return where


def _parse_value(kind, raw: str):
    if kind is float:
        val = float(raw)
        if not math.isfinite(val):
            raise ValueError("not a finite number")
        return val
    if kind is int:
        return int(raw)
    if kind == "floats":
        return tuple(float(x) for x in raw.replace(",", " ").split())
    if kind == "pairs":
        pairs = []
        for item in raw.replace(";", ",").split(","):
            item = item.strip()
            if not item:
                continue
            if item.lower() == "unmodulated":
                pairs.append((Bb84State.UNMODULATED, Bb84State.UNMODULATED))
                continue
            left, right = item.split("-")
            pairs.append((Bb84State.parse(left), Bb84State.parse(right)))
        return tuple(pairs)
    raise AssertionError(kind)


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    lines = _line_index(text)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str.lower
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None), source) from exc

    values: dict[str, dict] = {}
    for section in parser.sections():
        sec = section.lower()
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]", lines.get((sec, None)), source)
        spec = _SECTIONS[sec]
        values[sec] = {}
        for key, raw in parser.items(section):
            line = lines.get((sec, key))
            if spec == "penalties":
                try:
                    values[sec][Bb84State.parse(key)] = float(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{sec}] {key}: {exc}", line, source) from exc
                continue
            if key not in spec:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", line, source)
            try:
                values[sec][key] = _parse_value(spec[key], raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{sec}] {key} = {raw!r}: {exc}", line, source) from exc

    for sec, key in sorted(_REQUIRED):
        if key not in values.get(sec, {}):
            anchor = lines.get((sec, None))
            raise ConfigError(f"missing required field {key!r} in [{sec}]", anchor, source)

    try:
        laser = LaserModel(**values.get("laser", {}))
        det_c = DetectorModel(**{**_asdict(ExperimentConfig().detectors[0]), **values.get("detector_c", {})})
        det_d = DetectorModel(**{**_asdict(ExperimentConfig().detectors[1]), **values.get("detector_d", {})})
        tia = TiaModel(**values.get("tia", {}))
        drift = DriftModel(**values.get("drift", {}))
        penalties = tuple(values.get("defects", {}).items())
        return ExperimentConfig(laser=laser, detectors=(det_c, det_d), tia=tia, drift=drift,
                                overlap_penalty=penalties, **values.get("experiment", {}))
    except ValueError as exc:
        sec = _guess_section(str(exc))
        raise ConfigError(str(exc), lines.get((sec, None)) if sec else None, source) from exc


def _guess_section(message: str) -> str | None:
    msg = message.lower()
    for word, sec in (("detector", "detector_c"), ("tia", "tia"), ("drift", "drift"),
                      ("penalty", "defects"), ("pulse", "laser"), ("laser", "laser"),
                      ("jitter", "laser"), ("intensity", "laser"), ("frequency", "laser")):
        if word in msg:
            return sec
    return "experiment"


def _asdict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from exc
    return parse_config(text, source=str(path))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a config as INI text; ``parse_config(dump_config(c)) == c``."""
    out = io.StringIO()
    exp = {
        "rep_period_ps": cfg.rep_period_ps,
        "bin_separation_ps": cfg.bin_separation_ps,
        "thinning_interval_ns": cfg.thinning_interval_ns,
        "mean_photons_per_pulse": cfg.mean_photons_per_pulse,
        "delay_offsets_ps": ", ".join(_fmt(float(t)) for t in cfg.delay_offsets_ps),
        "duration_per_point_s": cfg.duration_per_point_s,
        "repeats": cfg.repeats,
        "state_pairs": ", ".join(group_label(p) for p in cfg.state_pairs),
        "z_bin": cfg.z_bin,
        "filter_bandwidth_ghz": cfg.filter_bandwidth_ghz,
        "interferometer_transmission": cfg.interferometer_transmission,
        "reference_delay_ps": cfg.reference_delay_ps,
        "delay_origin_ps": cfg.delay_origin_ps,
    }
    blocks = [("experiment", exp), ("laser", _asdict(cfg.laser)),
              ("detector_c", _asdict(cfg.detectors[0])), ("detector_d", _asdict(cfg.detectors[1])),
              ("tia", _asdict(cfg.tia)), ("drift", _asdict(cfg.drift))]
    if cfg.overlap_penalty:
        blocks.append(("defects", {s.value: pen for s, pen in cfg.overlap_penalty}))
    for name, kv in blocks:
        out.write(f"[{name}]\n")
        for k, v in kv.items():
            out.write(f"{k} = {_fmt(v)}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()


def config_summary(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(
        {"laser": _asdict(cfg.laser), "drift": _asdict(cfg.drift),
         "groups": [group_label(p) for p in cfg.state_pairs],
         "delays_ps": list(cfg.delay_offsets_ps), "repeats": cfg.repeats}, default=str))
