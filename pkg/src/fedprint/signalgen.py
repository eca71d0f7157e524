"""Synthetic EPC-Gen2 RN16 backscatter waveform generation.

Builds labeled I/Q communications for a population of simulated tags:
a random 16-bit payload is FM0-encoded at the backscatter link frequency,
distorted by a per-tag hardware impairment profile, and finally passed
through a parametric channel (distance loss, tissue attenuation,
narrowband interferers, AWGN).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SAMPLE_RATE_HZ = 5e6
DEFAULT_BLF_HZ = 40_000.0
DEFAULT_COMM_LEN = 3400
REFERENCE_DISTANCE_CM = 20.0

# FM0 preamble "1010v1": v is the standard's phase-inversion violation,
# encoded here as a data-1 whose boundary inversion is suppressed.
PREAMBLE_SYMBOLS = ("1", "0", "1", "0", "v", "1")

# Representative UHF attenuation coefficients for the two tissue analogs.
FAT_ATTEN_DB_PER_CM = 0.9
MUSCLE_ATTEN_DB_PER_CM = 1.6

# Per-tag impairment draw ranges for the population generator. These are
# configuration, not ground truth: wide enough that tags separate, small
# enough that classification is not trivial.
POPULATION_RANGES = {
    "cfo_hz": (-2000.0, 2000.0),
    "iq_gain_imbalance": (0.9, 1.1),
    "iq_phase_imbalance_rad": (-0.05, 0.05),
    "dc_offset_abs": (0.0, 0.05),
    "phase_noise_std_rad": (0.0, 5e-4),
    "harmonic": (-0.05, 0.05),
    "rise_time_samples": (0, 8),
}


class SignalGenError(ValueError):
    """Invalid parameters or non-finite signal during synthesis."""


@dataclass(frozen=True)
class TagProfile:
    """Hardware impairment parameters that form one tag's fingerprint."""

    tag_id: int
    cfo_hz: float = 0.0
    iq_gain_imbalance: float = 1.0
    iq_phase_imbalance_rad: float = 0.0
    dc_offset: complex = 0.0 + 0.0j
    phase_noise_std_rad: float = 0.0
    harmonic_coeffs: tuple[float, ...] = (0.0, 0.0)
    rise_time_samples: int = 0

    def __post_init__(self):
        if self.tag_id < 0:
            raise SignalGenError(f"tag_id must be non-negative, got {self.tag_id}")
        if self.iq_gain_imbalance <= 0:
            raise SignalGenError("iq_gain_imbalance must be > 0")
        if self.phase_noise_std_rad < 0:
            raise SignalGenError("phase_noise_std_rad must be >= 0")
        if self.rise_time_samples < 0:
            raise SignalGenError("rise_time_samples must be >= 0")


@dataclass(frozen=True)
class TissueObstacle:
    thickness_cm: float
    atten_db_per_cm: float

    def __post_init__(self):
        if self.thickness_cm < 0:
            raise SignalGenError("thickness_cm must be >= 0")

    @property
    def total_atten_db(self) -> float:
        return self.thickness_cm * self.atten_db_per_cm


@dataclass(frozen=True)
class ChannelScenario:
    """One channel condition: distance, obstacle, noise and interference."""

    name: str
    distance_cm: float
    obstacle: TissueObstacle | None = None
    snr_db: float = math.inf
    interferers: tuple[tuple[float, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.distance_cm <= 0:
            raise SignalGenError("distance_cm must be > 0")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "distance_cm": self.distance_cm,
            "obstacle": None
            if self.obstacle is None
            else {
                "thickness_cm": self.obstacle.thickness_cm,
                "atten_db_per_cm": self.obstacle.atten_db_per_cm,
            },
            "snr_db": "inf" if math.isinf(self.snr_db) else self.snr_db,
            "interferers": [list(t) for t in self.interferers],
            "seed": self.seed,
            # Reader/tag turnaround times at BLF datarate R: T1 = 10/R,
            # T2 = 1/R. Metadata only; the RN16-only waveform is unaffected.
            "t1_s": 10.0 / DEFAULT_BLF_HZ,
            "t2_s": 1.0 / DEFAULT_BLF_HZ,
        }

    @staticmethod
    def from_dict(d: dict) -> "ChannelScenario":
        obst = d.get("obstacle")
        snr = d.get("snr_db", "inf")
        return ChannelScenario(
            name=d["name"],
            distance_cm=float(d["distance_cm"]),
            obstacle=None
            if obst is None
            else TissueObstacle(float(obst["thickness_cm"]), float(obst["atten_db_per_cm"])),
            snr_db=math.inf if snr == "inf" else float(snr),
            interferers=tuple((float(f), float(p)) for f, p in d.get("interferers", [])),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class RN16Frame:
    """One tag reply: fixed preamble plus 16 fresh random payload bits."""

    payload_bits: tuple[int, ...]
    preamble_symbols: tuple[str, ...] = PREAMBLE_SYMBOLS
    blf_hz: float = DEFAULT_BLF_HZ

    def __post_init__(self):
        if len(self.payload_bits) != 16:
            raise SignalGenError("RN16 payload must be 16 bits")


@dataclass
class IQWaveform:
    """Complex-sampled communication labeled with its tag and scenario."""

    samples: np.ndarray
    sample_rate_hz: float
    tag_id: int
    scenario_name: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if not np.issubdtype(self.samples.dtype, np.complexfloating):
            self.samples = self.samples.astype(np.complex128)
        if not np.all(np.isfinite(self.samples)):
            raise SignalGenError("waveform contains non-finite samples")


# ---------------------------------------------------------------------------
# Scenario naming: SCEN-dist-obst

_SCEN_RE = re.compile(r"^SCEN-(\d{3})-(OTA|PM0|PM1)$")

_OBSTACLE_CODES = {
    None: "OTA",
    "PM0": "PM0",
    "PM1": "PM1",
}


def encode_scenario_name(distance_cm: float, obstacle_code: str | None) -> str:
    """Encode (distance, obstacle) as a SCEN-dist-obst string."""
    code = _OBSTACLE_CODES[obstacle_code]
    return f"SCEN-{int(round(distance_cm)):03d}-{code}"


def parse_scenario_name(name: str) -> tuple[float, str | None]:
    """Parse a SCEN-dist-obst string back to (distance_cm, obstacle_code)."""
    m = _SCEN_RE.match(name)
    if m is None:
        raise SignalGenError(f"scenario name {name!r} does not match SCEN-dist-obst")
    dist = float(int(m.group(1)))
    code = m.group(2)
    return dist, None if code == "OTA" else code


def default_obstacle(obstacle_code: str | None) -> TissueObstacle | None:
    """Default tissue analog for an obstacle code: PM0 fat, PM1 muscle."""
    if obstacle_code is None:
        return None
    if obstacle_code == "PM0":
        return TissueObstacle(0.5, FAT_ATTEN_DB_PER_CM)
    if obstacle_code == "PM1":
        return TissueObstacle(3.0, MUSCLE_ATTEN_DB_PER_CM)
    raise SignalGenError(f"unknown obstacle code {obstacle_code!r}")


def write_scenario_catalog(path, scenarios: list[ChannelScenario]) -> None:
    with open(path, "w") as fh:
        json.dump({"scenarios": [s.to_dict() for s in scenarios]}, fh, indent=2)
        fh.write("\n")


def read_scenario_catalog(path) -> list[ChannelScenario]:
    with open(path) as fh:
        doc = json.load(fh)
    return [ChannelScenario.from_dict(d) for d in doc["scenarios"]]


# ---------------------------------------------------------------------------
# RN16 framing and FM0 line coding


def generate_rn16(rng: np.random.Generator, blf_hz: float = DEFAULT_BLF_HZ) -> RN16Frame:
    """Draw a fresh uniformly random 16-bit payload."""
    bits = tuple(int(b) for b in rng.integers(0, 2, size=16))
    return RN16Frame(payload_bits=bits, blf_hz=blf_hz)


def fm0_encode(
    frame: RN16Frame,
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
    comm_len: int = DEFAULT_COMM_LEN,
) -> np.ndarray:
    """FM0-encode preamble + payload + dummy-1 into a real baseband vector.

    The level inverts at every bit boundary; a data-0 adds a mid-bit
    inversion. Output is zero-padded (or truncated) to comm_len samples.
    """
    if sample_rate_hz < 2 * frame.blf_hz:
        raise SignalGenError(
            f"sample rate {sample_rate_hz} below Nyquist for BLF {frame.blf_hz}"
        )
    spb = int(round(sample_rate_hz / frame.blf_hz))
    half = spb // 2

    symbols = list(frame.preamble_symbols) + [str(b) for b in frame.payload_bits] + ["1"]
    out = np.zeros(len(symbols) * spb, dtype=np.float64)
    level = 1.0
    for i, sym in enumerate(symbols):
        if sym != "v":  # violation symbol skips the boundary inversion
            level = -level
        seg = out[i * spb : (i + 1) * spb]
        seg[:] = level
        if sym == "0":
            seg[half:] = -level
            level = -level

    if comm_len >= out.size:
        return np.concatenate([out, np.zeros(comm_len - out.size)])
    return out[:comm_len]


# ---------------------------------------------------------------------------
# Impairments and channel


def _smooth_edges(x: np.ndarray, rise: int) -> np.ndarray:
    if rise <= 0:
        return x
    kernel = np.ones(rise + 1) / (rise + 1)
    return np.convolve(x, kernel, mode="same")


def apply_impairments(
    baseband: np.ndarray,
    profile: TagProfile,
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
    rng: np.random.Generator | None = None,
) -> IQWaveform:
    """Imprint one tag's hardware fingerprint onto an ideal baseband.

    Stage order: edge smoothing, memoryless nonlinearity, CFO phase ramp,
    phase-noise random walk, I/Q imbalance, DC offset.
    """
    x = np.asarray(baseband, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise SignalGenError("non-finite input baseband")
    n = x.size

    stages: list[tuple[str, np.ndarray]] = []

    x = _smooth_edges(x, profile.rise_time_samples)
    stages.append(("edge_smoothing", x))

    c2, c3 = (tuple(profile.harmonic_coeffs) + (0.0, 0.0))[:2]
    x = x + c2 * x**2 + c3 * x**3
    stages.append(("nonlinearity", x))

    idx = np.arange(n)
    z = x * np.exp(1j * 2 * np.pi * profile.cfo_hz * idx / sample_rate_hz)
    stages.append(("cfo", z))

    if profile.phase_noise_std_rad > 0:
        if rng is None:
            raise SignalGenError("phase noise requires an RNG")
        walk = np.cumsum(rng.normal(0.0, profile.phase_noise_std_rad, size=n))
        z = z * np.exp(1j * walk)
        stages.append(("phase_noise", z))

    i_part = profile.iq_gain_imbalance * z.real
    q_part = z.imag * np.cos(profile.iq_phase_imbalance_rad) + z.real * np.sin(
        profile.iq_phase_imbalance_rad
    )
    z = i_part + 1j * q_part
    stages.append(("iq_imbalance", z))

    z = z + complex(profile.dc_offset)
    stages.append(("dc_offset", z))

    for name, arr in stages:
        if not np.all(np.isfinite(arr)):
            raise SignalGenError(f"non-finite output produced by stage {name!r}")

    return IQWaveform(z, sample_rate_hz, profile.tag_id, scenario_name="")


def apply_channel(
    wave: IQWaveform,
    scenario: ChannelScenario,
    rng: np.random.Generator | None = None,
) -> IQWaveform:
    """Apply distance loss, tissue attenuation, interferers, and AWGN."""
    z = wave.samples.copy()
    n = z.size

    z *= REFERENCE_DISTANCE_CM / scenario.distance_cm
    if scenario.obstacle is not None:
        z *= 10.0 ** (-scenario.obstacle.total_atten_db / 20.0)

    active = np.abs(z) > 0
    if not np.any(active):
        raise SignalGenError("SNR undefined on an all-zero signal")
    sig_power = float(np.mean(np.abs(z[active]) ** 2))

    idx = np.arange(n)
    for freq_hz, rel_power_db in scenario.interferers:
        amp = math.sqrt(sig_power * 10.0 ** (rel_power_db / 10.0))
        z = z + amp * np.exp(1j * 2 * np.pi * freq_hz * idx / wave.sample_rate_hz)

    if not math.isinf(scenario.snr_db):
        if rng is None:
            raise SignalGenError("finite SNR requires an RNG")
        noise_power = sig_power / 10.0 ** (scenario.snr_db / 10.0)
        std = math.sqrt(noise_power / 2.0)
        z = z + rng.normal(0.0, std, size=n) + 1j * rng.normal(0.0, std, size=n)

    return IQWaveform(z, wave.sample_rate_hz, wave.tag_id, scenario.name)


# ---------------------------------------------------------------------------
# Population and corpus synthesis


def generate_tag_population(
    n_tags: int, seed: int, ranges: dict | None = None
) -> list[TagProfile]:
    """Draw n_tags distinct impairment profiles from the configured ranges."""
    r = dict(POPULATION_RANGES)
    if ranges:
        r.update(ranges)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A65]))
    profiles = []
    for tag_id in range(n_tags):
        dc_abs = rng.uniform(*r["dc_offset_abs"])
        dc_angle = rng.uniform(0, 2 * np.pi)
        profiles.append(
            TagProfile(
                tag_id=tag_id,
                cfo_hz=rng.uniform(*r["cfo_hz"]),
                iq_gain_imbalance=rng.uniform(*r["iq_gain_imbalance"]),
                iq_phase_imbalance_rad=rng.uniform(*r["iq_phase_imbalance_rad"]),
                dc_offset=dc_abs * complex(np.cos(dc_angle), np.sin(dc_angle)),
                phase_noise_std_rad=rng.uniform(*r["phase_noise_std_rad"]),
                harmonic_coeffs=(rng.uniform(*r["harmonic"]), rng.uniform(*r["harmonic"])),
                rise_time_samples=int(rng.integers(r["rise_time_samples"][0],
                                                   r["rise_time_samples"][1] + 1)),
            )
        )
    return profiles


def synthesize_communication(
    profile: TagProfile,
    scenario: ChannelScenario,
    rng: np.random.Generator,
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
    comm_len: int = DEFAULT_COMM_LEN,
) -> IQWaveform:
    frame = generate_rn16(rng)
    baseband = fm0_encode(frame, sample_rate_hz, comm_len)
    impaired = apply_impairments(baseband, profile, sample_rate_hz, rng)
    received = apply_channel(impaired, scenario, rng)
    # Quantize to float32 resolution so the f32 disk format is lossless.
    received.samples = received.samples.astype(np.complex64)
    return received


def synthesize_scenario(
    profiles: list[TagProfile],
    scenario: ChannelScenario,
    comms_per_tag: int = 2000,
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
    comm_len: int = DEFAULT_COMM_LEN,
) -> list[IQWaveform]:
    """Synthesize comms_per_tag labeled communications for every profile.

    Deterministic under (scenario.seed, profiles): each (tag, scenario)
    pair derives an independent RNG substream, so tags may be generated
    in parallel without changing the output.
    """
    if comms_per_tag < 1:
        raise SignalGenError("comms_per_tag must be >= 1")
    if not profiles:
        raise SignalGenError("profiles must be nonempty")
    ids = [p.tag_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise SignalGenError("duplicate tag_id in profiles")

    waves = []
    for profile in profiles:
        rng = np.random.default_rng(np.random.SeedSequence([scenario.seed, profile.tag_id]))
        for _ in range(comms_per_tag):
            waves.append(
                synthesize_communication(profile, scenario, rng, sample_rate_hz, comm_len)
            )
    return waves
