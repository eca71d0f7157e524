"""Corpus slicing, deterministic splits, and the on-disk waveform format.

Disk layout: one binary file per (tag, scenario) holding that tag's
communications as interleaved (I, Q) float32 records, plus a JSON manifest
describing the directory.
"""

from __future__ import annotations

import json
import os
import struct
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .signalgen import ChannelScenario, IQWaveform

MAGIC = b"FPRN"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

_HEADER = struct.Struct("<4sHIdII")  # magic, version, tag_id, fs, comm_count, comm_len


class CorpusFormatError(ValueError):
    """Malformed or truncated corpus file."""


class SplitError(ValueError):
    """Split request cannot be satisfied."""


@dataclass
class SliceExample:
    """One fixed-length training example: an L x 2 real matrix plus label.

    Column 0 holds the real part, column 1 the imaginary part of L
    contiguous samples from a single communication.
    """

    data: np.ndarray
    label: int
    scenario_name: str
    comm_id: int = -1  # provenance: which communication the slice came from

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[1] != 2:
            raise ValueError(f"slice data must be Lx2, got {self.data.shape}")


@dataclass
class SplitDataset:
    train: list[SliceExample]
    validation: list[SliceExample]
    test: list[SliceExample]
    fraction_used: float = 1.0


def slice_waveform(wave: IQWaveform, L: int, comm_id: int = -1) -> list[SliceExample]:
    """Cut a communication into floor(len/L) contiguous non-overlapping slices."""
    if L < 1:
        raise ValueError("L must be >= 1")
    n = wave.samples.size // L
    out = []
    for i in range(n):
        seg = wave.samples[i * L : (i + 1) * L]
        data = np.stack([seg.real, seg.imag], axis=1).astype(np.float32)
        out.append(SliceExample(data, wave.tag_id, wave.scenario_name, comm_id))
    return out


def split_corpus(
    waves: list[IQWaveform],
    L: int,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    fraction: float = 1.0,
    seed: int = 0,
) -> SplitDataset:
    """Stratified per-tag split at communication granularity.

    Each tag's communications are shuffled by a seed-derived substream,
    the first `fraction` retained, then partitioned by `ratios`. All
    slices of one communication land in the same split.
    """
    if not (0.0 < fraction <= 1.0):
        raise SplitError(f"fraction must be in (0, 1], got {fraction}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError("split ratios must sum to 1")

    by_tag: dict[int, list[int]] = defaultdict(list)
    for i, w in enumerate(waves):
        by_tag[w.tag_id].append(i)

    parts: tuple[list[SliceExample], ...] = ([], [], [])
    for tag_id in sorted(by_tag):
        idxs = np.array(by_tag[tag_id])
        rng = np.random.default_rng(np.random.SeedSequence([seed, tag_id, 0x5B17]))
        rng.shuffle(idxs)
        keep = max(1, int(round(fraction * idxs.size)))
        idxs = idxs[:keep]
        n_train = int(round(ratios[0] * keep))
        n_val = int(round(ratios[1] * keep))
        n_test = keep - n_train - n_val
        if n_test < 1 or n_train < 1:
            raise SplitError(
                f"tag {tag_id}: {keep} communications are too few for a nonempty split"
            )
        bounds = [idxs[:n_train], idxs[n_train : n_train + n_val], idxs[n_train + n_val :]]
        for part, comm_idxs in zip(parts, bounds):
            for ci in comm_idxs:
                part.extend(slice_waveform(waves[ci], L, comm_id=int(ci)))
    return SplitDataset(parts[0], parts[1], parts[2], fraction_used=fraction)


def stack_slices(slices: list[SliceExample]) -> tuple[np.ndarray, np.ndarray]:
    """Pack slices into (N, 2, L) float32 inputs and (N,) int labels."""
    if not slices:
        raise ValueError("empty slice list")
    X = np.stack([s.data.T for s in slices]).astype(np.float32)
    y = np.array([s.label for s in slices], dtype=np.int64)
    return X, y


# ---------------------------------------------------------------------------
# On-disk format


def _corpus_filename(tag_id: int, scenario_name: str) -> str:
    return f"tag{tag_id:05d}_{scenario_name}.fprn"


def write_corpus(
    directory,
    waves: list[IQWaveform],
    scenarios: list[ChannelScenario] | None = None,
    seed: int | None = None,
) -> None:
    """Write waveforms grouped by (tag, scenario), plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    groups: dict[tuple[int, str], list[IQWaveform]] = defaultdict(list)
    for w in waves:
        if not (0 <= w.tag_id < 2**32):
            raise CorpusFormatError(f"tag_id {w.tag_id} out of u32 range")
        groups[(w.tag_id, w.scenario_name)].append(w)

    files = []
    for (tag_id, scen), ws in sorted(groups.items()):
        lens = {w.samples.size for w in ws}
        if len(lens) != 1:
            raise CorpusFormatError(
                f"tag {tag_id}/{scen}: mixed communication lengths {sorted(lens)}"
            )
        comm_len = lens.pop()
        fname = _corpus_filename(tag_id, scen)
        with open(os.path.join(directory, fname), "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, tag_id,
                                  ws[0].sample_rate_hz, len(ws), comm_len))
            for w in ws:
                rec = np.empty(2 * comm_len, dtype="<f4")
                rec[0::2] = w.samples.real
                rec[1::2] = w.samples.imag
                fh.write(rec.tobytes())
        files.append(
            {"path": fname, "tag_id": tag_id, "scenario": scen,
             "comm_count": len(ws), "comm_len": comm_len}
        )

    manifest = {
        "format": "FPRN",
        "version": FORMAT_VERSION,
        "files": files,
        "scenarios": [s.to_dict() for s in scenarios] if scenarios else [],
    }
    if seed is not None:
        manifest["seed"] = seed
    with open(os.path.join(directory, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _read_corpus_file(path) -> list[IQWaveform]:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise CorpusFormatError(f"{path}: truncated header at byte {len(header)}")
        magic, version, tag_id, fs, comm_count, comm_len = _HEADER.unpack(header)
        if magic != MAGIC:
            raise CorpusFormatError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise CorpusFormatError(f"{path}: unsupported version {version}")
        scen = _scenario_from_filename(os.path.basename(path))
        waves = []
        rec_bytes = 8 * comm_len
        for i in range(comm_count):
            raw = fh.read(rec_bytes)
            if len(raw) < rec_bytes:
                offset = _HEADER.size + i * rec_bytes + len(raw)
                raise CorpusFormatError(f"{path}: truncated record {i} at byte {offset}")
            flat = np.frombuffer(raw, dtype="<f4")
            waves.append(IQWaveform(flat[0::2] + 1j * flat[1::2], fs, tag_id, scen))
    return waves


def _scenario_from_filename(fname: str) -> str:
    stem = fname.rsplit(".", 1)[0]
    return stem.split("_", 1)[1] if "_" in stem else ""


def read_corpus(directory) -> list[IQWaveform]:
    """Read every file listed in the directory manifest."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise CorpusFormatError(f"missing manifest {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "FPRN" or manifest.get("version") != FORMAT_VERSION:
        raise CorpusFormatError("manifest format/version mismatch")
    waves = []
    for entry in manifest["files"]:
        waves.extend(_read_corpus_file(os.path.join(directory, entry["path"])))
    return waves


def read_manifest(directory) -> dict:
    with open(os.path.join(directory, MANIFEST_NAME)) as fh:
        return json.load(fh)
