"""Data pipeline: WAV ingestion, cardiac-cycle segmentation, balanced
cross-validation folds, the on-disk cycle store, and a synthetic
heart-sound generator for desk-scale experiments.

Segmentation is deliberately simple: a smoothed Shannon-energy envelope,
an autocorrelation period estimate constrained to plausible heart rates,
and comb-aligned cycle anchors refined to local envelope peaks. It is
validated against synthetic recordings with known timing; real-world
segmentation quality is out of scope here.
"""

from __future__ import annotations

import csv
import json
import struct
import wave
from dataclasses import dataclass, field

import numpy as np

from .dsp import Waveform, resample
from .errors import DataError, SegmentationError

PIPELINE_RATE_HZ = 1000.0
CYCLE_LEN = 2500            # 2.5 s at the pipeline rate
MIN_CYCLE_LEN = 400         # 0.4 s; anything shorter is not a plausible cycle
BPM_MIN, BPM_MAX = 35.0, 159.0

ENVELOPE_SMOOTH_S = 0.05
PERIODICITY_MIN = 0.15      # min normalized envelope autocorrelation peak

STORE_MAGIC = b"PCGCYC\x00\x01"

TRAIN_ONLY_FOLD = -1        # recordings kept out of every validation set


@dataclass(frozen=True)
class RecordingMeta:
    id: str
    label: int                    # 0 normal, 1 abnormal
    subset: str = "synthetic"
    fold: int = TRAIN_ONLY_FOLD

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class CycleRecord:
    recording_id: str
    samples: np.ndarray           # exactly CYCLE_LEN, zero beyond valid_len
    label: int
    valid_len: int
    subset: str = "synthetic"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (CYCLE_LEN,):
            raise ValueError(f"cycle must have {CYCLE_LEN} samples, got {self.samples.shape}")
        if not MIN_CYCLE_LEN <= self.valid_len <= CYCLE_LEN:
            raise ValueError(f"valid_len {self.valid_len} outside "
                             f"[{MIN_CYCLE_LEN}, {CYCLE_LEN}]")
        if self.valid_len < CYCLE_LEN and np.any(self.samples[self.valid_len:] != 0.0):
            raise ValueError("samples beyond valid_len must be zero")


# ---------------------------------------------------------------------------
# WAV + label manifest ingestion

def load_recording(wav_path: str, label: int, recording_id: str | None = None,
                   subset: str = "unknown") -> tuple[Waveform, RecordingMeta]:
    """Read a PCM16 mono WAV, normalize to [-1, 1], resample to 1000 Hz."""
    rid = recording_id or str(wav_path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    try:
        with wave.open(str(wav_path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise DataError(f"{rid}: only mono WAV supported, "
                                f"got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise DataError(f"{rid}: only 16-bit PCM supported, "
                                f"got {8 * wf.getsampwidth()}-bit")
            rate = wf.getframerate()
            nframes = wf.getnframes()
            raw = wf.readframes(nframes)
    except (wave.Error, EOFError) as e:
        raise DataError(f"{rid}: unreadable WAV ({e})") from None
    if nframes == 0:
        raise DataError(f"{rid}: empty WAV file")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    x = Waveform(samples, float(rate))
    if rate != PIPELINE_RATE_HZ:
        x = resample(x, PIPELINE_RATE_HZ)
    return x, RecordingMeta(id=rid, label=int(label), subset=subset)


def write_wav(path: str, x: Waveform) -> None:
    """Write a waveform as PCM16 mono (values clipped to [-1, 1))."""
    pcm = np.clip(np.round(x.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(round(x.sample_rate_hz)))
        wf.writeframes(pcm.tobytes())


def read_label_manifest(path: str) -> dict[str, int]:
    """CSV `id,label` with label -1 (normal) / 1 (abnormal)."""
    out: dict[str, int] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "id":
                continue
            rid, lab = row[0].strip(), row[1].strip()
            if lab not in ("-1", "1"):
                raise DataError(f"label for {rid} must be -1 or 1, got {lab!r}")
            out[rid] = 1 if lab == "1" else 0
    if not out:
        raise DataError(f"no labels found in {path}")
    return out


def write_label_manifest(path: str, metas: list[RecordingMeta]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"])
        for m in metas:
            w.writerow([m.id, 1 if m.label == 1 else -1])


# ---------------------------------------------------------------------------
# segmentation

def _envelope(samples: np.ndarray, rate: float) -> np.ndarray:
    peak = np.abs(samples).max()
    if peak == 0.0:
        raise ValueError("silent signal")
    xn = samples / peak
    e2 = xn * xn
    shannon = -e2 * np.log(e2 + 1e-12)
    w = max(3, int(round(ENVELOPE_SMOOTH_S * rate)))
    return np.convolve(shannon, np.ones(w) / w, mode="same")


def _period_estimate(env: np.ndarray, rate: float) -> tuple[int, float]:
    centered = env - env.mean()
    n = centered.size
    nfft = 1
    while nfft < 2 * n:
        nfft <<= 1
    spec = np.fft.rfft(centered, nfft)
    acorr = np.fft.irfft(spec * np.conj(spec), nfft)[:n]
    lo = int(round(rate * 60.0 / BPM_MAX))
    hi = min(int(round(rate * 60.0 / BPM_MIN)), n - 1)
    if hi <= lo or acorr[0] <= 0.0:
        return 0, 0.0
    tau = lo + int(np.argmax(acorr[lo:hi + 1]))
    return tau, float(acorr[tau] / acorr[0])


def segment_cycles(x: Waveform, recording_id: str = "?", label: int = 0,
                   subset: str = "synthetic") -> list[CycleRecord]:
    """Cut a recording into heart cycles, each zero-padded to 2.5 s.

    Raises SegmentationError when no periodicity in the 35-159 bpm range
    stands out of the envelope autocorrelation.
    """
    rate = x.sample_rate_hz
    if len(x) < 3 * rate:
        raise SegmentationError(recording_id, f"too short ({len(x) / rate:.2f} s < 3 s)")
    try:
        env = _envelope(x.samples, rate)
    except ValueError as e:
        raise SegmentationError(recording_id, str(e)) from None
    tau, strength = _period_estimate(env, rate)
    if tau == 0 or strength < PERIODICITY_MIN:
        raise SegmentationError(
            recording_id, f"no periodicity in 35-159 bpm range "
                          f"(peak autocorrelation {strength:.3f} at lag {tau})")
    # comb alignment: the offset whose tau-spaced samples collect the most
    # envelope energy marks the dominant (S1) burst phase
    m = env.size // tau
    comb = env[: m * tau].reshape(m, tau).sum(axis=0)
    phase = int(np.argmax(comb))
    anchors = []
    refine = max(1, tau // 8)
    pos = phase
    while pos < env.size:
        a, b = max(0, pos - refine), min(env.size, pos + refine + 1)
        anchors.append(a + int(np.argmax(env[a:b])))
        pos += tau
    cycles = []
    for a, b in zip(anchors, anchors[1:]):
        seg = x.samples[a:b]
        if seg.size < MIN_CYCLE_LEN:
            continue
        valid = min(seg.size, CYCLE_LEN)
        buf = np.zeros(CYCLE_LEN)
        buf[:valid] = seg[:valid]
        cycles.append(CycleRecord(recording_id=recording_id, samples=buf,
                                  label=label, valid_len=valid, subset=subset))
    if not cycles:
        raise SegmentationError(recording_id, "no usable cycles after peak picking")
    return cycles


# ---------------------------------------------------------------------------
# folds

def make_folds(metas: list[RecordingMeta], seed: int,
               pinned_fold0: list[str] | None = None) -> dict[str, int]:
    """Assign recordings to 4 balanced validation folds.

    Every fold's validation set holds the same number of normal and
    abnormal recordings; leftovers get TRAIN_ONLY_FOLD and appear in every
    training split. An externally supplied id list pins fold 0.
    """
    if len(metas) < 8:
        raise DataError(f"need at least 8 recordings to build folds, got {len(metas)}")
    by_id = {m.id: m for m in metas}
    if len(by_id) != len(metas):
        raise DataError("duplicate recording ids")
    labels = {m.id: m.label for m in metas}
    assignment = {m.id: TRAIN_ONLY_FOLD for m in metas}

    folds_todo = [0, 1, 2, 3]
    pool = sorted(by_id)
    if pinned_fold0 is not None:
        missing = [r for r in pinned_fold0 if r not in by_id]
        if missing:
            raise DataError(f"pinned fold-0 ids not in dataset: {missing[:5]}")
        n_pos = sum(labels[r] for r in pinned_fold0)
        if 2 * n_pos != len(pinned_fold0):
            raise DataError(f"pinned fold 0 is not balanced "
                            f"({n_pos} abnormal of {len(pinned_fold0)})")
        for r in pinned_fold0:
            assignment[r] = 0
        folds_todo = [1, 2, 3]
        pool = [r for r in pool if assignment[r] == TRAIN_ONLY_FOLD]

    rng = np.random.default_rng(seed)
    normal = [r for r in pool if labels[r] == 0]
    abnormal = [r for r in pool if labels[r] == 1]
    per_fold = min(len(normal), len(abnormal)) // len(folds_todo)
    if per_fold < 1:
        raise DataError(f"too few of one class to balance {len(folds_todo)} validation "
                        f"sets ({len(normal)} normal / {len(abnormal)} abnormal)")
    normal = list(rng.permutation(normal))
    abnormal = list(rng.permutation(abnormal))
    for i, fold in enumerate(folds_todo):
        for r in normal[i * per_fold:(i + 1) * per_fold]:
            assignment[r] = fold
        for r in abnormal[i * per_fold:(i + 1) * per_fold]:
            assignment[r] = fold
    return assignment


def write_fold_manifest(path: str, assignment: dict[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "fold"])
        for rid in sorted(assignment):
            w.writerow([rid, assignment[rid]])


def read_fold_manifest(path: str) -> dict[str, int]:
    out: dict[str, int] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "id":
                continue
            out[row[0].strip()] = int(row[1])
    if not out:
        raise DataError(f"no fold assignments in {path}")
    return out


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class SynthRecording:
    waveform: Waveform
    meta: RecordingMeta
    bpm: float
    s1_freq_hz: float
    s2_freq_hz: float
    murmur_freqs_hz: tuple[float, ...]   # empty for normal recordings


MURMUR_BAND_HZ = (150.0, 400.0)


def synth_pcg(n_recordings: int, abnormal_fraction: float = 0.21, seed: int = 0,
              duration_s: tuple[float, float] = (6.0, 10.0),
              source_rate_hz: float = 2000.0) -> list[SynthRecording]:
    """Generate heart-sound-like recordings with known ground truth.

    Normal recordings are periodic S1/S2 burst trains plus noise; abnormal
    ones add a sustained murmur of sinusoids inside MURMUR_BAND_HZ between
    S1 and S2. Fully reproducible from the seed.
    """
    if not 0.0 <= abnormal_fraction <= 1.0:
        raise ValueError("abnormal_fraction must be in [0, 1]")
    if n_recordings < 1:
        raise ValueError("n_recordings must be >= 1")
    master = np.random.default_rng(np.random.SeedSequence(seed))
    n_abnormal = int(round(n_recordings * abnormal_fraction))
    labels = np.zeros(n_recordings, dtype=int)
    labels[:n_abnormal] = 1
    labels = labels[master.permutation(n_recordings)]
    streams = np.random.SeedSequence(seed).spawn(n_recordings + 1)[1:]

    out = []
    for i in range(n_recordings):
        rng = np.random.default_rng(streams[i])
        label = int(labels[i])
        bpm = rng.uniform(50.0, 120.0)
        dur = rng.uniform(*duration_s)
        n = int(round(dur * source_rate_hz))
        t = np.arange(n) / source_rate_hz
        period = 60.0 / bpm
        systole = 0.35 * period
        s1f = rng.uniform(30.0, 80.0)
        s2f = rng.uniform(40.0, 100.0)
        x = rng.normal(0.0, 0.02, size=n)
        murmur_freqs: tuple[float, ...] = ()
        if label == 1:
            murmur_freqs = tuple(rng.uniform(*MURMUR_BAND_HZ, size=6))
            murmur_phases = rng.uniform(0.0, 2.0 * np.pi, size=6)
        start = rng.uniform(0.05, 0.3)
        pos = start
        while pos < dur - 0.2:
            x += _burst(t, pos, s1f, width_s=0.045, amp=1.0)
            x += _burst(t, pos + systole, s2f, width_s=0.030, amp=0.55)
            if label == 1:
                gate = _plateau(t, pos + 0.07, pos + systole - 0.03, edge_s=0.015)
                for f, ph in zip(murmur_freqs, murmur_phases):
                    x += gate * (0.18 * np.sin(2.0 * np.pi * f * t + ph))
            pos += period
        x *= 0.9 / np.abs(x).max()
        meta = RecordingMeta(id=f"rec{i:04d}", label=label, subset="synthetic")
        out.append(SynthRecording(waveform=Waveform(x, source_rate_hz), meta=meta,
                                  bpm=bpm, s1_freq_hz=s1f, s2_freq_hz=s2f,
                                  murmur_freqs_hz=murmur_freqs))
    return out


def _burst(t: np.ndarray, center_s: float, freq_hz: float, width_s: float,
           amp: float) -> np.ndarray:
    d = t - center_s
    return amp * np.exp(-0.5 * (d / width_s) ** 2) * np.sin(2.0 * np.pi * freq_hz * d)


def _plateau(t: np.ndarray, start_s: float, stop_s: float, edge_s: float) -> np.ndarray:
    if stop_s <= start_s:
        return np.zeros_like(t)
    up = 0.5 * (1.0 + np.tanh((t - start_s) / edge_s))
    down = 0.5 * (1.0 + np.tanh((stop_s - t) / edge_s))
    return up * down


# ---------------------------------------------------------------------------
# cycle store

@dataclass
class CycleStore:
    """All cycles of a dataset plus their metadata, as parallel arrays."""

    samples: np.ndarray                 # [n_cycles, CYCLE_LEN] float64
    recording_ids: list[str]
    labels: np.ndarray                  # [n_cycles] int (0/1)
    valid_lens: np.ndarray              # [n_cycles] int
    subsets: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = self.samples.shape[0]
        if not self.subsets:
            self.subsets = ["unknown"] * n
        if not (len(self.recording_ids) == self.labels.size
                == self.valid_lens.size == len(self.subsets) == n):
            raise ValueError("cycle store arrays disagree in length")

    def __len__(self):
        return self.samples.shape[0]

    @classmethod
    def from_cycles(cls, cycles: list[CycleRecord]) -> "CycleStore":
        if not cycles:
            raise DataError("no cycles to store")
        return cls(samples=np.stack([c.samples for c in cycles]),
                   recording_ids=[c.recording_id for c in cycles],
                   labels=np.array([c.label for c in cycles], dtype=int),
                   valid_lens=np.array([c.valid_len for c in cycles], dtype=int),
                   subsets=[c.subset for c in cycles])

    def recording_labels(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for rid, lab in zip(self.recording_ids, self.labels):
            out[rid] = int(lab)
        return out

    def cycles_of(self, recording_id: str) -> np.ndarray:
        idx = [i for i, r in enumerate(self.recording_ids) if r == recording_id]
        return self.samples[idx]

    def save(self, path: str) -> None:
        meta = [{"recording_id": r, "label": int(l), "valid_len": int(v), "subset": s}
                for r, l, v, s in zip(self.recording_ids, self.labels,
                                      self.valid_lens, self.subsets)]
        with open(path, "wb") as fh:
            fh.write(STORE_MAGIC)
            fh.write(struct.pack("<QQ", self.samples.shape[0], self.samples.shape[1]))
            fh.write(np.ascontiguousarray(self.samples, dtype="<f8").tobytes())
            fh.write(json.dumps(meta, sort_keys=True).encode())

    @classmethod
    def load(cls, path: str) -> "CycleStore":
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as e:
            raise DataError(f"cannot read cycle store {path}: {e}") from None
        head = len(STORE_MAGIC)
        if blob[:head] != STORE_MAGIC:
            raise DataError(f"{path} is not a cycle store")
        n, dim = struct.unpack_from("<QQ", blob, head)
        body = head + 16
        nbytes = 8 * n * dim
        if len(blob) < body + nbytes:
            raise DataError(f"{path} is truncated")
        samples = np.frombuffer(blob[body:body + nbytes], dtype="<f8").reshape(n, dim).copy()
        try:
            meta = json.loads(blob[body + nbytes:].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: bad metadata trailer ({e})") from None
        if len(meta) != n:
            raise DataError(f"{path}: metadata rows ({len(meta)}) != cycle count ({n})")
        return cls(samples=samples,
                   recording_ids=[m["recording_id"] for m in meta],
                   labels=np.array([m["label"] for m in meta], dtype=int),
                   valid_lens=np.array([m["valid_len"] for m in meta], dtype=int),
                   subsets=[m.get("subset", "unknown") for m in meta])
