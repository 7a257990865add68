"""Corpus management: indexing, deterministic splits, and clip sampling.

Works over any directory tree of mono 16-bit PCM WAV files (speaker/chapter
subdirectories like LibriSpeech layouts are fine but not required). Files
that fail format checks are excluded and listed in the index's rejects.

Also hosts the converted-pair manifest builder for tamper-evaluation suites
and a synthetic speech-like corpus generator so the pipeline can be
exercised end to end without shipping or downloading any dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import DEFAULT_SAMPLE_RATE, Waveform, read_wav, resample, write_wav
from .errors import CorpusError, InvalidInputError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CorpusEntry:
    path: str
    duration_s: float
    sample_rate: int
    split: str


@dataclass(frozen=True)
class CorpusIndex:
    """Deterministic snapshot of a corpus directory."""

    root: str
    seed: int
    split_spec: tuple[float, float, float]
    entries: tuple[CorpusEntry, ...]
    rejects: tuple[dict, ...] = field(default_factory=tuple)

    def by_split(self, split: str) -> list[CorpusEntry]:
        if split not in SPLITS:
            raise InvalidInputError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def save(self, path: str | Path) -> None:
        doc = {
            "root": self.root,
            "seed": self.seed,
            "split_spec": list(self.split_spec),
            "entries": [asdict(e) for e in self.entries],
            "rejects": list(self.rejects),
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))

    @staticmethod
    def load(path: str | Path) -> "CorpusIndex":
        doc = json.loads(Path(path).read_text())
        return CorpusIndex(
            root=doc["root"],
            seed=doc["seed"],
            split_spec=tuple(doc["split_spec"]),
            entries=tuple(CorpusEntry(**e) for e in doc["entries"]),
            rejects=tuple(doc["rejects"]),
        )


def build_index(root_dir: str | Path, split_spec: tuple[float, float, float] = (0.8, 0.1, 0.1),
                seed: int = 0) -> CorpusIndex:
    """Scan a directory into a deterministic train/val/test index.

    Unreadable or non-conforming files are rejected (and reported), never
    fatal. The split assignment is a seeded shuffle, so the same directory
    and seed always produce the same index.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} is not a directory")
    if abs(sum(split_spec) - 1.0) > 1e-9 or min(split_spec) < 0:
        raise InvalidInputError(f"split fractions must be >= 0 and sum to 1, got {split_spec}")

    accepted: list[tuple[str, float, int]] = []
    rejects: list[dict] = []
    for path in sorted(root.rglob("*.wav")):
        try:
            w = read_wav(path)
            if len(w) == 0:
                raise InvalidInputError("empty audio")
            accepted.append((str(path), w.duration_s, w.sample_rate))
        except InvalidInputError as exc:
            rejects.append({"path": str(path), "reason": str(exc)})
    if not accepted:
        raise CorpusError(f"no usable WAV files under {root} ({len(rejects)} rejected)")

    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(accepted))
    n = len(accepted)
    n_val = int(n * split_spec[1])
    n_test = int(n * split_spec[2])
    split_of = {}
    for rank, idx in enumerate(order):
        if rank < n_val:
            split_of[idx] = "val"
        elif rank < n_val + n_test:
            split_of[idx] = "test"
        else:
            split_of[idx] = "train"

    entries = tuple(
        CorpusEntry(path=p, duration_s=d, sample_rate=r, split=split_of[i])
        for i, (p, d, r) in enumerate(accepted)
    )
    return CorpusIndex(root=str(root), seed=seed, split_spec=tuple(split_spec),
                       entries=entries, rejects=tuple(rejects))


class CorpusCache:
    """In-memory cache of decoded clips, resampled to the pipeline rate."""

    def __init__(self, target_rate: int = DEFAULT_SAMPLE_RATE):
        self.target_rate = target_rate
        self._store: dict[str, np.ndarray] = {}

    def load(self, path: str) -> np.ndarray:
        cached = self._store.get(path)
        if cached is None:
            w = read_wav(path)
            if w.sample_rate != self.target_rate:
                w = resample(w, self.target_rate)
            cached = w.samples.astype(np.float32)
            self._store[path] = cached
        return cached


def _eligible(index: CorpusIndex, split: str, clip_seconds: float) -> list[CorpusEntry]:
    pool = [e for e in index.by_split(split) if e.duration_s >= clip_seconds]
    if not pool:
        raise CorpusError(
            f"no {split!r} entries of at least {clip_seconds} s in the index"
        )
    return pool


def sample_clip_batch(index: CorpusIndex, split: str, clip_seconds: float,
                      batch_size: int, seed: int, cache: CorpusCache) -> np.ndarray:
    """Stateless batch draw: uniform over files, then uniform over offsets.

    Deterministic for a given seed, which is what makes training runs
    resumable without serializing RNG state.
    """
    pool = _eligible(index, split, clip_seconds)
    rng = np.random.Generator(np.random.PCG64(seed))
    clip_len = int(round(clip_seconds * cache.target_rate))
    out = np.empty((batch_size, clip_len), dtype=np.float32)
    for b in range(batch_size):
        entry = pool[rng.integers(len(pool))]
        samples = cache.load(entry.path)
        max_start = max(len(samples) - clip_len, 0)
        start = int(rng.integers(0, max_start + 1))
        clip = samples[start:start + clip_len]
        if len(clip) < clip_len:
            clip = np.pad(clip, (0, clip_len - len(clip)))
        out[b] = clip
    return out


def clip_sampler(index: CorpusIndex, clip_seconds: float, seed: int,
                 split: str = "train", limit: int | None = None):
    """Stream of fixed-length training clips as Waveform values."""
    cache = CorpusCache()
    _eligible(index, split, clip_seconds)
    count = 0
    while limit is None or count < limit:
        # each clip gets its own derived seed so the stream is reproducible
        batch = sample_clip_batch(index, split, clip_seconds, 1, seed + count, cache)
        yield Waveform(samples=batch[0].astype(np.float64), sample_rate=cache.target_rate)
        count += 1


def build_testset_b_manifest(root_dir: str | Path, name: str = "test_set_B") -> dict:
    """Scan ``<root>/<label>/{original,converted}/`` pairs into a manifest.

    Each label directory must hold matching filenames in its two
    subdirectories plus a ``messages.json`` ({basename: hex}) or a root-level
    one recording the payload embedded in each original.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise CorpusError(f"{root} is not a directory")
    root_messages = {}
    root_msg_file = root / "messages.json"
    if root_msg_file.exists():
        root_messages = json.loads(root_msg_file.read_text())

    items = []
    for label_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        orig_dir, conv_dir = label_dir / "original", label_dir / "converted"
        if not (orig_dir.is_dir() and conv_dir.is_dir()):
            continue
        messages = dict(root_messages)
        local = label_dir / "messages.json"
        if local.exists():
            messages.update(json.loads(local.read_text()))
        meta_file = label_dir / "meta.json"
        meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
        category = meta.get("class", "malicious")
        for orig in sorted(orig_dir.glob("*.wav")):
            conv = conv_dir / orig.name
            if not conv.exists():
                continue
            if orig.name not in messages:
                raise CorpusError(
                    f"{label_dir.name}/{orig.name}: no embedded-message record in messages.json"
                )
            items.append({
                "label": label_dir.name,
                "class": category,
                "original": str(orig),
                "converted": str(conv),
                "message_hex": messages[orig.name],
                "provenance": meta.get("provenance", ""),
            })
    if not items:
        raise CorpusError(f"no conversion pairs found under {root}")
    return {"name": name, "items": items}


# -- synthetic corpus ----------------------------------------------------


def _speechlike_clip(rng: np.random.Generator, seconds: float, rate: int) -> np.ndarray:
    """One speech-like clip: pitched harmonic source, formant filtering,
    syllabic amplitude modulation, and short pauses."""
    n = int(seconds * rate)
    t = np.arange(n) / rate

    # Pitch contour: slow random walk inside a typical speaking range.
    f0_base = rng.uniform(95.0, 220.0)
    walk = np.cumsum(rng.standard_normal(n)) / np.sqrt(n)
    f0 = np.clip(f0_base * (1.0 + 0.15 * walk + 0.08 * np.sin(2 * np.pi * 2.1 * t)), 70.0, 320.0)
    phase = 2 * np.pi * np.cumsum(f0) / rate

    voiced = np.zeros(n)
    for k in range(1, 11):
        voiced += np.sin(k * phase) / k
    breath = rng.standard_normal(n) * 0.6

    # Formant resonances give the spectrum a vowel-like shape.
    mix = voiced + 0.15 * breath
    for lo, hi in ((280, 850), (900, 1900), (2100, 3400)):
        fc = rng.uniform(lo, hi)
        bw = fc * rng.uniform(0.08, 0.18)
        sos = sps.butter(2, [max(fc - bw, 50.0), min(fc + bw, rate / 2 - 100)],
                         btype="band", fs=rate, output="sos")
        mix = mix + 2.5 * sps.sosfilt(sos, voiced + 0.1 * breath)

    # Syllable-rate envelope with occasional silence gaps.
    env_noise = rng.standard_normal(n // 160 + 2)
    env = np.interp(np.arange(n), np.arange(len(env_noise)) * 160, env_noise)
    sos_env = sps.butter(2, 6.0, btype="low", fs=rate, output="sos")
    env = sps.sosfilt(sos_env, env)
    env = np.clip(env / (np.abs(env).max() + 1e-9) + 0.6, 0.0, 1.0)
    n_gaps = rng.integers(1, 4)
    for _ in range(n_gaps):
        g0 = rng.integers(0, max(n - rate // 3, 1))
        env[g0:g0 + rng.integers(rate // 10, rate // 3)] *= 0.02

    out = mix * env
    rms = np.sqrt(np.mean(out ** 2)) + 1e-9
    out = out * (0.08 / rms)
    return np.clip(out, -0.95, 0.95)


def synthesize_corpus(out_dir: str | Path, minutes: float = 31.0, seed: int = 0,
                      clip_seconds: float = 8.0,
                      sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[Path]:
    """Write a deterministic speech-like WAV corpus totalling ``minutes``.

    Lets the training and evaluation pipeline run end to end on machines
    without any speech dataset. Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_clips = int(np.ceil(minutes * 60.0 / clip_seconds))
    rng = np.random.Generator(np.random.PCG64(seed))
    paths = []
    for i in range(n_clips):
        clip = _speechlike_clip(rng, clip_seconds, sample_rate)
        path = out / f"clip_{i:05d}.wav"
        write_wav(path, Waveform(samples=clip, sample_rate=sample_rate))
        paths.append(path)
    return paths
