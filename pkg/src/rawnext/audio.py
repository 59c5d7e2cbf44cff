"""16 kHz mono PCM16 WAV reading and writing."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
_SCALE = 32767.0


class AudioIOError(RuntimeError):
    """Unreadable or non-conforming audio file."""


def write_wav(path, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write mono float samples in [-1, 1] as PCM16."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise AudioIOError(f"expected mono 1-D samples, got shape {samples.shape}")
    pcm = np.clip(np.rint(samples * _SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def read_wav(path, rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a PCM16 mono WAV at the expected rate into float32 [-1, 1]."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            framerate = w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise AudioIOError(f"cannot parse WAV file {path}: {exc}") from exc
    except OSError as exc:
        raise AudioIOError(f"cannot read {path}: {exc}") from exc
    if channels != 1:
        raise AudioIOError(f"{path}: channel count {channels} != 1")
    if width != 2:
        raise AudioIOError(f"{path}: sample width {8 * width} bits != 16")
    if framerate != rate:
        raise AudioIOError(f"{path}: sample rate {framerate} != {rate}")
    if len(raw) != 2 * n:
        raise AudioIOError(f"{path}: truncated data chunk ({len(raw)} bytes for {n} frames)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return (pcm.astype(np.float32)) / _SCALE
