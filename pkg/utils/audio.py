import logging
from pathlib import Path
from typing import Union

import numpy as np
import soundfile as sf

from models.world import Waveform
from utils.errors import DataIntegrityError

logger = logging.getLogger(__name__)


def write_wav(path: Union[str, Path], waveform: Waveform) -> Path:
    """Mono PCM16 little-endian WAV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        sf.write(str(path), waveform.samples, waveform.sample_rate, subtype="PCM_16", endian="LITTLE", format="WAV")
    except (RuntimeError, OSError) as e:
        raise DataIntegrityError(f"Failed to write audio {path}: {e}")
    return path


def read_wav(path: Union[str, Path]) -> Waveform:
    path = Path(path)
    try:
        samples, sample_rate = sf.read(str(path), dtype="int16", always_2d=False)
    except (RuntimeError, OSError) as e:
        raise DataIntegrityError(f"Failed to read audio {path}: {e}")
    if samples.ndim != 1:
        raise DataIntegrityError(f"Audio {path} is not mono (shape {samples.shape})")
    return Waveform(samples=np.asarray(samples, dtype=np.int16), sample_rate=int(sample_rate))
