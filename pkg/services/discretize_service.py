import logging
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.signal import get_window
from sklearn.cluster import kmeans_plusplus

from models.units import FeatureConfig, FrameFeatures, KMeansModel, RunLengthUnits
from models.world import ManifestRow, Waveform, WorldSpec
from numerics.checkpoint import load_checkpoint, save_checkpoint
from utils.errors import DataIntegrityError, DimensionError, EmptyFeatureError, InfeasibleError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10
DISTANCE_CHUNK = 4096


def linear_filterbank(n_bands: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular bands on a linear frequency axis, ``[n_bands x n_fft//2+1]``."""
    edges = np.linspace(0.0, sample_rate / 2.0, n_bands + 2)
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    bank = np.zeros((n_bands, bins.size))
    for b in range(n_bands):
        left, center, right = edges[b], edges[b + 1], edges[b + 2]
        rising = (bins - left) / (center - left)
        falling = (right - bins) / (right - center)
        bank[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def squared_distances(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances via explicit differences (keeps ties exact)."""
    out = np.empty((features.shape[0], centroids.shape[0]))
    for start in range(0, features.shape[0], DISTANCE_CHUNK):
        block = features[start:start + DISTANCE_CHUNK]
        out[start:start + DISTANCE_CHUNK] = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return out


class DiscretizeService:
    """Frame features, per-family k-means and run-length unit extraction."""

    def __init__(self, feature_config: Optional[FeatureConfig] = None):
        self.feature_config = feature_config or FeatureConfig()

    # ===== FEATURES =====

    def extract_features(self, waveform: Waveform, cfg: Optional[FeatureConfig] = None) -> FrameFeatures:
        cfg = cfg or self.feature_config
        signal = waveform.to_float()
        if signal.size < cfg.window:
            raise EmptyFeatureError(
                f"Waveform of {signal.size} samples is shorter than one analysis window ({cfg.window})"
            )
        frames = np.lib.stride_tricks.sliding_window_view(signal, cfg.window)[:: cfg.hop]
        window = get_window("hann", cfg.window, fftbins=True)
        power = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)) ** 2
        energies = power @ linear_filterbank(cfg.n_bands, cfg.n_fft, waveform.sample_rate).T
        return FrameFeatures(
            frames=np.log(np.maximum(energies, LOG_FLOOR)),
            frame_hop=cfg.hop / waveform.sample_rate,
            sample_rate=waveform.sample_rate,
        )

    # ===== K-MEANS =====

    def kmeans_train(
        self,
        features: np.ndarray,
        k: int,
        seed: int,
        max_iters: int = 100,
        tol: float = 1e-6,
        family: str = "",
    ) -> KMeansModel:
        """k-means++ seeding then Lloyd iterations; inertia history is non-increasing."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise DimensionError(f"k-means expects [N x D] features, got {features.shape}")
        distinct = np.unique(features, axis=0).shape[0]
        if distinct < k:
            raise InfeasibleError(f"k-means needs at least k={k} distinct feature rows, got {distinct}")

        centroids, _ = kmeans_plusplus(features, n_clusters=k, random_state=seed)
        centroids = centroids.astype(np.float64)
        history: List[float] = []
        for iteration in range(max_iters):
            distances = squared_distances(features, centroids)
            labels = distances.argmin(axis=1)
            own = distances[np.arange(features.shape[0]), labels]
            inertia = float(own.sum())
            history.append(inertia)
            if iteration > 0 and history[-2] - inertia < tol:
                break

            updated = centroids.copy()
            counts = np.bincount(labels, minlength=k)
            for c in np.flatnonzero(counts):
                updated[c] = features[labels == c].mean(axis=0)
            taken = set()
            for c in np.flatnonzero(counts == 0):
                order = np.argsort(-own, kind="stable")
                far = next(int(i) for i in order if int(i) not in taken)
                taken.add(far)
                logger.warning(f"k-means cluster {c} of family {family or '?'} emptied; re-seeding at frame {far}")
                updated[c] = features[far]
            centroids = updated

        logger.info(f"k-means family={family} k={k}: inertia {history[-1]:.4f} after {len(history)} iterations")
        return KMeansModel(centroids=centroids, k=k, family=family, inertia=history[-1], inertia_history=history)

    def quantize(self, features: Union[FrameFeatures, np.ndarray], model: KMeansModel) -> np.ndarray:
        frames = features.frames if isinstance(features, FrameFeatures) else np.asarray(features, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != model.dim:
            raise DimensionError(f"feature shape {frames.shape} does not match centroids {model.centroids.shape}")
        # argmin returns the first minimum: lowest centroid index on ties
        return squared_distances(frames, model.centroids).argmin(axis=1).astype(np.int64)

    @staticmethod
    def dedup(frame_units: Sequence[int], family: str = "", language: Optional[str] = None) -> RunLengthUnits:
        units: List[int] = []
        durations: List[int] = []
        for unit in frame_units:
            unit = int(unit)
            if units and units[-1] == unit:
                durations[-1] += 1
            else:
                units.append(unit)
                durations.append(1)
        return RunLengthUnits(units=units, durations=durations, family=family, language=language)

    @staticmethod
    def cluster_purity(units: np.ndarray, labels: np.ndarray) -> float:
        """Share of labelled frames whose cluster's majority label matches theirs; label -1 is ignored."""
        units = np.asarray(units)
        labels = np.asarray(labels)
        if units.shape != labels.shape:
            raise DimensionError(f"units {units.shape} and labels {labels.shape} differ")
        keep = labels >= 0
        if not keep.any():
            return 1.0
        table = pd.crosstab(units[keep], labels[keep])
        return float(table.max(axis=1).sum() / keep.sum())

    # ===== CORPUS-LEVEL HELPERS =====

    @staticmethod
    def family_k(world: WorldSpec, family: str, k_factor: float) -> int:
        """Cluster count for a family (or a single language), scaled from its tone inventory."""
        for spec in world.families:
            if spec.family == family:
                return max(2, int(round(k_factor * len(spec.frequencies()))))
            if family in spec.languages:
                return max(2, int(round(k_factor * len(spec.inventories[family]))))
        raise InfeasibleError(f"Unknown family {family!r}")

    def features_for_rows(
        self, manifest_path: Union[str, Path], rows: Iterable[ManifestRow], side: str = "tgt",
        cfg: Optional[FeatureConfig] = None,
    ) -> Dict[str, np.ndarray]:
        from services.corpus_service import CorpusService

        out: Dict[str, np.ndarray] = {}
        for row in rows:
            relative = row.tgt_audio if side == "tgt" else row.src_audio
            out[relative] = self.extract_features(CorpusService.load_audio(manifest_path, relative), cfg).frames
        return out

    def extract_units(
        self, features: Dict[str, np.ndarray], rows: Sequence[ManifestRow], model: KMeansModel,
    ) -> List[RunLengthUnits]:
        return [
            self.dedup(self.quantize(features[row.tgt_audio], model), family=model.family, language=row.tgt_lang)
            for row in rows
        ]

    def sweep_units(
        self,
        world: WorldSpec,
        manifest_path: Union[str, Path],
        rows: Sequence[ManifestRow],
        feature_cfgs: Sequence[FeatureConfig],
        k_values: Sequence[int],
        seed: int = 0,
        recovery_steps: int = 0,
        max_iters: int = 50,
        recovery_fn: Optional[Callable[..., float]] = None,
    ) -> Tuple[pd.DataFrame, Dict[str, object]]:
        """Grid over feature configs and cluster counts; selects the argmax of the selection metric.

        The metric is round-trip unit recovery through a small throwaway vocoder when
        ``recovery_steps > 0``, else frame-level cluster purity.
        """
        from services.world_service import WorldService

        if not feature_cfgs or not k_values:
            raise InfeasibleError("sweep_units needs non-empty feature and k grids")
        recovery_fn = recovery_fn or self.vocoder_recovery
        world_service = WorldService(world)
        records = []
        for cfg in feature_cfgs:
            features = self.features_for_rows(manifest_path, rows, cfg=cfg)
            stacked = np.concatenate([features[row.tgt_audio] for row in rows])
            labels = np.concatenate([
                world_service.frame_labels(row.tgt_lang, row.target_symbols, cfg) for row in rows
            ])
            for k in k_values:
                model = self.kmeans_train(stacked, k, seed, max_iters=max_iters)
                purity = self.cluster_purity(self.quantize(stacked, model), labels)
                recovery = recovery_fn(world, manifest_path, rows, cfg, model, seed, recovery_steps) if recovery_steps > 0 else None
                records.append({
                    "window": cfg.window,
                    "hop": cfg.hop,
                    "n_bands": cfg.n_bands,
                    "k": k,
                    "inertia": model.inertia,
                    "purity": purity,
                    "recovery": recovery,
                    "selection_metric": purity if recovery is None else recovery,
                })
                logger.info(f"sweep n_bands={cfg.n_bands} k={k}: purity {purity:.4f} recovery {recovery}")

        table = pd.DataFrame.from_records(records)
        best = int(table["selection_metric"].to_numpy().argmax())
        selected = table.iloc[best].to_dict()
        return table, selected

    def vocoder_recovery(
        self,
        world: WorldSpec,
        manifest_path: Union[str, Path],
        rows: Sequence[ManifestRow],
        cfg: FeatureConfig,
        model: KMeansModel,
        seed: int,
        steps: int,
    ) -> float:
        """Train a tiny single-family vocoder on the rows' units and measure unit recovery after resynthesis."""
        from models.vocoder import VocoderConfig, VocoderTrainingConfig
        from services.eval_service import EvalService
        from services.vocoder_service import VocoderService

        features = self.features_for_rows(manifest_path, rows, cfg=cfg)
        units = self.extract_units(features, rows, model)
        languages = sorted({row.tgt_lang for row in rows})
        config = VocoderConfig(
            family=model.family or "sweep", languages=languages, num_units=model.k,
            num_speakers=world.num_speakers, hop=cfg.hop, upsample_strides=_factor_hop(cfg.hop),
            upsample_channels=16, residual_blocks=1, speaker_dim=16, language_dim=16, unit_dim=16,
        )
        config.mel.sample_rate = world.sample_rate
        service = VocoderService(config, seed=seed)
        examples = service.examples_from(manifest_path, rows, units)
        service.train(examples, VocoderTrainingConfig(steps=steps, batch_size=4, seed=seed, lambda_adv=0.0, lambda_fm=0.0))

        scores = []
        for example in examples[: min(8, len(examples))]:
            wave = service.resynthesize(example.units, example.speaker, example.language, use_predicted_durations=False)
            if wave.samples.size < cfg.window:
                scores.append(0.0)
                continue
            recovered = self.dedup(self.quantize(self.extract_features(wave, cfg), model)).units
            scores.append(EvalService.symbol_recovery(recovered, example.units.units))
        return float(np.mean(scores)) if scores else 0.0

    # ===== PERSISTENCE =====

    @staticmethod
    def save_model(path: Union[str, Path], model: KMeansModel) -> Path:
        metadata = {"k": model.k, "family": model.family, "inertia": model.inertia, "inertia_history": model.inertia_history}
        return save_checkpoint(path, {"centroids": model.centroids}, metadata)

    @staticmethod
    def load_model(path: Union[str, Path]) -> KMeansModel:
        arrays, metadata = load_checkpoint(path)
        if "centroids" not in arrays:
            raise DataIntegrityError(f"{path} holds no centroids")
        return KMeansModel(
            centroids=arrays["centroids"], k=int(metadata["k"]), family=metadata["family"],
            inertia=float(metadata["inertia"]), inertia_history=list(metadata.get("inertia_history", [])),
        )

    @staticmethod
    def save_features(path: Union[str, Path], features: Dict[str, np.ndarray]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as handle:
            np.savez(handle, **features)
        return path

    @staticmethod
    def load_features(path: Union[str, Path]) -> Dict[str, np.ndarray]:
        with np.load(Path(path)) as archive:
            return {key: archive[key] for key in archive.files}

    @staticmethod
    def write_unit_files(
        units_path: Union[str, Path],
        records: Sequence[RunLengthUnits],
        k: int,
        family: str,
        extra_header: str = "",
    ) -> Tuple[Path, Optional[Path]]:
        """``units`` and ``durations`` files, one utterance per line under a ``k=<int> family=<id>`` header.

        The durations file is only written when every record carries durations.
        """
        units_path = Path(units_path)
        durations_path = units_path.with_suffix(".dur")
        header = f"k={k} family={family}" + (f" {extra_header}" if extra_header else "")
        units_path.parent.mkdir(parents=True, exist_ok=True)
        units_path.write_text(
            header + "\n" + "".join(" ".join(str(u) for u in r.units) + "\n" for r in records), encoding="utf-8"
        )
        if any(r.durations is None for r in records):
            if durations_path.exists():
                durations_path.unlink()
            return units_path, None
        durations_path.write_text(
            header + "\n" + "".join(" ".join(str(d) for d in r.durations) + "\n" for r in records),
            encoding="utf-8",
        )
        return units_path, durations_path

    @staticmethod
    def read_unit_files(units_path: Union[str, Path], languages: Optional[Sequence[str]] = None) -> Tuple[Dict[str, str], List[RunLengthUnits]]:
        units_path = Path(units_path)
        durations_path = units_path.with_suffix(".dur")
        unit_lines = units_path.read_text(encoding="utf-8").splitlines()
        if not unit_lines or not unit_lines[0].startswith("k="):
            raise DataIntegrityError(f"{units_path} lacks a 'k=<int> family=<id>' header")
        header = dict(item.split("=", 1) for item in unit_lines[0].split())
        duration_lines = durations_path.read_text(encoding="utf-8").splitlines() if durations_path.exists() else []
        records = []
        for index, line in enumerate(unit_lines[1:]):
            units = [int(u) for u in line.split()]
            durations = None
            if duration_lines:
                durations = [int(d) for d in duration_lines[index + 1].split()]
            language = languages[index] if languages is not None else header.get("lang")
            records.append(RunLengthUnits(
                units=units, durations=durations, family=header.get("family", ""), language=language,
                id_space=header.get("space", "raw"),
            ))
        return header, records


def _factor_hop(hop: int) -> List[int]:
    """Split ``hop`` into at most two upsampling strides whose product is ``hop``."""
    for first in range(int(np.sqrt(hop)), 0, -1):
        if hop % first == 0:
            return [hop // first, first] if first > 1 else [hop]
    return [hop]
