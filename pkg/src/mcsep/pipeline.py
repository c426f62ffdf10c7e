"""Corpus simulation, training and evaluation used by the command line and the experiments.

A simulated corpus is a directory holding ``manifest.jsonl`` (one record
per scene, sorted by index) and ``scenes/sceneNNNNN/`` with the 6-channel
``mixture.wav``, the reverberant image of each source at mic 1
(``ref1.wav``, ``ref2.wav``, ...) and ``record.json``.  Paths inside the
manifest are relative to the corpus directory.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, MCSepError
from .kernelfeat import (
    as_pairs,
    conv_analysis,
    cos_sin_features,
    export_kernels_csv,
    ipd_from_kernels,
    ipd_from_spectra,
    make_stft_kernels,
    wrap_phase,
)
from .objectives import (
    ANGLE_BINS,
    MASK_KINDS,
    aggregate_by_angle,
    format_table,
    oracle_separate,
    pit_wrap,
    si_snr,
)
from .roomsim import SimulationConfig, angle_bin, angle_difference, sample_scene, spatialize_mix
from .sigcore import AnalysisSpec, MultichannelAudio, stft
from .wavio import read_wav, write_wav

MANIFEST = "manifest.jsonl"
SCENE_DIR = "scenes"


def derive_seed(seed: int, index: int) -> int:
    """Independent 63-bit seed for item ``index`` of a run seeded with ``seed``."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# --- simulation ---------------------------------------------------------------


def list_source_pool(pool_dir) -> list[Path]:
    pool = Path(pool_dir)
    if not pool.is_dir():
        raise DataError(f"source pool {pool} does not exist")
    paths = sorted(pool.glob("*.wav"))
    if not paths:
        raise DataError(f"source pool {pool} holds no .wav files")
    return paths


def _scene_id(index: int) -> str:
    return f"scene{index:05d}"


def _record_is_current(path: Path, digest: str, root: Path) -> dict | None:
    if not path.exists():
        return None
    try:
        rec = json.loads(path.read_text())
    except ValueError:
        return None
    files = [rec.get("mixture")] + list(rec.get("references", []))
    if rec.get("digest") != digest or not all(f and (root / f).exists() for f in files):
        return None
    return rec


def simulate_scene(index: int, seed: int, config: SimulationConfig, pool_dir, out_dir) -> dict:
    """Render scene ``index`` of a run into ``out_dir``; an up-to-date scene is left as is."""
    root = Path(out_dir)
    pool_dir = Path(pool_dir)
    names = [p.name for p in list_source_pool(pool_dir)]
    scene = sample_scene(derive_seed(seed, index), config, names)
    sid = _scene_id(index)
    rel = Path(SCENE_DIR) / sid
    digest = scene.digest()
    existing = _record_is_current(root / rel / "record.json", digest, root)
    if existing is not None:
        return existing
    sources = []
    for name in scene.source_audio_refs:
        audio = read_wav(pool_dir / name)
        if audio.sample_rate != config.sample_rate:
            raise DataError(f"{name} is {audio.sample_rate} Hz, scenes are {config.sample_rate} Hz")
        sources.append(audio.channel(0))
    mixture, refs = spatialize_mix(scene, sources)
    (root / rel).mkdir(parents=True, exist_ok=True)
    write_wav(root / rel / "mixture.wav", mixture)
    ref_paths = []
    for c, r in enumerate(refs, 1):
        write_wav(root / rel / f"ref{c}.wav", r.channel(0))
        ref_paths.append(str(rel / f"ref{c}.wav"))
    angle = angle_difference(scene) if len(scene.room.source_positions) == 2 else float("nan")
    record = {
        "id": sid,
        "index": index,
        "digest": digest,
        "angle": angle,
        "angle_bin": angle_bin(angle) if math.isfinite(angle) else None,
        "t60": scene.room.t60,
        "num_samples": mixture.num_samples,
        "mixture": str(rel / "mixture.wav"),
        "references": ref_paths,
        "scene": scene.to_dict(),
    }
    tmp = root / rel / "record.json.tmp"
    tmp.write_text(_dump(record))
    tmp.replace(root / rel / "record.json")
    return record


def _simulate_job(args):
    return simulate_scene(*args)


def run_simulation(out_dir, num_scenes: int, seed: int, config: SimulationConfig, pool_dir, workers: int = 1):
    """Simulate ``num_scenes`` scenes and write the manifest; returns the records.

    The configuration and the source pool are checked before anything is
    written.  Scenes already rendered with the same description are reused,
    so an interrupted run can simply be restarted.
    """
    if num_scenes < 1:
        raise ConfigurationError("num_scenes must be >= 1")
    if workers < 1:
        raise ConfigurationError("workers must be >= 1")
    config.validate()
    list_source_pool(pool_dir)
    # fail on infeasible geometry before creating the tree
    sample_scene(derive_seed(seed, 0), config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, seed, config, str(pool_dir), str(out)) for i in range(num_scenes)]
    if workers == 1:
        records = [_simulate_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(_simulate_job, jobs))
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text("".join(_dump(r) + "\n" for r in records))
    tmp.replace(out / MANIFEST)
    return records


def angle_histogram(records) -> dict:
    counts = {b: 0 for b in ANGLE_BINS}
    for r in records:
        if r.get("angle_bin") in counts:
            counts[r["angle_bin"]] += 1
    return counts


# --- corpus access ------------------------------------------------------------


@dataclass(frozen=True)
class Corpus:
    root: Path
    records: tuple

    def __len__(self):
        return len(self.records)


def load_manifest(path) -> Corpus:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: {exc}") from exc
    if not records:
        raise DataError(f"manifest {path} is empty")
    return Corpus(path.parent, tuple(records))


def load_scene(corpus: Corpus, record: dict):
    """Mixture [mics, samples] and references [sources, samples] of one scene."""
    try:
        mix = read_wav(corpus.root / record["mixture"])
        refs = [read_wav(corpus.root / p) for p in record["references"]]
    except (OSError, KeyError) as exc:
        raise DataError(f"{record.get('id')}: {exc}") from exc
    for r in refs:
        if r.num_samples != mix.num_samples or r.sample_rate != mix.sample_rate:
            raise DataError(f"{record['id']}: reference does not match the mixture")
    return mix, np.stack([r.samples[0] for r in refs])


# --- features -----------------------------------------------------------------

FEATURE_MAGIC = b"MCSEPFT\x00"
FEATURE_VERSION = 1


def write_feature_archive(path, values) -> Path:
    """Magic, u32 version, u32 ndim, u32 dims, then row-major little-endian float32 values."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    path = Path(path)
    header = FEATURE_MAGIC + struct.pack("<II", FEATURE_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    path.write_bytes(header + arr.tobytes())
    return path


def read_feature_archive(path) -> np.ndarray:
    data = Path(path).read_bytes()
    n = len(FEATURE_MAGIC)
    if data[:n] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature archive")
    version, ndim = struct.unpack("<II", data[n : n + 8])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported archive version {version}")
    dims = struct.unpack(f"<{ndim}I", data[n + 8 : n + 8 + 4 * ndim])
    body = data[n + 8 + 4 * ndim :]
    if len(body) != 4 * int(np.prod(dims)):
        raise FormatError(f"{path}: payload does not match dims {dims}")
    return np.frombuffer(body, dtype="<f4").reshape(dims)


def scene_features(mixture: MultichannelAudio, pairs, kernel_length: int = 64, stride: int = 20):
    """STFT-path and kernel-path LPS, IPD, cosIPD and sinIPD of one mixture, plus the max IPD gap.

    The STFT path uses a Hann window of ``kernel_length`` with hop
    ``stride`` so both paths share one frame grid.
    """
    pairs = as_pairs(pairs)
    spec = AnalysisSpec("hann", kernel_length, stride)
    specs = [stft(mixture.channel(m), spec) for m in range(mixture.num_channels)]
    ipd_stft = ipd_from_spectra(specs, pairs)
    bank = make_stft_kernels(kernel_length, stride)
    ipd_kernel = ipd_from_kernels(mixture, bank, pairs)
    re, im = conv_analysis(mixture.channel(0), bank)
    floor = 1e-12
    out = {
        "stft_lps": 10.0 * np.log10(np.maximum(specs[0].magnitude**2, floor)),
        "kernel_lps": 10.0 * np.log10(np.maximum(re.values**2 + im.values**2, floor)),
    }
    for prefix, ipd in (("stft", ipd_stft), ("kernel", ipd_kernel)):
        out[f"{prefix}_ipd"] = ipd.values
        both = cos_sin_features(ipd, include_sin=True).values
        half = both.shape[1] // 2
        out[f"{prefix}_cosipd"], out[f"{prefix}_sinipd"] = both[:, :half], both[:, half:]
    gap = float(np.max(np.abs(wrap_phase(ipd_stft.values - ipd_kernel.values)))) if ipd_stft.values.size else 0.0
    return out, gap


def dump_features(manifest, pairs, out_dir, kernel_length: int = 64, stride: int = 20, log=None):
    """Write feature archives for every scene; a failing scene is recorded and skipped.

    Returns the summary records (also written to ``features.jsonl``).
    """
    corpus = load_manifest(manifest)
    pairs = as_pairs(pairs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for rec in corpus.records:
        sid = rec.get("id", "?")
        try:
            mix, _ = load_scene(corpus, rec)
            feats, gap = scene_features(mix, pairs, kernel_length, stride)
            (out / sid).mkdir(exist_ok=True)
            for name, values in feats.items():
                write_feature_archive(out / sid / f"{name}.f32", values)
            row = {"id": sid, "frames": int(feats["kernel_cosipd"].shape[0]),
                   "ipd_dims": list(feats["kernel_cosipd"].shape), "max_ipd_diff": gap, "error": None}
        except (MCSepError, OSError) as exc:
            row = {"id": sid, "error": str(exc)}
        if log:
            log(row)
        summary.append(row)
    (out / "features.jsonl").write_text("".join(_dump(r) + "\n" for r in summary))
    return summary


# --- training -----------------------------------------------------------------

MODEL_TYPES = ("tasnet", "freq_tcn")


@dataclass(frozen=True)
class TrainConfig:
    """Training run settings.

    ``chunk_seconds`` cuts every utterance into non-overlapping chunks
    (``None`` trains on whole utterances).  ``eval_every`` evaluates the
    model on the training utterances every that many epochs (the last
    epoch is always evaluated); ``stop_si_snri`` ends training once that
    evaluation reaches the given SI-SNRi.  ``max_steps`` caps the total
    number of updates.
    """

    seed: int
    manifest: str
    model: dict = field(default_factory=dict)
    model_type: str = "tasnet"
    epochs: int = 10
    batch_size: int = 4
    chunk_seconds: float | None = 1.0
    learning_rate: float = 1e-3
    clip: float = 5.0
    max_scenes: int | None = None
    max_steps: int | None = None
    eval_every: int = 0
    stop_si_snri: float | None = None

    def __post_init__(self):
        if self.model_type not in MODEL_TYPES:
            raise ConfigurationError(f"model_type must be one of {MODEL_TYPES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.chunk_seconds is not None and self.chunk_seconds <= 0:
            raise ConfigurationError("chunk_seconds must be positive")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        self.model_config()

    def model_config(self):
        from .sepnet import ModelConfig

        return ModelConfig.from_dict(dict(self.model))

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training settings: {sorted(unknown)}")
        for key in ("seed", "manifest"):
            if d.get(key) is None:
                raise ConfigurationError(f"training config needs '{key}'")
        d = dict(d)
        manifest = Path(d["manifest"])
        if base_dir is not None and not manifest.is_absolute():
            manifest = Path(base_dir) / manifest
        d["manifest"] = str(manifest)
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model_config().to_dict()
        return d


def build_for(model_type: str, model_cfg):
    from .sepnet import FreqTCN, build_model

    return FreqTCN(model_cfg) if model_type == "freq_tcn" else build_model(model_cfg)


def load_training_data(corpus: Corpus, chunk: int | None, max_scenes=None):
    """Stacked chunks: mixtures [n, mics, chunk] and references [n, C, chunk] (float32)."""
    mixes, refs = [], []
    for rec in corpus.records[:max_scenes]:
        mix, ref = load_scene(corpus, rec)
        x = mix.samples
        size = chunk or x.shape[-1]
        for start in range(0, x.shape[-1] - size + 1, size):
            mixes.append(x[:, start : start + size])
            refs.append(ref[:, start : start + size])
    if not mixes:
        raise DataError("no training chunks (utterances shorter than chunk_seconds?)")
    if len({m.shape for m in mixes}) != 1:
        raise DataError("utterances differ in length; set chunk_seconds")
    return np.stack(mixes).astype(np.float32), np.stack(refs).astype(np.float32)


def psa_training_loss(model, mix, refs):
    """PSA loss of a Freq-TCN on the padded STFT grid of mic 1."""
    import torch

    from .objectives import psa_loss_torch

    masks, Y = model(mix, return_spectrum=True)
    X = model.features.spectrum(refs)  # [B, C, frames, bins]
    mag = torch.abs(Y)
    proj = (X.real * Y.real[:, None] + X.imag * Y.imag[:, None]) / torch.clamp(mag[:, None], min=1e-12)
    targets = torch.minimum(torch.clamp(proj, min=0.0), mag[:, None])
    return psa_loss_torch(masks, mag, targets)[0]


def separator_fn(model, model_type: str):
    """Callable mixture [mics, samples] -> estimates [C, samples] (numpy, eval mode)."""
    import torch

    from .sepnet.models import first_stage

    dtype = next(model.parameters()).dtype
    model.eval()

    def run(mixture):
        if model_type == "freq_tcn":
            return first_stage(mixture, model)
        with torch.no_grad():
            x = torch.tensor(np.array(mixture), dtype=dtype)[None]
            return model(x)[0].double().numpy()

    return run


def score_utterance(estimates, references, mixture_ch1) -> dict:
    """Best-permutation SI-SNR and SI-SNRi of one utterance."""
    base = [si_snr(mixture_ch1, r) for r in references]
    perm = pit_wrap(si_snr, list(estimates), list(references))
    scores = [float(s) for s in perm.per_pair_scores]
    improvements = [s - b for s, b in zip(scores, base)]
    return {
        "permutation": [int(p) for p in perm.best_permutation],
        "si_snr": scores,
        "si_snri": float(np.mean(improvements)),
    }


def evaluate(separate, corpus: Corpus, method: str, max_scenes=None) -> list[dict]:
    """Per-utterance records for ``separate`` over the corpus."""
    out = []
    for rec in corpus.records[:max_scenes]:
        mix, refs = load_scene(corpus, rec)
        est = np.asarray(separate(mix.samples), dtype=np.float64)
        n = min(est.shape[-1], refs.shape[-1])
        row = {"id": rec["id"], "method": method, "angle": rec.get("angle"), "angle_bin": rec.get("angle_bin")}
        row.update(score_utterance(est[:, :n], refs[:, :n], mix.samples[0, :n]))
        out.append(row)
    return out


def evaluate_oracle(corpus: Corpus, kind: str, max_scenes=None) -> list[dict]:
    if kind not in MASK_KINDS:
        raise ConfigurationError(f"oracle kind must be one of {MASK_KINDS}")
    out = []
    for rec in corpus.records[:max_scenes]:
        mix, refs = load_scene(corpus, rec)
        res = oracle_separate(mix.channel(0), list(refs), kind, sample_rate=mix.sample_rate)
        row = {"id": rec["id"], "method": kind.upper(), "angle": rec.get("angle"), "angle_bin": rec.get("angle_bin")}
        row.update(score_utterance(np.stack(res.estimates), refs, mix.samples[0]))
        out.append(row)
    return out


def _oracle_job(args):
    manifest, kind, index = args
    corpus = load_manifest(manifest)
    return evaluate_oracle(Corpus(corpus.root, (corpus.records[index],)), kind)[0]


def evaluate_oracles(manifest, kinds, workers: int = 1) -> dict:
    """Oracle records per kind, computed scene-parallel with ``workers`` processes."""
    corpus = load_manifest(manifest)
    out = {}
    for kind in kinds:
        if workers > 1:
            jobs = [(str(manifest), kind, i) for i in range(len(corpus))]
            with ProcessPoolExecutor(workers) as ex:
                out[kind.upper()] = list(ex.map(_oracle_job, jobs))
        else:
            out[kind.upper()] = evaluate_oracle(corpus, kind)
    return out


def write_report(path, records_by_method: dict, notes=()) -> str:
    """Write the angle-bin table to ``path`` and every per-utterance record next to it (``.jsonl``)."""
    path = Path(path)
    rows = {m: aggregate_by_angle(recs) for m, recs in records_by_method.items()}
    table = format_table(rows)
    text = table + "\n" + "".join(f"\n{n}" for n in notes) + ("\n" if notes else "")
    path.parent.mkdir(parents=True, exist_ok=True)
    records_path = path.with_suffix(".jsonl") if path.suffix != ".jsonl" else path.with_suffix(".records.jsonl")
    path.write_text(text)
    records_path.write_text("".join(_dump(r) + "\n" for recs in records_by_method.values() for r in recs))
    return table


@dataclass
class TrainResult:
    model: object
    epochs: int
    steps: int
    log: list


def _mean_si_snri(records) -> float:
    return float(np.mean([r["si_snri"] for r in records]))


def train(cfg: TrainConfig, out_dir, resume=None, log=None) -> TrainResult:
    """Epoch loop with per-epoch checkpoints, a JSON-lines log and kernel exports.

    ``out_dir`` receives ``checkpoints/epochNNNN.ckpt`` (epoch 0 is the
    initial model), ``train_log.jsonl`` and, for learnable kernel
    frontends, ``kernels/epochNNNN.csv``.  A non-finite step raises
    ``TrainingError``; checkpoints already written are kept.
    """
    import torch

    from .sepnet import load_checkpoint, make_optimizer, save_checkpoint, set_determinism, train_step
    from .sepnet.train import default_loss

    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    model_cfg = cfg.model_config()
    corpus = load_manifest(cfg.manifest)
    set_determinism(cfg.seed)
    model = build_for(cfg.model_type, model_cfg)
    optimizer = make_optimizer(model, cfg.learning_rate)
    loss_fn = psa_training_loss if cfg.model_type == "freq_tcn" else default_loss
    chunk = None if cfg.chunk_seconds is None else int(round(cfg.chunk_seconds * model_cfg.sample_rate))
    mixes, refs = load_training_data(corpus, chunk, cfg.max_scenes)
    if mixes.shape[1] < model_cfg.num_channels and (model_cfg.feature_set or model_cfg.frontend != "single"):
        raise DataError(f"corpus has {mixes.shape[1]} channels, model needs {model_cfg.num_channels}")
    learnable_kernels = model_cfg.kernel_mode in ("unconstrained", "window_constrained")
    log_path = out / "train_log.jsonl"
    history = []

    def meta(steps):
        return {"model_type": cfg.model_type, "steps": steps, "seed": cfg.seed}

    def export(epoch):
        if learnable_kernels:
            export_kernels_csv(model.features.bank(), out / "kernels" / f"epoch{epoch:04d}.csv", epoch)

    start, steps = 1, 0
    if resume is not None:
        _, epoch, metadata, _ = load_checkpoint(resume, model, optimizer)
        start, steps = epoch + 1, int(metadata.get("steps", 0))
        if log_path.exists():
            history = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
            history = [h for h in history if h["epoch"] <= epoch]
    else:
        save_checkpoint(out / "checkpoints" / "epoch0000.ckpt", model, model_cfg, 0, optimizer, meta(0))
        export(0)
    log_path.write_text("".join(_dump(h) + "\n" for h in history))

    X, Y = torch.from_numpy(mixes), torch.from_numpy(refs)
    separate_train = Corpus(corpus.root, corpus.records[: cfg.max_scenes])
    epoch = start - 1
    for epoch in range(start, cfg.epochs + 1):
        order = np.random.default_rng(derive_seed(cfg.seed, epoch)).permutation(len(X))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            idx = torch.from_numpy(order[b : b + cfg.batch_size])
            losses.append(train_step(model, optimizer, X[idx], Y[idx], loss_fn, cfg.clip))
            steps += 1
        done = epoch == cfg.epochs or (cfg.max_steps is not None and steps >= cfg.max_steps)
        entry = {"epoch": epoch, "steps": steps, "loss": float(np.mean(losses)) if losses else None}
        if done or (cfg.eval_every and epoch % cfg.eval_every == 0):
            records = evaluate(separator_fn(model, cfg.model_type), separate_train, "train")
            entry["train_si_snri"] = _mean_si_snri(records)
            done = done or (cfg.stop_si_snri is not None and entry["train_si_snri"] >= cfg.stop_si_snri)
        save_checkpoint(out / "checkpoints" / f"epoch{epoch:04d}.ckpt", model, model_cfg, epoch, optimizer, meta(steps))
        export(epoch)
        history.append(entry)
        with log_path.open("a") as fh:
            fh.write(_dump(entry) + "\n")
        if log:
            log(entry)
        if done:
            break
    return TrainResult(model, epoch, steps, history)


def load_trained(checkpoint):
    """(model, model_type, config) from a checkpoint written by :func:`train`."""
    from .sepnet.checkpoint import decode_checkpoint, load_checkpoint
    from .sepnet.config import ModelConfig

    path = Path(checkpoint)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    header, _ = decode_checkpoint(path.read_bytes())
    model_type = header["metadata"].get("model_type", "tasnet")
    model = build_for(model_type, ModelConfig.from_dict(header["config"]))
    cfg, _, _, model = load_checkpoint(path, model)
    return model, model_type, cfg
