"""Experiment harness: synthetic data, training, ablations, checkpoints.

A run is fully determined by its config (including the seed): phase one
contrastively pre-trains the dual encoder on caption-labelled synthetic
images and freezes it; phase two tunes only the prompt-side parameters.
Ablation runs pair seeds across modes, so every mode sees identical data,
encoders and shared-parameter initializations.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics as met
from .autodiff import Tensor
from .concepts import ConceptBank, generate_bank
from .encoders import FIRST_CLASS_TOKEN, DualEncoder, EncoderConfig, pretrain_clip
from .errors import CilmpError, ConfigError, EvaluationError, FormatError, NumericalAbort
from .intervention import PositionSets, orthonormalize_rows
from .prompts import RUN_MODES, PromptModel

CHECKPOINT_MAGIC = b"CILMPCKPT1"
METRIC_KEYS = ("accuracy", "macro_f1", "macro_auc", "kappa")

# stream tags: independent deterministic substreams of the run seed
_S_PROTO, _S_IMAGES, _S_LINK, _S_BANK, _S_ENC, _S_PRETRAIN, _S_TEXTBANK, _S_BATCHES = range(10, 18)


def _stream_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence((seed, tag)).generate_state(1)[0])


@dataclass(frozen=True)
class BankSpec:
    seq_len: int = 8
    width: int = 96
    layer_drift: float = 0.5
    noise_std: float = 0.1


@dataclass(frozen=True)
class DataSpec:
    margin: float = 1.0
    image_noise: float = 1.0
    knowledge_corr: float = 0.8
    subtypes_per_class: int = 2

    def __post_init__(self):
        if not 0.0 <= self.knowledge_corr <= 1.0:
            raise ConfigError(f"knowledge_corr {self.knowledge_corr} outside [0, 1]")
        if self.subtypes_per_class < 1:
            raise ConfigError("subtypes_per_class must be at least 1")


@dataclass(frozen=True)
class OptimSpec:
    lr: float = 0.0025
    momentum: float = 0.9


@dataclass(frozen=True)
class PretrainSpec:
    epochs: int = 160
    lr: float = 0.1
    batch_size: int = 24
    momentum: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    num_classes: int = 4
    train_per_class: int = 24
    test_per_class: int = 24
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bank: BankSpec = field(default_factory=BankSpec)
    data: DataSpec = field(default_factory=DataSpec)
    prompt_len: int = 4
    l_prefix: int = 4
    l_suffix: int = 4
    r_sub: int = 8
    r_proj: int = 8
    r_z: int = 8
    mode: str = "cilmp"
    optimizer: OptimSpec = field(default_factory=OptimSpec)
    epochs: int = 100
    batch_size: int = 64
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    orthonormalize_basis: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("dataset sizes must be positive")
        if self.mode not in RUN_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {RUN_MODES}")
        if self.encoder.vocab_size < FIRST_CLASS_TOKEN + self.num_classes:
            raise ConfigError(
                f"vocab_size {self.encoder.vocab_size} too small for {self.num_classes} classes "
                f"(needs at least {FIRST_CLASS_TOKEN + self.num_classes})"
            )
        if self.mode != "coop_baseline":
            need = self.bank.seq_len + self.prompt_len + 2
            if need > self.encoder.text_max_len:
                raise ConfigError(
                    f"text_max_len {self.encoder.text_max_len} below concept+context+2 = {need}"
                )
            PositionSets(self.l_prefix, self.l_suffix).validate_for(self.bank.seq_len)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    def positions(self) -> PositionSets:
        return PositionSets(self.l_prefix, self.l_suffix)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        def build(klass, value, where):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object, got {type(value).__name__}")
            fields = {f.name: f for f in dataclasses.fields(klass)}
            unknown = set(value) - set(fields)
            if unknown:
                raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
            kwargs = {}
            for key, val in value.items():
                sub = _NESTED.get((klass, key))
                kwargs[key] = build(sub, val, f"{where}.{key}") if sub else val
            try:
                return klass(**kwargs)
            except TypeError as exc:
                raise ConfigError(f"{where}: {exc}") from exc

        return build(cls, raw, "config")

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)


_NESTED = {
    (ExperimentConfig, "encoder"): EncoderConfig,
    (ExperimentConfig, "bank"): BankSpec,
    (ExperimentConfig, "data"): DataSpec,
    (ExperimentConfig, "optimizer"): OptimSpec,
    (ExperimentConfig, "pretrain"): PretrainSpec,
}


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


@dataclass
class SyntheticDataset:
    """Seeded class-conditional image tokens with a disjoint train/test split.

    Classes are mixtures of ``subtypes_per_class`` sub-prototypes; captions
    and class tokens only ever name the class, so the subtype structure is
    invisible to the text side except through the concept bank.
    """

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    image_prototypes: np.ndarray  # (classes, subtypes, tokens, width)


def generate_dataset(cfg: ExperimentConfig) -> tuple[SyntheticDataset, ConceptBank]:
    """Images around per-(class, subtype) prototypes plus a concept bank.

    Bank layers cycle over the subtype signatures of their class, so the
    bank carries the within-class structure; ``knowledge_corr`` interpolates
    those signatures toward independent random directions (0 = bank is
    class-distinct but statistically unrelated to the images).
    """
    c, t, d_p = cfg.num_classes, cfg.encoder.image_tokens, cfg.encoder.embed_dim
    k = cfg.data.subtypes_per_class
    d_h = cfg.bank.width
    rng_proto = np.random.default_rng(_stream_seed(cfg.seed, _S_PROTO))
    protos = rng_proto.normal(size=(c, k, t, d_p)) * cfg.data.margin

    rng_link = np.random.default_rng(_stream_seed(cfg.seed, _S_LINK))
    link = rng_link.normal(size=(t * d_p, d_h)) / np.sqrt(t * d_p)
    signatures = protos.reshape(c * k, -1) @ link
    signatures /= np.linalg.norm(signatures, axis=1, keepdims=True)
    signatures = signatures.reshape(c, k, d_h)
    independent = rng_link.normal(size=(c, k, d_h))
    independent /= np.linalg.norm(independent, axis=2, keepdims=True)
    corr = cfg.data.knowledge_corr
    mixed = corr * signatures + (1.0 - corr) * independent
    layer_subtype = np.arange(cfg.bank.seq_len) % k
    bank_protos = mixed[:, layer_subtype, :]  # (c, seq_len, d_h)
    bank = generate_bank(
        _stream_seed(cfg.seed, _S_BANK),
        c,
        cfg.bank.seq_len,
        d_h,
        bank_protos,
        layer_drift=cfg.bank.layer_drift,
        noise_std=cfg.bank.noise_std,
    )

    rng_img = np.random.default_rng(_stream_seed(cfg.seed, _S_IMAGES))
    n = cfg.train_per_class + cfg.test_per_class
    train_x, train_y, test_x, test_y = [], [], [], []
    for y in range(c):
        subtype = np.arange(n) % k  # balanced, deterministic
        samples = protos[y, subtype] + rng_img.normal(size=(n, t, d_p)) * cfg.data.image_noise
        train_x.append(samples[: cfg.train_per_class])
        test_x.append(samples[cfg.train_per_class :])
        train_y.extend([y] * cfg.train_per_class)
        test_y.extend([y] * cfg.test_per_class)
    return (
        SyntheticDataset(
            train_images=np.concatenate(train_x),
            train_labels=np.array(train_y, dtype=np.int64),
            test_images=np.concatenate(test_x),
            test_labels=np.array(test_y, dtype=np.int64),
            image_prototypes=protos,
        ),
        bank,
    )


def pooled_text_bank(cfg: ExperimentConfig, bank: ConceptBank) -> ConceptBank:
    """Text-format surrogate: one pooled bag-of-words vector per class,
    repeated across all layer positions (no layer structure, no knowledge
    link to the images)."""
    rng = np.random.default_rng(_stream_seed(cfg.seed, _S_TEXTBANK))
    words = rng.normal(size=(bank.num_classes, 8, bank.width))
    pooled = words.mean(axis=1)
    pooled /= np.linalg.norm(pooled, axis=1, keepdims=True)
    data = np.repeat(pooled[:, None, :], bank.seq_len, axis=1)
    return ConceptBank(
        num_classes=bank.num_classes,
        seq_len=bank.seq_len,
        width=bank.width,
        data=data,
        class_names=list(bank.class_names),
        provenance="text_mode pooled surrogate",
    )


@dataclass
class RunReport:
    """Everything one training run produced; canonical form excludes timing."""

    config: dict
    mode: str
    seed: int
    loss_trace: list[float]
    metrics: dict[str, float]
    trainable_params: int
    encoder_checksum: int
    bank_checksum: int
    freeze_intact: bool
    wall_time_s: float

    def to_canonical_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("wall_time_s")  # volatile: would break byte-identical reports
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_canonical_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        raw = json.loads(text)
        raw.setdefault("wall_time_s", float("nan"))
        return cls(**raw)


def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def build_pretrained_encoders(cfg: ExperimentConfig, data: SyntheticDataset) -> DualEncoder:
    """Phase one: contrastive pre-training on caption-labelled images."""
    model = DualEncoder(cfg.encoder, seed=_stream_seed(cfg.seed, _S_ENC))
    captions = [model.class_caption(int(y)) for y in data.train_labels]
    pretrain_clip(
        model,
        list(data.train_images),
        captions,
        epochs=cfg.pretrain.epochs,
        lr=cfg.pretrain.lr,
        batch_size=min(cfg.pretrain.batch_size, len(captions)),
        seed=_stream_seed(cfg.seed, _S_PRETRAIN),
        momentum=cfg.pretrain.momentum,
    )
    return model


def build_prompt_model(cfg: ExperimentConfig, encoders: DualEncoder, bank: ConceptBank) -> PromptModel:
    run_bank = pooled_text_bank(cfg, bank) if cfg.mode == "text_mode" else bank
    return PromptModel(
        encoders,
        run_bank,
        mode=cfg.mode,
        context_len=cfg.prompt_len,
        positions=cfg.positions(),
        r_sub=cfg.r_sub,
        r_proj=cfg.r_proj,
        r_z=cfg.r_z,
        seed=cfg.seed,
    )


def evaluate_model(model: PromptModel, images: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    scores = np.stack([model.predict(x)[0] for x in images])
    return met.evaluate(labels, scores)


def train(cfg: ExperimentConfig) -> tuple[RunReport, PromptModel]:
    """Full two-phase run; reports last-epoch metrics on the test split."""
    started = time.perf_counter()
    data, bank = generate_dataset(cfg)
    encoders = build_pretrained_encoders(cfg, data)
    flag = encoders.freeze()
    model = build_prompt_model(cfg, encoders, bank)
    bank_checksum = model.bank.checksum()

    opt = ad.SGD(model.trainable(), lr=cfg.optimizer.lr, momentum=cfg.optimizer.momentum)
    rng = np.random.default_rng(_stream_seed(cfg.seed, _S_BATCHES))
    n_train = data.train_images.shape[0]
    batch_size = min(cfg.batch_size, n_train)
    trace = []
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for step, idx in enumerate(_epoch_batches(rng, n_train, batch_size)):
            try:
                loss = model.loss([data.train_images[i] for i in idx], data.train_labels[idx])
                opt.zero_grad()
                loss.backward()
            except EvaluationError as exc:
                norms = {name: float(np.linalg.norm(p.grad)) for name, p in model.registry.items() if p.grad is not None}
                raise NumericalAbort(f"non-finite loss: {exc}", epoch=epoch, step=step, grad_norms=norms) from exc
            opt.step()
            if cfg.orthonormalize_basis:
                for params in (model.prefix, model.suffix):
                    if params is not None:
                        params.basis.data = orthonormalize_rows(params.basis.data)
            epoch_losses.append(loss.item())
        trace.append(float(np.mean(epoch_losses)))

    results = evaluate_model(model, data.test_images, data.test_labels)
    intact = encoders.checksum() == flag.checksum and model.bank.checksum() == bank_checksum
    if not intact:
        raise CilmpError("frozen parameters changed during prompt tuning")
    report = RunReport(
        config=cfg.to_dict(),
        mode=cfg.mode,
        seed=cfg.seed,
        loss_trace=trace,
        metrics=results,
        trainable_params=model.trainable_param_count(),
        encoder_checksum=flag.checksum,
        bank_checksum=bank_checksum,
        freeze_intact=intact,
        wall_time_s=time.perf_counter() - started,
    )
    return report, model


def _train_report(cfg: ExperimentConfig) -> RunReport:
    return train(cfg)[0]


def _worker_count(n_runs: int, workers: int | None) -> int:
    if workers is None:
        workers = os.cpu_count() or 1
    env_cap = os.environ.get("CILMP_THREADS")
    if env_cap:
        try:
            workers = min(workers, max(1, int(env_cap)))
        except ValueError as exc:
            raise ConfigError(f"CILMP_THREADS must be an integer, got {env_cap!r}") from exc
    return max(1, min(workers, n_runs))


@dataclass
class AblationTable:
    """Per-(mode, seed) reports plus per-mode aggregated statistics."""

    rows: list[RunReport]
    stats: dict[str, dict[str, met.MetricStat]]
    mode_order: list[str]

    def mean_metric(self, mode: str, key: str = "accuracy") -> float:
        return self.stats[mode][key].mean

    def to_csv(self) -> str:
        lines = ["mode,seeds," + ",".join(f"{k}_mean,{k}_std" for k in METRIC_KEYS) + ",trainable_params"]
        for mode in self.mode_order:
            stat = self.stats[mode]
            n = stat[METRIC_KEYS[0]].n
            cells = [mode, str(n)]
            for k in METRIC_KEYS:
                std = stat[k].std
                cells.append(f"{stat[k].mean:.6f}")
                cells.append("" if std is None else f"{std:.6f}")
            params = {r.trainable_params for r in self.rows if r.mode == mode}
            cells.append(str(params.pop() if len(params) == 1 else max(params)))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def run_ablation(
    cfg: ExperimentConfig, modes: list[str], seeds: list[int], workers: int | None = None
) -> AblationTable:
    """Paired-seed runs of every mode on identical data and shared inits.

    Independent runs may execute in parallel processes (capped by the
    CILMP_THREADS environment variable); results are assembled in
    (mode, seed) order so the table is execution-order independent.
    """
    if not modes:
        raise ConfigError("no modes requested")
    if len(seeds) < 1:
        raise ConfigError("no seeds requested")
    for mode in modes:
        if mode not in RUN_MODES:
            raise ConfigError(f"unknown mode {mode!r}")
    configs = [cfg.with_overrides(mode=mode, seed=seed) for mode in modes for seed in seeds]
    n_workers = _worker_count(len(configs), workers)
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            reports = list(pool.map(_train_report, configs))
    else:
        reports = [_train_report(c) for c in configs]
    by_mode: dict[str, list[RunReport]] = {m: [] for m in modes}
    for report in reports:
        by_mode[report.mode].append(report)
    for mode in modes:
        by_mode[mode].sort(key=lambda r: r.seed)
    stats = {m: met.aggregate([r.metrics for r in by_mode[m]]) for m in modes}
    rows = [r for m in modes for r in by_mode[m]]
    return AblationTable(rows=rows, stats=stats, mode_order=list(modes))


_SWEEPABLE = {
    "intervention_len": lambda cfg, v: cfg.with_overrides(l_prefix=v, l_suffix=v),
    "r_sub": lambda cfg, v: cfg.with_overrides(r_sub=v),
    "prompt_len": lambda cfg, v: cfg.with_overrides(prompt_len=v),
}

SWEEP_GRIDS = {
    "intervention_len": (2, 4, 8, 16),
    "r_sub": (1, 4, 8, 16),
    "prompt_len": (1, 4, 8, 16),
}


def run_sweep(
    cfg: ExperimentConfig,
    param: str,
    values: tuple[int, ...] | None = None,
    seeds: list[int] | None = None,
    workers: int | None = None,
) -> dict[int, dict[str, met.MetricStat] | str]:
    """Hyper-parameter grid at fixed mode; infeasible cells are annotated."""
    if param not in _SWEEPABLE:
        raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {sorted(_SWEEPABLE)}")
    values = values or SWEEP_GRIDS[param]
    seeds = seeds or [cfg.seed]
    out: dict[int, dict[str, met.MetricStat] | str] = {}
    for v in values:
        try:
            cell_cfg = _SWEEPABLE[param](cfg, int(v))
        except ConfigError as exc:
            out[int(v)] = f"skipped: {exc}"
            continue
        table = run_ablation(cell_cfg, [cell_cfg.mode], seeds, workers=workers)
        out[int(v)] = table.stats[cell_cfg.mode]
    return out


def sweep_to_csv(param: str, results: dict) -> str:
    lines = [f"{param}," + ",".join(f"{k}_mean,{k}_std" for k in METRIC_KEYS)]
    for value in sorted(results):
        cell = results[value]
        if isinstance(cell, str):
            lines.append(f"{value},\"{cell}\"")
            continue
        cells = [str(value)]
        for k in METRIC_KEYS:
            std = cell[k].std
            cells.append(f"{cell[k].mean:.6f}")
            cells.append("" if std is None else f"{std:.6f}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def save_checkpoint(path: str, cfg: ExperimentConfig, model: PromptModel) -> None:
    """Magic, length-prefixed canonical config JSON, then all parameters as
    little-endian f64: encoder registry order, bank data, prompt registry."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(model.encoders.registry.to_bytes())
        fh.write(np.ascontiguousarray(model.bank.data, dtype="<f8").tobytes())
        fh.write(model.registry.to_bytes())


def _diff_key(a: dict, b: dict, prefix: str = "") -> str | None:
    for key in a:
        pa, pb = a[key], b.get(key)
        where = f"{prefix}{key}"
        if isinstance(pa, dict) and isinstance(pb, dict):
            sub = _diff_key(pa, pb, where + ".")
            if sub:
                return sub
        elif pa != pb:
            return where
    return None


def load_checkpoint(path: str, expected: ExperimentConfig | None = None) -> tuple[ExperimentConfig, PromptModel]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", byte_offset=0)
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 4:
        raise FormatError("truncated checkpoint header", byte_offset=len(raw))
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + blob_len:
        raise FormatError("truncated config blob", byte_offset=len(raw))
    try:
        cfg = ExperimentConfig.from_dict(json.loads(raw[off : off + blob_len].decode("utf-8")))
    except (ConfigError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"invalid checkpoint config: {exc}", byte_offset=off) from exc
    off += blob_len
    if expected is not None:
        mismatch = _diff_key(expected.to_dict(), cfg.to_dict())
        if mismatch:
            raise FormatError(f"checkpoint config mismatch at field {mismatch!r}", byte_offset=len(CHECKPOINT_MAGIC) + 4)

    encoders = DualEncoder(cfg.encoder, seed=0)
    enc_bytes = encoders.registry.total_size() * 8
    # the stored bank is whatever the run used (for text_mode, the pooled one)
    bank_values = cfg.num_classes * cfg.bank.seq_len * cfg.bank.width
    bank_bytes = bank_values * 8
    if len(raw) - off < enc_bytes + bank_bytes:
        raise FormatError("checkpoint payload shorter than encoder+bank parameters", byte_offset=off)
    encoders.registry.load_bytes(raw[off : off + enc_bytes])
    encoders.freeze()
    off += enc_bytes
    data = np.frombuffer(raw, dtype="<f8", count=bank_values, offset=off).reshape(
        cfg.num_classes, cfg.bank.seq_len, cfg.bank.width
    ).copy()
    off += bank_bytes
    bank = ConceptBank(
        num_classes=cfg.num_classes,
        seq_len=cfg.bank.seq_len,
        width=cfg.bank.width,
        data=data,
        class_names=[f"class_{c}" for c in range(cfg.num_classes)],
        provenance=f"checkpoint:{path}",
    )
    model = PromptModel(
        encoders,
        bank,
        mode=cfg.mode,
        context_len=cfg.prompt_len,
        positions=cfg.positions(),
        r_sub=cfg.r_sub,
        r_proj=cfg.r_proj,
        r_z=cfg.r_z,
        seed=cfg.seed,
    )
    prompt_bytes = model.registry.total_size() * 8
    if len(raw) - off != prompt_bytes:
        raise FormatError(
            f"prompt parameter payload is {len(raw) - off} bytes, expected {prompt_bytes}", byte_offset=off
        )
    model.registry.load_bytes(raw[off:])
    return cfg, model


def evaluate_checkpoint(path: str, expected: ExperimentConfig | None = None) -> dict[str, float]:
    """Rebuild the model from a checkpoint and score the config's test split."""
    cfg, model = load_checkpoint(path, expected)
    data, _ = generate_dataset(cfg)
    return evaluate_model(model, data.test_images, data.test_labels)
