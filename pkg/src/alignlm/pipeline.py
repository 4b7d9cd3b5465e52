"""Three-stage training, evaluation and ensembling.

Stage 1 pretrains the projection and transformer on captioning, stage 2
attaches a score head and trains on teacher pseudo-labels (with negative
sampling) under a ListNet loss, stage 3 fine-tunes on human-style labels with
SpecAugment on the training features.

Training logs are lists of ``{"epoch", "split", "metric", "value"}`` records,
written as sorted-key JSON lines.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import model as M
from .data import SpecAugmentParams, TeacherSpec, load_manifest, make_batches, negative_sample_augment, pseudo_label, spec_augment
from .errors import ConfigError, DegenerateError
from .losses import listnet_loss, next_token_cross_entropy
from .metrics import rank_average_ensemble, srcc, write_predictions
from .numeric import AdamWState, Checkpoint, ParamSet, adamw_step, forward_backward
from .rng import derive_seed
from .synthetic import audio_latent, text_latent

LOSSES = ("next_token_ce", "listnet")
TEACHERS = ("manifest", "planted", "external")


@dataclass
class StageConfig:
    stage: int
    lr: float
    epochs: int
    batch_size: int = 16
    loss: str = "listnet"
    trainable: tuple = ("projection", "llm", "score_head")
    train_manifest: str = ""
    val_manifest: str = ""
    data_root: str = ""
    init_ckpt: str = ""
    model: str = "desk"
    seed: int = 7
    spec_augment: bool = False
    freq_mask: int = 0
    time_mask: int = 0
    masks_per_axis: int = 1
    negatives_per_positive: int = 0
    teacher: str = "manifest"
    teacher_seed: int = 7
    teacher_file: str = ""
    listnet_temperature: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    eval_batch_size: int = 64
    select_best: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        self.trainable = tuple(self.trainable)
        self.validate()

    def validate(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        unknown = set(self.trainable) - set(M.GROUPS)
        if unknown:
            raise ConfigError(f"unknown trainable groups {sorted(unknown)}")
        if self.stage == 1:
            if self.loss != "next_token_ce":
                raise ConfigError("stage 1 trains with next_token_ce")
            if "score_head" in self.trainable:
                raise ConfigError("stage 1 does not train a score head")
        else:
            if self.loss != "listnet":
                raise ConfigError(f"stage {self.stage} trains with listnet")
            if "score_head" not in self.trainable:
                raise ConfigError(f"stage {self.stage} must train the score head")
        if self.lr <= 0 or self.epochs < 0:
            raise ConfigError("lr must be positive and epochs non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.teacher not in TEACHERS:
            raise ConfigError(f"unknown teacher {self.teacher!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if self.negatives_per_positive < 0:
            raise ConfigError("negatives_per_positive must be >= 0")
        if self.listnet_temperature <= 0:
            raise ConfigError("listnet_temperature must be positive")

    @property
    def augmentation(self):
        if not self.spec_augment:
            return None
        return SpecAugmentParams(self.freq_mask, self.time_mask, self.masks_per_axis)

    def config_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def resolve(self, path):
        if not path:
            return None
        p = Path(path)
        if not p.is_absolute() and self.data_root:
            p = Path(self.data_root) / p
        return p

    # presets ------------------------------------------------------------------------
    @classmethod
    def full(cls, stage, **overrides):
        """Hyperparameters of the reference system (AdamW, batch 16)."""
        base = {
            1: dict(stage=1, lr=1e-5, epochs=3, loss="next_token_ce", trainable=("projection", "llm"), model="full"),
            2: dict(stage=2, lr=1e-5, epochs=20, negatives_per_positive=3, teacher="planted", model="full"),
            3: dict(stage=3, lr=6.2e-6, epochs=150, spec_augment=True, freq_mask=15, time_mask=30, model="full"),
        }[stage]
        return cls(**{**base, **overrides})

    @classmethod
    def desk(cls, stage, **overrides):
        """Settings that make the toy model train in minutes on one CPU core."""
        base = {
            1: dict(stage=1, lr=3e-3, epochs=200, batch_size=4, loss="next_token_ce", trainable=("projection", "llm")),
            2: dict(stage=2, lr=1e-3, epochs=6, negatives_per_positive=3, teacher="planted"),
            3: dict(stage=3, lr=3e-4, epochs=15, spec_augment=True, freq_mask=2, time_mask=5),
        }[stage]
        return cls(**{**base, **overrides})


# config files ----------------------------------------------------------------------------
def _coerce(f, raw):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "tuple":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {f.name}") from None


def parse_config(text, base_dir=None):
    """Parse flat ``key = value`` lines (``#`` comments) into a StageConfig.

    Unknown keys are rejected.  A relative ``data_root`` resolves against
    ``base_dir``; when ``data_root`` is absent it defaults to ``base_dir``.
    """
    known = {f.name: f for f in fields(StageConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(known[key], raw)
    for required in ("stage", "lr", "epochs"):
        if required not in values:
            raise ConfigError(f"missing required key {required!r}")
    if base_dir is not None:
        root = Path(values.get("data_root", "") or ".")
        if not root.is_absolute():
            root = Path(base_dir) / root
        values["data_root"] = str(root)
    try:
        return StageConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


def format_config(cfg):
    lines = []
    for f in fields(StageConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# logging -----------------------------------------------------------------------------------
def log_record(epoch, split, metric, value):
    return {"epoch": int(epoch), "split": split, "metric": metric, "value": float(value)}


def write_log(path, records, append=True):
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_log(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# features ------------------------------------------------------------------------------------
class FeatureStore:
    """Memoised frozen-encoder outputs; callers never mutate the cached arrays."""

    def __init__(self, model_cfg, data_root=None):
        self.cfg = model_cfg
        self.data_root = data_root
        self._frames = {}
        self._pooled = {}

    def frames(self, ref):
        if ref not in self._frames:
            feat = M.encode_audio(ref, self.cfg, data_root=self.data_root)
            feat.frames.setflags(write=False)
            self._frames[ref] = feat
        return self._frames[ref]

    def pooled(self, ref):
        if ref not in self._pooled:
            arr = M.temporal_average_pool(self.frames(ref), self.cfg.audio_tokens)
            arr.setflags(write=False)
            self._pooled[ref] = arr
        return self._pooled[ref]

    def batch(self, records, augment=None, seeds=None):
        """Pooled features ``(B, tokens, enc_dim)``; SpecAugment applied per record when given."""
        if augment is None:
            return np.stack([self.pooled(r.audio_ref) for r in records])
        out = []
        for r, s in zip(records, seeds):
            masked = spec_augment(self.frames(r.audio_ref), augment, s)
            out.append(M.temporal_average_pool(masked, self.cfg.audio_tokens))
        return np.stack(out)


# losses --------------------------------------------------------------------------------------
def caption_loss(params, model_cfg, pooled, captions):
    logits, targets, mask = M.caption_batch(pooled, captions, params, model_cfg)
    return next_token_cross_entropy(logits, targets, mask)


def ranking_loss(params, model_cfg, pooled, texts, labels, temperature=1.0):
    scores = M.score_batch(texts, pooled, params, model_cfg)
    return listnet_loss(scores, labels, temperature)


def batch_loss(params, stage_cfg, model_cfg, store, batch):
    """Training objective on one batch at the given parameters (no augmentation)."""
    pooled = store.batch(batch)
    if stage_cfg.loss == "next_token_ce":
        return float(caption_loss(params, model_cfg, pooled, [M.tokenize(r.caption) for r in batch]).data)
    return float(ranking_loss(params, model_cfg, pooled, [M.tokenize(r.caption) for r in batch],
                              np.array([r.label for r in batch]), stage_cfg.listnet_temperature).data)


# model construction --------------------------------------------------------------------------
def _dtype(cfg):
    return np.float64 if cfg.dtype == "float64" else np.float32


def model_config_for(stage_cfg, init=None):
    if init is not None and init.model_config:
        return M.ModelConfig.from_dict(init.model_config)
    try:
        return M.preset(stage_cfg.model)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def initial_checkpoint(model_cfg, seed, dtype=np.float64):
    """Fresh projection + transformer parameters, tagged ``init``."""
    return Checkpoint("init", M.init_params(model_cfg, seed, dtype), model_config=model_cfg.to_dict())


def _load_init(stage_cfg, init):
    if init is None and stage_cfg.init_ckpt:
        path = stage_cfg.resolve(stage_cfg.init_ckpt)
        if not path.exists():
            raise ConfigError(f"init checkpoint not found: {path}")
        init = Checkpoint.load(path)
    return init


def _apply_trainable(params, groups):
    params.freeze_all()
    params.set_trainable(tuple(M.GROUPS[g] for g in groups))


# training loop ---------------------------------------------------------------------------------
def _train(stage_cfg, model_cfg, params, records, store, loss_fn, on_epoch_end=None):
    """Shared minibatch AdamW loop; returns the log records."""
    opt = AdamWState.init(
        params, lr=stage_cfg.lr, beta1=stage_cfg.beta1, beta2=stage_cfg.beta2,
        eps=stage_cfg.adam_eps, weight_decay=stage_cfg.weight_decay,
    )
    augment = stage_cfg.augmentation
    index = {r.id: i for i, r in enumerate(records)}
    log = []
    for epoch in range(1, stage_cfg.epochs + 1):
        batches = make_batches(records, stage_cfg.batch_size, derive_seed(stage_cfg.seed, "epoch", epoch),
                               drop_last=len(records) >= stage_cfg.batch_size)
        losses = []
        for batch in batches:
            if len(batch) < 2:
                continue
            seeds = None
            if augment is not None:
                seeds = [derive_seed(stage_cfg.seed, "specaug", epoch, index[r.id]) for r in batch]
            pooled = store.batch(batch, augment, seeds)
            value, grads = forward_backward(loss_fn, params, pooled, batch)
            adamw_step(params, grads, opt)
            losses.append(value)
        log.append(log_record(epoch, "train", "loss", float(np.mean(losses)) if losses else float("nan")))
        if on_epoch_end is not None:
            log.extend(on_epoch_end(epoch, params))
    return log


def _records_for(path, what):
    if path is None:
        raise ConfigError(f"{what} manifest is required")
    if not path.exists():
        raise ConfigError(f"{what} manifest not found: {path}")
    return load_manifest(path)


def run_stage1(cfg, init=None):
    """Captioning pretraining of projection + transformer; returns a ``stage1`` checkpoint."""
    if cfg.stage != 1:
        raise ConfigError("run_stage1 needs a stage-1 config")
    init = _load_init(cfg, init)
    model_cfg = model_config_for(cfg, init)
    params = init.params.copy() if init is not None else M.init_params(model_cfg, cfg.seed, _dtype(cfg))
    _apply_trainable(params, cfg.trainable)
    records = _records_for(cfg.resolve(cfg.train_manifest), "training")
    store = FeatureStore(model_cfg, cfg.data_root or None)

    def loss_fn(p, pooled, batch):
        return caption_loss(p, model_cfg, pooled, [M.tokenize(r.caption) for r in batch])

    log = _train(cfg, model_cfg, params, records, store, loss_fn)
    return Checkpoint("stage1", params, cfg.config_hash(), model_cfg.to_dict(), log)


def _label_stage2(cfg, records):
    if cfg.negatives_per_positive:
        records = negative_sample_augment(records, cfg.negatives_per_positive, cfg.seed)
    if cfg.teacher == "planted":
        records = pseudo_label(records, TeacherSpec.planted(cfg.teacher_seed), audio_latent, text_latent)
    elif cfg.teacher == "external":
        path = cfg.resolve(cfg.teacher_file)
        if path is None:
            raise ConfigError("teacher = external needs teacher_file")
        records = pseudo_label(records, TeacherSpec.external(path))
    if any(r.label is None for r in records):
        raise ConfigError("training records are missing labels")
    return records


def _ranking_stage(cfg, init, records, val_records, tag):
    model_cfg = model_config_for(cfg, init)
    if init is None:
        params = M.init_params(model_cfg, cfg.seed, _dtype(cfg))
    else:
        params = init.params.copy()
    label_mean = float(np.mean([r.label for r in records]))
    M.add_score_head(params, model_cfg, cfg.seed, bias=label_mean)
    _apply_trainable(params, cfg.trainable)
    store = FeatureStore(model_cfg, cfg.data_root or None)
    temperature = cfg.listnet_temperature

    def loss_fn(p, pooled, batch):
        return ranking_loss(p, model_cfg, pooled, [M.tokenize(r.caption) for r in batch],
                            np.array([r.label for r in batch]), temperature)

    best = {"srcc": -np.inf, "epoch": 0, "params": params.copy()}

    def on_epoch_end(epoch, p):
        if not val_records:
            return []
        preds = predict_records(p, model_cfg, val_records, store, cfg.eval_batch_size)
        labels = {r.id: r.label for r in val_records}
        try:
            value = srcc(preds, labels)
        except DegenerateError:
            value = 0.0
        if value > best["srcc"]:
            best.update(srcc=value, epoch=epoch, params=p.copy())
        return [log_record(epoch, "val", "srcc", value)]

    log = _train(cfg, model_cfg, params, records, store, loss_fn, on_epoch_end)
    if cfg.stage == 3 and cfg.select_best and val_records and cfg.epochs > 0:
        params = best["params"]
        log.append(log_record(best["epoch"], "val", "selected_epoch", best["epoch"]))
    return Checkpoint(tag, params, cfg.config_hash(), model_cfg.to_dict(), log)


def _val_records(cfg):
    path = cfg.resolve(cfg.val_manifest)
    if path is None:
        return []
    recs = _records_for(path, "validation")
    if any(r.label is None for r in recs):
        if cfg.teacher != "planted":
            raise ConfigError("validation records are missing labels")
        recs = pseudo_label(recs, TeacherSpec.planted(cfg.teacher_seed), audio_latent, text_latent)
    return recs


def run_stage2(cfg, init=None):
    """Pseudo-label ranking pretraining.

    ``init`` is a stage-1 checkpoint, an ``init`` checkpoint, or ``None``
    (fresh parameters, i.e. no captioning pretraining).
    """
    if cfg.stage != 2:
        raise ConfigError("run_stage2 needs a stage-2 config")
    init = _load_init(cfg, init)
    records = _label_stage2(cfg, _records_for(cfg.resolve(cfg.train_manifest), "training"))
    return _ranking_stage(cfg, init, records, _val_records(cfg), "stage2")


def run_stage3(cfg, init=None):
    """Fine-tuning on human-style labels; keeps the best epoch by validation SRCC."""
    if cfg.stage != 3:
        raise ConfigError("run_stage3 needs a stage-3 config")
    init = _load_init(cfg, init)
    records = _records_for(cfg.resolve(cfg.train_manifest), "training")
    if any(r.label is None for r in records):
        raise ConfigError("stage 3 training records need labels")
    return _ranking_stage(cfg, init, records, _val_records(cfg), "stage3")


# evaluation -------------------------------------------------------------------------------------
def predict_records(params, model_cfg, records, store=None, batch_size=64):
    """Scores for ``records`` in batches, keyed by record id."""
    store = store or FeatureStore(model_cfg)
    tensors = {k: M.Tensor(v) for k, v in params.items()} if isinstance(params, ParamSet) else params
    out = {}
    for s in range(0, len(records), batch_size):
        chunk = records[s:s + batch_size]
        scores = M.score_batch([M.tokenize(r.caption) for r in chunk], store.batch(chunk), tensors, model_cfg)
        for r, v in zip(chunk, np.atleast_1d(scores.data)):
            out[r.id] = float(v)
    return out


@dataclass
class EvalReport:
    srcc: float
    n: int
    predictions: dict
    config_hash: str
    checkpoint_id: str
    stage: str = ""
    notes: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def save(self, path, predictions_path=None):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")
        if predictions_path is not None:
            write_predictions(predictions_path, self.predictions)


def evaluate(ckpt, records, data_root=None, batch_size=64):
    """SRCC of checkpoint predictions against record labels (no augmentation)."""
    if isinstance(records, (str, Path)):
        records = load_manifest(records)
    if any(r.label is None for r in records):
        raise ConfigError("evaluation records need labels")
    model_cfg = M.ModelConfig.from_dict(ckpt.model_config)
    if "score_head.weight" not in ckpt.params:
        raise ConfigError(f"checkpoint '{ckpt.stage}' has no score head")
    preds = predict_records(ckpt.params, model_cfg, records, FeatureStore(model_cfg, data_root), batch_size)
    labels = {r.id: r.label for r in records}
    value = srcc(preds, labels)
    notes = {}
    selected = [r for r in ckpt.log if r.get("metric") == "selected_epoch"]
    if selected:
        notes["selected_epoch"] = selected[-1]["epoch"]
    return EvalReport(value, len(records), preds, ckpt.config_hash, ckpt.digest(), ckpt.stage, notes)


def ensemble(prediction_sets, out_lo=0.0, out_hi=1.0, labels=None):
    """Rank-average prediction sets; returns ``(ensemble, srcc or None)``."""
    combined = rank_average_ensemble(prediction_sets, out_lo, out_hi)
    score = srcc(combined, labels) if labels is not None else None
    return combined, score


def with_overrides(cfg, **kw):
    return replace(cfg, **kw)
