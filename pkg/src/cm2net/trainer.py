"""Staged continual training: stage 0 aligns the first modality with frozen
label-text anchors; every later stage trains one new encoder plus the
mapping heads feeding it, with all earlier stages frozen."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import losses, models, tensor as T
from .models import ContinualState, EncoderStage
from .synthetic import SyntheticDataset, _rng
from .tensor import Tape, Tensor

log = logging.getLogger("cm2net.trainer")


@dataclass
class TrainConfig:
    """Everything a training run needs; desk-scale defaults.

    The full-scale reference preset (dims 768/512/256, lr 1e-5, 100
    epochs, sized for fine-tuning large pretrained backbones) is
    available via ``full_scale_preset()``.
    """

    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    modality_order: list = field(default_factory=lambda: [0, 1, 2])
    seed: int = 0
    d_feat: int = 64
    d_hidden: int = 64
    d_text: int = 64
    d_unified: int = 16
    text_prefix: str = "A video of a driver "
    linear: bool = False               # disable tanh everywhere (test mode)
    cache_prompt_features: bool = True
    distinct_classes_per_batch: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")

    def to_dict(self):
        return asdict(self)


def full_scale_preset(**overrides) -> TrainConfig:
    """Backbone-scale hyperparameters (for reference; heavy at desk scale)."""
    base = dict(lr=1e-5, epochs=100, d_feat=768, d_hidden=768, d_text=512,
                d_unified=256)
    base.update(overrides)
    return TrainConfig(**base)


def cosine_lr(step, total_steps, lr0):
    """Half-cosine decay from lr0 at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Decoupled-weight-decay Adam over a parameter list.

    Frozen parameters are skipped entirely: no moments, no update.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.params = list(params)
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.value) for p in self.params}
        self._v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self, lr_t):
        self.step_count += 1
        t = self.step_count
        for p in self.params:
            if p.frozen:
                continue
            if p.grad is None:
                raise RuntimeError(f"parameter {p.name} has no gradient")
            g = p.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.value -= lr_t * (m_hat / (np.sqrt(v_hat) + self.eps)
                               + self.weight_decay * p.value)


def adamw_step(opt: AdamW, lr_t):
    opt.step(lr_t)


@dataclass
class Batch:
    """Row-aligned multi-modal minibatch."""

    inputs: dict      # modality_id -> B x T x d_obs array
    targets: np.ndarray
    sample_ids: np.ndarray


def make_batches(data: SyntheticDataset, split, batch_size, seed, epoch,
                 distinct_classes=False):
    """Deterministically shuffled batches; a trailing batch below 2 samples
    is dropped (contrastive terms need at least 2)."""
    idx = data.indices(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    rng = _rng(seed, 41, epoch)
    if distinct_classes:
        order = _distinct_class_order(data.labels, idx, batch_size, rng)
    else:
        order = rng.permutation(idx)
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) < 2:
            break
        batches.append(Batch(
            inputs={m: data.observations[m][chunk] for m in data.modality_ids},
            targets=data.labels[chunk],
            sample_ids=np.asarray(chunk)))
    return batches


def _distinct_class_order(labels, idx, batch_size, rng):
    """Order samples so no batch repeats a class (requires B <= #classes)."""
    queues = {}
    for i in rng.permutation(idx):
        queues.setdefault(int(labels[i]), []).append(int(i))
    order = []
    while queues:
        classes = sorted(queues, key=lambda c: (-len(queues[c]), c))
        take = classes[:batch_size]
        for c in take:
            order.append(queues[c].pop())
            if not queues[c]:
                del queues[c]
    return np.asarray(order, dtype=np.int64)


@dataclass
class EpochRow:
    stage: int
    epoch: int
    lr: float
    loss_total: float
    loss_cls: float
    loss_text: float
    loss_prompt: float
    val_top1: float
    val_mean1: float


@dataclass
class StageReport:
    stage: int
    modality_id: int
    rows: list
    final_val_top1: float
    final_val_mean1: float
    wall_clock: float


def _stage_seed(seed, stage):
    return (int(seed) * 1000003 + 7919 * (stage + 1)) & 0xFFFFFFFFFFFFFFFF


def _frozen_features(encoder, batch_arr) -> np.ndarray:
    """Feature forward through a frozen encoder, off any training tape."""
    return encoder(Tape(), Tensor(batch_arr)).data


def _eval_split(state, stage: EncoderStage, data, split):
    from . import evaluation
    scores = evaluation.stage_scores(state, stage, data, split)
    idx = data.indices(split)
    targets = data.labels[idx]
    return (evaluation.top1(scores, targets),
            evaluation.mean1(scores, targets))


def _run_stage(state: ContinualState, data: SyntheticDataset,
               cfg: TrainConfig, stage_idx: int):
    """Shared training loop for stage 0 and later stages."""
    t0 = time.perf_counter()
    modality = cfg.modality_order[stage_idx]
    if modality not in data.observations:
        raise ValueError(f"dataset lacks modality {modality}")
    w = cfg.weights
    seed = _stage_seed(cfg.seed, stage_idx)

    d_obs = data.observations[modality].shape[2]
    stage = models.init_stage(modality, d_obs, cfg.d_hidden, cfg.d_feat,
                              cfg.d_unified, seed, linear=cfg.linear)
    trainable = stage.params()

    # with eps == 0 the prompt path carries no gradient; keep the heads at
    # their seeded init and out of the optimizer (decay must not move them)
    use_prompt = stage_idx > 0 and w.eps > 0.0
    mapping_heads = []
    if stage_idx > 0:
        for i in range(stage_idx):
            src_mod = cfg.modality_order[i]
            mh = models.init_mapping_head(src_mod, modality, cfg.d_feat,
                                          cfg.d_hidden, cfg.d_feat, seed,
                                          linear=cfg.linear)
            state.register_mapping_head(mh)
            mapping_heads.append(mh)
            if use_prompt:
                trainable.extend(mh.params())
        omega = list(w.omega) if w.omega else losses.LossWeights.uniform_omega(
            stage_idx)
        if len(omega) != stage_idx:
            raise ValueError(f"stage {stage_idx} needs {stage_idx} omega "
                             f"weights, got {len(omega)}")
    else:
        omega = []
        trainable.extend(state.text_head.params())

    opt = AdamW(trainable, cfg.beta1, cfg.beta2, cfg.adam_eps,
                cfg.weight_decay)

    # Frozen source features are constants; cache them once per stage.
    feature_cache = None
    if use_prompt and cfg.cache_prompt_features:
        feature_cache = []
        for i in range(stage_idx):
            src = state.stage_for(cfg.modality_order[i])
            feature_cache.append(_frozen_features(
                src.encoder, data.observations[src.modality_id]))

    n_batches = len(make_batches(data, "train", cfg.batch_size, seed, 0,
                                 cfg.distinct_classes_per_batch))
    total_steps = cfg.epochs * n_batches
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        batches = make_batches(data, "train", cfg.batch_size, seed, epoch,
                               cfg.distinct_classes_per_batch)
        epoch_lr = cosine_lr(step, total_steps, cfg.lr)
        sums = np.zeros(4)
        for batch in batches:
            lr_t = cosine_lr(step, total_steps, cfg.lr)
            tape = Tape()
            f_m = stage.encoder(tape, Tensor(batch.inputs[modality]))
            v_m = stage.head(tape, f_m)
            class_embeds = state.class_embeddings(tape)
            scores = losses.similarity_scores(v_m, class_embeds)
            l_cls = losses.cls_loss(scores, batch.targets, w.tau_cls)
            w_batch = T.take_rows(class_embeds, batch.targets)
            l_text = losses.text_loss(w_batch, v_m, w.tau)
            if use_prompt:
                mapped = []
                for i, mh in enumerate(mapping_heads):
                    if feature_cache is not None:
                        f_i = Tensor(feature_cache[i][batch.sample_ids])
                    else:
                        src = state.stage_for(cfg.modality_order[i])
                        f_i = src.encoder(tape, Tensor(batch.inputs[src.modality_id]))
                    mapped.append(mh(tape, f_i))
                l_prompt = losses.prompt_loss(mapped, f_m, omega, w.tau)
            else:
                l_prompt = Tensor(0.0)
            total = losses.total_loss(l_cls, l_text, l_prompt, w)
            tape.backward(total)
            opt.step(lr_t)
            step += 1
            sums += [total.item(), l_cls.item(), l_text.item(),
                     l_prompt.item()]
        means = sums / len(batches)
        val_top1, val_mean1 = _eval_split(state, stage, data, "val")
        rows.append(EpochRow(stage=stage_idx, epoch=epoch, lr=epoch_lr,
                             loss_total=means[0], loss_cls=means[1],
                             loss_text=means[2], loss_prompt=means[3],
                             val_top1=val_top1, val_mean1=val_mean1))
        log.debug("stage %d epoch %d loss %.4f val_top1 %.3f",
                  stage_idx, epoch, means[0], val_top1)

    state.register_stage(stage)  # freezes encoder + head
    if stage_idx == 0:
        models._set_frozen(state.text_head.params())
    for mh in mapping_heads:
        models._set_frozen(mh.params())

    return StageReport(stage=stage_idx, modality_id=modality, rows=rows,
                       final_val_top1=rows[-1].val_top1,
                       final_val_mean1=rows[-1].val_mean1,
                       wall_clock=time.perf_counter() - t0)


def new_state(cfg: TrainConfig, class_names) -> ContinualState:
    embedder = models.FrozenTextEmbedder(class_names, d_text=cfg.d_text,
                                         prefix=cfg.text_prefix,
                                         seed=cfg.seed)
    text_head = models.init_text_head(cfg.d_text, cfg.d_hidden, cfg.d_unified,
                                      _stage_seed(cfg.seed, 0),
                                      linear=cfg.linear)
    return ContinualState(text_embedder=embedder, text_head=text_head)


def train_stage0(state: ContinualState, data: SyntheticDataset,
                 cfg: TrainConfig) -> StageReport:
    """Train the first modality's encoder, its head, and the text head,
    then freeze all three."""
    if state.stages:
        raise ValueError("stage 0 requires an empty state")
    if not cfg.modality_order:
        raise ValueError("modality order is empty")
    return _run_stage(state, data, cfg, 0)


def train_stage_m(state: ContinualState, data: SyntheticDataset,
                  cfg: TrainConfig, m: int) -> StageReport:
    """Train stage m > 0 with prompts mapped from all earlier stages."""
    if m < 1:
        raise ValueError("train_stage_m requires m >= 1")
    if len(state.stages) != m:
        raise ValueError(f"stage {m} requires exactly stages 0..{m - 1} "
                         f"completed, found {len(state.stages)}")
    return _run_stage(state, data, cfg, m)


def train_stages(state, data, cfg, upto):
    """Run stages len(state.stages)..upto-1 in order."""
    reports = []
    while len(state.stages) < upto:
        m = len(state.stages)
        if m == 0:
            reports.append(train_stage0(state, data, cfg))
        else:
            reports.append(train_stage_m(state, data, cfg, m))
    return reports
