"""Learnable components: per-modality encoders, projection heads,
cross-modal mapping heads, and the frozen deterministic text embedder."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class UnknownLabelError(KeyError):
    """Label string not present in the embedder vocabulary."""


def _glorot_uniform(rng, d_in, d_out):
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


class Linear:
    """Affine layer y = x W + b with named parameters."""

    def __init__(self, name, d_in, d_out, rng):
        self.weight = Parameter(name + "/w", _glorot_uniform(rng, d_in, d_out))
        self.bias = Parameter(name + "/b", np.zeros(d_out))

    def __call__(self, tape, x: Tensor) -> Tensor:
        return T.add_rowvec(T.matmul(x, self.weight.node(tape)),
                            self.bias.node(tape))

    def params(self):
        return [self.weight, self.bias]


class TwoLayerMLP:
    """d_in -> d_hidden -> d_out with tanh between layers.

    ``linear=True`` removes the nonlinearity (used by recoverability tests
    where an exact linear solution must exist).
    """

    def __init__(self, name, d_in, d_hidden, d_out, rng, linear=False):
        self.fc1 = Linear(name + "/fc1", d_in, d_hidden, rng)
        self.fc2 = Linear(name + "/fc2", d_hidden, d_out, rng)
        self.linear = linear

    def __call__(self, tape, x: Tensor) -> Tensor:
        h = self.fc1(tape, x)
        if not self.linear:
            h = T.tanh(h)
        return self.fc2(tape, h)

    def params(self):
        return self.fc1.params() + self.fc2.params()


def _set_frozen(params, frozen=True):
    for p in params:
        p.frozen = frozen
        if frozen:
            p.grad = np.zeros_like(p.value)


class ModalityEncoder:
    """Per-frame MLP followed by temporal mean pooling.

    Input batches are B x T x d_obs; output features are B x d_feat.
    """

    def __init__(self, modality_id, d_obs, d_hidden, d_feat, rng, linear=False):
        self.modality_id = int(modality_id)
        self.d_obs = int(d_obs)
        self.d_feat = int(d_feat)
        self.mlp = TwoLayerMLP(f"encoder/{modality_id}", d_obs, d_hidden,
                               d_feat, rng, linear=linear)

    def __call__(self, tape, batch: Tensor) -> Tensor:
        if batch.ndim != 3 or batch.shape[2] != self.d_obs:
            raise T.ShapeError(
                f"encoder {self.modality_id} expects B x T x {self.d_obs}, "
                f"got {batch.shape}")
        b, t, d = batch.shape
        flat = T.reshape(batch, (b * t, d))
        feats = self.mlp(tape, flat)
        feats = T.reshape(feats, (b, t, self.d_feat))
        return T.mean_over_axis(feats, 1)

    def params(self):
        return self.mlp.params()


class ProjectionHead:
    """Two-layer MLP into the unified latent space (not pre-normalized)."""

    def __init__(self, name, d_in, d_hidden, d_unified, rng, linear=False):
        self.d_in = int(d_in)
        self.d_unified = int(d_unified)
        self.mlp = TwoLayerMLP(name, d_in, d_hidden, d_unified, rng,
                               linear=linear)

    def __call__(self, tape, f: Tensor) -> Tensor:
        if f.ndim != 2 or f.shape[1] != self.d_in:
            raise T.ShapeError(
                f"projection head expects B x {self.d_in}, got {f.shape}")
        return self.mlp(tape, f)

    def params(self):
        return self.mlp.params()


class MappingHead:
    """Translates frozen source-modality features into the target feature space.

    Exists only for source < target in the training order; trainable only
    while the target stage trains. Its input must not carry gradients back
    into the (frozen) source encoder.
    """

    def __init__(self, source, target, d_src, d_hidden, d_dst, rng, linear=False):
        if not source < target:
            raise ValueError(f"mapping head requires source < target, got "
                             f"({source}, {target})")
        self.source = int(source)
        self.target = int(target)
        self.d_src = int(d_src)
        self.mlp = TwoLayerMLP(f"mapping/{source}_{target}", d_src, d_hidden,
                               d_dst, rng, linear=linear)

    def __call__(self, tape, f_source: Tensor) -> Tensor:
        if f_source.ndim != 2 or f_source.shape[1] != self.d_src:
            raise T.ShapeError(
                f"mapping head ({self.source},{self.target}) expects "
                f"B x {self.d_src}, got {f_source.shape}")
        if f_source.requires_grad:
            raise ValueError("mapping head input must be detached from the "
                             "frozen source encoder")
        return self.mlp(tape, f_source)

    def params(self):
        return self.mlp.params()


class FrozenTextEmbedder:
    """Deterministic seeded-hash Gaussian embedding of label strings.

    SHA-256 of (seed | prefix + label) keys a Philox generator, so the same
    string always yields the same unit vector, independent of call order,
    process, or platform.
    """

    def __init__(self, vocab, d_text=64, prefix="A video of a driver ", seed=0):
        self.vocab = list(vocab)
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocabulary contains duplicate labels")
        self.d_text = int(d_text)
        self.prefix = prefix
        self.seed = int(seed)
        self._cache = {}

    def __call__(self, label: str) -> np.ndarray:
        if label not in self.vocab:
            raise UnknownLabelError(label)
        vec = self._cache.get(label)
        if vec is None:
            text = self.prefix + label
            digest = hashlib.sha256(
                f"{self.seed}|{text}".encode("utf-8")).digest()
            key = int.from_bytes(digest[:16], "little")
            rng = np.random.Generator(np.random.Philox(key=key))
            raw = rng.standard_normal(self.d_text)
            vec = raw / np.linalg.norm(raw)
            self._cache[label] = vec
        return vec.copy()

    def embed_vocab(self) -> np.ndarray:
        """C x d_text matrix, row c = embedding of vocab[c]."""
        return np.stack([self(lbl) for lbl in self.vocab])


def text_embed(embedder: FrozenTextEmbedder, label: str) -> np.ndarray:
    return embedder(label)


def encode(encoder: ModalityEncoder, tape, batch: Tensor) -> Tensor:
    return encoder(tape, batch)


def project(head: ProjectionHead, tape, f: Tensor) -> Tensor:
    return head(tape, f)


def map_features(head: MappingHead, tape, f_source: Tensor) -> Tensor:
    return head(tape, f_source)


@dataclass
class EncoderStage:
    """One completed (or in-training) modality: encoder + projection head."""

    modality_id: int
    encoder: ModalityEncoder
    head: ProjectionHead

    def params(self):
        return self.encoder.params() + self.head.params()

    def freeze(self):
        _set_frozen(self.params())

    @property
    def frozen(self):
        return all(p.frozen for p in self.params())


def init_stage(modality_id, d_obs, d_hidden, d_feat, d_unified, seed,
               linear=False) -> EncoderStage:
    """Seeded construction of an encoder + projection head pair."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 101,
                                 int(modality_id)])
    enc = ModalityEncoder(modality_id, d_obs, d_hidden, d_feat, rng,
                          linear=linear)
    head = ProjectionHead(f"proj/{modality_id}", d_feat, d_hidden, d_unified,
                          rng, linear=linear)
    return EncoderStage(int(modality_id), enc, head)


def init_mapping_head(source, target, d_src, d_hidden, d_dst, seed,
                      linear=False) -> MappingHead:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 202,
                                 int(source), int(target)])
    return MappingHead(source, target, d_src, d_hidden, d_dst, rng,
                       linear=linear)


def init_text_head(d_text, d_hidden, d_unified, seed, linear=False) -> ProjectionHead:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 303])
    return ProjectionHead("proj/text", d_text, d_hidden, d_unified, rng,
                          linear=linear)


@dataclass
class ContinualState:
    """Registry of completed stages, mapping heads, and the text pipeline.

    Stage m's prompt source set is exactly the completed stages 0..m-1.
    """

    text_embedder: FrozenTextEmbedder
    text_head: ProjectionHead
    stages: list = field(default_factory=list)
    mapping_heads: dict = field(default_factory=dict)  # (src, dst) -> MappingHead

    def stage_for(self, modality_id) -> EncoderStage:
        for st in self.stages:
            if st.modality_id == modality_id:
                return st
        raise KeyError(f"modality {modality_id} has no completed stage")

    def has_stage(self, modality_id) -> bool:
        return any(st.modality_id == modality_id for st in self.stages)

    def register_stage(self, stage: EncoderStage):
        if self.has_stage(stage.modality_id):
            raise ValueError(f"stage for modality {stage.modality_id} "
                             "already registered")
        stage.freeze()
        self.stages.append(stage)

    def register_mapping_head(self, head: MappingHead):
        self.mapping_heads[(head.source, head.target)] = head

    def class_embeddings(self, tape) -> Tensor:
        """C x d_unified projected label-text embeddings."""
        raw = T.Tensor(self.text_embedder.embed_vocab())
        return self.text_head(tape, raw)

    def all_params(self):
        out = list(self.text_head.params())
        for st in self.stages:
            out.extend(st.params())
        for head in self.mapping_heads.values():
            out.extend(head.params())
        return out
