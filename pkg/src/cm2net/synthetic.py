"""Synthetic lossy-modality benchmark.

Latent action trajectories are observed through per-modality channels of
configurable rank, noise, and nonlinearity, so each modality is a
controllable lossy view of the same underlying event. All randomness is
derived per-sample from the seed, so generation order does not matter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF

PRESETS = ("high_fidelity", "mid", "degraded")

SPLIT_NAMES = ("train", "val", "test")


def _rng(*key):
    return np.random.default_rng([int(k) & MASK64 for k in key])


@dataclass
class LatentActionSpec:
    """Latent class structure shared by all modalities."""

    num_classes: int = 10
    d_latent: int = 32
    separation: float = 3.0
    sigma_x: float = 0.5
    frames: int = 4
    seed: int = 0
    class_means: np.ndarray = None

    def __post_init__(self):
        if self.class_means is None:
            rng = _rng(self.seed, 11)
            self.class_means = self.separation * rng.standard_normal(
                (self.num_classes, self.d_latent))
        dists = np.linalg.norm(
            self.class_means[:, None, :] - self.class_means[None, :, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        if dists.min() <= 0.0:
            raise ValueError("class means must be pairwise distinct")

    def class_names(self):
        return [f"action {i:02d}" for i in range(self.num_classes)]


@dataclass
class ModalityChannel:
    """A lossy observation map: x = nonlin(A z + b) + sigma * noise."""

    modality_id: int
    matrix: np.ndarray  # d_obs x d_latent, rank == configured rank
    bias: np.ndarray
    sigma: float = 0.0
    nonlinear: bool = False
    rank: int = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.rank is None:
            self.rank = int(np.linalg.matrix_rank(self.matrix))

    @property
    def d_obs(self):
        return self.matrix.shape[0]


def make_channel(modality_id, d_obs, d_latent, rank, sigma, nonlinear, seed,
                 gain=1.0):
    """Seeded channel whose matrix has exactly the requested rank
    (product of d_obs x r and r x d_latent Gaussian factors).

    The matrix is normalized so a unit-variance latent coordinate produces
    a roughly unit-variance response; ``gain`` then sets the pre-noise
    signal amplitude, which is what makes the per-preset noise levels
    meaningful."""
    if not 1 <= rank <= min(d_obs, d_latent):
        raise ValueError(f"rank {rank} out of range for {d_obs}x{d_latent}")
    rng = _rng(seed, 23, modality_id)
    left = rng.standard_normal((d_obs, rank))
    right = rng.standard_normal((rank, d_latent))
    matrix = gain * left @ right / np.sqrt(rank * d_latent)
    bias = 0.1 * rng.standard_normal(d_obs)
    return ModalityChannel(modality_id, matrix, bias, float(sigma),
                           bool(nonlinear), rank=rank)


def degradation_preset(name, d_latent):
    """Channel parameters (rank, sigma, gain, nonlinear) for a fidelity tier.

    Gains shrink with fidelity so the fixed noise levels dominate more of
    the signal; the tiers produce strictly decreasing linear-probe accuracy.
    """
    if name == "high_fidelity":
        return {"rank": d_latent, "sigma": 0.1, "nonlinear": False,
                "gain": 1.0}
    if name == "mid":
        return {"rank": max(1, (3 * d_latent) // 4), "sigma": 0.3,
                "nonlinear": False, "gain": 0.05}
    if name == "degraded":
        return {"rank": max(1, d_latent // 2), "sigma": 0.6, "nonlinear": True,
                "gain": 0.035}
    raise ValueError(f"unknown degradation preset: {name!r}")


def gen_latent(spec: LatentActionSpec, class_idx, rng) -> np.ndarray:
    """T x d_latent trajectory: class mean plus per-frame Gaussian noise."""
    if not 0 <= class_idx < spec.num_classes:
        raise ValueError(f"class index {class_idx} out of range")
    noise = rng.standard_normal((spec.frames, spec.d_latent))
    return spec.class_means[class_idx][None, :] + spec.sigma_x * noise


def observe(channel: ModalityChannel, latent: np.ndarray, rng) -> np.ndarray:
    """Apply the channel per frame: nonlin(A z + b) + sigma * noise."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 2 or latent.shape[1] != channel.matrix.shape[1]:
        raise ValueError(f"latent shape {latent.shape} does not match channel "
                         f"input dim {channel.matrix.shape[1]}")
    clean = latent @ channel.matrix.T + channel.bias[None, :]
    if channel.nonlinear:
        clean = np.tanh(clean)
    if channel.sigma > 0.0:
        clean = clean + channel.sigma * rng.standard_normal(clean.shape)
    return clean


@dataclass
class SyntheticDataset:
    """Paired multi-modal observations of latent actions, split and balanced."""

    spec: LatentActionSpec
    channels: list
    observations: dict  # modality_id -> N x T x d_obs
    labels: np.ndarray  # N ints
    split: np.ndarray   # N ints, index into SPLIT_NAMES
    seed: int
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = self.spec.class_names()

    @property
    def num_samples(self):
        return len(self.labels)

    @property
    def modality_ids(self):
        return sorted(self.observations)

    def indices(self, split_name):
        tag = SPLIT_NAMES.index(split_name)
        return np.flatnonzero(self.split == tag)

    def channel_for(self, modality_id):
        for ch in self.channels:
            if ch.modality_id == modality_id:
                return ch
        raise KeyError(f"no channel for modality {modality_id}")


def _split_counts(n_per_class, fractions):
    n_train = int(round(fractions[0] * n_per_class))
    n_val = int(round(fractions[1] * n_per_class))
    n_test = n_per_class - n_train - n_val
    return n_train, n_val, n_test


def gen_dataset(spec: LatentActionSpec, channels, n_per_class, seed,
                fractions=(0.7, 0.1, 0.2)) -> SyntheticDataset:
    """Balanced, paired, seed-deterministic dataset over all channels."""
    counts = _split_counts(n_per_class, fractions)
    if min(counts) < 2:
        raise ValueError(f"need >= 2 samples per class per split, got "
                         f"splits {counts} from n_per_class={n_per_class}")
    n_total = spec.num_classes * n_per_class
    obs = {ch.modality_id: np.empty((n_total, spec.frames, ch.d_obs))
           for ch in channels}
    labels = np.empty(n_total, dtype=np.int64)
    split = np.empty(n_total, dtype=np.int64)

    idx = 0
    for c in range(spec.num_classes):
        for j in range(n_per_class):
            latent = gen_latent(spec, c, _rng(seed, 31, c, j))
            for ch in channels:
                obs[ch.modality_id][idx] = observe(
                    ch, latent, _rng(seed, 37, c, j, ch.modality_id))
            labels[idx] = c
            if j < counts[0]:
                split[idx] = 0
            elif j < counts[0] + counts[1]:
                split[idx] = 1
            else:
                split[idx] = 2
            idx += 1

    return SyntheticDataset(spec=spec, channels=list(channels),
                            observations=obs, labels=labels, split=split,
                            seed=int(seed))


def default_benchmark(num_classes=10, d_latent=32, d_obs=32, frames=4,
                      n_per_class=200, seed=0, presets=PRESETS,
                      sigma_x=0.5, separation=3.0) -> SyntheticDataset:
    """The standard 3-modality benchmark: fidelity decreasing with modality id."""
    spec = LatentActionSpec(num_classes=num_classes, d_latent=d_latent,
                            separation=separation, sigma_x=sigma_x,
                            frames=frames, seed=seed)
    channels = []
    for mid, name in enumerate(presets):
        params = degradation_preset(name, d_latent)
        channels.append(make_channel(mid, d_obs, d_latent, seed=seed, **params))
    return gen_dataset(spec, channels, n_per_class, seed)
