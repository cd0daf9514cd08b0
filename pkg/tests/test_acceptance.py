"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
report (including the per-seed ablation table). The ablation and
learnability criteria train at full desk scale and dominate the runtime.
"""

import hashlib
import math
import pickle
import time

import numpy as np
import pytest

from cm2net import evaluation, losses, persistence, synthetic, trainer
from cm2net.gradcheck import run_suite
from cm2net.tensor import Tape, Tensor

SEEDS = (1, 2, 3, 4, 5)

# prompting arms: additive convention — each prompt source enters with a
# fixed weight of 0.5, so the second arm adds the mid-fidelity term without
# rescaling the high-fidelity one (epsilon and omega pinned by calibration)
ABLATION_EPS = 0.5
OMEGA_M0_ONLY = [0.5, 0.0]
OMEGA_M0_M1 = [0.5, 0.5]


def report(criterion, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    print(f"\n[{criterion}] {status}  {detail}")
    assert passed, f"{criterion} failed: {detail}"


# --- A1 -------------------------------------------------------------------

def test_a1_gradient_correctness():
    t0 = time.time()
    results = run_suite(tolerance=1e-4)
    elapsed = time.time() - t0
    worst = max(err for _, err, _ in results)
    ok = all(passed for _, _, passed in results) and elapsed < 60.0
    report("A1 gradient correctness",
           ok, f"{len(results)} checks, max rel err {worst:.3e}, "
               f"{elapsed:.1f}s")


# --- A2 -------------------------------------------------------------------

def naive_contrastive(a, b, tau):
    """Independent double-loop evaluation of the symmetric InfoNCE loss."""
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    n = a.shape[0]
    total = 0.0
    for i in range(n):
        den = sum(math.exp(a[i] @ b[k] / tau) for k in range(n))
        total += -math.log(math.exp(a[i] @ b[i] / tau) / den)
    for j in range(n):
        den = sum(math.exp(a[k] @ b[j] / tau) for k in range(n))
        total += -math.log(math.exp(a[j] @ b[j] / tau) / den)
    return total


def test_a2_contrastive_loss_oracles():
    worst_identical = 0.0
    for B in (2, 4, 8):
        a = Tensor(np.tile([0.3, -1.2, 2.0], (B, 1)))
        got = losses.cl_loss(a, a).item()
        worst_identical = max(worst_identical,
                              abs(got - 2 * B * math.log(B)))

    rng = np.random.default_rng(42)
    worst_naive = 0.0
    for _ in range(100):
        B = int(rng.integers(2, 10))
        a = rng.standard_normal((B, 6))
        b = rng.standard_normal((B, 6))
        tau = float(rng.uniform(0.2, 2.0))
        got = losses.cl_loss(Tensor(a), Tensor(b), tau).item()
        worst_naive = max(worst_naive, abs(got - naive_contrastive(a, b, tau)))

    ok = worst_identical <= 1e-9 and worst_naive <= 1e-10
    report("A2 contrastive-loss oracles", ok,
           f"identical-rows err {worst_identical:.2e} (tol 1e-9), "
           f"naive-loop err {worst_naive:.2e} (tol 1e-10)")


# --- A3 -------------------------------------------------------------------

def brute_top1(scores, targets):
    correct = 0
    for b in range(len(targets)):
        best = 0
        for c in range(scores.shape[1]):
            if scores[b, c] > scores[b, best]:
                best = c
        correct += best == targets[b]
    return correct / len(targets)


def brute_mean1(scores, targets):
    recalls = []
    for c in sorted(set(targets.tolist())):
        hits = total = 0
        for b in range(len(targets)):
            if targets[b] == c:
                total += 1
                best = 0
                for k in range(scores.shape[1]):
                    if scores[b, k] > scores[b, best]:
                        best = k
                hits += best == c
        recalls.append(hits / total)
    # per-class recalls are computed by loops above; the final average uses
    # the same reduction as the library so "exact" means exact
    return float(np.mean(recalls))


def test_a3_metric_oracles():
    rng = np.random.default_rng(7)
    exact = True
    for _ in range(1000):
        n, c = int(rng.integers(3, 40)), int(rng.integers(2, 12))
        scores = rng.standard_normal((n, c))
        targets = rng.integers(0, c, n)
        exact &= evaluation.top1(scores, targets) == brute_top1(scores,
                                                                targets)
        exact &= evaluation.mean1(scores, targets) == brute_mean1(scores,
                                                                  targets)

    targets = np.array([0] * 90 + [1] * 10)
    scores = np.zeros((100, 2))
    scores[:, 0] = 1.0
    imbalance = (evaluation.top1(scores, targets) == 0.9
                 and evaluation.mean1(scores, targets) == 0.5)
    report("A3 metric oracles", exact and imbalance,
           "1000 random sets exact, 90/10 imbalance -> top1 0.9 / mean1 0.5")


# --- A4 / A5 / A8 shared runs --------------------------------------------

def _frozen_hash(state):
    h = hashlib.sha256()
    for st in state.stages[:2]:
        for p in st.params():
            h.update(p.value.tobytes())
    for p in state.text_head.params():
        h.update(p.value.tobytes())
    for p in state.mapping_heads[(0, 1)].params():
        h.update(p.value.tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def ablation_runs():
    """Per-seed paired runs on the default benchmark: stages 0-1 shared,
    stage 2 trained under three prompting arms."""
    t0 = time.time()
    runs = {}
    for seed in SEEDS:
        data = synthetic.default_benchmark(seed=seed)
        test_idx = data.indices("test")
        test_targets = data.labels[test_idx]

        cfg = trainer.TrainConfig(seed=seed)
        state = trainer.new_state(cfg, data.class_names)
        trainer.train_stages(state, data, cfg, 2)
        base = pickle.dumps(state)

        arms = {}
        hashes = {"before": _frozen_hash(state)}
        for arm, eps, omega in (
                ("none", 0.0, None),
                ("m0", ABLATION_EPS, OMEGA_M0_ONLY),
                ("m0m1", ABLATION_EPS, OMEGA_M0_M1)):
            st = pickle.loads(base)
            c = trainer.TrainConfig(seed=seed)
            c.weights.eps = eps
            if omega is not None:
                c.weights.omega = omega
            trainer.train_stage_m(st, data, c, 2)
            arms[arm] = evaluation.top1(
                evaluation.predict_unimodal(st, data, 2, "test"),
                test_targets)
            hashes[arm] = _frozen_hash(st)

        stage0_top1 = evaluation.top1(
            evaluation.predict_unimodal(state, data, 0, "test"),
            test_targets)
        runs[seed] = {"arms": arms, "hashes": hashes,
                      "stage0_top1": stage0_top1}
    return runs, time.time() - t0


def test_a4_directional_ablation(ablation_runs):
    runs, elapsed = ablation_runs
    print("\n  per-seed degraded-modality test Top-1:")
    print("  seed   no-prompt   +m0       +m0+m1")
    for seed in SEEDS:
        a = runs[seed]["arms"]
        print(f"  {seed:4d}   {a['none']:.4f}     {a['m0']:.4f}"
              f"    {a['m0m1']:.4f}")
    means = {arm: float(np.mean([runs[s]["arms"][arm] for s in SEEDS]))
             for arm in ("none", "m0", "m0m1")}
    print(f"  mean   {means['none']:.4f}     {means['m0']:.4f}"
          f"    {means['m0m1']:.4f}")
    ordered = means["none"] <= means["m0"] <= means["m0m1"]
    gap = means["m0m1"] - means["none"]
    in_budget = elapsed < 600.0
    report("A4 directional ablation", ordered and gap >= 0 and in_budget,
           f"seed-means {means['none']:.4f} <= {means['m0']:.4f} <= "
           f"{means['m0m1']:.4f}, prompted-unprompted gap {gap:+.4f}, "
           f"{elapsed:.0f}s (budget 600s)")


def test_a5_freezing_invariance(ablation_runs):
    runs, _ = ablation_runs
    ok = all(
        runs[s]["hashes"][arm] == runs[s]["hashes"]["before"]
        for s in SEEDS for arm in ("none", "m0", "m0m1"))
    report("A5 freezing invariance", ok,
           "stage-0/1 parameter hash unchanged by stage-2 training "
           f"({len(SEEDS) * 3} runs)")


def test_a8_stage0_learnability(ablation_runs):
    runs, _ = ablation_runs
    per_seed = {s: runs[s]["stage0_top1"] for s in SEEDS}
    ok = all(v >= 0.8 for v in per_seed.values())
    report("A8 stage-0 learnability", ok,
           "high-fidelity test Top-1 per seed: "
           + ", ".join(f"{s}:{v:.3f}" for s, v in per_seed.items())
           + " (threshold 0.8)")


# --- A6 -------------------------------------------------------------------

def test_a6_linear_recoverability():
    tau = 0.1
    spec = synthetic.LatentActionSpec(num_classes=10, d_latent=32, frames=4,
                                      seed=11)
    chans = [synthetic.make_channel(m, 32, 32, rank=32, sigma=0.0,
                                    nonlinear=False, seed=11, gain=1.0)
             for m in (0, 1)]
    data = synthetic.gen_dataset(spec, chans, 40, 11)
    cfg = trainer.TrainConfig(seed=11, epochs=3, batch_size=8, linear=True,
                              distinct_classes_per_batch=True)
    cfg.weights.tau = tau
    cfg.weights.eps = 0.0   # keep the mapping head at its random init
    state = trainer.new_state(cfg, data.class_names)
    trainer.train_stages(state, data, cfg, 2)

    head = state.mapping_heads[(0, 1)]
    for p in head.params():
        p.frozen = False
    opt = trainer.AdamW(list(head.params()))
    tr = data.indices("train")
    labels = data.labels[tr]
    f0 = trainer._frozen_features(state.stages[0].encoder,
                                  data.observations[0][tr])
    f1 = trainer._frozen_features(state.stages[1].encoder,
                                  data.observations[1][tr])
    rng = np.random.default_rng(0)
    first = last = None
    for step in range(200):
        cls = rng.choice(10, 8, replace=False)
        idx = np.array([rng.choice(np.where(labels == c)[0]) for c in cls])
        tape = Tape()
        mapped = head(tape, Tensor(f0[idx]))
        loss = losses.cl_loss(mapped, Tensor(f1[idx], requires_grad=True),
                              tau=tau)
        if first is None:
            first = loss.item()
        last = loss.item()
        tape.backward(loss)
        opt.step(1e-2)
    ratio = last / first
    report("A6 linear recoverability", ratio < 0.05,
           f"prompt loss {first:.3f} -> {last:.4f} in 200 steps "
           f"(ratio {ratio:.4f}, threshold 0.05)")


# --- A7 -------------------------------------------------------------------

def _small_benchmark(seed):
    spec = synthetic.LatentActionSpec(num_classes=4, d_latent=8, frames=2,
                                      seed=seed)
    chans = [synthetic.make_channel(0, 8, 8, rank=8, sigma=0.1,
                                    nonlinear=False, seed=seed),
             synthetic.make_channel(1, 8, 8, rank=6, sigma=0.3,
                                    nonlinear=False, seed=seed, gain=0.05)]
    return synthetic.gen_dataset(spec, chans, 20, seed)


def _small_cfg():
    return trainer.TrainConfig(seed=9, epochs=3, batch_size=8, d_feat=12,
                               d_hidden=12, d_text=16, d_unified=6,
                               modality_order=[0, 1])


def test_a7_determinism_and_persistence(tmp_path):
    data = _small_benchmark(9)
    d_obs = {m: data.observations[m].shape[2] for m in data.modality_ids}

    # (a) identical config + seed -> byte-identical metrics.csv
    csvs = []
    for i in range(2):
        cfg = _small_cfg()
        state = trainer.new_state(cfg, data.class_names)
        reports = trainer.train_stages(state, data, cfg, 2)
        path = tmp_path / f"metrics_{i}.csv"
        for rep in reports:
            persistence.append_metrics(path, rep.rows)
        csvs.append(path.read_bytes())
    metrics_identical = csvs[0] == csvs[1]

    # (b) checkpoint round-trip -> bit-identical forward outputs
    cfg = _small_cfg()
    state = trainer.new_state(cfg, data.class_names)
    trainer.train_stages(state, data, cfg, 2)
    ckpt = tmp_path / "full.ckpt"
    persistence.save_checkpoint(state, cfg, ckpt, d_obs)
    loaded, _, _ = persistence.load_checkpoint(ckpt)
    x = data.observations[1][:6]
    tape = Tape()
    st = state.stage_for(1)
    want = st.head(tape, st.encoder(tape, Tensor(x))).data
    tape = Tape()
    st2 = loaded.stage_for(1)
    got = st2.head(tape, st2.encoder(tape, Tensor(x))).data
    roundtrip_identical = want.tobytes() == got.tobytes()

    # (c) interrupted-and-resumed training matches the uninterrupted run
    cfg = _small_cfg()
    part = trainer.new_state(cfg, data.class_names)
    trainer.train_stage0(part, data, cfg)
    stage0 = tmp_path / "stage0.ckpt"
    persistence.save_checkpoint(part, cfg, stage0, d_obs)
    resumed, rcfg, _ = persistence.load_checkpoint(stage0)
    trainer.train_stage_m(resumed, data, rcfg, 1)
    resumed_ckpt = tmp_path / "resumed.ckpt"
    persistence.save_checkpoint(resumed, rcfg, resumed_ckpt, d_obs)
    full_ckpt = tmp_path / "uninterrupted.ckpt"
    persistence.save_checkpoint(state, cfg, full_ckpt, d_obs)
    resume_identical = resumed_ckpt.read_bytes() == full_ckpt.read_bytes()

    ok = metrics_identical and roundtrip_identical and resume_identical
    report("A7 determinism and persistence", ok,
           f"metrics byte-identical: {metrics_identical}, "
           f"checkpoint forward bit-identical: {roundtrip_identical}, "
           f"resume == uninterrupted: {resume_identical}")
