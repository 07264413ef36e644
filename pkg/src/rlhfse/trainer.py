"""Supervised pretraining and on-policy RL fine-tuning of mask policies."""
import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .objective import (HyperParams, j_theta, kl_gaussian_policies, kl_gaussian_policies_grad,
                        mse_channel_loss, mse_channel_loss_grad, overall_loss, ppo_clip_loss,
                        ppo_clip_loss_grad)
from .policy import (apply_masks, apply_masks_vjp, deterministic_action, gaussian_log_prob,
                     predict_mean, sample_action, snapshot, synthesize)
from .optim import OPTIMIZERS, SGD, make_optimizer
from .reward import pseudo_mos_score, pseudo_pesq, relative_reward
from .tfsignal import Waveform, extract_channels, stft

log = logging.getLogger(__name__)

TRAIN_REWARD_KINDS = ("mos", "pesq", "comb", "none")


class TrainingError(RuntimeError):
    pass


@dataclass
class Utterance:
    uid: str
    noisy: np.ndarray
    clean: np.ndarray


@dataclass
class Prepared:
    """An utterance with its noisy representation and clean target channels."""
    uid: str
    noisy: Waveform
    clean: Waveform
    x: object
    target: np.ndarray


def prepare(utterances, policy):
    out = []
    for u in utterances:
        noisy = Waveform(u.noisy, policy.frame_spec.sample_rate_hz, "noisy")
        clean = Waveform(u.clean, policy.frame_spec.sample_rate_hz, "clean")
        x = policy.stft(noisy)
        y = stft(clean, policy.frame_spec)
        out.append(Prepared(u.uid, noisy, clean, x,
                            extract_channels(y.complex_spec, policy.n_channels)))
    return out


class BatchSampler:
    """Endless stream of index batches drawn from successive shuffles."""

    def __init__(self, n_items, batch_size, seed):
        if n_items < 1:
            raise TrainingError("empty dataset")
        self.n = n_items
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 0])
        self._queue = np.empty(0, dtype=np.int64)

    def next(self):
        while self._queue.size < self.batch_size:
            self._queue = np.concatenate([self._queue, self.rng.permutation(self.n)])
        batch, self._queue = self._queue[:self.batch_size], self._queue[self.batch_size:]
        return batch


@dataclass
class TrainConfig:
    hyper: HyperParams = field(default_factory=HyperParams)
    micro_batch: int = 8
    accumulation_steps: int = 8
    episodes: int = 300
    reward_kind: str = "mos"
    log_every_episodes: int = 10
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")
        if self.reward_kind not in TRAIN_REWARD_KINDS:
            raise TrainingError(f"unknown reward kind {self.reward_kind!r}")
        if self.micro_batch < 1 or self.accumulation_steps < 1:
            raise TrainingError("micro_batch and accumulation_steps must be >= 1")
        if self.log_every_episodes < 1:
            raise TrainingError("log_every_episodes must be >= 1")

    @property
    def effective_batch(self):
        return self.micro_batch * self.accumulation_steps


# ---------------------------------------------------------------- supervised stage


def mse_step_loss(policy, item, alpha):
    """MSE loss of the deterministic masks and its gradient w.r.t. the masks."""
    mean, cache = policy.forward(item.x)
    enhanced = apply_masks(mean, item.x)
    loss = mse_channel_loss(enhanced.channels, item.target, alpha)
    d_ch = mse_channel_loss_grad(enhanced.channels, item.target, alpha)
    return loss, apply_masks_vjp(mean, item.x, enhanced, d_ch), cache


def pretrain_sft(policy, data, epochs=30, lr=3e-4, batch_size=16, alpha=0.7, seed=0, steps=None,
                 history=None, optimizer="adam"):
    """Minimise the channel MSE; returns a frozen snapshot.

    ``steps`` overrides the epoch count (one step per batch). Per-step mean
    losses are appended to ``history`` when supplied.
    """
    if not data:
        raise TrainingError("empty dataset")
    if steps is None:
        steps = int(np.ceil(epochs * len(data) / batch_size))
    sampler = BatchSampler(len(data), batch_size, seed)
    opt = make_optimizer(optimizer, lr)
    for _ in range(steps):
        idx = sampler.next()
        grads = {k: np.zeros_like(v) for k, v in policy.params.items()}
        total = 0.0
        for i in idx:
            loss, dmean, cache = mse_step_loss(policy, data[i], alpha)
            total += loss
            for k, g in policy.backward(cache, dmean).items():
                grads[k] += g
        mean_loss = total / len(idx)
        if not np.isfinite(mean_loss):
            raise TrainingError(f"non-finite pretraining loss {mean_loss}")
        opt.step(policy, {k: g / len(idx) for k, g in grads.items()})
        if history is not None:
            history.append(mean_loss)
    return snapshot(policy, "sft")


def dataset_mse(policy, data, alpha=0.7):
    return float(np.mean([mse_step_loss(policy, item, alpha)[0] for item in data]))


# ---------------------------------------------------------------- RL stage


@dataclass
class ExperienceTuple:
    utterance_id: str
    index: int
    action: object          # MaskAction, or None for MSE-only updates
    j: float
    logp_old: float
    reward: float = 0.0
    kl: float = 0.0
    mu_sft: np.ndarray = field(default=None, repr=False)


class ExperienceBuffer:
    def __init__(self, capacity):
        self.capacity = capacity
        self.items = []

    def extend(self, tuples):
        if len(self.items) + len(tuples) > self.capacity:
            raise TrainingError("experience buffer overflow")
        self.items.extend(tuples)

    @property
    def full(self):
        return len(self.items) == self.capacity

    def clear(self):
        self.items = []

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


class SFTCache:
    """Deterministic outputs of a frozen SFT policy, memoised per utterance."""

    def __init__(self, pi_sft, mos_fn, pesq_fn):
        if pi_sft.role == "rl":
            raise TrainingError("SFT policy must be frozen")
        self.pi_sft = pi_sft
        self.mos_fn = mos_fn
        self.pesq_fn = pesq_fn
        self._mean = {}
        self._wave = {}

    def mean(self, index, item):
        if index not in self._mean:
            self._mean[index] = predict_mean(self.pi_sft, item.x)
        return self._mean[index]

    def wave(self, index, item):
        if index not in self._wave:
            self._wave[index] = synthesize(self.mean(index, item), item.x)
        return self._wave[index]


def rollout_episode(pi_old, pi_sft, data, batch, reward_kind, hyper, rng,
                    mos_fn=pseudo_mos_score, pesq_fn=pseudo_pesq, deterministic=False,
                    sft_cache=None):
    """One single-step episode per utterance in ``batch`` (indices into ``data``)."""
    if pi_old.role == "rl" or pi_sft.role == "rl":
        raise TrainingError("rollouts need frozen policies")
    if sft_cache is None:
        sft_cache = SFTCache(pi_sft, mos_fn, pesq_fn)
    seeds = rng.integers(0, 2**63 - 1, size=len(batch))
    out = []
    for i, seed in zip(batch, seeds):
        item = data[i]
        mu_old = predict_mean(pi_old, item.x)
        if deterministic:
            action = deterministic_action(mu_old, hyper.sigma)
        else:
            action = sample_action(mu_old, hyper.sigma, int(seed))
        if reward_kind == "none":
            out.append(ExperienceTuple(item.uid, int(i), None, 0.0, 0.0))
            continue
        y_rl = synthesize(action.sampled_masks, item.x)
        y_sft = sft_cache.wave(i, item)
        r = relative_reward(y_rl, y_sft, item.clean, reward_kind, mos_fn, pesq_fn).value
        mu_sft = sft_cache.mean(i, item)
        kl = kl_gaussian_policies(mu_old, mu_sft, hyper.sigma)
        out.append(ExperienceTuple(item.uid, int(i), action, j_theta(r, kl, hyper.beta),
                                   action.log_prob, r, kl, mu_sft))
    return out


@dataclass
class StepStats:
    loss: float
    ppo_loss: float
    mse_loss: float
    mean_reward: float
    mean_kl: float
    mean_j: float
    grad_norm: float


def utterance_loss_grad(pi_rl, item, exp, hyper, use_ppo=True):
    """Overall loss for one stored experience and d loss / d mean masks.

    The KL term inside the objective is re-evaluated at the current
    parameters so the penalty also contributes a gradient.
    """
    mean, cache = pi_rl.forward(item.x)
    dmean = np.zeros_like(mean)
    ppo = 0.0
    if use_ppo:
        a, s2n = exp.action.sampled_masks, hyper.sigma ** 2 * mean.size
        logp_new = gaussian_log_prob(a, mean, hyper.sigma)
        kl_new = kl_gaussian_policies(mean, exp.mu_sft, hyper.sigma)
        j_new = exp.reward - hyper.beta * kl_new
        ppo = ppo_clip_loss(logp_new, exp.logp_old, j_new, hyper.epsilon)
        d_logp, d_j = ppo_clip_loss_grad(logp_new, exp.logp_old, j_new, hyper.epsilon)
        dmean += d_logp * (a - mean) / s2n
        if hyper.beta > 0:
            dmean -= d_j * hyper.beta * kl_gaussian_policies_grad(mean, exp.mu_sft, hyper.sigma)
    mse = 0.0
    if hyper.lam > 0:
        enhanced = apply_masks(mean, item.x)
        mse = mse_channel_loss(enhanced.channels, item.target, hyper.alpha)
        d_ch = mse_channel_loss_grad(enhanced.channels, item.target, hyper.alpha)
        dmean += hyper.lam * apply_masks_vjp(mean, item.x, enhanced, d_ch)
    return overall_loss(ppo, mse, hyper.lam), ppo, mse, dmean, cache


def accumulate_gradients(pi_rl, buffer, data, hyper, micro_batch, use_ppo=True):
    """Mean gradient of the overall loss over the buffer, summed micro-batch by micro-batch."""
    items = list(buffer)
    n = len(items)
    grads = {k: np.zeros_like(v) for k, v in pi_rl.params.items()}
    totals = np.zeros(3)
    for start in range(0, n, micro_batch):
        chunk = items[start:start + micro_batch]
        mb = {k: np.zeros_like(v) for k, v in pi_rl.params.items()}
        for exp in chunk:
            loss, ppo, mse, dmean, cache = utterance_loss_grad(
                pi_rl, data[exp.index], exp, hyper, use_ppo)
            totals += (loss, ppo, mse)
            for k, g in pi_rl.backward(cache, dmean).items():
                mb[k] += g
        for k in grads:
            grads[k] += mb[k] / n
    return grads, totals / n


def update_policy(pi_rl, buffer, data, hyper, micro_batch=8, pi_old=None, use_ppo=True,
                  optimizer=None):
    """One optimizer step (plain SGD at ``hyper.learning_rate`` by default) on
    the overall loss over a full buffer.

    Clears the buffer and returns ``(new_pi_old, stats)``. When ``pi_old``
    is given, stored log-likelihoods are re-checked against it first.
    """
    if len(buffer) == 0:
        raise TrainingError("empty experience buffer")
    if use_ppo and pi_old is not None:
        for exp in buffer:
            lp = gaussian_log_prob(exp.action.sampled_masks,
                                   predict_mean(pi_old, data[exp.index].x), hyper.sigma)
            if abs(lp - exp.logp_old) > 1e-9:
                raise TrainingError(f"stale experience for {exp.utterance_id}: "
                                    f"stored logp {exp.logp_old} vs {lp}")
    grads, (loss, ppo, mse) = accumulate_gradients(pi_rl, buffer, data, hyper, micro_batch, use_ppo)
    gnorm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if not (np.isfinite(loss) and np.isfinite(gnorm)):
        raise TrainingError(f"non-finite loss={loss} grad_norm={gnorm} "
                            f"(ppo={ppo}, mse={mse})")
    items = list(buffer)
    stats = StepStats(float(loss), float(ppo), float(mse),
                      float(np.mean([e.reward for e in items])),
                      float(np.mean([e.kl for e in items])),
                      float(np.mean([e.j for e in items])), gnorm)
    (optimizer or SGD(hyper.learning_rate)).step(pi_rl, grads)
    buffer.clear()
    return snapshot(pi_rl, "old"), stats


def validation_score(policy, data, mos_fn=pseudo_mos_score):
    return float(np.mean([mos_fn(synthesize(predict_mean(policy, item.x), item.x))
                          for item in data]))


@dataclass
class FinetuneResult:
    policy: object
    curve: list                 # (episode, mean_mos)
    stats: list = field(default_factory=list)


def finetune(pi_sft, train, val, config, mos_fn=pseudo_mos_score, pesq_fn=pseudo_pesq,
             out_dir=None, progress=None):
    """Run ``config.episodes`` rollout/update rounds starting from ``pi_sft``.

    Every ``log_every_episodes`` the deterministic policy is scored on
    ``val`` with ``mos_fn``; the curve includes the episode-0 baseline.
    """
    if pi_sft.role != "sft":
        raise TrainingError("finetune expects a frozen SFT policy")
    hyper = config.hyper
    use_ppo = config.reward_kind != "none"
    pi_rl = snapshot(pi_sft, "rl")
    pi_old = snapshot(pi_rl, "old")
    sampler = BatchSampler(len(train), config.effective_batch, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    sft_cache = SFTCache(pi_sft, mos_fn, pesq_fn)
    opt = make_optimizer(config.optimizer, hyper.learning_rate)
    buffer = ExperienceBuffer(config.effective_batch)
    curve = [(0, validation_score(pi_rl, val, mos_fn))]
    all_stats = []
    for episode in range(1, config.episodes + 1):
        batch = sampler.next()
        buffer.extend(rollout_episode(pi_old, pi_sft, train, batch, config.reward_kind, hyper,
                                      rng, mos_fn, pesq_fn, sft_cache=sft_cache))
        pi_old, stats = update_policy(pi_rl, buffer, train, hyper, config.micro_batch,
                                      pi_old=pi_old, use_ppo=use_ppo, optimizer=opt)
        all_stats.append(stats)
        if episode % config.log_every_episodes == 0:
            curve.append((episode, validation_score(pi_rl, val, mos_fn)))
            log.info("episode %d: val mos %.4f loss %.5g reward %.4g",
                     episode, curve[-1][1], stats.loss, stats.mean_reward)
            if progress is not None:
                progress(episode, curve[-1][1], stats)
    result = FinetuneResult(snapshot(pi_rl, "rl"), curve, all_stats)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.policy.save(os.path.join(out_dir, "rl.npz"))
        write_curve(os.path.join(out_dir, "curve.csv"), curve)
    return result


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "mean_mos"])
        for ep, score in curve:
            w.writerow([ep, repr(float(score))])


def curve_slope(curve):
    ep = np.array([c[0] for c in curve], float)
    sc = np.array([c[1] for c in curve], float)
    return float(np.polyfit(ep, sc, 1)[0])


# ---------------------------------------------------------------- ablation

ABLATION_VARIANTS = (
    ("MSE-only", "none"),
    ("PPO", "pesq"),
    ("PPO", "mos"),
    ("PPO", "comb"),
)
_REWARD_LABEL = {"none": "-", "pesq": "r_pesq", "mos": "r_mos", "comb": "r_comb"}


@dataclass
class AblationRow:
    model: str
    reward: str
    pesq: float
    ssnr_db: float
    si_sdr_db: float
    mos: float


@dataclass
class AblationReport:
    rows: list
    utterance_ids: list
    results: dict = field(default_factory=dict, repr=False)

    def render_table(self):
        head = ["Model", "Reward", "PESQ", "SSNR", "SI-SDR", "N_MOS"]
        body = [[r.model, r.reward, f"{r.pesq:.3f}", f"{r.ssnr_db:.3f}",
                 f"{r.si_sdr_db:.3f}", f"{r.mos:.3f}"] for r in self.rows]
        return "\n".join(metrics._align([head] + body)) + "\n"

    def to_csv(self):
        lines = ["model,reward,pesq,ssnr_db,si_sdr_db,mos"]
        for r in self.rows:
            lines.append(f"{r.model},{r.reward},{r.pesq!r},{r.ssnr_db!r},{r.si_sdr_db!r},{r.mos!r}")
        return "\n".join(lines) + "\n"


def evaluate_policy(policy, data, mos_fn=pseudo_mos_score, pesq_fn=pseudo_pesq):
    rows = []
    for item in data:
        est = synthesize(predict_mean(policy, item.x), item.x)
        rows.append(metrics.score_pair(item.uid, est, item.clean,
                                       item.clean.sample_rate_hz, pesq_fn, None, mos_fn))
    return rows


def _ablation_row(model, reward, rows):
    agg = metrics.aggregate(rows)
    return AblationRow(model, reward, agg["pesq"], agg["ssnr_db"], agg["si_sdr_db"], agg["mos"])


def run_ablation(pi_sft, train, val, config, mos_fn=pseudo_mos_score, pesq_fn=pseudo_pesq,
                 base_name="ToyMaskNet"):
    """Fine-tune every variant from the same SFT policy, seed and budget."""
    rows = [_ablation_row(f"{base_name} (baseline)", "-",
                          evaluate_policy(pi_sft, val, mos_fn, pesq_fn))]
    results = {}
    for label, kind in ABLATION_VARIANTS:
        cfg = TrainConfig(**{**asdict(config), "hyper": config.hyper, "reward_kind": kind})
        res = finetune(pi_sft, train, val, cfg, mos_fn, pesq_fn)
        results[kind] = res
        name = f"{base_name}+MSE" if kind == "none" else f"{base_name}_PPO"
        rows.append(_ablation_row(name, _REWARD_LABEL[kind],
                                  evaluate_policy(res.policy, val, mos_fn, pesq_fn)))
    return AblationReport(rows, [item.uid for item in val], results)


def write_manifest(path, config_dict, seed, extra=None):
    from . import __version__

    doc = {"version": __version__, "seed": seed, "config": config_dict}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
