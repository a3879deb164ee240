"""Asynchronous advantage actor-critic with an optional curiosity bonus.

Workers are threads.  Each owns an environment and a private copy of the
parameters, collects up to K steps, builds one loss (actor-critic + ICM),
back-propagates it on its own tape and applies the clipped gradient to the
shared :class:`~curionav.optim.ParamStore` with shared Adam statistics.
"""

from __future__ import annotations

import csv
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, TrainerConfig
from .evalbench import build_suite, run_eval
from .geometry import Action, EpisodeConfig, MapSpec, NavEnv, TerminalKind
from .icm import CuriosityModule, IcmStepRecord, icm_loss, init_icm_params, intrinsic_reward
from .optim import ParamStore, clip_by_global_norm, collect_grads, write_snapshot, zero_grads
from .policy import ActorCritic, init_policy_params, normalize_observation, sample_action

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("iteration", "wall_seconds", "avg_reward", "avg_steps", "success_ratio")


class WorkerError(RuntimeError):
    pass


def combined_reward(extrinsic, intrinsic, lambda_i: float):
    if lambda_i < 0:
        raise ValueError("lambda_i must be non-negative")
    return extrinsic + lambda_i * intrinsic


def n_step_returns(rewards, gamma: float, bootstrap_value: float = 0.0) -> np.ndarray:
    """G_t = R_t + γ G_{t+1}, seeded with the bootstrap value V(s_K) (0 at true terminals)."""
    out = np.empty(len(rewards))
    g = bootstrap_value
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


def actor_critic_loss(log_policy: ad.Tensor, policy: ad.Tensor, values: ad.Tensor, actions, returns,
                      beta: float) -> ad.Tensor:
    """Σ_t [-log π(a_t|s_t)·A_t − β H(π(·|s_t)) + ½ (G_t − V(s_t))²] with A_t held constant."""
    returns = np.asarray(returns, dtype=np.float64)
    onehot = np.eye(log_policy.shape[-1])[np.asarray(actions, dtype=int)]
    advantage = returns - values.data
    logp_taken = ad.sum(ad.mul(log_policy, onehot), axis=-1)
    loss = ad.mul(ad.sum(ad.mul(logp_taken, advantage)), -1.0)
    if beta != 0.0:
        ent = ad.mul(ad.sum(ad.mul(policy, log_policy)), -1.0)
        loss = ad.sub(loss, ad.mul(ent, beta))
    value_err = ad.sub(values, returns)
    return ad.add(loss, ad.mul(ad.sum(ad.square(value_err)), 0.5))


@dataclass
class Rollout:
    lasers: list = field(default_factory=list)      # normalized scans s_0..s_T (T+1 entries)
    goals: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    extrinsic: list = field(default_factory=list)
    values: list = field(default_factory=list)
    policies: list = field(default_factory=list)
    intrinsic: np.ndarray | None = None
    initial_state: tuple | None = None
    terminal_kind: TerminalKind = TerminalKind.NONE
    bootstrap: bool = True
    bootstrap_value: float = 0.0

    def __len__(self):
        return len(self.actions)

    def rewards(self, lambda_i: float) -> np.ndarray:
        ext = np.asarray(self.extrinsic, dtype=np.float64)
        if self.intrinsic is None:
            return ext
        return combined_reward(ext, self.intrinsic, lambda_i)


def initial_params(cfg: RunConfig, seed: int) -> dict[str, np.ndarray]:
    ss = np.random.SeedSequence([seed, 0x1])
    ac_rng, icm_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    params = init_policy_params(cfg.network, ac_rng)
    if cfg.trainer.use_icm:
        params.update(init_icm_params(cfg.icm, icm_rng))
    return params


@dataclass
class TrainResult:
    store: ParamStore
    metrics: list[dict]
    iterations: int
    wall_seconds: float


class _Shared:
    def __init__(self, store: ParamStore, tcfg: TrainerConfig):
        self.store = store
        self.total = tcfg.total_iterations
        self.eval_interval = tcfg.eval_interval
        self.counter = 0
        self.lock = threading.Lock()
        self.stop = threading.Event()
        self.metrics: queue.Queue = queue.Queue()
        self.errors: list[BaseException] = []

    def claim_step(self):
        """Reserve one environment step of the global budget; None when exhausted."""
        with self.lock:
            if self.counter >= self.total or self.stop.is_set():
                return None
            self.counter += 1
            return self.counter


class Worker:
    def __init__(self, worker_id: int, shared: _Shared, m: MapSpec, cfg: RunConfig,
                 evaluator=None):
        self.id = worker_id
        self.shared = shared
        self.cfg = cfg
        self.tcfg = cfg.trainer
        env_seed, act_seed = np.random.SeedSequence([cfg.trainer.seed, worker_id]).spawn(2)
        ep = cfg.episode
        self.env = NavEnv(m, EpisodeConfig(ep.train_max_steps, ep.goal_radius, ep.robot_radius,
                                           int(env_seed.generate_state(1)[0])), cfg.reward)
        self.rng = np.random.default_rng(act_seed)
        self.params = shared.store.make_tensors()
        self.net = ActorCritic(cfg.network, self.params)
        self.icm = CuriosityModule(cfg.icm, self.params) if self.tcfg.use_icm else None
        self.evaluator = evaluator
        self.obs = None
        self.state = None

    def _begin_episode(self):
        scan_, goal = self.env.reset()
        self.obs = normalize_observation(scan_, goal)
        st = self.net.initial_state()
        self.state = None if st is None else (st[0].data, st[1].data)

    def collect(self) -> tuple[Rollout, list[int]]:
        if self.env.done:
            self._begin_episode()
        ro = Rollout(initial_state=self.state)
        evals = []
        state = self.state
        laser, goal = self.obs
        ro.lasers.append(laser)
        ro.goals.append(goal)
        for _ in range(self.tcfg.rollout_K):
            n = self.shared.claim_step()
            if n is None:
                break
            if n % self.shared.eval_interval == 0:
                evals.append(n)
            out = self.net.forward(laser, goal, state)
            action = sample_action(out.policy, self.rng)
            outcome, reward = self.env.step(action)
            state = None if out.recurrent_state is None else (out.recurrent_state[0].data,
                                                              out.recurrent_state[1].data)
            laser, goal = normalize_observation(*outcome.next_observation)
            ro.actions.append(int(action))
            ro.extrinsic.append(reward)
            ro.values.append(float(out.value.data))
            ro.policies.append(out.policy.data)
            ro.lasers.append(laser)
            ro.goals.append(goal)
            ro.terminal_kind = outcome.terminal_kind
            if outcome.terminal_kind is not TerminalKind.NONE:
                break
        self.obs = (laser, goal)
        self.state = state
        kind = ro.terminal_kind
        ro.bootstrap = kind in (TerminalKind.NONE, TerminalKind.TIME_LIMIT)
        if ro.bootstrap and len(ro):
            ro.bootstrap_value = float(self.net.forward(laser, goal, state).value.data)
        return ro, evals

    def train_on(self, ro: Rollout) -> dict:
        tcfg = self.tcfg
        lasers = np.array(ro.lasers)
        goals = np.array(ro.goals)
        init = None if ro.initial_state is None else tuple(ad.Tensor(s) for s in ro.initial_state)
        with ad.Tape() as tape:
            out = self.net.forward_sequence(lasers[:-1], goals[:-1], init)
            loss_icm = None
            if self.icm is not None:
                phi = self.icm.encode(lasers)
                onehot = np.eye(len(Action))[ro.actions]
                phi_t, phi_t1 = phi[:-1], phi[1:]
                phi_hat = self.icm.forward_predict(phi_t, onehot)
                probs = self.icm.inverse_predict(phi_t, phi_t1)
                record = IcmStepRecord(phi_t, phi_t1, phi_hat, probs, intrinsic_reward(phi_hat, phi_t1))
                ro.intrinsic = record.intrinsic_reward
                loss_icm = icm_loss(record, onehot, self.cfg.icm.lambda_f)
            returns = n_step_returns(ro.rewards(self.cfg.reward.lambda_i), tcfg.gamma,
                                     ro.bootstrap_value if ro.bootstrap else 0.0)
            loss = actor_critic_loss(out.log_policy, out.policy, out.value, ro.actions, returns,
                                     tcfg.beta_entropy)
            if loss_icm is not None:
                loss = ad.add(loss, loss_icm)
        zero_grads(self.params)
        tape.backward(loss)
        grads, norm = clip_by_global_norm(collect_grads(self.params), tcfg.grad_clip_norm)
        self.shared.store.apply_adam(grads, tcfg.learning_rate)
        return {"loss": float(loss.data), "grad_norm": norm}

    def run(self):
        shared = self.shared
        try:
            while not shared.stop.is_set():
                shared.store.copy_into(self.params)
                ro, evals = self.collect()
                if len(ro) == 0:
                    break
                self.train_on(ro)
                for n in evals:
                    if self.evaluator is not None:
                        self.evaluator(n)
        except BaseException as exc:  # surfaced by train()
            shared.errors.append(exc)
            shared.stop.set()
            log.exception("worker %d failed", self.id)


def _metrics_writer(q: queue.Queue, path: Path | None, rows: list):
    fh = writer = None
    if path is not None:
        fh = open(path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        fh.flush()
    try:
        while True:
            row = q.get()
            if row is None:
                break
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
    finally:
        if fh is not None:
            fh.close()


def snapshot_meta(cfg: RunConfig, iteration: int, store: ParamStore) -> dict:
    return {"config": cfg.to_dict(), "iteration": iteration, "adam_step": store.step}


def train(cfg: RunConfig, m: MapSpec, out_dir=None, workers: int | None = None,
          params: dict | None = None) -> TrainResult:
    """Run ``cfg.trainer.workers`` (or ``workers``) threads until the global step budget is spent.

    With ``out_dir`` set, writes ``metrics.csv`` and parameter snapshots there.
    """
    tcfg = cfg.trainer
    n_workers = workers or tcfg.workers
    store = ParamStore(params if params is not None else initial_params(cfg, tcfg.seed))
    shared = _Shared(store, tcfg)
    out = Path(out_dir) if out_dir is not None else None
    snap_dir = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)

    suite = None
    if tcfg.total_iterations >= tcfg.eval_interval:
        suite = build_suite(m, tcfg.eval_seed, tcfg.eval_episodes, cfg.episode.eval_max_steps,
                            cfg.episode.goal_radius, cfg.episode.robot_radius)
    t0 = time.perf_counter()

    def evaluator(iteration: int):
        arrays = store.arrays()
        res = run_eval(arrays, suite, greedy=True, network=cfg.network, reward_params=cfg.reward)
        wall = time.perf_counter() - t0 if tcfg.log_wall_time else 0.0
        shared.metrics.put({
            "iteration": iteration,
            "wall_seconds": f"{wall:.3f}",
            "avg_reward": f"{res.avg_reward:.6f}",
            "avg_steps": f"{res.steps_mean:.3f}",
            "success_ratio": f"{res.success_ratio:.3f}",
        })
        if snap_dir is not None and tcfg.snapshot_every_eval:
            write_snapshot(snap_dir / f"iter_{iteration:09d}.snap", arrays,
                           snapshot_meta(cfg, iteration, store))
        log.info("iteration %d: success %.1f%%, steps %.1f, reward %.3f",
                 iteration, res.success_ratio, res.steps_mean, res.avg_reward)

    rows: list[dict] = []
    writer = threading.Thread(target=_metrics_writer,
                              args=(shared.metrics, out / "metrics.csv" if out else None, rows),
                              name="metrics-writer")
    writer.start()
    try:
        pool = [Worker(i, shared, m, cfg, evaluator) for i in range(n_workers)]
        if n_workers == 1:
            pool[0].run()
        else:
            threads = [threading.Thread(target=w.run, name=f"worker-{w.id}") for w in pool]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
    finally:
        shared.metrics.put(None)
        writer.join()
    if shared.errors:
        raise WorkerError(f"training aborted after {shared.counter} iterations") from shared.errors[0]
    if snap_dir is not None:
        write_snapshot(out / "final.snap", store.arrays(), snapshot_meta(cfg, shared.counter, store))
    return TrainResult(store, sorted(rows, key=lambda r: r["iteration"]), shared.counter,
                       time.perf_counter() - t0)
