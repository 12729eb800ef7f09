"""Experiment loop: collect, relabel, train, log one row per iteration."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import agent as oc
from .envs import ENVIRONMENTS, make_env
from .errors import ContractViolation
from .hindsight import (STRATEGIES, HindsightConfig, k_schedule, merge_shuffle_partition,
                        relabel_iteration)

log = logging.getLogger(__name__)

ALGOS = ("moc", "oc")
HER_VARIANTS = ("none", "her", "2her")
DEFAULT_LR = 1e-4

# Desk-scale training defaults, filled in by ExperimentConfig.resolved() for
# any field left at None. Runs of a few hundred iterations do not learn at
# DEFAULT_LR, see the README.
DESK_DEFAULTS = {
    "point-reach": dict(lr_critic=4e-3, lr_policy=3e-4, lr_termination=1e-3, lr_meta=1e-3,
                        gamma=0.9, minibatch_size=32),
    "point-push": dict(lr_critic=4e-3, lr_policy=3e-4, lr_termination=1e-3, lr_meta=1e-3,
                       gamma=0.9, minibatch_size=32),
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration: " + "; ".join(self.problems))


@dataclass
class ExperimentConfig:
    env: str = "point-reach"
    algo: str = "moc"
    her: str = "her"
    n_options: int = 2
    steps_per_iteration: int = 500
    n_iterations: int = 150
    minibatch_size: Optional[int] = None
    seed: int = 0
    lr_critic: Optional[float] = None
    lr_policy: Optional[float] = None
    lr_termination: Optional[float] = None
    lr_meta: Optional[float] = None
    gamma: Optional[float] = None
    entropy_coef: Optional[float] = None
    rho_max: float = 2.0
    advantage: bool = True
    single_option: bool = False
    hidden: int = 64
    # fixed input map (x - 0.5) * input_scale applied before every head
    input_scale: float = 10.0
    normalize_advantage: bool = True
    k0: Optional[int] = None
    k_decay_interval: Optional[int] = None
    c_r: Optional[float] = None
    delta_displacement: float = 1e-3
    disable_2her_at: Optional[int] = None
    strategy: str = "future"
    separate_sets: bool = False
    substitute_state_in: bool = False
    out: str = "runs/default"

    def resolved(self):
        """Copy with environment-specific defaults filled in."""
        c = dataclasses.replace(self)
        push = c.env == "point-push"
        if c.entropy_coef is None:
            c.entropy_coef = 0.005 if push else 0.0
        if c.k0 is None:
            c.k0 = 8 if (push and c.her == "2her") else 4
        if c.k_decay_interval is None:
            c.k_decay_interval = 37 if (push and c.her == "2her") else 10 ** 9
        if c.c_r is None:
            c.c_r = 0.8
        if c.disable_2her_at is None and c.her == "2her":
            c.disable_2her_at = math.ceil(150 * c.n_iterations / 1500)
        desk = DESK_DEFAULTS.get(c.env, {})
        for name in ("lr_critic", "lr_policy", "lr_termination", "lr_meta"):
            if getattr(c, name) is None:
                setattr(c, name, desk.get(name, DEFAULT_LR))
        if c.gamma is None:
            c.gamma = desk.get("gamma", 0.98)
        if c.minibatch_size is None:
            c.minibatch_size = desk.get("minibatch_size", 64)
        if c.algo == "oc":
            c.single_option = True
        return c

    def problems(self):
        c = self.resolved()
        out = []
        if c.env not in ENVIRONMENTS:
            out.append(f"env must be one of {sorted(ENVIRONMENTS)}, got {c.env!r}")
        if c.algo not in ALGOS:
            out.append(f"algo must be one of {ALGOS}, got {c.algo!r}")
        if c.her not in HER_VARIANTS:
            out.append(f"her must be one of {HER_VARIANTS}, got {c.her!r}")
        if c.strategy not in STRATEGIES:
            out.append(f"strategy must be one of {STRATEGIES}, got {c.strategy!r}")
        if c.n_options < 1:
            out.append("n_options must be >= 1")
        if c.n_iterations < 0:
            out.append("n_iterations must be >= 0")
        if c.minibatch_size < 1:
            out.append("minibatch_size must be >= 1")
        if c.hidden < 1:
            out.append("hidden must be >= 1")
        if not c.input_scale > 0:
            out.append("input_scale must be > 0")
        if c.env in ENVIRONMENTS:
            env = make_env(c.env, seed=0)
            horizon = env.desc.horizon
            if c.steps_per_iteration <= 0 or c.steps_per_iteration % horizon:
                out.append(f"steps_per_iteration must be a positive multiple of the "
                           f"horizon ({horizon}), got {c.steps_per_iteration}")
            if c.her == "2her" and not env.desc.has_object:
                out.append(f"2her needs an environment with an object; {c.env} has none")
        for name in ("lr_critic", "lr_policy", "lr_termination", "lr_meta"):
            if not getattr(c, name) > 0:
                out.append(f"{name} must be > 0")
        if not 0.0 <= c.gamma < 1.0:
            out.append("gamma must lie in [0, 1)")
        if c.entropy_coef < 0:
            out.append("entropy_coef must be >= 0")
        if not c.rho_max > 0:
            out.append("rho_max must be > 0")
        if c.k0 < 0:
            out.append("k0 must be >= 0")
        if c.k_decay_interval < 1:
            out.append("k_decay_interval must be >= 1")
        if not 0.0 <= c.c_r <= 1.0:
            out.append("c_r must lie in [0, 1]")
        if c.delta_displacement < 0:
            out.append("delta_displacement must be >= 0")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self.resolved()

    def hindsight(self):
        c = self.resolved()
        return HindsightConfig(k0=c.k0, k_decay_interval=c.k_decay_interval, c_r=c.c_r,
                               delta_displacement=c.delta_displacement,
                               disable_2her_at=c.disable_2her_at, strategy=c.strategy,
                               separate_sets=c.separate_sets,
                               substitute_state_in=c.substitute_state_in)

    def update_config(self):
        c = self.resolved()
        return oc.UpdateConfig(gamma=c.gamma, lr_critic=c.lr_critic, lr_policy=c.lr_policy,
                               lr_termination=c.lr_termination, lr_meta=c.lr_meta,
                               entropy_coef=c.entropy_coef, rho_max=c.rho_max,
                               single_option=c.single_option, advantage=c.advantage,
                               normalize_advantage=c.normalize_advantage)


# --------------------------------------------------------------------------- config files

def _parse_value(raw, ftype):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    if "bool" in ftype:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "int" in ftype:
        return int(raw)
    if "float" in ftype:
        return float(raw)
    return raw


def read_config_file(path):
    """Parse flat ``key = value`` lines into a dict of typed overrides."""
    types = {f.name: str(f.type) for f in fields(ExperimentConfig)}
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (p.strip() for p in line.split("=", 1))
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(raw, types[key])
    return values


def write_config_file(config: ExperimentConfig, path):
    with open(path, "w", newline="\n") as fh:
        for f in fields(config):
            fh.write(f"{f.name} = {getattr(config, f.name)}\n")


# --------------------------------------------------------------------------- metrics

@dataclass
class IterationMetrics:
    iteration: int
    success_rate: float
    mean_return: float
    option_usage: tuple
    real_transitions: int
    relabeled_transitions: int
    relabeled_2her: int = 0
    accepted_trajectories: int = 0
    k: int = 0


def success_rate(trajectories):
    if not trajectories:
        raise ContractViolation("success_rate needs at least one trajectory")
    return sum(1 for t in trajectories if t.success) / len(trajectories)


def option_usage(trajectories, n_options):
    counts = np.zeros(n_options)
    for traj in trajectories:
        for tr in traj.transitions:
            counts[tr.option] += 1
    total = counts.sum()
    return counts / total if total else counts


def moving_average(series, window=20):
    if window < 1:
        raise ContractViolation("window must be >= 1")
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        return x
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(0, idx - window)
    return (csum[idx] - csum[lo]) / (idx - lo)


def metrics_header(n_options):
    return (["iteration", "success_rate", "mean_return", "real_transitions",
             "relabeled_transitions"] + [f"opt_usage_{i}" for i in range(n_options)])


def write_metrics_csv(rows, path, n_options=None):
    if n_options is None:
        n_options = len(rows[0].option_usage) if rows else 0
    if any(len(r.option_usage) != n_options for r in rows):
        raise ContractViolation("all rows must share the same number of options")
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc.strerror}") from exc
    with fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_header(n_options))
        for r in rows:
            w.writerow([r.iteration, f"{r.success_rate:.6f}", f"{r.mean_return:.6f}",
                        r.real_transitions, r.relabeled_transitions]
                       + [f"{u:.6f}" for u in r.option_usage])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------- loop

class Experiment:
    """One seeded training run; :meth:`run_iteration` advances by one iteration."""

    def __init__(self, config: ExperimentConfig):
        self.config = config.validate()
        c = self.config
        streams = np.random.SeedSequence(c.seed).spawn(5)
        env_ss, init_ss, act_ss, her_ss, shuffle_ss = streams
        self.env = make_env(c.env, seed=np.random.default_rng(env_ss))
        self.desc = self.env.desc
        self.params = oc.init_params(self.desc.state_dim + self.desc.goal_dim,
                                     self.desc.action_dim, c.n_options,
                                     np.random.default_rng(init_ss), hidden=c.hidden)
        self.params = dataclasses.replace(self.params, input_offset=0.5,
                                          input_scale=c.input_scale)
        self.opt = oc.OptimizerStates.for_params(self.params)
        self.act_rng = np.random.default_rng(act_ss)
        self.her_rng = np.random.default_rng(her_ss)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.hcfg = c.hindsight()
        self.ucfg = c.update_config()
        self.iteration = 0
        self.history = []
        self.last_relabeled = []

    def run_iteration(self):
        c = self.config
        it = self.iteration
        trajectories = oc.collect_iteration(self.params, self.env, self.act_rng,
                                            c.steps_per_iteration)
        real = [tr for traj in trajectories for tr in traj.transitions]
        relabeled, accepted = relabel_iteration(trajectories, self.hcfg, c.her, it,
                                                self.desc, self.her_rng)
        for mb in merge_shuffle_partition(real, relabeled, c.minibatch_size, self.shuffle_rng):
            self.params = oc.train_minibatch(self.params, self.opt, mb, self.ucfg)
        row = IterationMetrics(
            iteration=it,
            success_rate=success_rate(trajectories),
            mean_return=float(np.mean([t.ret for t in trajectories])),
            option_usage=tuple(option_usage(trajectories, c.n_options)),
            real_transitions=len(real),
            relabeled_transitions=len(relabeled),
            relabeled_2her=sum(1 for t in relabeled if t.tag == "2her"),
            accepted_trajectories=accepted,
            k=0 if c.her == "none" else k_schedule(it, self.hcfg),
        )
        self.last_relabeled = relabeled  # buffers are rebuilt every iteration
        self.history.append(row)
        self.iteration += 1
        return row


def run_experiment(config: ExperimentConfig, write=True):
    """Train for ``config.n_iterations`` and write the run's output files."""
    exp = Experiment(config)
    c = exp.config
    for _ in range(c.n_iterations):
        row = exp.run_iteration()
        if row.iteration % 10 == 0 or row.iteration == c.n_iterations - 1:
            log.info("iter %d success %.3f return %.2f relabeled %d", row.iteration,
                     row.success_rate, row.mean_return, row.relabeled_transitions)
    if write:
        os.makedirs(c.out, exist_ok=True)
        write_metrics_csv(exp.history, os.path.join(c.out, "metrics.csv"), c.n_options)
        oc.save_params(exp.params, os.path.join(c.out, "params.txt"))
        write_config_file(c, os.path.join(c.out, "config.resolved.txt"))
    return exp
