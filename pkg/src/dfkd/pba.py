"""Population-based search over augmentation hyperparameters.

A fixed-size population of trials trains in lockstep; every few epochs the
bottom quartile clones weights and policy from the top quartile (exploit)
and the cloned policies are perturbed on their probability/magnitude grids
(explore). The per-epoch schedule is reconstructed from the winning
trial's lineage.

RNG streams are counter-based, derived from (global seed, trial id, epoch),
so serial and parallel execution produce identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import MAG_GRID, PROB_GRID, PolicyEntry, initial_policy, validate_policy

SCHEDULE_FORMAT_VERSION = 1

RESAMPLE_PROB = 0.2
EXPLOIT_FRACTION = 0.25
DEFAULT_EXPLOIT_INTERVAL = 3


class SearchError(RuntimeError):
    pass


class LineageError(RuntimeError):
    pass


@dataclass
class Trial:
    id: int
    model: object
    policy: list
    fitness: float = 0.0
    # one (epoch, policy snapshot, parent id or None) per completed epoch
    lineage: list = field(default_factory=list)
    # set when exploited; recorded on the next epoch's lineage entry
    pending_parent: int | None = None


@dataclass
class Schedule:
    per_epoch: list  # one PolicyList per search epoch

    def __len__(self):
        return len(self.per_epoch)

    def policy_for(self, epoch: int, total_epochs: int) -> list:
        """Linear floor mapping from a training run of `total_epochs` onto
        this schedule's own epoch axis."""
        idx = epoch * len(self.per_epoch) // total_epochs
        return self.per_epoch[min(idx, len(self.per_epoch) - 1)]


def trial_rng(seed: int, trial_id: int, epoch: int, stream: int = 0) -> np.random.Generator:
    """Counter-based stream, identical under serial or parallel execution."""
    return np.random.default_rng(np.random.Philox(key=seed, counter=[stream, trial_id, epoch, 0]))


def _snap_prob(p: float) -> float:
    return min(PROB_GRID, key=lambda g: abs(g - p))


def explore(policy, rng: np.random.Generator):
    """Perturb a policy on its grids; operator identities never change."""
    out = []
    for entry in policy:
        if rng.random() < RESAMPLE_PROB:
            prob = float(rng.choice(PROB_GRID))
            mag = int(rng.choice(MAG_GRID))
        else:
            u = int(rng.integers(1, 4))
            sp = 1 if rng.random() < 0.5 else -1
            sm = 1 if rng.random() < 0.5 else -1
            prob = _snap_prob(min(1.0, max(0.0, entry.probability + sp * 0.1 * u)))
            mag = min(9, max(0, entry.magnitude + sm * u))
        out.append(PolicyEntry(entry.op, prob, mag))
    return out


def exploit(trials: list, rng: np.random.Generator | None = None) -> dict:
    """Truncation selection: bottom-quartile trials clone weights and policy
    from uniformly chosen top-quartile trials. Ties never trigger
    replacement. Returns {loser_id: winner_id}."""
    rng = rng or np.random.default_rng(0)
    n = len(trials)
    q = math.ceil(EXPLOIT_FRACTION * n)
    ranked = sorted(trials, key=lambda t: (t.fitness, t.id))
    bottom, top = ranked[:q], ranked[-q:]
    replacements = {}
    for loser in bottom:
        winner = top[int(rng.integers(0, len(top)))]
        if winner.fitness <= loser.fitness:
            continue
        replacements[loser.id] = winner.id
    return replacements


def run_search(fitness_fn, population_size: int, epochs: int,
               exploit_interval: int = DEFAULT_EXPLOIT_INTERVAL,
               seed: int = 0, model_factory=None, initial_policy_fn=None) -> tuple:
    """Evolve augmentation policies; returns (Schedule, trials).

    fitness_fn(trial, epoch, rng) trains the trial's model for one epoch
    under trial.policy and returns validation accuracy in [0, 1].
    model_factory(trial_id) builds one model per population slot.
    """
    if population_size < 2:
        raise ValueError(f"population_size must be >= 2, got {population_size}")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")

    make_policy = initial_policy_fn or (lambda tid: initial_policy())
    trials = [
        Trial(id=tid, model=model_factory(tid) if model_factory else None,
              policy=validate_policy(make_policy(tid)))
        for tid in range(population_size)
    ]

    for epoch in range(epochs):
        for trial in trials:
            trial.lineage.append((epoch,
                                  [PolicyEntry(e.op, e.probability, e.magnitude) for e in trial.policy],
                                  trial.pending_parent))
            trial.pending_parent = None
            try:
                trial.fitness = float(fitness_fn(trial, epoch, trial_rng(seed, trial.id, epoch)))
            except Exception as exc:
                raise SearchError(f"fitness evaluation failed for trial {trial.id} at epoch {epoch}: {exc}") from exc
            if not 0.0 <= trial.fitness <= 1.0:
                raise SearchError(f"trial {trial.id} fitness {trial.fitness} outside [0,1]")

        last_epoch = epoch == epochs - 1
        if not last_epoch and (epoch + 1) % exploit_interval == 0:
            replacements = exploit(trials, trial_rng(seed, 0, epoch, stream=1))
            by_id = {t.id: t for t in trials}
            for loser_id, winner_id in replacements.items():
                loser, winner = by_id[loser_id], by_id[winner_id]
                if loser.model is not None and winner.model is not None:
                    loser.model.copy_from(winner.model)
                cloned = [PolicyEntry(e.op, e.probability, e.magnitude) for e in winner.policy]
                loser.pending_parent = winner_id
                loser.policy = explore(cloned, trial_rng(seed, loser.id, epoch, stream=2))

    best = max(trials, key=lambda t: (t.fitness, -t.id))
    return reconstruct_schedule(best, trials), trials


def reconstruct_schedule(best: Trial, all_trials: list) -> Schedule:
    """Walk parent pointers backward from the best trial, splicing each
    ancestor's snapshots before its replacement epoch."""
    by_id = {t.id: t for t in all_trials}
    epochs = len(best.lineage)
    per_epoch: list = [None] * epochs
    current = best
    upto = epochs  # exclusive
    while upto > 0:
        cut = 0
        for (epoch, policy, parent) in current.lineage:
            if epoch >= upto:
                break
            if parent is not None:
                cut = epoch
        next_trial = None
        for (epoch, policy, parent) in current.lineage:
            if cut <= epoch < upto:
                per_epoch[epoch] = policy
            if epoch == cut and parent is not None:
                next_trial = by_id.get(parent)
                if next_trial is None:
                    raise LineageError(f"lineage references unknown trial {parent}")
        if cut == 0:
            break
        upto = cut
        current = next_trial
        if current is None:
            raise LineageError("broken lineage: replacement epoch has no parent trial")
    if any(p is None for p in per_epoch):
        missing = [i for i, p in enumerate(per_epoch) if p is None]
        raise LineageError(f"lineage does not cover epochs {missing}")
    return Schedule(per_epoch)


# -- schedule file I/O ----------------------------------------------------


def save_schedule(schedule: Schedule, path, seed: int = 0, population_size: int = 0):
    """Versioned plain-text table: header, then one row per
    (epoch, op, slot, probability, magnitude)."""
    with open(path, "w") as fh:
        fh.write(f"# dfkd-schedule v{SCHEDULE_FORMAT_VERSION} seed={seed} population={population_size}\n")
        fh.write("epoch\top\tslot\tprobability\tmagnitude\n")
        for epoch, policy in enumerate(schedule.per_epoch):
            slots: dict = {}
            for entry in policy:
                slot = slots.get(entry.op, 0)
                slots[entry.op] = slot + 1
                fh.write(f"{epoch}\t{entry.op}\t{slot}\t{entry.probability:.1f}\t{entry.magnitude}\n")


def load_schedule(path) -> Schedule:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# dfkd-schedule v"):
        raise ValueError(f"{path}: not a schedule file (line 1)")
    version = int(lines[0].split("v")[1].split()[0])
    if version != SCHEDULE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported schedule version {version}")
    per_epoch: dict = {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}: malformed row at line {lineno}")
        try:
            epoch = int(parts[0])
            entry = PolicyEntry(parts[1], float(parts[3]), int(parts[4]))
        except ValueError as exc:
            raise ValueError(f"{path}: malformed row at line {lineno}: {exc}") from exc
        per_epoch.setdefault(epoch, []).append(entry)
    epochs = sorted(per_epoch)
    if epochs != list(range(len(epochs))):
        raise ValueError(f"{path}: epochs are not contiguous from 0")
    return Schedule([validate_policy(per_epoch[e]) for e in epochs])
