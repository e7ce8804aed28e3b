"""Per-intervention task datasets and the meta-dataset built from them.

Each task is a natural experiment: the units that received one particular
intervention plus a control pool that is shared across tasks. Splitting
into train/val/test happens at the task level so a held-out intervention
is never seen during training, and any unit treated under a held-out
intervention is scrubbed from the training-side task lists as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, DataError

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class Sample:
    """One unit.

    ``task_id`` is set iff the unit is treated; controls belong to no task.
    ``tau_true`` is the ground-truth effect of the unit's own intervention
    (None for controls, and for real data). ``tau_pseudo`` is filled in by
    the pseudo-outcome stage.
    """

    sample_id: str
    x: NDArray[np.float64]
    y: float
    treated: bool
    task_id: int | None = None
    tau_true: float | None = None
    tau_pseudo: float | None = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 1:
            raise DataError(f"sample {self.sample_id}: x must be 1-d, got shape {self.x.shape}")
        if not np.isfinite(self.x).all() or not np.isfinite(self.y):
            raise DataError(f"sample {self.sample_id}: non-finite covariates or outcome")
        if self.treated and self.task_id is None:
            raise DataError(f"sample {self.sample_id}: treated sample needs a task_id")
        if not self.treated and self.task_id is not None:
            raise DataError(f"sample {self.sample_id}: control sample must not carry a task_id")


@dataclass
class TaskDataset:
    """All treated units of one intervention plus a control list."""

    task_id: int
    w: NDArray[np.float64]
    treated: list[Sample]
    controls: list[Sample]
    # pseudo-outcomes of the shared controls are task-specific, so they live
    # here (aligned with ``controls``) rather than on the Sample objects
    control_pseudo: NDArray[np.float64] | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 1:
            raise DataError(f"task {self.task_id}: w must be 1-d, got shape {self.w.shape}")
        if not self.treated:
            raise DataError(f"task {self.task_id} has no treated samples")
        if not self.controls:
            raise DataError(f"task {self.task_id} has no controls")
        for s in self.treated:
            if s.task_id != self.task_id:
                raise DataError(
                    f"task {self.task_id} contains sample {s.sample_id} "
                    f"with task_id {s.task_id}"
                )

    @property
    def n_treated(self) -> int:
        return len(self.treated)

    @property
    def n_controls(self) -> int:
        return len(self.controls)

    def invalidate_cache(self) -> None:
        self._cache.clear()

    def _stacked(self, key: str, samples: Sequence[Sample], attr: str) -> NDArray[np.float64]:
        if key not in self._cache:
            if attr == "x":
                arr = np.stack([s.x for s in samples])
            else:
                vals = [getattr(s, attr) for s in samples]
                if any(v is None for v in vals):
                    raise DataError(f"task {self.task_id}: missing {attr} on some samples")
                arr = np.asarray(vals, dtype=np.float64)
            self._cache[key] = arr
        return self._cache[key]

    def treated_x(self) -> NDArray[np.float64]:
        return self._stacked("tx", self.treated, "x")

    def treated_y(self) -> NDArray[np.float64]:
        return self._stacked("ty", self.treated, "y")

    def treated_tau_true(self) -> NDArray[np.float64]:
        return self._stacked("ttt", self.treated, "tau_true")

    def treated_tau_pseudo(self) -> NDArray[np.float64]:
        return self._stacked("ttp", self.treated, "tau_pseudo")

    def control_x(self) -> NDArray[np.float64]:
        return self._stacked("cx", self.controls, "x")

    def control_y(self) -> NDArray[np.float64]:
        return self._stacked("cy", self.controls, "y")

    def adapt_units(self, scope: str) -> list[Sample]:
        """Units visible to the inner adaptation loop."""
        if scope == "treated_only":
            return self.treated
        if scope == "all_units":
            return self.treated + self.controls
        raise ConfigError(f"unknown adapt scope {scope!r}")


@dataclass
class MetaDataset:
    """A collection of tasks over a shared control pool.

    ``split_of`` maps task_id -> split name once :func:`split_holdout` ran;
    it is None for an unsplit dataset. ``removed_counts`` reports how many
    list memberships the leakage scrub deleted.
    """

    tasks: list[TaskDataset]
    controls: list[Sample]
    split_of: dict[int, str] | None = None
    removed_counts: dict[str, int] | None = None

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def task_by_id(self, task_id: int) -> TaskDataset:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise DataError(f"no task with id {task_id}")

    def interventions(self) -> NDArray[np.float64]:
        if not self.tasks:
            return np.zeros((0, 0))
        return np.stack([t.w for t in self.tasks])

    def tasks_in(self, split: str) -> list[TaskDataset]:
        if split not in SPLIT_NAMES:
            raise ConfigError(f"unknown split {split!r}")
        if self.split_of is None:
            raise DataError("dataset has not been split yet")
        return [t for t in self.tasks if self.split_of[t.task_id] == split]

    def subset(self, split: str) -> "MetaDataset":
        kept = self.tasks_in(split)
        return MetaDataset(
            tasks=kept,
            controls=self.controls,
            split_of={t.task_id: split for t in kept},
        )


def build_meta_dataset(
    samples: Iterable[Sample],
    interventions: Mapping[int, NDArray[np.float64]] | NDArray[np.float64],
) -> MetaDataset:
    """Group samples into one task per intervention.

    ``interventions`` maps task_id -> e-vector (a dict, or an array whose
    row j is task j). Every treated sample must reference a known task,
    every task must end up with at least one treated unit, and the control
    pool must be nonempty. Controls are shared by reference across tasks.
    """
    if isinstance(interventions, Mapping):
        ws = {int(k): np.asarray(v, dtype=np.float64) for k, v in interventions.items()}
    else:
        arr = np.asarray(interventions, dtype=np.float64)
        if arr.ndim != 2:
            raise DataError(f"interventions must be 2-d, got shape {arr.shape}")
        ws = {j: arr[j] for j in range(arr.shape[0])}

    controls: list[Sample] = []
    by_task: dict[int, list[Sample]] = {j: [] for j in ws}
    seen_ids: set[str] = set()
    for s in samples:
        if s.sample_id in seen_ids:
            raise DataError(f"duplicate sample id {s.sample_id!r}")
        seen_ids.add(s.sample_id)
        if s.treated:
            if s.task_id not in by_task:
                raise DataError(f"sample {s.sample_id} references unknown task {s.task_id}")
            by_task[s.task_id].append(s)
        else:
            controls.append(s)

    if not controls:
        raise DataError("control pool is empty")
    empty = sorted(j for j, lst in by_task.items() if not lst)
    if empty:
        raise DataError(f"tasks with no treated samples: {empty}")

    tasks = [
        TaskDataset(task_id=j, w=ws[j], treated=by_task[j], controls=controls)
        for j in sorted(ws)
    ]
    return MetaDataset(tasks=tasks, controls=controls)


def pool_interventions(ws: Sequence[NDArray[np.float64]]) -> NDArray[np.float64]:
    """Combine intervention vectors by elementwise sum (order-invariant)."""
    if len(ws) == 0:
        raise DataError("cannot pool an empty list of interventions")
    arrs = [np.asarray(w, dtype=np.float64) for w in ws]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise DataError(f"cannot pool vectors of shapes {shape} and {a.shape}")
    out = arrs[0].copy()
    for a in arrs[1:]:
        out += a
    return out


def _holdout_counts(n_tasks: int, frac_val: float, frac_test: float) -> tuple[int, int]:
    for name, frac in (("frac_val", frac_val), ("frac_test", frac_test)):
        if not 0.0 <= frac < 1.0:
            raise ConfigError(f"{name} must be in [0, 1), got {frac}")
    if frac_val + frac_test >= 1.0:
        raise ConfigError("frac_val + frac_test must leave room for training tasks")
    n_val = int(np.floor(frac_val * n_tasks))
    n_test = int(np.floor(frac_test * n_tasks))
    if frac_val > 0.0:
        n_val = max(n_val, 1)
    if frac_test > 0.0:
        n_test = max(n_test, 1)
    if n_val + n_test >= n_tasks:
        raise DataError(
            f"holdout needs at least one training task: {n_tasks} tasks, "
            f"{n_val} val + {n_test} test requested"
        )
    return n_val, n_test


def split_holdout(
    md: MetaDataset,
    frac_val: float,
    frac_test: float,
    seed: int,
) -> MetaDataset:
    """Assign tasks to train/val/test and scrub held-out treated units.

    Tasks are assigned uniformly at random; counts are floor(frac * n),
    bumped to 1 when the fraction is positive. Afterwards, every unit
    treated in a test task is removed from all train and val task lists
    (treated and control), and every unit treated in a val task is removed
    from train task lists. Removal counts are reported on the result.
    """
    n_val, n_test = _holdout_counts(md.n_tasks, frac_val, frac_test)
    order = np.random.default_rng(seed).permutation(md.n_tasks)
    split_of: dict[int, str] = {}
    for pos, idx in enumerate(order):
        tid = md.tasks[idx].task_id
        if pos < n_test:
            split_of[tid] = "test"
        elif pos < n_test + n_val:
            split_of[tid] = "val"
        else:
            split_of[tid] = "train"

    test_treated = {
        s.sample_id for t in md.tasks if split_of[t.task_id] == "test" for s in t.treated
    }
    val_treated = {
        s.sample_id for t in md.tasks if split_of[t.task_id] == "val" for s in t.treated
    }
    banned = {"train": test_treated | val_treated, "val": test_treated, "test": set()}

    # one filtered control list per split, shared by the split's tasks
    pools = {
        name: [s for s in md.controls if s.sample_id not in banned[name]]
        for name in SPLIT_NAMES
    }
    counts = {
        "treated_removed_train": 0,
        "treated_removed_val": 0,
        "controls_removed_train": len(md.controls) - len(pools["train"]),
        "controls_removed_val": len(md.controls) - len(pools["val"]),
    }

    new_tasks: list[TaskDataset] = []
    for t in md.tasks:
        name = split_of[t.task_id]
        if name == "test":
            new_tasks.append(t)
            continue
        kept = [s for s in t.treated if s.sample_id not in banned[name]]
        counts[f"treated_removed_{name}"] += t.n_treated - len(kept)
        if not kept:
            raise DataError(f"leakage scrub left task {t.task_id} ({name}) without treated units")
        if not pools[name]:
            raise DataError(f"leakage scrub left the {name} control pool empty")
        new_tasks.append(
            TaskDataset(task_id=t.task_id, w=t.w, treated=kept, controls=pools[name])
        )
    return MetaDataset(
        tasks=new_tasks, controls=md.controls, split_of=split_of, removed_counts=counts
    )


def downsample(td: TaskDataset, max_treated: int, max_control: int, seed: int) -> TaskDataset:
    """Cap both groups by uniform subsampling without replacement.

    Groups at or under their cap are unchanged. Original order is kept
    among the survivors, and a task-specific control_pseudo array is
    subset along with the controls.
    """
    if max_treated < 1:
        raise ConfigError(f"max_treated must be >= 1, got {max_treated}")
    if max_control < 1:
        raise ConfigError(f"max_control must be >= 1, got {max_control}")
    rng = np.random.default_rng(seed)
    treated = td.treated
    controls = td.controls
    control_pseudo = td.control_pseudo
    if td.n_treated > max_treated:
        keep = np.sort(rng.choice(td.n_treated, size=max_treated, replace=False))
        treated = [td.treated[i] for i in keep]
    if td.n_controls > max_control:
        keep = np.sort(rng.choice(td.n_controls, size=max_control, replace=False))
        controls = [td.controls[i] for i in keep]
        if control_pseudo is not None:
            control_pseudo = control_pseudo[keep]
    if treated is td.treated and controls is td.controls:
        return td
    return TaskDataset(
        task_id=td.task_id,
        w=td.w,
        treated=treated,
        controls=controls,
        control_pseudo=control_pseudo,
    )
