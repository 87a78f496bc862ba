"""Integrate-and-fire neurons with one or several firing thresholds.

A multi-threshold neuron visits a strictly descending list of thresholds
once per step.  Each threshold fires if the membrane charge left by the
larger thresholds still reaches it, and the step's output is the weighted
sum of the fired thresholds.  The unfired remainder stays on the membrane,
so quantization error telescopes across a simulation window instead of
accumulating per step.

For membrane charge distributed uniformly on [0, v_max], the schedule that
minimizes the expected single-step residual is the halving one
(v_max/2, v_max/4, ..., v_max/2^n), with expected residual v_max/2^(n+1).
`expected_residual` evaluates that objective for any schedule by enumerating
the representable output values, and `brute_force_optimal` recovers the
halving schedule from a grid search, which is how the tests pin the theory
down independently.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

_MAX_ENUMERATED = 16  # 2^16 subset sums is the sane ceiling for enumeration


@dataclass(frozen=True)
class ThresholdSchedule:
    """Strictly descending positive thresholds, largest first."""

    thresholds: tuple[float, ...]

    def __post_init__(self):
        ths = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", ths)
        if not ths:
            raise ValueError("schedule needs at least one threshold")
        if any(t <= 0.0 for t in ths):
            raise ValueError(f"thresholds must be positive, got {ths}")
        if any(a <= b for a, b in zip(ths, ths[1:])):
            raise ValueError(f"thresholds must be strictly descending, got {ths}")

    def __len__(self) -> int:
        return len(self.thresholds)

    @property
    def total(self) -> float:
        """Largest value a single step can emit (all thresholds fired)."""
        return float(sum(self.thresholds))


@dataclass
class NeuronState:
    """Mutable-looking but treated as a value: membrane plus last step's spikes."""

    membrane: Tensor
    last_spikes: tuple[Tensor, ...] = ()


def init_state(shape, num_thresholds: int) -> NeuronState:
    zeros = np.zeros(shape, dtype=np.float64)
    return NeuronState(
        membrane=zeros,
        last_spikes=tuple(np.zeros(shape, dtype=np.float64) for _ in range(num_thresholds)),
    )


def if_step(state: NeuronState, current: Tensor, v_th: float) -> tuple[Tensor, NeuronState]:
    """One step of a plain integrate-and-fire neuron.

    Charge the membrane with the input current, fire where it reaches v_th,
    and subtract v_th from the fired positions (soft reset).  The membrane
    is not clamped below, so inhibition accumulates.
    """
    if v_th <= 0.0:
        raise ValueError(f"threshold must be positive, got {v_th}")
    charged = state.membrane + np.asarray(current, dtype=np.float64)
    spikes = (charged >= v_th).astype(np.float64)
    membrane = charged - v_th * spikes
    return spikes, NeuronState(membrane=membrane, last_spikes=(spikes,))


def mt_step(
    state: NeuronState, current: Tensor, schedule: ThresholdSchedule
) -> tuple[Tensor, tuple[Tensor, ...], NeuronState]:
    """One step of a multi-threshold neuron.

    Thresholds are visited largest first; each fires if the charge not yet
    claimed by the previous ones still reaches it.  Returns the weighted
    output (sum of fired threshold values), the per-threshold spike maps,
    and the new state whose membrane keeps the unfired remainder.
    """
    charged = state.membrane + np.asarray(current, dtype=np.float64)
    remainder = charged.copy()
    spikes = []
    for v_th in schedule.thresholds:
        fired = (remainder >= v_th).astype(np.float64)
        remainder = remainder - v_th * fired
        spikes.append(fired)
    weighted = charged - remainder
    return weighted, tuple(spikes), NeuronState(membrane=remainder, last_spikes=tuple(spikes))


def optimal_thresholds(n: int, v_max: float) -> ThresholdSchedule:
    """Halving schedule (v_max/2, ..., v_max/2^n), optimal for U[0, v_max] charge."""
    if n < 1:
        raise ValueError(f"need at least one threshold, got n={n}")
    if v_max <= 0.0:
        raise ValueError(f"v_max must be positive, got {v_max}")
    return ThresholdSchedule(tuple(v_max / 2 ** (i + 1) for i in range(n)))


@dataclass(frozen=True)
class ResidualReport:
    """Expected single-step residual of a schedule plus the value segments used."""

    expected_error: float
    segment_lefts: tuple[float, ...]


def expected_residual(schedule: ThresholdSchedule, v_max: float) -> ResidualReport:
    """Expected |V - output| for V uniform on [0, v_max], one step from rest.

    The representable outputs are the subset sums of the thresholds.  A
    membrane value is approximated by the largest representable value below
    it, so the expectation is the sum of half squared segment lengths,
    divided by v_max for the uniform density.  Requires the schedule to fit:
    sum(thresholds) <= v_max.
    """
    if v_max <= 0.0:
        raise ValueError(f"v_max must be positive, got {v_max}")
    ths = schedule.thresholds
    if len(ths) > _MAX_ENUMERATED:
        raise ValueError(f"refusing to enumerate 2^{len(ths)} subset sums")
    if sum(ths) > v_max + 1e-12:
        raise ValueError(
            f"schedule sums to {sum(ths)}, exceeding v_max={v_max}; residual model undefined"
        )
    sums = {0.0}
    for combo in itertools.chain.from_iterable(
        itertools.combinations(ths, k) for k in range(1, len(ths) + 1)
    ):
        sums.add(sum(combo))
    lefts = tuple(sorted(sums))
    edges = np.array(lefts + (float(v_max),))
    gaps = np.diff(edges)
    err = float(0.5 * np.sum(gaps * gaps) / v_max)
    return ResidualReport(expected_error=err, segment_lefts=lefts)


def brute_force_optimal(n: int, grid_step: float) -> tuple[ThresholdSchedule, float]:
    """Exhaustively search descending schedules on a grid for minimal residual.

    Candidates are strictly descending tuples of grid multiples in (0, 1)
    with total at most 1, scored by :func:`expected_residual` at v_max = 1.
    Only n in {1, 2} keeps the search space honest for a grid this fine.
    """
    if n not in (1, 2):
        raise ValueError(f"brute force supports n in {{1, 2}}, got {n}")
    if not 0.0 < grid_step <= 0.01 + 1e-15:
        raise ValueError(f"grid_step must be in (0, 0.01], got {grid_step}")
    steps = int(round(1.0 / grid_step))
    values = [i * grid_step for i in range(1, steps + 1)]
    best: tuple[ThresholdSchedule, float] | None = None
    if n == 1:
        candidates = ((v,) for v in values if v <= 1.0 + 1e-12)
    else:
        candidates = (
            (v1, v2)
            for v1 in values
            for v2 in values
            if v2 < v1 and v1 + v2 <= 1.0 + 1e-12
        )
    for cand in candidates:
        report = expected_residual(ThresholdSchedule(cand), 1.0)
        if best is None or report.expected_error < best[1]:
            best = (ThresholdSchedule(cand), report.expected_error)
    assert best is not None
    return best
