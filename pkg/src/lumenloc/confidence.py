"""Confidence buffer and train/test phase alternation.

Each tested frame's inlier count is compared against ``mu - k * sigma`` of
the recent confident counts.  Confident frames join the FIFO buffer;
uncertain ones (including solver failures) are counted, and once more than
``uncertain_trigger`` have accumulated the loop switches to training on the
most recent frames before testing resumes.
"""

from __future__ import annotations

import enum
import math
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from .geometry import CameraIntrinsics
from .pose_solver import LocalizationFailure, PoseEstimate, RansacConfig, estimate_pose


class Phase(enum.Enum):
    TRAINING = "Training"
    TESTING = "Testing"


class PhaseError(RuntimeError):
    """Operation not allowed in the current phase."""


class TrainerError(RuntimeError):
    """The online-training hook failed; the loop cannot continue."""


@dataclass(frozen=True)
class ConfidencePolicy:
    buffer_capacity: int = 50
    sigma_multiplier: float = 2.0
    uncertain_trigger: int = 20
    warmup_min: int = 10
    counting: str = "cumulative"  # or "consecutive"
    clear_on_retrain: bool = True
    confident_at_mean: bool = True  # a count equal to mu passes even when k*sigma == 0

    def __post_init__(self):
        if not self.buffer_capacity >= self.warmup_min >= 1:
            raise ValueError("need buffer_capacity >= warmup_min >= 1")
        if self.uncertain_trigger < 1:
            raise ValueError("uncertain_trigger must be >= 1")
        if self.sigma_multiplier < 0:
            raise ValueError("sigma_multiplier must be non-negative")
        if self.counting not in ("cumulative", "consecutive"):
            raise ValueError("counting must be 'cumulative' or 'consecutive'")


@dataclass(frozen=True)
class ConfidenceState:
    buffer: Tuple[int, ...] = ()
    uncertain_count: int = 0
    phase: Phase = Phase.TESTING


@dataclass(frozen=True)
class FrameVerdict:
    confident: bool
    mu: float
    sigma: float
    threshold: float  # nan during warmup
    triggered_retrain: bool
    inlier_count: Optional[int] = None  # None for a solver failure
    uncertain_count: int = 0  # after this frame


def buffer_statistics(buffer: Tuple[int, ...]) -> Tuple[float, float]:
    """Mean and population standard deviation (nan for an empty buffer)."""
    if not buffer:
        return math.nan, math.nan
    a = np.asarray(buffer, dtype=float)
    return float(a.mean()), float(a.std())


def observe(state: ConfidenceState, policy: ConfidencePolicy, inlier_count: Optional[int]) -> Tuple[ConfidenceState, FrameVerdict]:
    """Advance the gate by one tested frame; ``None`` marks a solver failure."""
    if state.phase is not Phase.TESTING:
        raise PhaseError("observe() is only valid while testing")
    buf = state.buffer
    mu, sigma = buffer_statistics(buf)
    if len(buf) < policy.warmup_min:
        threshold = math.nan
        confident = inlier_count is not None
    else:
        threshold = mu - policy.sigma_multiplier * sigma
        confident = inlier_count is not None and (
            inlier_count > threshold or (policy.confident_at_mean and inlier_count >= mu)
        )

    triggered = False
    if confident:
        buf = (buf + (int(inlier_count),))[-policy.buffer_capacity :]
        uncertain = 0 if policy.counting == "consecutive" else state.uncertain_count
        new = ConfidenceState(buf, uncertain, Phase.TESTING)
    else:
        uncertain = state.uncertain_count + 1
        if uncertain > policy.uncertain_trigger:
            triggered = True
            new = ConfidenceState(buf, 0, Phase.TRAINING)
        else:
            new = ConfidenceState(buf, uncertain, Phase.TESTING)
    verdict = FrameVerdict(confident, mu, sigma, threshold, triggered, inlier_count, new.uncertain_count)
    return new, verdict


def complete_training(state: ConfidenceState, keep_buffer: bool = False) -> ConfidenceState:
    """Leave the training phase with a fresh (or, optionally, retained) buffer."""
    if state.phase is not Phase.TRAINING:
        raise PhaseError("complete_training() is only valid while training")
    return ConfidenceState(state.buffer if keep_buffer else (), 0, Phase.TESTING)


# --- the segment loop ------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseEvent:
    """One phase transition.  Verdict fields describe the triggering frame
    (absent for the initial bootstrap and for training completion)."""

    frame_index: int
    phase: Phase
    inlier_count: Optional[int] = None
    confident: Optional[bool] = None
    mu: float = math.nan
    sigma: float = math.nan
    threshold: float = math.nan

    def line(self) -> str:
        ic = "-" if self.inlier_count is None else str(self.inlier_count)
        conf = "-" if self.confident is None else str(int(self.confident))
        return f"{self.frame_index} {self.phase.value} {ic} {conf} {self.mu!r} {self.sigma!r} {self.threshold!r}"


@dataclass(frozen=True)
class TrainingRequest:
    """Snapshot handed to the trainer hook."""

    reason: str  # "bootstrap" or "retrain"
    trigger_frame: Optional[int]
    frame_indices: Tuple[int, ...]
    frames: Tuple[Any, ...]


@dataclass(frozen=True, eq=False)
class FrameRecord:
    index: int
    phase: Phase  # phase the frame was processed in
    estimate: Optional[PoseEstimate]
    failure: Optional[str]
    verdict: Optional[FrameVerdict]  # None while training (parallel mode)
    timings: dict = field(default_factory=dict)

    @property
    def inlier_count(self) -> Optional[int]:
        return None if self.estimate is None else self.estimate.inlier_count


Estimator = Callable[[Any], PoseEstimate]
TrainerHook = Callable[[TrainingRequest], Any]


class SegmentLoop:
    """Drives testing frames through the solver and the confidence gate.

    ``estimator`` maps a frame to a :class:`PoseEstimate` (raising
    :class:`LocalizationFailure` for a gap).  In synchronous mode the trainer
    hook runs to completion before the next frame; in parallel mode it runs
    on a worker thread while frames keep being localised with
    ``training_estimator`` and are not fed to the gate.
    """

    def __init__(
        self,
        estimator: Estimator,
        trainer: Optional[TrainerHook] = None,
        policy: ConfidencePolicy = ConfidencePolicy(),
        parallel: bool = False,
        training_estimator: Optional[Estimator] = None,
        bootstrap: bool = True,
    ):
        self.estimator = estimator
        self.training_estimator = training_estimator or estimator
        self.trainer = trainer or (lambda request: None)
        self.policy = policy
        self.parallel = parallel
        self.bootstrap = bootstrap
        self.state = ConfidenceState()
        self.phase_log: List[PhaseEvent] = []
        self.training_requests: List[TrainingRequest] = []

    def _localize(self, estimator: Estimator, frame):
        t0 = time.perf_counter()
        try:
            est, failure = estimator(frame), None
        except LocalizationFailure as exc:
            est, failure = None, exc.reason
        return est, failure, time.perf_counter() - t0

    def _train(self, request: TrainingRequest):
        self.training_requests.append(request)
        try:
            self.trainer(request)
        except Exception as exc:
            raise TrainerError(f"trainer hook failed ({request.reason}): {exc}") from exc

    def run(self, frames: Iterable) -> Iterator[FrameRecord]:
        policy = self.policy
        recent: List[Tuple[int, Any]] = []
        pool = ThreadPoolExecutor(max_workers=1) if self.parallel else None
        pending: Optional[Future] = None
        try:
            if self.bootstrap:
                self.phase_log.append(PhaseEvent(0, Phase.TRAINING))
                self._train(TrainingRequest("bootstrap", None, (), ()))
                self.phase_log.append(PhaseEvent(0, Phase.TESTING))
            index = -1
            for index, frame in enumerate(frames):
                recent.append((index, frame))
                if len(recent) > policy.buffer_capacity:
                    recent.pop(0)
                if pending is not None and pending.done():
                    pending.result()  # re-raises TrainerError
                    pending = None
                    self.state = complete_training(self.state, not policy.clear_on_retrain)
                    self.phase_log.append(PhaseEvent(index, Phase.TESTING))

                if self.state.phase is Phase.TRAINING:
                    est, failure, dt = self._localize(self.training_estimator, frame)
                    yield FrameRecord(index, Phase.TRAINING, est, failure, None, {"solver": dt})
                    continue

                est, failure, dt = self._localize(self.estimator, frame)
                t0 = time.perf_counter()
                count = None if est is None else int(est.inlier_count)
                self.state, verdict = observe(self.state, policy, count)
                dt_conf = time.perf_counter() - t0
                yield FrameRecord(index, Phase.TESTING, est, failure, verdict, {"solver": dt, "confidence": dt_conf})

                if verdict.triggered_retrain:
                    snap = tuple(recent)
                    request = TrainingRequest(
                        "retrain", index, tuple(i for i, _ in snap), tuple(f for _, f in snap)
                    )
                    self.phase_log.append(
                        PhaseEvent(
                            index + 1, Phase.TRAINING, count, verdict.confident, verdict.mu, verdict.sigma, verdict.threshold
                        )
                    )
                    if pool is None:
                        self._train(request)
                        self.state = complete_training(self.state, not policy.clear_on_retrain)
                        self.phase_log.append(PhaseEvent(index + 1, Phase.TESTING))
                    else:
                        pending = pool.submit(self._train, request)
            if pending is not None:
                pending.result()
                pending = None
                self.state = complete_training(self.state, not policy.clear_on_retrain)
                self.phase_log.append(PhaseEvent(index + 1, Phase.TESTING))
        finally:
            if pool is not None:
                pool.shutdown(wait=True)

    def transitions(self) -> List[Tuple[int, Phase]]:
        return [(e.frame_index, e.phase) for e in self.phase_log]


def run_segment_loop(
    frames: Iterable,
    intrinsics: CameraIntrinsics,
    policy: ConfidencePolicy = ConfidencePolicy(),
    ransac: RansacConfig = RansacConfig(),
    trainer: Optional[TrainerHook] = None,
    parallel: bool = False,
) -> Tuple[List[FrameRecord], List[PhaseEvent]]:
    """Run the loop over scene-coordinate maps and collect every record.

    While a parallel retrain is pending, frames are localised without the
    refinement step.
    """
    loop = SegmentLoop(
        lambda m: estimate_pose(intrinsics, m, ransac),
        trainer,
        policy,
        parallel,
        training_estimator=lambda m: estimate_pose(intrinsics, m, replace(ransac, refine=False)),
    )
    records = list(loop.run(frames))
    return records, loop.phase_log


def write_phase_log(path, events: Iterable[PhaseEvent]) -> None:
    with open(path, "w") as fh:
        fh.write("# frame_index phase inlier_count confident mu sigma threshold\n")
        for e in events:
            fh.write(e.line() + "\n")
