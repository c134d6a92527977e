"""Session fixture: one fully trained distillation lab shared by slow tests."""

import time
from dataclasses import dataclass

import pytest

from rollwin.bench import causal_config, train_causal_ode_student
from rollwin.distill import (
    LabConfig,
    distill_dmd,
    gen_dataset,
    lab_model_config,
    ode_backfill,
    ode_regress,
    train_teacher,
)
from rollwin.linalg import fold_seed
from rollwin.schedule import StreamConfig, build_schedule


@dataclass(frozen=True)
class TrainedLab:
    """Default-config pipeline artifacts plus wall-clock marks per stage."""

    cfg: StreamConfig
    lab: LabConfig
    train_ds: object
    eval_ds: object
    long_ds: object
    teacher: object
    pairs: list
    held_pairs: list
    student_ode: object
    dmd_students: tuple
    causal_student: object
    timings: dict


@pytest.fixture(scope="session")
def trained_lab():
    """Teacher, endpoint pairs, stage-1 student, five post-trained students.

    Built once at default configs; every stage is seeded so the artifacts are
    reproducible across runs.  The wall-clock marks feed the runtime budget
    check.
    """
    t0 = time.perf_counter()
    timings = {}
    lab = LabConfig()
    cfg = StreamConfig()
    sched = build_schedule(cfg)
    stage_times = tuple(sched.time_of(s) for s in range(1, cfg.L + 1))

    train_ds = gen_dataset(lab.n_clips, lab.frames_per_clip,
                           seed=fold_seed(0, "train-data"))
    eval_ds = gen_dataset(4, 96, seed=fold_seed(0, "eval-data"))
    long_ds = gen_dataset(2, 1536, seed=fold_seed(0, "eval-long"))
    timings["data"] = time.perf_counter() - t0

    mark = time.perf_counter()
    teacher, _ = train_teacher(
        lab_model_config(cfg), train_ds, lab.teacher_steps, 0,
        lr=lab.teacher_lr, momentum=lab.momentum, batch=lab.teacher_batch,
        clip_ids=lab.train_ids(), cfg=cfg,
    )
    timings["teacher"] = time.perf_counter() - mark

    mark = time.perf_counter()
    pairs = ode_backfill(
        teacher, train_ds, lab.n_pairs, lab.n_ode_steps, seed=0,
        stage_times=stage_times, clip_ids=lab.train_ids(), cfg=cfg,
    )
    timings["backfill"] = time.perf_counter() - mark
    held_pairs = ode_backfill(
        teacher, train_ds, 200, lab.n_ode_steps, seed=1,
        stage_times=stage_times, clip_ids=lab.heldout_ids(), cfg=cfg,
    )

    mark = time.perf_counter()
    student_ode, _ = ode_regress(
        teacher.copy(), pairs, train_ds, cfg, lab.stage1_steps, seed=0,
        lr=lab.stage1_lr, momentum=lab.momentum, batch=lab.stage1_batch,
    )
    timings["stage1"] = time.perf_counter() - mark

    dmd_students = []
    dmd_marks = []
    for s in range(5):
        mark = time.perf_counter()
        tuned, _, _ = distill_dmd(student_ode, teacher, train_ds, cfg, lab, s)
        dmd_marks.append(time.perf_counter() - mark)
        dmd_students.append(tuned)
    timings["dmd_each"] = tuple(dmd_marks)

    mark = time.perf_counter()
    causal_student, _ = train_causal_ode_student(
        teacher, train_ds, lab, causal_config(cfg), seed=0,
    )
    timings["causal"] = time.perf_counter() - mark

    timings["chain"] = (timings["teacher"] + timings["backfill"]
                        + timings["stage1"] + dmd_marks[0])
    timings["total"] = time.perf_counter() - t0
    return TrainedLab(
        cfg=cfg,
        lab=lab,
        train_ds=train_ds,
        eval_ds=eval_ds,
        long_ds=long_ds,
        teacher=teacher,
        pairs=pairs,
        held_pairs=held_pairs,
        student_ode=student_ode,
        dmd_students=tuple(dmd_students),
        causal_student=causal_student,
        timings=timings,
    )
