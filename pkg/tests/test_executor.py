import queue
import threading
import time

import numpy as np
import pytest

from conftest import build_dataset
from virt4d import executor
from virt4d.errors import JobStateError, SchedulingError
from virt4d.executor import (CompletionEvent, InProcessPool, Job, JobStatus,
                             LocalityMap, PartialEvent, Task, WorkerSlot,
                             assign, cancel_job, execute_job, plan_tasks,
                             run_benchmark, sync_run)
from virt4d.kernels import AnalysisSpec

SUM = AnalysisSpec(variant="sum_frames")
DISK = AnalysisSpec(variant="mask_apply",
                    masks=({"kind": "disk", "cx": 3.5, "cy": 3.5, "r": 2.5},))


def make_job(small_dataset, spec=DISK):
    desc, ds_dir, values = small_dataset
    return Job(descriptor=desc, dataset_dir=str(ds_dir), spec=spec), values


class FakePool:
    """Slots only; used to exercise assignment rules without threads."""

    def __init__(self, slots):
        self.slots = slots
        self.completions = queue.Queue()

    def node_ids(self):
        return sorted({s.node_id for s in self.slots})


class TestStatusMachine:
    def test_lifecycle(self, small_dataset):
        job, _ = make_job(small_dataset)
        assert job.status is JobStatus.PENDING
        job.transition(JobStatus.RUNNING)
        job.transition(JobStatus.DONE)
        assert job.finished_at is not None

    @pytest.mark.parametrize("terminal", [JobStatus.DONE, JobStatus.CANCELLED,
                                          JobStatus.FAILED])
    def test_terminal_states_stick(self, small_dataset, terminal):
        job, _ = make_job(small_dataset)
        job.transition(JobStatus.RUNNING)
        job.transition(terminal)
        for target in JobStatus:
            with pytest.raises(JobStateError, match="illegal transition"):
                job.transition(target)

    def test_pending_cannot_finish_directly(self, small_dataset):
        job, _ = make_job(small_dataset)
        with pytest.raises(JobStateError):
            job.transition(JobStatus.DONE)

    def test_cancel_finished_job_rejected(self, small_dataset):
        job, _ = make_job(small_dataset)
        job.transition(JobStatus.RUNNING)
        job.transition(JobStatus.DONE)
        with pytest.raises(JobStateError, match="already finished"):
            cancel_job(job)

    def test_cancel_pending_job(self, small_dataset):
        job, _ = make_job(small_dataset)
        cancel_job(job)
        assert job.status is JobStatus.CANCELLED
        cancel_job(job)  # idempotent


class TestPlanTasks:
    def test_one_task_per_partition(self, small_dataset):
        job, _ = make_job(small_dataset)
        tasks = plan_tasks(job)
        assert [t.partition_index for t in tasks] == [0, 1, 2, 3]
        assert all(t.job_id == job.job_id for t in tasks)

    def test_deterministic(self, small_dataset):
        job, _ = make_job(small_dataset)
        assert plan_tasks(job) == plan_tasks(job)


class TestAssign:
    def test_prefers_holder(self):
        pool = FakePool([WorkerSlot("a", 0), WorkerSlot("b", 0)])
        locality = LocalityMap({5: {"b"}})
        task = Task(job_id="j", partition_index=5)
        idx = assign(task, locality, pool)
        assert pool.slots[idx].node_id == "b"
        assert task.non_local is False

    def test_least_loaded_holder_wins(self):
        pool = FakePool([WorkerSlot("a", 0, busy=True), WorkerSlot("a", 1),
                         WorkerSlot("b", 0)])
        locality = LocalityMap({0: {"a", "b"}})
        task = Task(job_id="j", partition_index=0)
        assign(task, locality, pool)
        assert task.node == "b"  # a carries one running task

    def test_tie_breaks_to_lowest_node_id(self):
        pool = FakePool([WorkerSlot("b", 0), WorkerSlot("a", 0)])
        locality = LocalityMap({0: {"a", "b"}})
        task = Task(job_id="j", partition_index=0)
        assign(task, locality, pool)
        assert task.node == "a"

    def test_falls_back_non_local(self):
        pool = FakePool([WorkerSlot("a", 0, busy=True), WorkerSlot("b", 0)])
        locality = LocalityMap({0: {"a"}})
        task = Task(job_id="j", partition_index=0)
        assign(task, locality, pool)
        assert task.node == "b" and task.non_local is True

    def test_no_holders_means_local_flag_clear(self):
        pool = FakePool([WorkerSlot("a", 0)])
        task = Task(job_id="j", partition_index=0)
        assign(task, LocalityMap(), pool)
        assert task.non_local is False

    def test_no_free_slot(self):
        pool = FakePool([WorkerSlot("a", 0, busy=True)])
        with pytest.raises(SchedulingError, match="free"):
            assign(Task(job_id="j", partition_index=0), None, pool)

    def test_empty_pool(self):
        with pytest.raises(SchedulingError, match="empty pool"):
            assign(Task(job_id="j", partition_index=0), None, FakePool([]))


class TestExecuteJob:
    def test_result_matches_sync(self, small_dataset):
        desc, ds_dir, values = small_dataset
        grid = sync_run(ds_dir, desc, SUM)
        assert np.allclose(grid.sig_image().reshape(-1),
                           values.astype(np.float32).sum(axis=0), rtol=1e-6)

    def test_deterministic_across_worker_counts(self, small_dataset):
        desc, ds_dir, _ = small_dataset
        results = [sync_run(ds_dir, desc, DISK, workers=w).values
                   for w in (1, 2, 3)]
        assert np.array_equal(results[0], results[1])
        assert np.array_equal(results[0], results[2])

    def test_partials_emitted_exactly_once(self, small_dataset):
        job, _ = make_job(small_dataset)
        events = []
        pool = InProcessPool(workers=2)
        try:
            execute_job(job, pool, progress=events.append)
        finally:
            pool.close()
        partials = [e for e in events if isinstance(e, PartialEvent)]
        completes = [e for e in events if isinstance(e, CompletionEvent)]
        assert sorted(e.partition_index for e in partials) == [0, 1, 2, 3]
        assert len(completes) == 1
        assert completes[0].non_local_fraction == 0.0

    def test_partial_frame_ranges_match_partitions(self, small_dataset):
        job, _ = make_job(small_dataset)
        events = []
        pool = InProcessPool(workers=1)
        try:
            execute_job(job, pool, progress=events.append)
        finally:
            pool.close()
        by_part = {e.partition_index: e for e in events
                   if isinstance(e, PartialEvent)}
        for p in job.descriptor.partitions:
            ev = by_part[p.index]
            assert (ev.frame_start, ev.frame_count) == (p.frame_start,
                                                        p.frame_count)
            assert ev.data.shape == (p.frame_count, 1)

    def test_rerun_rejected(self, small_dataset):
        job, _ = make_job(small_dataset)
        pool = InProcessPool(workers=1)
        try:
            execute_job(job, pool)
            with pytest.raises(JobStateError, match="not pending"):
                execute_job(job, pool)
        finally:
            pool.close()

    def test_worker_failure_fails_job(self, small_dataset):
        desc, ds_dir, _ = small_dataset
        part_path = ds_dir / desc.partitions[2].file_path
        part_path.unlink()
        job = Job(descriptor=desc, dataset_dir=str(ds_dir), spec=SUM)
        pool = InProcessPool(workers=2)
        try:
            with pytest.raises(JobStateError, match="partition 2"):
                execute_job(job, pool)
        finally:
            pool.close()
        assert job.status is JobStatus.FAILED
        assert "partition 2" in job.error

    def test_cancel_before_start(self, small_dataset):
        job, _ = make_job(small_dataset)
        cancel_job(job)
        pool = InProcessPool(workers=1)
        try:
            assert execute_job(job, pool) is None
        finally:
            pool.close()
        assert job.status is JobStatus.CANCELLED

    def test_cancel_mid_run_emits_no_further_partials(self, tmp_path):
        desc, ds_dir, _ = build_dataset(tmp_path, (16, 16), (16, 16),
                                        target_partition_bytes=16 * 1024)
        assert len(desc.partitions) == 16
        job = Job(descriptor=desc, dataset_dir=str(ds_dir), spec=DISK)
        seen = []

        def progress(ev):
            seen.append(ev)
            if len(seen) == 2:
                cancel_job(job)
        pool = InProcessPool(workers=1)
        try:
            assert execute_job(job, pool, progress=progress) is None
        finally:
            pool.close()
        assert job.status is JobStatus.CANCELLED
        partials = [e for e in seen if isinstance(e, PartialEvent)]
        assert len(partials) <= 3  # one in-flight completion may race the flag
        assert not any(isinstance(e, CompletionEvent) for e in seen)

    def test_cancel_from_other_thread(self, tmp_path):
        desc, ds_dir, _ = build_dataset(tmp_path, (32, 8), (16, 16),
                                        target_partition_bytes=8 * 1024)
        job = Job(descriptor=desc, dataset_dir=str(ds_dir), spec=SUM)
        pool = InProcessPool(workers=2)

        def try_cancel():
            try:
                cancel_job(job)
            except JobStateError:
                pass  # job beat the timer
        canceller = threading.Timer(0.01, try_cancel)
        canceller.start()
        try:
            result = execute_job(job, pool)
        finally:
            canceller.join()
            pool.close()
        if result is None:
            assert job.status is JobStatus.CANCELLED
        else:  # job finished before the timer fired
            assert job.status is JobStatus.DONE


class TestBenchmark:
    def test_report_bookkeeping(self, small_dataset):
        desc, ds_dir, _ = small_dataset
        report = run_benchmark(ds_dir, desc, SUM, "buffered", [1, 2])
        assert report["partitions"] == 4
        assert report["backend"] == "buffered"
        assert report["cache_state"] == "warm"
        assert [r["workers"] for r in report["runs"]] == [1, 2]
        for r in report["runs"]:
            assert r["wall_s"] > 0 and r["mib_per_s"] > 0
            assert r["first_partial_s"] is not None
        assert report["runs"][0]["speedup_vs_1"] == 1.0

    def test_calibration_bounds(self):
        target = executor.calibrate_partition_bytes(time_budget_s=0.05)
        assert 1024 * 1024 <= target <= 512 * 1024 * 1024
