import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tshm import (
    CooTensor,
    HandshakeTimeout,
    PartitionPlan,
    PeerError,
    ProtocolError,
    ShmError,
    ShmRegion,
    ValidationError,
    attach_session,
    build_plan,
    cp_als,
    new_session_token,
    publish,
    split_parts,
)
from tshm.consumer import coordhash, valsum
from tshm.cpd import KruskalModel
from tshm.handshake import READY
from tshm.shm import region_path

from conftest import random_tensor


def two_box_diagonal_session():
    t = CooTensor((8, 6, 7),
                  np.array([0, 0, 0, 4, 3, 3], dtype=np.uint64),
                  np.array([2.0, 5.0]))
    plan = PartitionPlan.from_cuts(t, [(4,), (3,), (3,)])
    return t, plan


@pytest.fixture
def session_dir(tmp_path):
    return str(tmp_path)


def make_session(t, plan, session_dir):
    session = new_session_token()
    meta_path = os.path.join(session_dir, f"{session}.meta")
    return publish(t, plan, session, meta_path), meta_path


def run_consumer_module(meta_path, *extra):
    cmd = [sys.executable, "-m", "tshm.consumer_main", meta_path,
           "--timeout", "15", *extra]
    return subprocess.run(cmd, capture_output=True, text=True, timeout=120)


# -- publish -------------------------------------------------------------------


def test_publish_two_box_diagonal_layout(session_dir):
    t, plan = two_box_diagonal_session()
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        md = producer.metadata
        assert md.P == 8
        counts = [p.count for p in md.partitions]
        assert counts[0] == 1 and counts[7] == 1
        assert sum(counts) == 2
        assert all(p.capacity == 1 for p in md.partitions)
        assert producer.coords_view(0).tolist() == [[0, 0, 0]]
        assert producer.values_view(0).tolist() == [2.0]
        assert producer.coords_view(7).tolist() == [[4, 3, 3]]
        assert producer.values_view(7).tolist() == [5.0]
        assert producer.flag.status == READY
        assert os.path.exists(meta_path)


def test_publish_empty_tensor(session_dir):
    t = CooTensor((3, 3), np.empty(0, dtype=np.uint64), np.empty(0))
    plan = build_plan(t, 1)
    producer, _ = make_session(t, plan, session_dir)
    with producer:
        md = producer.metadata
        assert md.partitions[0].count == 0
        assert md.partitions[0].capacity == 1  # clamped to one slot
        region = producer.regions[(0, "vals")]
        assert region.byte_len >= 8
        assert producer.flag.status == READY


def test_publish_multiset_equality(session_dir, rng):
    t = random_tensor(rng, (10, 9, 8), 250, distinct=False)
    plan = build_plan(t, 4)
    producer, _ = make_session(t, plan, session_dir)
    with producer:
        rows = []
        for k in range(plan.P):
            count = producer.metadata.partitions[k].count
            coords = producer.coords_view(k)[:count]
            vals = producer.values_view(k)[:count]
            rows.extend(
                tuple(int(x) for x in coords[i]) + (float(vals[i]),)
                for i in range(count)
            )
        original = [
            tuple(int(x) for x in t.coords2d[i]) + (float(t.values[i]),)
            for i in range(t.nnz)
        ]
        assert sorted(rows) == sorted(original)


def test_publish_partition_order_is_input_order(session_dir):
    # two elements in the same partition keep their input order
    t = CooTensor((4,), np.array([1, 0], dtype=np.uint64), np.array([9.0, 8.0]))
    plan = build_plan(t, 1)
    producer, _ = make_session(t, plan, session_dir)
    with producer:
        assert producer.values_view(0).tolist() == [9.0, 8.0]
        assert producer.coords_view(0).reshape(-1).tolist() == [1, 0]


def test_publish_region_lengths_match_metadata(session_dir, rng):
    t = random_tensor(rng, (9, 9), 40)
    plan = build_plan(t, 4)
    producer, _ = make_session(t, plan, session_dir)
    with producer:
        d = t.order
        for p in producer.metadata.partitions:
            creg = ShmRegion.attach(p.coords_region)
            vreg = ShmRegion.attach(p.values_region)
            assert creg.byte_len == p.capacity * d * 8
            assert vreg.byte_len == p.capacity * 8
            creg.detach()
            vreg.detach()


def test_publish_rejects_foreign_plan(session_dir, rng):
    t = random_tensor(rng, (6, 6), 20)
    other = random_tensor(rng, (6, 6), 21)
    plan = build_plan(other, 2)
    with pytest.raises(ValueError, match="count mismatch"):
        publish(t, plan, new_session_token(),
                os.path.join(session_dir, "x.meta"))


def test_publish_name_collision_cleans_up(session_dir, rng):
    t = random_tensor(rng, (5, 5), 10)
    plan = build_plan(t, 2)
    session = new_session_token()
    # occupy one of the names the producer will want
    blocker = ShmRegion.create(f"/tshm-{session}-p1-coords", 8)
    try:
        with pytest.raises(ShmError):
            publish(t, plan, session, os.path.join(session_dir, "x.meta"))
        # everything the failed publish created must be gone again
        for leftover in (f"/tshm-{session}-flag", f"/tshm-{session}-p0-coords",
                         f"/tshm-{session}-p0-vals", f"/tshm-{session}-p1-vals"):
            assert not os.path.exists(region_path(leftover))
    finally:
        blocker.detach()
        ShmRegion.unlink(f"/tshm-{session}-p1-coords")


# -- attach / validation ---------------------------------------------------------


def test_attach_session_two_box_diagonal(session_dir):
    t, plan = two_box_diagonal_session()
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        with attach_session(meta_path, timeout=5) as consumer:
            assert len(consumer.views) == 8
            assert consumer.nnz == 2
            assert consumer.dims == (8, 6, 7)
            assert valsum(consumer.views) == 7.0
            # six of the eight partitions are empty; the kernels must not care
            res = consumer.cp_als(rank=1, iterations=2, seed=0)
            local = cp_als(split_parts(t, plan), t.dims, 1, 2, seed=0)
            assert res.model == local.model


def test_attach_width_mismatch_signals_error3(session_dir):
    t, plan = two_box_diagonal_session()
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        doctored = meta_path + ".doctored"
        with open(meta_path) as f:
            text = f.read().replace("index_width_bits=64", "index_width_bits=32")
        with open(doctored, "w") as f:
            f.write(text)
        with pytest.raises(ValidationError) as exc:
            attach_session(doctored, timeout=5)
        assert exc.value.code == 3
        assert producer.flag.status == 3  # ERROR
        assert producer.flag.error_code == 3


def test_attach_tampered_coordinate_signals_error1(session_dir):
    t, plan = two_box_diagonal_session()
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        coords = producer.coords_view(0)
        coords[0, 0] = 7  # outside partition 0's box (upper corner is 3,2,2)
        del coords
        with pytest.raises(ValidationError) as exc:
            attach_session(meta_path, timeout=5)
        assert exc.value.code == 1
        assert exc.value.partition == 0
        assert "partition 0" in str(exc.value)
        assert producer.flag.error_code == 1


def test_attach_missing_region_signals_error2(session_dir, rng):
    t = random_tensor(rng, (6, 6), 12)
    plan = build_plan(t, 2)
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        ShmRegion.unlink(producer.metadata.partitions[1].values_region)
        with pytest.raises(ValidationError) as exc:
            attach_session(meta_path, timeout=5)
        assert exc.value.code == 2


def test_attach_times_out_without_ready(session_dir):
    # a flag that never leaves INIT: build the session by hand
    t, plan = two_box_diagonal_session()
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        import struct
        struct.pack_into("<I", producer.flag.region.mm, 4, 0)  # force back to INIT
        with pytest.raises(HandshakeTimeout):
            attach_session(meta_path, timeout=0.2)


def test_attach_is_zero_copy_within_process(session_dir):
    t, plan = two_box_diagonal_session()
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        with attach_session(meta_path, timeout=5) as consumer:
            consumer.views[0].values[0] = 123.5
            assert producer.read_value(0, 0) == 123.5


# -- zero-copy across processes ----------------------------------------------------


MUTATOR = r"""
import sys
from tshm import attach_session
with attach_session(sys.argv[1], timeout=10) as s:
    s.views[0].values[0] = float(sys.argv[2])
print("mutated")
"""


def test_zero_copy_mutation_across_processes(session_dir):
    t, plan = two_box_diagonal_session()
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        assert producer.read_value(0, 0) == 2.0
        proc = subprocess.run(
            [sys.executable, "-c", MUTATOR, meta_path, "777.25"],
            capture_output=True, text=True, timeout=60)
        assert proc.returncode == 0, proc.stderr
        # observed through the producer's own mapping: no copy anywhere
        assert producer.read_value(0, 0) == 777.25


# -- finish / await_done -------------------------------------------------------------


def test_finish_roundtrips_model_in_process(session_dir, rng):
    t = random_tensor(rng, (6, 5, 4), 30)
    plan = build_plan(t, 2)
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        consumer = attach_session(meta_path, timeout=5)
        with consumer:
            res = consumer.cp_als(rank=2, iterations=3, seed=4)
            consumer.finish(res.model)
        model = producer.await_done(timeout=5)
        assert model == res.model


def test_finish_roundtrips_across_processes(session_dir, rng):
    t = random_tensor(rng, (7, 6, 5), 60)
    plan = build_plan(t, 4)
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        proc = run_consumer_module(meta_path, "--cp-rank", "2", "--iters", "3",
                                   "--seed", "11")
        assert proc.returncode == 0, proc.stderr
        stats = json.loads(proc.stdout.splitlines()[-1])
        model = producer.await_done(timeout=5)
        # identical cp_als in this process must produce the identical model
        local = cp_als(split_parts(t, plan), t.dims, 2, 3, seed=11)
        assert model == local.model
        assert stats["fit"] == pytest.approx(local.fit, abs=1e-15)
        assert stats["nnz"] == t.nnz


def test_finish_degenerate_model(session_dir):
    t = CooTensor((1,), np.array([0], dtype=np.uint64), np.array([4.0]))
    plan = build_plan(t, 1)
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        consumer = attach_session(meta_path, timeout=5)
        with consumer:
            model = KruskalModel(np.array([4.0]), [np.array([[1.0]])])
            consumer.finish(model)
        assert producer.await_done(timeout=5) == model


def test_finish_after_close_is_protocol_error(session_dir):
    t, plan = two_box_diagonal_session()
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        consumer = attach_session(meta_path, timeout=5)
        consumer.close()
        with pytest.raises(ProtocolError, match="closed"):
            consumer.finish(KruskalModel(np.ones(1), [np.ones((8, 1)),
                                                      np.ones((6, 1)),
                                                      np.ones((7, 1))]))


def test_consumer_fail_surfaces_as_peer_error(session_dir):
    t, plan = two_box_diagonal_session()
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        consumer = attach_session(meta_path, timeout=5)
        with consumer:
            consumer.fail(4)
        with pytest.raises(PeerError) as exc:
            producer.await_done(timeout=5)
        assert exc.value.code == 4


def test_await_done_timeout_keeps_session(session_dir):
    t, plan = two_box_diagonal_session()
    producer, meta_path = make_session(t, plan, session_dir)
    with producer:
        with pytest.raises(HandshakeTimeout):
            producer.await_done(timeout=0.05)
        # session still usable: a consumer can attach and finish
        consumer = attach_session(meta_path, timeout=5)
        with consumer:
            res = consumer.cp_als(rank=1, iterations=1, seed=0)
            consumer.finish(res.model)
        assert producer.await_done(timeout=5) == res.model


# -- teardown ---------------------------------------------------------------------


def test_teardown_removes_everything(session_dir):
    t, plan = two_box_diagonal_session()
    producer, meta_path = make_session(t, plan, session_dir)
    names = [p.coords_region for p in producer.metadata.partitions]
    names += [p.values_region for p in producer.metadata.partitions]
    names.append(producer.metadata.flag_region)
    producer.teardown()
    for name in names:
        with pytest.raises(ShmError):
            ShmRegion.attach(name)
    assert not os.path.exists(meta_path)
    producer.teardown()  # idempotent


def test_teardown_after_consumer_error(session_dir):
    t, plan = two_box_diagonal_session()
    producer, meta_path = make_session(t, plan, session_dir)
    consumer = attach_session(meta_path, timeout=5)
    with consumer:
        consumer.fail(1)
    producer.teardown()
    shm_dir = os.path.dirname(region_path("/x"))
    leftovers = [f for f in os.listdir(shm_dir)
                 if producer.session in f]
    assert leftovers == []


# -- checksums ----------------------------------------------------------------------


def test_valsum_and_coordhash_stable_under_partitioning(session_dir, rng):
    t = random_tensor(rng, (8, 8, 8), 120, distinct=False)
    for P in (1, 4):
        plan = build_plan(t, P)
        parts = split_parts(t, plan)
        assert valsum(parts) == pytest.approx(float(np.sum(t.values)), rel=1e-14)
        assert coordhash(parts) == coordhash(split_parts(t, build_plan(t, 2)))
