from __future__ import annotations

import threading
import time

from provtrace.reservation import ExclusivityMonitor, Mode, Reservation


def soon(seconds: float = 1.0) -> float:
    return time.monotonic() + seconds


def test_shared_holders_coexist():
    r = Reservation()
    assert r.acquire(Mode.SHARED, soon())
    assert r.acquire(Mode.SHARED, soon())
    assert r.state() == (2, False)
    r.release(Mode.SHARED)
    r.release(Mode.SHARED)
    assert r.holders == 0


def test_exclusive_blocks_everyone_until_deadline():
    r = Reservation()
    assert r.acquire(Mode.EXCLUSIVE, soon())
    t0 = time.monotonic()
    assert not r.acquire(Mode.SHARED, soon(0.05))
    assert not r.acquire(Mode.EXCLUSIVE, soon(0.05))
    assert time.monotonic() - t0 >= 0.09
    r.release(Mode.EXCLUSIVE)
    assert r.acquire(Mode.EXCLUSIVE, soon())


def test_past_deadline_fails_immediately_when_busy():
    r = Reservation()
    r.acquire(Mode.SHARED, soon())
    assert not r.acquire(Mode.EXCLUSIVE, time.monotonic() - 1)
    # A free reservation is granted regardless of the deadline.
    r.release(Mode.SHARED)
    assert r.acquire(Mode.EXCLUSIVE, time.monotonic() - 1)


def test_release_from_another_thread():
    r = Reservation()
    r.acquire(Mode.EXCLUSIVE, soon())
    t = threading.Thread(target=r.release, args=(Mode.EXCLUSIVE,))
    t.start()
    t.join()
    assert r.holders == 0


def test_waiting_writer_holds_back_new_readers():
    r = Reservation()
    r.acquire(Mode.SHARED, soon())
    got = []
    w = threading.Thread(target=lambda: got.append(r.acquire(Mode.EXCLUSIVE, soon(2))))
    w.start()
    time.sleep(0.05)
    assert not r.acquire(Mode.SHARED, soon(0.05))
    r.release(Mode.SHARED)
    w.join()
    assert got == [True]
    r.release(Mode.EXCLUSIVE)


def test_timed_out_writer_lets_readers_in():
    r = Reservation()
    r.acquire(Mode.SHARED, soon())
    results = []
    w = threading.Thread(target=lambda: results.append(r.acquire(Mode.EXCLUSIVE, soon(0.1))))
    w.start()
    time.sleep(0.02)
    reader = threading.Thread(target=lambda: results.append(r.acquire(Mode.SHARED, soon(2))))
    reader.start()
    w.join()
    reader.join()
    assert results == [False, True]


def test_monitor_counts_bad_release():
    m = ExclusivityMonitor()
    r = Reservation(m)
    r.acquire(Mode.EXCLUSIVE, soon())
    r.release(Mode.EXCLUSIVE)
    assert m.violations == 0 and m.checks == 2
    r.release(Mode.EXCLUSIVE)
    assert m.violations == 1


def test_many_threads_never_overlap():
    m = ExclusivityMonitor()
    r = Reservation(m)
    inside = {"readers": 0, "writers": 0, "bad": 0}
    lock = threading.Lock()

    def worker(i: int) -> None:
        for k in range(50):
            mode = Mode.EXCLUSIVE if (i + k) % 3 == 0 else Mode.SHARED
            assert r.acquire(mode, soon(10))
            with lock:
                key = "writers" if mode is Mode.EXCLUSIVE else "readers"
                inside[key] += 1
                if inside["writers"] > 1 or (inside["writers"] and inside["readers"]):
                    inside["bad"] += 1
            time.sleep(0.0001)
            with lock:
                inside[key] -= 1
            r.release(mode)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert inside["bad"] == 0
    assert m.violations == 0
    assert r.holders == 0
