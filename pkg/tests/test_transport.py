import hashlib
import socket
import threading

import pytest

from stencilpipe.grid import splitmix64_unit
from stencilpipe.transport import (
    FRAME_HEADER,
    InProcessFabric,
    ProtocolError,
    TransportError,
    create_topology,
    pack_frame,
    parse_rankfile,
    tcp_endpoint,
    unpack_frame,
)


def _free_ports(count):
    socks, ports = [], []
    for _ in range(count):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        ports.append(s.getsockname()[1])
        socks.append(s)
    for s in socks:
        s.close()
    return ports


def _tcp_pair():
    ports = _free_ports(2)
    addrs = [("127.0.0.1", ports[0]), ("127.0.0.1", ports[1])]
    eps = [None, None]

    def build(r):
        eps[r] = tcp_endpoint(r, addrs)

    threads = [threading.Thread(target=build, args=(r,)) for r in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return eps


def test_frame_header_is_sixteen_bytes():
    assert FRAME_HEADER.size == 16


def test_frame_roundtrip():
    payload = b"\x01\x02" * 10
    frame = pack_frame(2, 1, 77, payload)
    assert len(frame) == 16 + len(payload)
    assert unpack_frame(frame) == (2, 1, 77, payload)


def test_frame_length_mismatch_detected():
    frame = pack_frame(0, 0, 1, b"abcd")
    with pytest.raises(ProtocolError):
        unpack_frame(frame[:-1])


def test_single_rank_is_trivially_connected():
    (ep,) = create_topology(1, "inproc")
    ep.barrier(timeout=1.0)
    assert ep.ranks == 1


def test_eight_inprocess_ranks_all_pairs_reachable():
    eps = create_topology(8, "inproc")
    assert len(eps) == 8

    def ping(ep):
        for other in range(8):
            if other == ep.rank:
                continue
            msg = bytes([ep.rank, other])
            back = ep.sendrecv(other, msg, 2)
            assert back == bytes([other, ep.rank])

    threads = [threading.Thread(target=ping, args=(ep,)) for ep in eps]
    for t in threads:
        t.start()
    for t in threads:
        t.join()


def test_inproc_zero_length_payload():
    eps = create_topology(2, "inproc")
    out = {}

    def go(r):
        out[r] = eps[r].sendrecv(1 - r, b"", 0)

    ts = [threading.Thread(target=go, args=(r,)) for r in range(2)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert out == {0: b"", 1: b""}


def test_inproc_length_mismatch_is_protocol_error():
    eps = create_topology(2, "inproc")
    res = {}

    def a():
        try:
            eps[0].sendrecv(1, b"12345", 3)
        except ProtocolError as exc:
            res["err"] = exc

    def b():
        eps[1].sendrecv(0, b"12345", 5)

    ts = [threading.Thread(target=a), threading.Thread(target=b)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert "err" in res


def test_inproc_ordering_between_fixed_pair():
    fabric = InProcessFabric(2)
    a, b = fabric.endpoints()
    for i in range(50):
        fabric._queues[(0, 1)].put(bytes([i]))
    got = [fabric._queues[(0, 1)].get() for _ in range(50)]
    assert got == [bytes([i]) for i in range(50)]


def test_tcp_echo_roundtrip_on_loopback():
    eps = _tcp_pair()
    results = {}

    def go(r):
        pattern = splitmix64_unit(0, 8192, seed=r).tobytes()
        back = eps[r].sendrecv(1 - r, pattern, len(pattern))
        results[r] = (pattern, back)

    ts = [threading.Thread(target=go, args=(r,)) for r in range(2)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    for r in range(2):
        mine, theirs = results[r]
        other_sent = results[1 - r][0]
        assert theirs == other_sent
    for ep in eps:
        ep.close()


def test_tcp_simultaneous_sendrecv_stress_never_deadlocks():
    eps = _tcp_pair()
    iterations = 10_000
    sizes = [0, 1, 17, 512, 4096]
    failures = []

    def go(r):
        try:
            for i in range(iterations):
                size = sizes[i % len(sizes)]
                out = bytes([(r + i) % 256]) * size
                back = eps[r].sendrecv(1 - r, out, size, timeout=30.0)
                assert back == bytes([((1 - r) + i) % 256]) * size
        except BaseException as exc:
            failures.append(exc)

    ts = [threading.Thread(target=go, args=(r,)) for r in range(2)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert not failures
    for ep in eps:
        ep.close()


def test_tcp_large_payload_integrity():
    eps = _tcp_pair()
    n = 1 << 21  # 2 MiB each way, forces interleaved send/recv
    res = {}

    def go(r):
        data = splitmix64_unit(0, n // 8, seed=100 + r).tobytes()
        back = eps[r].sendrecv(1 - r, data, n)
        res[r] = hashlib.sha256(back).hexdigest()

    ts = [threading.Thread(target=go, args=(r,)) for r in range(2)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    expect = {r: hashlib.sha256(
        splitmix64_unit(0, n // 8, seed=100 + (1 - r)).tobytes()).hexdigest()
        for r in range(2)}
    assert res == expect
    for ep in eps:
        ep.close()


def test_rankfile_parsing():
    entries = parse_rankfile("# comment\n0 127.0.0.1 4000\n1 127.0.0.1 4001\n")
    assert entries == [("127.0.0.1", 4000), ("127.0.0.1", 4001)]
    with pytest.raises(TransportError):
        parse_rankfile("0 h 1\n2 h 2\n")  # not dense
    with pytest.raises(TransportError):
        parse_rankfile("0 h\n")


def test_tcp_connect_timeout_names_offender():
    ports = _free_ports(2)
    addrs = [("127.0.0.1", ports[0]), ("127.0.0.1", ports[1])]
    with pytest.raises(TransportError) as exc:
        tcp_endpoint(1, addrs, connect_timeout=0.3)  # rank 0 never shows up
    assert "0" in str(exc.value)


def test_create_topology_rejects_unknown_backend():
    with pytest.raises(ValueError):
        create_topology(2, "carrier-pigeon")
