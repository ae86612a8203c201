import json
import socket
import struct
import threading

import pytest

from arqkey.errors import ProtocolViolation, ReceiveTimeout, SocketError
from arqkey.pipeline import read_log, write_log
from arqkey.protocol import (
    BobConfig,
    FitSummary,
    IndexAnnouncement,
    KeyPacket,
    accept_datagrams,
    alice_generate_burst,
    bob_process_burst,
    derive_key,
    payload_store,
)
from arqkey.regularize import regularize_and_classify
from arqkey import transport

SID = 0xFEEDFACE12345678
LOCAL = "127.0.0.1"


def run_pair(packets, send_gap, arq_rtt=0.008):
    udp = transport.bind_udp(LOCAL, 0)
    listener = socket.create_server((LOCAL, 0))
    box = {}

    def bob():
        try:
            box["bob"] = transport.serve_once(udp, listener, arq_rtt, timeout=10)
        except Exception as exc:  # surfaced in the main thread
            box["error"] = exc

    thread = threading.Thread(target=bob)
    thread.start()
    try:
        with transport.connect_control(LOCAL, listener.getsockname()[1]) as control:
            alice = transport.run_alice(packets, (LOCAL, udp.getsockname()[1]), control, send_gap)
    finally:
        thread.join(30)
        udp.close()
        listener.close()
    if "error" in box:
        raise box["error"]
    return alice, box["bob"]


class TestUdp:
    def test_single_packet_round_trip(self):
        packet = alice_generate_burst(1, SID, seed=0)[0]
        with transport.bind_udp(LOCAL, 0) as rx:
            transport.send_burst_udp([packet], rx.getsockname(), 0.001)
            raw = transport.receive_raw_udp(rx, 1, 0.001, timeout=2)
        assert len(raw) == 1 and len(raw[0][0]) == 52
        assert KeyPacket.decode(raw[0][0]) == packet

    def test_loopback_schedule(self):
        packets = alice_generate_burst(100, SID, seed=1)
        with transport.bind_udp(LOCAL, 0) as rx:
            thread = threading.Thread(target=transport.send_burst_udp, args=(packets, rx.getsockname(), 0.01))
            thread.start()
            received = transport.receive_burst_udp(rx, SID, 100, 0.01, timeout=5)
            thread.join()
        assert [p.index for p in received] == list(range(1, 101))
        fit = regularize_and_classify([(p.index, p.arrival) for p in received], 0.008)
        assert fit.gap == pytest.approx(0.01, rel=0.02)

    def test_duplicate_keeps_first(self):
        packet = alice_generate_burst(2, SID, seed=2)
        with transport.bind_udp(LOCAL, 0) as rx:
            with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as tx:
                for data in (packet[0].encode(), packet[0].encode(), packet[1].encode()):
                    tx.sendto(data, rx.getsockname())
            received = transport.receive_burst_udp(rx, SID, 3, 0.01, timeout=2)
        assert [p.index for p in received] == [1, 2]
        assert received[0].arrival < received[1].arrival

    def test_unreachable(self):
        packets = alice_generate_burst(50, SID, seed=3)
        with pytest.raises(SocketError):
            transport.send_burst_udp(packets, ("256.1.1.1", 9), 0.001)
        # closed loopback port: ICMP port-unreachable surfaces on a later send
        probe = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        probe.bind((LOCAL, 0))
        port = probe.getsockname()[1]
        probe.close()
        with pytest.raises(SocketError):
            transport.send_burst_udp(packets, (LOCAL, port), 0.001)

    def test_gap_floor(self):
        with pytest.raises(ValueError):
            transport.send_burst_udp([], (LOCAL, 9), 0.0005)

    def test_receive_timeout(self):
        with transport.bind_udp(LOCAL, 0) as rx:
            with pytest.raises(ReceiveTimeout):
                transport.receive_raw_udp(rx, 5, 0.01, timeout=0.2)


class TestPublicChannel:
    def test_announcement_round_trip(self):
        ann = IndexAnnouncement(SID, (1, 4, 9), FitSummary(2e7, 1e7, 3))
        a, b = socket.socketpair()
        with a, b:
            transport.send_announcement(a, ann)
            assert transport.recv_announcement(b) == ann

    def test_large_announcement(self):
        ann = IndexAnnouncement(SID, tuple(range(1, 100_001)))
        a, b = socket.socketpair()
        with a, b:
            sender = threading.Thread(target=transport.send_announcement, args=(a, ann))
            sender.start()
            got = transport.recv_announcement(b)
            sender.join()
        assert got == ann
        assert len(ann.to_json()) < transport.MAX_MESSAGE

    def test_malformed_json(self):
        a, b = socket.socketpair()
        with a, b:
            body = b"{not json"
            a.sendall(struct.pack(">I", len(body)) + body)
            with pytest.raises(ProtocolViolation):
                transport.recv_message(b)

    def test_wrong_type_and_oversize(self):
        a, b = socket.socketpair()
        with a, b:
            transport.send_message(a, {"type": "hello"})
            with pytest.raises(ProtocolViolation):
                transport.recv_message(b, expect="announce")
            a.sendall(struct.pack(">I", transport.MAX_MESSAGE + 1))
            with pytest.raises(ProtocolViolation):
                transport.recv_message(b)

    def test_closed_mid_message(self):
        a, b = socket.socketpair()
        with b:
            a.sendall(struct.pack(">I", 10) + b"{}")
            a.close()
            with pytest.raises(ProtocolViolation):
                transport.recv_message(b)


class TestSession:
    def test_thousand_packet_agreement(self, tmp_path):
        packets = alice_generate_burst(1000, SID, seed=4)
        alice, bob = run_pair(packets, 0.002)
        assert alice.key.key == bob.key.key
        assert alice.announcement == bob.announcement
        assert len(bob.received) == 1000
        assert len(bob.announcement.selected_indices) >= 900

        # replay the recorded datagrams through the same engine
        path = tmp_path / "raw.jsonl"
        write_log(transport.raw_to_records(bob.raw), path)
        raw = transport.records_to_raw(read_log(path))
        received = accept_datagrams(raw, SID)
        replayed = bob_process_burst(received, 0.008, BobConfig(burst_size=1000)).without(bob.slipped)
        assert replayed.selected_indices == bob.announcement.selected_indices
        assert derive_key("bob", replayed, payload_store(received)).key == bob.key.key

    def test_slipped_packets_are_struck(self):
        packets = alice_generate_burst(30, SID, seed=5)
        udp = transport.bind_udp(LOCAL, 0)
        alice_ctl, bob_ctl = socket.socketpair()
        box = {}
        thread = threading.Thread(target=lambda: box.setdefault("bob", transport.run_bob(udp, bob_ctl, 0.008, timeout=5)))
        with udp, alice_ctl, bob_ctl:
            thread.start()
            transport.send_message(alice_ctl, {"type": "hello", "session_id": SID, "n": 30, "send_gap": 0.002})
            transport.recv_message(alice_ctl, expect="ready")
            transport.send_burst_udp(packets, udp.getsockname(), 0.002)
            transport.send_message(alice_ctl, {"type": "burst_done", "slipped": [3, 17]})
            ann = transport.recv_announcement(alice_ctl)
            thread.join(10)
        assert not {3, 17} & set(ann.selected_indices)
        assert box["bob"].slipped == [3, 17]
        assert derive_key("alice", ann, payload_store(packets)).key == box["bob"].key.key

    def test_sender_stall_does_not_end_burst(self):
        packets = alice_generate_burst(20, SID, seed=6)
        alice_ctl, bob_ctl = socket.socketpair()

        def alice(dest):
            transport.send_burst_udp(packets[:10], dest, 0.002)
            threading.Event().wait(0.1)  # 50 send gaps of silence
            transport.send_burst_udp(packets[10:], dest, 0.002)
            transport.send_message(alice_ctl, {"type": "burst_done", "slipped": []})

        with transport.bind_udp(LOCAL, 0) as udp, alice_ctl, bob_ctl:
            thread = threading.Thread(target=alice, args=(udp.getsockname(),))
            thread.start()
            raw, done = transport.receive_until_done(udp, bob_ctl, 20, 0.002, timeout=5)
            thread.join()
        assert len(raw) == 20
        assert done == {"type": "burst_done", "slipped": []}

    def test_done_with_lost_tail(self):
        packets = alice_generate_burst(10, SID, seed=7)
        alice_ctl, bob_ctl = socket.socketpair()
        with transport.bind_udp(LOCAL, 0) as udp, alice_ctl, bob_ctl:
            transport.send_burst_udp(packets[:6], udp.getsockname(), 0.001)
            transport.send_message(alice_ctl, {"type": "burst_done", "slipped": []})
            raw, _ = transport.receive_until_done(udp, bob_ctl, 10, 0.001, timeout=5)
        assert len(raw) == 6

    def test_bad_hello(self):
        a, b = socket.socketpair()
        with a, b, transport.bind_udp(LOCAL, 0) as udp:
            transport.send_message(a, {"type": "hello", "n": "many"})
            with pytest.raises(ProtocolViolation):
                transport.run_bob(udp, b, 0.008, timeout=1)


def test_raw_records_round_trip():
    raw = [(b"\x00\x01", 1.25), (b"\xff", 2.5)]
    records = transport.raw_to_records(raw)
    assert json.loads(json.dumps(records)) == records
    assert transport.records_to_raw(records) == raw
