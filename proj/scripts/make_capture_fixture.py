#!/usr/bin/env python3
"""Generate the bundled capture fixtures.

Writes classic-pcap files (Ethernet/IPv4/TCP) plus a hex-lines variant:

  fixtures/captures/modbus_sample.pcap   50 Modbus/TCP exchanges on port 502
  fixtures/captures/modbus_sample.hex    the same 50 requests, one hex line each
  fixtures/captures/mixed_ports.pcap     Modbus on 502 interleaved with port-80 noise

Deterministic (fixed RNG seed) so the fixtures can be regenerated bit-identically.
"""
import random
import struct
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "fixtures" / "captures"

CLIENT_IP = (10, 0, 0, 2)
SERVER_IP = (10, 0, 0, 10)
CLIENT_MAC = bytes.fromhex("02aabbcc0001")
SERVER_MAC = bytes.fromhex("02aabbcc0002")


def ip_checksum(header: bytes) -> int:
    s = 0
    for i in range(0, len(header), 2):
        s += (header[i] << 8) | header[i + 1]
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return (~s) & 0xFFFF


def tcp_checksum(src, dst, segment: bytes) -> int:
    pseudo = bytes(src) + bytes(dst) + struct.pack(">BBH", 0, 6, len(segment))
    data = pseudo + segment
    if len(data) % 2:
        data += b"\x00"
    s = 0
    for i in range(0, len(data), 2):
        s += (data[i] << 8) | data[i + 1]
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return (~s) & 0xFFFF


def packet(src_ip, dst_ip, src_mac, dst_mac, sport, dport, seq, ack, payload):
    tcp = struct.pack(">HHIIBBHHH", sport, dport, seq, ack, 5 << 4, 0x18, 8192, 0, 0) + payload
    csum = tcp_checksum(src_ip, dst_ip, tcp)
    tcp = tcp[:16] + struct.pack(">H", csum) + tcp[18:]
    total = 20 + len(tcp)
    ip = struct.pack(">BBHHHBBH", 0x45, 0, total, 0x1234, 0x4000, 64, 6, 0) + bytes(src_ip) + bytes(dst_ip)
    ip = ip[:10] + struct.pack(">H", ip_checksum(ip)) + ip[12:]
    eth = dst_mac + src_mac + struct.pack(">H", 0x0800)
    return eth + ip + tcp


def pcap_header():
    return struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)


def record(ts, pkt):
    sec = int(ts)
    usec = int(round((ts - sec) * 1e6))
    return struct.pack("<IIII", sec, usec, len(pkt), len(pkt)) + pkt


def mbap(transaction, unit, pdu):
    return struct.pack(">HHHB", transaction, 0, len(pdu) + 1, unit) + pdu


def make_requests(rng):
    """50 request/response payload pairs with diverse field values."""
    reqs = []
    fcs = [3, 1, 4, 16, 3, 6, 2, 15, 3, 5, 4, 16, 1, 3, 6, 3, 2, 15, 4, 3,
           5, 16, 3, 1, 6, 3, 4, 15, 2, 3, 16, 5, 3, 4, 1, 6, 3, 2, 15, 3,
           16, 3, 4, 5, 1, 3, 6]
    addrs = [0, 1, 17, 300, 4096, 10000, 65000, 7, 128, 2048]
    for i, fc in enumerate(fcs):
        tid = 1 + i
        unit = [1, 1, 1, 1, 0, 1, 17, 1, 1, 250][i % 10]
        addr = addrs[i % len(addrs)]
        if fc in (1, 2):
            qty = [1, 8, 64, 200, 1000, 1999][i % 6]
            pdu = struct.pack(">BHH", fc, addr, qty)
        elif fc in (3, 4):
            qty = [1, 2, 10, 60, 100, 125][i % 6]
            pdu = struct.pack(">BHH", fc, addr, qty)
        elif fc == 5:
            val = 0xFF00 if i % 2 == 0 else 0x0000
            pdu = struct.pack(">BHH", fc, addr, val)
        elif fc == 6:
            val = [0, 7, 250, 300, 40000][i % 5]
            pdu = struct.pack(">BHH", fc, addr, val)
        elif fc == 15:
            qty = [9, 16, 520, 1200][i % 4]
            bc = (qty + 7) // 8
            data = bytes(rng.randrange(256) for _ in range(bc))
            pdu = struct.pack(">BHHB", fc, addr, qty, bc) + data
        else:  # 16
            qty = [1, 2, 4, 80, 123][i % 5]
            bc = qty * 2
            data = bytes(rng.randrange(256) for _ in range(bc))
            pdu = struct.pack(">BHHB", fc, addr, qty, bc) + data
        reqs.append((tid, unit, pdu))
    # three duplicates of earlier requests (new transaction ids) for dedup coverage
    for src, tid in ((4, 60), (9, 61), (21, 62)):
        _, unit, pdu = reqs[src]
        reqs.append((tid, unit, pdu))
    assert len(reqs) == 50
    return reqs


def response_for(pdu):
    fc = pdu[0]
    if fc in (1, 2):
        qty = struct.unpack(">H", pdu[3:5])[0]
        bc = (qty + 7) // 8
        return struct.pack(">BB", fc, bc) + bytes(bc)
    if fc in (3, 4):
        qty = struct.unpack(">H", pdu[3:5])[0]
        return struct.pack(">BB", fc, qty * 2) + bytes(qty * 2)
    if fc in (5, 6):
        return pdu
    return pdu[:5]  # echo addr+count for 15/16


def write_modbus_sample():
    rng = random.Random(2024)
    reqs = make_requests(rng)
    ts = 1700000000.0
    out = bytearray(pcap_header())
    hex_lines = []
    seq_c, seq_s = 1000, 5000
    for tid, unit, pdu in reqs:
        req = mbap(tid, unit, pdu)
        rsp = mbap(tid, unit, response_for(pdu))
        out += record(ts, packet(CLIENT_IP, SERVER_IP, CLIENT_MAC, SERVER_MAC,
                                 49152, 502, seq_c, seq_s, req))
        ts += 0.010
        out += record(ts, packet(SERVER_IP, CLIENT_IP, SERVER_MAC, CLIENT_MAC,
                                 502, 49152, seq_s, seq_c + len(req), rsp))
        ts += 0.015
        seq_c += len(req)
        seq_s += len(rsp)
        hex_lines.append(req.hex())
    (OUT / "modbus_sample.pcap").write_bytes(out)
    (OUT / "modbus_sample.hex").write_text(
        "# one request frame per line, lowercase hex\n" + "\n".join(hex_lines) + "\n")
    return len(reqs)


def write_mixed_ports():
    rng = random.Random(7)
    reqs = make_requests(rng)[:12]
    ts = 1700001000.0
    out = bytearray(pcap_header())
    seq_c = 2000
    for i, (tid, unit, pdu) in enumerate(reqs):
        req = mbap(tid, unit, pdu)
        out += record(ts, packet(CLIENT_IP, SERVER_IP, CLIENT_MAC, SERVER_MAC,
                                 49153, 502, seq_c, 1, req))
        ts += 0.01
        if i % 2 == 0:
            http = b"GET /index.html HTTP/1.1\r\nHost: plant\r\n\r\n"
            out += record(ts, packet(CLIENT_IP, SERVER_IP, CLIENT_MAC, SERVER_MAC,
                                     49154, 80, seq_c, 1, http))
            ts += 0.01
        seq_c += len(req)
    (OUT / "mixed_ports.pcap").write_bytes(out)
    return len(reqs)


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    n = write_modbus_sample()
    m = write_mixed_ports()
    print(f"modbus_sample.pcap: {n} requests (+responses); mixed_ports.pcap: {m} on 502 + noise")
