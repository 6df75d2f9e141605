#!/usr/bin/env python3
"""Independent pcap payload counter (oracle for capture-ingest tests).

Parses a classic pcap with plain struct unpacking and counts TCP payloads by
destination port. Shares no code with the C++ reader.
"""
import struct
import sys
from collections import Counter


def count(path):
    data = open(path, "rb").read()
    magic = struct.unpack("<I", data[:4])[0]
    if magic == 0xA1B2C3D4:
        end = "<"
    elif magic == 0xD4C3B2A1:
        end = ">"
    else:
        raise SystemExit("not a classic pcap")
    link = struct.unpack(end + "I", data[20:24])[0]
    assert link == 1, "expected Ethernet link type"
    off = 24
    by_port = Counter()
    while off + 16 <= len(data):
        _, _, incl, _ = struct.unpack(end + "IIII", data[off:off + 16])
        off += 16
        pkt = data[off:off + incl]
        off += incl
        if len(pkt) < 14 + 20 + 20:
            continue
        if struct.unpack(">H", pkt[12:14])[0] != 0x0800:
            continue
        ihl = (pkt[14] & 0x0F) * 4
        if pkt[14 + 9] != 6:
            continue
        tcp = pkt[14 + ihl:]
        if len(tcp) < 20:
            continue
        dport = struct.unpack(">H", tcp[2:4])[0]
        doff = (tcp[12] >> 4) * 4
        payload = tcp[doff:]
        if payload:
            by_port[dport] += 1
    return by_port


if __name__ == "__main__":
    for path in sys.argv[1:]:
        print(path, dict(count(path)))
