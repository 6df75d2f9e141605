#!/usr/bin/env python3
"""Independent Modbus/TCP request decoder.

A deliberately separate implementation (plain struct unpacking, no shared
code with the C++ library) used to cross-check decoder test vectors and to
sanity-check capture fixtures. Prints a JSON object per input hex frame.
"""
import json
import struct
import sys

FC_NAMES = {
    1: "read_coils",
    2: "read_discrete_inputs",
    3: "read_holding_registers",
    4: "read_input_registers",
    5: "write_single_coil",
    6: "write_single_register",
    15: "write_multiple_coils",
    16: "write_multiple_registers",
}


def decode(frame: bytes):
    if len(frame) < 8:
        return {"error": "too short"}
    transaction, protocol, length, unit, fc = struct.unpack(">HHHBB", frame[:8])
    out = {
        "transaction": transaction,
        "protocol": protocol,
        "mbap_length": length,
        "unit": unit,
        "function_code": fc,
        "fc_name": FC_NAMES.get(fc, "unknown"),
        "actual_rest": len(frame) - 6,  # bytes following the length field
    }
    body = frame[8:]
    if fc in (1, 2, 3, 4) and len(body) >= 4:
        addr, qty = struct.unpack(">HH", body[:4])
        out["start_address"] = addr
        out["length"] = qty
    elif fc in (5, 6) and len(body) >= 4:
        addr, val = struct.unpack(">HH", body[:4])
        out["start_address"] = addr
        out["value"] = val
    elif fc in (15, 16) and len(body) >= 5:
        addr, qty, bc = struct.unpack(">HHB", body[:5])
        out["start_address"] = addr
        out["length"] = qty
        out["byte_count"] = bc
        out["data_bytes"] = len(body) - 5
    return out


if __name__ == "__main__":
    for arg in sys.argv[1:]:
        frame = bytes.fromhex(arg)
        print(json.dumps(decode(frame)))
