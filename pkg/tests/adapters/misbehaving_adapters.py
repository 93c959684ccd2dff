"""Test adapters exercising protocol failure modes; mode comes from argv[1].

Modes: bad_dims, slow, error, wrong_id, bad_json, bad_handshake, oversized.
"""
import json
import struct
import sys
import time


def write_map(path, kind_code, height, width, value):
    payload = struct.pack("<f", value) * (height * width)
    with open(path, "wb") as fh:
        fh.write(b"HMF1" + struct.pack("<BII", kind_code, height, width) + payload)


def main():
    mode = sys.argv[1]
    if mode == "bad_handshake":
        print(json.dumps({"proto": "bogus/9", "name": "bad"}), flush=True)
        sys.stdin.readline()
        return
    print(json.dumps({"proto": "heatnav/1", "name": mode}), flush=True)
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        rid = req["id"]
        if mode == "slow":
            time.sleep(30.0)
            continue
        if mode == "error":
            print(json.dumps({"id": rid, "error": "cannot answer"}), flush=True)
            continue
        if mode == "bad_json":
            print("this is not json", flush=True)
            continue
        if mode == "wrong_id":
            nav, fac = f"n{rid}.hmf", f"f{rid}.hmf"
            write_map(nav, 0, req["height"], req["width"], 0.25)
            write_map(fac, 1, req["height"], req["width"], 0.25)
            print(json.dumps({"id": rid + 1, "nav": nav, "fac": fac}), flush=True)
            continue
        if mode == "bad_dims":
            nav, fac = f"n{rid}.hmf", f"f{rid}.hmf"
            write_map(nav, 0, 2, 2, 0.25)
            write_map(fac, 1, 2, 2, 0.25)
            print(json.dumps({"id": rid, "nav": nav, "fac": fac}), flush=True)
            continue
        if mode == "oversized":
            nav, fac = f"n{rid}.hmf", f"f{rid}.hmf"
            with open(nav, "wb") as fh:
                fh.write(b"HMF1" + struct.pack("<BII", 0, 1, 1) + struct.pack("<f", 1.5))
            write_map(fac, 1, req["height"], req["width"], 0.25)
            print(json.dumps({"id": rid, "nav": nav, "fac": fac}), flush=True)
            continue
        raise SystemExit(f"unknown mode {mode}")


if __name__ == "__main__":
    main()
