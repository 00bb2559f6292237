"""Deterministic stand-in for an external perception process."""
import json
import struct
import sys

stdin = sys.stdin.buffer
stdout = sys.stdout.buffer
region = None


def reply(obj, payload=b""):
    stdout.write((json.dumps(obj) + "\n").encode())
    stdout.write(payload)
    stdout.flush()


for line in stdin:
    req = json.loads(line)
    w, h = req["width"], req["height"]
    rgb = stdin.read(w * h * 3)
    if len(rgb) != w * h * 3:
        break
    op = req["op"]
    if req["frame_index"] == 99:
        reply({"ok": False, "error": "refusing frame 99"})
    elif op == "init":
        region = req["region"]
        reply({"ok": True})
    elif op == "track":
        x, y, bw, bh = region
        labels = bytearray(w * h)
        for r in range(h):
            for c in range(w):
                if x <= c < x + bw and y <= r < y + bh:
                    labels[r * w + c] = 1
                elif c >= w - 2:
                    labels[r * w + c] = 2
        reply({"ok": True}, bytes(labels))
    elif op == "depth":
        values = [float(r * w + c) + rgb[0] for r in range(h) for c in range(w)]
        reply({"ok": True}, struct.pack("<%df" % len(values), *values))
    elif op == "emotion":
        if req["region"][2] < 3:
            reply({"ok": True, "face": False})
        else:
            reply({"ok": True, "face": True, "confidences": [0, 0, 0, 0, 3, 1, 0, 0]})
    else:
        reply({"ok": False, "error": "unknown op " + op})
