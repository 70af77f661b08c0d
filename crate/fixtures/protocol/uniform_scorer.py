"""Minimal external scorer speaking protocol version 1 on stdin/stdout.

Scores every UTF-8 byte at -ln 256. With --fail-prefix P, requests whose
prefix starts with P get a scorer error instead.
"""
import argparse
import json
import math
import sys


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", default="uniform-py")
    ap.add_argument("--fail-prefix")
    args = ap.parse_args()
    out = sys.stdout
    out.write(json.dumps({"v": 1, "model": args.model, "max_context_bytes": 4096}) + "\n")
    out.flush()
    for line in sys.stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        if args.fail_prefix and req["prefix"].startswith(args.fail_prefix):
            resp = {"id": req["id"], "error": {"code": "scorer", "message": "refused"}}
        else:
            p = len(req["prefix"].encode("utf-8"))
            c = len(req["continuation"].encode("utf-8"))
            resp = {
                "id": req["id"],
                "prefix_lp": -math.log(256.0) * p,
                "cont_lp": -math.log(256.0) * c,
                "prefix_tokens": p,
                "cont_tokens": c,
            }
        out.write(json.dumps(resp) + "\n")
        out.flush()


if __name__ == "__main__":
    main()
