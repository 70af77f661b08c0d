"""Writes the uniform-byte golden transcript.

Success lines are computed here from the closed form (-ln 256 per UTF-8
byte), independently of the Rust implementation. Error lines carry the
server's fixed messages.
"""
import json
import math

REQUESTS = [
    {"id": "g01", "prefix": "ab cd", "context": None, "continuation": ""},
    {"id": "g02", "prefix": "Café au lait.", "context": "Older news.", "continuation": " Très bon café."},
    {"id": "g03", "prefix": "Oil rose.", "context": "Gas prices climbed.", "continuation": ""},
    {"id": "g04", "prefix": "A.", "context": None, "continuation": " " + "word " * 60},
    "{\"id\":\"g05\",\"prefix\":",
    "{\"id\":\"g06\",\"prefix\":7,\"context\":null,\"continuation\":\"\"}",
    {"id": "g01", "prefix": "again", "context": None, "continuation": "x"},
    {"id": "g08", "prefix": "", "context": None, "continuation": "orphan"},
    "",
    {"id": "g09", "prefix": "He said \"no\".\nThen left.", "context": "tab\there", "continuation": " \\ done"},
    {"id": "é-10", "prefix": "東京 rose.", "context": None, "continuation": " 上海 fell."},
]

MALFORMED = {
    "g05": ("", "EOF while parsing a value at line 1 column 21"),
    "g06": ("g06", "invalid type: integer `7`, expected a string at line 1 column 22"),
}


def fmt(v):
    mantissa, exp = ("%.16e" % v).split("e")
    return f"{mantissa}e{int(exp)}"


def dumps(v):
    return json.dumps(v, ensure_ascii=False, separators=(",", ":"))


def lp(s):
    return 0.0 - math.log(256.0) * len(s.encode("utf-8"))


def main():
    reqs, resps = [], []
    resps.append(dumps({"v": 1, "model": "uniform-byte", "max_context_bytes": 1 << 20}))
    seen = set()
    for r in REQUESTS:
        if isinstance(r, str):
            reqs.append(r)
            if not r:
                continue
            for key, (ident, message) in MALFORMED.items():
                if f'"{key}"' in r:
                    resps.append(f'{{"id":{dumps(ident)},"error":{{"code":"malformed","message":{dumps(message)}}}}}')
            continue
        reqs.append(dumps(r))
        if r["id"] in seen:
            resps.append(f'{{"id":{dumps(r["id"])},"error":{{"code":"duplicate_id","message":"request id already used"}}}}')
            continue
        seen.add(r["id"])
        if not r["prefix"]:
            resps.append(f'{{"id":{dumps(r["id"])},"error":{{"code":"invalid","message":"empty prefix"}}}}')
            continue
        p, c = r["prefix"], r["continuation"]
        resps.append(
            f'{{"id":{dumps(r["id"])},"prefix_lp":{fmt(lp(p))},"cont_lp":{fmt(lp(c))},'
            f'"prefix_tokens":{len(p.encode())},"cont_tokens":{len(c.encode())}}}'
        )
    with open("golden_requests.jsonl", "w", encoding="utf-8") as f:
        f.write("\n".join(reqs) + "\n")
    with open("golden_uniform_responses.jsonl", "w", encoding="utf-8") as f:
        f.write("\n".join(resps) + "\n")


if __name__ == "__main__":
    main()
