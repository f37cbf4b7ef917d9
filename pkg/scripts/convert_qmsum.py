#!/usr/bin/env python3
"""Convert QMSum-style meeting JSON into the corpus JSONL this package reads.

Expected input schema (one meeting per line in a .jsonl file, or one
meeting per .json file in a directory):

    {"meeting_transcripts": [{"speaker": "...", "content": "..."}, ...],
     "general_query_list":  [{"query": "...", "answer": "..."}, ...],
     "specific_query_list": [{"query": "...", "answer": "..."}, ...]}

The source dataset does not embed a domain label, so pass --domain for
each input (its three domains correspond to product, academic, and
committee meetings). Output schema:

    {"id": ..., "domain": ..., "turns": [[speaker, utterance], ...],
     "query_pairs": [[query, summary], ...]}

    python scripts/convert_qmsum.py --input ami.jsonl --domain product \
        --input icsi.jsonl --domain academic --out corpus.jsonl
"""

import argparse
import json
import os
import sys


def iter_meetings(path):
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            if name.endswith(".json"):
                with open(os.path.join(path, name), encoding="utf-8") as f:
                    yield os.path.splitext(name)[0], json.load(f)
    else:
        with open(path, encoding="utf-8") as f:
            for i, line in enumerate(f):
                line = line.strip()
                if line:
                    yield f"{os.path.basename(path)}-{i:04d}", json.loads(line)


def convert(meeting_id, obj, domain):
    turns = []
    for seg in obj.get("meeting_transcripts", []):
        speaker = (seg.get("speaker") or "speaker").strip()
        content = (seg.get("content") or "").strip()
        if content:
            turns.append([speaker, content])
    pairs = []
    for key in ("general_query_list", "specific_query_list"):
        for q in obj.get(key, []) or []:
            query = (q.get("query") or "").strip()
            answer = q.get("answer")
            if isinstance(answer, list):
                answer = " ".join(str(a) for a in answer)
            answer = (answer or "").strip()
            if query and answer:
                pairs.append([query, answer])
    if not turns or not pairs:
        return None
    return {"id": f"{domain}-{meeting_id}", "domain": domain,
            "turns": turns, "query_pairs": pairs}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--input", action="append", required=True,
                    help="QMSum-style .jsonl file or directory of .json files")
    ap.add_argument("--domain", action="append", required=True,
                    choices=("product", "academic", "committee"),
                    help="domain label for the corresponding --input")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    if len(args.input) != len(args.domain):
        ap.error("need one --domain per --input")

    written = skipped = 0
    with open(args.out, "w", encoding="utf-8") as out:
        for path, domain in zip(args.input, args.domain):
            for meeting_id, obj in iter_meetings(path):
                record = convert(meeting_id, obj, domain)
                if record is None:
                    skipped += 1
                    continue
                out.write(json.dumps(record) + "\n")
                written += 1
    print(f"wrote {written} meetings to {args.out} ({skipped} skipped: "
          f"no usable turns or query pairs)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
