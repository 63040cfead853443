"""In-process HTTP stand-in for an external rewrite model.

Speaks the same POST {template_id, fill} -> {text} contract the
augmenter uses, performing the requested phrase replacements with the
same samplers, so the endpoint code path can run end to end with no
real model behind it. Determinism: one rng stream per request counter.
"""

from __future__ import annotations

import argparse
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np

from .lexicon import (ConceptLexicon, default_lexicon,
                      sample_open_set_replacement, scan_mentions)
from .textcore import words_of


def _split_list(value: str) -> list[str]:
    return [v for v in value.split(", ") if v]


def rewrite_text(lexicon: ConceptLexicon, template_id: str, fill: dict,
                 rng: np.random.Generator) -> str:
    """Apply the replacements a rewrite prompt asks for, literally."""
    text = fill["text"]
    targets = _split_list(fill.get("targets", ""))
    if not targets:
        raise ValueError("no targets to replace")
    forbidden = set(_split_list(fill.get("forbidden", "")))
    if template_id == "closed_set":
        repl = _split_list(fill.get("replacements", ""))
        if len(repl) != len(targets):
            raise ValueError(
                f"{len(repl)} replacements for {len(targets)} targets")
        replacement = dict(zip(targets, repl))
    elif template_id == "open_set":
        used = forbidden | set(targets)
        replacement = {}
        for name in targets:
            if name not in lexicon:
                raise ValueError(f"unknown concept {name!r}")
            try:
                got = sample_open_set_replacement(
                    lexicon, lexicon.concepts[name], used, rng)
            except ValueError:
                # nothing legal to say: echo the caption, caller rejects it
                return text
            replacement[name] = got.name
            used.add(got.name)
    else:
        raise ValueError(f"unsupported template {template_id!r}")
    words = words_of(text)
    out: list[str] = []
    cursor = 0
    for start, end, name in scan_mentions(words, targets):
        out.extend(words[cursor:start])
        out.extend(replacement[name].split())
        cursor = end
    out.extend(words[cursor:])
    return " ".join(out)


class MockRewriteHandler(BaseHTTPRequestHandler):
    lexicon: ConceptLexicon | None = None
    seed = 0
    counter = 0

    def do_POST(self):
        cls = type(self)
        try:
            n = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(n))
            rng = np.random.default_rng([cls.seed, cls.counter])
            cls.counter += 1
            text = rewrite_text(cls.lexicon, payload["template_id"],
                                payload["fill"], rng)
            body, code = json.dumps({"text": text}).encode(), 200
        except (KeyError, ValueError, TypeError) as e:
            body, code = json.dumps({"error": str(e)}).encode(), 400
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


def start_mock_llm(lexicon: ConceptLexicon | None = None, seed: int = 0,
                   host: str = "127.0.0.1", port: int = 0):
    """Serve on a background thread; returns (server, url)."""
    handler = type("Handler", (MockRewriteHandler,), {
        "lexicon": lexicon if lexicon is not None else default_lexicon(),
        "seed": seed,
        "counter": 0,
    })
    server = HTTPServer((host, port), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, f"http://{host}:{server.server_address[1]}/"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="mock rewrite endpoint")
    p.add_argument("--lexicon", default="", help="lexicon JSON (default: built-in)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8040)
    args = p.parse_args(argv)
    lex = ConceptLexicon.load(args.lexicon) if args.lexicon else None
    server, url = start_mock_llm(lex, seed=args.seed, host=args.host, port=args.port)
    print(f"serving on {url}")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
