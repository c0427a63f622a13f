"""Line-delimited run traces.

One JSON object per line.  The first line is a schema-versioned header, the
last (for runs that finished cleanly) a footer with ledger totals.  Exact
rationals are ``"p/q"`` strings and nodes are slash-separated index strings
(``""`` is the root).  A ``.gz`` suffix selects gzip with a zeroed timestamp
so identical runs stay byte-identical.
"""

from __future__ import annotations

import gzip
import io
import json
from dataclasses import dataclass

from gmpy2 import mpq

from .mass import Transfer
from .rational import fmt, parse
from .tree import ConstructionParams, MetricTree, node_str, parse_node

SCHEMA = "hkserver-trace/1"


class TraceError(ValueError):
    pass


def open_text(path, mode: str = "r"):
    path = str(path)
    if path.endswith(".gz"):
        if "w" in mode:
            raw = open(path, "wb")
            gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
            return _Closing(io.TextIOWrapper(gz, encoding="utf-8", newline="\n"), raw)
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, mode, encoding="utf-8", newline="\n")


class _Closing:
    def __init__(self, text, raw):
        self.text, self.raw = text, raw

    def write(self, s):
        return self.text.write(s)

    def close(self):
        self.text.close()
        self.raw.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def dumps(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"))


class TraceWriter:
    def __init__(self, path):
        self.path = path
        self.fh = open_text(path, "w") if path is not None else None
        self.lines = 0

    def write(self, record: dict) -> None:
        if self.fh is not None:
            self.fh.write(dumps(record) + "\n")
        self.lines += 1

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()
            self.fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path, strict: bool = False):
    """Yield the records of a trace.

    A final line without its newline is a torn write from a truncated run;
    it ends the stream quietly unless ``strict`` is set.
    """
    with open_text(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            torn = not line.endswith("\n")
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                if torn and not strict:
                    return
                raise TraceError(f"{path}:{lineno}: unparseable record ({exc.msg})") from None


def has_torn_tail(path) -> bool:
    with open_text(path, "r") as fh:
        last = ""
        for last in fh:
            pass
    return bool(last) and not last.endswith("\n")


def encode_transfers(transfers) -> list:
    return [[node_str(t.src), node_str(t.dst), fmt(t.amount)] for t in transfers]


def decode_transfers(items) -> list:
    try:
        return [Transfer(parse_node(s), parse_node(d), parse(a)) for s, d, a in items]
    except (TypeError, ValueError) as exc:
        raise TraceError(f"bad transfer list: {exc}") from None


def encode_levels(levels: dict) -> dict:
    return {str(k): fmt(v) for k, v in sorted(levels.items())}


def decode_levels(levels: dict) -> dict:
    return {int(k): parse(v) for k, v in levels.items()}


@dataclass
class TraceSetup:
    """Everything a checker needs from a trace header."""

    mode: str
    params: ConstructionParams
    tree: MetricTree
    k_online: mpq
    adv_servers: int
    header: dict

    @property
    def epoch_mode(self) -> bool:
        return self.mode in ("theorem", "infinite")


def setup_from_header(header: dict) -> TraceSetup:
    if header.get("type") != "header":
        raise TraceError("first record is not a header")
    if header.get("schema") != SCHEMA:
        raise TraceError(f"unsupported schema {header.get('schema')!r}")
    try:
        p = header["params"]
        params = ConstructionParams(
            rho=parse(p["rho"]),
            depth=int(p["depth"]),
            b=int(p["b"]),
            h=int(p["h"]),
            k=parse(p["k"]),
            epsilon=parse(p["epsilon"]),
            scale=parse(p["scale"]),
            paper_schedule=bool(p["paper_schedule"]),
        )
        tree = MetricTree(int(p["tree_depth"]), params.scale)
        return TraceSetup(
            mode=header["config"]["mode"],
            params=params,
            tree=tree,
            k_online=parse(p["k_online"]),
            adv_servers=int(p["adv_servers"]),
            header=header,
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise TraceError(f"malformed header: {exc}") from None


def params_record(params: ConstructionParams, tree_depth: int, k_online, adv_servers: int) -> dict:
    return {
        "rho": fmt(params.rho),
        "depth": params.depth,
        "b": params.b,
        "h": params.h,
        "k": fmt(params.k),
        "epsilon": fmt(params.epsilon),
        "scale": fmt(params.scale),
        "paper_schedule": params.paper_schedule,
        "tree_depth": tree_depth,
        "k_online": fmt(k_online),
        "adv_servers": adv_servers,
    }
