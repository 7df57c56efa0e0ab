"""
Shared helpers for the relpose scripts: error root, seeded random streams,
run timestamps, worker counts and small CSV/JSON writers.

All randomness in the repository flows through make_rng(), which builds a
numpy Generator on the counter-based Philox bit generator keyed by a
SeedSequence of (seed, *stream). A record, a RANSAC run or a training epoch
gets its own stream by passing its own stream identifiers, e.g.
make_rng(seed, "record", 17). Streams are therefore reproducible across
processes and independent of call order.
"""

import csv
import datetime
import hashlib
import json
import os

import numpy as np
import pytz

TIMEZONE = pytz.timezone(os.environ.get("RELPOSE_TZ", "UTC"))

ENV_THREADS = "RELPOSE_THREADS"


class RelPoseError(Exception):
    """Root of every error raised by the relpose modules."""

    module = "relpose"

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


def _stream_key(part):
    # strings are hashed so stream names stay stable across Python runs
    if isinstance(part, (int, np.integer)):
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed, *stream):
    """
    Builds an independent, reproducible random generator.

    :param seed: the run seed (non-negative integer)
    :param stream: extra identifiers (ints or strings) selecting a sub-stream
    :return: a numpy Generator backed by Philox
    """
    entropy = [int(seed)] + [_stream_key(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def get_time_now():
    return datetime.datetime.now(tz=TIMEZONE).strftime("%Y-%m-%d-%H-%M-%S")


def get_threads(threads=None):
    """
    Worker count: explicit value first, then RELPOSE_THREADS, then 1.
    """
    if threads:
        return max(1, int(threads))
    try:
        return max(1, int(os.environ.get(ENV_THREADS, "1")))
    except ValueError:
        return 1


def write_csv(path, header, rows):
    """
    Writes a list of dictionaries to a CSV file with the given header order.
    """
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path):
    with open(path, "r", newline="") as f:
        return list(csv.DictReader(f, delimiter=","))


def write_json(path, data):
    # sorted keys so identical runs give byte-identical files
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
