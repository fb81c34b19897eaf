#
# Copyright (C) 2025-2026
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <http://www.gnu.org/licenses/>.
#

import hashlib
import json
import logging
import os
import os.path as op
import re

import pandas as pd
from filelock import FileLock

from . import __version__


def thread_count():
    """Worker thread cap, from FUSELVM_THREADS when set."""
    value = os.environ.get("FUSELVM_THREADS")
    if value:
        try:
            n = int(value)
        except ValueError:
            logging.warning(f"Ignoring non-integer FUSELVM_THREADS={value!r}")
        else:
            return max(n, 1)
    return os.cpu_count() or 1


def flags_hash(flags):
    blob = json.dumps(flags, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def metadata_header(seed, flags):
    """CSV comment line identifying the run that produced a file."""
    return f"# fuselvm {__version__} seed={seed} flags={flags_hash(flags)}"


def write_csv(path, frame, header=None):
    with open(path, "w", encoding="utf-8", newline="") as f:
        if header:
            f.write(header + "\n")
        frame.to_csv(f, index=False)
    logging.info(f"Wrote {path}")


def write_matrix_csv(path, matrix, labels, header=None):
    frame = pd.DataFrame(matrix, columns=labels)
    frame.insert(0, "vertex", labels)
    write_csv(path, frame, header)


def output_lock(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return FileLock(op.join(out_dir, ".fuselvm.lock"), timeout=1)


_ranks_re = re.compile(r"^(\d+):(\d+)(?::(\d+))?$")


def parse_ranks(spec):
    """`"2:12"` (inclusive), `"5:50:5"` or a comma list `"2,4,8"`."""
    match = _ranks_re.match(spec.strip())
    if match:
        start, stop, step = int(match.group(1)), int(match.group(2)), int(match.group(3) or 1)
        if step < 1 or stop < start:
            raise ValueError(f"invalid rank range {spec!r}")
        return list(range(start, stop + 1, step))
    try:
        ranks = [int(r) for r in spec.split(",") if r.strip()]
    except ValueError:
        raise ValueError(f"invalid rank list {spec!r}")
    if not ranks:
        raise ValueError(f"invalid rank list {spec!r}")
    return ranks
