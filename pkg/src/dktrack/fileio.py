"""On-disk formats: binary PGM frames, CSV tables, JSON specs.

Frames are 8-bit binary PGM (P5, maxval 255), one file per frame named
``frame_00000.pgm`` onward.  Intensities are mapped from [0, 1] by rounding
to 255 levels on write and divided back on read.  Parsers are strict and
report the file and byte offset (or line) of the first problem.
"""
from __future__ import annotations

import csv
import json
import os
import re
from pathlib import Path

import numpy as np

FRAME_PATTERN = "frame_%05d.pgm"
FRAME_REGEX = re.compile(r"^frame_(\d{5})\.pgm$")

GROUND_TRUTH_HEADER = ["frame", "cx", "cy"]


class FormatError(ValueError):
    """Malformed input file; the message carries file and position."""


def write_pgm(path, image: np.ndarray) -> None:
    """Write one [0, 1] image as binary 8-bit PGM (clamping out-of-range)."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {image.shape}")
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM into a float image in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def fail(msg: str):
        raise FormatError(f"{path}: {msg} at byte offset {pos}")

    def skip_separators():
        nonlocal pos
        while pos < len(raw):
            ch = raw[pos : pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b""):
                    pos += 1
            else:
                break

    def read_token() -> bytes:
        nonlocal pos
        skip_separators()
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            fail("unexpected end of header")
        return raw[start:pos]

    if raw[:2] != b"P5":
        fail("not a binary PGM (missing P5 magic)")
    pos = 2
    dims = []
    for name in ("width", "height", "maxval"):
        token = read_token()
        if not token.isdigit():
            fail(f"invalid {name} {token!r}")
        dims.append(int(token))
    width, height, maxval = dims
    if width < 1 or height < 1:
        fail(f"invalid image size {width}x{height}")
    if maxval != 255:
        fail(f"unsupported maxval {maxval} (only 255)")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        fail("missing whitespace after maxval")
    pos += 1
    expected = width * height
    pixels = raw[pos : pos + expected]
    if len(pixels) < expected:
        pos = len(raw)
        fail(f"truncated pixel data ({len(pixels)} of {expected} bytes)")
    if len(raw) > pos + expected:
        pos = pos + expected
        fail("trailing bytes after pixel data")
    data = np.frombuffer(pixels, dtype=np.uint8).reshape((height, width))
    return data.astype(float) / 255.0


def write_frames(directory, frames: np.ndarray) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        write_pgm(directory / (FRAME_PATTERN % t), frame)


def read_frames(directory) -> np.ndarray:
    """Read all frame PGMs from a directory, in index order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"{directory}: not a directory")
    named = []
    for entry in sorted(os.listdir(directory)):
        m = FRAME_REGEX.match(entry)
        if m:
            named.append((int(m.group(1)), directory / entry))
    if not named:
        raise FormatError(f"{directory}: no frame_NNNNN.pgm files found")
    named.sort()
    frames = [read_pgm(p) for _, p in named]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FormatError(f"{directory}: frames disagree in size: {sorted(shapes)}")
    return np.stack(frames)


def write_ground_truth_csv(path, centres: np.ndarray) -> None:
    """Centres are (T, 2) in (row, col); the CSV stores cx = col, cy = row."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GROUND_TRUTH_HEADER)
        for t, (row, col) in enumerate(np.asarray(centres, dtype=float)):
            writer.writerow([t, repr(float(col)), repr(float(row))])


def read_ground_truth_csv(path) -> np.ndarray:
    """Returns (T, 2) centres in (row, col) order."""
    out = []
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != GROUND_TRUTH_HEADER:
            raise FormatError(f"{path}: expected header {GROUND_TRUTH_HEADER}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise FormatError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            try:
                _, cx, cy = (float(v) for v in row)
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
            out.append([cy, cx])
    return np.array(out).reshape(-1, 2)


def write_states_json(path, states: np.ndarray) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump({"states": np.asarray(states, dtype=float).tolist()}, fh)
        fh.write("\n")


def read_states_json(path) -> np.ndarray:
    data = load_json(path)
    if not isinstance(data, dict) or set(data) != {"states"}:
        raise FormatError(f"{path}: expected an object with a single 'states' key")
    return np.asarray(data["states"], dtype=float)


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(
            f"{path}: malformed JSON at byte offset {exc.pos}: {exc.msg}"
        ) from exc


def dump_json(path, data) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(data, fh, sort_keys=True)
        fh.write("\n")


def write_error_trace_csv(path, rows: list[tuple]) -> None:
    """Rows of (t, err, std1, std2, std3, method, seed)."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "err", "std1", "std2", "std3", "method", "seed"])
        for t, err, s1, s2, s3, method, seed in rows:
            writer.writerow(
                [t, repr(float(err)), repr(float(s1)), repr(float(s2)), repr(float(s3)), method, seed]
            )


def read_error_trace_csv(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t", "err", "std1", "std2", "std3", "method", "seed"]:
            raise FormatError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 7:
                raise FormatError(f"{path}: line {lineno}: expected 7 fields")
            out.append(
                {
                    "t": int(row[0]),
                    "err": float(row[1]),
                    "std1": float(row[2]),
                    "std2": float(row[3]),
                    "std3": float(row[4]),
                    "method": row[5],
                    "seed": int(row[6]),
                }
            )
    return out


def write_recognition_csv(path, rows: list[tuple]) -> None:
    """Rows of (test_id, model_id, label, cost, strategy)."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["test_id", "model_id", "label", "cost", "strategy"])
        for test_id, model_id, label, cost, strategy in rows:
            writer.writerow([test_id, model_id, label, repr(float(cost)), strategy])


def write_confusion_csv(path, labels: list[str], matrix: np.ndarray) -> None:
    """Counts of true label (rows) vs predicted label (columns)."""
    matrix = np.asarray(matrix)
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true\\predicted", *labels])
        for label, counts in zip(labels, matrix):
            writer.writerow([label, *[int(c) for c in counts]])
