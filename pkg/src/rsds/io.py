"""Atomic file output, checkpoints and CSV helpers."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

from .errors import DataError

CHECKPOINT_VERSION = 1


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    # json emits the shortest repr that round-trips each double exactly
    return json.dumps(obj, indent=1, sort_keys=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dump_json(obj))


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def fmt_num(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        return "%.17g" % x
    return str(x)


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(fmt_num(v) for v in r) for r in rows]
    return "\n".join(lines) + "\n"


def write_csv(path, header, rows) -> None:
    atomic_write_text(path, csv_text(header, rows))


def checkpoint_dict(model, run_config: dict = None, history=None) -> dict:
    return {
        "format": "rsds-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model": model.to_dict(),
        "run_config": run_config or {},
        "loss_history": list(history or []),
    }


def save_checkpoint(path, model, run_config: dict = None, history=None) -> None:
    write_json(path, checkpoint_dict(model, run_config, history))


def load_checkpoint(path):
    from .model import RSDSModel

    obj = read_json(path)
    if obj.get("format") != "rsds-checkpoint":
        raise DataError(f"{path}: not a checkpoint file")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {obj.get('version')}")
    return RSDSModel.from_dict(obj["model"]), obj
