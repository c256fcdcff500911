"""Model checkpoints: a text header followed by binary tensor records.

File layout::

    xattn-checkpoint 1
    <INI text: a [denoiser] section, an optional [schedule] section, and a
     [params] section listing "name = d0xd1x..." in record order>
    end
    <one XATN tensor record per parameter, in the listed order>
"""

from __future__ import annotations

import configparser
import hashlib
import io
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, Params, param_shapes
from .engine import Tensor
from .engine.io import FormatError, read_tensor, write_tensor

HEADER = "xattn-checkpoint 1"
END = "end"


def config_to_section(config: DenoiserConfig) -> dict[str, str]:
    out = {}
    for k, v in config.to_dict().items():
        out[k] = " ".join(v) if isinstance(v, list) else str(v)
    return out


def config_from_section(section) -> DenoiserConfig:
    d = dict(section)
    if "block_layout" in d:
        d["block_layout"] = d["block_layout"].split()
    return DenoiserConfig.from_dict(d)


def save_checkpoint(path, params: Params, config: DenoiserConfig,
                    schedule: dict[str, str] | None = None) -> str:
    """Write ``params``; returns the SHA-256 digest of the file."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["denoiser"] = config_to_section(config)
    if schedule:
        cp["schedule"] = {k: str(v) for k, v in schedule.items()}
    names = sorted(params)
    cp["params"] = {n: "x".join(str(s) for s in params[n].shape) for n in names}
    text = io.StringIO()
    cp.write(text)
    buf = io.BytesIO()
    buf.write(f"{HEADER}\n{text.getvalue()}{END}\n".encode("ascii"))
    for n in names:
        write_tensor(buf, params[n])
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, requires_grad: bool = False) -> tuple[Params, DenoiserConfig]:
    params, config, _ = load_checkpoint_full(path, requires_grad)
    return params, config


def load_checkpoint_full(path, requires_grad: bool = False):
    """``(params, config, schedule_section)``; the section is ``{}`` when absent."""
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii", "replace").strip()
        if first != HEADER:
            raise FormatError(f"{path}: not a checkpoint (header {first!r})")
        lines = []
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: header not terminated")
            if line.strip() == END.encode():
                break
            lines.append(line.decode("ascii"))
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string("".join(lines))
        config = config_from_section(cp["denoiser"])
        expected = param_shapes(config)
        params = {}
        for name, shape_text in cp["params"].items():
            t = read_tensor(fh)
            shape = tuple(int(s) for s in shape_text.split("x")) if shape_text else ()
            if t.shape != shape or expected.get(name) != shape:
                raise FormatError(f"{path}: parameter {name} has shape {t.shape}, expected {expected.get(name)}")
            params[name] = Tensor(t.data, requires_grad=requires_grad)
        missing = set(expected) - set(params)
        if missing:
            raise FormatError(f"{path}: missing parameters {sorted(missing)}")
    schedule = dict(cp["schedule"]) if cp.has_section("schedule") else {}
    return params, config, schedule


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_digest(params: Params) -> str:
    h = hashlib.sha256()
    for n in sorted(params):
        h.update(n.encode())
        h.update(np.ascontiguousarray(params[n].data).tobytes())
    return h.hexdigest()
